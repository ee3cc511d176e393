use std::fmt::Write as _;
use std::path::PathBuf;

use super::{formats::Lines, ParseError};
use crate::bundle::BaOptions;
use crate::engine::{EngineConfig, Mode};
use crate::epipolar_graph::NarrowConfig;

/// Prefix of environment variables overriding configuration keys.
pub const ENV_PREFIX: &str = "HSM_";

trait ConfigValue: Sized {
    fn read(s: &str) -> Result<Self, String>;
    fn emit(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn read(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!("invalid value `{s}`"))
            }
            fn emit(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64);

impl ConfigValue for Mode {
    fn read(s: &str) -> Result<Self, String> {
        Mode::parse(s).ok_or_else(|| format!("invalid mode `{s}` (calibrated or autocalibrated)"))
    }
    fn emit(&self) -> String {
        self.name().into()
    }
}

impl ConfigValue for Option<PathBuf> {
    fn read(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn emit(&self) -> String {
        self.as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    }
}

macro_rules! pipeline_config {
    ($($group:literal { $($(#[$doc:meta])* $key:ident : $ty:ty = $default:expr,)* })*) => {
        /// Every settable parameter of the pipeline. Thresholds written as
        /// divisors are `D / divisor` with `D` the diagonal of each image.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $($($(#[$doc])* pub $key: $ty,)*)*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $($($key: $default,)*)* }
            }
        }

        impl PipelineConfig {
            /// Key names grouped as in the emitted file.
            pub const GROUPS: &'static [(&'static str, &'static [&'static str])] =
                &[$(($group, &[$(stringify!($key)),*])),*];

            /// Sets one key from its textual value without validating.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($(stringify!($key) => self.$key = ConfigValue::read(value.trim())?,)*)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($(stringify!($key) => Some(self.$key.emit()),)*)*
                    _ => None,
                }
            }
        }
    };
}

pipeline_config! {
    "Keypoint detection" {
        pyramid_levels: usize = 12,
        keypoints_per_image: usize = 7500,
    }
    "Matching - broad" {
        /// Largest-scale keypoints per image used for pair proposal.
        broad_keypoints: usize = 300,
        edge_connectivity: usize = 8,
    }
    "Matching - narrow" {
        match_ratio: f64 = 1.5,
        msac_iterations: usize = 1000,
        bucket_divisor: f64 = 25.0,
        min_matches: usize = 10,
        gric_ratio: f64 = 1.2,
        min_track_length: usize = 3,
    }
    "Reconstruction" {
        ba_iterations: usize = 100,
        reproj_divisor: f64 = 1800.0,
    }
    "Autocalibration" {
        autocal_cameras: usize = 4,
        fix_internals_after: usize = 25,
    }
    "Prologue" {
        final_min_track_length: usize = 2,
        final_reproj_divisor: f64 = 2400.0,
    }
    "Additional" {
        /// Two-view MSAC residual cap divisor.
        match_divisor: f64 = 600.0,
        survivor_fraction: f64 = 0.2,
        cluster_l: usize = 3,
    }
    "Run" {
        mode: Mode = Mode::Autocalibrated,
        seed: u64 = 0,
        workers: usize = 1,
        keypoints: Option<PathBuf> = None,
        matches: Option<PathBuf> = None,
        intrinsics: Option<PathBuf> = None,
        output: Option<PathBuf> = None,
    }
}

impl PipelineConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        Self::GROUPS.iter().flat_map(|(_, k)| k.iter().copied())
    }

    /// `key = value` lines grouped under comment headings.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (group, keys)) in Self::GROUPS.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "# {group}");
            for k in *keys {
                let v = self.get(k).expect("declared key");
                if v.is_empty() {
                    let _ = writeln!(s, "{k} =");
                } else {
                    let _ = writeln!(s, "{k} = {v}");
                }
            }
        }
        s
    }

    /// Applies `key = value` lines over `self`; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ParseError> {
        let mut lines = Lines::new(text);
        while let Some((n, l)) = lines.next_line() {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| ParseError::new(n, "expected `key = value`"))?;
            self.set(k.trim(), v).map_err(|e| ParseError::new(n, e))?;
        }
        Ok(())
    }

    /// Applies `HSM_<KEY>` variables (key upper-cased) over `self`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), String>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            self.set(&key, v.as_ref())
                .map_err(|e| format!("{}{}: {e}", ENV_PREFIX, key.to_ascii_uppercase()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("bucket_divisor", self.bucket_divisor),
            ("reproj_divisor", self.reproj_divisor),
            ("final_reproj_divisor", self.final_reproj_divisor),
            ("match_divisor", self.match_divisor),
            ("gric_ratio", self.gric_ratio),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{k} must be positive and finite, got {v}"));
            }
        }
        let at_least = [
            ("pyramid_levels", self.pyramid_levels, 1),
            ("keypoints_per_image", self.keypoints_per_image, 1),
            ("broad_keypoints", self.broad_keypoints, 1),
            ("edge_connectivity", self.edge_connectivity, 1),
            ("msac_iterations", self.msac_iterations, 1),
            ("min_matches", self.min_matches, 8),
            ("min_track_length", self.min_track_length, 2),
            ("ba_iterations", self.ba_iterations, 1),
            ("autocal_cameras", self.autocal_cameras, 2),
            ("fix_internals_after", self.fix_internals_after, 1),
            ("final_min_track_length", self.final_min_track_length, 2),
            ("cluster_l", self.cluster_l, 1),
            ("workers", self.workers, 1),
        ];
        for (k, v, min) in at_least {
            if v < min {
                return Err(format!("{k} must be at least {min}, got {v}"));
            }
        }
        if !(self.match_ratio >= 1.0 && self.match_ratio.is_finite()) {
            return Err(format!(
                "match_ratio must be at least 1, got {}",
                self.match_ratio
            ));
        }
        if !(0.0..=1.0).contains(&self.survivor_fraction) {
            return Err(format!(
                "survivor_fraction must lie in [0, 1], got {}",
                self.survivor_fraction
            ));
        }
        if self.final_min_track_length > self.min_track_length {
            return Err("final_min_track_length exceeds min_track_length".into());
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            mode: self.mode,
            reproj_divisor: self.reproj_divisor,
            final_reproj_divisor: self.final_reproj_divisor,
            match_divisor: self.match_divisor,
            bucket_divisor: self.bucket_divisor,
            min_track_length: self.min_track_length,
            final_min_track_length: self.final_min_track_length,
            autocal_min_cameras: self.autocal_cameras,
            fix_internals_after: self.fix_internals_after,
            cluster_l: self.cluster_l,
            ba: BaOptions {
                max_iterations: self.ba_iterations,
                ..BaOptions::default()
            },
            msac_iterations: self.msac_iterations,
            seed: self.seed,
            ..EngineConfig::default()
        }
    }

    /// Verification settings for a pair whose smaller diagonal is `d`.
    pub fn narrow_config(&self, d: f64) -> NarrowConfig {
        NarrowConfig {
            ratio: self.match_ratio,
            min_matches: self.min_matches,
            survivor_fraction: self.survivor_fraction,
            gric_ratio: self.gric_ratio,
            msac_iterations: self.msac_iterations,
            bucket_size: d / self.bucket_divisor,
            inlier_threshold: d / self.match_divisor,
            seed: self.seed,
        }
    }
}
