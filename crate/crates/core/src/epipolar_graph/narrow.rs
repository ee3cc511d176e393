use std::collections::HashMap;
use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector2};

use super::Keypoint;
use crate::geometry::{fundamental_sampson, homography_sampson, ImageId};
use crate::robust::{
    gric, msac, select_model, FundamentalProblem, GricParams, HomographyProblem, MsacConfig,
    RobustFitResult, TwoViewModel,
};

pub const ANGULAR_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NarrowConfig {
    /// Second-to-first nearest descriptor distance ratio.
    pub ratio: f64,
    pub min_matches: usize,
    /// Fraction of the putative matches that must survive verification.
    pub survivor_fraction: f64,
    pub gric_ratio: f64,
    pub msac_iterations: usize,
    pub bucket_size: f64,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl NarrowConfig {
    /// Defaults for images with diagonal `d` pixels.
    pub fn for_diagonal(d: f64, seed: u64) -> Self {
        Self {
            ratio: 1.5,
            min_matches: 10,
            survivor_fraction: 0.2,
            gric_ratio: 1.2,
            msac_iterations: 1000,
            bucket_size: d / 25.0,
            inlier_threshold: d / 600.0,
            seed,
        }
    }

    fn msac(&self, stream: u64) -> MsacConfig {
        MsacConfig {
            max_iterations: self.msac_iterations,
            ..MsacConfig::new(self.inlier_threshold, self.bucket_size, self.seed)
        }
        .with_stream(stream)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    TooFewMatches { found: usize },
    SurvivorRatio { survivors: usize, before: usize },
    Degenerate,
}

/// A verified image pair.
#[derive(Debug, Clone)]
pub struct EpipolarEdge {
    pub pair: (ImageId, ImageId),
    /// Keypoint index pairs `(in first, in second)`.
    pub matches: Vec<(usize, usize)>,
    pub model_class: TwoViewModel,
    pub fundamental: Matrix3<f64>,
    pub homography: Option<Matrix3<f64>>,
    pub inlier_count: usize,
    pub sigma_star: f64,
    pub gric_f: f64,
    pub gric_h: f64,
}

/// One of eight equal sectors of the dominant orientation.
pub fn angular_bin(angle: f64) -> usize {
    let a = angle.rem_euclid(TAU);
    ((a / (TAU / ANGULAR_BINS as f64)).floor() as usize).min(ANGULAR_BINS - 1)
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Ratio-test nearest-neighbour matching inside angular bins, followed by
/// the injectivity filter.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<(usize, usize)> {
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); ANGULAR_BINS];
    for (j, kp) in b.iter().enumerate() {
        bins[angular_bin(kp.angle)].push(j);
    }
    let mut raw = Vec::new();
    for (i, kp) in a.iter().enumerate() {
        let candidates = &bins[angular_bin(kp.angle)];
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        let mut best = None;
        for &j in candidates {
            let d = distance(&kp.descriptor, &b[j].descriptor);
            if d < d1 {
                d2 = d1;
                d1 = d;
                best = Some(j);
            } else if d < d2 {
                d2 = d;
            }
        }
        if let Some(j) = best {
            if d2.is_infinite() || d2 >= ratio * d1 && d2 > 0.0 {
                raw.push((i, j));
            }
        }
    }
    let mut uses: HashMap<usize, usize> = HashMap::new();
    for &(_, j) in &raw {
        *uses.entry(j).or_default() += 1;
    }
    raw.into_iter().filter(|(_, j)| uses[j] == 1).collect()
}

#[derive(Debug, Clone)]
pub struct TwoViewClassification {
    pub model: TwoViewModel,
    pub fundamental: RobustFitResult<Matrix3<f64>>,
    pub homography: Option<RobustFitResult<Matrix3<f64>>>,
    pub gric_f: f64,
    pub gric_h: f64,
}

impl TwoViewClassification {
    /// Inlier mask of the selected model.
    pub fn inlier_mask(&self) -> &[bool] {
        match (self.model, &self.homography) {
            (TwoViewModel::Homography, Some(h)) => &h.inlier_mask,
            _ => &self.fundamental.inlier_mask,
        }
    }
}

/// Robust F and H fits on point pairs and GRIC selection. Both criteria
/// use first-order geometric residuals and the scale of the F fit.
pub fn classify_two_view(
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
    config: &NarrowConfig,
    stream: u64,
) -> Result<TwoViewClassification, Rejection> {
    let msac_cfg = config.msac(stream);
    let f_fit = msac(&FundamentalProblem { a, b }, &msac_cfg).map_err(|_| Rejection::Degenerate)?;
    let h_fit = msac(&HomographyProblem { a, b }, &msac_cfg).ok();
    let sigma = f_fit.sigma_star.max(1e-12);
    let res_f: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(p, q)| fundamental_sampson(&f_fit.model, p, q))
        .collect();
    let gric_f = gric(&res_f, &GricParams::fundamental(sigma));
    let gric_h = match &h_fit {
        Some(h) => {
            let res_h: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(p, q)| homography_sampson(&h.model, p, q))
                .collect();
            gric(&res_h, &GricParams::homography(sigma))
        }
        None => f64::INFINITY,
    };
    let model = select_model(gric_h, gric_f, config.gric_ratio);
    Ok(TwoViewClassification {
        model,
        fundamental: f_fit,
        homography: h_fit,
        gric_f,
        gric_h,
    })
}

pub(crate) fn pair_stream(pair: (ImageId, ImageId)) -> u64 {
    ((pair.0 as u64) << 32) | pair.1 as u64
}

/// Geometric verification of putative matches between two images.
pub fn verify_matches(
    pair: (ImageId, ImageId),
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
    putative: &[(usize, usize)],
    config: &NarrowConfig,
) -> Result<EpipolarEdge, Rejection> {
    let before = putative.len();
    if before < config.min_matches {
        return Err(Rejection::TooFewMatches { found: before });
    }
    let pa: Vec<Vector2<f64>> = putative.iter().map(|&(i, _)| a[i]).collect();
    let pb: Vec<Vector2<f64>> = putative.iter().map(|&(_, j)| b[j]).collect();
    let cls = classify_two_view(&pa, &pb, config, pair_stream(pair))?;
    let mask = cls.inlier_mask();
    let matches: Vec<(usize, usize)> = putative
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| *m)
        .collect();
    let needed = config
        .min_matches
        .max((config.survivor_fraction * before as f64).ceil() as usize);
    if matches.len() < needed {
        return Err(Rejection::SurvivorRatio {
            survivors: matches.len(),
            before,
        });
    }
    let sigma_star = match (cls.model, &cls.homography) {
        (TwoViewModel::Homography, Some(h)) => h.sigma_star,
        _ => cls.fundamental.sigma_star,
    };
    Ok(EpipolarEdge {
        pair,
        inlier_count: matches.len(),
        matches,
        model_class: cls.model,
        fundamental: cls.fundamental.model,
        homography: cls.homography.map(|h| h.model),
        sigma_star,
        gric_f: cls.gric_f,
        gric_h: cls.gric_h,
    })
}

/// Descriptor matching followed by geometric verification.
pub fn narrow_phase_verify(
    pair: (ImageId, ImageId),
    a: &[Keypoint],
    b: &[Keypoint],
    config: &NarrowConfig,
) -> Result<EpipolarEdge, Rejection> {
    let putative = match_descriptors(a, b, config.ratio);
    let pa: Vec<Vector2<f64>> = a.iter().map(|k| k.xy).collect();
    let pb: Vec<Vector2<f64>> = b.iter().map(|k| k.xy).collect();
    verify_matches(pair, &pa, &pb, &putative, config)
}
