#![allow(dead_code)]

use std::collections::BTreeMap;

use hsm_core::engine::{graph_input, ImageInfo};
use hsm_core::epipolar_graph::{NarrowConfig, TrackSet};
use hsm_core::geometry::{Camera, Frame, ImageId, Model};
use hsm_core::robust::TwoViewModel;
use hsm_core::synthetic::{generate, SceneKind, SceneSpec, SyntheticScene};
use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub scene: SyntheticScene,
    pub images: Vec<ImageInfo>,
    pub tracks: TrackSet,
    pub classes: BTreeMap<(ImageId, ImageId), TwoViewModel>,
}

/// Verified tracks and pair classes of a synthetic scene.
pub fn verified(spec: SceneSpec, calibrated: bool) -> Fixture {
    let scene = generate(&spec);
    let edges = scene.verified_edges(&NarrowConfig::for_diagonal(scene.diagonal(), spec.seed));
    let (tracks, classes) = graph_input(&edges, 2);
    Fixture {
        images: scene.engine_images(calibrated),
        scene,
        tracks,
        classes,
    }
}

/// True tracks with every overlapping pair declared fundamental.
pub fn exact(kind: SceneKind, n: usize, points: usize, seed: u64, calibrated: bool) -> Fixture {
    let scene = generate(&SceneSpec::new(kind, n, points, seed));
    let tracks = scene.tracks(2);
    let classes = scene
        .matches()
        .keys()
        .map(|&p| (p, TwoViewModel::Fundamental))
        .collect();
    Fixture {
        images: scene.engine_images(calibrated),
        scene,
        tracks,
        classes,
    }
}

/// Random collineation applied to a Euclidean model: cameras `P H` (with a
/// random scale), points `H^-1 X`.
pub fn projectify(m: &Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            h[(r, c)] += rng.random_range(-0.5..0.5);
        }
    }
    for c in 0..3 {
        h[(3, c)] = rng.random_range(-0.1..0.1);
    }
    transform(m, &h, &mut rng)
}

fn transform(m: &Model, h: &Matrix4<f64>, rng: &mut ChaCha8Rng) -> Model {
    let hinv = h.try_inverse().unwrap();
    let mut out = Model::new(Frame::Projective);
    for (&id, c) in &m.cameras {
        let s: f64 = rng.random_range(0.5..2.0);
        out.cameras
            .insert(id, Camera::Projective(c.matrix() * h * s));
    }
    for (&id, tp) in &m.tie_points {
        let mut tp = tp.clone();
        if let Some(x) = tp.position {
            let y: Vector4<f64> = hinv * x.push(1.0);
            tp.position = Some(y.xyz() / y.w);
        }
        out.tie_points.insert(id, tp);
    }
    out
}
