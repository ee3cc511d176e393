use std::collections::BTreeMap;

use super::{KeypointFile, MatchEdge, MatchFile, PipelineConfig};
use crate::engine::ImageInfo;
use crate::epipolar_graph::{
    broad_phase_histogram, connected_components, extract_m_connected_subgraph, narrow_phase_verify,
    tracks_from_matches, EpipolarEdge, MatchHistogram, TrackSet,
};
use crate::geometry::{ImageId, Intrinsics};
use crate::robust::TwoViewModel;

/// Descriptors of the `count` largest-scale keypoints of an image.
fn broad_set(file: &KeypointFile, count: usize) -> Vec<Vec<f32>> {
    let mut order: Vec<usize> = (0..file.keypoints.len()).collect();
    order.sort_by(|&a, &b| {
        file.keypoints[b]
            .scale
            .total_cmp(&file.keypoints[a].scale)
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(count)
        .map(|k| file.keypoints[k].descriptor.clone())
        .collect()
}

/// Union of the m-connected subgraphs of every connected component.
fn candidate_pairs(hist: &MatchHistogram, m: usize) -> Vec<(ImageId, ImageId)> {
    let edges: Vec<(usize, usize)> = hist.edges().iter().map(|&(i, j, _)| (i, j)).collect();
    let mut pairs = Vec::new();
    for comp in connected_components(hist.n, &edges) {
        if comp.len() < 2 {
            continue;
        }
        let mut sub = MatchHistogram::new(comp.len());
        for (a, &i) in comp.iter().enumerate() {
            for (b, &j) in comp.iter().enumerate().skip(a + 1) {
                sub.set(a, b, hist.get(i, j));
            }
        }
        let g = extract_m_connected_subgraph(&sub, m).expect("component is connected");
        pairs.extend(g.edges.iter().map(|&(a, b)| {
            let (i, j) = (comp[a], comp[b]);
            (i.min(j), i.max(j))
        }));
    }
    pairs.sort_unstable();
    pairs
}

/// Broad-phase pair proposal followed by narrow-phase verification of the
/// proposed pairs, spread over `config.workers` threads.
pub fn match_images(files: &[KeypointFile], config: &PipelineConfig) -> Vec<EpipolarEdge> {
    let sets: Vec<Vec<Vec<f32>>> = files
        .iter()
        .map(|f| broad_set(f, config.broad_keypoints))
        .collect();
    let pairs = candidate_pairs(&broad_phase_histogram(&sets), config.edge_connectivity);
    let verify = |&(a, b): &(ImageId, ImageId)| {
        let d = diagonal(&files[a]).min(diagonal(&files[b]));
        narrow_phase_verify(
            (a, b),
            &files[a].keypoints,
            &files[b].keypoints,
            &config.narrow_config(d),
        )
        .ok()
    };
    let chunk = pairs.len().div_ceil(config.workers.max(1)).max(1);
    let results: Vec<Vec<Option<EpipolarEdge>>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(verify).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("verification thread"))
            .collect()
    });
    results.into_iter().flatten().flatten().collect()
}

fn diagonal(f: &KeypointFile) -> f64 {
    f.size.0.hypot(f.size.1)
}

impl From<&EpipolarEdge> for MatchEdge {
    fn from(e: &EpipolarEdge) -> Self {
        Self {
            pair: e.pair,
            model_class: e.model_class,
            matches: e.matches.clone(),
        }
    }
}

impl MatchFile {
    pub fn from_edges(edges: &[EpipolarEdge]) -> Self {
        Self {
            edges: edges.iter().map(MatchEdge::from).collect(),
        }
    }

    /// Tracks spanning at least `min_len` images and the class of every pair.
    pub fn graph(&self, min_len: usize) -> (TrackSet, BTreeMap<(ImageId, ImageId), TwoViewModel>) {
        let tracks = tracks_from_matches(
            self.edges.iter().map(|e| (e.pair, e.matches.as_slice())),
            min_len,
        );
        let classes = self
            .edges
            .iter()
            .map(|e| {
                (
                    (e.pair.0.min(e.pair.1), e.pair.0.max(e.pair.1)),
                    e.model_class,
                )
            })
            .collect();
        (tracks, classes)
    }
}

/// Engine image descriptions; `intrinsics` supplies the calibrated images.
pub fn engine_images(
    files: &[KeypointFile],
    intrinsics: Option<&BTreeMap<ImageId, Intrinsics>>,
) -> Vec<ImageInfo> {
    files
        .iter()
        .enumerate()
        .map(|(i, f)| ImageInfo {
            size: f.size,
            keypoints: f.keypoints.iter().map(|k| k.xy).collect(),
            intrinsics: intrinsics.and_then(|k| k.get(&i).copied()),
        })
        .collect()
}
