//! Image affinity and balanced simple-linkage agglomerative clustering.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;
use thiserror::Error;

use crate::geometry::ImageId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("no admissible merge is left")]
    NoMergeAvailable,
    #[error("unknown or inactive cluster {0}")]
    UnknownCluster(usize),
}

/// Area of the convex hull (monotone chain); fewer than three distinct
/// points have zero area.
pub fn convex_hull_area(points: &[Vector2<f64>]) -> f64 {
    let mut p: Vec<(f64, f64)> = points.iter().map(|v| (v.x, v.y)).collect();
    p.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    p.dedup();
    if p.len() < 3 {
        return 0.0;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0
            {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    let n = hull.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    0.5 * twice.abs()
}

/// `1/2 |Si ^ Sj| / |Si v Sj| + 1/2 (CH_i + CH_j) / (A_i + A_j)`, where the
/// hulls are taken over the keypoints of the shared tie-points in each image.
/// Sets map a track id to its keypoint position in that image.
pub fn affinity(
    si: &BTreeMap<usize, Vector2<f64>>,
    sj: &BTreeMap<usize, Vector2<f64>>,
    area_i: f64,
    area_j: f64,
) -> f64 {
    let shared: Vec<usize> = si.keys().filter(|k| sj.contains_key(k)).copied().collect();
    if shared.is_empty() {
        return 0.0;
    }
    let union = si.len() + sj.len() - shared.len();
    let jaccard = shared.len() as f64 / union as f64;
    let hi: Vec<Vector2<f64>> = shared.iter().map(|k| si[k]).collect();
    let hj: Vec<Vector2<f64>> = shared.iter().map(|k| sj[k]).collect();
    let coverage = (convex_hull_area(&hi) + convex_hull_area(&hj)) / (area_i + area_j);
    (0.5 * jaccard + 0.5 * coverage).clamp(0.0, 1.0)
}

/// Pairwise affinities; unit diagonal.
pub fn affinity_matrix(
    per_image: &[BTreeMap<usize, Vector2<f64>>],
    areas: &[f64],
) -> Vec<Vec<f64>> {
    let n = per_image.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        a[i][i] = 1.0;
        for j in i + 1..n {
            let v = affinity(&per_image[i], &per_image[j], areas[i], areas[j]);
            a[i][j] = v;
            a[j][i] = v;
        }
    }
    a
}

/// `1 - a`; pairs without affinity are unreachable (infinite distance).
pub fn distances_from_affinity(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| {
                    if i == j {
                        0.0
                    } else if v > 0.0 {
                        1.0 - v
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannedAction {
    StereoModel,
    ResectionIntersection,
    Merge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DendrogramNode {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub action: PlannedAction,
    /// Images under this node, sorted.
    pub images: Vec<ImageId>,
}

/// Binary merge tree. Ids `0..n` are leaves; internal node `k` has id `n + k`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dendrogram {
    pub leaves: usize,
    pub nodes: Vec<DendrogramNode>,
}

impl Dendrogram {
    fn node_height(&self, id: usize) -> usize {
        if id < self.leaves {
            0
        } else {
            let n = &self.nodes[id - self.leaves];
            1 + self.node_height(n.left).max(self.node_height(n.right))
        }
    }

    /// Roots of the (possibly partial) forest.
    pub fn roots(&self) -> Vec<usize> {
        let mut used = BTreeSet::new();
        for n in &self.nodes {
            used.insert(n.left);
            used.insert(n.right);
        }
        (0..self.leaves + self.nodes.len())
            .filter(|id| !used.contains(id))
            .collect()
    }

    /// Longest root-to-leaf path, in edges.
    pub fn height(&self) -> usize {
        self.roots()
            .into_iter()
            .map(|r| self.node_height(r))
            .max()
            .unwrap_or(0)
    }

    /// Sum over internal nodes of `(images under node)^p`.
    pub fn cardinality_cost(&self, p: i32) -> f64 {
        self.nodes
            .iter()
            .map(|n| (n.images.len() as f64).powi(p))
            .sum()
    }

    /// Indented text rendering, one node per line.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for root in self.roots() {
            self.render(root, 0, &mut out);
        }
        out
    }

    fn render(&self, id: usize, depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        if id < self.leaves {
            out.push_str(&format!("{pad}image {id}\n"));
        } else {
            let n = &self.nodes[id - self.leaves];
            out.push_str(&format!(
                "{pad}node {id} {:?} d={:.6} images={}\n",
                n.action,
                n.distance,
                n.images.len()
            ));
            self.render(n.left, depth + 1, out);
            self.render(n.right, depth + 1, out);
        }
    }
}

/// Lazily driven balanced simple-linkage clustering: among the `l` closest
/// cluster pairs the one with the smallest cardinality sum is merged.
#[derive(Debug, Clone)]
pub struct ClusterState {
    l: usize,
    active: BTreeMap<usize, Vec<ImageId>>,
    /// Simple-linkage distance between active clusters, keyed `(a, b)` with `a < b`.
    dist: BTreeMap<(usize, usize), f64>,
    pub dendrogram: Dendrogram,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    a: usize,
    b: usize,
    distance: f64,
    card: usize,
    lex: (ImageId, ImageId),
}

impl ClusterState {
    pub fn new(distances: &[Vec<f64>], l: usize) -> Self {
        let n = distances.len();
        let active = (0..n).map(|i| (i, vec![i])).collect();
        let mut dist = BTreeMap::new();
        for i in 0..n {
            for j in i + 1..n {
                dist.insert((i, j), distances[i][j].min(distances[j][i]));
            }
        }
        Self {
            l: l.max(1),
            active,
            dist,
            dendrogram: Dendrogram {
                leaves: n,
                nodes: Vec::new(),
            },
        }
    }

    pub fn active_clusters(&self) -> impl Iterator<Item = (usize, &[ImageId])> {
        self.active.iter().map(|(&id, imgs)| (id, imgs.as_slice()))
    }

    pub fn images(&self, cluster: usize) -> Option<&[ImageId]> {
        self.active.get(&cluster).map(|v| v.as_slice())
    }

    fn candidates(&self, rejected: &BTreeSet<(usize, usize)>) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = self
            .dist
            .iter()
            .filter(|(k, d)| d.is_finite() && !rejected.contains(k))
            .map(|(&(a, b), &distance)| {
                let (ma, mb) = (self.active[&a][0], self.active[&b][0]);
                Candidate {
                    a,
                    b,
                    distance,
                    card: self.active[&a].len() + self.active[&b].len(),
                    lex: (ma.min(mb), ma.max(mb)),
                }
            })
            .collect();
        let balanced = self.l > 1;
        out.sort_by(|x, y| {
            x.distance
                .total_cmp(&y.distance)
                .then(if balanced {
                    x.card.cmp(&y.card)
                } else {
                    std::cmp::Ordering::Equal
                })
                .then(x.lex.cmp(&y.lex))
        });
        out
    }

    /// Best admissible pair under the balancing rule, skipping rejected
    /// cluster pairs.
    pub fn next_merge(
        &self,
        rejected: &BTreeSet<(usize, usize)>,
    ) -> Result<(usize, usize), ClusterError> {
        let cands = self.candidates(rejected);
        cands
            .iter()
            .take(self.l)
            .min_by(|x, y| {
                x.card
                    .cmp(&y.card)
                    .then(x.distance.total_cmp(&y.distance))
                    .then(x.lex.cmp(&y.lex))
            })
            .map(|c| (c.a, c.b))
            .ok_or(ClusterError::NoMergeAvailable)
    }

    /// Merges two active clusters and returns the new cluster id.
    pub fn merge(&mut self, a: usize, b: usize) -> Result<usize, ClusterError> {
        let key = (a.min(b), a.max(b));
        let distance = *self.dist.get(&key).ok_or(ClusterError::UnknownCluster(b))?;
        let ia = self
            .active
            .remove(&a)
            .ok_or(ClusterError::UnknownCluster(a))?;
        let ib = self
            .active
            .remove(&b)
            .ok_or(ClusterError::UnknownCluster(b))?;
        let id = self.dendrogram.leaves + self.dendrogram.nodes.len();
        let action = match (ia.len(), ib.len()) {
            (1, 1) => PlannedAction::StereoModel,
            (1, _) | (_, 1) => PlannedAction::ResectionIntersection,
            _ => PlannedAction::Merge,
        };
        let mut images: Vec<ImageId> = ia.iter().chain(&ib).copied().collect();
        images.sort_unstable();
        let others: Vec<usize> = self.active.keys().copied().collect();
        for k in others {
            let da = self
                .dist
                .remove(&(a.min(k), a.max(k)))
                .unwrap_or(f64::INFINITY);
            let db = self
                .dist
                .remove(&(b.min(k), b.max(k)))
                .unwrap_or(f64::INFINITY);
            self.dist.insert((k.min(id), k.max(id)), da.min(db));
        }
        self.dist.remove(&key);
        self.dendrogram.nodes.push(DendrogramNode {
            left: a,
            right: b,
            distance,
            action,
            images: images.clone(),
        });
        self.active.insert(id, images);
        Ok(id)
    }
}

/// Runs the balanced clustering to completion (or until no finite-distance
/// pair remains).
pub fn build_balanced_dendrogram(distances: &[Vec<f64>], l: usize) -> Dendrogram {
    let mut state = ClusterState::new(distances, l);
    let none = BTreeSet::new();
    while let Ok((a, b)) = state.next_merge(&none) {
        state.merge(a, b).expect("candidate clusters are active");
    }
    state.dendrogram
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(pos: &[f64]) -> Vec<Vec<f64>> {
        pos.iter()
            .map(|a| pos.iter().map(|b| (a - b).abs()).collect())
            .collect()
    }

    fn uniform(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect()
    }

    #[test]
    fn hull_of_square_and_degenerate() {
        let sq = [
            Vector2::new(0.0, 0.0),
            Vector2::new(2.0, 0.0),
            Vector2::new(2.0, 2.0),
            Vector2::new(0.0, 2.0),
            Vector2::new(1.0, 1.0),
        ];
        assert!((convex_hull_area(&sq) - 4.0).abs() < 1e-12);
        assert_eq!(convex_hull_area(&sq[..2]), 0.0);
    }

    #[test]
    fn affinity_examples() {
        let full: BTreeMap<usize, Vector2<f64>> = [
            (0, Vector2::new(0.0, 0.0)),
            (1, Vector2::new(10.0, 0.0)),
            (2, Vector2::new(10.0, 10.0)),
            (3, Vector2::new(0.0, 10.0)),
        ]
        .into();
        assert!((affinity(&full, &full, 100.0, 100.0) - 1.0).abs() < 1e-12);
        let other: BTreeMap<usize, Vector2<f64>> = [(9, Vector2::zeros())].into();
        assert_eq!(affinity(&full, &other, 100.0, 100.0), 0.0);
        // Jaccard 4/8, each hull covers a quarter of the image.
        let mut si = full.clone();
        let mut sj = full.clone();
        for k in 10..12 {
            si.insert(k, Vector2::zeros());
        }
        for k in 20..22 {
            sj.insert(k, Vector2::zeros());
        }
        assert!((affinity(&si, &sj, 400.0, 400.0) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn line_examples() {
        let d = line(&[0.0, 1.0, 3.0, 6.0]);
        assert_eq!(build_balanced_dendrogram(&d, 1).height(), 3);
        assert_eq!(build_balanced_dendrogram(&d, 2).height(), 2);
        assert_eq!(build_balanced_dendrogram(&uniform(8), 4).height(), 3);
    }

    #[test]
    fn rejection_skips_to_next_candidate() {
        let d = line(&[0.0, 1.0, 3.0, 6.0]);
        let state = ClusterState::new(&d, 1);
        let mut rejected = BTreeSet::new();
        assert_eq!(state.next_merge(&rejected), Ok((0, 1)));
        rejected.insert((0, 1));
        assert_eq!(state.next_merge(&rejected), Ok((1, 2)));
        for a in 0..4 {
            for b in a + 1..4 {
                rejected.insert((a, b));
            }
        }
        assert_eq!(
            state.next_merge(&rejected),
            Err(ClusterError::NoMergeAvailable)
        );
    }

    #[test]
    fn actions_follow_child_types() {
        let dg = build_balanced_dendrogram(&line(&[0.0, 1.0, 3.0, 6.0]), 1);
        let acts: Vec<_> = dg.nodes.iter().map(|n| n.action).collect();
        assert_eq!(
            acts,
            vec![
                PlannedAction::StereoModel,
                PlannedAction::ResectionIntersection,
                PlannedAction::ResectionIntersection
            ]
        );
    }
}
