use std::collections::BTreeMap;

use super::EpipolarEdge;
use crate::geometry::ImageId;

/// Image id to keypoint index.
pub type Track = BTreeMap<ImageId, usize>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrackSet {
    /// Sorted by their smallest `(image, keypoint)` node.
    pub tracks: Vec<Track>,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Tracks with at least `min_len` images, keeping their order.
    pub fn with_min_length(&self, min_len: usize) -> TrackSet {
        TrackSet {
            tracks: self
                .tracks
                .iter()
                .filter(|t| t.len() >= min_len)
                .cloned()
                .collect(),
        }
    }
}

/// Connected components of the keypoint match graph; components that visit
/// an image twice or span fewer than `min_len` images are dropped.
pub fn tracks_from_matches<'a, I>(pairs: I, min_len: usize) -> TrackSet
where
    I: IntoIterator<Item = ((ImageId, ImageId), &'a [(usize, usize)])>,
{
    let mut ids: BTreeMap<(ImageId, usize), usize> = BTreeMap::new();
    let mut links = Vec::new();
    for ((ia, ib), matches) in pairs {
        for &(ka, kb) in matches {
            let next = ids.len();
            let a = *ids.entry((ia, ka)).or_insert(next);
            let next = ids.len();
            let b = *ids.entry((ib, kb)).or_insert(next);
            links.push((a, b));
        }
    }
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let n = p[y];
            p[y] = r;
            y = n;
        }
        r
    }
    for (a, b) in links {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<(ImageId, usize)>> = BTreeMap::new();
    for (&node, &id) in &ids {
        let root = find(&mut parent, id);
        groups.entry(root).or_default().push(node);
    }
    let mut tracks: Vec<Track> = Vec::new();
    for mut nodes in groups.into_values() {
        nodes.sort();
        let consistent = nodes.windows(2).all(|w| w[0].0 != w[1].0);
        if consistent && nodes.len() >= min_len {
            tracks.push(nodes.into_iter().collect());
        }
    }
    tracks.sort_by(|a, b| a.iter().next().cmp(&b.iter().next()));
    TrackSet { tracks }
}

/// Tracks from verified epipolar edges.
pub fn build_tracks(edges: &[EpipolarEdge], min_len: usize) -> TrackSet {
    tracks_from_matches(
        edges.iter().map(|e| (e.pair, e.matches.as_slice())),
        min_len,
    )
}
