use super::GraphError;

/// Symmetric image-by-image count of broad-phase matches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchHistogram {
    pub n: usize,
    counts: Vec<u32>,
}

impl MatchHistogram {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    /// From a full matrix; fails unless symmetric with a zero diagonal.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self, GraphError> {
        let n = rows.len();
        let mut h = Self::new(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n || row[i] != 0 {
                return Err(GraphError::InvalidHistogram);
            }
            for (j, &c) in row.iter().enumerate() {
                if rows[j][i] != c {
                    return Err(GraphError::InvalidHistogram);
                }
                h.counts[i * n + j] = c;
            }
        }
        Ok(h)
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, count: u32) {
        if i != j {
            self.counts[i * self.n + j] = count;
            self.counts[j * self.n + i] = count;
        }
    }

    /// Edges with a positive count, `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, u32)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let c = self.get(i, j);
                if c > 0 {
                    out.push((i, j, c));
                }
            }
        }
        out
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(q: &[f32], set: &[Vec<f32>]) -> Option<usize> {
    let mut best = None;
    let mut best_d = f32::INFINITY;
    for (k, d) in set.iter().enumerate() {
        let dist = sq_dist(q, d);
        if dist < best_d {
            best_d = dist;
            best = Some(k);
        }
    }
    best
}

/// Counts mutual nearest neighbours (exact search) between every pair of
/// per-image descriptor sets.
pub fn broad_phase_histogram(sets: &[Vec<Vec<f32>>]) -> MatchHistogram {
    let n = sets.len();
    let mut h = MatchHistogram::new(n);
    for i in 0..n {
        for j in i + 1..n {
            let mutual = sets[i]
                .iter()
                .enumerate()
                .filter(|(k, d)| {
                    nearest(d, &sets[j])
                        .and_then(|m| nearest(&sets[j][m], &sets[i]))
                        .is_some_and(|back| back == *k)
                })
                .count();
            h.set(i, j, mutual as u32);
        }
    }
    h
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut y = x;
        while self.parent[y] != r {
            let next = self.parent[y];
            self.parent[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// Connected components of an undirected graph, each sorted, ordered by
/// smallest vertex.
pub fn connected_components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for v in 0..n {
        let r = uf.find(v);
        groups.entry(r).or_default().push(v);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

/// Union of successively extracted maximum spanning forests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    /// All selected edges, `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Edges of each extracted forest, in extraction order.
    pub trees: Vec<Vec<(usize, usize)>>,
    pub tree_weights: Vec<u64>,
    /// Number of extracted forests that span all images.
    pub achieved_connectivity: usize,
}

/// Repeats `m` times: take the maximum spanning forest of the residual graph
/// and remove its edges. Equal weights are broken by lexicographic `(i, j)`.
pub fn extract_m_connected_subgraph(
    hist: &MatchHistogram,
    m: usize,
) -> Result<Subgraph, GraphError> {
    let n = hist.n;
    let mut residual = hist.edges();
    let plain: Vec<(usize, usize)> = residual.iter().map(|&(i, j, _)| (i, j)).collect();
    let components = connected_components(n, &plain);
    if components.len() > 1 {
        return Err(GraphError::GraphDisconnected { components });
    }
    residual.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut trees = Vec::new();
    let mut tree_weights = Vec::new();
    let mut achieved = 0;
    for _ in 0..m {
        if residual.is_empty() {
            break;
        }
        let mut uf = UnionFind::new(n);
        let mut tree = Vec::new();
        let mut weight = 0u64;
        let mut rest = Vec::with_capacity(residual.len());
        for &(i, j, c) in &residual {
            if uf.union(i, j) {
                tree.push((i, j));
                weight += c as u64;
            } else {
                rest.push((i, j, c));
            }
        }
        residual = rest;
        if tree.len() + 1 == n {
            achieved += 1;
        }
        tree.sort();
        trees.push(tree);
        tree_weights.push(weight);
    }
    let mut edges: Vec<(usize, usize)> = trees.iter().flatten().copied().collect();
    edges.sort();
    Ok(Subgraph {
        edges,
        trees,
        tree_weights,
        achieved_connectivity: achieved,
    })
}
