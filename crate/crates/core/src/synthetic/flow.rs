use std::collections::VecDeque;

/// Maximum number of edge-disjoint paths between `s` and `t` in an
/// undirected graph with unit capacities (Edmonds-Karp).
pub fn max_flow_unit(n: usize, edges: &[(usize, usize)], s: usize, t: usize) -> usize {
    if s == t {
        return usize::MAX;
    }
    let mut cap = vec![vec![0i64; n]; n];
    for &(a, b) in edges {
        cap[a][b] += 1;
        cap[b][a] += 1;
    }
    let mut flow = 0;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[s] = s;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            if u == t {
                break;
            }
            for v in 0..n {
                if prev[v] == usize::MAX && cap[u][v] > 0 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[t] == usize::MAX {
            return flow;
        }
        let mut v = t;
        while v != s {
            let u = prev[v];
            cap[u][v] -= 1;
            cap[v][u] += 1;
            v = u;
        }
        flow += 1;
    }
}

/// Smallest pairwise max-flow over all vertex pairs.
pub fn all_pairs_min_cut(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut best = usize::MAX;
    for s in 0..n {
        for t in s + 1..n {
            best = best.min(max_flow_unit(n, edges, s, t));
        }
    }
    best
}
