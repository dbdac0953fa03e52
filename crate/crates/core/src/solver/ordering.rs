//! Fill-reducing orderings for symmetric sparse factorization.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use super::CsrMatrix;

/// Permutation choice for [`super::SymbolicCholesky::analyze`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ordering {
    Natural,
    MinimumDegree,
    /// Minimum degree on the leading `n` indices; the trailing indices keep their
    /// natural order and are eliminated last.
    MinimumDegreeLeading(usize),
    /// Explicit permutation, `perm[new] = old`.
    Given(Vec<usize>),
}

impl Ordering {
    pub(crate) fn permutation(&self, a: &CsrMatrix) -> Vec<usize> {
        let n = a.n_rows();
        match self {
            Ordering::Natural => (0..n).collect(),
            Ordering::MinimumDegree => minimum_degree(a, n),
            Ordering::MinimumDegreeLeading(k) => minimum_degree(a, (*k).min(n)),
            Ordering::Given(p) => p.clone(),
        }
    }
}

/// Greedy minimum-degree ordering on the elimination graph of the leading
/// `n_free` vertices. Ties go to the lowest index, so the result is deterministic.
///
/// Vertices at or beyond `n_free` still take part in the fill graph (their
/// edges raise the degree of free vertices) but are appended in natural order.
pub fn minimum_degree(a: &CsrMatrix, n_free: usize) -> Vec<usize> {
    let n = a.n_rows();
    let mut adj: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    for i in 0..n {
        for (j, _) in a.row(i) {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut eliminated = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n_free).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut perm = Vec::with_capacity(n);
    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != adj[v].len() {
            continue;
        }
        eliminated[v] = true;
        perm.push(v);
        let mut nbrs: Vec<usize> = adj[v].drain().collect();
        nbrs.sort_unstable();
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        // Neighbours of the pivot become a clique.
        for (idx, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[idx + 1..] {
                if adj[u].insert(w) {
                    adj[w].insert(u);
                }
            }
        }
        for &u in &nbrs {
            if u < n_free && !eliminated[u] {
                heap.push(Reverse((adj[u].len(), u)));
            }
        }
    }
    perm.extend(n_free..n);
    perm
}
