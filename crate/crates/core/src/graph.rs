//! Bipartite person-firm graph: connected components, bridges and leave-out
//! connected sets.
//!
//! Vertices `0..n_persons` are persons and `n_persons..n_persons + n_firms` are
//! firms. One edge per distinct match, carrying its observation count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::Panel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("empty leave-out connected set")]
    EmptyLeaveOutSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub person: usize,
    pub firm: usize,
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    n_persons: usize,
    n_firms: usize,
    edges: Vec<Edge>,
    /// Incident edge ids per vertex.
    adjacency: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLabeling {
    /// Component id per vertex. Ids follow the lowest vertex index they contain.
    pub component: Vec<usize>,
    /// Vertex count per component.
    pub sizes: Vec<usize>,
    /// Observation count per component.
    pub obs: Vec<usize>,
    /// Component with the most observations; ties go to the lowest id.
    pub largest: usize,
}

impl ComponentLabeling {
    pub fn n_components(&self) -> usize {
        self.sizes.len()
    }
}

/// Which unit a leave-out estimator removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeaveOutLevel {
    /// Single observation: a match with two or more observations never disconnects.
    Obs,
    /// Whole match: every match can be left out regardless of its length.
    Match,
}

impl BipartiteGraph {
    pub fn new(n_persons: usize, n_firms: usize, edges: Vec<Edge>) -> Self {
        let mut adjacency = vec![Vec::new(); n_persons + n_firms];
        for (id, e) in edges.iter().enumerate() {
            adjacency[e.person].push(id);
            adjacency[n_persons + e.firm].push(id);
        }
        Self {
            n_persons,
            n_firms,
            edges,
            adjacency,
        }
    }

    pub fn from_panel(panel: &Panel) -> Self {
        let edges = panel
            .match_index()
            .matches
            .into_iter()
            .map(|m| Edge {
                person: m.person,
                firm: m.firm,
                multiplicity: m.n_obs,
            })
            .collect();
        Self::new(panel.n_persons(), panel.n_firms(), edges)
    }

    pub fn n_persons(&self) -> usize {
        self.n_persons
    }

    pub fn n_firms(&self) -> usize {
        self.n_firms
    }

    pub fn n_vertices(&self) -> usize {
        self.n_persons + self.n_firms
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn firm_vertex(&self, firm: usize) -> usize {
        self.n_persons + firm
    }

    /// Incident edge ids of vertex `v`.
    pub fn incident(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    /// Endpoint of edge `e` opposite to `v`.
    pub fn other_end(&self, e: usize, v: usize) -> usize {
        let edge = &self.edges[e];
        let fv = self.n_persons + edge.firm;
        if v == edge.person {
            fv
        } else {
            edge.person
        }
    }

    /// Same vertex set, only the edges with `keep[e] == true`.
    pub fn retain_edges(&self, keep: &[bool]) -> Self {
        let edges = self
            .edges
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(e, _)| *e)
            .collect();
        Self::new(self.n_persons, self.n_firms, edges)
    }

    /// Persons with at least two distinct employers.
    pub fn movers(&self) -> usize {
        (0..self.n_persons).filter(|&p| self.adjacency[p].len() >= 2).count()
    }

    /// Persons with at least one edge.
    pub fn active_persons(&self) -> usize {
        (0..self.n_persons).filter(|&p| !self.adjacency[p].is_empty()).count()
    }

    pub fn total_obs(&self) -> usize {
        self.edges.iter().map(|e| e.multiplicity).sum()
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Union-find labeling. Isolated vertices form their own (zero-observation) components.
pub fn connected_components(g: &BipartiteGraph) -> ComponentLabeling {
    let n = g.n_vertices();
    let mut uf = UnionFind::new(n);
    for e in &g.edges {
        uf.union(e.person, g.n_persons + e.firm);
    }
    let mut root_id = vec![usize::MAX; n];
    let mut component = vec![0; n];
    let mut sizes = Vec::new();
    for v in 0..n {
        let r = uf.find(v);
        if root_id[r] == usize::MAX {
            root_id[r] = sizes.len();
            sizes.push(0);
        }
        component[v] = root_id[r];
        sizes[root_id[r]] += 1;
    }
    let mut obs = vec![0; sizes.len()];
    for e in &g.edges {
        obs[component[e.person]] += e.multiplicity;
    }
    let largest = obs
        .iter()
        .enumerate()
        .fold(0, |best, (id, &o)| if o > obs[best] { id } else { best });
    ComponentLabeling {
        component,
        sizes,
        obs,
        largest,
    }
}

/// Observations whose match lies in the largest component, densely reindexed.
pub fn restrict_largest(panel: &Panel, labeling: &ComponentLabeling) -> Panel {
    let keep: Vec<bool> = panel
        .persons()
        .iter()
        .map(|&p| labeling.component[p] == labeling.largest)
        .collect();
    if keep.iter().all(|k| *k) {
        return panel.clone();
    }
    panel.subset(&keep)
}

/// Convenience: build the graph, label it and keep the largest component.
pub fn largest_component(panel: &Panel) -> Panel {
    let g = BipartiteGraph::from_panel(panel);
    restrict_largest(panel, &connected_components(&g))
}

/// Bridge edges of the simple match graph, found in one iterative low-link DFS.
fn structural_bridges(g: &BipartiteGraph) -> Vec<bool> {
    let n = g.n_vertices();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut is_bridge = vec![false; g.edges.len()];
    let mut timer = 0;
    // (vertex, edge used to enter it, next incident position)
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        stack.push((root, usize::MAX, 0));
        while let Some(top) = stack.last_mut() {
            let (v, via, pos) = *top;
            if pos < g.adjacency[v].len() {
                top.2 += 1;
                let e = g.adjacency[v][pos];
                if e == via {
                    continue;
                }
                let u = g.other_end(e, v);
                if disc[u] == usize::MAX {
                    disc[u] = timer;
                    low[u] = timer;
                    timer += 1;
                    stack.push((u, e, 0));
                } else {
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if let Some(&(parent, _, _)) = stack.last() {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > disc[parent] {
                        is_bridge[via] = true;
                    }
                }
            }
        }
    }
    is_bridge
}

/// Edges whose removal (at the given leave-out level) disconnects their component.
pub fn bridges(g: &BipartiteGraph, level: LeaveOutLevel) -> Vec<usize> {
    structural_bridges(g)
        .into_iter()
        .enumerate()
        .filter(|&(e, b)| b && (level == LeaveOutLevel::Match || g.edges[e].multiplicity == 1))
        .map(|(e, _)| e)
        .collect()
}

/// Largest subgraph in which no retained unit is a bridge.
///
/// Bridges are pruned, the largest remaining component (by observations) is
/// kept, and for the match level persons with a single employer are dropped;
/// this repeats until nothing changes. The result keeps the vertex numbering
/// of `g`; vertices outside the set are isolated.
pub fn leave_out_connected_set(
    g: &BipartiteGraph,
    level: LeaveOutLevel,
) -> Result<BipartiteGraph, GraphError> {
    let mut current = g.clone();
    loop {
        let mut keep = vec![true; current.edges.len()];
        for e in bridges(&current, level) {
            keep[e] = false;
        }
        if level == LeaveOutLevel::Match {
            for (e, edge) in current.edges.iter().enumerate() {
                if current.adjacency[edge.person].len() < 2 {
                    keep[e] = false;
                }
            }
        }
        let pruned = current.retain_edges(&keep);
        if pruned.is_empty() {
            return Err(GraphError::EmptyLeaveOutSet);
        }
        let lab = connected_components(&pruned);
        let in_largest: Vec<bool> = pruned
            .edges
            .iter()
            .map(|e| lab.component[e.person] == lab.largest)
            .collect();
        let next = pruned.retain_edges(&in_largest);
        if next.edges.len() == current.edges.len() {
            return Ok(next);
        }
        current = next;
    }
}

/// Observations whose match is an edge of `g` (a subgraph of the panel's graph).
pub fn restrict_to_graph(panel: &Panel, g: &BipartiteGraph) -> Panel {
    let mut allowed = std::collections::HashSet::new();
    for e in g.edges() {
        allowed.insert((e.person, e.firm));
    }
    let keep: Vec<bool> = panel
        .persons()
        .iter()
        .zip(panel.firms())
        .map(|(&p, &f)| allowed.contains(&(p, f)))
        .collect();
    panel.subset(&keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDiagnostics {
    pub n_obs: usize,
    pub n_matches: usize,
    pub n_persons: usize,
    pub n_firms: usize,
    pub components: usize,
    /// Vertex counts of the components, largest first.
    pub component_sizes: Vec<usize>,
    pub largest_component_obs: usize,
    pub largest_component_obs_share: f64,
    /// Bridges in the match graph, ignoring multiplicity.
    pub bridges_match: usize,
    /// Bridges that are also single-observation matches.
    pub bridges_obs: usize,
    pub movers: usize,
    pub mover_share: f64,
}

pub fn diagnose(panel: &Panel) -> GraphDiagnostics {
    let g = BipartiteGraph::from_panel(panel);
    let lab = connected_components(&g);
    let mut sizes = lab.sizes.clone();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let largest_obs = lab.obs.get(lab.largest).copied().unwrap_or(0);
    let movers = g.movers();
    GraphDiagnostics {
        n_obs: panel.n_obs(),
        n_matches: g.edges.len(),
        n_persons: panel.n_persons(),
        n_firms: panel.n_firms(),
        components: lab.n_components(),
        component_sizes: sizes,
        largest_component_obs: largest_obs,
        largest_component_obs_share: if panel.n_obs() > 0 {
            largest_obs as f64 / panel.n_obs() as f64
        } else {
            0.0
        },
        bridges_match: bridges(&g, LeaveOutLevel::Match).len(),
        bridges_obs: bridges(&g, LeaveOutLevel::Obs).len(),
        movers,
        mover_share: if panel.n_persons() > 0 {
            movers as f64 / panel.n_persons() as f64
        } else {
            0.0
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Observation;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn panel_from(rows: &[(&str, &str, i64)]) -> Panel {
        Panel::from_observations(
            rows.iter()
                .map(|(p, f, t)| Observation {
                    person: p.to_string(),
                    firm: f.to_string(),
                    period: *t,
                    y: 0.0,
                    x: vec![],
                })
                .collect(),
            vec![],
        )
        .unwrap()
    }

    fn graph(np: usize, nf: usize, edges: &[(usize, usize, usize)]) -> BipartiteGraph {
        BipartiteGraph::new(
            np,
            nf,
            edges
                .iter()
                .map(|&(person, firm, multiplicity)| Edge {
                    person,
                    firm,
                    multiplicity,
                })
                .collect(),
        )
    }

    fn bfs_labels(g: &BipartiteGraph) -> Vec<usize> {
        let n = g.n_vertices();
        let mut lab = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if lab[s] != usize::MAX {
                continue;
            }
            lab[s] = next;
            let mut q = VecDeque::from([s]);
            while let Some(v) = q.pop_front() {
                for &e in g.incident(v) {
                    let u = g.other_end(e, v);
                    if lab[u] == usize::MAX {
                        lab[u] = next;
                        q.push_back(u);
                    }
                }
            }
            next += 1;
        }
        lab
    }

    fn connected_ignoring(g: &BipartiteGraph, skip: Option<usize>) -> bool {
        let keep: Vec<bool> = (0..g.edges().len()).map(|e| Some(e) != skip).collect();
        let h = g.retain_edges(&keep);
        let lab = connected_components(&h);
        let active: Vec<usize> = (0..h.n_vertices()).filter(|&v| !h.incident(v).is_empty()).collect();
        // Every vertex that had an edge in g must still be in one component.
        let had: Vec<usize> = (0..g.n_vertices()).filter(|&v| !g.incident(v).is_empty()).collect();
        active.len() == had.len() && had.iter().all(|&v| lab.component[v] == lab.component[had[0]])
    }

    #[test]
    fn from_panel_cases() {
        let toy = panel_from(&[("p1", "f1", 1), ("p1", "f2", 2), ("p2", "f2", 2)]);
        let g = BipartiteGraph::from_panel(&toy);
        assert_eq!(g.edges().len(), 3);
        assert!(g.edges().iter().all(|e| e.multiplicity == 1));

        let five = panel_from(&[("p", "f", 1), ("p", "f", 2), ("p", "f", 3), ("p", "f", 4), ("p", "f", 5)]);
        let g = BipartiteGraph::from_panel(&five);
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0].multiplicity, 5);

        let empty = panel_from(&[]);
        assert!(BipartiteGraph::from_panel(&empty).is_empty());
    }

    #[test]
    fn components_cases() {
        let toy = panel_from(&[("p1", "f1", 1), ("p1", "f2", 2), ("p2", "f2", 2)]);
        let lab = connected_components(&BipartiteGraph::from_panel(&toy));
        assert_eq!(lab.n_components(), 1);
        assert_eq!(lab.sizes, vec![4]);

        let two = panel_from(&[("p1", "f1", 1), ("p2", "f2", 1)]);
        let lab = connected_components(&BipartiteGraph::from_panel(&two));
        assert_eq!(lab.sizes, vec![2, 2]);
    }

    #[test]
    fn restrict_largest_cases() {
        let toy = panel_from(&[("p1", "f1", 1), ("p1", "f2", 2), ("p2", "f2", 2)]);
        assert_eq!(largest_component(&toy), toy);

        let two = panel_from(&[("p1", "f1", 1), ("p2", "f2", 1), ("p2", "f2", 2)]);
        let r = largest_component(&two);
        assert_eq!(r.n_obs(), 2);
        assert_eq!(r.person_labels(), &["p2".to_string()]);

        let tie = panel_from(&[("p1", "f1", 1), ("p2", "f2", 1)]);
        for _ in 0..3 {
            let r = largest_component(&tie);
            assert_eq!(r.person_labels(), &["p1".to_string()]);
        }
    }

    #[test]
    fn leave_out_cycle_unchanged() {
        let g = graph(2, 2, &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)]);
        for level in [LeaveOutLevel::Obs, LeaveOutLevel::Match] {
            assert_eq!(leave_out_connected_set(&g, level).unwrap(), g);
        }
        assert!(bridges(&g, LeaveOutLevel::Match).is_empty());
    }

    #[test]
    fn leave_out_star_empty() {
        let g = graph(3, 1, &[(0, 0, 1), (1, 0, 1), (2, 0, 1)]);
        for level in [LeaveOutLevel::Obs, LeaveOutLevel::Match] {
            assert_eq!(leave_out_connected_set(&g, level), Err(GraphError::EmptyLeaveOutSet));
        }
    }

    #[test]
    fn leave_out_prunes_pendant() {
        // 4-cycle p0-f0-p1-f1 plus pendant chain p2-f1, p2-f2, p3-f2 (8 vertices).
        let g = graph(
            4,
            3,
            &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1), (2, 1, 1), (2, 2, 1), (3, 2, 1)],
        );
        let out = leave_out_connected_set(&g, LeaveOutLevel::Match).unwrap();
        assert_eq!(out.edges().len(), 4);
        assert!(out.edges().iter().all(|e| e.person < 2 && e.firm < 2));
        for e in 0..out.edges().len() {
            assert!(connected_ignoring(&out, Some(e)));
        }
    }

    #[test]
    fn obs_level_keeps_multi_observation_bridges() {
        // Stayer with 3 observations hanging off a cycle.
        let g = graph(3, 2, &[(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1), (2, 1, 3)]);
        assert_eq!(bridges(&g, LeaveOutLevel::Match), vec![4]);
        assert!(bridges(&g, LeaveOutLevel::Obs).is_empty());
        assert_eq!(leave_out_connected_set(&g, LeaveOutLevel::Obs).unwrap(), g);
        assert_eq!(leave_out_connected_set(&g, LeaveOutLevel::Match).unwrap().edges().len(), 4);
    }

    #[test]
    fn diagnose_cases() {
        let toy = panel_from(&[("p1", "f1", 1), ("p1", "f2", 2), ("p2", "f2", 2)]);
        let d = diagnose(&toy);
        assert_eq!((d.components, d.bridges_match), (1, 3));
        let two = panel_from(&[("p1", "f1", 1), ("p2", "f2", 1)]);
        assert_eq!(diagnose(&two).components, 2);
        let cycle = panel_from(&[("p1", "f1", 1), ("p1", "f2", 2), ("p2", "f1", 1), ("p2", "f2", 2)]);
        assert_eq!(diagnose(&cycle).bridges_match, 0);
    }

    fn arb_graph(max_p: usize, max_f: usize, max_e: usize) -> impl Strategy<Value = BipartiteGraph> {
        (1..=max_p, 1..=max_f).prop_flat_map(move |(np, nf)| {
            prop::collection::btree_set((0..np, 0..nf), 0..=max_e).prop_flat_map(move |set| {
                let pairs: Vec<(usize, usize)> = set.into_iter().collect();
                let n = pairs.len();
                prop::collection::vec(1usize..3, n).prop_map(move |mult| {
                    let edges = pairs
                        .iter()
                        .zip(&mult)
                        .map(|(&(person, firm), &multiplicity)| Edge {
                            person,
                            firm,
                            multiplicity,
                        })
                        .collect();
                    BipartiteGraph::new(np, nf, edges)
                })
            })
        })
    }

    proptest! {
        #[test]
        fn components_match_bfs(g in arb_graph(6, 4, 10)) {
            let lab = connected_components(&g);
            let bfs = bfs_labels(&g);
            for u in 0..g.n_vertices() {
                for v in 0..g.n_vertices() {
                    prop_assert_eq!(lab.component[u] == lab.component[v], bfs[u] == bfs[v]);
                }
            }
            prop_assert_eq!(lab.sizes.iter().sum::<usize>(), g.n_vertices());
        }

        #[test]
        fn component_count_matches_bfs_large(g in arb_graph(500, 400, 600)) {
            let lab = connected_components(&g);
            let bfs = bfs_labels(&g);
            let n_bfs = bfs.iter().copied().max().map_or(0, |m| m + 1);
            prop_assert_eq!(lab.n_components(), n_bfs);
        }

        #[test]
        fn bridges_match_brute_force(g in arb_graph(7, 5, 14)) {
            let lab = connected_components(&g);
            let found: std::collections::BTreeSet<usize> = bridges(&g, LeaveOutLevel::Match).into_iter().collect();
            for e in 0..g.edges().len() {
                let keep: Vec<bool> = (0..g.edges().len()).map(|x| x != e).collect();
                let after = connected_components(&g.retain_edges(&keep));
                prop_assert_eq!(found.contains(&e), after.n_components() > lab.n_components());
            }
        }

        #[test]
        fn leave_out_set_survives_any_deletion(g in arb_graph(12, 8, 50)) {
            if let Ok(out) = leave_out_connected_set(&g, LeaveOutLevel::Match) {
                prop_assert!(connected_ignoring(&out, None));
                for e in 0..out.edges().len() {
                    prop_assert!(connected_ignoring(&out, Some(e)), "deleting {e} disconnects");
                }
                for p in 0..out.n_persons() {
                    let d = out.incident(p).len();
                    prop_assert!(d == 0 || d >= 2);
                }
            }
        }

        #[test]
        fn restrict_largest_idempotent(rows in prop::collection::vec((0usize..8, 0usize..5, 0i64..3), 1..30)) {
            let mut seen = std::collections::HashSet::new();
            let rows: Vec<(String, String, i64)> = rows.into_iter()
                .filter(|r| seen.insert(*r))
                .map(|(p, f, t)| (format!("p{p}"), format!("f{f}"), t)).collect();
            let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(p, f, t)| (p.as_str(), f.as_str(), *t)).collect();
            let panel = panel_from(&refs);
            let once = largest_component(&panel);
            prop_assert_eq!(largest_component(&once), once);
        }
    }
}
