//! Simple directed graph over opaque account identifiers.
//!
//! Nodes are stored in sorted identifier order, so node index `i` is the
//! `i`-th smallest id. Parallel transactions collapse into one edge whose
//! weight is the multiplicity. Self-loops are never stored.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Digraph {
    ids: Vec<String>,
    edges: Vec<(usize, usize, u32)>,
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
    und_adj: Vec<Vec<usize>>,
}

impl Digraph {
    /// Builds a graph from weighted directed edges. `extra_nodes` adds
    /// isolated nodes; duplicate edges have their weights summed.
    pub fn from_weighted_edges<I, E>(extra_nodes: I, edges: E) -> Self
    where
        I: IntoIterator<Item = String>,
        E: IntoIterator<Item = (String, String, u32)>,
    {
        let mut weights: BTreeMap<(String, String), u32> = BTreeMap::new();
        let mut ids: Vec<String> = extra_nodes.into_iter().collect();
        for (s, r, w) in edges {
            if s == r {
                continue;
            }
            ids.push(s.clone());
            ids.push(r.clone());
            *weights.entry((s, r)).or_insert(0) += w;
        }
        ids.sort();
        ids.dedup();
        let index: BTreeMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let edges: Vec<(usize, usize, u32)> = weights
            .iter()
            .map(|((s, r), w)| (index[s.as_str()], index[r.as_str()], *w))
            .collect();
        Self::from_indexed(ids, edges)
    }

    /// `edges` must reference valid indices into the already sorted `ids`.
    pub(crate) fn from_indexed(ids: Vec<String>, mut edges: Vec<(usize, usize, u32)>) -> Self {
        edges.sort_unstable();
        let n = ids.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for &(s, r, _) in &edges {
            out_adj[s].push(r);
            in_adj[r].push(s);
        }
        for adj in &mut in_adj {
            adj.sort_unstable();
        }
        let und_adj = (0..n)
            .map(|i| {
                let mut nb: Vec<usize> = out_adj[i].iter().chain(&in_adj[i]).copied().collect();
                nb.sort_unstable();
                nb.dedup();
                nb
            })
            .collect();
        Digraph {
            ids,
            edges,
            out_adj,
            in_adj,
            und_adj,
        }
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok()
    }

    /// Distinct directed edges `(source, target, multiplicity)` sorted by endpoints.
    pub fn edges(&self) -> &[(usize, usize, u32)] {
        &self.edges
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.out_adj[i]
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.in_adj[i]
    }

    /// Sorted union of successors and predecessors.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.und_adj[i]
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.out_adj[i].len()
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.in_adj[i].len()
    }

    pub fn has_edge(&self, s: usize, r: usize) -> bool {
        self.out_adj[s].binary_search(&r).is_ok()
    }

    pub fn weight(&self, s: usize, r: usize) -> u32 {
        self.edges
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&(s, r)))
            .map(|k| self.edges[k].2)
            .unwrap_or(0)
    }

    /// Symmetrized weighted adjacency: `w(u,v) = mult(u->v) + mult(v->u)`,
    /// one entry per neighbor, sorted by neighbor index.
    pub fn undirected_weights(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); self.node_count()];
        for &(s, r, w) in &self.edges {
            *adj[s].entry(r).or_insert(0.0) += f64::from(w);
            *adj[r].entry(s).or_insert(0.0) += f64::from(w);
        }
        adj.into_iter().map(|m| m.into_iter().collect()).collect()
    }

    /// Subgraph induced by `nodes` (indices into this graph).
    pub fn induced(&self, nodes: &[usize]) -> Digraph {
        let mut keep: Vec<usize> = nodes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut remap = vec![usize::MAX; self.node_count()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let ids = keep.iter().map(|&i| self.ids[i].clone()).collect();
        let edges = self
            .edges
            .iter()
            .filter(|&&(s, r, _)| remap[s] != usize::MAX && remap[r] != usize::MAX)
            .map(|&(s, r, w)| (remap[s], remap[r], w))
            .collect();
        Digraph::from_indexed(ids, edges)
    }

    /// Renames every node through `f`; `f` must be injective.
    pub fn relabel(&self, f: impl Fn(&str) -> String) -> Digraph {
        let edges: Vec<(String, String, u32)> = self
            .edges
            .iter()
            .map(|&(s, r, w)| (f(&self.ids[s]), f(&self.ids[r]), w))
            .collect();
        Digraph::from_weighted_edges(self.ids.iter().map(|id| f(id)), edges)
    }

    /// Weakly connected components as sorted node-index lists, ordered by
    /// their smallest member.
    pub fn weak_components(&self) -> Vec<Vec<usize>> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut k = 0;
            while k < comp.len() {
                let u = comp[k];
                k += 1;
                for &v in &self.und_adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(s: &str, r: &str) -> (String, String, u32) {
        (s.to_string(), r.to_string(), 1)
    }

    #[test]
    fn collapses_parallel_edges_and_drops_loops() {
        let g = Digraph::from_weighted_edges(
            Vec::new(),
            vec![e("a", "b"), e("a", "b"), e("b", "a"), e("c", "c")],
        );
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edges(), &[(0, 1, 2), (1, 0, 1)]);
        assert_eq!(g.weight(0, 1), 2);
        assert_eq!(g.undirected_weights()[0], vec![(1, 3.0)]);
    }

    #[test]
    fn induced_keeps_only_inner_edges() {
        let g = Digraph::from_weighted_edges(Vec::new(), vec![e("a", "b"), e("b", "c"), e("c", "d")]);
        let sub = g.induced(&[1, 2, 3]);
        assert_eq!(sub.ids(), &["b", "c", "d"]);
        assert_eq!(sub.edges(), &[(0, 1, 1), (1, 2, 1)]);
    }

    #[test]
    fn weak_components_ignore_direction() {
        let g = Digraph::from_weighted_edges(
            vec!["z".to_string()],
            vec![e("a", "b"), e("c", "b"), e("x", "y")],
        );
        let comps = g.weak_components();
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0].len(), 3);
    }
}
