//! Hierarchy label graph: a layered tree over relation labels with a
//! virtual root, plus the four ways of building one.

mod amie;
mod cluster;
mod predefined;

pub use amie::{build_amie, pca_confidence};
pub use cluster::{build_agglomerative, build_kmeans, complete_linkage, kmeans, Merge};
pub use predefined::parse_predefined;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg::VectorTable;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Label used for the "no relation" class.
pub const NA: &str = "NA";
/// Identifier of the virtual root node.
pub const ROOT_ID: &str = "<root>";
/// Parent field written for the root in hierarchy files.
pub const ROOT_MARKER: &str = "-";

/// Ordered relation labels, with NA flagged and per-relation training counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
    na: Option<usize>,
    counts: Vec<usize>,
}

impl RelationVocab {
    /// Labels in the given order; a label equal to [`NA`] is the NA class.
    pub fn new<I, T>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut vocab = RelationVocab {
            names: Vec::new(),
            index: HashMap::new(),
            na: None,
            counts: Vec::new(),
        };
        for name in names {
            let name = name.into();
            if name.is_empty() {
                return Err(Error::Data("empty relation name".into()));
            }
            if vocab.index.contains_key(&name) {
                return Err(Error::Data(format!("duplicate relation `{name}`")));
            }
            if name == NA {
                vocab.na = Some(vocab.names.len());
            }
            vocab.index.insert(name.clone(), vocab.names.len());
            vocab.names.push(name);
            vocab.counts.push(0);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn na(&self) -> Option<usize> {
        self.na
    }

    pub fn is_na(&self, id: usize) -> bool {
        self.na == Some(id)
    }

    /// Ids and names of every label except NA, in vocabulary order.
    pub fn non_na(&self) -> impl Iterator<Item = (usize, &str)> + '_ {
        self.names
            .iter()
            .enumerate()
            .filter(move |(i, _)| Some(*i) != self.na)
            .map(|(i, n)| (i, n.as_str()))
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn set_counts(&mut self, counts: Vec<usize>) -> Result<()> {
        if counts.len() != self.names.len() {
            return Err(Error::dim(
                "relation counts",
                format!("{} vs {}", counts.len(), self.names.len()),
            ));
        }
        self.counts = counts;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchyNode {
    pub id: String,
    pub layer: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Validated tree: leaves at layer 0, one root at layer `depth`, and every
/// parent exactly one layer above its children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchyGraph {
    nodes: Vec<HierarchyNode>,
    index: HashMap<String, usize>,
    root: usize,
    depth: usize,
}

impl HierarchyGraph {
    /// Builds and validates a graph from `(id, layer, parent id)` rows; the
    /// root is the single row without a parent.
    pub fn from_rows<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, usize, Option<String>)>,
    {
        let rows: Vec<_> = rows.into_iter().collect();
        let mut index = HashMap::new();
        for (i, (id, _, _)) in rows.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::Hierarchy("empty node id".into()));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Hierarchy(format!("duplicate node `{id}`")));
            }
        }
        let mut nodes: Vec<HierarchyNode> = rows
            .iter()
            .map(|(id, layer, _)| HierarchyNode {
                id: id.clone(),
                layer: *layer,
                parent: None,
                children: Vec::new(),
            })
            .collect();
        let mut roots = Vec::new();
        for (i, (id, _, parent)) in rows.iter().enumerate() {
            match parent {
                None => roots.push(i),
                Some(p) => {
                    let &pi = index
                        .get(p)
                        .ok_or_else(|| Error::Hierarchy(format!("node `{id}` has unknown parent `{p}`")))?;
                    nodes[i].parent = Some(pi);
                    nodes[pi].children.push(i);
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::Hierarchy(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        let graph = HierarchyGraph {
            depth: nodes[root].layer,
            nodes,
            index,
            root,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Re-checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let depth = self.nodes[self.root].layer;
        if depth == 0 {
            return Err(Error::Hierarchy("root must sit above layer 0".into()));
        }
        let at_top = self.nodes.iter().filter(|n| n.layer == depth).count();
        if at_top != 1 {
            return Err(Error::Hierarchy(format!("{at_top} nodes at root layer {depth}")));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.layer > depth {
                return Err(Error::Hierarchy(format!("node `{}` above the root", n.id)));
            }
            match n.parent {
                None if i != self.root => {
                    return Err(Error::Hierarchy(format!("node `{}` has no parent", n.id)));
                }
                Some(p) if self.nodes[p].layer != n.layer + 1 => {
                    return Err(Error::Hierarchy(format!(
                        "node `{}` (layer {}) has parent `{}` at layer {}",
                        n.id, n.layer, self.nodes[p].id, self.nodes[p].layer
                    )));
                }
                _ => {}
            }
            if n.layer > 0 && n.children.is_empty() {
                return Err(Error::Hierarchy(format!("internal node `{}` has no children", n.id)));
            }
        }
        // parent layers strictly increase, so every node reaches the unique root
        let edges = self.nodes.iter().filter(|n| n.parent.is_some()).count();
        debug_assert_eq!(edges + 1, self.nodes.len());
        Ok(())
    }

    /// Checks that the layer-0 nodes are exactly the non-NA relations.
    pub fn check_leaves(&self, vocab: &RelationVocab) -> Result<()> {
        let leaves: Vec<&str> = self.leaves().map(|i| self.nodes[i].id.as_str()).collect();
        for (_, name) in vocab.non_na() {
            if self.node_id(name).is_none_or(|i| self.nodes[i].layer != 0) {
                return Err(Error::Hierarchy(format!("relation `{name}` is not a layer-0 node")));
            }
        }
        for leaf in leaves {
            if vocab.id(leaf).is_none_or(|i| vocab.is_na(i)) {
                return Err(Error::Hierarchy(format!("layer-0 node `{leaf}` is not a relation")));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[HierarchyNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &HierarchyNode {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_id(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Layer of the virtual root, `L`. Relation chains have length `L`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].layer == 0)
    }

    /// Node indices grouped by layer type, `0..=depth`.
    pub fn layers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.depth + 1];
        for (i, n) in self.nodes.iter().enumerate() {
            out[n.layer].push(i);
        }
        out
    }

    /// Chain `r^0 … r^{L-1}` of a relation, excluding the virtual root.
    pub fn chain(&self, relation: &str) -> Result<Vec<usize>> {
        let start = self
            .node_id(relation)
            .filter(|&i| self.nodes[i].layer == 0)
            .ok_or_else(|| Error::UnknownRelation(relation.to_string()))?;
        let mut chain = vec![start];
        let mut cur = start;
        while let Some(p) = self.nodes[cur].parent {
            if p == self.root {
                break;
            }
            chain.push(p);
            cur = p;
        }
        Ok(chain)
    }

    /// Row-normalized parent and child adjacency matrices (`n × n`); row `i`
    /// averages over node `i`'s parents (resp. children), empty rows are zero.
    pub fn adjacency<S: Scalar>(&self) -> (Tensor<S>, Tensor<S>) {
        let n = self.nodes.len();
        let mut parents = Tensor::zeros(&[n, n]);
        let mut children = Tensor::zeros(&[n, n]);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                parents.data_mut()[i * n + p] = S::one();
            }
            if !node.children.is_empty() {
                let w = S::one() / S::from_usize_lossy(node.children.len());
                for &c in &node.children {
                    children.data_mut()[i * n + c] = w;
                }
            }
        }
        (parents, children)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let parent = n.parent.map_or(ROOT_MARKER, |p| self.nodes[p].id.as_str());
            let _ = writeln!(s, "{}\t{}\t{}", n.id, n.layer, parent);
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    "expected `<node_id><TAB><layer><TAB><parent>`",
                ));
            }
            let layer = parts[1]
                .parse::<usize>()
                .map_err(|_| Error::parse(origin, i + 1, format!("bad layer `{}`", parts[1])))?;
            let parent = (parts[2] != ROOT_MARKER).then(|| parts[2].to_string());
            rows.push((parts[0].to_string(), layer, parent));
        }
        Self::from_rows(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Assembles a graph from leaves and successive cluster assignments:
    /// `levels[l][i]` is the cluster (next-layer node) of the `i`-th node of
    /// layer `l`. Clusters are renumbered by first appearance.
    pub(crate) fn from_levels(leaves: &[String], levels: &[Vec<usize>], tag: &str) -> Result<Self> {
        let mut rows: Vec<(String, usize, Option<String>)> = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        for leaf in leaves {
            current.push(rows.len());
            rows.push((leaf.clone(), 0, None));
        }
        for (l, assign) in levels.iter().enumerate() {
            if assign.len() != current.len() {
                return Err(Error::Hierarchy(format!(
                    "level {} assigns {} nodes, expected {}",
                    l + 1,
                    assign.len(),
                    current.len()
                )));
            }
            let mut renumber: HashMap<usize, usize> = HashMap::new();
            let mut next = Vec::new();
            for (&node, &cluster) in current.iter().zip(assign) {
                let k = renumber.len();
                let c = *renumber.entry(cluster).or_insert(k);
                if c == next.len() {
                    next.push(rows.len());
                    rows.push((format!("{tag}{}_{c}", l + 1), l + 1, None));
                }
                rows[node].2 = Some(rows[next[c]].0.clone());
            }
            current = next;
        }
        let depth = levels.len() + 1;
        for &node in &current {
            rows[node].2 = Some(ROOT_ID.to_string());
        }
        rows.push((ROOT_ID.to_string(), depth, None));
        Self::from_rows(rows)
    }
}

/// Layer-0 vectors copied from `relations`; every internal node (root
/// included) is the mean of its children, filled bottom-up. Returns an
/// `n × d` matrix in node order.
pub fn init_node_vectors<S: Scalar>(graph: &HierarchyGraph, relations: &VectorTable<S>) -> Result<Tensor<S>> {
    let d = relations.dim();
    let n = graph.len();
    let mut out = Tensor::zeros(&[n, d]);
    for layer in graph.layers() {
        for i in layer {
            let node = graph.node(i);
            if node.layer == 0 {
                let v = relations
                    .get(&node.id)
                    .ok_or_else(|| Error::MissingEmbedding(node.id.clone()))?;
                out.row_mut(i).copy_from_slice(v);
            } else {
                let mut acc = vec![S::zero(); d];
                for &c in &node.children {
                    for (a, &x) in acc.iter_mut().zip(out.row(c)) {
                        *a += x;
                    }
                }
                let k = S::from_usize_lossy(node.children.len());
                for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
                    *o = a / k;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(table: &[(&str, usize, Option<&str>)]) -> Vec<(String, usize, Option<String>)> {
        table
            .iter()
            .map(|(a, l, p)| (a.to_string(), *l, p.map(str::to_string)))
            .collect()
    }

    #[test]
    fn rejects_two_roots_and_layer_skips() {
        let two = rows(&[("a", 0, Some("r")), ("r", 1, None), ("s", 1, None)]);
        assert!(HierarchyGraph::from_rows(two).is_err());
        let skip = rows(&[
            ("a", 0, Some("r")),
            ("b", 0, Some("m")),
            ("m", 1, Some("r")),
            ("r", 2, None),
        ]);
        assert!(HierarchyGraph::from_rows(skip).is_err());
    }

    #[test]
    fn parent_vector_is_mean_of_children() {
        let g = HierarchyGraph::from_rows(rows(&[("a", 0, Some("p")), ("b", 0, Some("p")), ("p", 1, None)])).unwrap();
        let mut t = VectorTable::new(2);
        t.insert("a", vec![1.0, 0.0]).unwrap();
        t.insert("b", vec![0.0, 1.0]).unwrap();
        let v = init_node_vectors(&g, &t).unwrap();
        assert_eq!(v.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn single_child_parent_copies_child() {
        let g = HierarchyGraph::from_rows(rows(&[("a", 0, Some("p")), ("p", 1, None)])).unwrap();
        let mut t = VectorTable::new(2);
        t.insert("a", vec![0.25, -3.0]).unwrap();
        let v = init_node_vectors(&g, &t).unwrap();
        assert_eq!(v.row(1), &[0.25, -3.0]);
    }

    #[test]
    fn three_layer_cascade() {
        // leaves (2,0),(0,2),(4,4) under one mid node, mid under the root
        let g = HierarchyGraph::from_rows(rows(&[
            ("a", 0, Some("m")),
            ("b", 0, Some("m")),
            ("c", 0, Some("m")),
            ("m", 1, Some("r")),
            ("r", 2, None),
        ]))
        .unwrap();
        let mut t = VectorTable::new(2);
        t.insert("a", vec![2.0, 0.0]).unwrap();
        t.insert("b", vec![0.0, 2.0]).unwrap();
        t.insert("c", vec![4.0, 4.0]).unwrap();
        let v = init_node_vectors(&g, &t).unwrap();
        assert_eq!(v.row(3), &[2.0, 2.0]);
        assert_eq!(v.row(4), &[2.0, 2.0]);
    }

    #[test]
    fn missing_leaf_embedding_is_named() {
        let g = HierarchyGraph::from_rows(rows(&[("a", 0, Some("p")), ("p", 1, None)])).unwrap();
        let t = VectorTable::<f64>::new(2);
        assert!(matches!(init_node_vectors(&g, &t), Err(Error::MissingEmbedding(ref n)) if n == "a"));
    }

    #[test]
    fn file_round_trip() {
        let vocab = RelationVocab::new(["NA", "/a/b/c", "/a/b/d", "/a/e/f"]).unwrap();
        let g = parse_predefined(&vocab).unwrap();
        let back = HierarchyGraph::parse(&g.to_text(), Path::new("h")).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn loader_rejects_unknown_parent() {
        let err = HierarchyGraph::parse("a\t0\tp\nr\t1\t-\n", Path::new("h")).unwrap_err();
        assert!(matches!(err, Error::Hierarchy(_)));
    }
}
