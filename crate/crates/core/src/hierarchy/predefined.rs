use std::collections::HashMap;

use super::{HierarchyGraph, RelationVocab, ROOT_ID};
use crate::error::{Error, Result};

/// Builds the hierarchy implied by slash-separated relation paths.
///
/// Layer `i` holds the path prefixes with the last `i` components removed,
/// shared prefixes merging into one node, and the virtual root sits at
/// `L = ` the longest path depth. Shorter paths repeat their first component
/// upward until they reach layer `L - 1`. When a prefix label is also used by
/// another node, the internal node's id gets a `#<layer>` suffix.
pub fn parse_predefined(vocab: &RelationVocab) -> Result<HierarchyGraph> {
    let mut paths: Vec<(&str, Vec<&str>)> = Vec::new();
    for (_, name) in vocab.non_na() {
        let parts: Vec<&str> = name.split('/').filter(|p| !p.is_empty()).collect();
        if parts.is_empty() {
            return Err(Error::Data(format!("relation `{name}` has no path components")));
        }
        paths.push((name, parts));
    }
    if paths.is_empty() {
        return Err(Error::Data("no non-NA relations to build a hierarchy from".into()));
    }
    let depth = paths.iter().map(|(_, p)| p.len()).max().unwrap_or(1);

    // (layer, label) of each internal node, in order of first appearance
    let mut internal: Vec<(usize, String)> = Vec::new();
    let mut key_index: HashMap<(usize, String), usize> = HashMap::new();
    let mut parent_of_leaf: Vec<Option<usize>> = Vec::new();
    let mut parent_of_internal: Vec<Option<usize>> = Vec::new();

    for (_, parts) in &paths {
        let mut child: Option<usize> = None;
        let mut leaf_parent = None;
        for layer in 1..depth {
            let keep = parts.len().saturating_sub(layer).max(1);
            let label = format!("/{}", parts[..keep].join("/"));
            let key = (layer, label.clone());
            let idx = match key_index.get(&key) {
                Some(&i) => i,
                None => {
                    internal.push((layer, label));
                    parent_of_internal.push(None);
                    key_index.insert(key, internal.len() - 1);
                    internal.len() - 1
                }
            };
            match child {
                None => leaf_parent = Some(idx),
                Some(c) => parent_of_internal[c] = Some(idx),
            }
            child = Some(idx);
        }
        parent_of_leaf.push(leaf_parent);
    }

    let mut label_uses: HashMap<&str, usize> = HashMap::new();
    for (name, _) in &paths {
        *label_uses.entry(name).or_default() += 1;
    }
    for (_, label) in &internal {
        *label_uses.entry(label.as_str()).or_default() += 1;
    }
    let ids: Vec<String> = internal
        .iter()
        .map(|(layer, label)| {
            if label_uses[label.as_str()] > 1 {
                format!("{label}#{layer}")
            } else {
                label.clone()
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(paths.len() + internal.len() + 1);
    for ((name, _), p) in paths.iter().zip(&parent_of_leaf) {
        let parent = p.map_or_else(|| ROOT_ID.to_string(), |i| ids[i].clone());
        rows.push((name.to_string(), 0, Some(parent)));
    }
    for (i, (layer, _)) in internal.iter().enumerate() {
        let parent = parent_of_internal[i].map_or_else(|| ROOT_ID.to_string(), |p| ids[p].clone());
        rows.push((ids[i].clone(), *layer, Some(parent)));
    }
    rows.push((ROOT_ID.to_string(), depth, None));
    HierarchyGraph::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(names: &[&str]) -> HierarchyGraph {
        parse_predefined(&RelationVocab::new(names.iter().copied()).unwrap()).unwrap()
    }

    #[test]
    fn people_person_example() {
        let g = graph(&["/people/person/ethnicity", "/people/person/religion"]);
        let person = g.node_id("/people/person").unwrap();
        assert_eq!(g.node(person).layer, 1);
        assert_eq!(g.node(person).children.len(), 2);
        let people = g.node_id("/people").unwrap();
        assert_eq!(g.node(people).layer, 2);
        assert_eq!(g.node(people).parent, Some(g.root()));
        assert_eq!(g.depth(), 3);
        assert_eq!(g.len(), 5);
    }

    #[test]
    fn single_relation_is_a_chain() {
        let g = graph(&["/a/b/c"]);
        assert_eq!(g.len(), 4);
        let chain = g.chain("/a/b/c").unwrap();
        let ids: Vec<&str> = chain.iter().map(|&i| g.node(i).id.as_str()).collect();
        assert_eq!(ids, ["/a/b/c", "/a/b", "/a"]);
    }

    #[test]
    fn disjoint_prefixes_meet_at_root() {
        let g = graph(&["/x/y/z", "/p/q/r"]);
        assert_eq!(g.node(g.root()).children.len(), 2);
        assert_eq!(g.len(), 7);
    }

    #[test]
    fn na_is_excluded() {
        let g = graph(&["NA", "/a/b"]);
        assert!(g.node_id("NA").is_none());
    }

    #[test]
    fn ragged_depths_are_padded() {
        let g = graph(&["/a/b", "/x/y/z"]);
        assert_eq!(g.depth(), 3);
        assert_eq!(g.chain("/a/b").unwrap().len(), 3);
        g.validate().unwrap();
    }

    #[test]
    fn empty_name_rejected() {
        assert!(RelationVocab::new([""]).is_err());
        let v = RelationVocab::new(["/"]).unwrap();
        assert!(parse_predefined(&v).is_err());
    }
}
