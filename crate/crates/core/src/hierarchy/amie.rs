use std::collections::{HashMap, HashSet};

use super::{HierarchyGraph, RelationVocab};
use crate::error::{Error, Result};
use crate::kg::TripleStore;

struct RelationFacts {
    pairs: HashSet<(usize, usize)>,
    heads: HashSet<usize>,
}

fn index_facts(store: &TripleStore) -> HashMap<usize, RelationFacts> {
    let mut out: HashMap<usize, RelationFacts> = HashMap::new();
    for &(h, r, t) in store.facts() {
        let e = out.entry(r).or_insert_with(|| RelationFacts {
            pairs: HashSet::new(),
            heads: HashSet::new(),
        });
        e.pairs.insert((h, t));
        e.heads.insert(h);
    }
    out
}

fn confidence(body: &RelationFacts, head: &RelationFacts) -> Option<f64> {
    let support = body.pairs.iter().filter(|p| head.pairs.contains(p)).count();
    let denom = body.pairs.iter().filter(|(h, _)| head.heads.contains(h)).count();
    (denom > 0).then(|| support as f64 / denom as f64)
}

/// PCA confidence of the rule `body(h, t) ⇒ head(h, t)`: the share of body
/// pairs that are also head pairs, counting only pairs whose subject has
/// some head fact. `None` when no body pair qualifies.
pub fn pca_confidence(store: &TripleStore, body: &str, head: &str) -> Result<Option<f64>> {
    let b = store
        .relation_id(body)
        .ok_or_else(|| Error::UnknownRelation(body.to_string()))?;
    let h = store
        .relation_id(head)
        .ok_or_else(|| Error::UnknownRelation(head.to_string()))?;
    let idx = index_facts(store);
    Ok(confidence(&idx[&b], &idx[&h]))
}

/// Groups relations whose rule confidence reaches `threshold` in either
/// direction (connected components of the correlation graph) under one
/// layer-1 node each; the virtual root sits at layer 2. Relations of the
/// vocabulary without facts form singleton groups.
pub fn build_amie(vocab: &RelationVocab, store: &TripleStore, threshold: f64) -> Result<HierarchyGraph> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "pca confidence threshold {threshold} not in (0, 1]"
        )));
    }
    if store.is_empty() {
        return Err(Error::Data("AMIE grouping needs a non-empty triple store".into()));
    }
    let names: Vec<String> = vocab.non_na().map(|(_, n)| n.to_string()).collect();
    if names.is_empty() {
        return Err(Error::Data("no relations to group".into()));
    }
    let idx = index_facts(store);
    let facts: Vec<Option<&RelationFacts>> = names
        .iter()
        .map(|n| store.relation_id(n).and_then(|r| idx.get(&r)))
        .collect();

    let mut parent: Vec<usize> = (0..names.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (Some(a), Some(b)) = (facts[i], facts[j]) else {
                continue;
            };
            let linked = [confidence(a, b), confidence(b, a)]
                .into_iter()
                .flatten()
                .any(|c| c >= threshold);
            if linked {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let assign: Vec<usize> = (0..names.len()).map(|i| find(&mut parent, i)).collect();
    HierarchyGraph::from_levels(&names, &[assign], "amie")
}
