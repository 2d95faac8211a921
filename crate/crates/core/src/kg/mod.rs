//! Knowledge-graph facts, named vector tables, and TransE training.

mod io;
mod transe;

pub(crate) use io::format_record;
pub use io::{load_embeddings, save_embeddings};
pub use transe::{
    corrupt, link_prediction_eval, score_triple, train_transe, LinkPrediction, Norm, TransEConfig, TransERun,
};

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A fact `(head, relation, tail)` as indices into a [`TripleStore`].
pub type Triple = (usize, usize, usize);

/// Entities, relations and the facts relating them.
#[derive(Clone, Debug, Default)]
pub struct TripleStore {
    entities: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relations: Vec<String>,
    relation_ids: HashMap<String, usize>,
    facts: Vec<Triple>,
    fact_set: HashSet<Triple>,
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, name: &str) -> usize {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        self.entities.push(name.to_string());
        self.entity_ids.insert(name.to_string(), self.entities.len() - 1);
        self.entities.len() - 1
    }

    pub fn add_relation(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        self.relations.push(name.to_string());
        self.relation_ids.insert(name.to_string(), self.relations.len() - 1);
        self.relations.len() - 1
    }

    /// Adds a fact by name, registering unseen identifiers. Returns `false`
    /// if the fact was already present.
    pub fn add_fact(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.add_entity(head);
        let r = self.add_relation(relation);
        let t = self.add_entity(tail);
        self.insert((h, r, t))
    }

    fn insert(&mut self, fact: Triple) -> bool {
        if self.fact_set.insert(fact) {
            self.facts.push(fact);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, fact: Triple) -> bool {
        self.fact_set.contains(&fact)
    }

    pub fn facts(&self) -> &[Triple] {
        &self.facts
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Sub-store holding only facts whose relation is in `keep`.
    pub fn restricted_to<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> TripleStore {
        let keep: HashSet<&str> = keep.into_iter().collect();
        let mut out = TripleStore::new();
        for &(h, r, t) in &self.facts {
            if keep.contains(self.relations[r].as_str()) {
                out.add_fact(&self.entities[h], &self.relations[r], &self.entities[t]);
            }
        }
        out
    }

    /// Parses `<head>\t<relation>\t<tail>` lines.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut store = TripleStore::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::parse(origin, i + 1, "expected `head<TAB>relation<TAB>tail`"));
            }
            store.add_fact(parts[0], parts[1], parts[2]);
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &(h, r, t) in &self.facts {
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                self.entities[h], self.relations[r], self.entities[t]
            ));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// The bundled toy chain KG: 8 entities, 2 relations, 10 facts.
pub fn toy_kg() -> TripleStore {
    TripleStore::parse(include_str!("../../data/toy_kg.tsv"), Path::new("toy_kg.tsv")).expect("bundled toy KG parses")
}

/// Identifiers mapped to equal-length vectors, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorTable<S = f64> {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<S>>,
}

impl<S: Scalar> VectorTable<S> {
    pub fn new(dim: usize) -> Self {
        VectorTable {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: &str, v: Vec<S>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim(
                "vector table",
                format!("`{id}` has {} values, table dimension is {}", v.len(), self.dim),
            ));
        }
        if self.index.contains_key(id) {
            return Err(Error::Data(format!("duplicate identifier `{id}`")));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.vectors.push(v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[S]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[S])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }
}

/// Learned entity and relation vectors of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<S = f64> {
    pub entities: VectorTable<S>,
    pub relations: VectorTable<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn dim(&self) -> usize {
        self.entities.dim()
    }
}
