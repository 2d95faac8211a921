use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, Triple, TripleStore, VectorTable};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn from_order(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            _ => Err(Error::Config(format!("norm order must be 1 or 2, got {p}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub norm: Norm,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig {
            dim: 50,
            margin: 1.0,
            norm: Norm::L2,
            learning_rate: 0.01,
            epochs: 500,
            negatives: 1,
            seed: 0,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("TransE dimension must be >= 1".into()));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::Config("TransE margin must be > 0".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config("TransE learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// `‖h + r − t‖_p`; lower is more plausible.
pub fn score_triple<S: Scalar>(h: &[S], r: &[S], t: &[S], norm: Norm) -> Result<S> {
    if h.len() != r.len() || r.len() != t.len() {
        return Err(Error::dim(
            "score_triple",
            format!("{} / {} / {}", h.len(), r.len(), t.len()),
        ));
    }
    Ok(distance(h, r, t, norm))
}

fn distance<S: Scalar>(h: &[S], r: &[S], t: &[S], norm: Norm) -> S {
    let it = h.iter().zip(r).zip(t).map(|((&a, &b), &c)| a + b - c);
    match norm {
        Norm::L1 => it.map(|x| x.abs()).sum(),
        Norm::L2 => it.map(|x| x * x).sum::<S>().sqrt(),
    }
}

/// Subgradient of the distance with respect to `h + r − t`.
fn distance_grad<S: Scalar>(h: &[S], r: &[S], t: &[S], norm: Norm) -> Vec<S> {
    let diff: Vec<S> = h.iter().zip(r).zip(t).map(|((&a, &b), &c)| a + b - c).collect();
    match norm {
        Norm::L1 => diff
            .iter()
            .map(|&x| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            })
            .collect(),
        Norm::L2 => {
            let n = diff.iter().map(|&x| x * x).sum::<S>().sqrt();
            if n > S::zero() {
                diff.iter().map(|&x| x / n).collect()
            } else {
                vec![S::zero(); diff.len()]
            }
        }
    }
}

fn normalize<S: Scalar>(v: &mut [S]) {
    let n = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if n > S::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Corrupts the head or the tail (fair coin) with a uniformly drawn entity,
/// never returning a triple that is in `store`. Returns `None` when every
/// corruption of both sides is a known fact.
pub fn corrupt<R: Rng + ?Sized>(store: &TripleStore, fact: Triple, rng: &mut R) -> Option<Triple> {
    let n = store.entities().len();
    let (h, r, t) = fact;
    let replace_head = rng.gen_bool(0.5);
    let make = |e: usize, head: bool| if head { (e, r, t) } else { (h, r, e) };
    for _ in 0..32 {
        let c = make(rng.gen_range(0..n), replace_head);
        if !store.contains(c) {
            return Some(c);
        }
    }
    for side in [replace_head, !replace_head] {
        let valid: Vec<Triple> = (0..n).map(|e| make(e, side)).filter(|c| !store.contains(*c)).collect();
        if let Some(&c) = valid.choose(rng) {
            return Some(c);
        }
    }
    None
}

/// Trained embeddings plus the mean margin loss of every epoch.
#[derive(Clone, Debug)]
pub struct TransERun<S = f64> {
    pub table: EmbeddingTable<S>,
    pub epoch_loss: Vec<f64>,
}

/// Margin-ranking TransE with SGD, uniform filtered corruption, and entity
/// renormalization at the end of every epoch. Relation vectors are only
/// normalized once at initialization.
pub fn train_transe<S: Scalar>(store: &TripleStore, cfg: &TransEConfig) -> Result<TransERun<S>> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::Data("cannot train TransE on an empty triple store".into()));
    }
    let mut per_relation = vec![0usize; store.relations().len()];
    for &(_, r, _) in store.facts() {
        per_relation[r] += 1;
    }
    if let Some(r) = per_relation.iter().position(|&c| c == 0) {
        return Err(Error::RelationWithoutFacts(store.relations()[r].clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 6.0 / (cfg.dim as f64).sqrt();
    let init = |rng: &mut ChaCha8Rng| -> Vec<S> { (0..cfg.dim).map(|_| lit(rng.gen_range(-bound..=bound))).collect() };
    let mut ent: Vec<Vec<S>> = (0..store.entities().len()).map(|_| init(&mut rng)).collect();
    let mut rel: Vec<Vec<S>> = (0..store.relations().len()).map(|_| init(&mut rng)).collect();
    rel.iter_mut().for_each(|v| normalize(v));
    ent.iter_mut().for_each(|v| normalize(v));

    let lr: S = lit(cfg.learning_rate);
    let margin: S = lit(cfg.margin);
    let mut order: Vec<usize> = (0..store.facts().len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &fi in &order {
            let pos = store.facts()[fi];
            for _ in 0..cfg.negatives {
                let Some(neg) = corrupt(store, pos, &mut rng) else {
                    continue;
                };
                let dp = distance(&ent[pos.0], &rel[pos.1], &ent[pos.2], cfg.norm);
                let dn = distance(&ent[neg.0], &rel[neg.1], &ent[neg.2], cfg.norm);
                let loss = margin + dp - dn;
                count += 1;
                if loss <= S::zero() {
                    continue;
                }
                total += loss.to_f64_lossless();
                let gp = distance_grad(&ent[pos.0], &rel[pos.1], &ent[pos.2], cfg.norm);
                let gn = distance_grad(&ent[neg.0], &rel[neg.1], &ent[neg.2], cfg.norm);
                // d loss / d(h+r-t) is +gp for the positive and -gn for the negative
                for k in 0..cfg.dim {
                    ent[pos.0][k] -= lr * gp[k];
                    ent[pos.2][k] += lr * gp[k];
                    rel[pos.1][k] -= lr * (gp[k] - gn[k]);
                    ent[neg.0][k] += lr * gn[k];
                    ent[neg.2][k] -= lr * gn[k];
                }
            }
        }
        ent.iter_mut().for_each(|v| normalize(v));
        epoch_loss.push(if count > 0 { total / count as f64 } else { 0.0 });
    }

    let mut entities = VectorTable::new(cfg.dim);
    for (name, v) in store.entities().iter().zip(ent) {
        entities.insert(name, v)?;
    }
    let mut relations = VectorTable::new(cfg.dim);
    for (name, v) in store.relations().iter().zip(rel) {
        relations.insert(name, v)?;
    }
    Ok(TransERun {
        table: EmbeddingTable { entities, relations },
        epoch_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkPrediction {
    pub mean_rank: f64,
    pub hits_at_10: f64,
}

/// Filtered tail prediction: each fact's true tail is ranked among all
/// entities, skipping other known tails of the same `(head, relation)`.
/// Rank is one plus the number of candidates with a strictly lower score.
pub fn link_prediction_eval<S: Scalar>(
    table: &EmbeddingTable<S>,
    store: &TripleStore,
    norm: Norm,
) -> Result<LinkPrediction> {
    if store.is_empty() {
        return Err(Error::Data("link prediction on an empty store".into()));
    }
    let lookup_e = |name: &str| {
        table
            .entities
            .get(name)
            .ok_or_else(|| Error::MissingEmbedding(name.to_string()))
    };
    let lookup_r = |name: &str| {
        table
            .relations
            .get(name)
            .ok_or_else(|| Error::MissingEmbedding(name.to_string()))
    };
    let ents: Vec<&[S]> = store.entities().iter().map(|e| lookup_e(e)).collect::<Result<_>>()?;
    let mut rank_sum = 0.0;
    let mut hits = 0usize;
    for &(h, r, t) in store.facts() {
        let rv = lookup_r(&store.relations()[r])?;
        let target = score_triple(ents[h], rv, ents[t], norm)?;
        let mut rank = 1usize;
        for (e, ev) in ents.iter().enumerate() {
            if e == t || store.contains((h, r, e)) {
                continue;
            }
            if score_triple(ents[h], rv, ev, norm)? < target {
                rank += 1;
            }
        }
        rank_sum += rank as f64;
        if rank <= 10 {
            hits += 1;
        }
    }
    let n = store.facts().len() as f64;
    Ok(LinkPrediction {
        mean_rank: rank_sum / n,
        hits_at_10: hits as f64 / n,
    })
}

impl<S: Scalar> EmbeddingTable<S> {
    /// Table of random unit-norm entity vectors and random relation vectors.
    pub fn random(store: &TripleStore, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entities = VectorTable::new(dim);
        for name in store.entities() {
            let mut v: Vec<S> = (0..dim).map(|_| lit(rng.gen_range(-1.0..1.0))).collect();
            normalize(&mut v);
            entities.insert(name, v).expect("unique entity names");
        }
        let mut relations = VectorTable::new(dim);
        for name in store.relations() {
            let v: Vec<S> = (0..dim).map(|_| lit(rng.gen_range(-1.0..1.0))).collect();
            relations.insert(name, v).expect("unique relation names");
        }
        EmbeddingTable { entities, relations }
    }
}
