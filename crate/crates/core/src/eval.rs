//! Held-out evaluation: precision-recall curves, top-N precision under the
//! ONE/TWO/ALL instance settings, macro Hits@K on rare relations, attention
//! dumps and class-embedding export.
//!
//! Every ranking is a stable sort by descending score, so ties keep input
//! order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledInstance;
use crate::encoder::Instance;
use crate::error::{Error, Result};
use crate::hierarchy::RelationVocab;
use crate::kg::format_record;
use crate::model::{Head, Model};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// One scored `(pair, relation)` candidate; NA is never a candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord {
    pub pair: usize,
    pub relation: usize,
    pub score: f64,
    pub gold: bool,
}

/// Test instances of one entity pair with every non-NA label it holds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub head: String,
    pub tail: String,
    pub gold: BTreeSet<usize>,
    pub instances: Vec<Instance>,
}

/// Groups instances by entity pair in order of first appearance.
pub fn group_pairs(items: &[LabeledInstance], relations: &RelationVocab) -> Vec<EvalPair> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut pairs: Vec<EvalPair> = Vec::new();
    for it in items {
        let key = (it.head.as_str(), it.tail.as_str());
        let i = *index.entry(key).or_insert_with(|| {
            pairs.push(EvalPair {
                head: it.head.clone(),
                tail: it.tail.clone(),
                gold: BTreeSet::new(),
                instances: Vec::new(),
            });
            pairs.len() - 1
        });
        if !relations.is_na(it.relation) {
            pairs[i].gold.insert(it.relation);
        }
        pairs[i].instances.push(it.instance.clone());
    }
    pairs
}

/// Scores every pair against every non-NA relation.
pub fn prediction_records<S: Scalar>(model: &Model<S>, pairs: &[EvalPair]) -> Result<Vec<PredictionRecord>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let mut out = Vec::new();
    for (p, pair) in pairs.iter().enumerate() {
        let scores = bound.predict(&mut tape, &pair.instances)?;
        for (r, &s) in scores.iter().enumerate() {
            if model.relations.is_na(r) {
                continue;
            }
            let score = s.to_f64_lossless();
            if !score.is_finite() {
                return Err(Error::NonFinite(format!("score of relation {r} for pair {p}")));
            }
            out.push(PredictionRecord {
                pair: p,
                relation: r,
                score,
                gold: pair.gold.contains(&r),
            });
        }
    }
    Ok(out)
}

fn ranked(records: &[PredictionRecord]) -> Vec<&PredictionRecord> {
    let mut v: Vec<&PredictionRecord> = records.iter().collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.rank, p.precision, p.recall);
        }
        out
    }

    pub fn auc_line(&self) -> String {
        format!("auc,{}\n", self.auc)
    }
}

/// One point per cut of the ranked list. The area is the trapezoid rule over
/// recall, starting from recall 0 at precision 1.
pub fn pr_curve(records: &[PredictionRecord]) -> Result<PrCurve> {
    let total = records.iter().filter(|r| r.gold).count();
    if total == 0 {
        return Err(Error::Data(
            "precision-recall curve needs at least one gold fact".into(),
        ));
    }
    let mut points = Vec::with_capacity(records.len());
    let mut hits = 0usize;
    for (k, r) in ranked(records).iter().enumerate() {
        if r.gold {
            hits += 1;
        }
        points.push(PrPoint {
            rank: k + 1,
            precision: hits as f64 / (k + 1) as f64,
            recall: hits as f64 / total as f64,
        });
    }
    let mut auc = 0.0;
    let (mut pr, mut pp) = (0.0, 1.0);
    for p in &points {
        auc += (p.recall - pr) * (p.precision + pp) / 2.0;
        pr = p.recall;
        pp = p.precision;
    }
    Ok(PrCurve { points, auc })
}

/// Fraction of gold records among the `n` highest-scoring ones.
pub fn precision_at_n(records: &[PredictionRecord], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("N must be positive".into()));
    }
    if records.len() < n {
        return Err(Error::Data(format!("P@{n} needs {n} records, have {}", records.len())));
    }
    let hits = ranked(records).iter().take(n).filter(|r| r.gold).count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TestMode {
    One,
    Two,
    All,
}

impl TestMode {
    pub const ALL_MODES: [TestMode; 3] = [TestMode::One, TestMode::Two, TestMode::All];

    pub fn name(self) -> &'static str {
        match self {
            TestMode::One => "ONE",
            TestMode::Two => "TWO",
            TestMode::All => "ALL",
        }
    }
}

/// Keeps pairs with at least two instances; ONE and TWO then retain one or
/// two randomly chosen instances per pair (kept in original order), ALL
/// keeps them all. One seeded draw, pairs visited in order.
pub fn subsample(pairs: &[EvalPair], mode: TestMode, seed: u64) -> Vec<EvalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = match mode {
        TestMode::One => Some(1),
        TestMode::Two => Some(2),
        TestMode::All => None,
    };
    pairs
        .iter()
        .filter(|p| p.instances.len() >= 2)
        .map(|p| {
            let mut out = p.clone();
            if let Some(k) = keep {
                let mut idx: Vec<usize> = (0..p.instances.len()).collect();
                idx.shuffle(&mut rng);
                let mut chosen: Vec<usize> = idx.into_iter().take(k).collect();
                chosen.sort_unstable();
                out.instances = chosen.iter().map(|&i| p.instances[i].clone()).collect();
            }
            out
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatnRow {
    pub mode: TestMode,
    pub values: Vec<f64>,
    pub mean: f64,
}

/// P@N for each mode and each `n`, plus the per-mode mean.
pub fn precision_at_n_table<S: Scalar>(
    model: &Model<S>,
    pairs: &[EvalPair],
    ns: &[usize],
    seed: u64,
) -> Result<Vec<PatnRow>> {
    if ns.is_empty() {
        return Err(Error::Empty("N values"));
    }
    let mut rows = Vec::new();
    for mode in TestMode::ALL_MODES {
        let sub = subsample(pairs, mode, seed);
        let records = prediction_records(model, &sub)?;
        let values = ns
            .iter()
            .map(|&n| precision_at_n(&records, n))
            .collect::<Result<Vec<_>>>()?;
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        rows.push(PatnRow { mode, values, mean });
    }
    Ok(rows)
}

/// One row per model in the layout `model, ONE P@N..., ONE Mean, TWO ...,
/// ALL ...`, values in percent.
pub fn patn_csv(model_name: &str, ns: &[usize], rows: &[PatnRow]) -> String {
    let mut header = String::from("model");
    let mut line = model_name.to_string();
    for row in rows {
        for (n, v) in ns.iter().zip(&row.values) {
            let _ = write!(header, ",{} P@{n}", row.mode.name());
            let _ = write!(line, ",{:.1}", v * 100.0);
        }
        let _ = write!(header, ",{} Mean", row.mode.name());
        let _ = write!(line, ",{:.1}", row.mean * 100.0);
    }
    format!("{header}\n{line}\n")
}

/// Training-instance count per relation id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyIndex {
    pub counts: Vec<usize>,
}

impl FrequencyIndex {
    pub fn from_vocab(relations: &RelationVocab) -> Self {
        FrequencyIndex {
            counts: relations.counts().to_vec(),
        }
    }
}

/// Per-relation share of test pairs whose gold relation ranks in the top
/// `k` of that pair's candidates, averaged over relations with fewer than
/// `threshold` training instances that occur in the test records.
pub fn macro_hits_at_k(records: &[PredictionRecord], freq: &FrequencyIndex, threshold: usize, k: usize) -> Result<f64> {
    let mut by_pair: HashMap<usize, Vec<PredictionRecord>> = HashMap::new();
    for r in records {
        by_pair.entry(r.pair).or_default().push(*r);
    }
    let mut tally: HashMap<usize, (usize, usize)> = HashMap::new();
    for recs in by_pair.values() {
        let order = ranked(recs);
        for (rank, r) in order.iter().enumerate() {
            if !r.gold || freq.counts.get(r.relation).is_none_or(|&c| c >= threshold) {
                continue;
            }
            let e = tally.entry(r.relation).or_default();
            e.1 += 1;
            if rank < k {
                e.0 += 1;
            }
        }
    }
    if tally.is_empty() {
        return Err(Error::Data(format!(
            "no test relation has fewer than {threshold} training instances"
        )));
    }
    let sum: f64 = tally.values().map(|&(h, n)| h as f64 / n as f64).sum();
    Ok(sum / tally.len() as f64)
}

/// Hits@K cell for every `(threshold, k)` combination, thresholds outer.
pub fn hits_table(
    records: &[PredictionRecord],
    freq: &FrequencyIndex,
    thresholds: &[usize],
    ks: &[usize],
) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for &t in thresholds {
        for &k in ks {
            out.push((t, k, macro_hits_at_k(records, freq, t, k)?));
        }
    }
    Ok(out)
}

/// `encoder, attention, <T Hits@K, ...` with values in percent.
pub fn hits_csv(encoder: &str, attention: &str, cells: &[(usize, usize, f64)]) -> String {
    let mut header = String::from("encoder,attention");
    let mut line = format!("{encoder},{attention}");
    for (t, k, v) in cells {
        let _ = write!(header, ",<{t} Hits@{k}");
        let _ = write!(line, ",{:.1}", v * 100.0);
    }
    format!("{header}\n{line}\n")
}

/// One row of the attention dump.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub bag_id: usize,
    pub layer: usize,
    pub node_id: String,
    pub instance_index: usize,
    pub alpha: f64,
}

/// Instance weights at every layer of `relation`'s chain for one bag.
pub fn inspect_attention<S: Scalar>(
    model: &Model<S>,
    bag_id: usize,
    instances: &[Instance],
    relation: usize,
) -> Result<Vec<AttentionRow>> {
    let trace = model.attention_trace(instances, relation)?;
    let node_name = |layer: usize| -> String {
        match (&model.head, &trace.nodes) {
            (Head::Katt(h), Some(nodes)) => h.hierarchy.node(nodes[layer]).id.clone(),
            (Head::Katt(_), None) => format!("NA#{layer}"),
            (Head::Att(_), _) => model.relations.name(relation).to_string(),
        }
    };
    let mut rows = Vec::new();
    for (layer, alphas) in trace.alphas.iter().enumerate() {
        let node_id = node_name(layer);
        for (i, a) in alphas.iter().enumerate() {
            rows.push(AttentionRow {
                bag_id,
                layer,
                node_id: node_id.clone(),
                instance_index: i,
                alpha: a.to_f64_lossless(),
            });
        }
    }
    Ok(rows)
}

pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let mut out = String::from("bag_id,layer,node_id,instance_index,alpha\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.bag_id, r.layer, r.node_id, r.instance_index, r.alpha
        );
    }
    out
}

/// Every hierarchy node's class embedding in the embedding text format,
/// grouped under `# layer <t>` comment lines.
pub fn class_embeddings_text<S: Scalar>(model: &Model<S>) -> Result<String> {
    let table = model.class_embeddings()?;
    let graph = &model.katt_head().ok_or(Error::Uninitialized("hierarchy"))?.hierarchy;
    let mut out = String::new();
    for (layer, nodes) in table.by_layer.iter().enumerate() {
        let _ = writeln!(out, "# layer {layer}");
        for &n in nodes {
            format_record(&mut out, &graph.node(n).id, table.get(n));
        }
    }
    Ok(out)
}

pub fn export_class_embeddings<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, class_embeddings_text(model)?).map_err(|e| Error::io(path, e))
}
