//! Bag assembly, mini-batch SGD, encoder pretraining and checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{LabeledInstance, WordVocab};
use crate::encoder::{Instance, SentenceEncoder};
use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyGraph, RelationVocab};
use crate::model::{AttentionKind, Head, Model, ModelConfig};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub fine_tune_words: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 160,
            epochs: 30,
            pretrain_epochs: 5,
            seed: 0,
            fine_tune_words: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// All instances of one entity pair under one label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bag {
    pub head: String,
    pub tail: String,
    pub label: usize,
    pub instances: Vec<Instance>,
}

/// Groups instances by `(head, tail, label)`; bags appear in order of their
/// first instance and keep instance order.
pub fn make_bags(items: &[LabeledInstance]) -> Vec<Bag> {
    let mut index: HashMap<(&str, &str, usize), usize> = HashMap::new();
    let mut bags: Vec<Bag> = Vec::new();
    for it in items {
        let key = (it.head.as_str(), it.tail.as_str(), it.relation);
        match index.get(&key) {
            Some(&b) => bags[b].instances.push(it.instance.clone()),
            None => {
                index.insert(key, bags.len());
                bags.push(Bag {
                    head: it.head.clone(),
                    tail: it.tail.clone(),
                    label: it.relation,
                    instances: vec![it.instance.clone()],
                });
            }
        }
    }
    bags
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy);
    }
    out
}

/// Gradients of the mean loss over the non-NA bags of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients<S = f64> {
    pub loss: f64,
    /// Non-NA bags that contributed.
    pub bags: usize,
    /// Bags whose gold-query prediction was the gold label.
    pub correct: usize,
    /// Aligned with [`Model::tensors`].
    pub grads: Vec<Tensor<S>>,
}

/// Forward and backward pass over a batch. NA bags are skipped before any
/// computation, so they neither add loss nor consume dropout randomness.
/// Returns `None` when the batch holds only NA bags.
pub fn batch_gradients<S: Scalar>(
    model: &Model<S>,
    bags: &[&Bag],
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Option<BatchGradients<S>>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let mut losses = Vec::new();
    let mut correct = 0;
    for bag in bags {
        if model.relations.is_na(bag.label) {
            continue;
        }
        let rng = dropout.as_mut().map(|r| &mut **r as &mut dyn RngCore);
        let enc = bound.encode_bag(&mut tape, &bag.instances, rng)?;
        let fwd = bound.forward(&mut tape, enc, bag.label)?;
        let logits = tape.value(fwd.logits).data();
        if argmax(logits) == Some(bag.label) {
            correct += 1;
        }
        losses.push(tape.cross_entropy(fwd.logits, bag.label)?);
    }
    if losses.is_empty() {
        return Ok(None);
    }
    let total = tape.add_n(&losses)?;
    let mean = tape.scale(total, S::one() / S::from_usize_lossy(losses.len()));
    let loss = tape.value(mean).item().to_f64_lossless();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }
    let g = tape.backward(mean)?;
    let grads = bound.vars.iter().map(|&v| g.wrt(v)).collect();
    Ok(Some(BatchGradients {
        loss,
        bags: losses.len(),
        correct,
        grads,
    }))
}

/// Index of the largest value, first on ties.
pub fn argmax<S: PartialOrd + Copy>(xs: &[S]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in xs.iter().enumerate() {
        if best.is_none_or(|b| *x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Plain SGD update `θ ← θ − lr · g`.
pub fn sgd_step<S: Scalar>(model: &mut Model<S>, grads: &[Tensor<S>], lr: f64, fine_tune_words: bool) -> Result<()> {
    let lr: S = lit(lr);
    let names = model.param_names();
    let tensors = model.tensors_mut();
    if grads.len() != tensors.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} gradients for {} tensors", grads.len(), tensors.len()),
        ));
    }
    for ((t, g), name) in tensors.into_iter().zip(grads).zip(names) {
        if !fine_tune_words && name == "encoder.word" {
            continue;
        }
        for (p, &d) in t.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
    Ok(())
}

/// Fraction of non-NA bags whose highest-scoring relation under
/// [`Model::predict_bag`] is the gold label.
pub fn bag_accuracy<S: Scalar>(model: &Model<S>, bags: &[Bag]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let (mut n, mut hit) = (0usize, 0usize);
    for bag in bags.iter().filter(|b| !model.relations.is_na(b.label)) {
        let scores = bound.predict(&mut tape, &bag.instances)?;
        n += 1;
        if argmax(&scores) == Some(bag.label) {
            hit += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// Mini-batch trainer with a single seeded RNG for shuffling and dropout.
#[derive(Clone, Debug)]
pub struct Trainer<S = f64> {
    pub model: Model<S>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
    log: Vec<LogRow>,
    split: String,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            rng,
            epoch: 0,
            log: Vec::new(),
            split: "train".into(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Rows recorded before this trainer started (e.g. pretraining).
    pub fn prepend_log(&mut self, rows: Vec<LogRow>) {
        let mut all = rows;
        all.append(&mut self.log);
        self.log = all;
    }

    /// Checks that every bag label is known and, for the hierarchical
    /// model, has a chain in the hierarchy.
    pub fn check_bags(&self, bags: &[Bag]) -> Result<()> {
        for b in bags {
            if b.label >= self.model.num_relations() {
                return Err(Error::Data(format!(
                    "bag label {} outside the relation vocabulary",
                    b.label
                )));
            }
            if let Head::Katt(h) = &self.model.head {
                if !self.model.relations.is_na(b.label) && h.chain(b.label).is_none() {
                    return Err(Error::UnknownRelation(self.model.relations.name(b.label).to_string()));
                }
            }
        }
        Ok(())
    }

    /// One shuffled pass; returns the bag-weighted mean loss and the
    /// gold-query accuracy on non-NA bags.
    pub fn run_epoch(&mut self, bags: &[Bag]) -> Result<LogRow> {
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut count, mut correct) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Bag> = chunk.iter().map(|&i| &bags[i]).collect();
            let Some(res) = batch_gradients(&self.model, &batch, Some(&mut self.rng))? else {
                continue;
            };
            sgd_step(
                &mut self.model,
                &res.grads,
                self.config.learning_rate,
                self.config.fine_tune_words,
            )?;
            loss_sum += res.loss * res.bags as f64;
            count += res.bags;
            correct += res.correct;
        }
        self.epoch += 1;
        let row = LogRow {
            epoch: self.epoch,
            split: self.split.clone(),
            loss: if count == 0 { 0.0 } else { loss_sum / count as f64 },
            accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// Runs epochs until the configured count is reached.
    pub fn train(&mut self, bags: &[Bag]) -> Result<()> {
        self.check_bags(bags)?;
        while self.epoch < self.config.epochs {
            self.run_epoch(bags)?;
        }
        Ok(())
    }
}

/// Trains the encoder under the flat attention head for
/// `cfg.pretrain_epochs` epochs and returns the encoder with the training
/// log; the temporary head is dropped.
pub fn pretrain_encoder<S: Scalar>(
    encoder: SentenceEncoder<S>,
    model_config: &ModelConfig,
    relations: &RelationVocab,
    bags: &[Bag],
    cfg: &TrainConfig,
) -> Result<(SentenceEncoder<S>, Vec<LogRow>)> {
    if cfg.pretrain_epochs == 0 {
        return Ok((encoder, Vec::new()));
    }
    if bags.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    let config = ModelConfig {
        attention: AttentionKind::Att,
        ..model_config.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut model = Model::att(config, relations.clone(), encoder.vocab_size(), &mut rng)?;
    model.encoder = encoder;
    let tc = TrainConfig {
        epochs: cfg.pretrain_epochs,
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let mut t = Trainer::new(model, tc)?;
    t.split = "pretrain".into();
    t.train(bags)?;
    let log = t.log.clone();
    Ok((t.model.encoder, log))
}

/// A named parameter tensor with a SHA-256 checksum of its little-endian
/// `f64` bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
    pub values: Vec<f64>,
}

fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl ParamRecord {
    pub fn capture<S: Scalar>(name: &str, t: &Tensor<S>) -> Self {
        let values: Vec<f64> = t.data().iter().map(|v| v.to_f64_lossless()).collect();
        ParamRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            sha256: checksum(&values),
            values,
        }
    }

    pub fn verify(&self) -> Result<()> {
        if checksum(&self.values) != self.sha256 {
            return Err(Error::Checkpoint(format!("checksum mismatch for `{}`", self.name)));
        }
        if self.shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "shape {:?} does not match `{}`",
                self.shape, self.name
            )));
        }
        Ok(())
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        Tensor::new(
            self.shape.clone(),
            self.values.iter().map(|&v| S::from_f64_lossy(v)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex of the 32-byte ChaCha key.
    pub seed: String,
    pub stream: u64,
    /// Position in 32-bit words, in decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to rebuild a trainer mid-run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Echo of the run configuration, when the run came from one.
    pub run_config: Option<RunConfig>,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub relations: Vec<String>,
    pub relation_counts: Vec<usize>,
    pub words: Vec<String>,
    pub hierarchy: Option<String>,
    pub implicit: Option<ParamRecord>,
    pub params: Vec<ParamRecord>,
    pub log: Vec<LogRow>,
}

impl Checkpoint {
    pub fn capture<S: Scalar>(trainer: &Trainer<S>, words: &WordVocab, run_config: Option<&RunConfig>) -> Self {
        let model = &trainer.model;
        let (hierarchy, implicit) = match &model.head {
            Head::Katt(h) => (
                Some(h.hierarchy.to_text()),
                Some(ParamRecord::capture("implicit", &h.implicit)),
            ),
            Head::Att(_) => (None, None),
        };
        let params = model
            .param_names()
            .iter()
            .zip(model.tensors())
            .map(|(n, t)| ParamRecord::capture(n, t))
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            run_config: run_config.cloned(),
            model_config: model.config.clone(),
            train_config: trainer.config.clone(),
            epoch: trainer.epoch,
            rng: RngState::capture(&trainer.rng),
            relations: model.relations.names().to_vec(),
            relation_counts: model.relations.counts().to_vec(),
            words: words.words().to_vec(),
            hierarchy,
            implicit,
            params,
            log: trainer.log.clone(),
        }
    }

    pub fn word_vocab(&self) -> WordVocab {
        WordVocab::from_words(self.words.iter().skip(1).cloned())
    }

    pub fn relation_vocab(&self) -> Result<RelationVocab> {
        let mut v = RelationVocab::new(self.relations.iter().cloned())?;
        v.set_counts(self.relation_counts.clone())?;
        Ok(v)
    }

    pub fn model<S: Scalar>(&self) -> Result<Model<S>> {
        let relations = self.relation_vocab()?;
        let mut shell_rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = match self.model_config.attention {
            AttentionKind::Katt => {
                let text = self
                    .hierarchy
                    .as_deref()
                    .ok_or_else(|| Error::Checkpoint("hierarchical model without a hierarchy".into()))?;
                let graph = HierarchyGraph::parse(text, Path::new("<checkpoint>"))?;
                let rec = self
                    .implicit
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("hierarchical model without node vectors".into()))?;
                rec.verify()?;
                Model::katt(
                    self.model_config.clone(),
                    relations,
                    self.words.len(),
                    graph,
                    rec.to_tensor()?,
                    &mut shell_rng,
                )?
            }
            AttentionKind::Att => Model::att(self.model_config.clone(), relations, self.words.len(), &mut shell_rng)?,
        };
        let names = model.param_names();
        if names.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter tensors stored, model has {}",
                self.params.len(),
                names.len()
            )));
        }
        for ((t, name), rec) in model.tensors_mut().into_iter().zip(&names).zip(&self.params) {
            rec.verify()?;
            if &rec.name != name || rec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected `{name}` {:?}, found `{}` {:?}",
                    t.shape(),
                    rec.name,
                    rec.shape
                )));
            }
            *t = rec.to_tensor()?;
        }
        Ok(model)
    }

    pub fn trainer<S: Scalar>(&self) -> Result<Trainer<S>> {
        Ok(Trainer {
            model: self.model()?,
            config: self.train_config.clone(),
            rng: self.rng.restore()?,
            epoch: self.epoch,
            log: self.log.clone(),
            split: "train".into(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (supported: {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        for p in ck.params.iter().chain(&ck.implicit) {
            p.verify()?;
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
