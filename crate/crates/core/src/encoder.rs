//! Sentence encoders: word and position embeddings followed by a CNN with
//! global max pooling, or a PCNN with max pooling over the three segments
//! delimited by the two entity mentions.

use std::ops::Range;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Pcnn,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Cnn => "CNN",
            EncoderKind::Pcnn => "PCNN",
        }
    }

    pub fn default_dropout(self) -> f64 {
        match self {
            EncoderKind::Cnn => 0.5,
            EncoderKind::Pcnn => 0.9,
        }
    }

    pub fn pieces(self) -> usize {
        match self {
            EncoderKind::Cnn => 1,
            EncoderKind::Pcnn => 3,
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(EncoderKind::Cnn),
            "pcnn" => Ok(EncoderKind::Pcnn),
            other => Err(Error::Config(format!(
                "unknown encoder `{other}` (expected cnn or pcnn)"
            ))),
        }
    }
}

/// A tokenized sentence mentioning an entity pair. Positions index the first
/// token of each mention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<usize>,
    pub head_pos: usize,
    pub tail_pos: usize,
}

impl Instance {
    pub fn new(tokens: Vec<usize>, head_pos: usize, tail_pos: usize) -> Result<Self> {
        let inst = Instance {
            tokens,
            head_pos,
            tail_pos,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Empty("instance tokens"));
        }
        if self.head_pos >= n || self.tail_pos >= n {
            return Err(Error::index(
                "instance",
                format!("entity positions ({}, {}) for {n} tokens", self.head_pos, self.tail_pos),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub clamp: usize,
    pub window: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind) -> Self {
        EncoderConfig {
            kind,
            word_dim: 300,
            pos_dim: 5,
            clamp: 50,
            window: 3,
            hidden: 230,
            dropout: kind.default_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.pos_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.clamp == 0 {
            return Err(Error::Config("position clamp must be at least 1".into()));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution window {} must be odd", self.window)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }

    pub fn output_dim(&self) -> usize {
        self.hidden * self.kind.pieces()
    }

    pub fn position_rows(&self) -> usize {
        2 * self.clamp + 2
    }
}

/// Row of the position table for `token` relative to `entity`: the signed
/// offset clipped to `±clamp`, shifted by `clamp`.
pub fn relative_position(token: usize, entity: usize, clamp: usize) -> usize {
    let c = clamp as i64;
    let offset = (token as i64 - entity as i64).clamp(-c, c);
    (offset + c) as usize
}

/// Row ranges `[0..=a]`, `[a+1..=b]`, `[b+1..n)` for ordered splits `a ≤ b < n`.
pub fn piecewise_segments(n: usize, split_a: usize, split_b: usize) -> Result<[Range<usize>; 3]> {
    if split_a > split_b || split_b >= n {
        return Err(Error::index(
            "piecewise_max_pool",
            format!("splits ({split_a}, {split_b}) for {n} rows"),
        ));
    }
    Ok([0..split_a + 1, split_a + 1..split_b + 1, split_b + 1..n])
}

/// Column maxima of `hidden` over the three entity-delimited segments; an
/// empty segment yields zeros.
pub fn piecewise_max_pool<S: Scalar>(tape: &mut Tape<S>, hidden: Var, split_a: usize, split_b: usize) -> Result<Var> {
    let n = tape.shape(hidden).first().copied().unwrap_or(0);
    let segs = piecewise_segments(n, split_a, split_b)?;
    tape.segment_max(hidden, &segs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEncoder<S = f64> {
    pub config: EncoderConfig,
    /// `vocab × d_w`
    pub word: Tensor<S>,
    /// `(2·clamp + 2) × d_p`
    pub pos_head: Tensor<S>,
    pub pos_tail: Tensor<S>,
    /// `window × d_in × hidden`
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub word: Var,
    pub pos_head: Var,
    pub pos_tail: Var,
    pub kernel: Var,
    pub bias: Var,
}

impl EncoderVars {
    pub fn all(&self) -> [Var; 5] {
        [self.word, self.pos_head, self.pos_tail, self.kernel, self.bias]
    }
}

impl<S: Scalar> SentenceEncoder<S> {
    pub const NAMES: [&'static str; 5] = ["word", "pos_head", "pos_tail", "conv.kernel", "conv.bias"];

    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Empty("word vocabulary"));
        }
        let d_in = config.input_dim();
        let word = Tensor::uniform(
            &[vocab_size, config.word_dim],
            1.0 / (config.word_dim as f64).sqrt(),
            rng,
        );
        let pb = 1.0 / (config.pos_dim as f64).sqrt();
        let pos_head = Tensor::uniform(&[config.position_rows(), config.pos_dim], pb, rng);
        let pos_tail = Tensor::uniform(&[config.position_rows(), config.pos_dim], pb, rng);
        let kb = 1.0 / ((config.window * d_in) as f64).sqrt();
        let kernel = Tensor::uniform(&[config.window, d_in, config.hidden], kb, rng);
        let bias = Tensor::zeros(&[config.hidden]);
        Ok(SentenceEncoder {
            config,
            word,
            pos_head,
            pos_tail,
            kernel,
            bias,
        })
    }

    /// Replaces the rows of the word table with pretrained vectors.
    pub fn set_word_vectors(&mut self, vectors: &Tensor<S>) -> Result<()> {
        if vectors.shape() != self.word.shape() {
            return Err(Error::dim(
                "set_word_vectors",
                format!("{:?} vs table {:?}", vectors.shape(), self.word.shape()),
            ));
        }
        self.word = vectors.clone();
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.word.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.word, &self.pos_head, &self.pos_tail, &self.kernel, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.word,
            &mut self.pos_head,
            &mut self.pos_tail,
            &mut self.kernel,
            &mut self.bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> EncoderVars {
        EncoderVars {
            word: tape.param(self.word.clone()),
            pos_head: tape.param(self.pos_head.clone()),
            pos_tail: tape.param(self.pos_tail.clone()),
            kernel: tape.param(self.kernel.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    /// `n × (d_w + 2·d_p)` input matrix: word vector, then head and tail
    /// position vectors.
    pub fn embed_on_tape(&self, tape: &mut Tape<S>, vars: &EncoderVars, inst: &Instance) -> Result<Var> {
        inst.validate()?;
        if let Some(&bad) = inst.tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::index(
                "embed_instance",
                format!("token {bad} >= vocabulary {}", self.vocab_size()),
            ));
        }
        let clamp = self.config.clamp;
        let n = inst.tokens.len();
        let hp: Vec<usize> = (0..n).map(|i| relative_position(i, inst.head_pos, clamp)).collect();
        let tp: Vec<usize> = (0..n).map(|i| relative_position(i, inst.tail_pos, clamp)).collect();
        let w = tape.gather(vars.word, &inst.tokens)?;
        let ph = tape.gather(vars.pos_head, &hp)?;
        let pt = tape.gather(vars.pos_tail, &tp)?;
        tape.concat(&[w, ph, pt])
    }

    /// Instance embedding. Dropout applies only when an RNG is supplied.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &EncoderVars,
        inst: &Instance,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let x = self.embed_on_tape(tape, vars, inst)?;
        let conv = tape.conv1d(x, vars.kernel, vars.bias)?;
        let n = inst.tokens.len();
        let pooled = match self.config.kind {
            EncoderKind::Cnn => tape.segment_max(conv, std::slice::from_ref(&(0..n)))?,
            EncoderKind::Pcnn => {
                let a = inst.head_pos.min(inst.tail_pos);
                let b = inst.head_pos.max(inst.tail_pos);
                piecewise_max_pool(tape, conv, a, b)?
            }
        };
        let out = tape.tanh(pooled);
        match dropout {
            Some(rng) if self.config.dropout > 0.0 => {
                let p = self.config.dropout;
                let keep: S = lit(1.0 / (1.0 - p));
                let mask = (0..self.output_dim())
                    .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
                    .collect();
                tape.mask_mul(out, mask)
            }
            _ => Ok(out),
        }
    }

    pub fn embed_instance(&self, inst: &Instance) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = self.embed_on_tape(&mut tape, &vars, inst)?;
        Ok(tape.value(x).clone())
    }

    /// Evaluation-mode encoding (no dropout).
    pub fn encode(&self, inst: &Instance) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = self.encode_on_tape(&mut tape, &vars, inst, None)?;
        Ok(tape.value(x).clone())
    }
}
