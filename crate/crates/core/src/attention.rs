//! Coarse-to-fine instance attention over a bag, layer attention across the
//! hierarchy levels, output scoring, and the flat selective-attention baseline.
//!
//! Instance scores use an additive form with one hidden layer:
//!
//! `e_k = u · tanh(W_inst s_k + W_query q + b)`
//!
//! so the query changes the ranking of instances rather than shifting every
//! score by the same amount.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S = f64> {
    /// `a × enc`
    pub inst_weight: Tensor<S>,
    /// `a × (d + q)`
    pub query_weight: Tensor<S>,
    /// `a`
    pub bias: Tensor<S>,
    /// `a`
    pub score: Tensor<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub inst_weight: Var,
    pub query_weight: Var,
    pub bias: Var,
    pub score: Var,
}

impl AttentionVars {
    pub fn all(&self) -> [Var; 4] {
        [self.inst_weight, self.query_weight, self.bias, self.score]
    }
}

impl<S: Scalar> AttentionParams<S> {
    pub const NAMES: [&'static str; 4] = ["att.inst", "att.query", "att.bias", "att.score"];

    pub fn init<R: Rng + ?Sized>(enc_dim: usize, query_dim: usize, hidden: usize, rng: &mut R) -> Self {
        AttentionParams {
            inst_weight: Tensor::uniform(&[hidden, enc_dim], 1.0 / (enc_dim as f64).sqrt(), rng),
            query_weight: Tensor::uniform(&[hidden, query_dim], 1.0 / (query_dim as f64).sqrt(), rng),
            bias: Tensor::zeros(&[hidden]),
            score: Tensor::uniform(&[hidden], 1.0 / (hidden as f64).sqrt(), rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.inst_weight, &self.query_weight, &self.bias, &self.score]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.inst_weight,
            &mut self.query_weight,
            &mut self.bias,
            &mut self.score,
        ]
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> AttentionVars {
        AttentionVars {
            inst_weight: tape.param(self.inst_weight.clone()),
            query_weight: tape.param(self.query_weight.clone()),
            bias: tape.param(self.bias.clone()),
            score: tape.param(self.score.clone()),
        }
    }
}

/// Instance-side projections `S W_instᵀ` (`m × a`), shared by every query.
pub fn attention_keys<S: Scalar>(tape: &mut Tape<S>, encodings: Var, att: &AttentionVars) -> Result<Var> {
    if tape.shape(encodings).len() != 2 {
        return Err(Error::dim(
            "instance_attention",
            format!("encodings {:?}", tape.shape(encodings)),
        ));
    }
    let wt = tape.transpose(att.inst_weight)?;
    tape.matmul(encodings, wt)
}

/// Attention weights over the rows of `encodings` for one query, and the
/// weighted sum of rows.
pub fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    encodings: Var,
    keys: Var,
    query: Var,
    att: &AttentionVars,
) -> Result<(Var, Var)> {
    let qp = tape.matvec(att.query_weight, query)?;
    let qb = tape.add(qp, att.bias)?;
    let z = tape.add_row_vector(keys, qb)?;
    let h = tape.tanh(z);
    let e = tape.matvec(h, att.score)?;
    let alpha = tape.softmax(e)?;
    let st = tape.transpose(encodings)?;
    let rep = tape.matvec(st, alpha)?;
    Ok((alpha, rep))
}

pub fn instance_attention_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    encodings: Var,
    query: Var,
    att: &AttentionVars,
) -> Result<(Var, Var)> {
    let keys = attention_keys(tape, encodings, att)?;
    attend(tape, encodings, keys, query, att)
}

/// Forward-only instance attention over the rows of `encodings`.
pub fn instance_attention<S: Scalar>(
    encodings: &Tensor<S>,
    query: &Tensor<S>,
    params: &AttentionParams<S>,
) -> Result<(Vec<S>, Vec<S>)> {
    if encodings.rank() != 2 {
        return Err(Error::Empty("bag encodings"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(encodings.clone());
    let q = tape.constant(query.clone());
    let vars = params.bind(&mut tape);
    let (a, r) = instance_attention_on_tape(&mut tape, s, q, &vars)?;
    Ok((tape.value(a).data().to_vec(), tape.value(r).data().to_vec()))
}

/// `g_i = w_g · tanh(r^i)`, `β = softmax(g)`; returns `β` (length `L`) and the
/// reweighted representations stacked as an `L × enc` matrix.
pub fn layer_attention_on_tape<S: Scalar>(tape: &mut Tape<S>, reps: &[Var], w_g: Var) -> Result<(Var, Var)> {
    if reps.is_empty() {
        return Err(Error::Empty("layer_attention"));
    }
    let r = tape.stack(reps)?;
    let t = tape.tanh(r);
    let g = tape.matvec(t, w_g)?;
    let beta = tape.softmax(g)?;
    let weighted = tape.row_scale(r, beta)?;
    Ok((beta, weighted))
}

pub fn layer_attention<S: Scalar>(reps: &[Tensor<S>], w_g: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = reps.iter().map(|r| tape.constant(r.clone())).collect();
    let w = tape.constant(w_g.clone());
    let (beta, out) = layer_attention_on_tape(&mut tape, &vars, w)?;
    Ok((tape.value(beta).data().to_vec(), tape.value(out).clone()))
}

/// Tape handles for one bag's hierarchical representation.
#[derive(Clone, Debug)]
pub struct BagRepresentation {
    pub alphas: Vec<Var>,
    pub per_layer: Vec<Var>,
    pub beta: Var,
    /// `concat(β_0 r^0, ..., β_{L-1} r^{L-1})`
    pub rep: Var,
}

/// Attends over the bag once per query in `queries` (one per layer, finest
/// first), then weights and concatenates the layer representations.
pub fn bag_representation_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    encodings: Var,
    keys: Var,
    queries: &[Var],
    att: &AttentionVars,
    w_g: Var,
) -> Result<BagRepresentation> {
    if queries.is_empty() {
        return Err(Error::Empty("relation chain"));
    }
    let mut alphas = Vec::with_capacity(queries.len());
    let mut per_layer = Vec::with_capacity(queries.len());
    for &q in queries {
        let (a, r) = attend(tape, encodings, keys, q, att)?;
        alphas.push(a);
        per_layer.push(r);
    }
    let (beta, weighted) = layer_attention_on_tape(tape, &per_layer, w_g)?;
    let len = tape.value(weighted).numel();
    let rep = tape.reshape(weighted, vec![len])?;
    Ok(BagRepresentation {
        alphas,
        per_layer,
        beta,
        rep,
    })
}

/// Output layer: one row of `M` per relation including NA.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLayer<S = f64> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl<S: Scalar> ScoreLayer<S> {
    pub fn init<R: Rng + ?Sized>(relations: usize, input_dim: usize, with_bias: bool, rng: &mut R) -> Self {
        ScoreLayer {
            weight: Tensor::uniform(&[relations, input_dim], 1.0 / (input_dim as f64).sqrt(), rng),
            bias: with_bias.then(|| Tensor::zeros(&[relations])),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        if self.bias.is_some() {
            vec!["out.weight", "out.bias"]
        } else {
            vec!["out.weight"]
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> ScoreVars {
        ScoreVars {
            weight: tape.param(self.weight.clone()),
            bias: self.bias.as_ref().map(|b| tape.param(b.clone())),
        }
    }
}

/// `o = M r (+ b)` and `P = softmax(o)`.
pub fn score_and_prob_on_tape<S: Scalar>(tape: &mut Tape<S>, rep: Var, out: &ScoreVars) -> Result<(Var, Var)> {
    let cols = tape.shape(out.weight)[1];
    if tape.value(rep).numel() != cols {
        return Err(Error::dim(
            "score_and_prob",
            format!("representation of {} vs {cols} score columns", tape.value(rep).numel()),
        ));
    }
    let mut o = tape.matvec(out.weight, rep)?;
    if let Some(b) = out.bias {
        o = tape.add(o, b)?;
    }
    let p = tape.softmax(o)?;
    Ok((o, p))
}

pub fn score_and_prob<S: Scalar>(rep: &Tensor<S>, layer: &ScoreLayer<S>) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let r = tape.constant(rep.clone());
    let vars = layer.bind(&mut tape);
    let (_, p) = score_and_prob_on_tape(&mut tape, r, &vars)?;
    Ok(tape.value(p).data().to_vec())
}

/// Flat selective attention with a diagonal bilinear score
/// `e_k = s_k · (A ⊙ q_r)` against a learned per-relation query.
pub fn plain_att_on_tape<S: Scalar>(tape: &mut Tape<S>, encodings: Var, query: Var, diag: Var) -> Result<(Var, Var)> {
    let aq = tape.mul(diag, query)?;
    let e = tape.matvec(encodings, aq)?;
    let alpha = tape.softmax(e)?;
    let st = tape.transpose(encodings)?;
    let rep = tape.matvec(st, alpha)?;
    Ok((alpha, rep))
}

/// Forward-only baseline: weights, representation and class distribution.
pub fn plain_att<S: Scalar>(
    encodings: &Tensor<S>,
    query: &Tensor<S>,
    diag: &Tensor<S>,
    layer: &ScoreLayer<S>,
) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let mut tape = Tape::new();
    let s = tape.constant(encodings.clone());
    let q = tape.constant(query.clone());
    let d = tape.constant(diag.clone());
    let (a, r) = plain_att_on_tape(&mut tape, s, q, d)?;
    let vars = layer.bind(&mut tape);
    let (_, p) = score_and_prob_on_tape(&mut tape, r, &vars)?;
    Ok((
        tape.value(a).data().to_vec(),
        tape.value(r).data().to_vec(),
        tape.value(p).data().to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(enc: usize, dq: usize) -> AttentionParams<f64> {
        AttentionParams::init(enc, dq, 3, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn singleton_bag() {
        let s = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let (a, r) = instance_attention(&s, &Tensor::vector(vec![1.0, 2.0]).unwrap(), &params(2, 2)).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(r, vec![0.3, -0.7]);
    }

    #[test]
    fn identical_rows_share_weight() {
        let s = Tensor::matrix(2, 2, vec![0.3, -0.7, 0.3, -0.7]).unwrap();
        let (a, _) = instance_attention(&s, &Tensor::vector(vec![1.0, 2.0]).unwrap(), &params(2, 2)).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_set_scores_ln3() {
        // s_1 maps to tanh⁻¹(1/2), s_2 to 0; u = 2 ln 3 gives e = (ln 3, 0)
        let s = Tensor::matrix(2, 1, vec![0.5f64.atanh(), 0.0]).unwrap();
        let p = AttentionParams {
            inst_weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            query_weight: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
            score: Tensor::vector(vec![2.0 * 3f64.ln()]).unwrap(),
        };
        let (a, r) = instance_attention(&s, &Tensor::vector(vec![7.0]).unwrap(), &p).unwrap();
        assert!((a[0] - 0.75).abs() < 1e-12 && (a[1] - 0.25).abs() < 1e-12);
        assert!((r[0] - 0.75 * s.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn query_changes_ranking() {
        let s = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = AttentionParams {
            inst_weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            query_weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
            score: Tensor::vector(vec![1.0, 1.0]).unwrap(),
        };
        let (a1, _) = instance_attention(&s, &Tensor::vector(vec![-3.0, 0.0]).unwrap(), &p).unwrap();
        let (a2, _) = instance_attention(&s, &Tensor::vector(vec![0.0, -3.0]).unwrap(), &p).unwrap();
        assert!(a1[0] < a1[1]);
        assert!(a2[0] > a2[1]);
    }

    #[test]
    fn layer_attention_examples() {
        let r: Tensor<f64> = Tensor::vector(vec![0.2, 0.4]).unwrap();
        let (beta, out) = layer_attention(
            &[r.clone(), r.clone(), r.clone()],
            &Tensor::vector(vec![1.0, -2.0]).unwrap(),
        )
        .unwrap();
        assert!(beta.iter().all(|b| (b - 1.0 / 3.0).abs() < 1e-12));
        let (b1, o1) = layer_attention(std::slice::from_ref(&r), &Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
        assert_eq!(b1, vec![1.0]);
        assert_eq!(o1.data(), r.data());
        assert_eq!(out.shape(), &[3, 2]);

        // w_g = (2, 0) and tanh(r^i)_0 = g_i / 2 give g = (0, ln 2, ln 4)
        let reps: Vec<Tensor<f64>> = [0.0, 2f64.ln(), 4f64.ln()]
            .iter()
            .map(|g: &f64| Tensor::vector(vec![(g / 2.0).atanh(), 0.0]).unwrap())
            .collect();
        let (b, _) = layer_attention(&reps, &Tensor::vector(vec![2.0, 0.0]).unwrap()).unwrap();
        for (x, e) in b.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((x - e).abs() < 1e-12);
        }
        assert!(layer_attention::<f64>(&[], &Tensor::vector(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn score_examples() {
        let rep = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let zero = ScoreLayer {
            weight: Tensor::zeros(&[4, 2]),
            bias: None,
        };
        assert!(score_and_prob(&rep, &zero).unwrap().iter().all(|&p| p == 0.25));
        let m = ScoreLayer {
            weight: Tensor::matrix(2, 2, vec![9f64.ln(), 0.0, 0.0, 0.0]).unwrap(),
            bias: Some(Tensor::zeros(&[2])),
        };
        let p = score_and_prob(&Tensor::vector(vec![1.0, 5.0]).unwrap(), &m).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12);
        assert!(score_and_prob(&Tensor::vector(vec![1.0]).unwrap(), &m).is_err());
    }

    #[test]
    fn plain_att_singleton_and_symmetry() {
        let layer = ScoreLayer {
            weight: Tensor::zeros(&[2, 2]),
            bias: None,
        };
        let q = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let d = Tensor::vector(vec![0.5, 2.0]).unwrap();
        let (a, r, _) = plain_att(&Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap(), &q, &d, &layer).unwrap();
        assert_eq!((a, r), (vec![1.0], vec![3.0, 4.0]));
        let (a, _, _) = plain_att(&Tensor::matrix(2, 2, vec![3.0, 4.0, 3.0, 4.0]).unwrap(), &q, &d, &layer).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
    }
}
