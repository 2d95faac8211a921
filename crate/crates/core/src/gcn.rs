//! Two-layer graph convolution over the hierarchy label graph.
//!
//! Each layer mixes a node's own vector with the mean of its parents' and
//! the mean of its children's vectors through three edge-typed weights:
//!
//! `out_i = relu(W v_i + Σ_{p} W_p v_p / |N_p| + Σ_{c} W_c v_c / |N_c| + b)`
//!
//! An empty neighbor set contributes nothing. Class embeddings concatenate
//! the fixed implicit vector with the second layer's output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hierarchy::HierarchyGraph;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParams<S = f64> {
    /// `q × d_in`
    pub self_weight: Tensor<S>,
    pub parent_weight: Tensor<S>,
    pub child_weight: Tensor<S>,
    /// `q`
    pub bias: Tensor<S>,
}

impl<S: Scalar> GcnLayerParams<S> {
    pub const NAMES: [&'static str; 4] = ["self", "parent", "child", "bias"];

    /// Uniform in `±1/sqrt(d_in)`.
    pub fn init<R: Rng + ?Sized>(d_in: usize, q: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        GcnLayerParams {
            self_weight: Tensor::uniform(&[q, d_in], bound, rng),
            parent_weight: Tensor::uniform(&[q, d_in], bound, rng),
            child_weight: Tensor::uniform(&[q, d_in], bound, rng),
            bias: Tensor::uniform(&[q], bound, rng),
        }
    }

    pub fn zeros(d_in: usize, q: usize) -> Self {
        GcnLayerParams {
            self_weight: Tensor::zeros(&[q, d_in]),
            parent_weight: Tensor::zeros(&[q, d_in]),
            child_weight: Tensor::zeros(&[q, d_in]),
            bias: Tensor::zeros(&[q]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.self_weight, &self.parent_weight, &self.child_weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.self_weight,
            &mut self.parent_weight,
            &mut self.child_weight,
            &mut self.bias,
        ]
    }

    pub fn out_dim(&self) -> usize {
        self.bias.numel()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> GcnLayerVars {
        GcnLayerVars {
            self_weight: tape.param(self.self_weight.clone()),
            parent_weight: tape.param(self.parent_weight.clone()),
            child_weight: tape.param(self.child_weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GcnLayerVars {
    pub self_weight: Var,
    pub parent_weight: Var,
    pub child_weight: Var,
    pub bias: Var,
}

impl GcnLayerVars {
    pub fn all(&self) -> [Var; 4] {
        [self.self_weight, self.parent_weight, self.child_weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams<S = f64> {
    pub layer1: GcnLayerParams<S>,
    pub layer2: GcnLayerParams<S>,
}

impl<S: Scalar> GcnParams<S> {
    pub fn init<R: Rng + ?Sized>(d: usize, q: usize, rng: &mut R) -> Self {
        GcnParams {
            layer1: GcnLayerParams::init(d, q, rng),
            layer2: GcnLayerParams::init(q, q, rng),
        }
    }

    pub fn zeros(d: usize, q: usize) -> Self {
        GcnParams {
            layer1: GcnLayerParams::zeros(d, q),
            layer2: GcnLayerParams::zeros(q, q),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut v = self.layer1.tensors();
        v.extend(self.layer2.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.layer1.tensors_mut();
        v.extend(self.layer2.tensors_mut());
        v
    }

    pub fn names() -> Vec<String> {
        ["gcn1", "gcn2"]
            .iter()
            .flat_map(|l| GcnLayerParams::<S>::NAMES.iter().map(move |n| format!("{l}.{n}")))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> GcnVars {
        GcnVars {
            layer1: self.layer1.bind(tape),
            layer2: self.layer2.bind(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GcnVars {
    pub layer1: GcnLayerVars,
    pub layer2: GcnLayerVars,
}

impl GcnVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.layer1.all().to_vec();
        v.extend(self.layer2.all());
        v
    }
}

/// Constant graph operands recorded once per tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphOperands {
    pub parents: Var,
    pub children: Var,
}

impl GraphOperands {
    pub fn record<S: Scalar>(tape: &mut Tape<S>, graph: &HierarchyGraph) -> Self {
        let (p, c) = graph.adjacency::<S>();
        GraphOperands {
            parents: tape.constant(p),
            children: tape.constant(c),
        }
    }
}

fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    tape.matmul(x, wt)
}

/// One edge-typed graph convolution on the tape; `vectors` is `n × d_in`.
pub fn gcn_layer_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    graph: GraphOperands,
    vectors: Var,
    layer: &GcnLayerVars,
) -> Result<Var> {
    let n = tape.shape(graph.parents)[0];
    let vshape = tape.shape(vectors).to_vec();
    let wshape = tape.shape(layer.self_weight).to_vec();
    if vshape.len() != 2 || vshape[0] != n || wshape[1] != vshape[1] {
        return Err(Error::dim(
            "gcn_layer",
            format!("vectors {vshape:?} for {n} nodes, weight {wshape:?}"),
        ));
    }
    let own = linear(tape, vectors, layer.self_weight)?;
    let pv = tape.matmul(graph.parents, vectors)?;
    let from_parents = linear(tape, pv, layer.parent_weight)?;
    let cv = tape.matmul(graph.children, vectors)?;
    let from_children = linear(tape, cv, layer.child_weight)?;
    let sum = tape.add_n(&[own, from_parents, from_children])?;
    let biased = tape.add_row_vector(sum, layer.bias)?;
    Ok(tape.relu(biased))
}

/// `[v_implicit ; gcn2(gcn1(v_implicit))]` per node, `n × (d + q)`.
pub fn class_embeddings_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    graph: GraphOperands,
    implicit: Var,
    gcn: &GcnVars,
) -> Result<Var> {
    let h1 = gcn_layer_on_tape(tape, graph, implicit, &gcn.layer1)?;
    let h2 = gcn_layer_on_tape(tape, graph, h1, &gcn.layer2)?;
    tape.concat(&[implicit, h2])
}

/// Forward-only convenience over plain tensors.
pub fn gcn_layer<S: Scalar>(
    graph: &HierarchyGraph,
    vectors: &Tensor<S>,
    params: &GcnLayerParams<S>,
) -> Result<Tensor<S>> {
    if vectors.rank() != 2 || vectors.rows() != graph.len() {
        return Err(Error::dim(
            "gcn_layer",
            format!("{:?} vectors for {} nodes", vectors.shape(), graph.len()),
        ));
    }
    let mut tape = Tape::new();
    let ops = GraphOperands::record(&mut tape, graph);
    let v = tape.constant(vectors.clone());
    let vars = params.bind(&mut tape);
    let out = gcn_layer_on_tape(&mut tape, ops, v, &vars)?;
    Ok(tape.value(out).clone())
}

/// Class embeddings `q_r` for every hierarchy node, grouped by layer type.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable<S = f64> {
    /// `n × (d + q)` in node order.
    pub vectors: Tensor<S>,
    pub implicit_dim: usize,
    pub by_layer: Vec<Vec<usize>>,
}

impl<S: Scalar> ClassEmbeddingTable<S> {
    pub fn get(&self, node: usize) -> &[S] {
        self.vectors.row(node)
    }

    pub fn implicit(&self, node: usize) -> &[S] {
        &self.vectors.row(node)[..self.implicit_dim]
    }

    pub fn explicit(&self, node: usize) -> &[S] {
        &self.vectors.row(node)[self.implicit_dim..]
    }
}

pub fn class_embeddings<S: Scalar>(
    graph: &HierarchyGraph,
    implicit: &Tensor<S>,
    params: &GcnParams<S>,
) -> Result<ClassEmbeddingTable<S>> {
    if implicit.rank() != 2 || implicit.rows() != graph.len() {
        return Err(Error::Uninitialized("hierarchy node vectors"));
    }
    let mut tape = Tape::new();
    let ops = GraphOperands::record(&mut tape, graph);
    let v = tape.constant(implicit.clone());
    let vars = params.bind(&mut tape);
    let out = class_embeddings_on_tape(&mut tape, ops, v, &vars)?;
    Ok(ClassEmbeddingTable {
        vectors: tape.value(out).clone(),
        implicit_dim: implicit.cols(),
        by_layer: graph.layers(),
    })
}
