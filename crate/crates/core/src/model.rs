//! Full relation classifier: sentence encoder plus either the hierarchical
//! knowledge-aware attention head or the flat selective-attention head.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_keys, bag_representation_on_tape, plain_att_on_tape, score_and_prob_on_tape, AttentionParams,
    AttentionVars, BagRepresentation, ScoreLayer, ScoreVars,
};
use crate::encoder::{EncoderConfig, EncoderVars, Instance, SentenceEncoder};
use crate::error::{Error, Result};
use crate::gcn::{class_embeddings, class_embeddings_on_tape, ClassEmbeddingTable, GcnParams, GcnVars, GraphOperands};
use crate::hierarchy::{HierarchyGraph, RelationVocab};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Katt,
    Att,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Katt => "KATT",
            AttentionKind::Att => "ATT",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "katt" => Ok(AttentionKind::Katt),
            "att" => Ok(AttentionKind::Att),
            other => Err(Error::Config(format!(
                "unknown attention `{other}` (expected katt or att)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionKind,
    /// Hidden width of the additive instance scorer.
    pub attention_hidden: usize,
    /// GCN output width `q`; `None` means `q = d`.
    pub gcn_dim: Option<usize>,
    pub output_bias: bool,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, attention: AttentionKind) -> Self {
        ModelConfig {
            encoder,
            attention,
            attention_hidden: 64,
            gcn_dim: None,
            output_bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KattHead<S = f64> {
    pub hierarchy: HierarchyGraph,
    /// Fixed implicit node vectors, `n × d`.
    pub implicit: Tensor<S>,
    pub gcn: GcnParams<S>,
    pub attention: AttentionParams<S>,
    /// `W_g`, one weight per encoder feature.
    pub layer_weight: Tensor<S>,
    /// Query used at every layer when scoring NA.
    pub na_query: Tensor<S>,
    pub output: ScoreLayer<S>,
    chains: Vec<Option<Vec<usize>>>,
}

impl<S: Scalar> KattHead<S> {
    pub fn chain(&self, relation: usize) -> Option<&[usize]> {
        self.chains.get(relation).and_then(|c| c.as_deref())
    }

    pub fn depth(&self) -> usize {
        self.hierarchy.depth()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttHead<S = f64> {
    /// Diagonal of the bilinear scoring form.
    pub diag: Tensor<S>,
    /// One learned query per relation, `|R| × enc`.
    pub queries: Tensor<S>,
    pub output: ScoreLayer<S>,
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Head<S = f64> {
    Katt(KattHead<S>),
    Att(AttHead<S>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S = f64> {
    pub config: ModelConfig,
    pub relations: RelationVocab,
    pub encoder: SentenceEncoder<S>,
    pub head: Head<S>,
}

fn relation_chains(graph: &HierarchyGraph, relations: &RelationVocab) -> Result<Vec<Option<Vec<usize>>>> {
    graph.check_leaves(relations)?;
    (0..relations.len())
        .map(|r| {
            if relations.is_na(r) {
                Ok(None)
            } else {
                graph.chain(relations.name(r)).map(Some)
            }
        })
        .collect()
}

impl<S: Scalar> Model<S> {
    /// Hierarchical model. Every non-NA relation must be a leaf of
    /// `hierarchy`; `implicit` holds one row per hierarchy node.
    pub fn katt<R: Rng + ?Sized>(
        config: ModelConfig,
        relations: RelationVocab,
        vocab_size: usize,
        hierarchy: HierarchyGraph,
        implicit: Tensor<S>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.attention != AttentionKind::Katt {
            return Err(Error::Config("hierarchical model needs attention = katt".into()));
        }
        if implicit.rank() != 2 || implicit.rows() != hierarchy.len() {
            return Err(Error::Uninitialized("hierarchy node vectors"));
        }
        if relations.is_empty() {
            return Err(Error::Empty("relation vocabulary"));
        }
        let chains = relation_chains(&hierarchy, &relations)?;
        let encoder = SentenceEncoder::init(config.encoder.clone(), vocab_size, rng)?;
        let enc = encoder.output_dim();
        let d = implicit.cols();
        let q = config.gcn_dim.unwrap_or(d);
        let depth = hierarchy.depth();
        let gcn = GcnParams::init(d, q, rng);
        let attention = AttentionParams::init(enc, d + q, config.attention_hidden, rng);
        let layer_weight = Tensor::uniform(&[enc], 1.0 / (enc as f64).sqrt(), rng);
        let na_query = Tensor::uniform(&[d + q], 1.0 / ((d + q) as f64).sqrt(), rng);
        let output = ScoreLayer::init(relations.len(), depth * enc, config.output_bias, rng);
        Ok(Model {
            config,
            relations,
            encoder,
            head: Head::Katt(KattHead {
                hierarchy,
                implicit,
                gcn,
                attention,
                layer_weight,
                na_query,
                output,
                chains,
            }),
        })
    }

    /// Flat selective-attention baseline.
    pub fn att<R: Rng + ?Sized>(
        config: ModelConfig,
        relations: RelationVocab,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.attention != AttentionKind::Att {
            return Err(Error::Config("baseline model needs attention = att".into()));
        }
        if relations.is_empty() {
            return Err(Error::Empty("relation vocabulary"));
        }
        let encoder = SentenceEncoder::init(config.encoder.clone(), vocab_size, rng)?;
        let enc = encoder.output_dim();
        let bound = 1.0 / (enc as f64).sqrt();
        let head = AttHead {
            diag: Tensor::full(&[enc], S::one()),
            queries: Tensor::uniform(&[relations.len(), enc], bound, rng),
            output: ScoreLayer::init(relations.len(), enc, config.output_bias, rng),
        };
        Ok(Model {
            config,
            relations,
            encoder,
            head: Head::Att(head),
        })
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn katt_head(&self) -> Option<&KattHead<S>> {
        match &self.head {
            Head::Katt(h) => Some(h),
            Head::Att(_) => None,
        }
    }

    /// Names of the trainable tensors, aligned with [`Model::tensors`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = SentenceEncoder::<S>::NAMES
            .iter()
            .map(|n| format!("encoder.{n}"))
            .collect();
        match &self.head {
            Head::Katt(h) => {
                names.extend(GcnParams::<S>::names());
                names.extend(AttentionParams::<S>::NAMES.iter().map(|n| n.to_string()));
                names.push("layer_att.weight".into());
                names.push("na_query".into());
                names.extend(h.output.names().iter().map(|n| n.to_string()));
            }
            Head::Att(h) => {
                names.push("att_flat.diag".into());
                names.push("att_flat.queries".into());
                names.extend(h.output.names().iter().map(|n| n.to_string()));
            }
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut v = self.encoder.tensors();
        match &self.head {
            Head::Katt(h) => {
                v.extend(h.gcn.tensors());
                v.extend(h.attention.tensors());
                v.push(&h.layer_weight);
                v.push(&h.na_query);
                v.extend(h.output.tensors());
            }
            Head::Att(h) => {
                v.push(&h.diag);
                v.push(&h.queries);
                v.extend(h.output.tensors());
            }
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.encoder.tensors_mut();
        match &mut self.head {
            Head::Katt(h) => {
                v.extend(h.gcn.tensors_mut());
                v.extend(h.attention.tensors_mut());
                v.push(&mut h.layer_weight);
                v.push(&mut h.na_query);
                v.extend(h.output.tensors_mut());
            }
            Head::Att(h) => {
                v.push(&mut h.diag);
                v.push(&mut h.queries);
                v.extend(h.output.tensors_mut());
            }
        }
        v
    }

    /// Records the parameters on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'m>(&'m self, tape: &mut Tape<S>, trainable: bool) -> Result<BoundModel<'m, S>> {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.bind_with(tape, vars)
    }

    /// Binds to handles already on `tape`, aligned with [`Model::tensors`]
    /// and of matching shapes.
    pub fn bind_with<'m>(&'m self, tape: &mut Tape<S>, vars: Vec<Var>) -> Result<BoundModel<'m, S>> {
        let own = self.tensors();
        if vars.len() != own.len() || vars.iter().zip(&own).any(|(&v, t)| tape.shape(v) != t.shape()) {
            return Err(Error::dim(
                "bind",
                format!("{} handles for {} parameters", vars.len(), own.len()),
            ));
        }
        let enc = EncoderVars {
            word: vars[0],
            pos_head: vars[1],
            pos_tail: vars[2],
            kernel: vars[3],
            bias: vars[4],
        };
        let rest = &vars[5..];
        let head = match &self.head {
            Head::Katt(h) => {
                let layer = |o: usize| crate::gcn::GcnLayerVars {
                    self_weight: rest[o],
                    parent_weight: rest[o + 1],
                    child_weight: rest[o + 2],
                    bias: rest[o + 3],
                };
                let gcn = GcnVars {
                    layer1: layer(0),
                    layer2: layer(4),
                };
                let att = AttentionVars {
                    inst_weight: rest[8],
                    query_weight: rest[9],
                    bias: rest[10],
                    score: rest[11],
                };
                let ops = GraphOperands::record(tape, &h.hierarchy);
                let implicit = tape.constant(h.implicit.clone());
                let class_table = class_embeddings_on_tape(tape, ops, implicit, &gcn)?;
                BoundHead::Katt {
                    att,
                    layer_weight: rest[12],
                    na_query: rest[13],
                    out: ScoreVars {
                        weight: rest[14],
                        bias: rest.get(15).copied(),
                    },
                    class_table,
                }
            }
            Head::Att(_) => BoundHead::Att {
                diag: rest[0],
                queries: rest[1],
                out: ScoreVars {
                    weight: rest[2],
                    bias: rest.get(3).copied(),
                },
            },
        };
        Ok(BoundModel {
            model: self,
            vars,
            enc,
            head,
        })
    }

    /// Current class embeddings for every hierarchy node.
    pub fn class_embeddings(&self) -> Result<ClassEmbeddingTable<S>> {
        match &self.head {
            Head::Katt(h) => class_embeddings(&h.hierarchy, &h.implicit, &h.gcn),
            Head::Att(_) => Err(Error::Config("the flat attention model has no class embeddings".into())),
        }
    }

    /// Evaluation-mode score `P(r | bag)` for every relation, where each
    /// candidate is scored with the representation built from its own queries.
    pub fn predict_bag(&self, instances: &[Instance]) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        bound.predict(&mut tape, instances)
    }

    /// Evaluation-mode attention weights for `relation`'s queries.
    pub fn attention_trace(&self, instances: &[Instance], relation: usize) -> Result<AttentionTrace<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let enc = bound.encode_bag(&mut tape, instances, None)?;
        let fwd = bound.forward(&mut tape, enc, relation)?;
        let alphas = fwd.alphas.iter().map(|&a| tape.value(a).data().to_vec()).collect();
        let beta = fwd.beta.map(|b| tape.value(b).data().to_vec());
        let nodes = match &self.head {
            Head::Katt(h) => h.chain(relation).map(<[usize]>::to_vec),
            Head::Att(_) => None,
        };
        Ok(AttentionTrace {
            alphas,
            beta,
            nodes,
            probs: tape.value(fwd.probs).data().to_vec(),
        })
    }
}

/// Attention weights for one bag and one candidate relation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<S = f64> {
    /// One weight vector per layer (a single one for the flat model).
    pub alphas: Vec<Vec<S>>,
    pub beta: Option<Vec<S>>,
    /// Hierarchy nodes queried at each layer; `None` for NA or the flat model.
    pub nodes: Option<Vec<usize>>,
    pub probs: Vec<S>,
}

#[derive(Clone, Copy, Debug)]
pub enum BoundHead {
    Katt {
        att: AttentionVars,
        layer_weight: Var,
        na_query: Var,
        out: ScoreVars,
        class_table: Var,
    },
    Att {
        diag: Var,
        queries: Var,
        out: ScoreVars,
    },
}

/// Result of scoring one bag against one candidate relation.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    pub alphas: Vec<Var>,
    pub beta: Option<Var>,
    pub rep: Var,
}

/// Bag encodings plus the instance-side attention projections.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBag {
    pub encodings: Var,
    keys: Option<Var>,
}

/// A model whose parameters are recorded on a tape.
#[derive(Debug)]
pub struct BoundModel<'m, S = f64> {
    pub model: &'m Model<S>,
    /// Tape handles aligned with [`Model::tensors`].
    pub vars: Vec<Var>,
    pub enc: EncoderVars,
    pub head: BoundHead,
}

impl<S: Scalar> BoundModel<'_, S> {
    /// Encodes every instance of a bag (`m × enc`).
    pub fn encode_bag(
        &self,
        tape: &mut Tape<S>,
        instances: &[Instance],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<EncodedBag> {
        if instances.is_empty() {
            return Err(Error::Empty("bag"));
        }
        let mut rows = Vec::with_capacity(instances.len());
        for inst in instances {
            let rng = dropout.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            rows.push(self.model.encoder.encode_on_tape(tape, &self.enc, inst, rng)?);
        }
        let encodings = tape.stack(&rows)?;
        let keys = match &self.head {
            BoundHead::Katt { att, .. } => Some(attention_keys(tape, encodings, att)?),
            BoundHead::Att { .. } => None,
        };
        Ok(EncodedBag { encodings, keys })
    }

    /// Class distribution for the bag using `relation`'s queries.
    pub fn forward(&self, tape: &mut Tape<S>, bag: EncodedBag, relation: usize) -> Result<Forward> {
        if relation >= self.model.num_relations() {
            return Err(Error::index(
                "forward",
                format!("relation {relation} of {}", self.model.num_relations()),
            ));
        }
        match (&self.head, &self.model.head) {
            (
                BoundHead::Katt {
                    att,
                    layer_weight,
                    na_query,
                    out,
                    class_table,
                },
                Head::Katt(h),
            ) => {
                let queries: Vec<Var> = match h.chain(relation) {
                    Some(chain) => chain
                        .iter()
                        .map(|&node| tape.row(*class_table, node))
                        .collect::<Result<_>>()?,
                    None => vec![*na_query; h.depth()],
                };
                let keys = bag.keys.ok_or(Error::Uninitialized("attention keys"))?;
                let BagRepresentation { alphas, beta, rep, .. } =
                    bag_representation_on_tape(tape, bag.encodings, keys, &queries, att, *layer_weight)?;
                let (logits, probs) = score_and_prob_on_tape(tape, rep, out)?;
                Ok(Forward {
                    logits,
                    probs,
                    alphas,
                    beta: Some(beta),
                    rep,
                })
            }
            (BoundHead::Att { diag, queries, out }, Head::Att(_)) => {
                let q = tape.row(*queries, relation)?;
                let (alpha, rep) = plain_att_on_tape(tape, bag.encodings, q, *diag)?;
                let (logits, probs) = score_and_prob_on_tape(tape, rep, out)?;
                Ok(Forward {
                    logits,
                    probs,
                    alphas: vec![alpha],
                    beta: None,
                    rep,
                })
            }
            _ => Err(Error::Uninitialized("bound head does not match model")),
        }
    }

    /// `-log P(label | bag)`, or `None` for an NA bag, which contributes no
    /// loss and records nothing on the tape.
    pub fn bag_loss(
        &self,
        tape: &mut Tape<S>,
        instances: &[Instance],
        label: usize,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Option<Var>> {
        if self.model.relations.is_na(label) {
            return Ok(None);
        }
        let bag = self.encode_bag(tape, instances, dropout)?;
        let fwd = self.forward(tape, bag, label)?;
        Ok(Some(tape.cross_entropy(fwd.logits, label)?))
    }

    /// Score vector over all relations; the tape is restored to its length
    /// on entry.
    pub fn predict(&self, tape: &mut Tape<S>, instances: &[Instance]) -> Result<Vec<S>> {
        let mark = tape.len();
        let result = (|| {
            let bag = self.encode_bag(tape, instances, None)?;
            let mut scores = Vec::with_capacity(self.model.num_relations());
            for r in 0..self.model.num_relations() {
                let inner = tape.len();
                let fwd = self.forward(tape, bag, r)?;
                scores.push(tape.value(fwd.probs).data()[r]);
                tape.truncate(inner);
            }
            Ok(scores)
        })();
        tape.truncate(mark);
        result
    }
}
