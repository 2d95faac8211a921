//! Brute-force reference implementations and fixtures shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use katt::encoder::{EncoderConfig, EncoderKind, Instance};
use katt::eval::PredictionRecord;
use katt::hierarchy::{build_agglomerative, build_kmeans, parse_predefined, HierarchyGraph, RelationVocab};
use katt::model::{AttentionKind, Model, ModelConfig};
use katt::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::matrix(m.len(), m[0].len(), m.concat()).unwrap()
}

pub fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Same-padded convolution over an explicitly zero-padded copy of `x`;
/// `w[j][i][o]` is the weight of offset `j`, input feature `i`, output `o`.
pub fn conv1d(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], b: &[f64]) -> Vec<Vec<f64>> {
    let k = w.len();
    let pad = k / 2;
    let d = x[0].len();
    let mut padded = vec![vec![0.0; d]; pad];
    padded.extend(x.iter().cloned());
    padded.extend(vec![vec![0.0; d]; pad]);
    (0..x.len())
        .map(|t| {
            (0..b.len())
                .map(|o| {
                    let mut acc = b[o];
                    for (j, wj) in w.iter().enumerate() {
                        for (i, wji) in wj.iter().enumerate() {
                            acc += padded[t + j][i] * wji[o];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn kernel_tensor(w: &[Vec<Vec<f64>>]) -> Tensor<f64> {
    let (k, d, o) = (w.len(), w[0].len(), w[0][0].len());
    Tensor::new(vec![k, d, o], w.iter().flatten().flatten().copied().collect()).unwrap()
}

/// Column maxima over each segment; an empty segment gives zeros.
pub fn segment_max(x: &[Vec<f64>], segments: &[std::ops::Range<usize>]) -> Vec<f64> {
    let h = x[0].len();
    let mut out = Vec::new();
    for seg in segments {
        for c in 0..h {
            let col: Vec<f64> = x[seg.clone()].iter().map(|r| r[c]).collect();
            out.push(if col.is_empty() {
                0.0
            } else {
                col.into_iter().fold(f64::NEG_INFINITY, f64::max)
            });
        }
    }
    out
}

fn matvec(w: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Edge-typed graph convolution read straight off the tree: own term, mean
/// over the parent, mean over the children, bias, relu.
pub fn gcn_layer(
    graph: &HierarchyGraph,
    v: &[Vec<f64>],
    w_self: &[Vec<f64>],
    w_parent: &[Vec<f64>],
    w_child: &[Vec<f64>],
    b: &[f64],
) -> Vec<Vec<f64>> {
    (0..graph.len())
        .map(|i| {
            let node = graph.node(i);
            let own = matvec(w_self, &v[i]);
            let mut from_parent = vec![0.0; b.len()];
            if let Some(p) = node.parent {
                from_parent = matvec(w_parent, &v[p]);
            }
            let mut from_children = vec![0.0; b.len()];
            for &c in &node.children {
                for (acc, x) in from_children.iter_mut().zip(matvec(w_child, &v[c])) {
                    *acc += x / node.children.len() as f64;
                }
            }
            (0..b.len())
                .map(|o| (own[o] + from_parent[o] + from_children[o] + b[o]).max(0.0))
                .collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `e_k = u · tanh(W_inst s_k + W_query q + b)`, `α = softmax(e)`,
/// `r = Σ α_k s_k`.
pub fn instance_attention(
    s: &[Vec<f64>],
    q: &[f64],
    w_inst: &[Vec<f64>],
    w_query: &[Vec<f64>],
    bias: &[f64],
    u: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let qp = matvec(w_query, q);
    let e: Vec<f64> = s
        .iter()
        .map(|sk| {
            let kp = matvec(w_inst, sk);
            (0..u.len()).map(|a| u[a] * (kp[a] + qp[a] + bias[a]).tanh()).sum()
        })
        .collect();
    let alpha = softmax(&e);
    let mut rep = vec![0.0; s[0].len()];
    for (a, sk) in alpha.iter().zip(s) {
        for (r, x) in rep.iter_mut().zip(sk) {
            *r += a * x;
        }
    }
    (alpha, rep)
}

/// `β = softmax(w_g · tanh(r_i))`, rows scaled by `β_i`.
pub fn layer_attention(reps: &[Vec<f64>], w_g: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let g: Vec<f64> = reps
        .iter()
        .map(|r| r.iter().zip(w_g).map(|(x, w)| x.tanh() * w).sum())
        .collect();
    let beta = softmax(&g);
    let out = reps
        .iter()
        .zip(&beta)
        .map(|(r, b)| r.iter().map(|x| x * b).collect())
        .collect();
    (beta, out)
}

pub fn score_and_prob(m: &[Vec<f64>], bias: Option<&[f64]>, r: &[f64]) -> Vec<f64> {
    let mut o = matvec(m, r);
    if let Some(b) = bias {
        for (x, y) in o.iter_mut().zip(b) {
            *x += y;
        }
    }
    softmax(&o)
}

/// Position of each record when sorted by descending score, ties by index.
fn order(records: &[PredictionRecord]) -> Vec<usize> {
    let n = records.len();
    let mut out: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !used[i] && best.is_none_or(|b| records[i].score > records[b].score) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        out.push(b);
    }
    out
}

/// `(precision, recall)` at every cut and the trapezoid area from
/// `(recall 0, precision 1)`.
pub fn pr_curve(records: &[PredictionRecord]) -> (Vec<(f64, f64)>, f64) {
    let ord = order(records);
    let total = records.iter().filter(|r| r.gold).count();
    let mut points = Vec::new();
    for k in 1..=records.len() {
        let hits = ord[..k].iter().filter(|&&i| records[i].gold).count();
        points.push((hits as f64 / k as f64, hits as f64 / total as f64));
    }
    let mut auc = 0.0;
    let mut prev = (1.0, 0.0);
    for &(p, r) in &points {
        auc += (r - prev.1) * (p + prev.0) / 2.0;
        prev = (p, r);
    }
    (points, auc)
}

pub fn precision_at_n(records: &[PredictionRecord], n: usize) -> f64 {
    let ord = order(records);
    ord[..n].iter().filter(|&&i| records[i].gold).count() as f64 / n as f64
}

/// Per rare relation: share of its gold records whose rank among the same
/// pair's records is within `k`; averaged over relations.
pub fn macro_hits_at_k(records: &[PredictionRecord], counts: &[usize], threshold: usize, k: usize) -> Option<f64> {
    let relations: BTreeSet<usize> = records
        .iter()
        .filter(|r| r.gold && counts[r.relation] < threshold)
        .map(|r| r.relation)
        .collect();
    if relations.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &rel in &relations {
        let (mut hit, mut total) = (0usize, 0usize);
        for (i, r) in records.iter().enumerate() {
            if !(r.gold && r.relation == rel) {
                continue;
            }
            let rank = 1 + records
                .iter()
                .enumerate()
                .filter(|&(j, o)| o.pair == r.pair && (o.score > r.score || (o.score == r.score && j < i)))
                .count();
            total += 1;
            if rank <= k {
                hit += 1;
            }
        }
        sum += hit as f64 / total as f64;
    }
    Some(sum / relations.len() as f64)
}

/// Random records over `pairs × relations` with coarse scores so ties occur.
pub fn random_records(rng: &mut ChaCha8Rng, pairs: usize, relations: usize) -> Vec<PredictionRecord> {
    let mut out = Vec::new();
    for p in 0..pairs {
        for r in 1..=relations {
            out.push(PredictionRecord {
                pair: p,
                relation: r,
                score: rng.gen_range(0..8) as f64 / 8.0,
                gold: rng.gen_bool(0.3),
            });
        }
    }
    if !out.iter().any(|r| r.gold) {
        out[0].gold = true;
    }
    out
}

/// Random tree over `leaves` relation names with `depth` layers above them.
pub fn random_hierarchy(rng: &mut ChaCha8Rng, leaves: usize, depth: usize) -> HierarchyGraph {
    let mut rows: Vec<(String, usize, Option<String>)> = Vec::new();
    let mut below: Vec<usize> = (0..leaves).collect();
    for i in 0..leaves {
        rows.push((format!("r{i}"), 0, None));
    }
    for layer in 1..depth {
        let width = rng.gen_range(1..=below.len());
        let mut next = Vec::new();
        for c in 0..width {
            next.push(rows.len());
            rows.push((format!("n{layer}_{c}"), layer, None));
        }
        for (j, &child) in below.iter().enumerate() {
            // every new node gets at least one child
            let c = if j < width { j } else { rng.gen_range(0..width) };
            rows[child].2 = Some(rows[next[c]].0.clone());
        }
        below = next;
    }
    let root = format!("root{depth}");
    for &child in &below {
        rows[child].2 = Some(root.clone());
    }
    rows.push((root, depth, None));
    HierarchyGraph::from_rows(rows).unwrap()
}

pub fn random_instance(rng: &mut ChaCha8Rng, vocab: usize, min_len: usize, max_len: usize) -> Instance {
    let n = rng.gen_range(min_len..=max_len);
    let tokens = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
    let h = rng.gen_range(0..n);
    let mut t = rng.gen_range(0..n);
    if n > 1 {
        while t == h {
            t = rng.gen_range(0..n);
        }
    }
    Instance::new(tokens, h, t).unwrap()
}

pub fn random_bag(rng: &mut ChaCha8Rng, vocab: usize, size: usize) -> Vec<Instance> {
    (0..size).map(|_| random_instance(rng, vocab, 3, 7)).collect()
}

pub const SMALL_VOCAB: usize = 9;

pub fn small_relations() -> RelationVocab {
    RelationVocab::new(["NA", "/a/x/r0", "/a/x/r1", "/a/y/r2", "/b/z/r3"]).unwrap()
}

pub fn small_encoder(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig {
        kind,
        word_dim: 3,
        pos_dim: 2,
        clamp: 4,
        window: 3,
        hidden: 3,
        dropout: 0.5,
    }
}

/// Tiny hierarchical model over [`small_relations`] with random node vectors.
pub fn small_katt(seed: u64, kind: EncoderKind) -> Model<f64> {
    let relations = small_relations();
    let graph = parse_predefined(&relations).unwrap();
    let mut r = rng(seed);
    let implicit = Tensor::uniform(&[graph.len(), 3], 1.0, &mut r);
    let config = ModelConfig {
        attention_hidden: 3,
        gcn_dim: Some(2),
        ..ModelConfig::new(small_encoder(kind), AttentionKind::Katt)
    };
    Model::katt(config, relations, SMALL_VOCAB, graph, implicit, &mut r).unwrap()
}

pub fn small_att(seed: u64, kind: EncoderKind) -> Model<f64> {
    let config = ModelConfig::new(small_encoder(kind), AttentionKind::Att);
    Model::att(config, small_relations(), SMALL_VOCAB, &mut rng(seed)).unwrap()
}

/// Every tensor of a model as one flat vector of bit patterns.
pub fn param_bits(model: &Model<f64>) -> Vec<u64> {
    model
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

use katt::tensor::{finite_diff_check, Tape, Var};
use katt::Result as KResult;

pub const FD_EPS: f64 = 1e-6;

fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> KResult<Var> {
    let c = tape.constant(w.clone().reshaped(tape.shape(y).to_vec())?);
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Primitive = (
    &'static str,
    Vec<Vec<usize>>,
    Vec<usize>,
    fn(&mut Tape<f64>, &[Var]) -> KResult<Var>,
);

fn primitives(rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let (n, m, k) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    vec![
        ("matmul", vec![vec![n, m], vec![m, k]], vec![n, k], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("matvec", vec![vec![n, m], vec![m]], vec![n], |t, v| {
            t.matvec(v[0], v[1])
        }),
        ("transpose", vec![vec![n, m]], vec![m, n], |t, v| t.transpose(v[0])),
        ("add", vec![vec![n, m], vec![n, m]], vec![n, m], |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![vec![n, m], vec![n, m]], vec![n, m], |t, v| {
            t.sub(v[0], v[1])
        }),
        ("mul", vec![vec![n, m], vec![n, m]], vec![n, m], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("add_n", vec![vec![n], vec![n], vec![n]], vec![n], |t, v| t.add_n(v)),
        ("add_row_vector", vec![vec![n, m], vec![m]], vec![n, m], |t, v| {
            t.add_row_vector(v[0], v[1])
        }),
        ("add_scalar", vec![vec![n, m], vec![1]], vec![n, m], |t, v| {
            t.add_scalar(v[0], v[1])
        }),
        ("mul_scalar", vec![vec![n, m], vec![1]], vec![n, m], |t, v| {
            t.mul_scalar(v[0], v[1])
        }),
        ("scale", vec![vec![n, m]], vec![n, m], |t, v| Ok(t.scale(v[0], -1.7))),
        ("row_scale", vec![vec![n, m], vec![n]], vec![n, m], |t, v| {
            t.row_scale(v[0], v[1])
        }),
        ("tanh", vec![vec![n, m]], vec![n, m], |t, v| Ok(t.tanh(v[0]))),
        ("relu", vec![vec![n, m]], vec![n, m], |t, v| Ok(t.relu(v[0]))),
        ("sum", vec![vec![n, m]], vec![1], |t, v| Ok(t.sum(v[0]))),
        ("dot", vec![vec![n], vec![n]], vec![1], |t, v| t.dot(v[0], v[1])),
        ("softmax", vec![vec![n + 1]], vec![n + 1], |t, v| t.softmax(v[0])),
        ("log_softmax", vec![vec![n + 1]], vec![n + 1], |t, v| {
            t.log_softmax(v[0])
        }),
        ("pick", vec![vec![n + 1]], vec![1], |t, v| t.pick(v[0], 0)),
        ("cross_entropy", vec![vec![n + 1]], vec![1], |t, v| {
            t.cross_entropy(v[0], 0)
        }),
        ("concat", vec![vec![n, m], vec![n, k]], vec![n, m + k], |t, v| {
            t.concat(&v[..2])
        }),
        ("stack", vec![vec![m], vec![m]], vec![2, m], |t, v| t.stack(&v[..2])),
        ("row", vec![vec![n, m]], vec![m], |t, v| t.row(v[0], 0)),
        ("gather", vec![vec![n + 1, m]], vec![3, m], |t, v| {
            t.gather(v[0], &[0, 1, 0])
        }),
        ("broadcast_rows", vec![vec![m]], vec![3, m], |t, v| {
            t.broadcast_rows(v[0], 3)
        }),
        ("reshape", vec![vec![n, m]], vec![n * m], |t, v| {
            let len = t.value(v[0]).numel();
            t.reshape(v[0], vec![len])
        }),
        ("mask_mul", vec![vec![2, m]], vec![2, m], |t, v| {
            let mask = (0..t.value(v[0]).numel())
                .map(|i| if i % 3 == 0 { 0.0 } else { 2.0 })
                .collect();
            t.mask_mul(v[0], mask)
        }),
        (
            "conv1d",
            vec![vec![n + 2, m], vec![3, m, k], vec![k]],
            vec![n + 2, k],
            |t, v| t.conv1d(v[0], v[1], v[2]),
        ),
        ("segment_max", vec![vec![n + 3, m]], vec![3 * m], |t, v| {
            let rows = t.shape(v[0])[0];
            t.segment_max(v[0], &[0..1, 1..rows - 1, rows - 1..rows])
        }),
    ]
}

/// Largest finite-difference error of each tape primitive at one random
/// point, reduced to a scalar through a random weighted sum.
pub fn primitive_fd_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (name, shapes, out_shape, op) in primitives(&mut r) {
        let params: Vec<Tensor<f64>> = shapes.iter().map(|s| away_from_zero(&mut r, s)).collect();
        let w = away_from_zero(&mut r, &out_shape);
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = op(t, v)?;
            weighted_sum(t, y, &w)
        };
        out.push((name, finite_diff_check(f, &params, FD_EPS).unwrap()));
    }
    out
}

/// Step for the full-model check, the largest the checker's contract allows.
pub const FD_EPS_END_TO_END: f64 = 1e-4;

/// Finite-difference error of the full bag loss of a tiny hierarchical PCNN
/// model with respect to every parameter tensor, evaluated at a random point
/// (entries uniform in ±1) on a bag of 2 to 4 instances.
pub fn end_to_end_fd_error(seed: u64) -> f64 {
    let model = small_katt(seed, EncoderKind::Pcnn);
    let mut r = rng(seed ^ 0x5eed);
    let size = r.gen_range(2..5);
    let bag = random_bag(&mut r, SMALL_VOCAB, size);
    let label = r.gen_range(1..model.num_relations());
    let params: Vec<Tensor<f64>> = model
        .tensors()
        .into_iter()
        .map(|t| Tensor::uniform(t.shape(), 1.0, &mut r))
        .collect();
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let bound = model.bind_with(t, v.to_vec())?;
        Ok(bound.bag_loss(t, &bag, label, None)?.expect("non-NA label"))
    };
    finite_diff_check(f, &params, FD_EPS_END_TO_END).unwrap()
}

/// Random bags over [`small_relations`]; labels 1..=4, or 0 (NA) when `na`.
pub fn random_bags(rng: &mut ChaCha8Rng, n: usize, na: bool) -> Vec<katt::trainer::Bag> {
    (0..n)
        .map(|i| {
            let size = rng.gen_range(1..4);
            katt::trainer::Bag {
                head: format!("h{i}"),
                tail: format!("t{i}"),
                label: if na { 0 } else { rng.gen_range(1..5) },
                instances: random_bag(rng, SMALL_VOCAB, size),
            }
        })
        .collect()
}

pub fn small_words() -> katt::data::WordVocab {
    katt::data::WordVocab::from_words((1..SMALL_VOCAB).map(|i| format!("w{i}")))
}

/// Structural tree check written against the raw node list: one root at the
/// top layer, every other node has exactly one parent one layer up that
/// lists it as a child, and the layer-0 nodes are exactly the non-NA
/// relations.
pub fn tree_violation(g: &HierarchyGraph, vocab: &RelationVocab) -> Option<String> {
    let nodes = g.nodes();
    let roots: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].parent.is_none()).collect();
    if roots.len() != 1 {
        return Some(format!("{} roots", roots.len()));
    }
    let top = nodes[roots[0]].layer;
    let mut listed = vec![0usize; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for &c in &n.children {
            listed[c] += 1;
            if nodes[c].parent != Some(i) {
                return Some(format!("`{}` lists `{}` as child but not as parent", n.id, nodes[c].id));
            }
        }
        if n.layer > top || (n.layer > 0 && n.children.is_empty()) {
            return Some(format!("bad internal node `{}`", n.id));
        }
        if let Some(p) = n.parent {
            if nodes[p].layer != n.layer + 1 {
                return Some(format!("`{}` skips layers", n.id));
            }
        }
    }
    if (0..nodes.len()).any(|i| i != roots[0] && listed[i] != 1) {
        return Some("a node is not listed exactly once as a child".into());
    }
    let mut leaves: Vec<&str> = nodes.iter().filter(|n| n.layer == 0).map(|n| n.id.as_str()).collect();
    let mut want: Vec<&str> = vocab.non_na().map(|(_, n)| n).collect();
    leaves.sort();
    want.sort();
    (leaves != want).then(|| format!("leaves {leaves:?} != relations {want:?}"))
}

/// Random path-style relation names (1 to 4 components), NA first.
pub fn random_vocab(rng: &mut ChaCha8Rng) -> RelationVocab {
    let n = rng.gen_range(2..12);
    let mut names = vec!["NA".to_string()];
    for i in 0..n {
        let depth = rng.gen_range(0..4);
        let mut name = String::new();
        for _ in 0..depth {
            name.push_str(&format!("/c{}", rng.gen_range(0..3)));
        }
        name.push_str(&format!("/r{i}"));
        names.push(name);
    }
    RelationVocab::new(names).unwrap()
}

pub fn random_vectors(rng: &mut ChaCha8Rng, vocab: &RelationVocab, dim: usize) -> katt::kg::VectorTable<f64> {
    let mut t = katt::kg::VectorTable::new(dim);
    for (_, name) in vocab.non_na() {
        t.insert(name, random_vec(rng, dim)).unwrap();
    }
    t
}

/// Random facts over a small entity pool; some relations get none, but
/// the store is never empty.
pub fn random_store(rng: &mut ChaCha8Rng, vocab: &RelationVocab) -> katt::kg::TripleStore {
    let mut s = katt::kg::TripleStore::new();
    for (_, name) in vocab.non_na() {
        for _ in 0..rng.gen_range(0..5) {
            let (h, t) = (rng.gen_range(0..6), rng.gen_range(0..6));
            s.add_fact(&format!("e{h}"), name, &format!("e{t}"));
        }
    }
    if s.is_empty() {
        let (_, first) = vocab.non_na().next().unwrap();
        s.add_fact("e0", first, "e1");
    }
    s
}

/// Builds all four hierarchies over a random vocabulary and reports the
/// first structural violation.
pub fn hierarchy_violation(seed: u64) -> Option<String> {
    use katt::hierarchy::build_amie;
    let mut r = rng(seed);
    let vocab = random_vocab(&mut r);
    let n = vocab.non_na().count();
    let vectors = random_vectors(&mut r, &vocab, 4);
    let store = random_store(&mut r, &vocab);
    // hc needs a distinct cut per internal layer, and n relations give n - 1
    let layers = if n >= 3 { r.gen_range(3..5) } else { 3 };
    let ks: Vec<usize> = match layers {
        3 => vec![r.gen_range(1..=n)],
        _ => {
            let k1 = r.gen_range(1..=n);
            vec![k1, r.gen_range(1..=k1)]
        }
    };
    let threshold = r.gen_range(0.05..=1.0);
    let built = [
        ("predefined", parse_predefined(&vocab)),
        ("kmeans", build_kmeans(&vocab, &vectors, layers, &ks, seed)),
        ("hc", build_agglomerative(&vocab, &vectors, layers)),
        ("amie", build_amie(&vocab, &store, threshold)),
    ];
    for (name, g) in built {
        let g = match g {
            Ok(g) => g,
            Err(e) => return Some(format!("{name}: {e}")),
        };
        if let Some(v) = tree_violation(&g, &vocab) {
            return Some(format!("{name}: {v}"));
        }
    }
    None
}

/// Leaf partition induced by the layer-1 parents, as sorted name groups.
pub fn leaf_partition(g: &HierarchyGraph) -> Vec<Vec<String>> {
    let mut groups: Vec<Vec<String>> = g
        .nodes()
        .iter()
        .filter(|n| n.layer == 1)
        .map(|n| {
            let mut names: Vec<String> = n.children.iter().map(|&c| g.node(c).id.clone()).collect();
            names.sort();
            names
        })
        .collect();
    groups.sort();
    groups
}

/// Relations drawn tightly around `clusters` far-apart centers: k-means and
/// complete-linkage HC must recover the same three-layer partition.
pub fn clusterings_agree(seed: u64) -> bool {
    let mut r = rng(seed);
    let clusters = r.gen_range(2..5);
    let dim = 3;
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|c| {
            (0..dim)
                .map(|j| {
                    if j == c % dim {
                        100.0 * (1 + c / dim) as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut names = vec!["NA".to_string()];
    let mut table = katt::kg::VectorTable::new(dim);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..r.gen_range(1..5) {
            let name = format!("/k{c}/r{i}");
            let v: Vec<f64> = center.iter().map(|x| x + r.gen_range(-1.0..1.0)).collect();
            table.insert(&name, v).unwrap();
            names.push(name);
        }
    }
    let vocab = RelationVocab::new(names).unwrap();
    let km = build_kmeans(&vocab, &table, 3, &[clusters], seed).unwrap();
    let hc = build_agglomerative(&vocab, &table, 3).unwrap();
    let truth: Vec<Vec<String>> = {
        let mut t: Vec<Vec<String>> = (0..clusters)
            .map(|c| {
                let mut g: Vec<String> = vocab
                    .non_na()
                    .filter(|(_, n)| n.starts_with(&format!("/k{c}/")))
                    .map(|(_, n)| n.to_string())
                    .collect();
                g.sort();
                g
            })
            .collect();
        t.sort();
        t
    };
    leaf_partition(&km) == truth && leaf_partition(&hc) == truth
}

fn distribution_error(p: &[f64]) -> f64 {
    let neg = p.iter().fold(0.0f64, |m, &x| m.max(-x));
    neg.max((p.iter().sum::<f64>() - 1.0).abs())
}

/// Largest deviation from a valid distribution over every α, β and P of a
/// random model, bag and candidate relation (0 when all are valid).
pub fn distribution_deviation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let kind = if r.gen_bool(0.5) {
        EncoderKind::Pcnn
    } else {
        EncoderKind::Cnn
    };
    let model = if r.gen_bool(0.5) {
        small_katt(seed, kind)
    } else {
        small_att(seed, kind)
    };
    let size = r.gen_range(1..6);
    let bag = random_bag(&mut r, SMALL_VOCAB, size);
    let mut worst = 0.0f64;
    for rel in 0..model.num_relations() {
        let trace = model.attention_trace(&bag, rel).unwrap();
        for a in &trace.alphas {
            assert_eq!(a.len(), size);
            worst = worst.max(distribution_error(a));
        }
        if let Some(b) = &trace.beta {
            worst = worst.max(distribution_error(b));
        }
        worst = worst.max(distribution_error(&trace.probs));
    }
    worst
}

/// One randomized comparison against a brute-force oracle; returns the
/// largest absolute discrepancy (metrics: 0 on exact agreement, else 1).
pub type OracleCase = fn(u64) -> f64;

pub const ORACLE_CASES: [(&str, OracleCase); 9] = [
    ("conv1d", oracle_conv1d),
    ("piecewise pooling", oracle_piecewise),
    ("gcn layer", oracle_gcn),
    ("instance attention", oracle_instance_attention),
    ("layer attention", oracle_layer_attention),
    ("score/probability", oracle_score),
    ("pr_curve", oracle_pr_curve),
    ("precision_at_n", oracle_precision_at_n),
    ("macro_hits_at_k", oracle_macro_hits),
];

fn mismatch(same: bool) -> f64 {
    if same {
        0.0
    } else {
        1.0
    }
}

pub fn oracle_conv1d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, o, k) = (
        r.gen_range(1..9),
        r.gen_range(1..4),
        r.gen_range(1..4),
        2 * r.gen_range(0..3) + 1,
    );
    let x = random_matrix(&mut r, n, d);
    let w: Vec<Vec<Vec<f64>>> = (0..k).map(|_| random_matrix(&mut r, d, o)).collect();
    let b = random_vec(&mut r, o);
    let mut tape = Tape::new();
    let xv = tape.constant(to_tensor(&x));
    let wv = tape.constant(kernel_tensor(&w));
    let bv = tape.constant(Tensor::vector(b.clone()).unwrap());
    let out = tape.conv1d(xv, wv, bv).unwrap();
    max_abs_diff(tape.value(out).data(), &conv1d(&x, &w, &b).concat())
}

pub fn oracle_piecewise(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, h) = (r.gen_range(1..10), r.gen_range(1..4));
    let (i, j) = (r.gen_range(0..n), r.gen_range(0..n));
    let (a, b) = (i.min(j), i.max(j));
    let x = random_matrix(&mut r, n, h);
    let segs = katt::encoder::piecewise_segments(n, a, b).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(to_tensor(&x));
    let out = katt::encoder::piecewise_max_pool(&mut tape, xv, a, b).unwrap();
    max_abs_diff(tape.value(out).data(), &segment_max(&x, &segs))
}

pub fn oracle_gcn(seed: u64) -> f64 {
    use katt::gcn::{gcn_layer as gcn, GcnLayerParams};
    let mut r = rng(seed);
    let (leaves, depth, d, q) = (
        r.gen_range(1..7),
        r.gen_range(1..4),
        r.gen_range(1..4),
        r.gen_range(1..4),
    );
    let graph = random_hierarchy(&mut r, leaves, depth);
    let v = random_matrix(&mut r, graph.len(), d);
    let p = GcnLayerParams::<f64>::init(d, q, &mut r);
    let got = gcn(&graph, &to_tensor(&v), &p).unwrap();
    let want = gcn_layer(
        &graph,
        &v,
        &to_rows(&p.self_weight),
        &to_rows(&p.parent_weight),
        &to_rows(&p.child_weight),
        p.bias.data(),
    );
    max_abs_diff(got.data(), &want.concat())
}

pub fn oracle_instance_attention(seed: u64) -> f64 {
    use katt::attention::AttentionParams;
    let mut r = rng(seed);
    let (m, enc, dq, a) = (
        r.gen_range(1..6),
        r.gen_range(1..5),
        r.gen_range(1..5),
        r.gen_range(1..4),
    );
    let s = random_matrix(&mut r, m, enc);
    let q = random_vec(&mut r, dq);
    let p = AttentionParams::<f64>::init(enc, dq, a, &mut r);
    let (alpha, rep) =
        katt::attention::instance_attention(&to_tensor(&s), &Tensor::vector(q.clone()).unwrap(), &p).unwrap();
    let (wa, wr) = instance_attention(
        &s,
        &q,
        &to_rows(&p.inst_weight),
        &to_rows(&p.query_weight),
        p.bias.data(),
        p.score.data(),
    );
    max_abs_diff(&alpha, &wa).max(max_abs_diff(&rep, &wr))
}

pub fn oracle_layer_attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (l, enc) = (r.gen_range(1..5), r.gen_range(1..6));
    let reps = random_matrix(&mut r, l, enc);
    let w = random_vec(&mut r, enc);
    let tensors: Vec<Tensor<f64>> = reps.iter().map(|x| Tensor::vector(x.clone()).unwrap()).collect();
    let (beta, out) = katt::attention::layer_attention(&tensors, &Tensor::vector(w.clone()).unwrap()).unwrap();
    let (wb, wo) = layer_attention(&reps, &w);
    max_abs_diff(&beta, &wb).max(max_abs_diff(out.data(), &wo.concat()))
}

pub fn oracle_score(seed: u64) -> f64 {
    use katt::attention::ScoreLayer;
    let mut r = rng(seed);
    let (rels, dim, bias) = (r.gen_range(1..7), r.gen_range(1..6), r.gen_bool(0.5));
    let layer = ScoreLayer::<f64>::init(rels, dim, bias, &mut r);
    let layer = ScoreLayer {
        bias: layer.bias.map(|_| Tensor::vector(random_vec(&mut r, rels)).unwrap()),
        ..layer
    };
    let rep = random_vec(&mut r, dim);
    let got = katt::attention::score_and_prob(&Tensor::vector(rep.clone()).unwrap(), &layer).unwrap();
    max_abs_diff(
        &got,
        &score_and_prob(&to_rows(&layer.weight), layer.bias.as_ref().map(|b| b.data()), &rep),
    )
}

pub fn oracle_pr_curve(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (pairs, rels) = (r.gen_range(1..8), r.gen_range(1..5));
    let recs = random_records(&mut r, pairs, rels);
    let (points, auc) = pr_curve(&recs);
    let curve = katt::eval::pr_curve(&recs).unwrap();
    let got: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.precision, p.recall)).collect();
    mismatch(got == points && curve.auc == auc)
}

pub fn oracle_precision_at_n(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (pairs, rels) = (r.gen_range(1..8), r.gen_range(1..5));
    let recs = random_records(&mut r, pairs, rels);
    let same = (1..=recs.len()).all(|n| katt::eval::precision_at_n(&recs, n).unwrap() == precision_at_n(&recs, n));
    mismatch(same && katt::eval::precision_at_n(&recs, recs.len() + 1).is_err())
}

pub fn oracle_macro_hits(seed: u64) -> f64 {
    use katt::eval::FrequencyIndex;
    let mut r = rng(seed);
    let (pairs, rels, k, t) = (
        r.gen_range(1..8),
        r.gen_range(1..6),
        r.gen_range(1..6),
        r.gen_range(1..40),
    );
    let recs = random_records(&mut r, pairs, rels);
    let counts: Vec<usize> = (0..=rels).map(|_| r.gen_range(0..40)).collect();
    let got = katt::eval::macro_hits_at_k(&recs, &FrequencyIndex { counts: counts.clone() }, t, k).ok();
    mismatch(got == macro_hits_at_k(&recs, &counts, t, k))
}
