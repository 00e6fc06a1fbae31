//! The message-passing encoder and risk head.
//!
//! Each of the L layers applies, per head k,
//!
//!   z_i = W_k h_i + sum_{j in N(i)} alpha_ij U_k h_j
//!
//! then concatenates heads, adds a bias row, applies ReLU and (during
//! training) dropout. `alpha` is either softmax attention over each
//! destination's neighborhood (scores leaky_relu(a_k . [W_k h_i || U_k h_j]))
//! or the feature-independent degree normalization 1/sqrt(deg_i deg_j).
//! The head maps final embeddings to logits and sigmoid probabilities.

use crate::autodiff::{stable_sigmoid, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::TransactionGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Attention,
    DegreeNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
    pub aggregation: Aggregation,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 3,
            hidden_dim: 128,
            n_heads: 4,
            dropout_rate: 0.30,
            aggregation: Aggregation::Attention,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::ConfigError("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || self.hidden_dim == 0 {
            return Err(Error::ConfigError(
                "hidden_dim and n_heads must be positive".into(),
            ));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::ConfigError(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::ConfigError(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

/// One attention head: self/neighbor projections and the two halves of
/// the attention vector (their concatenation scores [W h_i || U h_j]).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_self: Tensor,
    pub w_neigh: Tensor,
    pub a_self: Tensor,
    pub a_neigh: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// 1 x hidden_dim, added after head concatenation.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    /// hidden_dim x 1.
    pub head_w: Tensor,
    /// 1 x 1.
    pub head_b: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Glorot-uniform weights, zero biases; deterministic in the seed.
pub fn init_params(config: &ModelConfig, input_dim: usize, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    if input_dim == 0 {
        return Err(Error::ConfigError("input_dim must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hd = config.head_dim();
    let mut layers = Vec::with_capacity(config.n_layers);
    let mut d_in = input_dim;
    for _ in 0..config.n_layers {
        let mut heads = Vec::with_capacity(config.n_heads);
        for _ in 0..config.n_heads {
            heads.push(HeadParams {
                w_self: glorot(&mut rng, d_in, hd),
                w_neigh: glorot(&mut rng, d_in, hd),
                a_self: glorot(&mut rng, hd, 1),
                a_neigh: glorot(&mut rng, hd, 1),
            });
        }
        layers.push(LayerParams {
            heads,
            bias: Tensor::zeros(1, config.hidden_dim),
        });
        d_in = config.hidden_dim;
    }
    Ok(ModelParams {
        layers,
        head_w: glorot(&mut rng, config.hidden_dim, 1),
        head_b: Tensor::zeros(1, 1),
    })
}

impl ModelParams {
    /// Stable flattening order used by the optimizer and the checkpoint
    /// manifest.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{k}.w_self"), &head.w_self));
                out.push((format!("layer{l}.head{k}.w_neigh"), &head.w_neigh));
                out.push((format!("layer{l}.head{k}.a_self"), &head.a_self));
                out.push((format!("layer{l}.head{k}.a_neigh"), &head.a_neigh));
            }
            out.push((format!("layer{l}.bias"), &layer.bias));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (k, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layer{l}.head{k}.w_self"), &mut head.w_self));
                out.push((format!("layer{l}.head{k}.w_neigh"), &mut head.w_neigh));
                out.push((format!("layer{l}.head{k}.a_self"), &mut head.a_self));
                out.push((format!("layer{l}.head{k}.a_neigh"), &mut head.a_neigh));
            }
            out.push((format!("layer{l}.bias"), &mut layer.bias));
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Edge indexing shared by every layer: for each directed entry e,
/// dst[e] is the CSR row and src[e] = col_idx[e]; segments of row_ptr
/// group entries by destination.
pub struct GraphIndex {
    pub n_nodes: usize,
    pub row_ptr: Rc<Vec<usize>>,
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub degree_norm: Rc<Vec<f64>>,
}

impl GraphIndex {
    pub fn new(graph: &TransactionGraph) -> Self {
        let n = graph.n_nodes;
        let mut dst = Vec::with_capacity(graph.edge_count());
        for i in 0..n {
            for _ in graph.neighbors(i) {
                dst.push(i);
            }
        }
        let src = graph.col_idx.clone();
        let degree_norm = src
            .iter()
            .zip(&dst)
            .map(|(&j, &i)| {
                let d = (graph.degree(i) * graph.degree(j)) as f64;
                1.0 / d.sqrt()
            })
            .collect();
        GraphIndex {
            n_nodes: n,
            row_ptr: Rc::new(graph.row_ptr.clone()),
            src: Rc::new(src),
            dst: Rc::new(dst),
            degree_norm: Rc::new(degree_norm),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }
}

/// Tape handles for registered parameters.
pub struct TapeParams {
    pub layers: Vec<TapeLayer>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

pub struct TapeLayer {
    pub heads: Vec<TapeHead>,
    pub bias: NodeId,
}

pub struct TapeHead {
    pub w_self: NodeId,
    pub w_neigh: NodeId,
    pub a_self: NodeId,
    pub a_neigh: NodeId,
}

/// Put every parameter on the tape; `trainable` controls requires_grad.
pub fn register_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> TapeParams {
    let layers = params
        .layers
        .iter()
        .map(|layer| TapeLayer {
            heads: layer
                .heads
                .iter()
                .map(|h| TapeHead {
                    w_self: tape.leaf(h.w_self.clone(), trainable),
                    w_neigh: tape.leaf(h.w_neigh.clone(), trainable),
                    a_self: tape.leaf(h.a_self.clone(), trainable),
                    a_neigh: tape.leaf(h.a_neigh.clone(), trainable),
                })
                .collect(),
            bias: tape.leaf(layer.bias.clone(), trainable),
        })
        .collect();
    TapeParams {
        layers,
        head_w: tape.leaf(params.head_w.clone(), trainable),
        head_b: tape.leaf(params.head_b.clone(), trainable),
    }
}

/// Gradients in the same order as [`ModelParams::named`]; `None` for
/// parameters the loss never touched.
pub fn collect_grads(tape: &Tape, tp: &TapeParams) -> Vec<Option<Tensor>> {
    let mut out = Vec::new();
    for layer in &tp.layers {
        for head in &layer.heads {
            for id in [head.w_self, head.w_neigh, head.a_self, head.a_neigh] {
                out.push(tape.grad(id).cloned());
            }
        }
        out.push(tape.grad(layer.bias).cloned());
    }
    out.push(tape.grad(tp.head_w).cloned());
    out.push(tape.grad(tp.head_b).cloned());
    out
}

pub struct EncodeOutput {
    /// Final embeddings h^(L), n x hidden_dim.
    pub h: NodeId,
    /// Final-layer edge weights averaged over heads, detached from the
    /// tape (the smoothing regularizer treats them as constants).
    pub final_alpha: Vec<f64>,
}

/// Per-head edge weights for one layer. In attention mode this builds the
/// score subgraph on the tape (gradients flow into W, U, a); in
/// degree-norm mode it is a constant.
fn edge_weights(
    tape: &mut Tape,
    config: &ModelConfig,
    gi: &GraphIndex,
    head: &TapeHead,
    hs: NodeId,
    hn: NodeId,
) -> Result<NodeId> {
    match config.aggregation {
        Aggregation::DegreeNorm => {
            let alpha = Tensor::column(&gi.degree_norm);
            Ok(tape.constant(alpha))
        }
        Aggregation::Attention => {
            let s_self = tape.matmul(hs, head.a_self)?;
            let s_neigh = tape.matmul(hn, head.a_neigh)?;
            let e_self = tape.row_gather(s_self, Rc::clone(&gi.dst))?;
            let e_neigh = tape.row_gather(s_neigh, Rc::clone(&gi.src))?;
            let scores = tape.add(e_self, e_neigh)?;
            let scores = tape.leaky_relu(scores, config.leaky_slope);
            tape.segment_softmax(scores, Rc::clone(&gi.row_ptr))
        }
    }
}

/// Run the encoder on the tape. `x` must already be a tape node with
/// `gi.n_nodes` rows.
pub fn encode(
    tape: &mut Tape,
    tp: &TapeParams,
    gi: &GraphIndex,
    x: NodeId,
    config: &ModelConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<EncodeOutput> {
    if tape.value(x).rows() != gi.n_nodes {
        return Err(Error::ShapeError {
            op: "encode",
            left: tape.value(x).shape(),
            right: (gi.n_nodes, 0),
        });
    }
    let mut h = x;
    let mut final_alpha = vec![0.0; gi.edge_count()];
    let last = config.n_layers - 1;
    for (l, layer) in tp.layers.iter().enumerate() {
        let mut head_outputs = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let hs = tape.matmul(h, head.w_self)?;
            // Isolated nodes get exactly W h_i: the scatter adds nothing.
            if gi.edge_count() == 0 {
                head_outputs.push(hs);
                continue;
            }
            let hn = tape.matmul(h, head.w_neigh)?;
            let alpha = edge_weights(tape, config, gi, head, hs, hn)?;
            if l == last {
                for (acc, &a) in final_alpha.iter_mut().zip(tape.value(alpha).data()) {
                    *acc += a / layer.heads.len() as f64;
                }
            }
            let msgs = tape.row_gather(hn, Rc::clone(&gi.src))?;
            let weighted = tape.mul(msgs, alpha)?;
            let agg = tape.row_scatter_add(weighted, Rc::clone(&gi.dst), gi.n_nodes)?;
            head_outputs.push(tape.add(hs, agg)?);
        }
        let z = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.concat_cols(&head_outputs)?
        };
        let z = tape.add(z, layer.bias)?;
        let z = tape.relu(z);
        h = tape.dropout(z, config.dropout_rate, training, rng)?;
    }
    Ok(EncodeOutput {
        h,
        final_alpha,
    })
}

/// Risk head: logits = h w + b (returned for the stable loss) and
/// p = sigmoid(logits).
pub fn score(tape: &mut Tape, tp: &TapeParams, h: NodeId) -> Result<(NodeId, NodeId)> {
    let logits = tape.matmul(h, tp.head_w)?;
    let logits = tape.add(logits, tp.head_b)?;
    let probs = tape.sigmoid(logits);
    Ok((logits, probs))
}

/// Inference-mode forward pass: probabilities and logits as plain vectors.
/// Deterministic (no dropout, no gradients).
pub fn predict(
    graph: &TransactionGraph,
    x: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let gi = GraphIndex::new(graph);
    let mut tape = Tape::new();
    let tp = register_params(&mut tape, params, false);
    let xid = tape.constant(x.clone());
    // The rng is never consulted when training = false.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = encode(&mut tape, &tp, &gi, xid, config, false, &mut rng)?;
    let (logits, probs) = score(&mut tape, &tp, out.h)?;
    Ok((
        tape.value(probs).data().to_vec(),
        tape.value(logits).data().to_vec(),
    ))
}

/// Logistic regression on raw features. sigmoid(x w + b) — the no-graph
/// baseline against which the encoder's lift is measured.
pub fn logistic_predict(x: &Tensor, w: &Tensor, b: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut z = b;
        for (xv, wv) in x.row(i).iter().zip(w.data()) {
            z += xv * wv;
        }
        out.push(stable_sigmoid(z));
    }
    out
}
