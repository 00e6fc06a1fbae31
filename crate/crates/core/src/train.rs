//! Training: the weighted-BCE + smoothing objective, AdamW with decoupled
//! weight decay, cosine annealing, stratified batching, and the early-stopped
//! training loop.
//!
//! The objective is L = L_cls + lambda * L_smooth where
//!
//!   L_cls    = -sum_{i in mask} [ beta y_i log p_i + (1 - y_i) log(1 - p_i) ]
//!   L_smooth =  sum_{(i,j) directed edges} alpha_ij ||h_i - h_j||^2
//!
//! L_cls is evaluated in logit form (softplus) so saturated predictions stay
//! finite. The alpha weights inside L_smooth are constants: no gradient flows
//! back into the attention parameters through the regularizer, which would
//! otherwise reward collapsing the weights to zero.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{restrict_to, TransactionGraph};
use crate::metrics;
use crate::model::{
    collect_grads, encode, init_params, register_params, score, GraphIndex, ModelConfig,
    ModelParams,
};
use crate::preprocess::{FeatureMatrix, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

/// Positive-class weight beta: resolved from the training labels or pinned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PosWeightRepr", into = "PosWeightRepr")]
pub enum PosWeight {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PosWeightRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<PosWeightRepr> for PosWeight {
    type Error = String;
    fn try_from(r: PosWeightRepr) -> std::result::Result<Self, String> {
        match r {
            PosWeightRepr::Number(v) if v > 0.0 && v.is_finite() => Ok(PosWeight::Fixed(v)),
            PosWeightRepr::Number(v) => Err(format!("pos_weight must be positive, got {v}")),
            PosWeightRepr::Word(w) if w == "auto" => Ok(PosWeight::Auto),
            PosWeightRepr::Word(w) => Err(format!("pos_weight must be \"auto\" or a number, got {w:?}")),
        }
    }
}

impl From<PosWeight> for PosWeightRepr {
    fn from(p: PosWeight) -> Self {
        match p {
            PosWeight::Auto => PosWeightRepr::Word("auto".to_string()),
            PosWeight::Fixed(v) => PosWeightRepr::Number(v),
        }
    }
}

/// Beta is capped here when resolved automatically.
pub const POS_WEIGHT_CAP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FullBatch,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pos_weight: PosWeight,
    pub lambda_smooth: f64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Neighbors sampled per layer in sampled mode; length must equal n_layers.
    pub fanout: Vec<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lr_min: f64,
    /// Classification threshold tau for reported threshold metrics.
    pub threshold: f64,
    /// Equal-width bins for the calibration (ECE/reliability) section of
    /// metric reports.
    pub ece_bins: usize,
    /// When set, training-phase message passing only sees edges between
    /// train nodes, and validation scoring only sees train+val edges, so no
    /// message ever arrives from a later-time node.
    pub strict_time_edges: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pos_weight: PosWeight::Auto,
            lambda_smooth: 1e-4,
            lr0: 5e-4,
            weight_decay: 1e-4,
            max_epochs: 200,
            batch_size: 1024,
            patience: 20,
            seed: 42,
            mode: TrainMode::FullBatch,
            fanout: vec![15, 10, 5],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_min: 0.0,
            threshold: 0.5,
            ece_bins: 15,
            strict_time_edges: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let PosWeight::Fixed(v) = self.pos_weight {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::ConfigError(format!("pos_weight must be positive, got {v}")));
            }
        }
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(Error::ConfigError(format!(
                "lambda_smooth must be >= 0, got {}",
                self.lambda_smooth
            )));
        }
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return Err(Error::ConfigError(format!(
                "need 0 <= lr_min <= lr0 and lr0 > 0, got lr0={} lr_min={}",
                self.lr0, self.lr_min
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::ConfigError("weight_decay must be >= 0".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::ConfigError("max_epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::ConfigError("batch_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::ConfigError("adam betas must be in [0,1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::ConfigError("adam_epsilon must be > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::ConfigError(format!(
                "threshold must be in (0,1), got {}",
                self.threshold
            )));
        }
        if self.ece_bins == 0 {
            return Err(Error::ConfigError("ece_bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Resolve beta against the training labels. Auto = N_neg / N_pos capped at
/// [`POS_WEIGHT_CAP`]; a positive-free mask falls back to 1 with a warning.
pub fn resolve_pos_weight(pw: PosWeight, y: &[u8], mask_rows: &[usize]) -> f64 {
    match pw {
        PosWeight::Fixed(v) => v,
        PosWeight::Auto => {
            let pos = mask_rows.iter().filter(|&&i| y[i] == 1).count();
            let neg = mask_rows.len() - pos;
            if pos == 0 {
                eprintln!("warning: no positive labels in the training mask; pos_weight auto falls back to 1");
                1.0
            } else {
                (neg as f64 / pos as f64).min(POS_WEIGHT_CAP)
            }
        }
    }
}

/// Classification loss on the tape, summed over `rows` of the logit column.
pub fn loss_cls(
    tape: &mut Tape,
    logits: NodeId,
    y: &[u8],
    rows: Rc<Vec<usize>>,
    beta: f64,
) -> Result<NodeId> {
    if rows.is_empty() {
        return Err(Error::ConfigError("classification mask is empty".into()));
    }
    let w_pos: Vec<f64> = rows.iter().map(|&i| if y[i] == 1 { beta } else { 0.0 }).collect();
    let w_neg: Vec<f64> = rows.iter().map(|&i| if y[i] == 1 { 0.0 } else { 1.0 }).collect();
    let z = tape.row_gather(logits, rows)?;
    // -log p = softplus(-z), -log(1-p) = softplus(z).
    let neg_z = tape.scale(z, -1.0);
    let nlp = tape.softplus(neg_z);
    let nln = tape.softplus(z);
    let w_pos = tape.constant(Tensor::column(&w_pos));
    let w_neg = tape.constant(Tensor::column(&w_neg));
    let pos_term = tape.mul(nlp, w_pos)?;
    let neg_term = tape.mul(nln, w_neg)?;
    let both = tape.add(pos_term, neg_term)?;
    Ok(tape.sum_all(both))
}

/// Smoothing regularizer over every directed CSR entry. `alpha` is a plain
/// slice (already detached); an edgeless graph contributes an exact zero.
pub fn loss_smooth(tape: &mut Tape, h: NodeId, gi: &GraphIndex, alpha: &[f64]) -> Result<NodeId> {
    if gi.edge_count() == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if alpha.len() != gi.edge_count() {
        return Err(Error::ShapeError {
            op: "loss_smooth",
            left: (alpha.len(), 1),
            right: (gi.edge_count(), 1),
        });
    }
    let h_dst = tape.row_gather(h, Rc::clone(&gi.dst))?;
    let h_src = tape.row_gather(h, Rc::clone(&gi.src))?;
    let neg_src = tape.scale(h_src, -1.0);
    let diff = tape.add(h_dst, neg_src)?;
    let sq = tape.mul(diff, diff)?;
    let w = tape.constant(Tensor::column(alpha));
    let weighted = tape.mul(sq, w)?;
    Ok(tape.sum_all(weighted))
}

/// The assembled objective for one forward pass, with the term values read
/// off before any backward pass frees them.
pub struct Objective {
    pub total: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    pub cls_value: f64,
    pub smooth_value: f64,
}

/// Build Eq.-style total loss on the tape: encoder, head, both loss terms.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    tp: &crate::model::TapeParams,
    gi: &GraphIndex,
    x: NodeId,
    mcfg: &ModelConfig,
    y: &[u8],
    mask_rows: Rc<Vec<usize>>,
    beta: f64,
    lambda: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Objective> {
    let out = encode(tape, tp, gi, x, mcfg, training, rng)?;
    let (logits, probs) = score(tape, tp, out.h)?;
    let cls = loss_cls(tape, logits, y, mask_rows, beta)?;
    let smooth = loss_smooth(tape, out.h, gi, &out.final_alpha)?;
    let scaled = tape.scale(smooth, lambda);
    let total = tape.add(cls, scaled)?;
    Ok(Objective {
        total,
        logits,
        probs,
        cls_value: tape.value(cls).item(),
        smooth_value: tape.value(smooth).item(),
    })
}

/// Cosine annealing: lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2, with
/// the endpoints pinned so lr(0) = lr0 and lr(T) = lr_min exactly.
pub fn cosine_lr(t: usize, t_max: usize, lr0: f64, lr_min: f64) -> f64 {
    if t == 0 {
        return lr0;
    }
    if t >= t_max {
        return lr_min;
    }
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / t_max as f64).cos())
}

/// AdamW with decoupled weight decay and one shared monotone step counter.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new<'a, I>(params: I, cfg: &TrainConfig) -> Self
    where
        I: IntoIterator<Item = (String, &'a Tensor)>,
    {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in params {
            m.push(Tensor::zeros(p.rows(), p.cols()));
            v.push(Tensor::zeros(p.rows(), p.cols()));
        }
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_epsilon,
            weight_decay: cfg.weight_decay,
            t: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer step. `grads[i] = None` is treated as an all-zero
    /// gradient (the decay still applies). Decay first, then the
    /// bias-corrected moment update.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Option<Tensor>],
        lr_t: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeError {
                op: "adamw_step",
                left: (params.len(), grads.len()),
                right: (self.m.len(), self.m.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr_t * self.weight_decay;
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if let Some(g) = &grads[i] {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeError {
                        op: "adamw_step",
                        left: g.shape(),
                        right: p.shape(),
                    });
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(format!(
                        "parameter {name} at step {}: gradient has a NaN or infinity",
                        self.t
                    )));
                }
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for k in 0..pd.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[k]);
                pd[k] *= decay;
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * g;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * g * g;
                let m_hat = md[k] / bc1;
                let v_hat = vd[k] / bc2;
                pd[k] -= lr_t * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Stratified batches: positives and negatives are shuffled separately and
/// apportioned so every batch's positive count tracks the global rate; the
/// batches partition `train_rows` exactly.
pub fn make_batches(
    train_rows: &[usize],
    y: &[u8],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let n = train_rows.len();
    if n == 0 {
        return Vec::new();
    }
    let mut pos: Vec<usize> = train_rows.iter().copied().filter(|&i| y[i] == 1).collect();
    let mut neg: Vec<usize> = train_rows.iter().copied().filter(|&i| y[i] != 1).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_batches = n.div_ceil(batch_size);
    let cum = |total: usize, b: usize| total * b / n_batches;
    (0..n_batches)
        .map(|b| {
            let mut batch = pos[cum(pos.len(), b)..cum(pos.len(), b + 1)].to_vec();
            batch.extend_from_slice(&neg[cum(neg.len(), b)..cum(neg.len(), b + 1)]);
            batch
        })
        .collect()
}

/// A seed batch expanded to its sampled receptive field: the induced
/// subgraph over `nodes` (global ids, ascending) containing the sampled
/// edges, symmetrized.
pub struct SampledBatch {
    pub nodes: Vec<usize>,
    /// Positions of the seed nodes within `nodes`.
    pub seed_local: Vec<usize>,
    pub graph: TransactionGraph,
}

/// Expand `seeds` with per-layer uniform neighbor sampling without
/// replacement (fanout\[l\] neighbors per frontier node at hop l).
pub fn expand_batch(
    graph: &TransactionGraph,
    seeds: &[usize],
    fanout: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<SampledBatch> {
    let mut selected: BTreeSet<usize> = seeds.iter().copied().collect();
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut frontier: Vec<usize> = seeds.to_vec();
    for &f in fanout {
        let mut next = Vec::new();
        for &u in &frontier {
            let nbrs = graph.neighbors(u);
            let chosen: Vec<usize> = if nbrs.len() <= f {
                nbrs.to_vec()
            } else {
                let mut idx: Vec<usize> = rand::seq::index::sample(rng, nbrs.len(), f).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|k| nbrs[k]).collect()
            };
            for v in chosen {
                edges.insert((u.min(v), u.max(v)));
                if selected.insert(v) {
                    next.push(v);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    let nodes: Vec<usize> = selected.into_iter().collect();
    let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(l, &g)| (g, l)).collect();
    let local_edges: Vec<(usize, usize)> =
        edges.iter().map(|&(a, b)| (local[&a], local[&b])).collect();
    let graph = crate::graph::to_csr(&local_edges, nodes.len())?;
    let seed_local = seeds.iter().map(|s| local[s]).collect();
    Ok(SampledBatch {
        nodes,
        seed_local,
        graph,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_smooth: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub val_auroc: Option<f64>,
    pub val_auprc: Option<f64>,
}

pub struct TrainOutput {
    /// Parameters from the best-validation epoch, rounded to 32-bit
    /// precision so a checkpoint round trip is bit-identical.
    pub params: ModelParams,
    /// 1-based index of the best epoch.
    pub best_epoch: usize,
    /// Validation AUPRC recomputed with the rounded parameters (what a
    /// reload of the checkpoint will reproduce).
    pub best_val_auprc: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub beta: f64,
    pub stopped_early: bool,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Round every parameter to the nearest 32-bit value (in place).
pub fn round_params_f32(params: &mut ModelParams) {
    for (_, t) in params.named_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn gather_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(rows.len(), x.cols());
    for (l, &g) in rows.iter().enumerate() {
        out.row_mut(l).copy_from_slice(x.row(g));
    }
    out
}

fn val_ranking_metrics(
    graph: &TransactionGraph,
    fm: &FeatureMatrix,
    params: &ModelParams,
    mcfg: &ModelConfig,
    val_rows: &[usize],
) -> Result<(Option<f64>, Option<f64>)> {
    if val_rows.is_empty() {
        return Ok((None, None));
    }
    let (probs, _) = crate::model::predict(graph, &fm.x, params, mcfg)?;
    let p: Vec<f64> = val_rows.iter().map(|&i| probs[i]).collect();
    let yv: Vec<u8> = val_rows.iter().map(|&i| fm.y[i]).collect();
    Ok((
        defined(metrics::auroc(&p, &yv))?,
        defined(metrics::auprc(&p, &yv))?,
    ))
}

/// Full training loop. Up to `max_epochs` epochs of AdamW under cosine
/// annealing; after each epoch the validation AUPRC is computed in
/// inference mode and the best parameters are kept. Stops once the metric
/// has not improved by more than 1e-5 for `patience` consecutive epochs
/// (patience 0 stops at the first non-improving epoch).
pub fn train_loop(
    graph: &TransactionGraph,
    fm: &FeatureMatrix,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutput> {
    mcfg.validate()?;
    tcfg.validate()?;
    if graph.n_nodes != fm.n() {
        return Err(Error::ShapeError {
            op: "train_loop",
            left: (graph.n_nodes, 0),
            right: (fm.n(), 0),
        });
    }
    if tcfg.mode == TrainMode::Sampled && tcfg.fanout.len() != mcfg.n_layers {
        return Err(Error::ConfigError(format!(
            "sampled mode needs one fanout per layer: {} fanouts for {} layers",
            tcfg.fanout.len(),
            mcfg.n_layers
        )));
    }
    let train_rows = fm.rows_of(Split::Train);
    let val_rows = fm.rows_of(Split::Val);
    if train_rows.is_empty() {
        return Err(Error::ConfigError("no training rows in the split".into()));
    }
    let beta = resolve_pos_weight(tcfg.pos_weight, &fm.y, &train_rows);

    // Under strict time edges the train pass sees the train-only subgraph
    // and validation scoring sees train+val; the caller keeps the full
    // graph for final test evaluation.
    let train_keep: Vec<bool> = fm.split.iter().map(|&s| s == Split::Train).collect();
    let val_keep: Vec<bool> = fm
        .split
        .iter()
        .map(|&s| s == Split::Train || s == Split::Val)
        .collect();
    let g_train: Cow<TransactionGraph> = if tcfg.strict_time_edges {
        Cow::Owned(restrict_to(graph, &train_keep))
    } else {
        Cow::Borrowed(graph)
    };
    let g_val: Cow<TransactionGraph> = if tcfg.strict_time_edges {
        Cow::Owned(restrict_to(graph, &val_keep))
    } else {
        Cow::Borrowed(graph)
    };
    let gi_full = GraphIndex::new(&g_train);

    let mut params = init_params(mcfg, fm.d(), tcfg.seed)?;
    let mut opt = AdamW::new(
        params.named().into_iter().map(|(n, t)| (n, &*t)),
        tcfg,
    );
    // Separate deterministic streams so adding an epoch of dropout draws
    // never perturbs batch shuffling, and vice versa.
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(2));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(3));

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_params: Option<ModelParams> = None;
    let mut best_epoch = 0usize;
    let mut best_exact = f64::NEG_INFINITY;
    let mut patience_best = f64::NEG_INFINITY;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=tcfg.max_epochs {
        let lr_t = cosine_lr(epoch - 1, tcfg.max_epochs, tcfg.lr0, tcfg.lr_min);
        let mut sum_cls = 0.0;
        let mut sum_smooth = 0.0;
        let mut n_steps = 0usize;

        match tcfg.mode {
            TrainMode::FullBatch => {
                let mut tape = Tape::new();
                let tp = register_params(&mut tape, &params, true);
                let x_id = tape.constant(fm.x.clone());
                let obj = build_objective(
                    &mut tape,
                    &tp,
                    &gi_full,
                    x_id,
                    mcfg,
                    &fm.y,
                    Rc::new(train_rows.clone()),
                    beta,
                    tcfg.lambda_smooth,
                    true,
                    &mut dropout_rng,
                )?;
                sum_cls += obj.cls_value;
                sum_smooth += obj.smooth_value;
                n_steps += 1;
                tape.backward(obj.total)?;
                let grads = collect_grads(&tape, &tp);
                drop(tape);
                opt.step(&mut params.named_mut(), &grads, lr_t)?;
            }
            TrainMode::Sampled => {
                let batches = make_batches(&train_rows, &fm.y, tcfg.batch_size, &mut batch_rng);
                for seeds in &batches {
                    let sb = expand_batch(&g_train, seeds, &tcfg.fanout, &mut sample_rng)?;
                    let x_sub = gather_rows(&fm.x, &sb.nodes);
                    let y_sub: Vec<u8> = sb.nodes.iter().map(|&g| fm.y[g]).collect();
                    let gi = GraphIndex::new(&sb.graph);
                    let mut tape = Tape::new();
                    let tp = register_params(&mut tape, &params, true);
                    let x_id = tape.constant(x_sub);
                    let obj = build_objective(
                        &mut tape,
                        &tp,
                        &gi,
                        x_id,
                        mcfg,
                        &y_sub,
                        Rc::new(sb.seed_local.clone()),
                        beta,
                        tcfg.lambda_smooth,
                        true,
                        &mut dropout_rng,
                    )?;
                    sum_cls += obj.cls_value;
                    sum_smooth += obj.smooth_value;
                    n_steps += 1;
                    tape.backward(obj.total)?;
                    let grads = collect_grads(&tape, &tp);
                    drop(tape);
                    opt.step(&mut params.named_mut(), &grads, lr_t)?;
                }
            }
        }

        let loss_cls_mean = sum_cls / n_steps as f64;
        let loss_smooth_mean = sum_smooth / n_steps as f64;
        let (val_auroc, val_auprc) =
            val_ranking_metrics(&g_val, fm, &params, mcfg, &val_rows)?;
        history.push(EpochRecord {
            epoch,
            loss_cls: loss_cls_mean,
            loss_smooth: loss_smooth_mean,
            loss_total: loss_cls_mean + tcfg.lambda_smooth * loss_smooth_mean,
            lr: lr_t,
            val_auroc,
            val_auprc,
        });

        let metric = val_auprc.unwrap_or(f64::NEG_INFINITY);
        if metric > best_exact {
            best_exact = metric;
            best_epoch = epoch;
            best_params = Some(params.clone());
        }
        if metric > patience_best + 1e-5 {
            patience_best = metric;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= tcfg.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }

    let mut best = best_params.unwrap_or_else(|| params.clone());
    if best_epoch == 0 {
        best_epoch = history.len();
    }
    round_params_f32(&mut best);
    let (_, best_val_auprc) = val_ranking_metrics(&g_val, fm, &best, mcfg, &val_rows)?;
    Ok(TrainOutput {
        params: best,
        best_epoch,
        best_val_auprc,
        history,
        beta,
        stopped_early,
    })
}

/// Inference + metric reports for every split, using the full graph.
pub fn evaluate_all(
    graph: &TransactionGraph,
    fm: &FeatureMatrix,
    params: &ModelParams,
    mcfg: &ModelConfig,
    tau: f64,
    n_bins: usize,
) -> Result<Vec<metrics::MetricsReport>> {
    let (probs, _) = crate::model::predict(graph, &fm.x, params, mcfg)?;
    let mut reports = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let rows = fm.rows_of(split);
        if rows.is_empty() {
            continue;
        }
        let p: Vec<f64> = rows.iter().map(|&i| probs[i]).collect();
        let yv: Vec<u8> = rows.iter().map(|&i| fm.y[i]).collect();
        reports.push(metrics::metrics_report(
            &format!("{split:?}").to_lowercase(),
            &p,
            &yv,
            tau,
            n_bins,
        )?);
    }
    Ok(reports)
}
