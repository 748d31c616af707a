//! Minority-class gradient and representation enhancement.
//!
//! A cross-segment spatiotemporal encoder (self-attention applied in series
//! across the segment, temporal, and spatial axes) feeds three channel-style
//! attention heads that produce per-segment, per-timestep, and per-node
//! weights in (0, 1). Input gradients of the frozen target model are
//! reweighted as (att_sg + att_sp) o grad o att_te before victim selection
//! and sign steps, and a two-stage loop alternates adversarial generation
//! (reweighter frozen) with reweighter updates (target model frozen).

use crate::attack::{self, AdversarialExample, AttackBudget, PerturbationMask};
use crate::autodiff::{layer_norm, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::losses::TaskLoss;
use crate::params::{Adam, ParamStore, ParamVars};
use crate::stmodel::StRegressor;
use crate::zidata::{class_partition, ClassPartition, SegmentBatch, SpatioTemporalGraph};
use ndarray::{Array1, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            model_dim: 32,
            num_heads: 4,
            head_dim: 8,
            ffn_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            invalid!("encoder dimensions must be positive");
        }
        if self.model_dim != self.num_heads * self.head_dim {
            invalid!(
                "model_dim {} must equal num_heads {} * head_dim {}",
                self.model_dim,
                self.num_heads,
                self.head_dim
            );
        }
        Ok(())
    }
}

/// Which saliency feeds the victim mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// One mask per batch from the batch-mean saliency.
    #[default]
    PerBatch,
    /// One mask per segment from that segment's own rectified gradient.
    PerSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MingreConfig {
    pub encoder: EncoderConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lr: f64,
    pub seed: u64,
    pub mask_granularity: MaskGranularity,
}

impl Default for MingreConfig {
    fn default() -> Self {
        MingreConfig {
            encoder: EncoderConfig::default(),
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.2,
            lambda4: 0.1,
            lr: 1e-3,
            seed: 0,
            mask_granularity: MaskGranularity::PerBatch,
        }
    }
}

impl MingreConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 || self.lambda4 < 0.0 {
            invalid!("lambdas must be non-negative");
        }
        if !(self.lr > 0.0) {
            invalid!("reweighter learning rate must be positive");
        }
        Ok(())
    }
}

/// Segment / temporal / spatial reweighting factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub att_sg: Array1<f64>,
    pub att_te: Array1<f64>,
    pub att_sp: Array1<f64>,
}

impl AttentionWeights {
    /// All-ones weights; att1 = 2 everywhere, which rescales gradients
    /// without changing signs or orderings.
    pub fn uniform(b: usize, t: usize, n: usize) -> Self {
        AttentionWeights {
            att_sg: Array1::ones(b),
            att_te: Array1::ones(t),
            att_sp: Array1::ones(n),
        }
    }

    /// att1 at one (segment, node) pair.
    pub fn att1(&self, segment: usize, node: usize) -> f64 {
        self.att_sg[segment] + self.att_sp[node]
    }

    /// Range check for learned weights: components in (0,1), att1 in (0,2).
    pub fn check_learned_ranges(&self) -> Result<()> {
        for v in self.att_sg.iter().chain(self.att_te.iter()).chain(self.att_sp.iter()) {
            if !(*v > 0.0 && *v < 1.0) {
                invalid!("attention weight {v} outside (0, 1)");
            }
        }
        Ok(())
    }
}

/// ghat = (att_sg + att_sp) o grad o att_te, elementwise after broadcast.
pub fn reweight_gradients(grad: &Array4<f64>, weights: &AttentionWeights) -> Result<Array4<f64>> {
    let (b, t, n, _d) = grad.dim();
    if weights.att_sg.len() != b || weights.att_te.len() != t || weights.att_sp.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "attention weights (sg {}, te {}, sp {}) do not broadcast to grad {:?}",
            weights.att_sg.len(),
            weights.att_te.len(),
            weights.att_sp.len(),
            grad.dim()
        )));
    }
    let mut out = grad.clone();
    for ((bi, ti, ni, _di), v) in out.indexed_iter_mut() {
        *v *= (weights.att_sg[bi] + weights.att_sp[ni]) * weights.att_te[ti];
    }
    Ok(out)
}

/// The reweighting network (psi): encoder plus three attention heads, with
/// its own optimizer state and stage-2 coefficients.
#[derive(Debug, Clone)]
pub struct Reweighter {
    pub config: MingreConfig,
    pub input_dim: usize,
    pub params: ParamStore,
    optimizer: Adam,
}

impl PartialEq for Reweighter {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.input_dim == other.input_dim && self.params == other.params
    }
}

const AXES: [&str; 3] = ["sg", "te", "sp"];

impl Reweighter {
    pub fn new(input_dim: usize, config: MingreConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            invalid!("reweighter input_dim must be positive");
        }
        let dh = config.encoder.model_dim;
        let ffn = config.encoder.ffn_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        params.insert_glorot("in.w", &[input_dim, dh], &mut rng);
        params.insert_zeros("in.b", &[dh]);
        for ax in AXES {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert_glorot(&format!("enc.{ax}.{w}"), &[dh, dh], &mut rng);
            }
            params.insert_glorot(&format!("enc.{ax}.ffn.w1"), &[dh, ffn], &mut rng);
            params.insert_zeros(&format!("enc.{ax}.ffn.b1"), &[ffn]);
            params.insert_glorot(&format!("enc.{ax}.ffn.w2"), &[ffn, dh], &mut rng);
            params.insert_zeros(&format!("enc.{ax}.ffn.b2"), &[dh]);
            params.insert_ones(&format!("enc.{ax}.ln1.g"), &[dh]);
            params.insert_zeros(&format!("enc.{ax}.ln1.b"), &[dh]);
            params.insert_ones(&format!("enc.{ax}.ln2.g"), &[dh]);
            params.insert_zeros(&format!("enc.{ax}.ln2.b"), &[dh]);
        }
        let h1 = (dh / 2).max(1);
        let h2 = (dh / 4).max(1);
        for ax in AXES {
            params.insert_glorot(&format!("att.{ax}.w1"), &[dh, h1], &mut rng);
            params.insert_zeros(&format!("att.{ax}.b1"), &[h1]);
            params.insert_glorot(&format!("att.{ax}.w2"), &[h1, h2], &mut rng);
            params.insert_zeros(&format!("att.{ax}.b2"), &[h2]);
            params.insert_glorot(&format!("att.{ax}.w3"), &[h2, 1], &mut rng);
            params.insert_zeros(&format!("att.{ax}.b3"), &[1]);
        }
        let optimizer = Adam::new(config.lr, &params);
        Ok(Reweighter {
            config,
            input_dim,
            params,
            optimizer,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Encoder output O(X), shape (B, T, N, model_dim), on the tape.
    pub fn encode_on_tape<'t>(&self, tape: &'t Tape, x: &Array4<f64>) -> Result<(Var<'t>, ParamVars<'t>)> {
        let (b, t, n, d) = x.dim();
        if d != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "reweighter expects {} channels, batch has {d}",
                self.input_dim
            )));
        }
        let pv = self.params.leaves(tape);
        let dh = self.config.encoder.model_dim;
        let xv = tape.var(x.clone().into_dyn());
        let embedded = xv
            .reshape(&[b * t * n, d])
            .matmul(pv.get("in.w"))
            .add(pv.get("in.b"))
            .reshape(&[b, t, n, dh]);

        // segment attention across B: reshape to (T, N, B, Dh)
        let sg_in = embedded.permute(&[1, 2, 0, 3]).reshape(&[t * n, b, dh]);
        let sg_out = self.abd_block(&pv, "sg", sg_in)?.reshape(&[t, n, b, dh]);
        // temporal attention across T: reshape to (B, N, T, Dh)
        let te_in = sg_out.permute(&[2, 1, 0, 3]).reshape(&[b * n, t, dh]);
        let te_out = self.abd_block(&pv, "te", te_in)?.reshape(&[b, n, t, dh]);
        // spatial attention across N: reshape to (B, T, N, Dh)
        let sp_in = te_out.permute(&[0, 2, 1, 3]).reshape(&[b * t, n, dh]);
        let sp_out = self.abd_block(&pv, "sp", sp_in)?.reshape(&[b, t, n, dh]);
        Ok((sp_out, pv))
    }

    /// One attention-between-datapoints block over the middle axis of a
    /// (groups, S, Dh) tensor: multi-head softmax attention, residual and
    /// layer norm, FFN, residual and layer norm.
    fn abd_block<'t>(&self, pv: &ParamVars<'t>, ax: &str, x: Var<'t>) -> Result<Var<'t>> {
        let (m, _probs) = self.multi_head_attention(pv, ax, x)?;
        let (g, s, dh) = dims3(&x);
        let r = layer_norm(
            m.add(x),
            pv.get(&format!("enc.{ax}.ln1.g")),
            pv.get(&format!("enc.{ax}.ln1.b")),
            LN_EPS,
        );
        let ffn = r
            .reshape(&[g * s, dh])
            .matmul(pv.get(&format!("enc.{ax}.ffn.w1")))
            .add(pv.get(&format!("enc.{ax}.ffn.b1")))
            .relu()
            .matmul(pv.get(&format!("enc.{ax}.ffn.w2")))
            .add(pv.get(&format!("enc.{ax}.ffn.b2")))
            .reshape(&[g, s, dh]);
        Ok(layer_norm(
            r.add(ffn),
            pv.get(&format!("enc.{ax}.ln2.g")),
            pv.get(&format!("enc.{ax}.ln2.b")),
            LN_EPS,
        ))
    }

    fn multi_head_attention<'t>(
        &self,
        pv: &ParamVars<'t>,
        ax: &str,
        x: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (g, s, dh) = dims3(&x);
        let heads = self.config.encoder.num_heads;
        let hd = self.config.encoder.head_dim;
        if heads * hd != dh {
            invalid!("model_dim {dh} not divisible into {heads} heads");
        }
        let flat = x.reshape(&[g * s, dh]);
        let split = |v: Var<'t>| {
            v.reshape(&[g, s, heads, hd])
                .permute(&[0, 2, 1, 3])
                .reshape(&[g * heads, s, hd])
        };
        let q = split(flat.matmul(pv.get(&format!("enc.{ax}.wq"))));
        let k = split(flat.matmul(pv.get(&format!("enc.{ax}.wk"))));
        let v = split(flat.matmul(pv.get(&format!("enc.{ax}.wv"))));
        let scores = q.bmm(k.permute(&[0, 2, 1])).scale(1.0 / (hd as f64).sqrt());
        let probs = scores.softmax(2);
        let mixed = probs
            .bmm(v)
            .reshape(&[g, heads, s, hd])
            .permute(&[0, 2, 1, 3])
            .reshape(&[g * s, dh])
            .matmul(pv.get(&format!("enc.{ax}.wo")))
            .reshape(&[g, s, dh]);
        Ok((mixed, probs))
    }

    /// Attention weight vars on the tape: (sg (B), te (T), sp (N)).
    pub fn attention_on_tape<'t>(
        &self,
        tape: &'t Tape,
        x: &Array4<f64>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>, ParamVars<'t>)> {
        let (b, t, n, _d) = x.dim();
        let (o, pv) = self.encode_on_tape(tape, x)?;
        let dh = self.config.encoder.model_dim;
        // leaky activations: the class-norm terms apply persistent one-sided
        // pressure that would otherwise dead-relu the shared heads
        let mlp = |pooled: Var<'t>, ax: &str, len: usize| {
            pooled
                .matmul(pv.get(&format!("att.{ax}.w1")))
                .add(pv.get(&format!("att.{ax}.b1")))
                .leaky_relu(0.1)
                .matmul(pv.get(&format!("att.{ax}.w2")))
                .add(pv.get(&format!("att.{ax}.b2")))
                .leaky_relu(0.1)
                .matmul(pv.get(&format!("att.{ax}.w3")))
                .add(pv.get(&format!("att.{ax}.b3")))
                .sigmoid()
                .reshape(&[len])
        };
        let sg = mlp(o.mean_axes(&[1, 2]).reshape(&[b, dh]), "sg", b);
        let te = mlp(o.mean_axes(&[0, 2]).reshape(&[t, dh]), "te", t);
        let sp = mlp(o.mean_axes(&[0, 1]).reshape(&[n, dh]), "sp", n);
        Ok((sg, te, sp, pv))
    }

    /// Learned attention weights for a clean batch (values only).
    pub fn attention_weights(&self, x: &Array4<f64>) -> Result<AttentionWeights> {
        let tape = Tape::new();
        let (sg, te, sp, _pv) = self.attention_on_tape(&tape, x)?;
        Ok(AttentionWeights {
            att_sg: to1(&sg.value()),
            att_te: to1(&te.value()),
            att_sp: to1(&sp.value()),
        })
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }
}

fn dims3(v: &Var<'_>) -> (usize, usize, usize) {
    let s = v.shape();
    (s[0], s[1], s[2])
}

fn to1(v: &ArrayD<f64>) -> Array1<f64> {
    v.clone().into_dimensionality::<ndarray::Ix1>().expect("rank-1 tensor")
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// A MinGRE adversarial example: the bounded example plus the weights that
/// guided it.
#[derive(Debug, Clone)]
pub struct MingreExample {
    pub example: AdversarialExample,
    pub weights: AttentionWeights,
    /// Per-segment masks when the per-segment granularity is active.
    pub per_segment_masks: Option<Vec<PerturbationMask>>,
}

/// Attention-guided generation with explicit weights (core primitive; tests
/// inject uniform or constructed weights through this).
pub fn mingre_generate_with_weights(
    model: &StRegressor,
    loss: &TaskLoss,
    batch: &SegmentBatch,
    graph: &SpatioTemporalGraph,
    budget: &AttackBudget,
    weights: &AttentionWeights,
    granularity: MaskGranularity,
) -> Result<MingreExample> {
    budget.validate()?;
    let grad_clean = model.input_gradient(&batch.x, &batch.y, graph, |tape, vars, y| {
        loss.build(tape, vars, y)
    })?;
    let ghat_clean = reweight_gradients(&grad_clean, weights)?;
    let k = budget.num_victims(graph.num_nodes());

    match granularity {
        MaskGranularity::PerBatch => {
            let saliency = attack::node_saliency(&ghat_clean)?;
            let mask = PerturbationMask::new(attack::top_k_indices(&saliency, k), graph.num_nodes())?;
            let example = attack::stpgd_with(&batch.x, budget, &mask, |xq| {
                let (l, g) =
                    model.loss_and_input_gradient(xq, &batch.y, graph, |tape, vars, y| {
                        loss.build(tape, vars, y)
                    })?;
                Ok((l, reweight_gradients(&g, weights)?))
            })?;
            Ok(MingreExample {
                example,
                weights: weights.clone(),
                per_segment_masks: None,
            })
        }
        MaskGranularity::PerSegment => {
            per_segment_generate(model, loss, batch, graph, budget, weights, &ghat_clean, k)
        }
    }
}

/// Learned-weight generation: weights come from the clean batch features.
pub fn mingre_generate(
    model: &StRegressor,
    loss: &TaskLoss,
    reweighter: &Reweighter,
    batch: &SegmentBatch,
    graph: &SpatioTemporalGraph,
    budget: &AttackBudget,
) -> Result<MingreExample> {
    let weights = reweighter.attention_weights(&batch.x)?;
    mingre_generate_with_weights(
        model,
        loss,
        batch,
        graph,
        budget,
        &weights,
        reweighter.config.mask_granularity,
    )
}

/// Per-segment masks: each segment ranks nodes by its own rectified
/// reweighted gradient. The budget bounds selections per segment.
#[allow(clippy::too_many_arguments)]
fn per_segment_generate(
    model: &StRegressor,
    loss: &TaskLoss,
    batch: &SegmentBatch,
    graph: &SpatioTemporalGraph,
    budget: &AttackBudget,
    weights: &AttentionWeights,
    ghat_clean: &Array4<f64>,
    k: usize,
) -> Result<MingreExample> {
    let (b, t, n, d) = batch.x.dim();
    let mut masks = Vec::with_capacity(b);
    let mut indicator = Array4::<f64>::zeros((b, t, n, d));
    for s in 0..b {
        let seg = ghat_clean
            .slice(ndarray::s![s..s + 1, .., .., ..])
            .to_owned();
        let saliency = attack::node_saliency(&seg)?;
        let mask = PerturbationMask::new(attack::top_k_indices(&saliency, k), n)?;
        for &node in mask.selected() {
            indicator
                .slice_mut(ndarray::s![s, .., node, ..])
                .fill(1.0);
        }
        masks.push(mask);
    }

    let eps = budget.epsilon;
    let mut delta = Array4::<f64>::zeros((b, t, n, d));
    let mut x_cur = batch.x.clone();
    let mut trace = Vec::with_capacity(budget.num_iters + 1);
    for _ in 0..budget.num_iters {
        let (l, grad) = model.loss_and_input_gradient(&x_cur, &batch.y, graph, |tape, vars, y| {
            loss.build(tape, vars, y)
        })?;
        trace.push(l);
        let ghat = reweight_gradients(&grad, weights)?;
        for ((bi, ti, ni, di), &ind) in indicator.indexed_iter() {
            if ind == 0.0 {
                continue;
            }
            let g = ghat[(bi, ti, ni, di)];
            let step = budget.step_alpha * g.signum() * if g == 0.0 { 0.0 } else { 1.0 };
            delta[(bi, ti, ni, di)] = (delta[(bi, ti, ni, di)] + step).clamp(-eps, eps);
        }
        x_cur = batch.x.clone();
        for ((bi, ti, ni, di), &dv) in delta.indexed_iter() {
            if dv != 0.0 {
                x_cur[(bi, ti, ni, di)] = batch.x[(bi, ti, ni, di)] + dv;
            }
        }
    }
    let final_loss = loss.eval(model, &x_cur, &batch.y, graph)?;
    trace.push(final_loss);

    // union mask for bookkeeping; per-segment budget holds per entry
    let mut union: Vec<usize> = masks.iter().flat_map(|m| m.selected().to_vec()).collect();
    union.sort_unstable();
    union.dedup();
    let example = AdversarialExample {
        x_base: batch.x.clone(),
        x_adv: x_cur,
        mask: PerturbationMask::new(union, n)?,
        budget: *budget,
        loss_trace: trace,
    };
    Ok(MingreExample {
        example,
        weights: weights.clone(),
        per_segment_masks: Some(masks),
    })
}

// ---------------------------------------------------------------------------
// Stage objectives
// ---------------------------------------------------------------------------

/// |mean minority per-pair gradient magnitude - mean majority magnitude|,
/// with per-pair magnitude the L2 norm of ghat[s, :, n, :].
pub fn gradient_gap(ghat: &Array4<f64>, partition: &ClassPartition) -> Result<f64> {
    if !partition.has_both_classes() {
        invalid!("gradient gap needs both classes present");
    }
    let (b, t, n, d) = ghat.dim();
    let mask = partition.minority_mask();
    if mask.dim() != (b, n) {
        return Err(Error::ShapeMismatch(format!(
            "partition {:?} does not match gradient {:?}",
            mask.dim(),
            ghat.dim()
        )));
    }
    let (mut min_sum, mut maj_sum) = (0.0, 0.0);
    let (mut min_n, mut maj_n) = (0usize, 0usize);
    for s in 0..b {
        for j in 0..n {
            let mut sq = 0.0;
            for ti in 0..t {
                for di in 0..d {
                    let g = ghat[(s, ti, j, di)];
                    sq += g * g;
                }
            }
            let mag = sq.sqrt();
            if mask[(s, j)] {
                min_sum += mag;
                min_n += 1;
            } else {
                maj_sum += mag;
                maj_n += 1;
            }
        }
    }
    Ok((min_sum / min_n as f64 - maj_sum / maj_n as f64).abs())
}

/// Stage 1: generate the AE with the current, frozen reweighter.
pub fn stage1_attack_step(
    model: &StRegressor,
    reweighter: &Reweighter,
    loss: &TaskLoss,
    batch: &SegmentBatch,
    graph: &SpatioTemporalGraph,
    budget: &AttackBudget,
) -> Result<MingreExample> {
    mingre_generate(model, loss, reweighter, batch, graph, budget)
}

/// Per-term values of one stage-2 update. `total` is the sum of the four
/// reported terms; skipped regularizers contribute zero and are flagged.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stage2Breakdown {
    pub task: f64,
    pub gap: f64,
    pub att_minority: f64,
    pub att_majority: f64,
    pub total: f64,
    /// Unscaled gradient gap, independent of lambda2; zero when skipped.
    pub gap_raw: f64,
    pub class_terms_skipped: bool,
}

/// Stage 2: one Adam step on the reweighter parameters.
///
/// The objective is lambda1 * task loss on the stage-1 AE + lambda2 *
/// gradient gap + lambda3 * ||1 - att1 on minority pairs||_2 + lambda4 *
/// ||att1 on majority pairs||_2. The task term's psi-gradient uses a
/// straight-through linearization of the sign step: the reported value is
/// the true loss at X_adv, and its gradient flows through ghat(psi) against
/// the constant cotangent alpha * (dL/dX at X_adv) restricted to selected,
/// unclipped coordinates. Batches with a single class skip the gap and
/// attention-norm terms.
pub fn stage2_reweighter_update(
    model: &StRegressor,
    reweighter: &mut Reweighter,
    loss: &TaskLoss,
    batch: &SegmentBatch,
    graph: &SpatioTemporalGraph,
    adv: &MingreExample,
) -> Result<Stage2Breakdown> {
    let cfg = reweighter.config;
    cfg.validate()?;
    let (b, t, n, _d) = batch.x.dim();
    let partition = class_partition(batch);
    let both = partition.has_both_classes();

    // constants for the psi tape
    let grad_clean = model.input_gradient(&batch.x, &batch.y, graph, |tape, vars, y| {
        loss.build(tape, vars, y)
    })?;
    let g_adv = model.input_gradient(&adv.example.x_adv, &batch.y, graph, |tape, vars, y| {
        loss.build(tape, vars, y)
    })?;
    let eps = adv.example.budget.epsilon;
    let alpha_step = adv.example.budget.step_alpha;
    let mut cot = Array4::<f64>::zeros(batch.x.dim());
    for ((bi, ti, ni, di), c) in cot.indexed_iter_mut() {
        let selected = match &adv.per_segment_masks {
            Some(masks) => masks[bi].contains(ni),
            None => adv.example.mask.contains(ni),
        };
        if selected {
            let moved = (adv.example.x_adv[(bi, ti, ni, di)] - adv.example.x_base[(bi, ti, ni, di)]).abs();
            if moved < eps {
                *c = alpha_step * g_adv[(bi, ti, ni, di)];
            }
        }
    }

    let tape = Tape::new();
    let (sg, te, sp, pv) = reweighter.attention_on_tape(&tape, &batch.x)?;
    let att1_grid = sg.reshape(&[b, 1]).add(sp.reshape(&[1, n])); // (B, N)
    let ghat = sg
        .reshape(&[b, 1, 1, 1])
        .add(sp.reshape(&[1, 1, n, 1]))
        .mul_const(&grad_clean.clone().into_dyn())
        .mul(te.reshape(&[1, t, 1, 1]));

    let task_surrogate = ghat.mul_const(&cot.into_dyn()).sum_all();
    let mut objective = task_surrogate.scale(cfg.lambda1);

    let (gap_value, att_min_value, att_maj_value) = if both {
        let min_mask = partition.minority_mask_f64();
        let maj_mask = min_mask.mapv(|v| 1.0 - v);
        let n_min = partition.num_minority() as f64;
        let n_maj = partition.num_majority() as f64;

        let mags = ghat.square().sum_axes(&[1, 3]).reshape(&[b, n]).add_scalar(NORM_EPS).sqrt();
        let min_mean = mags.mul_const(&min_mask.clone().into_dyn()).sum_all().scale(1.0 / n_min);
        let maj_mean = mags.mul_const(&maj_mask.clone().into_dyn()).sum_all().scale(1.0 / n_maj);
        let gap = min_mean.sub(maj_mean).abs();

        let att_min = att1_grid
            .neg()
            .add_scalar(1.0)
            .square()
            .mul_const(&min_mask.into_dyn())
            .sum_all()
            .add_scalar(NORM_EPS)
            .sqrt();
        let att_maj = att1_grid
            .square()
            .mul_const(&maj_mask.into_dyn())
            .sum_all()
            .add_scalar(NORM_EPS)
            .sqrt();

        objective = objective
            .add(gap.scale(cfg.lambda2))
            .add(att_min.scale(cfg.lambda3))
            .add(att_maj.scale(cfg.lambda4));
        (gap.item(), att_min.item(), att_maj.item())
    } else {
        (0.0, 0.0, 0.0)
    };

    let grads = tape.backward(objective);
    let grad_list: Vec<ArrayD<f64>> = pv.all().iter().map(|v| grads.wrt(*v)).collect();
    let mut params = reweighter.params.clone();
    reweighter.optimizer.step(&mut params, &grad_list);
    reweighter.params = params;

    let task = cfg.lambda1 * adv.example.final_loss();
    let gap = cfg.lambda2 * gap_value;
    let att_minority = cfg.lambda3 * att_min_value;
    let att_majority = cfg.lambda4 * att_maj_value;
    Ok(Stage2Breakdown {
        task,
        gap,
        att_minority,
        att_majority,
        total: task + gap + att_minority + att_majority,
        gap_raw: gap_value,
        class_terms_skipped: !both,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ReweighterMeta {
    config: MingreConfig,
    input_dim: usize,
}

pub fn save_reweighter(rw: &Reweighter, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("reweighter.bin"))?);
    rw.params.write_blob(&mut f)?;
    use std::io::Write;
    f.flush()?;
    let meta = ReweighterMeta {
        config: rw.config,
        input_dim: rw.input_dim,
    };
    std::fs::write(dir.join("reweighter_meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_reweighter(dir: &Path) -> Result<Reweighter> {
    let meta: ReweighterMeta =
        serde_json::from_slice(&std::fs::read(dir.join("reweighter_meta.json"))?)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(dir.join("reweighter.bin"))?);
    let params = ParamStore::read_blob(&mut f)?;
    let optimizer = Adam::new(meta.config.lr, &params);
    Ok(Reweighter {
        config: meta.config,
        input_dim: meta.input_dim,
        params,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{select_for_batch, AttackSpec, VictimStrategy};
    use crate::stmodel::RegressorConfig;
    use crate::zidata::{generate_synthetic_zid, partition_from_labels, window};
    use ndarray::{Array3, IxDyn};
    use rand::Rng;

    fn small_config(dh: usize) -> MingreConfig {
        MingreConfig {
            encoder: EncoderConfig {
                model_dim: dh,
                num_heads: 2,
                head_dim: dh / 2,
                ffn_dim: dh * 2,
            },
            seed: 9,
            ..Default::default()
        }
    }

    fn setup() -> (StRegressor, SpatioTemporalGraph, Vec<SegmentBatch>, TaskLoss) {
        let ds = generate_synthetic_zid(6, 96, 2, 0.8, 71).unwrap();
        let cfg = RegressorConfig {
            history: 4,
            hidden_dim: 8,
            recurrent_dim: 8,
            num_gc_layers: 1,
            horizon: 2,
            seed: 2,
            ..Default::default()
        };
        let model = StRegressor::new(cfg).unwrap();
        let batches = window(&ds, 4, 2, 1, 4).unwrap();
        (model, ds.graph, batches, TaskLoss::default())
    }

    #[test]
    fn encoder_shape_contract() {
        let rw = Reweighter::new(2, small_config(16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array4::from_shape_fn((3, 4, 6, 2), |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let (o, _pv) = rw.encode_on_tape(&tape, &x).unwrap();
        assert_eq!(o.shape(), vec![3, 4, 6, 16]);
        assert!(o.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_is_deterministic() {
        let rw = Reweighter::new(2, small_config(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((2, 3, 4, 2), |_| rng.random_range(-1.0..1.0));
        let w1 = rw.attention_weights(&x).unwrap();
        let w2 = rw.attention_weights(&x).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let rw = Reweighter::new(3, small_config(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let x = ArrayD::from_shape_fn(IxDyn(&[5, 4, 8]), |_| rng.random_range(-2.0..2.0));
        let pv = rw.params.leaves(&tape);
        let xv = tape.var(x);
        let (_out, probs) = rw.multi_head_attention(&pv, "sg", xv).unwrap();
        let pvals = probs.value();
        let (g, s) = (pvals.shape()[0], pvals.shape()[1]);
        for gi in 0..g {
            for si in 0..s {
                let row_sum: f64 = (0..s).map(|a| pvals[[gi, si, a]]).sum();
                assert!((row_sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn singleton_attention_axis_degenerates_to_identity_softmax() {
        let rw = Reweighter::new(2, small_config(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // batch of one segment: the segment-attention axis has length 1
        let x = Array4::from_shape_fn((1, 3, 4, 2), |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let (o, _) = rw.encode_on_tape(&tape, &x).unwrap();
        assert_eq!(o.shape(), vec![1, 3, 4, 8]);
        assert!(o.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn block_is_equivariant_to_group_permutation() {
        // spatial block applied per group: permuting groups permutes outputs
        let rw = Reweighter::new(2, small_config(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 5, 8]), |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let pv = rw.params.leaves(&tape);
        let out = rw.abd_block(&pv, "sp", tape.var(x.clone())).unwrap().value();
        let perm = [2usize, 0, 3, 1];
        let mut xp = ArrayD::zeros(IxDyn(&[4, 5, 8]));
        for (new, &old) in perm.iter().enumerate() {
            xp.index_axis_mut(ndarray::Axis(0), new)
                .assign(&x.index_axis(ndarray::Axis(0), old));
        }
        let tape2 = Tape::new();
        let pv2 = rw.params.leaves(&tape2);
        let outp = rw.abd_block(&pv2, "sp", tape2.var(xp)).unwrap().value();
        for (new, &old) in perm.iter().enumerate() {
            let a = outp.index_axis(ndarray::Axis(0), new);
            let b = out.index_axis(ndarray::Axis(0), old);
            for (x1, x2) in a.iter().zip(b.iter()) {
                assert!((x1 - x2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_have_correct_shapes_and_ranges() {
        let rw = Reweighter::new(2, small_config(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array4::from_shape_fn((3, 4, 6, 2), |_| rng.random_range(-1.0..1.0));
        let w = rw.attention_weights(&x).unwrap();
        assert_eq!(w.att_sg.len(), 3);
        assert_eq!(w.att_te.len(), 4);
        assert_eq!(w.att_sp.len(), 6);
        w.check_learned_ranges().unwrap();
        for s in 0..3 {
            for n in 0..6 {
                let a1 = w.att1(s, n);
                assert!(a1 > 0.0 && a1 < 2.0);
            }
        }
    }

    #[test]
    fn constant_input_yields_equal_segment_weights() {
        let rw = Reweighter::new(2, small_config(8)).unwrap();
        let x = Array4::from_elem((4, 3, 5, 2), 0.37);
        let w = rw.attention_weights(&x).unwrap();
        for i in 1..4 {
            assert!((w.att_sg[i] - w.att_sg[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn reweight_matches_loop_oracle_and_scalings() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let grad = Array4::from_shape_fn((3, 4, 5, 2), |_| rng.random_range(-1.0..1.0));
        let weights = AttentionWeights {
            att_sg: Array1::from_shape_fn(3, |_| rng.random_range(0.1..0.9)),
            att_te: Array1::from_shape_fn(4, |_| rng.random_range(0.1..0.9)),
            att_sp: Array1::from_shape_fn(5, |_| rng.random_range(0.1..0.9)),
        };
        let ghat = reweight_gradients(&grad, &weights).unwrap();
        for ((b, t, n, d), &v) in ghat.indexed_iter() {
            let expected =
                (weights.att_sg[b] + weights.att_sp[n]) * grad[(b, t, n, d)] * weights.att_te[t];
            assert!((v - expected).abs() < 1e-9);
        }

        // injected identity-style weights: att1 = 2, te = 1 doubles the field
        let uniform = AttentionWeights::uniform(3, 4, 5);
        let doubled = reweight_gradients(&grad, &uniform).unwrap();
        for (a, b) in doubled.iter().zip(grad.iter()) {
            assert_eq!(*a, 2.0 * *b);
        }
        // te = 0.5 halves every entry on top of that
        let halved_te = AttentionWeights {
            att_te: Array1::from_elem(4, 0.5),
            ..uniform.clone()
        };
        let halved = reweight_gradients(&grad, &halved_te).unwrap();
        for (a, b) in halved.iter().zip(grad.iter()) {
            assert_eq!(*a, *b);
        }

        let bad = AttentionWeights::uniform(2, 4, 5);
        assert!(reweight_gradients(&grad, &bad).is_err());
    }

    #[test]
    fn uniform_weights_reduce_to_stpgd_saliency_bitwise() {
        let (model, graph, batches, loss) = setup();
        let budget = AttackBudget {
            epsilon: 0.4,
            step_alpha: 0.1,
            num_iters: 3,
            eta: 0.4,
            project_data_range: None,
        };
        for batch in batches.iter().take(4) {
            let (b, t, n, _) = batch.x.dim();
            let uniform = AttentionWeights::uniform(b, t, n);
            let ours = mingre_generate_with_weights(
                &model,
                &loss,
                batch,
                &graph,
                &budget,
                &uniform,
                MaskGranularity::PerBatch,
            )
            .unwrap();
            let spec = AttackSpec {
                strategy: VictimStrategy::Saliency,
                budget,
                seed: 0,
            };
            let mask = select_for_batch(&model, &loss, batch, &graph, &spec).unwrap();
            let baseline = attack::stpgd(&model, &loss, batch, &graph, &budget, &mask).unwrap();
            assert_eq!(ours.example.mask, baseline.mask);
            for (a, b) in ours.example.x_adv.iter().zip(baseline.x_adv.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn amplified_minority_weights_pull_minority_nodes_into_the_victim_set() {
        let (model, graph, batches, loss) = setup();
        let budget = AttackBudget {
            epsilon: 0.4,
            step_alpha: 0.1,
            num_iters: 2,
            eta: 0.34,
            project_data_range: None,
        };
        // find a batch whose saliency top-k misses some minority-bearing node
        for batch in &batches {
            let partition = class_partition(batch);
            let minority_nodes: Vec<usize> = partition
                .minority_nodes()
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| i)
                .collect();
            if minority_nodes.is_empty() || minority_nodes.len() == graph.num_nodes() {
                continue;
            }
            let (b, t, n, _) = batch.x.dim();
            let uniform = AttentionWeights::uniform(b, t, n);
            let base = mingre_generate_with_weights(
                &model, &loss, batch, &graph, &budget, &uniform, MaskGranularity::PerBatch,
            )
            .unwrap();
            // candidates: minority nodes outside the baseline victim set whose
            // rectified saliency is nonzero (a zero stays zero under scaling)
            let grad = model
                .input_gradient(&batch.x, &batch.y, &graph, |tape, vars, y| {
                    loss.build(tape, vars, y)
                })
                .unwrap();
            let saliency = attack::node_saliency(&grad).unwrap();
            let missing: Vec<usize> = minority_nodes
                .iter()
                .cloned()
                .filter(|&mn| !base.example.mask.contains(mn) && saliency[mn] > 0.0)
                .collect();
            if missing.is_empty() {
                continue;
            }
            // amplify those nodes' spatial weights far past the cut
            let amplification = 10.0 * {
                let top = saliency.iter().cloned().fold(0.0f64, f64::max);
                let low = missing.iter().map(|&mn| saliency[mn]).fold(f64::INFINITY, f64::min);
                (top / low).max(1.0)
            };
            let mut sp = Array1::<f64>::ones(n);
            for &mn in &missing {
                sp[mn] = amplification;
            }
            let amplified = AttentionWeights {
                att_sg: Array1::ones(b),
                att_te: Array1::ones(t),
                att_sp: sp,
            };
            let boosted = mingre_generate_with_weights(
                &model, &loss, batch, &graph, &budget, &amplified, MaskGranularity::PerBatch,
            )
            .unwrap();
            let gained = missing
                .iter()
                .filter(|&&mn| boosted.example.mask.contains(mn))
                .count();
            assert!(gained > 0, "amplified minority nodes never entered the top-k");
            boosted.example.check_budget().unwrap();
            return;
        }
        panic!("no suitable batch found for the constructed case");
    }

    #[test]
    fn gradient_gap_hand_values_and_loop_oracle() {
        // T = D = 1 so the per-pair magnitude is |value|
        let mut ghat = Array4::<f64>::zeros((1, 1, 2, 1));
        ghat[(0, 0, 0, 0)] = 0.2; // minority node
        ghat[(0, 0, 1, 0)] = 0.6; // majority node
        let mut y = Array3::<f64>::zeros((1, 1, 2));
        y[(0, 0, 0)] = 1.0;
        let partition = partition_from_labels(&y);
        let gap = gradient_gap(&ghat, &partition).unwrap();
        assert!((gap - 0.4).abs() < 1e-12);

        // identical fields across classes
        let ghat_same = Array4::from_elem((1, 1, 2, 1), 0.3);
        assert!(gradient_gap(&ghat_same, &partition).unwrap() < 1e-12);

        // loop oracle on random tensors
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = Array4::from_shape_fn((3, 2, 4, 2), |_| rng.random_range(-1.0..1.0));
        let mut yy = Array3::<f64>::zeros((3, 2, 4));
        yy[(0, 0, 1)] = 2.0;
        yy[(2, 1, 3)] = 1.0;
        let part = partition_from_labels(&yy);
        let ours = gradient_gap(&g, &part).unwrap();
        let mask = part.minority_mask();
        let (mut ms, mut mj, mut nc, mut jc) = (0.0, 0.0, 0, 0);
        for s in 0..3 {
            for node in 0..4 {
                let mut sq = 0.0;
                for ti in 0..2 {
                    for di in 0..2 {
                        sq += g[(s, ti, node, di)].powi(2);
                    }
                }
                if mask[(s, node)] {
                    ms += sq.sqrt();
                    nc += 1;
                } else {
                    mj += sq.sqrt();
                    jc += 1;
                }
            }
        }
        let expected = (ms / nc as f64 - mj / jc as f64).abs();
        assert!((ours - expected).abs() < 1e-9);

        // empty class
        let empty = partition_from_labels(&Array3::zeros((1, 1, 2)));
        assert!(gradient_gap(&ghat, &empty).is_err());
    }

    #[test]
    fn stage1_records_trace_and_leaves_psi_untouched() {
        let (model, graph, batches, loss) = setup();
        let rw = Reweighter::new(2, small_config(8)).unwrap();
        let before = rw.hash();
        let budget = AttackBudget {
            epsilon: 0.3,
            step_alpha: 0.1,
            num_iters: 4,
            eta: 0.5,
            project_data_range: None,
        };
        let ae = stage1_attack_step(&model, &rw, &loss, &batches[0], &graph, &budget).unwrap();
        assert_eq!(ae.example.loss_trace.len(), 5);
        assert_eq!(rw.hash(), before);
        ae.example.check_budget().unwrap();
    }

    fn batch_with_both_classes(batches: &[SegmentBatch]) -> &SegmentBatch {
        batches
            .iter()
            .find(|b| class_partition(b).has_both_classes())
            .expect("synthetic data should produce mixed batches")
    }

    #[test]
    fn stage2_updates_psi_freezes_theta_and_reports_consistent_breakdown() {
        let (model, graph, batches, loss) = setup();
        let batch = batch_with_both_classes(&batches);
        let mut rw = Reweighter::new(2, small_config(8)).unwrap();
        let theta_before = model.params.hash();
        let psi_before = rw.hash();
        let budget = AttackBudget {
            epsilon: 0.3,
            step_alpha: 0.1,
            num_iters: 2,
            eta: 0.5,
            project_data_range: None,
        };
        let ae = stage1_attack_step(&model, &rw, &loss, batch, &graph, &budget).unwrap();
        let breakdown =
            stage2_reweighter_update(&model, &mut rw, &loss, batch, &graph, &ae).unwrap();
        assert_eq!(model.params.hash(), theta_before);
        assert_ne!(rw.hash(), psi_before);
        assert!(
            (breakdown.task + breakdown.gap + breakdown.att_minority + breakdown.att_majority
                - breakdown.total)
                .abs()
                < 1e-9
        );
        assert!(!breakdown.class_terms_skipped);
        assert!((breakdown.task - ae.example.final_loss()).abs() < 1e-12);
    }

    #[test]
    fn stage2_with_all_lambdas_zero_leaves_psi_unchanged() {
        let (model, graph, batches, loss) = setup();
        let batch = batch_with_both_classes(&batches);
        let mut cfg = small_config(8);
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        cfg.lambda3 = 0.0;
        cfg.lambda4 = 0.0;
        let mut rw = Reweighter::new(2, cfg).unwrap();
        let before = rw.hash();
        let budget = AttackBudget::default();
        let ae = stage1_attack_step(&model, &rw, &loss, batch, &graph, &budget).unwrap();
        stage2_reweighter_update(&model, &mut rw, &loss, batch, &graph, &ae).unwrap();
        assert_eq!(rw.hash(), before);
    }

    #[test]
    fn stage2_task_term_alone_moves_psi() {
        let (model, graph, batches, loss) = setup();
        let batch = batch_with_both_classes(&batches);
        let mut cfg = small_config(8);
        cfg.lambda2 = 0.0;
        cfg.lambda3 = 0.0;
        cfg.lambda4 = 0.0;
        let mut rw = Reweighter::new(2, cfg).unwrap();
        let before = rw.hash();
        let budget = AttackBudget {
            epsilon: 0.5,
            step_alpha: 0.1,
            num_iters: 3,
            eta: 0.5,
            project_data_range: None,
        };
        let ae = stage1_attack_step(&model, &rw, &loss, batch, &graph, &budget).unwrap();
        let breakdown =
            stage2_reweighter_update(&model, &mut rw, &loss, batch, &graph, &ae).unwrap();
        assert_ne!(rw.hash(), before, "task term should drive an update");
        assert_eq!(breakdown.gap, 0.0);
        assert_eq!(breakdown.att_minority, 0.0);
        assert_eq!(breakdown.att_majority, 0.0);
    }

    #[test]
    fn stage2_skips_class_terms_without_both_classes() {
        let (model, graph, batches, loss) = setup();
        let all_zero = batches
            .iter()
            .find(|b| !class_partition(b).has_both_classes());
        let Some(batch) = all_zero else {
            return; // every batch mixed; covered elsewhere
        };
        let mut rw = Reweighter::new(2, small_config(8)).unwrap();
        let budget = AttackBudget::default();
        let ae = stage1_attack_step(&model, &rw, &loss, batch, &graph, &budget).unwrap();
        let breakdown =
            stage2_reweighter_update(&model, &mut rw, &loss, batch, &graph, &ae).unwrap();
        assert!(breakdown.class_terms_skipped);
        assert_eq!(breakdown.gap, 0.0);
    }

    #[test]
    fn repeated_stage2_steps_shrink_the_gradient_gap() {
        let (model, graph, batches, loss) = setup();
        let batch = batch_with_both_classes(&batches);
        let mut cfg = small_config(8);
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 1.0;
        cfg.lambda3 = 0.0;
        cfg.lambda4 = 0.0;
        cfg.lr = 5e-3;
        let mut rw = Reweighter::new(2, cfg).unwrap();
        let budget = AttackBudget {
            epsilon: 0.3,
            step_alpha: 0.1,
            num_iters: 1,
            eta: 0.5,
            project_data_range: None,
        };
        let grad_clean = model
            .input_gradient(&batch.x, &batch.y, &graph, |tape, vars, y| {
                loss.build(tape, vars, y)
            })
            .unwrap();
        let partition = class_partition(batch);
        let gap_of = |rw: &Reweighter| {
            let w = rw.attention_weights(&batch.x).unwrap();
            let ghat = reweight_gradients(&grad_clean, &w).unwrap();
            gradient_gap(&ghat, &partition).unwrap()
        };
        let initial = gap_of(&rw);
        for _ in 0..60 {
            let ae = stage1_attack_step(&model, &rw, &loss, batch, &graph, &budget).unwrap();
            stage2_reweighter_update(&model, &mut rw, &loss, batch, &graph, &ae).unwrap();
        }
        let trained = gap_of(&rw);
        assert!(
            trained < initial,
            "gap should shrink: {initial} -> {trained}"
        );
    }

    #[test]
    fn per_segment_masks_respect_the_per_segment_budget() {
        let (model, graph, batches, loss) = setup();
        let budget = AttackBudget {
            epsilon: 0.3,
            step_alpha: 0.1,
            num_iters: 2,
            eta: 0.34,
            project_data_range: None,
        };
        let batch = &batches[0];
        let (b, t, n, _) = batch.x.dim();
        let w = AttentionWeights::uniform(b, t, n);
        let out = mingre_generate_with_weights(
            &model,
            &loss,
            batch,
            &graph,
            &budget,
            &w,
            MaskGranularity::PerSegment,
        )
        .unwrap();
        let masks = out.per_segment_masks.as_ref().unwrap();
        assert_eq!(masks.len(), b);
        let k = budget.num_victims(n);
        for m in masks {
            assert!(m.num_selected() <= k);
        }
        // perturbation bounded and untouched coordinates intact per segment
        for ((bi, ti, ni, di), &v) in out.example.x_adv.indexed_iter() {
            let base = batch.x[(bi, ti, ni, di)];
            if masks[bi].contains(ni) {
                assert!((v - base).abs() <= budget.epsilon + 1e-7);
            } else {
                assert_eq!(v.to_bits(), base.to_bits());
            }
        }
    }

    #[test]
    fn reweighter_checkpoint_round_trips() {
        let rw = Reweighter::new(3, small_config(8)).unwrap();
        let dir = std::env::temp_dir().join(format!("zistorm-rw-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        save_reweighter(&rw, &dir).unwrap();
        let back = load_reweighter(&dir).unwrap();
        assert_eq!(rw, back);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn invalid_encoder_configs_are_rejected() {
        let mut cfg = small_config(8);
        cfg.encoder.head_dim = 3;
        assert!(Reweighter::new(2, cfg).is_err());
    }
}
