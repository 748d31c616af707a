//! STPGD adversarial example generation: node saliency, pluggable victim
//! selection (random / degree / pagerank / saliency), the l-inf sign-step
//! iteration with hard budget enforcement, and paired clean-vs-adversarial
//! evaluation.

use crate::error::{invalid, Error, Result};
use crate::losses::TaskLoss;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::stmodel::StRegressor;
use crate::zidata::{SegmentBatch, SpatioTemporalGraph};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// l-inf attack budget. `epsilon` is measured in the (normalized) feature
/// units of the batch it is applied to. `epsilon == 0` is accepted so the
/// degenerate no-attack collapse stays expressible; `step_alpha` may exceed
/// `epsilon` because the clip bounds every step regardless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub eta: f64,
    pub step_alpha: f64,
    pub num_iters: usize,
    /// Optional projection of X_adv onto a raw data range, off by default.
    pub project_data_range: Option<(f64, f64)>,
}

impl Default for AttackBudget {
    fn default() -> Self {
        AttackBudget {
            epsilon: 0.5,
            eta: 0.1,
            step_alpha: 0.125,
            num_iters: 10,
            project_data_range: None,
        }
    }
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            invalid!("epsilon must be finite and non-negative");
        }
        if !(self.step_alpha >= 0.0) || !self.step_alpha.is_finite() {
            invalid!("step_alpha must be finite and non-negative");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            invalid!("eta must lie in (0, 1], got {}", self.eta);
        }
        if self.num_iters == 0 {
            invalid!("num_iters must be at least 1");
        }
        if let Some((lo, hi)) = self.project_data_range {
            if !(lo < hi) {
                invalid!("data range must satisfy lo < hi");
            }
        }
        Ok(())
    }

    /// ceil(eta * N), at least 1, at most N.
    pub fn num_victims(&self, num_nodes: usize) -> usize {
        ((self.eta * num_nodes as f64).ceil() as usize).clamp(1, num_nodes)
    }
}

/// Victim-node indicator, broadcast over (B, T, node, D).
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMask {
    selected: Vec<usize>,
    num_nodes: usize,
}

impl PerturbationMask {
    pub fn new(mut selected: Vec<usize>, num_nodes: usize) -> Result<Self> {
        selected.sort_unstable();
        selected.dedup();
        if selected.iter().any(|&i| i >= num_nodes) {
            invalid!("mask selects a node outside 0..{num_nodes}");
        }
        Ok(PerturbationMask {
            selected,
            num_nodes,
        })
    }

    pub fn empty(num_nodes: usize) -> Self {
        PerturbationMask {
            selected: Vec::new(),
            num_nodes,
        }
    }

    pub fn full(num_nodes: usize) -> Self {
        PerturbationMask {
            selected: (0..num_nodes).collect(),
            num_nodes,
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn num_selected(&self) -> usize {
        self.selected.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn contains(&self, node: usize) -> bool {
        self.selected.binary_search(&node).is_ok()
    }

    /// Dense 0/1 node vector.
    pub fn node_indicator(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_nodes];
        for &i in &self.selected {
            v[i] = 1.0;
        }
        v
    }
}

/// Per-node saliency: batch-mean gradient, rectified, L2 over (T, D).
pub fn node_saliency(grads: &Array4<f64>) -> Result<Vec<f64>> {
    let (b, t, n, d) = grads.dim();
    if b == 0 {
        invalid!("node_saliency needs a non-empty batch");
    }
    let mut out = vec![0.0; n];
    for ni in 0..n {
        let mut sq = 0.0;
        for ti in 0..t {
            for di in 0..d {
                let mut mean = 0.0;
                for bi in 0..b {
                    mean += grads[(bi, ti, ni, di)];
                }
                mean /= b as f64;
                let rect = mean.max(0.0);
                sq += rect * rect;
            }
        }
        out[ni] = sq.sqrt();
    }
    Ok(out)
}

/// Indices of the k largest scores, ties broken toward the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Victim-node selection strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimStrategy {
    Random,
    Degree,
    Pagerank,
    Saliency,
}

/// Inputs a selection strategy may draw on.
pub struct SelectionContext<'a> {
    pub graph: &'a SpatioTemporalGraph,
    pub saliency: Option<&'a [f64]>,
    pub seed: u64,
}

/// Select exactly k distinct victim nodes.
pub fn select_victims(
    strategy: VictimStrategy,
    ctx: &SelectionContext<'_>,
    k: usize,
) -> Result<PerturbationMask> {
    let n = ctx.graph.num_nodes();
    if k == 0 || k > n {
        invalid!("cannot select {k} victims out of {n} nodes");
    }
    let selected = match strategy {
        VictimStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.random_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(k);
            pool
        }
        VictimStrategy::Degree => top_k_indices(&ctx.graph.weighted_degree(0), k),
        VictimStrategy::Pagerank => {
            let scores = pagerank(&ctx.graph.views()[0], 0.85, 1e-8);
            top_k_indices(&scores, k)
        }
        VictimStrategy::Saliency => {
            let s = ctx
                .saliency
                .ok_or_else(|| Error::InvalidArgument("saliency strategy needs saliency scores".into()))?;
            if s.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "saliency has {} entries for {n} nodes",
                    s.len()
                )));
            }
            top_k_indices(s, k)
        }
    };
    PerturbationMask::new(selected, n)
}

/// Power-iteration pagerank over a weighted adjacency; dangling mass is
/// spread uniformly.
pub fn pagerank(adj: &Array2<f64>, damping: f64, tol: f64) -> Vec<f64> {
    let n = adj.nrows();
    let deg: Vec<f64> = adj.rows().into_iter().map(|r| r.sum()).collect();
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..1000 {
        let mut next = vec![(1.0 - damping) / n as f64; n];
        let mut dangling = 0.0;
        for j in 0..n {
            if deg[j] > 0.0 {
                for i in 0..n {
                    if adj[(j, i)] > 0.0 {
                        next[i] += damping * p[j] * adj[(j, i)] / deg[j];
                    }
                }
            } else {
                dangling += p[j];
            }
        }
        if dangling > 0.0 {
            for item in next.iter_mut() {
                *item += damping * dangling / n as f64;
            }
        }
        let diff: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if diff < tol {
            break;
        }
    }
    p
}

/// An epsilon-bounded adversarial example with its provenance.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub x_base: Array4<f64>,
    pub x_adv: Array4<f64>,
    pub mask: PerturbationMask,
    pub budget: AttackBudget,
    /// Loss at the clean input followed by the loss after each iteration.
    pub loss_trace: Vec<f64>,
}

impl AdversarialExample {
    pub fn clean_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().unwrap()
    }

    /// Hard budget invariants; used by tests and the fuzzing gate.
    pub fn check_budget(&self) -> Result<()> {
        let (b, t, n, d) = self.x_base.dim();
        let k = self.budget.num_victims(n);
        if self.mask.num_selected() > k {
            invalid!("mask selects {} nodes, budget allows {k}", self.mask.num_selected());
        }
        for bi in 0..b {
            for ti in 0..t {
                for ni in 0..n {
                    for di in 0..d {
                        let base = self.x_base[(bi, ti, ni, di)];
                        let adv = self.x_adv[(bi, ti, ni, di)];
                        if self.mask.contains(ni) {
                            if (adv - base).abs() > self.budget.epsilon + 1e-7 {
                                invalid!(
                                    "perturbation {} exceeds epsilon {}",
                                    (adv - base).abs(),
                                    self.budget.epsilon
                                );
                            }
                        } else if adv.to_bits() != base.to_bits() {
                            invalid!("unmasked coordinate changed at ({bi},{ti},{ni},{di})");
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Run the sign-step iteration against a caller-supplied gradient source.
///
/// `grad_fn` maps the current iterate to (loss, dLoss/dX); the returned
/// example satisfies the budget invariants by construction: unselected
/// coordinates are copied bit-for-bit and selected ones are clipped to the
/// epsilon ball around the base input.
pub fn stpgd_with<F>(
    x: &Array4<f64>,
    budget: &AttackBudget,
    mask: &PerturbationMask,
    mut grad_fn: F,
) -> Result<AdversarialExample>
where
    F: FnMut(&Array4<f64>) -> Result<(f64, Array4<f64>)>,
{
    budget.validate()?;
    let (b, t, n, d) = x.dim();
    if mask.num_nodes() != n {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} nodes, X has {n}",
            mask.num_nodes()
        )));
    }
    if mask.num_selected() > budget.num_victims(n) {
        invalid!(
            "mask selects {} nodes, budget allows {}",
            mask.num_selected(),
            budget.num_victims(n)
        );
    }
    let node_mask = mask.node_indicator();
    let eps = budget.epsilon;
    let mut delta = Array4::<f64>::zeros((b, t, n, d));
    let mut trace = Vec::with_capacity(budget.num_iters + 1);
    let mut x_cur = x.clone();

    for iter in 0..budget.num_iters {
        let (loss, grad) = grad_fn(&x_cur)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged("non-finite gradient during attack".into()));
        }
        trace.push(loss);
        for bi in 0..b {
            for ti in 0..t {
                for ni in 0..n {
                    if node_mask[ni] == 0.0 {
                        continue;
                    }
                    for di in 0..d {
                        let g = grad[(bi, ti, ni, di)];
                        let step = budget.step_alpha * sign(g);
                        let mut nd = (delta[(bi, ti, ni, di)] + step).clamp(-eps, eps);
                        if let Some((lo, hi)) = budget.project_data_range {
                            let base = x[(bi, ti, ni, di)];
                            nd = (base + nd).clamp(lo, hi) - base;
                        }
                        delta[(bi, ti, ni, di)] = nd;
                    }
                }
            }
        }
        // rebuild the iterate; untouched coordinates stay bit-identical
        x_cur = x.clone();
        for bi in 0..b {
            for ti in 0..t {
                for ni in 0..n {
                    if node_mask[ni] == 0.0 {
                        continue;
                    }
                    for di in 0..d {
                        let dv = delta[(bi, ti, ni, di)];
                        if dv != 0.0 {
                            x_cur[(bi, ti, ni, di)] = x[(bi, ti, ni, di)] + dv;
                        }
                    }
                }
            }
        }
        let _ = iter;
    }
    let (final_loss, _) = grad_fn(&x_cur)?;
    trace.push(final_loss);

    Ok(AdversarialExample {
        x_base: x.clone(),
        x_adv: x_cur,
        mask: mask.clone(),
        budget: *budget,
        loss_trace: trace,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// STPGD against a frozen model with the configured task loss.
pub fn stpgd(
    model: &StRegressor,
    loss: &TaskLoss,
    batch: &SegmentBatch,
    graph: &SpatioTemporalGraph,
    budget: &AttackBudget,
    mask: &PerturbationMask,
) -> Result<AdversarialExample> {
    stpgd_with(&batch.x, budget, mask, |xq| {
        model.loss_and_input_gradient(xq, &batch.y, graph, |tape, vars, y| loss.build(tape, vars, y))
    })
}

/// Full attack spec as carried by experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub strategy: VictimStrategy,
    pub budget: AttackBudget,
    pub seed: u64,
}

/// Build the victim mask for one batch under a strategy (clean-gradient
/// saliency for the saliency strategy, per the batch-level selection rule).
pub fn select_for_batch(
    model: &StRegressor,
    loss: &TaskLoss,
    batch: &SegmentBatch,
    graph: &SpatioTemporalGraph,
    spec: &AttackSpec,
) -> Result<PerturbationMask> {
    let k = spec.budget.num_victims(graph.num_nodes());
    let saliency = if spec.strategy == VictimStrategy::Saliency {
        let grad = model.input_gradient(&batch.x, &batch.y, graph, |tape, vars, y| {
            loss.build(tape, vars, y)
        })?;
        Some(node_saliency(&grad)?)
    } else {
        None
    };
    let ctx = SelectionContext {
        graph,
        saliency: saliency.as_deref(),
        seed: spec.seed,
    };
    select_victims(spec.strategy, &ctx, k)
}

/// One batch row of a paired evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub batch_index: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub num_victims: usize,
}

/// Paired clean / adversarial metrics over a batch stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub clean: MetricReport,
    pub adv: MetricReport,
}

/// Evaluate a frozen model on clean batches and under one attack spec.
pub fn clean_vs_adv_eval(
    model: &StRegressor,
    loss: &TaskLoss,
    batches: &[SegmentBatch],
    graph: &SpatioTemporalGraph,
    spec: &AttackSpec,
) -> Result<EvalTable> {
    spec.budget.validate()?;
    let kind = loss.prediction_kind();
    let mut clean_acc = MetricAccumulator::new();
    let mut adv_acc = MetricAccumulator::new();
    let mut rows = Vec::with_capacity(batches.len());
    for (bi, batch) in batches.iter().enumerate() {
        let mask = select_for_batch(model, loss, batch, graph, spec)?;
        let ae = stpgd(model, loss, batch, graph, &spec.budget, &mask)?;
        let clean_pred = model.predict(&batch.x, graph, kind)?;
        let adv_pred = model.predict(&ae.x_adv, graph, kind)?;
        clean_acc.push_batch(&clean_pred, &batch.y)?;
        adv_acc.push_batch(&adv_pred, &batch.y)?;
        rows.push(EvalRow {
            batch_index: bi,
            clean_loss: ae.clean_loss(),
            adv_loss: ae.final_loss(),
            num_victims: mask.num_selected(),
        });
    }
    Ok(EvalTable {
        rows,
        clean: clean_acc.report(),
        adv: adv_acc.report(),
    })
}
