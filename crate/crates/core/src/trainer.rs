//! Training loops: natural training, baseline spatiotemporal adversarial
//! training (per-batch AE generation followed by a descent step on the AE),
//! and the full two-stage MinGRE loop. History is append-only and JSONL
//! serializable; stage separation is hash-checked every step.

use crate::attack::{select_for_batch, stpgd, AttackBudget, AttackSpec, VictimStrategy};
use crate::autodiff::Tape;
use crate::error::{invalid, Error, Result};
use crate::losses::{adv_loss_var, TaskLoss};
use crate::metrics::MetricAccumulator;
use crate::mingre::{
    mingre_generate_with_weights, stage2_reweighter_update, AttentionWeights, MingreConfig,
    MingreExample, Reweighter,
};
use crate::params::Adam;
use crate::stmodel::StRegressor;
use crate::zidata::{
    class_partition, window, ClassPartition, Normalizer, SegmentBatch, SeriesDataset,
    SpatioTemporalGraph, TimeSplit,
};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Natural,
    AtRandom,
    AtDegree,
    AtPagerank,
    AtTnds,
    Mingre,
}

impl TrainMode {
    pub fn victim_strategy(&self) -> Option<VictimStrategy> {
        match self {
            TrainMode::Natural => None,
            TrainMode::AtRandom => Some(VictimStrategy::Random),
            TrainMode::AtDegree => Some(VictimStrategy::Degree),
            TrainMode::AtPagerank => Some(VictimStrategy::Pagerank),
            TrainMode::AtTnds | TrainMode::Mingre => Some(VictimStrategy::Saliency),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub mode: TrainMode,
    pub loss: TaskLoss,
    pub attack: AttackBudget,
    pub mingre: MingreConfig,
    /// Ablation switch: bypass the learned reweighter with all-ones weights.
    pub uniform_attention: bool,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            mode: TrainMode::Natural,
            loss: TaskLoss::default(),
            attack: AttackBudget::default(),
            mingre: MingreConfig::default(),
            uniform_attention: false,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            invalid!("epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            invalid!("learning rate must be positive");
        }
        if self.mode == TrainMode::Mingre && !matches!(self.loss, TaskLoss::Adv(_)) {
            invalid!("mingre mode requires the adversarial loss");
        }
        if self.mode != TrainMode::Natural {
            self.attack.validate()?;
        }
        if self.mode == TrainMode::Mingre {
            self.mingre.validate()?;
        }
        Ok(())
    }
}

/// Prepared batches: chronological split, train-fit normalizer applied.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<SegmentBatch>,
    pub val: Vec<SegmentBatch>,
    pub test: Vec<SegmentBatch>,
    pub graph: SpatioTemporalGraph,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            history: 8,
            horizon: 2,
            stride: 2,
            batch_size: 8,
            train_frac: 0.6,
            val_frac: 0.2,
        }
    }
}

impl TrainData {
    pub fn prepare(ds: &SeriesDataset, spec: &WindowSpec) -> Result<TrainData> {
        let split = TimeSplit::new(ds.len(), spec.train_frac, spec.val_frac)?;
        let train_ds = ds.slice_time(0, split.train_end)?;
        let val_ds = ds.slice_time(split.train_end, split.val_end)?;
        let test_ds = ds.slice_time(split.val_end, ds.len())?;
        let normalizer = Normalizer::fit(&train_ds);
        let mk = |d: &SeriesDataset| -> Result<Vec<SegmentBatch>> {
            let mut b = window(d, spec.history, spec.horizon, spec.stride, spec.batch_size)?;
            for batch in &mut b {
                normalizer.apply(batch);
            }
            Ok(b)
        };
        Ok(TrainData {
            train: mk(&train_ds)?,
            val: mk(&val_ds)?,
            test: mk(&test_ds)?,
            graph: ds.graph.clone(),
            normalizer,
        })
    }
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryRecord {
    Meta {
        mode: TrainMode,
        mask_strategy: Option<VictimStrategy>,
        seed: u64,
    },
    Step {
        epoch: usize,
        step: usize,
        components: BTreeMap<String, f64>,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        val_rec_min: f64,
        scl_skipped: usize,
    },
}

/// Append-only training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn push(&mut self, r: HistoryRecord) {
        self.records.push(r);
    }

    pub fn steps(&self) -> impl Iterator<Item = (&usize, &usize, &BTreeMap<String, f64>)> {
        self.records.iter().filter_map(|r| match r {
            HistoryRecord::Step {
                epoch,
                step,
                components,
            } => Some((epoch, step, components)),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &HistoryRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, HistoryRecord::Epoch { .. }))
    }

    pub fn num_epochs(&self) -> usize {
        self.epochs().count()
    }

    /// Mean of one step component within an epoch, in record order.
    pub fn epoch_component_mean(&self, epoch: usize, key: &str) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (e, _s, comps) in self.steps() {
            if *e == epoch {
                if let Some(v) = comps.get(key) {
                    sum += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some(sum / n as f64)
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<History> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(History { records })
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutput {
    pub model: StRegressor,
    pub reweighter: Option<Reweighter>,
    pub history: History,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// One descent step on theta; returns the loss value at the pre-update
/// parameters.
fn theta_step(
    model: &mut StRegressor,
    opt: &mut Adam,
    loss: &TaskLoss,
    x: &Array4<f64>,
    y: &Array3<f64>,
    graph: &SpatioTemporalGraph,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.build_graph(&tape, x.clone().into_dyn(), graph, dropout_rng)?;
    let l = loss.build(&tape, &vars, y)?;
    let value = l.item();
    if !value.is_finite() {
        return Err(Error::Diverged(format!(
            "loss became non-finite ({value}); reduce the learning rate"
        )));
    }
    let grads = tape.backward(l);
    let list: Vec<_> = vars.params.all().iter().map(|v| grads.wrt(*v)).collect();
    opt.step(&mut model.params, &list);
    Ok(value)
}

fn val_scores(
    model: &StRegressor,
    loss: &TaskLoss,
    data: &TrainData,
) -> Result<(f64, f64)> {
    let mut acc = MetricAccumulator::new();
    let mut loss_sum = 0.0;
    let kind = loss.prediction_kind();
    for batch in &data.val {
        loss_sum += loss.eval(model, &batch.x, &batch.y, &data.graph)?;
        let pred = model.predict(&batch.x, &data.graph, kind)?;
        acc.push_batch(&pred, &batch.y)?;
    }
    let report = acc.report();
    let val_loss = loss_sum / data.val.len().max(1) as f64;
    // fall back to negative loss when the split has no minority instants
    let score = if report.instants_min > 0 {
        report.rec_min
    } else {
        -val_loss
    };
    Ok((val_loss, score))
}

fn shuffled_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn attack_seed(base: u64, epoch: usize, step: usize) -> u64 {
    base.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((epoch as u64) << 20)
        .wrapping_add(step as u64)
}

struct LoopState {
    opt: Adam,
    rng: ChaCha8Rng,
    history: History,
    best_score: f64,
    best_epoch: usize,
    best_params: crate::params::ParamStore,
    since_best: usize,
}

impl LoopState {
    fn new(model: &StRegressor, cfg: &TrainConfig) -> Self {
        LoopState {
            opt: Adam::new(cfg.learning_rate, &model.params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: History::default(),
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            best_params: model.params.clone(),
            since_best: 0,
        }
    }

    /// Returns true when patience is exhausted.
    fn end_epoch(&mut self, model: &StRegressor, epoch: usize, score: f64, patience: usize) -> bool {
        if score > self.best_score {
            self.best_score = score;
            self.best_epoch = epoch;
            self.best_params = model.params.clone();
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best > patience
    }
}

/// Standard epochs over clean batches.
pub fn natural_train(model: StRegressor, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Natural {
        invalid!("natural_train requires mode = natural");
    }
    let mut model = model;
    let mut st = LoopState::new(&model, cfg);
    st.history.push(HistoryRecord::Meta {
        mode: cfg.mode,
        mask_strategy: None,
        seed: cfg.seed,
    });
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(data.train.len(), &mut st.rng);
        for (step, &bi) in order.iter().enumerate() {
            let batch = &data.train[bi];
            let value = theta_step(
                &mut model,
                &mut st.opt,
                &cfg.loss,
                &batch.x,
                &batch.y,
                &data.graph,
                None,
            )?;
            let mut components = BTreeMap::new();
            components.insert("loss".to_string(), value);
            st.history.push(HistoryRecord::Step {
                epoch,
                step,
                components,
            });
        }
        let train_loss = st.history.epoch_component_mean(epoch, "loss").unwrap_or(0.0);
        let (val_loss, score) = val_scores(&model, &cfg.loss, data)?;
        st.history.push(HistoryRecord::Epoch {
            epoch,
            train_loss,
            val_loss,
            val_rec_min: score.max(0.0),
            scl_skipped: 0,
        });
        if st.end_epoch(&model, epoch, score, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    model.params = st.best_params.clone();
    Ok(TrainOutput {
        model,
        reweighter: None,
        history: st.history,
        best_epoch: st.best_epoch,
        stopped_early,
    })
}

/// Min-max adversarial training: per batch, generate an AE under the
/// configured victim strategy, then take one descent step on it.
pub fn adversarial_train(
    model: StRegressor,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let strategy = match cfg.mode.victim_strategy() {
        Some(s) if cfg.mode != TrainMode::Mingre => s,
        _ => invalid!("adversarial_train requires an at_* mode"),
    };
    let mut model = model;
    let mut st = LoopState::new(&model, cfg);
    st.history.push(HistoryRecord::Meta {
        mode: cfg.mode,
        mask_strategy: Some(strategy),
        seed: cfg.seed,
    });
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(data.train.len(), &mut st.rng);
        for (step, &bi) in order.iter().enumerate() {
            let batch = &data.train[bi];
            let spec = AttackSpec {
                strategy,
                budget: cfg.attack,
                seed: attack_seed(cfg.seed, epoch, step),
            };
            let mask = select_for_batch(&model, &cfg.loss, batch, &data.graph, &spec)?;
            let ae = stpgd(&model, &cfg.loss, batch, &data.graph, &cfg.attack, &mask)?;
            let grad_clean = model.input_gradient(&batch.x, &batch.y, &data.graph, |t, v, y| {
                cfg.loss.build(t, v, y)
            })?;
            let (top_min, top_maj) = topk_class_magnitudes(
                &grad_clean,
                &class_partition(batch),
                cfg.attack.num_victims(data.graph.num_nodes()),
            );
            let value = theta_step(
                &mut model,
                &mut st.opt,
                &cfg.loss,
                &ae.x_adv,
                &batch.y,
                &data.graph,
                None,
            )?;
            let mut components = BTreeMap::new();
            components.insert("loss".to_string(), value);
            components.insert("clean_loss".to_string(), ae.clean_loss());
            components.insert("adv_loss".to_string(), ae.final_loss());
            if let Some(v) = top_min {
                components.insert("grad_topk_minority".to_string(), v);
            }
            if let Some(v) = top_maj {
                components.insert("grad_topk_majority".to_string(), v);
            }
            st.history.push(HistoryRecord::Step {
                epoch,
                step,
                components,
            });
        }
        let train_loss = st.history.epoch_component_mean(epoch, "loss").unwrap_or(0.0);
        let (val_loss, score) = val_scores(&model, &cfg.loss, data)?;
        st.history.push(HistoryRecord::Epoch {
            epoch,
            train_loss,
            val_loss,
            val_rec_min: score.max(0.0),
            scl_skipped: 0,
        });
        if st.end_epoch(&model, epoch, score, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    model.params = st.best_params.clone();
    Ok(TrainOutput {
        model,
        reweighter: None,
        history: st.history,
        best_epoch: st.best_epoch,
        stopped_early,
    })
}

fn minority_victim_fraction(ex: &MingreExample, partition: &ClassPartition) -> f64 {
    let minority_nodes = partition.minority_nodes();
    let selected = ex.example.mask.selected();
    if selected.is_empty() {
        return 0.0;
    }
    let hits = selected.iter().filter(|&&n| minority_nodes[n]).count();
    hits as f64 / selected.len() as f64
}

/// Mean of the k largest per-(segment, node) gradient magnitudes within each
/// class; feeds the per-class gradient histograms in reports.
fn topk_class_magnitudes(
    grad: &Array4<f64>,
    partition: &ClassPartition,
    k: usize,
) -> (Option<f64>, Option<f64>) {
    let (b, t, n, d) = grad.dim();
    let mask = partition.minority_mask();
    let mut minority = Vec::new();
    let mut majority = Vec::new();
    for s in 0..b {
        for j in 0..n {
            let mut sq = 0.0;
            for ti in 0..t {
                for di in 0..d {
                    sq += grad[(s, ti, j, di)].powi(2);
                }
            }
            if mask[(s, j)] {
                minority.push(sq.sqrt());
            } else {
                majority.push(sq.sqrt());
            }
        }
    }
    let top_mean = |mut v: Vec<f64>| -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let kk = k.min(v.len()).max(1);
        Some(v[..kk].iter().sum::<f64>() / kk as f64)
    };
    (top_mean(minority), top_mean(majority))
}

/// Full MinGRE loop: stage-1 generation (psi frozen), theta step on the
/// combined adversarial loss over the AE, stage-2 reweighter step (theta
/// frozen). Stage separation is verified by parameter hashes every step.
pub fn mingre_train(
    model: StRegressor,
    reweighter: Reweighter,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Mingre {
        invalid!("mingre_train requires mode = mingre");
    }
    let adv_cfg = match &cfg.loss {
        TaskLoss::Adv(c) => *c,
        _ => invalid!("mingre_train requires the adversarial loss"),
    };
    let mut model = model;
    let mut reweighter = reweighter;
    let mut st = LoopState::new(&model, cfg);
    st.history.push(HistoryRecord::Meta {
        mode: cfg.mode,
        mask_strategy: Some(VictimStrategy::Saliency),
        seed: cfg.seed,
    });
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(data.train.len(), &mut st.rng);
        let mut scl_skipped = 0usize;
        for (step, &bi) in order.iter().enumerate() {
            let batch = &data.train[bi];
            let partition = class_partition(batch);

            // stage 1: AE generation with psi frozen
            let psi_hash = reweighter.hash();
            let (b, t, n, _) = batch.x.dim();
            let weights = if cfg.uniform_attention {
                AttentionWeights::uniform(b, t, n)
            } else {
                reweighter.attention_weights(&batch.x)?
            };
            let ae = mingre_generate_with_weights(
                &model,
                &cfg.loss,
                batch,
                &data.graph,
                &cfg.attack,
                &weights,
                reweighter.config.mask_granularity,
            )?;
            if reweighter.hash() != psi_hash {
                return Err(Error::InvalidArgument(
                    "stage-1 generation mutated the reweighter".into(),
                ));
            }
            let grad_clean = model.input_gradient(&batch.x, &batch.y, &data.graph, |t, v, y| {
                cfg.loss.build(t, v, y)
            })?;
            let ghat = crate::mingre::reweight_gradients(&grad_clean, &weights)?;
            let (top_min, top_maj) = topk_class_magnitudes(
                &ghat,
                &partition,
                cfg.attack.num_victims(data.graph.num_nodes()),
            );

            // theta step on the AE under the combined loss
            let tape = Tape::new();
            let vars = model.build_graph(&tape, ae.example.x_adv.clone().into_dyn(), &data.graph, None)?;
            let parts = adv_loss_var(&vars, &batch.y, &adv_cfg)?;
            let value = parts.total.item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss became non-finite ({value})")));
            }
            let mut components = BTreeMap::new();
            components.insert("loss".to_string(), value);
            components.insert("clean_loss".to_string(), ae.example.clean_loss());
            components.insert("adv_loss".to_string(), ae.example.final_loss());
            components.insert("nb".to_string(), parts.nb.item());
            if let (Some(scl), Some(u)) = (&parts.scl, &parts.u_mean) {
                components.insert("scl".to_string(), scl.item());
                components.insert("u_mean".to_string(), u.item());
            }
            if parts.scl_skipped {
                scl_skipped += 1;
            }
            let grads = tape.backward(parts.total);
            let list: Vec<_> = vars.params.all().iter().map(|v| grads.wrt(*v)).collect();
            let psi_hash = reweighter.hash();
            st.opt.step(&mut model.params, &list);
            if reweighter.hash() != psi_hash {
                return Err(Error::InvalidArgument(
                    "theta step mutated the reweighter".into(),
                ));
            }

            // stage 2: reweighter step with theta frozen
            let theta_hash = model.params.hash();
            let breakdown =
                stage2_reweighter_update(&model, &mut reweighter, &cfg.loss, batch, &data.graph, &ae)?;
            if model.params.hash() != theta_hash {
                return Err(Error::InvalidArgument(
                    "stage-2 update mutated the target model".into(),
                ));
            }
            components.insert("stage2_task".to_string(), breakdown.task);
            components.insert("stage2_gap".to_string(), breakdown.gap);
            components.insert("stage2_att_min".to_string(), breakdown.att_minority);
            components.insert("stage2_att_maj".to_string(), breakdown.att_majority);
            if !breakdown.class_terms_skipped {
                components.insert("gradient_gap".to_string(), breakdown.gap_raw);
            }
            components.insert(
                "minority_victim_fraction".to_string(),
                minority_victim_fraction(&ae, &partition),
            );
            if let Some(v) = top_min {
                components.insert("grad_topk_minority".to_string(), v);
            }
            if let Some(v) = top_maj {
                components.insert("grad_topk_majority".to_string(), v);
            }
            st.history.push(HistoryRecord::Step {
                epoch,
                step,
                components,
            });
        }
        let train_loss = st.history.epoch_component_mean(epoch, "loss").unwrap_or(0.0);
        let (val_loss, score) = val_scores(&model, &cfg.loss, data)?;
        st.history.push(HistoryRecord::Epoch {
            epoch,
            train_loss,
            val_loss,
            val_rec_min: score.max(0.0),
            scl_skipped,
        });
        if st.end_epoch(&model, epoch, score, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    model.params = st.best_params.clone();
    Ok(TrainOutput {
        model,
        reweighter: Some(reweighter),
        history: st.history,
        best_epoch: st.best_epoch,
        stopped_early,
    })
}

/// Dispatch on the configured mode.
pub fn train(
    model: StRegressor,
    reweighter: Option<Reweighter>,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    match cfg.mode {
        TrainMode::Natural => natural_train(model, data, cfg),
        TrainMode::Mingre => {
            let rw = match reweighter {
                Some(rw) => rw,
                None => Reweighter::new(model.config.input_dim, cfg.mingre)?,
            };
            mingre_train(model, rw, data, cfg)
        }
        _ => adversarial_train(model, data, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{AdvLossConfig, NbParameterization, WeightRule};
    use crate::stmodel::RegressorConfig;
    use crate::zidata::generate_synthetic_zid;

    fn tiny_window() -> WindowSpec {
        WindowSpec {
            history: 4,
            horizon: 2,
            stride: 2,
            batch_size: 4,
            train_frac: 0.6,
            val_frac: 0.2,
        }
    }

    fn tiny_model(seed: u64) -> StRegressor {
        StRegressor::new(RegressorConfig {
            history: 4,
            hidden_dim: 8,
            recurrent_dim: 8,
            num_gc_layers: 1,
            horizon: 2,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_data() -> TrainData {
        let ds = generate_synthetic_zid(6, 128, 2, 0.8, 99).unwrap();
        TrainData::prepare(&ds, &tiny_window()).unwrap()
    }

    #[test]
    fn natural_training_runs_and_logs_epochs() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 1,
            ..Default::default()
        };
        let out = natural_train(tiny_model(1), &data, &cfg).unwrap();
        assert_eq!(out.history.num_epochs(), 2);
        assert!(out.history.records.iter().any(|r| matches!(r, HistoryRecord::Meta { .. })));
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 7,
            ..Default::default()
        };
        let a = natural_train(tiny_model(3), &data, &cfg).unwrap();
        let b = natural_train(tiny_model(3), &data, &cfg).unwrap();
        assert_eq!(a.model.params.hash(), b.model.params.hash());
    }

    #[test]
    fn zero_epsilon_adversarial_training_collapses_to_natural() {
        let data = tiny_data();
        let nat_cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..Default::default()
        };
        let adv_cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            mode: TrainMode::AtTnds,
            attack: AttackBudget {
                epsilon: 0.0,
                step_alpha: 0.0,
                num_iters: 2,
                eta: 0.5,
                project_data_range: None,
            },
            ..Default::default()
        };
        let nat = natural_train(tiny_model(4), &data, &nat_cfg).unwrap();
        let adv = adversarial_train(tiny_model(4), &data, &adv_cfg).unwrap();
        assert_eq!(nat.model.params.hash(), adv.model.params.hash());
    }

    #[test]
    fn adversarial_training_records_mask_strategy_and_both_losses() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            seed: 2,
            mode: TrainMode::AtRandom,
            attack: AttackBudget {
                epsilon: 0.3,
                step_alpha: 0.1,
                num_iters: 2,
                eta: 0.4,
                project_data_range: None,
            },
            ..Default::default()
        };
        let out = adversarial_train(tiny_model(2), &data, &cfg).unwrap();
        let meta_ok = out.history.records.iter().any(|r| {
            matches!(
                r,
                HistoryRecord::Meta {
                    mask_strategy: Some(VictimStrategy::Random),
                    ..
                }
            )
        });
        assert!(meta_ok);
        for (_e, _s, comps) in out.history.steps() {
            assert!(comps.contains_key("clean_loss"));
            assert!(comps.contains_key("adv_loss"));
        }
    }

    fn mingre_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            seed,
            mode: TrainMode::Mingre,
            loss: TaskLoss::Adv(AdvLossConfig::default()),
            attack: AttackBudget {
                epsilon: 0.3,
                step_alpha: 0.1,
                num_iters: 2,
                eta: 0.4,
                project_data_range: None,
            },
            mingre: MingreConfig {
                encoder: crate::mingre::EncoderConfig {
                    model_dim: 8,
                    num_heads: 2,
                    head_dim: 4,
                    ffn_dim: 16,
                },
                seed,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn mingre_train_runs_with_stage_separation_and_rich_history() {
        let data = tiny_data();
        let cfg = mingre_cfg(11);
        let rw = Reweighter::new(2, cfg.mingre).unwrap();
        let out = mingre_train(tiny_model(11), rw, &data, &cfg).unwrap();
        assert!(out.reweighter.is_some());
        let mut saw_gap = false;
        for (_e, _s, comps) in out.history.steps() {
            assert!(comps.contains_key("minority_victim_fraction"));
            assert!(comps.contains_key("stage2_task"));
            saw_gap |= comps.contains_key("gradient_gap");
        }
        assert!(saw_gap, "no batch produced a gradient gap record");
    }

    #[test]
    fn mingre_config_validation_rejects_wrmse() {
        let mut cfg = mingre_cfg(1);
        cfg.loss = TaskLoss::Wrmse {
            rule: WeightRule::OnePlusLabel,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn degenerate_mingre_matches_nb_adversarial_training() {
        let data = tiny_data();
        // lambda = 0, beta2 = 0, uniform attention: the theta trajectory
        // must match at_tnds with the plain NB loss bit for bit
        let mut cfg = mingre_cfg(13);
        cfg.uniform_attention = true;
        cfg.loss = TaskLoss::Adv(AdvLossConfig {
            beta1: 1.0,
            beta2: 0.0,
            ..Default::default()
        });
        cfg.mingre.lambda1 = 0.0;
        cfg.mingre.lambda2 = 0.0;
        cfg.mingre.lambda3 = 0.0;
        cfg.mingre.lambda4 = 0.0;
        let rw = Reweighter::new(2, cfg.mingre).unwrap();
        let rw_hash = rw.hash();
        let ours = mingre_train(tiny_model(13), rw, &data, &cfg).unwrap();

        let base_cfg = TrainConfig {
            epochs: 1,
            seed: 13,
            mode: TrainMode::AtTnds,
            loss: TaskLoss::Nb {
                parameterization: NbParameterization::Nb2,
            },
            attack: cfg.attack,
            ..Default::default()
        };
        let base = adversarial_train(tiny_model(13), &data, &base_cfg).unwrap();
        assert_eq!(ours.model.params.hash(), base.model.params.hash());
        // zero lambdas: the reweighter never moves
        assert_eq!(ours.reweighter.unwrap().hash(), rw_hash);
    }

    #[test]
    fn history_round_trips_and_replays_exactly() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 21,
            ..Default::default()
        };
        let out = natural_train(tiny_model(21), &data, &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("zistorm-hist-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("history.jsonl");
        out.history.write_jsonl(&path).unwrap();
        let back = History::read_jsonl(&path).unwrap();
        assert_eq!(out.history, back);
        // replay: per-epoch train loss equals the recomputed step mean exactly
        for r in back.epochs() {
            if let HistoryRecord::Epoch {
                epoch, train_loss, ..
            } = r
            {
                assert_eq!(back.epoch_component_mean(*epoch, "loss").unwrap(), *train_loss);
            }
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn divergence_is_reported_with_a_diagnostic() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e6,
            seed: 8,
            ..Default::default()
        };
        match natural_train(tiny_model(8), &data, &cfg) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("non-finite")),
            Ok(_) => { /* tiny model may survive; nothing to assert */ }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
