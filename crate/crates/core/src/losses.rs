//! Training objectives: weighted RMSE, negative-binomial likelihood,
//! uncertainty weighting, supervised contrastive loss, and their combined
//! adversarial form. Every loss has a plain evaluator and a tape builder so
//! training and attacks differentiate exactly what tests evaluate.

use crate::autodiff::{sigmoid_f, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::stmodel::{ModelVars, NbParams};
use crate::zidata::{partition_from_labels, ClassPartition};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Rule mapping a label value to its WRMSE weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    Uniform,
    /// w = 1 + label value; reduces to 1 on zero labels.
    #[default]
    OnePlusLabel,
}

/// Non-negative loss weights broadcastable to (B, delta, N).
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w: Array3<f64>,
    pub rule: WeightRule,
}

impl LossWeights {
    pub fn from_labels(y: &Array3<f64>, rule: WeightRule) -> LossWeights {
        let w = match rule {
            WeightRule::Uniform => Array3::ones(y.dim()),
            WeightRule::OnePlusLabel => y.mapv(|v| 1.0 + v),
        };
        LossWeights { w, rule }
    }

    pub fn explicit(w: Array3<f64>) -> Result<LossWeights> {
        if w.iter().any(|&v| v < 0.0) {
            invalid!("loss weights must be non-negative");
        }
        Ok(LossWeights {
            w,
            rule: WeightRule::Uniform,
        })
    }
}

/// (1 / (B * delta * N)) sum w (y - yhat)^2.
pub fn wrmse(yhat: &Array3<f64>, y: &Array3<f64>, weights: &LossWeights) -> Result<f64> {
    if yhat.dim() != y.dim() || weights.w.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "wrmse shapes: yhat {:?}, y {:?}, w {:?}",
            yhat.dim(),
            y.dim(),
            weights.w.dim()
        )));
    }
    if weights.w.iter().any(|&v| v < 0.0) {
        invalid!("loss weights must be non-negative");
    }
    let mut acc = 0.0;
    for ((&p, &t), &w) in yhat.iter().zip(y.iter()).zip(weights.w.iter()) {
        acc += w * (t - p) * (t - p);
    }
    Ok(acc / y.len() as f64)
}

/// Tape form of [`wrmse`]; targets and weights are constants.
pub fn wrmse_var<'t>(yhat: Var<'t>, y: &Array3<f64>, weights: &LossWeights) -> Var<'t> {
    let neg_y = y.mapv(|v| -v).into_dyn();
    let diff = yhat.add_const(&neg_y);
    diff.square().mul_const(&weights.w.clone().into_dyn()).mean_all()
}

/// Negative-binomial parameterization choice.
///
/// `Nb2` maps n = 1/alpha, p = 1/(1 + mu*alpha), giving mean exactly mu and
/// variance mu + alpha*mu^2. `PaperLiteral` keeps n = mu*alpha/(1 - alpha)
/// with the same p; it requires alpha < 1 and its mean is not mu, so it is a
/// fidelity switch only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NbParameterization {
    #[default]
    Nb2,
    PaperLiteral,
}

fn nb_n_of(mu: f64, alpha: f64, param: NbParameterization) -> Result<f64> {
    match param {
        NbParameterization::Nb2 => Ok(1.0 / alpha),
        NbParameterization::PaperLiteral => {
            if alpha >= 1.0 {
                invalid!("paper-literal NB mapping requires alpha < 1, got {alpha}");
            }
            Ok(mu * alpha / (1.0 - alpha))
        }
    }
}

/// Log pmf of the negative binomial at count `x`.
pub fn nb_log_pmf(x: u64, mu: f64, alpha: f64, param: NbParameterization) -> Result<f64> {
    if !(mu > 0.0) || !(alpha > 0.0) {
        invalid!("nb_pmf requires mu > 0 and alpha > 0, got mu={mu}, alpha={alpha}");
    }
    let n = nb_n_of(mu, alpha, param)?;
    let xf = x as f64;
    let ln1p_ma = (mu * alpha).ln_1p();
    let ln_p = -ln1p_ma;
    let ln_q = (mu * alpha).ln() - ln1p_ma;
    Ok(ln_gamma(xf + n) - ln_gamma(n) - ln_gamma(xf + 1.0) + xf * ln_q + n * ln_p)
}

/// Probability mass of the negative binomial at count `x`.
pub fn nb_pmf(x: u64, mu: f64, alpha: f64, param: NbParameterization) -> Result<f64> {
    Ok(nb_log_pmf(x, mu, alpha, param)?.exp())
}

/// Mean over (B, delta, N) of the negative log pmf. Computed in log space
/// via log-gamma, so counts up to 1e6 stay finite.
pub fn nb_nll(params: &NbParams, y: &Array3<f64>, param: NbParameterization) -> Result<f64> {
    if params.mu.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "nb_nll: params {:?} vs labels {:?}",
            params.mu.dim(),
            y.dim()
        )));
    }
    if params.mu.iter().chain(params.alpha.iter()).any(|v| v.is_nan()) {
        invalid!("NaN in NB parameters");
    }
    if y.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        invalid!("labels must be non-negative integers");
    }
    let mut acc = 0.0;
    for ((&m, &a), &t) in params.mu.iter().zip(params.alpha.iter()).zip(y.iter()) {
        acc -= nb_log_pmf(t as u64, m, a, param)?;
    }
    Ok(acc / y.len() as f64)
}

/// Tape form of [`nb_nll`]; labels are constants.
pub fn nb_nll_var<'t>(
    mu: Var<'t>,
    alpha: Var<'t>,
    y: &Array3<f64>,
    param: NbParameterization,
) -> Result<Var<'t>> {
    let yc = y.clone().into_dyn();
    let lgamma_y1 = y.mapv(|v| ln_gamma(v + 1.0)).into_dyn();
    let ln1p_ma = mu.mul(alpha).add_scalar(1.0).ln();
    let ln_ma = mu.mul(alpha).ln();
    let n = match param {
        NbParameterization::Nb2 => alpha.recip(),
        NbParameterization::PaperLiteral => {
            if alpha.value().iter().any(|&v| v >= 1.0) {
                invalid!("paper-literal NB mapping requires alpha < 1");
            }
            mu.mul(alpha).div(alpha.neg().add_scalar(1.0))
        }
    };
    // nll = lgamma(n) + lgamma(y+1) - lgamma(y+n) + (n + y) ln(1+mu a) - y ln(mu a)
    let nll = n
        .lgamma()
        .sub(n.add_const(&yc).lgamma())
        .add(n.add_const(&yc).mul(ln1p_ma))
        .sub(ln_ma.mul_const(&yc))
        .add_const(&lgamma_y1);
    Ok(nll.mean_all())
}

/// u = 2 sigma(alpha_hat / gamma) - 1, elementwise; zero at zero, strictly
/// increasing, bounded in [0, 1).
pub fn uncertainty_weight(alpha_hat: &Array3<f64>, gamma: f64) -> Result<Array3<f64>> {
    if !(gamma > 0.0) {
        invalid!("gamma must be positive, got {gamma}");
    }
    if alpha_hat.iter().any(|&v| v < 0.0) {
        invalid!("alpha_hat must be non-negative");
    }
    Ok(alpha_hat.mapv(|a| 2.0 * sigmoid_f(a / gamma) - 1.0))
}

pub fn uncertainty_weight_scalar(alpha_hat: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        invalid!("gamma must be positive, got {gamma}");
    }
    if alpha_hat < 0.0 {
        invalid!("alpha_hat must be non-negative");
    }
    Ok(2.0 * sigmoid_f(alpha_hat / gamma) - 1.0)
}

/// Batch-mean uncertainty weight on the tape.
pub fn uncertainty_weight_mean_var<'t>(alpha: Var<'t>, gamma: f64) -> Var<'t> {
    alpha.scale(1.0 / gamma).sigmoid().scale(2.0).add_scalar(-1.0).mean_all()
}

/// Supervised contrastive loss over anchors `h` (M, D) with binary class
/// labels. Rows are L2-normalized internally (a no-op for already
/// normalized anchors); anchors without positives are skipped.
pub fn supervised_contrastive(h: &Array2<f64>, labels: &[bool], tau: f64) -> Result<f64> {
    let (m, pos_counts) = contrastive_checks(h, labels, tau)?;
    let hn = normalize_rows(h)?;
    let mut total = 0.0;
    let mut valid = 0usize;
    for i in 0..m {
        if pos_counts[i] == 0 {
            continue;
        }
        valid += 1;
        // log sum exp over a != i, shift-stabilized
        let sims: Vec<f64> = (0..m)
            .map(|a| hn.row(i).dot(&hn.row(a)) / tau)
            .collect();
        let mx = (0..m)
            .filter(|&a| a != i)
            .map(|a| sims[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m)
            .filter(|&a| a != i)
            .map(|a| (sims[a] - mx).exp())
            .sum();
        let lse = denom.ln() + mx;
        let mut anchor_loss = 0.0;
        for p in 0..m {
            if p != i && labels[p] == labels[i] {
                anchor_loss -= sims[p] - lse;
            }
        }
        total += anchor_loss / pos_counts[i] as f64;
    }
    Ok(total / valid as f64)
}

/// Tape form of [`supervised_contrastive`].
pub fn supervised_contrastive_var<'t>(h: Var<'t>, labels: &[bool], tau: f64) -> Result<Var<'t>> {
    let hv = h.value();
    let h_arr = hv
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::ShapeMismatch("contrastive anchors must be rank 2".into()))?
        .to_owned();
    let (m, pos_counts) = contrastive_checks(&h_arr, labels, tau)?;

    let norms = h.square().sum_axes(&[1]).sqrt();
    let hn = h.div(norms);
    let sim = hn.matmul(hn.permute(&[1, 0])).scale(1.0 / tau);

    let mut offdiag = Array2::<f64>::ones((m, m));
    for i in 0..m {
        offdiag[(i, i)] = 0.0;
    }
    // stabilization shift: per-row max over a != i, exact under shift invariance
    let sim_vals = sim.value();
    let mut shift = ArrayD::zeros(IxDyn(&[m, 1]));
    for i in 0..m {
        let mx = (0..m)
            .filter(|&a| a != i)
            .map(|a| sim_vals[[i, a]])
            .fold(f64::NEG_INFINITY, f64::max);
        shift[[i, 0]] = mx;
    }
    let exp_off = sim.add_const(&shift.mapv(|v| -v)).exp().mul_const(&offdiag.clone().into_dyn());
    let lse = exp_off.sum_axes(&[1]).ln().add_const(&shift);
    let log_prob = sim.sub(lse);

    let valid = pos_counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut coeff = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        if pos_counts[i] == 0 {
            continue;
        }
        for p in 0..m {
            if p != i && labels[p] == labels[i] {
                coeff[(i, p)] = 1.0 / (pos_counts[i] as f64 * valid);
            }
        }
    }
    Ok(log_prob.mul_const(&coeff.into_dyn()).sum_all().neg())
}

fn contrastive_checks(h: &Array2<f64>, labels: &[bool], tau: f64) -> Result<(usize, Vec<usize>)> {
    let m = h.nrows();
    if labels.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {m} anchors",
            labels.len()
        )));
    }
    if !(tau > 0.0) {
        invalid!("contrastive temperature must be positive");
    }
    if m < 2 {
        invalid!("contrastive loss needs at least two anchors");
    }
    for i in 0..m {
        let norm2: f64 = h.row(i).iter().map(|v| v * v).sum();
        if norm2 <= 0.0 {
            invalid!("zero-norm embedding at anchor {i}");
        }
    }
    let pos_counts: Vec<usize> = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&p| p != i && labels[p] == labels[i])
                .count()
        })
        .collect();
    if pos_counts.iter().all(|&c| c == 0) {
        invalid!("no anchor has a positive; contrastive loss undefined");
    }
    Ok((m, pos_counts))
}

fn normalize_rows(h: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = h.clone();
    for mut row in out.rows_mut() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Combined adversarial loss configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvLossConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub tau: f64,
    pub nb_parameterization: NbParameterization,
}

impl Default for AdvLossConfig {
    fn default() -> Self {
        AdvLossConfig {
            beta1: 1.0,
            beta2: 0.1,
            gamma: 1.0,
            tau: 0.1,
            nb_parameterization: NbParameterization::Nb2,
        }
    }
}

impl AdvLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            invalid!("beta1 and beta2 must be non-negative");
        }
        if self.beta1 + self.beta2 <= 0.0 {
            invalid!("beta1 + beta2 must be positive");
        }
        if !(self.gamma > 0.0) || !(self.tau > 0.0) {
            invalid!("gamma and tau must be positive");
        }
        Ok(())
    }
}

/// Named components of one adversarial-loss evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdvLossBreakdown {
    pub nb: f64,
    pub scl: f64,
    pub u_mean: f64,
    pub total: f64,
    pub scl_skipped: bool,
}

/// beta1 * nb_nll + beta2 * (batch-mean u) * supervised_contrastive.
///
/// Embeddings `h` are (B, N, D) anchors; class labels come from the
/// partition. When `beta2 == 0` the contrastive term is skipped entirely.
pub fn adv_loss(
    params: &NbParams,
    y: &Array3<f64>,
    h: &Array3<f64>,
    partition: &ClassPartition,
    cfg: &AdvLossConfig,
) -> Result<AdvLossBreakdown> {
    cfg.validate()?;
    let nb = nb_nll(params, y, cfg.nb_parameterization)?;
    let (scl, u_mean, skipped) = if cfg.beta2 == 0.0 {
        (0.0, 0.0, true)
    } else {
        let u = uncertainty_weight(&params.alpha, cfg.gamma)?;
        let u_mean = u.iter().sum::<f64>() / u.len() as f64;
        let (b, n, d) = h.dim();
        let flat = h
            .clone()
            .into_shape_with_order((b * n, d))
            .expect("contiguous embedding");
        let labels = partition.flat_minority_labels();
        let scl = supervised_contrastive(&flat, &labels, cfg.tau)?;
        (scl, u_mean, false)
    };
    Ok(AdvLossBreakdown {
        nb: cfg.beta1 * nb,
        scl: cfg.beta2 * u_mean * scl,
        u_mean,
        total: cfg.beta1 * nb + cfg.beta2 * u_mean * scl,
        scl_skipped: skipped,
    })
}

/// Tape handles for the adversarial-loss components of one forward pass.
pub struct AdvLossVars<'t> {
    pub total: Var<'t>,
    pub nb: Var<'t>,
    /// Present only when the contrastive term is active.
    pub scl: Option<Var<'t>>,
    pub u_mean: Option<Var<'t>>,
    pub scl_skipped: bool,
}

/// Build the combined adversarial loss on the tape. The contrastive term is
/// skipped when beta2 is zero or the batch lacks one of the two classes.
pub fn adv_loss_var<'t>(
    vars: &ModelVars<'t>,
    y: &Array3<f64>,
    cfg: &AdvLossConfig,
) -> Result<AdvLossVars<'t>> {
    cfg.validate()?;
    let nb = nb_nll_var(vars.mu, vars.alpha, y, cfg.nb_parameterization)?;
    let partition = partition_from_labels(y);
    if cfg.beta2 == 0.0 || !partition.has_both_classes() {
        return Ok(AdvLossVars {
            total: nb.scale(cfg.beta1),
            nb,
            scl: None,
            u_mean: None,
            scl_skipped: true,
        });
    }
    let (b, n, d) = {
        let s = vars.h.shape();
        (s[0], s[1], s[2])
    };
    let h_flat = vars.h.reshape(&[b * n, d]);
    let labels = partition.flat_minority_labels();
    let scl = supervised_contrastive_var(h_flat, &labels, cfg.tau)?;
    let u_mean = uncertainty_weight_mean_var(vars.alpha, cfg.gamma);
    let total = nb.scale(cfg.beta1).add(u_mean.mul(scl).scale(cfg.beta2));
    Ok(AdvLossVars {
        total,
        nb,
        scl: Some(scl),
        u_mean: Some(u_mean),
        scl_skipped: false,
    })
}

// ---------------------------------------------------------------------------
// Task loss dispatch used by attacks and training loops
// ---------------------------------------------------------------------------

/// The loss a model is trained with (and that attacks maximize).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    Wrmse { rule: WeightRule },
    Nb { parameterization: NbParameterization },
    Adv(AdvLossConfig),
}

impl Default for TaskLoss {
    fn default() -> Self {
        TaskLoss::Wrmse {
            rule: WeightRule::default(),
        }
    }
}

impl TaskLoss {
    /// Build the scalar loss on the tape from a forward construction.
    ///
    /// For [`TaskLoss::Adv`], the contrastive term is skipped when beta2 is
    /// zero or when the batch lacks one of the two classes (the training
    /// loops count such skips).
    pub fn build<'t>(&self, _tape: &'t Tape, vars: &ModelVars<'t>, y: &Array3<f64>) -> Result<Var<'t>> {
        match self {
            TaskLoss::Wrmse { rule } => {
                let weights = LossWeights::from_labels(y, *rule);
                Ok(wrmse_var(vars.yhat, y, &weights))
            }
            TaskLoss::Nb { parameterization } => {
                nb_nll_var(vars.mu, vars.alpha, y, *parameterization)
            }
            TaskLoss::Adv(cfg) => Ok(adv_loss_var(vars, y, cfg)?.total),
        }
    }

    /// Evaluate the loss value for a model on a batch.
    pub fn eval(
        &self,
        model: &crate::stmodel::StRegressor,
        x: &ndarray::Array4<f64>,
        y: &Array3<f64>,
        graph: &crate::zidata::SpatioTemporalGraph,
    ) -> Result<f64> {
        let tape = Tape::new();
        let vars = model.build_graph(&tape, x.clone().into_dyn(), graph, None)?;
        Ok(self.build(&tape, &vars, y)?.item())
    }

    /// The ranking output matching this training loss.
    pub fn prediction_kind(&self) -> crate::stmodel::PredictionKind {
        match self {
            TaskLoss::Wrmse { .. } => crate::stmodel::PredictionKind::Head,
            _ => crate::stmodel::PredictionKind::NbMean,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn a3(values: Vec<f64>, dims: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_vec(dims, values).unwrap()
    }

    #[test]
    fn wrmse_hand_arithmetic() {
        let y = a3(vec![2.0, 0.0], (1, 1, 2));
        let yhat = a3(vec![1.0, 1.0], (1, 1, 2));
        let w = LossWeights::explicit(a3(vec![1.0, 1.0], (1, 1, 2))).unwrap();
        assert_eq!(wrmse(&yhat, &y, &w).unwrap(), 1.0);
    }

    #[test]
    fn wrmse_zero_on_exact_fit_and_masked_coordinates() {
        let y = a3(vec![5.0, 0.0], (1, 1, 2));
        let w = LossWeights::explicit(a3(vec![0.0, 1.0], (1, 1, 2))).unwrap();
        let yhat = a3(vec![0.0, 0.0], (1, 1, 2));
        assert_eq!(wrmse(&yhat, &y, &w).unwrap(), 0.0);
        let wu = LossWeights::from_labels(&y, WeightRule::OnePlusLabel);
        assert_eq!(wrmse(&y, &y, &wu).unwrap(), 0.0);
        assert_eq!(wu.w[(0, 0, 0)], 6.0);
        assert_eq!(wu.w[(0, 0, 1)], 1.0);
    }

    #[test]
    fn wrmse_rejects_negative_weights() {
        let y = a3(vec![1.0], (1, 1, 1));
        assert!(LossWeights::explicit(a3(vec![-1.0], (1, 1, 1))).is_err());
        let bad = LossWeights {
            w: a3(vec![-1.0], (1, 1, 1)),
            rule: WeightRule::Uniform,
        };
        assert!(wrmse(&y, &y, &bad).is_err());
    }

    #[test]
    fn wrmse_scales_linearly_in_weights() {
        let y = a3(vec![2.0, 1.0, 0.0, 3.0], (1, 2, 2));
        let yhat = a3(vec![1.5, 0.0, 1.0, 2.0], (1, 2, 2));
        let w1 = LossWeights::explicit(a3(vec![1.0, 2.0, 0.5, 1.0], (1, 2, 2))).unwrap();
        let w2 = LossWeights::explicit(&w1.w * 3.0).unwrap();
        let l1 = wrmse(&yhat, &y, &w1).unwrap();
        let l2 = wrmse(&yhat, &y, &w2).unwrap();
        assert!((l2 - 3.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn nb_pmf_geometric_special_case() {
        // alpha=1, mu=1 -> n=1, p=0.5 -> pmf(x) = 0.5^(x+1)
        let p2 = nb_pmf(2, 1.0, 1.0, NbParameterization::Nb2).unwrap();
        assert!((p2 - 0.125).abs() < 1e-12);
        let p0 = nb_pmf(0, 2.0, 0.5, NbParameterization::Nb2).unwrap();
        assert!((p0 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn nb_pmf_sums_to_one() {
        let total: f64 = (0..=500)
            .map(|x| nb_pmf(x, 2.0, 0.5, NbParameterization::Nb2).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn nb_pmf_rejects_non_positive_parameters() {
        assert!(nb_pmf(1, 0.0, 1.0, NbParameterization::Nb2).is_err());
        assert!(nb_pmf(1, 1.0, -0.5, NbParameterization::Nb2).is_err());
    }

    #[test]
    fn paper_literal_mapping_is_available_but_mean_shifts() {
        // under the literal mapping the distribution mean is n*(1-p)/p, not mu
        let (mu, alpha) = (3.0, 0.5);
        let n = mu * alpha / (1.0 - alpha);
        let p = 1.0 / (1.0 + mu * alpha);
        let mean: f64 = (0..2000)
            .map(|x| x as f64 * nb_pmf(x, mu, alpha, NbParameterization::PaperLiteral).unwrap())
            .sum();
        assert!((mean - n * (1.0 - p) / p).abs() < 1e-6);
        assert!((mean - mu).abs() > 0.5, "literal mapping should not be mean-mu");
        assert!(nb_pmf(1, 2.0, 1.5, NbParameterization::PaperLiteral).is_err());
    }

    #[test]
    fn nb_nll_geometric_value() {
        let params = NbParams::new(a3(vec![1.0], (1, 1, 1)), a3(vec![1.0], (1, 1, 1))).unwrap();
        let y = a3(vec![0.0], (1, 1, 1));
        let nll = nb_nll(&params, &y, NbParameterization::Nb2).unwrap();
        assert!((nll - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn nb_nll_is_finite_for_large_counts() {
        let params =
            NbParams::new(a3(vec![5.0], (1, 1, 1)), a3(vec![0.8], (1, 1, 1))).unwrap();
        let y = a3(vec![1_000_000.0], (1, 1, 1));
        assert!(nb_nll(&params, &y, NbParameterization::Nb2).unwrap().is_finite());
    }

    #[test]
    fn minimizing_nll_over_mu_recovers_the_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mu_true, alpha) = (2.5, 0.6);
        let mut counts = Vec::new();
        for _ in 0..4000 {
            let lambda = rand_distr::Gamma::new(1.0 / alpha, mu_true * alpha)
                .unwrap()
                .sample(&mut rng);
            let c = if lambda > 1e-12 {
                rand_distr::Poisson::new(lambda).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            counts.push(c);
        }
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let y = Array3::from_shape_vec((counts.len(), 1, 1), counts.clone()).unwrap();
        let nll_at = |mu: f64| {
            let params = NbParams::new(
                Array3::from_elem(y.dim(), mu),
                Array3::from_elem(y.dim(), alpha),
            )
            .unwrap();
            nb_nll(&params, &y, NbParameterization::Nb2).unwrap()
        };
        // golden-section search on [0.2, 8]
        let (mut lo, mut hi) = (0.2f64, 8.0f64);
        let phi = 0.5 * (5.0f64.sqrt() - 1.0);
        for _ in 0..60 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            if nll_at(m1) < nll_at(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let argmin = 0.5 * (lo + hi);
        assert!(
            (argmin - mean).abs() < 0.02,
            "argmin {argmin} vs sample mean {mean}"
        );
    }

    #[test]
    fn nb_nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dims = (2, 2, 3);
        let mu0 = Array3::from_shape_fn(dims, |_| rng.random_range(0.3..4.0));
        let al0 = Array3::from_shape_fn(dims, |_| rng.random_range(0.2..1.5));
        let y = Array3::from_shape_fn(dims, |_| rng.random_range(0..6) as f64);

        let tape = Tape::new();
        let mu = tape.var(mu0.clone().into_dyn());
        let alpha = tape.var(al0.clone().into_dyn());
        let loss = nb_nll_var(mu, alpha, &y, NbParameterization::Nb2).unwrap();
        let grads = tape.backward(loss);
        let gm = grads.wrt(mu);
        let ga = grads.wrt(alpha);

        let eval = |mu_v: &Array3<f64>, al_v: &Array3<f64>| {
            let params = NbParams::new(mu_v.clone(), al_v.clone()).unwrap();
            nb_nll(&params, &y, NbParameterization::Nb2).unwrap()
        };
        let h = 1e-6;
        for _ in 0..10 {
            let idx = (
                rng.random_range(0..dims.0),
                rng.random_range(0..dims.1),
                rng.random_range(0..dims.2),
            );
            let mut m = mu0.clone();
            m[idx] += h;
            let fp = eval(&m, &al0);
            m[idx] -= 2.0 * h;
            let fm = eval(&m, &al0);
            let fd = (fp - fm) / (2.0 * h);
            let g = gm[IxDyn(&[idx.0, idx.1, idx.2])];
            assert!(
                ((fd - g) / fd.abs().max(g.abs()).max(1e-6)).abs() < 1e-4,
                "mu grad {g} vs fd {fd}"
            );

            let mut a = al0.clone();
            a[idx] += h;
            let fp = eval(&mu0, &a);
            a[idx] -= 2.0 * h;
            let fm = eval(&mu0, &a);
            let fd = (fp - fm) / (2.0 * h);
            let g = ga[IxDyn(&[idx.0, idx.1, idx.2])];
            assert!(
                ((fd - g) / fd.abs().max(g.abs()).max(1e-6)).abs() < 1e-4,
                "alpha grad {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn uncertainty_weight_formula_points() {
        assert_eq!(uncertainty_weight_scalar(0.0, 1.0).unwrap(), 0.0);
        let at_gamma = uncertainty_weight_scalar(2.0, 2.0).unwrap();
        assert!((at_gamma - (2.0 / (1.0 + (-1.0f64).exp()) - 1.0)).abs() < 1e-12);
        assert!((at_gamma - 0.4621171572600098).abs() < 1e-10);
        let asymptote = uncertainty_weight_scalar(1e6, 1.0).unwrap();
        assert!((asymptote - 1.0).abs() < 1e-9);
        assert!(uncertainty_weight_scalar(1.0, -1.0).is_err());
    }

    #[test]
    fn uncertainty_weight_is_strictly_monotone_and_bounded() {
        let mut prev = -1.0;
        for i in 0..200 {
            let a = i as f64 * 0.1;
            let u = uncertainty_weight_scalar(a, 0.7).unwrap();
            assert!(u > prev, "not strictly increasing at {a}");
            assert!((0.0..1.0).contains(&u));
            prev = u;
        }
    }

    /// Direct per-anchor reference with no shared machinery: explicit
    /// probability ratios, no logsumexp shift.
    fn scl_reference(h: &Array2<f64>, labels: &[bool], tau: f64) -> f64 {
        let m = h.nrows();
        let mut hn = h.clone();
        for mut row in hn.rows_mut() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        let mut total = 0.0;
        let mut valid = 0;
        for i in 0..m {
            let positives: Vec<usize> = (0..m)
                .filter(|&p| p != i && labels[p] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            valid += 1;
            let denom: f64 = (0..m)
                .filter(|&a| a != i)
                .map(|a| (hn.row(i).dot(&hn.row(a)) / tau).exp())
                .sum();
            let mut li = 0.0;
            for &p in &positives {
                li -= ((hn.row(i).dot(&hn.row(p)) / tau).exp() / denom).ln();
            }
            total += li / positives.len() as f64;
        }
        total / valid as f64
    }

    #[test]
    fn contrastive_matches_brute_force_reference() {
        let h = arr2(&[
            [0.9, 0.1, 0.0],
            [0.8, 0.3, -0.2],
            [-0.1, 0.7, 0.6],
            [0.0, 0.5, 0.9],
        ]);
        let labels = [true, true, false, false];
        let ours = supervised_contrastive(&h, &labels, 0.1).unwrap();
        let reference = scl_reference(&h, &labels, 0.1);
        assert!((ours - reference).abs() < 1e-6, "{ours} vs {reference}");

        // tape version agrees and differentiates
        let tape = Tape::new();
        let hv = tape.var(h.clone().into_dyn());
        let loss = supervised_contrastive_var(hv, &labels, 0.1).unwrap();
        assert!((loss.item() - reference).abs() < 1e-9);
        let g = tape.backward(loss).wrt(hv);
        assert!(g.iter().any(|&v| v.abs() > 1e-9));
    }

    #[test]
    fn contrastive_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let labels = [true, false, true, false, false, true];
        let base = supervised_contrastive(&h, &labels, 0.2).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut hp = Array2::zeros((6, 4));
        let mut lp = [false; 6];
        for (new, &old) in perm.iter().enumerate() {
            hp.row_mut(new).assign(&h.row(old));
            lp[new] = labels[old];
        }
        let permuted = supervised_contrastive(&hp, &lp, 0.2).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let labels = [true, false, true, false, true];
        let base = supervised_contrastive(&h, &labels, 0.15).unwrap();
        // random orthogonal rotation from composed Givens rotations
        let mut rot = Array2::<f64>::eye(4);
        for _ in 0..6 {
            let i = rng.random_range(0..4);
            let mut j = rng.random_range(0..4);
            if i == j {
                j = (j + 1) % 4;
            }
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut g = Array2::<f64>::eye(4);
            g[(i, i)] = theta.cos();
            g[(j, j)] = theta.cos();
            g[(i, j)] = -theta.sin();
            g[(j, i)] = theta.sin();
            rot = rot.dot(&g);
        }
        let rotated = h.dot(&rot);
        let after = supervised_contrastive(&rotated, &labels, 0.15).unwrap();
        assert!((base - after).abs() < 1e-9, "{base} vs {after}");
    }

    #[test]
    fn structured_embeddings_beat_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let labels = [true, true, false, false];
        let mut structured = Array2::<f64>::zeros((4, 4));
        structured[(0, 0)] = 1.0;
        structured[(1, 0)] = 1.0;
        structured[(2, 1)] = 1.0;
        structured[(3, 1)] = 1.0;
        let good = supervised_contrastive(&structured, &labels, 0.1).unwrap();
        for _ in 0..10 {
            let h = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
            let random_loss = supervised_contrastive(&h, &labels, 0.1).unwrap();
            assert!(
                good < random_loss,
                "structured {good} should beat random {random_loss}"
            );
        }
    }

    #[test]
    fn contrastive_error_cases() {
        let h = arr2(&[[1.0, 0.0]]);
        assert!(supervised_contrastive(&h, &[true], 0.1).is_err());
        let h = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(supervised_contrastive(&h, &[true, false], 0.1).is_err());
        let h = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        // two anchors of different classes: nobody has a positive
        assert!(supervised_contrastive(&h, &[true, false], 0.1).is_err());
    }

    #[test]
    fn adv_loss_degenerates_to_nb_when_beta2_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dims = (2, 2, 3);
        let params = NbParams::new(
            Array3::from_shape_fn(dims, |_| rng.random_range(0.5..3.0)),
            Array3::from_shape_fn(dims, |_| rng.random_range(0.2..1.0)),
        )
        .unwrap();
        let y = Array3::from_shape_fn(dims, |_| rng.random_range(0..4) as f64);
        let h = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(-1.0..1.0));
        let partition = partition_from_labels(&y);
        let cfg = AdvLossConfig {
            beta2: 0.0,
            ..Default::default()
        };
        let out = adv_loss(&params, &y, &h, &partition, &cfg).unwrap();
        let nb = nb_nll(&params, &y, NbParameterization::Nb2).unwrap();
        assert_eq!(out.total, cfg.beta1 * nb);
        assert!(out.scl_skipped);
    }

    #[test]
    fn adv_loss_vanishes_when_uncertainty_vanishes() {
        let dims = (2, 1, 2);
        let params = NbParams::new(
            Array3::from_elem(dims, 1.0),
            Array3::from_elem(dims, 1e-9),
        )
        .unwrap();
        let y = a3(vec![0.0, 1.0, 2.0, 0.0], dims);
        let h = Array3::from_shape_fn((2, 2, 3), |(b, n, d)| (b + n + d) as f64 * 0.3 + 0.1);
        let partition = partition_from_labels(&y);
        let cfg = AdvLossConfig {
            beta1: 0.0,
            beta2: 1.0,
            ..Default::default()
        };
        let out = adv_loss(&params, &y, &h, &partition, &cfg).unwrap();
        assert!(out.total.abs() < 1e-6, "total {}", out.total);
    }

    #[test]
    fn adv_loss_composes_from_its_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let dims = (3, 2, 4);
        let params = NbParams::new(
            Array3::from_shape_fn(dims, |_| rng.random_range(0.5..3.0)),
            Array3::from_shape_fn(dims, |_| rng.random_range(0.2..1.0)),
        )
        .unwrap();
        let mut y = Array3::from_elem(dims, 0.0);
        y[(0, 0, 1)] = 2.0;
        y[(2, 1, 3)] = 1.0;
        let h = Array3::from_shape_fn((3, 4, 5), |_| rng.random_range(-1.0..1.0));
        let partition = partition_from_labels(&y);
        let cfg = AdvLossConfig::default();
        let out = adv_loss(&params, &y, &h, &partition, &cfg).unwrap();

        let nb = nb_nll(&params, &y, cfg.nb_parameterization).unwrap();
        let u = uncertainty_weight(&params.alpha, cfg.gamma).unwrap();
        let u_mean = u.iter().sum::<f64>() / u.len() as f64;
        let flat = h.clone().into_shape_with_order((12, 5)).unwrap();
        let scl = supervised_contrastive(&flat, &partition.flat_minority_labels(), cfg.tau).unwrap();
        let expected = cfg.beta1 * nb + cfg.beta2 * u_mean * scl;
        assert!((out.total - expected).abs() < 1e-9);
        assert!((out.nb + out.scl - out.total).abs() < 1e-12);
    }
}
