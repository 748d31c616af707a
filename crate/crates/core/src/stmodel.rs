//! Compact differentiable spatiotemporal graph regressor.
//!
//! Per time step, node features pass through graph convolutions over the
//! symmetrically normalized multi-view adjacency; a GRU runs over the
//! history axis; the hidden embedding is the temporal mean of the GRU
//! states, read by a linear head for point predictions and by a two-layer
//! decoder for negative-binomial (mu, alpha) parameters. The output head
//! consumes exactly the embedding that `embed` exposes, so composing them
//! reproduces `forward` bit for bit.

use crate::autodiff::{stack, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::zidata::SpatioTemporalGraph;
use ndarray::{Array3, Array4, ArrayD, Ix3, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const NB_PARAM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_gc_layers: usize,
    pub recurrent_dim: usize,
    pub horizon: usize,
    pub history: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            input_dim: 2,
            hidden_dim: 32,
            num_gc_layers: 2,
            recurrent_dim: 32,
            horizon: 2,
            history: 8,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 4 {
            invalid!("hidden_dim must be at least 4");
        }
        if self.input_dim < 1 || self.recurrent_dim < 1 || self.num_gc_layers < 1 {
            invalid!("input_dim, recurrent_dim, and num_gc_layers must be positive");
        }
        if self.horizon < 1 || self.history < 1 {
            invalid!("horizon and history must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            invalid!("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Strictly positive negative-binomial parameters, shape (B, horizon, N).
#[derive(Debug, Clone)]
pub struct NbParams {
    pub mu: Array3<f64>,
    pub alpha: Array3<f64>,
}

impl NbParams {
    pub fn new(mu: Array3<f64>, alpha: Array3<f64>) -> Result<Self> {
        if mu.dim() != alpha.dim() {
            return Err(Error::ShapeMismatch(format!(
                "mu {:?} vs alpha {:?}",
                mu.dim(),
                alpha.dim()
            )));
        }
        if mu.iter().chain(alpha.iter()).any(|&v| !(v > 0.0)) {
            invalid!("NB parameters must be strictly positive");
        }
        Ok(NbParams { mu, alpha })
    }
}

/// The regressor: configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StRegressor {
    pub config: RegressorConfig,
    pub params: ParamStore,
}

/// Tape handles produced by one forward construction.
pub struct ModelVars<'t> {
    pub x: Var<'t>,
    pub yhat: Var<'t>,
    pub h: Var<'t>,
    pub mu: Var<'t>,
    pub alpha: Var<'t>,
    pub params: ParamVars<'t>,
}

impl StRegressor {
    pub fn new(config: RegressorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (d, dh, r) = (config.input_dim, config.hidden_dim, config.recurrent_dim);
        for l in 0..config.num_gc_layers {
            let fan_in = if l == 0 { d } else { dh };
            params.insert_glorot(&format!("gc{l}.w"), &[fan_in, dh], &mut rng);
            params.insert_zeros(&format!("gc{l}.b"), &[dh]);
        }
        for gate in ["r", "z", "c"] {
            params.insert_glorot(&format!("gru.w{gate}"), &[dh, r], &mut rng);
            params.insert_glorot(&format!("gru.u{gate}"), &[r, r], &mut rng);
            params.insert_zeros(&format!("gru.b{gate}"), &[r]);
        }
        params.insert_glorot("head.w", &[r, config.horizon], &mut rng);
        params.insert_zeros("head.b", &[config.horizon]);
        params.insert_glorot("dec.w1", &[r, dh], &mut rng);
        params.insert_zeros("dec.b1", &[dh]);
        params.insert_glorot("dec.w2", &[dh, 2 * config.horizon], &mut rng);
        params.insert_zeros("dec.b2", &[2 * config.horizon]);
        Ok(StRegressor { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, shape: &[usize], graph: &SpatioTemporalGraph) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "expected X of rank 4 (B, T, N, D), got {shape:?}"
            )));
        }
        let (t, n, d) = (shape[1], shape[2], shape[3]);
        if t != self.config.history {
            return Err(Error::ShapeMismatch(format!(
                "history {t} does not match config {}",
                self.config.history
            )));
        }
        if n != graph.num_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "X has {n} nodes, graph has {}",
                graph.num_nodes()
            )));
        }
        if d != self.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "X has {d} channels, config expects {}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Build the full forward computation on `tape`. Dropout is applied only
    /// when a training RNG is supplied and the configured rate is positive.
    pub fn build_graph<'t>(
        &self,
        tape: &'t Tape,
        x: ArrayD<f64>,
        graph: &SpatioTemporalGraph,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelVars<'t>> {
        self.check_input(x.shape(), graph)?;
        let (b, t, n, _d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (dh, r, delta) = (
            self.config.hidden_dim,
            self.config.recurrent_dim,
            self.config.horizon,
        );
        let pv = self.params.leaves(tape);
        let x_var = tape.var(x);
        let adj = tape.var(graph.normalized_adjacency().into_dyn());

        let dropout_masks: Option<Vec<ArrayD<f64>>> = match dropout_rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let p = self.config.dropout;
                Some(
                    (0..self.config.num_gc_layers)
                        .map(|_| {
                            ArrayD::from_shape_fn(IxDyn(&[b * n, dh]), |_| {
                                if rng.random_range(0.0..1.0) < p {
                                    0.0
                                } else {
                                    1.0 / (1.0 - p)
                                }
                            })
                        })
                        .collect(),
                )
            }
            _ => None,
        };

        // GRU over the history axis; graph convolutions per step.
        let mut state = tape.var(ArrayD::zeros(IxDyn(&[b * n, r])));
        let mut states = Vec::with_capacity(t);
        for ti in 0..t {
            let mut z = x_var.select(1, ti).reshape(&[b * n, self.config.input_dim]);
            for l in 0..self.config.num_gc_layers {
                let w = pv.get(&format!("gc{l}.w"));
                let bias = pv.get(&format!("gc{l}.b"));
                let lin = z.matmul(w).add(bias);
                let mixed = lin
                    .reshape(&[b, n, dh])
                    .permute(&[1, 0, 2])
                    .reshape(&[n, b * dh]);
                let mixed = adj.matmul(mixed);
                z = mixed
                    .reshape(&[n, b, dh])
                    .permute(&[1, 0, 2])
                    .reshape(&[b * n, dh])
                    .tanh();
                if let Some(masks) = &dropout_masks {
                    z = z.mul_const(&masks[l]);
                }
            }
            let rg = z
                .matmul(pv.get("gru.wr"))
                .add(state.matmul(pv.get("gru.ur")))
                .add(pv.get("gru.br"))
                .sigmoid();
            let zg = z
                .matmul(pv.get("gru.wz"))
                .add(state.matmul(pv.get("gru.uz")))
                .add(pv.get("gru.bz"))
                .sigmoid();
            let cg = z
                .matmul(pv.get("gru.wc"))
                .add(rg.mul(state).matmul(pv.get("gru.uc")))
                .add(pv.get("gru.bc"))
                .tanh();
            state = state.add(zg.mul(cg.sub(state)));
            states.push(state);
        }

        // hidden embedding: temporal mean of GRU states
        let h_flat = stack(0, &states).mean_axes(&[0]).reshape(&[b * n, r]);
        let h = h_flat.reshape(&[b, n, r]);

        let yhat = h_flat
            .matmul(pv.get("head.w"))
            .add(pv.get("head.b"))
            .reshape(&[b, n, delta])
            .permute(&[0, 2, 1]);

        let (mu, alpha) = decode_on_tape(&pv, h_flat, b, n, delta, dh);

        Ok(ModelVars {
            x: x_var,
            yhat,
            h,
            mu,
            alpha,
            params: pv,
        })
    }

    /// Point predictions, evaluation mode.
    pub fn forward(&self, x: &Array4<f64>, graph: &SpatioTemporalGraph) -> Result<Array3<f64>> {
        let tape = Tape::new();
        let vars = self.build_graph(&tape, x.clone().into_dyn(), graph, None)?;
        Ok(to3(&vars.yhat.value()))
    }

    /// Hidden embedding (B, N, recurrent_dim), evaluation mode.
    pub fn embed(&self, x: &Array4<f64>, graph: &SpatioTemporalGraph) -> Result<Array3<f64>> {
        let tape = Tape::new();
        let vars = self.build_graph(&tape, x.clone().into_dyn(), graph, None)?;
        Ok(to3(&vars.h.value()))
    }

    /// Apply the output head to an embedding.
    pub fn output_layer(&self, h: &Array3<f64>) -> Array3<f64> {
        let (b, n, r) = h.dim();
        let tape = Tape::new();
        let pv = self.params.leaves(&tape);
        let hv = tape.var(h.clone().into_dyn()).reshape(&[b * n, r]);
        let yhat = hv
            .matmul(pv.get("head.w"))
            .add(pv.get("head.b"))
            .reshape(&[b, n, self.config.horizon])
            .permute(&[0, 2, 1]);
        to3(&yhat.value())
    }

    /// Decode NB parameters from an embedding.
    pub fn decode_nb(&self, h: &Array3<f64>) -> Result<NbParams> {
        let (b, n, r) = h.dim();
        let tape = Tape::new();
        let pv = self.params.leaves(&tape);
        let hv = tape.var(h.clone().into_dyn()).reshape(&[b * n, r]);
        let (mu, alpha) = decode_on_tape(&pv, hv, b, n, self.config.horizon, self.config.hidden_dim);
        NbParams::new(to3(&mu.value()), to3(&alpha.value()))
    }

    /// Exact reverse-mode gradient of a scalar loss with respect to X.
    ///
    /// The loss builder receives the forward vars and the targets and must
    /// return a scalar; model parameters are frozen for the call.
    pub fn input_gradient<F>(
        &self,
        x: &Array4<f64>,
        y: &Array3<f64>,
        graph: &SpatioTemporalGraph,
        loss_fn: F,
    ) -> Result<Array4<f64>>
    where
        F: for<'t> FnOnce(&'t Tape, &ModelVars<'t>, &Array3<f64>) -> Result<Var<'t>>,
    {
        Ok(self.loss_and_input_gradient(x, y, graph, loss_fn)?.1)
    }

    /// Loss value and its input gradient from a single forward/backward pass.
    pub fn loss_and_input_gradient<F>(
        &self,
        x: &Array4<f64>,
        y: &Array3<f64>,
        graph: &SpatioTemporalGraph,
        loss_fn: F,
    ) -> Result<(f64, Array4<f64>)>
    where
        F: for<'t> FnOnce(&'t Tape, &ModelVars<'t>, &Array3<f64>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let vars = self.build_graph(&tape, x.clone().into_dyn(), graph, None)?;
        let loss = loss_fn(&tape, &vars, y)?;
        if loss.value().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss must be scalar, got shape {:?}",
                loss.value().shape()
            )));
        }
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {value}")));
        }
        let grad = tape.backward(loss).wrt(vars.x);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged("non-finite input gradient".into()));
        }
        Ok((
            value,
            grad.into_dimensionality::<ndarray::Ix4>()
                .expect("gradient shares X's rank"),
        ))
    }

    /// Predictions used for ranking metrics: the regression head, or the
    /// decoded NB mean when the model was trained with a likelihood loss.
    pub fn predict(
        &self,
        x: &Array4<f64>,
        graph: &SpatioTemporalGraph,
        kind: PredictionKind,
    ) -> Result<Array3<f64>> {
        match kind {
            PredictionKind::Head => self.forward(x, graph),
            PredictionKind::NbMean => {
                let tape = Tape::new();
                let vars = self.build_graph(&tape, x.clone().into_dyn(), graph, None)?;
                Ok(to3(&vars.mu.value()))
            }
        }
    }
}

/// Which model output ranks nodes during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Head,
    NbMean,
}

fn decode_on_tape<'t>(
    pv: &ParamVars<'t>,
    h_flat: Var<'t>,
    b: usize,
    n: usize,
    delta: usize,
    _dh: usize,
) -> (Var<'t>, Var<'t>) {
    let hidden = h_flat.matmul(pv.get("dec.w1")).add(pv.get("dec.b1")).relu();
    let out = hidden.matmul(pv.get("dec.w2")).add(pv.get("dec.b2"));
    let mu = out
        .narrow(1, 0, delta)
        .softplus()
        .add_scalar(NB_PARAM_FLOOR)
        .reshape(&[b, n, delta])
        .permute(&[0, 2, 1]);
    let alpha = out
        .narrow(1, delta, delta)
        .softplus()
        .add_scalar(NB_PARAM_FLOOR)
        .reshape(&[b, n, delta])
        .permute(&[0, 2, 1]);
    (mu, alpha)
}

fn to3(v: &ArrayD<f64>) -> Array3<f64> {
    v.clone().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RegressorConfig,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub loss_history: Vec<f64>,
}

pub fn config_hash(config: &RegressorConfig) -> String {
    crate::io::hex_digest(serde_json::to_string(config).unwrap().as_bytes())
}

/// Write `params.bin` (parameter blob) and `meta.json` into `dir`.
pub fn save_checkpoint(model: &StRegressor, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
    model.params.write_blob(&mut f)?;
    use std::io::Write;
    f.flush()?;
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(StRegressor, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(dir.join("params.bin"))?);
    let params = ParamStore::read_blob(&mut f)?;
    let model = StRegressor {
        config: meta.config.clone(),
        params,
    };
    Ok((model, meta))
}
