//! The four CLI verbs: generate, train, evaluate, report.
//!
//! Every run writes into a fresh timestamped directory under the output
//! root and drops a `run.complete` marker when done; completed directories
//! are never written again.

use crate::config::{AttackKind, DatasetSpec, EvalAttack, EvalSplit, ExperimentConfig};
use crate::plot;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use zistorm_core::attack::{
    clean_vs_adv_eval, AttackSpec, EvalRow, EvalTable, VictimStrategy,
};
use zistorm_core::error::{Error, Result};
use zistorm_core::losses::TaskLoss;
use zistorm_core::metrics::MetricAccumulator;
use zistorm_core::mingre::{load_reweighter, mingre_generate, save_reweighter, Reweighter};
use zistorm_core::stmodel::{
    config_hash, load_checkpoint, save_checkpoint, CheckpointMeta, StRegressor,
};
use zistorm_core::trainer::{train, History, HistoryRecord, TrainData};
use zistorm_core::zidata::{class_partition, save_dataset, SegmentBatch};

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

fn create_run_dir(base: &Path, verb: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(base)?;
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    for counter in 0..10_000u32 {
        let name = if counter == 0 {
            format!("{verb}-{stamp}")
        } else {
            format!("{verb}-{stamp}-{counter}")
        };
        let dir = base.join(&name);
        if !dir.exists() {
            std::fs::create_dir(&dir)?;
            return Ok(dir);
        }
    }
    Err(Error::Io(std::io::Error::other("run directory space exhausted")))
}

fn finalize_run_dir(dir: &Path) -> Result<()> {
    std::fs::write(dir.join("run.complete"), b"ok\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    if !matches!(cfg.dataset, DatasetSpec::Synthetic { .. }) {
        return Err(Error::InvalidArgument(
            "generate requires a synthetic dataset spec".into(),
        ));
    }
    let ds = cfg.build_dataset()?;
    let run = create_run_dir(&cfg.out_dir, "gen")?;
    save_dataset(&ds, &run.join("dataset"))?;
    write_json(&run.join("config.json"), cfg)?;
    finalize_run_dir(&run)?;
    println!(
        "dataset written to {} (zero_rate = {:.4})",
        run.join("dataset").display(),
        ds.zero_rate()
    );
    Ok(run)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let ds = cfg.build_dataset()?;
    if ds.feature_dim() != cfg.model.input_dim {
        return Err(Error::InvalidArgument(format!(
            "model input_dim {} does not match dataset feature_dim {}",
            cfg.model.input_dim,
            ds.feature_dim()
        )));
    }
    let data = TrainData::prepare(&ds, &cfg.window)?;

    let (model, reweighter, prior_history, epoch_offset) = match resume {
        None => (StRegressor::new(cfg.model.clone())?, None, None, 0usize),
        Some(run) => {
            let (model, _meta) = load_checkpoint(&run.join("checkpoint"))?;
            let rw = if run.join("reweighter").is_dir() {
                Some(load_reweighter(&run.join("reweighter"))?)
            } else {
                None
            };
            let history = History::read_jsonl(&run.join("history.jsonl"))?;
            let done = history.num_epochs();
            if done >= cfg.train.epochs {
                return Err(Error::InvalidArgument(format!(
                    "nothing to resume: {done} epochs already trained, config asks for {}",
                    cfg.train.epochs
                )));
            }
            (model, rw, Some(history), done)
        }
    };

    let mut train_cfg = cfg.train.clone();
    train_cfg.epochs -= epoch_offset;
    let out = train(model, reweighter, &data, &train_cfg)?;

    // merge histories with continuous epoch numbering
    let mut history = prior_history.unwrap_or_default();
    for rec in out.history.records {
        let shifted = match rec {
            HistoryRecord::Meta { .. } if epoch_offset > 0 => continue,
            HistoryRecord::Step {
                epoch,
                step,
                components,
            } => HistoryRecord::Step {
                epoch: epoch + epoch_offset,
                step,
                components,
            },
            HistoryRecord::Epoch {
                epoch,
                train_loss,
                val_loss,
                val_rec_min,
                scl_skipped,
            } => HistoryRecord::Epoch {
                epoch: epoch + epoch_offset,
                train_loss,
                val_loss,
                val_rec_min,
                scl_skipped,
            },
            other => other,
        };
        history.push(shifted);
    }

    let run = create_run_dir(&cfg.out_dir, "train")?;
    let meta = CheckpointMeta {
        config: out.model.config.clone(),
        seed: cfg.train.seed,
        epoch: out.best_epoch + epoch_offset,
        config_hash: config_hash(&out.model.config),
        loss_history: history
            .epochs()
            .filter_map(|r| match r {
                HistoryRecord::Epoch { train_loss, .. } => Some(*train_loss),
                _ => None,
            })
            .collect(),
    };
    save_checkpoint(&out.model, &run.join("checkpoint"), &meta)?;
    if let Some(rw) = &out.reweighter {
        save_reweighter(rw, &run.join("reweighter"))?;
    }
    history.write_jsonl(&run.join("history.jsonl"))?;
    write_json(&run.join("config.json"), cfg)?;

    let stub = ResultsBundle {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        environment: EnvStamp::collect(1),
        clean: None,
        attacks: Vec::new(),
        history_ref: Some(run.join("history.jsonl").display().to_string()),
        checkpoint_ref: run.join("checkpoint").display().to_string(),
        data_files: BTreeMap::new(),
    };
    write_json(&run.join("results_stub.json"), &stub)?;
    finalize_run_dir(&run)?;
    println!(
        "trained {} epochs (best epoch {}); run at {}",
        history.num_epochs(),
        meta.epoch,
        run.display()
    );
    Ok(run)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvStamp {
    pub os: String,
    pub arch: String,
    pub version: String,
    pub num_threads: usize,
}

impl EnvStamp {
    pub fn collect(num_threads: usize) -> Self {
        EnvStamp {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            num_threads,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub name: String,
    pub kind: AttackKind,
    pub metrics: serde_json::Value,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub environment: EnvStamp,
    pub clean: Option<serde_json::Value>,
    pub attacks: Vec<AttackResult>,
    pub history_ref: Option<String>,
    pub checkpoint_ref: String,
    pub data_files: BTreeMap<String, String>,
}

fn worker_cap(num_tasks: usize) -> usize {
    let cap = std::env::var("ZISTORM_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(num_tasks);
    cap.clamp(1, num_tasks.max(1))
}

/// Paired evaluation under a MinGRE attack (learned reweighter).
fn mingre_eval(
    model: &StRegressor,
    loss: &TaskLoss,
    reweighter: &Reweighter,
    batches: &[SegmentBatch],
    graph: &zistorm_core::zidata::SpatioTemporalGraph,
    attack: &EvalAttack,
) -> Result<EvalTable> {
    let kind = loss.prediction_kind();
    let mut clean_acc = MetricAccumulator::new();
    let mut adv_acc = MetricAccumulator::new();
    let mut rows = Vec::with_capacity(batches.len());
    for (bi, batch) in batches.iter().enumerate() {
        let me = mingre_generate(model, loss, reweighter, batch, graph, &attack.budget)?;
        let clean_pred = model.predict(&batch.x, graph, kind)?;
        let adv_pred = model.predict(&me.example.x_adv, graph, kind)?;
        clean_acc.push_batch(&clean_pred, &batch.y)?;
        adv_acc.push_batch(&adv_pred, &batch.y)?;
        rows.push(EvalRow {
            batch_index: bi,
            clean_loss: me.example.clean_loss(),
            adv_loss: me.example.final_loss(),
            num_victims: me.example.mask.num_selected(),
        });
    }
    Ok(EvalTable {
        rows,
        clean: clean_acc.report(),
        adv: adv_acc.report(),
    })
}

fn run_one_attack(
    model: &StRegressor,
    loss: &TaskLoss,
    reweighter: Option<&Reweighter>,
    batches: &[SegmentBatch],
    graph: &zistorm_core::zidata::SpatioTemporalGraph,
    attack: &EvalAttack,
) -> Result<EvalTable> {
    match attack.kind {
        AttackKind::Mingre => {
            let rw = reweighter.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "attack '{}' needs a reweighter checkpoint, none found in the run",
                    attack.name
                ))
            })?;
            mingre_eval(model, loss, rw, batches, graph, attack)
        }
        kind => {
            let strategy = match kind {
                AttackKind::Random => VictimStrategy::Random,
                AttackKind::Degree => VictimStrategy::Degree,
                AttackKind::Pagerank => VictimStrategy::Pagerank,
                AttackKind::Saliency => VictimStrategy::Saliency,
                AttackKind::Mingre => unreachable!(),
            };
            let spec = AttackSpec {
                strategy,
                budget: attack.budget,
                seed: attack.seed,
            };
            clean_vs_adv_eval(model, loss, batches, graph, &spec)
        }
    }
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint_run: &Path, force: bool) -> Result<PathBuf> {
    // config snapshot must match unless forced
    let snapshot_path = checkpoint_run.join("config.json");
    if snapshot_path.is_file() {
        let snapshot: ExperimentConfig =
            serde_json::from_slice(&std::fs::read(&snapshot_path)?)
                .map_err(|e| Error::InvalidArgument(format!("bad config snapshot: {e}")))?;
        if snapshot.hash() != cfg.hash() && !force {
            return Err(Error::InvalidArgument(
                "config hash mismatch with the checkpoint run (pass --force to evaluate anyway)"
                    .into(),
            ));
        }
    } else if !force {
        return Err(Error::InvalidArgument(
            "checkpoint run has no config snapshot (pass --force to evaluate anyway)".into(),
        ));
    }

    let (model, meta) = load_checkpoint(&checkpoint_run.join("checkpoint"))?;
    if meta.config_hash != config_hash(&model.config) {
        return Err(Error::Format("checkpoint config hash mismatch".into()));
    }
    let reweighter = if checkpoint_run.join("reweighter").is_dir() {
        Some(load_reweighter(&checkpoint_run.join("reweighter"))?)
    } else {
        None
    };

    let ds = cfg.build_dataset()?;
    let data = TrainData::prepare(&ds, &cfg.window)?;
    let batches: &[SegmentBatch] = match cfg.metrics.eval_split {
        EvalSplit::Train => &data.train,
        EvalSplit::Val => &data.val,
        EvalSplit::Test => &data.test,
    };
    let loss = cfg.train.loss.clone();

    // clean metrics
    let kind = loss.prediction_kind();
    let mut clean_acc = MetricAccumulator::new();
    for batch in batches {
        let pred = model.predict(&batch.x, &data.graph, kind)?;
        clean_acc.push_batch(&pred, &batch.y)?;
    }
    let clean_report = clean_acc.report();

    // attacks, optionally in parallel (read-only model)
    let cap = worker_cap(cfg.attacks.len());
    let mut results: Vec<Option<AttackResult>> = vec![None; cfg.attacks.len()];
    for chunk in cfg.attacks.chunks(cap.max(1)) {
        let offset = cfg
            .attacks
            .iter()
            .position(|a| std::ptr::eq(a, &chunk[0]))
            .unwrap_or(0);
        let outputs: Vec<(usize, Result<EvalTable>)> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (i, attack) in chunk.iter().enumerate() {
                let model = &model;
                let loss = &loss;
                let reweighter = reweighter.as_ref();
                let graph = &data.graph;
                handles.push(scope.spawn(move || {
                    (
                        offset + i,
                        run_one_attack(model, loss, reweighter, batches, graph, attack),
                    )
                }));
            }
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for (idx, table) in outputs {
            let table = table?;
            results[idx] = Some(AttackResult {
                name: cfg.attacks[idx].name.clone(),
                kind: cfg.attacks[idx].kind,
                metrics: table.adv.to_json(),
                rows: table.rows,
            });
        }
    }

    let run = create_run_dir(&cfg.out_dir, "eval")?;
    let mut data_files = BTreeMap::new();

    // embedding dump for the PCA projection; paths are stored relative to
    // the bundle so repeated evaluations produce identical bundles
    if let Some(batch) = batches.first() {
        dump_embeddings(&model, batch, &data.graph, &run.join("embeddings.csv"))?;
        data_files.insert("embeddings".to_string(), "embeddings.csv".to_string());
    }
    // attention dump for the heatmap
    if let (Some(rw), Some(batch)) = (&reweighter, batches.first()) {
        dump_attention(rw, batch, &run.join("attention.csv"))?;
        data_files.insert("attention".to_string(), "attention.csv".to_string());
    }

    let history_ref = checkpoint_run.join("history.jsonl");
    let bundle = ResultsBundle {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        environment: EnvStamp::collect(cap),
        clean: Some(clean_report.to_json()),
        attacks: results.into_iter().map(|r| r.expect("all attacks ran")).collect(),
        history_ref: history_ref.is_file().then(|| history_ref.display().to_string()),
        checkpoint_ref: checkpoint_run.join("checkpoint").display().to_string(),
        data_files,
    };
    write_json(&run.join("results.json"), &bundle)?;
    finalize_run_dir(&run)?;
    println!("evaluation bundle at {}", run.join("results.json").display());
    Ok(run)
}

fn dump_embeddings(
    model: &StRegressor,
    batch: &SegmentBatch,
    graph: &zistorm_core::zidata::SpatioTemporalGraph,
    path: &Path,
) -> Result<()> {
    let h = model.embed(&batch.x, graph)?;
    let nb = model.decode_nb(&h)?;
    let partition = class_partition(batch);
    let (b, n, r) = h.dim();
    let mut out = String::from("segment,node,class,alpha");
    for k in 0..r {
        out.push_str(&format!(",h{k}"));
    }
    out.push('\n');
    for s in 0..b {
        for j in 0..n {
            let alpha_mean: f64 = (0..nb.alpha.dim().1)
                .map(|d| nb.alpha[(s, d, j)])
                .sum::<f64>()
                / nb.alpha.dim().1 as f64;
            let class = if partition.is_minority(s, j) { 1 } else { 0 };
            out.push_str(&format!("{s},{j},{class},{alpha_mean}"));
            for k in 0..r {
                out.push_str(&format!(",{}", h[(s, j, k)]));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn dump_attention(rw: &Reweighter, batch: &SegmentBatch, path: &Path) -> Result<()> {
    let w = rw.attention_weights(&batch.x)?;
    let b = w.att_sg.len();
    let n = w.att_sp.len();
    let mut out = String::from("segment");
    for j in 0..n {
        out.push_str(&format!(",node{j}"));
    }
    out.push('\n');
    for s in 0..b {
        out.push_str(&s.to_string());
        for j in 0..n {
            out.push_str(&format!(",{}", w.att1(s, j)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(bundle_path: &Path, out_override: Option<&Path>) -> Result<PathBuf> {
    let bundle_file = if bundle_path.is_dir() {
        bundle_path.join("results.json")
    } else {
        bundle_path.to_path_buf()
    };
    let bundle: ResultsBundle = serde_json::from_slice(&std::fs::read(&bundle_file)?)
        .map_err(|e| Error::InvalidArgument(format!("bad results bundle: {e}")))?;
    let bundle_dir = bundle_file.parent().unwrap_or(Path::new(".")).to_path_buf();
    // data files are stored relative to the bundle directory
    let resolve = |p: &str| -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            bundle_dir.join(path)
        }
    };
    // every referenced file must exist
    for (label, path) in bundle
        .data_files
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .chain(bundle.history_ref.iter().map(|h| ("history".to_string(), h.clone())))
    {
        if !resolve(&path).is_file() {
            return Err(Error::Format(format!("bundle references missing {label} file {path}")));
        }
    }

    let out_base = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| bundle.config.out_dir.clone());
    let run = create_run_dir(&out_base, "report")?;
    let mut warnings: Vec<String> = Vec::new();

    // (i) recall comparison: clean vs every attack, both classes
    {
        let mut rows = vec![];
        if let Some(clean) = &bundle.clean {
            rows.push((
                "clean".to_string(),
                clean["raw"]["rec_maj"].as_f64().unwrap_or(0.0),
                clean["raw"]["rec_min"].as_f64().unwrap_or(0.0),
            ));
        }
        for a in &bundle.attacks {
            rows.push((
                a.name.clone(),
                a.metrics["raw"]["rec_maj"].as_f64().unwrap_or(0.0),
                a.metrics["raw"]["rec_min"].as_f64().unwrap_or(0.0),
            ));
        }
        let mut csv = String::from("mode,rec_maj,rec_min\n");
        for (mode, maj, min) in &rows {
            csv.push_str(&format!("{mode},{maj},{min}\n"));
        }
        std::fs::write(run.join("recall_comparison.csv"), &csv)?;
        // regenerate the plot strictly from the csv text
        let parsed = parse_csv(&csv);
        let cats: Vec<String> = parsed.iter().map(|r| r[0].clone()).collect();
        let maj: Vec<f64> = parsed.iter().map(|r| r[1].parse().unwrap_or(0.0)).collect();
        let min: Vec<f64> = parsed.iter().map(|r| r[2].parse().unwrap_or(0.0)).collect();
        let svg = plot::bar_chart(
            "Recall by class, clean vs attacks",
            &cats,
            &[("rec_maj", maj), ("rec_min", min)],
        );
        std::fs::write(run.join("recall_comparison.svg"), svg)?;
    }

    // (ii) per-class top-k gradient magnitude histograms over training
    let mut wrote_gradients = false;
    if let Some(href) = &bundle.history_ref {
        let history = History::read_jsonl(&resolve(href))?;
        let mut csv = String::from("epoch,step,grad_topk_minority,grad_topk_majority\n");
        let mut minority = Vec::new();
        let mut majority = Vec::new();
        for (e, s, comps) in history.steps() {
            if let (Some(&mi), Some(&ma)) = (
                comps.get("grad_topk_minority"),
                comps.get("grad_topk_majority"),
            ) {
                csv.push_str(&format!("{e},{s},{mi},{ma}\n"));
                minority.push(mi);
                majority.push(ma);
            }
        }
        if minority.is_empty() {
            warnings.push("history has no per-class gradient records; gradient plot skipped".into());
        } else {
            std::fs::write(run.join("gradient_hist.csv"), &csv)?;
            let parsed = parse_csv(&csv);
            let mi: Vec<f64> = parsed.iter().map(|r| r[2].parse().unwrap_or(0.0)).collect();
            let ma: Vec<f64> = parsed.iter().map(|r| r[3].parse().unwrap_or(0.0)).collect();
            let svg = plot::histogram(
                "Top-k gradient magnitudes over training",
                &[("minority", mi), ("majority", ma)],
                24,
            );
            std::fs::write(run.join("gradient_hist.svg"), svg)?;
            wrote_gradients = true;
        }
    } else {
        warnings.push("bundle has no history reference; gradient plot skipped".into());
    }

    // (iii) PCA projection of embeddings, colored by class, sized by alpha
    let mut wrote_pca = false;
    if let Some(embeddings) = bundle.data_files.get("embeddings") {
        let text = std::fs::read_to_string(resolve(embeddings))?;
        let rows = parse_csv(&text);
        if rows.is_empty() {
            warnings.push("embeddings file is empty; projection skipped".into());
        } else {
            let dim = rows[0].len() - 4;
            let data: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r[4..].iter().map(|v| v.parse().unwrap_or(0.0)).collect())
                .collect();
            let classes: Vec<usize> = rows
                .iter()
                .map(|r| r[2].parse().unwrap_or(0usize))
                .collect();
            let alphas: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap_or(0.0)).collect();
            let proj = pca_2d(&data, dim);
            let alpha_max = alphas.iter().cloned().fold(1e-12f64, f64::max);
            let mut csv = String::from("x,y,class,alpha\n");
            for (i, (x, y)) in proj.iter().enumerate() {
                csv.push_str(&format!("{x},{y},{},{}\n", classes[i], alphas[i]));
            }
            std::fs::write(run.join("embeddings_pca.csv"), &csv)?;
            let parsed = parse_csv(&csv);
            let points: Vec<(f64, f64, usize, f64)> = parsed
                .iter()
                .map(|r| {
                    (
                        r[0].parse().unwrap_or(0.0),
                        r[1].parse().unwrap_or(0.0),
                        r[2].parse().unwrap_or(0),
                        r[3].parse::<f64>().unwrap_or(0.0) / alpha_max,
                    )
                })
                .collect();
            let svg = plot::scatter(
                "Embedding projection (size = predicted dispersion)",
                &points,
                &["majority", "minority"],
            );
            std::fs::write(run.join("embeddings_pca.svg"), svg)?;
            wrote_pca = true;
        }
    } else {
        warnings.push("bundle has no embeddings file; projection skipped".into());
    }

    // (iv) attention heatmap over segments x nodes
    let mut wrote_attention = false;
    if let Some(attention) = bundle.data_files.get("attention") {
        let text = std::fs::read_to_string(resolve(attention))?;
        let rows = parse_csv(&text);
        if rows.is_empty() {
            warnings.push("attention file is empty; heatmap skipped".into());
        } else {
            let mut csv = String::from("segment");
            for j in 0..rows[0].len() - 1 {
                csv.push_str(&format!(",node{j}"));
            }
            csv.push('\n');
            for r in &rows {
                csv.push_str(&r.join(","));
                csv.push('\n');
            }
            std::fs::write(run.join("attention_heatmap.csv"), &csv)?;
            let parsed = parse_csv(&csv);
            let grid: Vec<Vec<f64>> = parsed
                .iter()
                .map(|r| r[1..].iter().map(|v| v.parse().unwrap_or(0.0)).collect())
                .collect();
            let svg = plot::heatmap("Attention (att_sg + att_sp) per segment and node", &grid, "segment", "node");
            std::fs::write(run.join("attention_heatmap.svg"), svg)?;
            wrote_attention = true;
        }
    } else {
        warnings.push("bundle has no attention file; heatmap skipped".into());
    }

    let summary = serde_json::json!({
        "bundle": bundle_file.display().to_string(),
        "plots": {
            "recall_comparison": true,
            "gradient_hist": wrote_gradients,
            "embeddings_pca": wrote_pca,
            "attention_heatmap": wrote_attention,
        },
        "warnings": warnings,
    });
    write_json(&run.join("report.json"), &summary)?;
    finalize_run_dir(&run)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("report written to {}", run.display());
    Ok(run)
}

/// Parse a simple comma-separated table, skipping the header row.
fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect()
}

/// Deterministic 2-component PCA via power iteration with deflation.
fn pca_2d(data: &[Vec<f64>], dim: usize) -> Vec<(f64, f64)> {
    let m = data.len();
    let mut mean = vec![0.0; dim];
    for row in data {
        for (k, v) in row.iter().enumerate() {
            mean[k] += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let centered: Vec<Vec<f64>> = data
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for row in &centered {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += row[i] * row[j] / m as f64;
            }
        }
    }
    let mut components = Vec::new();
    for _ in 0..2 {
        let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut next = vec![0.0; dim];
            for i in 0..dim {
                for j in 0..dim {
                    next[i] += cov[i][j] * v[j];
                }
            }
            let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-15 {
                break;
            }
            for x in next.iter_mut() {
                *x /= norm;
            }
            lambda = norm;
            v = next;
        }
        // deterministic sign: first component with meaningful magnitude is positive
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-9) {
            if *first < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
    }
    centered
        .iter()
        .map(|row| {
            let x = row.iter().zip(&components[0]).map(|(a, b)| a * b).sum();
            let y = row.iter().zip(&components[1]).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect()
}
