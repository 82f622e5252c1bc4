//! Experiment driver: builds data, models and streams from a config, runs
//! every seed, persists records and checkpoints, and writes summaries.
//!
//! Layout under the output directory:
//!
//! ```text
//! {method}-{hash12}/config.toml
//! {method}-{hash12}/summary.json, summary.csv
//! {method}-{hash12}/seed_{s}/federation.json, records.jsonl, progress.json, result.json
//! {method}-{hash12}/seed_{s}/task_{t}/round_{r}/{classifier,flow}.ckpt
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, SplitClassifier};
use crate::error::{Error, Result};
use crate::federation::{run_task_step, GlobalState, Models, ProtocolConfig, RoundRecord};
use crate::flow::{FlowConfig, FlowInit, FlowModel};
use crate::metrics::{average_accuracy, evaluate_clean_subset, forgetting_with, AccuracyMatrix};
use crate::params::{read_checkpoint, write_checkpoint, Manifest, ParameterVector};
use crate::streams::{load_idx, make_federation, make_synthetic, Federation, Pool, StreamKind};

pub mod config;
mod plots;

pub use config::{
    CheckpointPolicy, DataSource, ExperimentConfig, Method, Profile, CODE_VERSION, DATA_ROOT_ENV,
};
pub use plots::emit_plot_data;

pub fn load_pool(cfg: &ExperimentConfig) -> Result<Pool> {
    match cfg.data.source {
        DataSource::Synthetic => make_synthetic(&cfg.data.synthetic),
        DataSource::Idx => {
            let images = config::resolve_data_path(cfg.data.images.as_deref().expect("validated"));
            let labels = config::resolve_data_path(cfg.data.labels.as_deref().expect("validated"));
            load_idx(&images, &labels)
        }
    }
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    crate::federation::client_seed(seed, usize::MAX, usize::MAX, stream as usize)
}

/// Classifier and flow templates for one seed.
pub fn build_models(cfg: &ExperimentConfig, pool: &Pool, seed: u64) -> Result<Models> {
    let num_classes = cfg.model.num_classes.unwrap_or(pool.label_space());
    if num_classes < pool.label_space() {
        return Err(Error::Config(format!(
            "model.num_classes = {num_classes} but the pool has labels up to {}",
            pool.label_space() - 1
        )));
    }
    let classifier = SplitClassifier::new(
        ClassifierConfig {
            input: pool.shape(),
            conv_channels: cfg.model.conv_channels.clone(),
            feature_dim: cfg.model.feature_dim,
            mid_dims: cfg.model.mid_dims.clone(),
            num_classes,
        },
        sub_seed(seed, 1),
    )?;
    let flow = FlowModel::new(
        FlowConfig {
            dim: cfg.model.feature_dim,
            depth: cfg.model.flow_depth,
            hidden: cfg.model.flow_hidden,
            num_blocks: cfg.model.flow_blocks,
            embed_dim: cfg.model.embed_dim,
            num_classes,
            scale_clamp: cfg.model.scale_clamp,
        },
        FlowInit::Identity,
        sub_seed(seed, 2),
    )?;
    Ok(Models { classifier, flow })
}

pub fn build_federation(cfg: &ExperimentConfig, pool: &Pool, seed: u64) -> Result<Federation> {
    let mut spec = cfg.federation.clone();
    spec.seed = seed;
    make_federation(&spec, pool)
}

/// Directory of all seeds of one config.
pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.join(format!("{}-{}", cfg.method, &cfg.hash()[..12]))
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    experiment_dir(cfg).join(format!("seed_{seed}"))
}

/// Metrics of one completed seed, recomputable from its accuracy matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub config_hash: String,
    pub method: Method,
    pub kind: StreamKind,
    pub noisy_clients: usize,
    pub seed: u64,
    pub average_accuracy: f64,
    /// Absent with a single task.
    pub average_forgetting: Option<f64>,
    pub clean_accuracy: Option<f64>,
    /// Average accuracy over tasks seen so far, after each step.
    pub per_step_accuracy: Vec<f64>,
    pub matrix: AccuracyMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub accuracy: f64,
    pub forgetting: Option<f64>,
    pub clean_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub version: String,
    pub method: Method,
    pub kind: StreamKind,
    pub noisy_clients: usize,
    pub seeds: Vec<SeedRow>,
    pub accuracy: MeanStd,
    pub forgetting: Option<MeanStd>,
    pub clean_accuracy: Option<MeanStd>,
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut s = String::from("config_hash,method,seed,accuracy,forgetting,clean_accuracy\n");
        for r in &self.seeds {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.config_hash,
                self.method,
                r.seed,
                r.accuracy,
                opt(r.forgetting),
                opt(r.clean_accuracy)
            ));
        }
        s
    }
}

/// How far a seed got.
#[derive(Clone, Debug, PartialEq)]
pub enum SeedOutcome {
    Complete(SeedResult),
    Stopped { completed_steps: usize },
}

#[derive(Serialize, Deserialize)]
struct Progress {
    config_hash: String,
    completed_steps: usize,
    matrix: AccuracyMatrix,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RecordLine<'a> {
    Round {
        config_hash: &'a str,
        #[serde(flatten)]
        record: &'a RoundRecord,
    },
    Step {
        config_hash: &'a str,
        task: usize,
        average_accuracy: f64,
        average_forgetting: Option<f64>,
    },
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn checkpoint_dir(dir: &Path, t: usize, r: usize) -> PathBuf {
    dir.join(format!("task_{t}")).join(format!("round_{r}"))
}

fn save_state(dir: &Path, hash: &str, models: &Models, state: &GlobalState) -> Result<()> {
    let tagged = |m: Manifest| Manifest {
        tag: Some(hash.to_string()),
        ..m
    };
    write_checkpoint(
        &dir.join("classifier.ckpt"),
        &tagged(models.classifier.params().manifest()),
        &state.classifier,
    )?;
    write_checkpoint(&dir.join("flow.ckpt"), &tagged(models.flow.params().manifest()), &state.flow)
}

fn load_checkpoint(path: &Path, hash: &str, expected: &Manifest) -> Result<ParameterVector> {
    let (m, v) = read_checkpoint(path)?;
    if m.tag.as_deref() != Some(hash) {
        return Err(Error::Integrity(format!(
            "{} was written by a different config",
            path.display()
        )));
    }
    if m.entries != expected.entries {
        return Err(Error::ManifestMismatch(format!("{} layout differs from the model", path.display())));
    }
    Ok(v)
}

fn step_metrics(m: &AccuracyMatrix, steps: usize, cfg: &ExperimentConfig) -> Result<(f64, Option<f64>)> {
    let prefix = m.prefix(steps);
    let acc = average_accuracy(&prefix)?;
    let fg = if steps >= 2 {
        Some(forgetting_with(&prefix, cfg.metrics.forgetting)?)
    } else {
        None
    };
    Ok((acc, fg))
}

/// Runs (or resumes) one seed, stopping after `stop_after` completed steps
/// when given.
pub fn run_seed(cfg: &ExperimentConfig, pool: &Pool, seed: u64, stop_after: Option<usize>) -> Result<SeedOutcome> {
    let hash = cfg.hash();
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let result_path = dir.join("result.json");
    if result_path.exists() {
        let r: SeedResult = read_json(&result_path)?;
        if r.config_hash != hash {
            return Err(Error::Integrity(format!("{} belongs to another config", result_path.display())));
        }
        return Ok(SeedOutcome::Complete(r));
    }

    let fed = build_federation(cfg, pool, seed)?;
    let models = build_models(cfg, pool, seed)?;
    fed.write_manifest(&dir.join("federation.json"))?;
    let steps = fed.num_steps();
    let protocol = ProtocolConfig {
        rounds_per_task: cfg.optim.rounds_per_task,
        participation: cfg.optim.participation,
        local: cfg.local_config(),
        global_seed: seed,
    };

    let progress_path = dir.join("progress.json");
    let records_path = dir.join("records.jsonl");
    let (mut state, mut matrix) = if progress_path.exists() {
        let p: Progress = read_json(&progress_path)?;
        if p.config_hash != hash {
            return Err(Error::Integrity(format!("{} belongs to another config", progress_path.display())));
        }
        let mut state = GlobalState::initial(&models);
        if p.completed_steps > 0 {
            let ck = checkpoint_dir(&dir, p.completed_steps - 1, cfg.optim.rounds_per_task - 1);
            state.classifier = load_checkpoint(&ck.join("classifier.ckpt"), &hash, &models.classifier.params().manifest())?;
            state.flow = load_checkpoint(&ck.join("flow.ckpt"), &hash, &models.flow.params().manifest())?;
            state.seen_classes = fed.seen_classes(p.completed_steps - 1);
            state.completed_steps = p.completed_steps;
        }
        truncate_records(&records_path, p.completed_steps)?;
        (state, p.matrix)
    } else {
        let _ = fs::remove_file(&records_path);
        (GlobalState::initial(&models), AccuracyMatrix::new(fed.num_clients(), steps))
    };

    let mut records = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)
        .map_err(|e| Error::io(&records_path, e))?;
    let mut append = |line: &RecordLine<'_>| -> Result<()> {
        let mut s = serde_json::to_string(line).expect("record serializes");
        s.push('\n');
        records.write_all(s.as_bytes()).map_err(|e| Error::io(&records_path, e))
    };

    for t in state.completed_steps..steps {
        if stop_after.is_some_and(|s| t >= s) {
            return Ok(SeedOutcome::Stopped { completed_steps: t });
        }
        let last_round = cfg.optim.rounds_per_task - 1;
        state = run_task_step(t, state, &fed, pool, &models, &protocol, &mut matrix, |record, st| {
            append(&RecordLine::Round {
                config_hash: &hash,
                record,
            })?;
            if cfg.output.checkpoints == CheckpointPolicy::Round || record.round == last_round {
                save_state(&checkpoint_dir(&dir, t, record.round), &hash, &models, st)?;
            }
            Ok(())
        })?;
        let (acc, fg) = step_metrics(&matrix, t + 1, cfg)?;
        append(&RecordLine::Step {
            config_hash: &hash,
            task: t,
            average_accuracy: acc,
            average_forgetting: fg,
        })?;
        let progress = Progress {
            config_hash: hash.clone(),
            completed_steps: t + 1,
            matrix: matrix.clone(),
        };
        write_atomic(&progress_path, &serde_json::to_vec(&progress).expect("progress serializes"))?;
    }

    let per_step_accuracy = (1..=steps)
        .map(|s| step_metrics(&matrix, s, cfg).map(|m| m.0))
        .collect::<Result<Vec<_>>>()?;
    let (average_accuracy, average_forgetting) = step_metrics(&matrix, steps, cfg)?;
    let clean_accuracy = match cfg.clean_tasks() {
        Some(tasks) => Some(evaluate_clean_subset(&matrix, &tasks)?),
        None => None,
    };
    let result = SeedResult {
        config_hash: hash,
        method: cfg.method,
        kind: cfg.federation.kind,
        noisy_clients: cfg.federation.noisy_clients,
        seed,
        average_accuracy,
        average_forgetting,
        clean_accuracy,
        per_step_accuracy,
        matrix,
    };
    write_atomic(&result_path, &serde_json::to_vec_pretty(&result).expect("result serializes"))?;
    Ok(SeedOutcome::Complete(result))
}

fn truncate_records(path: &Path, completed_steps: usize) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["task"].as_u64())
                .is_some_and(|t| (t as usize) < completed_steps)
        })
        .flat_map(|l| [l, "\n"])
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Combines per-seed results into a summary.
pub fn summarize(cfg: &ExperimentConfig, results: &[SeedResult]) -> Summary {
    let seeds: Vec<SeedRow> = results
        .iter()
        .map(|r| SeedRow {
            seed: r.seed,
            accuracy: r.average_accuracy,
            forgetting: r.average_forgetting,
            clean_accuracy: r.clean_accuracy,
        })
        .collect();
    let all = |f: fn(&SeedRow) -> Option<f64>| -> Option<MeanStd> {
        let xs: Option<Vec<f64>> = seeds.iter().map(f).collect();
        xs.filter(|v| !v.is_empty()).map(|v| MeanStd::of(&v))
    };
    Summary {
        config_hash: cfg.hash(),
        version: CODE_VERSION.to_string(),
        method: cfg.method,
        kind: cfg.federation.kind,
        noisy_clients: cfg.federation.noisy_clients,
        accuracy: MeanStd::of(&seeds.iter().map(|r| r.accuracy).collect::<Vec<_>>()),
        forgetting: all(|r| r.forgetting),
        clean_accuracy: all(|r| r.clean_accuracy),
        seeds,
    }
}

/// Runs every seed of `cfg`, resuming any partial work, and writes the
/// summary files.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let pool = load_pool(cfg)?;
    run_on_pool(cfg, &pool)
}

pub fn run_on_pool(cfg: &ExperimentConfig, pool: &Pool) -> Result<Summary> {
    let dir = experiment_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()).map_err(|e| Error::io(&dir, e))?;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        match run_seed(cfg, pool, seed, None)? {
            SeedOutcome::Complete(r) => results.push(r),
            SeedOutcome::Stopped { .. } => unreachable!("no stop requested"),
        }
    }
    let summary = summarize(cfg, &results);
    write_atomic(
        &dir.join("summary.json"),
        &serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )?;
    write_atomic(&dir.join("summary.csv"), summary.to_csv().as_bytes())?;
    Ok(summary)
}

/// One cell of the noisy-client sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub noisy_clients: usize,
    pub clean_accuracy: MeanStd,
    pub config_hash: String,
}

/// Runs every sweep method for every number of noisy clients in `m_values`
/// and writes `sweep_noisy.csv` to the output directory.
pub fn sweep_noisy(cfg: &ExperimentConfig, m_values: &[usize]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.federation.kind != StreamKind::Noisy {
        return Err(Error::Config("sweep-noisy needs federation.kind = \"noisy\"".into()));
    }
    if m_values.is_empty() {
        return Err(Error::Config("no noisy-client counts to sweep".into()));
    }
    let pool = load_pool(cfg)?;
    let mut rows = Vec::new();
    for &method in &cfg.sweep.methods {
        for &m in m_values {
            let mut c = cfg.clone();
            c.method = method;
            c.federation.noisy_clients = m;
            c.validate()?;
            let s = run_on_pool(&c, &pool)?;
            rows.push(SweepRow {
                method,
                noisy_clients: m,
                clean_accuracy: s.clean_accuracy.expect("noisy runs score clean tasks"),
                config_hash: s.config_hash,
            });
        }
    }
    let mut csv = String::from("method,noisy_clients,clean_accuracy_mean,clean_accuracy_std,config_hash\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.noisy_clients, r.clean_accuracy.mean, r.clean_accuracy.std, r.config_hash
        ));
    }
    fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io(&cfg.output.dir, e))?;
    write_atomic(&cfg.output.dir.join("sweep_noisy.csv"), csv.as_bytes())?;
    Ok(rows)
}
