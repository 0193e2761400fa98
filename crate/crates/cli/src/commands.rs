use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use dfaf_core::attention::AttentionRecord;
use dfaf_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use dfaf_core::data::{
    collate, generate_toy_dataset, read_feature_file, write_feature_file, DataError, Dataset,
};
use dfaf_core::gradcheck::{check_model, GradcheckReport, DEFAULT_EPS};
use dfaf_core::model::{predict, ModelParams};
use dfaf_core::train::{evaluate, train, EpochMetrics, EvalReport, TrainError, TrainState};
use dfaf_core::{OpKind, Parameters, Tensor};

use crate::config::{architecture_differences, ConfigError, RunConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_MAX_DIM: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{0}")]
    Shape(String),

    #[error("{0}")]
    Usage(String),

    #[error("training diverged: {0}")]
    Diverged(TrainError),

    #[error("{0}")]
    Failed(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Data(_)
            | CliError::Checkpoint(_)
            | CliError::Shape(_)
            | CliError::Io { .. } => 3,
            CliError::Diverged(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteParameter { .. } => {
                CliError::Diverged(e)
            }
            TrainError::Data(d) => CliError::Data(d),
            TrainError::Incompatible(m) => CliError::Shape(m),
            TrainError::Model(m) => CliError::Shape(m.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn emit(out: &mut dyn Write, value: &Value) -> Result<(), CliError> {
    writeln!(out, "{value}")
        .and_then(|_| out.flush())
        .map_err(io_err(Path::new("<stdout>")))
}

/// Path of the config file written next to a feature file.
pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn gen_data(
    cfg: &RunConfig,
    out_path: &Path,
    out: &mut dyn Write,
) -> Result<Dataset, CliError> {
    let d = generate_toy_dataset(&cfg.toy_spec(), cfg.n_instances)?;
    let stored = d.without_meta();
    write_feature_file(out_path, &stored)?;
    let sidecar = sidecar_path(out_path);
    fs::write(&sidecar, cfg.to_text()).map_err(io_err(&sidecar))?;
    log::info!("wrote {} instances to {}", d.len(), out_path.display());
    emit(
        out,
        &json!({
            "command": "gen-data",
            "path": out_path,
            "summary": d.summary(),
            "config": cfg.to_text(),
        }),
    )?;
    Ok(stored)
}

/// Training and held-out parts: the last `eval_split` fraction is held out.
pub fn split(cfg: &RunConfig, d: &Dataset) -> (Dataset, Dataset) {
    d.split_at(d.len() - cfg.eval_count(d.len()))
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub resume: Option<&'a Path>,
    pub metrics: Option<&'a Path>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub epochs_completed: usize,
    pub steps: u64,
    pub parameters: usize,
    pub final_eval_acc: Option<f64>,
    pub config: String,
}

pub fn train_cmd(
    cfg: &RunConfig,
    args: &TrainArgs,
    out: &mut dyn Write,
) -> Result<TrainSummary, CliError> {
    let data = read_feature_file(args.data)?;
    let (train_set, eval_set) = split(cfg, &data);
    if train_set.is_empty() {
        return Err(DataError::Empty.into());
    }
    let (mut model, mut state) = match args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let diffs = architecture_differences(cfg, &ckpt.model.config);
            if !diffs.is_empty() {
                return Err(ConfigError { issues: diffs }.into());
            }
            let state = ckpt.train_state.ok_or_else(|| {
                CliError::Usage(format!("{} holds no optimizer state", path.display()))
            })?;
            log::info!(
                "resuming from {} after epoch {} (step {})",
                path.display(),
                state.epochs_completed,
                state.optimizer.t
            );
            (ckpt.model, state)
        }
        None => {
            let config = cfg.model_config(data.region_dim, data.word_dim, data.n_answers);
            let model = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
                .map_err(|e| ConfigError {
                    issues: vec![e.to_string()],
                })?;
            let state = TrainState::new(&model);
            (model, state)
        }
    };
    log::info!(
        "training {} parameters on {} instances, holding out {}",
        model.param_count(),
        train_set.len(),
        eval_set.len()
    );

    let mut metrics_file = match args.metrics {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => None,
    };
    let text = cfg.to_text();
    let tc = cfg.train_config();
    let eval = (!eval_set.is_empty()).then_some(&eval_set);
    let mut write_error = None;
    let mut last: Option<EpochMetrics> = None;
    for epoch in state.epochs_completed + 1..=tc.epochs {
        let step_cfg = dfaf_core::TrainConfig {
            epochs: epoch,
            ..tc.clone()
        };
        train(&mut model, &mut state, &train_set, eval, &step_cfg, |m| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            log::info!(
                "epoch {} lr {} loss {:.5} eval {:?}",
                m.epoch,
                m.lr,
                m.train_loss,
                m.eval_acc
            );
            let mut result = writeln!(out, "{line}").and_then(|_| out.flush());
            if let Some(f) = metrics_file.as_mut() {
                result = result
                    .and_then(|_| writeln!(f, "{line}"))
                    .and_then(|_| f.flush());
            }
            if let Err(e) = result {
                write_error.get_or_insert(e);
            }
            last = Some(m.clone());
        })?;
        if let Some(e) = write_error.take() {
            return Err(CliError::Io {
                path: args.metrics.unwrap_or(Path::new("<stdout>")).to_path_buf(),
                source: e,
            });
        }
        save_checkpoint(args.checkpoint, &model, &text, Some(&state))?;
    }
    if last.is_none() {
        save_checkpoint(args.checkpoint, &model, &text, Some(&state))?;
    }
    let summary = TrainSummary {
        checkpoint: args.checkpoint.to_path_buf(),
        epochs_completed: state.epochs_completed,
        steps: state.optimizer.t,
        parameters: model.param_count(),
        final_eval_acc: last.and_then(|m| m.eval_acc),
        config: text,
    };
    emit(out, &json!({ "command": "train", "summary": summary }))?;
    Ok(summary)
}

fn check_data_fits(model: &ModelParams, d: &Dataset) -> Result<(), CliError> {
    let c = &model.config;
    let want = (c.region_dim, c.word_dim, c.n_answers);
    let have = (d.region_dim, d.word_dim, d.n_answers);
    if want != have {
        return Err(CliError::Shape(format!(
            "checkpoint expects (region_dim, word_dim, n_answers) = {want:?}, data has {have:?}"
        )));
    }
    Ok(())
}

fn load_for_inference(
    checkpoint: &Path,
    overrides: &[String],
) -> Result<(ModelParams, RunConfig), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = RunConfig::resolve(
        RunConfig::default(),
        Some(("checkpoint", &ckpt.run_config)),
        None,
        overrides,
    )?;
    Ok((ckpt.model, cfg))
}

pub fn eval_cmd(
    checkpoint: &Path,
    data_path: &Path,
    all: bool,
    overrides: &[String],
    out: &mut dyn Write,
) -> Result<EvalReport, CliError> {
    let (model, cfg) = load_for_inference(checkpoint, overrides)?;
    let data = read_feature_file(data_path)?;
    check_data_fits(&model, &data)?;
    let target = if all { data } else { split(&cfg, &data).1 };
    let report = evaluate(&model, &target, cfg.batch_size)?;
    emit(
        out,
        &json!({
            "command": "eval",
            "split": if all { "all" } else { "eval" },
            "report": report,
            "config": cfg.to_text(),
        }),
    )?;
    Ok(report)
}

pub fn gradcheck_cmd(
    cfg: &RunConfig,
    fault: Option<OpKind>,
    out: &mut dyn Write,
) -> Result<GradcheckReport, CliError> {
    if cfg.dim > GRADCHECK_MAX_DIM {
        return Err(ConfigError {
            issues: vec![format!(
                "gradcheck needs dim <= {GRADCHECK_MAX_DIM}, got {}",
                cfg.dim
            )],
        }
        .into());
    }
    let spec = cfg.toy_spec();
    let d = generate_toy_dataset(&spec, cfg.batch_size)?;
    let batch = collate(&d, &(0..d.len()).collect::<Vec<_>>());
    let config = cfg.model_config(d.region_dim, d.word_dim, d.n_answers);
    let model =
        ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(|e| {
            ConfigError {
                issues: vec![e.to_string()],
            }
        })?;
    let report = check_model(
        &model,
        &batch,
        cfg.dropout,
        cfg.seed,
        fault,
        DEFAULT_EPS,
        GRADCHECK_TOLERANCE,
    )
    .map_err(|e| CliError::Failed(e.to_string()))?;
    emit(
        out,
        &json!({
            "command": "gradcheck",
            "fault": fault.map(|k| k.name()),
            "report": report,
            "config": cfg.to_text(),
        }),
    )?;
    if report.passed {
        Ok(report)
    } else {
        let worst: Vec<&str> = report
            .blocks
            .iter()
            .filter(|b| !b.passed)
            .map(|b| b.name.as_str())
            .collect();
        Err(CliError::Failed(format!(
            "gradient check failed for {}",
            worst.join(", ")
        )))
    }
}

/// Per-instance attention dump.
#[derive(Clone, Debug, Serialize)]
pub struct InspectDump {
    pub index: usize,
    pub template: Option<String>,
    pub answer: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub blocks: Vec<AttentionRecord>,
    pub config: String,
}

pub fn inspect_cmd(
    checkpoint: &Path,
    data_path: &Path,
    index: usize,
    out_json: &Path,
    out: &mut dyn Write,
) -> Result<InspectDump, CliError> {
    let (model, cfg) = load_for_inference(checkpoint, &[])?;
    let data = read_feature_file(data_path)?;
    check_data_fits(&model, &data)?;
    let inst = data.instances.get(index).ok_or_else(|| {
        CliError::Usage(format!(
            "instance {index} out of range: {} has {} instances",
            data_path.display(),
            data.len()
        ))
    })?;
    let regions = Tensor::new(&[data.n_regions, data.region_dim], inst.regions.clone())
        .expect("validated file");
    let words =
        Tensor::new(&[data.token_len, data.word_dim], inst.words.clone()).expect("validated file");
    let pred =
        predict(&regions, &words, &model, true).map_err(|e| CliError::Shape(e.to_string()))?;
    let dump = InspectDump {
        index,
        template: inst.template.map(|t| t.as_str().to_string()),
        answer: inst.answer,
        predicted: pred.argmax(),
        probabilities: pred.probabilities.clone(),
        blocks: pred.records.unwrap_or_default(),
        config: cfg.to_text(),
    };
    let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
    fs::write(out_json, text).map_err(io_err(out_json))?;
    emit(
        out,
        &json!({
            "command": "inspect",
            "path": out_json,
            "index": index,
            "answer": dump.answer,
            "predicted": dump.predicted,
            "blocks": dump.blocks.len(),
        }),
    )?;
    Ok(dump)
}
