use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use cad_core::data::{load_dataset, load_recording, save_dataset, split_tags, synthesize_dataset, Label, SplitTag};
use cad_core::eval::{
    build_timeline, cross_type_attention_fraction, duration_weights, evaluate_dataset, weighted_accuracy, Aggregation,
    MetricsReport, Timeline,
};
use cad_core::gradcheck::{check_model, GradCheckReport};
use cad_core::model::{load_checkpoint, save_checkpoint, Architecture, CadModel, ModelConfig};
use cad_core::tensor::Matrix;
use cad_core::train::{fit, FitError, JsonLinesSink};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{dataset_hash, RunManifest, RunStatus};

/// Writes a line to standard output; a closed pipe ends output quietly.
fn say(line: std::fmt::Arguments) -> Result<(), CliError> {
    match writeln!(io::stdout().lock(), "{line}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => r.map_err(CliError::from),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dataset = synthesize_dataset(&cfg.generator)?;
    let tags = split_tags(dataset.len(), cfg.generator.train_fraction, cfg.generator.seed)?;
    save_dataset(out, &dataset, &tags)?;
    let n_train = tags.iter().filter(|&&t| t == SplitTag::Train).count();
    say(format_args!(
        "wrote {} recordings ({} train, {} test) to {}",
        dataset.len(),
        n_train,
        dataset.len() - n_train,
        out.display()
    ))?;
    say(format_args!("dataset sha256 {}", dataset_hash(out)?))?;
    Ok(())
}

pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub last_good: PathBuf,
    pub history: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
    pub manifest: PathBuf,
}

impl TrainPaths {
    pub fn new(out: &Path) -> Self {
        TrainPaths {
            checkpoint: out.join("checkpoint"),
            last_good: out.join("checkpoint-last-good"),
            history: out.join("history.jsonl"),
            metrics: out.join("metrics.json"),
            config: out.join("config.toml"),
            manifest: out.join("run.json"),
        }
    }
}

pub fn train(mut cfg: RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let stored = load_dataset(data)?;
    cfg.model.d_a = stored.manifest.d_a;
    cfg.model.d_t = stored.manifest.d_t;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let train_set = stored.subset(SplitTag::Train);
    let test_set = stored.subset(SplitTag::Test);
    if train_set.is_empty() {
        return Err(CliError::Data(format!("{} has no recordings tagged train", data.display())));
    }

    create_dir(out)?;
    let paths = TrainPaths::new(out);
    fs::write(&paths.config, cfg.to_toml())?;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: RunStatus::Running,
        reason: None,
        seed: cfg.train.seed,
        config: cfg.clone(),
        dataset: data.to_path_buf(),
        dataset_sha256: dataset_hash(data)?,
        checkpoint: None,
        history: paths.history.clone(),
        metrics: None,
    };
    manifest.write(&paths.manifest)?;

    let model = CadModel::<f64>::new(cfg.model.clone())?;
    let history = File::create(&paths.history)?;
    let mut sink = JsonLinesSink::new(BufWriter::new(history));
    let result = fit(model, &train_set, &cfg.train, &mut sink);
    sink.into_inner().flush()?;

    let report = match result {
        Ok(report) => report,
        Err(FitError::Diverged {
            epoch,
            batch,
            reason,
            last_good,
            ..
        }) => {
            save_checkpoint(&last_good, &paths.last_good)?;
            let msg = format!("training diverged at epoch {epoch}, batch {batch}: {reason}");
            manifest.status = RunStatus::Diverged;
            manifest.reason = Some(msg.clone());
            manifest.checkpoint = Some(paths.last_good.clone());
            manifest.write(&paths.manifest)?;
            return Err(CliError::Numeric(format!("{msg}; last good weights in {}", paths.last_good.display())));
        }
        Err(FitError::Failed(e)) => {
            manifest.status = RunStatus::Failed;
            manifest.reason = Some(e.to_string());
            manifest.write(&paths.manifest)?;
            return Err(e.into());
        }
    };

    for (epoch, mean) in report.epoch_means.iter().enumerate() {
        eprintln!(
            "epoch {:>3}  loss {:.6}  l_c {:.6}  r_alpha {:.6}",
            epoch + 1,
            mean.total,
            mean.l_c,
            mean.r_alpha
        );
    }
    save_checkpoint(&report.model, &paths.checkpoint)?;
    manifest.checkpoint = Some(paths.checkpoint.clone());
    if !test_set.is_empty() {
        let metrics = evaluate_dataset(&report.model, &test_set, Aggregation::Macro)?;
        write_json(&paths.metrics, &metrics)?;
        manifest.metrics = Some(paths.metrics.clone());
        say(format_args!(
            "test accuracy {:.4}  F1_T {:.4}  F1_S {:.4}",
            metrics.summary.accuracy, metrics.summary.f1_teacher, metrics.summary.f1_student
        ))?;
    }
    manifest.status = RunStatus::Completed;
    manifest.write(&paths.manifest)?;
    say(format_args!("checkpoint written to {}", paths.checkpoint.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: PathBuf,
    dataset: PathBuf,
    split: SplitTag,
    architecture: Architecture,
    /// `None` for architectures without a multimodal score matrix.
    cross_type_attention_fraction: Option<f64>,
    metrics: MetricsReport,
}

pub fn eval(checkpoint: &Path, data: &Path, split: SplitTag, aggregation: Aggregation, out: Option<&Path>) -> Result<(), CliError> {
    let model = load_checkpoint::<f64>(checkpoint)?;
    let stored = load_dataset(data)?;
    let dataset = stored.subset(split);
    if dataset.is_empty() {
        let tag = serde_json::to_string(&split).unwrap_or_default();
        return Err(CliError::Data(format!("{} has no recordings in split {tag}", data.display())));
    }
    let metrics = evaluate_dataset(&model, &dataset, aggregation)?;
    let output = EvalOutput {
        checkpoint: checkpoint.to_path_buf(),
        dataset: data.to_path_buf(),
        split,
        architecture: model.architecture(),
        cross_type_attention_fraction: cross_type_attention_fraction(&model, &dataset)?,
        metrics,
    };
    say(format_args!("{}", serde_json::to_string_pretty(&output).map_err(|e| CliError::Data(e.to_string()))?))?;
    if let Some(path) = out {
        write_json(path, &output)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SegmentPrediction {
    id: usize,
    start_ms: u64,
    end_ms: u64,
    label: Label,
    activity: &'static str,
    p_student: f64,
}

#[derive(Serialize)]
struct PredictOutput {
    recording: String,
    architecture: Architecture,
    /// Duration-weighted accuracy, present when the input carries labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    segments: Vec<SegmentPrediction>,
    timeline: Timeline,
}

pub fn predict(checkpoint: &Path, recording: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let model = load_checkpoint::<f64>(checkpoint)?;
    let rec = load_recording(recording)?;
    let (pred, _) = model.forward_recording(&rec)?;
    let labeled = rec.with_labels(&pred.labels)?;
    let accuracy = match rec.labels() {
        Some(gold) => Some(weighted_accuracy(&pred.labels, &gold, &duration_weights(&rec)?)?),
        None => None,
    };
    let segments = rec
        .segments()
        .iter()
        .zip(&pred.labels)
        .enumerate()
        .map(|(i, (s, &label))| SegmentPrediction {
            id: s.id,
            start_ms: s.start_ms,
            end_ms: s.end_ms,
            label,
            activity: label.name(),
            p_student: pred.probabilities.get(i, Label::Student.index()),
        })
        .collect();
    let output = PredictOutput {
        recording: rec.id().to_string(),
        architecture: model.architecture(),
        accuracy,
        segments,
        timeline: build_timeline(&labeled)?,
    };
    if let Some(acc) = accuracy {
        eprintln!("duration-weighted accuracy {acc:.4}");
    }
    match out {
        Some(path) => write_json(path, &output)?,
        None => say(format_args!("{}", serde_json::to_string_pretty(&output).map_err(|e| CliError::Data(e.to_string()))?))?,
    }
    Ok(())
}

#[derive(Serialize)]
struct ArchitectureCheck {
    architecture: Architecture,
    report: GradCheckReport,
}

/// Model dimensions of the tiny instance used when no `[model]` section is given.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d_a: 8,
        d_t: 8,
        d_q: 4,
        d_v: 4,
        d_b: 4,
        fcn_hidden: 6,
        ..Default::default()
    }
}

pub fn gradcheck(base: &ModelConfig, n_segments: usize, seed: u64, step: f64, tol: f64, out: Option<&Path>) -> Result<(), CliError> {
    if n_segments < 2 {
        return Err(CliError::Usage("gradcheck needs at least 2 segments".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_a = Matrix::<f64>::uniform(n_segments, base.d_a, 1.0, &mut rng);
    let x_t = Matrix::<f64>::uniform(n_segments, base.d_t, 1.0, &mut rng);
    let labels: Vec<Label> = (0..n_segments)
        .map(|i| if i % 3 == 1 { Label::Student } else { Label::Teacher })
        .collect();

    let mut checks = Vec::new();
    for architecture in Architecture::ALL {
        let config = ModelConfig {
            architecture,
            seed,
            ..base.clone()
        };
        let model = CadModel::<f64>::new(config)?;
        let report = check_model(&model, &x_a, &x_t, &labels, None, step, tol)?;
        say(format_args!(
            "{:<20} {}  max rel err {:.3e}",
            architecture.tag(),
            if report.passed { "pass" } else { "FAIL" },
            report.max_rel_err()
        ))?;
        for p in &report.params {
            say(format_args!(
                "    {:<22} {:>3}x{:<3} rel {:.3e}  abs {:.3e}",
                p.name, p.shape.0, p.shape.1, p.max_rel_err, p.max_abs_err
            ))?;
        }
        checks.push(ArchitectureCheck { architecture, report });
    }
    if let Some(path) = out {
        write_json(path, &checks)?;
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.report.passed).map(|c| c.architecture.tag()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed at tolerance {tol:e} for: {}",
            failed.join(", ")
        )))
    }
}
