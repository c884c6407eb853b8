//! Command-line entry points: `gen-synthetic`, `train`, `eval` and
//! `inspect-attention`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::data::{self, generate, load_dataset, read_sample, Dataset, LabelNorm, Sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::LmacNet;
use crate::params::read_checkpoint;
use crate::rng::RngState;
use crate::scoring::ScoreBreakdown;
use crate::training::metrics::spearman;
use crate::training::{self, evaluate, thread_pool, EpochRecord, TrainOutputs, TrainRecord};

pub const FAILED_MARKER: &str = ".failed";
pub const FINAL_CHECKPOINT: &str = "model.lmac";
const MODEL_INIT_STREAM: u64 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "lmac",
    version,
    about = "Multimodal learnable-query attention network for long-term action quality assessment",
    after_help = "train also accepts dotted config overrides such as `--losses.consistency false`, \
                  `--model.fusion summation` or `--modalities rgb,flow`."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as feature-file triples plus a manifest.
    GenSynthetic {
        /// SyntheticSpec JSON; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and export logs, checkpoints and attention diagnostics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; overrides `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log_out: Option<PathBuf>,
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
    },
    /// Score a dataset split with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config; by default `config.resolved.json` next to the checkpoint or one level up.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
        /// Per-sample score breakdowns as JSON lines; `{out}/breakdown.jsonl` by default.
        #[arg(long)]
        breakdown_out: Option<PathBuf>,
    },
    /// Export per-layer cross-attention weights and centers for one sample.
    InspectAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; defaults to `data.dir` of the run config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

impl Command {
    pub fn out_dir(&self) -> &Path {
        match self {
            Command::GenSynthetic { out, .. }
            | Command::Train { out, .. }
            | Command::Eval { out, .. }
            | Command::InspectAttention { out, .. } => out,
        }
    }
}

/// Pulls dotted overrides (`--a.b value`, `--a.b=value`, `--modalities value`)
/// out of the argument list, leaving the rest for clap.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !(key.contains('.') || key == "modalities") {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("override --{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Parses and runs one command. On failure a `.failed` marker holding the
/// error is left in the output directory.
pub fn main_with_args(args: Vec<String>) -> Result<()> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            e.print().ok();
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let out = cli.command.out_dir().to_path_buf();
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = run(cli.command, &overrides);
    if let Err(e) = &result {
        if fs::create_dir_all(&out).is_ok() {
            fs::write(&marker, format!("{e}\n")).ok();
        }
    }
    result
}

pub fn run(command: Command, overrides: &[(String, String)]) -> Result<()> {
    if !overrides.is_empty() && !matches!(command, Command::Train { .. }) {
        let keys: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
        return Err(Error::Config(format!("config overrides are only accepted by train, got {keys:?}")));
    }
    match command {
        Command::GenSynthetic { spec, out } => gen_synthetic(spec.as_deref(), &out).map(|_| ()),
        Command::Train {
            config,
            data,
            out,
            log_out,
            ckpt_dir,
        } => {
            let mut cfg = RunConfig::load(config.as_deref(), overrides)?;
            if data.is_some() {
                cfg.data.dir = data;
            }
            if log_out.is_some() {
                cfg.output.log = log_out;
            }
            if ckpt_dir.is_some() {
                cfg.output.ckpt_dir = ckpt_dir;
            }
            train_run(&cfg, &out).map(|_| ())
        }
        Command::Eval {
            ckpt,
            data,
            out,
            config,
            split,
            breakdown_out,
        } => eval_run(&ckpt, &data, &out, config.as_deref(), split, breakdown_out.as_deref()).map(|_| ()),
        Command::InspectAttention {
            ckpt,
            sample,
            out,
            data,
            config,
        } => inspect_attention(&ckpt, &sample, &out, data.as_deref(), config.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn gen_synthetic(spec_path: Option<&Path>, out: &Path) -> Result<Dataset> {
    let spec: SyntheticSpec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    spec.validate()?;
    let ds = generate(&spec)?;
    create_dir(out)?;
    data::write_dataset(out, &ds)?;
    write_json(&out.join("synthetic.json"), &spec)?;
    info!(
        "wrote {} train and {} test samples to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(ds)
}

fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    let mods = cfg.model.ordered_modalities();
    match &cfg.data.dir {
        Some(dir) => load_dataset(dir, &mods),
        None => {
            info!("no data directory given; generating the configured synthetic dataset in memory");
            let mut ds = generate(&cfg.data.synthetic)?;
            ds.restrict(&mods);
            Ok(ds)
        }
    }
}

/// What `train` leaves in `{out}/summary.json`.
#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    final_epoch: Option<&'a EpochRecord>,
    tracked: &'a [String],
    label_norm: LabelNorm,
    steps: usize,
}

pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<TrainRecord> {
    cfg.validate()?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let ds = load_or_generate(cfg)?;
    let mut model = LmacNet::<f32>::new(
        cfg.model.clone(),
        &ds.dims(),
        &mut RngState::new(cfg.optim.seed).child(MODEL_INIT_STREAM),
    )?;
    info!(
        "model with {} parameters over {:?}; {} train / {} test samples",
        model.store.numel(),
        model.modalities(),
        ds.train.len(),
        ds.test.len()
    );
    let log_path = cfg.output.log_path(out);
    if let Some(parent) = log_path.parent() {
        create_dir(parent)?;
    }
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let ckpt_dir = cfg.output.ckpt_path(out);
    if cfg.output.epoch_checkpoints {
        create_dir(&ckpt_dir)?;
    }
    let rec = training::train(
        &mut model,
        &ds,
        &cfg.losses,
        &cfg.optim,
        TrainOutputs {
            log: Some(&mut log),
            ckpt_dir: cfg.output.epoch_checkpoints.then_some(ckpt_dir.as_path()),
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    model.store.save(&out.join(FINAL_CHECKPOINT))?;
    write_csv(&out.join("attention_centers.csv"), &rec.centers)?;
    write_csv(&out.join("alignment.csv"), &rec.alignment)?;
    write_csv(&out.join("epochs.csv"), &rec.epochs)?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            final_epoch: rec.final_epoch(),
            tracked: &rec.tracked,
            label_norm: rec.label_norm,
            steps: rec.steps.len(),
        },
    )?;
    Ok(rec)
}

/// Finds the run config for a checkpoint: explicit path, else
/// `config.resolved.json` beside the checkpoint or in its parent directory.
pub fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(Some(p), &[]);
    }
    let mut dir = ckpt.parent();
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let candidate = d.join(RESOLVED_CONFIG);
        if candidate.exists() {
            return RunConfig::load(Some(&candidate), &[]);
        }
        dir = d.parent();
    }
    Err(Error::Config(format!(
        "no {RESOLVED_CONFIG} found near {}; pass --config",
        ckpt.display()
    )))
}

fn load_model(cfg: &RunConfig, ds_dims: &[(Modality, usize)], ckpt: &Path) -> Result<LmacNet<f32>> {
    let mut model = LmacNet::<f32>::new(cfg.model.clone(), ds_dims, &mut RngState::new(0))?;
    model
        .store
        .load(read_checkpoint(ckpt)?)
        .map_err(|e| Error::Config(format!("{}: {e}", ckpt.display())))?;
    Ok(model)
}

#[derive(Debug, Serialize)]
struct PredictionRow<'a> {
    stem: &'a str,
    split: &'static str,
    label: f64,
    prediction_normalized: f64,
    prediction: f64,
}

#[derive(Debug, Serialize)]
struct BreakdownLine<'a> {
    stem: &'a str,
    #[serde(flatten)]
    breakdown: &'a ScoreBreakdown,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub spearman: Option<f64>,
    pub label_norm: LabelNorm,
}

pub fn eval_run(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    split: SplitChoice,
    breakdown_out: Option<&Path>,
) -> Result<EvalReport> {
    let cfg = config_for_checkpoint(ckpt, config)?;
    let ds = load_dataset(data_dir, &cfg.model.ordered_modalities())?;
    let model = load_model(&cfg, &ds.dims(), ckpt)?;
    let norm = LabelNorm::fit(&ds.train.iter().map(|s| s.label).collect::<Vec<_>>())?;
    let chosen: Vec<(&'static str, &Sample)> = match split {
        SplitChoice::Train => ds.train.iter().map(|s| ("train", s)).collect(),
        SplitChoice::Test => ds.test.iter().map(|s| ("test", s)).collect(),
        SplitChoice::All => ds
            .train
            .iter()
            .map(|s| ("train", s))
            .chain(ds.test.iter().map(|s| ("test", s)))
            .collect(),
    };
    if chosen.is_empty() {
        return Err(Error::Data(format!("the {split:?} split is empty")));
    }
    let samples: Vec<Sample> = chosen.iter().map(|(_, s)| (*s).clone()).collect();
    let evals = thread_pool()?.install(|| evaluate(&model, &samples, cfg.losses.center_agg))?;
    create_dir(out)?;
    let rows: Vec<PredictionRow> = chosen
        .iter()
        .zip(&evals)
        .map(|((split, s), e)| PredictionRow {
            stem: &s.stem,
            split,
            label: s.label,
            prediction_normalized: e.prediction,
            prediction: norm.invert(e.prediction),
        })
        .collect();
    write_csv(&out.join("predictions.csv"), &rows)?;
    let bpath = breakdown_out.map(Path::to_path_buf).unwrap_or_else(|| out.join("breakdown.jsonl"));
    let mut bw = BufWriter::new(File::create(&bpath).map_err(|e| Error::io(&bpath, e))?);
    for e in &evals {
        let line = serde_json::to_string(&BreakdownLine {
            stem: &e.stem,
            breakdown: &e.breakdown,
        })?;
        writeln!(bw, "{line}").map_err(|err| Error::io(&bpath, err))?;
    }
    bw.flush().map_err(|e| Error::io(&bpath, e))?;
    let preds: Vec<f64> = evals.iter().map(|e| e.prediction).collect();
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let report = EvalReport {
        samples: samples.len(),
        spearman: spearman(&preds, &labels).ok(),
        label_norm: norm,
    };
    write_json(&out.join("eval.json"), &report)?;
    info!("spearman over {} samples: {:?}", report.samples, report.spearman);
    Ok(report)
}

#[derive(Debug, Serialize)]
struct AttentionRow {
    modality: Modality,
    layer: usize,
    query: usize,
    t: usize,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct SampleCenterRow {
    modality: Modality,
    query: usize,
    center: f64,
}

/// Writes `attention.csv` (modality, layer, query, t, weight; 1-based
/// indices) and `centers.csv` for one sample.
pub fn inspect_attention(
    ckpt: &Path,
    stem: &str,
    out: &Path,
    data_dir: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = config_for_checkpoint(ckpt, config)?;
    let dir = data_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| Error::Config("no dataset directory: pass --data".into()))?;
    let mods = cfg.model.ordered_modalities();
    let sample = read_sample(&dir, stem, &mods)?;
    let dims: Vec<_> = sample.sequences.iter().map(|s| (s.modality, s.dim())).collect();
    let model = load_model(&cfg, &dims, ckpt)?;
    let e = training::evaluate_sample(&model, &sample, cfg.losses.center_agg)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for (m, layers) in e.modalities.iter().zip(&e.layers) {
        for (l, a) in layers.iter().enumerate() {
            for (k, row) in a.iter().enumerate() {
                for (t, &w) in row.iter().enumerate() {
                    rows.push(AttentionRow {
                        modality: *m,
                        layer: l + 1,
                        query: k + 1,
                        t: t + 1,
                        weight: w,
                    });
                }
            }
        }
    }
    write_csv(&out.join("attention.csv"), &rows)?;
    let centers: Vec<SampleCenterRow> = e
        .modalities
        .iter()
        .zip(&e.centers)
        .flat_map(|(m, cs)| {
            cs.iter().enumerate().map(|(k, &c)| SampleCenterRow {
                modality: *m,
                query: k + 1,
                center: c,
            })
        })
        .collect();
    write_csv(&out.join("centers.csv"), &centers)?;
    write_json(&out.join("breakdown.json"), &e.breakdown)?;
    Ok(())
}
