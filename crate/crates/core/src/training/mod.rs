//! Optimization loop, evaluation and alignment diagnostics.

pub mod metrics;
pub mod optim;

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::data::{Dataset, LabelNorm, Sample};
use crate::error::{Error, Result};
use crate::losses::{attention_centers, objective, CenterAggregation, LossConfig, LossRecord};
use crate::modality::Modality;
use crate::model::LmacNet;
use crate::rng::RngState;
use crate::scoring::ScoreBreakdown;
use crate::tensor::Tensor;

use metrics::{alignment_metrics, spearman, PairAlignment};
use optim::{AdamW, OptimConfig};

const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;
const TRACK_STREAM: u64 = 4;

/// Pool sized by `LMAC_THREADS` when set. Results never depend on the
/// thread count: per-sample work is collected in order and reduced serially.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("LMAC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("LMAC_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Everything recorded for one evaluated sample.
#[derive(Clone, Debug)]
pub struct SampleEval {
    pub stem: String,
    /// Normalized-scale prediction.
    pub prediction: f64,
    pub breakdown: ScoreBreakdown,
    pub modalities: Vec<Modality>,
    /// `[modality][query]`
    pub centers: Vec<Vec<f64>>,
    /// Aggregated attention, `[modality][query][t]`.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Per-layer attention, `[modality][layer][query][t]`.
    pub layers: Vec<Vec<Vec<Vec<f64>>>>,
}

impl SampleEval {
    pub fn alignment(&self) -> Vec<PairAlignment> {
        let names: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        alignment_metrics(&names, &self.centers, &self.attention)
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|k| t.row(k).iter().map(|&x| x as f64).collect())
        .collect()
}

/// Eval-mode forward pass of one sample.
pub fn evaluate_sample(model: &LmacNet<f32>, sample: &Sample, agg: CenterAggregation) -> Result<SampleEval> {
    let mut g = Graph::new();
    let b = model.store.bind(&mut g);
    let fwd = model.forward(&mut g, &b, &sample.sequences)?;
    let attention: Vec<(Modality, Vec<_>)> = fwd
        .branches
        .iter()
        .map(|(m, o)| (*m, o.attention.clone()))
        .collect();
    let centers = attention_centers(&mut g, &attention, agg)?;
    let layers = attention
        .iter()
        .map(|(_, ls)| ls.iter().map(|&a| rows(g.value(a))).collect())
        .collect();
    Ok(SampleEval {
        stem: sample.stem.clone(),
        prediction: g.scalar_value(fwd.score.final_score) as f64,
        breakdown: ScoreBreakdown::from_output(&g, &fwd.score),
        modalities: centers.modalities.clone(),
        centers: centers.values(&g),
        attention: centers.attention_values(&g),
        layers,
    })
}

pub fn evaluate(model: &LmacNet<f32>, samples: &[Sample], agg: CenterAggregation) -> Result<Vec<SampleEval>> {
    samples.par_iter().map(|s| evaluate_sample(model, s, agg)).collect()
}

/// Test-split summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalSummary {
    pub spearman: Option<f64>,
    /// Mean over samples, modality pairs and queries.
    pub center_distance: Option<f64>,
    pub cosine: Option<f64>,
}

pub fn summarize(evals: &[SampleEval], labels: &[f64]) -> EvalSummary {
    let preds: Vec<f64> = evals.iter().map(|e| e.prediction).collect();
    let rho = spearman(&preds, labels).ok();
    let pairs: Vec<PairAlignment> = evals.iter().flat_map(|e| e.alignment()).collect();
    let (dist, cos) = if pairs.is_empty() {
        (None, None)
    } else {
        let n = pairs.len() as f64;
        (
            Some(pairs.iter().map(|p| p.center_distance).sum::<f64>() / n),
            Some(pairs.iter().map(|p| p.cosine).sum::<f64>() / n),
        )
    };
    EvalSummary {
        spearman: rho,
        center_distance: dist,
        cosine: cos,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_spearman: Option<f64>,
    pub center_distance: Option<f64>,
    pub cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CenterRow {
    pub epoch: usize,
    pub sample: String,
    pub modality: Modality,
    pub query: usize,
    pub center: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub epoch: usize,
    pub sample: String,
    pub pair: String,
    pub center_distance: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub steps: Vec<LossRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch 0 is the initialization.
    pub centers: Vec<CenterRow>,
    pub alignment: Vec<AlignmentRow>,
    pub tracked: Vec<String>,
    pub label_norm: LabelNorm,
}

impl TrainRecord {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Destinations for the metric stream and per-epoch checkpoints.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub log: Option<&'a mut (dyn Write + Send)>,
    pub ckpt_dir: Option<&'a Path>,
}

fn snapshot(
    model: &LmacNet<f32>,
    tracked: &[&Sample],
    agg: CenterAggregation,
    epoch: usize,
    rec: &mut TrainRecord,
) -> Result<()> {
    for s in tracked {
        let e = evaluate_sample(model, s, agg)?;
        for (m, cs) in e.modalities.iter().zip(&e.centers) {
            for (k, &c) in cs.iter().enumerate() {
                rec.centers.push(CenterRow {
                    epoch,
                    sample: s.stem.clone(),
                    modality: *m,
                    query: k + 1,
                    center: c,
                });
            }
        }
        for p in e.alignment() {
            rec.alignment.push(AlignmentRow {
                epoch,
                sample: s.stem.clone(),
                pair: p.pair,
                center_distance: p.center_distance,
                cosine: p.cosine,
            });
        }
    }
    Ok(())
}

fn json_line<T: Serialize>(out: &mut Option<&mut (dyn Write + Send)>, value: &T) -> Result<()> {
    if let Some(w) = out {
        let line = serde_json::to_string(value)?;
        writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
    }
    Ok(())
}

/// Gradient of one sample's objective, flattened to f64 per parameter.
fn sample_gradients(
    model: &LmacNet<f32>,
    sample: &Sample,
    target: f64,
    losses: &LossConfig,
    rng: RngState,
    step: usize,
) -> Result<(Vec<Vec<f64>>, LossRecord)> {
    let mut g = Graph::training(rng);
    g.set_checked(true);
    let b = model.store.bind(&mut g);
    let fwd = model
        .forward(&mut g, &b, &sample.sequences)
        .map_err(|e| Error::Training { step, detail: e.to_string() })?;
    let attention: Vec<(Modality, Vec<_>)> = fwd
        .branches
        .iter()
        .map(|(m, o)| (*m, o.attention.clone()))
        .collect();
    let (report, _) = objective(&mut g, fwd.score.final_score, target, &attention, losses)
        .map_err(|e| Error::Training { step, detail: e.to_string() })?;
    let record = LossRecord::read(&g, &report, step as u64);
    if !record.total.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("non-finite loss on sample {}", sample.stem),
        });
    }
    let grads = g.backward(report.total)?;
    let flat = model
        .store
        .gradients(&b, &grads)
        .into_iter()
        .map(|t| t.data().iter().map(|&x| x as f64).collect())
        .collect();
    Ok((flat, record))
}

/// Trains `model` on `ds.train`, evaluating on `ds.test` after every epoch.
pub fn train(model: &mut LmacNet<f32>, ds: &Dataset, losses: &LossConfig, optim: &OptimConfig, mut out: TrainOutputs<'_>) -> Result<TrainRecord> {
    optim.validate()?;
    losses.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut losses = losses.clone();
    if model.branches.len() < 2 && losses.consistency {
        warn!("consistency loss needs two modalities; disabled for this single-modality model");
        losses.consistency = false;
    }
    let train_labels: Vec<f64> = ds.train.iter().map(|s| s.label).collect();
    let norm = LabelNorm::fit(&train_labels)?;
    let targets: Vec<f64> = train_labels.iter().map(|&y| norm.apply(y)).collect();
    let test_labels: Vec<f64> = ds.test.iter().map(|s| norm.apply(s.label)).collect();

    let root = RngState::new(optim.seed);
    let mut track_order: Vec<usize> = (0..ds.train.len()).collect();
    root.child(TRACK_STREAM).shuffle(&mut track_order);
    let tracked: Vec<&Sample> = track_order
        .iter()
        .take(optim.tracked_samples)
        .map(|&i| &ds.train[i])
        .collect();
    let mut rec = TrainRecord {
        steps: Vec::new(),
        epochs: Vec::new(),
        centers: Vec::new(),
        alignment: Vec::new(),
        tracked: tracked.iter().map(|s| s.stem.clone()).collect(),
        label_norm: norm,
    };

    let pool = thread_pool()?;
    let steps_per_epoch = ds.train.len().div_ceil(optim.batch_size);
    let total_steps = steps_per_epoch * optim.epochs;
    let mut shuffle = root.child(SHUFFLE_STREAM);
    let dropout_root = root.child(DROPOUT_STREAM);
    let mut opt = AdamW::new(&model.store);
    let mut step = 0usize;
    let mut drawn = 0u64;

    pool.install(|| -> Result<()> {
        snapshot(model, &tracked, losses.center_agg, 0, &mut rec)?;
        for epoch in 1..=optim.epochs {
            let mut order: Vec<usize> = (0..ds.train.len()).collect();
            shuffle.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            let mut lr = optim.learning_rate(step, total_steps);
            for batch in order.chunks(optim.batch_size) {
                lr = optim.learning_rate(step, total_steps);
                let results: Vec<(Vec<Vec<f64>>, LossRecord)> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let rng = dropout_root.fork(drawn + j as u64);
                        sample_gradients(model, &ds.train[i], targets[i], &losses, rng, step)
                    })
                    .collect::<Result<_>>()?;
                drawn += batch.len() as u64;
                let n = batch.len() as f64;
                let mut grads: Vec<Vec<f64>> = results[0].0.iter().map(|g| vec![0.0; g.len()]).collect();
                for (gs, _) in &results {
                    for (acc, g) in grads.iter_mut().zip(gs) {
                        for (a, x) in acc.iter_mut().zip(g) {
                            *a += x / n;
                        }
                    }
                }
                let records: Vec<LossRecord> = results.into_iter().map(|(_, r)| r).collect();
                let mean = LossRecord::mean(&records, step as u64);
                opt.step(&mut model.store, &grads, lr, optim)
                    .map_err(|e| Error::Training { step, detail: e.to_string() })?;
                model.clamp_temperatures();
                json_line(&mut out.log, &mean)?;
                epoch_loss += mean.total * n;
                rec.steps.push(mean);
                step += 1;
            }
            let evals = evaluate(model, &ds.test, losses.center_agg)?;
            let summary = summarize(&evals, &test_labels);
            let er = EpochRecord {
                epoch,
                lr,
                train_loss: epoch_loss / ds.train.len() as f64,
                test_spearman: summary.spearman,
                center_distance: summary.center_distance,
                cosine: summary.cosine,
            };
            info!(
                "epoch {epoch}: train loss {:.5}, test spearman {:?}, center distance {:?}",
                er.train_loss, er.test_spearman, er.center_distance
            );
            json_line(&mut out.log, &er)?;
            rec.epochs.push(er);
            snapshot(model, &tracked, losses.center_agg, epoch, &mut rec)?;
            if let Some(dir) = out.ckpt_dir {
                model.store.save(&dir.join(format!("epoch{epoch}.lmac")))?;
            }
        }
        Ok(())
    })?;
    Ok(rec)
}
