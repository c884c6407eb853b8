//! Attention centers and the training objective.
//!
//! The center of query `k` in modality `m` is `ᾱ = Σ_t t · α_kt` with
//! 1-based `t`, taken over the layer-averaged cross-attention. The feature
//! loss combines
//!
//! ```text
//! rank        Σ_k max(0, ᾱ_k − ᾱ_{k+1} + d) + max(0, 1 − ᾱ_1 + d) + max(0, ᾱ_K − T + d)
//! sparsity    Σ_k Σ_t |t − ᾱ_k| · α_kt
//! consistency Σ_k Σ_{i<j} (ᾱ_k^i − ᾱ_k^j)²
//! ```
//!
//! and the total is `λ1 · score + λ2 · (rank + sparsity + consistency)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::mean_of;
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterAggregation {
    Mean,
    LastLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_rank: PerModality<f64>,
    pub lambda_sparsity: PerModality<f64>,
    /// Rank margin in segments; `None` means `T / (2K)`.
    pub margin: Option<f64>,
    pub rank: bool,
    pub sparsity: bool,
    pub consistency: bool,
    pub center_agg: CenterAggregation,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 0.003,
            lambda_rank: PerModality::splat(1.0),
            lambda_sparsity: PerModality::splat(0.1),
            margin: None,
            rank: true,
            sparsity: true,
            consistency: true,
            center_agg: CenterAggregation::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut weights = vec![("lambda1", self.lambda1), ("lambda2", self.lambda2)];
        for m in Modality::ALL {
            weights.push(("lambda_rank", self.lambda_rank.get(m)));
            weights.push(("lambda_sparsity", self.lambda_sparsity.get(m)));
        }
        if let Some(d) = self.margin {
            weights.push(("margin", d));
        }
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {w}")));
            }
        }
        Ok(())
    }

    pub fn margin_for(&self, t: usize, k: usize) -> f64 {
        self.margin.unwrap_or(t as f64 / (2 * k) as f64)
    }
}

/// Per-modality centers and aggregated attention of one sample.
#[derive(Clone, Debug)]
pub struct AttentionCenters {
    pub modalities: Vec<Modality>,
    /// `[K, 1]` per modality.
    pub centers: Vec<Var>,
    /// `[K, T]` per modality.
    pub aggregated: Vec<Var>,
    pub segments: usize,
}

impl AttentionCenters {
    pub fn queries<S: Scalar>(&self, g: &Graph<S>) -> usize {
        g.shape(self.centers[0])[0]
    }

    /// Center values as `[modality][query]`.
    pub fn values<S: Scalar>(&self, g: &Graph<S>) -> Vec<Vec<f64>> {
        self.centers
            .iter()
            .map(|&c| g.value(c).data().iter().map(|x| x.f64()).collect())
            .collect()
    }

    /// Aggregated attention as `[modality][query][t]`.
    pub fn attention_values<S: Scalar>(&self, g: &Graph<S>) -> Vec<Vec<Vec<f64>>> {
        self.aggregated
            .iter()
            .map(|&a| {
                let t = g.value(a);
                (0..t.rows())
                    .map(|k| t.row(k).iter().map(|x| x.f64()).collect())
                    .collect()
            })
            .collect()
    }
}

fn index_column<S: Scalar>(t: usize) -> Tensor<S> {
    let v: Vec<f64> = (1..=t).map(|i| i as f64).collect();
    Tensor::from_f64(&[t, 1], &v).expect("shape and data agree")
}

/// Reduces each modality's per-layer `[K, T]` attention to one distribution
/// per query and takes its center.
pub fn attention_centers<S: Scalar>(
    g: &mut Graph<S>,
    per_modality: &[(Modality, Vec<Var>)],
    agg: CenterAggregation,
) -> Result<AttentionCenters> {
    if per_modality.is_empty() {
        return Err(Error::shape("attention_centers", "no modalities"));
    }
    let mut out = AttentionCenters {
        modalities: Vec::new(),
        centers: Vec::new(),
        aggregated: Vec::new(),
        segments: 0,
    };
    let mut shape: Option<Vec<usize>> = None;
    for (m, layers) in per_modality {
        let Some(&last) = layers.last() else {
            return Err(Error::shape("attention_centers", format!("{m} has no attention layers")));
        };
        for &a in layers {
            let s = g.shape(a).to_vec();
            if s.len() != 2 || shape.as_ref().is_some_and(|s0| *s0 != s) {
                return Err(Error::shape(
                    "attention_centers",
                    format!("attention of {m} has shape {s:?}, expected {shape:?}"),
                ));
            }
            shape = Some(s);
            if g.is_checked() {
                let v = g.value(a);
                for k in 0..v.rows() {
                    let sum: f64 = v.row(k).iter().map(|x| x.f64()).sum();
                    if (sum - 1.0).abs() > 1e-4 {
                        return Err(Error::Domain(format!(
                            "attention row {k} of {m} sums to {sum}, not 1"
                        )));
                    }
                }
            }
        }
        let a = match agg {
            CenterAggregation::Mean => mean_of(g, layers)?,
            CenterAggregation::LastLayer => last,
        };
        let t = g.value(a).cols();
        let idx = g.constant(index_column(t));
        out.centers.push(g.matmul(a, idx)?);
        out.aggregated.push(a);
        out.modalities.push(*m);
        out.segments = t;
    }
    Ok(out)
}

/// Mean squared error over a batch of `[1]` predictions.
pub fn score_loss<S: Scalar>(g: &mut Graph<S>, pred: &[Var], truth: &[f64]) -> Result<Var> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(
            "score_loss",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(truth) {
        let diff = g.add_const(p, -y)?;
        terms.push(g.square(diff)?);
    }
    let all = g.concat(&terms)?;
    g.mean(all)
}

/// Ordering hinges between neighbouring centers plus the two boundary hinges.
pub fn rank_loss<S: Scalar>(g: &mut Graph<S>, c: &AttentionCenters, cfg: &LossConfig) -> Result<Var> {
    let k = c.queries(g);
    let t = c.segments as f64;
    let d = cfg.margin_for(c.segments, k);
    let mut total = g.scalar(0.0);
    for (&m, &centers) in c.modalities.iter().zip(&c.centers) {
        let mut first_sel = vec![0.0; k];
        first_sel[0] = 1.0;
        let mut last_sel = vec![0.0; k];
        last_sel[k - 1] = 1.0;
        let e1 = g.constant(Tensor::from_f64(&[1, k], &first_sel)?);
        let ek = g.constant(Tensor::from_f64(&[1, k], &last_sel)?);
        let c1 = g.matmul(e1, centers)?;
        let ck = g.matmul(ek, centers)?;
        let lower = g.scale(c1, -1.0)?;
        let lower = g.add_const(lower, 1.0 + d)?;
        let lower = g.relu(lower)?;
        let upper = g.add_const(ck, d - t)?;
        let upper = g.relu(upper)?;
        let mut term = g.add(lower, upper)?;
        if k > 1 {
            let mut diff = vec![0.0; (k - 1) * k];
            for i in 0..k - 1 {
                diff[i * k + i] = 1.0;
                diff[i * k + i + 1] = -1.0;
            }
            let dm = g.constant(Tensor::from_f64(&[k - 1, k], &diff)?);
            let gaps = g.matmul(dm, centers)?;
            let gaps = g.add_const(gaps, d)?;
            let hinge = g.relu(gaps)?;
            let order = g.sum(hinge)?;
            term = g.add(term, order)?;
        }
        let term = g.reshape(term, &[1])?;
        let term = g.scale(term, cfg.lambda_rank.get(m))?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Absolute deviation of each query's attention about its center.
pub fn sparsity_loss<S: Scalar>(g: &mut Graph<S>, c: &AttentionCenters, cfg: &LossConfig) -> Result<Var> {
    let k = c.queries(g);
    let t = c.segments;
    let grid: Vec<f64> = (0..k).flat_map(|_| (1..=t).map(|i| i as f64)).collect();
    let mut total = g.scalar(0.0);
    for ((&m, &centers), &a) in c.modalities.iter().zip(&c.centers).zip(&c.aggregated) {
        let grid = g.constant(Tensor::from_f64(&[k, t], &grid)?);
        let ones = g.constant(Tensor::ones(&[1, t]));
        let spread = g.matmul(centers, ones)?;
        let dev = g.sub(grid, spread)?;
        let dev = g.abs(dev)?;
        let weighted = g.mul(dev, a)?;
        let term = g.sum(weighted)?;
        let term = g.scale(term, cfg.lambda_sparsity.get(m))?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Squared center differences over every unordered modality pair, per query.
pub fn consistency_loss<S: Scalar>(g: &mut Graph<S>, c: &AttentionCenters) -> Result<Var> {
    let m = c.centers.len();
    if m < 2 {
        return Err(Error::Config(format!(
            "consistency loss needs at least two modalities, got {m}"
        )));
    }
    let mut total = g.scalar(0.0);
    for i in 0..m {
        for j in i + 1..m {
            let diff = g.sub(c.centers[i], c.centers[j])?;
            let sq = g.square(diff)?;
            let s = g.sum(sq)?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub score: Var,
    pub rank: Var,
    pub sparsity: Var,
    pub consistency: Var,
}

/// Every term stays attached to the graph.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub score: Var,
    pub rank: Var,
    pub sparsity: Var,
    pub consistency: Var,
    pub total: Var,
}

/// `λ1 · score + λ2 · (rank + sparsity + consistency)`; toggled-off terms
/// are replaced by an exact zero.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, parts: LossParts, cfg: &LossConfig) -> Result<LossReport> {
    let rank = if cfg.rank { parts.rank } else { g.scalar(0.0) };
    let sparsity = if cfg.sparsity { parts.sparsity } else { g.scalar(0.0) };
    let consistency = if cfg.consistency { parts.consistency } else { g.scalar(0.0) };
    let feature = g.add(rank, sparsity)?;
    let feature = g.add(feature, consistency)?;
    let feature = g.scale(feature, cfg.lambda2)?;
    let score = g.scale(parts.score, cfg.lambda1)?;
    let total = g.add(score, feature)?;
    Ok(LossReport {
        score: parts.score,
        rank,
        sparsity,
        consistency,
        total,
    })
}

/// Full per-sample objective. Disabled terms are never built, so a
/// single-modality model may run with consistency switched off.
pub fn objective<S: Scalar>(
    g: &mut Graph<S>,
    prediction: Var,
    label: f64,
    attention: &[(Modality, Vec<Var>)],
    cfg: &LossConfig,
) -> Result<(LossReport, AttentionCenters)> {
    let centers = attention_centers(g, attention, cfg.center_agg)?;
    let score = score_loss(g, &[prediction], &[label])?;
    let rank = if cfg.rank { rank_loss(g, &centers, cfg)? } else { g.scalar(0.0) };
    let sparsity = if cfg.sparsity {
        sparsity_loss(g, &centers, cfg)?
    } else {
        g.scalar(0.0)
    };
    let consistency = if cfg.consistency {
        consistency_loss(g, &centers)?
    } else {
        g.scalar(0.0)
    };
    let parts = LossParts {
        score,
        rank,
        sparsity,
        consistency,
    };
    Ok((total_loss(g, parts, cfg)?, centers))
}

/// Plain values of a [`LossReport`], one JSON line per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub score: f64,
    pub rank: f64,
    pub sparsity: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn read<S: Scalar>(g: &Graph<S>, r: &LossReport, step: u64) -> Self {
        let v = |x: Var| g.scalar_value(x).f64();
        LossRecord {
            step,
            score: v(r.score),
            rank: v(r.rank),
            sparsity: v(r.sparsity),
            consistency: v(r.consistency),
            total: v(r.total),
        }
    }

    /// Averages the terms of several records; `step` is taken from `step`.
    pub fn mean(records: &[LossRecord], step: u64) -> Self {
        let n = records.len().max(1) as f64;
        let mut out = LossRecord {
            step,
            ..LossRecord::default()
        };
        for r in records {
            out.score += r.score / n;
            out.rank += r.rank / n;
            out.sparsity += r.sparsity / n;
            out.consistency += r.consistency / n;
            out.total += r.total / n;
        }
        out
    }
}
