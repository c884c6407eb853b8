use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Evaluation("correlation is undefined for a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(Error::Evaluation(format!(
            "spearman needs two equal-length sequences of at least 2 values, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
}

const Z_LIMIT: f64 = 1.0 - 1e-7;

/// `tanh(mean(atanh(ρ_i)))`; coefficients at ±1 are pulled in to ±(1 − 1e-7).
pub fn fisher_z_average(rhos: &[f64]) -> Result<f64> {
    if rhos.is_empty() {
        return Err(Error::Evaluation("no correlations to average".into()));
    }
    let mut acc = 0.0;
    for &r in rhos {
        if !(-1.0..=1.0).contains(&r) {
            return Err(Error::Evaluation(format!("correlation {r} outside [-1, 1]")));
        }
        let r = if r.abs() > Z_LIMIT {
            warn!("clamping correlation {r} before the z-transform");
            r.clamp(-Z_LIMIT, Z_LIMIT)
        } else {
            r
        };
        acc += r.atanh();
    }
    Ok((acc / rhos.len() as f64).tanh())
}

/// Modality pair order used by every alignment export.
pub fn pair_name(a: &str, b: &str) -> String {
    format!("{a}-{b}")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairAlignment {
    pub pair: String,
    /// `|ᾱ_k^i − ᾱ_k^j|` averaged over queries.
    pub center_distance: f64,
    /// Cosine of aggregated attention rows, averaged over queries.
    pub cosine: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Alignment of one sample. `centers[m][k]`, `attention[m][k][t]`, `names[m]`.
pub fn alignment_metrics(names: &[&str], centers: &[Vec<f64>], attention: &[Vec<Vec<f64>>]) -> Vec<PairAlignment> {
    let mut out = Vec::new();
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let k = centers[i].len() as f64;
            let dist = centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / k;
            let cos = attention[i].iter().zip(&attention[j]).map(|(a, b)| cosine(a, b)).sum::<f64>() / k;
            out.push(PairAlignment {
                pair: pair_name(names[i], names[j]),
                center_distance: dist,
                cosine: cos,
            });
        }
    }
    out
}
