//! Naive-loop reference implementations of the losses and the score head.

use lmac::autodiff::Graph;
use lmac::losses::{
    attention_centers, consistency_loss, rank_loss, score_loss, sparsity_loss, CenterAggregation, LossConfig,
};
use lmac::modality::{Modality, PerModality};
use lmac::rng::RngState;
use lmac::Tensor;

/// `[query][t]`
pub type Rows = Vec<Vec<f64>>;

#[derive(Clone, Debug)]
pub struct LossInstance {
    pub segments: usize,
    pub modalities: Vec<Modality>,
    /// `[modality][layer]`
    pub attention: Vec<Vec<Rows>>,
    pub cfg: LossConfig,
    pub preds: Vec<f64>,
    pub labels: Vec<f64>,
}

fn softmax_rows(rng: &mut RngState, k: usize, t: usize, sharpness: f64) -> Rows {
    (0..k)
        .map(|_| {
            let logits: Vec<f64> = (0..t).map(|_| sharpness * rng.normal()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            logits.iter().map(|l| (l - m).exp() / z).collect()
        })
        .collect()
}

pub fn random_instance(rng: &mut RngState, min_modalities: usize) -> LossInstance {
    let t = rng.int_in(2, 16) as usize;
    let k = rng.int_in(1, 6) as usize;
    let layers = rng.int_in(1, 3) as usize;
    let m = rng.int_in(min_modalities as i64, 3) as usize;
    let modalities = Modality::ALL[..m].to_vec();
    let sharpness = rng.uniform_in(0.5, 4.0);
    let attention = (0..m)
        .map(|_| (0..layers).map(|_| softmax_rows(rng, k, t, sharpness)).collect())
        .collect();
    let mut weights = || PerModality {
        rgb: rng.uniform_in(0.0, 2.0),
        flow: rng.uniform_in(0.0, 2.0),
        audio: rng.uniform_in(0.0, 2.0),
    };
    let lambda_rank = weights();
    let lambda_sparsity = weights();
    let margin = if rng.uniform() < 0.5 { None } else { Some(rng.uniform_in(0.0, 3.0)) };
    let n = rng.int_in(1, 8) as usize;
    let preds = (0..n).map(|_| rng.normal()).collect();
    let labels = (0..n).map(|_| rng.uniform()).collect();
    LossInstance {
        segments: t,
        modalities,
        attention,
        cfg: LossConfig {
            lambda_rank,
            lambda_sparsity,
            margin,
            center_agg: if rng.uniform() < 0.5 { CenterAggregation::Mean } else { CenterAggregation::LastLayer },
            ..LossConfig::default()
        },
        preds,
        labels,
    }
}

/// Layer-aggregated attention `[modality][query][t]`.
pub fn naive_aggregate(inst: &LossInstance) -> Vec<Rows> {
    inst.attention
        .iter()
        .map(|layers| match inst.cfg.center_agg {
            CenterAggregation::LastLayer => layers.last().unwrap().clone(),
            CenterAggregation::Mean => {
                let (k, t) = (layers[0].len(), layers[0][0].len());
                let mut acc = vec![vec![0.0; t]; k];
                for l in layers {
                    for q in 0..k {
                        for s in 0..t {
                            acc[q][s] += l[q][s] / layers.len() as f64;
                        }
                    }
                }
                acc
            }
        })
        .collect()
}

/// `c_k = Σ_t t · α_kt`, 1-based `t`.
pub fn naive_centers(agg: &[Rows]) -> Vec<Vec<f64>> {
    agg.iter()
        .map(|rows| {
            rows.iter()
                .map(|r| r.iter().enumerate().map(|(i, a)| (i + 1) as f64 * a).sum())
                .collect()
        })
        .collect()
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

pub fn naive_rank(inst: &LossInstance, centers: &[Vec<f64>]) -> f64 {
    let t = inst.segments as f64;
    let mut total = 0.0;
    for (m, c) in inst.modalities.iter().zip(centers) {
        let k = c.len();
        let d = inst.cfg.margin.unwrap_or(t / (2.0 * k as f64));
        let mut term = hinge(1.0 - c[0] + d) + hinge(c[k - 1] - t + d);
        for i in 0..k - 1 {
            term += hinge(c[i] - c[i + 1] + d);
        }
        total += inst.cfg.lambda_rank.get(*m) * term;
    }
    total
}

pub fn naive_sparsity(inst: &LossInstance, agg: &[Rows], centers: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for ((m, rows), c) in inst.modalities.iter().zip(agg).zip(centers) {
        let mut term = 0.0;
        for (row, ck) in rows.iter().zip(c) {
            for (i, a) in row.iter().enumerate() {
                term += ((i + 1) as f64 - ck).abs() * a;
            }
        }
        total += inst.cfg.lambda_sparsity.get(*m) * term;
    }
    total
}

pub fn naive_consistency(centers: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            for (a, b) in centers[i].iter().zip(&centers[j]) {
                total += (a - b) * (a - b);
            }
        }
    }
    total
}

pub fn naive_mse(preds: &[f64], labels: &[f64]) -> f64 {
    preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub rank: f64,
    pub sparsity: f64,
    /// `None` with a single modality.
    pub consistency: Option<f64>,
    pub mse: f64,
}

pub fn naive_losses(inst: &LossInstance) -> LossValues {
    let agg = naive_aggregate(inst);
    let c = naive_centers(&agg);
    LossValues {
        rank: naive_rank(inst, &c),
        sparsity: naive_sparsity(inst, &agg, &c),
        consistency: (c.len() > 1).then(|| naive_consistency(&c)),
        mse: naive_mse(&inst.preds, &inst.labels),
    }
}

fn to_tensor(rows: &Rows) -> Tensor<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(&[rows.len(), rows[0].len()], flat).unwrap()
}

pub fn engine_losses(inst: &LossInstance) -> LossValues {
    let mut g = Graph::<f64>::new();
    let per_modality: Vec<_> = inst
        .modalities
        .iter()
        .zip(&inst.attention)
        .map(|(m, layers)| (*m, layers.iter().map(|l| g.constant(to_tensor(l))).collect()))
        .collect();
    let c = attention_centers(&mut g, &per_modality, inst.cfg.center_agg).unwrap();
    let rank = rank_loss(&mut g, &c, &inst.cfg).unwrap();
    let sparsity = sparsity_loss(&mut g, &c, &inst.cfg).unwrap();
    let consistency = consistency_loss(&mut g, &c).ok();
    let preds: Vec<_> = inst.preds.iter().map(|&p| g.constant(Tensor::scalar(p))).collect();
    let mse = score_loss(&mut g, &preds, &inst.labels).unwrap();
    LossValues {
        rank: g.scalar_value(rank),
        sparsity: g.scalar_value(sparsity),
        consistency: consistency.map(|v| g.scalar_value(v)),
        mse: g.scalar_value(mse),
    }
}

/// Relative difference, exact comparison when the reference is zero.
pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        (got - want).abs() / want.abs()
    }
}

/// Worst relative error per term `(rank, sparsity, consistency, mse)` over `n` random instances.
pub fn loss_oracle_sweep(n: usize, seed: u64) -> [f64; 4] {
    let mut rng = RngState::new(seed);
    let mut worst = [0.0f64; 4];
    for i in 0..n {
        // Every fourth instance has a single modality so consistency sees the error path too.
        let inst = random_instance(&mut rng, if i % 4 == 0 { 1 } else { 2 });
        let (want, got) = (naive_losses(&inst), engine_losses(&inst));
        worst[0] = worst[0].max(rel_err(got.rank, want.rank));
        worst[1] = worst[1].max(rel_err(got.sparsity, want.sparsity));
        match (got.consistency, want.consistency) {
            (Some(a), Some(b)) => worst[2] = worst[2].max(rel_err(a, b)),
            (None, None) => {}
            _ => worst[2] = f64::INFINITY,
        }
        worst[3] = worst[3].max(rel_err(got.mse, want.mse));
    }
    worst
}

/// Instance with given centers: one-hot attention when the center is an integer.
pub fn one_hot_instance(centers: &[&[usize]], t: usize, margin: Option<f64>) -> LossInstance {
    let attention = centers
        .iter()
        .map(|cs| {
            vec![cs
                .iter()
                .map(|&c| (1..=t).map(|s| if s == c { 1.0 } else { 0.0 }).collect())
                .collect()]
        })
        .collect();
    LossInstance {
        segments: t,
        modalities: Modality::ALL[..centers.len()].to_vec(),
        attention,
        cfg: LossConfig {
            lambda_rank: PerModality::splat(1.0),
            lambda_sparsity: PerModality::splat(1.0),
            margin,
            ..LossConfig::default()
        },
        preds: vec![0.5],
        labels: vec![0.5],
    }
}
