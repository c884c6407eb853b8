//! Two-level score evaluation: a linear regressor maps each fused query
//! feature to a stage score `ŝ_k`, and a second stage fuses the `K` stage
//! scores into the final score. The learnable `Weight` fusion computes
//! `Ŝ = Σ_k softmax(w)_k · ŝ_k`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ScoreFusion, ScoreHeadKind};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum FusionHead {
    Weight { w: ParamId },
    Average,
    Linear { w: ParamId, b: ParamId },
}

#[derive(Clone, Debug)]
pub enum ScoreHead {
    TwoLevel {
        /// `[d, 1]` when shared across queries, `[K, d]` otherwise.
        reg_w: ParamId,
        /// `[1]` when shared, `[K, 1]` otherwise.
        reg_b: ParamId,
        per_query: bool,
        fusion: FusionHead,
    },
    /// Mean-pools the fused features over queries, then one affine map.
    OneStage { reg_w: ParamId, reg_b: ParamId },
}

#[derive(Clone, Debug)]
pub struct ScoreOutput {
    /// `[1]`
    pub final_score: Var,
    /// `[K, 1]`, absent for the one-stage head.
    pub query_scores: Option<Var>,
    /// Softmax-normalized fusion weights `[1, K]`, only for `Weight` fusion.
    pub weights: Option<Var>,
}

fn uniform<S: Scalar>(rng: &mut RngState, shape: &[usize], bound: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::from_f64(shape, &data).expect("shape and data agree")
}

pub fn init_score_head<S: Scalar>(
    store: &mut ParamStore<S>,
    fused_dim: usize,
    cfg: &ModelConfig,
    rng: &mut RngState,
) -> ScoreHead {
    let k = cfg.queries;
    let bound = 1.0 / (fused_dim as f64).sqrt();
    match cfg.score_head {
        ScoreHeadKind::OneStage => ScoreHead::OneStage {
            reg_w: store.add("head.reg.w", ParamKind::Weight, uniform(rng, &[fused_dim, 1], bound)),
            reg_b: store.add("head.reg.b", ParamKind::Bias, Tensor::zeros(&[1])),
        },
        ScoreHeadKind::TwoLevel => {
            let (reg_w, reg_b) = if cfg.per_query_params {
                (
                    store.add("head.reg.w", ParamKind::Weight, uniform(rng, &[k, fused_dim], bound)),
                    store.add("head.reg.b", ParamKind::Bias, Tensor::zeros(&[k, 1])),
                )
            } else {
                (
                    store.add("head.reg.w", ParamKind::Weight, uniform(rng, &[fused_dim, 1], bound)),
                    store.add("head.reg.b", ParamKind::Bias, Tensor::zeros(&[1])),
                )
            };
            let fusion = match cfg.score_fusion {
                ScoreFusion::Weight => FusionHead::Weight {
                    w: store.add("head.fusion.w", ParamKind::Fusion, Tensor::zeros(&[1, k])),
                },
                ScoreFusion::Average => FusionHead::Average,
                ScoreFusion::Linear => FusionHead::Linear {
                    w: store.add(
                        "head.fusion.w",
                        ParamKind::Weight,
                        uniform(rng, &[k, 1], 1.0 / (k as f64).sqrt()),
                    ),
                    b: store.add("head.fusion.b", ParamKind::Bias, Tensor::zeros(&[1])),
                },
            };
            ScoreHead::TwoLevel {
                reg_w,
                reg_b,
                per_query: cfg.per_query_params,
                fusion,
            }
        }
    }
}

/// Stage scores `ŝ_k = p_k · a + b`, returned as `[K, 1]`.
pub fn query_scores<S: Scalar>(g: &mut Graph<S>, b: &Bound, head: &ScoreHead, fused: Var) -> Result<Var> {
    let ScoreHead::TwoLevel {
        reg_w,
        reg_b,
        per_query,
        ..
    } = head
    else {
        return Err(Error::Config("the one-stage head has no per-query scores".into()));
    };
    let (k, d) = (g.shape(fused)[0], g.value(fused).cols());
    let (w, bias) = (b.var(*reg_w), b.var(*reg_b));
    if *per_query {
        if g.shape(w) != [k, d] {
            return Err(Error::shape(
                "query_scores",
                format!("features {:?} with per-query regressor {:?}", g.shape(fused), g.shape(w)),
            ));
        }
        let prod = g.mul(fused, w)?;
        let ones = g.constant(Tensor::ones(&[d, 1]));
        let s = g.matmul(prod, ones)?;
        g.add(s, bias)
    } else {
        if g.shape(w)[0] != d {
            return Err(Error::shape(
                "query_scores",
                format!("features {:?} with regressor {:?}", g.shape(fused), g.shape(w)),
            ));
        }
        let s = g.matmul(fused, w)?;
        g.add(s, bias)
    }
}

/// Second stage: fuses `[K, 1]` stage scores into a `[1]` final score.
pub fn fuse_scores<S: Scalar>(g: &mut Graph<S>, b: &Bound, head: &ScoreHead, scores: Var) -> Result<ScoreOutput> {
    let ScoreHead::TwoLevel { fusion, .. } = head else {
        return Err(Error::Config("the one-stage head does not fuse stage scores".into()));
    };
    let k = g.shape(scores)[0];
    let (final_score, weights) = match fusion {
        FusionHead::Weight { w } => {
            let weights = g.softmax_const(b.var(*w), 1.0)?;
            let s = g.matmul(weights, scores)?;
            (g.reshape(s, &[1])?, Some(weights))
        }
        FusionHead::Average => (g.mean(scores)?, None),
        FusionHead::Linear { w, b: bias } => {
            let row = g.reshape(scores, &[1, k])?;
            let s = g.matmul(row, b.var(*w))?;
            let s = g.reshape(s, &[1])?;
            (g.add(s, b.var(*bias))?, None)
        }
    };
    Ok(ScoreOutput {
        final_score,
        query_scores: Some(scores),
        weights,
    })
}

/// Runs the configured head on fused query features `[K, d]`.
pub fn evaluate<S: Scalar>(g: &mut Graph<S>, b: &Bound, head: &ScoreHead, fused: Var) -> Result<ScoreOutput> {
    match head {
        ScoreHead::TwoLevel { .. } => {
            let s = query_scores(g, b, head, fused)?;
            fuse_scores(g, b, head, s)
        }
        ScoreHead::OneStage { reg_w, reg_b } => {
            let k = g.shape(fused)[0];
            let pool = g.constant(Tensor::full(&[1, k], S::of(1.0 / k as f64)));
            let pooled = g.matmul(pool, fused)?;
            let s = g.matmul(pooled, b.var(*reg_w))?;
            let s = g.reshape(s, &[1])?;
            let final_score = g.add(s, b.var(*reg_b))?;
            Ok(ScoreOutput {
                final_score,
                query_scores: None,
                weights: None,
            })
        }
    }
}

/// Per-sample interpretability record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub query_scores: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f32>>,
    #[serde(rename = "final")]
    pub final_score: f32,
}

impl ScoreBreakdown {
    pub fn from_output<S: Scalar>(g: &Graph<S>, out: &ScoreOutput) -> Self {
        let vals = |v: Var| g.value(v).data().iter().map(|x| x.f64() as f32).collect::<Vec<_>>();
        ScoreBreakdown {
            query_scores: out.query_scores.map(vals).unwrap_or_default(),
            weights: out.weights.map(vals),
            final_score: g.scalar_value(out.final_score).f64() as f32,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("breakdown serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_with(fusion: ScoreFusion, k: usize, d: usize) -> (ParamStore<f64>, ScoreHead) {
        let cfg = ModelConfig {
            queries: k,
            score_fusion: fusion,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let head = init_score_head(&mut store, d, &cfg, &mut RngState::new(0));
        (store, head)
    }

    fn fuse_values(store: &ParamStore<f64>, head: &ScoreHead, scores: &[f64]) -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let s = g.constant(Tensor::from_f64(&[scores.len(), 1], scores).unwrap());
        let out = fuse_scores(&mut g, &b, head, s).unwrap();
        (
            g.scalar_value(out.final_score),
            out.weights.map(|w| g.value(w).data().to_vec()),
        )
    }

    #[test]
    fn constant_regressor() {
        let (mut store, head) = head_with(ScoreFusion::Weight, 3, 4);
        let ScoreHead::TwoLevel { reg_w, reg_b, .. } = head.clone() else { unreachable!() };
        store.value_mut(reg_w).data_mut().fill(0.0);
        store.value_mut(reg_b).data_mut()[0] = 0.3;
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let f = g.constant(Tensor::from_f64(&[3, 4], &[1.0; 12]).unwrap());
        let s = query_scores(&mut g, &b, &head, f).unwrap();
        assert_eq!(g.value(s).data(), &[0.3, 0.3, 0.3]);
    }

    #[test]
    fn weight_fusion_cases() {
        let (mut store, head) = head_with(ScoreFusion::Weight, 3, 4);
        let (s, w) = fuse_values(&store, &head, &[0.2, 0.4, 0.6]);
        assert!((s - 0.4).abs() < 1e-12);
        assert!((w.unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ScoreHead::TwoLevel { fusion: FusionHead::Weight { w }, .. } = head.clone() else { unreachable!() };
        store.value_mut(w).data_mut().copy_from_slice(&[10.0, 0.0, 0.0]);
        let (s, _) = fuse_values(&store, &head, &[0.2, 0.4, 0.6]);
        assert!((s - 0.2).abs() < 1e-3);
    }

    #[test]
    fn average_fusion() {
        let (store, head) = head_with(ScoreFusion::Average, 2, 4);
        let (s, w) = fuse_values(&store, &head, &[0.1, 0.3]);
        assert!((s - 0.2).abs() < 1e-12);
        assert!(w.is_none());
    }

    #[test]
    fn breakdown_json_round_trip() {
        let b = ScoreBreakdown {
            query_scores: vec![0.1, 0.7],
            weights: Some(vec![0.25, 0.75]),
            final_score: 0.55,
        };
        let back: ScoreBreakdown = serde_json::from_str(&b.to_json()).unwrap();
        assert_eq!(back, b);
        let v: serde_json::Value = serde_json::from_str(&b.to_json()).unwrap();
        assert!(v.get("final").is_some());
        let no_w = ScoreBreakdown { weights: None, ..b };
        assert!(!no_w.to_json().contains("weights"));
    }
}
