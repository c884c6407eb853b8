//! Full network: modality branches, query fusion and the score head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LogitSource, Var};
use crate::encoder::{self, Branch, BranchOutput};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalitySequence};
use crate::params::{Bound, ParamKind, ParamStore};
use crate::rng::RngState;
use crate::scoring::{self, ScoreHead, ScoreOutput};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Concatenation,
    Summation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreHeadKind {
    TwoLevel,
    /// Mean-pool over queries, then a single affine map.
    OneStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFusion {
    Weight,
    Average,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Branches to build, always run in `Modality::ALL` order.
    pub modalities: Vec<Modality>,
    pub queries: usize,
    pub layers: usize,
    pub self_heads: usize,
    pub cross_heads: usize,
    /// FFN hidden width as a multiple of the branch dimension.
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub layer_norm: bool,
    pub positional_encoding: bool,
    pub tau_init: f64,
    pub tau_min: f64,
    pub attn_logits: LogitSource,
    pub fusion: FusionStrategy,
    pub score_head: ScoreHeadKind,
    pub score_fusion: ScoreFusion,
    pub per_query_params: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: Modality::ALL.to_vec(),
            queries: 5,
            layers: 2,
            self_heads: 8,
            cross_heads: 1,
            ffn_multiplier: 4,
            dropout: 0.1,
            layer_norm: false,
            positional_encoding: false,
            tau_init: 0.07,
            tau_min: 1e-3,
            attn_logits: LogitSource::Keys,
            fusion: FusionStrategy::Concatenation,
            score_head: ScoreHeadKind::TwoLevel,
            score_fusion: ScoreFusion::Weight,
            per_query_params: false,
        }
    }
}

impl ModelConfig {
    /// Configured modalities, deduplicated, in fusion order.
    pub fn ordered_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.modalities.contains(m))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ordered_modalities().is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.tau_min > 0.0) || !(self.tau_init >= self.tau_min) {
            return Err(Error::Config(format!(
                "need 0 < tau_min <= tau_init, got tau_min {} and tau_init {}",
                self.tau_min, self.tau_init
            )));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("ffn_multiplier must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LmacNet<S = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub branches: Vec<Branch>,
    pub head: ScoreHead,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    pub branches: Vec<(Modality, BranchOutput)>,
    /// `[K, d_fused]`
    pub fused: Var,
    pub score: ScoreOutput,
}

impl<S: Scalar> LmacNet<S> {
    /// Builds every branch and the head. `dims` gives the feature dimension of
    /// each configured modality.
    pub fn new(config: ModelConfig, dims: &[(Modality, usize)], rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut branches = Vec::new();
        for m in config.ordered_modalities() {
            let dim = dims
                .iter()
                .find(|(dm, _)| *dm == m)
                .map(|&(_, d)| d)
                .ok_or_else(|| Error::Config(format!("no feature dimension given for {m}")))?;
            let mut branch_rng = rng.fork(m.tag() as u64);
            branches.push(encoder::init_branch(&mut store, m, dim, &config, &mut branch_rng)?);
        }
        let fused_dim = match config.fusion {
            FusionStrategy::Concatenation => branches.iter().map(|b| b.dim).sum(),
            FusionStrategy::Summation => {
                let d = branches[0].dim;
                if branches.iter().any(|b| b.dim != d) {
                    let dims: Vec<usize> = branches.iter().map(|b| b.dim).collect();
                    return Err(Error::Config(format!(
                        "summation fusion needs equal modality dimensions, got {dims:?}"
                    )));
                }
                d
            }
        };
        let head = scoring::init_score_head(&mut store, fused_dim, &config, &mut rng.fork(100));
        Ok(LmacNet {
            config,
            store,
            branches,
            head,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.branches.iter().map(|b| b.modality).collect()
    }

    pub fn dims(&self) -> Vec<(Modality, usize)> {
        self.branches.iter().map(|b| (b.modality, b.dim)).collect()
    }

    /// Runs the network on one sample. `inputs` must cover every branch
    /// modality with a common `T`; extra modalities are ignored.
    pub fn forward(&self, g: &mut Graph<S>, b: &Bound, inputs: &[ModalitySequence]) -> Result<Forward> {
        let mut t = None;
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let seq = inputs
                .iter()
                .find(|s| s.modality == branch.modality)
                .ok_or_else(|| Error::Data(format!("sample has no {} features", branch.modality)))?;
            match t {
                None => t = Some(seq.len()),
                Some(t0) if t0 != seq.len() => {
                    return Err(Error::Data(format!(
                        "modalities disagree on segment count: {t0} vs {} for {}",
                        seq.len(),
                        branch.modality
                    )));
                }
                _ => {}
            }
            if seq.is_empty() {
                return Err(Error::Data("sample has no segments".into()));
            }
            let x = g.constant(seq.features.cast());
            outs.push((branch.modality, encoder::run_branch(g, b, branch, &self.config, x)?));
        }
        let only: Vec<BranchOutput> = outs.iter().map(|(_, o)| o.clone()).collect();
        let fused = encoder::fuse(g, &only, self.config.fusion)?;
        let score = scoring::evaluate(g, b, &self.head, fused)?;
        Ok(Forward {
            branches: outs,
            fused,
            score,
        })
    }

    /// Keeps every temperature at or above the configured floor.
    pub fn clamp_temperatures(&mut self) {
        let floor = S::of(self.config.tau_min);
        for p in self.store.iter_mut() {
            if p.kind == ParamKind::Temperature {
                for v in p.value.data_mut() {
                    if *v < floor {
                        *v = floor;
                    }
                }
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> LmacNet<T> {
        LmacNet {
            config: self.config.clone(),
            store: self.store.cast(),
            branches: self.branches.clone(),
            head: self.head.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dims() -> Vec<(Modality, usize)> {
        vec![(Modality::Rgb, 16), (Modality::Flow, 16), (Modality::Audio, 8)]
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let c = ModelConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        let err = serde_json::from_str::<ModelConfig>(r#"{"querys": 3}"#).unwrap_err();
        assert!(err.to_string().contains("querys"));
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig {
            queries: 3,
            layers: 1,
            ..ModelConfig::default()
        };
        let net = LmacNet::<f32>::new(cfg, &dims(), &mut RngState::new(0)).unwrap();
        let mut rng = RngState::new(1);
        let inputs: Vec<ModalitySequence> = dims()
            .into_iter()
            .map(|(m, d)| {
                let data: Vec<f64> = (0..7 * d).map(|_| rng.normal()).collect();
                ModalitySequence::new(m, Tensor::from_f64(&[7, d], &data).unwrap()).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let b = net.store.bind(&mut g);
        let out = net.forward(&mut g, &b, &inputs).unwrap();
        assert_eq!(g.shape(out.fused), &[3, 40]);
        assert_eq!(g.shape(out.score.final_score), &[1]);
        assert_eq!(out.branches.len(), 3);
        assert_eq!(g.shape(out.branches[2].1.attention[0]), &[3, 7]);
    }

    #[test]
    fn unequal_segment_counts_are_rejected() {
        let cfg = ModelConfig {
            modalities: vec![Modality::Rgb, Modality::Flow],
            queries: 2,
            layers: 1,
            ..ModelConfig::default()
        };
        let net = LmacNet::<f32>::new(cfg, &dims(), &mut RngState::new(0)).unwrap();
        let inputs = [
            ModalitySequence::new(Modality::Rgb, Tensor::zeros(&[10, 16])).unwrap(),
            ModalitySequence::new(Modality::Flow, Tensor::zeros(&[9, 16])).unwrap(),
        ];
        let mut g = Graph::new();
        let b = net.store.bind(&mut g);
        assert!(matches!(net.forward(&mut g, &b, &inputs), Err(Error::Data(_))));
    }

    #[test]
    fn summation_with_unequal_dims_is_rejected() {
        let cfg = ModelConfig {
            fusion: FusionStrategy::Summation,
            ..ModelConfig::default()
        };
        assert!(matches!(
            LmacNet::<f32>::new(cfg, &dims(), &mut RngState::new(0)),
            Err(Error::Config(_))
        ));
    }
}
