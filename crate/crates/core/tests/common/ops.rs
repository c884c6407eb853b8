//! Per-op gradient-check cases shared by the gradient tests and the acceptance suite.

use lmac::autodiff::{multi_head_attention, AttentionParams, AttentionScale, Graph, LogitSource, Var};
use lmac::rng::RngState;
use lmac::{Result, Scalar, Tensor};

pub fn random<S: Scalar>(rng: &mut RngState, shape: &[usize], scale: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| scale * rng.normal()).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Away from zero so kinks are not straddled by the difference step.
pub fn random_away_from_zero<S: Scalar>(rng: &mut RngState, shape: &[usize]) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.uniform_in(0.2, 1.5);
            if rng.uniform() < 0.5 { -m } else { m }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Reduces `y` to a scalar through a fixed random projection.
pub fn project<S: Scalar>(g: &mut Graph<S>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngState::new(seed);
    let r = random::<S>(&mut rng, g.shape(y), 1.0);
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    g.sum(m)
}

pub struct Case<S: Scalar> {
    pub name: &'static str,
    pub params: Vec<Tensor<S>>,
    pub f: Box<dyn Fn(&mut Graph<S>, &[Var]) -> Result<Var>>,
}

pub fn cases<S: Scalar>() -> Vec<Case<S>> {
    let mut rng = RngState::new(42);
    let mut v = Vec::new();
    macro_rules! case {
        ($name:expr, [$($p:expr),*], $f:expr) => {
            v.push(Case::<S> { name: $name, params: vec![$($p),*], f: Box::new($f) });
        };
    }
    case!("matmul", [random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4, 2], 1.0)], |g, p| {
        let y = g.matmul(p[0], p[1])?;
        project(g, y, 1)
    });
    case!("transpose", [random(&mut rng, &[3, 4], 1.0)], |g, p| {
        let y = g.transpose(p[0])?;
        project(g, y, 2)
    });
    case!("add", [random(&mut rng, &[2, 3], 1.0), random(&mut rng, &[2, 3], 1.0)], |g, p| {
        let y = g.add(p[0], p[1])?;
        project(g, y, 3)
    });
    case!("sub_scalar_broadcast", [random(&mut rng, &[2, 3], 1.0), random(&mut rng, &[1], 1.0)], |g, p| {
        let y = g.sub(p[0], p[1])?;
        project(g, y, 4)
    });
    case!("mul", [random(&mut rng, &[2, 3], 1.0), random(&mut rng, &[2, 3], 1.0)], |g, p| {
        let y = g.mul(p[0], p[1])?;
        project(g, y, 5)
    });
    case!("scalar_mul", [random(&mut rng, &[4], 1.0)], |g, p| {
        let y = g.scale(p[0], -1.7)?;
        project(g, y, 6)
    });
    case!("relu", [random_away_from_zero(&mut rng, &[2, 4])], |g, p| {
        let y = g.relu(p[0])?;
        project(g, y, 7)
    });
    case!("abs", [random_away_from_zero(&mut rng, &[2, 4])], |g, p| {
        let y = g.abs(p[0])?;
        project(g, y, 8)
    });
    case!("square", [random(&mut rng, &[5], 1.0)], |g, p| {
        let y = g.square(p[0])?;
        project(g, y, 9)
    });
    case!("mean", [random(&mut rng, &[2, 3], 1.0)], |g, p| {
        let y = g.mean(p[0])?;
        g.scale(y, 3.0)
    });
    case!("sum", [random(&mut rng, &[2, 3], 1.0)], |g, p| {
        let y = g.sum(p[0])?;
        g.square(y)
    });
    case!(
        "concat",
        [random(&mut rng, &[2, 1], 1.0), random(&mut rng, &[2, 2], 1.0), random(&mut rng, &[2, 3], 1.0)],
        |g, p| {
            let y = g.concat(p)?;
            project(g, y, 10)
        }
    );
    case!("slice_cols", [random(&mut rng, &[3, 5], 1.0)], |g, p| {
        let y = g.slice_cols(p[0], 1, 3)?;
        project(g, y, 11)
    });
    case!("repeat_rows", [random(&mut rng, &[1, 3], 1.0)], |g, p| {
        let y = g.repeat_rows(p[0], 4)?;
        project(g, y, 12)
    });
    case!("reshape", [random(&mut rng, &[2, 3], 1.0)], |g, p| {
        let y = g.reshape(p[0], &[3, 2])?;
        project(g, y, 13)
    });
    case!(
        "softmax_learnable_tau",
        [random(&mut rng, &[3, 5], 0.3), Tensor::from_f64(&[1], &[0.5]).unwrap()],
        |g, p| {
            let y = g.softmax(p[0], p[1])?;
            project(g, y, 14)
        }
    );
    case!(
        "layer_norm",
        [random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4], 1.0), random(&mut rng, &[4], 1.0)],
        |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
            project(g, y, 15)
        }
    );
    case!(
        "multi_head_attention",
        [
            random(&mut rng, &[2, 4], 1.0),
            random(&mut rng, &[3, 4], 1.0),
            random(&mut rng, &[4, 4], 0.5),
            random(&mut rng, &[4, 4], 0.5),
            random(&mut rng, &[4, 4], 0.5),
            random(&mut rng, &[4, 4], 0.5)
        ],
        |g, p| {
            let params = AttentionParams {
                w_q: p[2],
                w_k: p[3],
                w_v: p[4],
                w_o: Some(p[5]),
                scale: AttentionScale::InvSqrtHeadDim,
                logits: LogitSource::Keys,
            };
            let out = multi_head_attention(g, p[0], p[1], p[1], 2, &params)?;
            project(g, out.output, 16)
        }
    );
    case!(
        "cross_attention_temperature",
        [
            random(&mut rng, &[2, 4], 0.5),
            random(&mut rng, &[3, 4], 0.5),
            random(&mut rng, &[4, 4], 0.5),
            random(&mut rng, &[4, 4], 0.5),
            random(&mut rng, &[4, 4], 0.5),
            Tensor::from_f64(&[1], &[0.7]).unwrap()
        ],
        |g, p| {
            let params = AttentionParams {
                w_q: p[2],
                w_k: p[3],
                w_v: p[4],
                w_o: None,
                scale: AttentionScale::Temperature(p[5]),
                logits: LogitSource::Keys,
            };
            let out = multi_head_attention(g, p[0], p[1], p[1], 1, &params)?;
            let w = project(g, out.weights[0], 17)?;
            let o = project(g, out.output, 18)?;
            g.add(w, o)
        }
    );
    v
}

use lmac::autodiff::{check_gradients, check_gradients_reference, GradCheckReport};
use lmac::losses::{objective, LossConfig};
use lmac::modality::{Modality, ModalitySequence, PerModality};
use lmac::model::{LmacNet, ModelConfig};
use lmac::params::{Bound, ParamKind};

/// Toy network for the end-to-end check: T=6, K=2, d=8 per modality, one layer.
pub struct ToyModel {
    pub net: LmacNet<f32>,
    pub inputs: Vec<ModalitySequence>,
    pub losses: LossConfig,
    pub label: f64,
}

pub fn toy_model(layer_norm: bool) -> ToyModel {
    let cfg = ModelConfig {
        queries: 2,
        layers: 1,
        self_heads: 2,
        dropout: 0.0,
        layer_norm,
        ..ModelConfig::default()
    };
    let dims = [(Modality::Rgb, 8), (Modality::Flow, 8), (Modality::Audio, 8)];
    let mut net = LmacNet::<f32>::new(cfg, &dims, &mut RngState::new(5)).unwrap();
    let mut rng = RngState::new(6);
    // Move every parameter off its special initial value (zero biases, unit gains, equal fusion weights).
    for p in net.store.iter_mut() {
        match p.kind {
            ParamKind::Temperature => p.value.data_mut()[0] = rng.uniform_in(0.5, 1.5) as f32,
            ParamKind::Weight => {}
            _ => {
                for v in p.value.data_mut() {
                    *v += (0.3 * rng.normal()) as f32;
                }
            }
        }
    }
    let inputs = dims
        .iter()
        .map(|&(m, d)| ModalitySequence::new(m, random(&mut rng, &[6, d], 1.0)).unwrap())
        .collect();
    let losses = LossConfig {
        lambda2: 1.0,
        lambda_sparsity: PerModality::splat(1.0),
        ..LossConfig::default()
    };
    ToyModel {
        net,
        inputs,
        losses,
        label: 0.7,
    }
}

fn toy_objective<S: Scalar>(toy: &ToyModel, net: &LmacNet<S>, g: &mut Graph<S>, vars: &[Var]) -> Result<Var> {
    let b = Bound::from_vars(vars.to_vec());
    let fwd = net.forward(g, &b, &toy.inputs)?;
    let attention: Vec<_> = fwd.branches.iter().map(|(m, o)| (*m, o.attention.clone())).collect();
    let (report, _) = objective(g, fwd.score.final_score, toy.label, &attention, &toy.losses)?;
    Ok(report.total)
}

/// f32 analytic gradients of the total loss against f64 central differences.
pub fn toy_gradcheck_f32(toy: &ToyModel) -> GradCheckReport {
    let net64 = toy.net.cast::<f64>();
    let params: Vec<Tensor<f32>> = toy.net.store.iter().map(|(_, p)| p.value.clone()).collect();
    check_gradients_reference(
        |g, v| toy_objective(toy, &toy.net, g, v),
        |g, v| toy_objective(toy, &net64, g, v),
        &params,
        1e-4,
    )
    .unwrap()
}

pub fn toy_gradcheck_f64(toy: &ToyModel) -> GradCheckReport {
    let net64 = toy.net.cast::<f64>();
    let params: Vec<Tensor<f64>> = net64.store.iter().map(|(_, p)| p.value.clone()).collect();
    check_gradients(|g, v| toy_objective(toy, &net64, g, v), &params, 1e-5).unwrap()
}
