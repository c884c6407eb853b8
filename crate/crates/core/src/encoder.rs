//! Multimodal local query encoder.
//!
//! Each modality owns an independent stack of decoder layers. Layer `i`
//! adds its learnable atomic queries to the previous layer's temporal query
//! features, cross-attends over the modality's segments with a learnable
//! temperature, and refines the result with a feed-forward block and
//! multi-head self-attention over the `K` queries:
//!
//! ```text
//! q̂_k  = p_k^(i-1) + q_k^(i)
//! q̃_k  = W_q q̂_k,   k_t = W_k f_t,   v_t = W_v f_t
//! α_kt = softmax_t(q̃_k · k_t / τ)
//! p_k^(i) = Σ_t α_kt v_t + p_k^(i-1)
//! ```
//!
//! Pre-norm is applied to the input of each sublayer when enabled, and
//! `p^(0) = 0`.

use crate::autodiff::{multi_head_attention, AttentionParams, AttentionScale, Graph, LogitSource, Var};
use crate::error::{Error, Result};
use crate::model::{FusionStrategy, ModelConfig};
use crate::modality::Modality;
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub atomic_queries: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub tau: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub self_w_q: ParamId,
    pub self_w_k: ParamId,
    pub self_w_v: ParamId,
    pub self_w_o: ParamId,
    pub norm_cross: Option<Norm>,
    pub norm_ffn: Option<Norm>,
    pub norm_self: Option<Norm>,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub modality: Modality,
    pub dim: usize,
    pub layers: Vec<DecoderLayerParams>,
}

#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// Final-layer temporal query features, `[K, d_m]`.
    pub query_features: Var,
    /// Cross-attention weights per layer, each `[K, T]` (head-averaged when
    /// cross-attention uses several heads).
    pub attention: Vec<Var>,
}

fn uniform<S: Scalar>(rng: &mut RngState, shape: &[usize], bound: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::from_f64(shape, &data).expect("shape and data agree")
}

fn normal<S: Scalar>(rng: &mut RngState, shape: &[usize], std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::from_f64(shape, &data).expect("shape and data agree")
}

/// Closed-form parameter count of one branch.
pub fn branch_param_count(dim: usize, cfg: &ModelConfig) -> usize {
    let (d, k, f) = (dim, cfg.queries, cfg.ffn_multiplier * dim);
    let norms = if cfg.layer_norm { 3 * 2 * d } else { 0 };
    let per_layer = k * d + 3 * d * d + 1 + (d * f + f + f * d + d) + 4 * d * d + norms;
    cfg.layers * per_layer
}

/// Registers one modality branch in `store`. Weight matrices are drawn
/// uniformly in `±1/√d_m`, atomic queries from `N(0, 0.02²)`, biases start
/// at zero, norm gains at one and every temperature at `cfg.tau_init`.
pub fn init_branch<S: Scalar>(
    store: &mut ParamStore<S>,
    modality: Modality,
    dim: usize,
    cfg: &ModelConfig,
    rng: &mut RngState,
) -> Result<Branch> {
    if cfg.self_heads == 0 || dim % cfg.self_heads != 0 {
        return Err(Error::Config(format!(
            "{modality} dimension {dim} is not divisible by {} self-attention heads",
            cfg.self_heads
        )));
    }
    if cfg.cross_heads == 0 || dim % cfg.cross_heads != 0 {
        return Err(Error::Config(format!(
            "{modality} dimension {dim} is not divisible by {} cross-attention heads",
            cfg.cross_heads
        )));
    }
    if cfg.queries == 0 || cfg.layers == 0 {
        return Err(Error::Config("queries and layers must be at least 1".into()));
    }
    if !(cfg.tau_init > 0.0) {
        return Err(Error::Config(format!("tau_init must be positive, got {}", cfg.tau_init)));
    }
    let (d, k, f) = (dim, cfg.queries, cfg.ffn_multiplier * dim);
    let bound = 1.0 / (d as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 1..=cfg.layers {
        let prefix = format!("enc.{modality}.layer{i}");
        let mut add = |name: &str, kind: ParamKind, value: Tensor<S>| {
            store.add(format!("{prefix}.{name}"), kind, value)
        };
        let norm = |tag: &str, add: &mut dyn FnMut(&str, ParamKind, Tensor<S>) -> ParamId| {
            cfg.layer_norm.then(|| Norm {
                gain: add(&format!("{tag}.gain"), ParamKind::Norm, Tensor::ones(&[d])),
                bias: add(&format!("{tag}.bias"), ParamKind::Norm, Tensor::zeros(&[d])),
            })
        };
        let atomic_queries = add("queries", ParamKind::Query, normal(rng, &[k, d], 0.02));
        let w_q = add("w_q", ParamKind::Weight, uniform(rng, &[d, d], bound));
        let w_k = add("w_k", ParamKind::Weight, uniform(rng, &[d, d], bound));
        let w_v = add("w_v", ParamKind::Weight, uniform(rng, &[d, d], bound));
        let tau = add("tau", ParamKind::Temperature, Tensor::scalar(S::of(cfg.tau_init)));
        let norm_cross = norm("norm_cross", &mut add);
        let ffn_w1 = add("ffn.w1", ParamKind::Weight, uniform(rng, &[f, d], bound));
        let ffn_b1 = add("ffn.b1", ParamKind::Bias, Tensor::zeros(&[f]));
        let ffn_w2 = add("ffn.w2", ParamKind::Weight, uniform(rng, &[d, f], bound));
        let ffn_b2 = add("ffn.b2", ParamKind::Bias, Tensor::zeros(&[d]));
        let norm_ffn = norm("norm_ffn", &mut add);
        let self_w_q = add("self.w_q", ParamKind::Weight, uniform(rng, &[d, d], bound));
        let self_w_k = add("self.w_k", ParamKind::Weight, uniform(rng, &[d, d], bound));
        let self_w_v = add("self.w_v", ParamKind::Weight, uniform(rng, &[d, d], bound));
        let self_w_o = add("self.w_o", ParamKind::Weight, uniform(rng, &[d, d], bound));
        let norm_self = norm("norm_self", &mut add);
        layers.push(DecoderLayerParams {
            atomic_queries,
            w_q,
            w_k,
            w_v,
            tau,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            self_w_q,
            self_w_k,
            self_w_v,
            self_w_o,
            norm_cross,
            norm_ffn,
            norm_self,
        });
    }
    Ok(Branch {
        modality,
        dim,
        layers,
    })
}

fn maybe_norm<S: Scalar>(g: &mut Graph<S>, b: &Bound, norm: Option<Norm>, x: Var) -> Result<Var> {
    match norm {
        Some(n) => g.layer_norm(x, b.var(n.gain), b.var(n.bias), LN_EPS),
        None => Ok(x),
    }
}

/// `x · Wᵀ + b` with `b` repeated over rows.
fn affine<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let rows = g.value(x).rows();
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    let b = g.repeat_rows(bias, rows)?;
    g.add(y, b)
}

/// One decoder layer. `prev` is `p^(i-1)` (`[K, d]`, zeros for the first
/// layer) and `input` the modality's `[T, d]` features. Returns `p^(i)` and
/// the cross-attention weights used in the weighted sum.
pub fn decode_layer<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    layer: &DecoderLayerParams,
    cfg: &ModelConfig,
    prev: Var,
    input: Var,
) -> Result<(Var, Var)> {
    let d = g.value(input).cols();
    if g.value(prev).cols() != d || g.shape(prev)[0] != cfg.queries {
        return Err(Error::shape(
            "decode_layer",
            format!("previous query features {:?} vs input {:?}", g.shape(prev), g.shape(input)),
        ));
    }
    let queries = b.var(layer.atomic_queries);
    let q_hat = g.add(prev, queries)?;
    let q_in = maybe_norm(g, b, layer.norm_cross, q_hat)?;
    let cross = AttentionParams {
        w_q: b.var(layer.w_q),
        w_k: b.var(layer.w_k),
        w_v: b.var(layer.w_v),
        w_o: None,
        scale: AttentionScale::Temperature(b.var(layer.tau)),
        logits: cfg.attn_logits,
    };
    let att = multi_head_attention(g, q_in, input, input, cfg.cross_heads, &cross)?;
    let alpha = mean_of(g, &att.weights)?;
    let attended = g.dropout(att.output, cfg.dropout)?;
    let mut p = g.add(attended, prev)?;

    let h = maybe_norm(g, b, layer.norm_ffn, p)?;
    let h = affine(g, h, b.var(layer.ffn_w1), b.var(layer.ffn_b1))?;
    let h = g.relu(h)?;
    let h = affine(g, h, b.var(layer.ffn_w2), b.var(layer.ffn_b2))?;
    let h = g.dropout(h, cfg.dropout)?;
    p = g.add(p, h)?;

    let s = maybe_norm(g, b, layer.norm_self, p)?;
    let self_attn = AttentionParams {
        w_q: b.var(layer.self_w_q),
        w_k: b.var(layer.self_w_k),
        w_v: b.var(layer.self_w_v),
        w_o: Some(b.var(layer.self_w_o)),
        scale: AttentionScale::InvSqrtHeadDim,
        logits: LogitSource::Keys,
    };
    let sa = multi_head_attention(g, s, s, s, cfg.self_heads, &self_attn)?;
    let sa = g.dropout(sa.output, cfg.dropout)?;
    p = g.add(p, sa)?;
    Ok((p, alpha))
}

/// Elementwise mean of equally shaped nodes; a single node is returned as is.
pub(crate) fn mean_of<S: Scalar>(g: &mut Graph<S>, xs: &[Var]) -> Result<Var> {
    match xs {
        [] => Err(Error::shape("mean_of", "no inputs")),
        [x] => Ok(*x),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &x in rest {
                acc = g.add(acc, x)?;
            }
            g.scale(acc, 1.0 / xs.len() as f64)
        }
    }
}

/// Sinusoidal encodings, `[T, d]`.
pub fn sinusoidal_encoding<S: Scalar>(t: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for j in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_f64(&[t, d], &data).expect("shape and data agree")
}

/// Chains every decoder layer of `branch` over `input: [T, d_m]`.
pub fn run_branch<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    branch: &Branch,
    cfg: &ModelConfig,
    input: Var,
) -> Result<BranchOutput> {
    let shape = g.shape(input).to_vec();
    if shape.len() != 2 || shape[1] != branch.dim {
        return Err(Error::shape(
            "run_branch",
            format!("{} branch expects [T, {}], got {shape:?}", branch.modality, branch.dim),
        ));
    }
    let input = if cfg.positional_encoding {
        let pe = g.constant(sinusoidal_encoding(shape[0], shape[1]));
        g.add(input, pe)?
    } else {
        input
    };
    let mut prev = g.constant(Tensor::zeros(&[cfg.queries, branch.dim]));
    let mut attention = Vec::with_capacity(branch.layers.len());
    for layer in &branch.layers {
        let (p, alpha) = decode_layer(g, b, layer, cfg, prev, input)?;
        attention.push(alpha);
        prev = p;
    }
    Ok(BranchOutput {
        query_features: prev,
        attention,
    })
}

/// Combines per-branch query features row by row, in branch order.
pub fn fuse<S: Scalar>(g: &mut Graph<S>, branches: &[BranchOutput], strategy: FusionStrategy) -> Result<Var> {
    let feats: Vec<Var> = branches.iter().map(|b| b.query_features).collect();
    match strategy {
        FusionStrategy::Concatenation => g.concat(&feats),
        FusionStrategy::Summation => {
            let dims: Vec<&[usize]> = feats.iter().map(|&f| g.shape(f)).collect();
            if dims.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Config(format!(
                    "summation fusion needs equal modality dimensions, got {dims:?}"
                )));
            }
            let mut acc = feats[0];
            for &f in &feats[1..] {
                acc = g.add(acc, f)?;
            }
            Ok(acc)
        }
    }
}
