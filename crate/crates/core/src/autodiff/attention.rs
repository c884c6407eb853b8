use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// How attention logits are scaled before the softmax.
#[derive(Clone, Copy, Debug)]
pub enum AttentionScale {
    /// Standard `1/sqrt(d_head)` scaling.
    InvSqrtHeadDim,
    /// Division by a learnable temperature (a one-element node).
    Temperature(Var),
}

/// Which projected sequence the queries are compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitSource {
    Keys,
    Values,
}

/// Projection matrices are `[d_out, d_in]` and applied as `x · Wᵀ`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Option<Var>,
    pub scale: AttentionScale,
    pub logits: LogitSource,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[K, d]`
    pub output: Var,
    /// One `[K, T]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled multi-head attention of `q: [K, d]` over `k, v: [T, d]`.
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dimension {d} is not divisible by {heads} heads"
        )));
    }
    if g.value(k).cols() != d || g.value(v).cols() != d || g.shape(k) != g.shape(v) {
        return Err(Error::shape(
            "multi_head_attention",
            format!(
                "query {:?}, key {:?}, value {:?}",
                g.shape(q),
                g.shape(k),
                g.shape(v)
            ),
        ));
    }
    let dh = d / heads;
    let wq_t = g.transpose(p.w_q)?;
    let wk_t = g.transpose(p.w_k)?;
    let wv_t = g.transpose(p.w_v)?;
    let qp = g.matmul(q, wq_t)?;
    let kp = g.matmul(k, wk_t)?;
    let vp = g.matmul(v, wv_t)?;
    let against = match p.logits {
        LogitSource::Keys => kp,
        LogitSource::Values => vp,
    };
    let tau = match p.scale {
        AttentionScale::InvSqrtHeadDim => g.scalar((dh as f64).sqrt()),
        AttentionScale::Temperature(t) => t,
    };

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, against, vp)
        } else {
            (
                g.slice_cols(qp, h * dh, dh)?,
                g.slice_cols(against, h * dh, dh)?,
                g.slice_cols(vp, h * dh, dh)?,
            )
        };
        let kh_t = g.transpose(kh)?;
        let logits = g.matmul(qh, kh_t)?;
        let attn = g.softmax(logits, tau)?;
        outs.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let mut output = if heads == 1 { outs[0] } else { g.concat(&outs)? };
    if let Some(w_o) = p.w_o {
        let wo_t = g.transpose(w_o)?;
        output = g.matmul(output, wo_t)?;
    }
    Ok(AttentionOutput { output, weights })
}
