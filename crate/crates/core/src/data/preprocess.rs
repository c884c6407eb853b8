use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEGMENT_LEN: usize = 32;

/// Pools frame features `[F, d]` into `ceil(F / len)` segments. The last
/// segment is zero-padded to `len` rows before mean pooling.
pub fn segment_and_pad(frames: &Tensor<f32>, segment_len: usize) -> Result<Tensor<f32>> {
    if segment_len == 0 {
        return Err(Error::Config("segment length must be at least 1".into()));
    }
    if frames.rank() != 2 || frames.rows() == 0 {
        return Err(Error::Data(format!("no frames to segment (shape {:?})", frames.shape())));
    }
    let (f, d) = (frames.rows(), frames.cols());
    let t = f.div_ceil(segment_len);
    let mut out = vec![0f32; t * d];
    for s in 0..t {
        let mut acc = vec![0f64; d];
        for r in s * segment_len..((s + 1) * segment_len).min(f) {
            for (a, &x) in acc.iter_mut().zip(frames.row(r)) {
                *a += x as f64;
            }
        }
        for (o, a) in out[s * d..(s + 1) * d].iter_mut().zip(acc) {
            *o = (a / segment_len as f64) as f32;
        }
    }
    Tensor::new(&[t, d], out)
}

/// Min-max label scaling fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    pub min: f64,
    pub max: f64,
}

impl LabelNorm {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        let min = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Data(format!(
                "min-max normalization needs at least two distinct finite labels, got range [{min}, {max}]"
            )));
        }
        Ok(LabelNorm { min, max })
    }

    /// Not clipped: held-out labels may fall outside `[0, 1]`.
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

pub fn normalize_labels(labels: &[f64]) -> Result<(Vec<f64>, LabelNorm)> {
    let norm = LabelNorm::fit(labels)?;
    Ok((labels.iter().map(|&x| norm.apply(x)).collect(), norm))
}
