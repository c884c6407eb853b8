//! Synthetic multimodal sequences with planted key segments.
//!
//! Each sample holds `k_events` events at sorted, stratified positions, each
//! with a quality `q ~ U(0, 1)`. Modality `m` sees event `j` as its fixed
//! signature direction `u_{m,j}` scaled by `signature_offset + q + ε_m`
//! inside a window of `event_width` segments, shifted independently per
//! modality by up to `jitter` segments. `ε_m ~ N(0, (amplitude_noise ·
//! noise_sigma)²)` is drawn independently per modality, so averaging the
//! modalities gives a cleaner estimate of `q` than any single one. Every
//! entry also receives `N(0, noise_sigma²)` background noise. The label is
//! the mean quality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalitySequence, PerModality};
use crate::rng::RngState;
use crate::tensor::Tensor;

const SIGNATURE_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Samples assigned to the test split; the rest are training samples.
    pub n_test: usize,
    pub segments: usize,
    pub dims: PerModality<usize>,
    pub k_events: usize,
    pub noise_sigma: f64,
    pub jitter: usize,
    pub event_width: usize,
    pub signature_offset: f64,
    /// Per-modality amplitude noise, as a multiple of `noise_sigma`.
    pub amplitude_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 800,
            n_test: 200,
            segments: 24,
            dims: PerModality {
                rgb: 16,
                flow: 16,
                audio: 8,
            },
            k_events: 3,
            noise_sigma: 0.3,
            jitter: 1,
            event_width: 2,
            signature_offset: 0.5,
            amplitude_noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k_events == 0 || self.k_events > self.segments {
            return bad(format!("k_events must lie in [1, {}], got {}", self.segments, self.k_events));
        }
        if self.event_width == 0 || self.k_events * self.event_width > self.segments {
            return bad(format!(
                "{} events of width {} do not fit in {} segments",
                self.k_events, self.event_width, self.segments
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.amplitude_noise >= 0.0) {
            return bad("noise_sigma and amplitude_noise must be non-negative".into());
        }
        if Modality::ALL.iter().any(|&m| self.dims.get(m) == 0) {
            return bad("every modality dimension must be positive".into());
        }
        if self.n_samples == 0 || self.n_test >= self.n_samples {
            return bad(format!(
                "need n_test < n_samples, got {} of {}",
                self.n_test, self.n_samples
            ));
        }
        Ok(())
    }

    pub fn dims_list(&self) -> Vec<(Modality, usize)> {
        Modality::ALL.iter().map(|&m| (m, self.dims.get(m))).collect()
    }
}

/// Signature directions `u_{m,j}` with `N(0, 1)` entries, indexed
/// `[modality][event]`.
pub fn signatures(spec: &SyntheticSpec) -> PerModality<Vec<Vec<f64>>> {
    let mut rng = RngState::new(spec.seed).fork(SIGNATURE_STREAM);
    let mut draw = |d: usize| -> Vec<Vec<f64>> {
        (0..spec.k_events)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect()
    };
    PerModality {
        rgb: draw(spec.dims.rgb),
        flow: draw(spec.dims.flow),
        audio: draw(spec.dims.audio),
    }
}

pub fn stem(index: usize) -> String {
    format!("sample{index:05}")
}

fn generate_sample(spec: &SyntheticSpec, sig: &PerModality<Vec<Vec<f64>>>, index: usize) -> Sample {
    let mut rng = RngState::new(spec.seed).fork(index as u64 + 1);
    let t = spec.segments;
    let stratum = t / spec.k_events;
    let w = spec.event_width;
    let mut events = Vec::with_capacity(spec.k_events);
    let mut qualities = Vec::with_capacity(spec.k_events);
    for j in 0..spec.k_events {
        let lo = j * stratum;
        events.push(lo + rng.below(stratum - w + 1));
        qualities.push(rng.uniform());
    }
    let mut starts = Vec::new();
    let mut sequences = Vec::new();
    for m in Modality::ALL {
        let d = spec.dims.get(m);
        let mut x: Vec<f64> = (0..t * d).map(|_| spec.noise_sigma * rng.normal()).collect();
        let mut ms = Vec::with_capacity(spec.k_events);
        for (j, (&e, &q)) in events.iter().zip(&qualities).enumerate() {
            let shift = rng.int_in(-(spec.jitter as i64), spec.jitter as i64);
            let start = (e as i64 + shift).clamp(0, (t - w) as i64) as usize;
            let amp = spec.signature_offset + q + spec.amplitude_noise * spec.noise_sigma * rng.normal();
            let u = &sig.get_ref(m)[j];
            for row in start..start + w {
                for (xi, ui) in x[row * d..(row + 1) * d].iter_mut().zip(u) {
                    *xi += amp * ui;
                }
            }
            ms.push(start);
        }
        starts.push((m, ms));
        let features = Tensor::from_f64(&[t, d], &x).expect("shape and data agree");
        sequences.push(ModalitySequence { modality: m, features });
    }
    let label = qualities.iter().sum::<f64>() / qualities.len() as f64;
    Sample {
        stem: stem(index),
        sequences,
        label,
        meta: Some(SampleMeta {
            events,
            starts,
            qualities,
        }),
    }
}

/// Builds the whole dataset. Each sample draws from its own stream keyed by
/// `(seed, index)`, so the result does not depend on evaluation order.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let sig = signatures(spec);
    let samples: Vec<Sample> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(spec, &sig, i))
        .collect();
    let mut order: Vec<usize> = (0..spec.n_samples).collect();
    RngState::new(spec.seed).fork(SPLIT_STREAM).shuffle(&mut order);
    let mut is_test = vec![false; spec.n_samples];
    for &i in &order[..spec.n_test] {
        is_test[i] = true;
    }
    let mut ds = Dataset::default();
    for (s, test) in samples.into_iter().zip(is_test) {
        if test {
            ds.test.push(s);
        } else {
            ds.train.push(s);
        }
    }
    Ok(ds)
}
