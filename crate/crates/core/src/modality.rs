use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Flow,
    Audio,
}

impl Modality {
    /// Fixed fusion order.
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Audio => "audio",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "flow" => Ok(Modality::Flow),
            "audio" => Ok(Modality::Audio),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Per-modality scalar settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerModality<T> {
    pub rgb: T,
    pub flow: T,
    pub audio: T,
}

impl<T> PerModality<T> {
    pub fn get_ref(&self, m: Modality) -> &T {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
            Modality::Audio => &self.audio,
        }
    }
}

impl<T: Copy> PerModality<T> {
    pub fn splat(v: T) -> Self {
        PerModality { rgb: v, flow: v, audio: v }
    }

    pub fn get(&self, m: Modality) -> T {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Flow => self.flow,
            Modality::Audio => self.audio,
        }
    }
}

/// One modality's segment-level features, `[T, d_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySequence {
    pub modality: Modality,
    pub features: Tensor<f32>,
}

impl ModalitySequence {
    pub fn new(modality: Modality, features: Tensor<f32>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape(
                "modality_sequence",
                format!("features must be [T, d], got {:?}", features.shape()),
            ));
        }
        Ok(ModalitySequence { modality, features })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}
