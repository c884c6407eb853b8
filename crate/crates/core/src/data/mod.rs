//! Samples, datasets and their on-disk layout.
//!
//! A dataset directory holds one feature-file triple per sample,
//! `{stem}.{rgb,flow,audio}.lmfv`, plus `manifest.json` listing every stem
//! and its split.

mod feature_file;
mod preprocess;
pub mod synthetic;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use feature_file::{feature_path, read_feature_file, write_feature_file, FeatureFile, FEATURE_MAGIC, FEATURE_VERSION};
pub use preprocess::{normalize_labels, segment_and_pad, LabelNorm, SEGMENT_LEN};
pub use synthetic::{generate, SyntheticSpec};

use crate::error::{Error, Result};
use crate::modality::{Modality, ModalitySequence};

pub const MANIFEST: &str = "manifest.json";

/// Generator bookkeeping, never shown to the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    /// Nominal window starts, one per event.
    pub events: Vec<usize>,
    /// Jittered window starts per modality.
    pub starts: Vec<(Modality, Vec<usize>)>,
    pub qualities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    /// In `Modality::ALL` order, restricted to the loaded modalities.
    pub sequences: Vec<ModalitySequence>,
    pub label: f64,
    pub meta: Option<SampleMeta>,
}

impl Sample {
    pub fn segments(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.len())
    }

    pub fn sequence(&self, m: Modality) -> Option<&ModalitySequence> {
        self.sequences.iter().find(|s| s.modality == m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub stem: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.test)
    }

    /// Feature dimension of every loaded modality.
    pub fn dims(&self) -> Vec<(Modality, usize)> {
        self.samples()
            .next()
            .map(|s| s.sequences.iter().map(|q| (q.modality, q.dim())).collect())
            .unwrap_or_default()
    }

    /// Keeps only the listed modalities.
    pub fn restrict(&mut self, modalities: &[Modality]) {
        for s in self.train.iter_mut().chain(self.test.iter_mut()) {
            s.sequences.retain(|q| modalities.contains(&q.modality));
        }
    }
}

/// Writes one sample's triple. The label travels in the RGB file.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    for seq in &sample.sequences {
        let f = FeatureFile {
            modality: seq.modality,
            features: seq.features.clone(),
            label: (seq.modality == Modality::Rgb).then_some(sample.label),
        };
        write_feature_file(&feature_path(dir, &sample.stem, seq.modality), &f)?;
    }
    Ok(())
}

/// Reads the requested modalities of one sample. The RGB file is always
/// read for its label even when RGB features are not requested.
pub fn read_sample(dir: &Path, stem: &str, modalities: &[Modality]) -> Result<Sample> {
    let rgb_path = feature_path(dir, stem, Modality::Rgb);
    let rgb = read_feature_file(&rgb_path)?;
    if rgb.modality != Modality::Rgb {
        return Err(Error::format(&rgb_path, format!("tagged as {}", rgb.modality)));
    }
    let label = rgb.label.expect("rgb files always carry a label");
    let mut sequences = Vec::new();
    for m in Modality::ALL.into_iter().filter(|m| modalities.contains(m)) {
        let f = if m == Modality::Rgb {
            rgb.clone()
        } else {
            let path = feature_path(dir, stem, m);
            let f = read_feature_file(&path)?;
            if f.modality != m {
                return Err(Error::format(&path, format!("tagged as {}, expected {m}", f.modality)));
            }
            f
        };
        sequences.push(ModalitySequence::new(m, f.features)?);
    }
    if let Some(first) = sequences.first() {
        if let Some(other) = sequences.iter().find(|s| s.len() != first.len()) {
            return Err(Error::Data(format!(
                "sample {stem}: {} has T={} but {} has T={}",
                first.modality,
                first.len(),
                other.modality,
                other.len()
            )));
        }
    }
    Ok(Sample {
        stem: stem.to_string(),
        sequences,
        label,
        meta: None,
    })
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.train
        .par_iter()
        .chain(ds.test.par_iter())
        .try_for_each(|s| write_sample(dir, s))?;
    let mut samples: Vec<ManifestEntry> = ds
        .train
        .iter()
        .map(|s| (s, Split::Train))
        .chain(ds.test.iter().map(|s| (s, Split::Test)))
        .map(|(s, split)| ManifestEntry {
            stem: s.stem.clone(),
            split,
        })
        .collect();
    samples.sort_by(|a, b| a.stem.cmp(&b.stem));
    Manifest { samples }.write(dir)
}

/// Loads every manifest entry, restricted to `modalities`. Checks that
/// feature dimensions agree across samples.
pub fn load_dataset(dir: &Path, modalities: &[Modality]) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    if manifest.samples.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", dir.join(MANIFEST).display())));
    }
    let loaded: Vec<(Split, Sample)> = manifest
        .samples
        .par_iter()
        .map(|e| read_sample(dir, &e.stem, modalities).map(|s| (e.split, s)))
        .collect::<Result<_>>()?;
    let mut ds = Dataset::default();
    for (split, s) in loaded {
        match split {
            Split::Train => ds.train.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    let dims = ds.dims();
    if let Some(s) = ds.samples().find(|s| s.sequences.iter().map(|q| (q.modality, q.dim())).collect::<Vec<_>>() != dims) {
        return Err(Error::Data(format!("sample {} has feature dimensions that differ from {dims:?}", s.stem)));
    }
    if ds.train.is_empty() {
        return Err(Error::Data("the manifest has no training samples".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 12,
            n_test: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&spec()).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path(), &Modality::ALL).unwrap();
        assert_eq!(back.train.len(), 8);
        for (a, b) in ds.samples().zip(back.samples()) {
            assert_eq!(a.stem, b.stem);
            assert_eq!(a.label.to_bits(), b.label.to_bits());
            assert_eq!(a.sequences, b.sequences);
        }
        let bimodal = load_dataset(dir.path(), &[Modality::Rgb, Modality::Flow]).unwrap();
        assert_eq!(bimodal.dims(), vec![(Modality::Rgb, 16), (Modality::Flow, 16)]);
    }

    #[test]
    fn missing_audio_is_fine_for_bimodal_loads() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&spec()).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        for s in ds.samples() {
            fs::remove_file(feature_path(dir.path(), &s.stem, Modality::Audio)).unwrap();
        }
        assert!(load_dataset(dir.path(), &Modality::ALL).is_err());
        assert!(load_dataset(dir.path(), &[Modality::Rgb, Modality::Flow]).is_ok());
    }

    #[test]
    fn unequal_segment_counts_are_an_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = Sample {
            stem: "x".into(),
            sequences: vec![
                ModalitySequence::new(Modality::Rgb, Tensor::zeros(&[10, 2])).unwrap(),
                ModalitySequence::new(Modality::Flow, Tensor::zeros(&[9, 2])).unwrap(),
            ],
            label: 0.5,
            meta: None,
        };
        write_sample(dir.path(), &s).unwrap();
        let err = read_sample(dir.path(), "x", &[Modality::Rgb, Modality::Flow]).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }
}
