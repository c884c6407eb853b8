//! Segment-level feature container.
//!
//! ```text
//! magic   "LMFV"
//! version u32 (= 1)
//! tag     u8   (0 rgb, 1 flow, 2 audio)
//! T       u32
//! d       u32
//! values  f32 × T·d, row-major
//! label   f64      (rgb file only)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"LMFV";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub modality: Modality,
    /// `[T, d]`
    pub features: Tensor<f32>,
    /// Present exactly when `modality` is RGB.
    pub label: Option<f64>,
}

pub fn feature_path(dir: &Path, stem: &str, m: Modality) -> PathBuf {
    dir.join(format!("{stem}.{m}.lmfv"))
}

fn encode(f: &FeatureFile) -> std::io::Result<Vec<u8>> {
    let (t, d) = (f.features.rows(), f.features.cols());
    let mut buf = Vec::with_capacity(17 + 4 * t * d + 8);
    buf.write_all(FEATURE_MAGIC)?;
    buf.write_u32::<LittleEndian>(FEATURE_VERSION)?;
    buf.write_u8(f.modality.tag())?;
    buf.write_u32::<LittleEndian>(t as u32)?;
    buf.write_u32::<LittleEndian>(d as u32)?;
    for &x in f.features.data() {
        buf.write_f32::<LittleEndian>(x)?;
    }
    if let Some(label) = f.label {
        buf.write_f64::<LittleEndian>(label)?;
    }
    Ok(buf)
}

fn decode(bytes: &[u8]) -> std::result::Result<FeatureFile, String> {
    let mut r = bytes;
    let eof = |_| "unexpected end of file".to_string();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != FEATURE_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != FEATURE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let tag = r.read_u8().map_err(eof)?;
    let modality = Modality::from_tag(tag).ok_or_else(|| format!("unknown modality tag {tag}"))?;
    let t = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if t == 0 || d == 0 {
        return Err(format!("empty feature matrix {t}x{d}"));
    }
    let tail = if modality == Modality::Rgb { 8 } else { 0 };
    let expected = t * d * 4 + tail;
    if r.len() != expected {
        return Err(format!(
            "size mismatch: header declares {t}x{d} ({expected} payload bytes), found {}",
            r.len()
        ));
    }
    let mut data = vec![0f32; t * d];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(eof)?;
    let label = if tail > 0 {
        Some(r.read_f64::<LittleEndian>().map_err(eof)?)
    } else {
        None
    };
    let features = Tensor::new(&[t, d], data).map_err(|e| e.to_string())?;
    Ok(FeatureFile {
        modality,
        features,
        label,
    })
}

pub fn write_feature_file(path: &Path, f: &FeatureFile) -> Result<()> {
    if f.features.rank() != 2 {
        return Err(Error::shape("write_feature_file", format!("{:?} is not [T, d]", f.features.shape())));
    }
    if f.label.is_some() != (f.modality == Modality::Rgb) {
        return Err(Error::Data(format!("only the rgb file carries a label ({} given)", f.modality)));
    }
    let bytes = encode(f).map_err(|e| Error::io(path, e))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::format(path, detail))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb() -> FeatureFile {
        FeatureFile {
            modality: Modality::Rgb,
            features: Tensor::from_f64(&[2, 3], &[0.5, -1.25, 3.0, 1e-7, 0.0, -0.0]).unwrap(),
            label: Some(0.123456789),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rgb.lmfv");
        write_feature_file(&p, &rgb()).unwrap();
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back.label, rgb().label);
        let bits = |f: &FeatureFile| f.features.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&rgb()));
        assert_eq!(fs::metadata(&p).unwrap().len(), 17 + 24 + 8);
    }

    #[test]
    fn truncation_is_a_size_mismatch() {
        let bytes = encode(&rgb()).unwrap();
        let err = decode(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.contains("size mismatch"), "{err}");
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(decode(&bad).unwrap_err().contains("magic"));
    }

    #[test]
    fn label_only_on_rgb() {
        let f = FeatureFile {
            modality: Modality::Flow,
            features: Tensor::zeros(&[1, 1]),
            label: Some(1.0),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(write_feature_file(&dir.path().join("x"), &f).is_err());
    }
}
