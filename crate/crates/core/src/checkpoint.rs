//! Flat named-array container.
//!
//! Layout (little-endian): magic `IRMNPK01`, `u32` metadata length + UTF-8 JSON
//! metadata, `u32` entry count, then per entry: `u16` name length + name, `u8`
//! dtype tag (1 = f64), `u8` rank, `u64` per dimension, raw values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::vem::FrameFeatures;

const MAGIC: &[u8; 8] = b"IRMNPK01";
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedArrays {
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl NamedArrays {
    pub fn from_params(module: &impl Params, prefix: &str) -> Self {
        let mut arrays = Vec::new();
        module.visit(prefix, &mut |name, view| arrays.push((name, view.to_owned())));
        Self { metadata: BTreeMap::new(), arrays }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Copies stored arrays into `module`; every parameter must be present with
    /// a matching shape.
    pub fn load_into(&self, module: &mut impl Params, prefix: &str) -> Result<()> {
        let mut failure = None;
        module.visit_mut(prefix, &mut |name, mut view| {
            if failure.is_some() {
                return;
            }
            match self.get(&name) {
                Some(a) if a.shape() == view.shape() => view.assign(a),
                Some(a) => {
                    failure = Some(Error::shape(format!(
                        "checkpoint entry {name} has shape {:?}, expected {:?}",
                        a.shape(),
                        view.shape()
                    )))
                }
                None => failure = Some(Error::validation(format!("checkpoint is missing {name}"))),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
        for (name, array) in &self.arrays {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize || array.ndim() > u8::MAX as usize {
                return Err(Error::validation(format!("entry {name} cannot be encoded")));
            }
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            w.write_u8(DTYPE_F64)?;
            w.write_u8(array.ndim() as u8)?;
            for &d in array.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in array.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let corrupt = |what: &str| Error::Parse(format!("named-array container: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let meta_len = r.read_u32::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("non-UTF-8 entry name"))?;
            if r.read_u8()? != DTYPE_F64 {
                return Err(corrupt("unsupported dtype"));
            }
            let rank = r.read_u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
            let mut data = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            let array = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::shape(e.to_string()))?;
            arrays.push((name, array));
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

/// Frame features stored as `features` `[frames, tokens, dim]` plus `timestamps` `[frames]`.
pub fn frame_features_to_arrays(frames: &FrameFeatures) -> NamedArrays {
    NamedArrays {
        metadata: BTreeMap::new(),
        arrays: vec![
            ("features".into(), frames.data().clone().into_dyn()),
            ("timestamps".into(), ndarray::Array1::from(frames.timestamps().to_vec()).into_dyn()),
        ],
    }
}

pub fn read_frame_features(path: &Path) -> Result<FrameFeatures> {
    let arrays = NamedArrays::load(path)?;
    let missing = |n: &str| Error::validation(format!("{}: missing {n}", path.display()));
    let data: Array3<f64> = arrays
        .get("features")
        .ok_or_else(|| missing("features"))?
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::shape(e.to_string()))?;
    let ts = arrays.get("timestamps").ok_or_else(|| missing("timestamps"))?;
    if ts.ndim() != 1 {
        return Err(Error::shape("timestamps must be one-dimensional"));
    }
    FrameFeatures::new(data, ts.iter().copied().collect())
}

/// Convenience for two-dimensional entries.
pub fn matrix(arrays: &NamedArrays, name: &str) -> Result<Array2<f64>> {
    arrays
        .get(name)
        .ok_or_else(|| Error::validation(format!("missing {name}")))?
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IrmModel, ModelConfig};
    use crate::nn::flatten_params;

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 8, head_count: 2, d_visual: 4, visual_head_count: 2, n_queries: 3, tokens_per_frame: 2, embed_seed: 1 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = IrmModel::init(tiny(), 11).unwrap();
        let mut pack = NamedArrays::from_params(&model, "model");
        pack.metadata.insert("seed".into(), "11".into());
        pack.arrays.push(("odd".into(), ArrayD::from_shape_vec(IxDyn(&[2]), vec![f64::MIN_POSITIVE, -0.0]).unwrap()));
        let mut buf = Vec::new();
        pack.write_to(&mut buf).unwrap();
        let back = NamedArrays::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.metadata, pack.metadata);
        for ((na, a), (nb, b)) in pack.arrays.iter().zip(&back.arrays) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut fresh = IrmModel::init(tiny(), 99).unwrap();
        back.load_into(&mut fresh, "model").unwrap();
        let bits = |m: &IrmModel| flatten_params(m).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&fresh), bits(&model));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(NamedArrays::read_from(&b"NOTMAGIC\0\0\0\0"[..]).is_err());
        let model = IrmModel::init(tiny(), 1).unwrap();
        let pack = NamedArrays::from_params(&model, "model");
        let mut bigger = IrmModel::init(ModelConfig { d_model: 16, ..tiny() }, 1).unwrap();
        assert!(pack.load_into(&mut bigger, "model").is_err());
        assert!(pack.load_into(&mut IrmModel::init(tiny(), 1).unwrap(), "other").is_err());
    }

    #[test]
    fn frame_feature_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let frames = crate::synth::synthetic_frames(&[1.0, 2.5], 3, 4, 7);
        frame_features_to_arrays(&frames).save(&path).unwrap();
        assert_eq!(read_frame_features(&path).unwrap(), frames);
    }
}
