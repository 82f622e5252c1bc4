//! Named parameter storage, flat parameter vectors and checkpoint files.
//!
//! Every model keeps its tensors in a [`ParamSet`]. The set flattens to a
//! [`ParameterVector`] in manifest order, which is all the federation layer
//! ever sees. Checkpoints are the manifest followed by the values as
//! little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"AFFCLCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Free-form provenance label, e.g. the hash of the producing config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl Manifest {
    pub fn total_len(&self) -> usize {
        self.entries
            .last()
            .map_or(0, |e| e.offset + e.shape[0] * e.shape[1])
    }
}

/// Flat, ordered encoding of a model's parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Round every coordinate to the nearest `f32`, so that the vector
    /// survives a checkpoint round trip exactly.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.0 {
            *x = *x as f32 as f64;
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.entries[idx].value
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let (r, c) = e.value.dim();
                let entry = ManifestEntry {
                    name: e.name.clone(),
                    shape: [r, c],
                    offset,
                };
                offset += r * c;
                entry
            })
            .collect();
        Manifest { entries, tag: None }
    }

    pub fn to_vector(&self) -> ParameterVector {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend(e.value.iter().copied());
        }
        ParameterVector(out)
    }

    pub fn load_vector(&mut self, v: &ParameterVector) -> Result<()> {
        if v.len() != self.num_scalars() {
            return Err(Error::ManifestMismatch(format!(
                "vector has {} values, model expects {}",
                v.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            for (dst, src) in e.value.iter_mut().zip(&v.0[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }

    /// Binds every tensor as a trainable leaf of `g`, in set order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| g.param(e.value.clone())).collect()
    }

    /// Binds every tensor as a constant leaf of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| g.constant(e.value.clone()))
            .collect()
    }

    /// Flattens per-tensor gradients (zeros where absent) in manifest order.
    pub fn flat_grad(&self, grads: &crate::autodiff::Grads, bound: &[Var]) -> ParameterVector {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (e, v) in self.entries.iter().zip(bound) {
            match grads.get(*v) {
                Some(gm) => out.extend(gm.iter().copied()),
                None => out.extend(std::iter::repeat_n(0.0, e.value.len())),
            }
        }
        ParameterVector(out)
    }
}

/// Writes `manifest + values` as a checkpoint file.
pub fn write_checkpoint(path: &Path, manifest: &Manifest, values: &ParameterVector) -> Result<()> {
    if manifest.total_len() != values.len() {
        return Err(Error::ManifestMismatch(format!(
            "manifest describes {} values, vector has {}",
            manifest.total_len(),
            values.len()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let header = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * values.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for &x in &values.0 {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Manifest, ParameterVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(header_len)
        .filter(|&b| b <= bytes.len())
        .ok_or_else(|| Error::Integrity("checkpoint header truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body])
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let data = &bytes[body..];
    if data.len() != 4 * manifest.total_len() {
        return Err(Error::Integrity(format!(
            "checkpoint body has {} bytes, manifest needs {}",
            data.len(),
            4 * manifest.total_len()
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((manifest, ParameterVector(values)))
}

pub(crate) fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut impl rand::Rng) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_set() -> ParamSet {
        let mut p = ParamSet::new();
        p.add("a.weight", array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        p.add("a.bias", array![[0.5, -0.25]]);
        p
    }

    #[test]
    fn manifest_offsets_follow_insertion_order() {
        let m = sample_set().manifest();
        assert_eq!(m.entries[0].offset, 0);
        assert_eq!(m.entries[1].offset, 6);
        assert_eq!(m.entries[1].shape, [1, 2]);
        assert_eq!(m.total_len(), 8);
    }

    #[test]
    fn vector_round_trip_and_mismatch() {
        let mut p = sample_set();
        let v = p.to_vector();
        assert_eq!(v.0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.25]);
        let doubled = ParameterVector(v.0.iter().map(|x| 2.0 * x).collect());
        p.load_vector(&doubled).unwrap();
        assert_eq!(p.get(1), &array![[1.0, -0.5]]);
        assert!(matches!(
            p.load_vector(&ParameterVector(vec![0.0; 3])),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/model.ckpt");
        let p = sample_set();
        let mut v = p.to_vector();
        v.0[0] = 0.1;
        v.round_to_f32();
        write_checkpoint(&path, &p.manifest(), &v).unwrap();
        let (m, back) = read_checkpoint(&path).unwrap();
        assert_eq!(m, p.manifest());
        assert_eq!(back, v);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Integrity(_))));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }
}
