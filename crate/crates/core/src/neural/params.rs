use super::NeuralError;
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Layer widths `[in, h1, …, out]` plus `extra` trailing free parameters.
/// Layer `k` stores its `out×in` weights row-major, then its biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub extra: usize,
}

impl Manifest {
    pub fn new(sizes: Vec<usize>, extra: usize) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "manifest needs ≥1 layer of non-zero width");
        Manifest { sizes, extra }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// `(weight offset, bias offset)` of layer `k`.
    pub fn layer_offsets(&self, k: usize) -> (usize, usize) {
        let mut off = 0;
        for j in 0..k {
            off += self.sizes[j + 1] * (self.sizes[j] + 1);
        }
        (off, off + self.sizes[k + 1] * self.sizes[k])
    }

    pub fn network_len(&self) -> usize {
        (0..self.n_layers()).map(|k| self.sizes[k + 1] * (self.sizes[k] + 1)).sum()
    }

    pub fn len(&self) -> usize {
        self.network_len() + self.extra
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    manifest: Manifest,
    data: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(manifest: Manifest) -> Self {
        let data = vec![T::zero(); manifest.len()];
        ParamVector { manifest, data }
    }

    pub fn from_vec(manifest: Manifest, data: Vec<T>) -> Result<Self, NeuralError> {
        if data.len() != manifest.len() {
            return Err(NeuralError::Shape { what: "parameter vector", expected: manifest.len(), got: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NeuralError::NonFinite("parameter vector".into()));
        }
        Ok(ParamVector { manifest, data })
    }

    /// Semi-orthogonal weights (orthonormal columns when `out ≥ in`,
    /// orthonormal rows otherwise), zero biases, `extra` set to `extra_init`.
    pub fn orthogonal<R: Rng + ?Sized>(manifest: Manifest, rng: &mut R, extra_init: T) -> Self {
        let mut p = Self::zeros(manifest);
        for k in 0..p.manifest.n_layers() {
            let (n_in, n_out) = (p.manifest.sizes[k], p.manifest.sizes[k + 1]);
            let w = semi_orthogonal(n_out, n_in, rng);
            let (wo, _) = p.manifest.layer_offsets(k);
            for (dst, src) in p.data[wo..wo + n_out * n_in].iter_mut().zip(w) {
                *dst = T::lit(src);
            }
        }
        p.extra_mut().iter_mut().for_each(|x| *x = extra_init);
        p
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Replace the values, keeping the manifest.
    pub fn set(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.data.len());
        self.data.copy_from_slice(values);
    }

    pub fn weights(&self, k: usize) -> &[T] {
        let (w, b) = self.manifest.layer_offsets(k);
        &self.data[w..b]
    }

    pub fn bias(&self, k: usize) -> &[T] {
        let (_, b) = self.manifest.layer_offsets(k);
        &self.data[b..b + self.manifest.sizes[k + 1]]
    }

    pub fn extra(&self) -> &[T] {
        &self.data[self.manifest.network_len()..]
    }

    pub fn extra_mut(&mut self) -> &mut [T] {
        let off = self.manifest.network_len();
        &mut self.data[off..]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamVector<U> {
        ParamVector { manifest: self.manifest.clone(), data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect() }
    }
}

/// Gaussian matrix orthonormalized by modified Gram-Schmidt along its
/// longer side. Row-major `rows×cols` in `f64`.
fn semi_orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // `short` vectors of length `long`
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(short);
    while vecs.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &vecs {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            vecs.push(v);
        }
    }
    let mut w = vec![0.0; rows * cols];
    for (s, v) in vecs.iter().enumerate() {
        for (l, &x) in v.iter().enumerate() {
            if rows >= cols {
                w[l * cols + s] = x;
            } else {
                w[s * cols + l] = x;
            }
        }
    }
    w
}

const MAGIC: &[u8; 8] = b"GFXPARAM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    entries: Vec<HeaderEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    manifest: Manifest,
}

/// Named parameter vectors plus free-form metadata, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, ParamVector<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&ParamVector<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }
}

/// Layout: magic, `u32` version, `u32` header length, JSON header, then each
/// entry's values as little-endian `f64` in header order.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), NeuralError> {
    let header = Header {
        entries: ckpt.entries.iter().map(|(n, p)| HeaderEntry { name: n.clone(), manifest: p.manifest.clone() }).collect(),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * ckpt.entries.iter().map(|(_, p)| p.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in &ckpt.entries {
        for x in &p.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, NeuralError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let bad = |m: &str| NeuralError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a parameter checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    let mut pos = 16 + hlen;
    let mut entries = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let n = e.manifest.len();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        pos += 8 * n;
        entries.push((e.name, ParamVector::from_vec(e.manifest, data)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after data"));
    }
    Ok(Checkpoint { entries, meta: header.meta })
}
