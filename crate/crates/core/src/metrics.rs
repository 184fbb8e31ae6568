//! Sparsity projection, MAC counting and the on-disk checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "LTHT"  u32 version  u32 tensor_count
//! per tensor:
//!   u32 id_len, id bytes (UTF-8)
//!   u32 ndim, u32 dims[ndim]
//!   u8 mode (0 dense, 1 sparse)  u8 maskable
//!   dense:  f32 values[n], u8 has_mask, [ceil(n/8) mask bytes, LSB first]
//!   sparse: u32 nnz, u32 indices[nnz] strictly increasing, f32 values[nnz]
//! ```
//!
//! Sparse tensors store the mask-kept positions; every other position loads
//! as `+0.0` and as pruned.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{Bits, PruneMask};
use crate::nn::{LayerSpec, NetworkSpec, ParameterSet, Tensor};

pub const MAGIC: &[u8; 4] = b"LTHT";
pub const VERSION: u32 = 1;
/// Sparse storage is used when the kept fraction is strictly below this.
pub const BREAK_EVEN: f64 = 0.5;

/// Network sparsity when a group holding `group_fraction` of all parameters
/// is pruned by `prune_fraction`.
pub fn project_sparsity(prune_fraction: f64, group_fraction: f64) -> f64 {
    prune_fraction * group_fraction
}

/// `(dense, sparsity-adjusted)` multiply-accumulates of one layer for a
/// single input. Layers without weights cost nothing.
pub fn mac_count(layer: &LayerSpec, input_hw: (usize, usize), sparsity: f64) -> (u64, f64) {
    let dense = match *layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => (input_hw.0 * input_hw.1 * out_channels * in_channels * kernel * kernel) as u64,
        LayerSpec::Dense {
            in_features,
            out_features,
        } => (in_features * out_features) as u64,
        _ => 0,
    };
    (dense, dense as f64 * (1.0 - sparsity))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageMode {
    Dense,
    Sparse,
}

/// Sparse iff the kept fraction is strictly below [`BREAK_EVEN`].
pub fn choose_storage(bits: Option<&Bits>) -> StorageMode {
    match bits {
        Some(b) if !b.is_empty() && (b.count_ones() as f64) < BREAK_EVEN * b.len() as f64 => {
            StorageMode::Sparse
        }
        _ => StorageMode::Dense,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub id: String,
    pub tensor: Tensor,
    pub mode: StorageMode,
    pub maskable: bool,
    /// Present when sparse, or when a dense tensor carried a mask.
    pub bits: Option<Bits>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCheckpoint {
    pub tensors: Vec<StoredTensor>,
}

impl SparseCheckpoint {
    pub fn params(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        for t in &self.tensors {
            p.insert(t.id.clone(), t.tensor.clone());
        }
        p
    }

    /// The stored mask; tensors without bits count as all ones.
    pub fn mask(&self) -> Result<PruneMask> {
        let bits: IndexMap<String, Bits> = self
            .tensors
            .iter()
            .map(|t| {
                (
                    t.id.clone(),
                    t.bits.clone().unwrap_or_else(|| Bits::ones(t.tensor.len())),
                )
            })
            .collect();
        let maskable: BTreeSet<String> = self
            .tensors
            .iter()
            .filter(|t| t.maskable)
            .map(|t| t.id.clone())
            .collect();
        PruneMask::from_parts(bits, maskable)
    }
}

fn header_len(id: &str, ndim: usize) -> usize {
    4 + id.len() + 4 + 4 * ndim + 2
}

fn tensor_bytes(id: &str, t: &Tensor, bits: Option<&Bits>) -> usize {
    let n = t.len();
    header_len(id, t.shape().len())
        + match choose_storage(bits) {
            StorageMode::Sparse => 4 + 8 * bits.map_or(n, Bits::count_ones),
            StorageMode::Dense => {
                let masked = bits.is_some_and(|b| b.count_zeros() > 0);
                4 * n + 1 + if masked { n.div_ceil(8) } else { 0 }
            }
        }
}

fn check_inputs(params: &ParameterSet, mask: Option<&PruneMask>) -> Result<()> {
    if let Some(m) = mask {
        if !m.is_satisfied_by(params)? {
            return Err(Error::Contract(
                "parameters have non-zero values at pruned positions".into(),
            ));
        }
    }
    if let Some((id, _)) = params.iter().find(|(_, t)| t.len() > u32::MAX as usize) {
        return Err(Error::Format {
            tensor: id.to_string(),
            reason: "more than 2^32 elements".into(),
        });
    }
    Ok(())
}

/// Exact byte size `encode` would produce.
pub fn predicted_size(params: &ParameterSet, mask: Option<&PruneMask>) -> Result<usize> {
    check_inputs(params, mask)?;
    let mut n = 12;
    for (id, t) in params.iter() {
        n += tensor_bytes(id, t, mask.map(|m| m.get(id)).transpose()?);
    }
    Ok(n)
}

/// Serialise parameters (and optionally a mask) in the checkpoint format.
/// Pruned positions must hold `+0.0`.
pub fn encode(params: &ParameterSet, mask: Option<&PruneMask>) -> Result<Vec<u8>> {
    check_inputs(params, mask)?;
    let mut out = Vec::with_capacity(predicted_size(params, mask)?);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for (id, t) in params.iter() {
        let bits = mask.map(|m| m.get(id)).transpose()?;
        let maskable = mask.is_some_and(|m| m.is_maskable(id));
        u32le(&mut out, id.len());
        out.extend_from_slice(id.as_bytes());
        u32le(&mut out, t.shape().len());
        for &d in t.shape() {
            u32le(&mut out, d);
        }
        let mode = choose_storage(bits);
        out.push(match mode {
            StorageMode::Dense => 0,
            StorageMode::Sparse => 1,
        });
        out.push(maskable as u8);
        match mode {
            StorageMode::Dense => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                match bits.filter(|b| b.count_zeros() > 0) {
                    Some(b) => {
                        out.push(1);
                        out.extend_from_slice(&b.to_bytes());
                    }
                    None => out.push(0),
                }
            }
            StorageMode::Sparse => {
                let b = bits.expect("sparse storage implies a mask");
                let kept: Vec<usize> = (0..t.len()).filter(|&i| b.get(i)).collect();
                u32le(&mut out, kept.len());
                for &i in &kept {
                    u32le(&mut out, i);
                }
                for &i in &kept {
                    out.extend_from_slice(&t.data()[i].to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    tensor: String,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            tensor: self.tensor.clone(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse a checkpoint, validating every field. Nothing is returned on error.
pub fn decode(buf: &[u8]) -> Result<SparseCheckpoint> {
    let mut r = Reader {
        buf,
        pos: 0,
        tensor: "<header>".into(),
    };
    if r.take(4)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    let mut seen = BTreeSet::new();
    for k in 0..count {
        r.tensor = format!("<tensor {k}>");
        let id_len = r.u32()?;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| r.fail("id is not UTF-8"))?
            .to_string();
        r.tensor = id.clone();
        if !seen.insert(id.clone()) {
            return Err(r.fail("duplicate id"));
        }
        let ndim = r.u32()?;
        if ndim == 0 || ndim > 8 {
            return Err(r.fail(format!("{ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| if d == 0 { None } else { a.checked_mul(d) })
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| r.fail(format!("invalid shape {shape:?}")))?;
        let mode = match r.u8()? {
            0 => StorageMode::Dense,
            1 => StorageMode::Sparse,
            m => return Err(r.fail(format!("storage mode {m}"))),
        };
        let maskable = match r.u8()? {
            0 => false,
            1 => true,
            m => return Err(r.fail(format!("maskable flag {m}"))),
        };
        let (data, bits) = match mode {
            StorageMode::Dense => {
                let data = r.f32s(n)?;
                let bits = match r.u8()? {
                    0 => None,
                    1 => {
                        let raw = r.take(n.div_ceil(8))?;
                        let b = Bits::from_bytes(raw, n).ok_or_else(|| r.fail("mask padding bits set"))?;
                        if (0..n).any(|i| !b.get(i) && data[i].to_bits() != 0) {
                            return Err(r.fail("non-zero value at a pruned position"));
                        }
                        Some(b)
                    }
                    f => return Err(r.fail(format!("mask flag {f}"))),
                };
                (data, bits)
            }
            StorageMode::Sparse => {
                let nnz = r.u32()?;
                if nnz > n {
                    return Err(r.fail(format!("{nnz} entries for {n} elements")));
                }
                let mut idx = Vec::with_capacity(nnz);
                for _ in 0..nnz {
                    idx.push(r.u32()?);
                }
                if idx.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(r.fail("indices not strictly increasing"));
                }
                if idx.last().is_some_and(|&i| i >= n) {
                    return Err(r.fail("index out of range"));
                }
                let values = r.f32s(nnz)?;
                let mut data = vec![0.0f32; n];
                let mut b = Bits::zeros(n);
                for (&i, v) in idx.iter().zip(values) {
                    data[i] = v;
                    b.set(i, true);
                }
                (data, Some(b))
            }
        };
        if !maskable && bits.as_ref().is_some_and(|b| b.count_zeros() > 0) {
            return Err(r.fail("pruned positions in a non-maskable tensor"));
        }
        tensors.push(StoredTensor {
            id,
            tensor: Tensor::new(shape, data)?,
            mode,
            maskable,
            bits,
        });
    }
    if r.pos != buf.len() {
        r.tensor = "<trailer>".into();
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(SparseCheckpoint { tensors })
}

pub fn store(path: &Path, params: &ParameterSet, mask: Option<&PruneMask>) -> Result<usize> {
    let bytes = encode(params, mask)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn load(path: &Path) -> Result<SparseCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub weight_id: String,
    pub dense_macs: u64,
    pub adjusted_macs: f64,
    pub weight_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub head: String,
    pub layers: Vec<LayerCost>,
    pub dense_macs: u64,
    pub adjusted_macs: f64,
    /// Size of the serialised checkpoint.
    pub bytes: usize,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("weight_id,dense_macs,adjusted_macs,weight_sparsity\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{:.1},{:.6}",
                l.weight_id, l.dense_macs, l.adjusted_macs, l.weight_sparsity
            );
        }
        let _ = writeln!(s, "total,{},{:.1},", self.dense_macs, self.adjusted_macs);
        let _ = writeln!(s, "bytes,{},,", self.bytes);
        s
    }
}

/// Per-layer MACs along the backbone and `head`, plus checkpoint bytes.
pub fn cost_report(
    spec: &NetworkSpec,
    head: &str,
    params: &ParameterSet,
    mask: &PruneMask,
) -> Result<CostReport> {
    spec.head(head)?;
    let mut layers = Vec::new();
    for pl in spec.param_layers()? {
        if pl.head.as_deref().is_some_and(|h| h != head) {
            continue;
        }
        let id = pl.weight_id();
        let b = mask.get(&id)?;
        let (dense, _) = mac_count(&pl.layer, pl.input_hw, 0.0);
        // exact: dense * kept / total
        let adjusted = (dense as u128 * b.count_ones() as u128) as f64 / b.len() as f64;
        layers.push(LayerCost {
            weight_id: id,
            dense_macs: dense,
            adjusted_macs: adjusted,
            weight_sparsity: b.count_zeros() as f64 / b.len() as f64,
        });
    }
    Ok(CostReport {
        head: head.to_string(),
        dense_macs: layers.iter().map(|l| l.dense_macs).sum(),
        adjusted_macs: layers.iter().map(|l| l.adjusted_macs).sum(),
        layers,
        bytes: predicted_size(params, Some(mask))?,
    })
}
