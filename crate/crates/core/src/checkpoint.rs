//! HSCK checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "HSCK"  u32 version
//! u32 K, u32 branch_channels, u32 n + n x u32 scales, u32 trunk_depth,
//! u32 trunk_channels, u32 n + n x u32 tap_layers, u32 head_kernel, u8 branch_relu
//! u32 tensor_count, then per tensor:
//!     u32 name_len, name bytes, u32 rank, rank x u32 dims, f32 payload
//! u8 has_optimizer; if 1: u64 step, then the first- and second-moment
//!     tensors in the same record format, named "adam_m.*" and "adam_v.*"
//! ```
//!
//! Parameters are always stored as 32-bit floats.

use std::path::Path;

use crate::error::{HsidError, Result};
use crate::model::{ArchitectureSpec, ModelParams};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::AdamState;

pub const HSCK_MAGIC: [u8; 4] = *b"HSCK";
pub const HSCK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, params: &ModelParams<f32>, prefix: &str) {
    for (name, t) in params.named_tensors() {
        let name = format!("{prefix}{name}");
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank());
        t.shape().iter().for_each(|&d| put_u32(out, d));
        t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
}

fn checked_u32(v: usize, what: &str) -> Result<()> {
    u32::try_from(v)
        .map(|_| ())
        .map_err(|_| HsidError::DimensionOverflow(format!("{what} = {v} does not fit in u32")))
}

impl Checkpoint {
    pub fn new<T: Scalar>(spec: &ArchitectureSpec, params: &ModelParams<T>, optimizer: Option<&AdamState<T>>) -> Result<Self> {
        spec.validate()?;
        params.check_spec(spec)?;
        if let Some(s) = optimizer {
            s.m.check_spec(spec)?;
            s.v.check_spec(spec)?;
        }
        Ok(Checkpoint { spec: spec.clone(), params: params.cast(), optimizer: optimizer.map(AdamState::cast) })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.spec;
        for (v, what) in [(s.adjacent_bands, "K"), (s.branch_channels, "branch channels"), (s.trunk_channels, "trunk channels")] {
            checked_u32(v, what)?;
        }
        let mut out = Vec::new();
        out.extend_from_slice(&HSCK_MAGIC);
        out.extend_from_slice(&HSCK_VERSION.to_le_bytes());
        put_u32(&mut out, s.adjacent_bands);
        put_u32(&mut out, s.branch_channels);
        put_u32(&mut out, s.scales.len());
        s.scales.iter().for_each(|&k| put_u32(&mut out, k));
        put_u32(&mut out, s.trunk_depth);
        put_u32(&mut out, s.trunk_channels);
        put_u32(&mut out, s.tap_layers.len());
        s.tap_layers.iter().for_each(|&l| put_u32(&mut out, l));
        put_u32(&mut out, s.head_kernel);
        out.push(u8::from(s.branch_relu));
        put_u32(&mut out, self.params.named_tensors().len());
        put_tensors(&mut out, &self.params, "");
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                put_tensors(&mut out, &state.m, "adam_m.");
                put_tensors(&mut out, &state.v, "adam_v.");
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != HSCK_MAGIC {
            return Err(HsidError::BadMagic { expected: HSCK_MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != HSCK_VERSION {
            return Err(HsidError::VersionMismatch { found: version, supported: HSCK_VERSION });
        }
        let adjacent_bands = r.usize()?;
        let branch_channels = r.usize()?;
        let scales = r.list()?;
        let trunk_depth = r.usize()?;
        let trunk_channels = r.usize()?;
        let tap_layers = r.list()?;
        let head_kernel = r.usize()?;
        let branch_relu = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(HsidError::MalformedCheckpoint(format!("branch_relu flag {other}"))),
        };
        let spec = ArchitectureSpec {
            adjacent_bands,
            branch_channels,
            scales,
            trunk_depth,
            trunk_channels,
            tap_layers,
            head_kernel,
            branch_relu,
        };
        spec.validate()
            .map_err(|e| HsidError::MalformedCheckpoint(format!("stored architecture is invalid: {e}")))?;
        let count = r.usize()?;
        let expected = ModelParams::<f32>::zeros(&spec).named_tensors().len();
        if count != expected {
            return Err(HsidError::MalformedCheckpoint(format!(
                "architecture implies {expected} tensors, file lists {count}"
            )));
        }
        let params = r.params(&spec, "")?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let m = r.params(&spec, "adam_m.")?;
                let v = r.params(&spec, "adam_v.")?;
                if let Some((name, _)) = v.named_tensors().into_iter().find(|(_, t)| t.data().iter().any(|&x| x < 0.0)) {
                    return Err(HsidError::MalformedCheckpoint(format!("negative second moment in {name}")));
                }
                Some(AdamState { m, v, step })
            }
            other => return Err(HsidError::MalformedCheckpoint(format!("optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(HsidError::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { spec, params, optimizer })
    }

    /// Errors with a shape mismatch naming the first architecture field that
    /// differs from `expected`.
    pub fn check_compatible(&self, expected: &ArchitectureSpec) -> Result<()> {
        let (e, f) = (expected, &self.spec);
        let fields: [(&'static str, usize, usize); 8] = [
            ("adjacent_bands", e.adjacent_bands, f.adjacent_bands),
            ("branch_channels", e.branch_channels, f.branch_channels),
            ("scale count", e.scales.len(), f.scales.len()),
            ("trunk_depth", e.trunk_depth, f.trunk_depth),
            ("trunk_channels", e.trunk_channels, f.trunk_channels),
            ("tap count", e.tap_layers.len(), f.tap_layers.len()),
            ("head_kernel", e.head_kernel, f.head_kernel),
            ("branch_relu", e.branch_relu as usize, f.branch_relu as usize),
        ];
        if let Some((dim, want, got)) = fields.into_iter().find(|(_, a, b)| a != b) {
            return Err(HsidError::shape("checkpoint architecture", dim, want, got));
        }
        let pairs = e.scales.iter().zip(&f.scales).chain(e.tap_layers.iter().zip(&f.tap_layers));
        if let Some((want, got)) = pairs.into_iter().find(|(a, b)| a != b) {
            return Err(HsidError::shape("checkpoint architecture", "kernel or tap index", *want, *got));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(HsidError::Truncated {
            expected: (self.pos as u64).saturating_add(n as u64),
            found: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn list(&mut self) -> Result<Vec<usize>> {
        let n = self.usize()?;
        if n > 1024 {
            return Err(HsidError::MalformedCheckpoint(format!("implausible list length {n}")));
        }
        (0..n).map(|_| self.usize()).collect()
    }

    fn params(&mut self, spec: &ArchitectureSpec, prefix: &str) -> Result<ModelParams<f32>> {
        let mut params = ModelParams::<f32>::zeros(spec);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| format!("{prefix}{n}")).collect();
        for (slot, want) in params.tensors_mut().into_iter().zip(names) {
            let len = self.usize()?;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| HsidError::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
            if name != want {
                return Err(HsidError::MalformedCheckpoint(format!("found tensor {name:?} where {want:?} was expected")));
            }
            let rank = self.usize()?;
            if rank != slot.rank() {
                return Err(HsidError::shape(want, "rank", slot.rank(), rank));
            }
            let dims: Vec<usize> = (0..rank).map(|_| self.usize()).collect::<Result<_>>()?;
            slot.expect_shape(&dims, &want)?;
            let raw = self.take(slot.len() * 4)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            *slot = Tensor::from_vec(&dims, data)?;
        }
        Ok(params)
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    spec: &ArchitectureSpec,
    params: &ModelParams<T>,
    optimizer: Option<&AdamState<T>>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint::new(spec, params, optimizer)?.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| HsidError::io(path, e))
}

/// Reads a checkpoint; with `expected` set, an architecture that differs from it
/// is reported as a shape mismatch.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ArchitectureSpec>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| HsidError::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(spec) = expected {
        ckpt.check_compatible(spec)?;
    }
    Ok(ckpt)
}
