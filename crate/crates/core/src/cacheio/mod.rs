//! Binary persistence of compressed contexts and training checkpoints.
//!
//! Every file is `magic "MCC1" | version u32 | kind u8 | body | crc32`, all
//! little-endian, with the CRC taken over everything before it. Contexts
//! (kinds 0 and 1) have a fixed 58-byte header:
//!
//! ```text
//! magic[4] version u32 kind u8 L u32 m u32 d u32 dtype u8 source_t u32 config_hash[32]
//! ```
//!
//! followed by the payload, layer-major then token-major then channel-major.
//! Checkpoints (kind 2) carry a JSON description of the run, the parameter
//! tensors, and the optimizer moments.

#[cfg(test)]
mod tests;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compressors::{CompressedContext, ContextKind, Method, PhaseStamp, System};
use crate::error::{Error, Result};
use crate::numerics::{DType, Float, Tensor};
use crate::training::{AdamConfig, OptimizerState};
use crate::transformer::{ModelConfig, ParamStore};

pub const MAGIC: &[u8; 4] = b"MCC1";
pub const VERSION: u32 = 1;
pub const CONTEXT_HEADER_LEN: usize = 58;
pub const CRC_LEN: usize = 4;
pub const CHECKPOINT_KIND: u8 = 2;

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

/// Verify the CRC and the common prefix; returns the kind and the bytes
/// after it (without the CRC).
fn unseal(bytes: &[u8]) -> Result<(u8, &[u8])> {
    if bytes.len() < MAGIC.len() + 5 + CRC_LEN {
        return Err(Error::Corrupt(format!("file of {} bytes is too short", bytes.len())));
    }
    let (body, crc) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("CRC mismatch".into()));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok((body[8], &body[9..]))
}

/// Bounds-checked little-endian cursor.
struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::Corrupt(format!("needed {n} bytes, {} left", self.buf.len())));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.usize()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Corrupt("invalid UTF-8".into()))
    }

    fn floats<S: Float>(&mut self, n: usize) -> Result<Vec<S>> {
        let w = S::DTYPE.size();
        let bytes = n
            .checked_mul(w)
            .ok_or_else(|| Error::Corrupt("payload size overflows".into()))?;
        Ok(self.take(bytes)?.chunks_exact(w).map(S::read_le).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Corrupt(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn prelude(kind: u8) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out
}

fn check_dtype<S: Float>(byte: u8) -> Result<()> {
    match DType::from_byte(byte) {
        Some(d) if d == S::DTYPE => Ok(()),
        Some(d) => Err(Error::Unsupported(format!("file stores {d:?}, reader expects {:?}", S::DTYPE))),
        None => Err(Error::Corrupt(format!("unknown dtype byte {byte}"))),
    }
}

pub fn encode_context<S: Float>(ctx: &CompressedContext<S>) -> Result<Vec<u8>> {
    let (m, d) = (ctx.m(), ctx.d());
    let expect_arrays = match ctx.kind {
        ContextKind::PerLayer => ctx.layers.len(),
        ContextKind::EmbeddingPrefix => 1,
    };
    if ctx.layers.is_empty() || ctx.layers.len() != expect_arrays || ctx.layers.iter().any(|t| t.shape() != [m, d]) {
        return Err(Error::shape("save_context", "context arrays are not uniform [m, d]"));
    }
    let mut out = prelude(ctx.kind as u8);
    put_u32(&mut out, ctx.layers.len())?;
    put_u32(&mut out, m)?;
    put_u32(&mut out, d)?;
    out.push(S::DTYPE as u8);
    put_u32(&mut out, ctx.source_t)?;
    out.extend_from_slice(&ctx.config_hash);
    debug_assert_eq!(out.len(), CONTEXT_HEADER_LEN);
    for t in &ctx.layers {
        out.extend(t.to_le_bytes());
    }
    Ok(seal(out))
}

pub fn decode_context<S: Float>(bytes: &[u8]) -> Result<CompressedContext<S>> {
    let (kind, body) = unseal(bytes)?;
    let kind = ContextKind::from_byte(kind).ok_or_else(|| Error::Corrupt(format!("kind {kind} is not a context")))?;
    let mut r = Reader { buf: body };
    let layers = r.usize()?;
    let m = r.usize()?;
    let d = r.usize()?;
    check_dtype::<S>(r.u8()?)?;
    let source_t = r.usize()?;
    let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if layers == 0 || m == 0 || d == 0 || (kind == ContextKind::EmbeddingPrefix && layers != 1) {
        return Err(Error::Corrupt(format!("degenerate context dimensions L={layers} m={m} d={d}")));
    }
    let per = m.checked_mul(d).ok_or_else(|| Error::Corrupt("payload size overflows".into()))?;
    if per.checked_mul(layers).and_then(|n| n.checked_mul(S::DTYPE.size())) != Some(r.buf.len()) {
        return Err(Error::Corrupt(format!(
            "payload of {} bytes does not match L={layers} m={m} d={d}",
            r.buf.len()
        )));
    }
    let arrays = (0..layers)
        .map(|_| Tensor::new([m, d], r.floats::<S>(per)?))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(CompressedContext {
        kind,
        layers: arrays,
        source_t,
        config_hash,
    })
}

pub fn save_context<S: Float>(ctx: &CompressedContext<S>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_context(ctx)?)
}

pub fn load_context<S: Float>(path: &Path) -> Result<CompressedContext<S>> {
    decode_context(&read_file(path)?)
}

/// Context header fields without the payload, for inspection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContextHeader {
    pub version: u32,
    pub kind: ContextKind,
    pub layers: usize,
    pub m: usize,
    pub d: usize,
    pub dtype: u8,
    pub source_t: usize,
    pub config_hash: String,
    pub payload_bytes: usize,
    pub crc32: u32,
}

/// Validate a context file and report its header.
pub fn inspect_context(bytes: &[u8]) -> Result<ContextHeader> {
    let (kind, _) = unseal(bytes)?;
    let kind = ContextKind::from_byte(kind).ok_or_else(|| Error::Corrupt(format!("kind {kind} is not a context")))?;
    let dtype = *bytes.get(21).ok_or_else(|| Error::Corrupt("short header".into()))?;
    match DType::from_byte(dtype) {
        Some(DType::F32) => {
            decode_context::<f32>(bytes)?;
        }
        Some(DType::F64) => {
            decode_context::<f64>(bytes)?;
        }
        None => return Err(Error::Corrupt(format!("unknown dtype byte {dtype}"))),
    }
    let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    Ok(ContextHeader {
        version: u(4) as u32,
        kind,
        layers: u(9),
        m: u(13),
        d: u(17),
        dtype,
        source_t: u(22),
        config_hash: crate::training::hex(&bytes[26..58]),
        payload_bytes: bytes.len() - CONTEXT_HEADER_LEN - CRC_LEN,
        crc32: u(bytes.len() - CRC_LEN) as u32,
    })
}

/// Stored context floats over the floats of a full per-layer KV cache of
/// `t` tokens.
pub fn cache_size_ratio<S: Float>(ctx: &CompressedContext<S>, model: &ModelConfig, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Invalid("full-cache token count must be positive".into()));
    }
    let stored = (ctx.layers.len() * ctx.m() * ctx.d()) as f64;
    let full = (2 * model.n_layers * t * model.n_kv_heads * model.head_dim) as f64;
    Ok(stored / full)
}

/// Run description stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// `None` for a bare (pre)trained stack.
    pub method: Option<Method>,
    pub m: usize,
    /// Phase whose optimizer state is stored (0 = pretraining).
    pub phase: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Float> {
    pub meta: CheckpointMeta,
    pub stamp: PhaseStamp,
    pub params: ParamStore<S>,
    pub optimizer: Option<OptimizerState<S>>,
}

impl<S: Float> Checkpoint<S> {
    pub fn of_system(sys: &System<S>, phase: u8, optimizer: Option<OptimizerState<S>>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: sys.model.clone(),
                method: Some(sys.method.clone()),
                m: sys.m,
                phase,
            },
            stamp: sys.stamp,
            params: sys.params.clone(),
            optimizer,
        }
    }

    pub fn of_stack(model: &ModelConfig, params: &ParamStore<S>, optimizer: Option<OptimizerState<S>>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: model.clone(),
                method: None,
                m: 0,
                phase: 0,
            },
            stamp: PhaseStamp::Fresh,
            params: params.clone(),
            optimizer,
        }
    }

    pub fn into_system(self) -> Result<(System<S>, Option<OptimizerState<S>>)> {
        let method = self
            .meta
            .method
            .ok_or_else(|| Error::MissingArtifact("checkpoint holds a bare stack, not a compressor".into()))?;
        Ok((
            System {
                model: self.meta.model,
                method,
                m: self.meta.m,
                params: self.params,
                stamp: self.stamp,
            },
            self.optimizer,
        ))
    }

    /// The frozen target stack (unprefixed) this checkpoint carries.
    pub fn target(&self) -> ParamStore<S> {
        match self.meta.method {
            Some(_) => self.params.subtree(crate::compressors::TARGET),
            None => self.params.clone(),
        }
    }
}

fn put_tensor<S: Float>(out: &mut Vec<u8>, t: &Tensor<S>) -> Result<()> {
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    out.extend(t.to_le_bytes());
    Ok(())
}

fn get_tensor<S: Float>(r: &mut Reader<'_>) -> Result<Tensor<S>> {
    let rank = r.usize()?;
    if rank > 8 {
        return Err(Error::Corrupt(format!("tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
    Tensor::new(shape, r.floats::<S>(n)?).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn encode_checkpoint<S: Float>(ck: &Checkpoint<S>) -> Result<Vec<u8>> {
    let mut out = prelude(CHECKPOINT_KIND);
    out.push(S::DTYPE as u8);
    out.push(ck.stamp as u8);
    out.extend_from_slice(&ck.meta.model.hash());
    put_str(&mut out, &serde_json::to_string(&ck.meta).map_err(|e| Error::Invalid(e.to_string()))?)?;
    put_u32(&mut out, ck.params.len())?;
    for (name, t) in ck.params.iter() {
        put_str(&mut out, name)?;
        put_tensor(&mut out, t)?;
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            out.extend_from_slice(&o.step.to_le_bytes());
            for v in [o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, o.first.len())?;
            for (name, m) in &o.first {
                put_str(&mut out, name)?;
                put_tensor(&mut out, m)?;
                put_tensor(&mut out, &o.second[name])?;
            }
        }
    }
    Ok(seal(out))
}

pub fn decode_checkpoint<S: Float>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let (kind, body) = unseal(bytes)?;
    if kind != CHECKPOINT_KIND {
        return Err(Error::Corrupt(format!("kind {kind} is not a checkpoint")));
    }
    let mut r = Reader { buf: body };
    check_dtype::<S>(r.u8()?)?;
    let stamp_byte = r.u8()?;
    let stamp = PhaseStamp::from_byte(stamp_byte).ok_or_else(|| Error::Corrupt(format!("phase stamp {stamp_byte}")))?;
    let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let meta: CheckpointMeta = serde_json::from_str(r.str()?).map_err(|e| Error::Corrupt(format!("checkpoint metadata: {e}")))?;
    if meta.model.hash() != hash {
        return Err(Error::ConfigHashMismatch);
    }
    let n = r.usize()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?.to_string();
        let t = get_tensor::<S>(&mut r)?;
        if params.contains(&name) {
            return Err(Error::Corrupt(format!("duplicate parameter {name}")));
        }
        params.insert(name, t);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let k = r.usize()?;
            let mut o = OptimizerState {
                config,
                step,
                first: Default::default(),
                second: Default::default(),
            };
            for _ in 0..k {
                let name = r.str()?.to_string();
                let m = get_tensor::<S>(&mut r)?;
                let v = get_tensor::<S>(&mut r)?;
                let p = params
                    .get(&name)
                    .map_err(|_| Error::Corrupt(format!("moments for unknown parameter {name}")))?;
                if m.shape() != p.shape() || v.shape() != p.shape() {
                    return Err(Error::Corrupt(format!("moment shape mismatch for {name}")));
                }
                o.first.insert(name.clone(), m);
                o.second.insert(name, v);
            }
            Some(o)
        }
        b => return Err(Error::Corrupt(format!("optimizer flag {b}"))),
    };
    r.finish()?;
    Ok(Checkpoint {
        meta,
        stamp,
        params,
        optimizer,
    })
}

pub fn save_checkpoint<S: Float>(ck: &Checkpoint<S>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint<S: Float>(path: &Path) -> Result<Checkpoint<S>> {
    decode_checkpoint(&read_file(path)?)
}
