//! Binary checkpoints for training states and pre-trained mappings.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! "DMUL"  u32 version  u32 kind (1 = training state, 2 = mapping)
//! u64 x 8 dimensions: classes, prompts, context_len, d_tok, d_vlm, d_llm,
//!                     phi parameter count, psi parameter count
//! u64 length + UTF-8 run configuration (JSON)
//! u32 group count, then per group: u16 name length, name, u64 count, f64s
//!     training state: prompts, raw_weights, phi, psi; mapping: phi, psi
//! u8 phi_frozen  u8 psi_frozen
//! training state only: counters, rng position, epoch order, loss history,
//!     epoch metrics and snapshots (see `write_state`)
//! u64 FNV-1a checksum of every preceding byte
//! ```

use std::path::Path;

use demul_core::mapping::{MappingPair, PHI, PSI};
use demul_core::num::{fnv1a64, RngState, SeededRng};
use demul_core::objective::Params;
use demul_core::prompts::{PromptBank, WeightTable, PROMPTS};
use demul_core::trainer::{EpochMetrics, LossReport, Snapshot, TrainState};
use demul_core::RealMat;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMUL";
pub const VERSION: u32 = 1;
const KIND_STATE: u32 = 1;
const KIND_MAPPING: u32 = 2;
pub const RAW_WEIGHTS: &str = "raw_weights";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub classes: u64,
    pub prompts: u64,
    pub context_len: u64,
    pub d_tok: u64,
    pub d_vlm: u64,
    pub d_llm: u64,
    pub phi_params: u64,
    pub psi_params: u64,
}

/// A training state plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCheckpoint {
    pub config: String,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingCheckpoint {
    pub config: String,
    pub mapping: MappingPair,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.buf.extend_from_slice(b);
    }
    fn reals(&mut self, v: &[f64]) {
        self.len(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn group(&mut self, name: &str, v: &[f64]) {
        self.u16(name.len() as u16);
        self.buf.extend_from_slice(name.as_bytes());
        self.reals(v);
    }
    fn mat(&mut self, m: &RealMat) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        m.as_slice().iter().for_each(|x| self.f64(*x));
    }
    fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a64(&self.buf);
        self.u64(sum);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            message: message.into(),
        })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!("unexpected end of file (needed {n} more bytes)"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => {
                self.pos -= 1;
                self.err(format!("invalid flag byte {b}"))
            }
        }
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(unit.max(1) as u64) > left {
            self.pos = at;
            return self.err(format!("length {n} exceeds the remaining {left} bytes"));
        }
        Ok(n as usize)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: "configuration is not UTF-8".into(),
        })
    }
    fn reals(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn group(&mut self, expected: &str, count: u64) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = self.u16()? as usize;
        let name = self.take(n)?;
        if name != expected.as_bytes() {
            self.pos = at;
            return self.err(format!(
                "expected group `{expected}`, found `{}`",
                String::from_utf8_lossy(name)
            ));
        }
        let at = self.pos;
        let v = self.reals()?;
        if v.len() as u64 != count {
            self.pos = at;
            return self.err(format!("group `{expected}` has {} values, header says {count}", v.len()));
        }
        Ok(v)
    }
    fn mat(&mut self) -> Result<RealMat> {
        let at = self.pos;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows.saturating_mul(cols);
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            self.pos = at;
            return self.err(format!("matrix {rows}x{cols} exceeds the file"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        RealMat::new(rows, cols, data).or_else(|e| {
            self.pos = at;
            self.err(e.to_string())
        })
    }
}

fn header(w: &mut Writer, kind: u32, dims: &Dims, config: &str) {
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(kind);
    for v in [
        dims.classes,
        dims.prompts,
        dims.context_len,
        dims.d_tok,
        dims.d_vlm,
        dims.d_llm,
        dims.phi_params,
        dims.psi_params,
    ] {
        w.u64(v);
    }
    w.bytes(config.as_bytes());
}

/// Checks magic, version, kind and the trailing checksum; returns a reader
/// positioned after the kind and the payload length without checksum.
fn open(bytes: &[u8], kind: u32) -> Result<(Reader<'_>, Dims, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing DMUL magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let at = r.pos;
    let found = r.u32()?;
    if found != kind {
        r.pos = at;
        return r.err(format!("checkpoint kind {found}, expected {kind}"));
    }
    if bytes.len() < r.pos + 8 {
        return r.err("file too short for a checksum");
    }
    let body = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body..].try_into().expect("8 bytes"));
    if fnv1a64(&bytes[..body]) != stored {
        return Err(Error::Format {
            offset: body,
            message: "checksum mismatch".into(),
        });
    }
    let mut r = Reader {
        buf: &bytes[..body],
        pos: r.pos,
    };
    let mut d = [0u64; 8];
    for v in &mut d {
        *v = r.u64()?;
    }
    let dims = Dims {
        classes: d[0],
        prompts: d[1],
        context_len: d[2],
        d_tok: d[3],
        d_vlm: d[4],
        d_llm: d[5],
        phi_params: d[6],
        psi_params: d[7],
    };
    let config = r.string()?;
    Ok((r, dims, config))
}

fn done(r: &Reader<'_>) -> Result<()> {
    if r.pos != r.buf.len() {
        return r.err(format!("{} trailing bytes", r.buf.len() - r.pos));
    }
    Ok(())
}

fn mapping_dims(m: &MappingPair) -> Dims {
    Dims {
        classes: 0,
        prompts: 0,
        context_len: 0,
        d_tok: 0,
        d_vlm: m.d_vlm() as u64,
        d_llm: m.d_llm() as u64,
        phi_params: m.phi().param_count() as u64,
        psi_params: m.psi().param_count() as u64,
    }
}

fn read_mapping(r: &mut Reader<'_>, dims: &Dims) -> Result<MappingPair> {
    let at = r.pos;
    let mut pair = MappingPair::new(dims.d_vlm as usize, dims.d_llm as usize, &mut SeededRng::new(0));
    if pair.phi().param_count() as u64 != dims.phi_params || pair.psi().param_count() as u64 != dims.psi_params {
        r.pos = at;
        return r.err("mapping parameter counts do not match d_vlm/d_llm");
    }
    let phi = r.group(PHI, dims.phi_params)?;
    let psi = r.group(PSI, dims.psi_params)?;
    let at = r.pos;
    let (pf, sf) = (r.bool()?, r.bool()?);
    let set = pair.set_phi_params(&phi).and_then(|_| pair.set_psi_params(&psi));
    if let Err(e) = set {
        r.pos = at;
        return r.err(e.to_string());
    }
    pair.set_frozen(pf, sf);
    Ok(pair)
}

fn write_mapping(w: &mut Writer, m: &MappingPair) {
    w.group(PHI, &m.phi().params());
    w.group(PSI, &m.psi().params());
    w.u8(m.phi_frozen() as u8);
    w.u8(m.psi_frozen() as u8);
}

pub fn encode_mapping(ckpt: &MappingCheckpoint) -> Vec<u8> {
    let mut w = Writer::default();
    header(&mut w, KIND_MAPPING, &mapping_dims(&ckpt.mapping), &ckpt.config);
    w.u32(2);
    write_mapping(&mut w, &ckpt.mapping);
    w.finish()
}

pub fn decode_mapping(bytes: &[u8]) -> Result<MappingCheckpoint> {
    let (mut r, dims, config) = open(bytes, KIND_MAPPING)?;
    let at = r.pos;
    if r.u32()? != 2 {
        r.pos = at;
        return r.err("a mapping checkpoint holds exactly 2 groups");
    }
    let mapping = read_mapping(&mut r, &dims)?;
    done(&r)?;
    Ok(MappingCheckpoint { config, mapping })
}

fn write_snapshot(w: &mut Writer, s: &Snapshot) {
    w.mat(&s.weights);
    w.mat(&s.similarity);
    w.mat(&s.llm_similarity);
}

fn read_snapshot(r: &mut Reader<'_>) -> Result<Snapshot> {
    Ok(Snapshot {
        weights: r.mat()?,
        similarity: r.mat()?,
        llm_similarity: r.mat()?,
    })
}

fn write_state(w: &mut Writer, s: &TrainState) {
    w.u64(s.step);
    w.u64(s.epoch);
    w.u64(s.rng.seed);
    w.u128(s.rng.word_pos);
    w.len(s.cursor);
    w.len(s.order.len());
    s.order.iter().for_each(|i| w.len(*i));
    w.len(s.history.len());
    for h in &s.history {
        w.u64(h.step);
        w.u64(h.epoch);
        for v in [h.lr, h.cls, h.distill, h.mapping, h.total] {
            w.f64(v);
        }
        w.u64(h.clamped);
    }
    w.len(s.metrics.len());
    for m in &s.metrics {
        w.u64(m.epoch);
        for v in [m.cls, m.distill, m.mapping, m.total, m.train_accuracy] {
            w.f64(v);
        }
        w.u8(m.snapshot.is_some() as u8);
        if let Some(snap) = &m.snapshot {
            write_snapshot(w, snap);
        }
    }
    w.u8(s.initial.is_some() as u8);
    if let Some(snap) = &s.initial {
        write_snapshot(w, snap);
    }
}

pub fn encode_state(ckpt: &StateCheckpoint) -> Vec<u8> {
    let p = &ckpt.state.params;
    let dims = Dims {
        classes: p.weights.classes() as u64,
        prompts: p.bank.num_prompts() as u64,
        context_len: p.bank.context_len() as u64,
        d_tok: p.bank.d_tok() as u64,
        ..mapping_dims(&p.mapping)
    };
    let mut w = Writer::default();
    header(&mut w, KIND_STATE, &dims, &ckpt.config);
    w.u32(4);
    w.group(PROMPTS, p.bank.as_slice());
    w.group(RAW_WEIGHTS, p.weights.raw().as_slice());
    write_mapping(&mut w, &p.mapping);
    write_state(&mut w, &ckpt.state);
    w.finish()
}

pub fn decode_state(bytes: &[u8]) -> Result<StateCheckpoint> {
    let (mut r, dims, config) = open(bytes, KIND_STATE)?;
    let at = r.pos;
    if r.u32()? != 4 {
        r.pos = at;
        return r.err("a training checkpoint holds exactly 4 groups");
    }
    let (k, m, n, d) = (
        dims.classes as usize,
        dims.prompts as usize,
        dims.context_len as usize,
        dims.d_tok as usize,
    );
    let at = r.pos;
    let prompts = r.group(PROMPTS, (m * n * d) as u64)?;
    let bank = PromptBank::from_flat(m, n, d, prompts).or_else(|e| {
        r.pos = at;
        r.err(e.to_string())
    })?;
    let at = r.pos;
    let raw = r.group(RAW_WEIGHTS, (k * m) as u64)?;
    let raw = RealMat::new(k, m, raw).or_else(|e| {
        r.pos = at;
        r.err(e.to_string())
    })?;
    let mapping = read_mapping(&mut r, &dims)?;
    let params = Params {
        bank,
        weights: WeightTable::from_raw(raw),
        mapping,
    };

    let step = r.u64()?;
    let epoch = r.u64()?;
    let rng = RngState {
        seed: r.u64()?,
        word_pos: r.u128()?,
    };
    let cursor = r.u64()? as usize;
    let len = r.len(8)?;
    let order = (0..len).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    if cursor > order.len() {
        return r.err(format!("cursor {cursor} beyond epoch order of {}", order.len()));
    }
    let len = r.len(64)?;
    let mut history = Vec::with_capacity(len);
    for _ in 0..len {
        history.push(LossReport {
            step: r.u64()?,
            epoch: r.u64()?,
            lr: r.f64()?,
            cls: r.f64()?,
            distill: r.f64()?,
            mapping: r.f64()?,
            total: r.f64()?,
            clamped: r.u64()?,
        });
    }
    let len = r.len(49)?;
    let mut metrics = Vec::with_capacity(len);
    for _ in 0..len {
        let epoch = r.u64()?;
        let vals = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let snapshot = if r.bool()? { Some(read_snapshot(&mut r)?) } else { None };
        metrics.push(EpochMetrics {
            epoch,
            cls: vals[0],
            distill: vals[1],
            mapping: vals[2],
            total: vals[3],
            train_accuracy: vals[4],
            snapshot,
        });
    }
    let initial = if r.bool()? { Some(read_snapshot(&mut r)?) } else { None };
    done(&r)?;
    Ok(StateCheckpoint {
        config,
        state: TrainState {
            params,
            step,
            epoch,
            rng,
            order,
            cursor,
            history,
            metrics,
            initial,
        },
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(ckpt: &StateCheckpoint, path: &Path) -> Result<()> {
    write_file(path, &encode_state(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<StateCheckpoint> {
    decode_state(&read_file(path)?)
}

pub fn save_mapping(ckpt: &MappingCheckpoint, path: &Path) -> Result<()> {
    write_file(path, &encode_mapping(ckpt))
}

pub fn load_mapping(path: &Path) -> Result<MappingCheckpoint> {
    decode_mapping(&read_file(path)?)
}
