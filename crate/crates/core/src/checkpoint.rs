//! Training checkpoints: parameters, optimizer moments and, for streamed
//! tasks, the per-slot state carried across truncation windows.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic "L2LCKPT1" | version u32 | training config hash str | iteration u64
//! w_in, w_rec, w_out   matrix f64 | delays matrix u8
//! adam                 config | step u64 | m, v, v_max tensor lists
//! has_carry u8         [group u64 | n_slots u32 | slots]
//! sha256 of everything above
//! ```
//!
//! Strings are a u32 length followed by UTF-8 bytes; matrices are two u32
//! dimensions followed by row-major values.

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::bptt::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::snn::{NetworkState, ReservoirParams, SpikeBuffer};

const MAGIC: &[u8; 8] = b"L2LCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// State one streamed-task slot carries into the next truncation window.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotCarry {
    pub state: NetworkState,
    /// Sum of the plasticity updates applied so far; the readout in effect
    /// is the meta-trained initialization plus this offset.
    pub readout_delta: Array2<f64>,
}

/// Carry of every slot in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamCarry {
    /// Index of the task group the slots belong to.
    pub group: u64,
    pub slots: Vec<SlotCarry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Completed outer-loop iterations.
    pub iteration: u64,
    pub params: ReservoirParams,
    pub adam: AdamState,
    pub carry: Option<StreamCarry>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Contract("size exceeds u32".into()))?;
        self.0.write_u32::<LE>(v).expect("vec write");
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).expect("vec write");
    }
    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).expect("vec write");
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.u32(v.len())?;
        v.iter().for_each(|&x| self.f64(x));
        Ok(())
    }
    fn matrix(&mut self, m: &Array2<f64>) -> Result<()> {
        self.u32(m.nrows())?;
        self.u32(m.ncols())?;
        m.iter().for_each(|&x| self.f64(x));
        Ok(())
    }
    fn tensors(&mut self, ts: &[Vec<f64>]) -> Result<()> {
        self.u32(ts.len())?;
        ts.iter().try_for_each(|t| self.f64s(t))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn eof(&self) -> Error {
        Error::format(self.path, "unexpected end of checkpoint data")
    }
    fn u8(&mut self) -> Result<u8> {
        self.buf.read_u8().map_err(|_| self.eof())
    }
    fn u32(&mut self) -> Result<usize> {
        self.buf.read_u32::<LE>().map(|v| v as usize).map_err(|_| self.eof())
    }
    fn u64(&mut self) -> Result<u64> {
        self.buf.read_u64::<LE>().map_err(|_| self.eof())
    }
    fn f64(&mut self) -> Result<f64> {
        self.buf.read_f64::<LE>().map_err(|_| self.eof())
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(self.eof());
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let path = self.path;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(path, "invalid UTF-8 string"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        if self.buf.len() < n * 8 {
            return Err(self.eof());
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn matrix(&mut self) -> Result<Array2<f64>> {
        let (r, c) = (self.u32()?, self.u32()?);
        if self.buf.len() < r * c * 8 {
            return Err(self.eof());
        }
        let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((r, c), data).expect("shape matches length"))
    }
    fn tensors(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.u32()?;
        (0..n).map(|_| self.f64s()).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION as usize)?;
        w.str(&self.config_hash)?;
        w.u64(self.iteration);
        let p = &self.params;
        w.matrix(&p.w_in)?;
        w.matrix(&p.w_rec)?;
        w.matrix(&p.w_out)?;
        w.u32(p.delays.nrows())?;
        w.u32(p.delays.ncols())?;
        w.0.extend(p.delays.iter());
        let a = &self.adam;
        let c = a.config;
        for v in [c.lr, c.beta1, c.beta2, c.epsilon, c.weight_decay] {
            w.f64(v);
        }
        w.u8(u8::from(c.amsgrad));
        w.u64(a.step);
        w.tensors(&a.m)?;
        w.tensors(&a.v)?;
        w.tensors(&a.v_max)?;
        match &self.carry {
            None => w.u8(0),
            Some(carry) => {
                w.u8(1);
                w.u64(carry.group);
                w.u32(carry.slots.len())?;
                for slot in &carry.slots {
                    let s = &slot.state;
                    w.f64s(&s.v)?;
                    w.u32(s.refrac.len())?;
                    for &r in &s.refrac {
                        w.u32(r as usize)?;
                    }
                    w.u32(s.spike_buffer.depth())?;
                    w.u32(s.spike_buffer.n_neurons())?;
                    w.f64s(s.spike_buffer.data())?;
                    w.f64s(&s.h)?;
                    w.u64(s.t as u64);
                    w.matrix(&slot.readout_delta)?;
                }
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::format(path, "checksum mismatch, checkpoint is corrupt or truncated"));
        }
        let mut r = Reader { buf: &body[8..], path };
        let version = r.u32()? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let config_hash = r.str()?;
        let iteration = r.u64()?;
        let w_in = r.matrix()?;
        let w_rec = r.matrix()?;
        let w_out = r.matrix()?;
        let (dr, dc) = (r.u32()?, r.u32()?);
        let delays = Array2::from_shape_vec((dr, dc), r.take(dr * dc)?.to_vec()).expect("shape matches length");
        let params = ReservoirParams {
            w_in,
            w_rec,
            w_out,
            delays,
        };
        params.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let mut f = [0.0; 5];
        for v in &mut f {
            *v = r.f64()?;
        }
        let config = AdamConfig {
            lr: f[0],
            beta1: f[1],
            beta2: f[2],
            epsilon: f[3],
            weight_decay: f[4],
            amsgrad: r.u8()? != 0,
        };
        let adam = AdamState {
            config,
            step: r.u64()?,
            m: r.tensors()?,
            v: r.tensors()?,
            v_max: r.tensors()?,
        };
        let carry = match r.u8()? {
            0 => None,
            _ => {
                let group = r.u64()?;
                let n_slots = r.u32()?;
                let mut slots = Vec::with_capacity(n_slots.min(1 << 16));
                for _ in 0..n_slots {
                    let v = r.f64s()?;
                    let n_refrac = r.u32()?;
                    let refrac = (0..n_refrac).map(|_| r.u32().map(|x| x as u32)).collect::<Result<Vec<_>>>()?;
                    let (depth, n) = (r.u32()?, r.u32()?);
                    let data = r.f64s()?;
                    let spike_buffer =
                        SpikeBuffer::from_parts(depth, n, data).map_err(|e| Error::format(path, e.to_string()))?;
                    let h = r.f64s()?;
                    let t = r.u64()? as usize;
                    let state = NetworkState {
                        v,
                        refrac,
                        spike_buffer,
                        h,
                        t,
                    };
                    slots.push(SlotCarry {
                        state,
                        readout_delta: r.matrix()?,
                    });
                }
                Some(StreamCarry { group, slots })
            }
        };
        if !r.buf.is_empty() {
            return Err(Error::format(path, "trailing bytes after checkpoint payload"));
        }
        Ok(Self {
            config_hash,
            iteration,
            params,
            adam,
            carry,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Refuses checkpoints written under a different configuration.
    pub fn ensure_config(&self, config_hash: &str, path: &Path) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Config(format!(
                "{}: checkpoint was written with config {} but the run uses {}",
                path.display(),
                self.config_hash,
                config_hash
            )));
        }
        Ok(())
    }
}

/// `ckpt_<iteration>.bin`, zero padded so names sort by iteration.
pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:08}.bin")
}

/// The checkpoint with the highest iteration in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<std::path::PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("ckpt_") && name.ends_with(".bin") && best.as_ref().is_none_or(|b: &std::path::PathBuf| path > *b) {
            best = Some(path);
        }
    }
    Ok(best)
}
