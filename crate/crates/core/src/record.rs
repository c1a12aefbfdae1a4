//! `EpisodeRecord`: everything observed during one inner-loop run, with a
//! compact binary container and row-oriented JSONL/CSV exports.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic "L2LEPREC" | version u32 | seed u64 | dt_ms f64 | step_len u32
//! n_neurons u32 | n_inputs u32 | n_outputs u32 | input_dim u32
//! n_sim_steps u64 | n_pred_steps u64 | has_traces u8
//! spikes    n_sim_steps x ceil(n_neurons / 8) bitmap bytes
//! inputs    n_sim_steps x n_inputs f32
//! x         n_pred_steps x input_dim f64
//! traces    n_pred_steps x n_neurons f32 (if has_traces)
//! y_hat, y  n_pred_steps x n_outputs f64 each
//! sq_error  n_pred_steps f64
//! sha256 of everything above
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"L2LEPREC";
pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub dt_ms: f64,
    /// Simulation steps per prediction step.
    pub step_len: usize,
    pub n_neurons: usize,
    pub n_inputs: usize,
    pub n_outputs: usize,
    /// Width of the analog input per prediction step.
    pub input_dim: usize,
    /// Per simulation step.
    pub spikes: Vec<Vec<bool>>,
    /// Per simulation step, what entered through `W_in`.
    pub inputs: Vec<Vec<f32>>,
    /// Per prediction step.
    pub x: Vec<Vec<f64>>,
    /// Readout trace averaged over each prediction step.
    pub mean_traces: Option<Vec<Vec<f32>>>,
    pub predictions: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub sq_errors: Vec<f64>,
}

impl EpisodeRecord {
    pub fn n_sim_steps(&self) -> usize {
        self.spikes.len()
    }

    pub fn n_pred_steps(&self) -> usize {
        self.predictions.len()
    }

    pub fn duration_ms(&self) -> f64 {
        self.n_sim_steps() as f64 * self.dt_ms
    }

    /// Spikes per neuron over the whole record.
    pub fn spike_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_neurons];
        for row in &self.spikes {
            for (c, &z) in counts.iter_mut().zip(row) {
                if z {
                    *c += 1.0;
                }
            }
        }
        counts
    }

    pub fn mean_sq_error(&self) -> f64 {
        if self.sq_errors.is_empty() {
            return 0.0;
        }
        self.sq_errors.iter().sum::<f64>() / self.sq_errors.len() as f64
    }

    /// Checks that every per-step table agrees with the header.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Contract(format!("episode record: {what}")));
        let t = self.n_sim_steps();
        let s = self.n_pred_steps();
        if self.inputs.len() != t || self.spikes.iter().any(|r| r.len() != self.n_neurons) {
            return bad("spike/input tables disagree with header");
        }
        if self.inputs.iter().any(|r| r.len() != self.n_inputs) {
            return bad("input width");
        }
        if self.x.len() != s || self.targets.len() != s || self.sq_errors.len() != s {
            return bad("prediction tables have different lengths");
        }
        if self.x.iter().any(|r| r.len() != self.input_dim) {
            return bad("analog input width");
        }
        if self
            .predictions
            .iter()
            .chain(&self.targets)
            .any(|r| r.len() != self.n_outputs)
        {
            return bad("output width");
        }
        if let Some(tr) = &self.mean_traces {
            if tr.len() != s || tr.iter().any(|r| r.len() != self.n_neurons) {
                return bad("trace table shape");
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut b = Vec::new();
        let u32_of = |v: usize| u32::try_from(v).map_err(|_| Error::Contract("dimension exceeds u32".into()));
        b.extend_from_slice(MAGIC);
        b.write_u32::<LE>(RECORD_VERSION).unwrap();
        b.write_u64::<LE>(self.seed).unwrap();
        b.write_f64::<LE>(self.dt_ms).unwrap();
        b.write_u32::<LE>(u32_of(self.step_len)?).unwrap();
        b.write_u32::<LE>(u32_of(self.n_neurons)?).unwrap();
        b.write_u32::<LE>(u32_of(self.n_inputs)?).unwrap();
        b.write_u32::<LE>(u32_of(self.n_outputs)?).unwrap();
        b.write_u32::<LE>(u32_of(self.input_dim)?).unwrap();
        b.write_u64::<LE>(self.n_sim_steps() as u64).unwrap();
        b.write_u64::<LE>(self.n_pred_steps() as u64).unwrap();
        b.write_u8(u8::from(self.mean_traces.is_some())).unwrap();
        let row_bytes = self.n_neurons.div_ceil(8);
        for row in &self.spikes {
            let mut packed = vec![0u8; row_bytes];
            for (i, &z) in row.iter().enumerate() {
                if z {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            b.extend_from_slice(&packed);
        }
        for v in self.inputs.iter().flatten() {
            b.write_f32::<LE>(*v).unwrap();
        }
        for v in self.x.iter().flatten() {
            b.write_f64::<LE>(*v).unwrap();
        }
        if let Some(tr) = &self.mean_traces {
            for v in tr.iter().flatten() {
                b.write_f32::<LE>(*v).unwrap();
            }
        }
        for v in self.predictions.iter().chain(&self.targets).flatten() {
            b.write_f64::<LE>(*v).unwrap();
        }
        for v in &self.sq_errors {
            b.write_f64::<LE>(*v).unwrap();
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(origin, msg.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(fail("not an episode record (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch, file is corrupt or truncated"));
        }
        let mut r = &body[8..];
        let eof = |_| fail("unexpected end of data");
        let version = r.read_u32::<LE>().map_err(eof)?;
        if version != RECORD_VERSION {
            return Err(fail(&format!(
                "unsupported record version {version} (expected {RECORD_VERSION})"
            )));
        }
        let seed = r.read_u64::<LE>().map_err(eof)?;
        let dt_ms = r.read_f64::<LE>().map_err(eof)?;
        let step_len = r.read_u32::<LE>().map_err(eof)? as usize;
        let n_neurons = r.read_u32::<LE>().map_err(eof)? as usize;
        let n_inputs = r.read_u32::<LE>().map_err(eof)? as usize;
        let n_outputs = r.read_u32::<LE>().map_err(eof)? as usize;
        let input_dim = r.read_u32::<LE>().map_err(eof)? as usize;
        let t = r.read_u64::<LE>().map_err(eof)? as usize;
        let s = r.read_u64::<LE>().map_err(eof)? as usize;
        let has_traces = r.read_u8().map_err(eof)? != 0;
        let row_bytes = n_neurons.div_ceil(8);
        let expected = t * row_bytes
            + t * n_inputs * 4
            + s * input_dim * 8
            + if has_traces { s * n_neurons * 4 } else { 0 }
            + 2 * s * n_outputs * 8
            + s * 8;
        if r.len() != expected {
            return Err(fail("payload size disagrees with header"));
        }
        let mut spikes = Vec::with_capacity(t);
        for _ in 0..t {
            let (row, rest) = r.split_at(row_bytes);
            spikes.push((0..n_neurons).map(|i| row[i / 8] >> (i % 8) & 1 == 1).collect());
            r = rest;
        }
        let f32_rows = |rows: usize, cols: usize, r: &mut &[u8]| -> Vec<Vec<f32>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| r.read_f32::<LE>().expect("size checked")).collect())
                .collect()
        };
        let inputs = f32_rows(t, n_inputs, &mut r);
        let f64_rows = |rows: usize, cols: usize, r: &mut &[u8]| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| r.read_f64::<LE>().expect("size checked")).collect())
                .collect()
        };
        let x = f64_rows(s, input_dim, &mut r);
        let mean_traces = has_traces.then(|| f32_rows(s, n_neurons, &mut r));
        let predictions = f64_rows(s, n_outputs, &mut r);
        let targets = f64_rows(s, n_outputs, &mut r);
        let sq_errors = (0..s).map(|_| r.read_f64::<LE>().expect("size checked")).collect();
        let rec = Self {
            seed,
            dt_ms,
            step_len,
            n_neurons,
            n_inputs,
            n_outputs,
            input_dim,
            spikes,
            inputs,
            x,
            mean_traces,
            predictions,
            targets,
            sq_errors,
        };
        rec.validate().map_err(|e| fail(&e.to_string()))?;
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// One JSON object per prediction step.
    pub fn write_jsonl(&self, out: &mut dyn Write) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            step: usize,
            x: &'a [f64],
            target: &'a [f64],
            prediction: &'a [f64],
            sq_error: f64,
        }
        for s in 0..self.n_pred_steps() {
            let row = Row {
                step: s,
                x: &self.x[s],
                target: &self.targets[s],
                prediction: &self.predictions[s],
                sq_error: self.sq_errors[s],
            };
            serde_json::to_writer(&mut *out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Header plus one row per prediction step.
    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        let mut header = vec!["step".to_string()];
        header.extend((0..self.input_dim).map(|i| format!("x{i}")));
        header.extend((0..self.n_outputs).map(|i| format!("target{i}")));
        header.extend((0..self.n_outputs).map(|i| format!("prediction{i}")));
        header.push("sq_error".into());
        writeln!(out, "{}", header.join(","))?;
        for s in 0..self.n_pred_steps() {
            let mut row = vec![s.to_string()];
            row.extend(self.x[s].iter().map(f64::to_string));
            row.extend(self.targets[s].iter().map(f64::to_string));
            row.extend(self.predictions[s].iter().map(f64::to_string));
            row.push(self.sq_errors[s].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// `t,neuron` for every spike.
    pub fn write_spike_events_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "t,neuron")?;
        for (t, row) in self.spikes.iter().enumerate() {
            for (i, &z) in row.iter().enumerate() {
                if z {
                    writeln!(out, "{t},{i}")?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    prop_compose! {
        fn arb_record()(n in 1usize..20, n_in in 0usize..5, t in 0usize..30, s in 0usize..6, dim in 1usize..3, traces in any::<bool>(), seed in any::<u64>())
            (spikes in proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), t),
             inputs in proptest::collection::vec(proptest::collection::vec(-10f32..10.0, n_in), t),
             x in proptest::collection::vec(proptest::collection::vec(-5f64..5.0, dim), s),
             tr in proptest::collection::vec(proptest::collection::vec(0f32..50.0, n), s),
             y in proptest::collection::vec(-2f64..2.0, s),
             yh in proptest::collection::vec(-2f64..2.0, s),
             n in Just(n), n_in in Just(n_in), dim in Just(dim), traces in Just(traces), seed in Just(seed))
            -> EpisodeRecord
        {
            EpisodeRecord {
                seed,
                dt_ms: 1.0,
                step_len: 20,
                n_neurons: n,
                n_inputs: n_in,
                n_outputs: 1,
                input_dim: dim,
                spikes,
                inputs,
                x,
                mean_traces: traces.then_some(tr),
                sq_errors: y.iter().zip(&yh).map(|(a, b)| (a - b) * (a - b)).collect(),
                predictions: yh.into_iter().map(|v| vec![v]).collect(),
                targets: y.into_iter().map(|v| vec![v]).collect(),
            }
        }
    }

    proptest! {
        #[test]
        fn binary_roundtrip_is_lossless(rec in arb_record()) {
            let bytes = rec.to_bytes().unwrap();
            let back = EpisodeRecord::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back, rec);
        }
    }

    fn small() -> EpisodeRecord {
        EpisodeRecord {
            seed: 1,
            dt_ms: 1.0,
            step_len: 1,
            n_neurons: 3,
            n_inputs: 1,
            n_outputs: 1,
            input_dim: 1,
            spikes: vec![vec![true, false, true], vec![false, false, true]],
            inputs: vec![vec![0.5], vec![-0.5]],
            x: vec![vec![0.5], vec![-0.5]],
            mean_traces: None,
            predictions: vec![vec![0.0], vec![1.0]],
            targets: vec![vec![0.0], vec![0.0]],
            sq_errors: vec![0.0, 1.0],
        }
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let mut bytes = small().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            EpisodeRecord::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
        let mut bytes = small().to_bytes().unwrap();
        bytes[8] = 9;
        let body = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body]);
        bytes[body..].copy_from_slice(&digest);
        let err = EpisodeRecord::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(EpisodeRecord::from_bytes(b"nonsense", Path::new("x")).is_err());
    }

    #[test]
    fn exports_have_one_row_per_prediction() {
        let rec = small();
        let mut csv = Vec::new();
        rec.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
        let mut jsonl = Vec::new();
        rec.write_jsonl(&mut jsonl).unwrap();
        let text = String::from_utf8(jsonl).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(v["sq_error"], 1.0);
        assert_eq!(rec.spike_counts(), vec![1.0, 0.0, 2.0]);
    }
}
