//! Learning within a single task.
//!
//! Two readouts are provided. The trace readout maps `[x(t), h(t)]` to a
//! prediction and, when plastic, accumulates `eta * sum (y - y_hat) h^T`
//! over a window before applying it; the update is differentiable so the
//! outer loop can optimize the readout initialization through it. The rate
//! readout maps spike counts of one prediction step to a prediction and
//! never changes within an episode; adaptation then has to happen in the
//! network state, which is driven by the delayed-target protocol.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoding::{sample_spikes_into, ChannelEncoder};
use crate::error::{ensure_dim, Error, Result};
use crate::record::EpisodeRecord;
use crate::rng::{stream_rng, Rng, Stream};
use crate::snn::{NetworkState, NeuronConstants, ReservoirParams, Simulator, StepTrace};
use crate::tasks::{RegressionTask, VolterraTask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutPlasticityConfig {
    pub enabled: bool,
    pub eta: f64,
    /// Accumulation window in simulation steps.
    pub window_steps: usize,
}

impl ReadoutPlasticityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_steps == 0 {
            return Err(Error::Config("plasticity window must be >= 1 step".into()));
        }
        if self.enabled && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("plasticity eta must be positive when enabled".into()));
        }
        Ok(())
    }

    fn eta(&self) -> f64 {
        if self.enabled {
            self.eta
        } else {
            0.0
        }
    }
}

/// `W_out f`.
pub fn readout_predict(w_out: &Array2<f64>, features: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("readout features", w_out.ncols(), features.len())?;
    Ok(w_out
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(features).map(|(w, f)| w * f).sum())
        .collect())
}

/// One observation inside an accumulation window.
#[derive(Debug, Clone, Copy)]
pub struct ReadoutSample<'a> {
    pub y: &'a [f64],
    pub y_hat: &'a [f64],
    pub h: &'a [f64],
}

/// Applies `W[:, off..] += eta sum (y - y_hat) h^T` for one full window.
pub fn accumulate_and_apply(
    w_out: &Array2<f64>,
    window: &[ReadoutSample<'_>],
    trace_offset: usize,
    config: &ReadoutPlasticityConfig,
) -> Result<Array2<f64>> {
    config.validate()?;
    if window.len() != config.window_steps {
        return Err(Error::Contract(format!(
            "accumulation window holds {} of {} samples",
            window.len(),
            config.window_steps
        )));
    }
    let mut w = w_out.clone();
    if !config.enabled {
        return Ok(w);
    }
    let n_h = w.ncols().checked_sub(trace_offset).ok_or_else(|| Error::dim("trace offset", w.ncols(), trace_offset))?;
    let mut delta = Array2::<f64>::zeros((w.nrows(), n_h));
    for s in window {
        ensure_dim("window targets", w.nrows(), s.y.len())?;
        ensure_dim("window predictions", w.nrows(), s.y_hat.len())?;
        ensure_dim("window traces", n_h, s.h.len())?;
        for o in 0..w.nrows() {
            let e = s.y[o] - s.y_hat[o];
            for (d, &h) in delta.row_mut(o).iter_mut().zip(s.h) {
                *d += e * h;
            }
        }
    }
    for o in 0..w.nrows() {
        for k in 0..n_h {
            w[[o, trace_offset + k]] += config.eta * delta[[o, k]];
        }
    }
    Ok(w)
}

/// Linear readout of `[x(t), h(t)]` with windowed plasticity on the trace
/// columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceReadout {
    /// Width of the analog input part of the features.
    pub n_x: usize,
    pub plasticity: ReadoutPlasticityConfig,
}

/// Forward pass of [`TraceReadout`] over one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceForward {
    pub steps: usize,
    /// `steps x n_out`.
    pub y_hat: Vec<f64>,
    /// Weights in effect during each window.
    pub window_weights: Vec<Array2<f64>>,
    /// Whether each window ended with an update.
    pub updated: Vec<bool>,
    /// Weights after the chunk.
    pub w_end: Array2<f64>,
}

impl TraceForward {
    /// Mean over outputs and steps of `(y - y_hat)^2` for each window.
    pub fn window_mse(&self, y: &[f64], window: usize) -> Vec<f64> {
        let n_out = self.y_hat.len() / self.steps.max(1);
        (0..self.steps)
            .step_by(window)
            .map(|start| {
                let end = (start + window).min(self.steps);
                let r = start * n_out..end * n_out;
                let se: f64 = self.y_hat[r.clone()].iter().zip(&y[r]).map(|(a, b)| (a - b) * (a - b)).sum();
                se / ((end - start) * n_out) as f64
            })
            .collect()
    }
}

impl TraceReadout {
    fn dims(&self, w: &Array2<f64>, x: &[f64], h: &[f64], y: &[f64], steps: usize) -> Result<(usize, usize)> {
        let n_out = w.nrows();
        if w.ncols() < self.n_x {
            return Err(Error::dim("readout width", self.n_x, w.ncols()));
        }
        let n_h = w.ncols() - self.n_x;
        ensure_dim("readout inputs", steps * self.n_x, x.len())?;
        ensure_dim("readout traces", steps * n_h, h.len())?;
        ensure_dim("readout targets", steps * n_out, y.len())?;
        Ok((n_out, n_h))
    }

    /// Runs the readout over `steps` steps starting at a window boundary.
    /// `x`, `h`, `y` are row-major per step.
    pub fn forward(&self, w_start: &Array2<f64>, x: &[f64], h: &[f64], y: &[f64], steps: usize) -> Result<TraceForward> {
        self.plasticity.validate()?;
        let (n_out, n_h) = self.dims(w_start, x, h, y, steps)?;
        let nx = self.n_x;
        let win = self.plasticity.window_steps;
        let eta = self.plasticity.eta();
        let mut w = w_start.clone();
        let mut y_hat = vec![0.0; steps * n_out];
        let mut window_weights = Vec::new();
        let mut updated = Vec::new();
        let mut acc = Array2::<f64>::zeros((n_out, n_h));
        for start in (0..steps).step_by(win) {
            let end = (start + win).min(steps);
            acc.fill(0.0);
            for t in start..end {
                let xt = &x[t * nx..(t + 1) * nx];
                let ht = &h[t * n_h..(t + 1) * n_h];
                for o in 0..n_out {
                    let row = w.row(o);
                    let row = row.as_slice().expect("standard layout");
                    let p: f64 = row[..nx].iter().zip(xt).map(|(a, b)| a * b).sum::<f64>()
                        + row[nx..].iter().zip(ht).map(|(a, b)| a * b).sum::<f64>();
                    y_hat[t * n_out + o] = p;
                    if eta != 0.0 {
                        let e = y[t * n_out + o] - p;
                        if e != 0.0 {
                            for (a, &hv) in acc.row_mut(o).iter_mut().zip(ht) {
                                *a += e * hv;
                            }
                        }
                    }
                }
            }
            window_weights.push(w.clone());
            let full = end - start == win;
            let apply = full && eta != 0.0;
            if apply {
                for o in 0..n_out {
                    for k in 0..n_h {
                        w[[o, nx + k]] += eta * acc[[o, k]];
                    }
                }
            }
            updated.push(apply);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: steps,
                what: "non-finite readout weight".into(),
            });
        }
        Ok(TraceForward {
            steps,
            y_hat,
            window_weights,
            updated,
            w_end: w,
        })
    }

    /// Gradients of a loss with `dL/dy_hat` given per step, through the
    /// predictions and every plasticity update of the chunk. Returns
    /// `dL/dW_start` and the direct `dL/dh(t)` (`steps x n_h`).
    pub fn backward(
        &self,
        fwd: &TraceForward,
        x: &[f64],
        h: &[f64],
        y: &[f64],
        dl_dyhat: &[f64],
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let steps = fwd.steps;
        let w0 = fwd.window_weights.first().unwrap_or(&fwd.w_end);
        let (n_out, n_h) = self.dims(w0, x, h, y, steps)?;
        ensure_dim("dL/dy_hat", steps * n_out, dl_dyhat.len())?;
        let nx = self.n_x;
        let win = self.plasticity.window_steps;
        let eta = self.plasticity.eta();
        let mut g_next = Array2::<f64>::zeros((n_out, nx + n_h));
        let mut dh = vec![0.0; steps * n_h];
        let mut g_y = vec![0.0; n_out];
        for (k, wk) in fwd.window_weights.iter().enumerate().rev() {
            let start = k * win;
            let end = (start + win).min(steps);
            let upd = fwd.updated[k];
            let mut gk = g_next.clone();
            for t in start..end {
                let xt = &x[t * nx..(t + 1) * nx];
                let ht = &h[t * n_h..(t + 1) * n_h];
                let dht = &mut dh[t * n_h..(t + 1) * n_h];
                for o in 0..n_out {
                    let mut g = dl_dyhat[t * n_out + o];
                    if upd {
                        let gh = g_next.row(o);
                        g -= eta * gh.iter().skip(nx).zip(ht).map(|(a, b)| a * b).sum::<f64>();
                    }
                    g_y[o] = g;
                }
                for o in 0..n_out {
                    let g = g_y[o];
                    let e = y[t * n_out + o] - fwd.y_hat[t * n_out + o];
                    let wrow = wk.row(o);
                    let grow_next = g_next.row(o);
                    for j in 0..n_h {
                        let mut d = wrow[nx + j] * g;
                        if upd {
                            d += eta * grow_next[nx + j] * e;
                        }
                        dht[j] += d;
                    }
                    let mut grow = gk.row_mut(o);
                    if g != 0.0 {
                        for (a, &xv) in grow.iter_mut().take(nx).zip(xt) {
                            *a += g * xv;
                        }
                        for (a, &hv) in grow.iter_mut().skip(nx).zip(ht) {
                            *a += g * hv;
                        }
                    }
                }
            }
            g_next = gk;
        }
        Ok((g_next, dh))
    }
}

/// Back-propagates `dL/dh(t)` through `h(t) = kappa h(t-1) + z(t)` into
/// `dL/dz(t)`, adding into `dl_dz`. The trace entering the chunk is a constant.
pub fn traces_to_spikes(dl_dh: &[f64], kappa: f64, n: usize, dl_dz: &mut [f64]) {
    let steps = dl_dh.len() / n.max(1);
    let mut carry = vec![0.0; n];
    for t in (0..steps).rev() {
        for j in 0..n {
            carry[j] = dl_dh[t * n + j] + kappa * carry[j];
            dl_dz[t * n + j] += carry[j];
        }
    }
}

/// Spike count of each neuron in each prediction step.
pub fn step_counts(z: &[f64], n: usize, step_len: usize) -> Vec<f64> {
    let steps = z.len() / n.max(1) / step_len.max(1);
    let mut counts = vec![0.0; steps * n];
    for s in 0..steps {
        let out = &mut counts[s * n..(s + 1) * n];
        for t in s * step_len..(s + 1) * step_len {
            for (c, &zv) in out.iter_mut().zip(&z[t * n..(t + 1) * n]) {
                *c += zv;
            }
        }
    }
    counts
}

/// `y_hat_s = W c_s` for each prediction step.
pub fn count_readout_forward(w: &Array2<f64>, counts: &[f64]) -> Result<Vec<f64>> {
    let n = w.ncols();
    let mut out = Vec::with_capacity(counts.len() / n.max(1) * w.nrows());
    for r in counts.chunks_exact(n.max(1)) {
        out.extend(readout_predict(w, r)?);
    }
    Ok(out)
}

/// Returns `dL/dW` and `dL/dz` (`steps * step_len x n`).
pub fn count_readout_backward(
    w: &Array2<f64>,
    counts: &[f64],
    dl_dyhat: &[f64],
    step_len: usize,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let n = w.ncols();
    let n_out = w.nrows();
    let steps = counts.len() / n.max(1);
    ensure_dim("dL/dy_hat", steps * n_out, dl_dyhat.len())?;
    let mut gw = Array2::zeros((n_out, n));
    let mut dz = vec![0.0; steps * step_len * n];
    let mut per_step = vec![0.0; n];
    for s in 0..steps {
        let r = &counts[s * n..(s + 1) * n];
        per_step.fill(0.0);
        for o in 0..n_out {
            let g = dl_dyhat[s * n_out + o];
            if g == 0.0 {
                continue;
            }
            for (a, &rv) in gw.row_mut(o).iter_mut().zip(r) {
                *a += g * rv;
            }
            for (p, &wv) in per_step.iter_mut().zip(w.row(o)) {
                *p += g * wv;
            }
        }
        for t in s * step_len..(s + 1) * step_len {
            dz[t * n..(t + 1) * n].copy_from_slice(&per_step);
        }
    }
    Ok((gw, dz))
}

/// Examples presented in one regression episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeExamples {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl EpisodeExamples {
    pub fn sample(task: &RegressionTask, n: usize, rng: &mut Rng) -> Self {
        let x: Vec<Vec<f64>> = (0..n).map(|_| task.sample_input(rng)).collect();
        let y = x.iter().map(|xi| task.eval(xi)).collect();
        Self { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeProtocol {
    /// Simulation steps per example.
    pub step_len: usize,
    pub steps_per_episode: usize,
    /// Feed the previous example's target through an extra input channel.
    pub delayed_target: bool,
    /// Probe from copies of the live state, leaving the episode untouched.
    pub probe_mode: bool,
}

impl EpisodeProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.step_len == 0 || self.steps_per_episode == 0 {
            return Err(Error::Config("episode step length and count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sim_steps(&self) -> usize {
        self.step_len * self.steps_per_episode
    }
}

/// Output of presenting one example.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub prediction: Vec<f64>,
    /// Spike count of each neuron during the example.
    pub counts: Vec<f64>,
    pub mean_trace: Vec<f64>,
}

/// Drives one regression episode example by example.
pub struct RegressionRunner<'a> {
    sim: Simulator<'a>,
    state: NetworkState,
    encoder: &'a ChannelEncoder,
    protocol: EpisodeProtocol,
    dt_ms: f64,
    spike_rng: Rng,
    prev_target: f64,
    rates_hz: Vec<f64>,
    input: Vec<f64>,
}

impl<'a> RegressionRunner<'a> {
    pub fn new(
        params: &'a ReservoirParams,
        consts: &NeuronConstants,
        encoder: &'a ChannelEncoder,
        protocol: EpisodeProtocol,
        spike_rng: Rng,
    ) -> Result<Self> {
        let state = NetworkState::for_params(params);
        Self::from_state(params, consts, encoder, protocol, state, 0.0, spike_rng)
    }

    pub fn from_state(
        params: &'a ReservoirParams,
        consts: &NeuronConstants,
        encoder: &'a ChannelEncoder,
        protocol: EpisodeProtocol,
        state: NetworkState,
        prev_target: f64,
        spike_rng: Rng,
    ) -> Result<Self> {
        protocol.validate()?;
        let sim = Simulator::new(params, consts)?;
        sim.check_state(&state)?;
        ensure_dim("encoder units vs W_in", params.n_inputs(), encoder.n_units())?;
        ensure_dim("rate readout width", params.n_neurons(), params.feature_dim())?;
        Ok(Self {
            sim,
            state,
            encoder,
            protocol,
            dt_ms: consts.dt_ms,
            spike_rng,
            prev_target,
            rates_hz: vec![0.0; encoder.n_units()],
            input: vec![0.0; encoder.n_units()],
        })
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn prev_target(&self) -> f64 {
        self.prev_target
    }

    /// Values the encoder sees for input `x`.
    pub fn channel_values(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        if self.protocol.delayed_target {
            v.push(self.prev_target);
        }
        v
    }

    /// Simulates one example; `sink` sees every simulation step.
    pub fn present(
        &mut self,
        x: &[f64],
        mut sink: impl FnMut(&StepTrace, &[f64], &NetworkState),
    ) -> Result<StepOutput> {
        let values = self.channel_values(x);
        self.rates_hz = self.encoder.rates(&values)?;
        let n = self.state.n_neurons();
        let mut counts = vec![0.0; n];
        let mut trace = vec![0.0; n];
        for _ in 0..self.protocol.step_len {
            sample_spikes_into(&self.rates_hz, self.dt_ms, &mut self.spike_rng, &mut self.input);
            let tr = self.sim.step(&mut self.state, &self.input)?;
            for (c, &z) in counts.iter_mut().zip(&tr.z) {
                *c += z;
            }
            for (m, &h) in trace.iter_mut().zip(&self.state.h) {
                *m += h;
            }
            sink(tr, &self.input, &self.state);
        }
        let len = self.protocol.step_len as f64;
        trace.iter_mut().for_each(|m| *m /= len);
        Ok(StepOutput {
            prediction: readout_predict(&self.sim.params().w_out, &counts)?,
            counts,
            mean_trace: trace,
        })
    }

    /// Makes `y` available to the next example.
    pub fn reveal(&mut self, y: f64) {
        if self.protocol.delayed_target {
            self.prev_target = y;
        }
    }
}

/// Runs every example of `examples` and records the episode.
pub fn run_regression_episode(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    encoder: &ChannelEncoder,
    protocol: EpisodeProtocol,
    examples: &EpisodeExamples,
    spike_rng: Rng,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut runner = RegressionRunner::new(params, consts, encoder, protocol, spike_rng)?;
    let mut rec = EpisodeRecord {
        seed,
        dt_ms: consts.dt_ms,
        step_len: protocol.step_len,
        n_neurons: params.n_neurons(),
        n_inputs: params.n_inputs(),
        n_outputs: params.n_outputs(),
        input_dim: examples.x.first().map_or(0, Vec::len),
        mean_traces: Some(Vec::new()),
        ..EpisodeRecord::default()
    };
    for (x, &y) in examples.x.iter().zip(&examples.y) {
        let out = runner.present(x, |tr, input, _| {
            rec.spikes.push(tr.z.iter().map(|&z| z > 0.0).collect());
            rec.inputs.push(input.iter().map(|&v| v as f32).collect());
        })?;
        let err: f64 = out.prediction.iter().map(|p| (y - p) * (y - p)).sum();
        rec.x.push(x.clone());
        rec.targets.push(vec![y; params.n_outputs()]);
        rec.sq_errors.push(err);
        rec.predictions.push(out.prediction);
        if let Some(tr) = rec.mean_traces.as_mut() {
            tr.push(out.mean_trace.iter().map(|&v| v as f32).collect());
        }
        runner.reveal(y);
    }
    Ok(rec)
}

/// Target-network episode under the delayed-target protocol.
pub fn run_tn_episode(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    task: &RegressionTask,
    encoder: &ChannelEncoder,
    protocol: EpisodeProtocol,
    task_rng: &mut Rng,
    spike_rng: Rng,
    seed: u64,
) -> Result<EpisodeRecord> {
    if !protocol.delayed_target {
        return Err(Error::Config("target-network episodes need the delayed target".into()));
    }
    let examples = EpisodeExamples::sample(task, protocol.steps_per_episode, task_rng);
    run_regression_episode(params, consts, encoder, protocol, &examples, spike_rng, seed)
}

/// Predictions the network would make for each grid input from `snapshot`,
/// each computed on a private copy of the state. Input spikes for grid point
/// `i` come from the probe stream `(probe_seed, i)`.
pub fn probe_internal_model(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    encoder: &ChannelEncoder,
    protocol: EpisodeProtocol,
    snapshot: &NetworkState,
    prev_target: f64,
    grid: &[Vec<f64>],
    probe_seed: u64,
) -> Result<Vec<f64>> {
    grid.iter()
        .enumerate()
        .map(|(i, x)| {
            let rng = stream_rng(probe_seed, Stream::Probe, i as u64);
            let mut runner =
                RegressionRunner::from_state(params, consts, encoder, protocol, snapshot.clone(), prev_target, rng)?;
            Ok(runner.present(x, |_, _, _| {})?.prediction[0])
        })
        .collect()
}

/// Simulates a Volterra task with analog input injected through `W_in`
/// and returns the per-step traces (`steps x n`) and spike record.
pub fn simulate_analog(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<bool>>)> {
    ensure_dim("analog input channels", 1, params.n_inputs())?;
    let mut sim = Simulator::new(params, consts)?;
    let mut state = sim.initial_state();
    let n = params.n_neurons();
    let mut h = Vec::with_capacity(x.len() * n);
    let mut spikes = Vec::with_capacity(x.len());
    for &xt in x {
        let tr = sim.step(&mut state, &[xt])?;
        spikes.push(tr.z.iter().map(|&z| z > 0.0).collect());
        h.extend_from_slice(&state.h);
    }
    Ok((h, spikes))
}

/// Runs the plastic trace readout on a Volterra task for `n_steps` steps
/// from a zero state. Returns the record and the per-window MSE curve.
pub fn run_volterra_task(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    task: &VolterraTask,
    n_steps: usize,
    plasticity: &ReadoutPlasticityConfig,
    seed: u64,
) -> Result<(EpisodeRecord, Vec<f64>)> {
    let x = task.gen_input(n_steps);
    let y = task.apply(&x);
    let (h, spikes) = simulate_analog(params, consts, &x)?;
    let readout = TraceReadout {
        n_x: 1,
        plasticity: *plasticity,
    };
    let fwd = readout.forward(&params.w_out, &x, &h, &y, n_steps)?;
    let curve = fwd.window_mse(&y, plasticity.window_steps);
    let rec = EpisodeRecord {
        seed,
        dt_ms: consts.dt_ms,
        step_len: 1,
        n_neurons: params.n_neurons(),
        n_inputs: 1,
        n_outputs: 1,
        input_dim: 1,
        spikes,
        inputs: x.iter().map(|&v| vec![v as f32]).collect(),
        x: x.iter().map(|&v| vec![v]).collect(),
        mean_traces: None,
        sq_errors: fwd.y_hat.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).collect(),
        predictions: fwd.y_hat.iter().map(|&v| vec![v]).collect(),
        targets: y.iter().map(|&v| vec![v]).collect(),
    };
    Ok((rec, curve))
}

/// Scores each candidate `eta` by the mean MSE over tasks of the last
/// window, reusing one simulation per task.
pub fn sweep_eta(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    tasks: &[VolterraTask],
    n_steps: usize,
    window_steps: usize,
    candidates: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut scores = vec![0.0; candidates.len()];
    for task in tasks {
        let x = task.gen_input(n_steps);
        let y = task.apply(&x);
        let (h, _) = simulate_analog(params, consts, &x)?;
        for (score, &eta) in scores.iter_mut().zip(candidates) {
            let readout = TraceReadout {
                n_x: 1,
                plasticity: ReadoutPlasticityConfig {
                    enabled: true,
                    eta,
                    window_steps,
                },
            };
            let last = match readout.forward(&params.w_out, &x, &h, &y, n_steps) {
                Ok(fwd) => *fwd.window_mse(&y, window_steps).last().unwrap_or(&f64::INFINITY),
                Err(Error::Divergence { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            *score += if last.is_finite() { last } else { f64::INFINITY };
        }
    }
    let n = tasks.len().max(1) as f64;
    Ok(candidates.iter().zip(scores).map(|(&e, s)| (e, s / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plastic(eta: f64, window: usize) -> ReadoutPlasticityConfig {
        ReadoutPlasticityConfig {
            enabled: true,
            eta,
            window_steps: window,
        }
    }

    #[test]
    fn readout_predict_basics() {
        let zero = Array2::zeros((1, 3));
        assert_eq!(readout_predict(&zero, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0]);
        let mut onehot = Array2::zeros((1, 3));
        onehot[[0, 2]] = 1.0;
        assert_eq!(readout_predict(&onehot, &[1.0, 2.0, 3.0]).unwrap(), vec![3.0]);
        let w = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 2.0]).unwrap();
        let a = readout_predict(&w, &[1.0, 2.0, 3.0]).unwrap()[0];
        let b = readout_predict(&w, &[2.5, 5.0, 7.5]).unwrap()[0];
        assert!((2.5 * a - b).abs() < 1e-12);
        assert!(readout_predict(&w, &[1.0]).is_err());
    }

    #[test]
    fn accumulate_scalar_and_zero_error() {
        let w = Array2::zeros((1, 1));
        let s = ReadoutSample {
            y: &[2.0],
            y_hat: &[0.0],
            h: &[3.0],
        };
        let w1 = accumulate_and_apply(&w, &[s], 0, &plastic(0.1, 1)).unwrap();
        assert!((w1[[0, 0]] - 0.6).abs() < 1e-15);
        let same = ReadoutSample {
            y: &[1.5],
            y_hat: &[1.5],
            h: &[3.0],
        };
        let w2 = accumulate_and_apply(&w, &[same, same], 0, &plastic(0.1, 2)).unwrap();
        assert_eq!(w2, w);
        assert!(accumulate_and_apply(&w, &[same], 0, &plastic(0.1, 2)).is_err());
    }

    #[test]
    fn disabled_plasticity_leaves_weights_bit_identical() {
        let r = TraceReadout {
            n_x: 1,
            plasticity: ReadoutPlasticityConfig {
                enabled: false,
                eta: 0.0,
                window_steps: 4,
            },
        };
        let w = Array2::from_shape_vec((1, 3), vec![0.1, 0.2, -0.3]).unwrap();
        let x: Vec<f64> = (0..12).map(|t| t as f64 * 0.1).collect();
        let h: Vec<f64> = (0..24).map(|t| (t as f64).sin()).collect();
        let y = vec![1.0; 12];
        let f = r.forward(&w, &x, &h, &y, 12).unwrap();
        assert_eq!(f.w_end, w);
    }

    #[test]
    fn forward_matches_literal_window_sums() {
        let r = TraceReadout {
            n_x: 1,
            plasticity: plastic(0.05, 3),
        };
        let w0 = Array2::from_shape_vec((1, 3), vec![0.4, -0.2, 0.1]).unwrap();
        let steps = 7;
        let x: Vec<f64> = (0..steps).map(|t| (t as f64 * 0.7).cos()).collect();
        let h: Vec<f64> = (0..2 * steps).map(|k| 0.3 + (k as f64 * 0.37).sin().abs()).collect();
        let y: Vec<f64> = (0..steps).map(|t| (t as f64 * 0.2).sin()).collect();
        let f = r.forward(&w0, &x, &h, &y, steps).unwrap();
        // brute force with accumulate_and_apply
        let mut w = w0.clone();
        for start in [0, 3] {
            let preds: Vec<f64> = (start..start + 3)
                .map(|t| readout_predict(&w, &[x[t], h[2 * t], h[2 * t + 1]]).unwrap()[0])
                .collect();
            let ys: Vec<[f64; 1]> = (start..start + 3).map(|t| [y[t]]).collect();
            let ps: Vec<[f64; 1]> = preds.iter().map(|&p| [p]).collect();
            let samples: Vec<ReadoutSample> = (0..3)
                .map(|k| ReadoutSample {
                    y: &ys[k],
                    y_hat: &ps[k],
                    h: &h[2 * (start + k)..2 * (start + k) + 2],
                })
                .collect();
            for (k, p) in preds.iter().enumerate() {
                assert!((f.y_hat[start + k] - p).abs() < 1e-15);
            }
            w = accumulate_and_apply(&w, &samples, 1, &r.plasticity).unwrap();
        }
        assert_eq!(f.updated, vec![true, true, false]);
        for (a, b) in f.w_end.iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// `sum_t c_t y_hat_t + sum_t d_t . h_t` differentiated numerically.
    #[test]
    fn backward_matches_finite_differences() {
        let r = TraceReadout {
            n_x: 2,
            plasticity: plastic(0.07, 4),
        };
        let steps = 10;
        let n_h = 3;
        let n_out = 2;
        let w0 = Array2::from_shape_fn((n_out, 2 + n_h), |(i, j)| 0.1 * (i as f64 + 1.0) - 0.05 * j as f64);
        let x: Vec<f64> = (0..steps * 2).map(|k| (k as f64 * 0.31).sin()).collect();
        let h0: Vec<f64> = (0..steps * n_h).map(|k| 0.5 + 0.4 * (k as f64 * 0.53).cos()).collect();
        let y: Vec<f64> = (0..steps * n_out).map(|k| (k as f64 * 0.11).cos()).collect();
        let c: Vec<f64> = (0..steps * n_out).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let loss = |w: &Array2<f64>, h: &[f64]| {
            let f = r.forward(w, &x, h, &y, steps).unwrap();
            f.y_hat.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };
        let f = r.forward(&w0, &x, &h0, &y, steps).unwrap();
        let (gw, gh) = r.backward(&f, &x, &h0, &y, &c).unwrap();
        let eps = 1e-6;
        for i in 0..n_out {
            for j in 0..2 + n_h {
                let mut p = w0.clone();
                p[[i, j]] += eps;
                let mut m = w0.clone();
                m[[i, j]] -= eps;
                let fd = (loss(&p, &h0) - loss(&m, &h0)) / (2.0 * eps);
                assert!((fd - gw[[i, j]]).abs() < 1e-7, "w[{i},{j}] {fd} vs {}", gw[[i, j]]);
            }
        }
        for k in 0..steps * n_h {
            let mut p = h0.clone();
            p[k] += eps;
            let mut m = h0.clone();
            m[k] -= eps;
            let fd = (loss(&w0, &p) - loss(&w0, &m)) / (2.0 * eps);
            assert!((fd - gh[k]).abs() < 1e-7, "h[{k}] {fd} vs {}", gh[k]);
        }
    }

    #[test]
    fn trace_chain_matches_recurrence() {
        // L = sum_t a_t h_t with h_t = kappa h_{t-1} + z_t
        let kappa: f64 = 0.9;
        let a = [0.5, -1.0, 2.0];
        let mut dz = vec![0.0; 3];
        traces_to_spikes(&a, kappa, 1, &mut dz);
        assert!((dz[2] - 2.0).abs() < 1e-15);
        assert!((dz[1] - (-1.0 + 0.9 * 2.0)).abs() < 1e-15);
        assert!((dz[0] - (0.5 - 0.9 + 0.81 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn count_readout_gradients() {
        let w = Array2::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap();
        let z = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let counts = step_counts(&z, 2, 2);
        assert_eq!(counts, vec![2.0, 1.0, 0.0, 1.0]);
        let yh = count_readout_forward(&w, &counts).unwrap();
        assert_eq!(yh, vec![1.0 - 2.0, -2.0]);
        let (gw, dz) = count_readout_backward(&w, &counts, &[2.0, 1.0], 2).unwrap();
        assert_eq!(gw.row(0).to_vec(), vec![4.0, 2.0 + 1.0]);
        assert_eq!(&dz[..2], &[1.0, -4.0]);
        assert_eq!(&dz[4..6], &[0.5, -2.0]);
    }
}
