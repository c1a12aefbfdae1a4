//! Meta-training: batches of sampled tasks, the outer loss with its firing
//! rate regularizer, truncated BPTT with Adam, held-out evaluation and the
//! on-disk training run.
//!
//! Each iteration runs in two phases. The forward phase simulates every
//! batch slot and already back-propagates through the readout; the batch
//! mean rates are then known, so the backward phase adds the regularizer
//! gradient and reverses the network recurrence. Both phases map over slots
//! with the [`Executor`] and reduce in slot order.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bptt::{adam_step, backward, clip_by_global_norm, AdamState, BackwardOptions, Gradients, Tape};
use crate::checkpoint::{checkpoint_name, latest_checkpoint, Checkpoint, SlotCarry, StreamCarry};
use crate::config::{ExperimentConfig, RateUnit, Reduction, RunManifest, TaskFamily};
use crate::encoding::ChannelEncoder;
use crate::error::{ensure_dim, Error, Result};
use crate::inner_loop::{
    probe_internal_model, count_readout_backward, run_tn_episode, run_volterra_task, traces_to_spikes, EpisodeExamples, EpisodeProtocol,
    RegressionRunner, TraceReadout,
};
use crate::metrics::{read_metrics, IterationMetrics, MetricsWriter};
use crate::parallel::Executor;
use crate::record::EpisodeRecord;
use crate::rng::{stream_rng, stream_rng2, Rng, Stream};
use crate::snn::{NetworkState, NeuronConstants, ReservoirParams, Simulator, SpikeFn};
use crate::tasks::{sample_volterra, RegressionFamily};

/// How a batch of episodes is turned into a scalar loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    /// The loss covers the last `window` prediction steps; `None` covers
    /// the whole episode.
    pub window: Option<usize>,
    pub reduction: Reduction,
    pub reg_alpha: f64,
    pub target_rate_hz: f64,
    pub rate_unit: RateUnit,
}

impl LossSpec {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let o = &cfg.outer;
        Self {
            window: (cfg.task.family == TaskFamily::Volterra).then_some(o.loss_window_steps),
            reduction: o.reduction,
            reg_alpha: o.reg_alpha,
            target_rate_hz: o.target_rate_hz,
            rate_unit: o.rate_unit,
        }
    }

    pub fn window_range(&self, len: usize) -> Range<usize> {
        let w = self.window.unwrap_or(len).min(len);
        len - w..len
    }

    /// Factor applied to each squared error inside the window.
    pub fn error_weight(&self, window_len: usize, n_outputs: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / (window_len * n_outputs).max(1) as f64,
        }
    }
}

/// The parts of an episode the outer loss depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    /// Squared error of each prediction step, summed over outputs.
    pub sq_errors: Vec<f64>,
    pub n_outputs: usize,
    pub spike_counts: Vec<f64>,
    pub duration_ms: f64,
}

impl EpisodeStats {
    pub fn from_record(rec: &EpisodeRecord) -> Self {
        Self {
            sq_errors: rec.sq_errors.clone(),
            n_outputs: rec.n_outputs,
            spike_counts: rec.spike_counts(),
            duration_ms: rec.duration_ms(),
        }
    }

    fn task_loss(&self, spec: &LossSpec) -> f64 {
        let r = spec.window_range(self.sq_errors.len());
        spec.error_weight(r.len(), self.n_outputs) * self.sq_errors[r].iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub reg: f64,
    pub total: f64,
    /// Batch-mean rate of each neuron, in the regularizer's unit.
    pub mean_rates: Vec<f64>,
    /// Population mean rate in Hz.
    pub mean_rate_hz: f64,
}

/// `alpha * sum_j (f_j - f0)^2`.
pub fn rate_regularizer(rates: &[f64], alpha: f64, target: f64) -> f64 {
    alpha * rates.iter().map(|f| (f - target) * (f - target)).sum::<f64>()
}

/// Batch mean of the per-episode task losses plus the regularizer on the
/// batch-mean firing rates.
pub fn batch_loss(stats: &[&EpisodeStats], spec: &LossSpec) -> Result<LossBreakdown> {
    let first = stats.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let n = first.spike_counts.len();
    let m = stats.len() as f64;
    let mut rates = vec![0.0; n];
    let mut hz = 0.0;
    let mut task = 0.0;
    for s in stats {
        ensure_dim("batch neurons", n, s.spike_counts.len())?;
        if !(s.duration_ms > 0.0) {
            return Err(Error::Contract("episode without simulated time".into()));
        }
        for (r, &c) in rates.iter_mut().zip(&s.spike_counts) {
            *r += spec.rate_unit.rate(c, s.duration_ms) / m;
            hz += RateUnit::Hz.rate(c, s.duration_ms);
        }
        task += s.task_loss(spec) / m;
    }
    let reg = rate_regularizer(&rates, spec.reg_alpha, spec.rate_unit.from_hz(spec.target_rate_hz));
    Ok(LossBreakdown {
        task,
        reg,
        total: task + reg,
        mean_rates: rates,
        mean_rate_hz: hz / (m * n.max(1) as f64),
    })
}

/// Outer loss of a batch of recorded episodes.
pub fn outer_loss(records: &[EpisodeRecord], spec: &LossSpec) -> Result<LossBreakdown> {
    let stats: Vec<EpisodeStats> = records.iter().map(EpisodeStats::from_record).collect();
    batch_loss(&stats.iter().collect::<Vec<_>>(), spec)
}

/// Parameters before any meta-training; the random reservoir baseline.
pub fn initial_params(cfg: &ExperimentConfig) -> Result<ReservoirParams> {
    ReservoirParams::initialize(&cfg.init_spec()?, &mut stream_rng(cfg.seed, Stream::Init, 0))
}

/// Input and target of one streamed task over all of its chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTask {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Training task of `slot` in task group `group`.
pub fn stream_task(cfg: &ExperimentConfig, group: u64, slot: usize) -> Result<StreamTask> {
    let mut rng = stream_rng2(cfg.seed, Stream::TrainTask, group, slot as u64);
    let task = sample_volterra(&mut rng, &cfg.task.volterra)?;
    let x = task.gen_input(cfg.outer.chunk_steps * cfg.outer.chunks_per_task);
    let y = task.apply(&x);
    Ok(StreamTask { x, y })
}

/// One slot after its forward pass, holding what the backward pass needs.
struct SlotForward {
    tape: Tape,
    /// Direct `dL/dz` from the readout, `horizon x n`.
    dl_dz: Vec<f64>,
    grad_w_out: Array2<f64>,
    stats: EpisodeStats,
    carry: Option<SlotCarry>,
}

fn fresh_carry(params: &ReservoirParams) -> SlotCarry {
    SlotCarry {
        state: NetworkState::for_params(params),
        readout_delta: Array2::zeros(params.w_out.dim()),
    }
}

/// Simulates one truncation window of a streamed task from `carry`.
fn stream_chunk_forward(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    readout: &TraceReadout,
    carry: &SlotCarry,
    x: &[f64],
    y: &[f64],
    spec: &LossSpec,
) -> Result<SlotForward> {
    let steps = x.len();
    ensure_dim("chunk targets", steps, y.len())?;
    let n = params.n_neurons();
    let mut sim = Simulator::new(params, consts)?;
    let mut state = carry.state.clone();
    sim.check_state(&state)?;
    let mut tape = Tape::begin(&state, params.n_inputs(), params.max_delay(), SpikeFn::Hard);
    let mut h = Vec::with_capacity(steps * n);
    for &xt in x {
        let tr = sim.step(&mut state, &[xt])?;
        tape.push(tr, &[xt]);
        h.extend_from_slice(&state.h);
    }
    let w_start = &params.w_out + &carry.readout_delta;
    let fwd = readout.forward(&w_start, x, &h, y, steps)?;
    let n_out = params.n_outputs();
    let window = spec.window_range(steps);
    let weight = spec.error_weight(window.len(), n_out);
    let mut dl_dyhat = vec![0.0; steps * n_out];
    let mut sq_errors = vec![0.0; steps];
    for t in 0..steps {
        for o in 0..n_out {
            let e = fwd.y_hat[t * n_out + o] - y[t * n_out + o];
            sq_errors[t] += e * e;
            if window.contains(&t) {
                dl_dyhat[t * n_out + o] = 2.0 * weight * e;
            }
        }
    }
    let (grad_w_out, dl_dh) = readout.backward(&fwd, x, &h, y, &dl_dyhat)?;
    let mut dl_dz = vec![0.0; steps * n];
    traces_to_spikes(&dl_dh, consts.kappa, n, &mut dl_dz);
    let stats = EpisodeStats {
        sq_errors,
        n_outputs: n_out,
        spike_counts: tape.spike_counts(),
        duration_ms: steps as f64 * consts.dt_ms,
    };
    Ok(SlotForward {
        tape,
        dl_dz,
        grad_w_out,
        stats,
        carry: Some(SlotCarry {
            state,
            readout_delta: &fwd.w_end - &params.w_out,
        }),
    })
}

/// Runs one regression episode under the delayed-target protocol.
fn regression_forward(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    encoder: &ChannelEncoder,
    protocol: EpisodeProtocol,
    examples: &EpisodeExamples,
    spike_rng: Rng,
    spec: &LossSpec,
) -> Result<SlotForward> {
    let mut runner = RegressionRunner::new(params, consts, encoder, protocol, spike_rng)?;
    let mut tape = Tape::begin(runner.state(), params.n_inputs(), params.max_delay(), SpikeFn::Hard);
    let n_out = params.n_outputs();
    let steps = examples.len();
    let mut counts = Vec::with_capacity(steps * params.n_neurons());
    let mut errors = Vec::with_capacity(steps * n_out);
    for (x, &y) in examples.x.iter().zip(&examples.y) {
        let out = runner.present(x, |tr, input, _| tape.push(tr, input))?;
        counts.extend_from_slice(&out.counts);
        errors.extend(out.prediction.iter().map(|p| p - y));
        runner.reveal(y);
    }
    let window = spec.window_range(steps);
    let weight = spec.error_weight(window.len(), n_out);
    let mut dl_dyhat = vec![0.0; steps * n_out];
    for t in window {
        for o in 0..n_out {
            dl_dyhat[t * n_out + o] = 2.0 * weight * errors[t * n_out + o];
        }
    }
    let (grad_w_out, dl_dz) = count_readout_backward(&params.w_out, &counts, &dl_dyhat, protocol.step_len)?;
    let stats = EpisodeStats {
        sq_errors: errors.chunks(n_out.max(1)).map(|e| e.iter().map(|v| v * v).sum()).collect(),
        n_outputs: n_out,
        spike_counts: tape.spike_counts(),
        duration_ms: tape.horizon() as f64 * consts.dt_ms,
    };
    Ok(SlotForward {
        tape,
        dl_dz,
        grad_w_out,
        stats,
        carry: None,
    })
}

/// Adds the regularizer gradient and reverses the recurrence of one slot.
/// `reg_coef[j] = 2 alpha (f_j - f0)`; the batch factor is applied later.
fn slot_backward(
    fwd: &SlotForward,
    reg_coef: &[f64],
    unit: RateUnit,
    params: &ReservoirParams,
    consts: &NeuronConstants,
    opts: &BackwardOptions,
) -> Result<Gradients> {
    let n = params.n_neurons();
    let per_spike = unit.rate(1.0, fwd.stats.duration_ms);
    let mut dl_dz = fwd.dl_dz.clone();
    for row in dl_dz.chunks_exact_mut(n.max(1)) {
        for (d, &c) in row.iter_mut().zip(reg_coef) {
            *d += c * per_spike;
        }
    }
    let g = backward(&fwd.tape, params, consts, opts, &dl_dz)?;
    Ok(Gradients {
        w_in: g.w_in,
        w_rec: g.w_rec,
        w_out: fwd.grad_w_out.clone(),
    })
}

/// Outer-loop state: parameters, optimizer and streamed-task carry.
#[derive(Debug)]
pub struct Trainer {
    cfg: ExperimentConfig,
    config_hash: String,
    consts: NeuronConstants,
    encoder: Option<ChannelEncoder>,
    spec: LossSpec,
    params: ReservoirParams,
    adam: AdamState,
    iteration: u64,
    carry: Option<StreamCarry>,
    stream_cache: Option<(u64, Vec<StreamTask>)>,
    executor: Executor,
}

/// Gradient statistics of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub metrics: IterationMetrics,
    pub task_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, executor: Executor) -> Result<Self> {
        let params = initial_params(cfg)?;
        let adam = AdamState::for_params(cfg.outer.adam, &params);
        Self::assemble(cfg, executor, params, adam, 0, None)
    }

    /// Continues exactly where `ckpt` left off.
    pub fn from_checkpoint(cfg: &ExperimentConfig, executor: Executor, ckpt: Checkpoint) -> Result<Self> {
        ckpt.ensure_config(&cfg.training_hash(), Path::new("checkpoint"))?;
        let spec = cfg.init_spec()?;
        ensure_dim("checkpoint neurons", spec.n_neurons, ckpt.params.n_neurons())?;
        ensure_dim("checkpoint inputs", spec.n_inputs, ckpt.params.n_inputs())?;
        ensure_dim("checkpoint features", spec.feature_dim, ckpt.params.feature_dim())?;
        Self::assemble(cfg, executor, ckpt.params, ckpt.adam, ckpt.iteration, ckpt.carry)
    }

    fn assemble(
        cfg: &ExperimentConfig,
        executor: Executor,
        params: ReservoirParams,
        adam: AdamState,
        iteration: u64,
        carry: Option<StreamCarry>,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            config_hash: cfg.training_hash(),
            consts: cfg.consts()?,
            encoder: cfg.encoder()?,
            spec: LossSpec::for_config(cfg),
            params,
            adam,
            iteration,
            carry,
            stream_cache: None,
            executor,
        })
    }

    pub fn params(&self) -> &ReservoirParams {
        &self.params
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config_hash.clone(),
            iteration: self.iteration,
            params: self.params.clone(),
            adam: self.adam.clone(),
            carry: self.carry.clone(),
        }
    }

    fn stream_tasks(&mut self, group: u64) -> Result<&[StreamTask]> {
        if self.stream_cache.as_ref().is_none_or(|(g, _)| *g != group) {
            let cfg = &self.cfg;
            let tasks = self.executor.try_map(cfg.outer.batch_size, |b| stream_task(cfg, group, b))?;
            self.stream_cache = Some((group, tasks));
        }
        Ok(&self.stream_cache.as_ref().expect("filled above").1)
    }

    fn forward_batch(&mut self) -> Result<(Vec<SlotForward>, Option<u64>)> {
        let it = self.iteration;
        let m = self.cfg.outer.batch_size;
        if self.cfg.task.family == TaskFamily::Volterra {
            let o = self.cfg.outer;
            let group = it / o.chunks_per_task as u64;
            let chunk = (it % o.chunks_per_task as u64) as usize;
            self.stream_tasks(group)?;
            let tasks = &self.stream_cache.as_ref().expect("filled above").1;
            let fresh;
            let carry: &[SlotCarry] = match &self.carry {
                Some(c) if chunk > 0 && c.group == group => &c.slots,
                _ => {
                    fresh = vec![fresh_carry(&self.params); m];
                    &fresh
                }
            };
            ensure_dim("carried slots", m, carry.len())?;
            let readout = TraceReadout {
                n_x: 1,
                plasticity: self.cfg.readout,
            };
            let range = chunk * o.chunk_steps..(chunk + 1) * o.chunk_steps;
            let (params, consts, spec) = (&self.params, &self.consts, &self.spec);
            let fwd = self.executor.try_map(m, |b| {
                if carry[b].state.t != range.start {
                    return Err(Error::Contract(format!(
                        "slot {b} carries state at step {} but the chunk starts at {}",
                        carry[b].state.t, range.start
                    )));
                }
                let task = &tasks[b];
                stream_chunk_forward(
                    params,
                    consts,
                    &readout,
                    &carry[b],
                    &task.x[range.clone()],
                    &task.y[range.clone()],
                    spec,
                )
            })?;
            Ok((fwd, Some(group)))
        } else {
            let cfg = &self.cfg;
            let family = cfg.task.family.regression().expect("regression family");
            let encoder = self.encoder.as_ref().expect("regression families have an encoder");
            let (params, consts, spec) = (&self.params, &self.consts, &self.spec);
            let fwd = self.executor.try_map(m, |b| {
                let mut task_rng = stream_rng2(cfg.seed, Stream::TrainTask, it, b as u64);
                let task = family.sample(&mut task_rng, cfg.task.tn_output);
                let examples = EpisodeExamples::sample(&task, cfg.protocol.steps_per_episode, &mut task_rng);
                let spikes = stream_rng2(cfg.seed, Stream::TrainSpikes, it, b as u64);
                regression_forward(params, consts, encoder, cfg.protocol, &examples, spikes, spec)
            })?;
            Ok((fwd, None))
        }
    }

    /// One outer-loop iteration. On error nothing is modified, so the
    /// trainer still holds the last good state.
    pub fn step(&mut self) -> Result<StepReport> {
        let start = Instant::now();
        let it = self.iteration;
        let (forwards, group) = self.forward_batch()?;
        let stats: Vec<&EpisodeStats> = forwards.iter().map(|f| &f.stats).collect();
        let loss = batch_loss(&stats, &self.spec)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step: it as usize,
                what: format!("non-finite outer loss {}", loss.total),
            });
        }
        let target = self.spec.rate_unit.from_hz(self.spec.target_rate_hz);
        let alpha = self.spec.reg_alpha;
        let reg_coef: Vec<f64> = loss.mean_rates.iter().map(|f| 2.0 * alpha * (f - target)).collect();
        let (params, consts, unit, opts) = (&self.params, &self.consts, self.spec.rate_unit, &self.cfg.outer.bptt);
        let per_slot = self
            .executor
            .try_map(forwards.len(), |b| slot_backward(&forwards[b], &reg_coef, unit, params, consts, opts))?;
        let mut grads = Gradients::zeros_like(params);
        for g in &per_slot {
            grads.add_assign(g);
        }
        grads.scale(1.0 / forwards.len() as f64);
        if !grads.is_finite() {
            return Err(Error::Divergence {
                step: it as usize,
                what: "non-finite gradient".into(),
            });
        }
        let grad_norm = clip_by_global_norm(&mut grads, self.cfg.outer.grad_clip);
        let mut new_params = self.params.clone();
        let mut new_adam = self.adam.clone();
        adam_step(&mut new_adam, &mut new_params, &grads)?;
        new_params.validate().map_err(|e| match e {
            Error::Divergence { what, .. } => Error::Divergence {
                step: it as usize,
                what: format!("{what} after update"),
            },
            other => other,
        })?;
        let carry = group.map(|group| StreamCarry {
            group,
            slots: forwards.into_iter().map(|f| f.carry.expect("streamed slots carry state")).collect(),
        });
        self.params = new_params;
        self.adam = new_adam;
        self.carry = carry;
        self.iteration += 1;
        let wall_ms = if self.cfg.run.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(StepReport {
            metrics: IterationMetrics {
                baseline: None,
                iter: it,
                loss: loss.total,
                reg_loss: loss.reg,
                mean_rate_hz: loss.mean_rate_hz,
                wall_ms,
            },
            task_loss: loss.task,
            grad_norm,
        })
    }
}

/// Held-out performance of one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_tasks: usize,
    /// Mean over tasks of each task's mean MSE; `None` without tasks.
    pub mean_mse: Option<f64>,
    pub std_mse: Option<f64>,
    pub task_mse: Vec<f64>,
    /// Mean and std over tasks of the learning curve: per plasticity window
    /// for streamed tasks, per example for regression episodes.
    pub curve_mean: Vec<f64>,
    pub curve_std: Vec<f64>,
    pub mean_rate_hz: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs held-out task `index` with frozen parameters. Returns the record and
/// its learning curve. Tasks and input spikes depend only on the evaluation
/// seed, so every parameter set sees the same inputs.
pub fn eval_episode(
    params: &ReservoirParams,
    cfg: &ExperimentConfig,
    index: usize,
) -> Result<(EpisodeRecord, Vec<f64>)> {
    let consts = cfg.consts()?;
    let seed = cfg.eval.seed;
    let mut task_rng = stream_rng(seed, Stream::EvalTask, index as u64);
    match cfg.task.family.regression() {
        None => {
            let task = sample_volterra(&mut task_rng, &cfg.task.volterra)?;
            run_volterra_task(params, &consts, &task, cfg.eval.stream_steps, &cfg.readout, seed)
        }
        Some(family) => {
            let encoder = cfg.encoder()?.expect("regression families have an encoder");
            let task = family.sample(&mut task_rng, cfg.task.tn_output);
            let spikes = stream_rng(seed, Stream::EvalSpikes, index as u64);
            let rec = run_tn_episode(params, &consts, &task, &encoder, cfg.protocol, &mut task_rng, spikes, seed)?;
            let curve = rec.sq_errors.iter().map(|e| e / rec.n_outputs as f64).collect();
            Ok((rec, curve))
        }
    }
}

/// Evenly spaced inputs covering the domain of `family`: `points` per axis.
pub fn probe_grid(family: RegressionFamily, points: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = family.input_range();
    let axis: Vec<f64> = (0..points)
        .map(|k| if points > 1 { lo + (hi - lo) * k as f64 / (points - 1) as f64 } else { 0.5 * (lo + hi) })
        .collect();
    match family.input_dim() {
        1 => axis.iter().map(|&a| vec![a]).collect(),
        _ => axis.iter().flat_map(|&a| axis.iter().map(move |&b| vec![a, b])).collect(),
    }
}

/// The internal model after `after` examples of held-out task `index`:
/// for each grid input, the prediction probed from a copy of the live
/// state next to the task's true value.
pub fn probe_eval_task(
    params: &ReservoirParams,
    cfg: &ExperimentConfig,
    index: usize,
    after: usize,
    grid: &[Vec<f64>],
) -> Result<Vec<(f64, f64)>> {
    let family = cfg
        .task
        .family
        .regression()
        .ok_or_else(|| Error::Config("probing needs a regression family".into()))?;
    let consts = cfg.consts()?;
    let encoder = cfg.encoder()?.expect("regression families have an encoder");
    let seed = cfg.eval.seed;
    let mut task_rng = stream_rng(seed, Stream::EvalTask, index as u64);
    let task = family.sample(&mut task_rng, cfg.task.tn_output);
    let examples = EpisodeExamples::sample(&task, cfg.protocol.steps_per_episode.max(after), &mut task_rng);
    let spikes = stream_rng(seed, Stream::EvalSpikes, index as u64);
    let mut runner = RegressionRunner::new(params, &consts, &encoder, cfg.protocol, spikes)?;
    for (x, &y) in examples.x.iter().zip(&examples.y).take(after) {
        runner.present(x, |_, _, _| {})?;
        runner.reveal(y);
    }
    let preds = probe_internal_model(
        params,
        &consts,
        &encoder,
        cfg.protocol,
        runner.state(),
        runner.prev_target(),
        grid,
        seed,
    )?;
    Ok(preds.into_iter().zip(grid).map(|(p, x)| (p, task.eval(x))).collect())
}

/// Inner-loop performance of `params` on `n_tasks` held-out tasks.
pub fn evaluate(params: &ReservoirParams, cfg: &ExperimentConfig, n_tasks: usize, executor: &Executor) -> Result<EvalSummary> {
    let per_task = executor.try_map(n_tasks, |i| {
        let (rec, curve) = eval_episode(params, cfg, i)?;
        let counts = rec.spike_counts();
        let hz = counts.iter().sum::<f64>() / counts.len().max(1) as f64 / rec.duration_ms() * 1000.0;
        Ok((curve, hz))
    })?;
    if per_task.is_empty() {
        return Ok(EvalSummary {
            n_tasks: 0,
            mean_mse: None,
            std_mse: None,
            task_mse: Vec::new(),
            curve_mean: Vec::new(),
            curve_std: Vec::new(),
            mean_rate_hz: None,
        });
    }
    let task_mse: Vec<f64> = per_task.iter().map(|(c, _)| c.iter().sum::<f64>() / c.len().max(1) as f64).collect();
    let (mean, std) = mean_std(&task_mse);
    let len = per_task[0].0.len();
    let (curve_mean, curve_std) = (0..len)
        .map(|k| mean_std(&per_task.iter().map(|(c, _)| c[k]).collect::<Vec<_>>()))
        .unzip();
    let rate = per_task.iter().map(|(_, hz)| hz).sum::<f64>() / per_task.len() as f64;
    Ok(EvalSummary {
        n_tasks,
        mean_mse: Some(mean),
        std_mse: Some(std),
        task_mse,
        curve_mean,
        curve_std,
        mean_rate_hz: Some(rate),
    })
}

/// Files of a training run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        let layout = crate::config::OutputLayout::default();
        Self {
            root: root.to_path_buf(),
            manifest: root.join("manifest.json"),
            config: root.join(&layout.config),
            metrics: root.join(&layout.metrics),
            checkpoints: root.join(&layout.checkpoints),
        }
    }
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn write_manifest(paths: &RunPaths, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&paths.manifest, text).map_err(|e| Error::io(&paths.manifest, e))
}

/// Outcome of [`train_run`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ReservoirParams,
    pub iterations: u64,
    pub last_checkpoint: PathBuf,
}

/// Meta-trains into `out_dir`: manifest, config, metrics and checkpoints.
///
/// With `resume`, training continues from the newest checkpoint and the
/// metrics file is cut back to the iterations it covers. On divergence the
/// last good state is checkpointed before the error is returned; on a
/// metrics write failure the current state is checkpointed first as well.
pub fn train_run(cfg: &ExperimentConfig, out_dir: &Path, resume: bool, executor: Executor) -> Result<TrainOutcome> {
    let paths = RunPaths::new(out_dir);
    std::fs::create_dir_all(&paths.checkpoints).map_err(|e| Error::io(&paths.checkpoints, e))?;
    let hash = cfg.training_hash();
    let resumed = if resume { latest_checkpoint(&paths.checkpoints)? } else { None };
    let (mut trainer, mut metrics) = match resumed {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            ckpt.ensure_config(&hash, &path)?;
            let done = ckpt.iteration;
            let kept: Vec<IterationMetrics> = if paths.metrics.exists() {
                read_metrics(&paths.metrics)?.into_iter().filter(|m| m.iter < done).collect()
            } else {
                Vec::new()
            };
            let mut w = MetricsWriter::create(&paths.metrics)?;
            for m in &kept {
                w.write(m)?;
            }
            (Trainer::from_checkpoint(cfg, executor, ckpt)?, w)
        }
        None => (Trainer::new(cfg, executor)?, MetricsWriter::create(&paths.metrics)?),
    };
    std::fs::write(&paths.config, cfg.to_toml()).map_err(|e| Error::io(&paths.config, e))?;
    let mut manifest = RunManifest::new(cfg, unix_ms());
    write_manifest(&paths, &manifest)?;

    let save = |t: &Trainer| -> Result<PathBuf> {
        let p = paths.checkpoints.join(checkpoint_name(t.iteration()));
        t.checkpoint().save(&p)?;
        Ok(p)
    };
    let every = cfg.run.checkpoint_every;
    let mut last = None;
    while trainer.iteration() < cfg.outer.iterations {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::Divergence { .. }) => {
                save(&trainer)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Err(e) = metrics.write(&report.metrics) {
            let _ = save(&trainer);
            return Err(e);
        }
        if every > 0 && trainer.iteration() % every == 0 {
            last = Some(save(&trainer)?);
        }
    }
    let final_path = paths.checkpoints.join(checkpoint_name(trainer.iteration()));
    if last.as_ref() != Some(&final_path) {
        save(&trainer)?;
    }
    manifest.finished_unix_ms = Some(unix_ms());
    write_manifest(&paths, &manifest)?;
    Ok(TrainOutcome {
        iterations: trainer.iteration(),
        params: trainer.params,
        last_checkpoint: final_path,
    })
}
