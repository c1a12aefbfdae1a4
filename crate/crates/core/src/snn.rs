//! Discrete-time recurrent leaky integrate-and-fire network.
//!
//! One call to [`Simulator::step`] advances the network by `dt`:
//!
//! 1. the normalized potential `v = (V - v_th) / v_th` decides the spike
//!    `z = H(v)` (strict inequality), masked while a neuron is refractory;
//! 2. the spike vector is pushed into the delay ring;
//! 3. the input current is `I = W_in x + sum_d W_rec|d z(t - d)`;
//! 4. `V <- rho V + (1 - rho) R_m I - v_th z` (reset by subtraction);
//! 5. the readout trace is `h <- kappa h + z`.
//!
//! The refractory mask is an integer counter and carries no gradient.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronConstants {
    pub dt_ms: f64,
    pub tau_m_ms: f64,
    /// Membrane decay per step.
    pub rho: f64,
    /// Membrane resistance. Only `r_m * I` enters the dynamics.
    pub r_m: f64,
    pub v_th: f64,
    pub refractory_ms: f64,
    /// Amplitude of the surrogate spike derivative.
    pub gamma: f64,
    pub tau_readout_ms: f64,
    /// Readout trace decay per step.
    pub kappa: f64,
}

impl NeuronConstants {
    /// Builds constants with `rho = exp(-dt/tau_m)` and
    /// `kappa = exp(-dt/tau_readout)`.
    pub fn new(
        dt_ms: f64,
        tau_m_ms: f64,
        v_th: f64,
        refractory_ms: f64,
        gamma: f64,
        tau_readout_ms: f64,
    ) -> Result<Self> {
        let consts = Self {
            dt_ms,
            tau_m_ms,
            rho: (-dt_ms / tau_m_ms).exp(),
            r_m: 1.0,
            v_th,
            refractory_ms,
            gamma,
            tau_readout_ms,
            kappa: (-dt_ms / tau_readout_ms).exp(),
        };
        consts.validate()?;
        Ok(consts)
    }

    /// Overrides the membrane decay directly, leaving `tau_m_ms` as documentation.
    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        self.rho = rho;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.dt_ms > 0.0 && self.tau_m_ms > 0.0 && self.tau_readout_ms > 0.0) {
            return Err(Error::Config("dt and time constants must be positive".into()));
        }
        if !in_unit(self.rho) || !in_unit(self.kappa) {
            return Err(Error::Config(format!(
                "rho ({}) and kappa ({}) must lie in (0, 1)",
                self.rho, self.kappa
            )));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::Config("v_th must be positive".into()));
        }
        if !(self.refractory_ms >= 0.0) {
            return Err(Error::Config("refractory period must be >= 0".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if !(self.r_m > 0.0) {
            return Err(Error::Config("r_m must be positive".into()));
        }
        Ok(())
    }

    pub fn refractory_steps(&self) -> u32 {
        (self.refractory_ms / self.dt_ms).round() as u32
    }

    /// Upper bound of a trace driven by a 0/1 spike train.
    pub fn trace_bound(&self) -> f64 {
        1.0 / (1.0 - self.kappa)
    }
}

/// How synaptic delays are drawn at initialization (in steps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelayInit {
    /// Every synapse gets the same delay.
    Uniform { steps: u8 },
    /// Independent uniform integers in `0..=max_steps`.
    Spread { max_steps: u8 },
}

/// Shapes and scales for a fresh reservoir.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub n_neurons: usize,
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub feature_dim: usize,
    pub w_in_std: f64,
    pub w_rec_std: f64,
    pub delays: DelayInit,
}

/// Everything the outer loop may change, plus the frozen delay table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirParams {
    /// `n_neurons x n_inputs`.
    pub w_in: Array2<f64>,
    /// `n_neurons x n_neurons`, row = postsynaptic neuron. Zero diagonal.
    pub w_rec: Array2<f64>,
    /// `n_outputs x feature_dim`; the readout initialization when the
    /// readout is plastic.
    pub w_out: Array2<f64>,
    /// Per-synapse delay in steps, same layout as `w_rec`.
    pub delays: Array2<u8>,
}

impl ReservoirParams {
    /// Gaussian input/recurrent weights, Glorot-uniform readout.
    pub fn initialize(spec: &InitSpec, rng: &mut Rng) -> Result<Self> {
        if spec.n_neurons == 0 || spec.feature_dim == 0 || spec.n_outputs == 0 {
            return Err(Error::Config("reservoir dimensions must be non-zero".into()));
        }
        let n = spec.n_neurons;
        let normal_in = Normal::new(0.0, spec.w_in_std)
            .map_err(|e| Error::Config(format!("w_in_std: {e}")))?;
        let normal_rec = Normal::new(0.0, spec.w_rec_std)
            .map_err(|e| Error::Config(format!("w_rec_std: {e}")))?;
        let w_in = Array2::from_shape_fn((n, spec.n_inputs), |_| normal_in.sample(rng));
        let mut w_rec = Array2::from_shape_fn((n, n), |_| normal_rec.sample(rng));
        for j in 0..n {
            w_rec[[j, j]] = 0.0;
        }
        let limit = (6.0 / (spec.feature_dim + spec.n_outputs) as f64).sqrt();
        let w_out = Array2::from_shape_fn((spec.n_outputs, spec.feature_dim), |_| {
            rng.random_range(-limit..=limit)
        });
        let delays = match spec.delays {
            DelayInit::Uniform { steps } => Array2::from_elem((n, n), steps),
            DelayInit::Spread { max_steps } => {
                Array2::from_shape_fn((n, n), |_| rng.random_range(0..=max_steps))
            }
        };
        Ok(Self {
            w_in,
            w_rec,
            w_out,
            delays,
        })
    }

    pub fn n_neurons(&self) -> usize {
        self.w_rec.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_out.ncols()
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0) as usize
    }

    /// `Some(d)` when every synapse has delay `d`.
    pub fn uniform_delay(&self) -> Option<usize> {
        let first = *self.delays.iter().next()?;
        self.delays
            .iter()
            .all(|&d| d == first)
            .then_some(first as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_neurons();
        ensure_dim("w_rec columns", n, self.w_rec.ncols())?;
        ensure_dim("w_in rows", n, self.w_in.nrows())?;
        ensure_dim("delay rows", n, self.delays.nrows())?;
        ensure_dim("delay columns", n, self.delays.ncols())?;
        for j in 0..n {
            if self.w_rec[[j, j]] != 0.0 {
                return Err(Error::Contract(format!("self-connection on neuron {j}")));
            }
        }
        let all_finite = self
            .w_in
            .iter()
            .chain(self.w_rec.iter())
            .chain(self.w_out.iter())
            .all(|w| w.is_finite());
        if !all_finite {
            return Err(Error::Divergence {
                step: 0,
                what: "non-finite weight".into(),
            });
        }
        Ok(())
    }

    /// Content hash over all weights; used to check that nothing changes
    /// during an episode batch.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for w in self.w_in.iter().chain(self.w_rec.iter()).chain(self.w_out.iter()) {
            h.update(w.to_le_bytes());
        }
        h.update(self.delays.as_slice().unwrap_or(&[]));
        hex::encode(h.finalize())
    }
}

/// Ring of the last `depth` spike vectors; slot `t % depth` holds `z(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeBuffer {
    depth: usize,
    n: usize,
    data: Vec<f64>,
}

impl SpikeBuffer {
    pub fn new(depth: usize, n: usize) -> Self {
        let depth = depth.max(1);
        Self {
            depth,
            n,
            data: vec![0.0; depth * n],
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_neurons(&self) -> usize {
        self.n
    }

    /// Raw slots, `depth x n` row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn from_parts(depth: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Contract("spike buffer depth must be >= 1".into()));
        }
        ensure_dim("spike buffer slots", depth * n, data.len())?;
        Ok(Self { depth, n, data })
    }

    fn slot(&self, t: i64) -> usize {
        t.rem_euclid(self.depth as i64) as usize
    }

    /// `z(t)`; slots never written hold zeros, so `t < 0` reads silence.
    pub fn at(&self, t: i64) -> &[f64] {
        let s = self.slot(t) * self.n;
        &self.data[s..s + self.n]
    }

    fn at_mut(&mut self, t: i64) -> &mut [f64] {
        let s = self.slot(t) * self.n;
        &mut self.data[s..s + self.n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    /// Membrane potentials `V`.
    pub v: Vec<f64>,
    /// Remaining refractory steps.
    pub refrac: Vec<u32>,
    pub spike_buffer: SpikeBuffer,
    /// Filtered spike traces `h`.
    pub h: Vec<f64>,
    /// Number of steps simulated so far.
    pub t: usize,
}

impl NetworkState {
    pub fn zeros(n: usize, max_delay: usize) -> Self {
        Self {
            v: vec![0.0; n],
            refrac: vec![0; n],
            spike_buffer: SpikeBuffer::new(max_delay + 1, n),
            h: vec![0.0; n],
            t: 0,
        }
    }

    pub fn for_params(params: &ReservoirParams) -> Self {
        Self::zeros(params.n_neurons(), params.max_delay())
    }

    pub fn n_neurons(&self) -> usize {
        self.v.len()
    }

    /// Spikes emitted on the most recent step.
    pub fn last_spikes(&self) -> &[f64] {
        self.spike_buffer.at(self.t as i64 - 1)
    }

    /// `z(t - 1 - k)` for `k = 0..`: the history a truncated tape starts from.
    pub fn spike_history(&self, k: usize) -> &[f64] {
        self.spike_buffer.at(self.t as i64 - 1 - k as i64)
    }
}

/// The forward spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Heaviside step on the normalized potential.
    #[default]
    Hard,
    /// Antiderivative of the surrogate derivative. Used only to validate
    /// gradients: its exact derivative is what the backward pass uses.
    Smooth,
}

/// Piecewise-quadratic antiderivative of `gamma * max(0, 1 - |v|)`.
pub fn smooth_spike(v: f64, gamma: f64) -> f64 {
    let s = if v <= -1.0 {
        0.0
    } else if v <= 0.0 {
        0.5 * (v + 1.0) * (v + 1.0)
    } else if v < 1.0 {
        1.0 - 0.5 * (1.0 - v) * (1.0 - v)
    } else {
        1.0
    };
    gamma * s
}

/// Per-step quantities the backward pass needs.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    /// Normalized potential used for the spike decision.
    pub v_norm: Vec<f64>,
    /// `true` where the neuron was allowed to spike.
    pub mask: Vec<bool>,
    /// Emitted spike value (0/1 for [`SpikeFn::Hard`]).
    pub z: Vec<f64>,
    /// Hard threshold crossings (drives refractory counters).
    pub crossed: Vec<bool>,
}

impl StepTrace {
    fn resize(&mut self, n: usize) {
        self.v_norm.resize(n, 0.0);
        self.mask.resize(n, false);
        self.z.resize(n, 0.0);
        self.crossed.resize(n, false);
    }
}

/// A reservoir prepared for stepping: transposed weights for event-driven
/// current accumulation plus scratch space.
pub struct Simulator<'a> {
    params: &'a ReservoirParams,
    consts: NeuronConstants,
    spike_fn: SpikeFn,
    n: usize,
    n_in: usize,
    max_delay: usize,
    uniform_delay: Option<usize>,
    refractory_steps: u32,
    /// `w_in` transposed: row `k` lists the weights leaving input `k`.
    w_in_t: Vec<f64>,
    /// `w_rec` transposed: row `i` lists the weights leaving neuron `i`.
    w_rec_t: Vec<f64>,
    delays_t: Vec<u8>,
    current: Vec<f64>,
    trace: StepTrace,
}

impl<'a> Simulator<'a> {
    pub fn new(params: &'a ReservoirParams, consts: &NeuronConstants) -> Result<Self> {
        params.validate()?;
        consts.validate()?;
        let n = params.n_neurons();
        let n_in = params.n_inputs();
        let w_in_t = params.w_in.t().iter().copied().collect();
        let w_rec_t = params.w_rec.t().iter().copied().collect();
        let delays_t = params.delays.t().iter().copied().collect();
        let mut trace = StepTrace::default();
        trace.resize(n);
        Ok(Self {
            params,
            consts: *consts,
            spike_fn: SpikeFn::Hard,
            n,
            n_in,
            max_delay: params.max_delay(),
            uniform_delay: params.uniform_delay(),
            refractory_steps: consts.refractory_steps(),
            w_in_t,
            w_rec_t,
            delays_t,
            current: vec![0.0; n],
            trace,
        })
    }

    pub fn with_spike_fn(mut self, spike_fn: SpikeFn) -> Self {
        self.spike_fn = spike_fn;
        self
    }

    pub fn params(&self) -> &ReservoirParams {
        self.params
    }

    pub fn consts(&self) -> &NeuronConstants {
        &self.consts
    }

    pub fn spike_fn(&self) -> SpikeFn {
        self.spike_fn
    }

    pub fn initial_state(&self) -> NetworkState {
        NetworkState::zeros(self.n, self.max_delay)
    }

    pub fn check_state(&self, state: &NetworkState) -> Result<()> {
        ensure_dim("state neurons", self.n, state.v.len())?;
        ensure_dim("state refractory", self.n, state.refrac.len())?;
        ensure_dim("state traces", self.n, state.h.len())?;
        if state.spike_buffer.depth() < self.max_delay + 1 || state.spike_buffer.n != self.n {
            return Err(Error::Config(format!(
                "spike buffer depth {} too small for max delay {}",
                state.spike_buffer.depth(),
                self.max_delay
            )));
        }
        Ok(())
    }

    /// Advances `state` by one step and returns the per-step trace (valid
    /// until the next call).
    pub fn step(&mut self, state: &mut NetworkState, input: &[f64]) -> Result<&StepTrace> {
        ensure_dim("input", self.n_in, input.len())?;
        let n = self.n;
        let c = self.consts;
        let t = state.t as i64;

        // 1. spike decision
        let tr = &mut self.trace;
        for j in 0..n {
            let vn = (state.v[j] - c.v_th) / c.v_th;
            let allowed = state.refrac[j] == 0;
            let crossed = allowed && vn > 0.0;
            tr.v_norm[j] = vn;
            tr.mask[j] = allowed;
            tr.crossed[j] = crossed;
            tr.z[j] = match self.spike_fn {
                SpikeFn::Hard => f64::from(u8::from(crossed)),
                SpikeFn::Smooth if allowed => smooth_spike(vn, c.gamma),
                SpikeFn::Smooth => 0.0,
            };
            state.refrac[j] = if crossed {
                self.refractory_steps
            } else {
                state.refrac[j].saturating_sub(1)
            };
        }
        state.spike_buffer.at_mut(t).copy_from_slice(&tr.z);

        // 2. input current
        let cur = &mut self.current;
        cur.fill(0.0);
        for (k, &x) in input.iter().enumerate() {
            if x != 0.0 {
                let row = &self.w_in_t[k * n..(k + 1) * n];
                for (ij, &w) in cur.iter_mut().zip(row) {
                    *ij += w * x;
                }
            }
        }
        match self.uniform_delay {
            Some(d) => {
                let zd = state.spike_buffer.at(t - d as i64);
                for (i, &z) in zd.iter().enumerate() {
                    if z != 0.0 {
                        let row = &self.w_rec_t[i * n..(i + 1) * n];
                        for (ij, &w) in cur.iter_mut().zip(row) {
                            *ij += w * z;
                        }
                    }
                }
            }
            None => {
                for d in 0..=self.max_delay {
                    let zd = state.spike_buffer.at(t - d as i64);
                    for (i, &z) in zd.iter().enumerate() {
                        if z != 0.0 {
                            let row = &self.w_rec_t[i * n..(i + 1) * n];
                            let drow = &self.delays_t[i * n..(i + 1) * n];
                            for j in 0..n {
                                if drow[j] as usize == d {
                                    cur[j] += row[j] * z;
                                }
                            }
                        }
                    }
                }
            }
        }

        // 3. membrane and trace update
        let drive = (1.0 - c.rho) * c.r_m;
        let mut finite = true;
        for j in 0..n {
            let v = c.rho * state.v[j] + drive * cur[j] - c.v_th * tr.z[j];
            finite &= v.is_finite();
            state.v[j] = v;
            state.h[j] = c.kappa * state.h[j] + tr.z[j];
        }
        state.t += 1;
        if !finite {
            return Err(Error::Divergence {
                step: state.t - 1,
                what: "non-finite membrane potential".into(),
            });
        }
        Ok(&self.trace)
    }

    /// Input current computed on the last step.
    pub fn last_current(&self) -> &[f64] {
        &self.current
    }
}

/// Functional single step: returns the successor state and the spikes.
pub fn step(
    state: &NetworkState,
    params: &ReservoirParams,
    consts: &NeuronConstants,
    input: &[f64],
) -> Result<(NetworkState, Vec<bool>)> {
    let mut sim = Simulator::new(params, consts)?;
    sim.check_state(state)?;
    let mut next = state.clone();
    let trace = sim.step(&mut next, input)?;
    let spikes = trace.z.iter().map(|&z| z > 0.0).collect();
    Ok((next, spikes))
}

/// Called after every simulated step of [`run_episode`].
pub trait EpisodeHook {
    fn on_step(&mut self, t: usize, input: &[f64], trace: &StepTrace, state: &NetworkState);
}

/// Plain trajectory of an episode: hard spikes and traces per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spikes: Vec<Vec<bool>>,
    pub traces: Vec<Vec<f64>>,
    pub final_state: NetworkState,
}

/// Simulates `inputs` (one row per step) from a zero state.
pub fn run_episode(
    params: &ReservoirParams,
    consts: &NeuronConstants,
    inputs: &Array2<f64>,
    hooks: &mut [&mut dyn EpisodeHook],
) -> Result<Trajectory> {
    if inputs.nrows() == 0 {
        return Err(Error::Contract("input stream must contain at least one step".into()));
    }
    let mut sim = Simulator::new(params, consts)?;
    let mut state = sim.initial_state();
    let mut spikes = Vec::with_capacity(inputs.nrows());
    let mut traces = Vec::with_capacity(inputs.nrows());
    for (t, row) in inputs.rows().into_iter().enumerate() {
        let x = row.to_vec();
        let trace = sim.step(&mut state, &x)?;
        spikes.push(trace.z.iter().map(|&z| z > 0.0).collect());
        traces.push(state.h.clone());
        for hook in hooks.iter_mut() {
            hook.on_step(t, &x, trace, &state);
        }
    }
    Ok(Trajectory {
        spikes,
        traces,
        final_state: state,
    })
}
