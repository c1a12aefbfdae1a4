//! Reverse-mode gradients through the unrolled reservoir.
//!
//! The forward pass writes a [`Tape`]; [`backward`] walks it in reverse and
//! turns `dL/dz(t)` (supplied by the readout and the rate regularizer) into
//! gradients for `W_in` and `W_rec`. The spike nonlinearity is differentiated
//! with the dampened triangular pseudo-derivative of [`surrogate_derivative`].
//!
//! Recurrence being reversed, per neuron `j`:
//!
//! ```text
//! z(t)     = mask(t) H(v(t)),          v(t) = (V(t) - v_th) / v_th
//! I(t)     = W_in x(t) + sum_i W_rec[j,i] z_i(t - D[j,i])
//! V(t + 1) = rho V(t) + (1 - rho) R_m I(t) - v_th z(t)
//! ```

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::snn::{NetworkState, NeuronConstants, ReservoirParams, SpikeFn, StepTrace};

/// `gamma * max(0, 1 - |v|)`.
#[inline]
pub fn surrogate_derivative(v: f64, gamma: f64) -> f64 {
    gamma * (1.0 - v.abs()).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackwardOptions {
    /// Treat the reset term `-v_th z` as a constant.
    #[serde(default)]
    pub detach_reset: bool,
}

/// Forward trajectory of one truncation window.
#[derive(Debug, Clone)]
pub struct Tape {
    n: usize,
    n_in: usize,
    horizon: usize,
    spike_fn: SpikeFn,
    /// `history[k] = z(-1 - k)`: spikes emitted before the window, constant
    /// for the backward pass.
    history: Vec<Vec<f64>>,
    v_norm: Vec<f64>,
    mask: Vec<bool>,
    z: Vec<f64>,
    crossed: Vec<bool>,
    inputs: Vec<f64>,
}

impl Tape {
    /// Starts a tape at the current `state`, capturing the spike history
    /// reachable through delays up to `max_delay`.
    pub fn begin(state: &NetworkState, n_in: usize, max_delay: usize, spike_fn: SpikeFn) -> Self {
        let history = (0..max_delay).map(|k| state.spike_history(k).to_vec()).collect();
        Self {
            n: state.n_neurons(),
            n_in,
            horizon: 0,
            spike_fn,
            history,
            v_norm: Vec::new(),
            mask: Vec::new(),
            z: Vec::new(),
            crossed: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub fn push(&mut self, trace: &StepTrace, input: &[f64]) {
        self.v_norm.extend_from_slice(&trace.v_norm);
        self.mask.extend_from_slice(&trace.mask);
        self.z.extend_from_slice(&trace.z);
        self.crossed.extend_from_slice(&trace.crossed);
        self.inputs.extend_from_slice(input);
        self.horizon += 1;
    }

    /// Number of recorded steps.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_neurons(&self) -> usize {
        self.n
    }

    pub fn spike_fn(&self) -> SpikeFn {
        self.spike_fn
    }

    pub fn z(&self, t: usize) -> &[f64] {
        &self.z[t * self.n..(t + 1) * self.n]
    }

    /// All spike values, `horizon x n` row-major.
    pub fn z_all(&self) -> &[f64] {
        &self.z
    }

    pub fn v_norm(&self, t: usize) -> &[f64] {
        &self.v_norm[t * self.n..(t + 1) * self.n]
    }

    pub fn mask(&self, t: usize) -> &[bool] {
        &self.mask[t * self.n..(t + 1) * self.n]
    }

    /// Hard threshold crossings; identical to spikes for a hard forward.
    pub fn crossed(&self) -> &[bool] {
        &self.crossed
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.n_in..(t + 1) * self.n_in]
    }

    /// `z(t - d)`, reading into the pre-window history when `t < d`.
    fn delayed(&self, t: usize, d: usize) -> &[f64] {
        if t >= d {
            self.z(t - d)
        } else {
            &self.history[d - t - 1]
        }
    }

    /// Total spike value per neuron over the window.
    pub fn spike_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n];
        for row in self.z.chunks_exact(self.n.max(1)) {
            for (c, z) in counts.iter_mut().zip(row) {
                *c += z;
            }
        }
        counts
    }

    /// Re-derives every recorded spike from the recorded potential and mask.
    pub fn replay_matches(&self, consts: &NeuronConstants) -> bool {
        self.v_norm
            .iter()
            .zip(&self.mask)
            .zip(&self.z)
            .all(|((&v, &m), &z)| {
                let expect = match (self.spike_fn, m) {
                    (_, false) => 0.0,
                    (SpikeFn::Hard, true) => f64::from(u8::from(v > 0.0)),
                    (SpikeFn::Smooth, true) => crate::snn::smooth_spike(v, consts.gamma),
                };
                expect == z
            })
    }
}

/// Gradients for every meta-trained tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub w_out: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ReservoirParams) -> Self {
        Self {
            w_in: Array2::zeros(params.w_in.raw_dim()),
            w_rec: Array2::zeros(params.w_rec.raw_dim()),
            w_out: Array2::zeros(params.w_out.raw_dim()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w_in.iter().chain(self.w_rec.iter()).chain(self.w_out.iter())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_in *= factor;
        self.w_rec *= factor;
        self.w_out *= factor;
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.w_in += &other.w_in;
        self.w_rec += &other.w_rec;
        self.w_out += &other.w_out;
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn slices(&self) -> [&[f64]; 3] {
        [
            self.w_in.as_slice().expect("standard layout"),
            self.w_rec.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
        ]
    }
}

/// Reservoir part of the gradient: `dL/dW_in`, `dL/dW_rec`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirGrads {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
}

/// Reverses the recurrence over `tape`.
///
/// `dl_dz` is `horizon x n` row-major and holds every direct dependence of
/// the loss on `z(t)` (readout, traces, regularizer). State entering the
/// window is a constant, so nothing flows past the first step.
pub fn backward(
    tape: &Tape,
    params: &ReservoirParams,
    consts: &NeuronConstants,
    opts: &BackwardOptions,
    dl_dz: &[f64],
) -> Result<ReservoirGrads> {
    let n = params.n_neurons();
    let n_in = params.n_inputs();
    let horizon = tape.horizon();
    ensure_dim("tape neurons", n, tape.n)?;
    ensure_dim("tape inputs", n_in, tape.n_in)?;
    ensure_dim("dL/dz length", horizon * n, dl_dz.len())?;
    let max_delay = params.max_delay();
    if tape.history.len() < max_delay {
        return Err(Error::Contract(format!(
            "tape history covers {} steps, delays need {max_delay}",
            tape.history.len()
        )));
    }
    let uniform = params.uniform_delay();
    let w = params.w_rec.as_slice().expect("standard layout");
    let delays = params.delays.as_slice().expect("standard layout");

    // Accumulated transposed so that event-driven updates touch contiguous rows.
    let mut g_rec_t = vec![0.0; n * n];
    let mut g_in_t = vec![0.0; n_in * n];

    let depth = max_delay + 1;
    let mut g_current = vec![0.0; depth * n];
    let mut g_v_next = vec![0.0; n];
    let mut g_z = vec![0.0; n];
    let drive = (1.0 - consts.rho) * consts.r_m;
    let inv_th = 1.0 / consts.v_th;

    for t in (0..horizon).rev() {
        let slot = t % depth;
        {
            let gi = &mut g_current[slot * n..(slot + 1) * n];
            for (g, &gv) in gi.iter_mut().zip(&g_v_next) {
                *g = drive * gv;
            }
        }
        let gi = &g_current[slot * n..(slot + 1) * n];

        // dL/dW_in
        for (k, &x) in tape.input(t).iter().enumerate() {
            if x != 0.0 {
                let row = &mut g_in_t[k * n..(k + 1) * n];
                for (g, &c) in row.iter_mut().zip(gi) {
                    *g += c * x;
                }
            }
        }

        // dL/dW_rec, driven by presynaptic events
        match uniform {
            Some(d) => {
                for (i, &z) in tape.delayed(t, d).iter().enumerate() {
                    if z != 0.0 {
                        let row = &mut g_rec_t[i * n..(i + 1) * n];
                        for (g, &c) in row.iter_mut().zip(gi) {
                            *g += c * z;
                        }
                    }
                }
            }
            None => {
                for d in 0..=max_delay {
                    for (i, &z) in tape.delayed(t, d).iter().enumerate() {
                        if z != 0.0 {
                            let row = &mut g_rec_t[i * n..(i + 1) * n];
                            for j in 0..n {
                                if delays[j * n + i] as usize == d {
                                    row[j] += gi[j] * z;
                                }
                            }
                        }
                    }
                }
            }
        }

        // dL/dz(t): direct terms, reset, and every synapse it feeds
        g_z.copy_from_slice(&dl_dz[t * n..(t + 1) * n]);
        if !opts.detach_reset {
            for (g, &gv) in g_z.iter_mut().zip(&g_v_next) {
                *g -= consts.v_th * gv;
            }
        }
        match uniform {
            Some(d) => {
                let s = (t + d) % depth;
                let ahead = &g_current[s * n..(s + 1) * n];
                for j in 0..n {
                    let c = ahead[j];
                    if c != 0.0 {
                        for (g, &wji) in g_z.iter_mut().zip(&w[j * n..(j + 1) * n]) {
                            *g += wji * c;
                        }
                    }
                }
            }
            None => {
                let mut ahead = [0.0f64; 256];
                for j in 0..n {
                    let mut any = false;
                    for (d, a) in ahead.iter_mut().enumerate().take(depth) {
                        *a = g_current[((t + d) % depth) * n + j];
                        any |= *a != 0.0;
                    }
                    if any {
                        let row = &w[j * n..(j + 1) * n];
                        let drow = &delays[j * n..(j + 1) * n];
                        for i in 0..n {
                            g_z[i] += row[i] * ahead[drow[i] as usize];
                        }
                    }
                }
            }
        }

        // dL/dV(t)
        let v_norm = tape.v_norm(t);
        let mask = tape.mask(t);
        let mut finite = true;
        for j in 0..n {
            let psi = if mask[j] {
                surrogate_derivative(v_norm[j], consts.gamma) * inv_th
            } else {
                0.0
            };
            let g = consts.rho * g_v_next[j] + psi * g_z[j];
            finite &= g.is_finite();
            g_v_next[j] = g;
        }
        if !finite {
            return Err(Error::Divergence {
                step: t,
                what: "non-finite gradient".into(),
            });
        }
        // Slot t + max_delay is no longer needed after this step; it is
        // overwritten next iteration as slot t - 1.
    }

    let mut w_rec = Array2::from_shape_vec((n, n), g_rec_t)
        .expect("shape")
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    for j in 0..n {
        w_rec[[j, j]] = 0.0;
    }
    let w_in = Array2::from_shape_vec((n_in, n), g_in_t)
        .expect("shape")
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    Ok(ReservoirGrads { w_in, w_rec })
}

/// Rescales `grads` to `max_norm` when its L2 norm exceeds it. Returns the
/// norm before clipping.
pub fn clip_by_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub amsgrad: bool,
    /// Decoupled decay: `p -= lr * weight_decay * p` each step.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            amsgrad: false,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Running max of `v`; empty unless `amsgrad`.
    pub v_max: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        let zeros = |on: bool| {
            sizes
                .iter()
                .map(|&s| if on { vec![0.0; s] } else { Vec::new() })
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(true),
            v: zeros(true),
            v_max: zeros(config.amsgrad),
        }
    }

    pub fn for_params(config: AdamConfig, params: &ReservoirParams) -> Self {
        Self::new(
            config,
            &[params.w_in.len(), params.w_rec.len(), params.w_out.len()],
        )
    }

    /// One bias-corrected update of every tensor in `params`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        ensure_dim("adam tensors", self.m.len(), params.len())?;
        ensure_dim("adam gradients", self.m.len(), grads.len())?;
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure_dim("adam tensor size", self.m[k].len(), p.len())?;
            ensure_dim("adam gradient size", self.m[k].len(), g.len())?;
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let second = if c.amsgrad {
                    let vm = &mut self.v_max[k][i];
                    *vm = vm.max(v[i]);
                    *vm
                } else {
                    v[i]
                };
                let m_hat = m[i] / bc1;
                let v_hat = second / bc2;
                p[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every meta-trained tensor and re-zeros the
/// recurrent diagonal.
pub fn adam_step(state: &mut AdamState, params: &mut ReservoirParams, grads: &Gradients) -> Result<()> {
    {
        let [gi, gr, go] = grads.slices();
        let mut tensors = [
            params.w_in.as_slice_mut().expect("standard layout"),
            params.w_rec.as_slice_mut().expect("standard layout"),
            params.w_out.as_slice_mut().expect("standard layout"),
        ];
        state.update(&mut tensors, &[gi, gr, go])?;
    }
    for j in 0..params.n_neurons() {
        params.w_rec[[j, j]] = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_derivative(0.0, 0.4), 0.4);
        assert!((surrogate_derivative(0.5, 0.3) - 0.15).abs() < 1e-15);
        for v in [1.0, -1.0, 1.5, -7.0] {
            assert_eq!(surrogate_derivative(v, 0.9), 0.0);
        }
    }

    fn grads_filled(value: f64) -> Gradients {
        Gradients {
            w_in: Array2::from_elem((2, 2), value),
            w_rec: Array2::from_elem((2, 2), value),
            w_out: Array2::from_elem((2, 4), value),
        }
    }

    #[test]
    fn clipping_halves_at_twice_the_limit() {
        // 16 entries of 500 -> norm 2000
        let mut g = grads_filled(500.0);
        let before = clip_by_global_norm(&mut g, 1000.0);
        assert!((before - 2000.0).abs() < 1e-9);
        assert!(g.iter().all(|&x| (x - 250.0).abs() < 1e-9));
    }

    #[test]
    fn clipping_below_limit_and_zero_are_noops() {
        let mut g = grads_filled(1.25); // norm 5
        let orig = g.clone();
        clip_by_global_norm(&mut g, 1000.0);
        assert_eq!(g, orig);
        let mut z = grads_filled(0.0);
        clip_by_global_norm(&mut z, 1000.0);
        assert!(z.iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent_and_never_grows(vals in proptest::collection::vec(-1e4f64..1e4, 16), max in 1e-3f64..1e4) {
            let mut g = grads_filled(0.0);
            for (dst, v) in g.w_in.iter_mut().chain(g.w_rec.iter_mut()).chain(g.w_out.iter_mut()).zip(&vals) {
                *dst = *v;
            }
            let n0 = g.norm();
            clip_by_global_norm(&mut g, max);
            let once = g.clone();
            prop_assert!(g.norm() <= n0 * (1.0 + 1e-12));
            prop_assert!(g.norm() <= max * (1.0 + 1e-12));
            clip_by_global_norm(&mut g, max);
            for (a, b) in g.iter().zip(once.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![0.5, -1.0, 2.0];
        st.update(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut st = AdamState::new(AdamConfig::default(), &[1]);
        let mut p = vec![0.0];
        st.update(&mut [&mut p], &[&[1.0]]).unwrap();
        // m_hat = v_hat = 1 after bias correction
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn amsgrad_max_is_monotone() {
        let cfg = AdamConfig {
            amsgrad: true,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &[2]);
        let mut p = vec![0.0, 0.0];
        let mut prev = vec![0.0, 0.0];
        for k in 0..50 {
            let g = if k < 10 { [5.0, -1.0] } else { [0.1, 0.01] };
            st.update(&mut [&mut p], &[&g]).unwrap();
            for i in 0..2 {
                assert!(st.v_max[0][i] >= prev[i]);
                assert!(st.v_max[0][i] >= st.v[0][i]);
            }
            prev = st.v_max[0].clone();
        }
        assert_eq!(st.step, 50);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut st = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(st.update(&mut [&mut p], &[&[0.0; 3]]).is_err());
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &[1]);
        let mut p = vec![2.0];
        st.update(&mut [&mut p], &[&[0.0]]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    mod finite_difference {
        use super::super::*;
        use crate::rng::{stream_rng, Stream};
        use crate::snn::{DelayInit, InitSpec, Simulator};
        use rand::Rng as _;

        fn consts() -> NeuronConstants {
            NeuronConstants::new(1.0, 20.0, 0.2, 2.0, 0.3, 20.0).unwrap()
        }

        fn setup(delays: DelayInit, seed: u64) -> (ReservoirParams, Vec<Vec<f64>>, Vec<f64>) {
            let spec = InitSpec {
                n_neurons: 8,
                n_inputs: 3,
                n_outputs: 1,
                feature_dim: 8,
                w_in_std: 1.5,
                w_rec_std: 0.6,
                delays,
            };
            let mut rng = stream_rng(seed, Stream::Init, 0);
            let p = ReservoirParams::initialize(&spec, &mut rng).unwrap();
            let inputs = (0..40)
                .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let coef = (0..40 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            (p, inputs, coef)
        }

        /// Linear functional of the smooth spike trajectory.
        fn run(p: &ReservoirParams, inputs: &[Vec<f64>], coef: &[f64]) -> (f64, Tape) {
            let c = consts();
            let mut sim = Simulator::new(p, &c).unwrap().with_spike_fn(SpikeFn::Smooth);
            let mut state = sim.initial_state();
            let mut tape = Tape::begin(&state, p.n_inputs(), p.max_delay(), SpikeFn::Smooth);
            for x in inputs {
                let tr = sim.step(&mut state, x).unwrap();
                tape.push(tr, x);
            }
            let loss = tape.z_all().iter().zip(coef).map(|(z, a)| z * a).sum();
            (loss, tape)
        }

        fn check(delays: DelayInit, seed: u64, detach_reset: bool) {
            let (p, inputs, coef) = setup(delays, seed);
            let (_, tape) = run(&p, &inputs, &coef);
            assert!(tape.crossed().iter().any(|&c| c), "no spikes, check is vacuous");
            let g = backward(&tape, &p, &consts(), &BackwardOptions { detach_reset }, &coef).unwrap();
            let eps = 1e-6;
            let mut checked = 0;
            for which in 0..2 {
                let shape = if which == 0 { p.w_in.dim() } else { p.w_rec.dim() };
                for r in 0..shape.0 {
                    for col in 0..shape.1 {
                        if which == 1 && r == col {
                            assert_eq!(g.w_rec[[r, col]], 0.0);
                            continue;
                        }
                        let eval = |delta: f64| {
                            let mut q = p.clone();
                            let m = if which == 0 { &mut q.w_in } else { &mut q.w_rec };
                            m[[r, col]] += delta;
                            run(&q, &inputs, &coef)
                        };
                        let (lp, tp) = eval(eps);
                        let (lm, tm) = eval(-eps);
                        if tp.crossed() != tape.crossed() || tm.crossed() != tape.crossed() {
                            continue;
                        }
                        let fd = (lp - lm) / (2.0 * eps);
                        let an = if which == 0 { g.w_in[[r, col]] } else { g.w_rec[[r, col]] };
                        if detach_reset {
                            // Detaching is a deliberate bias; only sanity-check finiteness.
                            assert!(an.is_finite());
                        } else {
                            let scale = fd.abs().max(an.abs()).max(1e-3);
                            assert!((fd - an).abs() <= 1e-4 * scale, "{which} [{r},{col}]: fd {fd} vs {an}");
                        }
                        checked += 1;
                    }
                }
            }
            assert!(checked > 40, "only {checked} coordinates checked");
        }

        #[test]
        fn uniform_delay_gradients_match_finite_differences() {
            check(DelayInit::Uniform { steps: 2 }, 3, false);
        }

        #[test]
        fn spread_delay_gradients_match_finite_differences() {
            check(DelayInit::Spread { max_steps: 3 }, 4, false);
        }

        #[test]
        fn zero_delay_gradients_match_finite_differences() {
            check(DelayInit::Uniform { steps: 0 }, 5, false);
        }

        #[test]
        fn detached_reset_runs() {
            check(DelayInit::Uniform { steps: 2 }, 3, true);
        }

        #[test]
        fn tape_replays_and_counts_horizon() {
            let (p, inputs, coef) = setup(DelayInit::Spread { max_steps: 3 }, 6);
            let (_, tape) = run(&p, &inputs, &coef);
            assert_eq!(tape.horizon(), inputs.len());
            assert!(tape.replay_matches(&consts()));
        }

        #[test]
        fn short_dl_dz_is_rejected() {
            let (p, inputs, coef) = setup(DelayInit::Uniform { steps: 1 }, 7);
            let (_, tape) = run(&p, &inputs, &coef);
            assert!(backward(&tape, &p, &consts(), &BackwardOptions::default(), &coef[1..]).is_err());
        }
    }
}
