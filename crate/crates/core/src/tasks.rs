//! Task families: second-order Volterra filters over a two-sine input,
//! random 2-10-1 target networks, and sines of random amplitude and phase.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Discretization of the Volterra family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolterraConfig {
    /// Number of 1-step lags kept in both kernels.
    pub kernel_len: usize,
    /// Kernel bin width in seconds.
    pub dt_s: f64,
    /// Unit (seconds) in which lags enter the quadratic form of `k2`.
    pub k2_time_unit_s: f64,
    /// Total mass of `k2` after normalization.
    pub k2_scale: f64,
    /// Periods of the two input sines, seconds.
    pub periods_s: [f64; 2],
}

impl Default for VolterraConfig {
    fn default() -> Self {
        Self {
            kernel_len: 500,
            dt_s: 0.001,
            k2_time_unit_s: 0.01,
            k2_scale: 14.0,
            periods_s: [0.323, 0.5],
        }
    }
}

impl VolterraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_len == 0 {
            return Err(Error::Config("volterra.kernel_len must be >= 1".into()));
        }
        if !(self.dt_s > 0.0 && self.k2_time_unit_s > 0.0 && self.k2_scale.is_finite()) {
            return Err(Error::Config("volterra time units must be positive".into()));
        }
        if !self.periods_s.iter().all(|&p| p > 0.0) {
            return Err(Error::Config("volterra periods must be positive".into()));
        }
        Ok(())
    }
}

/// The random draws that define one Volterra task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolterraParams {
    /// Exponential-filter weights, `U[-1, 1]`.
    pub a: [f64; 2],
    /// Exponential-filter time constants in seconds, `U[0.1, 0.3]`.
    pub b: [f64; 2],
    pub u: f64,
    pub v: f64,
    /// Input sine amplitudes, `U[0.5, 1]`.
    pub amplitudes: [f64; 2],
    /// Input sine phases, `U[0, pi/2]`.
    pub phases: [f64; 2],
}

/// `[[s + u, v], [v, s - u]]` with `s = sqrt(1 + u^2 + v^2)`; unit determinant.
pub fn sigma_matrix(u: f64, v: f64) -> [[f64; 2]; 2] {
    let s = (1.0 + u * u + v * v).sqrt();
    [[s + u, v], [v, s - u]]
}

/// Closed-form inverse of [`sigma_matrix`] (its determinant is one).
pub fn sigma_inverse(u: f64, v: f64) -> [[f64; 2]; 2] {
    let s = (1.0 + u * u + v * v).sqrt();
    [[s - u, -v], [-v, s + u]]
}

/// One Volterra task: kernels plus the input signal parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VolterraTask {
    pub params: VolterraParams,
    pub config: VolterraConfig,
    pub k1: Vec<f64>,
    /// `kernel_len x kernel_len`. Not symmetric under `t1 <-> t2` unless
    /// `u = 0`; the filter only sees its symmetric part.
    pub k2: Array2<f64>,
}

fn l1(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(f64::abs).sum()
}

impl VolterraTask {
    /// Builds both kernels from the task parameters. Fails when the first
    /// order kernel has (numerically) no mass.
    pub fn from_params(params: VolterraParams, config: VolterraConfig) -> Result<Self> {
        config.validate()?;
        let len = config.kernel_len;
        let raw1: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 * config.dt_s;
                (0..2).map(|n| params.a[n] * (-t / params.b[n]).exp()).sum()
            })
            .collect();
        let norm1 = l1(raw1.iter().copied());
        if !(norm1 >= 1e-6) {
            return Err(Error::Contract(format!("first-order kernel mass {norm1} too small")));
        }
        let k1 = raw1.iter().map(|k| k / norm1).collect();

        let inv = sigma_inverse(params.u, params.v);
        let unit = config.dt_s / config.k2_time_unit_s;
        let mut k2 = Array2::from_shape_fn((len, len), |(i, j)| {
            let t1 = i as f64 * unit;
            let t2 = j as f64 * unit;
            let q = inv[0][0] * t1 * t1 + 2.0 * inv[0][1] * t1 * t2 + inv[1][1] * t2 * t2;
            (-q / 24.0).exp()
        });
        let norm2 = l1(k2.iter().copied());
        k2 *= config.k2_scale / norm2;
        Ok(Self {
            params,
            config,
            k1,
            k2,
        })
    }

    /// Input signal `sum_n A_n sin(2 pi t / T_n + phi_n)` at `t = k dt`.
    pub fn gen_input(&self, n_steps: usize) -> Vec<f64> {
        let p = &self.params;
        let c = &self.config;
        (0..n_steps)
            .map(|k| {
                let t = k as f64 * c.dt_s;
                (0..2)
                    .map(|n| p.amplitudes[n] * (2.0 * PI * t / c.periods_s[n] + p.phases[n]).sin())
                    .sum()
            })
            .collect()
    }

    /// Discrete second-order Volterra filter of `x` (zero before `t = 0`).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        apply_volterra(&self.k1, &self.k2, x)
    }
}

/// `y(t) = sum_a k1[a] x(t-a) + sum_{a,b} k2[a,b] x(t-a) x(t-b)`.
pub fn apply_volterra(k1: &[f64], k2: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    let len = k1.len();
    assert_eq!(k2.dim(), (len, len), "kernel shapes disagree");
    let k2 = k2.as_standard_layout();
    let k2 = k2.as_slice().expect("standard layout");
    let mut lagged = vec![0.0; len];
    let mut y = Vec::with_capacity(x.len());
    for t in 0..x.len() {
        let avail = len.min(t + 1);
        for (a, l) in lagged.iter_mut().enumerate().take(avail) {
            *l = x[t - a];
        }
        let w = &lagged[..avail];
        let first: f64 = k1[..avail].iter().zip(w).map(|(k, x)| k * x).sum();
        let mut second = 0.0;
        for (a, &xa) in w.iter().enumerate() {
            if xa != 0.0 {
                let row = &k2[a * len..a * len + avail];
                let inner: f64 = row.iter().zip(w).map(|(k, x)| k * x).sum();
                second += xa * inner;
            }
        }
        y.push(first + second);
    }
    y
}

/// Draws task parameters, resampling the first-order weights when the
/// resulting kernel would have no mass.
pub fn sample_volterra(rng: &mut Rng, config: &VolterraConfig) -> Result<VolterraTask> {
    let b = [rng.random_range(0.1..=0.3), rng.random_range(0.1..=0.3)];
    let u = rng.random_range(-12.0..=12.0);
    let v = rng.random_range(-12.0..=12.0);
    let amplitudes = [rng.random_range(0.5..=1.0), rng.random_range(0.5..=1.0)];
    let phases = [rng.random_range(0.0..=PI / 2.0), rng.random_range(0.0..=PI / 2.0)];
    loop {
        let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let params = VolterraParams {
            a,
            b,
            u,
            v,
            amplitudes,
            phases,
        };
        match VolterraTask::from_params(params, *config) {
            Err(Error::Contract(_)) => continue,
            other => return other,
        }
    }
}

/// Output unit of a target network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputUnit {
    #[default]
    Logistic,
    Linear,
}

/// A 2-10-1 network of logistic units with 40 parameters in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetNetwork {
    /// `10 x 2`, row-major.
    pub w_hidden: [[f64; 2]; 10],
    pub b_hidden: [f64; 10],
    pub w_out: [f64; 10],
    #[serde(default)]
    pub output: OutputUnit,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TargetNetwork {
    pub fn n_params(&self) -> usize {
        self.w_hidden.len() * 2 + self.b_hidden.len() + self.w_out.len()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_hidden
            .iter()
            .flatten()
            .chain(&self.b_hidden)
            .chain(&self.w_out)
            .copied()
    }

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let pre: f64 = (0..10)
            .map(|k| {
                let h = logistic(self.w_hidden[k][0] * x1 + self.w_hidden[k][1] * x2 + self.b_hidden[k]);
                self.w_out[k] * h
            })
            .sum();
        match self.output {
            OutputUnit::Logistic => logistic(pre),
            OutputUnit::Linear => pre,
        }
    }
}

pub fn sample_target_network(rng: &mut Rng, output: OutputUnit) -> TargetNetwork {
    let mut u = || rng.random_range(-1.0..=1.0);
    let mut w_hidden = [[0.0; 2]; 10];
    for row in &mut w_hidden {
        *row = [u(), u()];
    }
    let b_hidden = std::array::from_fn(|_| u());
    let w_out = std::array::from_fn(|_| u());
    TargetNetwork {
        w_hidden,
        b_hidden,
        w_out,
        output,
    }
}

/// `y = A sin(x + phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
}

pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 5.0);

impl SineTask {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }

    /// `n` inputs spread over `[-half_width, half_width]` around a zero
    /// crossing of the sine, where its examples are nearly colinear.
    pub fn colinear_inputs(&self, n: usize, half_width: f64) -> Vec<f64> {
        // x + phase = pi lands inside [-5, 5] for every phase in [0, 2 pi)
        let center = PI - self.phase;
        (0..n)
            .map(|k| {
                let f = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
                center - half_width + 2.0 * half_width * f
            })
            .collect()
    }
}

pub fn sample_sine(rng: &mut Rng) -> SineTask {
    SineTask {
        amplitude: rng.random_range(SINE_AMPLITUDE.0..=SINE_AMPLITUDE.1),
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

/// Regression families used with the delayed-target protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionFamily {
    TargetNetwork,
    Sine,
}

/// One sampled regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum RegressionTask {
    TargetNetwork(TargetNetwork),
    Sine(SineTask),
}

impl RegressionFamily {
    pub fn input_dim(self) -> usize {
        match self {
            RegressionFamily::TargetNetwork => 2,
            RegressionFamily::Sine => 1,
        }
    }

    /// Domain of every input coordinate.
    pub fn input_range(self) -> (f64, f64) {
        match self {
            RegressionFamily::TargetNetwork => (-1.0, 1.0),
            RegressionFamily::Sine => (-5.0, 5.0),
        }
    }

    /// Range that contains every target of the family.
    pub fn target_range(self, output: OutputUnit) -> (f64, f64) {
        match (self, output) {
            (RegressionFamily::TargetNetwork, OutputUnit::Logistic) => (0.0, 1.0),
            (RegressionFamily::TargetNetwork, OutputUnit::Linear) => (-10.0, 10.0),
            (RegressionFamily::Sine, _) => (-SINE_AMPLITUDE.1, SINE_AMPLITUDE.1),
        }
    }

    pub fn sample(self, rng: &mut Rng, output: OutputUnit) -> RegressionTask {
        match self {
            RegressionFamily::TargetNetwork => {
                RegressionTask::TargetNetwork(sample_target_network(rng, output))
            }
            RegressionFamily::Sine => RegressionTask::Sine(sample_sine(rng)),
        }
    }
}

impl RegressionTask {
    pub fn family(&self) -> RegressionFamily {
        match self {
            RegressionTask::TargetNetwork(_) => RegressionFamily::TargetNetwork,
            RegressionTask::Sine(_) => RegressionFamily::Sine,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            RegressionTask::TargetNetwork(tn) => tn.eval(x[0], x[1]),
            RegressionTask::Sine(s) => s.eval(x[0]),
        }
    }

    /// Uniform input from the family's domain.
    pub fn sample_input(&self, rng: &mut Rng) -> Vec<f64> {
        let (lo, hi) = self.family().input_range();
        (0..self.family().input_dim())
            .map(|_| rng.random_range(lo..=hi))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn params(u: f64, v: f64) -> VolterraParams {
        VolterraParams {
            a: [0.7, -0.2],
            b: [0.15, 0.25],
            u,
            v,
            amplitudes: [1.0, 1.0],
            phases: [0.0, 0.0],
        }
    }

    #[test]
    fn input_starts_at_zero_for_zero_phase() {
        let task = VolterraTask::from_params(params(0.0, 0.0), VolterraConfig::default()).unwrap();
        let x = task.gen_input(2000);
        assert_eq!(x[0], 0.0);
        assert!(x.iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn isotropic_bell_at_zero_u_v() {
        assert_eq!(sigma_matrix(0.0, 0.0), [[1.0, 0.0], [0.0, 1.0]]);
        let cfg = VolterraConfig {
            kernel_len: 30,
            ..VolterraConfig::default()
        };
        let task = VolterraTask::from_params(params(0.0, 0.0), cfg).unwrap();
        let raw = |i: usize, j: usize| {
            let (a, b) = (i as f64 * 0.1, j as f64 * 0.1);
            (-(a * a + b * b) / 24.0).exp()
        };
        let total: f64 = (0..30).flat_map(|i| (0..30).map(move |j| raw(i, j))).sum();
        for (i, j) in [(0, 0), (3, 17), (29, 29)] {
            assert!((task.k2[[i, j]] - 14.0 * raw(i, j) / total).abs() < 1e-14);
        }
    }

    #[test]
    fn sampled_kernels_are_normalized() {
        let cfg = VolterraConfig {
            kernel_len: 80,
            ..VolterraConfig::default()
        };
        for k in 0..50 {
            let task = sample_volterra(&mut stream_rng(1, Stream::TrainTask, k), &cfg).unwrap();
            let n1: f64 = task.k1.iter().map(|x| x.abs()).sum();
            let n2: f64 = task.k2.iter().map(|x| x.abs()).sum();
            assert!((n1 - 1.0).abs() < 1e-12);
            assert!((n2 - 14.0).abs() < 1e-10);
        }
    }

    #[test]
    fn massless_first_order_kernel_is_rejected() {
        let mut p = params(1.0, 1.0);
        p.a = [0.0, 0.0];
        assert!(VolterraTask::from_params(p, VolterraConfig::default()).is_err());
    }

    #[test]
    fn identity_filter_and_zero_input() {
        let mut k1 = vec![0.0; 10];
        k1[0] = 1.0;
        let k2 = Array2::zeros((10, 10));
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).cos()).collect();
        assert_eq!(apply_volterra(&k1, &k2, &x), x);
        let task = sample_volterra(&mut stream_rng(2, Stream::TrainTask, 0), &VolterraConfig::default()).unwrap();
        assert!(task.apply(&[0.0; 50]).iter().all(|&y| y == 0.0));
    }

    #[test]
    fn second_order_term_is_quadratic_in_input() {
        let cfg = VolterraConfig {
            kernel_len: 40,
            ..VolterraConfig::default()
        };
        let task = sample_volterra(&mut stream_rng(3, Stream::TrainTask, 0), &cfg).unwrap();
        let k1 = vec![0.0; 40];
        let x = task.gen_input(120);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y = apply_volterra(&k1, &task.k2, &x);
        let y2 = apply_volterra(&k1, &task.k2, &x2);
        for (a, b) in y.iter().zip(&y2) {
            assert!((4.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn first_order_term_is_linear_in_kernel() {
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.17).sin()).collect();
        let zero = Array2::zeros((20, 20));
        let ka: Vec<f64> = (0..20).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let kb: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
        let sum: Vec<f64> = ka.iter().zip(&kb).map(|(a, b)| 2.0 * a + b).collect();
        let ya = apply_volterra(&ka, &zero, &x);
        let yb = apply_volterra(&kb, &zero, &x);
        let ys = apply_volterra(&sum, &zero, &x);
        for t in 0..x.len() {
            assert!((2.0 * ya[t] + yb[t] - ys[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_ranges_hold() {
        let mut rng = stream_rng(4, Stream::TrainTask, 0);
        for _ in 0..100_000 {
            let tn = sample_target_network(&mut rng, OutputUnit::Logistic);
            assert_eq!(tn.n_params(), 40);
            assert!(tn.params().all(|p| (-1.0..=1.0).contains(&p)));
            let s = sample_sine(&mut rng);
            assert!((0.1..=5.0).contains(&s.amplitude));
            assert!((0.0..2.0 * PI).contains(&s.phase));
        }
        let cfg = VolterraConfig {
            kernel_len: 1,
            ..VolterraConfig::default()
        };
        for _ in 0..2000 {
            let p = sample_volterra(&mut rng, &cfg).unwrap().params;
            assert!(p.a.iter().all(|a| (-1.0..=1.0).contains(a)));
            assert!(p.b.iter().all(|b| (0.1..=0.3).contains(b)));
            assert!((-12.0..=12.0).contains(&p.u) && (-12.0..=12.0).contains(&p.v));
            assert!(p.amplitudes.iter().all(|a| (0.5..=1.0).contains(a)));
            assert!(p.phases.iter().all(|f| (0.0..=PI / 2.0).contains(f)));
        }
    }

    #[test]
    fn target_network_edge_cases() {
        let zero = TargetNetwork {
            w_hidden: [[0.0; 2]; 10],
            b_hidden: [0.0; 10],
            w_out: [0.0; 10],
            output: OutputUnit::Logistic,
        };
        assert_eq!(zero.eval(0.3, -0.7), 0.5);
        let mut rng = stream_rng(5, Stream::TrainTask, 0);
        for _ in 0..1000 {
            let tn = sample_target_network(&mut rng, OutputUnit::Logistic);
            let y = tn.eval(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            assert!((0.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn sine_basics_and_colinear_inputs() {
        let s = SineTask {
            amplitude: 1.0,
            phase: 0.0,
        };
        assert_eq!(s.eval(0.0), 0.0);
        let mut rng = stream_rng(6, Stream::TrainTask, 0);
        for _ in 0..200 {
            let s = sample_sine(&mut rng);
            let xs = s.colinear_inputs(5, 0.1);
            assert!(xs.iter().all(|x| (-5.0..=5.0).contains(x)));
            // the examples come from a family member by construction and
            // deviate from their chord by a few percent of the amplitude
            let (x0, x1) = (xs[0], xs[4]);
            let (y0, y1) = (s.eval(x0), s.eval(x1));
            for &x in &xs {
                let chord = y0 + (y1 - y0) * (x - x0) / (x1 - x0);
                assert!((s.eval(x) - chord).abs() <= 1e-3 * s.amplitude);
                assert!(s.eval(x).abs() <= s.amplitude);
            }
        }
    }

    #[test]
    fn task_json_regenerates_kernels() {
        let cfg = VolterraConfig {
            kernel_len: 25,
            ..VolterraConfig::default()
        };
        let task = sample_volterra(&mut stream_rng(7, Stream::TrainTask, 0), &cfg).unwrap();
        let json = serde_json::to_string(&task.params).unwrap();
        let back: VolterraParams = serde_json::from_str(&json).unwrap();
        assert_eq!(VolterraTask::from_params(back, cfg).unwrap(), task);
        let tn = RegressionFamily::TargetNetwork.sample(&mut stream_rng(7, Stream::TrainTask, 1), OutputUnit::Logistic);
        let json = serde_json::to_string(&tn).unwrap();
        assert_eq!(serde_json::from_str::<RegressionTask>(&json).unwrap(), tn);
    }
}
