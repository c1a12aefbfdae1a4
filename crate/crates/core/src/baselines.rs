//! Comparison systems: a ridge readout fitted on the reservoir's mean
//! traces, the untrained reservoir, and a small feed-forward network
//! trained online by backpropagation on the same example stream.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bptt::{AdamConfig, AdamState};
use crate::config::{ExperimentConfig, TaskFamily};
use crate::error::{ensure_dim, Error, Result};
use crate::inner_loop::EpisodeExamples;
use crate::outer_loop::{eval_episode, evaluate, initial_params, EvalSummary};
use crate::parallel::Executor;
use crate::record::EpisodeRecord;
use crate::rng::{stream_rng, Rng, Stream};
use crate::snn::ReservoirParams;
use crate::tasks::{logistic, OutputUnit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub l2_factor: f64,
    /// Leading share of the episode used for fitting; the rest is test data.
    pub train_fraction: f64,
    pub intercept: bool,
    /// Z-score features with training statistics before fitting.
    pub standardize: bool,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            l2_factor: 100.0,
            train_fraction: 0.8,
            intercept: false,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub weights: Vec<f64>,
    pub train_mse: f64,
    pub test_mse: f64,
    pub n_train: usize,
}

/// Solves `(X^T X + lambda I) w = X^T y` by Cholesky factorization.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    ensure_dim("ridge rows", x.nrows(), y.len())?;
    if !(lambda >= 0.0) {
        return Err(Error::Config("l2 factor must be >= 0".into()));
    }
    let mut gram = x.transpose() * x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = x.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Contract("ridge system is not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

/// `|(X^T X + lambda I) w - X^T y| / |X^T y|`.
pub fn normal_equation_residual(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, w: &DVector<f64>) -> f64 {
    let rhs = x.transpose() * y;
    let lhs = x.transpose() * (x * w) + w * lambda;
    (lhs - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE)
}

/// Fits a linear readout of the per-step mean traces on the first part of
/// the episode and tests it on the rest. Uses the first output.
pub fn ridge_fit_eval(record: &EpisodeRecord, config: &RidgeConfig) -> Result<RidgeFit> {
    let traces = record
        .mean_traces
        .as_ref()
        .ok_or_else(|| Error::Contract("record has no mean traces".into()))?;
    let steps = traces.len();
    let n_train = (steps as f64 * config.train_fraction).round() as usize;
    if n_train == 0 || n_train >= steps {
        return Err(Error::Config(format!(
            "train fraction {} leaves no train or test steps out of {steps}",
            config.train_fraction
        )));
    }
    let n = record.n_neurons;
    let cols = n + usize::from(config.intercept);
    let mut mean = vec![0.0; n];
    let mut scale = vec![1.0; n];
    if config.standardize {
        for row in &traces[..n_train] {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += f64::from(v) / n_train as f64;
            }
        }
        for (j, s) in scale.iter_mut().enumerate() {
            let var = traces[..n_train].iter().map(|r| (f64::from(r[j]) - mean[j]).powi(2)).sum::<f64>() / n_train as f64;
            *s = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
    }
    let features = DMatrix::from_fn(steps, cols, |t, j| {
        if j < n {
            (f64::from(traces[t][j]) - mean[j]) / scale[j]
        } else {
            1.0
        }
    });
    let y = DVector::from_fn(steps, |t, _| record.targets[t][0]);
    let x_train = features.rows(0, n_train).into_owned();
    let y_train = y.rows(0, n_train).into_owned();
    let w = ridge_solve(&x_train, &y_train, config.l2_factor)?;
    let pred = &features * &w;
    let mse = |r: std::ops::Range<usize>| {
        let len = r.len() as f64;
        r.map(|t| (pred[t] - y[t]).powi(2)).sum::<f64>() / len
    };
    Ok(RidgeFit {
        weights: w.iter().copied().collect(),
        train_mse: mse(0..n_train),
        test_mse: mse(n_train..steps),
        n_train,
    })
}

/// Ridge readouts fitted to the held-out episodes of `params`.
pub fn ridge_baseline(
    params: &ReservoirParams,
    cfg: &ExperimentConfig,
    n_tasks: usize,
    ridge: &RidgeConfig,
    executor: &Executor,
) -> Result<EvalSummary> {
    if cfg.task.family == TaskFamily::Volterra {
        return Err(Error::Config("the ridge baseline needs a regression family".into()));
    }
    let fits = executor.try_map(n_tasks, |i| {
        let (rec, _) = eval_episode(params, cfg, i)?;
        ridge_fit_eval(&rec, ridge)
    })?;
    Ok(summary(fits.iter().map(|f| vec![f.test_mse]).collect()))
}

/// The same evaluation as for trained parameters, on the untrained
/// initialization and with the same held-out tasks and input spikes.
pub fn random_reservoir_eval(cfg: &ExperimentConfig, n_tasks: usize, executor: &Executor) -> Result<EvalSummary> {
    evaluate(&initial_params(cfg)?, cfg, n_tasks, executor)
}

fn summary(curves: Vec<Vec<f64>>) -> EvalSummary {
    let n = curves.len();
    if n == 0 {
        return EvalSummary {
            n_tasks: 0,
            mean_mse: None,
            std_mse: None,
            task_mse: Vec::new(),
            curve_mean: Vec::new(),
            curve_std: Vec::new(),
            mean_rate_hz: None,
        };
    }
    let ms = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        (m, v.sqrt())
    };
    let task_mse: Vec<f64> = curves.iter().map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64).collect();
    let (mean, std) = ms(&task_mse);
    let (curve_mean, curve_std) = (0..curves[0].len())
        .map(|k| ms(&curves.iter().map(|c| c[k]).collect::<Vec<_>>()))
        .unzip();
    EvalSummary {
        n_tasks: n,
        mean_mse: Some(mean),
        std_mse: Some(std),
        task_mse,
        curve_mean,
        curve_std,
        mean_rate_hz: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackpropConfig {
    pub hidden: usize,
    pub adam: AdamConfig,
}

impl Default for BackpropConfig {
    fn default() -> Self {
        Self {
            hidden: 10,
            adam: AdamConfig {
                lr: 0.1,
                beta1: 0.7,
                beta2: 0.9,
                epsilon: 1e-8,
                amsgrad: true,
                weight_decay: 1e-5,
            },
        }
    }
}

/// One-hidden-layer network of logistic units.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub n_in: usize,
    pub hidden: usize,
    pub output: OutputUnit,
    /// `[w1 (hidden x n_in), b1 (hidden), w2 (hidden), b2]`.
    pub params: Vec<f64>,
}

impl Mlp {
    /// Glorot-normal weights, zero biases.
    pub fn new(n_in: usize, hidden: usize, output: OutputUnit, rng: &mut Rng) -> Self {
        let n1 = Normal::new(0.0, (2.0 / (n_in + hidden) as f64).sqrt()).expect("finite std");
        let n2 = Normal::new(0.0, (2.0 / (hidden + 1) as f64).sqrt()).expect("finite std");
        let mut params = Vec::with_capacity(hidden * (n_in + 2) + 1);
        params.extend((0..hidden * n_in).map(|_| n1.sample(rng)));
        params.extend(std::iter::repeat_n(0.0, hidden));
        params.extend((0..hidden).map(|_| n2.sample(rng)));
        params.push(0.0);
        Self {
            n_in,
            hidden,
            output,
            params,
        }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (h, d) = (self.hidden, self.n_in);
        let p = &self.params;
        (&p[..h * d], &p[h * d..h * d + h], &p[h * d + h..h * d + 2 * h], p[h * d + 2 * h])
    }

    fn hidden_acts(&self, x: &[f64]) -> Vec<f64> {
        let (w1, b1, _, _) = self.split();
        (0..self.hidden)
            .map(|k| logistic(b1[k] + w1[k * self.n_in..(k + 1) * self.n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()))
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let (_, _, w2, b2) = self.split();
        let pre = b2 + self.hidden_acts(x).iter().zip(w2).map(|(a, w)| a * w).sum::<f64>();
        match self.output {
            OutputUnit::Logistic => logistic(pre),
            OutputUnit::Linear => pre,
        }
    }

    /// `(y_hat - y)^2` and its gradient.
    pub fn loss_and_grad(&self, x: &[f64], y: f64) -> (f64, Vec<f64>) {
        let (h, d) = (self.hidden, self.n_in);
        let (_, _, w2, b2) = self.split();
        let a = self.hidden_acts(x);
        let pre = b2 + a.iter().zip(w2).map(|(a, w)| a * w).sum::<f64>();
        let (y_hat, dout) = match self.output {
            OutputUnit::Logistic => {
                let s = logistic(pre);
                (s, s * (1.0 - s))
            }
            OutputUnit::Linear => (pre, 1.0),
        };
        let g_pre = 2.0 * (y_hat - y) * dout;
        let mut g = vec![0.0; self.params.len()];
        for k in 0..h {
            let g_hidden = g_pre * w2[k] * a[k] * (1.0 - a[k]);
            for i in 0..d {
                g[k * d + i] = g_hidden * x[i];
            }
            g[h * d + k] = g_hidden;
            g[h * d + h + k] = g_pre * a[k];
        }
        g[h * d + 2 * h] = g_pre;
        ((y_hat - y).powi(2), g)
    }
}

/// Trains `net` online, one Adam step per example, and returns the squared
/// error of each prediction made before its update.
pub fn backprop_online(net: &mut Mlp, examples: &EpisodeExamples, adam: AdamConfig) -> Vec<f64> {
    let mut state = AdamState::new(adam, &[net.params.len()]);
    examples
        .x
        .iter()
        .zip(&examples.y)
        .map(|(x, &y)| {
            let (loss, grad) = net.loss_and_grad(x, y);
            state
                .update(&mut [net.params.as_mut_slice()], &[grad.as_slice()])
                .expect("sizes fixed at construction");
            loss
        })
        .collect()
}

/// Learning curves of online backpropagation on the held-out example
/// streams that the reservoir evaluation uses.
pub fn backprop_baseline(
    cfg: &ExperimentConfig,
    n_tasks: usize,
    bp: &BackpropConfig,
    executor: &Executor,
) -> Result<EvalSummary> {
    let family = cfg
        .task
        .family
        .regression()
        .ok_or_else(|| Error::Config("the backprop baseline needs a regression family".into()))?;
    let output = match cfg.task.family {
        TaskFamily::TargetNetwork => cfg.task.tn_output,
        _ => OutputUnit::Linear,
    };
    let curves = executor.map(n_tasks, |i| {
        let mut task_rng = stream_rng(cfg.eval.seed, Stream::EvalTask, i as u64);
        let task = family.sample(&mut task_rng, cfg.task.tn_output);
        let examples = EpisodeExamples::sample(&task, cfg.protocol.steps_per_episode, &mut task_rng);
        let mut net = Mlp::new(family.input_dim(), bp.hidden, output, &mut stream_rng(cfg.eval.seed, Stream::Baseline, i as u64));
        backprop_online(&mut net, &examples, bp.adam)
    });
    Ok(summary(curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn record_from(traces: Vec<Vec<f32>>, y: Vec<f64>) -> EpisodeRecord {
        let n = traces[0].len();
        EpisodeRecord {
            n_neurons: n,
            n_outputs: 1,
            mean_traces: Some(traces),
            targets: y.into_iter().map(|v| vec![v]).collect(),
            ..EpisodeRecord::default()
        }
    }

    fn synthetic(steps: usize, n: usize) -> (Vec<Vec<f32>>, Vec<f64>) {
        let w: Vec<f64> = (0..n).map(|j| 0.3 - 0.1 * j as f64).collect();
        let traces: Vec<Vec<f32>> = (0..steps)
            .map(|t| (0..n).map(|j| ((t * (j + 2)) as f32 * 0.37).sin() + 1.0).collect())
            .collect();
        let y = traces
            .iter()
            .map(|r| r.iter().zip(&w).map(|(&a, b)| f64::from(a) * b).sum())
            .collect();
        (traces, y)
    }

    #[test]
    fn ridge_realizable_and_shrinkage_limits() {
        let (tr, y) = synthetic(50, 4);
        let rec = record_from(tr, y);
        let exact = RidgeConfig {
            l2_factor: 1e-12,
            ..RidgeConfig::default()
        };
        assert!(ridge_fit_eval(&rec, &exact).unwrap().test_mse < 1e-12);
        let huge = RidgeConfig {
            l2_factor: 1e14,
            ..RidgeConfig::default()
        };
        let fit = ridge_fit_eval(&rec, &huge).unwrap();
        assert!(fit.weights.iter().all(|w| w.abs() < 1e-10));
        assert_eq!(fit.n_train, 40);
    }

    #[test]
    fn ridge_satisfies_normal_equations() {
        let x = DMatrix::from_fn(40, 7, |i, j| ((i * 7 + j * 3) as f64 * 0.71).cos());
        let y = DVector::from_fn(40, |i, _| (i as f64 * 0.2).sin());
        for lambda in [0.1, 100.0] {
            let w = ridge_solve(&x, &y, lambda).unwrap();
            assert!(normal_equation_residual(&x, &y, lambda, &w) < 1e-8);
        }
    }

    #[test]
    fn ridge_options() {
        let (tr, y) = synthetic(30, 3);
        let shifted: Vec<f64> = y.iter().map(|v| v + 5.0).collect();
        let rec = record_from(tr, shifted);
        let cfg = RidgeConfig {
            l2_factor: 1e-9,
            intercept: true,
            standardize: true,
            ..RidgeConfig::default()
        };
        assert!(ridge_fit_eval(&rec, &cfg).unwrap().test_mse < 1e-8);
        let bad = RidgeConfig {
            train_fraction: 1.0,
            ..RidgeConfig::default()
        };
        assert!(ridge_fit_eval(&rec, &bad).is_err());
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        for output in [OutputUnit::Logistic, OutputUnit::Linear] {
            let net = Mlp::new(2, 10, output, &mut stream_rng(3, Stream::Baseline, 0));
            let mut net = net;
            for (k, p) in net.params.iter_mut().enumerate() {
                *p += 0.1 * (k as f64 * 0.9).sin();
            }
            let (x, y) = ([0.3, -0.7], 0.4);
            let (_, g) = net.loss_and_grad(&x, y);
            for k in 0..net.params.len() {
                let eps = 1e-6;
                let mut p = net.clone();
                p.params[k] += eps;
                let mut m = net.clone();
                m.params[k] -= eps;
                let fd = (p.loss_and_grad(&x, y).0 - m.loss_and_grad(&x, y).0) / (2.0 * eps);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                assert!(rel < 1e-6, "param {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn online_backprop_limits() {
        let mut rng = stream_rng(5, Stream::Baseline, 1);
        let examples = EpisodeExamples {
            x: (0..400).map(|k| vec![(k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()]).collect(),
            y: vec![0.0; 400],
        };
        let mut net = Mlp::new(2, 10, OutputUnit::Linear, &mut rng);
        let curve = backprop_online(&mut net, &examples, BackpropConfig::default().adam);
        let tail = curve[350..].iter().sum::<f64>() / 50.0;
        assert!(tail < 1e-3 && tail < curve[0] / 10.0, "{} -> {tail}", curve[0]);

        let frozen = Mlp::new(2, 10, OutputUnit::Logistic, &mut rng);
        let mut net = frozen.clone();
        let still = AdamConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..BackpropConfig::default().adam
        };
        backprop_online(&mut net, &examples, still);
        assert_eq!(net, frozen);
    }

    #[test]
    fn baselines_share_the_evaluation_stream() {
        let mut c = preset("exp2-tn-desk").unwrap();
        c.network.n_neurons = 10;
        c.encoding.units_per_channel = 5;
        c.protocol.step_len = 4;
        c.protocol.steps_per_episode = 20;
        let ex = Executor::sequential();
        let bp = backprop_baseline(&c, 3, &BackpropConfig::default(), &ex).unwrap();
        assert_eq!(bp.curve_mean.len(), 20);
        assert_eq!(bp, backprop_baseline(&c, 3, &BackpropConfig::default(), &ex).unwrap());
        let rr = random_reservoir_eval(&c, 2, &ex).unwrap();
        assert_eq!(rr, evaluate(&initial_params(&c).unwrap(), &c, 2, &ex).unwrap());
        let ridge = ridge_baseline(&initial_params(&c).unwrap(), &c, 2, &RidgeConfig::default(), &ex).unwrap();
        assert_eq!(ridge.n_tasks, 2);
        // the backprop baseline sees the examples of the reservoir evaluation
        let (rec, _) = eval_episode(&initial_params(&c).unwrap(), &c, 1).unwrap();
        let mut task_rng = stream_rng(c.eval.seed, Stream::EvalTask, 1);
        let task = c.task.family.regression().unwrap().sample(&mut task_rng, c.task.tn_output);
        let ex1 = EpisodeExamples::sample(&task, 20, &mut task_rng);
        assert_eq!(ex1.x, rec.x);
    }
}
