//! Gaussian population coding of analog values into spike trains.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Encoder settings shared by every analog channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub units_per_channel: usize,
    pub r_max_hz: f64,
    /// Multiplies the tuning width `(m_max - m_min) / 1000`.
    pub sigma_scale: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            units_per_channel: 100,
            r_max_hz: 200.0,
            sigma_scale: 1.0,
        }
    }
}

/// Units with Gaussian tuning curves centered on evenly spaced values.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCode {
    pub m: Vec<f64>,
    pub sigma: f64,
    pub r_max_hz: f64,
}

impl PopulationCode {
    pub fn new(m_min: f64, m_max: f64, config: &EncodingConfig) -> Result<Self> {
        let n = config.units_per_channel;
        if n < 2 || !(m_max > m_min) {
            return Err(Error::Config(format!(
                "population code needs >= 2 units and m_max > m_min (got {n}, [{m_min}, {m_max}])"
            )));
        }
        if !(config.sigma_scale > 0.0 && config.r_max_hz >= 0.0) {
            return Err(Error::Config("sigma_scale must be positive and r_max >= 0".into()));
        }
        let step = (m_max - m_min) / (n - 1) as f64;
        let mut m: Vec<f64> = (0..n).map(|i| m_min + step * i as f64).collect();
        m[n - 1] = m_max;
        Ok(Self {
            m,
            sigma: (m_max - m_min) / 1000.0 * config.sigma_scale,
            r_max_hz: config.r_max_hz,
        })
    }

    pub fn n_units(&self) -> usize {
        self.m.len()
    }

    /// Rates in Hz: `r_max exp(-(m_i - z)^2 / (2 sigma^2))`.
    pub fn rates(&self, z: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.m.len()];
        self.rates_into(z, &mut out);
        out
    }

    pub fn rates_into(&self, z: f64, out: &mut [f64]) {
        let denom = 2.0 * self.sigma * self.sigma;
        for (r, &m) in out.iter_mut().zip(&self.m) {
            let d = m - z;
            *r = self.r_max_hz * (-(d * d) / denom).exp();
        }
    }

    /// Rate-weighted mean of the preferred values.
    pub fn decode(&self, rates: &[f64]) -> Option<f64> {
        let total: f64 = rates.iter().sum();
        (total > 0.0).then(|| rates.iter().zip(&self.m).map(|(r, m)| r * m).sum::<f64>() / total)
    }
}

/// Bernoulli draw per unit with probability `min(1, rate * dt)`.
pub fn sample_spikes_into(rates_hz: &[f64], dt_ms: f64, rng: &mut Rng, out: &mut [f64]) {
    for (o, &r) in out.iter_mut().zip(rates_hz) {
        let p = (r * dt_ms * 1e-3).min(1.0);
        *o = if p > 0.0 && rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
}

/// `duration_steps x rates.len()` raster of 0/1 values.
pub fn spikes_from_rates(rates_hz: &[f64], duration_steps: usize, dt_ms: f64, rng: &mut Rng) -> Array2<f64> {
    let n = rates_hz.len();
    let mut raster = Array2::zeros((duration_steps, n));
    for mut row in raster.rows_mut() {
        sample_spikes_into(rates_hz, dt_ms, rng, row.as_slice_mut().expect("contiguous row"));
    }
    raster
}

/// Several population codes side by side, one per analog channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEncoder {
    pub channels: Vec<PopulationCode>,
}

impl ChannelEncoder {
    pub fn new(ranges: &[(f64, f64)], config: &EncodingConfig) -> Result<Self> {
        let channels = ranges
            .iter()
            .map(|&(lo, hi)| PopulationCode::new(lo, hi, config))
            .collect::<Result<_>>()?;
        Ok(Self { channels })
    }

    pub fn n_units(&self) -> usize {
        self.channels.iter().map(PopulationCode::n_units).sum()
    }

    /// Concatenated rates of every channel.
    pub fn rates(&self, values: &[f64]) -> Result<Vec<f64>> {
        crate::error::ensure_dim("encoder channels", self.channels.len(), values.len())?;
        let mut out = vec![0.0; self.n_units()];
        let mut off = 0;
        for (code, &z) in self.channels.iter().zip(values) {
            code.rates_into(z, &mut out[off..off + code.n_units()]);
            off += code.n_units();
        }
        Ok(out)
    }
}
