//! Run configuration: one TOML document holding every constant of an
//! experiment, named presets, dotted-key overrides and the run manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bptt::{AdamConfig, BackwardOptions};
use crate::encoding::{ChannelEncoder, EncodingConfig};
use crate::error::{Error, Result};
use crate::inner_loop::{EpisodeProtocol, ReadoutPlasticityConfig};
use crate::parallel::ExecMode;
use crate::snn::{DelayInit, InitSpec, NeuronConstants};
use crate::tasks::{OutputUnit, RegressionFamily, VolterraConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub dt_ms: f64,
    pub tau_m_ms: f64,
    /// Replaces `exp(-dt / tau_m)` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub v_th: f64,
    pub refractory_ms: f64,
    pub gamma: f64,
    pub tau_readout_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_neurons: usize,
    pub w_in_std: f64,
    pub w_rec_std: f64,
    pub delays: DelayInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Volterra,
    TargetNetwork,
    Sine,
}

impl TaskFamily {
    pub fn regression(self) -> Option<RegressionFamily> {
        match self {
            TaskFamily::Volterra => None,
            TaskFamily::TargetNetwork => Some(RegressionFamily::TargetNetwork),
            TaskFamily::Sine => Some(RegressionFamily::Sine),
        }
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "volterra" => Ok(TaskFamily::Volterra),
            "target-network" | "tn" => Ok(TaskFamily::TargetNetwork),
            "sine" => Ok(TaskFamily::Sine),
            other => Err(Error::Config(format!(
                "unknown task family '{other}' (expected volterra, target-network or sine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub volterra: VolterraConfig,
    pub tn_output: OutputUnit,
}

/// Which weights adapt inside a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// The readout learns with the windowed plasticity rule; the outer loop
    /// trains its initialization.
    ReadoutPlastic,
    /// Nothing changes within a task; the outer loop trains every weight.
    DynamicsOnly,
}

/// Unit of the firing rates entering the rate regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateUnit {
    Hz,
    /// Spikes per millisecond.
    PerMs,
}

impl RateUnit {
    /// Rate of `count` spikes over `duration_ms`, in this unit.
    pub fn rate(self, count: f64, duration_ms: f64) -> f64 {
        count / duration_ms * self.per_ms()
    }

    pub fn from_hz(self, hz: f64) -> f64 {
        hz / 1000.0 * self.per_ms()
    }

    fn per_ms(self) -> f64 {
        match self {
            RateUnit::Hz => 1000.0,
            RateUnit::PerMs => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Sum over the loss window, mean over the batch.
    Sum,
    /// Mean over the loss window and the batch.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterLoopConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub iterations: u64,
    /// Truncation length for streamed tasks, in simulation steps.
    pub chunk_steps: usize,
    /// Loss covers the last `loss_window_steps` of each chunk.
    pub loss_window_steps: usize,
    /// Chunks simulated per sampled streamed task.
    pub chunks_per_task: usize,
    pub reg_alpha: f64,
    pub target_rate_hz: f64,
    pub rate_unit: RateUnit,
    pub reduction: Reduction,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub bptt: BackwardOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Master seed of held-out tasks, disjoint from training streams.
    pub seed: u64,
    pub n_tasks: usize,
    /// Inner-loop duration for streamed tasks, in steps.
    pub stream_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub execution: ExecMode,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
    /// Checkpoint period in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// When false, `wall_ms` is written as 0 so reruns give identical files.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    pub neuron: NeuronConfig,
    pub network: NetworkConfig,
    pub task: TaskConfig,
    pub encoding: EncodingConfig,
    pub protocol: EpisodeProtocol,
    pub readout: ReadoutPlasticityConfig,
    pub outer: OuterLoopConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

pub const PRESETS: &[&str] = &[
    "exp1-volterra",
    "exp1-volterra-literal-rho",
    "exp1-volterra-desk",
    "exp2-tn",
    "exp2-tn-literal-rho",
    "exp2-tn-desk",
    "exp2-sine",
    "exp2-sine-desk",
];

/// Membrane decay quoted together with the 20 ms time constant.
pub const LITERAL_RHO: f64 = 0.368;

fn exp1_volterra() -> ExperimentConfig {
    let n = 800;
    ExperimentConfig {
        preset: "exp1-volterra".into(),
        seed: 1,
        neuron: NeuronConfig {
            dt_ms: 1.0,
            tau_m_ms: 20.0,
            rho: None,
            v_th: 0.02,
            refractory_ms: 5.0,
            gamma: 0.4,
            tau_readout_ms: 20.0,
        },
        network: NetworkConfig {
            n_neurons: n,
            w_in_std: 1.0 / 3f64.sqrt(),
            w_rec_std: 1.0 / (n as f64).sqrt(),
            delays: DelayInit::Uniform { steps: 5 },
        },
        task: TaskConfig {
            family: TaskFamily::Volterra,
            volterra: VolterraConfig::default(),
            tn_output: OutputUnit::Logistic,
        },
        encoding: EncodingConfig::default(),
        protocol: EpisodeProtocol {
            step_len: 20,
            steps_per_episode: 400,
            delayed_target: true,
            probe_mode: true,
        },
        readout: ReadoutPlasticityConfig {
            enabled: true,
            eta: 3e-7,
            window_steps: 1000,
        },
        outer: OuterLoopConfig {
            regime: Regime::ReadoutPlastic,
            batch_size: 40,
            iterations: 3000,
            chunk_steps: 3000,
            loss_window_steps: 2000,
            chunks_per_task: 3,
            reg_alpha: 1200.0,
            target_rate_hz: 20.0,
            rate_unit: RateUnit::Hz,
            reduction: Reduction::Sum,
            grad_clip: 1000.0,
            adam: AdamConfig::default(),
            bptt: BackwardOptions::default(),
        },
        eval: EvalConfig {
            seed: 1_000_003,
            n_tasks: 200,
            stream_steps: 10_000,
        },
        run: RunConfig {
            execution: ExecMode::Parallel,
            workers: 0,
            checkpoint_every: 30,
            record_wall_time: false,
        },
    }
}

fn exp2(family: TaskFamily) -> ExperimentConfig {
    let n = 300;
    let mut c = exp1_volterra();
    c.preset = match family {
        TaskFamily::Sine => "exp2-sine",
        _ => "exp2-tn",
    }
    .into();
    c.neuron.v_th = 0.03;
    c.network = NetworkConfig {
        n_neurons: n,
        w_in_std: 1.0 / 3f64.sqrt(),
        w_rec_std: 1.0 / (n as f64).sqrt(),
        delays: DelayInit::Spread { max_steps: 5 },
    };
    c.task.family = family;
    c.readout.enabled = false;
    c.outer = OuterLoopConfig {
        regime: Regime::DynamicsOnly,
        batch_size: 10,
        iterations: 5000,
        reg_alpha: 30.0,
        reduction: Reduction::Mean,
        ..c.outer
    };
    c.eval.n_tasks = 1000;
    c.run.checkpoint_every = 100;
    c
}

fn desk_exp1() -> ExperimentConfig {
    let mut c = exp1_volterra();
    c.preset = "exp1-volterra-desk".into();
    c.network.n_neurons = 200;
    c.network.w_rec_std = 1.0 / 200f64.sqrt();
    c.task.volterra.kernel_len = 100;
    c.readout.eta = 3e-6;
    c.outer.batch_size = 8;
    c.outer.iterations = 150;
    c.eval.n_tasks = 50;
    c.eval.stream_steps = 20_000;
    c.run.checkpoint_every = 30;
    c
}

fn desk_exp2(family: TaskFamily) -> ExperimentConfig {
    let mut c = exp2(family);
    c.preset = match family {
        TaskFamily::Sine => "exp2-sine-desk",
        _ => "exp2-tn-desk",
    }
    .into();
    c.network.n_neurons = 100;
    // Stronger recurrence carries the task across examples at this size.
    c.network.w_rec_std = 3.0 / 100f64.sqrt();
    c.protocol.steps_per_episode = 60;
    c.encoding.sigma_scale = 20.0;
    c.outer.iterations = 1000;
    c.outer.adam.lr = 1e-2;
    c.eval.n_tasks = 100;
    c
}

/// Builds a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut c = match name {
        "exp1-volterra" | "exp1-volterra-literal-rho" => exp1_volterra(),
        "exp1-volterra-desk" => desk_exp1(),
        "exp2-tn" | "exp2-tn-literal-rho" => exp2(TaskFamily::TargetNetwork),
        "exp2-tn-desk" => desk_exp2(TaskFamily::TargetNetwork),
        "exp2-sine" => exp2(TaskFamily::Sine),
        "exp2-sine-desk" => desk_exp2(TaskFamily::Sine),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; valid presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    if name.ends_with("literal-rho") {
        c.neuron.rho = Some(LITERAL_RHO);
    }
    c.preset = name.to_string();
    Ok(c)
}

/// Parses `key=value`; the value is read as a TOML literal and falls back
/// to a bare string.
pub fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override '{spec}' has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Deserializes a full document, reporting every unknown key at once.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let mut unknown = Vec::new();
        let cfg: Self = serde_ignored::deserialize(toml::Value::Table(table), |path| {
            unknown.push(path.to_string())
        })
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if !unknown.is_empty() {
            unknown.sort();
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves a (possibly partial) TOML document against its preset, then
    /// applies overrides. `preset` wins over the document's own `preset` key.
    pub fn resolve(document: Option<&str>, preset_name: Option<&str>, overrides: &[String]) -> Result<Self> {
        let doc: toml::Table = match document {
            Some(text) => toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?,
            None => toml::Table::new(),
        };
        let name = preset_name
            .map(str::to_string)
            .or_else(|| doc.get("preset").and_then(|v| v.as_str()).map(str::to_string))
            .ok_or_else(|| Error::Config(format!("no preset given; valid presets: {}", PRESETS.join(", "))))?;
        let mut table = preset(&name)?.to_table();
        merge(&mut table, doc);
        table.insert("preset".into(), toml::Value::String(name));
        for spec in overrides {
            let (k, v) = parse_override(spec)?;
            set_path(&mut table, &k, v)?;
        }
        Self::from_table(table)
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Hash of the settings that shape the training trajectory. Iteration
    /// budget, evaluation and run-control settings are left out, so a run can
    /// be resumed with a longer budget or a different worker count.
    pub fn training_hash(&self) -> String {
        let mut table = self.to_table();
        table.remove("run");
        table.remove("eval");
        if let Some(toml::Value::Table(outer)) = table.get_mut("outer") {
            outer.remove("iterations");
        }
        let text = toml::to_string(&table).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.consts()?;
        self.task.volterra.validate()?;
        self.readout.validate()?;
        self.protocol.validate()?;
        let o = &self.outer;
        if self.network.n_neurons == 0 {
            return cfg("network.n_neurons must be >= 1".into());
        }
        if !(self.network.w_in_std >= 0.0 && self.network.w_rec_std >= 0.0) {
            return cfg("weight scales must be >= 0".into());
        }
        if o.batch_size == 0 {
            return cfg("outer.batch_size must be >= 1".into());
        }
        if o.chunk_steps == 0 || o.loss_window_steps == 0 || o.loss_window_steps > o.chunk_steps {
            return cfg(format!(
                "outer.loss_window_steps ({}) must be in 1..=chunk_steps ({})",
                o.loss_window_steps, o.chunk_steps
            ));
        }
        if o.chunks_per_task == 0 {
            return cfg("outer.chunks_per_task must be >= 1".into());
        }
        if !(o.grad_clip > 0.0) || !(o.reg_alpha >= 0.0) || !(o.adam.lr > 0.0) {
            return cfg("grad_clip and lr must be positive, reg_alpha >= 0".into());
        }
        match (self.task.family, o.regime) {
            (TaskFamily::Volterra, _) => {}
            (_, Regime::ReadoutPlastic) => {
                return cfg("regime readout-plastic is only available for the volterra family".into())
            }
            (_, Regime::DynamicsOnly) if self.readout.enabled => {
                return cfg("readout.enabled must be false for regression families".into())
            }
            _ => {}
        }
        if o.regime == Regime::DynamicsOnly && self.task.family == TaskFamily::Volterra && self.readout.enabled {
            return cfg("regime dynamics-only requires readout.enabled = false".into());
        }
        if self.task.family.regression().is_some() && !self.protocol.delayed_target {
            return cfg("regression families need protocol.delayed_target = true".into());
        }
        if o.regime == Regime::ReadoutPlastic
            && self.readout.enabled
            && o.chunk_steps % self.readout.window_steps != 0
        {
            return cfg(format!(
                "outer.chunk_steps ({}) must be a multiple of readout.window_steps ({})",
                o.chunk_steps, self.readout.window_steps
            ));
        }
        if self.eval.stream_steps == 0 {
            return cfg("eval.stream_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn consts(&self) -> Result<NeuronConstants> {
        let n = &self.neuron;
        let c = NeuronConstants::new(n.dt_ms, n.tau_m_ms, n.v_th, n.refractory_ms, n.gamma, n.tau_readout_ms)?;
        match n.rho {
            Some(rho) => c.with_rho(rho),
            None => Ok(c),
        }
    }

    /// Analog channels fed to the encoder, including the delayed target.
    pub fn encoder(&self) -> Result<Option<ChannelEncoder>> {
        let Some(fam) = self.task.family.regression() else {
            return Ok(None);
        };
        let mut ranges = vec![fam.input_range(); fam.input_dim()];
        if self.protocol.delayed_target {
            ranges.push(fam.target_range(self.task.tn_output));
        }
        ChannelEncoder::new(&ranges, &self.encoding).map(Some)
    }

    pub fn init_spec(&self) -> Result<InitSpec> {
        let n = self.network.n_neurons;
        let (n_inputs, feature_dim) = match self.encoder()? {
            None => (1, 1 + n),
            Some(enc) => (enc.n_units(), n),
        };
        Ok(InitSpec {
            n_neurons: n,
            n_inputs,
            n_outputs: 1,
            feature_dim,
            w_in_std: self.network.w_in_std,
            w_rec_std: self.network.w_rec_std,
            delays: self.network.delays,
        })
    }
}

/// Output layout of a run directory, relative to its root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayout {
    pub config: String,
    pub metrics: String,
    pub checkpoints: String,
}

impl Default for OutputLayout {
    fn default() -> Self {
        Self {
            config: "config.toml".into(),
            metrics: "metrics.jsonl".into(),
            checkpoints: "checkpoints".into(),
        }
    }
}

/// Binds a run directory to the exact configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: String,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub layout: OutputLayout,
    pub started_unix_ms: u64,
    #[serde(default)]
    pub finished_unix_ms: Option<u64>,
    /// Full configuration, so the manifest alone reproduces the run.
    pub config: String,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, started_unix_ms: u64) -> Self {
        Self {
            preset: cfg.preset.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            layout: OutputLayout::default(),
            started_unix_ms,
            finished_unix_ms: None,
            config: cfg.to_toml(),
        }
    }

    /// Re-reads the embedded configuration and checks it against the hash.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let table: toml::Table =
            toml::from_str(&self.config).map_err(|e| Error::Config(format!("manifest config: {e}")))?;
        let cfg = ExperimentConfig::from_table(table)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Config("manifest config does not match its hash".into()));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_builds_and_roundtrips() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_table(toml::from_str(&c.to_toml()).unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
            assert_eq!(back.training_hash(), c.training_hash());
        }
        let lit = preset("exp2-tn-literal-rho").unwrap();
        assert_eq!(lit.consts().unwrap().rho, LITERAL_RHO);
        let def = preset("exp2-tn").unwrap();
        assert!((def.consts().unwrap().rho - (-1.0f64 / 20.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn unknown_preset_names_valid_ones() {
        let err = preset("exp3").unwrap_err().to_string();
        assert!(err.contains("exp2-tn") && err.contains("exp1-volterra"));
    }

    #[test]
    fn overrides_are_typed_and_validated() {
        let c = ExperimentConfig::resolve(
            None,
            Some("exp2-sine-desk"),
            &["outer.adam.lr=0.01".into(), "seed=9".into(), "task.family=target-network".into()],
        )
        .unwrap();
        assert_eq!(c.outer.adam.lr, 0.01);
        assert_eq!(c.seed, 9);
        assert_eq!(c.task.family, TaskFamily::TargetNetwork);
        assert!(ExperimentConfig::resolve(None, Some("exp2-tn"), &["outer.batch_size=0".into()]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = ExperimentConfig::resolve(
            Some("preset = \"exp2-tn\"\nbogus = 1\n[outer]\nlearning_rate = 3\n"),
            None,
            &["network.size=4".into()],
        )
        .unwrap_err()
        .to_string();
        for key in ["bogus", "outer.learning_rate", "network.size"] {
            assert!(err.contains(key), "{err} lacks {key}");
        }
    }

    #[test]
    fn partial_documents_merge_onto_the_preset() {
        let c = ExperimentConfig::resolve(Some("preset = \"exp2-tn\"\n[network]\nn_neurons = 50\n"), None, &[]).unwrap();
        assert_eq!(c.network.n_neurons, 50);
        assert_eq!(c.outer.batch_size, 10);
    }

    #[test]
    fn manifest_reproduces_config() {
        let c = preset("exp1-volterra-desk").unwrap();
        let m = RunManifest::new(&c, 0);
        assert_eq!(m.config().unwrap(), c);
        let mut bad = m.clone();
        bad.config_hash = "00".into();
        assert!(bad.config().is_err());
    }

    #[test]
    fn training_hash_ignores_budget_and_run_control() {
        let a = preset("exp2-sine-desk").unwrap();
        let mut b = a.clone();
        b.outer.iterations += 10;
        b.run.workers = 7;
        b.eval.n_tasks = 3;
        assert_eq!(a.training_hash(), b.training_hash());
        assert_ne!(a.hash(), b.hash());
        b.outer.adam.lr *= 2.0;
        assert_ne!(a.training_hash(), b.training_hash());
    }

    #[test]
    fn rate_units() {
        assert_eq!(RateUnit::Hz.rate(60.0, 3000.0), 20.0);
        assert_eq!(RateUnit::PerMs.rate(60.0, 3000.0), 0.02);
        assert_eq!(RateUnit::PerMs.from_hz(20.0), 0.02);
        assert_eq!(RateUnit::Hz.from_hz(20.0), 20.0);
    }
}
