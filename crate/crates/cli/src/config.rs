//! Experiment configuration: a TOML file with per-stage sections, plus flag
//! overrides, resolved into the core config types and echoed into every run
//! directory for provenance.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sgvi_core::inference::{EmdConfig, InitMode};
use sgvi_core::learning::{OptimizerKind, TrainConfig};
use sgvi_core::scoring::PairScoreMode;
use sgvi_core::synthdata::{GeneratorConfig, ResampleConfig};

/// Evaluation preset controlling which labels are clamped to ground truth
/// during inference and the default MLP depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Object labels clamped; only predicates are predicted. 2-layer MLPs.
    Predcls,
    /// Objects and predicates predicted. 2-layer MLPs.
    Sgcls,
    /// Everything free. 3-layer MLPs.
    Sgdet,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Predcls => "predcls",
            Setting::Sgcls => "sgcls",
            Setting::Sgdet => "sgdet",
        }
    }

    fn default_hidden(self) -> Vec<usize> {
        match self {
            Setting::Predcls | Setting::Sgcls => vec![32],
            Setting::Sgdet => vec![32, 32],
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub m_range: (usize, usize),
    pub predicate_density: f64,
    pub v_o: usize,
    pub v_p: usize,
    pub v_g: usize,
    pub d: usize,
    pub zipf_exponent: f64,
    pub class_margin: f64,
    pub globals_per_instance: usize,
    pub count: usize,
    pub eval_fraction: f64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let core = GeneratorConfig::default();
        GeneratorSection {
            m_range: core.m_range,
            predicate_density: core.predicate_density,
            v_o: core.v_o,
            v_p: core.v_p,
            v_g: core.v_g,
            d: core.d,
            zipf_exponent: core.zipf_exponent,
            class_margin: core.class_margin,
            globals_per_instance: core.globals_per_instance,
            count: 160,
            eval_fraction: 0.25,
        }
    }
}

impl GeneratorSection {
    fn to_core(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            m_range: self.m_range,
            predicate_density: self.predicate_density,
            v_o: self.v_o,
            v_p: self.v_p,
            v_g: self.v_g,
            d: self.d,
            zipf_exponent: self.zipf_exponent,
            class_margin: self.class_margin,
            globals_per_instance: self.globals_per_instance,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden widths; omitted means the setting's default depth.
    pub hidden: Option<Vec<usize>>,
    pub pair_score_mode: Option<PairScoreMode>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub gradient_clip: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        // the higher conventional SGD rate at the default batch size
        let preset = TrainConfig::sgd_preset_high(12);
        TrainSection {
            epochs: preset.epochs,
            batch_size: preset.batch_size,
            learning_rate: preset.learning_rate,
            optimizer: preset.optimizer,
            gradient_clip: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmdSection {
    pub max_iterations: usize,
    pub initial_learning_rate: f64,
    pub tolerance: f64,
    pub init_mode: InitMode,
}

impl Default for EmdSection {
    fn default() -> Self {
        let core = EmdConfig::default();
        EmdSection {
            max_iterations: core.max_iterations,
            initial_learning_rate: core.initial_learning_rate,
            tolerance: core.tolerance,
            init_mode: core.init_mode,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleSection {
    pub enabled: bool,
    pub repeat_factor: f64,
    pub instance_drop_rate: f64,
}

impl Default for ResampleSection {
    fn default() -> Self {
        let core = ResampleConfig::default();
        ResampleSection {
            enabled: false,
            repeat_factor: core.repeat_factor,
            instance_drop_rate: core.instance_drop_rate,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub ks: Vec<usize>,
    pub split_hi: u64,
    pub split_lo: u64,
    /// Strict matching: each prediction consumes at most one ground truth.
    #[serde(default = "default_true")]
    pub graph_constraint: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { ks: vec![20, 50, 100], split_hi: 10_000, split_lo: 500, graph_constraint: true }
    }
}

/// On-disk experiment config.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub emd: EmdSection,
    #[serde(default)]
    pub resample: ResampleSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

/// Command-line overrides applied on top of the file config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub setting: Option<Setting>,
    pub emd_iters: Option<usize>,
    pub emd_eps: Option<f64>,
    pub emd_lr: Option<f64>,
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub setting: Setting,
    pub count: usize,
    pub eval_fraction: f64,
    pub hidden: Vec<usize>,
    pub pair_score_mode: PairScoreMode,
    pub resample_enabled: bool,
    pub ks: Vec<usize>,
    pub split_hi: u64,
    pub split_lo: u64,
    pub graph_constraint: bool,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub emd: EmdConfig,
    pub resample: ResampleConfig,
}

impl ExperimentConfig {
    pub fn resolve(file: &FileConfig, overrides: &Overrides) -> Self {
        let seed = overrides.seed.unwrap_or(file.seed);
        let setting = overrides.setting.unwrap_or(Setting::Predcls);
        let hidden = file.model.hidden.clone().unwrap_or_else(|| setting.default_hidden());
        let emd = EmdConfig {
            max_iterations: overrides.emd_iters.unwrap_or(file.emd.max_iterations),
            initial_learning_rate: overrides.emd_lr.unwrap_or(file.emd.initial_learning_rate),
            tolerance: overrides.emd_eps.unwrap_or(file.emd.tolerance),
            init_mode: file.emd.init_mode,
        };
        ExperimentConfig {
            seed,
            workers: overrides.workers.or(file.workers).unwrap_or(1),
            setting,
            count: file.generator.count,
            eval_fraction: file.generator.eval_fraction,
            hidden,
            pair_score_mode: file.model.pair_score_mode.unwrap_or(PairScoreMode::SourceInvariant),
            resample_enabled: file.resample.enabled,
            ks: file.metrics.ks.clone(),
            split_hi: file.metrics.split_hi,
            split_lo: file.metrics.split_lo,
            graph_constraint: file.metrics.graph_constraint,
            generator: file.generator.to_core(seed),
            train: TrainConfig {
                epochs: file.train.epochs,
                batch_size: file.train.batch_size,
                learning_rate: file.train.learning_rate,
                optimizer: file.train.optimizer,
                seed,
                gradient_clip: file.train.gradient_clip,
            },
            resample: ResampleConfig {
                repeat_factor: file.resample.repeat_factor,
                instance_drop_rate: file.resample.instance_drop_rate,
            },
            emd,
        }
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let file: FileConfig = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    Ok(ExperimentConfig::resolve(&file, overrides))
}

/// Run provenance: the command, its paths and the full resolved config.
#[derive(Serialize)]
pub struct Echo<'a> {
    pub command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub config: &'a ExperimentConfig,
}

pub fn write_echo(out: &Path, echo: &Echo<'_>) -> Result<()> {
    fs::create_dir_all(out)?;
    let text = toml::to_string_pretty(echo).context("serializing resolved config")?;
    fs::write(out.join("config_resolved.toml"), text)?;
    Ok(())
}
