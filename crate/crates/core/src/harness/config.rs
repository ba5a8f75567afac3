//! Experiment configuration: a TOML file with optional sections. Every
//! section defaults, and unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, LossSet, Schedule};
use crate::decoding::{DecodePolicy, EVAL_MAX_LEN};
use crate::error::{Error, Result};
use crate::vlm::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
    pub transfer: TransferSection,
    pub meter: MeterSection,
    pub checks: ChecksSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub output: PathBuf,
    /// Defaults to `<output>/model.ckpt`.
    pub model: Option<PathBuf>,
    /// Defaults to `<output>/data`.
    pub dataset: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            model: None,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub seed: u64,
    /// Held-out images are drawn from their own seed.
    pub test_size: usize,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 2000,
            seed: 1,
            test_size: 50,
            test_seed: 2,
        }
    }
}

/// Attack settings; budgets are given on the 0–255 pixel scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon_255: f32,
    pub alpha_255: f32,
    pub iters: usize,
    /// `[a1, b1, a2, b2, a3, b3]`
    pub schedule: [f64; 6],
    pub momentum: f64,
    pub unroll_cap: usize,
    pub policy: String,
    pub losses: String,
    pub keep_best: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilon_255: 8.0,
            alpha_255: 1.0,
            iters: 300,
            schedule: [10.0, -20.0, 0.0, 0.0, 0.5, 1.0],
            momentum: 0.9,
            unroll_cap: 64,
            policy: "greedy".into(),
            losses: "L1+L2+L3".into(),
            keep_best: false,
        }
    }
}

impl AttackSection {
    pub fn schedule(&self) -> Schedule {
        let s = self.schedule;
        Schedule {
            a: [s[0], s[2], s[4]],
            b: [s[1], s[3], s[5]],
        }
    }

    pub fn to_config(&self, seed: u64, eval_policies: Vec<DecodePolicy>) -> Result<AttackConfig> {
        let attack_policy: DecodePolicy = self.policy.parse()?;
        let cfg = AttackConfig {
            epsilon: self.epsilon_255 / 255.0,
            alpha: self.alpha_255 / 255.0,
            iters: self.iters,
            schedule: self.schedule(),
            momentum: self.momentum,
            unroll_cap: self.unroll_cap,
            attack_policy: attack_policy.with_max_len(self.unroll_cap).with_seed(seed),
            losses: self.losses.parse::<LossSet>()?,
            seed,
            eval_policies,
            keep_best: self.keep_best,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `greedy`, `beam:W`, `top_k:K`, `nucleus:P`; the first one drives checks.
    pub policies: Vec<String>,
    pub max_len: usize,
    /// Base seed of sampled decoding.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            policies: vec!["greedy".into()],
            max_len: EVAL_MAX_LEN,
            seed: 0,
        }
    }
}

pub(crate) fn parse_policies(names: &[String], max_len: usize, seed: u64) -> Result<Vec<DecodePolicy>> {
    if names.is_empty() {
        return Err(Error::Config("at least one decode policy is required".into()));
    }
    names
        .iter()
        .map(|n| {
            let p = n.parse::<DecodePolicy>()?.with_max_len(max_len).with_seed(seed);
            p.validate()?;
            Ok(p)
        })
        .collect()
}

impl EvalSection {
    pub fn decode_policies(&self) -> Result<Vec<DecodePolicy>> {
        parse_policies(&self.policies, self.max_len, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    /// Any of `noise`, `sponge`, `nicg`.
    pub baselines: Vec<String>,
    /// Images per cell in ablation suites; defaults to `data.test_size`.
    pub ablation_images: Option<usize>,
    pub epsilons_255: Vec<f32>,
    pub max_lens: Vec<usize>,
    pub ablation_policies: Vec<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            baselines: vec!["noise".into(), "sponge".into(), "nicg".into()],
            ablation_images: None,
            epsilons_255: vec![2.0, 4.0, 8.0, 16.0, 32.0],
            max_lens: vec![32, 64, 128, 256],
            ablation_policies: vec![
                "greedy".into(),
                "top_k:10".into(),
                "nucleus:0.9".into(),
                "beam:5".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Noise,
    Sponge,
    Nicg,
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Noise => "noise",
            Baseline::Sponge => "sponge",
            Baseline::Nicg => "nicg",
        }
    }
}

impl ExperimentSection {
    pub fn baseline_list(&self) -> Result<Vec<Baseline>> {
        self.baselines
            .iter()
            .map(|b| match b.as_str() {
                "noise" => Ok(Baseline::Noise),
                "sponge" => Ok(Baseline::Sponge),
                "nicg" => Ok(Baseline::Nicg),
                other => Err(Error::Config(format!("experiment.baselines: unknown baseline {other:?}"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Second checkpoint, used as the black-box target.
    pub model_b: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeterSection {
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub joules_per_flop: f64,
    pub images: usize,
}

impl Default for MeterSection {
    fn default() -> Self {
        Self {
            lengths: vec![8, 16, 32, 64, 128, 256],
            reps: 5,
            joules_per_flop: crate::metering::DEFAULT_JOULES_PER_FLOP,
            images: 1,
        }
    }
}

/// Gating checks. Unset thresholds are not checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    pub train_max_mean_len: Option<f64>,
    pub train_min_well_formed: Option<f64>,
    pub min_length_ratio: Option<f64>,
    pub beat_baselines: bool,
    /// Allowed relative deviation of the noise baseline from the original.
    pub noise_tolerance: Option<f64>,
    pub min_flops_r2: Option<f64>,
    pub min_wall_r2: Option<f64>,
    /// Apply the per-suite ablation checks.
    pub ablation: bool,
    pub schedule_gain: f64,
    pub epsilon_max_inversion: f64,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self {
            train_max_mean_len: None,
            train_min_well_formed: None,
            min_length_ratio: None,
            beat_baselines: false,
            noise_tolerance: None,
            min_flops_r2: None,
            min_wall_r2: None,
            ablation: false,
            schedule_gain: 1.10,
            epsilon_max_inversion: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        if self.data.test_size == 0 || self.data.train_size == 0 {
            return Err(Error::Config("data sizes must be >= 1".into()));
        }
        self.eval.decode_policies()?;
        self.experiment.baseline_list()?;
        self.attack.to_config(0, self.eval.decode_policies()?)?;
        Ok(())
    }

    pub fn model_path(&self) -> PathBuf {
        self.paths
            .model
            .clone()
            .unwrap_or_else(|| self.paths.output.join("model.ckpt"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.paths.output.join("data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let a = c.attack.to_config(3, c.eval.decode_policies().unwrap()).unwrap();
        let d = AttackConfig::default();
        assert_eq!(a.epsilon, d.epsilon);
        assert_eq!(a.alpha, d.alpha);
        assert_eq!(a.schedule, d.schedule);
        assert_eq!(a.seed, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[attack]\nepsilon = 8\n").unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
        let err = ExperimentConfig::from_toml("[atack]\n").unwrap_err();
        assert!(err.to_string().contains("atack"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[experiment]\nseeds = []\n",
            "[eval]\npolicies = [\"beam:0\"]\n",
            "[experiment]\nbaselines = [\"blur\"]\n",
            "[attack]\nalpha_255 = 9.0\n",
            "[attack]\nlosses = \"L4\"\n",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.experiment.seeds = vec![1, 2, 3];
        c.eval.policies = vec!["greedy".into(), "nucleus:0.9".into()];
        c.paths.model = Some("m.ckpt".into());
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
