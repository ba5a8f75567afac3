use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{parse_policies, AttackSection, Baseline, ExperimentConfig};
use super::report::{create_dir, write_json, Check, ImageRow, Report};
use crate::attack::{
    baseline_nicg, baseline_noise, baseline_sponge, craft_verbose_image, AttackConfig, LossSet, Schedule,
};
use crate::decoding::{DecodePolicy, GenerateOptions};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metering::{length_sweep, LengthSweep, Meter, MeterRow};
use crate::vlm::{evaluate_captions, read_dataset, synth_dataset, train, write_dataset, CaptionEval, ToyVlm, TrainReport};

/// Slack allowed on the ℓ∞ budget for float rounding.
pub const BUDGET_SLACK: f32 = 1e-7;

/// SplitMix64 finalizer; turns `(seed, image)` pairs into independent
/// stream seeds.
pub fn derive_seed(seed: u64, image_id: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(image_id as u64)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub trait Outcome {
    fn checks(&self) -> Vec<&Check>;

    /// True when every gating check passed.
    fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed || !c.gating)
    }
}

impl Outcome for Report {
    fn checks(&self) -> Vec<&Check> {
        self.checks.iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub held_out: CaptionEval,
    pub checks: Vec<Check>,
}

impl Outcome for TrainOutcome {
    fn checks(&self) -> Vec<&Check> {
        self.checks.iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Losses,
    Schedule,
    Epsilon,
    Policy,
    MaxLen,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Losses, Suite::Schedule, Suite::Epsilon, Suite::Policy, Suite::MaxLen];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Losses => "losses",
            Suite::Schedule => "schedule",
            Suite::Epsilon => "epsilon",
            Suite::Policy => "policy",
            Suite::MaxLen => "maxlen",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite {s:?}")))
    }
}

/// One row of an ablation comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub count: usize,
    pub original_mean: f64,
    pub verbose_mean: f64,
    pub ratio: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub suite: Suite,
    pub cells: Vec<Report>,
    pub table: Vec<CellSummary>,
    pub checks: Vec<Check>,
}

impl AblationOutcome {
    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.table.iter().find(|c| c.cell == name)
    }
}

impl Outcome for AblationOutcome {
    fn checks(&self) -> Vec<&Check> {
        self.checks
            .iter()
            .chain(self.cells.iter().flat_map(|c| c.checks.iter()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterOutcome {
    pub sweeps: Vec<LengthSweep>,
    pub checks: Vec<Check>,
}

impl Outcome for MeterOutcome {
    fn checks(&self) -> Vec<&Check> {
        self.checks.iter().collect()
    }
}

/// A decode policy and the label rows carry for it.
#[derive(Debug, Clone)]
struct LabeledPolicy {
    label: String,
    policy: DecodePolicy,
}

fn labeled(policies: Vec<DecodePolicy>) -> Vec<LabeledPolicy> {
    policies
        .into_iter()
        .map(|policy| LabeledPolicy {
            label: policy.to_string(),
            policy,
        })
        .collect()
}

/// Generation and artifact settings shared by every image of a run.
struct RunSpec<'a> {
    model: &'a ToyVlm,
    attack: AttackConfig,
    policies: Vec<LabeledPolicy>,
    baselines: Vec<Baseline>,
    meter: Meter,
    /// Where crafted images and curves go, if anywhere.
    save: Option<PathBuf>,
}

/// Orchestrates the experiment commands over a fixed-size worker pool.
pub struct Harness {
    pub config: ExperimentConfig,
    pool: rayon::ThreadPool,
}

impl Harness {
    /// `jobs` defaults to the number of available cores.
    pub fn new(config: ExperimentConfig, jobs: Option<usize>) -> Result<Self> {
        config.validate()?;
        let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self { config, pool })
    }

    pub fn jobs(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.paths.output
    }

    fn meter(&self) -> Result<Meter> {
        Meter::new(self.config.meter.joules_per_flop)
    }

    fn load_model(path: &Path) -> Result<ToyVlm> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "model checkpoint not found"),
            ));
        }
        ToyVlm::load(path)
    }

    fn test_images(&self, model: &ToyVlm, n: usize) -> Vec<Image> {
        synth_dataset(n, self.config.data.test_seed, &model.vocab)
            .into_iter()
            .map(|s| s.image)
            .collect()
    }

    fn attack_config(&self, section: &AttackSection, policies: &[LabeledPolicy]) -> Result<AttackConfig> {
        section.to_config(0, policies.iter().map(|p| p.policy).collect())
    }

    /// Writes a synthetic dataset of `n` samples to the dataset path.
    pub fn gen_data(&self, n: Option<usize>, seed: Option<u64>) -> Result<PathBuf> {
        let n = n.unwrap_or(self.config.data.train_size);
        if n == 0 {
            return Err(Error::Config("dataset size must be >= 1".into()));
        }
        let seed = seed.unwrap_or(self.config.data.seed);
        let dir = self.config.dataset_path();
        let vocab = crate::vlm::Vocab::standard();
        write_dataset(&dir, &synth_dataset(n, seed, &vocab))?;
        Ok(dir)
    }

    /// Trains a fresh model on the dataset path and saves it.
    pub fn train(&self) -> Result<TrainOutcome> {
        let data_dir = self.config.dataset_path();
        if !data_dir.exists() {
            return Err(Error::io(
                &data_dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let data = read_dataset(&data_dir)?;
        let tc = &self.config.train;
        let mut model = ToyVlm::standard(tc.seed);
        let report = train(&mut model, &data, tc)?;
        let held = synth_dataset(self.config.data.test_size, self.config.data.test_seed, &model.vocab);
        let held_out = evaluate_captions(&model, &held, self.config.eval.max_len)?;
        let path = self.config.model_path();
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        model.save(&path)?;
        let mut checks = vec![Check::gate(
            "loss_decreases",
            report.final_loss() < report.initial_loss,
            format!("{} -> {}", report.initial_loss, report.final_loss()),
        )];
        if let Some(max) = self.config.checks.train_max_mean_len {
            checks.push(Check::gate(
                "held_out_mean_len",
                held_out.mean_len <= max,
                format!("{} <= {max}", held_out.mean_len),
            ));
        }
        if let Some(min) = self.config.checks.train_min_well_formed {
            checks.push(Check::gate(
                "held_out_well_formed",
                held_out.well_formed >= min,
                format!("{} >= {min}", held_out.well_formed),
            ));
        }
        let outcome = TrainOutcome {
            report,
            held_out,
            checks,
        };
        let dir = self.output_dir().join("train");
        create_dir(&dir)?;
        write_json(&outcome, &dir.join("train.json"))?;
        Ok(outcome)
    }

    fn eval_rows(
        spec: &RunSpec<'_>,
        seed: u64,
        image_id: usize,
        method: &str,
        x: &Image,
        x_ref: &Image,
    ) -> Result<Vec<ImageRow>> {
        let (linf, l2) = (x.linf_dist(x_ref) as f64, x.l2_dist(x_ref) as f64);
        spec.policies
            .iter()
            .map(|lp| {
                let policy = if lp.policy.is_stochastic() {
                    lp.policy.with_seed(derive_seed(lp.policy.seed ^ seed, image_id))
                } else {
                    lp.policy
                };
                let (trace, m) = spec.meter.measure(spec.model, x, &policy, GenerateOptions::default())?;
                Ok(ImageRow {
                    seed,
                    image_id,
                    method: method.into(),
                    policy: lp.label.clone(),
                    length: m.tokens,
                    eos_emitted: trace.eos_emitted,
                    linf,
                    l2,
                    flops: m.flops,
                    proxy_energy: m.proxy_energy,
                    wall_seconds: m.wall_seconds,
                })
            })
            .collect()
    }

    fn attack_image(spec: &RunSpec<'_>, seed: u64, image_id: usize, x: &Image) -> Result<Vec<ImageRow>> {
        let mut rows = Self::eval_rows(spec, seed, image_id, "original", x, x)?;
        let cfg = AttackConfig {
            seed: derive_seed(seed, image_id),
            eval_policies: Vec::new(),
            ..spec.attack.clone()
        };
        let result = craft_verbose_image(spec.model, x, &cfg)?;
        rows.extend(Self::eval_rows(spec, seed, image_id, "verbose", &result.x_adv, x)?);
        let stem = format!("s{seed}_i{image_id:05}");
        if let Some(dir) = &spec.save {
            result.x_adv.save(&dir.join("images").join(format!("{stem}_verbose.vft")))?;
            let curve = dir.join("curves").join(format!("{stem}.csv"));
            std::fs::write(&curve, result.curve_csv()).map_err(|e| Error::io(&curve, e))?;
        }
        for b in &spec.baselines {
            let x_b = match b {
                Baseline::Noise => baseline_noise(x, cfg.epsilon, cfg.seed),
                Baseline::Sponge => baseline_sponge(spec.model, x, &cfg)?,
                Baseline::Nicg => baseline_nicg(spec.model, x, &cfg)?,
            };
            if let Some(dir) = &spec.save {
                x_b.save(&dir.join("images").join(format!("{stem}_{}.vft", b.name())))?;
            }
            rows.extend(Self::eval_rows(spec, seed, image_id, b.name(), &x_b, x)?);
        }
        Ok(rows)
    }

    /// Attacks every image under every seed on the worker pool. Rows come
    /// back in `(seed, image)` order regardless of scheduling.
    fn run_attacks(&self, spec: &RunSpec<'_>, images: &[Image]) -> Result<Vec<ImageRow>> {
        if let Some(dir) = &spec.save {
            create_dir(&dir.join("images"))?;
            create_dir(&dir.join("curves"))?;
        }
        let mut rows = Vec::new();
        for &seed in &self.config.experiment.seeds {
            let per_image: Vec<Vec<ImageRow>> = self.pool.install(|| {
                images
                    .par_iter()
                    .enumerate()
                    .map(|(i, x)| Self::attack_image(spec, seed, i, x))
                    .collect::<Result<_>>()
            })?;
            rows.extend(per_image.into_iter().flatten());
        }
        Ok(rows)
    }

    fn budget_check(rows: &[ImageRow], epsilon: f32) -> Check {
        let worst = rows.iter().map(|r| r.linf).fold(0.0, f64::max);
        Check::gate(
            "linf_budget",
            worst <= (epsilon + BUDGET_SLACK) as f64,
            format!("max linf {worst} vs epsilon {epsilon}"),
        )
    }

    /// Crafts verbose images (and the configured baselines) for the
    /// held-out images and reports their lengths under every eval policy.
    pub fn attack(&self) -> Result<Report> {
        let model = Self::load_model(&self.config.model_path())?;
        let policies = labeled(self.config.eval.decode_policies()?);
        let dir = self.output_dir().join("attack");
        let spec = RunSpec {
            model: &model,
            attack: self.attack_config(&self.config.attack, &policies)?,
            baselines: self.config.experiment.baseline_list()?,
            meter: self.meter()?,
            save: Some(dir.clone()),
            policies,
        };
        let images = self.test_images(&model, self.config.data.test_size);
        let rows = self.run_attacks(&spec, &images)?;
        let mut report = Report::new("attack", "", &self.config, rows);
        report.checks = self.attack_checks(&report, &spec);
        report.write(&dir)?;
        Ok(report)
    }

    fn attack_checks(&self, report: &Report, spec: &RunSpec<'_>) -> Vec<Check> {
        let c = &self.config.checks;
        let p0 = &spec.policies[0].label;
        let mean = |m: &str| report.mean_length(m, p0).unwrap_or(f64::NAN);
        let (orig, verbose) = (mean("original"), mean("verbose"));
        let mut checks = vec![Self::budget_check(&report.rows, spec.attack.epsilon)];
        if let Some(r) = c.min_length_ratio {
            checks.push(Check::gate(
                "length_ratio",
                verbose / orig >= r,
                format!("verbose {verbose} / original {orig} = {} (>= {r})", verbose / orig),
            ));
        }
        if c.beat_baselines {
            for b in &spec.baselines {
                let m = mean(b.name());
                checks.push(Check::gate(
                    format!("verbose_beats_{}", b.name()),
                    verbose > m,
                    format!("verbose {verbose} vs {} {m}", b.name()),
                ));
            }
        }
        if let Some(tol) = c.noise_tolerance {
            if spec.baselines.contains(&Baseline::Noise) {
                let n = mean("noise");
                checks.push(Check::gate(
                    "noise_near_original",
                    (n - orig).abs() <= tol * orig,
                    format!("noise {n} vs original {orig} (±{tol})"),
                ));
            }
        }
        checks
    }

    /// Evaluates the clean held-out images, or every `.vft` image in
    /// `images` when given. Files named `s<seed>_i<id>_<method>.vft` are
    /// compared against held-out image `id`.
    pub fn eval(&self, images: Option<&Path>) -> Result<Report> {
        let model = Self::load_model(&self.config.model_path())?;
        let spec = RunSpec {
            model: &model,
            attack: AttackConfig::default(),
            policies: labeled(self.config.eval.decode_policies()?),
            baselines: Vec::new(),
            meter: self.meter()?,
            save: None,
        };
        let clean = self.test_images(&model, self.config.data.test_size);
        let jobs: Vec<(u64, usize, String, Image, Image)> = match images {
            None => clean
                .iter()
                .enumerate()
                .map(|(i, x)| (0, i, "original".to_string(), x.clone(), x.clone()))
                .collect(),
            Some(dir) => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::io(dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "vft"))
                    .collect();
                files.sort();
                let mut jobs = Vec::with_capacity(files.len());
                for (k, f) in files.iter().enumerate() {
                    let x = Image::load(f)?;
                    let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    let (seed, id, method) = parse_image_name(stem).unwrap_or((0, k, stem.to_string()));
                    let reference = clean.get(id).filter(|c| c.shape() == x.shape()).cloned();
                    let reference = reference.unwrap_or_else(|| x.clone());
                    jobs.push((seed, id, method, x, reference));
                }
                jobs
            }
        };
        let per: Vec<Vec<ImageRow>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|(s, i, m, x, r)| Self::eval_rows(&spec, *s, *i, m, x, r))
                .collect::<Result<_>>()
        })?;
        let report = Report::new("eval", "", &self.config, per.into_iter().flatten().collect());
        report.write(&self.output_dir().join("eval"))?;
        Ok(report)
    }

    fn ablation_cells(&self, suite: Suite) -> Result<Vec<(String, AttackSection)>> {
        let base = &self.config.attack;
        Ok(match suite {
            Suite::Losses => LossSet::combinations()
                .into_iter()
                .map(|l| {
                    (
                        l.to_string(),
                        AttackSection {
                            losses: l.to_string(),
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            Suite::Schedule => {
                let none = Schedule::no_decay();
                let flat = [none.a[0], none.b[0], none.a[1], none.b[1], none.a[2], none.b[2]];
                let cell = |name: &str, decay: bool, momentum: bool| {
                    (
                        name.to_string(),
                        AttackSection {
                            schedule: if decay { base.schedule } else { flat },
                            momentum: if momentum { base.momentum } else { 0.0 },
                            ..base.clone()
                        },
                    )
                };
                vec![
                    cell("neither", false, false),
                    cell("decay", true, false),
                    cell("momentum", false, true),
                    cell("decay+momentum", true, true),
                ]
            }
            Suite::Epsilon => self
                .config
                .experiment
                .epsilons_255
                .iter()
                .map(|&e| {
                    (
                        format!("eps{e}"),
                        AttackSection {
                            epsilon_255: e,
                            alpha_255: base.alpha_255.min(e),
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            Suite::Policy | Suite::MaxLen => vec![("verbose".into(), base.clone())],
        })
    }

    fn ablation_policies(&self, suite: Suite) -> Result<Vec<LabeledPolicy>> {
        let eval = &self.config.eval;
        let exp = &self.config.experiment;
        match suite {
            Suite::Policy => Ok(labeled(parse_policies(&exp.ablation_policies, eval.max_len, eval.seed)?)),
            Suite::MaxLen => {
                let base = eval.decode_policies()?[0];
                Ok(exp
                    .max_lens
                    .iter()
                    .map(|&m| LabeledPolicy {
                        label: format!("{base}@{m}"),
                        policy: base.with_max_len(m),
                    })
                    .collect())
            }
            _ => Ok(labeled(vec![eval.decode_policies()?[0]])),
        }
    }

    /// Runs one ablation suite: one report per configuration cell plus a
    /// comparison table.
    pub fn ablate(&self, suite: Suite) -> Result<AblationOutcome> {
        let model = Self::load_model(&self.config.model_path())?;
        let n = self.config.experiment.ablation_images.unwrap_or(self.config.data.test_size);
        let images = self.test_images(&model, n);
        let policies = self.ablation_policies(suite)?;
        let dir = self.output_dir().join("ablate").join(suite.name());
        let mut cells = Vec::new();
        for (label, section) in self.ablation_cells(suite)? {
            let spec = RunSpec {
                model: &model,
                attack: self.attack_config(&section, &policies)?,
                policies: policies.clone(),
                baselines: Vec::new(),
                meter: self.meter()?,
                save: None,
            };
            let rows = self.run_attacks(&spec, &images)?;
            if matches!(suite, Suite::Policy | Suite::MaxLen) {
                // one crafted set, one cell per evaluation policy
                for lp in &policies {
                    let cell_rows = rows.iter().filter(|r| r.policy == lp.label).cloned().collect();
                    let mut r = Report::new("ablate", &lp.label, &self.config, cell_rows);
                    r.checks.push(Self::budget_check(&r.rows, spec.attack.epsilon));
                    cells.push(r);
                }
            } else {
                let mut r = Report::new("ablate", &label, &self.config, rows);
                r.checks.push(Self::budget_check(&r.rows, spec.attack.epsilon));
                cells.push(r);
            }
        }
        let table: Vec<CellSummary> = cells
            .iter()
            .map(|r| {
                let policy = r.rows.first().map(|x| x.policy.clone()).unwrap_or_default();
                let o = r.aggregate("original", &policy);
                let v = r.aggregate("verbose", &policy);
                let om = o.map_or(0.0, |a| a.mean_length);
                let vm = v.map_or(0.0, |a| a.mean_length);
                CellSummary {
                    cell: r.label.clone(),
                    count: v.map_or(0, |a| a.count),
                    original_mean: om,
                    verbose_mean: vm,
                    ratio: if om > 0.0 { vm / om } else { f64::NAN },
                    mean_linf: v.map_or(0.0, |a| a.mean_linf),
                    mean_l2: v.map_or(0.0, |a| a.mean_l2),
                }
            })
            .collect();
        let checks = self.ablation_checks(suite, &table);
        let outcome = AblationOutcome {
            suite,
            cells,
            table,
            checks,
        };
        create_dir(&dir)?;
        for (i, r) in outcome.cells.iter().enumerate() {
            r.write(&dir.join(format!("{i:02}_{}", slug(&r.label))))?;
        }
        let mut w = csv::Writer::from_path(dir.join("table.csv")).map_err(|e| Error::Format(e.to_string()))?;
        for row in &outcome.table {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(dir.join("table.csv"), e))?;
        write_json(
            &(&outcome.suite, &outcome.table, &outcome.checks),
            &dir.join("comparison.json"),
        )?;
        Ok(outcome)
    }

    fn ablation_checks(&self, suite: Suite, table: &[CellSummary]) -> Vec<Check> {
        let c = &self.config.checks;
        let make = |name: String, ok: bool, detail: String| {
            if c.ablation {
                Check::gate(name, ok, detail)
            } else {
                Check::info(name, ok, detail)
            }
        };
        let get = |name: &str| table.iter().find(|t| t.cell == name).map(|t| t.verbose_mean);
        let mut out = Vec::new();
        match suite {
            Suite::Losses => {
                if let Some(full) = get(&LossSet::ALL.to_string()) {
                    for single in ["L1", "L2", "L3"] {
                        if let Some(s) = get(single) {
                            out.push(make(
                                format!("full_ge_{single}"),
                                full >= s,
                                format!("full {full} vs {single} {s}"),
                            ));
                        }
                    }
                }
            }
            Suite::Schedule => {
                if let (Some(both), Some(neither)) = (get("decay+momentum"), get("neither")) {
                    out.push(make(
                        "decay_momentum_gain".into(),
                        both >= c.schedule_gain * neither,
                        format!("decay+momentum {both} vs {} x neither {neither}", c.schedule_gain),
                    ));
                }
            }
            Suite::Epsilon => {
                let means: Vec<f64> = table.iter().map(|t| t.verbose_mean).collect();
                let inversions: Vec<f64> = means
                    .windows(2)
                    .filter(|w| w[1] < w[0])
                    .map(|w| (w[0] - w[1]) / w[0])
                    .collect();
                let ok = inversions.len() <= 1 && inversions.iter().all(|&d| d <= c.epsilon_max_inversion);
                out.push(make(
                    "length_monotone_in_epsilon".into(),
                    ok,
                    format!("means {means:?}, relative drops {inversions:?}"),
                ));
                for (name, vals) in [
                    ("linf", table.iter().map(|t| t.mean_linf).collect::<Vec<_>>()),
                    ("l2", table.iter().map(|t| t.mean_l2).collect()),
                ] {
                    out.push(make(
                        format!("{name}_increases_with_epsilon"),
                        vals.windows(2).all(|w| w[1] > w[0]),
                        format!("{vals:?}"),
                    ));
                }
            }
            Suite::Policy => {
                for t in table {
                    let detail = format!("verbose {} vs original {}", t.verbose_mean, t.original_mean);
                    let ok = t.verbose_mean > t.original_mean;
                    out.push(if t.cell.starts_with("beam") {
                        Check::info(format!("longer_under_{}", t.cell), ok, detail)
                    } else {
                        make(format!("longer_under_{}", t.cell), ok, detail)
                    });
                }
            }
            Suite::MaxLen => {
                for t in table {
                    out.push(Check::info(
                        format!("longer_under_{}", t.cell),
                        t.verbose_mean > t.original_mean,
                        format!("verbose {} vs original {}", t.verbose_mean, t.original_mean),
                    ));
                }
            }
        }
        out
    }

    /// Crafts on the primary model and evaluates on it (white-box) and on
    /// `transfer.model_b` (black-box), alongside the clean images on the
    /// second model.
    pub fn transfer(&self) -> Result<Report> {
        let model_a = Self::load_model(&self.config.model_path())?;
        let path_b = self
            .config
            .transfer
            .model_b
            .clone()
            .ok_or_else(|| Error::Config("transfer.model_b is required for transfer".into()))?;
        let model_b = Self::load_model(&path_b)?;
        let policies = labeled(self.config.eval.decode_policies()?);
        let meter = self.meter()?;
        let spec_a = RunSpec {
            model: &model_a,
            attack: self.attack_config(&self.config.attack, &policies)?,
            policies: policies.clone(),
            baselines: Vec::new(),
            meter,
            save: None,
        };
        let spec_b = RunSpec {
            model: &model_b,
            attack: spec_a.attack.clone(),
            policies,
            baselines: Vec::new(),
            meter,
            save: None,
        };
        let images = self.test_images(&model_a, self.config.data.test_size);
        let mut rows = Vec::new();
        for &seed in &self.config.experiment.seeds {
            let per: Vec<Vec<ImageRow>> = self.pool.install(|| {
                images
                    .par_iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let cfg = AttackConfig {
                            seed: derive_seed(seed, i),
                            eval_policies: Vec::new(),
                            ..spec_a.attack.clone()
                        };
                        let adv = craft_verbose_image(&model_a, x, &cfg)?.x_adv;
                        let mut r = Self::eval_rows(&spec_b, seed, i, "original", x, x)?;
                        r.extend(Self::eval_rows(&spec_a, seed, i, "white_box", &adv, x)?);
                        r.extend(Self::eval_rows(&spec_b, seed, i, "black_box", &adv, x)?);
                        Ok(r)
                    })
                    .collect::<Result<_>>()
            })?;
            rows.extend(per.into_iter().flatten());
        }
        let mut report = Report::new("transfer", "", &self.config, rows);
        let p0 = spec_a.policies[0].label.clone();
        let m = |k: &str| report.mean_length(k, &p0).unwrap_or(f64::NAN);
        let (o, w, b) = (m("original"), m("white_box"), m("black_box"));
        report.checks = vec![
            Self::budget_check(&report.rows, spec_a.attack.epsilon),
            Check::info("black_box_ge_original", b >= o, format!("black-box {b} vs original {o}")),
            Check::info(
                "white_gt_black_gt_original",
                w > b && b > o,
                format!("white-box {w}, black-box {b}, original {o}"),
            ),
        ];
        report.write(&self.output_dir().join("transfer"))?;
        Ok(report)
    }

    /// Forced-length sweeps on the calling thread (never on the pool, so
    /// timings see no concurrent harness load).
    pub fn meter_sweep(&self) -> Result<MeterOutcome> {
        let model = Self::load_model(&self.config.model_path())?;
        let mc = &self.config.meter;
        let meter = self.meter()?;
        let max = mc.lengths.iter().copied().max().unwrap_or(1);
        let policy = DecodePolicy::greedy(max);
        let images = self.test_images(&model, mc.images.max(1));
        let mut sweeps = Vec::new();
        let mut rows = Vec::new();
        for (i, x) in images.iter().enumerate() {
            let sweep = length_sweep(&meter, &model, x, &policy, &mc.lengths, mc.reps)?;
            for p in &sweep.points {
                for &w in &p.wall_seconds {
                    rows.push(MeterRow {
                        image_id: i,
                        policy: policy.to_string(),
                        tokens: p.tokens,
                        decoder_calls: p.tokens,
                        flops: p.flops,
                        wall_seconds: w,
                        proxy_energy: p.proxy_energy,
                    });
                }
            }
            sweeps.push(sweep);
        }
        let mut checks = Vec::new();
        let c = &self.config.checks;
        for (i, s) in sweeps.iter().enumerate() {
            if let Some(min) = c.min_flops_r2 {
                checks.push(Check::gate(
                    format!("flops_r2_image{i}"),
                    s.flops_fit.r_squared >= min,
                    format!("{} >= {min}", s.flops_fit.r_squared),
                ));
            }
            if let Some(min) = c.min_wall_r2 {
                checks.push(
                    Check::gate(
                        format!("wall_r2_image{i}"),
                        s.wall_fit.r_squared >= min,
                        format!("{} >= {min}", s.wall_fit.r_squared),
                    )
                    .timed(),
                );
            }
        }
        let outcome = MeterOutcome { sweeps, checks };
        let dir = self.output_dir().join("meter");
        create_dir(&dir)?;
        let file = std::fs::File::create(dir.join("meter.csv")).map_err(|e| Error::io(dir.join("meter.csv"), e))?;
        crate::metering::write_meter_csv(&rows, std::io::BufWriter::new(file))?;
        write_json(&outcome, &dir.join("sweep.json"))?;
        Ok(outcome)
    }
}

/// Parses `s<seed>_i<id>_<method>`.
fn parse_image_name(stem: &str) -> Option<(u64, usize, String)> {
    let mut parts = stem.splitn(3, '_');
    let seed = parts.next()?.strip_prefix('s')?.parse().ok()?;
    let id = parts.next()?.strip_prefix('i')?.parse().ok()?;
    let method = parts.next()?.to_string();
    Some((seed, id, method))
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}
