//! Experiment files in, artifact files out.
//!
//! A run is described by one TOML file. `load_config` reads and fully
//! validates it (every problem is reported, not just the first),
//! `run_experiment` executes it and writes CSVs, a plot script, a
//! metadata file, and a manifest into the output directory. Nothing
//! written depends on the clock, so rerunning the same file reproduces
//! every artifact byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{
    decay_rate_fit, l1_distance, reference_solution_entropy, relative_entropy, DecaySeries,
    DiagError,
};
use crate::equilibrium::{EquilibriumError, EquilibriumProfile};
use crate::fp::{stability_bound, FpConfig, FpEquation, FpError, FpSolver, SolveRecord};
use crate::grid::{GridError, GridField};
use crate::model::{InteractionKernel, ModelError, ModelParams, MAX_DIM};
use crate::particles::{
    histogram_of_positions, run as run_sde, sample_initial_mixture, MixtureComponent,
    ParticleError, SdeConfig, SdeSystem, TrajectoryRecord,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    ReadFile { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    WriteFile { path: PathBuf, source: std::io::Error },
    #[error("{path} is not a valid experiment file: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("cannot serialize configuration: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    BadConfig(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Fp(#[from] FpError),
    #[error(transparent)]
    Particle(#[from] ParticleError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

/// What a run does with its configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Equilibrium,
    Particles,
    Fp,
    Compare,
    Entropy,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Equilibrium => "equilibrium",
            ExperimentKind::Particles => "particles",
            ExperimentKind::Fp => "fp",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Entropy => "entropy",
        }
    }
}

/// Model parameters as written in a file; `mu` may be spelled out and is
/// then checked against `1 - lambda` instead of silently recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub sigma2: f64,
    pub delta: f64,
    pub x0: Vec<f64>,
}

impl ModelBlock {
    pub fn build(&self) -> Result<ModelParams, Vec<String>> {
        let mut issues = Vec::new();
        if let Some(mu) = self.mu {
            if !((self.lambda + mu - 1.0).abs() <= 1e-12) {
                issues.push(format!(
                    "lambda + mu must equal 1, got {} + {} = {}",
                    self.lambda,
                    mu,
                    self.lambda + mu
                ));
            }
        }
        match ModelParams::new(self.lambda, self.sigma2, self.delta, self.x0.clone()) {
            Ok(p) if issues.is_empty() => Ok(p),
            Ok(_) => Err(issues),
            Err(ModelError::Invalid(mut list)) => {
                issues.append(&mut list);
                Err(issues)
            }
            Err(e) => {
                issues.push(e.to_string());
                Err(issues)
            }
        }
    }
}

/// Node-centered rectangular grid, one entry per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nx: Vec<usize>,
}

impl GridBlock {
    pub fn build(&self) -> Result<GridField, GridError> {
        GridField::new(self.lo.len(), &self.lo, &self.hi, &self.nx)
    }
}

/// Initial condition: a named preset or an explicit Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<MixtureComponent>,
}

pub const INITIAL_PRESETS: [&str; 4] = ["f0_test1", "f0_test21", "init2D", "f0_test2"];

/// The mixture behind a preset name, if the name is known.
pub fn preset_mixture(name: &str) -> Option<Vec<MixtureComponent>> {
    let c = |weight: f64, mean: Vec<f64>, var: f64| MixtureComponent { weight, mean, var };
    match name {
        // two bumps at +-2, three quarters of the mass on the left
        "f0_test1" => Some(vec![c(0.75, vec![-2.0], 0.1), c(0.25, vec![2.0], 0.1)]),
        // same bumps, tighter
        "f0_test21" => Some(vec![c(0.75, vec![-2.0], 0.05), c(0.25, vec![2.0], 0.05)]),
        // four corner bumps, heavier on the off-diagonal pair
        "init2D" => Some(vec![
            c(0.375, vec![1.0, -1.0], 0.2),
            c(0.375, vec![-1.0, 1.0], 0.2),
            c(0.125, vec![1.0, 1.0], 0.2),
            c(0.125, vec![-1.0, -1.0], 0.2),
        ]),
        // two bumps on the x1 = 2 line
        "f0_test2" => Some(vec![
            c(0.75, vec![2.0, -2.0], 0.05),
            c(0.25, vec![2.0, 2.0], 0.05),
        ]),
        _ => None,
    }
}

impl InitialBlock {
    pub fn resolve(&self) -> Result<Vec<MixtureComponent>, String> {
        match (&self.preset, self.components.is_empty()) {
            (Some(name), true) => preset_mixture(name).ok_or_else(|| {
                format!(
                    "unknown initial preset '{name}'; valid presets: {}",
                    INITIAL_PRESETS.join(", ")
                )
            }),
            (None, false) => Ok(self.components.clone()),
            (Some(_), false) => {
                Err("initial condition: give a preset or explicit components, not both".into())
            }
            (None, true) => {
                Err("initial condition: needs a preset name or a component list".into())
            }
        }
    }
}

/// Agent-run parameters. `systems` selects which stochastic systems a
/// `particles` run steps; `compare` runs take the system from each pair
/// instead and leave it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeBlock {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub systems: Vec<SdeSystem>,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default)]
    pub record_every: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshot_times: Vec<f64>,
}

impl SdeBlock {
    fn config(&self, system: SdeSystem, snapshot_times: Vec<f64>) -> SdeConfig {
        SdeConfig {
            system,
            dt: self.dt,
            t_end: self.t_end,
            record_every: self.record_every,
            snapshot_times,
        }
    }
}

/// Which constant of the steady-state family is prescribed; the other
/// follows. With neither given, the model's own diffusion is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
}

/// One agent-system/grid-equation pairing to run side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparePair {
    pub sde: SdeSystem,
    pub fp: FpEquation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareBlock {
    /// Times at which both sides are sampled and compared.
    pub snapshot_times: Vec<f64>,
    pub pairs: Vec<ComparePair>,
}

/// What the decaying relative entropy is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyReference {
    /// Closed-form steady state from the model's diffusion constant.
    Equilibrium,
    /// A long fine-grid solve of the same equation, restricted to the
    /// run's grid.
    FineSolve,
}

/// Fine-grid reference solve. Bounds come from the run's grid block;
/// `dt` defaults to 80% of the stability bound when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineSolveBlock {
    pub nx: Vec<usize>,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

fn default_samples() -> usize {
    61
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyBlock {
    /// Relaxation strengths to sweep; empty means the model's own.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambdas: Vec<f64>,
    pub reference: EntropyReference,
    /// Number of equally spaced measurement times over `[0, t_end]`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Time window for the decay-rate fits; omitted skips fitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine: Option<FineSolveBlock>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment file, fully deserialized. Blocks are optional at the
/// type level; `validate` enforces what each kind actually needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelBlock,
    #[serde(default)]
    pub kernel: InteractionKernel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp: Option<FpConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sde: Option<SdeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equilibrium: Option<EquilibriumBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyBlock>,
}

/// Reads and validates an experiment file. Every detected problem is
/// listed in the error, so one pass over the message fixes the file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, IoError> {
    let text = fs::read_to_string(path)
        .map_err(|source| IoError::ReadFile { path: path.to_path_buf(), source })?;
    let config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| IoError::Parse { path: path.to_path_buf(), source: Box::new(e) })?;
    let issues = validate_config(&config);
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(IoError::BadConfig(issues))
    }
}

/// Writes a config back out as TOML; `load_config` on the result gives
/// the same config.
pub fn write_config(config: &ExperimentConfig, path: &Path) -> Result<(), IoError> {
    let text = toml::to_string_pretty(config)?;
    fs::write(path, text)
        .map_err(|source| IoError::WriteFile { path: path.to_path_buf(), source })?;
    Ok(())
}

/// All configuration problems, empty when the config is runnable.
pub fn validate_config(config: &ExperimentConfig) -> Vec<String> {
    let mut issues = Vec::new();
    let params = match config.model.build() {
        Ok(p) => Some(p),
        Err(mut list) => {
            issues.append(&mut list);
            None
        }
    };
    let dim = config.model.x0.len();
    issues.extend(config.kernel.validate());

    let mixture = config.initial.as_ref().map(|block| match block.resolve() {
        Ok(components) => {
            for (k, c) in components.iter().enumerate() {
                if c.mean.len() != dim {
                    issues.push(format!(
                        "initial component {k}: mean has {} entries, model is {dim}-dimensional",
                        c.mean.len()
                    ));
                }
                if !(c.weight >= 0.0) {
                    issues.push(format!("initial component {k}: negative weight {}", c.weight));
                }
                if !(c.var >= 0.0) || !c.var.is_finite() {
                    issues.push(format!("initial component {k}: unusable variance {}", c.var));
                }
            }
            let total: f64 = components.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-12 {
                issues.push(format!("initial mixture weights sum to {total}, expected 1"));
            }
            Some(components)
        }
        Err(msg) => {
            issues.push(msg);
            None
        }
    });
    let mixture = mixture.flatten();

    let grid = config.grid.as_ref().and_then(|block| {
        if block.lo.len() != dim || block.hi.len() != dim || block.nx.len() != dim {
            issues.push(format!(
                "grid block: lo/hi/nx have {}/{}/{} entries, model is {dim}-dimensional",
                block.lo.len(),
                block.hi.len(),
                block.nx.len()
            ));
            return None;
        }
        match block.build() {
            Ok(g) => Some(g),
            Err(e) => {
                issues.push(format!("grid block: {e}"));
                None
            }
        }
    });

    let grid_initial_positive = |issues: &mut Vec<String>, mixture: &Option<Vec<MixtureComponent>>| {
        if let Some(components) = mixture {
            for (k, c) in components.iter().enumerate() {
                if !(c.var > 0.0) {
                    issues.push(format!(
                        "initial component {k}: grid runs need positive variance, got {}",
                        c.var
                    ));
                }
            }
        }
    };

    let check_fp = |issues: &mut Vec<String>, uses_snapshot_times: bool| {
        let Some(fp) = &config.fp else {
            issues.push("this experiment kind needs an [fp] block".into());
            return;
        };
        if !(fp.dt > 0.0) || !fp.dt.is_finite() {
            issues.push(format!("fp block: dt must be positive and finite, got {}", fp.dt));
        }
        if !(fp.t_end >= 0.0) {
            issues.push(format!("fp block: t_end must be nonnegative, got {}", fp.t_end));
        }
        if !uses_snapshot_times && !fp.snapshot_times.is_empty() {
            issues.push(
                "fp block: this experiment kind derives its own snapshot times; \
                 remove snapshot_times"
                    .into(),
            );
        }
        if let (Some(p), Some(g)) = (&params, &grid) {
            let bound = stability_bound(p, fp.equation, g);
            if fp.dt > bound {
                issues.push(format!(
                    "fp block: dt = {} exceeds the diffusion stability bound {bound:.3e} \
                     for this grid",
                    fp.dt
                ));
            }
        }
        if fp.equation != FpEquation::Discontinuous && !config.kernel.is_uniform() {
            issues.push(format!(
                "fp block: the {:?} equation is defined for the uniform interaction only",
                fp.equation
            )
            .to_lowercase());
        }
        if fp.integrator == crate::fp::FpIntegrator::Splitting
            && fp.equation != FpEquation::Surrogate
        {
            issues.push("fp block: the splitting integrator applies to the surrogate equation".into());
        }
    };

    let check_sde = |issues: &mut Vec<String>, wants_systems: bool| {
        let Some(sde) = &config.sde else {
            issues.push("this experiment kind needs an [sde] block".into());
            return;
        };
        if sde.n == 0 {
            issues.push("sde block: n must be at least 1".into());
        }
        if !(sde.dt > 0.0) || !sde.dt.is_finite() {
            issues.push(format!("sde block: dt must be positive and finite, got {}", sde.dt));
        }
        if !(sde.t_end >= 0.0) {
            issues.push(format!("sde block: t_end must be nonnegative, got {}", sde.t_end));
        }
        if wants_systems {
            if sde.systems.is_empty() {
                issues.push("sde block: list at least one system to run".into());
            }
            if sde.systems.contains(&SdeSystem::Surrogate) && !config.kernel.is_uniform() {
                issues.push(
                    "sde block: the surrogate system is defined for the uniform \
                     interaction only"
                        .into(),
                );
            }
        } else {
            if !sde.systems.is_empty() {
                issues.push(
                    "sde block: compare runs take systems from the pair list; remove systems"
                        .into(),
                );
            }
            if !sde.snapshot_times.is_empty() {
                issues.push(
                    "sde block: compare runs use the shared snapshot times; \
                     remove snapshot_times"
                        .into(),
                );
            }
        }
    };

    match config.kind {
        ExperimentKind::Equilibrium => {
            if grid.is_none() && config.grid.is_none() {
                issues.push("equilibrium runs need a [grid] block to sample the profile on".into());
            }
            if !config.kernel.is_uniform() {
                issues.push(
                    "equilibrium runs describe the uniform-interaction steady state; \
                     the closed form does not cover other kernels"
                        .into(),
                );
            }
            if let Some(block) = &config.equilibrium {
                if block.inner_mass.is_some() && block.sigma2.is_some() {
                    issues.push(
                        "equilibrium block: give inner_mass or sigma2, not both".into(),
                    );
                }
                if let Some(m2) = block.inner_mass {
                    if !(m2 > 0.0 && m2 < 1.0) {
                        issues.push(format!(
                            "equilibrium block: inner_mass must lie in (0, 1), got {m2}"
                        ));
                    }
                }
                if let Some(s) = block.sigma2 {
                    if !(s > 0.0) {
                        issues.push(format!(
                            "equilibrium block: sigma2 must be positive, got {s}"
                        ));
                    }
                }
            }
        }
        ExperimentKind::Particles => {
            if config.initial.is_none() {
                issues.push("particle runs need an [initial] block".into());
            }
            check_sde(&mut issues, true);
        }
        ExperimentKind::Fp => {
            if config.initial.is_none() {
                issues.push("grid runs need an [initial] block".into());
            }
            if config.grid.is_none() {
                issues.push("grid runs need a [grid] block".into());
            }
            grid_initial_positive(&mut issues, &mixture);
            check_fp(&mut issues, true);
        }
        ExperimentKind::Compare => {
            if config.initial.is_none() {
                issues.push("compare runs need an [initial] block".into());
            }
            if config.grid.is_none() {
                issues.push("compare runs need a [grid] block".into());
            }
            grid_initial_positive(&mut issues, &mixture);
            check_fp(&mut issues, false);
            check_sde(&mut issues, false);
            match &config.compare {
                None => issues.push("compare runs need a [compare] block".into()),
                Some(block) => {
                    if block.pairs.is_empty() {
                        issues.push("compare block: list at least one pair".into());
                    }
                    if block.snapshot_times.is_empty() {
                        issues.push("compare block: list at least one snapshot time".into());
                    }
                    if !block.snapshot_times.windows(2).all(|w| w[0] < w[1]) {
                        issues.push(
                            "compare block: snapshot times must be strictly increasing".into(),
                        );
                    }
                    let t_cap = config
                        .fp
                        .as_ref()
                        .map(|f| f.t_end)
                        .unwrap_or(f64::INFINITY)
                        .min(config.sde.as_ref().map(|s| s.t_end).unwrap_or(f64::INFINITY));
                    for &t in &block.snapshot_times {
                        if !(t >= 0.0 && t <= t_cap + 1e-12) {
                            issues.push(format!(
                                "compare block: snapshot time {t} lies outside [0, {t_cap}]"
                            ));
                        }
                    }
                    for pair in &block.pairs {
                        if pair.sde == SdeSystem::Surrogate && !config.kernel.is_uniform() {
                            issues.push(
                                "compare block: a surrogate-system pair needs the uniform \
                                 interaction"
                                    .into(),
                            );
                        }
                    }
                }
            }
        }
        ExperimentKind::Entropy => {
            if config.initial.is_none() {
                issues.push("entropy runs need an [initial] block".into());
            }
            if config.grid.is_none() {
                issues.push("entropy runs need a [grid] block".into());
            }
            grid_initial_positive(&mut issues, &mixture);
            check_fp(&mut issues, false);
            match &config.entropy {
                None => issues.push("entropy runs need an [entropy] block".into()),
                Some(block) => {
                    if block.samples < 2 {
                        issues.push(format!(
                            "entropy block: samples must be at least 2, got {}",
                            block.samples
                        ));
                    }
                    for &l in &block.lambdas {
                        if !(l > 0.0 && l < 1.0) {
                            issues.push(format!(
                                "entropy block: lambda values must lie in (0, 1), got {l}"
                            ));
                        }
                    }
                    if let Some((a, b)) = block.fit_window {
                        if !(a < b) {
                            issues.push(format!(
                                "entropy block: fit window [{a}, {b}] is empty"
                            ));
                        }
                    }
                    match block.reference {
                        EntropyReference::Equilibrium => {
                            if !config.kernel.is_uniform() {
                                issues.push(
                                    "entropy block: the closed-form reference needs the \
                                     uniform interaction; use reference = \"fine_solve\""
                                        .into(),
                                );
                            }
                        }
                        EntropyReference::FineSolve => match &block.fine {
                            None => issues.push(
                                "entropy block: reference = \"fine_solve\" needs a \
                                 [entropy.fine] block"
                                    .into(),
                            ),
                            Some(fine) => {
                                if fine.nx.len() != dim {
                                    issues.push(format!(
                                        "entropy.fine: nx has {} entries, model is \
                                         {dim}-dimensional",
                                        fine.nx.len()
                                    ));
                                }
                                if !(fine.t_end > 0.0) {
                                    issues.push(format!(
                                        "entropy.fine: t_end must be positive, got {}",
                                        fine.t_end
                                    ));
                                }
                                if let Some(dt) = fine.dt {
                                    if !(dt > 0.0) {
                                        issues.push(format!(
                                            "entropy.fine: dt must be positive, got {dt}"
                                        ));
                                    }
                                }
                            }
                        },
                    }
                }
            }
        }
    }
    issues
}

/// Files written by a run, with the lines the CLI prints.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub output_dir: PathBuf,
    /// Relative file names in the order they were written.
    pub files: Vec<String>,
    pub summary: Vec<String>,
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    version: &'a str,
    config: &'a ExperimentConfig,
}

/// Executes a validated configuration. Artifacts land in
/// `config.output_dir` (created on demand): CSVs, a matplotlib script,
/// `metadata.toml` with the resolved config, and `manifest.txt` listing
/// every file.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest, IoError> {
    let issues = validate_config(config);
    if !issues.is_empty() {
        return Err(IoError::BadConfig(issues));
    }
    fs::create_dir_all(&config.output_dir).map_err(|source| IoError::WriteFile {
        path: config.output_dir.clone(),
        source,
    })?;
    let mut man = RunManifest {
        output_dir: config.output_dir.clone(),
        files: Vec::new(),
        summary: Vec::new(),
    };
    match config.kind {
        ExperimentKind::Equilibrium => run_equilibrium(config, &mut man)?,
        ExperimentKind::Particles => run_particles(config, &mut man)?,
        ExperimentKind::Fp => run_fp(config, &mut man)?,
        ExperimentKind::Compare => run_compare(config, &mut man)?,
        ExperimentKind::Entropy => run_entropy(config, &mut man)?,
    }
    let script = plot_script(config, &man);
    write_text(&mut man, &config.output_dir, "plot.py", &script)?;
    let meta = RunMetadata { version: env!("CARGO_PKG_VERSION"), config };
    let meta_text = toml::to_string_pretty(&meta)?;
    write_text(&mut man, &config.output_dir, "metadata.toml", &meta_text)?;
    let mut listing = man.files.join("\n");
    listing.push('\n');
    write_text(&mut man, &config.output_dir, "manifest.txt", &listing)?;
    Ok(man)
}

fn write_text(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
    text: &str,
) -> Result<(), IoError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| IoError::WriteFile { path, source })?;
    man.files.push(name.to_string());
    Ok(())
}

fn csv_writer(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
) -> Result<csv::Writer<fs::File>, IoError> {
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|source| IoError::WriteFile { path, source })?;
    man.files.push(name.to_string());
    Ok(csv::Writer::from_writer(file))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Stacked field snapshots: `t,x1[,x2],f`.
fn write_snapshots_csv(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
    snapshots: &[(f64, GridField)],
) -> Result<(), IoError> {
    let Some((_, first)) = snapshots.first() else { return Ok(()) };
    let dim = first.dim();
    let mut w = csv_writer(man, dir, name)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..dim).map(|a| format!("x{}", a + 1)));
    header.push("f".into());
    w.write_record(&header)?;
    let mut pt = [0.0f64; MAX_DIM];
    for (t, field) in snapshots {
        for idx in 0..field.len() {
            field.point_at(idx, &mut pt);
            let mut row = vec![fmt(*t)];
            row.extend(pt[..dim].iter().map(|&c| fmt(c)));
            row.push(fmt(field.values()[idx]));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|source| IoError::WriteFile { path: dir.join(name), source })?;
    Ok(())
}

/// One field without a time column: `x1[,x2],f`.
fn write_field_csv(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
    field: &GridField,
) -> Result<(), IoError> {
    let dim = field.dim();
    let mut w = csv_writer(man, dir, name)?;
    let mut header: Vec<String> = (0..dim).map(|a| format!("x{}", a + 1)).collect();
    header.push("f".into());
    w.write_record(&header)?;
    let mut pt = [0.0f64; MAX_DIM];
    for idx in 0..field.len() {
        field.point_at(idx, &mut pt);
        let mut row: Vec<String> = pt[..dim].iter().map(|&c| fmt(c)).collect();
        row.push(fmt(field.values()[idx]));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::WriteFile { path: dir.join(name), source })?;
    Ok(())
}

/// Axis marginals of stacked 2D snapshots: `t,axis,x,f`.
fn write_marginals_csv(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
    snapshots: &[(f64, GridField)],
) -> Result<(), IoError> {
    let mut w = csv_writer(man, dir, name)?;
    w.write_record(["t", "axis", "x", "f"])?;
    for (t, field) in snapshots {
        for axis in 0..field.dim() {
            let m = field.marginal(axis)?;
            for i in 0..m.len() {
                w.write_record([
                    fmt(*t),
                    format!("{}", axis + 1),
                    fmt(m.node(0, i)),
                    fmt(m.values()[i]),
                ])?;
            }
        }
    }
    w.flush().map_err(|source| IoError::WriteFile { path: dir.join(name), source })?;
    Ok(())
}

/// Grid-run moment history: `t,mass,mean_x1[,mean_x2],energy,entropy`.
fn write_timeseries_csv(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
    rec: &SolveRecord,
    dim: usize,
) -> Result<(), IoError> {
    let mut w = csv_writer(man, dir, name)?;
    let mut header = vec!["t".to_string(), "mass".to_string()];
    header.extend((0..dim).map(|a| format!("mean_x{}", a + 1)));
    header.push("energy".into());
    header.push("entropy".into());
    w.write_record(&header)?;
    for k in 0..rec.times.len() {
        let mut row = vec![fmt(rec.times[k]), fmt(rec.mass[k])];
        row.extend(rec.mean[k][..dim].iter().map(|&c| fmt(c)));
        row.push(fmt(rec.energy[k]));
        row.push(fmt(rec.entropy[k]));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::WriteFile { path: dir.join(name), source })?;
    Ok(())
}

/// Agent-run moment history: `t,mean_x1[,mean_x2],energy`.
fn write_trajectory_csv(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
    rec: &TrajectoryRecord,
    dim: usize,
) -> Result<(), IoError> {
    let mut w = csv_writer(man, dir, name)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..dim).map(|a| format!("mean_x{}", a + 1)));
    header.push("energy".into());
    w.write_record(&header)?;
    for k in 0..rec.times.len() {
        let mut row = vec![fmt(rec.times[k])];
        row.extend(rec.means[k][..dim].iter().map(|&c| fmt(c)));
        row.push(fmt(rec.energies[k]));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::WriteFile { path: dir.join(name), source })?;
    Ok(())
}

/// Raw agent positions: `index,x1[,x2]`.
fn write_positions_csv(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
    positions: &[f64],
    dim: usize,
) -> Result<(), IoError> {
    let mut w = csv_writer(man, dir, name)?;
    let mut header = vec!["index".to_string()];
    header.extend((0..dim).map(|a| format!("x{}", a + 1)));
    w.write_record(&header)?;
    for (i, p) in positions.chunks_exact(dim).enumerate() {
        let mut row = vec![format!("{i}")];
        row.extend(p.iter().map(|&c| fmt(c)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::WriteFile { path: dir.join(name), source })?;
    Ok(())
}

/// Decay series: `t,value`.
fn write_decay_csv(
    man: &mut RunManifest,
    dir: &Path,
    name: &str,
    series: &DecaySeries,
) -> Result<(), IoError> {
    let mut w = csv_writer(man, dir, name)?;
    w.write_record(["t", "value"])?;
    for (t, v) in series.times.iter().zip(&series.values) {
        w.write_record([fmt(*t), fmt(*v)])?;
    }
    w.flush().map_err(|source| IoError::WriteFile { path: dir.join(name), source })?;
    Ok(())
}

fn system_tag(system: SdeSystem) -> &'static str {
    match system {
        SdeSystem::Discontinuous => "discontinuous",
        SdeSystem::Surrogate => "surrogate",
    }
}

fn equation_tag(equation: FpEquation) -> &'static str {
    match equation {
        FpEquation::Discontinuous => "discontinuous",
        FpEquation::Surrogate => "surrogate",
        FpEquation::Nonlocal => "nonlocal",
    }
}

/// Density of a Gaussian mixture sampled at the nodes of `template`.
pub fn mixture_density(components: &[MixtureComponent], template: &GridField) -> GridField {
    let mut f = template.like();
    let dim = template.dim();
    let mut pt = [0.0f64; MAX_DIM];
    for idx in 0..f.len() {
        f.point_at(idx, &mut pt);
        let mut s = 0.0;
        for c in components {
            let mut e = 0.0;
            for a in 0..dim {
                let d = pt[a] - c.mean[a];
                e += d * d;
            }
            let norm = (2.0 * std::f64::consts::PI * c.var).powi(dim as i32).sqrt();
            s += c.weight * (-e / (2.0 * c.var)).exp() / norm;
        }
        f.values_mut()[idx] = s;
    }
    f
}

/// Steady-state profile matching the run's model, sampled on `template`
/// and normalized to unit discrete mass (as the solvers normalize their
/// data, so distances and entropies compare like with like).
fn sampled_equilibrium(
    params: &ModelParams,
    template: &GridField,
) -> Result<GridField, IoError> {
    let profile =
        EquilibriumProfile::from_sigma2(params.sigma2, params.delta, params.x0.clone())?;
    let mut f = GridField::from_fn(
        template.dim(),
        &(0..template.dim()).map(|a| template.lo(a)).collect::<Vec<_>>(),
        &(0..template.dim()).map(|a| template.hi(a)).collect::<Vec<_>>(),
        &(0..template.dim()).map(|a| template.nx(a)).collect::<Vec<_>>(),
        |x| profile.eval(x),
    )?;
    f.normalize_mass()?;
    Ok(f)
}

fn run_equilibrium(config: &ExperimentConfig, man: &mut RunManifest) -> Result<(), IoError> {
    let params = config.model.build().map_err(IoError::BadConfig)?;
    let grid = config.grid.as_ref().expect("validated").build()?;
    let block = config.equilibrium.clone().unwrap_or(EquilibriumBlock {
        inner_mass: None,
        sigma2: None,
    });
    let profile = if let Some(m2) = block.inner_mass {
        EquilibriumProfile::from_inner_mass(m2, params.delta, params.x0.clone())?
    } else {
        let s = block.sigma2.unwrap_or(params.sigma2);
        EquilibriumProfile::from_sigma2(s, params.delta, params.x0.clone())?
    };
    man.summary.push(format!(
        "steady state: m1 = {}, m2 = {}, sigma2 = {}, delta = {}",
        profile.m1, profile.m2, profile.sigma2, profile.delta
    ));
    let mut f = grid.like();
    let mut pt = [0.0f64; MAX_DIM];
    for idx in 0..f.len() {
        f.point_at(idx, &mut pt);
        f.values_mut()[idx] = profile.eval(&pt[..profile.dim]);
    }
    man.summary.push(format!("discrete mass on the output grid: {}", f.mass()));
    write_field_csv(man, &config.output_dir, "equilibrium.csv", &f)?;
    if f.dim() == 2 {
        let snaps = [(0.0, f)];
        write_marginals_csv(man, &config.output_dir, "equilibrium_marginals.csv", &snaps)?;
    }
    Ok(())
}

fn run_particles(config: &ExperimentConfig, man: &mut RunManifest) -> Result<(), IoError> {
    let params = config.model.build().map_err(IoError::BadConfig)?;
    let mixture = config
        .initial
        .as_ref()
        .expect("validated")
        .resolve()
        .map_err(|m| IoError::BadConfig(vec![m]))?;
    let sde = config.sde.as_ref().expect("validated");
    let grid = match &config.grid {
        Some(block) => Some(block.build()?),
        None => None,
    };
    let dim = params.dim;
    for &system in &sde.systems {
        let tag = system_tag(system);
        let mut ens = sample_initial_mixture(&mixture, sde.n, dim, config.seed)?;
        let cfg = sde.config(system, sde.snapshot_times.clone());
        let rec = run_sde(&mut ens, &params, &config.kernel, &cfg)?;
        write_trajectory_csv(
            man,
            &config.output_dir,
            &format!("sde_{tag}_trajectory.csv"),
            &rec,
            dim,
        )?;
        for (t, positions) in &rec.snapshots {
            write_positions_csv(
                man,
                &config.output_dir,
                &format!("sde_{tag}_particles_t{}.csv", fmt(*t)),
                positions,
                dim,
            )?;
        }
        if let Some(template) = &grid {
            let mut hists = Vec::new();
            let mut spilled = 0u64;
            for (t, positions) in &rec.snapshots {
                let (hist, overflow) = histogram_of_positions(positions, dim, template)?;
                spilled += overflow;
                hists.push((*t, hist));
            }
            if !hists.is_empty() {
                write_snapshots_csv(
                    man,
                    &config.output_dir,
                    &format!("sde_{tag}_hist.csv"),
                    &hists,
                )?;
                if dim == 2 {
                    write_marginals_csv(
                        man,
                        &config.output_dir,
                        &format!("sde_{tag}_marginals.csv"),
                        &hists,
                    )?;
                }
                if spilled > 0 {
                    man.summary.push(format!(
                        "{tag}: {spilled} agent snapshots fell outside the grid"
                    ));
                }
            }
        }
        let last = rec.means.last().expect("run records at least t = 0");
        man.summary.push(format!(
            "{tag}: n = {}, final mean = {:?}, final energy = {}",
            sde.n,
            &last[..dim],
            rec.energies.last().unwrap()
        ));
    }
    if let Some(template) = &grid {
        if config.kernel.is_uniform() {
            let eq = sampled_equilibrium(&params, template)?;
            write_field_csv(man, &config.output_dir, "equilibrium.csv", &eq)?;
            if dim == 2 {
                let snaps = [(0.0, eq)];
                write_marginals_csv(
                    man,
                    &config.output_dir,
                    "equilibrium_marginals.csv",
                    &snaps,
                )?;
            }
        }
    }
    Ok(())
}

fn run_fp(config: &ExperimentConfig, man: &mut RunManifest) -> Result<(), IoError> {
    let params = config.model.build().map_err(IoError::BadConfig)?;
    let mixture = config
        .initial
        .as_ref()
        .expect("validated")
        .resolve()
        .map_err(|m| IoError::BadConfig(vec![m]))?;
    let grid = config.grid.as_ref().expect("validated").build()?;
    let cfg = config.fp.clone().expect("validated");
    let dim = params.dim;
    let field = mixture_density(&mixture, &grid);
    let mut solver = FpSolver::new(params.clone(), config.kernel);
    let rec = solver.solve(field, &cfg)?;
    let tag = equation_tag(cfg.equation);
    write_timeseries_csv(
        man,
        &config.output_dir,
        &format!("fp_{tag}_timeseries.csv"),
        &rec,
        dim,
    )?;
    let mut snapshots = rec.snapshots;
    let at_end = snapshots
        .last()
        .map(|(t, _)| (t - cfg.t_end).abs() < 1e-12)
        .unwrap_or(false);
    if !at_end {
        snapshots.push((cfg.t_end, rec.final_field.clone()));
    }
    write_snapshots_csv(man, &config.output_dir, &format!("fp_{tag}_snapshots.csv"), &snapshots)?;
    if dim == 2 {
        write_marginals_csv(
            man,
            &config.output_dir,
            &format!("fp_{tag}_marginals.csv"),
            &snapshots,
        )?;
    }
    if config.kernel.is_uniform() {
        let eq = sampled_equilibrium(&params, &grid)?;
        write_field_csv(man, &config.output_dir, "equilibrium.csv", &eq)?;
        if dim == 2 {
            let snaps = [(0.0, eq)];
            write_marginals_csv(man, &config.output_dir, "equilibrium_marginals.csv", &snaps)?;
        }
    }
    man.summary.push(format!(
        "fp {tag}: t = {}, mass = {}, energy = {}, entropy = {}",
        rec.times.last().unwrap(),
        rec.mass.last().unwrap(),
        rec.energy.last().unwrap(),
        rec.entropy.last().unwrap()
    ));
    Ok(())
}

fn run_compare(config: &ExperimentConfig, man: &mut RunManifest) -> Result<(), IoError> {
    let params = config.model.build().map_err(IoError::BadConfig)?;
    let mixture = config
        .initial
        .as_ref()
        .expect("validated")
        .resolve()
        .map_err(|m| IoError::BadConfig(vec![m]))?;
    let grid = config.grid.as_ref().expect("validated").build()?;
    let fp_base = config.fp.clone().expect("validated");
    let sde = config.sde.as_ref().expect("validated");
    let compare = config.compare.as_ref().expect("validated");
    let dim = params.dim;
    let times = &compare.snapshot_times;

    // run each distinct grid equation and agent system once, then pair up
    let mut fp_runs: Vec<(FpEquation, Vec<(f64, GridField)>)> = Vec::new();
    let mut sde_runs: Vec<(SdeSystem, Vec<(f64, GridField)>)> = Vec::new();
    for pair in &compare.pairs {
        if !fp_runs.iter().any(|(e, _)| *e == pair.fp) {
            let mut cfg = fp_base.clone();
            cfg.equation = pair.fp;
            cfg.snapshot_times = times.clone();
            let field = mixture_density(&mixture, &grid);
            let mut solver = FpSolver::new(params.clone(), config.kernel);
            let rec = solver.solve(field, &cfg)?;
            if rec.snapshots.len() != times.len() {
                return Err(IoError::BadConfig(vec![format!(
                    "snapshot times collide after snapping to the grid solver step {}",
                    cfg.dt
                )]));
            }
            let tag = equation_tag(pair.fp);
            write_timeseries_csv(
                man,
                &config.output_dir,
                &format!("fp_{tag}_timeseries.csv"),
                &rec,
                dim,
            )?;
            write_snapshots_csv(
                man,
                &config.output_dir,
                &format!("fp_{tag}_snapshots.csv"),
                &rec.snapshots,
            )?;
            if dim == 2 {
                write_marginals_csv(
                    man,
                    &config.output_dir,
                    &format!("fp_{tag}_marginals.csv"),
                    &rec.snapshots,
                )?;
            }
            fp_runs.push((pair.fp, rec.snapshots));
        }
        if !sde_runs.iter().any(|(s, _)| *s == pair.sde) {
            let tag = system_tag(pair.sde);
            let mut ens = sample_initial_mixture(&mixture, sde.n, dim, config.seed)?;
            let cfg = sde.config(pair.sde, times.clone());
            let rec = run_sde(&mut ens, &params, &config.kernel, &cfg)?;
            if rec.snapshots.len() != times.len() {
                return Err(IoError::BadConfig(vec![format!(
                    "snapshot times collide after snapping to the agent step {}",
                    cfg.dt
                )]));
            }
            let mut hists = Vec::with_capacity(times.len());
            for (t, positions) in &rec.snapshots {
                let (hist, _overflow) = histogram_of_positions(positions, dim, &grid)?;
                hists.push((*t, hist));
            }
            write_trajectory_csv(
                man,
                &config.output_dir,
                &format!("sde_{tag}_trajectory.csv"),
                &rec,
                dim,
            )?;
            write_snapshots_csv(
                man,
                &config.output_dir,
                &format!("sde_{tag}_hist.csv"),
                &hists,
            )?;
            if dim == 2 {
                write_marginals_csv(
                    man,
                    &config.output_dir,
                    &format!("sde_{tag}_marginals.csv"),
                    &hists,
                )?;
            }
            sde_runs.push((pair.sde, hists));
        }
    }

    for pair in &compare.pairs {
        let (_, fields) = fp_runs.iter().find(|(e, _)| *e == pair.fp).unwrap();
        let (_, hists) = sde_runs.iter().find(|(s, _)| *s == pair.sde).unwrap();
        let mut values = Vec::with_capacity(times.len());
        for ((_, hist), (_, field)) in hists.iter().zip(fields) {
            values.push(l1_distance(hist, field)?);
        }
        let series = DecaySeries::new(
            times.clone(),
            values,
            format!("L1 distance, {} agents vs {} grid", system_tag(pair.sde), equation_tag(pair.fp)),
        )?;
        let name = format!(
            "l1_sde_{}_fp_{}.csv",
            system_tag(pair.sde),
            equation_tag(pair.fp)
        );
        write_decay_csv(man, &config.output_dir, &name, &series)?;
        man.summary.push(format!(
            "{} vs {}: L1 at t = {} is {}",
            system_tag(pair.sde),
            equation_tag(pair.fp),
            times.last().unwrap(),
            series.values.last().unwrap()
        ));
    }

    if config.kernel.is_uniform() {
        let eq = sampled_equilibrium(&params, &grid)?;
        write_field_csv(man, &config.output_dir, "equilibrium.csv", &eq)?;
        if dim == 2 {
            let snaps = [(0.0, eq)];
            write_marginals_csv(man, &config.output_dir, "equilibrium_marginals.csv", &snaps)?;
        }
    }
    Ok(())
}

fn run_entropy(config: &ExperimentConfig, man: &mut RunManifest) -> Result<(), IoError> {
    let base_params = config.model.build().map_err(IoError::BadConfig)?;
    let mixture = config
        .initial
        .as_ref()
        .expect("validated")
        .resolve()
        .map_err(|m| IoError::BadConfig(vec![m]))?;
    let grid = config.grid.as_ref().expect("validated").build()?;
    let fp_base = config.fp.clone().expect("validated");
    let block = config.entropy.as_ref().expect("validated");
    let dim = base_params.dim;

    let lambdas = if block.lambdas.is_empty() {
        vec![base_params.lambda]
    } else {
        block.lambdas.clone()
    };
    let samples = block.samples;
    let snapshot_times: Vec<f64> = (0..samples)
        .map(|k| fp_base.t_end * k as f64 / (samples - 1) as f64)
        .collect();

    let equilibrium_reference = match block.reference {
        EntropyReference::Equilibrium => {
            let eq = sampled_equilibrium(&base_params, &grid)?;
            write_field_csv(man, &config.output_dir, "equilibrium.csv", &eq)?;
            Some(eq)
        }
        EntropyReference::FineSolve => None,
    };

    for &lambda in &lambdas {
        let params = ModelParams::new(
            lambda,
            base_params.sigma2,
            base_params.delta,
            base_params.x0.clone(),
        )?;
        let ltag = fmt(lambda);
        let mut cfg = fp_base.clone();
        cfg.snapshot_times = snapshot_times.clone();
        let field = mixture_density(&mixture, &grid);
        let mut solver = FpSolver::new(params.clone(), config.kernel);
        let rec = solver.solve(field, &cfg)?;
        write_timeseries_csv(
            man,
            &config.output_dir,
            &format!("fp_lambda{ltag}_timeseries.csv"),
            &rec,
            dim,
        )?;

        let series = match block.reference {
            EntropyReference::Equilibrium => {
                let reference = equilibrium_reference.as_ref().unwrap();
                let mut times = Vec::with_capacity(rec.snapshots.len());
                let mut values = Vec::with_capacity(rec.snapshots.len());
                for (t, f) in &rec.snapshots {
                    times.push(*t);
                    values.push(relative_entropy(f, reference)?);
                }
                DecaySeries::new(
                    times,
                    values,
                    format!("relative entropy vs steady state, lambda = {lambda}"),
                )?
            }
            EntropyReference::FineSolve => {
                let fine_block = block.fine.as_ref().expect("validated");
                let fine_grid = GridField::new(
                    dim,
                    &(0..dim).map(|a| grid.lo(a)).collect::<Vec<_>>(),
                    &(0..dim).map(|a| grid.hi(a)).collect::<Vec<_>>(),
                    &fine_block.nx,
                )?;
                let dt = fine_block
                    .dt
                    .unwrap_or_else(|| 0.8 * stability_bound(&params, cfg.equation, &fine_grid));
                let fine_cfg = FpConfig {
                    equation: cfg.equation,
                    integrator: crate::fp::FpIntegrator::Rk4,
                    dt,
                    t_end: fine_block.t_end,
                    record_every: 0,
                    snapshot_times: Vec::new(),
                };
                let fine_field = mixture_density(&mixture, &fine_grid);
                let mut fine_solver = FpSolver::new(params.clone(), config.kernel);
                let fine_rec = fine_solver.solve(fine_field, &fine_cfg)?;
                let mut series = reference_solution_entropy(&rec.snapshots, &fine_rec.final_field)?;
                series.meta = format!(
                    "relative entropy vs fine-grid reference at t = {}, lambda = {lambda}",
                    fine_block.t_end
                );
                let restricted =
                    crate::diagnostics::restrict_reference(&fine_rec.final_field, &grid)?;
                write_field_csv(
                    man,
                    &config.output_dir,
                    &format!("reference_lambda{ltag}.csv"),
                    &restricted,
                )?;
                series
            }
        };
        write_decay_csv(man, &config.output_dir, &format!("decay_lambda{ltag}.csv"), &series)?;
        man.summary.push(format!(
            "lambda = {lambda}: relative entropy {} -> {} over [0, {}]",
            series.values.first().unwrap(),
            series.values.last().unwrap(),
            cfg.t_end
        ));
        if let Some(window) = block.fit_window {
            let fit = decay_rate_fit(&series, window)?;
            write_text(
                man,
                &config.output_dir,
                &format!("fit_lambda{ltag}.txt"),
                &format!("{}\n", fit.report()),
            )?;
            man.summary.push(format!(
                "lambda = {lambda}: exponential rate {} (rms log residual {:.2e})",
                fit.exp_rate, fit.exp_residual
            ));
        }
    }
    Ok(())
}

/// A matplotlib script that renders the run's CSVs; grouped by file-name
/// patterns so it stays in step with what was actually written.
fn plot_script(config: &ExperimentConfig, man: &RunManifest) -> String {
    let dim = config.model.x0.len();
    let files = &man.files;
    let has = |name: &str| files.iter().any(|f| f == name);
    let matching = |prefix: &str, suffix: &str| {
        files
            .iter()
            .filter(|f| f.starts_with(prefix) && f.ends_with(suffix))
            .cloned()
            .collect::<Vec<_>>()
    };

    let mut s = String::new();
    s.push_str(
        "#!/usr/bin/env python3\n\
         \"\"\"Render this run's CSV artifacts; writes PNGs next to the script.\"\"\"\n\
         import csv\n\
         import os\n\
         \n\
         import matplotlib\n\
         matplotlib.use(\"Agg\")\n\
         import matplotlib.pyplot as plt\n\
         \n\
         HERE = os.path.dirname(os.path.abspath(__file__))\n\
         \n\
         \n\
         def read(name):\n\
         \x20   with open(os.path.join(HERE, name)) as fh:\n\
         \x20       return list(csv.DictReader(fh))\n\
         \n\
         \n\
         def col(rows, key):\n\
         \x20   return [float(r[key]) for r in rows]\n\
         \n\
         \n\
         def by_time(rows):\n\
         \x20   groups = {}\n\
         \x20   for r in rows:\n\
         \x20       groups.setdefault(float(r[\"t\"]), []).append(r)\n\
         \x20   return sorted(groups.items())\n\
         \n\
         \n\
         def save(fig, name):\n\
         \x20   fig.tight_layout()\n\
         \x20   fig.savefig(os.path.join(HERE, name), dpi = 150)\n\
         \x20   plt.close(fig)\n\
         \x20   print(\"wrote\", name)\n\n",
    );

    let density_sources: Vec<(String, bool)> = if dim == 1 {
        let mut v: Vec<(String, bool)> = matching("fp_", "_snapshots.csv")
            .into_iter()
            .map(|f| (f, false))
            .collect();
        v.extend(matching("sde_", "_hist.csv").into_iter().map(|f| (f, true)));
        v
    } else {
        let mut v: Vec<(String, bool)> = matching("fp_", "_marginals.csv")
            .into_iter()
            .map(|f| (f, false))
            .collect();
        v.extend(matching("sde_", "_marginals.csv").into_iter().map(|f| (f, true)));
        v
    };

    if !density_sources.is_empty() {
        if dim == 1 {
            let _ = writeln!(s, "fig, ax = plt.subplots(figsize = (7, 4.5))");
            for (name, steps) in &density_sources {
                let style = if *steps { ", drawstyle = \"steps-mid\"" } else { "" };
                let _ = writeln!(
                    s,
                    "for t, rows in by_time(read(\"{name}\")):\n\
                     \x20   ax.plot(col(rows, \"x1\"), col(rows, \"f\"), \
                     label = \"{stem} t = \" + str(t){style})",
                    stem = name.trim_end_matches(".csv"),
                );
            }
            if has("equilibrium.csv") {
                let _ = writeln!(
                    s,
                    "rows = read(\"equilibrium.csv\")\n\
                     ax.plot(col(rows, \"x1\"), col(rows, \"f\"), \"k--\", label = \"steady state\")",
                );
            }
            s.push_str(
                "ax.set_xlabel(\"x\")\nax.set_ylabel(\"density\")\n\
                 ax.legend(fontsize = 7)\nsave(fig, \"fig_density.png\")\n\n",
            );
        } else {
            let _ = writeln!(s, "fig, axes = plt.subplots(1, 2, figsize = (10, 4))");
            for (name, steps) in &density_sources {
                let style = if *steps { ", drawstyle = \"steps-mid\"" } else { "" };
                let _ = writeln!(
                    s,
                    "rows = read(\"{name}\")\n\
                     last_t = max(float(r[\"t\"]) for r in rows)\n\
                     for axis in (1, 2):\n\
                     \x20   sel = [r for r in rows if float(r[\"t\"]) == last_t \
                     and r[\"axis\"] == str(axis)]\n\
                     \x20   axes[axis - 1].plot(col(sel, \"x\"), col(sel, \"f\"), \
                     label = \"{stem}\"{style})",
                    stem = name.trim_end_matches(".csv"),
                );
            }
            if has("equilibrium_marginals.csv") {
                let _ = writeln!(
                    s,
                    "rows = read(\"equilibrium_marginals.csv\")\n\
                     for axis in (1, 2):\n\
                     \x20   sel = [r for r in rows if r[\"axis\"] == str(axis)]\n\
                     \x20   axes[axis - 1].plot(col(sel, \"x\"), col(sel, \"f\"), \"k--\", \
                     label = \"steady state\")",
                );
            }
            s.push_str(
                "for axis in (1, 2):\n\
                 \x20   axes[axis - 1].set_xlabel(\"x\" + str(axis))\n\
                 \x20   axes[axis - 1].set_ylabel(\"marginal density\")\n\
                 \x20   axes[axis - 1].legend(fontsize = 7)\n\
                 save(fig, \"fig_marginals.png\")\n\n",
            );
            for name in matching("fp_", "_snapshots.csv") {
                let nx1 = config.grid.as_ref().map(|g| g.nx[1]).unwrap_or(1);
                let _ = writeln!(
                    s,
                    "rows = read(\"{name}\")\n\
                     last_t = max(float(r[\"t\"]) for r in rows)\n\
                     sel = [r for r in rows if float(r[\"t\"]) == last_t]\n\
                     vals = col(sel, \"f\")\n\
                     nx1 = {nx1}\n\
                     image = [vals[i:i + nx1] for i in range(0, len(vals), nx1)]\n\
                     fig, ax = plt.subplots(figsize = (5.5, 4.5))\n\
                     extent = (min(col(sel, \"x2\")), max(col(sel, \"x2\")), \
                     min(col(sel, \"x1\")), max(col(sel, \"x1\")))\n\
                     im = ax.imshow(image, origin = \"lower\", extent = extent, aspect = \"auto\")\n\
                     fig.colorbar(im, ax = ax, label = \"density\")\n\
                     ax.set_xlabel(\"x2\")\n\
                     ax.set_ylabel(\"x1\")\n\
                     ax.set_title(\"t = \" + str(last_t))\n\
                     save(fig, \"fig_heatmap_{stem}.png\")\n",
                    stem = name.trim_end_matches(".csv"),
                );
            }
        }
    }

    let decay_files: Vec<String> = files
        .iter()
        .filter(|f| (f.starts_with("decay_") || f.starts_with("l1_")) && f.ends_with(".csv"))
        .cloned()
        .collect();
    if !decay_files.is_empty() {
        let _ = writeln!(s, "fig, ax = plt.subplots(figsize = (6.5, 4.5))");
        for name in &decay_files {
            let _ = writeln!(
                s,
                "rows = read(\"{name}\")\n\
                 ax.semilogy(col(rows, \"t\"), col(rows, \"value\"), \
                 marker = \"o\", markersize = 3, label = \"{stem}\")",
                stem = name.trim_end_matches(".csv"),
            );
        }
        s.push_str(
            "ax.set_xlabel(\"t\")\nax.set_ylabel(\"distance to reference\")\n\
             ax.legend(fontsize = 8)\nax.grid(True, which = \"both\", alpha = 0.3)\n\
             save(fig, \"fig_decay.png\")\n\n",
        );
    }

    let moment_files: Vec<String> = files
        .iter()
        .filter(|f| f.ends_with("_timeseries.csv") || f.ends_with("_trajectory.csv"))
        .cloned()
        .collect();
    if !moment_files.is_empty() {
        let _ = writeln!(s, "fig, axes = plt.subplots(1, 2, figsize = (10, 4))");
        for name in &moment_files {
            let _ = writeln!(
                s,
                "rows = read(\"{name}\")\n\
                 axes[0].plot(col(rows, \"t\"), col(rows, \"mean_x1\"), label = \"{stem}\")\n\
                 axes[1].plot(col(rows, \"t\"), col(rows, \"energy\"), label = \"{stem}\")",
                stem = name.trim_end_matches(".csv"),
            );
        }
        s.push_str(
            "axes[0].set_xlabel(\"t\")\naxes[0].set_ylabel(\"mean (first axis)\")\n\
             axes[0].legend(fontsize = 7)\n\
             axes[1].set_xlabel(\"t\")\naxes[1].set_ylabel(\"energy\")\n\
             axes[1].legend(fontsize = 7)\n\
             save(fig, \"fig_moments.png\")\n",
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn base_model() -> ModelBlock {
        ModelBlock {
            lambda: 0.2,
            mu: None,
            sigma2: 0.2,
            delta: 0.5,
            x0: vec![0.0],
        }
    }

    #[test]
    fn presets_resolve_and_unknown_names_are_listed() {
        for name in INITIAL_PRESETS {
            let components = preset_mixture(name).unwrap();
            let total: f64 = components.iter().map(|c| c.weight).sum();
            assert!((total - 1.0).abs() < 1e-15, "{name}");
        }
        let block = InitialBlock { preset: Some("nope".into()), components: vec![] };
        let msg = block.resolve().unwrap_err();
        for name in INITIAL_PRESETS {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = ExperimentConfig {
            kind: ExperimentKind::Compare,
            seed: 42,
            output_dir: PathBuf::from("out/check"),
            model: base_model(),
            kernel: InteractionKernel::CuckerSmale { gamma: 1.0 },
            initial: Some(InitialBlock { preset: Some("f0_test1".into()), components: vec![] }),
            grid: Some(GridBlock { lo: vec![-5.0], hi: vec![5.0], nx: vec![101] }),
            fp: Some(FpConfig {
                equation: FpEquation::Discontinuous,
                integrator: crate::fp::FpIntegrator::Rk4,
                dt: 1e-4,
                t_end: 1.0,
                record_every: 100,
                snapshot_times: vec![],
            }),
            sde: Some(SdeBlock {
                n: 1000,
                systems: vec![],
                dt: 1e-2,
                t_end: 1.0,
                record_every: 10,
                snapshot_times: vec![],
            }),
            equilibrium: None,
            compare: Some(CompareBlock {
                snapshot_times: vec![0.5, 1.0],
                pairs: vec![ComparePair {
                    sde: SdeSystem::Discontinuous,
                    fp: FpEquation::Discontinuous,
                }],
            }),
            entropy: None,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.toml");
        write_config(&config, &path).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(loaded, config);
    }

    #[test]
    fn validation_reports_every_problem_at_once() {
        let config = ExperimentConfig {
            kind: ExperimentKind::Fp,
            seed: 0,
            output_dir: default_output_dir(),
            model: ModelBlock {
                lambda: 1.5,
                mu: Some(0.2),
                sigma2: -1.0,
                delta: 0.5,
                x0: vec![0.0],
            },
            kernel: InteractionKernel::Uniform,
            initial: None,
            grid: None,
            fp: None,
            sde: None,
            equilibrium: None,
            compare: None,
            entropy: None,
        };
        let issues = validate_config(&config);
        assert!(issues.len() >= 4, "expected several issues, got {issues:?}");
        assert!(issues.iter().any(|m| m.contains("lambda + mu")));
        assert!(issues.iter().any(|m| m.contains("[fp]")));
    }

    #[test]
    fn unknown_kernel_kind_is_rejected_with_candidates() {
        let text = r#"
            kind = "fp"
            [model]
            lambda = 0.2
            sigma2 = 0.2
            delta = 0.5
            x0 = [0.0]
            [kernel]
            kind = "gravity"
        "#;
        let err = toml::from_str::<ExperimentConfig>(text).unwrap_err().to_string();
        assert!(err.contains("uniform"), "{err}");
        assert!(err.contains("cucker_smale"), "{err}");
    }

    #[test]
    fn mixture_density_has_unit_mass_on_a_wide_grid() {
        let components = preset_mixture("f0_test1").unwrap();
        let grid = GridField::new(1, &[-8.0], &[8.0], &[401]).unwrap();
        let f = mixture_density(&components, &grid);
        assert!((f.mass() - 1.0).abs() < 1e-8, "mass {}", f.mass());
    }

    #[test]
    fn equilibrium_run_writes_identical_bytes_on_rerun() {
        let dir = tempdir().unwrap();
        let config = ExperimentConfig {
            kind: ExperimentKind::Equilibrium,
            seed: 0,
            output_dir: dir.path().join("run"),
            model: base_model(),
            kernel: InteractionKernel::Uniform,
            initial: None,
            grid: Some(GridBlock { lo: vec![-5.0], hi: vec![5.0], nx: vec![101] }),
            fp: None,
            sde: None,
            equilibrium: Some(EquilibriumBlock { inner_mass: Some(0.8), sigma2: None }),
            compare: None,
            entropy: None,
        };
        let man = run_experiment(&config).unwrap();
        assert!(man.files.contains(&"equilibrium.csv".to_string()));
        assert!(man.files.contains(&"metadata.toml".to_string()));
        assert!(man.files.contains(&"plot.py".to_string()));
        assert!(man.files.contains(&"manifest.txt".to_string()));
        assert!(man.summary.iter().any(|l| l.contains("m1")));
        let first: Vec<Vec<u8>> = man
            .files
            .iter()
            .map(|f| fs::read(config.output_dir.join(f)).unwrap())
            .collect();
        let man2 = run_experiment(&config).unwrap();
        assert_eq!(man.files, man2.files);
        for (name, bytes) in man.files.iter().zip(&first) {
            let again = fs::read(config.output_dir.join(name)).unwrap();
            assert_eq!(&again, bytes, "{name} changed between identical runs");
        }
    }

    #[test]
    fn shipped_presets_load_and_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
        let mut seen = 0;
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_none_or(|e| e != "toml") {
                continue;
            }
            let config = load_config(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let issues = validate_config(&config);
            assert!(issues.is_empty(), "{}: {issues:?}", path.display());
            seen += 1;
        }
        assert!(seen >= 15, "only {seen} preset files found");
    }

    #[test]
    fn tiny_fp_run_produces_expected_artifacts() {
        let dir = tempdir().unwrap();
        let config = ExperimentConfig {
            kind: ExperimentKind::Fp,
            seed: 0,
            output_dir: dir.path().join("run"),
            model: base_model(),
            kernel: InteractionKernel::Uniform,
            initial: Some(InitialBlock { preset: Some("f0_test1".into()), components: vec![] }),
            grid: Some(GridBlock { lo: vec![-5.0], hi: vec![5.0], nx: vec![41] }),
            fp: Some(FpConfig {
                equation: FpEquation::Surrogate,
                integrator: crate::fp::FpIntegrator::Rk4,
                dt: 1e-3,
                t_end: 0.05,
                record_every: 10,
                snapshot_times: vec![0.0, 0.05],
            }),
            sde: None,
            equilibrium: None,
            compare: None,
            entropy: None,
        };
        let man = run_experiment(&config).unwrap();
        assert!(man.files.contains(&"fp_surrogate_timeseries.csv".to_string()));
        assert!(man.files.contains(&"fp_surrogate_snapshots.csv".to_string()));
        assert!(man.files.contains(&"equilibrium.csv".to_string()));
        let text = fs::read_to_string(config.output_dir.join("fp_surrogate_timeseries.csv"))
            .unwrap();
        assert!(text.starts_with("t,mass,mean_x1,energy,entropy\n"), "{text}");
        let manifest = fs::read_to_string(config.output_dir.join("manifest.txt")).unwrap();
        assert!(manifest.contains("plot.py"));
        assert!(manifest.contains("metadata.toml"));
    }
}
