//! Interacting-agent simulation by Euler-Maruyama time stepping.
//!
//! Each agent carries its own counter-based RNG stream, so a run is
//! reproducible from the seed alone, independent of thread count. Steps
//! are synchronous: every drift is evaluated at the pre-step positions
//! before any agent moves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridField};
use crate::model::{kappa_eval, InteractionKernel, ModelParams, MAX_DIM};

#[derive(Debug, Error)]
pub enum ParticleError {
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    BadConfig(Vec<String>),
    #[error("ensemble is {got}-dimensional, model is {expected}-dimensional")]
    DimMismatch { expected: usize, got: usize },
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("a position became non-finite during step {step}")]
    NonFinite { step: usize },
    #[error("the mean-reverting system needs the uniform interaction")]
    SurrogateNeedsUniform,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// One Gaussian component of an initial mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

/// Flattened agent positions plus one RNG stream per agent.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<f64>,
    time: f64,
    rngs: Vec<ChaCha8Rng>,
    seed: u64,
}

impl ParticleEnsemble {
    pub fn n(&self) -> usize {
        self.rngs.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Positions flattened agent-major: `[x0_1..x0_d, x1_1..x1_d, ...]`.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Empirical mean, summed in agent order.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.positions.chunks_exact(self.dim) {
            for (acc, x) in m.iter_mut().zip(p) {
                *acc += x;
            }
        }
        let n = self.n() as f64;
        for acc in &mut m {
            *acc /= n;
        }
        m
    }

    /// Empirical second moment `(1/2N) sum |x|^2`.
    pub fn energy(&self) -> f64 {
        let s: f64 = self.positions.iter().map(|x| x * x).sum();
        0.5 * s / self.n() as f64
    }

    fn assert_finite(&self, step: usize) -> Result<(), ParticleError> {
        if self.positions.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(ParticleError::NonFinite { step })
        }
    }
}

/// Draws `n` agents from a Gaussian mixture. Agent `i` owns RNG stream
/// `i` of the seeded generator and keeps drawing from it for the rest of
/// its trajectory.
pub fn sample_initial_mixture(
    components: &[MixtureComponent],
    n: usize,
    dim: usize,
    seed: u64,
) -> Result<ParticleEnsemble, ParticleError> {
    let mut issues = Vec::new();
    if n == 0 {
        issues.push("need at least one agent".into());
    }
    if dim == 0 || dim > MAX_DIM {
        issues.push(format!("dim must be 1 or 2, got {dim}"));
    }
    if components.is_empty() {
        issues.push("mixture needs at least one component".into());
    }
    let mut total = 0.0;
    for (k, c) in components.iter().enumerate() {
        if !(c.weight >= 0.0) {
            issues.push(format!("component {k}: weight {} is negative", c.weight));
        }
        if !(c.var >= 0.0) || !c.var.is_finite() {
            issues.push(format!("component {k}: variance {} is unusable", c.var));
        }
        if c.mean.len() != dim {
            issues.push(format!(
                "component {k}: mean has {} entries, expected {dim}",
                c.mean.len()
            ));
        }
        total += c.weight;
    }
    if !issues.is_empty() {
        return Err(ParticleError::BadConfig(issues));
    }
    if (total - 1.0).abs() > 1e-12 {
        return Err(ParticleError::BadConfig(vec![format!(
            "mixture weights sum to {total}, expected 1"
        )]));
    }

    let mut positions = vec![0.0; n * dim];
    let mut rngs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut chosen = components.len() - 1;
        for (k, c) in components.iter().enumerate() {
            cum += c.weight;
            if u < cum {
                chosen = k;
                break;
            }
        }
        let c = &components[chosen];
        let sd = c.var.sqrt();
        for a in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            positions[i * dim + a] = c.mean[a] + sd * z;
        }
        rngs.push(rng);
    }
    Ok(ParticleEnsemble { dim, positions, time: 0.0, rngs, seed })
}

fn check_step(ens: &ParticleEnsemble, params: &ModelParams, dt: f64) -> Result<(), ParticleError> {
    if ens.dim != params.dim {
        return Err(ParticleError::DimMismatch { expected: params.dim, got: ens.dim });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(ParticleError::BadStep(dt));
    }
    Ok(())
}

/// One Euler-Maruyama step of the discontinuous system: drift toward the
/// target switched off inside the ball, constant-strength noise
/// everywhere. The pairwise term uses the antisymmetry of `P(x,y)(x-y)`
/// to halve the work; with the uniform kernel it collapses to
/// `x - mean` and the quadratic loop is skipped.
pub fn em_step_discontinuous(
    ens: &mut ParticleEnsemble,
    params: &ModelParams,
    kernel: &InteractionKernel,
    dt: f64,
) -> Result<(), ParticleError> {
    check_step(ens, params, dt)?;
    let dim = ens.dim;
    let n = ens.n();
    let inv_n = 1.0 / n as f64;
    let noise = (2.0 * params.sigma2 * dt).sqrt();

    let interaction: Vec<f64> = if kernel.is_uniform() {
        let mean = ens.mean();
        ens.positions
            .chunks_exact(dim)
            .flat_map(|p| (0..dim).map(|a| p[a] - mean[a]).collect::<Vec<_>>())
            .collect()
    } else {
        let mut acc = vec![0.0; n * dim];
        let pos = &ens.positions;
        for i in 0..n {
            for j in (i + 1)..n {
                let mut d2 = 0.0;
                for a in 0..dim {
                    let d = pos[i * dim + a] - pos[j * dim + a];
                    d2 += d * d;
                }
                let w = kernel.eval_dist2(d2);
                for a in 0..dim {
                    let v = w * (pos[i * dim + a] - pos[j * dim + a]);
                    acc[i * dim + a] += v;
                    acc[j * dim + a] -= v;
                }
            }
        }
        for v in &mut acc {
            *v *= inv_n;
        }
        acc
    };

    let lambda = params.lambda;
    let mu = params.mu;
    let x0 = &params.x0;
    let domain = params.domain();
    ens.positions
        .par_chunks_exact_mut(dim)
        .zip(ens.rngs.par_iter_mut())
        .zip(interaction.par_chunks_exact(dim))
        .for_each(|((p, rng), inter)| {
            let gate = domain.indicator_complement(p);
            for a in 0..dim {
                let drift = lambda * (p[a] - x0[a]) + mu * inter[a];
                let z: f64 = rng.sample(StandardNormal);
                p[a] += -gate * drift * dt + noise * z;
            }
        });
    ens.time += dt;
    Ok(())
}

/// One Euler-Maruyama step of the mean-reverting system: every agent
/// relaxes toward the blended center of the pre-step empirical mean and
/// the target, with noise boosted inside the ball so the drift's pull
/// flattens out there.
pub fn em_step_surrogate(
    ens: &mut ParticleEnsemble,
    params: &ModelParams,
    dt: f64,
) -> Result<(), ParticleError> {
    check_step(ens, params, dt)?;
    let dim = ens.dim;
    let mean = ens.mean();
    let mut center = [0.0; MAX_DIM];
    for a in 0..dim {
        center[a] = params.lambda * params.x0[a] + params.mu * mean[a];
    }
    let two_dt = 2.0 * dt;
    ens.positions
        .par_chunks_exact_mut(dim)
        .zip(ens.rngs.par_iter_mut())
        .for_each(|(p, rng)| {
            let kappa = kappa_eval(params, p, &center[..dim]);
            let noise = (two_dt * kappa).sqrt();
            for a in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                p[a] += -(p[a] - center[a]) * dt + noise * z;
            }
        });
    ens.time += dt;
    Ok(())
}

/// Which stochastic system to step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeSystem {
    Discontinuous,
    Surrogate,
}

/// Time-stepping plan for an agent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub system: SdeSystem,
    pub dt: f64,
    pub t_end: f64,
    /// Record moments every this many steps; 0 records endpoints only.
    #[serde(default)]
    pub record_every: usize,
    /// Times at which full position snapshots are kept.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

/// Moment history of one run plus any requested position snapshots.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub means: Vec<[f64; MAX_DIM]>,
    pub energies: Vec<f64>,
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

/// Steps the ensemble to `t_end`, recording moments along the way. The
/// final partial step is shortened so the run ends exactly at `t_end`.
pub fn run(
    ens: &mut ParticleEnsemble,
    params: &ModelParams,
    kernel: &InteractionKernel,
    cfg: &SdeConfig,
) -> Result<TrajectoryRecord, ParticleError> {
    let mut issues = Vec::new();
    if ens.dim != params.dim {
        issues.push(format!(
            "ensemble is {}-dimensional, model is {}-dimensional",
            ens.dim, params.dim
        ));
    }
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        issues.push(format!("dt must be positive and finite, got {}", cfg.dt));
    }
    if !(cfg.t_end >= 0.0) {
        issues.push(format!("t_end must be nonnegative, got {}", cfg.t_end));
    }
    if cfg.system == SdeSystem::Surrogate && !kernel.is_uniform() {
        issues.push("the mean-reverting system needs the uniform interaction".into());
    }
    for &t in &cfg.snapshot_times {
        if !(t >= 0.0 && t <= cfg.t_end + 1e-12) {
            issues.push(format!("snapshot time {t} lies outside [0, {}]", cfg.t_end));
        }
    }
    if !issues.is_empty() {
        return Err(ParticleError::BadConfig(issues));
    }

    let n_steps = if cfg.t_end > 0.0 {
        ((cfg.t_end / cfg.dt - 1e-9).ceil() as usize).max(1)
    } else {
        0
    };
    let mut snap_steps: Vec<usize> = cfg
        .snapshot_times
        .iter()
        .map(|t| ((t / cfg.dt).round() as usize).min(n_steps))
        .collect();
    snap_steps.sort_unstable();
    snap_steps.dedup();

    let mut rec = TrajectoryRecord {
        times: Vec::new(),
        means: Vec::new(),
        energies: Vec::new(),
        snapshots: Vec::new(),
    };
    let record = |rec: &mut TrajectoryRecord, t: f64, ens: &ParticleEnsemble| {
        rec.times.push(t);
        let m = ens.mean();
        let mut mean = [0.0; MAX_DIM];
        mean[..ens.dim].copy_from_slice(&m);
        rec.means.push(mean);
        rec.energies.push(ens.energy());
    };
    record(&mut rec, 0.0, ens);
    let mut next_snap = 0;
    if snap_steps.first() == Some(&0) {
        rec.snapshots.push((0.0, ens.positions.clone()));
        next_snap = 1;
    }

    for k in 0..n_steps {
        let dt_k = cfg.dt.min(cfg.t_end - k as f64 * cfg.dt);
        match cfg.system {
            SdeSystem::Discontinuous => em_step_discontinuous(ens, params, kernel, dt_k)?,
            SdeSystem::Surrogate => em_step_surrogate(ens, params, dt_k)?,
        }
        ens.assert_finite(k)?;
        let done = k + 1 == n_steps;
        let t1 = if done { cfg.t_end } else { (k + 1) as f64 * cfg.dt };
        ens.time = t1;
        if snap_steps.get(next_snap) == Some(&(k + 1)) {
            rec.snapshots.push((t1, ens.positions.clone()));
            next_snap += 1;
        }
        if done || (cfg.record_every > 0 && (k + 1) % cfg.record_every == 0) {
            record(&mut rec, t1, ens);
        }
    }
    Ok(rec)
}

/// Bins agents onto the nodes of a fresh grid. Each node owns the cell
/// of width `dx` centered on it; agents falling outside any axis count
/// toward the returned overflow instead. Node values are densities, so
/// the field's mass plus `overflow / n` recovers 1.
pub fn histogram(
    ens: &ParticleEnsemble,
    lo: &[f64],
    hi: &[f64],
    nx: &[usize],
) -> Result<(GridField, u64), ParticleError> {
    let field = GridField::new(ens.dim, lo, hi, nx)?;
    histogram_into(ens.positions(), ens.dim, field)
}

/// Same as [`histogram`] but reuses the geometry of an existing field,
/// for comparing against densities already living on a grid.
pub fn histogram_on_nodes(
    ens: &ParticleEnsemble,
    template: &GridField,
) -> Result<(GridField, u64), ParticleError> {
    histogram_of_positions(ens.positions(), ens.dim, template)
}

/// Bins a flat position buffer (agent-major, as stored in trajectory
/// snapshots) onto the geometry of `template`.
pub fn histogram_of_positions(
    positions: &[f64],
    dim: usize,
    template: &GridField,
) -> Result<(GridField, u64), ParticleError> {
    if template.dim() != dim {
        return Err(ParticleError::DimMismatch { expected: template.dim(), got: dim });
    }
    histogram_into(positions, dim, template.like())
}

fn histogram_into(
    positions: &[f64],
    dim: usize,
    mut field: GridField,
) -> Result<(GridField, u64), ParticleError> {
    let n = positions.len() / dim;
    let mut counts = vec![0u64; field.len()];
    let mut overflow = 0u64;
    let nx: Vec<usize> = (0..dim).map(|a| field.nx(a)).collect();
    'outer: for p in positions.chunks_exact(dim) {
        let mut idx = 0usize;
        for a in 0..dim {
            let k = ((p[a] - field.lo(a)) / field.dx(a) + 0.5).floor();
            if k < 0.0 || k >= nx[a] as f64 {
                overflow += 1;
                continue 'outer;
            }
            idx = idx * nx[a] + k as usize;
        }
        counts[idx] += 1;
    }
    let scale = 1.0 / (n as f64 * field.cell_volume());
    for (v, c) in field.values_mut().iter_mut().zip(&counts) {
        *v = *c as f64 * scale;
    }
    Ok((field, overflow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SwarmView;

    fn params_1d(lambda: f64) -> ModelParams {
        ModelParams::new(lambda, 0.2, 0.5, vec![0.0]).unwrap()
    }

    fn bimodal() -> Vec<MixtureComponent> {
        vec![
            MixtureComponent { weight: 0.75, mean: vec![-2.0], var: 0.1 },
            MixtureComponent { weight: 0.25, mean: vec![2.0], var: 0.1 },
        ]
    }

    #[test]
    fn sampling_is_reproducible_and_weighted() {
        let a = sample_initial_mixture(&bimodal(), 4000, 1, 7).unwrap();
        let b = sample_initial_mixture(&bimodal(), 4000, 1, 7).unwrap();
        assert_eq!(a.positions(), b.positions());
        let c = sample_initial_mixture(&bimodal(), 4000, 1, 8).unwrap();
        assert_ne!(a.positions(), c.positions());
        // mean of the mixture is 0.75*(-2) + 0.25*2 = -1
        let m = a.mean()[0];
        assert!((m + 1.0).abs() < 0.05, "mean {m}");
        let left = a.positions().iter().filter(|&&x| x < 0.0).count();
        let frac = left as f64 / 4000.0;
        assert!((frac - 0.75).abs() < 0.03, "left fraction {frac}");
    }

    #[test]
    fn rejects_bad_mixture() {
        let cs = vec![MixtureComponent { weight: 0.9, mean: vec![0.0], var: 0.1 }];
        assert!(matches!(
            sample_initial_mixture(&cs, 10, 1, 0),
            Err(ParticleError::BadConfig(_))
        ));
        let cs = vec![MixtureComponent { weight: 1.0, mean: vec![0.0, 0.0], var: 0.1 }];
        assert!(sample_initial_mixture(&cs, 10, 1, 0).is_err());
    }

    #[test]
    fn uniform_fast_path_matches_pairwise_drift() {
        // the uniform-kernel shortcut must agree with the generic
        // pairwise operator evaluated at one agent
        let params = params_1d(0.2);
        let kernel = InteractionKernel::Uniform;
        let ens = sample_initial_mixture(&bimodal(), 64, 1, 3).unwrap();
        let mean = ens.mean()[0];
        let x = ens.positions()[5];
        let b = crate::model::drift_B(
            &params,
            &kernel,
            &[x],
            &SwarmView::Particles { positions: ens.positions(), dim: 1 },
        )
        .unwrap();
        let shortcut = params.lambda * x + params.mu * (x - mean);
        assert!((b[0] - shortcut).abs() < 1e-12);
    }

    #[test]
    fn surrogate_mean_follows_relaxation_law() {
        // with the uniform interaction the empirical mean decouples from
        // the noise up to Monte Carlo error; check it against the
        // closed-form relaxation with a generous statistical margin
        let params = params_1d(0.5);
        let mut ens = sample_initial_mixture(&bimodal(), 20000, 1, 11).unwrap();
        let u0 = ens.mean()[0];
        let cfg = SdeConfig {
            system: SdeSystem::Surrogate,
            dt: 1e-3,
            t_end: 1.0,
            record_every: 0,
            snapshot_times: vec![],
        };
        let rec = run(&mut ens, &params, &InteractionKernel::Uniform, &cfg).unwrap();
        let exact = u0 * (-params.lambda * 1.0f64).exp();
        let got = rec.means.last().unwrap()[0];
        assert!((got - exact).abs() < 0.02, "mean {got} vs law {exact}");
    }

    #[test]
    fn histogram_accounts_for_every_agent() {
        let mut ens = sample_initial_mixture(&bimodal(), 5000, 1, 2).unwrap();
        let cfg = SdeConfig {
            system: SdeSystem::Discontinuous,
            dt: 1e-2,
            t_end: 0.5,
            record_every: 0,
            snapshot_times: vec![],
        };
        run(&mut ens, &params_1d(0.2), &InteractionKernel::Uniform, &cfg).unwrap();
        let (hist, overflow) = histogram(&ens, &[-3.0], &[3.0], &[61]).unwrap();
        let total = hist.mass() + overflow as f64 / 5000.0;
        assert!((total - 1.0).abs() < 1e-12, "total {total}");
        assert!(hist.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pairwise_kernel_run_is_deterministic() {
        let params = ModelParams::new(0.2, 0.2, 1.0, vec![0.0, 0.0]).unwrap();
        let kernel = InteractionKernel::CuckerSmale { gamma: 1.0 };
        let comps = vec![MixtureComponent { weight: 1.0, mean: vec![1.0, -1.0], var: 0.2 }];
        let cfg = SdeConfig {
            system: SdeSystem::Discontinuous,
            dt: 1e-2,
            t_end: 0.1,
            record_every: 0,
            snapshot_times: vec![],
        };
        let mut a = sample_initial_mixture(&comps, 300, 2, 5).unwrap();
        let mut b = sample_initial_mixture(&comps, 300, 2, 5).unwrap();
        run(&mut a, &params, &kernel, &cfg).unwrap();
        run(&mut b, &params, &kernel, &cfg).unwrap();
        assert_eq!(a.positions(), b.positions());
    }

    #[test]
    fn run_rejects_surrogate_with_pairwise_kernel() {
        let params = params_1d(0.2);
        let mut ens = sample_initial_mixture(&bimodal(), 10, 1, 0).unwrap();
        let cfg = SdeConfig {
            system: SdeSystem::Surrogate,
            dt: 1e-2,
            t_end: 0.1,
            record_every: 0,
            snapshot_times: vec![],
        };
        let err = run(&mut ens, &params, &InteractionKernel::CuckerSmale { gamma: 1.0 }, &cfg);
        assert!(matches!(err, Err(ParticleError::BadConfig(_))));
    }
}
