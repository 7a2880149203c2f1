//! End-to-end checks, one test per shipped guarantee. Each test drives the
//! public API the way a study script would and asserts the stated
//! tolerance; the criterion number in the name matches the shipped list in
//! the README.

use std::time::Instant;

use statrs::function::erf::erfc;
use swarmkin::diagnostics::{decay_rate_fit, l1_distance, relative_entropy, DecaySeries};
use swarmkin::equilibrium::{solve_constants_1d, solve_constants_2d, EquilibriumProfile};
use swarmkin::fp::{FpConfig, FpEquation, FpIntegrator, FpSolver};
use swarmkin::grid::GridField;
use swarmkin::io::{mixture_density, preset_mixture};
use swarmkin::model::{
    indicator_complement, kappa_eval, kernel_eval, mean_exact, InteractionKernel, ModelParams,
    TargetDomain,
};
use swarmkin::particles::{
    histogram_on_nodes, run, sample_initial_mixture, SdeConfig, SdeSystem,
};

const PI: f64 = std::f64::consts::PI;

/// Mixture preset sampled on a grid and normalized, as the runners do.
fn mixture_field(preset: &str, lo: &[f64], hi: &[f64], nx: &[usize]) -> GridField {
    let components = preset_mixture(preset).expect("known preset");
    let template = GridField::new(lo.len(), lo, hi, nx).unwrap();
    let mut f = mixture_density(&components, &template);
    f.normalize_mass().unwrap();
    f
}

/// Steady profile sampled at the nodes of a grid and normalized.
fn profile_on_grid(profile: &EquilibriumProfile, template: &GridField) -> GridField {
    let mut f = template.like();
    let mut pt = [0.0f64; 2];
    for idx in 0..f.len() {
        f.point_at(idx, &mut pt);
        f.values_mut()[idx] = profile.eval(&pt[..profile.dim]);
    }
    f.normalize_mass().unwrap();
    f
}

fn fp_config(equation: FpEquation, dt: f64, t_end: f64, record_every: usize) -> FpConfig {
    FpConfig {
        equation,
        integrator: FpIntegrator::Rk4,
        dt,
        t_end,
        record_every,
        snapshot_times: vec![],
    }
}

#[test]
fn criterion_01_equilibrium_constants_solve_cleanly() {
    let clock = Instant::now();
    let (m1, sigma2) = solve_constants_1d(0.8, 0.5).unwrap();
    let mass_residual = m1 * erfc(0.5 / (2.0 * sigma2).sqrt()) + 0.8 - 1.0;
    let continuity_residual = m1 / (2.0 * PI * sigma2).sqrt()
        * (-0.25 / (2.0 * sigma2)).exp()
        - 0.8 / (2.0 * 0.5);
    assert!(mass_residual.abs() <= 1e-10, "1d mass residual {mass_residual:e}");
    assert!(
        continuity_residual.abs() <= 1e-10,
        "1d continuity residual {continuity_residual:e}"
    );

    let (m1, sigma2) = solve_constants_2d(0.8, 1.0).unwrap();
    assert!((sigma2 - 0.125).abs() <= 1e-6, "2d sigma2 {sigma2}");
    assert!((m1 - 0.2 * 4.0f64.exp()).abs() <= 1e-6, "2d m1 {m1}");
    let mass_residual = m1 * (-1.0 / (2.0 * sigma2)).exp() + 0.8 - 1.0;
    let continuity_residual =
        m1 / (2.0 * PI * sigma2) * (-1.0 / (2.0 * sigma2)).exp() - 0.8 / PI;
    assert!(mass_residual.abs() <= 1e-10, "2d mass residual {mass_residual:e}");
    assert!(
        continuity_residual.abs() <= 1e-10,
        "2d continuity residual {continuity_residual:e}"
    );
    assert!(clock.elapsed().as_secs_f64() < 1.0, "took {:?}", clock.elapsed());
}

#[test]
fn criterion_02_steady_profile_is_a_fixed_point_of_the_grid_solver() {
    let clock = Instant::now();
    let profile = EquilibriumProfile::from_inner_mass(0.8, 0.5, vec![0.0]).unwrap();
    let params = ModelParams::new(0.2, profile.sigma2, 0.5, vec![0.0]).unwrap();
    let template = GridField::new(1, &[-5.0], &[5.0], &[101]).unwrap();
    let start = profile_on_grid(&profile, &template);
    let cfg = fp_config(FpEquation::Discontinuous, 1e-3, 10.0, 0);
    let rec = FpSolver::new(params, InteractionKernel::Uniform)
        .solve(start.clone(), &cfg)
        .unwrap();
    let moved = l1_distance(&rec.final_field, &start).unwrap();
    assert!(moved <= 1e-6, "field moved by {moved:e} in L1 over t=10");
    assert!(clock.elapsed().as_secs_f64() < 10.0, "took {:?}", clock.elapsed());
}

#[test]
fn criterion_03_mass_and_agent_count_are_conserved() {
    let params = ModelParams::new(0.5, 0.2, 1.0, vec![0.0]).unwrap();
    let f0 = mixture_field("f0_test1", &[-5.0], &[5.0], &[101]);
    for equation in [FpEquation::Discontinuous, FpEquation::Surrogate, FpEquation::Nonlocal] {
        let cfg = fp_config(equation, 1e-3, 2.0, 100);
        let rec = FpSolver::new(params.clone(), InteractionKernel::Uniform)
            .solve(f0.clone(), &cfg)
            .unwrap();
        assert!(rec.times.len() > 10);
        for (t, mass) in rec.times.iter().zip(&rec.mass) {
            assert!((mass - 1.0).abs() <= 1e-10, "{equation:?}: mass {mass} at t={t}");
        }
    }

    let components = preset_mixture("f0_test1").unwrap();
    let n = 10_000;
    let mut ens = sample_initial_mixture(&components, n, 1, 7).unwrap();
    let cfg = SdeConfig {
        system: SdeSystem::Discontinuous,
        dt: 1e-2,
        t_end: 1.0,
        record_every: 10,
        snapshot_times: vec![],
    };
    run(&mut ens, &params, &InteractionKernel::Uniform, &cfg).unwrap();
    assert_eq!(ens.n(), n, "agent count changed");
    assert!(ens.positions().iter().all(|x| x.is_finite()), "agent left the reals");
    let template = GridField::new(1, &[-5.0], &[5.0], &[101]).unwrap();
    let (hist, overflow) = histogram_on_nodes(&ens, &template).unwrap();
    let accounted = hist.mass() + overflow as f64 / n as f64;
    assert!((accounted - 1.0).abs() <= 1e-12, "histogram accounts for {accounted}");
}

#[test]
fn criterion_04_means_follow_the_relaxation_law() {
    for lambda in [0.2, 0.8] {
        let params = ModelParams::new(lambda, 0.2, 0.5, vec![0.0]).unwrap();

        // grid solver: recorded first moment against the closed-form law
        let f0 = mixture_field("f0_test1", &[-5.0], &[5.0], &[201]);
        let u0 = f0.mean()[0];
        let dx = f0.dx(0);
        let cfg = fp_config(FpEquation::Surrogate, dx * dx / 10.0, 3.0, 40);
        let rec = FpSolver::new(params.clone(), InteractionKernel::Uniform)
            .solve(f0, &cfg)
            .unwrap();
        let mut worst = 0.0f64;
        for (t, mean) in rec.times.iter().zip(&rec.mean) {
            let exact = mean_exact(&params, &[u0], *t)[0];
            worst = worst.max((mean[0] - exact).abs());
        }
        assert!(worst <= 1e-3, "lambda={lambda}: grid mean off by {worst:e}");

        // agent system: same law within sampling noise plus time bias
        let components = preset_mixture("f0_test1").unwrap();
        let n = 100_000;
        let dt = 1e-2;
        let mut ens = sample_initial_mixture(&components, n, 1, 11).unwrap();
        let u0 = ens.mean()[0];
        let cfg = SdeConfig {
            system: SdeSystem::Surrogate,
            dt,
            t_end: 5.0,
            record_every: 25,
            snapshot_times: vec![],
        };
        let rec = run(&mut ens, &params, &InteractionKernel::Uniform, &cfg).unwrap();
        for ((t, mean), energy) in rec.times.iter().zip(&rec.means).zip(&rec.energies) {
            let exact = mean_exact(&params, &[u0], *t)[0];
            let std = (energy - mean[0] * mean[0]).max(0.0).sqrt();
            let allowed = 3.0 * std / (n as f64).sqrt() + 2.0 * dt;
            assert!(
                (mean[0] - exact).abs() <= allowed,
                "lambda={lambda}: agent mean {} vs {exact} at t={t}, allowed {allowed}",
                mean[0]
            );
        }
    }
}

#[test]
fn criterion_05_agent_histograms_converge_to_the_steady_profile() {
    let profile = EquilibriumProfile::from_inner_mass(0.8, 0.5, vec![0.0]).unwrap();
    let params = ModelParams::new(0.2, profile.sigma2, 0.5, vec![0.0]).unwrap();
    let template = GridField::new(1, &[-5.0], &[5.0], &[101]).unwrap();
    let finf = profile_on_grid(&profile, &template);
    let components = preset_mixture("f0_test1").unwrap();
    let distance = |system: SdeSystem, n: usize, seed: u64| {
        let mut ens = sample_initial_mixture(&components, n, 1, seed).unwrap();
        let cfg = SdeConfig {
            system,
            dt: 1e-2,
            t_end: 20.0,
            record_every: 0,
            snapshot_times: vec![],
        };
        run(&mut ens, &params, &InteractionKernel::Uniform, &cfg).unwrap();
        let (hist, overflow) = histogram_on_nodes(&ens, &finf).unwrap();
        assert_eq!(overflow, 0, "agents escaped the histogram window");
        l1_distance(&hist, &finf).unwrap()
    };
    for system in [SdeSystem::Discontinuous, SdeSystem::Surrogate] {
        let coarse = distance(system, 10_000, 23);
        let fine = distance(system, 100_000, 29);
        assert!(fine <= 0.08, "{system:?}: L1 {fine} at n=1e5");
        assert!(fine < coarse, "{system:?}: L1 did not shrink, {coarse} -> {fine}");
    }
}

#[test]
fn criterion_06_entropy_decays_monotonically_and_orders_with_coupling() {
    let clock = Instant::now();
    let nx = 81;
    let f0 = mixture_field("f0_test21", &[-5.0], &[5.0], &[nx]);
    let dx = f0.dx(0);
    let dt = dx * dx / 10.0;
    let steps = (3.0 / dt).round() as usize;
    let profile = EquilibriumProfile::from_sigma2(0.2, 1.0, vec![0.0]).unwrap();
    let finf = profile_on_grid(&profile, &f0);
    let mut at_end = Vec::new();
    for lambda in [0.2, 0.5, 0.8] {
        let params = ModelParams::new(lambda, 0.2, 1.0, vec![0.0]).unwrap();
        let mut solver = FpSolver::new(params, InteractionKernel::Uniform);
        let cfg = fp_config(FpEquation::Surrogate, dt, 3.0, 0);
        let mut field = f0.clone();
        let mut series = vec![relative_entropy(&field, &finf).unwrap()];
        for _ in 0..steps {
            solver.step(&mut field, &cfg, dt).unwrap();
            series.push(relative_entropy(&field, &finf).unwrap());
        }
        for k in 10..series.len() - 1 {
            assert!(
                series[k + 1] <= series[k] + 1e-12,
                "lambda={lambda}: entropy rose at step {k}: {} -> {}",
                series[k],
                series[k + 1]
            );
        }
        at_end.push(*series.last().unwrap());
    }
    assert!(
        at_end[2] < at_end[1] && at_end[1] < at_end[0],
        "entropies at t=3 not ordered by coupling: {at_end:?}"
    );
    assert!(clock.elapsed().as_secs_f64() < 60.0, "took {:?}", clock.elapsed());
}

#[test]
fn criterion_07_distance_weighted_kernel_slows_entropy_decay() {
    let params = ModelParams::new(0.2, 0.2, 1.0, vec![0.0]).unwrap();
    let nx = 81;
    let f0 = mixture_field("f0_test21", &[-5.0], &[5.0], &[nx]);
    let dx = f0.dx(0);
    let dt = dx * dx / 10.0;
    let steps = (3.0 / dt).round() as usize;

    let decay_rate = |kernel: InteractionKernel, reference: &GridField| {
        let mut solver = FpSolver::new(params.clone(), kernel);
        let cfg = fp_config(FpEquation::Discontinuous, dt, 3.0, 0);
        let mut field = f0.clone();
        let mut times = vec![0.0];
        let mut values = vec![relative_entropy(&field, reference).unwrap()];
        for k in 0..steps {
            solver.step(&mut field, &cfg, dt).unwrap();
            times.push((k + 1) as f64 * dt);
            values.push(relative_entropy(&field, reference).unwrap());
        }
        for k in 10..values.len() - 1 {
            assert!(
                values[k + 1] <= values[k] + 1e-12,
                "entropy rose at step {k}: {} -> {}",
                values[k],
                values[k + 1]
            );
        }
        let series = DecaySeries::new(times, values, "relative entropy").unwrap();
        decay_rate_fit(&series, (1.0, 3.0)).unwrap().exp_rate
    };

    // distance-weighted run measured against a long fine-grid solve
    let kernel = InteractionKernel::CuckerSmale { gamma: 1.0 };
    let fine = GridField::new(1, &[-5.0], &[5.0], &[801]).unwrap();
    let fine_dt = 0.8 * swarmkin::fp::stability_bound(&params, FpEquation::Discontinuous, &fine);
    let fine_f0 = mixture_field("f0_test21", &[-5.0], &[5.0], &[801]);
    let fine_cfg = fp_config(FpEquation::Discontinuous, fine_dt, 50.0, 0);
    let reference_run = FpSolver::new(params.clone(), kernel).solve(fine_f0, &fine_cfg).unwrap();
    let reference =
        swarmkin::diagnostics::restrict_reference(&reference_run.final_field, &f0).unwrap();
    let cs_rate = decay_rate(kernel, &reference);

    // all-to-all run measured against the closed-form steady profile
    let profile = EquilibriumProfile::from_sigma2(0.2, 1.0, vec![0.0]).unwrap();
    let finf = profile_on_grid(&profile, &f0);
    let uniform_rate = decay_rate(InteractionKernel::Uniform, &finf);

    assert!(
        cs_rate < uniform_rate,
        "distance weighting should slow the decay: {cs_rate} vs {uniform_rate}"
    );
    assert!(cs_rate > 0.0, "no decay at all: {cs_rate}");
}

#[test]
fn criterion_08_two_dimensional_solvers_cross_validate() {
    let clock = Instant::now();
    let params = ModelParams::new(0.2, 0.2, 1.0, vec![0.0, 0.0]).unwrap();
    let components = preset_mixture("init2D").unwrap();
    let f0 = mixture_field("init2D", &[-5.0, -5.0], &[5.0, 5.0], &[81, 81]);
    let dx = f0.dx(0);
    let n = 10_000;

    let pairs = [
        (InteractionKernel::Uniform, FpEquation::Surrogate, 31u64),
        (InteractionKernel::CuckerSmale { gamma: 1.0 }, FpEquation::Discontinuous, 37u64),
    ];
    for (kernel, equation, seed) in pairs {
        let cfg = fp_config(equation, dx * dx / 10.0, 10.0, 0);
        let rec = FpSolver::new(params.clone(), kernel).solve(f0.clone(), &cfg).unwrap();

        let mut ens = sample_initial_mixture(&components, n, 2, seed).unwrap();
        let sde = SdeConfig {
            system: SdeSystem::Discontinuous,
            dt: 1e-2,
            t_end: 10.0,
            record_every: 0,
            snapshot_times: vec![],
        };
        run(&mut ens, &params, &kernel, &sde).unwrap();
        let (hist, overflow) = histogram_on_nodes(&ens, &f0).unwrap();
        assert_eq!(overflow, 0, "agents escaped the histogram window");

        for axis in 0..2 {
            let grid_marginal = rec.final_field.marginal(axis).unwrap();
            let agent_marginal = hist.marginal(axis).unwrap();
            let d = l1_distance(&grid_marginal, &agent_marginal).unwrap();
            assert!(d <= 0.1, "{kernel:?}/{equation:?}: axis {axis} marginal L1 {d}");
        }
    }
    assert!(clock.elapsed().as_secs_f64() < 600.0, "took {:?}", clock.elapsed());
}

#[test]
fn criterion_09_split_integrator_converges_to_the_direct_one() {
    let params = ModelParams::new(0.5, 0.2, 1.0, vec![0.0]).unwrap();
    let f0 = mixture_field("f0_test21", &[-5.0], &[5.0], &[101]);
    let reference = FpSolver::new(params.clone(), InteractionKernel::Uniform)
        .solve(f0.clone(), &fp_config(FpEquation::Surrogate, 1e-3, 3.0, 0))
        .unwrap()
        .final_field;
    let dts = [1e-3, 5e-4, 2.5e-4];
    let errors: Vec<f64> = dts
        .iter()
        .map(|&dt| {
            let cfg = FpConfig {
                equation: FpEquation::Surrogate,
                integrator: FpIntegrator::Splitting,
                dt,
                t_end: 3.0,
                record_every: 0,
                snapshot_times: vec![],
            };
            let split = FpSolver::new(params.clone(), InteractionKernel::Uniform)
                .solve(f0.clone(), &cfg)
                .unwrap()
                .final_field;
            l1_distance(&split, &reference).unwrap()
        })
        .collect();
    assert!(errors[0] < 1.0, "split scheme far off: {errors:?}");
    // First order means one constant C bounds the error as C * dt on every
    // level. Checking the per-level constants directly is robust where the
    // raw log2 ratio is not: the dt^2 correction of this splitting is
    // negative, so the measured order approaches 1 from below (0.9988 at
    // these steps) while e/dt stays flat to a quarter percent.
    for pair in errors.windows(2) {
        assert!(pair[1] < pair[0], "error did not shrink under halving: {errors:?}");
        let order = (pair[0] / pair[1]).log2();
        assert!(order >= 0.97, "observed order {order:.3} from errors {errors:?}");
    }
    let constants: Vec<f64> = errors.iter().zip(&dts).map(|(e, dt)| e / dt).collect();
    let c_bound = 1.02 * constants[0];
    for (k, c) in constants.iter().enumerate() {
        assert!(
            *c <= c_bound,
            "level {k}: e/dt = {c} escapes the single-constant bound {c_bound}"
        );
    }
}

#[test]
fn criterion_10_entropy_micro_values_are_exact() {
    // two unit-volume cells with masses (0.6, 0.4) against the flat split
    let mut f = GridField::new(1, &[0.0], &[1.0], &[2]).unwrap();
    f.values_mut().copy_from_slice(&[0.6, 0.4]);
    let mut g = GridField::new(1, &[0.0], &[1.0], &[2]).unwrap();
    g.values_mut().copy_from_slice(&[0.5, 0.5]);
    let h = relative_entropy(&f, &g).unwrap();
    assert!(
        (h - 0.020135513550688873).abs() <= 1e-9,
        "two-cell relative entropy {h}"
    );

    // Gaussian against shifted Gaussian: closed form m^2 / (2 sigma^2)
    let mut a = GridField::from_fn(1, &[-5.0], &[5.0], &[801], |x| {
        (-x[0] * x[0] / 1.0).exp() / (PI * 1.0).sqrt()
    })
    .unwrap();
    a.normalize_mass().unwrap();
    let mut b = GridField::from_fn(1, &[-5.0], &[5.0], &[801], |x| {
        (-(x[0] - 0.5) * (x[0] - 0.5) / 1.0).exp() / (PI * 1.0).sqrt()
    })
    .unwrap();
    b.normalize_mass().unwrap();
    let kl = relative_entropy(&a, &b).unwrap();
    assert!((kl - 0.25).abs() <= 1e-4, "Gaussian KL {kl}");

    // trivial cases carry no quadrature error at all
    let same = relative_entropy(&a, &a).unwrap();
    assert_eq!(same, 0.0, "H(f|f) = {same}");
    assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);

    // kernel, indicator and diffusion coefficient at hand-checkable points
    assert_eq!(kernel_eval(&InteractionKernel::Uniform, &[1.5, -0.25], &[0.5, 0.75]), 1.0);
    let cs = InteractionKernel::CuckerSmale { gamma: 1.0 };
    assert_eq!(kernel_eval(&cs, &[2.0], &[2.0]), 1.0);
    assert_eq!(kernel_eval(&cs, &[2.0], &[0.0]), 0.2, "1 / (1 + 4)");

    let ball = TargetDomain { center: vec![0.0], radius: 1.0 };
    assert_eq!(indicator_complement(&ball, &[0.5]), 0.0);
    assert_eq!(indicator_complement(&ball, &[1.0]), 0.0, "boundary counts as covered");
    assert_eq!(indicator_complement(&ball, &[1.5]), 1.0);

    let params = ModelParams::new(0.5, 0.2, 1.0, vec![0.0]).unwrap();
    assert_eq!(kappa_eval(&params, &[0.0], &[0.0]), 0.2 + 0.5, "center: sigma2 + delta2/2");
    assert_eq!(kappa_eval(&params, &[3.0], &[0.0]), 0.2, "outside: plain sigma2");
    assert_eq!(params.kappa_max(), 0.7);
}
