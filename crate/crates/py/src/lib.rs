//! Python bindings for the swarm coverage solvers.
//!
//! Exposes the model parameters, grids, equilibrium profiles, particle
//! ensembles, the Fokker-Planck solver, and the entropy diagnostics.
//! Build with `cargo build -p swarmkin-py`; the produced cdylib imports
//! as `swarmkin_py` once renamed onto `sys.path` (python/smoke.py shows
//! the dance).

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use swarmkin::diagnostics::{self, DecaySeries};
use swarmkin::equilibrium;
use swarmkin::fp::{self, FpConfig, FpSolver};
use swarmkin::grid;
use swarmkin::io;
use swarmkin::model::{self, InteractionKernel, MAX_DIM};
use swarmkin::particles::{self, MixtureComponent, SdeConfig};

fn verr(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn issues_err(issues: Vec<String>) -> PyErr {
    PyValueError::new_err(issues.join("; "))
}

fn parse_equation(name: &str) -> PyResult<fp::FpEquation> {
    match name {
        "discontinuous" => Ok(fp::FpEquation::Discontinuous),
        "surrogate" => Ok(fp::FpEquation::Surrogate),
        "nonlocal" => Ok(fp::FpEquation::Nonlocal),
        _ => Err(PyValueError::new_err(format!(
            "unknown equation {name:?}; expected discontinuous, surrogate, or nonlocal"
        ))),
    }
}

fn parse_integrator(name: &str) -> PyResult<fp::FpIntegrator> {
    match name {
        "rk4" => Ok(fp::FpIntegrator::Rk4),
        "splitting" => Ok(fp::FpIntegrator::Splitting),
        _ => Err(PyValueError::new_err(format!(
            "unknown integrator {name:?}; expected rk4 or splitting"
        ))),
    }
}

fn parse_system(name: &str) -> PyResult<particles::SdeSystem> {
    match name {
        "discontinuous" => Ok(particles::SdeSystem::Discontinuous),
        "surrogate" => Ok(particles::SdeSystem::Surrogate),
        _ => Err(PyValueError::new_err(format!(
            "unknown system {name:?}; expected discontinuous or surrogate"
        ))),
    }
}

fn trim(v: &[f64; MAX_DIM], dim: usize) -> Vec<f64> {
    v[..dim].to_vec()
}

/// Model constants: pull weight toward the target center, noise level,
/// target radius and center. `lam` is the pull weight; mu = 1 - lam.
#[pyclass(module = "swarmkin_py", skip_from_py_object)]
#[derive(Clone)]
struct ModelParams {
    inner: model::ModelParams,
}

#[pymethods]
impl ModelParams {
    #[new]
    fn new(lam: f64, sigma2: f64, delta: f64, x0: Vec<f64>) -> PyResult<Self> {
        let inner = model::ModelParams::new(lam, sigma2, delta, x0).map_err(verr)?;
        Ok(Self { inner })
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        self.inner.x0.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    /// Largest value the state-dependent diffusion can take.
    fn kappa_max(&self) -> f64 {
        self.inner.kappa_max()
    }

    /// Mean of the regularized dynamics at time `t`, started from `u0`.
    fn mean_exact(&self, u0: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        if u0.len() != self.inner.dim {
            return Err(PyValueError::new_err(format!(
                "u0 has {} entries, model is {}-dimensional",
                u0.len(),
                self.inner.dim
            )));
        }
        Ok(model::mean_exact(&self.inner, &u0, t))
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelParams(lam={}, sigma2={}, delta={}, x0={:?})",
            self.inner.lambda, self.inner.sigma2, self.inner.delta, self.inner.x0
        )
    }
}

/// Interaction kernel: `uniform()` weighs every pair equally,
/// `cucker_smale(gamma)` decays with squared distance.
#[pyclass(module = "swarmkin_py", skip_from_py_object)]
#[derive(Clone)]
struct Kernel {
    inner: InteractionKernel,
}

#[pymethods]
impl Kernel {
    #[staticmethod]
    fn uniform() -> Self {
        Self { inner: InteractionKernel::Uniform }
    }

    #[staticmethod]
    fn cucker_smale(gamma: f64) -> PyResult<Self> {
        let inner = InteractionKernel::CuckerSmale { gamma };
        let issues = inner.validate();
        if issues.is_empty() {
            Ok(Self { inner })
        } else {
            Err(issues_err(issues))
        }
    }

    fn is_uniform(&self) -> bool {
        self.inner.is_uniform()
    }

    fn eval(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        if x.len() != y.len() {
            return Err(PyValueError::new_err("x and y must have the same length"));
        }
        Ok(model::kernel_eval(&self.inner, &x, &y))
    }

    fn __repr__(&self) -> String {
        match self.inner {
            InteractionKernel::Uniform => "Kernel.uniform()".into(),
            InteractionKernel::CuckerSmale { gamma } => format!("Kernel.cucker_smale({gamma})"),
        }
    }
}

/// Scalar values on the nodes of a uniform grid (1d or 2d, row-major).
#[pyclass(module = "swarmkin_py", skip_from_py_object)]
#[derive(Clone)]
struct GridField {
    inner: grid::GridField,
}

impl GridField {
    fn axis_check(&self, axis: usize) -> PyResult<()> {
        if axis < self.inner.dim() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "axis {axis} out of range for a {}-dimensional grid",
                self.inner.dim()
            )))
        }
    }
}

#[pymethods]
impl GridField {
    /// Zero-filled field; the dimension comes from the bound lists.
    #[new]
    fn new(lo: Vec<f64>, hi: Vec<f64>, nx: Vec<usize>) -> PyResult<Self> {
        let inner = grid::GridField::new(lo.len(), &lo, &hi, &nx).map_err(verr)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn nx(&self, axis: usize) -> PyResult<usize> {
        self.axis_check(axis)?;
        Ok(self.inner.nx(axis))
    }

    fn lo(&self, axis: usize) -> PyResult<f64> {
        self.axis_check(axis)?;
        Ok(self.inner.lo(axis))
    }

    fn hi(&self, axis: usize) -> PyResult<f64> {
        self.axis_check(axis)?;
        Ok(self.inner.hi(axis))
    }

    fn dx(&self, axis: usize) -> PyResult<f64> {
        self.axis_check(axis)?;
        Ok(self.inner.dx(axis))
    }

    /// Node coordinates along one axis.
    fn nodes(&self, axis: usize) -> PyResult<Vec<f64>> {
        self.axis_check(axis)?;
        Ok((0..self.inner.nx(axis)).map(|i| self.inner.node(axis, i)).collect())
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn set_values(&mut self, values: Vec<f64>) -> PyResult<()> {
        if values.len() != self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} values, got {}",
                self.inner.len(),
                values.len()
            )));
        }
        self.inner.values_mut().copy_from_slice(&values);
        Ok(())
    }

    fn mass(&self) -> f64 {
        self.inner.mass()
    }

    fn mean(&self) -> Vec<f64> {
        trim(&self.inner.mean(), self.inner.dim())
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    /// Rescales to unit discrete mass; returns the factor applied.
    fn normalize_mass(&mut self) -> PyResult<f64> {
        self.inner.normalize_mass().map_err(verr)
    }

    /// Multilinear interpolation at a point, None outside the grid.
    fn sample(&self, x: Vec<f64>) -> PyResult<Option<f64>> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!(
                "point has {} coordinates, grid is {}-dimensional",
                x.len(),
                self.inner.dim()
            )));
        }
        Ok(self.inner.sample_linear(&x))
    }

    fn marginal(&self, axis: usize) -> PyResult<GridField> {
        self.axis_check(axis)?;
        let inner = self.inner.marginal(axis).map_err(verr)?;
        Ok(GridField { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let d = self.inner.dim();
        let nx: Vec<usize> = (0..d).map(|a| self.inner.nx(a)).collect();
        format!("GridField(dim={d}, nx={nx:?}, mass={})", self.inner.mass())
    }
}

/// Steady-state profile: Gaussian tail outside the target ball, flat
/// plateau inside.
#[pyclass(module = "swarmkin_py", skip_from_py_object)]
#[derive(Clone)]
struct EquilibriumProfile {
    inner: equilibrium::EquilibriumProfile,
}

#[pymethods]
impl EquilibriumProfile {
    /// Solve for the constants given the mass `m2` inside the ball.
    #[staticmethod]
    fn from_inner_mass(m2: f64, delta: f64, x0: Vec<f64>) -> PyResult<Self> {
        let inner = equilibrium::EquilibriumProfile::from_inner_mass(m2, delta, x0).map_err(verr)?;
        Ok(Self { inner })
    }

    /// Solve for the masses given the tail variance.
    #[staticmethod]
    fn from_sigma2(sigma2: f64, delta: f64, x0: Vec<f64>) -> PyResult<Self> {
        let inner = equilibrium::EquilibriumProfile::from_sigma2(sigma2, delta, x0).map_err(verr)?;
        Ok(Self { inner })
    }

    #[getter]
    fn m1(&self) -> f64 {
        self.inner.m1
    }

    #[getter]
    fn m2(&self) -> f64 {
        self.inner.m2
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    /// Constant plateau value inside the ball.
    fn inner_value(&self) -> f64 {
        self.inner.inner_value()
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.inner.dim {
            return Err(PyValueError::new_err(format!(
                "point has {} coordinates, profile is {}-dimensional",
                x.len(),
                self.inner.dim
            )));
        }
        Ok(self.inner.eval(&x))
    }

    /// Node samples on the template's geometry, normalized to unit
    /// discrete mass (node quadrature of the kinked profile carries an
    /// O(dx^2) defect otherwise).
    fn on_grid(&self, template: &GridField) -> PyResult<GridField> {
        if template.inner.dim() != self.inner.dim {
            return Err(PyValueError::new_err(format!(
                "grid is {}-dimensional, profile is {}-dimensional",
                template.inner.dim(),
                self.inner.dim
            )));
        }
        let mut f = template.inner.like();
        let dim = f.dim();
        let mut x = [0.0; MAX_DIM];
        for i in 0..f.len() {
            f.point_at(i, &mut x);
            let v = self.inner.eval(&x[..dim]);
            f.values_mut()[i] = v;
        }
        f.normalize_mass().map_err(verr)?;
        Ok(GridField { inner: f })
    }

    fn __repr__(&self) -> String {
        format!(
            "EquilibriumProfile(m1={}, m2={}, sigma2={}, delta={})",
            self.inner.m1, self.inner.m2, self.inner.sigma2, self.inner.delta
        )
    }
}

/// Moment history of a particle run; positions snapshots are flat
/// agent-major buffers.
#[pyclass(module = "swarmkin_py")]
struct SdeResult {
    #[pyo3(get)]
    times: Vec<f64>,
    #[pyo3(get)]
    means: Vec<Vec<f64>>,
    #[pyo3(get)]
    energies: Vec<f64>,
    #[pyo3(get)]
    snapshots: Vec<(f64, Vec<f64>)>,
}

/// Recorded time series of a grid solve plus any requested snapshots.
#[pyclass(module = "swarmkin_py")]
struct FpResult {
    #[pyo3(get)]
    times: Vec<f64>,
    #[pyo3(get)]
    mass: Vec<f64>,
    #[pyo3(get)]
    means: Vec<Vec<f64>>,
    #[pyo3(get)]
    energies: Vec<f64>,
    #[pyo3(get)]
    entropies: Vec<f64>,
    #[pyo3(get)]
    snapshots: Vec<(f64, GridField)>,
    #[pyo3(get)]
    final_field: GridField,
}

/// Interacting agents plus their per-agent RNG streams.
#[pyclass(module = "swarmkin_py")]
struct Ensemble {
    inner: particles::ParticleEnsemble,
}

#[pymethods]
impl Ensemble {
    /// Draws `n` agents from an isotropic Gaussian mixture given as
    /// `(weight, mean, variance)` triples. Weights must sum to one.
    #[staticmethod]
    #[pyo3(signature = (components, n, dim, seed = 0))]
    fn sample_mixture(
        components: Vec<(f64, Vec<f64>, f64)>,
        n: usize,
        dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let comps: Vec<MixtureComponent> = components
            .into_iter()
            .map(|(weight, mean, var)| MixtureComponent { weight, mean, var })
            .collect();
        let inner = particles::sample_initial_mixture(&comps, n, dim, seed).map_err(verr)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    /// Flat agent-major position buffer (length n * dim).
    fn positions(&self) -> Vec<f64> {
        self.inner.positions().to_vec()
    }

    fn mean(&self) -> Vec<f64> {
        self.inner.mean()
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    /// Steps the ensemble in place to `t_end`, recording moments every
    /// `record_every` steps (0 keeps endpoints only) and full positions
    /// at the requested snapshot times.
    #[pyo3(signature = (params, kernel, system, dt, t_end, record_every = 0, snapshot_times = Vec::new()))]
    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        params: &ModelParams,
        kernel: &Kernel,
        system: &str,
        dt: f64,
        t_end: f64,
        record_every: usize,
        snapshot_times: Vec<f64>,
    ) -> PyResult<SdeResult> {
        let cfg = SdeConfig {
            system: parse_system(system)?,
            dt,
            t_end,
            record_every,
            snapshot_times,
        };
        let rec =
            particles::run(&mut self.inner, &params.inner, &kernel.inner, &cfg).map_err(verr)?;
        let dim = self.inner.dim();
        Ok(SdeResult {
            times: rec.times,
            means: rec.means.iter().map(|m| trim(m, dim)).collect(),
            energies: rec.energies,
            snapshots: rec.snapshots,
        })
    }

    /// Bins agents onto the template's nodes as a density field;
    /// returns `(field, overflow)` with overflow counting agents that
    /// fell outside the grid.
    fn histogram(&self, template: &GridField) -> PyResult<(GridField, u64)> {
        let (field, overflow) =
            particles::histogram_on_nodes(&self.inner, &template.inner).map_err(verr)?;
        Ok((GridField { inner: field }, overflow))
    }

    fn __repr__(&self) -> String {
        format!(
            "Ensemble(n={}, dim={}, time={}, seed={})",
            self.inner.n(),
            self.inner.dim(),
            self.inner.time(),
            self.inner.seed()
        )
    }
}

/// Least-squares power-law and exponential fits to a decay series.
#[pyclass(module = "swarmkin_py")]
struct RateFit {
    inner: diagnostics::RateFit,
}

#[pymethods]
impl RateFit {
    #[getter]
    fn window(&self) -> (f64, f64) {
        self.inner.window
    }

    #[getter]
    fn points(&self) -> usize {
        self.inner.points
    }

    #[getter]
    fn power_exponent(&self) -> f64 {
        self.inner.power_exponent
    }

    #[getter]
    fn power_residual(&self) -> f64 {
        self.inner.power_residual
    }

    #[getter]
    fn exp_rate(&self) -> f64 {
        self.inner.exp_rate
    }

    #[getter]
    fn exp_residual(&self) -> f64 {
        self.inner.exp_residual
    }

    fn report(&self) -> String {
        self.inner.report()
    }

    fn __repr__(&self) -> String {
        format!(
            "RateFit(exp_rate={}, power_exponent={})",
            self.inner.exp_rate, self.inner.power_exponent
        )
    }
}

/// Solve the 1d normalization system from the inner mass.
#[pyfunction]
fn solve_constants_1d(m2: f64, delta: f64) -> PyResult<(f64, f64)> {
    equilibrium::solve_constants_1d(m2, delta).map_err(verr)
}

/// Solve the 2d normalization system from the inner mass.
#[pyfunction]
fn solve_constants_2d(m2: f64, delta: f64) -> PyResult<(f64, f64)> {
    equilibrium::solve_constants_2d(m2, delta).map_err(verr)
}

/// Recover `(m1, m2)` from the tail variance in 1d.
#[pyfunction]
fn solve_mass_1d(sigma2: f64, delta: f64) -> PyResult<(f64, f64)> {
    equilibrium::solve_mass_1d(sigma2, delta).map_err(verr)
}

/// Recover `(m1, m2)` from the tail variance in 2d.
#[pyfunction]
fn solve_mass_2d(sigma2: f64, delta: f64) -> PyResult<(f64, f64)> {
    equilibrium::solve_mass_2d(sigma2, delta).map_err(verr)
}

/// Largest diffusion-stable time step for the explicit grid schemes.
#[pyfunction]
fn stability_bound(params: &ModelParams, equation: &str, grid: &GridField) -> PyResult<f64> {
    let eq = parse_equation(equation)?;
    Ok(fp::stability_bound(&params.inner, eq, &grid.inner))
}

/// Advances a density to `t_end` and returns the recorded series.
/// `equation` is one of discontinuous, surrogate, nonlocal; `integrator`
/// is rk4 or splitting (splitting only pairs with surrogate).
#[pyfunction]
#[pyo3(signature = (field, params, kernel, equation, dt, t_end, integrator = "rk4", record_every = 0, snapshot_times = Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn fp_solve(
    field: &GridField,
    params: &ModelParams,
    kernel: &Kernel,
    equation: &str,
    dt: f64,
    t_end: f64,
    integrator: &str,
    record_every: usize,
    snapshot_times: Vec<f64>,
) -> PyResult<FpResult> {
    let cfg = FpConfig {
        equation: parse_equation(equation)?,
        integrator: parse_integrator(integrator)?,
        dt,
        t_end,
        record_every,
        snapshot_times,
    };
    let mut solver = FpSolver::new(params.inner.clone(), kernel.inner);
    let rec = solver.solve(field.inner.clone(), &cfg).map_err(verr)?;
    let dim = params.inner.dim;
    Ok(FpResult {
        times: rec.times,
        mass: rec.mass,
        means: rec.mean.iter().map(|m| trim(m, dim)).collect(),
        energies: rec.energy,
        entropies: rec.entropy,
        snapshots: rec
            .snapshots
            .into_iter()
            .map(|(t, f)| (t, GridField { inner: f }))
            .collect(),
        final_field: GridField { inner: rec.final_field },
    })
}

/// Node quadrature of `f log f`; empty cells contribute zero.
#[pyfunction]
fn shannon_entropy(f: &GridField) -> f64 {
    diagnostics::shannon_entropy(&f.inner)
}

/// Relative entropy of `f` against `g` on the same grid.
#[pyfunction]
fn relative_entropy(f: &GridField, g: &GridField) -> PyResult<f64> {
    diagnostics::relative_entropy(&f.inner, &g.inner).map_err(verr)
}

/// L1 distance between two fields on the same grid.
#[pyfunction]
fn l1_distance(f: &GridField, g: &GridField) -> PyResult<f64> {
    diagnostics::l1_distance(&f.inner, &g.inner).map_err(verr)
}

/// Fits power-law and exponential decays to `(times, values)` inside
/// the window; see RateFit for the two candidates side by side.
#[pyfunction]
fn decay_rate_fit(times: Vec<f64>, values: Vec<f64>, window: (f64, f64)) -> PyResult<RateFit> {
    let series = DecaySeries::new(times, values, "python").map_err(verr)?;
    let inner = diagnostics::decay_rate_fit(&series, window).map_err(verr)?;
    Ok(RateFit { inner })
}

/// Runs a full experiment from a TOML config file, exactly like the
/// CLI. Returns `(files, summary)`: the file names written under the
/// output directory and the human-readable summary lines.
#[pyfunction]
#[pyo3(signature = (path, seed = None, out = None))]
fn run_config(
    path: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<(Vec<String>, Vec<String>)> {
    let mut config = io::load_config(&path).map_err(verr)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.output_dir = o;
    }
    let man = io::run_experiment(&config).map_err(verr)?;
    Ok((man.files, man.summary))
}

#[pymodule]
fn swarmkin_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ModelParams>()?;
    m.add_class::<Kernel>()?;
    m.add_class::<GridField>()?;
    m.add_class::<EquilibriumProfile>()?;
    m.add_class::<Ensemble>()?;
    m.add_class::<SdeResult>()?;
    m.add_class::<FpResult>()?;
    m.add_class::<RateFit>()?;
    m.add_function(wrap_pyfunction!(solve_constants_1d, m)?)?;
    m.add_function(wrap_pyfunction!(solve_constants_2d, m)?)?;
    m.add_function(wrap_pyfunction!(solve_mass_1d, m)?)?;
    m.add_function(wrap_pyfunction!(solve_mass_2d, m)?)?;
    m.add_function(wrap_pyfunction!(stability_bound, m)?)?;
    m.add_function(wrap_pyfunction!(fp_solve, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(relative_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(l1_distance, m)?)?;
    m.add_function(wrap_pyfunction!(decay_rate_fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
