//! Distances, entropies, moment checks, and decay-rate fits.
//!
//! Cells with density below 1e-300 are treated as empty throughout; an
//! empty cell contributes nothing to entropies regardless of the other
//! argument, matching the `0 log 0 = 0` convention.

use thiserror::Error;

use crate::grid::GridField;
use crate::model::{mean_exact, ModelParams, MAX_DIM};

/// Densities below this are treated as zero in entropy sums.
pub const EMPTY_CELL: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("fields live on different grids")]
    GridMismatch,
    #[error(
        "relative entropy diverges: cell {index} has density {f} against reference {g}"
    )]
    UnsupportedCell { index: usize, f: f64, g: f64 },
    #[error("need at least 3 points in the fit window, found {0}")]
    TooFewPoints(usize),
    #[error("decay fit needs positive values; found {value} at t = {t}")]
    NonPositiveValue { t: f64, value: f64 },
    #[error("series lengths differ: {0} times vs {1} values")]
    LengthMismatch(usize, usize),
    #[error("coarse node at {0:?} lies outside the reference grid")]
    OutOfRange(Vec<f64>),
    #[error("reference field has no mass")]
    ZeroMass,
}

/// A positive scalar tracked over time, typically a distance to equilibrium.
#[derive(Debug, Clone)]
pub struct DecaySeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Free-form label describing what the values measure.
    pub meta: String,
}

impl DecaySeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>, meta: impl Into<String>) -> Result<Self, DiagError> {
        if times.len() != values.len() {
            return Err(DiagError::LengthMismatch(times.len(), values.len()));
        }
        Ok(DecaySeries { times, values, meta: meta.into() })
    }
}

/// Self-entropy `integral f log f` with empty cells contributing zero.
pub fn shannon_entropy(f: &GridField) -> f64 {
    let mut s = 0.0;
    for &v in f.values() {
        if v > EMPTY_CELL {
            s += v * v.ln();
        }
    }
    s * f.cell_volume()
}

/// Relative entropy `integral f log(f / g)`. Mass sitting where the
/// reference is empty makes the integral infinite; that is reported as an
/// error naming the offending cell rather than returned as a float.
pub fn relative_entropy(f: &GridField, g: &GridField) -> Result<f64, DiagError> {
    if !f.same_geometry(g) {
        return Err(DiagError::GridMismatch);
    }
    let mut s = 0.0;
    for (index, (&fv, &gv)) in f.values().iter().zip(g.values()).enumerate() {
        if fv <= EMPTY_CELL {
            continue;
        }
        if gv <= EMPTY_CELL {
            return Err(DiagError::UnsupportedCell { index, f: fv, g: gv });
        }
        s += fv * (fv / gv).ln();
    }
    Ok(s * f.cell_volume())
}

/// L1 distance between two fields on the same grid.
pub fn l1_distance(f: &GridField, g: &GridField) -> Result<f64, DiagError> {
    if !f.same_geometry(g) {
        return Err(DiagError::GridMismatch);
    }
    let s: f64 = f.values().iter().zip(g.values()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s * f.cell_volume())
}

/// Least-squares fits of a decay series in the window `[t0, t1]`, reported
/// side by side without deciding which regime applies:
///
/// * power law `value ~ prefactor * t^(-exponent)` (log-log),
/// * exponential `value ~ prefactor * exp(-rate * t)` (semilog).
///
/// Residuals are root-mean-square misfits in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub window: (f64, f64),
    pub points: usize,
    pub power_exponent: f64,
    pub power_prefactor: f64,
    pub power_residual: f64,
    pub exp_rate: f64,
    pub exp_prefactor: f64,
    pub exp_residual: f64,
}

impl RateFit {
    /// Multi-line human-readable report.
    pub fn report(&self) -> String {
        format!(
            "fit window [{:.6}, {:.6}], {} points\n\
             power law : value ~ {:.6e} * t^(-{:.6})  (rms log residual {:.3e})\n\
             exponential: value ~ {:.6e} * exp(-{:.6} t)  (rms log residual {:.3e})",
            self.window.0,
            self.window.1,
            self.points,
            self.power_prefactor,
            self.power_exponent,
            self.power_residual,
            self.exp_prefactor,
            self.exp_rate,
            self.exp_residual,
        )
    }
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = y - (intercept + slope * x);
        ss += r * r;
    }
    (slope, intercept, (ss / n).sqrt())
}

/// Fits both decay laws on the series restricted to `window`.
pub fn decay_rate_fit(series: &DecaySeries, window: (f64, f64)) -> Result<RateFit, DiagError> {
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    for (&t, &v) in series.times.iter().zip(&series.values) {
        if t < window.0 || t > window.1 {
            continue;
        }
        if !(v > 0.0) {
            return Err(DiagError::NonPositiveValue { t, value: v });
        }
        if !(t > 0.0) {
            // log-log fit cannot use t = 0
            continue;
        }
        ts.push(t);
        vs.push(v);
    }
    if ts.len() < 3 {
        return Err(DiagError::TooFewPoints(ts.len()));
    }
    let logt: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let logv: Vec<f64> = vs.iter().map(|v| v.ln()).collect();
    let (p_slope, p_icept, p_res) = linear_fit(&logt, &logv);
    let (e_slope, e_icept, e_res) = linear_fit(&ts, &logv);
    Ok(RateFit {
        window,
        points: ts.len(),
        power_exponent: -p_slope,
        power_prefactor: p_icept.exp(),
        power_residual: p_res,
        exp_rate: -e_slope,
        exp_prefactor: e_icept.exp(),
        exp_residual: e_res,
    })
}

/// Time series of means and energies from a run, in one shape shared by
/// the particle and grid solvers.
#[derive(Debug, Clone)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    pub means: Vec<[f64; MAX_DIM]>,
    pub energies: Vec<f64>,
}

/// How far a run's moments sit from their closed-form laws.
#[derive(Debug, Clone)]
pub struct MomentReport {
    /// Per-time Euclidean deviation of the recorded mean from the
    /// exponential relaxation law started at the first recorded mean.
    pub mean_deviation: Vec<f64>,
    pub max_mean_deviation: f64,
    pub max_energy: f64,
    /// A priori ceiling on the energy from the dissipation inequality.
    pub energy_bound: f64,
    pub energy_within_bound: bool,
}

/// Checks recorded moments against the exact mean law and the energy
/// ceiling `max(E(0), C / (2 lambda))` implied by the dissipation
/// inequality, with `C` collecting the diffusion and drift constants.
/// `slack` widens the ceiling multiplicatively (Monte Carlo callers pass
/// their sampling tolerance; grid callers can pass ~1e-6).
pub fn moment_report(series: &MomentSeries, params: &ModelParams, slack: f64) -> MomentReport {
    let d = params.dim;
    let u0 = &series.means[0];
    let mut mean_deviation = Vec::with_capacity(series.times.len());
    let mut max_dev = 0.0f64;
    for (t, mean) in series.times.iter().zip(&series.means) {
        let exact = mean_exact(params, &u0[..d], *t);
        let mut dev = 0.0;
        for a in 0..d {
            let e = mean[a] - exact[a];
            dev += e * e;
        }
        let dev = dev.sqrt();
        max_dev = max_dev.max(dev);
        mean_deviation.push(dev);
    }
    // |u(t)| stays between |u(0)| and |x0| under the exact law
    let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
    let umax = norm(&u0[..d]).max(norm(&params.x0));
    let c = d as f64 * params.kappa_max() + params.lambda * norm(&params.x0) * umax
        + params.mu * umax * umax;
    let e0 = series.energies[0];
    let energy_bound = if params.lambda > 0.0 {
        e0.max(c / (2.0 * params.lambda))
    } else {
        let t_end = series.times.last().copied().unwrap_or(0.0);
        e0 + c * t_end
    };
    let energy_bound = energy_bound * (1.0 + slack) + slack;
    let max_energy = series.energies.iter().fold(0.0f64, |m, &e| m.max(e));
    MomentReport {
        mean_deviation,
        max_mean_deviation: max_dev,
        max_energy,
        energy_bound,
        energy_within_bound: max_energy <= energy_bound,
    }
}

/// Restricts a fine reference field to the geometry of `coarse` by linear
/// interpolation and renormalizes it to unit mass.
pub fn restrict_reference(fine: &GridField, coarse: &GridField) -> Result<GridField, DiagError> {
    let mut out = coarse.like();
    let dim = coarse.dim();
    let mut pt = [0.0f64; MAX_DIM];
    for idx in 0..out.len() {
        out.point_at(idx, &mut pt);
        let v = fine
            .sample_linear(&pt[..dim])
            .ok_or_else(|| DiagError::OutOfRange(pt[..dim].to_vec()))?;
        out.values_mut()[idx] = v.max(0.0);
    }
    out.normalize_mass().map_err(|_| DiagError::ZeroMass)?;
    Ok(out)
}

/// Relative entropy of each snapshot against a fine-grid reference
/// solution, restricted once to the snapshots' grid.
pub fn reference_solution_entropy(
    snapshots: &[(f64, GridField)],
    fine_reference: &GridField,
) -> Result<DecaySeries, DiagError> {
    let Some((_, first)) = snapshots.first() else {
        return DecaySeries::new(Vec::new(), Vec::new(), "relative entropy vs reference");
    };
    let reference = restrict_reference(fine_reference, first)?;
    let mut times = Vec::with_capacity(snapshots.len());
    let mut values = Vec::with_capacity(snapshots.len());
    for (t, f) in snapshots {
        times.push(*t);
        values.push(relative_entropy(f, &reference)?);
    }
    DecaySeries::new(times, values, "relative entropy vs reference solution")
}
