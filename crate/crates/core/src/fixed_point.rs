//! The deterministic solution map `M(z) = v + z`, where `v' = A v + F(t, v + z)`
//! with `v(0) = 0`, and the shifted map `M_x(z) = M(S(.) x + z)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::DriftSpec;
use crate::domain::{path_distance, Basis, Field, PathField};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stepper::{resolvent_solve, Kernel, StepStatus, DEFAULT_RESOLVENT_ITERS, DEFAULT_RESOLVENT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointParams<T> {
    pub dt: T,
    pub tol: T,
    pub max_iter: usize,
    /// Internal steps per output step; `z` is interpolated linearly.
    pub substeps: usize,
}

impl<T: Real> FixedPointParams<T> {
    pub fn new(dt: T) -> Self {
        Self {
            dt,
            tol: T::lit(DEFAULT_RESOLVENT_TOL),
            max_iter: DEFAULT_RESOLVENT_ITERS,
            substeps: 1,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.tol > T::zero()) {
            return Err(Error::InvalidParameter("resolvent tolerance must be positive".into()));
        }
        if self.substeps == 0 || self.max_iter == 0 {
            return Err(Error::InvalidParameter("substeps and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

fn check_grid<T: Real>(basis: &Basis<T>, z: &PathField<T>, params: &FixedPointParams<T>) -> Result<()> {
    params.validate()?;
    if z.domain() != basis.domain() {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", z.domain(), basis.domain())));
    }
    if ((z.dt() - params.dt) / params.dt).abs() > T::lit(1e-9) {
        return Err(Error::GridMismatch(format!(
            "path step {} differs from the map step {}",
            z.dt(),
            params.dt
        )));
    }
    Ok(())
}

fn run_map<T: Real>(
    basis: &Basis<T>,
    drift: &DriftSpec<T>,
    v0: &[T],
    z: &PathField<T>,
    params: &FixedPointParams<T>,
) -> Result<PathField<T>> {
    check_grid(basis, z, params)?;
    let s = params.substeps;
    let h = params.dt / T::from_usize_lossy(s);
    let kernel = Kernel::new(basis, drift, None, Vec::new(), h, T::zero())?.with_resolvent(params.tol, params.max_iter);
    let mut st = kernel.state(v0);
    let d = *basis.domain();
    let nf = d.field_len();
    let mut frames = Vec::with_capacity(z.n_steps() + 1);
    kernel.observe(&mut st, Some(z.frame(0).values()));
    frames.push(Field::from_raw(d, st.u.clone()));
    let mut za = vec![T::zero(); nf];
    let mut zb = vec![T::zero(); nf];
    for m in 0..z.n_steps() {
        let (z0, z1) = (z.frame(m).values(), z.frame(m + 1).values());
        for sub in 0..s {
            let t = z.time(m) + h * T::from_usize_lossy(sub);
            let wa = T::from_usize_lossy(sub) / T::from_usize_lossy(s);
            let wb = T::from_usize_lossy(sub + 1) / T::from_usize_lossy(s);
            for k in 0..nf {
                za[k] = z0[k] + wa * (z1[k] - z0[k]);
                zb[k] = z0[k] + wb * (z1[k] - z0[k]);
            }
            if sub + 1 == s {
                zb.copy_from_slice(z1);
            }
            if kernel.step(&mut st, t, Some(&za), Some(&zb), None, None)? == StepStatus::Flagged {
                return Err(Error::Convergence(format!(
                    "solution map left the finite range near t = {}",
                    t + h
                )));
            }
        }
        kernel.observe(&mut st, Some(z1));
        frames.push(Field::from_raw(d, st.u.clone()));
    }
    PathField::new(z.dt(), frames)
}

/// `M(z)` on the time grid of `z`.
pub fn m_apply<T: Real>(
    basis: &Basis<T>,
    drift: &DriftSpec<T>,
    z: &PathField<T>,
    params: &FixedPointParams<T>,
) -> Result<PathField<T>> {
    let zeros = vec![T::zero(); basis.domain().field_len()];
    run_map(basis, drift, &zeros, z, params)
}

/// `M_x(z) = M(S(.) x + z)`. Requires `z(0) = 0`.
///
/// Stepped with `v(0) = x`, which agrees with `m_apply` on the path
/// `S(t) x + z(t)` because the semigroup factor is exact.
pub fn m_x_apply<T: Real>(
    basis: &Basis<T>,
    drift: &DriftSpec<T>,
    x: &Field<T>,
    z: &PathField<T>,
    params: &FixedPointParams<T>,
) -> Result<PathField<T>> {
    if x.domain() != basis.domain() {
        return Err(Error::GridMismatch("initial data on a different grid".into()));
    }
    let z0 = z.frame(0).sup_norm();
    if z0 > T::zero() {
        return Err(Error::InvalidParameter(format!("z(0) must vanish, |z(0)| = {z0}")));
    }
    run_map(basis, drift, x.values(), z, params)
}

/// `t -> S(t) x` sampled at `t_m = m dt`.
pub fn semigroup_path<T: Real>(basis: &Basis<T>, x: &Field<T>, dt: T, n_steps: usize) -> Result<PathField<T>> {
    let a = basis.to_spectral(x)?;
    let frames = (0..=n_steps)
        .map(|m| basis.to_grid(&basis.semigroup_apply(&a, dt * T::from_usize_lossy(m))?))
        .collect::<Result<Vec<_>>>()?;
    PathField::new(dt, frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// `|M(z1) - M(z2)| / |z1 - z2|` per pair; zero for identical inputs.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

pub fn lipschitz_probe<T: Real>(
    basis: &Basis<T>,
    drift: &DriftSpec<T>,
    pairs: &[(PathField<T>, PathField<T>)],
    params: &FixedPointParams<T>,
) -> Result<LipschitzReport> {
    let ratios = pairs
        .par_iter()
        .map(|(a, b)| {
            let dz = path_distance(a, b)?;
            if dz == T::zero() {
                return Ok(0.0);
            }
            let ma = m_apply(basis, drift, a, params)?;
            let mb = m_apply(basis, drift, b, params)?;
            Ok((path_distance(&ma, &mb)? / dz).as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(LipschitzReport { ratios, max_ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub magnitude: f64,
    pub t: f64,
    pub measured: f64,
    /// `1 + t^{-1/(m-1)} + |z|_{E_t}`.
    pub shape: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBoundReport {
    pub rows: Vec<BoundRow>,
    /// Per check time: `(max - min) / max` of the measured values across magnitudes.
    pub variation: Vec<(f64, f64)>,
    /// Least-squares slope of `log measured` against `log t`, largest magnitude.
    pub fitted_exponent: f64,
    pub expected_exponent: f64,
    /// True when any relative variation exceeds `flag_tolerance`.
    pub grows_with_x: bool,
    pub flag_tolerance: f64,
}

impl UniformBoundReport {
    pub fn measured(&self, magnitude: f64, t: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.magnitude == magnitude && (r.t - t).abs() <= 1e-12 * t.max(1.0))
            .map(|r| r.measured)
    }
}

/// Slope of the least-squares line through `(x, y)`.
pub fn lsq_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Sup norm of `M_x(z)(t)` for `x = magnitude * profile` at each check time.
#[allow(clippy::too_many_arguments)]
pub fn uniform_bound_probe<T: Real>(
    basis: &Basis<T>,
    drift: &DriftSpec<T>,
    profile: &Field<T>,
    magnitudes: &[f64],
    z: &PathField<T>,
    t_checks: &[f64],
    params: &FixedPointParams<T>,
    flag_tolerance: f64,
) -> Result<UniformBoundReport> {
    let sd = drift.super_dissipativity.ok_or(Error::MissingSuperDissipativity)?;
    let m = sd.m.as_f64();
    let expected = -1.0 / (m - 1.0);
    let dt = z.dt().as_f64();
    let idx: Vec<usize> = t_checks
        .iter()
        .map(|t| {
            let k = (t / dt).round();
            if (k * dt - t).abs() > 1e-9 * t.max(dt) || k < 0.0 || k as usize > z.n_steps() {
                Err(Error::GridMismatch(format!("check time {t} is not on the output grid")))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<_>>()?;
    let scale = profile.sup_norm();
    if !(scale > T::zero()) {
        return Err(Error::InvalidParameter("profile must be nonzero".into()));
    }
    let unit = profile.scaled(T::one() / scale);
    let paths = magnitudes
        .par_iter()
        .map(|a| m_x_apply(basis, drift, &unit.scaled(T::lit(*a)), z, params))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (a, p) in magnitudes.iter().zip(&paths) {
        for (t, k) in t_checks.iter().zip(&idx) {
            let measured = p.frame(*k).sup_norm().as_f64();
            let shape = 1.0 + t.powf(expected) + z.sup_norm_until(T::lit(*t)).as_f64();
            rows.push(BoundRow {
                magnitude: *a,
                t: *t,
                measured,
                shape,
                ratio: measured / shape,
            });
        }
    }
    let mut variation = Vec::new();
    let mut grows = false;
    for (ti, t) in t_checks.iter().enumerate() {
        let vals: Vec<f64> = (0..magnitudes.len()).map(|mi| rows[mi * t_checks.len() + ti].measured).collect();
        let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
        let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
        let v = if hi > 0.0 { (hi - lo) / hi } else { 0.0 };
        grows |= v > flag_tolerance;
        variation.push((*t, v));
    }
    let top = magnitudes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (lx, ly): (Vec<f64>, Vec<f64>) = t_checks
        .iter()
        .enumerate()
        .filter_map(|(ti, t)| {
            let v = rows[top * t_checks.len() + ti].measured;
            (v > 0.0 && *t > 0.0).then(|| (t.ln(), v.ln()))
        })
        .unzip();
    let fitted = if lx.len() >= 2 { lsq_slope(&lx, &ly) } else { f64::NAN };
    Ok(UniformBoundReport {
        rows,
        variation,
        fitted_exponent: fitted,
        expected_exponent: expected,
        grows_with_x: grows,
        flag_tolerance,
    })
}

/// Replaces `g` by its Yosida regularization `g_n(v) = n (J_n v - v)`,
/// `J_n = (I - g / n)^{-1}`. A cross-check device: `g_n` is Lipschitz with
/// constant `n` and converges to `g` pointwise as `n` grows.
pub fn yosida_drift<T: Real>(drift: &DriftSpec<T>, n: T) -> DriftSpec<T> {
    let mut out = drift.clone();
    if let Some(g) = drift.g.clone() {
        let inv = T::one() / n;
        out.g = Some(std::sync::Arc::new(move |i, t, xi, v| {
            let j = resolvent_solve(|w| g(i, t, xi, w), None, inv, v, T::lit(1e-14), 400).unwrap_or(v);
            n * (j - v)
        }));
        out.g_prime = None;
        out.name = format!("{}-yosida", drift.name);
    }
    out
}
