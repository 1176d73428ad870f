//! Rate function evaluation by control recovery, the instanton (minimizing
//! control) by adjoint-gradient optimization, and level-set membership.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::SigmaForm;
use crate::domain::{path_distance, Field, PathField};
use crate::dynamics::{coords_norm_sq, skeleton_coords, ControlPath, Model, SimParams};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stepper::resolvent_sensitivity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMethod {
    Recovery,
    Optimization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult<T> {
    /// `I = 1/2 |u|^2` of the stored control.
    pub value: T,
    /// Brownian coordinates of the control, one `r x J` row per step.
    pub coords: Vec<Vec<T>>,
    pub control: ControlPath<T>,
    /// Recovery: `|X^{0,u}_x - phi|_{E_T}`. Terminal target: `|X^{0,u}_x(T) - y|_E`.
    /// Tube target: `(|X^{0,u}_x - phi|_{E_T} - delta)_+`.
    pub residual: T,
    pub method: RateMethod,
    pub iterations: usize,
    /// Optimization results bound the infimum from above only.
    pub upper_bound: bool,
    pub converged: bool,
    pub penalty: Option<T>,
}

impl<T: Real> RateResult<T> {
    fn build(model: &Model<T>, dt: T, coords: Vec<Vec<T>>, residual: T, method: RateMethod) -> Result<Self> {
        let value = coords_norm_sq(dt, &coords) / T::lit(2.0);
        let control = ControlPath::from_coords(&model.basis, model.j_modes(), dt, &coords)?;
        Ok(Self {
            value,
            coords,
            control,
            residual,
            method,
            iterations: 0,
            upper_bound: method == RateMethod::Optimization,
            converged: true,
            penalty: None,
        })
    }
}

/// Solves `a x = b` in place (row-major `r x r`), partial pivoting. Returns
/// `false` when a pivot falls below `floor`.
fn solve_small<T: Real>(a: &mut [T], b: &mut [T], r: usize, floor: T) -> bool {
    for col in 0..r {
        let piv = (col..r)
            .max_by(|&i, &j| a[i * r + col].abs().partial_cmp(&a[j * r + col].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(col);
        if !(a[piv * r + col].abs() > floor) {
            return false;
        }
        if piv != col {
            for k in 0..r {
                a.swap(col * r + k, piv * r + k);
            }
            b.swap(col, piv);
        }
        for row in col + 1..r {
            let f = a[row * r + col] / a[col * r + col];
            for k in col..r {
                a[row * r + k] = a[row * r + k] - f * a[col * r + k];
            }
            b[row] = b[row] - f * b[col];
        }
    }
    for col in (0..r).rev() {
        let mut s = b[col];
        for k in col + 1..r {
            s = s - a[col * r + k] * b[k];
        }
        b[col] = s / a[col * r + col];
    }
    true
}

fn sim_params_for<T: Real>(phi: &PathField<T>) -> SimParams<T> {
    SimParams::new(T::zero(), phi.horizon(), phi.dt(), 0)
}

/// `I_{x,T}(phi)` by inverting the skeleton scheme step by step: the control is
/// the unique coordinate field whose discrete skeleton reproduces `phi` on the
/// represented modes. Requires invertible `sigma` and `lambda_j > 0` for `j < J`.
pub fn rate_evaluate<T: Real>(model: &Model<T>, x: &Field<T>, phi: &PathField<T>) -> Result<RateResult<T>> {
    let d = *model.domain();
    if phi.domain() != &d || x.domain() != &d {
        return Err(Error::GridMismatch("path and model grids differ".into()));
    }
    let start = crate::domain::sup_norm(&phi.frame(0).sub(x)?);
    if start > T::lit(1e-9) * (T::one() + x.sup_norm()) {
        return Err(Error::InitialMismatch(start.as_f64()));
    }
    let (n, m, r, jm) = (d.n_grid, d.n_modes, d.components, model.j_modes());
    let lam = model.lambda();
    if let Some(j) = lam.iter().position(|l| !(l.abs() > T::zero())) {
        return Err(Error::Degenerate {
            t: 0.0,
            xi: f64::NAN,
            reason: format!("noise coefficient {} of channel {} vanishes; use instanton_minimize", j % jm.max(1) + 1, j / jm.max(1)),
        });
    }
    let dt = phi.dt();
    let basis = &model.basis;
    let decay: Vec<T> = basis.eigenvalues().iter().map(|a| (-*a * dt).exp()).collect();
    let weight: Vec<T> = basis.eigenvalues().iter().map(|a| T::phi1(*a * dt)).collect();
    let xis = d.grid();
    let mut ws = basis.workspace();
    let mut y = vec![T::zero(); d.field_len()];
    let mut y_hat = vec![T::zero(); d.spectral_len()];
    let mut v_hat = vec![T::zero(); d.spectral_len()];
    let mut hgrid = vec![T::zero(); d.field_len()];
    let mut h_hat = vec![T::zero(); d.spectral_len()];
    let mut pt = vec![T::zero(); r];
    let mut out = vec![T::zero(); r * r];
    let mut coords = Vec::with_capacity(phi.n_steps());
    let sigma_scale = sigma_reference(model);
    let floor = T::lit(1e-12) * sigma_scale;

    for s in 0..phi.n_steps() {
        let t = dt * T::from_usize_lossy(s);
        let t1 = t + dt;
        let (vn, vn1) = (phi.frame(s).values(), phi.frame(s + 1).values());
        for idx in 0..d.field_len() {
            let (c, j) = (idx / n, idx % n);
            y[idx] = vn1[idx] - dt * model.drift.g_eval(c, t1, xis[j], vn1[idx]);
        }
        basis.analyze_into(&y, &mut y_hat, &mut ws);
        basis.analyze_into(vn, &mut v_hat, &mut ws);
        // forcing increment in spectral space
        let mut g_hat: Vec<T> = (0..y_hat.len()).map(|k| (y_hat[k] - decay[k] * v_hat[k]) / weight[k]).collect();
        if model.drift.has_h() {
            for j in 0..n {
                for c in 0..r {
                    pt[c] = vn[c * n + j];
                }
                model.drift.h_eval(t, xis[j], &pt, &mut out[..r]);
                for c in 0..r {
                    hgrid[c * n + j] = dt * out[c];
                }
            }
            basis.analyze_into(&hgrid, &mut h_hat, &mut ws);
            for (g, h) in g_hat.iter_mut().zip(&h_hat) {
                *g = *g - *h;
            }
        }
        let mut c_row = vec![T::zero(); r * jm];
        match &model.diffusion.form {
            SigmaForm::Constant(sm) => {
                for k in 0..jm {
                    let mut a = sm.clone();
                    let mut b: Vec<T> = (0..r).map(|i| g_hat[i * m + k]).collect();
                    if !solve_small(&mut a, &mut b, r, floor) {
                        return Err(Error::Degenerate {
                            t: t.as_f64(),
                            xi: f64::NAN,
                            reason: "constant diffusion matrix is singular; use instanton_minimize".into(),
                        });
                    }
                    for nn in 0..r {
                        c_row[nn * jm + k] = b[nn] / (lam[nn * jm + k] * dt);
                    }
                }
            }
            _ => {
                let mut w = vec![T::zero(); d.field_len()];
                basis.synthesize_into(&g_hat, &mut w, &mut ws);
                for j in 0..n {
                    for c in 0..r {
                        pt[c] = vn[c * n + j];
                    }
                    model.diffusion.eval(t, xis[j], &pt, &mut out);
                    let mut b: Vec<T> = (0..r).map(|i| w[i * n + j]).collect();
                    if !solve_small(&mut out, &mut b, r, floor) {
                        return Err(Error::Degenerate {
                            t: t.as_f64(),
                            xi: xis[j].as_f64(),
                            reason: "diffusion is singular at this point; use instanton_minimize".into(),
                        });
                    }
                    for c in 0..r {
                        w[c * n + j] = b[c];
                    }
                }
                let mut w_hat = vec![T::zero(); d.spectral_len()];
                basis.analyze_into(&w, &mut w_hat, &mut ws);
                for nn in 0..r {
                    for k in 0..jm {
                        c_row[nn * jm + k] = w_hat[nn * m + k] / (lam[nn * jm + k] * dt);
                    }
                }
            }
        }
        coords.push(c_row);
    }
    let sk = skeleton_coords(model, x, &coords, &sim_params_for(phi))?;
    let residual = path_distance(&sk, phi)?;
    RateResult::build(model, dt, coords, residual, RateMethod::Recovery)
}

fn sigma_reference<T: Real>(model: &Model<T>) -> T {
    match (&model.diffusion.form, model.diffusion.sigma_min) {
        (SigmaForm::Constant(m), _) => m.iter().fold(T::zero(), |a, v| a.max(v.abs())).max(T::min_positive_value()),
        (_, Some(s)) if s > T::zero() => s,
        _ => T::one(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Inside,
    Outside,
    Boundary,
}

/// Classifies `phi` against the level set `{I_{x,T} <= s}` with a band of `tol`.
pub fn level_membership<T: Real>(model: &Model<T>, x: &Field<T>, phi: &PathField<T>, s: T, tol: T) -> Result<(Membership, T)> {
    let i = rate_evaluate(model, x, phi)?.value;
    let m = if (i - s).abs() <= tol {
        Membership::Boundary
    } else if i < s {
        Membership::Inside
    } else {
        Membership::Outside
    };
    Ok((m, i))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    Terminal(Field<T>),
    Tube { center: PathField<T>, delta: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule<T> {
    pub initial: T,
    pub factor: T,
    pub max_doublings: usize,
}

impl<T: Real> Default for PenaltySchedule<T> {
    fn default() -> Self {
        Self {
            initial: T::one(),
            factor: T::lit(2.0),
            max_doublings: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstantonProblem<T> {
    pub x: Field<T>,
    pub target: Target<T>,
    pub horizon: T,
    pub dt: T,
    pub penalty: PenaltySchedule<T>,
    /// Residual tolerance that ends the penalty continuation.
    pub tol: T,
    /// L-BFGS iterations per penalty stage.
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl<T: Real> InstantonProblem<T> {
    pub fn terminal(x: Field<T>, y: Field<T>, horizon: T, dt: T) -> Self {
        Self {
            x,
            target: Target::Terminal(y),
            horizon,
            dt,
            penalty: PenaltySchedule::default(),
            tol: T::lit(1e-4),
            max_iter: 200,
            restarts: 1,
            seed: 0,
        }
    }

    pub fn tube(x: Field<T>, center: PathField<T>, delta: T) -> Self {
        let (horizon, dt) = (center.horizon(), center.dt());
        Self {
            x,
            target: Target::Tube { center, delta },
            horizon,
            dt,
            penalty: PenaltySchedule::default(),
            tol: T::lit(1e-4),
            max_iter: 200,
            restarts: 1,
            seed: 0,
        }
    }

    fn params(&self) -> SimParams<T> {
        SimParams::new(T::zero(), self.horizon, self.dt, self.seed)
    }

    pub fn validate(&self, model: &Model<T>) -> Result<usize> {
        let n = self.params().n_steps()?;
        if !(self.penalty.initial > T::zero()) || !(self.penalty.factor > T::one()) {
            return Err(Error::InvalidParameter("penalty weights must start positive and strictly increase".into()));
        }
        if !(self.tol > T::zero()) || self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::InvalidParameter("tolerance, iteration budget and restarts must be positive".into()));
        }
        if self.x.domain() != model.domain() {
            return Err(Error::GridMismatch("initial data on a different grid".into()));
        }
        match &self.target {
            Target::Terminal(y) => {
                if y.domain() != model.domain() {
                    return Err(Error::GridMismatch("target on a different grid".into()));
                }
            }
            Target::Tube { center, delta } => {
                if center.domain() != model.domain() || center.n_steps() != n {
                    return Err(Error::GridMismatch("tube center does not match the run grid".into()));
                }
                if !(*delta >= T::zero()) {
                    return Err(Error::InvalidParameter("tube radius must be nonnegative".into()));
                }
            }
        }
        Ok(n)
    }
}

/// Misfit `Phi`, its residual, and the adjoint loads `dPhi/dv_m` per frame.
fn misfit<T: Real>(target: &Target<T>, path: &PathField<T>, need_loads: bool) -> Result<(T, T, Vec<Vec<T>>)> {
    let d = *path.domain();
    let h = d.spacing();
    let nf = path.frames().len();
    let mut loads = if need_loads { vec![vec![T::zero(); d.field_len()]; nf] } else { Vec::new() };
    match target {
        Target::Terminal(y) => {
            let e = path.last().sub(y)?;
            let val = e.values().iter().map(|v| *v * *v).sum::<T>() * h;
            if need_loads {
                for (l, v) in loads[nf - 1].iter_mut().zip(e.values()) {
                    *l = T::lit(2.0) * h * *v;
                }
            }
            Ok((val, e.sup_norm(), loads))
        }
        Target::Tube { center, delta } => {
            let dt = path.dt();
            let mut val = T::zero();
            for m in 1..nf {
                let (a, b) = (path.frame(m).values(), center.frame(m).values());
                for i in 0..a.len() {
                    let e = a[i] - b[i];
                    let ex = (e.abs() - *delta).max(T::zero());
                    val = val + dt * h * ex * ex;
                    if need_loads {
                        loads[m][i] = T::lit(2.0) * dt * h * ex * e.sign();
                    }
                }
            }
            let res = (path_distance(path, center)? - *delta).max(T::zero());
            Ok((val, res, loads))
        }
    }
}

/// Gradient of `sum_m <loads_m, v_m>` with respect to the control coordinates,
/// by the adjoint of the implemented skeleton step.
fn adjoint<T: Real>(model: &Model<T>, path: &PathField<T>, coords: &[Vec<T>], loads: &[Vec<T>]) -> Vec<Vec<T>> {
    let d = *model.domain();
    let basis = &model.basis;
    let (n, m, r, jm) = (d.n_grid, d.n_modes, d.components, model.j_modes());
    let (h, dt) = (d.spacing(), path.dt());
    let lam = model.lambda();
    let xis = d.grid();
    let decay: Vec<T> = basis.eigenvalues().iter().map(|a| (-*a * dt).exp()).collect();
    let weight: Vec<T> = basis.eigenvalues().iter().map(|a| T::phi1(*a * dt)).collect();
    let sigma_const = match &model.diffusion.form {
        SigmaForm::Constant(s) => Some(s.clone()),
        _ => None,
    };
    let mut ws = basis.workspace();
    let (nf, ns) = (d.field_len(), d.spectral_len());
    let mut grad = vec![vec![T::zero(); r * jm]; coords.len()];
    let mut lam_v = loads[coords.len()].clone();
    let mut mu_y = vec![T::zero(); nf];
    let mut mu_yhat = vec![T::zero(); ns];
    let mut spec = vec![T::zero(); ns];
    let mut mu_v = vec![T::zero(); nf];
    let mut mu_g = vec![T::zero(); nf];
    let mut drive = vec![T::zero(); ns];
    let mut drive_grid = vec![T::zero(); nf];
    let mut mu_d = vec![T::zero(); nf];
    let mut pt = vec![T::zero(); r];
    let mut jac = vec![T::zero(); r * r * r];
    let mut sig = vec![T::zero(); r * r];
    for s in (0..coords.len()).rev() {
        let t = dt * T::from_usize_lossy(s);
        let v_next = path.frame(s + 1).values();
        let v_now = path.frame(s).values();
        if model.drift.has_g() {
            for idx in 0..nf {
                let (c, j) = (idx / n, idx % n);
                mu_y[idx] = lam_v[idx] * resolvent_sensitivity(&model.drift, c, t + dt, xis[j], v_next[idx], dt);
            }
        } else {
            mu_y.copy_from_slice(&lam_v);
        }
        basis.analyze_into(&mu_y, &mut mu_yhat, &mut ws);
        mu_yhat.iter_mut().for_each(|v| *v = *v / h);
        for k in 0..ns {
            spec[k] = decay[k] * mu_yhat[k];
        }
        basis.synthesize_into(&spec, &mut mu_v, &mut ws);
        mu_v.iter_mut().for_each(|v| *v = *v * h);
        for k in 0..ns {
            spec[k] = weight[k] * mu_yhat[k];
        }
        let grid_needed = model.drift.has_h() || sigma_const.is_none();
        if grid_needed {
            basis.synthesize_into(&spec, &mut mu_g, &mut ws);
            mu_g.iter_mut().for_each(|v| *v = *v * h);
        }
        if model.drift.has_h() {
            for j in 0..n {
                for c in 0..r {
                    pt[c] = v_now[c * n + j];
                }
                model.drift.h_jacobian_eval(t, xis[j], &pt, &mut sig);
                for k in 0..r {
                    let mut acc = T::zero();
                    for i in 0..r {
                        acc = acc + sig[i * r + k] * mu_g[i * n + j];
                    }
                    mu_v[k * n + j] = mu_v[k * n + j] + dt * acc;
                }
            }
        }
        let row = &mut grad[s];
        match &sigma_const {
            Some(sm) => {
                for nn in 0..r {
                    for k in 0..jm {
                        let mut acc = T::zero();
                        for i in 0..r {
                            acc = acc + sm[i * r + nn] * spec[i * m + k];
                        }
                        row[nn * jm + k] = dt * lam[nn * jm + k] * acc;
                    }
                }
            }
            None => {
                drive.iter_mut().for_each(|v| *v = T::zero());
                for nn in 0..r {
                    for k in 0..jm {
                        drive[nn * m + k] = lam[nn * jm + k] * coords[s][nn * jm + k] * dt;
                    }
                }
                basis.synthesize_into(&drive, &mut drive_grid, &mut ws);
                for j in 0..n {
                    for c in 0..r {
                        pt[c] = v_now[c * n + j];
                    }
                    model.diffusion.eval(t, xis[j], &pt, &mut sig);
                    model.diffusion.jacobian_eval(t, xis[j], &pt, &mut jac);
                    for nn in 0..r {
                        let mut acc = T::zero();
                        for i in 0..r {
                            acc = acc + sig[i * r + nn] * mu_g[i * n + j];
                        }
                        mu_d[nn * n + j] = acc;
                    }
                    for k in 0..r {
                        let mut acc = T::zero();
                        for i in 0..r {
                            for nn in 0..r {
                                acc = acc + jac[(i * r + nn) * r + k] * mu_g[i * n + j] * drive_grid[nn * n + j];
                            }
                        }
                        mu_v[k * n + j] = mu_v[k * n + j] + acc;
                    }
                }
                basis.analyze_into(&mu_d, &mut spec, &mut ws);
                for nn in 0..r {
                    for k in 0..jm {
                        row[nn * jm + k] = dt * lam[nn * jm + k] * spec[nn * m + k] / h;
                    }
                }
            }
        }
        for idx in 0..nf {
            lam_v[idx] = mu_v[idx] + loads[s][idx];
        }
    }
    grad
}

/// `1/2 |u|^2 + w * Phi(X^{0,u}_x)` and its gradient in the control
/// coordinates, with `Phi` the target misfit.
pub fn objective_and_gradient<T: Real>(
    model: &Model<T>,
    problem: &InstantonProblem<T>,
    weight: T,
    coords: &[Vec<T>],
) -> Result<(T, Vec<Vec<T>>)> {
    let params = problem.params();
    let path = skeleton_coords(model, &problem.x, coords, &params)?;
    let (phi, _, loads) = misfit(&problem.target, &path, true)?;
    let mut g = adjoint(model, &path, coords, &loads);
    for (gr, cr) in g.iter_mut().zip(coords) {
        for (a, c) in gr.iter_mut().zip(cr) {
            *a = weight * *a + problem.dt * *c;
        }
    }
    Ok((coords_norm_sq(problem.dt, coords) / T::lit(2.0) + weight * phi, g))
}

struct Stage<'a, T: Real> {
    model: &'a Model<T>,
    problem: &'a InstantonProblem<T>,
    weight: T,
    width: usize,
    scale: f64,
}

impl<T: Real> Stage<'_, T> {
    fn unpack(&self, s: &[f64]) -> Vec<Vec<T>> {
        s.chunks(self.width.max(1))
            .map(|c| c.iter().map(|v| T::lit(*v / self.scale)).collect())
            .collect()
    }

    fn eval(&self, s: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
        let coords = self.unpack(s);
        let (f, g) = objective_and_gradient(self.model, self.problem, self.weight, &coords)
            .map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        let flat = g.iter().flatten().map(|v| v.as_f64() / self.scale).collect();
        Ok((f.as_f64(), flat))
    }
}

impl<T: Real> CostFunction for Stage<'_, T> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, s: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let coords = self.unpack(s);
        let path = skeleton_coords(self.model, &self.problem.x, &coords, &self.problem.params())
            .map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        let (phi, _, _) = misfit(&self.problem.target, &path, false).map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        Ok((coords_norm_sq(self.problem.dt, &coords) / T::lit(2.0) + self.weight * phi).as_f64())
    }
}

impl<T: Real> Gradient for Stage<'_, T> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, s: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        self.eval(s).map(|(_, g)| g)
    }
}

struct RestartOutcome<T> {
    coords: Vec<Vec<T>>,
    residual: T,
    start_residual: T,
    iterations: usize,
    penalty: T,
}

fn run_restart<T: Real>(model: &Model<T>, problem: &InstantonProblem<T>, n: usize, restart: usize) -> Result<RestartOutcome<T>> {
    let width = model.domain().components * model.j_modes();
    let scale = problem.dt.as_f64().sqrt();
    let mut s = vec![0.0f64; n * width];
    if restart > 0 {
        let mut rng = crate::rng::stream(problem.seed, restart as u64);
        for v in s.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = 0.1 * z;
        }
    }
    let residual_of = |s: &[f64]| -> Result<T> {
        let st = Stage {
            model,
            problem,
            weight: T::one(),
            width,
            scale,
        };
        let path = skeleton_coords(model, &problem.x, &st.unpack(s), &problem.params())?;
        Ok(misfit(&problem.target, &path, false)?.1)
    };
    let start_residual = residual_of(&s)?;
    let mut residual = start_residual;
    let mut iterations = 0;
    let mut w = problem.penalty.initial;
    let mut penalty = w;
    for stage in 0..=problem.penalty.max_doublings {
        if stage > 0 {
            w = w * problem.penalty.factor;
        }
        penalty = w;
        let st = Stage {
            model,
            problem,
            weight: w,
            width,
            scale,
        };
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
            .with_tolerance_grad(1e-12)
            .and_then(|s| s.with_tolerance_cost(1e-15))
            .map_err(|e| Error::Convergence(e.to_string()))?;
        let init = s.clone();
        let run = Executor::new(st, solver)
            .configure(|c| c.param(init).max_iters(problem.max_iter as u64))
            .run();
        match run {
            Ok(res) => {
                iterations += res.state().get_iter() as usize;
                if let Some(p) = res.state().get_best_param() {
                    s = p.clone();
                }
            }
            Err(_) => break,
        }
        residual = residual_of(&s)?;
        if residual < problem.tol {
            break;
        }
    }
    let st = Stage {
        model,
        problem,
        weight: T::one(),
        width,
        scale,
    };
    Ok(RestartOutcome {
        coords: st.unpack(&s),
        residual,
        start_residual,
        iterations,
        penalty,
    })
}

/// Minimizes `1/2 |u|^2 + w * misfit` with penalty continuation; the gradient is
/// the exact derivative of the discrete scheme. Restarts run in parallel and the
/// best converged restart (smallest `I`) wins.
pub fn instanton_minimize<T: Real>(model: &Model<T>, problem: &InstantonProblem<T>) -> Result<RateResult<T>> {
    let n = problem.validate(model)?;
    let outcomes = (0..problem.restarts)
        .into_par_iter()
        .map(|k| run_restart(model, problem, n, k))
        .collect::<Result<Vec<_>>>()?;
    let energy = |o: &RestartOutcome<T>| coords_norm_sq(problem.dt, &o.coords);
    let best = outcomes
        .into_iter()
        .min_by(|a, b| {
            let ka = (a.residual >= problem.tol, energy(a));
            let kb = (b.residual >= problem.tol, energy(b));
            ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("at least one restart");
    let converged = best.residual < problem.tol;
    if !converged && !(best.residual < best.start_residual) {
        return Err(Error::Convergence(format!(
            "misfit did not decrease across the penalty sweep (residual {})",
            best.residual
        )));
    }
    let mut out = RateResult::build(model, problem.dt, best.coords, best.residual, RateMethod::Optimization)?;
    out.iterations = best.iterations;
    out.converged = converged;
    out.penalty = Some(best.penalty);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{DiffusionSpec, DriftSpec, NoiseSpec};
    use crate::domain::{build_basis, DomainSpec, OperatorSpec};
    use std::f64::consts::PI;

    fn model(drift: DriftSpec<f64>, diff: DiffusionSpec<f64>, n: usize) -> Model<f64> {
        let d = DomainSpec::new(PI, n, n, 1).unwrap();
        let b = build_basis(&d, &OperatorSpec::uniform(1, 1.0).unwrap()).unwrap();
        Model::new(b, drift, diff, NoiseSpec::white(0.5)).unwrap()
    }

    fn random_coords(n: usize, w: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::stream(seed, 0);
        (0..n)
            .map(|_| {
                (0..w)
                    .map(|k| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if k < 4 { z } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn small_solver() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0];
        let mut b: Vec<f64> = vec![4.0, 3.0];
        assert!(solve_small(&mut a, &mut b, 2, 1e-14));
        assert!((b[0] - 1.0).abs() < 1e-15 && (b[1] - 2.0).abs() < 1e-15);
        let mut s = vec![1.0, 2.0, 2.0, 4.0];
        assert!(!solve_small(&mut s, &mut [1.0, 1.0], 2, 1e-12));
    }

    #[test]
    fn zero_control_path_has_zero_rate() {
        let m = model(DriftSpec::allen_cahn_like(1), DiffusionSpec::constant(1, 1.0), 16);
        let d = *m.domain();
        let x = Field::from_fn(d, |_, xi| 2.0 * xi.sin()).unwrap();
        let p = SimParams::new(0.0, 0.2, 1e-3, 0);
        let phi = crate::dynamics::skeleton(&m, &x, None, &p).unwrap();
        let r = rate_evaluate(&m, &x, &phi).unwrap();
        assert!(r.value <= 1e-8, "{}", r.value);
        assert!(r.residual < 1e-10);
        let (mem, _) = level_membership(&m, &x, &phi, 0.0, 1e-8).unwrap();
        assert_ne!(mem, Membership::Outside);
    }

    #[test]
    fn recovery_inverts_skeleton_multiplicative() {
        let m = model(DriftSpec::allen_cahn_like(1), DiffusionSpec::bounded_multiplicative(1, 1.5, 0.5).unwrap(), 16);
        let d = *m.domain();
        let x = Field::from_fn(d, |_, xi| xi.sin()).unwrap();
        let p = SimParams::new(0.0, 0.1, 1e-3, 0);
        let c = random_coords(100, m.j_modes(), 3);
        let phi = skeleton_coords(&m, &x, &c, &p).unwrap();
        let r = rate_evaluate(&m, &x, &phi).unwrap();
        let expect = coords_norm_sq(1e-3, &c) / 2.0;
        assert!(((r.value - expect) / expect).abs() < 1e-9, "{} vs {expect}", r.value);
        assert!(r.residual < 1e-10);
    }

    #[test]
    fn degenerate_sigma_reported() {
        let m = model(DriftSpec::zero(1), DiffusionSpec::constant(1, 0.0), 8);
        let d = *m.domain();
        let x = Field::zeros(d);
        let phi = PathField::zeros(d, 0.1, 2).unwrap();
        assert!(matches!(rate_evaluate(&m, &x, &phi), Err(Error::Degenerate { .. })));
        let shifted = Field::from_fn(d, |_, _| 1.0).unwrap();
        let m2 = model(DriftSpec::zero(1), DiffusionSpec::constant(1, 1.0), 8);
        assert!(matches!(rate_evaluate(&m2, &shifted, &phi), Err(Error::InitialMismatch(_))));
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        for diff in [DiffusionSpec::constant(1, 1.0), DiffusionSpec::bounded_multiplicative(1, 1.0, 0.5).unwrap()] {
            let mut drift = DriftSpec::allen_cahn_like(1);
            drift.h = Some(std::sync::Arc::new(|_t, _xi, x: &[f64], o: &mut [f64]| o[0] = (x[0]).sin()));
            drift.h_jacobian = None;
            let m = model(drift, diff, 16);
            let d = *m.domain();
            let x = Field::from_fn(d, |_, xi| xi.sin()).unwrap();
            let y = Field::from_fn(d, |_, xi| 0.5 * (2.0 * xi).sin()).unwrap();
            let prob = InstantonProblem::terminal(x, y, 0.05, 1e-3);
            let c = random_coords(50, m.j_modes(), 7);
            let (_, g) = objective_and_gradient(&m, &prob, 3.0, &c).unwrap();
            let dir = random_coords(50, m.j_modes(), 8);
            let dd: f64 = g.iter().flatten().zip(dir.iter().flatten()).map(|(a, b)| a * b).sum();
            let e = 1e-5;
            let shift = |s: f64| -> Vec<Vec<f64>> {
                c.iter().zip(&dir).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + s * y).collect()).collect()
            };
            let fp = objective_and_gradient(&m, &prob, 3.0, &shift(e)).unwrap().0;
            let fm = objective_and_gradient(&m, &prob, 3.0, &shift(-e)).unwrap().0;
            let fd = (fp - fm) / (2.0 * e);
            assert!(((fd - dd) / dd).abs() < 1e-5, "{fd} vs {dd}");
        }
    }

    #[test]
    fn instanton_free_target_is_zero() {
        let m = model(DriftSpec::allen_cahn_like(1), DiffusionSpec::constant(1, 1.0), 16);
        let d = *m.domain();
        let x = Field::from_fn(d, |_, xi| xi.sin()).unwrap();
        let p = SimParams::new(0.0, 0.1, 1e-3, 0);
        let y = crate::dynamics::skeleton(&m, &x, None, &p).unwrap().last().clone();
        let r = instanton_minimize(&m, &InstantonProblem::terminal(x, y, 0.1, 1e-3)).unwrap();
        assert!(r.value <= 1e-8 && r.converged && r.upper_bound);
    }
}
