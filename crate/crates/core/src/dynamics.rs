//! Noise synthesis, stochastic convolution and trajectory simulation for the
//! noisy system `X^eps_x` and the controlled system `X^{eps,u}_x`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{DiffusionSpec, DriftSpec, NoiseSpec};
use crate::domain::{Basis, DomainSpec, Field, PathField};
use crate::error::{Error, Result};
use crate::rng::IncrementStream;
use crate::scalar::Real;
use crate::stats::{Estimate, Moments};
use crate::stepper::{Kernel, StepStatus};

/// Basis plus coefficient data: everything a trajectory depends on except
/// the run parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub basis: Basis<T>,
    pub drift: DriftSpec<T>,
    pub diffusion: DiffusionSpec<T>,
    pub noise: NoiseSpec,
    lambda: Vec<T>,
}

impl<T: Real> Model<T> {
    pub fn new(basis: Basis<T>, drift: DriftSpec<T>, diffusion: DiffusionSpec<T>, noise: NoiseSpec) -> Result<Self> {
        let d = *basis.domain();
        let lambda = noise.lambda_values(d.components, d.n_modes)?;
        let m = Self {
            basis,
            drift,
            diffusion,
            noise,
            lambda,
        };
        m.kernel(T::one(), T::zero())?;
        Ok(m)
    }

    #[inline]
    pub fn domain(&self) -> &DomainSpec<T> {
        self.basis.domain()
    }

    /// `lambda_{n,j}`, channel-major.
    pub fn lambda(&self) -> &[T] {
        &self.lambda
    }

    pub fn j_modes(&self) -> usize {
        self.lambda.len() / self.domain().components
    }

    pub fn kernel(&self, dt: T, eps: T) -> Result<Kernel<'_, T>> {
        Kernel::new(&self.basis, &self.drift, Some(&self.diffusion), self.lambda.clone(), dt, eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams<T> {
    pub eps: T,
    pub horizon: T,
    pub dt: T,
    pub seed: u64,
    /// Moment order used by the moment probes.
    pub p: u32,
    /// Factorization exponents; defaults derive from the noise regularity.
    pub alpha: Option<T>,
    pub gamma: Option<T>,
}

impl<T: Real> SimParams<T> {
    pub fn new(eps: T, horizon: T, dt: T, seed: u64) -> Self {
        Self {
            eps,
            horizon,
            dt,
            seed,
            p: 2,
            alpha: None,
            gamma: None,
        }
    }

    pub fn with_eps(mut self, eps: T) -> Self {
        self.eps = eps;
        self
    }

    /// `T / dt`, which must be an integer.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.dt > T::zero()) || !(self.horizon > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "horizon {} and step {} must be positive",
                self.horizon, self.dt
            )));
        }
        if self.eps < T::zero() || !self.eps.is_finite() {
            return Err(Error::InvalidParameter(format!("noise intensity {} must be nonnegative", self.eps)));
        }
        let k = (self.horizon / self.dt).round();
        if ((k * self.dt - self.horizon) / self.horizon).abs() > T::lit(1e-9) {
            return Err(Error::InvalidParameter(format!(
                "step {} does not divide horizon {}",
                self.dt, self.horizon
            )));
        }
        Ok(k.to_usize().unwrap_or(0))
    }

    /// `(alpha, gamma)` with `0 < gamma < alpha < (1 - beta (rho-2)/rho) / 2`.
    pub fn factorization_exponents(&self, noise: &NoiseSpec) -> Result<(T, T)> {
        let ceiling = T::lit(0.5 * (1.0 - noise.effective_beta()));
        let alpha = self.alpha.unwrap_or(T::lit(0.9) * ceiling);
        let gamma = self.gamma.unwrap_or(alpha / T::lit(2.0));
        if !(gamma > T::zero() && gamma < alpha && alpha < ceiling) {
            return Err(Error::InvalidParameter(format!(
                "factorization exponents need 0 < gamma < alpha < {ceiling}, got alpha={alpha}, gamma={gamma}"
            )));
        }
        Ok((alpha, gamma))
    }
}

/// Piecewise-constant control: `frames[m]` acts on `[t_m, t_{m+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath<T> {
    dt: T,
    frames: Vec<Field<T>>,
    bound: T,
}

impl<T: Real> ControlPath<T> {
    /// Rejects controls whose squared norm exceeds `bound` by more than 1e-9.
    pub fn new(dt: T, frames: Vec<Field<T>>, bound: T) -> Result<Self> {
        if frames.is_empty() || !(dt > T::zero()) {
            return Err(Error::InvalidParameter("a control needs a positive step and at least one frame".into()));
        }
        let d = *frames[0].domain();
        if frames.iter().any(|f| *f.domain() != d) {
            return Err(Error::GridMismatch("control frames on different grids".into()));
        }
        let c = Self { dt, frames, bound };
        let n2 = c.norm_sq();
        if n2 > bound + T::lit(1e-9) {
            return Err(Error::InvalidParameter(format!("control norm {n2} exceeds declared bound {bound}")));
        }
        Ok(c)
    }

    /// Declared bound set to the control's own norm.
    pub fn unbounded(dt: T, frames: Vec<Field<T>>) -> Result<Self> {
        let tmp = Self {
            dt,
            frames,
            bound: T::infinity(),
        };
        let n = tmp.norm_sq();
        Self::new(tmp.dt, tmp.frames, n)
    }

    pub fn zero(domain: DomainSpec<T>, dt: T, n_steps: usize) -> Self {
        Self {
            dt,
            frames: vec![Field::zeros(domain); n_steps],
            bound: T::zero(),
        }
    }

    /// Synthesizes frames from Brownian coordinates (`r x J` per step).
    pub fn from_coords(basis: &Basis<T>, j_modes: usize, dt: T, coords: &[Vec<T>]) -> Result<Self> {
        let d = *basis.domain();
        let m = d.n_modes;
        let frames = coords
            .iter()
            .map(|c| {
                if c.len() != d.components * j_modes {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} coordinates", d.components * j_modes),
                        found: format!("{}", c.len()),
                    });
                }
                let mut s = crate::domain::Spectral::zeros(d.components, m);
                for i in 0..d.components {
                    for k in 0..j_modes {
                        s.values[i * m + k] = c[i * j_modes + k];
                    }
                }
                basis.to_grid(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::unbounded(dt, frames)
    }

    /// `u_{n,j}(t_m) = <u_n(t_m), f_{n,j}>` for `j < J`.
    pub fn coords(&self, basis: &Basis<T>, j_modes: usize) -> Result<Vec<Vec<T>>> {
        let d = *basis.domain();
        self.frames
            .iter()
            .map(|f| {
                let s = basis.to_spectral(f)?;
                let mut c = Vec::with_capacity(d.components * j_modes);
                for i in 0..d.components {
                    c.extend_from_slice(&s.values[i * d.n_modes..i * d.n_modes + j_modes]);
                }
                Ok(c)
            })
            .collect()
    }

    /// `sum_m dt * h * sum |u(t_m)|^2`.
    pub fn norm_sq(&self) -> T {
        self.frames.iter().map(|f| f.l2_norm_sq()).sum::<T>() * self.dt
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            dt: self.dt,
            frames: self.frames.iter().map(|f| f.scaled(c)).collect(),
            bound: self.bound * c * c,
        }
    }

    #[inline]
    pub fn dt(&self) -> T {
        self.dt
    }

    #[inline]
    pub fn bound(&self) -> T {
        self.bound
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.frames.len()
    }

    #[inline]
    pub fn frames(&self) -> &[Field<T>] {
        &self.frames
    }

    pub fn domain(&self) -> &DomainSpec<T> {
        self.frames[0].domain()
    }
}

/// `sum_m dt sum_j c_{m,j}^2` for Brownian coordinates.
pub fn coords_norm_sq<T: Real>(dt: T, coords: &[Vec<T>]) -> T {
    coords.iter().map(|c| c.iter().map(|v| *v * *v).sum::<T>()).sum::<T>() * dt
}

/// Gaussian increments `dW_{n,j}` for every step, channel-major per step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrements<T> {
    pub dt: T,
    pub components: usize,
    pub modes: usize,
    pub steps: Vec<Vec<T>>,
}

/// Materializes the increments a trajectory with the same `(seed, replicate)`
/// consumes.
pub fn sample_increments<T: Real>(
    params: &SimParams<T>,
    components: usize,
    modes: usize,
    replicate: u64,
) -> Result<NoiseIncrements<T>> {
    let n = params.n_steps()?;
    let mut s = IncrementStream::new(params.seed, replicate, params.dt.as_f64(), components, modes);
    let steps = (0..n)
        .map(|_| {
            let mut v = vec![T::zero(); components * modes];
            s.fill(&mut v);
            v
        })
        .collect();
    Ok(NoiseIncrements {
        dt: params.dt,
        components,
        modes,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub path: PathField<T>,
    /// Set when the blow-up guard fired; the path then ends early.
    pub flagged: bool,
    /// Girsanov log-weight, present only for `eps > 0`.
    pub log_weight: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome<T> {
    pub flagged: bool,
    pub log_weight: Option<T>,
    pub steps: usize,
    pub stopped: bool,
}

/// Runs one trajectory, handing every frame `(m, t_m, X(t_m))` to `observe`.
/// Returning `false` from the observer stops the run.
pub fn simulate_streaming<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    coords: Option<&[Vec<T>]>,
    params: &SimParams<T>,
    replicate: u64,
    observe: &mut dyn FnMut(usize, T, &[T]) -> bool,
) -> Result<RunOutcome<T>> {
    let n = params.n_steps()?;
    if x.domain() != model.domain() {
        return Err(Error::GridMismatch("initial data on a different grid".into()));
    }
    if let Some(c) = coords {
        if c.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} control steps"),
                found: format!("{}", c.len()),
            });
        }
    }
    let kernel = model.kernel(params.dt, params.eps)?;
    let d = *model.domain();
    let jm = model.j_modes();
    let noisy = params.eps > T::zero() && jm > 0;
    let mut stream = IncrementStream::new(params.seed, replicate, params.dt.as_f64(), d.components, jm);
    let mut dw = vec![T::zero(); d.components * jm];
    let mut st = kernel.state(x.values());
    let inv_sqrt = if params.eps > T::zero() { T::one() / params.eps.sqrt() } else { T::zero() };
    let mut lw = T::zero();
    let mut out = RunOutcome {
        flagged: false,
        log_weight: None,
        steps: 0,
        stopped: false,
    };
    if !observe(0, T::zero(), x.values()) {
        out.stopped = true;
        return Ok(out);
    }
    for m in 0..n {
        let t = params.dt * T::from_usize_lossy(m);
        if noisy {
            stream.fill(&mut dw);
        }
        let c = coords.map(|c| c[m].as_slice());
        if let (Some(c), true) = (c, noisy) {
            let mut cross = T::zero();
            let mut sq = T::zero();
            for (a, w) in c.iter().zip(&dw) {
                cross = cross + *a * *w;
                sq = sq + *a * *a;
            }
            lw = lw - inv_sqrt * cross - sq * params.dt / (T::lit(2.0) * params.eps);
        }
        let status = kernel.step(&mut st, t, None, None, c, if noisy { Some(&dw) } else { None })?;
        out.steps = m + 1;
        if status == StepStatus::Flagged {
            out.flagged = true;
            break;
        }
        if !observe(m + 1, t + params.dt, &st.v) {
            out.stopped = true;
            break;
        }
    }
    if params.eps > T::zero() {
        out.log_weight = Some(lw);
    }
    Ok(out)
}

fn collect_run<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    coords: Option<&[Vec<T>]>,
    params: &SimParams<T>,
    replicate: u64,
) -> Result<Trajectory<T>> {
    let d = *model.domain();
    let mut frames = Vec::with_capacity(params.n_steps()? + 1);
    let out = simulate_streaming(model, x, coords, params, replicate, &mut |_, _, v| {
        frames.push(Field::from_raw(d, v.to_vec()));
        true
    })?;
    Ok(Trajectory {
        path: PathField::from_raw(params.dt, frames),
        flagged: out.flagged,
        log_weight: out.log_weight,
    })
}

/// One trajectory of `X^eps_x`.
pub fn simulate<T: Real>(model: &Model<T>, x: &Field<T>, params: &SimParams<T>, replicate: u64) -> Result<Trajectory<T>> {
    collect_run(model, x, None, params, replicate)
}

fn control_coords<T: Real>(model: &Model<T>, u: &ControlPath<T>, params: &SimParams<T>) -> Result<Vec<Vec<T>>> {
    let n = params.n_steps()?;
    if u.n_steps() != n || ((u.dt() - params.dt) / params.dt).abs() > T::lit(1e-9) {
        return Err(Error::GridMismatch(format!(
            "control has {} steps of {}, run has {n} of {}",
            u.n_steps(),
            u.dt(),
            params.dt
        )));
    }
    if u.domain() != model.domain() {
        return Err(Error::GridMismatch("control on a different grid".into()));
    }
    u.coords(&model.basis, model.j_modes())
}

/// One trajectory of `X^{eps,u}_x` and its Girsanov log-weight
/// `-eps^{-1/2} sum u dW - (2 eps)^{-1} sum dt u^2` over Brownian coordinates.
pub fn simulate_controlled<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    u: &ControlPath<T>,
    params: &SimParams<T>,
    replicate: u64,
) -> Result<Trajectory<T>> {
    let coords = control_coords(model, u, params)?;
    collect_run(model, x, Some(&coords), params, replicate)
}

/// The skeleton `X^{0,u}_x` (deterministic, seed-independent).
pub fn skeleton<T: Real>(model: &Model<T>, x: &Field<T>, u: Option<&ControlPath<T>>, params: &SimParams<T>) -> Result<PathField<T>> {
    let p = params.with_eps(T::zero());
    let t = match u {
        Some(u) => simulate_controlled(model, x, u, &p, 0)?,
        None => simulate(model, x, &p, 0)?,
    };
    if t.flagged {
        return Err(Error::Convergence("skeleton exceeded the blow-up guard".into()));
    }
    Ok(t.path)
}

/// Skeleton driven directly by Brownian coordinates.
pub fn skeleton_coords<T: Real>(model: &Model<T>, x: &Field<T>, coords: &[Vec<T>], params: &SimParams<T>) -> Result<PathField<T>> {
    let t = collect_run(model, x, Some(coords), &params.with_eps(T::zero()), 0)?;
    if t.flagged {
        return Err(Error::Convergence("skeleton exceeded the blow-up guard".into()));
    }
    Ok(t.path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ConvolutionMethod {
    Direct,
    Factorization { alpha: f64 },
}

/// Spectral increments `(sigma_l * w_l)^` with `w_l = sum_j lambda_j dW_{l,j} f_j`.
fn driven_increments<T: Real>(
    basis: &Basis<T>,
    sigma_path: &PathField<T>,
    lambda: &[T],
    inc: &NoiseIncrements<T>,
) -> Result<Vec<Vec<T>>> {
    let d = *basis.domain();
    let (m, r, jm) = (d.n_modes, d.components, inc.modes);
    if sigma_path.domain() != &d {
        return Err(Error::GridMismatch("multiplier path on a different grid".into()));
    }
    if sigma_path.frames().len() < inc.steps.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("at least {} multiplier frames", inc.steps.len()),
            found: format!("{}", sigma_path.frames().len()),
        });
    }
    if lambda.len() != r * jm || jm > m {
        return Err(Error::ShapeMismatch {
            expected: format!("{} noise coefficients", r * jm),
            found: format!("{}", lambda.len()),
        });
    }
    let mut ws = basis.workspace();
    let mut coef = vec![T::zero(); d.spectral_len()];
    let mut grid = vec![T::zero(); d.field_len()];
    let mut out = Vec::with_capacity(inc.steps.len());
    for (l, dw) in inc.steps.iter().enumerate() {
        for c in 0..r {
            for k in 0..jm {
                coef[c * m + k] = lambda[c * jm + k] * dw[c * jm + k];
            }
        }
        basis.synthesize_into(&coef, &mut grid, &mut ws);
        for (g, s) in grid.iter_mut().zip(sigma_path.frame(l).values()) {
            *g = *g * *s;
        }
        let mut hat = vec![T::zero(); d.spectral_len()];
        basis.analyze_into(&grid, &mut hat, &mut ws);
        out.push(hat);
    }
    Ok(out)
}

/// `Z(t) = int_0^t S(t-s) R(s) dw(s)` with diagonal channel coupling:
/// component `i` of `sigma_path` multiplies noise channel `i`.
///
/// `Direct` accumulates each mode as a discrete Ornstein-Uhlenbeck process.
/// `Factorization` first forms `Z_alpha(tau_m) = sum_{l<m} (tau_m - t_l)^{-alpha}
/// S(tau_m - t_{l+1}) dB_l` and then the fractional convolution
/// `(sin(pi alpha)/pi) int (t-tau)^{alpha-1} S(t-tau) Z_alpha(tau) dtau`, with the
/// kernel integrated exactly over each cell and `Z_alpha` taken at the right end.
pub fn stochastic_convolution<T: Real>(
    basis: &Basis<T>,
    sigma_path: &PathField<T>,
    lambda: &[T],
    inc: &NoiseIncrements<T>,
    method: ConvolutionMethod,
) -> Result<PathField<T>> {
    let d = *basis.domain();
    let ns = d.spectral_len();
    let db = driven_increments(basis, sigma_path, lambda, inc)?;
    let dt = inc.dt;
    let decay: Vec<T> = basis.eigenvalues().iter().map(|a| (-*a * dt).exp()).collect();
    let weight: Vec<T> = basis.eigenvalues().iter().map(|a| T::phi1(*a * dt)).collect();
    let n = db.len();
    let mut hats: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    match method {
        ConvolutionMethod::Direct => {
            let mut z = vec![T::zero(); ns];
            hats.push(z.clone());
            for b in &db {
                for k in 0..ns {
                    z[k] = decay[k] * z[k] + weight[k] * b[k];
                }
                hats.push(z.clone());
            }
        }
        ConvolutionMethod::Factorization { alpha } => {
            if !(alpha > 0.0 && alpha < 0.5) {
                return Err(Error::InvalidParameter(format!("factorization exponent {alpha} outside (0, 1/2)")));
            }
            let a = T::lit(alpha);
            // powers[q][k] = decay_k^q
            let mut powers = vec![vec![T::one(); ns]; n + 1];
            for q in 1..=n {
                for k in 0..ns {
                    powers[q][k] = powers[q - 1][k] * decay[k];
                }
            }
            let mut z_alpha = vec![vec![T::zero(); ns]; n + 1];
            for m in 1..=n {
                for l in 0..m {
                    let ker = (dt * T::from_usize_lossy(m - l)).powf(-a);
                    let p = &powers[m - l - 1];
                    let row = &mut z_alpha[m];
                    for k in 0..ns {
                        row[k] = row[k] + ker * p[k] * weight[k] * db[l][k];
                    }
                }
            }
            let c = (T::PI() * a).sin() / T::PI();
            hats.push(vec![T::zero(); ns]);
            for nn in 1..=n {
                let mut z = vec![T::zero(); ns];
                let tn = dt * T::from_usize_lossy(nn);
                for m in 1..=nn {
                    let lo = tn - dt * T::from_usize_lossy(m - 1);
                    let hi = tn - dt * T::from_usize_lossy(m);
                    let w = (lo.powf(a) - hi.max(T::zero()).powf(a)) / a;
                    let p = &powers[nn - m];
                    for k in 0..ns {
                        z[k] = z[k] + c * w * p[k] * z_alpha[m][k];
                    }
                }
                hats.push(z);
            }
        }
    }
    let mut ws = basis.workspace();
    let frames = hats
        .iter()
        .map(|h| {
            let mut g = vec![T::zero(); d.field_len()];
            basis.synthesize_into(h, &mut g, &mut ws);
            Field::from_raw(d, g)
        })
        .collect();
    PathField::new(dt, frames)
}

/// Monte Carlo estimate of `E sup_{t, xi} |Z|^p` for the stochastic
/// convolution along `X^eps_x`, one estimate per initial datum.
pub fn convolution_moment_probe<T: Real>(
    model: &Model<T>,
    xs: &[Field<T>],
    params: &SimParams<T>,
    n_samples: usize,
) -> Result<Vec<Estimate>> {
    if !model.diffusion.is_diagonal() {
        return Err(Error::InvalidParameter("moment probe supports diagonal diffusion only".into()));
    }
    let d = *model.domain();
    let (r, n) = (d.components, d.n_grid);
    let xis = d.grid();
    let p = params.p as i32;
    xs.iter()
        .enumerate()
        .map(|(xi_idx, x)| {
            let vals = (0..n_samples as u64)
                .into_par_iter()
                .map(|rep| -> Result<(f64, bool)> {
                    let mut sig_frames = Vec::new();
                    let mut pt = vec![T::zero(); r];
                    let mut sm = vec![T::zero(); r * r];
                    let out = simulate_streaming(model, x, None, params, rep, &mut |m, t, v| {
                        let mut f = vec![T::zero(); d.field_len()];
                        for j in 0..n {
                            for c in 0..r {
                                pt[c] = v[c * n + j];
                            }
                            model.diffusion.eval(t, xis[j], &pt, &mut sm);
                            for c in 0..r {
                                f[c * n + j] = sm[c * r + c];
                            }
                        }
                        let _ = m;
                        sig_frames.push(Field::from_raw(d, f));
                        true
                    })?;
                    if out.flagged {
                        return Ok((0.0, true));
                    }
                    let inc = sample_increments(params, r, model.j_modes(), rep)?;
                    let sp = PathField::from_raw(params.dt, sig_frames);
                    let z = stochastic_convolution(&model.basis, &sp, model.lambda(), &inc, ConvolutionMethod::Direct)?;
                    Ok((z.sup_norm().as_f64().powi(p), false))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut mo = Moments::default();
            let mut flagged = 0;
            for (v, f) in vals {
                if f {
                    flagged += 1;
                } else {
                    mo.push(v);
                }
            }
            Ok(Estimate::from_stats(format!("sup_moment_x{xi_idx}"), &mo, flagged))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_basis, OperatorSpec};
    use std::f64::consts::PI;

    fn linear_model(n: usize) -> Model<f64> {
        let d = DomainSpec::new(PI, n, n, 1).unwrap();
        let b = build_basis(&d, &OperatorSpec::uniform(1, 1.0).unwrap()).unwrap();
        Model::new(b, DriftSpec::zero(1), DiffusionSpec::constant(1, 1.0), NoiseSpec::white(0.75)).unwrap()
    }

    #[test]
    fn increments_reproducible() {
        let p = SimParams::new(0.1, 0.1, 0.01, 42);
        let a = sample_increments::<f64>(&p, 1, 8, 0).unwrap();
        let b = sample_increments::<f64>(&p, 1, 8, 0).unwrap();
        assert_eq!(a, b);
        let c = sample_increments::<f64>(&p, 1, 8, 1).unwrap();
        assert_ne!(a, c);
        let e = sample_increments::<f64>(&p, 1, 0, 0).unwrap();
        assert!(e.steps.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn increment_variance() {
        let p = SimParams::new(0.1, 1.0, 1e-3, 9);
        let inc = sample_increments::<f64>(&p, 1, 100, 0).unwrap();
        let xs: Vec<f64> = inc.steps.iter().flatten().cloned().collect();
        assert_eq!(xs.len(), 100_000);
        let m = Moments::from_slice(&xs);
        let se = crate::stats::variance_stderr(&xs);
        assert!((m.variance() - 1e-3).abs() < 3.0 * se, "{} vs 1e-3 (se {se})", m.variance());
        assert!(m.mean().abs() < 3.0 * m.stderr());
    }

    #[test]
    fn boundary_values_zero_and_deterministic_without_noise() {
        let model = linear_model(16);
        let x = Field::from_fn(*model.domain(), |_, xi| xi.sin()).unwrap();
        let p = SimParams::new(0.0, 0.1, 0.01, 1);
        let a = simulate(&model, &x, &p, 0).unwrap();
        let b = simulate(&model, &x, &SimParams { seed: 99, ..p }, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.log_weight.is_none());
        // Boundary points are outside the grid; eigenfunction synthesis vanishes there.
        let bd = model.basis.eigenfunction_at(3, PI);
        assert!(bd.abs() < 1e-14);
    }

    #[test]
    fn zero_control_matches_plain_simulation() {
        let model = linear_model(16);
        let x = Field::zeros(*model.domain());
        let p = SimParams::new(0.3, 0.2, 0.01, 5);
        let plain = simulate(&model, &x, &p, 2).unwrap();
        let u = ControlPath::zero(*model.domain(), 0.01, 20);
        let ctl = simulate_controlled(&model, &x, &u, &p, 2).unwrap();
        assert_eq!(plain.path, ctl.path);
        assert_eq!(ctl.log_weight, Some(0.0));
    }

    #[test]
    fn constant_single_mode_control() {
        let model = linear_model(32);
        let d = *model.domain();
        let (k, uk, t_end, dt) = (2usize, 1.7, 1.0, 1e-3);
        let n = 1000;
        let jm = model.j_modes();
        let mut c = vec![0.0; jm];
        c[k] = uk;
        let u = ControlPath::from_coords(&model.basis, jm, dt, &vec![c; n]).unwrap();
        let p = SimParams::new(0.0, t_end, dt, 0);
        let s = skeleton(&model, &Field::zeros(d), Some(&u), &p).unwrap();
        let alpha = model.basis.eigenvalue(0, k);
        let expect = uk / alpha * (1.0 - (-alpha * t_end).exp());
        let got = model.basis.to_spectral(s.last()).unwrap().get(0, k);
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        // coordinate round trip and norm
        let back = u.coords(&model.basis, jm).unwrap();
        assert!((back[5][k] - uk).abs() < 1e-12);
        assert!((u.norm_sq() - uk * uk * t_end).abs() < 1e-9);
    }

    #[test]
    fn control_bound_enforced() {
        let model = linear_model(8);
        let d = *model.domain();
        let f = Field::from_fn(d, |_, xi| xi.sin()).unwrap();
        let norm = ControlPath::unbounded(0.1, vec![f.clone(); 10]).unwrap().norm_sq();
        assert!(ControlPath::new(0.1, vec![f.clone(); 10], norm * 0.5).is_err());
        assert!(ControlPath::new(0.1, vec![f; 10], norm).is_ok());
    }

    #[test]
    fn factorization_window() {
        let p = SimParams::<f64>::new(0.1, 1.0, 0.01, 0);
        let noise = NoiseSpec::white(0.75);
        let (a, g) = p.factorization_exponents(&noise).unwrap();
        assert!((a - 0.45 * 0.25).abs() < 1e-15 && (g - a / 2.0).abs() < 1e-15);
        let bad = SimParams { alpha: Some(0.2), ..p };
        assert!(bad.factorization_exponents(&noise).is_err());
        assert!(SimParams::<f64>::new(0.1, 1.0, 0.3, 0).n_steps().is_err());
    }

    #[test]
    fn zero_multiplier_zero_convolution() {
        let model = linear_model(16);
        let d = *model.domain();
        let p = SimParams::new(1.0, 0.1, 0.01, 3);
        let inc = sample_increments(&p, 1, model.j_modes(), 0).unwrap();
        let zero = PathField::zeros(d, 0.01, 10).unwrap();
        for m in [ConvolutionMethod::Direct, ConvolutionMethod::Factorization { alpha: 0.1 }] {
            let z = stochastic_convolution(&model.basis, &zero, model.lambda(), &inc, m).unwrap();
            assert_eq!(z.sup_norm(), 0.0);
        }
    }

    #[test]
    fn direct_convolution_matches_additive_simulation() {
        // With F = 0 and sigma = 1, X^eps_0 = sqrt(eps) Z exactly.
        let model = linear_model(16);
        let d = *model.domain();
        let p = SimParams::new(0.25, 0.2, 0.01, 11);
        let x = simulate(&model, &Field::zeros(d), &p, 4).unwrap();
        let inc = sample_increments(&p, 1, model.j_modes(), 4).unwrap();
        let ones = PathField::new(0.01, vec![Field::from_values(d, vec![1.0; 16]).unwrap(); 21]).unwrap();
        let z = stochastic_convolution(&model.basis, &ones, model.lambda(), &inc, ConvolutionMethod::Direct).unwrap();
        let diff = crate::domain::path_distance(&x.path, &z.scaled(0.5)).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn moment_probe_zero_sigma() {
        let mut model = linear_model(8);
        model.diffusion = DiffusionSpec::constant(1, 0.0);
        let d = *model.domain();
        let p = SimParams::new(1.0, 0.1, 0.01, 0);
        let e = convolution_moment_probe(&model, &[Field::zeros(d)], &p, 4).unwrap();
        assert_eq!(e[0].value, 0.0);
    }
}
