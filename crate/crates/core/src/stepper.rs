//! One-step kernel shared by the solution map, the SPDE simulators and the
//! rate-function tools.
//!
//! State is `v` with `u = v + z` the reported value. One step from `t_n`:
//!
//! 1. evaluate `h(t_n, u_n)` and `sigma(t_n, u_n)` on the grid (left point);
//! 2. forcing `G = dt h + sigma (Q c dt + sqrt(eps) Q dW)`, where `c` and
//!    `dW` are Brownian coordinates of the control and the noise;
//! 3. `Y^ = exp(-a dt) v^_n + phi1(a dt) G^` mode-wise, `phi1(x) = (1-e^-x)/x`;
//! 4. `u_{n+1}` solves `u - dt g(t_{n+1}, u) = Y + z_{n+1}` pointwise and
//!    `v_{n+1} = u_{n+1} - z_{n+1}`.
//!
//! The `phi1` weight integrates a forcing held constant over the step
//! exactly against the semigroup, so the scheme reproduces constant-control
//! linear problems to rounding error.

use crate::coefficients::{DiffusionSpec, DriftSpec};
use crate::domain::{Basis, DstWorkspace};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// States beyond this magnitude are treated as blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

pub const DEFAULT_RESOLVENT_TOL: f64 = 1e-12;
pub const DEFAULT_RESOLVENT_ITERS: usize = 200;
const MAX_BRACKET_DOUBLINGS: usize = 1000;

/// Why a scalar resolvent solve failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolventFailure(pub String);

/// Solves `v - dt g(v) = rhs` for decreasing `g`.
///
/// Bracketing from `[rhs - dt|g(rhs)| - 1, rhs + dt|g(rhs)| + 1]` (expanded by
/// doubling if `g` misbehaves), then safeguarded Newton. Stops when the
/// residual is below `tol * max(1, |rhs|)`, followed by one polishing step.
pub fn resolvent_solve<T: Real>(
    g: impl Fn(T) -> T,
    dg: Option<&dyn Fn(T) -> T>,
    dt: T,
    rhs: T,
    tol: T,
    max_iter: usize,
) -> std::result::Result<T, ResolventFailure> {
    if !rhs.is_finite() {
        return Err(ResolventFailure(format!("right-hand side {rhs} is not finite")));
    }
    let psi = |v: T| v - dt * g(v) - rhs;
    let g0 = g(rhs);
    if !g0.is_finite() {
        return Err(ResolventFailure(format!("g({rhs}) is not finite")));
    }
    if g0 == T::zero() {
        return Ok(rhs);
    }
    let scale = T::one().max(rhs.abs());
    let target = tol * scale;
    let two = T::lit(2.0);
    let slope = |v: T| -> T {
        let d = match dg {
            Some(f) => f(v),
            None => {
                let h = T::epsilon().cbrt() * T::one().max(v.abs());
                (g(v + h) - g(v - h)) / (h + h)
            }
        };
        T::one() - dt * d
    };

    let mut half = dt * g0.abs() + T::one();
    let (mut lo, mut hi);
    let mut doublings = 0;
    loop {
        lo = rhs - half;
        hi = rhs + half;
        let (pl, ph) = (psi(lo), psi(hi));
        if !pl.is_finite() || !ph.is_finite() {
            return Err(ResolventFailure(format!(
                "non-finite g while bracketing on [{lo}, {hi}]"
            )));
        }
        if pl <= T::zero() && ph >= T::zero() {
            break;
        }
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(ResolventFailure(
                "bracket expansion exceeded 1000 doublings; g is not decreasing".into(),
            ));
        }
        half = half * two;
    }
    // The sign of psi(rhs) = -dt g(rhs) tells which half holds the root.
    if g0 > T::zero() {
        lo = rhs;
    } else {
        hi = rhs;
    }
    let mut v = rhs;
    let mut r = psi(v);
    for _ in 0..max_iter {
        if r.abs() <= target {
            // Polish: one more Newton step if it does not leave the bracket.
            let s = slope(v);
            if s.is_finite() && s > T::zero() {
                let w = v - r / s;
                if w >= lo && w <= hi {
                    let rw = psi(w);
                    if rw.abs() < r.abs() {
                        return Ok(w);
                    }
                }
            }
            return Ok(v);
        }
        if r < T::zero() {
            lo = v;
        } else {
            hi = v;
        }
        let s = slope(v);
        let mut next = if s.is_finite() && s > T::zero() { v - r / s } else { T::nan() };
        if !(next > lo && next < hi) {
            next = lo + (hi - lo) / two;
        }
        if next == v || hi - lo <= T::epsilon() * scale * T::lit(4.0) {
            return Ok(next);
        }
        v = next;
        r = psi(v);
        if !r.is_finite() {
            return Err(ResolventFailure(format!("non-finite residual at v = {v}")));
        }
    }
    if r.abs() <= target * T::lit(1e3) {
        return Ok(v);
    }
    Err(ResolventFailure(format!(
        "no convergence after {max_iter} iterations (residual {r})"
    )))
}

/// `dv/drhs` of the resolvent at its solution `v`.
#[inline]
pub fn resolvent_sensitivity<T: Real>(drift: &DriftSpec<T>, i: usize, t: T, xi: T, v: T, dt: T) -> T {
    T::one() / (T::one() - dt * drift.g_derivative(i, t, xi, v))
}

/// Outcome of a single step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Ok,
    /// State exceeded the blow-up guard or became non-finite.
    Flagged,
}

/// Immutable per-run data.
pub struct Kernel<'a, T: Real> {
    pub basis: &'a Basis<T>,
    pub drift: &'a DriftSpec<T>,
    pub diffusion: Option<&'a DiffusionSpec<T>>,
    /// `lambda_{n,j}`, channel-major, `J` entries per channel.
    pub lambda: Vec<T>,
    pub j_modes: usize,
    pub dt: T,
    pub sqrt_eps: T,
    pub decay: Vec<T>,
    pub weight: Vec<T>,
    pub tol: T,
    pub max_iter: usize,
    pub(crate) xis: Vec<T>,
    sigma_const: Option<Vec<T>>,
}

/// Scratch and state for one trajectory.
pub struct KernelState<T> {
    pub v: Vec<T>,
    pub v_hat: Vec<T>,
    pub u: Vec<T>,
    pub(crate) ws: DstWorkspace<T>,
    g_hat: Vec<T>,
    g_grid: Vec<T>,
    drive: Vec<T>,
    drive_grid: Vec<T>,
    y_hat: Vec<T>,
    y: Vec<T>,
    pt: Vec<T>,
    pt_out: Vec<T>,
    sig: Vec<T>,
}

impl<'a, T: Real> Kernel<'a, T> {
    pub fn new(
        basis: &'a Basis<T>,
        drift: &'a DriftSpec<T>,
        diffusion: Option<&'a DiffusionSpec<T>>,
        lambda: Vec<T>,
        dt: T,
        eps: T,
    ) -> Result<Self> {
        let d = basis.domain();
        if drift.components != d.components {
            return Err(Error::ShapeMismatch {
                expected: format!("{} drift components", d.components),
                found: format!("{}", drift.components),
            });
        }
        if let Some(s) = diffusion {
            if s.components != d.components {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} diffusion components", d.components),
                    found: format!("{}", s.components),
                });
            }
        }
        if !(dt > T::zero()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        if eps < T::zero() {
            return Err(Error::InvalidParameter(format!("noise intensity must be nonnegative, got {eps}")));
        }
        if lambda.len() % d.components != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("multiple of {} noise coefficients", d.components),
                found: format!("{}", lambda.len()),
            });
        }
        let j_modes = lambda.len() / d.components;
        if j_modes > d.n_modes {
            return Err(Error::InvalidParameter(format!(
                "noise truncation {j_modes} exceeds {} represented modes",
                d.n_modes
            )));
        }
        let decay = basis.eigenvalues().iter().map(|a| (-*a * dt).exp()).collect();
        let weight = basis.eigenvalues().iter().map(|a| T::phi1(*a * dt)).collect();
        let sigma_const = diffusion.and_then(|s| match &s.form {
            crate::coefficients::SigmaForm::Constant(m) => Some(m.clone()),
            _ => None,
        });
        Ok(Self {
            basis,
            drift,
            diffusion,
            lambda,
            j_modes,
            dt,
            sqrt_eps: eps.sqrt(),
            decay,
            weight,
            tol: T::lit(DEFAULT_RESOLVENT_TOL),
            max_iter: DEFAULT_RESOLVENT_ITERS,
            xis: d.grid(),
            sigma_const,
        })
    }

    pub fn with_resolvent(mut self, tol: T, max_iter: usize) -> Self {
        self.tol = tol;
        self.max_iter = max_iter;
        self
    }

    #[inline]
    pub fn components(&self) -> usize {
        self.basis.domain().components
    }

    pub fn state(&self, v0: &[T]) -> KernelState<T> {
        let d = self.basis.domain();
        let (nf, ns, r) = (d.field_len(), d.spectral_len(), d.components);
        let mut st = KernelState {
            v: v0.to_vec(),
            v_hat: vec![T::zero(); ns],
            u: vec![T::zero(); nf],
            ws: self.basis.workspace(),
            g_hat: vec![T::zero(); ns],
            g_grid: vec![T::zero(); nf],
            drive: vec![T::zero(); ns],
            drive_grid: vec![T::zero(); nf],
            y_hat: vec![T::zero(); ns],
            y: vec![T::zero(); nf],
            pt: vec![T::zero(); r],
            pt_out: vec![T::zero(); r * r],
            sig: vec![T::zero(); r * r],
        };
        self.basis.analyze_into(&st.v, &mut st.v_hat, &mut st.ws);
        st
    }

    /// Stores `u = v + z` in `st.u`.
    pub fn observe(&self, st: &mut KernelState<T>, z: Option<&[T]>) {
        match z {
            Some(z) => {
                for ((u, v), z) in st.u.iter_mut().zip(&st.v).zip(z) {
                    *u = *v + *z;
                }
            }
            None => st.u.copy_from_slice(&st.v),
        }
    }

    /// Advances `st` from `t` to `t + dt`. `control` and `dw` are Brownian
    /// coordinates (`r x J`); `z_now`/`z_next` default to zero.
    pub fn step(
        &self,
        st: &mut KernelState<T>,
        t: T,
        z_now: Option<&[T]>,
        z_next: Option<&[T]>,
        control: Option<&[T]>,
        dw: Option<&[T]>,
    ) -> Result<StepStatus> {
        self.observe(st, z_now);
        self.forcing(st, t, control, dw);
        self.linear_part(st);
        self.implicit_part(st, t + self.dt, z_next)
    }

    /// Fills `st.g_hat` with the spectral forcing integrated over the step.
    fn forcing(&self, st: &mut KernelState<T>, t: T, control: Option<&[T]>, dw: Option<&[T]>) {
        let d = self.basis.domain();
        let (n, m, r, jm) = (d.n_grid, d.n_modes, d.components, self.j_modes);
        st.g_hat.iter_mut().for_each(|x| *x = T::zero());
        let mut grid_used = false;

        if self.drift.has_h() {
            grid_used = true;
            for j in 0..n {
                for c in 0..r {
                    st.pt[c] = st.u[c * n + j];
                }
                let (pt, out) = (&st.pt, &mut st.pt_out[..r]);
                self.drift.h_eval(t, self.xis[j], pt, out);
                for c in 0..r {
                    st.g_grid[c * n + j] = self.dt * st.pt_out[c];
                }
            }
        } else {
            st.g_grid.iter_mut().for_each(|x| *x = T::zero());
        }

        let driven = self.diffusion.is_some()
            && jm > 0
            && (control.is_some() || (dw.is_some() && self.sqrt_eps > T::zero()));
        if driven {
            let diff = self.diffusion.expect("checked");
            st.drive.iter_mut().for_each(|x| *x = T::zero());
            for c in 0..r {
                for k in 0..jm {
                    let idx = c * jm + k;
                    let mut a = T::zero();
                    if let Some(u) = control {
                        a = a + u[idx] * self.dt;
                    }
                    if let Some(w) = dw {
                        a = a + self.sqrt_eps * w[idx];
                    }
                    st.drive[c * m + k] = self.lambda[idx] * a;
                }
            }
            if let Some(sm) = &self.sigma_const {
                for i in 0..r {
                    for nn in 0..r {
                        let s = sm[i * r + nn];
                        if s == T::zero() {
                            continue;
                        }
                        for k in 0..jm {
                            st.g_hat[i * m + k] = st.g_hat[i * m + k] + s * st.drive[nn * m + k];
                        }
                    }
                }
            } else {
                grid_used = true;
                self.basis.synthesize_into(&st.drive, &mut st.drive_grid, &mut st.ws);
                for j in 0..n {
                    for c in 0..r {
                        st.pt[c] = st.u[c * n + j];
                    }
                    diff.eval(t, self.xis[j], &st.pt, &mut st.sig);
                    for i in 0..r {
                        let mut acc = T::zero();
                        for nn in 0..r {
                            acc = acc + st.sig[i * r + nn] * st.drive_grid[nn * n + j];
                        }
                        st.g_grid[i * n + j] = st.g_grid[i * n + j] + acc;
                    }
                }
            }
        }

        if grid_used {
            let mut tmp = std::mem::take(&mut st.y_hat);
            self.basis.analyze_into(&st.g_grid, &mut tmp, &mut st.ws);
            for (g, a) in st.g_hat.iter_mut().zip(&tmp) {
                *g = *g + *a;
            }
            st.y_hat = tmp;
        }
    }

    fn linear_part(&self, st: &mut KernelState<T>) {
        for k in 0..st.y_hat.len() {
            st.y_hat[k] = self.decay[k] * st.v_hat[k] + self.weight[k] * st.g_hat[k];
        }
        self.basis.synthesize_into(&st.y_hat, &mut st.y, &mut st.ws);
    }

    fn implicit_part(&self, st: &mut KernelState<T>, t_next: T, z_next: Option<&[T]>) -> Result<StepStatus> {
        let d = self.basis.domain();
        let n = d.n_grid;
        let guard = T::lit(BLOWUP_THRESHOLD);
        if !self.drift.has_g() {
            st.v.copy_from_slice(&st.y);
            st.v_hat.copy_from_slice(&st.y_hat);
        } else {
            let g = self.drift.g.as_ref().expect("checked");
            let dg = self.drift.g_prime.as_ref();
            for idx in 0..st.v.len() {
                let (c, j) = (idx / n, idx % n);
                let xi = self.xis[j];
                let zn = z_next.map_or(T::zero(), |z| z[idx]);
                let rhs = st.y[idx] + zn;
                if !rhs.is_finite() || rhs.abs() > guard {
                    return Ok(StepStatus::Flagged);
                }
                let gi = |v: T| g(c, t_next, xi, v);
                let dgi;
                let dref: Option<&dyn Fn(T) -> T> = match dg {
                    Some(f) => {
                        dgi = move |v: T| f(c, t_next, xi, v);
                        Some(&dgi)
                    }
                    None => None,
                };
                let u = resolvent_solve(gi, dref, self.dt, rhs, self.tol, self.max_iter).map_err(|e| {
                    Error::Resolvent {
                        t: t_next.as_f64(),
                        xi: xi.as_f64(),
                        component: c,
                        reason: e.0,
                    }
                })?;
                st.v[idx] = u - zn;
            }
            self.basis.analyze_into(&st.v, &mut st.v_hat, &mut st.ws);
        }
        let bad = st
            .v
            .iter()
            .enumerate()
            .any(|(idx, v)| {
                let x = *v + z_next.map_or(T::zero(), |z| z[idx]);
                !x.is_finite() || x.abs() > guard
            });
        Ok(if bad { StepStatus::Flagged } else { StepStatus::Ok })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn solve(g: impl Fn(f64) -> f64, dt: f64, rhs: f64) -> f64 {
        resolvent_solve(g, None, dt, rhs, 1e-12, 200).unwrap()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(solve(|_| 0.0, 0.7, 3.25), 3.25);
        assert_eq!(solve(|v| -v, 1.0, 3.0), 1.5);
        let v = solve(|v| -v * v * v, 1.0, 2.0);
        assert!((v - 1.0).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn analytic_derivative_path() {
        let dg = |v: f64| -3.0 * v * v;
        let v = resolvent_solve(|v: f64| -v * v * v, Some(&dg), 1.0, 2.0, 1e-12, 200).unwrap();
        assert!((v - 1.0).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn huge_rhs_cubic() {
        let v = solve(|v| -v * v * v, 1e-4, 1e6);
        let res = v + 1e-4 * v * v * v - 1e6;
        assert!(res.abs() <= 1e-12 * 1e6);
        assert!(v > 0.0 && v < 1e6);
    }

    #[test]
    fn increasing_g_is_reported() {
        // For psi(v) = v - dt g(v) - rhs to lose its bracket, g must outgrow v/dt.
        let r = resolvent_solve(|v: f64| (v * v).exp(), None, 1.0, 0.0, 1e-12, 100);
        assert!(r.is_err());
        let nan = resolvent_solve(|_v: f64| f64::NAN, None, 1.0, 0.0, 1e-12, 100);
        assert!(nan.is_err());
    }

    proptest! {
        #[test]
        fn residual_small(a in 0.0f64..5.0, b in 0.0f64..5.0, dt in 1e-4f64..1.0, rhs in -10.0f64..10.0) {
            let g = move |v: f64| -a * v * v * v - b * v;
            let v = solve(g, dt, rhs);
            prop_assert!((v - dt * g(v) - rhs).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_rhs(dt in 1e-3f64..2.0, r1 in -50.0f64..50.0, d in 0.0f64..10.0) {
            let g = |v: f64| -v * v * v - 2.0 * v;
            prop_assert!(solve(g, dt, r1) <= solve(g, dt, r1 + d));
        }
    }
}
