//! Reaction, diffusion and noise coefficients, plus sampled validators for
//! the structural assumptions each simulator relies on.
//!
//! The reaction term of component `i` is split as `f_i = g_i + h_i`, where
//! `g_i(t, xi, v)` is decreasing in the scalar `v = x_i` and `h_i(t, xi, x)`
//! is Lipschitz in the full state vector. Diffusion is an `r x r` matrix
//! `sigma_{in}(t, xi, x)` multiplying noise channel `n` in component `i`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Basis;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `(component, t, xi, v) -> value`.
pub type ComponentFn<T> = Arc<dyn Fn(usize, T, T, T) -> T + Send + Sync>;
/// `(t, xi, x, out)`; `out` has `r` entries for vectors, `r * r` for matrices.
pub type VectorFn<T> = Arc<dyn Fn(T, T, &[T], &mut [T]) + Send + Sync>;
/// Time-dependent constant, required to be nondecreasing and positive.
pub type Envelope<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

pub fn constant_envelope<T: Real>(c: T) -> Envelope<T> {
    Arc::new(move |_| c)
}

/// `(m, mu, c0)`: `g(v) sign(v) <= -mu |v|^m` whenever `|v| > c0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperDissipativity<T> {
    pub m: T,
    pub mu: T,
    pub c0: T,
}

#[derive(Clone)]
pub struct DriftSpec<T> {
    pub name: String,
    pub components: usize,
    pub g: Option<ComponentFn<T>>,
    pub g_prime: Option<ComponentFn<T>>,
    pub h: Option<VectorFn<T>>,
    /// Row-major `dh_i / dx_k`.
    pub h_jacobian: Option<VectorFn<T>>,
    pub lipschitz: Envelope<T>,
    pub super_dissipativity: Option<SuperDissipativity<T>>,
}

impl<T: Real> std::fmt::Debug for DriftSpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftSpec")
            .field("name", &self.name)
            .field("components", &self.components)
            .field("has_g", &self.g.is_some())
            .field("has_h", &self.h.is_some())
            .field("super_dissipativity", &self.super_dissipativity)
            .finish()
    }
}

fn fd_step<T: Real>(v: T) -> T {
    T::epsilon().cbrt() * T::one().max(v.abs())
}

impl<T: Real> DriftSpec<T> {
    /// `F = 0`.
    pub fn zero(components: usize) -> Self {
        Self {
            name: "zero".into(),
            components,
            g: None,
            g_prime: None,
            h: None,
            h_jacobian: None,
            lipschitz: constant_envelope(T::one()),
            super_dissipativity: None,
        }
    }

    /// `g(v) = -lambda v`, no Lipschitz part.
    pub fn linear(components: usize, lambda: T) -> Self {
        Self {
            name: "linear".into(),
            g: Some(Arc::new(move |_, _, _, v| -lambda * v)),
            g_prime: Some(Arc::new(move |_, _, _, _| -lambda)),
            ..Self::zero(components)
        }
    }

    /// `g(v) = -mu |v|^m sign(v)`.
    pub fn power_dissipative(components: usize, m: T, mu: T) -> Result<Self> {
        if !(m > T::one()) || !(mu > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "power dissipative drift needs m > 1 and mu > 0, got m={m}, mu={mu}"
            )));
        }
        Ok(Self {
            name: "power_dissipative".into(),
            g: Some(Arc::new(move |_, _, _, v| -mu * v.abs().powf(m) * v.sign())),
            g_prime: Some(Arc::new(move |_, _, _, v| -mu * m * v.abs().powf(m - T::one()))),
            super_dissipativity: Some(SuperDissipativity {
                m,
                mu,
                c0: T::one(),
            }),
            ..Self::zero(components)
        })
    }

    /// `f(v) = -v^3 + v` split as `g = -v^3`, `h = v`.
    pub fn allen_cahn_like(components: usize) -> Self {
        let r = components;
        Self {
            name: "allen_cahn_like".into(),
            g: Some(Arc::new(|_, _, _, v| -v * v * v)),
            g_prime: Some(Arc::new(|_, _, _, v| -T::lit(3.0) * v * v)),
            h: Some(Arc::new(|_, _, x, out| out.copy_from_slice(x))),
            h_jacobian: Some(Arc::new(move |_, _, _, out| {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = if k / r == k % r { T::one() } else { T::zero() };
                }
            })),
            super_dissipativity: Some(SuperDissipativity {
                m: T::lit(3.0),
                mu: T::one(),
                c0: T::one(),
            }),
            ..Self::zero(components)
        }
    }

    /// `g(v) = sum_k a_k v^k` and `h(x) = rate * x`. Not checked for monotonicity;
    /// that is the validator's job.
    pub fn polynomial(components: usize, coefficients: Vec<T>, rate: T) -> Self {
        let r = components;
        let dc: Vec<T> = coefficients
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, a)| *a * T::from_usize_lossy(k))
            .collect();
        let horner = |c: &[T], v: T| c.iter().rev().fold(T::zero(), |acc, a| acc * v + *a);
        let (gc, gd) = (coefficients.clone(), dc);
        let mut spec = Self {
            name: "polynomial".into(),
            lipschitz: constant_envelope(rate.abs().max(T::one())),
            ..Self::zero(components)
        };
        if coefficients.iter().any(|a| *a != T::zero()) {
            spec.g = Some(Arc::new(move |_, _, _, v| horner(&gc, v)));
            spec.g_prime = Some(Arc::new(move |_, _, _, v| horner(&gd, v)));
        }
        if rate != T::zero() {
            spec.h = Some(Arc::new(move |_, _, x, out| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = rate * *v;
                }
            }));
            spec.h_jacobian = Some(Arc::new(move |_, _, _, out| {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = if k / r == k % r { rate } else { T::zero() };
                }
            }));
        }
        spec
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    #[inline]
    pub fn has_g(&self) -> bool {
        self.g.is_some()
    }

    #[inline]
    pub fn has_h(&self) -> bool {
        self.h.is_some()
    }

    #[inline]
    pub fn g_eval(&self, i: usize, t: T, xi: T, v: T) -> T {
        match &self.g {
            Some(g) => g(i, t, xi, v),
            None => T::zero(),
        }
    }

    /// Analytic derivative if supplied, central difference otherwise.
    pub fn g_derivative(&self, i: usize, t: T, xi: T, v: T) -> T {
        match (&self.g_prime, &self.g) {
            (Some(dg), _) => dg(i, t, xi, v),
            (None, Some(g)) => {
                let d = fd_step(v);
                (g(i, t, xi, v + d) - g(i, t, xi, v - d)) / (d + d)
            }
            (None, None) => T::zero(),
        }
    }

    pub fn h_eval(&self, t: T, xi: T, x: &[T], out: &mut [T]) {
        match &self.h {
            Some(h) => h(t, xi, x, out),
            None => out.iter_mut().for_each(|o| *o = T::zero()),
        }
    }

    /// Row-major Jacobian of `h`, central differences if not supplied.
    pub fn h_jacobian_eval(&self, t: T, xi: T, x: &[T], out: &mut [T]) {
        let r = self.components;
        match (&self.h_jacobian, &self.h) {
            (Some(j), _) => j(t, xi, x, out),
            (None, Some(h)) => {
                let mut xp = x.to_vec();
                let mut fp = vec![T::zero(); r];
                let mut fm = vec![T::zero(); r];
                for k in 0..r {
                    let d = fd_step(x[k]);
                    xp[k] = x[k] + d;
                    h(t, xi, &xp, &mut fp);
                    xp[k] = x[k] - d;
                    h(t, xi, &xp, &mut fm);
                    xp[k] = x[k];
                    for i in 0..r {
                        out[i * r + k] = (fp[i] - fm[i]) / (d + d);
                    }
                }
            }
            (None, None) => out.iter_mut().for_each(|o| *o = T::zero()),
        }
    }
}

#[derive(Clone)]
pub enum SigmaForm<T> {
    /// Constant row-major matrix.
    Constant(Vec<T>),
    /// `sigma_ii = f(i, t, xi, x_i)`, zero off the diagonal.
    Diagonal {
        f: ComponentFn<T>,
        df: Option<ComponentFn<T>>,
    },
    /// General `(t, xi, x) -> r x r` matrix.
    Full(VectorFn<T>),
}

#[derive(Clone)]
pub struct DiffusionSpec<T> {
    pub name: String,
    pub components: usize,
    pub form: SigmaForm<T>,
    pub lipschitz: Envelope<T>,
    pub nu: T,
    pub bounded: bool,
    pub sigma_min: Option<T>,
}

impl<T: Real> std::fmt::Debug for DiffusionSpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("name", &self.name)
            .field("components", &self.components)
            .field("nu", &self.nu)
            .field("bounded", &self.bounded)
            .field("sigma_min", &self.sigma_min)
            .finish_non_exhaustive()
    }
}

impl<T: Real> DiffusionSpec<T> {
    /// `sigma = s * I`.
    pub fn constant(components: usize, s: T) -> Self {
        let r = components;
        let m = (0..r * r)
            .map(|k| if k / r == k % r { s } else { T::zero() })
            .collect();
        Self {
            name: "constant".into(),
            components,
            form: SigmaForm::Constant(m),
            lipschitz: constant_envelope(s.abs().max(T::min_positive_value())),
            nu: T::zero(),
            bounded: true,
            sigma_min: if s != T::zero() { Some(s.abs()) } else { None },
        }
    }

    /// `sigma_ii = (1 + |x_i|)^nu`.
    pub fn power_growth(components: usize, nu: T) -> Result<Self> {
        if !(nu >= T::zero() && nu <= T::one()) {
            return Err(Error::InvalidParameter(format!("growth exponent {nu} outside [0, 1]")));
        }
        Ok(Self::power_growth_declared(components, nu, nu))
    }

    /// `(1 + |x|)^exponent` while declaring growth `nu`; used for mismatch tests.
    pub fn power_growth_declared(components: usize, exponent: T, nu: T) -> Self {
        Self {
            name: "power_growth".into(),
            components,
            form: SigmaForm::Diagonal {
                f: Arc::new(move |_, _, _, v| (T::one() + v.abs()).powf(exponent)),
                df: Some(Arc::new(move |_, _, _, v| {
                    exponent * (T::one() + v.abs()).powf(exponent - T::one()) * v.sign()
                })),
            },
            lipschitz: constant_envelope(T::one()),
            nu,
            bounded: false,
            sigma_min: Some(T::one()),
        }
    }

    /// `sigma_ii = a + b sin(x_i)` with `a > |b|`.
    pub fn bounded_multiplicative(components: usize, a: T, b: T) -> Result<Self> {
        if !(a > b.abs()) {
            return Err(Error::InvalidParameter(format!(
                "bounded multiplicative diffusion needs a > |b|, got a={a}, b={b}"
            )));
        }
        Ok(Self {
            name: "bounded_multiplicative".into(),
            components,
            form: SigmaForm::Diagonal {
                f: Arc::new(move |_, _, _, v| a + b * v.sin()),
                df: Some(Arc::new(move |_, _, _, v| b * v.cos())),
            },
            lipschitz: constant_envelope(a + b.abs()),
            nu: T::zero(),
            bounded: true,
            sigma_min: Some(a - b.abs()),
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.form, SigmaForm::Constant(_))
    }

    pub fn is_zero(&self) -> bool {
        match &self.form {
            SigmaForm::Constant(m) => m.iter().all(|v| *v == T::zero()),
            _ => false,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        let r = self.components;
        match &self.form {
            SigmaForm::Constant(m) => m
                .iter()
                .enumerate()
                .all(|(k, v)| k / r == k % r || *v == T::zero()),
            SigmaForm::Diagonal { .. } => true,
            SigmaForm::Full(_) => false,
        }
    }

    /// Fills the row-major `r x r` matrix at one point.
    pub fn eval(&self, t: T, xi: T, x: &[T], out: &mut [T]) {
        let r = self.components;
        match &self.form {
            SigmaForm::Constant(m) => out.copy_from_slice(m),
            SigmaForm::Diagonal { f, .. } => {
                for (k, o) in out.iter_mut().enumerate() {
                    let (i, n) = (k / r, k % r);
                    *o = if i == n { f(i, t, xi, x[i]) } else { T::zero() };
                }
            }
            SigmaForm::Full(f) => f(t, xi, x, out),
        }
    }

    /// `d sigma_{in} / d x_k` stored at `out[(i * r + n) * r + k]`.
    pub fn jacobian_eval(&self, t: T, xi: T, x: &[T], out: &mut [T]) {
        let r = self.components;
        out.iter_mut().for_each(|o| *o = T::zero());
        match &self.form {
            SigmaForm::Constant(_) => {}
            SigmaForm::Diagonal { f, df } => {
                for i in 0..r {
                    let v = x[i];
                    let d = match df {
                        Some(df) => df(i, t, xi, v),
                        None => {
                            let e = fd_step(v);
                            (f(i, t, xi, v + e) - f(i, t, xi, v - e)) / (e + e)
                        }
                    };
                    out[(i * r + i) * r + i] = d;
                }
            }
            SigmaForm::Full(f) => {
                let mut xp = x.to_vec();
                let mut sp = vec![T::zero(); r * r];
                let mut sm = vec![T::zero(); r * r];
                for k in 0..r {
                    let e = fd_step(x[k]);
                    xp[k] = x[k] + e;
                    f(t, xi, &xp, &mut sp);
                    xp[k] = x[k] - e;
                    f(t, xi, &xp, &mut sm);
                    xp[k] = x[k];
                    for a in 0..r * r {
                        out[a * r + k] = (sp[a] - sm[a]) / (e + e);
                    }
                }
            }
        }
    }
}

/// Tail behavior of the noise eigencoefficients `lambda_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSpec {
    Constant { value: f64 },
    PowerLaw { scale: f64, decay: f64 },
    /// Finitely many coefficients (shared by every channel), zero beyond.
    Explicit { values: Vec<f64> },
}

impl LambdaSpec {
    /// `lambda_j` for one-based mode index `j`.
    pub fn value(&self, j: usize) -> f64 {
        match self {
            LambdaSpec::Constant { value } => *value,
            LambdaSpec::PowerLaw { scale, decay } => scale * (j as f64).powf(-decay),
            LambdaSpec::Explicit { values } => values.get(j - 1).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub lambda: LambdaSpec,
    pub beta: f64,
    /// `None` stands for `rho = infinity`.
    pub rho: Option<f64>,
    /// Mode truncation `J`; `None` means all represented modes.
    pub modes: Option<usize>,
}

impl NoiseSpec {
    pub fn white(beta: f64) -> Self {
        Self {
            lambda: LambdaSpec::Constant { value: 1.0 },
            beta,
            rho: None,
            modes: None,
        }
    }

    /// `beta (rho - 2) / rho`, equal to `beta` at `rho = infinity`.
    pub fn effective_beta(&self) -> f64 {
        match self.rho {
            None => self.beta,
            Some(rho) => self.beta * (rho - 2.0) / rho,
        }
    }

    pub fn truncation(&self, n_modes: usize) -> usize {
        self.modes.unwrap_or(n_modes).min(n_modes)
    }

    /// `lambda_{n,j}` for `n < components`, `j < J`, channel-major.
    pub fn lambda_values<T: Real>(&self, components: usize, n_modes: usize) -> Result<Vec<T>> {
        let j_max = self.truncation(n_modes);
        let mut out = Vec::with_capacity(components * j_max);
        for _ in 0..components {
            for j in 1..=j_max {
                let v = self.lambda.value(j);
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "noise coefficient lambda_{j} = {v} must be finite and nonnegative"
                    )));
                }
                out.push(T::lit(v));
            }
        }
        Ok(out)
    }
}

/// Lattice of sample points for the sampled validators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub times: Vec<f64>,
    pub xis: Vec<f64>,
    pub values: Vec<f64>,
    pub random_pairs: usize,
    pub random_range: f64,
    pub seed: u64,
    pub rel_tol: f64,
}

impl SamplePlan {
    pub fn standard_values() -> Vec<f64> {
        let pos = [1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1e3];
        let mut v: Vec<f64> = pos.iter().rev().map(|p| -p).collect();
        v.push(0.0);
        v.extend_from_slice(&pos);
        v
    }

    /// Three times in `[0, horizon]`, five interior points of `(0, length)`.
    pub fn for_domain(length: f64, horizon: f64) -> Self {
        Self {
            times: vec![0.0, 0.5 * horizon, horizon],
            xis: (1..=5).map(|k| length * k as f64 / 6.0).collect(),
            values: Self::standard_values(),
            random_pairs: 200,
            random_range: 10.0,
            seed: 0x5eed_0001,
            rel_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    pub xi: f64,
    pub component: usize,
    pub point: Vec<f64>,
    pub other: Option<Vec<f64>>,
    /// Amount by which the inequality is violated (positive).
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub label: String,
    pub group: String,
    pub passed: bool,
    pub evaluated: usize,
    pub violations: usize,
    pub witnesses: Vec<Witness>,
    pub note: String,
}

const MAX_WITNESSES: usize = 512;

impl Check {
    fn new(label: &str, group: &str) -> Self {
        Self {
            label: label.into(),
            group: group.into(),
            passed: true,
            evaluated: 0,
            violations: 0,
            witnesses: Vec::new(),
            note: String::new(),
        }
    }

    fn record(&mut self, ok: bool, w: impl FnOnce() -> Witness) {
        self.evaluated += 1;
        if !ok {
            self.passed = false;
            self.violations += 1;
            if self.witnesses.len() < MAX_WITNESSES {
                let w = w();
                let dup = self
                    .witnesses
                    .iter()
                    .any(|o| o.point == w.point && o.other == w.other && o.component == w.component);
                if !dup {
                    self.witnesses.push(w);
                }
            }
        }
    }

    fn fail(mut self, note: String) -> Self {
        self.passed = false;
        self.violations += 1;
        self.note = note;
        self
    }

    pub fn worst(&self) -> Option<&Witness> {
        self.witnesses
            .iter()
            .max_by(|a, b| a.excess.partial_cmp(&b.excess).unwrap_or(std::cmp::Ordering::Equal))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub subject: String,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, label: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.label == label)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn merge(mut self, other: ValidationReport) -> Self {
        self.checks.extend(other.checks);
        self
    }

    /// One line per failed check: label, assumption group, worst witness.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let status = if c.passed { "ok" } else { "FAILED" };
            s.push_str(&format!("{status:6} {} [{}]", c.label, c.group));
            if let Some(w) = c.worst() {
                s.push_str(&format!(
                    " witness t={} xi={} component={} point={:?}",
                    w.t, w.xi, w.component, w.point
                ));
                if let Some(o) = &w.other {
                    s.push_str(&format!(" other={o:?}"));
                }
                s.push_str(&format!(" excess={}", w.excess));
            }
            if !c.note.is_empty() {
                s.push_str(&format!(" ({})", c.note));
            }
            s.push('\n');
        }
        s
    }
}

pub const GROUP_DRIFT: &str = "drift-splitting";
pub const GROUP_DIFFUSION: &str = "diffusion-lipschitz-growth";
pub const GROUP_NOISE: &str = "noise-regularity";
pub const GROUP_BOUNDED: &str = "bounded-diffusion";
pub const GROUP_SUPER: &str = "super-dissipative-growth";

fn norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

fn to_f64<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

/// State vectors used for vector-valued checks: diagonal vectors from the
/// value lattice, each single-coordinate axis vector, and seeded random ones.
fn sample_states<T: Real>(plan: &SamplePlan, r: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = plan.values.iter().map(|v| vec![T::lit(*v); r]).collect();
    if r > 1 {
        for v in &plan.values {
            for k in 0..r {
                let mut x = vec![T::zero(); r];
                x[k] = T::lit(*v);
                out.push(x);
            }
        }
    }
    for _ in 0..plan.random_pairs.min(64) {
        out.push(
            (0..r)
                .map(|_| T::lit(rng.random_range(-plan.random_range..plan.random_range)))
                .collect(),
        );
    }
    out
}

/// Sampled checks of the drift splitting: `g_i` decreasing, `h` Lipschitz
/// with linear growth under `L(t)`, and (when declared) polynomial
/// dissipativity of `g`. Non-finite evaluations fail the `drift-finite` check.
pub fn validate_drift<T: Real>(spec: &DriftSpec<T>, plan: &SamplePlan) -> ValidationReport {
    let r = spec.components;
    let tol = T::lit(plan.rel_tol);
    let mut finite = Check::new("drift-finite", GROUP_DRIFT);
    let mut decr = Check::new("drift-decreasing", GROUP_DRIFT);
    let mut lip = Check::new("drift-lipschitz", GROUP_DRIFT);
    let mut growth = Check::new("drift-linear-growth", GROUP_DRIFT);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    let mut vals: Vec<f64> = plan.values.clone();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (a_i, a) in vals.iter().enumerate() {
        for b in &vals[a_i + 1..] {
            pairs.push((*a, *b));
        }
    }
    for _ in 0..plan.random_pairs {
        let a: f64 = rng.random_range(-plan.random_range..plan.random_range);
        let b: f64 = rng.random_range(-plan.random_range..plan.random_range);
        if a != b {
            pairs.push((a.min(b), a.max(b)));
        }
    }

    for &tf in &plan.times {
        let t = T::lit(tf);
        for &xf in &plan.xis {
            let xi = T::lit(xf);
            if spec.has_g() {
                for i in 0..r {
                    for &(a, b) in &pairs {
                        let ga = spec.g_eval(i, t, xi, T::lit(a));
                        let gb = spec.g_eval(i, t, xi, T::lit(b));
                        let ok_f = ga.is_finite() && gb.is_finite();
                        finite.record(ok_f, || Witness {
                            t: tf,
                            xi: xf,
                            component: i,
                            point: vec![a],
                            other: Some(vec![b]),
                            excess: f64::INFINITY,
                        });
                        if !ok_f {
                            continue;
                        }
                        let excess = gb - ga;
                        let allowed = tol * (ga.abs() + gb.abs()) + T::min_positive_value();
                        decr.record(excess <= allowed, || Witness {
                            t: tf,
                            xi: xf,
                            component: i,
                            point: vec![a],
                            other: Some(vec![b]),
                            excess: excess.as_f64(),
                        });
                    }
                }
            }
            if spec.has_h() {
                let states = sample_states::<T>(plan, r, &mut rng);
                let mut hx = vec![T::zero(); r];
                let mut hy = vec![T::zero(); r];
                let ell = (spec.lipschitz)(t);
                for (si, x) in states.iter().enumerate() {
                    spec.h_eval(t, xi, x, &mut hx);
                    let ok_f = hx.iter().all(|v| v.is_finite());
                    finite.record(ok_f, || Witness {
                        t: tf,
                        xi: xf,
                        component: 0,
                        point: to_f64(x),
                        other: None,
                        excess: f64::INFINITY,
                    });
                    if !ok_f {
                        continue;
                    }
                    let bound = ell * (T::one() + norm(x));
                    let size = norm(&hx);
                    growth.record(size <= bound * (T::one() + tol), || Witness {
                        t: tf,
                        xi: xf,
                        component: 0,
                        point: to_f64(x),
                        other: None,
                        excess: (size - bound).as_f64(),
                    });
                    for y in &states[si + 1..] {
                        spec.h_eval(t, xi, y, &mut hy);
                        if !hy.iter().all(|v| v.is_finite()) {
                            continue;
                        }
                        let dx: Vec<T> = x.iter().zip(y).map(|(a, b)| *a - *b).collect();
                        let dh: Vec<T> = hx.iter().zip(&hy).map(|(a, b)| *a - *b).collect();
                        let lhs = norm(&dh);
                        let rhs = ell * norm(&dx);
                        lip.record(lhs <= rhs * (T::one() + tol) + T::min_positive_value(), || {
                            Witness {
                                t: tf,
                                xi: xf,
                                component: 0,
                                point: to_f64(x),
                                other: Some(to_f64(y)),
                                excess: (lhs - rhs).as_f64(),
                            }
                        });
                    }
                }
            }
        }
    }

    let mut checks = vec![finite, decr, lip, growth];
    if spec.super_dissipativity.is_some() {
        checks.push(check_super_dissipativity(spec, plan));
    }
    ValidationReport {
        subject: format!("drift {}", spec.name),
        checks,
    }
}

fn check_super_dissipativity<T: Real>(spec: &DriftSpec<T>, plan: &SamplePlan) -> Check {
    let mut c = Check::new("drift-super-dissipative", GROUP_SUPER);
    let Some(sd) = spec.super_dissipativity else {
        return c.fail("no (m, mu, c0) declared".into());
    };
    if !(sd.m > T::one()) || !(sd.mu > T::zero()) || !(sd.c0 > T::zero()) {
        return c.fail(format!("need m > 1, mu > 0, c0 > 0, got {sd:?}"));
    }
    let tol = T::lit(plan.rel_tol);
    for &tf in &plan.times {
        for &xf in &plan.xis {
            for i in 0..spec.components {
                for &vf in &plan.values {
                    let v = T::lit(vf);
                    if v.abs() <= sd.c0 {
                        continue;
                    }
                    let lhs = spec.g_eval(i, T::lit(tf), T::lit(xf), v) * v.sign();
                    let rhs = -sd.mu * v.abs().powf(sd.m);
                    c.record(lhs <= rhs + tol * rhs.abs(), || Witness {
                        t: tf,
                        xi: xf,
                        component: i,
                        point: vec![vf],
                        other: None,
                        excess: (lhs - rhs).as_f64(),
                    });
                }
            }
        }
    }
    c
}

/// Sampled checks of `sigma`: entrywise Lipschitz and growth bounds under
/// `L(t)`, the boundedness claim when flagged, and the declared lower bound.
pub fn validate_diffusion<T: Real>(spec: &DiffusionSpec<T>, plan: &SamplePlan) -> ValidationReport {
    let r = spec.components;
    let tol = T::lit(plan.rel_tol);
    let mut finite = Check::new("diffusion-finite", GROUP_DIFFUSION);
    let mut lip = Check::new("diffusion-lipschitz", GROUP_DIFFUSION);
    let mut growth = Check::new("diffusion-growth", GROUP_DIFFUSION);
    let mut bounded = Check::new("diffusion-bounded", GROUP_BOUNDED);
    let mut lower = Check::new("diffusion-lower-bound", GROUP_DIFFUSION);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xd1ff);
    if !(spec.nu >= T::zero() && spec.nu <= T::one()) {
        growth = growth.fail(format!("growth exponent {} outside [0, 1]", spec.nu));
    }

    let states = sample_states::<T>(plan, r, &mut rng);
    let mut sx = vec![T::zero(); r * r];
    let mut sy = vec![T::zero(); r * r];
    for &tf in &plan.times {
        let t = T::lit(tf);
        let ell = (spec.lipschitz)(t);
        for &xf in &plan.xis {
            let xi = T::lit(xf);
            for (si, x) in states.iter().enumerate() {
                spec.eval(t, xi, x, &mut sx);
                let ok_f = sx.iter().all(|v| v.is_finite());
                finite.record(ok_f, || Witness {
                    t: tf,
                    xi: xf,
                    component: 0,
                    point: to_f64(x),
                    other: None,
                    excess: f64::INFINITY,
                });
                if !ok_f {
                    continue;
                }
                let nx = norm(x);
                let size = sup_entry(&sx);
                let g_bound = ell * (T::one() + nx).powf(spec.nu);
                growth.record(size <= g_bound * (T::one() + tol), || Witness {
                    t: tf,
                    xi: xf,
                    component: 0,
                    point: to_f64(x),
                    other: None,
                    excess: (size / g_bound).as_f64() - 1.0,
                });
                if spec.bounded {
                    bounded.record(size <= ell * (T::one() + tol), || Witness {
                        t: tf,
                        xi: xf,
                        component: 0,
                        point: to_f64(x),
                        other: None,
                        excess: (size - ell).as_f64(),
                    });
                }
                if let Some(smin) = spec.sigma_min {
                    // Row-wise diagonal dominance margin; equals |sigma| when r = 1.
                    let margin = (0..r)
                        .map(|i| {
                            let off: T = (0..r).filter(|n| *n != i).map(|n| sx[i * r + n].abs()).sum();
                            sx[i * r + i].abs() - off
                        })
                        .fold(T::infinity(), T::min);
                    lower.record(margin >= smin * (T::one() - tol), || Witness {
                        t: tf,
                        xi: xf,
                        component: 0,
                        point: to_f64(x),
                        other: None,
                        excess: (smin - margin).as_f64(),
                    });
                }
                for y in &states[si + 1..] {
                    spec.eval(t, xi, y, &mut sy);
                    if !sy.iter().all(|v| v.is_finite()) {
                        continue;
                    }
                    let dx: Vec<T> = x.iter().zip(y).map(|(a, b)| *a - *b).collect();
                    let ds: Vec<T> = sx.iter().zip(&sy).map(|(a, b)| *a - *b).collect();
                    let lhs = sup_entry(&ds);
                    let rhs = ell * norm(&dx);
                    lip.record(lhs <= rhs * (T::one() + tol) + T::min_positive_value(), || Witness {
                        t: tf,
                        xi: xf,
                        component: 0,
                        point: to_f64(x),
                        other: Some(to_f64(y)),
                        excess: (lhs - rhs).as_f64(),
                    });
                }
            }
        }
    }
    let mut checks = vec![finite, lip, growth];
    if spec.bounded {
        checks.push(bounded);
    }
    if spec.sigma_min.is_some() {
        checks.push(lower);
    }
    ValidationReport {
        subject: format!("diffusion {}", spec.name),
        checks,
    }
}

fn sup_entry<T: Real>(m: &[T]) -> T {
    m.iter().fold(T::zero(), |a, v| a.max(v.abs()))
}

/// Outcome of the decade-ratio series test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesVerdict {
    pub converges: bool,
    pub partial_sum: f64,
    pub last_increment: f64,
    pub ratio: f64,
}

/// Classifies `sum_{k >= 1} term(k)` from partial sums up to `max_terms`
/// (a power of ten). Consecutive decade increments `D_d = S(10^{d+1}) -
/// S(10^d)` shrink geometrically for a convergent p-series and stay level or
/// grow otherwise; a Cauchy tail below `1e-12` also counts as convergent.
pub fn classify_series(term: impl Fn(usize) -> f64, max_terms: usize) -> SeriesVerdict {
    let mut sum = 0.0;
    let mut decade_end = 10usize;
    let mut prev_sum_at_decade = None::<f64>;
    let mut increments = Vec::new();
    let mut comp = 0.0;
    for k in 1..=max_terms {
        // Kahan summation keeps 10^6 terms accurate to ~1e-16 relative.
        let y = term(k) - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
        if k == decade_end {
            if let Some(p) = prev_sum_at_decade {
                increments.push(sum - p);
            }
            prev_sum_at_decade = Some(sum);
            decade_end = decade_end.saturating_mul(10);
        }
    }
    let last = increments.last().copied().unwrap_or(f64::INFINITY);
    let ratio = if increments.len() >= 2 {
        let n = increments.len();
        if increments[n - 2] > 0.0 {
            increments[n - 1] / increments[n - 2]
        } else {
            0.0
        }
    } else {
        f64::NAN
    };
    let cauchy = last.abs() <= 1e-12 * sum.abs().max(1.0);
    let converges = sum.is_finite() && (cauchy || ratio < 1.0);
    SeriesVerdict {
        converges,
        partial_sum: sum,
        last_increment: last,
        ratio,
    }
}

pub const SERIES_TERMS: usize = 1_000_000;

/// Exponent relation, eigenvalue series and coefficient series for the noise.
/// The eigenvalue series uses the analytic tail of the sine basis:
/// `alpha_{i,k}^{-beta} |e_{i,k}|^2 = (kappa_i (k pi / L)^2)^{-beta} * 2 / L`.
pub fn validate_noise<T: Real>(spec: &NoiseSpec, basis: &Basis<T>) -> Result<ValidationReport> {
    let d = basis.domain();
    spec.lambda_values::<T>(d.components, d.n_modes)?;
    if let LambdaSpec::Explicit { values } = &spec.lambda {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("negative noise coefficient {v}")));
        }
    }
    let length = d.length.as_f64();
    let e_sq = 2.0 / length;

    let mut rel = Check::new("noise-exponents", GROUP_NOISE);
    let beta_ok = spec.beta > 0.0 && spec.beta < 1.0;
    let rho_ok = spec.rho.map_or(true, |r| r >= 2.0);
    rel.evaluated = 1;
    if !beta_ok || !rho_ok {
        rel = rel.fail(format!("need beta in (0,1) and rho in [2, inf], got beta={}, rho={:?}", spec.beta, spec.rho));
    } else if !(spec.effective_beta() < 1.0) {
        rel = rel.fail(format!("beta (rho - 2) / rho = {} is not below 1", spec.effective_beta()));
    }

    let mut alpha = Check::new("noise-eigenvalue-sum", GROUP_NOISE);
    let kappas: Vec<f64> = basis.diffusivity().iter().map(|k| k.as_f64()).collect();
    let beta = spec.beta;
    let verdict = classify_series(
        |k| {
            let w = k as f64 * std::f64::consts::PI / length;
            kappas.iter().map(|kap| (kap * w * w).powf(-beta) * e_sq).sum()
        },
        SERIES_TERMS,
    );
    alpha.evaluated = SERIES_TERMS;
    if !verdict.converges {
        alpha = alpha.fail(format!(
            "partial sum {:.6e} after {} terms, decade ratio {:.4}",
            verdict.partial_sum, SERIES_TERMS, verdict.ratio
        ));
    } else {
        alpha.note = format!("partial sum {:.6e}, decade ratio {:.4}", verdict.partial_sum, verdict.ratio);
    }

    let mut lam = Check::new("noise-coefficient-sum", GROUP_NOISE);
    let channels = d.components as f64;
    match spec.rho {
        None => {
            lam.evaluated = 1;
            let sup = match &spec.lambda {
                LambdaSpec::Constant { value } => *value,
                LambdaSpec::PowerLaw { scale, decay } => {
                    if *decay >= 0.0 {
                        *scale
                    } else {
                        f64::INFINITY
                    }
                }
                LambdaSpec::Explicit { values } => values.iter().cloned().fold(0.0, f64::max),
            };
            if !sup.is_finite() {
                lam = lam.fail("coefficients are unbounded".into());
            } else {
                lam.note = format!("sup lambda = {sup}");
            }
        }
        Some(rho) => {
            let v = classify_series(|j| channels * spec.lambda.value(j).powf(rho) * e_sq, SERIES_TERMS);
            lam.evaluated = SERIES_TERMS;
            if !v.converges {
                lam = lam.fail(format!(
                    "partial sum {:.6e} after {} terms, decade ratio {:.4}",
                    v.partial_sum, SERIES_TERMS, v.ratio
                ));
            }
        }
    }
    Ok(ValidationReport {
        subject: "noise".into(),
        checks: vec![rel, alpha, lam],
    })
}

/// Upper end of the admissible growth-exponent interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuBound {
    pub upper: f64,
    /// True when the cap at 1 is active, so `nu = upper` itself is allowed.
    pub inclusive: bool,
}

impl NuBound {
    pub fn admits(&self, nu: f64) -> bool {
        nu >= 0.0 && if self.inclusive { nu <= self.upper } else { nu < self.upper }
    }
}

/// `nu` must lie in `[0, (m-1)/2 (1 - beta (rho-2)/rho)) ∩ [0, 1]`.
pub fn admissible_nu(m: f64, beta: f64, rho: Option<f64>) -> Result<NuBound> {
    if !(m > 1.0) {
        return Err(Error::InvalidParameter(format!("dissipativity exponent m = {m} must exceed 1")));
    }
    let eff = match rho {
        None => beta,
        Some(r) => beta * (r - 2.0) / r,
    };
    let b = 0.5 * (m - 1.0) * (1.0 - eff);
    Ok(if b > 1.0 {
        NuBound {
            upper: 1.0,
            inclusive: true,
        }
    } else {
        NuBound {
            upper: b,
            inclusive: false,
        }
    })
}

/// Compatibility of a super-dissipative drift with the diffusion growth.
pub fn validate_growth_compatibility<T: Real>(
    drift: &DriftSpec<T>,
    diffusion: &DiffusionSpec<T>,
    noise: &NoiseSpec,
) -> ValidationReport {
    let mut c = Check::new("nu-admissible", GROUP_SUPER);
    c.evaluated = 1;
    let c = match drift.super_dissipativity {
        None => c.fail("drift declares no super-dissipativity exponent".into()),
        Some(sd) => match admissible_nu(sd.m.as_f64(), noise.beta, noise.rho) {
            Err(e) => c.fail(e.to_string()),
            Ok(b) => {
                let nu = diffusion.nu.as_f64();
                if b.admits(nu) {
                    c.note = format!("nu = {nu} below bound {}", b.upper);
                    c
                } else {
                    let mut c = c.fail(format!(
                        "nu = {nu} not below bound {} (m = {}, beta = {})",
                        b.upper,
                        sd.m,
                        noise.beta
                    ));
                    c.witnesses.push(Witness {
                        t: 0.0,
                        xi: 0.0,
                        component: 0,
                        point: vec![nu],
                        other: Some(vec![b.upper]),
                        excess: nu - b.upper,
                    });
                    c
                }
            }
        },
    };
    ValidationReport {
        subject: "growth compatibility".into(),
        checks: vec![c],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_basis, DomainSpec, OperatorSpec};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn plan() -> SamplePlan {
        SamplePlan::for_domain(PI, 1.0)
    }

    fn basis() -> Basis<f64> {
        let d = DomainSpec::new(PI, 32, 32, 1).unwrap();
        build_basis(&d, &OperatorSpec::uniform(1, 1.0).unwrap()).unwrap()
    }

    fn custom_g(g: fn(f64) -> f64) -> DriftSpec<f64> {
        DriftSpec {
            g: Some(Arc::new(move |_, _, _, v| g(v))),
            g_prime: None,
            ..DriftSpec::zero(1)
        }
    }

    #[test]
    fn cubic_power_drift_passes() {
        let d = DriftSpec::power_dissipative(1, 3.0, 1.0).unwrap();
        let rep = validate_drift(&d, &plan());
        assert!(rep.passed(), "{}", rep.summary());
        assert!(rep.check("drift-super-dissipative").unwrap().evaluated > 0);
    }

    #[test]
    fn increasing_drift_fails_with_unit_pair() {
        let rep = validate_drift(&custom_g(|v| v), &plan());
        let c = rep.check("drift-decreasing").unwrap();
        assert!(!c.passed);
        assert!(c.witnesses.iter().any(|w| w.point == vec![0.0] && w.other == Some(vec![1.0])));
    }

    #[test]
    fn unsplit_allen_cahn_fails_at_half() {
        let rep = validate_drift(&custom_g(|v| -v * v * v + v), &plan());
        let c = rep.check("drift-decreasing").unwrap();
        assert!(!c.passed);
        let w = c
            .witnesses
            .iter()
            .find(|w| w.point == vec![0.0] && w.other == Some(vec![0.5]))
            .expect("witness (0, 0.5)");
        assert!((w.excess - 0.375).abs() < 1e-12);
    }

    #[test]
    fn allen_cahn_split_passes() {
        let rep = validate_drift(&DriftSpec::<f64>::allen_cahn_like(1), &plan());
        assert!(rep.passed(), "{}", rep.summary());
        let rep2 = validate_drift(&DriftSpec::<f64>::allen_cahn_like(2), &plan());
        assert!(rep2.passed(), "{}", rep2.summary());
    }

    #[test]
    fn non_finite_drift_rejected() {
        let rep = validate_drift(&custom_g(|v| if v > 50.0 { f64::NAN } else { -v }), &plan());
        let c = rep.check("drift-finite").unwrap();
        assert!(!c.passed);
        assert!(c.witnesses[0].other.as_ref().unwrap()[0] > 50.0);
    }

    #[test]
    fn diffusion_growth_checks() {
        let p = plan();
        let s = DiffusionSpec::<f64>::power_growth(1, 0.4).unwrap();
        assert!(validate_diffusion(&s, &p).passed());
        let c = DiffusionSpec::<f64>::constant(1, 1.0);
        let rep = validate_diffusion(&c, &p);
        assert!(rep.passed());
        assert!(rep.check("diffusion-bounded").unwrap().passed);

        let bad = DiffusionSpec::<f64>::power_growth_declared(1, 1.2, 1.0);
        let rep = validate_diffusion(&bad, &p);
        let g = rep.check("diffusion-growth").unwrap();
        assert!(!g.passed);
        let w = g.witnesses.iter().find(|w| w.point == vec![1e3]).expect("witness at 1e3");
        let ratio = w.excess + 1.0;
        assert!((ratio - 1001f64.powf(0.2)).abs() < 1e-9);
        assert!((ratio - 10f64.powf(0.6)).abs() < 1e-3);
    }

    #[test]
    fn bounded_multiplicative_passes() {
        let s = DiffusionSpec::<f64>::bounded_multiplicative(1, 1.0, 0.5).unwrap();
        let rep = validate_diffusion(&s, &plan());
        assert!(rep.passed(), "{}", rep.summary());
    }

    #[test]
    fn unbounded_sigma_fails_bounded_flag() {
        let mut s = DiffusionSpec::<f64>::power_growth(1, 0.4).unwrap();
        s.bounded = true;
        assert!(!validate_diffusion(&s, &plan()).check("diffusion-bounded").unwrap().passed);
    }

    #[test]
    fn noise_examples() {
        let b = basis();
        assert!(validate_noise(&NoiseSpec::white(0.75), &b).unwrap().passed());
        let rep = validate_noise(&NoiseSpec::white(0.4), &b).unwrap();
        assert!(!rep.check("noise-eigenvalue-sum").unwrap().passed);
        assert!(rep.check("noise-exponents").unwrap().passed);
        let rel = NoiseSpec {
            rho: Some(1e6),
            ..NoiseSpec::white(0.9999999)
        };
        assert!(validate_noise(&rel, &b).unwrap().check("noise-exponents").unwrap().passed);
        let edge = NoiseSpec {
            lambda: LambdaSpec::Explicit { values: vec![1.0; 4] },
            beta: 0.75,
            rho: Some(4.0),
            modes: None,
        };
        assert!(validate_noise(&edge, &b).unwrap().passed());
        let neg = NoiseSpec {
            lambda: LambdaSpec::Explicit { values: vec![1.0, -1.0] },
            ..NoiseSpec::white(0.75)
        };
        assert!(validate_noise(&neg, &b).is_err());
    }

    #[test]
    fn beta_rho_relation_boundary() {
        // beta (rho - 2) / rho >= 1 is impossible for beta < 1; beta = 1 hits the boundary.
        let b = basis();
        let s = NoiseSpec {
            rho: None,
            ..NoiseSpec::white(1.0)
        };
        assert!(!validate_noise(&s, &b).unwrap().check("noise-exponents").unwrap().passed);
    }

    #[test]
    fn colored_noise_series() {
        let b = basis();
        let ok = NoiseSpec {
            lambda: LambdaSpec::PowerLaw { scale: 1.0, decay: 0.6 },
            beta: 0.75,
            rho: Some(2.0),
            modes: None,
        };
        assert!(validate_noise(&ok, &b).unwrap().passed());
        let bad = NoiseSpec {
            lambda: LambdaSpec::PowerLaw { scale: 1.0, decay: 0.4 },
            ..ok
        };
        assert!(!validate_noise(&bad, &b).unwrap().check("noise-coefficient-sum").unwrap().passed);
    }

    #[test]
    fn series_classifier() {
        assert!(classify_series(|k| (k as f64).powf(-2.0), SERIES_TERMS).converges);
        assert!(!classify_series(|k| 1.0 / k as f64, SERIES_TERMS).converges);
        assert!(!classify_series(|k| (k as f64).powf(-0.8), SERIES_TERMS).converges);
        assert!(classify_series(|k| if k < 5 { 1.0 } else { 0.0 }, SERIES_TERMS).converges);
    }

    #[test]
    fn nu_bounds() {
        let b3 = admissible_nu(3.0, 0.5 + 1e-9, None).unwrap();
        assert!((b3.upper - 0.5).abs() < 1e-8 && !b3.inclusive);
        let b5 = admissible_nu(5.0, 0.5 + 1e-9, None).unwrap();
        assert!((b5.upper - 1.0).abs() < 1e-8 && !b5.inclusive);
        let capped = admissible_nu(5.0, 0.3, None).unwrap();
        assert_eq!(capped.upper, 1.0);
        assert!(capped.inclusive && capped.admits(1.0));
        for m in [1.01, 2.0, 3.0, 7.0] {
            assert!(admissible_nu(m, 0.75, None).unwrap().admits(0.0));
        }
        assert!(admissible_nu(1.0, 0.75, None).is_err());
        assert!(!admissible_nu(3.0, 0.55, None).unwrap().admits(0.6));
        assert!(admissible_nu(3.0, 0.55, None).unwrap().admits(0.4));
    }

    #[test]
    fn growth_compatibility_flags_large_nu() {
        let drift = DriftSpec::<f64>::power_dissipative(1, 3.0, 1.0).unwrap();
        let noise = NoiseSpec::white(0.55);
        let ok = DiffusionSpec::power_growth(1, 0.4).unwrap();
        assert!(validate_growth_compatibility(&drift, &ok, &noise).passed());
        let bad = DiffusionSpec::power_growth(1, 0.6).unwrap();
        let rep = validate_growth_compatibility(&drift, &bad, &noise);
        assert!(!rep.passed());
        let w = &rep.checks[0].witnesses[0];
        assert_eq!(w.point, vec![0.6]);
    }

    #[test]
    fn fd_derivatives_match_analytic() {
        let d = DriftSpec::<f64>::power_dissipative(1, 3.0, 2.0).unwrap();
        let fd = DriftSpec { g_prime: None, ..d.clone() };
        for v in [-3.0, -0.2, 0.7, 5.0] {
            let a = d.g_derivative(0, 0.0, 0.0, v);
            let b = fd.g_derivative(0, 0.0, 0.0, v);
            assert!((a - b).abs() < 1e-7 * (1.0 + a.abs()));
        }
        let ac = DriftSpec::<f64>::allen_cahn_like(2);
        let ac_fd = DriftSpec { h_jacobian: None, ..ac.clone() };
        let mut j1 = vec![0.0; 4];
        let mut j2 = vec![0.0; 4];
        ac.h_jacobian_eval(0.0, 0.0, &[0.3, -1.0], &mut j1);
        ac_fd.h_jacobian_eval(0.0, 0.0, &[0.3, -1.0], &mut j2);
        for (a, b) in j1.iter().zip(&j2) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn noise_monotone_in_beta(beta in 0.05f64..0.95, bump in 0.0f64..0.5) {
            let b = basis();
            let lo = validate_noise(&NoiseSpec::white(beta), &b).unwrap().passed();
            let hi_beta = (beta + bump).min(0.999);
            let hi = validate_noise(&NoiseSpec::white(hi_beta), &b).unwrap().passed();
            prop_assert!(!lo || hi);
        }
    }

    proptest! {
        #[test]
        fn nu_bound_monotone(m in 1.01f64..8.0, dm in 0.0f64..3.0, beta in 0.01f64..0.99, db in 0.0f64..0.5) {
            let a = admissible_nu(m, beta, None).unwrap().upper;
            prop_assert!(admissible_nu(m + dm, beta, None).unwrap().upper >= a);
            let b2 = (beta + db).min(0.999);
            prop_assert!(admissible_nu(m, b2, None).unwrap().upper <= a);
        }
    }
}
