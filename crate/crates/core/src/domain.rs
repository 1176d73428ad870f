//! One-dimensional Dirichlet domain, its sine eigenbasis, the diagonal heat
//! semigroup, and the sup-norm geometry of fields and space-time paths.
//!
//! Grid convention: the interval `(0, L)` carries `n_grid` interior points
//! `xi_i = (i + 1) L / (n_grid + 1)`, `i = 0..n_grid`; boundary values are
//! implicitly zero. Mode index `k` is zero-based and refers to the
//! eigenfunction `sqrt(2/L) sin((k + 1) pi xi / L)`. Analysis uses the
//! trapezoidal rule with zero boundary values, which makes the sampled
//! eigenfunctions exactly orthonormal, so synthesis and analysis are mutual
//! inverses when `n_modes == n_grid`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec<T> {
    pub length: T,
    pub n_grid: usize,
    pub n_modes: usize,
    pub components: usize,
}

impl<T: Real> DomainSpec<T> {
    pub fn new(length: T, n_grid: usize, n_modes: usize, components: usize) -> Result<Self> {
        if !(length > T::zero()) || !length.is_finite() {
            return Err(Error::InvalidDomain(format!("length must be positive, got {length}")));
        }
        if n_grid == 0 {
            return Err(Error::InvalidDomain("n_grid must be positive".into()));
        }
        if n_modes == 0 || n_modes > n_grid {
            return Err(Error::InvalidDomain(format!(
                "n_modes must lie in 1..={n_grid}, got {n_modes}"
            )));
        }
        if components == 0 {
            return Err(Error::InvalidDomain("at least one component is required".into()));
        }
        Ok(Self {
            length,
            n_grid,
            n_modes,
            components,
        })
    }

    /// Grid spacing `L / (n_grid + 1)`.
    #[inline]
    pub fn spacing(&self) -> T {
        self.length / T::from_usize_lossy(self.n_grid + 1)
    }

    #[inline]
    pub fn xi(&self, i: usize) -> T {
        T::from_usize_lossy(i + 1) * self.spacing()
    }

    pub fn grid(&self) -> Vec<T> {
        (0..self.n_grid).map(|i| self.xi(i)).collect()
    }

    /// Number of scalar values in a field on this domain.
    #[inline]
    pub fn field_len(&self) -> usize {
        self.components * self.n_grid
    }

    #[inline]
    pub fn spectral_len(&self) -> usize {
        self.components * self.n_modes
    }
}

/// Constant-coefficient diffusion `kappa_i d^2/dxi^2` per component.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec<T> {
    pub diffusivity: Vec<T>,
    pub ellipticity: T,
}

impl<T: Real> OperatorSpec<T> {
    pub fn new(diffusivity: Vec<T>, ellipticity: T) -> Result<Self> {
        if !(ellipticity > T::zero()) {
            return Err(Error::InvalidParameter("ellipticity floor must be positive".into()));
        }
        if diffusivity.is_empty() {
            return Err(Error::InvalidParameter("no diffusivities given".into()));
        }
        if let Some(k) = diffusivity.iter().find(|k| !(**k >= ellipticity) || !k.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "diffusivity {k} below ellipticity floor {ellipticity}"
            )));
        }
        Ok(Self {
            diffusivity,
            ellipticity,
        })
    }

    pub fn uniform(components: usize, kappa: T) -> Result<Self> {
        Self::new(vec![kappa; components], kappa)
    }
}

/// Field on the interior grid, component-major: `values[i * n_grid + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    domain: DomainSpec<T>,
    values: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn zeros(domain: DomainSpec<T>) -> Self {
        Self {
            domain,
            values: vec![T::zero(); domain.field_len()],
        }
    }

    pub fn from_values(domain: DomainSpec<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != domain.field_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", domain.field_len()),
                found: format!("{} values", values.len()),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite field value at index {pos}")));
        }
        Ok(Self { domain, values })
    }

    /// Samples `f(component, xi)` on the grid.
    pub fn from_fn(domain: DomainSpec<T>, mut f: impl FnMut(usize, T) -> T) -> Result<Self> {
        let mut values = Vec::with_capacity(domain.field_len());
        for c in 0..domain.components {
            for i in 0..domain.n_grid {
                values.push(f(c, domain.xi(i)));
            }
        }
        Self::from_values(domain, values)
    }

    /// Internal constructor that skips the finiteness scan.
    pub(crate) fn from_raw(domain: DomainSpec<T>, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), domain.field_len());
        Self { domain, values }
    }

    #[inline]
    pub fn domain(&self) -> &DomainSpec<T> {
        &self.domain
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn component(&self, c: usize) -> &[T] {
        let n = self.domain.n_grid;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn sup_norm(&self) -> T {
        sup_abs(&self.values)
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::from_raw(self.domain, self.values.iter().map(|v| *v * s).collect())
    }

    /// `self - other`; domains must agree.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_same_domain(&self.domain, &other.domain)?;
        Ok(Self::from_raw(
            self.domain,
            self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_same_domain(&self.domain, &other.domain)?;
        Ok(Self::from_raw(
            self.domain,
            self.values.iter().zip(&other.values).map(|(a, b)| *a + *b).collect(),
        ))
    }

    /// Trapezoidal `L^2(O x {1..r})` norm squared.
    pub fn l2_norm_sq(&self) -> T {
        self.domain.spacing() * self.values.iter().map(|v| *v * *v).sum::<T>()
    }
}

fn check_same_domain<T: Real>(a: &DomainSpec<T>, b: &DomainSpec<T>) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

pub(crate) fn sup_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Mode coefficients, component-major: `values[i * n_modes + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectral<T> {
    pub components: usize,
    pub n_modes: usize,
    pub values: Vec<T>,
}

impl<T: Real> Spectral<T> {
    pub fn zeros(components: usize, n_modes: usize) -> Self {
        Self {
            components,
            n_modes,
            values: vec![T::zero(); components * n_modes],
        }
    }

    /// Unit coefficient at `(component, mode)`.
    pub fn unit(components: usize, n_modes: usize, component: usize, mode: usize) -> Self {
        let mut s = Self::zeros(components, n_modes);
        s.values[component * n_modes + mode] = T::one();
        s
    }

    #[inline]
    pub fn get(&self, component: usize, mode: usize) -> T {
        self.values[component * self.n_modes + mode]
    }
}

/// Uniform time grid of fields, `t_m = m * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathField<T> {
    dt: T,
    frames: Vec<Field<T>>,
}

impl<T: Real> PathField<T> {
    pub fn new(dt: T, frames: Vec<Field<T>>) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidParameter("a path needs at least one frame".into()))?;
        let d = first.domain;
        if let Some(bad) = frames.iter().find(|f| f.domain != d) {
            return Err(Error::GridMismatch(format!("{:?} vs {d:?}", bad.domain)));
        }
        Ok(Self { dt, frames })
    }

    pub(crate) fn from_raw(dt: T, frames: Vec<Field<T>>) -> Self {
        Self { dt, frames }
    }

    /// The constant path equal to zero on `n_steps + 1` frames.
    pub fn zeros(domain: DomainSpec<T>, dt: T, n_steps: usize) -> Result<Self> {
        Self::new(dt, vec![Field::zeros(domain); n_steps + 1])
    }

    /// Samples `f(t, component, xi)` on the space-time lattice.
    pub fn from_fn(
        domain: DomainSpec<T>,
        dt: T,
        n_steps: usize,
        mut f: impl FnMut(T, usize, T) -> T,
    ) -> Result<Self> {
        let frames = (0..=n_steps)
            .map(|m| {
                let t = T::from_usize_lossy(m) * dt;
                Field::from_fn(domain, |c, xi| f(t, c, xi))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dt, frames)
    }

    #[inline]
    pub fn dt(&self) -> T {
        self.dt
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn horizon(&self) -> T {
        self.dt * T::from_usize_lossy(self.n_steps())
    }

    pub fn time(&self, m: usize) -> T {
        self.dt * T::from_usize_lossy(m)
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.frames.len()).map(|m| self.time(m)).collect()
    }

    #[inline]
    pub fn frames(&self) -> &[Field<T>] {
        &self.frames
    }

    #[inline]
    pub fn frame(&self, m: usize) -> &Field<T> {
        &self.frames[m]
    }

    #[inline]
    pub fn last(&self) -> &Field<T> {
        self.frames.last().expect("non-empty path")
    }

    #[inline]
    pub fn domain(&self) -> &DomainSpec<T> {
        self.frames[0].domain()
    }

    pub fn into_frames(self) -> Vec<Field<T>> {
        self.frames
    }

    pub fn sup_norm(&self) -> T {
        self.frames.iter().fold(T::zero(), |m, f| m.max(f.sup_norm()))
    }

    /// Sup norm restricted to frames with `t_m <= t` (the `E_t` norm).
    pub fn sup_norm_until(&self, t: T) -> T {
        let tol = self.dt * T::lit(1e-9);
        self.frames
            .iter()
            .enumerate()
            .take_while(|(m, _)| self.time(*m) <= t + tol)
            .fold(T::zero(), |acc, (_, f)| acc.max(f.sup_norm()))
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::from_raw(self.dt, self.frames.iter().map(|f| f.scaled(s)).collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let frames = self
            .frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_raw(self.dt, frames))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let frames = self
            .frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| a.add(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_raw(self.dt, frames))
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.frames.len() != other.frames.len() {
            return Err(Error::GridMismatch(format!(
                "{} frames vs {} frames",
                self.frames.len(),
                other.frames.len()
            )));
        }
        let rel = ((self.dt - other.dt) / self.dt).abs();
        if rel > T::lit(1e-12) {
            return Err(Error::GridMismatch(format!("dt {} vs {}", self.dt, other.dt)));
        }
        check_same_domain(self.domain(), other.domain())
    }
}

pub fn sup_norm<T: Real>(field: &Field<T>) -> T {
    field.sup_norm()
}

pub fn sup_norm_path<T: Real>(path: &PathField<T>) -> T {
    path.sup_norm()
}

/// `|phi - psi|_{E_T}` on a shared space-time grid.
pub fn path_distance<T: Real>(phi: &PathField<T>, psi: &PathField<T>) -> Result<T> {
    phi.check_compatible(psi)?;
    Ok(phi
        .frames
        .iter()
        .zip(&psi.frames)
        .map(|(a, b)| {
            a.values
                .iter()
                .zip(&b.values)
                .fold(T::zero(), |m, (x, y)| m.max((*x - *y).abs()))
        })
        .fold(T::zero(), T::max))
}

/// Scratch buffers for one sine transform; reuse across calls on hot paths.
pub struct DstWorkspace<T> {
    buffer: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
    padded: Vec<T>,
    out: Vec<T>,
}

/// Dirichlet eigenbasis of the per-component operators.
#[derive(Clone)]
pub struct Basis<T> {
    domain: DomainSpec<T>,
    diffusivity: Vec<T>,
    eigenvalues: Vec<T>,
    norm: T,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Basis<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Basis")
            .field("domain", &self.domain)
            .field("diffusivity", &self.diffusivity)
            .finish_non_exhaustive()
    }
}

/// Eigenpairs `alpha_{i,k} = kappa_i ((k+1) pi / L)^2` with sampled sine eigenfunctions.
pub fn build_basis<T: Real>(domain: &DomainSpec<T>, op: &OperatorSpec<T>) -> Result<Basis<T>> {
    Basis::new(domain, op)
}

impl<T: Real> Basis<T> {
    pub fn new(domain: &DomainSpec<T>, op: &OperatorSpec<T>) -> Result<Self> {
        let d = DomainSpec::new(domain.length, domain.n_grid, domain.n_modes, domain.components)?;
        if op.diffusivity.len() != d.components {
            return Err(Error::ShapeMismatch {
                expected: format!("{} diffusivities", d.components),
                found: format!("{}", op.diffusivity.len()),
            });
        }
        let mut eigenvalues = Vec::with_capacity(d.spectral_len());
        for kappa in &op.diffusivity {
            for k in 0..d.n_modes {
                let w = T::from_usize_lossy(k + 1) * T::PI() / d.length;
                eigenvalues.push(*kappa * w * w);
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(2 * (d.n_grid + 1));
        Ok(Self {
            domain: d,
            diffusivity: op.diffusivity.clone(),
            eigenvalues,
            norm: (T::lit(2.0) / d.length).sqrt(),
            fft,
        })
    }

    #[inline]
    pub fn domain(&self) -> &DomainSpec<T> {
        &self.domain
    }

    pub fn diffusivity(&self) -> &[T] {
        &self.diffusivity
    }

    #[inline]
    pub fn eigenvalue(&self, component: usize, mode: usize) -> T {
        self.eigenvalues[component * self.domain.n_modes + mode]
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    /// Continuous eigenfunction evaluated anywhere in `[0, L]`.
    pub fn eigenfunction_at(&self, mode: usize, xi: T) -> T {
        self.norm * (T::from_usize_lossy(mode + 1) * T::PI() * xi / self.domain.length).sin()
    }

    /// Eigenfunction sampled on the grid (same for every component).
    pub fn eigenfunction(&self, mode: usize) -> Vec<T> {
        (0..self.domain.n_grid)
            .map(|i| self.eigenfunction_at(mode, self.domain.xi(i)))
            .collect()
    }

    /// `|e_k|` over the grid samples.
    pub fn eigenfunction_sup(&self, mode: usize) -> T {
        sup_abs(&self.eigenfunction(mode))
    }

    pub fn workspace(&self) -> DstWorkspace<T> {
        let n = 2 * (self.domain.n_grid + 1);
        DstWorkspace {
            buffer: vec![Complex::new(T::zero(), T::zero()); n],
            scratch: vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()],
            padded: vec![T::zero(); self.domain.n_grid],
            out: vec![T::zero(); self.domain.n_grid],
        }
    }

    /// Unnormalized DST-I: `out_k = sum_i x_i sin(pi (i+1)(k+1) / (n+1))`.
    fn dst1(&self, x: &[T], ws: &mut DstWorkspace<T>) {
        let n = self.domain.n_grid;
        let zero = Complex::new(T::zero(), T::zero());
        ws.buffer[0] = zero;
        ws.buffer[n + 1] = zero;
        for (i, v) in x.iter().enumerate() {
            ws.buffer[i + 1] = Complex::new(*v, T::zero());
            ws.buffer[2 * (n + 1) - (i + 1)] = Complex::new(-*v, T::zero());
        }
        self.fft.process_with_scratch(&mut ws.buffer, &mut ws.scratch);
        let half = T::lit(0.5);
        for k in 0..n {
            ws.out[k] = -ws.buffer[k + 1].im * half;
        }
    }

    /// Analysis of one grid row into `n_modes` coefficients.
    pub(crate) fn analyze_row(&self, x: &[T], coeffs: &mut [T], ws: &mut DstWorkspace<T>) {
        self.dst1(x, ws);
        let s = self.norm * self.domain.spacing();
        for (c, o) in coeffs.iter_mut().zip(&ws.out) {
            *c = *o * s;
        }
    }

    /// Synthesis of `n_modes` coefficients onto one grid row.
    pub(crate) fn synthesize_row(&self, coeffs: &[T], x: &mut [T], ws: &mut DstWorkspace<T>) {
        let mut padded = std::mem::take(&mut ws.padded);
        padded[..coeffs.len()].copy_from_slice(coeffs);
        for p in padded[coeffs.len()..].iter_mut() {
            *p = T::zero();
        }
        self.dst1(&padded, ws);
        ws.padded = padded;
        for (xi, o) in x.iter_mut().zip(&ws.out) {
            *xi = *o * self.norm;
        }
    }

    pub(crate) fn analyze_into(&self, field: &[T], coeffs: &mut [T], ws: &mut DstWorkspace<T>) {
        let (n, m) = (self.domain.n_grid, self.domain.n_modes);
        for c in 0..self.domain.components {
            self.analyze_row(&field[c * n..(c + 1) * n], &mut coeffs[c * m..(c + 1) * m], ws);
        }
    }

    pub(crate) fn synthesize_into(&self, coeffs: &[T], field: &mut [T], ws: &mut DstWorkspace<T>) {
        let (n, m) = (self.domain.n_grid, self.domain.n_modes);
        for c in 0..self.domain.components {
            self.synthesize_row(&coeffs[c * m..(c + 1) * m], &mut field[c * n..(c + 1) * n], ws);
        }
    }

    /// Mode coefficients `a_{i,k} = <x_i, e_{i,k}>` under the grid quadrature.
    pub fn to_spectral(&self, field: &Field<T>) -> Result<Spectral<T>> {
        check_same_domain(&self.domain, &field.domain)?;
        let mut out = Spectral::zeros(self.domain.components, self.domain.n_modes);
        let mut ws = self.workspace();
        self.analyze_into(&field.values, &mut out.values, &mut ws);
        Ok(out)
    }

    pub fn to_grid(&self, coeffs: &Spectral<T>) -> Result<Field<T>> {
        self.check_spectral(coeffs)?;
        let mut values = vec![T::zero(); self.domain.field_len()];
        let mut ws = self.workspace();
        self.synthesize_into(&coeffs.values, &mut values, &mut ws);
        Ok(Field::from_raw(self.domain, values))
    }

    /// Applies `S(t)`: every mode is multiplied by `exp(-alpha_{i,k} t)`.
    pub fn semigroup_apply(&self, coeffs: &Spectral<T>, t: T) -> Result<Spectral<T>> {
        self.check_spectral(coeffs)?;
        if t < T::zero() || t.is_nan() {
            return Err(Error::NegativeTime(t.as_f64()));
        }
        let values = coeffs
            .values
            .iter()
            .zip(&self.eigenvalues)
            .map(|(a, lam)| *a * (-*lam * t).exp())
            .collect();
        Ok(Spectral {
            components: coeffs.components,
            n_modes: coeffs.n_modes,
            values,
        })
    }

    /// `S(t) x` evaluated on the grid.
    pub fn semigroup_field(&self, x: &Field<T>, t: T) -> Result<Field<T>> {
        self.to_grid(&self.semigroup_apply(&self.to_spectral(x)?, t)?)
    }

    fn check_spectral(&self, s: &Spectral<T>) -> Result<()> {
        if s.components != self.domain.components
            || s.n_modes != self.domain.n_modes
            || s.values.len() != self.domain.spectral_len()
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.domain.components, self.domain.n_modes),
                found: format!("{}x{} ({} values)", s.components, s.n_modes, s.values.len()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn basis(n: usize, m: usize, r: usize) -> Basis<f64> {
        let d = DomainSpec::new(PI, n, m, r).unwrap();
        build_basis(&d, &OperatorSpec::uniform(r, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn eigenvalues_on_pi_interval_are_squares() {
        let b = basis(16, 8, 1);
        assert!((b.eigenvalue(0, 2) - 9.0).abs() < 1e-12);
        for k in 1..8 {
            assert!(b.eigenvalue(0, k) > b.eigenvalue(0, k - 1));
        }
    }

    #[test]
    fn eigenfunction_midpoint_value() {
        let b = basis(16, 8, 1);
        assert!((b.eigenfunction_at(0, PI / 2.0) - (2.0 / PI).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn rejects_too_many_modes() {
        assert!(DomainSpec::new(1.0, 8, 9, 1).is_err());
        let d = DomainSpec { length: 1.0, n_grid: 8, n_modes: 9, components: 1 };
        assert!(build_basis(&d, &OperatorSpec::uniform(1, 1.0).unwrap()).is_err());
    }

    #[test]
    fn gram_matrix_is_identity() {
        // Direct quadrature, independent of the FFT path.
        let b = basis(37, 37, 1);
        let h = b.domain().spacing();
        for j in 0..37 {
            let ej = b.eigenfunction(j);
            for k in 0..37 {
                let ek = b.eigenfunction(k);
                let ip: f64 = h * ej.iter().zip(&ek).map(|(a, c)| a * c).sum::<f64>();
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-10, "({j},{k}) -> {ip}");
            }
        }
    }

    #[test]
    fn unit_mode_roundtrip() {
        let b = basis(20, 10, 2);
        let d = *b.domain();
        let f = Field::from_fn(d, |c, xi| if c == 1 { b.eigenfunction_at(2, xi) } else { 0.0 }).unwrap();
        let s = b.to_spectral(&f).unwrap();
        for c in 0..2 {
            for k in 0..10 {
                let expect = if c == 1 && k == 2 { 1.0 } else { 0.0 };
                assert!((s.get(c, k) - expect).abs() < 1e-10);
            }
        }
        let back = b.to_grid(&Spectral::unit(2, 10, 1, 2)).unwrap();
        assert!(back.sub(&f).unwrap().sup_norm() < 1e-12);
        assert_eq!(b.to_spectral(&Field::zeros(d)).unwrap(), Spectral::zeros(2, 10));
        assert_eq!(b.to_grid(&Spectral::zeros(2, 10)).unwrap(), Field::zeros(d));
    }

    #[test]
    fn semigroup_factor() {
        let b = basis(16, 8, 1);
        let s = b.semigroup_apply(&Spectral::unit(1, 8, 0, 1), 0.5).unwrap();
        assert!((s.get(0, 1) - (-2.0f64).exp()).abs() < 1e-15);
        let id = b.semigroup_apply(&Spectral::unit(1, 8, 0, 1), 0.0).unwrap();
        assert_eq!(id.get(0, 1), 1.0);
        let far = b.semigroup_apply(&Spectral::unit(1, 8, 0, 0), 1e4).unwrap();
        assert_eq!(far.get(0, 0), 0.0);
        assert!(matches!(
            b.semigroup_apply(&Spectral::zeros(1, 8), -1.0),
            Err(Error::NegativeTime(_))
        ));
    }

    #[test]
    fn sup_norms() {
        let d = DomainSpec::new(PI, 50, 10, 1).unwrap();
        assert_eq!(Field::zeros(d).sup_norm(), 0.0);
        let mut v = vec![0.0; 50];
        v[7] = -3.0;
        assert_eq!(Field::from_values(d, v).unwrap().sup_norm(), 3.0);
        // Analytic max of a sin(xi) is a; grid misses the peak by at most O(h^2).
        let a = 2.5;
        let f = Field::from_fn(d, |_, xi| a * xi.sin()).unwrap();
        let h = d.spacing();
        assert!((f.sup_norm() - a).abs() <= a * h * h);
    }

    #[test]
    fn shape_mismatch_reported() {
        let b = basis(16, 8, 1);
        let other = DomainSpec::new(PI, 17, 8, 1).unwrap();
        assert!(b.to_spectral(&Field::zeros(other)).is_err());
        assert!(b.to_grid(&Spectral::zeros(1, 7)).is_err());
    }

    #[test]
    fn path_distance_examples() {
        let d = DomainSpec::new(PI, 12, 6, 1).unwrap();
        let p = PathField::from_fn(d, 0.1, 5, |t, _, xi| t * xi.sin()).unwrap();
        assert_eq!(path_distance(&p, &p).unwrap(), 0.0);
        let q = PathField::from_fn(d, 0.1, 5, |t, _, xi| t * xi.sin() - 0.75).unwrap();
        assert!((path_distance(&p, &q).unwrap() - 0.75).abs() < 1e-14);
        let short = PathField::zeros(d, 0.1, 4).unwrap();
        assert!(path_distance(&p, &short).is_err());
    }

    #[test]
    fn sup_norm_until_restricts_frames() {
        let d = DomainSpec::new(1.0, 4, 4, 1).unwrap();
        let p = PathField::from_fn(d, 0.25, 4, |t, _, _| t).unwrap();
        assert_eq!(p.sup_norm_until(0.5), 0.5);
        assert_eq!(p.sup_norm(), 1.0);
    }

    #[test]
    fn f32_roundtrip() {
        let d = DomainSpec::new(1.0f32, 16, 16, 1).unwrap();
        let b = build_basis(&d, &OperatorSpec::uniform(1, 1.0f32).unwrap()).unwrap();
        let f = Field::from_fn(d, |_, xi| xi * (1.0 - xi)).unwrap();
        let back = b.to_grid(&b.to_spectral(&f).unwrap()).unwrap();
        assert!(back.sub(&f).unwrap().sup_norm() < 1e-5);
    }

    fn arb_coeffs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn roundtrip_full_modes(c in arb_coeffs(24)) {
            let b = basis(24, 24, 1);
            let f = Field::from_values(*b.domain(), c).unwrap();
            let back = b.to_grid(&b.to_spectral(&f).unwrap()).unwrap();
            prop_assert!(back.sub(&f).unwrap().sup_norm() < 1e-10);
        }

        #[test]
        fn semigroup_is_additive(c in arb_coeffs(12), t in 0.0f64..1.0, s in 0.0f64..1.0) {
            let b = basis(12, 12, 1);
            let a = Spectral { components: 1, n_modes: 12, values: c };
            let once = b.semigroup_apply(&a, t + s).unwrap();
            let twice = b.semigroup_apply(&b.semigroup_apply(&a, t).unwrap(), s).unwrap();
            for (x, y) in once.values.iter().zip(&twice.values) {
                prop_assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn semigroup_contracts_sup_norm(c in arb_coeffs(6), t in 0.0f64..2.0) {
            let b = basis(32, 32, 1);
            let mut full = vec![0.0; 32];
            full[..6].copy_from_slice(&c);
            let a = Spectral { components: 1, n_modes: 32, values: full };
            let before = b.to_grid(&a).unwrap().sup_norm();
            let after = b.to_grid(&b.semigroup_apply(&a, t).unwrap()).unwrap().sup_norm();
            prop_assert!(after <= before + 1e-10);
        }

        #[test]
        fn path_distance_is_metric(
            a in arb_coeffs(15), b in arb_coeffs(15), c in arb_coeffs(15)
        ) {
            let d = DomainSpec::new(1.0, 5, 5, 1).unwrap();
            let mk = |v: &Vec<f64>| PathField::new(
                0.5,
                v.chunks(5).map(|ch| Field::from_values(d, ch.to_vec()).unwrap()).collect(),
            ).unwrap();
            let (p, q, s) = (mk(&a), mk(&b), mk(&c));
            let dpq = path_distance(&p, &q).unwrap();
            prop_assert_eq!(dpq, path_distance(&q, &p).unwrap());
            prop_assert!(dpq <= path_distance(&p, &s).unwrap() + path_distance(&s, &q).unwrap() + 1e-12);
            let brute = p.frames().iter().zip(q.frames())
                .map(|(x, y)| x.sub(y).unwrap().sup_norm())
                .fold(0.0, f64::max);
            prop_assert_eq!(dpq, brute);
        }
    }
}
