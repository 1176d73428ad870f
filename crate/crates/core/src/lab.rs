//! Monte Carlo experiments: event probabilities, importance sampling under a
//! Girsanov tilt, epsilon-log-probability curves, uniformity sweeps over
//! initial data and controls, and exit times.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{admissible_nu, validate_growth_compatibility};
use crate::domain::{Field, PathField, Spectral};
use crate::dynamics::{simulate_streaming, skeleton, ControlPath, Model, SimParams};
use crate::error::{Error, Result};
use crate::rate::{instanton_minimize, rate_evaluate, InstantonProblem, RateResult};
use crate::scalar::Real;
use crate::stats::Estimate;

/// Largest tolerated share of blow-up-flagged samples.
pub const MAX_FLAGGED_FRACTION: f64 = 0.01;

/// Below this effective sample size an importance-sampled estimate carries a warning.
pub const MIN_ESS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Event<T> {
    /// `sup_{t, xi} |X - center| < delta`.
    Tube { center: PathField<T>, delta: T },
    /// Coefficient of mode `mode` in channel `component` at the horizon exceeds `threshold`.
    ModeAbove { component: usize, mode: usize, threshold: T },
    Complement(Box<Event<T>>),
}

impl<T: Real> Event<T> {
    pub fn tube(center: PathField<T>, delta: T) -> Self {
        Event::Tube { center, delta }
    }

    pub fn complement(self) -> Self {
        Event::Complement(Box::new(self))
    }

    fn check(&self, model: &Model<T>, params: &SimParams<T>) -> Result<()> {
        match self {
            Event::Tube { center, delta } => {
                if center.domain() != model.domain() || center.n_steps() != params.n_steps()? {
                    return Err(Error::GridMismatch("tube center does not match the run grid".into()));
                }
                if !(*delta >= T::zero()) {
                    return Err(Error::InvalidParameter("tube radius must be nonnegative".into()));
                }
            }
            Event::ModeAbove { component, mode, .. } => {
                let d = model.domain();
                if *component >= d.components || *mode >= d.n_modes {
                    return Err(Error::InvalidParameter(format!("mode ({component}, {mode}) not represented")));
                }
            }
            Event::Complement(e) => e.check(model, params)?,
        }
        Ok(())
    }

    fn tracker<'a>(&'a self, model: &Model<T>) -> Tracker<'a, T> {
        let probe = match self {
            Event::ModeAbove { mode, .. } => {
                let h = model.domain().spacing();
                model.basis.eigenfunction(*mode).into_iter().map(|e| e * h).collect()
            }
            _ => Vec::new(),
        };
        Tracker {
            event: self,
            alive: true,
            done: false,
            probe,
            n_grid: model.domain().n_grid,
        }
    }
}

/// Streams frames through an event; `alive` stays true while the event can
/// still occur along the tube criterion.
struct Tracker<'a, T> {
    event: &'a Event<T>,
    alive: bool,
    done: bool,
    probe: Vec<T>,
    n_grid: usize,
}

impl<T: Real> Tracker<'_, T> {
    /// Returns `false` once the outcome is settled.
    fn observe(&mut self, m: usize, v: &[T], last: bool) -> bool {
        let base = match self.event {
            Event::Complement(e) => e.as_ref(),
            e => e,
        };
        match base {
            Event::Tube { center, delta } => {
                let c = center.frame(m).values();
                if v.iter().zip(c).any(|(a, b)| !((*a - *b).abs() < *delta)) {
                    self.alive = false;
                    self.done = true;
                    return false;
                }
            }
            Event::ModeAbove { component, threshold, .. } => {
                if last {
                    let row = &v[component * self.n_grid..(component + 1) * self.n_grid];
                    let a: T = row.iter().zip(&self.probe).map(|(x, e)| *x * *e).sum();
                    self.alive = a > *threshold;
                    self.done = true;
                }
            }
            Event::Complement(_) => unreachable!("nested complements are flattened by construction"),
        }
        true
    }

    fn hit(&self) -> bool {
        let base_hit = self.alive;
        match self.event {
            Event::Complement(_) => !base_hit,
            _ => base_hit,
        }
    }
}

fn flatten<T: Clone>(e: &Event<T>) -> Event<T> {
    match e {
        Event::Complement(inner) => match inner.as_ref() {
            Event::Complement(x) => flatten(x),
            x => Event::Complement(Box::new(x.clone())),
        },
        x => x.clone(),
    }
}

struct Sample {
    hit: bool,
    flagged: bool,
    log_weight: f64,
}

fn run_sample<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    event: &Event<T>,
    coords: Option<&[Vec<T>]>,
    params: &SimParams<T>,
    replicate: u64,
) -> Result<Sample> {
    let n = params.n_steps()?;
    let mut tr = event.tracker(model);
    let out = simulate_streaming(model, x, coords, params, replicate, &mut |m, _, v| tr.observe(m, v, m == n))?;
    if out.flagged {
        return Ok(Sample {
            hit: false,
            flagged: true,
            log_weight: f64::NEG_INFINITY,
        });
    }
    Ok(Sample {
        hit: tr.hit(),
        flagged: false,
        log_weight: out.log_weight.map_or(0.0, |w| w.as_f64()),
    })
}

fn check_flagged(flagged: usize, n: usize, context: &str) -> Result<()> {
    let f = flagged as f64 / n.max(1) as f64;
    if f > MAX_FLAGGED_FRACTION {
        return Err(Error::TooManyFlagged {
            fraction: f,
            context: context.into(),
        });
    }
    Ok(())
}

/// Plain Monte Carlo frequency of `event` for `X^eps_x`. Flagged samples count
/// as misses; more than 1% flagged is an error.
pub fn mc_event_probability<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    event: &Event<T>,
    params: &SimParams<T>,
    n_samples: usize,
) -> Result<Estimate> {
    mc_with_offset(model, x, event, params, n_samples, 0)
}

fn mc_with_offset<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    event: &Event<T>,
    params: &SimParams<T>,
    n_samples: usize,
    offset: u64,
) -> Result<Estimate> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("at least one sample is required".into()));
    }
    let event = flatten(event);
    event.check(model, params)?;
    let samples = (0..n_samples as u64)
        .into_par_iter()
        .map(|r| run_sample(model, x, &event, None, params, offset + r))
        .collect::<Result<Vec<_>>>()?;
    let hits = samples.iter().filter(|s| s.hit).count();
    let flagged = samples.iter().filter(|s| s.flagged).count();
    check_flagged(flagged, n_samples, "plain Monte Carlo")?;
    Ok(Estimate::frequency("p_hat", hits, n_samples, flagged).with_eps_log(params.eps.as_f64()))
}

/// Importance-sampled estimate with its log-scale value and effective sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsEstimate {
    pub estimate: Estimate,
    /// `ln p_hat`, computed in log space so it survives underflow.
    pub log_p: f64,
    pub ess: f64,
    pub hits: usize,
    pub warning: Option<String>,
}

/// `mean(1_event * exp(log_weight))` over trajectories of `X^{eps,u*}_x`.
pub fn is_probability<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    event: &Event<T>,
    params: &SimParams<T>,
    tilt: &ControlPath<T>,
    n_samples: usize,
) -> Result<IsEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("at least one sample is required".into()));
    }
    if !(params.eps > T::zero()) {
        return Err(Error::InvalidParameter("importance sampling needs eps > 0".into()));
    }
    let event = flatten(event);
    event.check(model, params)?;
    let coords = tilt.coords(&model.basis, model.j_modes())?;
    if tilt.n_steps() != params.n_steps()? {
        return Err(Error::GridMismatch("tilt does not match the run grid".into()));
    }
    let samples = (0..n_samples as u64)
        .into_par_iter()
        .map(|r| run_sample(model, x, &event, Some(&coords), params, r))
        .collect::<Result<Vec<_>>>()?;
    let flagged = samples.iter().filter(|s| s.flagged).count();
    check_flagged(flagged, n_samples, "importance sampling")?;
    let lw: Vec<f64> = samples.iter().filter(|s| s.hit).map(|s| s.log_weight).collect();
    let n = n_samples as f64;
    let eps = params.eps.as_f64();
    if lw.is_empty() {
        let mut e = Estimate::frequency("p_hat_is", 0, n_samples, flagged).with_eps_log(eps);
        e.stderr = 0.0;
        return Ok(IsEstimate {
            estimate: e,
            log_p: f64::NEG_INFINITY,
            ess: 0.0,
            hits: 0,
            warning: Some("no weighted hits".into()),
        });
    }
    let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s1: f64 = lw.iter().map(|l| (l - top).exp()).sum();
    let s2: f64 = lw.iter().map(|l| (2.0 * (l - top)).exp()).sum();
    let log_p = top + s1.ln() - n.ln();
    let p = log_p.exp();
    // population form: equals the binomial error when all weights are one
    let rel_var = ((s2 / n) / (s1 / n).powi(2) - 1.0).max(0.0);
    let stderr = p * (rel_var / n).sqrt();
    let ess = s1 * s1 / s2;
    let mut estimate = Estimate {
        name: "p_hat_is".into(),
        value: p,
        stderr,
        n: n_samples,
        flagged_fraction: flagged as f64 / n,
        eps_log: Some(eps * log_p),
    };
    if estimate.value > 1.0 {
        estimate.value = 1.0;
    }
    let warning = (ess < MIN_ESS).then(|| format!("effective sample size {ess:.2} below {MIN_ESS}"));
    Ok(IsEstimate {
        estimate,
        log_p,
        ess,
        hits: lw.len(),
        warning,
    })
}

/// `I_ball = min(I(phi), tube instanton)` plus the instanton used as tilt.
pub fn ball_rate<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    phi: &PathField<T>,
    delta: T,
) -> Result<(T, Option<RateResult<T>>)> {
    let exact = rate_evaluate(model, x, phi).ok().map(|r| r.value);
    let problem = InstantonProblem::tube(x.clone(), phi.clone(), delta);
    let inst = instanton_minimize(model, &problem).ok();
    let ib = match (exact, &inst) {
        (Some(a), Some(b)) => a.min(b.value),
        (Some(a), None) => a,
        (None, Some(b)) => b.value,
        (None, None) => return Err(Error::Convergence("neither recovery nor the tube instanton produced a rate".into())),
    };
    Ok((ib, inst))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub eps: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub n: usize,
    pub flagged_fraction: f64,
    pub ess: Option<f64>,
    /// `eps ln p_hat`; absent for zero-hit rows.
    pub eps_log_p: Option<f64>,
    pub minus_i_ball: f64,
    /// `eps ln p_hat + I_ball`.
    pub gap: Option<f64>,
    pub zero_hits: bool,
}

/// `eps ln P(|X^eps_x - phi|_{E_T} < delta)` along an epsilon ladder, importance
/// sampled when a tilt is given.
#[allow(clippy::too_many_arguments)]
pub fn ldp_curve<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    phi: &PathField<T>,
    delta: T,
    ladder: &[T],
    base: &SimParams<T>,
    n_samples: usize,
    tilt: Option<&ControlPath<T>>,
    i_ball: f64,
) -> Result<Vec<CurveRow>> {
    check_ladder(ladder)?;
    let ev = Event::tube(phi.clone(), delta);
    ladder
        .iter()
        .map(|eps| {
            let p = base.with_eps(*eps);
            let e = eps.as_f64();
            let (est, log_p, ess) = match tilt {
                Some(u) => {
                    let r = is_probability(model, x, &ev, &p, u, n_samples)?;
                    (r.estimate, r.log_p, Some(r.ess))
                }
                None => {
                    let r = mc_event_probability(model, x, &ev, &p, n_samples)?;
                    let lp = if r.value > 0.0 { r.value.ln() } else { f64::NEG_INFINITY };
                    (r, lp, None)
                }
            };
            let zero = !log_p.is_finite();
            Ok(CurveRow {
                eps: e,
                p_hat: est.value,
                stderr: est.stderr,
                n: est.n,
                flagged_fraction: est.flagged_fraction,
                ess,
                eps_log_p: (!zero).then(|| e * log_p),
                minus_i_ball: -i_ball,
                gap: (!zero).then(|| e * log_p + i_ball),
                zero_hits: zero,
            })
        })
        .collect()
}

fn check_ladder<T: Real>(ladder: &[T]) -> Result<()> {
    if ladder.is_empty() || ladder.windows(2).any(|w| !(w[1] < w[0])) || ladder.iter().any(|e| *e < T::zero()) {
        return Err(Error::InvalidParameter("epsilon ladder must be nonnegative and strictly decreasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    BoundedSet,
    BoundedSigma,
    SuperDissipative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialFamily {
    /// `directions` sampled directions at sup norms `K (i+1)/directions`.
    Ball { radius: f64, directions: usize },
    /// `directions` sampled directions at each sup norm in `magnitudes`.
    Ladder { magnitudes: Vec<f64>, directions: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub regime: Regime,
    pub family: InitialFamily,
    /// Random controls per initial datum; the zero control is always added.
    pub controls: usize,
    pub norm_bound: f64,
    pub delta: f64,
    pub eps_ladder: Vec<f64>,
    pub n_samples: usize,
    /// Modes used by sampled directions and controls.
    pub bandwidth: usize,
}

impl SweepConfig {
    pub fn validate<T: Real>(&self, model: &Model<T>) -> Result<()> {
        check_ladder(&self.eps_ladder)?;
        if !(self.norm_bound > 0.0) || !(self.delta > 0.0) || self.n_samples == 0 || self.bandwidth == 0 {
            return Err(Error::InvalidParameter("sweep needs N > 0, delta > 0, samples and bandwidth".into()));
        }
        match &self.family {
            InitialFamily::Ball { radius, directions } => {
                if !(*radius > 0.0) || *directions == 0 {
                    return Err(Error::InvalidParameter("ball family needs a positive radius and directions".into()));
                }
            }
            InitialFamily::Ladder { magnitudes, directions } => {
                if magnitudes.is_empty() || *directions == 0 || magnitudes.iter().any(|m| !(*m > 0.0)) {
                    return Err(Error::InvalidParameter("ladder family needs positive magnitudes and directions".into()));
                }
            }
        }
        match self.regime {
            Regime::BoundedSet => {
                if !matches!(self.family, InitialFamily::Ball { .. }) {
                    return Err(Error::InvalidParameter("bounded-set regime sweeps a ball".into()));
                }
            }
            Regime::BoundedSigma => {
                if !model.diffusion.bounded {
                    return Err(Error::InvalidParameter("bounded-sigma regime needs a bounded diffusion".into()));
                }
            }
            Regime::SuperDissipative => {
                let sd = model
                    .drift
                    .super_dissipativity
                    .ok_or(Error::MissingSuperDissipativity)?;
                let bound = admissible_nu(sd.m.as_f64(), model.noise.effective_beta(), model.noise.rho)?;
                let nu = model.diffusion.nu.as_f64();
                if !bound.admits(nu) {
                    let report = validate_growth_compatibility(&model.drift, &model.diffusion, &model.noise);
                    return Err(Error::Validation(report.summary()));
                }
            }
        }
        Ok(())
    }
}

fn band_field<T: Real>(model: &Model<T>, bandwidth: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Field<T>> {
    let d = *model.domain();
    let mut s = Spectral::zeros(d.components, d.n_modes);
    for c in 0..d.components {
        for k in 0..bandwidth.min(d.n_modes) {
            let z: f64 = StandardNormal.sample(rng);
            s.values[c * d.n_modes + k] = T::lit(z / (1.0 + k as f64));
        }
    }
    model.basis.to_grid(&s)
}

/// Sampled initial data, each pair being `(sup norm, field)`.
pub fn initial_family<T: Real>(model: &Model<T>, family: &InitialFamily, seed: u64) -> Result<Vec<(f64, Field<T>)>> {
    let mut rng = crate::rng::stream(seed, u64::MAX);
    let (dirs, mags): (usize, Vec<Vec<f64>>) = match family {
        InitialFamily::Ball { radius, directions } => (
            *directions,
            (0..*directions).map(|i| vec![radius * (i + 1) as f64 / *directions as f64]).collect(),
        ),
        InitialFamily::Ladder { magnitudes, directions } => (*directions, vec![magnitudes.clone(); *directions]),
    };
    let mut out = Vec::new();
    for m in mags.iter().take(dirs) {
        let f = band_field(model, 4, &mut rng)?;
        let s = f.sup_norm();
        for mag in m {
            out.push((*mag, f.scaled(T::lit(*mag) / s)));
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

/// Zero control followed by `count` random band-limited controls with squared
/// norms `N (k+1)/count`.
pub fn control_family<T: Real>(
    model: &Model<T>,
    params: &SimParams<T>,
    count: usize,
    norm_bound: f64,
    bandwidth: usize,
    seed: u64,
) -> Result<Vec<ControlPath<T>>> {
    let n = params.n_steps()?;
    let d = *model.domain();
    let jm = model.j_modes();
    let bw = bandwidth.min(jm);
    let mut rng = crate::rng::stream(seed, u64::MAX - 1);
    let mut out = vec![ControlPath::zero(d, params.dt, n)];
    let block = (n / 10).max(1);
    for k in 0..count {
        let mut coords = vec![vec![T::zero(); d.components * jm]; n];
        for start in (0..n).step_by(block) {
            let row: Vec<T> = (0..d.components * jm)
                .map(|i| {
                    if i % jm.max(1) < bw {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::lit(z)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            for c in coords.iter_mut().skip(start).take(block) {
                c.clone_from(&row);
            }
        }
        let u = ControlPath::from_coords(&model.basis, jm, params.dt, &coords)?;
        let target = norm_bound * (k + 1) as f64 / count as f64;
        let s = (T::lit(target) / u.norm_sq()).sqrt();
        let scaled = u.scaled(s);
        out.push(ControlPath::new(params.dt, scaled.frames().to_vec(), T::lit(norm_bound))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub eps: f64,
    pub x_index: usize,
    pub x_norm: f64,
    pub u_index: usize,
    pub u_norm_sq: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub n: usize,
    pub flagged_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMax {
    pub eps: f64,
    /// Sup norm of the initial data this maximum ranges over; `None` for the whole family.
    pub x_norm: Option<f64>,
    pub p_hat: f64,
    pub stderr: f64,
    pub x_index: usize,
    pub u_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub regime: Regime,
    pub cells: Vec<SweepCell>,
    /// Max cell per epsilon over the whole family.
    pub max_cells: Vec<SweepMax>,
    /// Max cell per (epsilon, initial-data magnitude).
    pub max_by_magnitude: Vec<SweepMax>,
}

impl SweepReport {
    /// Max cells are nonincreasing along the ladder within `k` joint errors.
    pub fn decreasing(&self, k: f64) -> bool {
        self.max_cells.windows(2).all(|w| w[1].p_hat <= w[0].p_hat + k * (w[0].stderr.hypot(w[1].stderr)))
    }

    /// Whether the max cells at magnitudes `a` and `b` overlap within `k` joint
    /// errors at every epsilon.
    pub fn flat_between(&self, a: f64, b: f64, k: f64) -> Option<bool> {
        let mut eps: Vec<f64> = self.max_by_magnitude.iter().map(|m| m.eps).collect();
        eps.dedup();
        let pick = |e: f64, mag: f64| {
            self.max_by_magnitude.iter().find(|m| m.eps == e && m.x_norm.is_some_and(|x| (x - mag).abs() <= 1e-9 * mag))
        };
        let mut all = true;
        for e in eps {
            let (p, q) = (pick(e, a)?, pick(e, b)?);
            if (p.p_hat - q.p_hat).abs() > k * p.stderr.hypot(q.stderr) {
                all = false;
            }
        }
        Some(all)
    }
}

fn best(cells: &[&SweepCell], x_norm: Option<f64>) -> Option<SweepMax> {
    cells
        .iter()
        .max_by(|a, b| a.p_hat.partial_cmp(&b.p_hat).unwrap_or(std::cmp::Ordering::Equal))
        .map(|c| SweepMax {
            eps: c.eps,
            x_norm,
            p_hat: c.p_hat,
            stderr: c.stderr,
            x_index: c.x_index,
            u_index: c.u_index,
        })
}

/// `sup_{x, u} P(|X^{eps,u}_x - X^{0,u}_x|_{E_T} > delta)` over sampled families.
pub fn uniformity_sweep<T: Real>(model: &Model<T>, config: &SweepConfig, base: &SimParams<T>) -> Result<SweepReport> {
    config.validate(model)?;
    let xs = initial_family(model, &config.family, base.seed)?;
    let us = control_family(model, base, config.controls, config.norm_bound, config.bandwidth, base.seed)?;
    let skeletons: Vec<Vec<PathField<T>>> = xs
        .par_iter()
        .map(|(_, x)| us.iter().map(|u| skeleton(model, x, Some(u), base)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let n_x = xs.len();
    let n_u = us.len();
    let mut jobs = Vec::new();
    for (ei, eps) in config.eps_ladder.iter().enumerate() {
        for xi in 0..n_x {
            for ui in 0..n_u {
                jobs.push((ei, *eps, xi, ui));
            }
        }
    }
    let delta = T::lit(config.delta);
    let cells = jobs
        .par_iter()
        .map(|&(ei, eps, xi, ui)| -> Result<SweepCell> {
            let p = base.with_eps(T::lit(eps));
            let cell_id = ((ei * n_x + xi) * n_u + ui) as u64;
            let (hits, flagged) = if eps == 0.0 {
                (0, 0)
            } else {
                let ev = Event::tube(skeletons[xi][ui].clone(), delta).complement();
                let coords = us[ui].coords(&model.basis, model.j_modes())?;
                let mut hits = 0;
                let mut flagged = 0;
                for r in 0..config.n_samples as u64 {
                    let s = run_sample(model, &xs[xi].1, &ev, Some(&coords), &p, (cell_id << 32) | r)?;
                    hits += s.hit as usize;
                    flagged += s.flagged as usize;
                }
                (hits, flagged)
            };
            let est = Estimate::frequency("p_hat", hits, config.n_samples, flagged);
            Ok(SweepCell {
                eps,
                x_index: xi,
                x_norm: xs[xi].0,
                u_index: ui,
                u_norm_sq: us[ui].norm_sq().as_f64(),
                p_hat: est.value,
                stderr: est.stderr,
                n: est.n,
                flagged_fraction: est.flagged_fraction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_flagged: f64 = cells.iter().map(|c| c.flagged_fraction * c.n as f64).sum();
    check_flagged(total_flagged.round() as usize, cells.iter().map(|c| c.n).sum(), "uniformity sweep")?;
    let mut max_cells = Vec::new();
    let mut max_by_magnitude = Vec::new();
    let mut mags: Vec<f64> = xs.iter().map(|x| x.0).collect();
    mags.dedup();
    for eps in &config.eps_ladder {
        let row: Vec<&SweepCell> = cells.iter().filter(|c| c.eps == *eps).collect();
        max_cells.extend(best(&row, None));
        for m in &mags {
            let sub: Vec<&SweepCell> = row.iter().copied().filter(|c| c.x_norm == *m).collect();
            max_by_magnitude.extend(best(&sub, Some(*m)));
        }
    }
    Ok(SweepReport {
        regime: config.regime,
        cells,
        max_cells,
        max_by_magnitude,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitConfig {
    /// `D` is the open sup-norm ball of this radius around 0.
    pub radius: f64,
    pub t_max: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitEstimate {
    /// Median exit time, counting censored samples as `+inf`; `None` if at least half are censored.
    pub median: Option<f64>,
    pub censored_fraction: f64,
    pub n: usize,
    pub flagged_fraction: f64,
    pub times: Vec<Option<f64>>,
}

/// First frame time with `|X^eps_x(t)|_E >= radius`, censored at `t_max`.
pub fn exit_time_sample<T: Real>(
    model: &Model<T>,
    x: &Field<T>,
    config: &ExitConfig,
    dt: T,
    seed: u64,
    n_samples: usize,
) -> Result<ExitEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("at least one sample is required".into()));
    }
    let params = SimParams::new(T::lit(config.eps), T::lit(config.t_max), dt, seed);
    params.n_steps()?;
    let radius = T::lit(config.radius);
    let samples = (0..n_samples as u64)
        .into_par_iter()
        .map(|r| -> Result<(Option<f64>, bool)> {
            let mut tau = None;
            let out = simulate_streaming(model, x, None, &params, r, &mut |_, t, v| {
                if crate::domain::sup_abs(v) >= radius {
                    tau = Some(t.as_f64());
                    false
                } else {
                    true
                }
            })?;
            Ok(if out.flagged { (None, true) } else { (tau, false) })
        })
        .collect::<Result<Vec<_>>>()?;
    let flagged = samples.iter().filter(|s| s.1).count();
    check_flagged(flagged, n_samples, "exit times")?;
    let times: Vec<Option<f64>> = samples.iter().map(|s| s.0).collect();
    let mut sorted: Vec<f64> = times.iter().map(|t| t.unwrap_or(f64::INFINITY)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let med = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let censored = times.iter().filter(|t| t.is_none()).count();
    Ok(ExitEstimate {
        median: med.is_finite().then_some(med),
        censored_fraction: censored as f64 / n as f64,
        n,
        flagged_fraction: flagged as f64 / n as f64,
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{DiffusionSpec, DriftSpec, NoiseSpec};
    use crate::domain::{build_basis, DomainSpec, OperatorSpec};
    use std::f64::consts::PI;

    fn lq(n: usize) -> Model<f64> {
        let d = DomainSpec::new(PI, n, n, 1).unwrap();
        let b = build_basis(&d, &OperatorSpec::uniform(1, 1.0).unwrap()).unwrap();
        Model::new(b, DriftSpec::zero(1), DiffusionSpec::constant(1, 1.0), NoiseSpec::white(0.5)).unwrap()
    }

    #[test]
    fn trivial_events() {
        let m = lq(16);
        let d = *m.domain();
        let p = SimParams::new(0.1, 0.1, 0.01, 3);
        let x = Field::zeros(d);
        let center = PathField::zeros(d, 0.01, 10).unwrap();
        let all = mc_event_probability(&m, &x, &Event::tube(center.clone(), 1e6), &p, 50).unwrap();
        assert_eq!(all.value, 1.0);
        assert_eq!(all.eps_log, Some(0.0));
        let none = mc_event_probability(&m, &x, &Event::tube(center.clone(), 0.0), &p, 50).unwrap();
        assert_eq!(none.value, 0.0);
        let comp = mc_event_probability(&m, &x, &Event::tube(center, 0.0).complement(), &p, 50).unwrap();
        assert_eq!(comp.value, 1.0);
    }

    #[test]
    fn zero_tilt_reduces_to_plain() {
        let m = lq(16);
        let d = *m.domain();
        let p = SimParams::new(0.2, 0.1, 0.01, 8);
        let center = PathField::zeros(d, 0.01, 10).unwrap();
        let ev = Event::tube(center, 0.3);
        let plain = mc_event_probability(&m, &Field::zeros(d), &ev, &p, 200).unwrap();
        let u = ControlPath::zero(d, 0.01, 10);
        let is = is_probability(&m, &Field::zeros(d), &ev, &p, &u, 200).unwrap();
        assert!(plain.value > 0.0 && plain.value < 1.0, "{}", plain.value);
        assert!((is.estimate.value - plain.value).abs() < 1e-12);
        assert!((is.estimate.stderr - plain.stderr).abs() < 1e-12);
    }

    #[test]
    fn exit_trivial_cases() {
        let m = lq(16);
        let d = *m.domain();
        let big = Field::from_fn(d, |_, xi| 5.0 * xi.sin()).unwrap();
        let c = ExitConfig {
            radius: 1.0,
            t_max: 0.5,
            eps: 0.1,
        };
        let e = exit_time_sample(&m, &big, &c, 0.01, 0, 10).unwrap();
        assert_eq!(e.median, Some(0.0));
        let quiet = ExitConfig { eps: 0.0, ..c };
        let x = Field::from_fn(d, |_, xi| 0.5 * xi.sin()).unwrap();
        let e = exit_time_sample(&m, &x, &quiet, 0.01, 0, 10).unwrap();
        assert_eq!(e.censored_fraction, 1.0);
        assert_eq!(e.median, None);
    }

    #[test]
    fn ladder_must_decrease() {
        assert!(check_ladder(&[0.2, 0.1, 0.1]).is_err());
        assert!(check_ladder(&[0.2, 0.1, 0.0]).is_ok());
    }

    #[test]
    fn zero_eps_sweep_is_zero() {
        let m = lq(16);
        let p = SimParams::new(0.0, 0.1, 0.01, 1);
        let cfg = SweepConfig {
            regime: Regime::BoundedSet,
            family: InitialFamily::Ball { radius: 10.0, directions: 2 },
            controls: 2,
            norm_bound: 4.0,
            delta: 0.1,
            eps_ladder: vec![0.0],
            n_samples: 5,
            bandwidth: 3,
        };
        let r = uniformity_sweep(&m, &cfg, &p).unwrap();
        assert_eq!(r.cells.len(), 2 * 3);
        assert!(r.cells.iter().all(|c| c.p_hat == 0.0));
        assert!(r.cells.iter().all(|c| c.u_norm_sq <= 4.0 + 1e-9));
    }

    #[test]
    fn controls_respect_bound() {
        let m = lq(16);
        let p = SimParams::new(0.0, 0.1, 0.01, 1);
        let us = control_family(&m, &p, 4, 4.0, 3, 9).unwrap();
        assert_eq!(us.len(), 5);
        assert_eq!(us[0].norm_sq(), 0.0);
        assert!((us[4].norm_sq() - 4.0).abs() < 1e-9);
    }
}
