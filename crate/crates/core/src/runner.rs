//! Executes a scenario's experiment and writes its artifacts.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::domain::{Field, PathField, Spectral};
use crate::dynamics::{coords_norm_sq, simulate, skeleton_coords, ControlPath, Model, SimParams};
use crate::error::{Error, Result};
use crate::lab::{
    exit_time_sample, is_probability, ldp_curve, mc_event_probability, uniformity_sweep, Event, ExitConfig,
};
use crate::rate::{instanton_minimize, rate_evaluate, InstantonProblem, PenaltySchedule, RateResult};
use crate::report::{self, fmt_f, fmt_opt, Summary};
use crate::scenario::{
    ControlConfig, EventConfig, Experiment, FieldConfig, OptimizerConfig, PathConfig, ScenarioConfig, TargetConfig,
    TiltConfig, TubeConfig,
};

/// Resolved model, run parameters and initial datum of a scenario.
pub struct Prepared {
    pub model: Model<f64>,
    pub params: SimParams<f64>,
    pub x: Field<f64>,
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared> {
    let model = cfg.model()?;
    let params = cfg.sim_params();
    params.n_steps()?;
    let zero = Field::zeros(*model.domain());
    let x = resolve_field(&model, &params, &zero, &cfg.initial)?;
    Ok(Prepared { model, params, x })
}

fn mode_field(model: &Model<f64>, component: usize, mode: usize, amplitude: f64) -> Result<Field<f64>> {
    let d = *model.domain();
    if component >= d.components || mode >= d.n_modes {
        return Err(Error::InvalidParameter(format!("mode ({component}, {mode}) not represented")));
    }
    let mut s = Spectral::unit(d.components, d.n_modes, component, mode);
    s.values[component * d.n_modes + mode] = amplitude;
    model.basis.to_grid(&s)
}

pub fn resolve_field(model: &Model<f64>, params: &SimParams<f64>, x: &Field<f64>, cfg: &FieldConfig) -> Result<Field<f64>> {
    match cfg {
        FieldConfig::Zero => Ok(Field::zeros(*model.domain())),
        FieldConfig::Mode { component, mode, amplitude } => mode_field(model, *component, *mode, *amplitude),
        FieldConfig::SkeletonTerminal { control } => {
            let coords = resolve_control(model, params, control)?;
            Ok(skeleton_coords(model, x, &coords, &skeleton_params(params))?.last().clone())
        }
    }
}

fn skeleton_params(p: &SimParams<f64>) -> SimParams<f64> {
    p.with_eps(0.0)
}

/// Brownian coordinates, `n_steps` rows of `components * J`.
pub fn resolve_control(model: &Model<f64>, params: &SimParams<f64>, cfg: &ControlConfig) -> Result<Vec<Vec<f64>>> {
    let n = params.n_steps()?;
    let width = model.domain().components * model.j_modes();
    let jm = model.j_modes();
    let mut coords = vec![vec![0.0; width]; n];
    match cfg {
        ControlConfig::Zero => {}
        ControlConfig::ConstantMode { component, mode, value } => {
            if *component >= model.domain().components || *mode >= jm {
                return Err(Error::InvalidParameter(format!("noise mode ({component}, {mode}) not driven")));
            }
            for row in &mut coords {
                row[component * jm + mode] = *value;
            }
        }
        ControlConfig::Random { modes, norm_sq, seed } => {
            if !(*norm_sq >= 0.0) || *modes == 0 {
                return Err(Error::InvalidParameter("random control needs modes > 0 and norm_sq >= 0".into()));
            }
            let mut rng = crate::rng::stream(*seed, u64::MAX - 2);
            for row in &mut coords {
                for c in 0..model.domain().components {
                    for k in 0..(*modes).min(jm) {
                        row[c * jm + k] = StandardNormal.sample(&mut rng);
                    }
                }
            }
            let cur = coords_norm_sq(params.dt, &coords);
            let s = if cur > 0.0 { (norm_sq / cur).sqrt() } else { 0.0 };
            coords.iter_mut().flatten().for_each(|v| *v *= s);
        }
    }
    Ok(coords)
}

pub fn resolve_path(model: &Model<f64>, params: &SimParams<f64>, x: &Field<f64>, cfg: &PathConfig) -> Result<PathField<f64>> {
    let sk = skeleton_params(params);
    let free = || {
        let n = params.n_steps()?;
        skeleton_coords(model, x, &vec![vec![0.0; model.domain().components * model.j_modes()]; n], &sk)
    };
    match cfg {
        PathConfig::Skeleton { control } => skeleton_coords(model, x, &resolve_control(model, params, control)?, &sk),
        PathConfig::ModeProfile { component, mode, amplitude } => {
            let free = free()?;
            let e = mode_field(model, *component, *mode, *amplitude)?;
            let alpha = model.basis.eigenvalue(*component, *mode);
            let t_end = params.horizon;
            let shape = |t: f64| {
                if alpha * t_end < 1e-12 {
                    t / t_end
                } else {
                    (alpha * t).sinh() / (alpha * t_end).sinh()
                }
            };
            let frames = free
                .frames()
                .iter()
                .enumerate()
                .map(|(m, f)| f.add(&e.scaled(shape(free.time(m)))))
                .collect::<Result<Vec<_>>>()?;
            PathField::new(params.dt, frames)
        }
        PathConfig::PointProfile { component, xi_index, amplitude } => {
            let d = *model.domain();
            if *component >= d.components || *xi_index >= d.n_grid {
                return Err(Error::InvalidParameter(format!("grid point ({component}, {xi_index}) not represented")));
            }
            let free = free()?;
            let jm = model.j_modes().min(d.n_modes);
            let xi = d.xi(*xi_index);
            let t_end = params.horizon;
            // mode k of the response to a unit impulse at (T, xi):
            // lambda_k^2 e_k(xi) exp(-alpha T) sinh(alpha t) / alpha
            let weight: Vec<f64> = (0..jm)
                .map(|k| {
                    let l = model.lambda()[component * model.j_modes() + k];
                    l * l * model.basis.eigenfunction_at(k, xi)
                })
                .collect();
            let coeff = |k: usize, t: f64| {
                let a = model.basis.eigenvalue(*component, k);
                let g = if a * t_end < 1e-12 {
                    t
                } else {
                    ((-a * (t_end - t)).exp() - (-a * (t_end + t)).exp()) / (2.0 * a)
                };
                weight[k] * g
            };
            let peak: f64 = (0..jm).map(|k| coeff(k, t_end) * model.basis.eigenfunction_at(k, xi)).sum();
            if !(peak > 0.0) {
                return Err(Error::InvalidParameter("point profile has no response at its peak".into()));
            }
            let frames = free
                .frames()
                .iter()
                .enumerate()
                .map(|(m, f)| {
                    let t = free.time(m);
                    let mut s = Spectral::zeros(d.components, d.n_modes);
                    for k in 0..jm {
                        s.values[component * d.n_modes + k] = amplitude * coeff(k, t) / peak;
                    }
                    f.add(&model.basis.to_grid(&s)?)
                })
                .collect::<Result<Vec<_>>>()?;
            PathField::new(params.dt, frames)
        }
    }
}

fn tube_delta(phi: &PathField<f64>, delta: Option<f64>, fraction: f64) -> Result<f64> {
    let d = delta.unwrap_or(fraction * phi.sup_norm());
    if !(d > 0.0) {
        return Err(Error::InvalidParameter("tube radius must be positive".into()));
    }
    Ok(d)
}

fn resolve_tube(p: &Prepared, t: &TubeConfig) -> Result<(PathField<f64>, f64)> {
    let phi = resolve_path(&p.model, &p.params, &p.x, &t.path)?;
    let delta = tube_delta(&phi, t.delta, t.delta_fraction)?;
    Ok((phi, delta))
}

pub fn resolve_event(p: &Prepared, cfg: &EventConfig) -> Result<Event<f64>> {
    match cfg {
        EventConfig::Tube {
            path,
            delta,
            delta_fraction,
            complement,
        } => {
            let phi = resolve_path(&p.model, &p.params, &p.x, path)?;
            let d = tube_delta(&phi, *delta, *delta_fraction)?;
            let e = Event::tube(phi, d);
            Ok(if *complement { e.complement() } else { e })
        }
        EventConfig::ModeAbove { component, mode, threshold } => Ok(Event::ModeAbove {
            component: *component,
            mode: *mode,
            threshold: *threshold,
        }),
    }
}

fn apply_optimizer(problem: &mut InstantonProblem<f64>, opt: &OptimizerConfig, seed: u64) {
    problem.tol = opt.tol;
    problem.max_iter = opt.max_iter;
    problem.restarts = opt.restarts.max(1);
    problem.penalty = PenaltySchedule {
        initial: opt.penalty_initial,
        max_doublings: opt.max_doublings,
        ..PenaltySchedule::default()
    };
    problem.seed = seed;
}

fn resolve_target(p: &Prepared, cfg: &TargetConfig) -> Result<InstantonProblem<f64>> {
    Ok(match cfg {
        TargetConfig::Terminal { field } => {
            let y = resolve_field(&p.model, &p.params, &p.x, field)?;
            InstantonProblem::terminal(p.x.clone(), y, p.params.horizon, p.params.dt)
        }
        TargetConfig::Tube(t) => {
            let (phi, delta) = resolve_tube(p, t)?;
            InstantonProblem::tube(p.x.clone(), phi, delta)
        }
    })
}

fn rate_json(r: &RateResult<f64>) -> Value {
    json!({
        "value": r.value,
        "residual": r.residual,
        "method": r.method,
        "iterations": r.iterations,
        "upper_bound": r.upper_bound,
        "converged": r.converged,
        "penalty": r.penalty,
        "control_norm_sq": r.control.norm_sq(),
    })
}

/// Tilt for an importance-sampled event.
fn resolve_tilt(p: &Prepared, event: &Event<f64>, tilt: &TiltConfig, opt: &OptimizerConfig, seed: u64) -> Result<(ControlPath<f64>, Value)> {
    match tilt {
        TiltConfig::Control { control } => {
            let coords = resolve_control(&p.model, &p.params, control)?;
            let u = ControlPath::from_coords(&p.model.basis, p.model.j_modes(), p.params.dt, &coords)?;
            let n = u.norm_sq();
            Ok((u, json!({ "kind": "control", "norm_sq": n })))
        }
        TiltConfig::Instanton => {
            let mut problem = match event {
                Event::Tube { center, delta } => InstantonProblem::tube(p.x.clone(), center.clone(), *delta),
                Event::ModeAbove { component, mode, threshold } => {
                    let y = mode_field(&p.model, *component, *mode, *threshold)?;
                    InstantonProblem::terminal(p.x.clone(), y, p.params.horizon, p.params.dt)
                }
                Event::Complement(_) => {
                    return Err(Error::InvalidParameter("instanton tilt is not defined for a complement event".into()))
                }
            };
            apply_optimizer(&mut problem, opt, seed);
            let r = instanton_minimize(&p.model, &problem)?;
            let info = json!({ "kind": "instanton", "rate": rate_json(&r) });
            Ok((r.control, info))
        }
    }
}

/// `min(I(phi), tube instanton)` with the instanton kept for tilting.
fn tube_ball_rate(
    p: &Prepared,
    phi: &PathField<f64>,
    delta: f64,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(f64, Option<RateResult<f64>>)> {
    let mut problem = InstantonProblem::tube(p.x.clone(), phi.clone(), delta);
    apply_optimizer(&mut problem, opt, seed);
    let inst = instanton_minimize(&p.model, &problem).ok();
    let exact = rate_evaluate(&p.model, &p.x, phi).ok().map(|r| r.value);
    let ib = match (exact, &inst) {
        (Some(a), Some(b)) => a.min(b.value),
        (Some(a), None) => a,
        (None, Some(b)) => b.value,
        (None, None) => return Err(Error::Convergence("neither recovery nor the tube instanton produced a rate".into())),
    };
    Ok((ib, inst))
}

/// What [`run`] wrote.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub results: Value,
}

/// Runs the scenario's experiment into `out_dir`, which is created if missing.
pub fn run(cfg: &ScenarioConfig, out_dir: &Path) -> Result<RunOutput> {
    std::fs::create_dir_all(out_dir)?;
    let mut artifacts = Vec::new();
    let mut artifact = |name: &str| {
        let p = out_dir.join(name);
        artifacts.push(p.clone());
        p
    };

    let results = if let Experiment::Validate = cfg.experiment {
        let report = cfg.validate()?;
        json!({ "passed": report.passed(), "summary": report.summary(), "report": report })
    } else {
        let report = cfg.validate()?;
        if !report.passed() {
            return Err(Error::Validation(report.summary()));
        }
        let p = prepare(cfg)?;
        run_experiment(cfg, &p, &mut artifact)?
    };

    let summary = Summary {
        experiment: cfg.experiment.name().into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        config_hash: cfg.content_hash(),
        seed: cfg.seed,
        results: results.clone(),
    };
    let summary_path = out_dir.join("summary.json");
    report::write_summary(&summary_path, &summary)?;
    Ok(RunOutput {
        summary: summary_path,
        artifacts,
        results,
    })
}

fn run_experiment(cfg: &ScenarioConfig, p: &Prepared, artifact: &mut dyn FnMut(&str) -> PathBuf) -> Result<Value> {
    let (model, params) = (&p.model, &p.params);
    Ok(match &cfg.experiment {
        Experiment::Validate => unreachable!("handled by run"),
        Experiment::Simulate { replicates } => {
            let runs = (0..*replicates as u64)
                .map(|r| simulate(model, &p.x, params, r).map(|t| (r, t)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<(u64, &PathField<f64>)> = runs.iter().map(|(r, t)| (*r, &t.path)).collect();
            report::write_trajectories(&artifact("trajectory.csv"), &refs)?;
            let flagged = runs.iter().filter(|(_, t)| t.flagged).count();
            json!({
                "replicates": replicates,
                "flagged": flagged,
                "sup_norm": runs.iter().map(|(_, t)| t.path.sup_norm()).collect::<Vec<_>>(),
            })
        }
        Experiment::Skeleton { control } => {
            let coords = resolve_control(model, params, control)?;
            let path = skeleton_coords(model, &p.x, &coords, &skeleton_params(params))?;
            report::write_trajectories(&artifact("trajectory.csv"), &[(0, &path)])?;
            json!({ "control_norm_sq": coords_norm_sq(params.dt, &coords), "sup_norm": path.sup_norm() })
        }
        Experiment::Rate { path } => {
            let phi = resolve_path(model, params, &p.x, path)?;
            let r = rate_evaluate(model, &p.x, &phi)?;
            report::write_coords(&artifact("control.csv"), params.dt, &r.coords)?;
            rate_json(&r)
        }
        Experiment::Instanton { target, optimizer } => {
            let mut problem = resolve_target(p, target)?;
            apply_optimizer(&mut problem, optimizer, cfg.seed);
            let r = instanton_minimize(model, &problem)?;
            report::write_coords(&artifact("control.csv"), params.dt, &r.coords)?;
            let path = skeleton_coords(model, &p.x, &r.coords, &skeleton_params(params))?;
            report::write_trajectories(&artifact("trajectory.csv"), &[(0, &path)])?;
            rate_json(&r)
        }
        Experiment::Mc { event, n_samples } => {
            let ev = resolve_event(p, event)?;
            let e = mc_event_probability(model, &p.x, &ev, params, *n_samples)?;
            report::write_estimates(&artifact("estimates.csv"), std::slice::from_ref(&e))?;
            json!({ "estimate": e })
        }
        Experiment::Is {
            event,
            n_samples,
            tilt,
            optimizer,
        } => {
            let ev = resolve_event(p, event)?;
            let (u, info) = resolve_tilt(p, &ev, tilt, optimizer, cfg.seed)?;
            let e = is_probability(model, &p.x, &ev, params, &u, *n_samples)?;
            report::write_estimates(&artifact("estimates.csv"), std::slice::from_ref(&e.estimate))?;
            json!({ "estimate": e, "tilt": info })
        }
        Experiment::LdpCurve {
            tube,
            eps_ladder,
            n_samples,
            importance,
            optimizer,
        } => {
            let (phi, delta) = resolve_tube(p, tube)?;
            let (i_ball, inst) = tube_ball_rate(p, &phi, delta, optimizer, cfg.seed)?;
            let tilt = if *importance { inst.as_ref().map(|r| &r.control) } else { None };
            let rows = ldp_curve(model, &p.x, &phi, delta, eps_ladder, params, *n_samples, tilt, i_ball)?;
            report::write_table(
                &artifact("curve.csv"),
                &["eps", "p_hat", "stderr", "n", "flagged_frac", "ess", "eps_log_p", "minus_i_ball", "gap", "zero_hits"],
                rows.iter().map(|r| {
                    vec![
                        fmt_f(r.eps),
                        fmt_f(r.p_hat),
                        fmt_f(r.stderr),
                        r.n.to_string(),
                        fmt_f(r.flagged_fraction),
                        fmt_opt(r.ess),
                        fmt_opt(r.eps_log_p),
                        fmt_f(r.minus_i_ball),
                        fmt_opt(r.gap),
                        r.zero_hits.to_string(),
                    ]
                }),
            )?;
            json!({ "delta": delta, "i_ball": i_ball, "tilted": tilt.is_some(), "rows": rows })
        }
        Experiment::Sweep(sweep) => {
            let rep = uniformity_sweep(model, sweep, params)?;
            report::write_table(
                &artifact("sweep.csv"),
                &["eps", "x_index", "x_norm", "u_index", "u_norm_sq", "p_hat", "stderr", "n", "flagged_frac"],
                rep.cells.iter().map(|c| {
                    vec![
                        fmt_f(c.eps),
                        c.x_index.to_string(),
                        fmt_f(c.x_norm),
                        c.u_index.to_string(),
                        fmt_f(c.u_norm_sq),
                        fmt_f(c.p_hat),
                        fmt_f(c.stderr),
                        c.n.to_string(),
                        fmt_f(c.flagged_fraction),
                    ]
                }),
            )?;
            report::write_table(
                &artifact("sweep_max.csv"),
                &["eps", "x_norm", "p_hat", "stderr", "x_index", "u_index"],
                rep.max_cells.iter().chain(rep.max_by_magnitude.iter()).map(|m| {
                    vec![
                        fmt_f(m.eps),
                        fmt_opt(m.x_norm),
                        fmt_f(m.p_hat),
                        fmt_f(m.stderr),
                        m.x_index.to_string(),
                        m.u_index.to_string(),
                    ]
                }),
            )?;
            json!({ "report": rep, "decreasing": rep.decreasing(2.0) })
        }
        Experiment::Exit { radius, t_max, n_samples } => {
            let ec = ExitConfig {
                radius: *radius,
                t_max: *t_max,
                eps: params.eps,
            };
            let e = exit_time_sample(model, &p.x, &ec, params.dt, cfg.seed, *n_samples)?;
            report::write_table(
                &artifact("exit.csv"),
                &["replicate", "tau", "censored"],
                e.times
                    .iter()
                    .enumerate()
                    .map(|(i, t)| vec![i.to_string(), fmt_opt(*t), t.is_none().to_string()]),
            )?;
            json!({
                "median": e.median,
                "censored_fraction": e.censored_fraction,
                "n": e.n,
                "flagged_fraction": e.flagged_fraction,
                "eps_log_median": e.median.map(|m| params.eps * m.ln()),
            })
        }
    })
}
