//! Scenario files: JSON schema, shipped presets, validation and content hash.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::coefficients::{
    validate_diffusion, validate_drift, validate_growth_compatibility, validate_noise, DiffusionSpec, DriftSpec, NoiseSpec,
    SamplePlan, SuperDissipativity, ValidationReport,
};
use crate::domain::{build_basis, DomainSpec, OperatorSpec};
use crate::dynamics::{Model, SimParams};
use crate::error::{Error, Result};
use crate::lab::SweepConfig;

/// Shipped presets, addressable through `"preset": "<name>"`.
pub const PRESETS: &[(&str, &str)] = &[
    ("section5_m3_nu04", include_str!("../../../presets/section5_m3_nu04.json")),
    ("linear_additive", include_str!("../../../presets/linear_additive.json")),
    ("allen_cahn", include_str!("../../../presets/allen_cahn.json")),
    ("bounded_sigma", include_str!("../../../presets/bounded_sigma.json")),
    ("bounded_set_sweep", include_str!("../../../presets/bounded_set_sweep.json")),
    ("super_dissipative_sweep", include_str!("../../../presets/super_dissipative_sweep.json")),
    ("ou_exit", include_str!("../../../presets/ou_exit.json")),
];

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub length: f64,
    pub n_grid: usize,
    #[serde(default)]
    pub n_modes: Option<usize>,
    #[serde(default = "one")]
    pub components: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    /// Per-component diffusivity; defaults to `kappa` for every component.
    #[serde(default)]
    pub diffusivity: Option<Vec<f64>>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub ellipticity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleConfig {
    pub m: f64,
    pub mu: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    Zero,
    Linear { rate: f64 },
    /// `g = -mu |v|^m sign(v)`.
    PowerDissipative {
        m: f64,
        #[serde(default = "unit")]
        mu: f64,
    },
    /// `g = -v^3`, `h = v`.
    AllenCahnLike,
    /// `g = sum_k coefficients[k] v^k`, `h = rate x`.
    Polynomial {
        coefficients: Vec<f64>,
        #[serde(default)]
        rate: f64,
        #[serde(default)]
        super_dissipativity: Option<TripleConfig>,
    },
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionConfig {
    Constant { value: f64 },
    /// `(1 + |x|)^exponent` declared with growth exponent `nu`.
    PowerGrowth {
        nu: f64,
        #[serde(default)]
        exponent: Option<f64>,
    },
    /// `a + b sin(x)`.
    BoundedMultiplicative { a: f64, b: f64 },
}

/// Named coefficient families; explicit `drift`/`diffusion` blocks take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientPreset {
    LinearAdditive,
    AllenCahnLike {
        #[serde(default)]
        nu: Option<f64>,
    },
    PowerDissipative { m: f64, nu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub eps: f64,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "two")]
    pub p: u32,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

fn two() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    #[default]
    Zero,
    /// `amplitude * e_mode` in one component.
    Mode {
        #[serde(default)]
        component: usize,
        mode: usize,
        amplitude: f64,
    },
    /// Terminal value of the skeleton driven by `control`.
    SkeletonTerminal { control: ControlConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlConfig {
    #[default]
    Zero,
    /// Constant Brownian coordinate `value` on one mode.
    ConstantMode {
        #[serde(default)]
        component: usize,
        mode: usize,
        value: f64,
    },
    /// Band-limited random control with squared norm `norm_sq`.
    Random { modes: usize, norm_sq: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathConfig {
    /// Skeleton `X^{0,u}_x`.
    Skeleton {
        #[serde(default)]
        control: ControlConfig,
    },
    /// Free path plus `amplitude sinh(alpha t)/sinh(alpha T) e_mode`: the
    /// minimum-energy steering profile of a linear mode.
    ModeProfile {
        #[serde(default)]
        component: usize,
        mode: usize,
        amplitude: f64,
    },
    /// Free path plus the minimum-energy linear response that lifts the
    /// value at `(T, xi_index)` by `amplitude`. Its peak is that point.
    PointProfile {
        #[serde(default)]
        component: usize,
        xi_index: usize,
        amplitude: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeConfig {
    pub path: PathConfig,
    /// Absolute radius; otherwise `delta_fraction * |phi|_{E_T}`.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "quarter")]
    pub delta_fraction: f64,
}

fn quarter() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventConfig {
    Tube {
        path: PathConfig,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default = "quarter")]
        delta_fraction: f64,
        #[serde(default)]
        complement: bool,
    },
    ModeAbove {
        #[serde(default)]
        component: usize,
        mode: usize,
        threshold: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    Terminal { field: FieldConfig },
    Tube(TubeConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TiltConfig {
    /// Tube instanton around the event's center.
    #[default]
    Instanton,
    Control { control: ControlConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_iters")]
    pub max_iter: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "unit")]
    pub penalty_initial: f64,
    #[serde(default = "default_doublings")]
    pub max_doublings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_iters(),
            restarts: default_restarts(),
            penalty_initial: 1.0,
            max_doublings: default_doublings(),
        }
    }
}

fn default_tol() -> f64 {
    1e-4
}
fn default_iters() -> usize {
    200
}
fn default_restarts() -> usize {
    1
}
fn default_doublings() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    Validate,
    Simulate {
        #[serde(default = "one")]
        replicates: usize,
    },
    Skeleton {
        #[serde(default)]
        control: ControlConfig,
    },
    Rate { path: PathConfig },
    Instanton {
        target: TargetConfig,
        #[serde(default)]
        optimizer: OptimizerConfig,
    },
    Mc { event: EventConfig, n_samples: usize },
    Is {
        event: EventConfig,
        n_samples: usize,
        #[serde(default)]
        tilt: TiltConfig,
        #[serde(default)]
        optimizer: OptimizerConfig,
    },
    LdpCurve {
        tube: TubeConfig,
        eps_ladder: Vec<f64>,
        n_samples: usize,
        #[serde(default = "yes")]
        importance: bool,
        #[serde(default)]
        optimizer: OptimizerConfig,
    },
    Sweep(SweepConfig),
    Exit { radius: f64, t_max: f64, n_samples: usize },
}

fn yes() -> bool {
    true
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Validate => "validate",
            Experiment::Simulate { .. } => "simulate",
            Experiment::Skeleton { .. } => "skeleton",
            Experiment::Rate { .. } => "rate",
            Experiment::Instanton { .. } => "instanton",
            Experiment::Mc { .. } => "mc",
            Experiment::Is { .. } => "is",
            Experiment::LdpCurve { .. } => "ldp-curve",
            Experiment::Sweep(_) => "sweep",
            Experiment::Exit { .. } => "exit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub domain: DomainConfig,
    #[serde(default)]
    pub operator: OperatorConfig,
    #[serde(default)]
    pub coefficients: Option<CoefficientPreset>,
    #[serde(default)]
    pub drift: Option<DriftConfig>,
    #[serde(default)]
    pub diffusion: Option<DiffusionConfig>,
    pub noise: NoiseSpec,
    pub sim: SimConfig,
    #[serde(default)]
    pub initial: FieldConfig,
    pub experiment: Experiment,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn domain_spec(&self) -> Result<DomainSpec<f64>> {
        let d = &self.domain;
        DomainSpec::new(d.length, d.n_grid, d.n_modes.unwrap_or(d.n_grid), d.components)
    }

    pub fn operator_spec(&self) -> Result<OperatorSpec<f64>> {
        let r = self.domain.components;
        let o = &self.operator;
        let diff = match (&o.diffusivity, o.kappa) {
            (Some(v), _) => v.clone(),
            (None, k) => vec![k.unwrap_or(1.0); r],
        };
        let ell = o.ellipticity.unwrap_or_else(|| diff.iter().cloned().fold(f64::INFINITY, f64::min));
        OperatorSpec::new(diff, ell)
    }

    fn drift_config(&self) -> Result<DriftConfig> {
        if let Some(d) = &self.drift {
            return Ok(d.clone());
        }
        match &self.coefficients {
            Some(CoefficientPreset::LinearAdditive) => Ok(DriftConfig::Zero),
            Some(CoefficientPreset::AllenCahnLike { .. }) => Ok(DriftConfig::AllenCahnLike),
            Some(CoefficientPreset::PowerDissipative { m, .. }) => Ok(DriftConfig::PowerDissipative { m: *m, mu: 1.0 }),
            None => Err(Error::Schema("scenario needs a drift block or a coefficients preset".into())),
        }
    }

    fn diffusion_config(&self) -> Result<DiffusionConfig> {
        if let Some(d) = &self.diffusion {
            return Ok(d.clone());
        }
        match &self.coefficients {
            Some(CoefficientPreset::LinearAdditive) => Ok(DiffusionConfig::Constant { value: 1.0 }),
            Some(CoefficientPreset::AllenCahnLike { nu: None }) => Ok(DiffusionConfig::Constant { value: 1.0 }),
            Some(CoefficientPreset::AllenCahnLike { nu: Some(nu) }) | Some(CoefficientPreset::PowerDissipative { nu, .. }) => {
                Ok(DiffusionConfig::PowerGrowth { nu: *nu, exponent: None })
            }
            None => Err(Error::Schema("scenario needs a diffusion block or a coefficients preset".into())),
        }
    }

    pub fn drift_spec(&self) -> Result<DriftSpec<f64>> {
        let r = self.domain.components;
        Ok(match self.drift_config()? {
            DriftConfig::Zero => DriftSpec::zero(r),
            DriftConfig::Linear { rate } => DriftSpec::linear(r, rate),
            DriftConfig::PowerDissipative { m, mu } => DriftSpec::power_dissipative(r, m, mu)?,
            DriftConfig::AllenCahnLike => DriftSpec::allen_cahn_like(r),
            DriftConfig::Polynomial {
                coefficients,
                rate,
                super_dissipativity,
            } => {
                let mut s = DriftSpec::polynomial(r, coefficients, rate);
                s.super_dissipativity = super_dissipativity.map(|t| SuperDissipativity { m: t.m, mu: t.mu, c0: t.c0 });
                s
            }
        })
    }

    pub fn diffusion_spec(&self) -> Result<DiffusionSpec<f64>> {
        let r = self.domain.components;
        Ok(match self.diffusion_config()? {
            DiffusionConfig::Constant { value } => DiffusionSpec::constant(r, value),
            DiffusionConfig::PowerGrowth { nu, exponent: None } => DiffusionSpec::power_growth(r, nu)?,
            DiffusionConfig::PowerGrowth { nu, exponent: Some(e) } => DiffusionSpec::power_growth_declared(r, e, nu),
            DiffusionConfig::BoundedMultiplicative { a, b } => DiffusionSpec::bounded_multiplicative(r, a, b)?,
        })
    }

    pub fn model(&self) -> Result<Model<f64>> {
        let basis = build_basis(&self.domain_spec()?, &self.operator_spec()?)?;
        Model::new(basis, self.drift_spec()?, self.diffusion_spec()?, self.noise.clone())
    }

    pub fn sim_params(&self) -> SimParams<f64> {
        SimParams {
            eps: self.sim.eps,
            horizon: self.sim.horizon,
            dt: self.sim.dt,
            seed: self.seed,
            p: self.sim.p,
            alpha: self.sim.alpha,
            gamma: self.sim.gamma,
        }
    }

    /// Every structural check: drift, diffusion, noise and, when a growth
    /// triple is declared, the growth-exponent compatibility.
    pub fn validate(&self) -> Result<ValidationReport> {
        let model = self.model()?;
        let plan = SamplePlan::for_domain(self.domain.length, self.sim.horizon);
        let mut report = validate_drift(&model.drift, &plan)
            .merge(validate_diffusion(&model.diffusion, &plan))
            .merge(validate_noise(&model.noise, &model.basis)?);
        if model.drift.super_dissipativity.is_some() {
            report = report.merge(validate_growth_compatibility(&model.drift, &model.diffusion, &model.noise));
        }
        report.subject = if self.name.is_empty() { "scenario".into() } else { self.name.clone() };
        let params = self.sim_params();
        params.n_steps()?;
        if let Experiment::Sweep(s) = &self.experiment {
            s.validate(&model)?;
        }
        Ok(report)
    }

    /// Git-style SHA-256 (`"blob <len>\0"` prefix) of the canonical JSON with
    /// the cosmetic `name` and `output` fields removed.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("name");
            m.remove("output");
        }
        let body = serde_json::to_string(&v).expect("value serializes");
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Recursive object merge; `overlay` wins on conflicts.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && same_tag(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

// a block that switches `kind` or `name` starts from scratch
fn same_tag(a: &Value, b: &Value) -> bool {
    ["kind", "name"].iter().all(|t| match (a.get(t), b.get(t)) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    })
}

fn parse_value(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn resolve(mut v: Value, depth: usize) -> Result<Value> {
    let preset = match &mut v {
        Value::Object(m) => m.remove("preset"),
        _ => return Err(Error::Schema("scenario must be a JSON object".into())),
    };
    match preset {
        None => Ok(v),
        Some(Value::String(name)) => {
            if depth > 8 {
                return Err(Error::Schema("preset chain too deep".into()));
            }
            let src = preset_source(&name).ok_or_else(|| Error::Schema(format!("unknown preset {name:?}")))?;
            let mut base = resolve(parse_value(src)?, depth + 1)?;
            // kind-tagged blocks replace rather than merge when the tag changes
            if let (Value::Object(b), Value::Object(o)) = (&mut base, &v) {
                for (k, ov) in o {
                    if let (Some(bv), Some(tag)) = (b.get(k), ov.get("kind")) {
                        if bv.get("kind") != Some(tag) {
                            b.remove(k);
                        }
                    }
                }
            }
            merge(&mut base, v);
            Ok(base)
        }
        Some(_) => Err(Error::Schema("preset must be a string".into())),
    }
}

/// Parses a scenario without running validators.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let v = resolve(parse_value(text)?, 0)?;
    serde_json::from_value(v).map_err(|e| Error::Schema(e.to_string()))
}

/// Parses and validates: any failed check is an error listing every failure.
pub fn load_scenario_str(text: &str) -> Result<(ScenarioConfig, ValidationReport)> {
    let cfg = parse_scenario(text)?;
    let report = cfg.validate()?;
    if !report.passed() {
        let lines: Vec<String> = report.summary().lines().filter(|l| !l.starts_with("ok")).map(String::from).collect();
        return Err(Error::Validation(lines.join("\n")));
    }
    Ok((cfg, report))
}

pub fn load_scenario(path: &std::path::Path) -> Result<(ScenarioConfig, ValidationReport)> {
    load_scenario_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for (name, src) in PRESETS {
            let (cfg, rep) = load_scenario_str(src).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(rep.passed(), "{name}");
            assert_eq!(&cfg.name, name);
        }
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(parse_scenario(""), Err(Error::Parse { .. })));
        assert!(matches!(parse_scenario("{\"domain\": }"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn preset_overlay_and_mutants() {
        let e = load_scenario_str(r#"{"preset": "section5_m3_nu04", "noise": {"beta": 0.4}}"#).unwrap_err();
        match e {
            Error::Validation(s) => assert!(s.contains("noise-eigenvalue-sum"), "{s}"),
            other => panic!("{other}"),
        }
        let e = load_scenario_str(r#"{"preset": "section5_m3_nu04", "diffusion": {"nu": 0.6}}"#).unwrap_err();
        assert!(matches!(&e, Error::Validation(s) if s.contains("nu-admissible")), "{e}");
        let e = load_scenario_str(
            r#"{"preset": "section5_m3_nu04", "drift": {"kind": "polynomial", "coefficients": [0.0, 1.0]}}"#,
        )
        .unwrap_err();
        assert!(matches!(&e, Error::Validation(s) if s.contains("drift-decreasing")), "{e}");
    }

    #[test]
    fn hash_tracks_meaningful_fields() {
        let a = parse_scenario(r#"{"preset": "section5_m3_nu04"}"#).unwrap();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        b.name = "renamed".into();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed += 1;
        assert_ne!(a.content_hash(), b.content_hash());
        let mut c = a.clone();
        c.sim.eps *= 2.0;
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn unknown_fields_rejected() {
        let e = parse_scenario(r#"{"preset": "section5_m3_nu04", "bogus": 1}"#).unwrap_err();
        assert!(matches!(e, Error::Schema(_)));
        assert!(matches!(parse_scenario(r#"{"preset": "nope"}"#), Err(Error::Schema(_))));
    }
}
