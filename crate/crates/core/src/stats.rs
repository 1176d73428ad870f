//! Monte Carlo estimates and mergeable running moments.

use serde::{Deserialize, Serialize};

/// Point estimate with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub flagged_fraction: f64,
    /// `eps * ln(value)` when requested.
    pub eps_log: Option<f64>,
}

impl Estimate {
    /// Plain Monte Carlo frequency `hits / n` with binomial standard error.
    pub fn frequency(name: impl Into<String>, hits: usize, n: usize, flagged: usize) -> Self {
        let p = if n > 0 { hits as f64 / n as f64 } else { 0.0 };
        Self {
            name: name.into(),
            value: p,
            stderr: if n > 0 { (p * (1.0 - p) / n as f64).sqrt() } else { 0.0 },
            n,
            flagged_fraction: if n > 0 { flagged as f64 / n as f64 } else { 0.0 },
            eps_log: None,
        }
    }

    pub fn from_stats(name: impl Into<String>, s: &Moments, flagged: usize) -> Self {
        Self {
            name: name.into(),
            value: s.mean(),
            stderr: s.stderr(),
            n: s.count,
            flagged_fraction: if s.count > 0 { flagged as f64 / s.count as f64 } else { 0.0 },
            eps_log: None,
        }
    }

    pub fn with_eps_log(mut self, eps: f64) -> Self {
        self.eps_log = Some(if self.value > 0.0 { eps * self.value.ln() } else { f64::NEG_INFINITY });
        self
    }

    /// `|a - b| <= k * sqrt(se_a^2 + se_b^2)`.
    pub fn overlaps(&self, other: &Estimate, k: f64) -> bool {
        (self.value - other.value).abs() <= k * (self.stderr.powi(2) + other.stderr.powi(2)).sqrt()
    }
}

/// Count, mean and centered second moment (Chan et al. parallel merge),
/// plus the running maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub m2: f64,
    pub max: f64,
}

impl Default for Moments {
    fn default() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            max: f64::NEG_INFINITY,
        }
    }
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
        self.max = self.max.max(x);
    }

    pub fn merge(&self, o: &Moments) -> Moments {
        if self.count == 0 {
            return *o;
        }
        if o.count == 0 {
            return *self;
        }
        let n = (self.count + o.count) as f64;
        let d = o.mean - self.mean;
        Moments {
            count: self.count + o.count,
            mean: self.mean + d * o.count as f64 / n,
            m2: self.m2 + o.m2 + d * d * self.count as f64 * o.count as f64 / n,
            max: self.max.max(o.max),
        }
    }

    pub fn from_slice(xs: &[f64]) -> Moments {
        let mut m = Moments::default();
        xs.iter().for_each(|x| m.push(*x));
        m
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count > 1 {
            self.m2 / (self.count - 1) as f64
        } else {
            0.0
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count > 0 {
            (self.variance() / self.count as f64).sqrt()
        } else {
            0.0
        }
    }
}

/// Standard error of the unbiased sample variance of `xs` (delta method with
/// the fourth central moment). Used when comparing a variance to its target.
pub fn variance_stderr(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
}

/// Complementary standard normal CDF.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}
