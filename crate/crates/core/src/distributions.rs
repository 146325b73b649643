//! Entry laws: normalized samplers, dyadic quantile levels of `|x|^p`, and the
//! empirical Levy concentration function.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Pareto, StandardNormal, StudentT};
use statrs::function::beta::beta_reg;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Default width of the uniform perturbation applied to atomic laws before
/// level computation.
pub const DEFAULT_SMOOTHING: f64 = 1e-6;

/// Largest sample drawn for empirical level estimation.
pub const MAX_LEVEL_SAMPLES: usize = 1 << 24;

/// Minimum number of sample points that must exceed the deepest empirical level.
const MIN_TAIL_COUNT: f64 = 32.0;

const LEVY_SEED: u64 = 0x6c65_7679;

#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Gaussian,
    Rademacher,
    UniformSymmetric,
    StudentT { df: f64 },
    SymmetrizedPareto { tail_index: f64 },
    CenteredLognormal { sigma: f64 },
    /// Centered Bernoulli(p): takes `(1-p)/s` with probability `p` and `-p/s`
    /// otherwise, `s = sqrt(p(1-p))`.
    TwoPointSparse { p: f64 },
    Empirical { samples: Arc<[f64]> },
}

/// A mean-zero, unit-variance entry law: `x = (raw - shift) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryDistribution {
    family: Family,
    shift: f64,
    scale: f64,
    smoothing: f64,
}

/// Where a level sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelSource {
    AnalyticInverseCdf,
    EmpiricalQuantile,
}

/// Dyadic levels `tau_0 <= ... <= tau_K` with `P{xi >= tau_k} = 2^-k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSequence {
    values: Vec<f64>,
    source: LevelSource,
}

/// A pair `(v, u)` with `L(xi, v) <= u < 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevyParams {
    pub v: f64,
    pub u: f64,
    pub estimate: f64,
    pub margin: f64,
}

/// `a^p` for `a >= 0`, exact for the common integer exponents so that the
/// regularizer and the level computation agree bit for bit.
pub fn pow_moment(a: f64, p: f64) -> f64 {
    if p == 1.0 {
        a
    } else if p == 2.0 {
        a * a
    } else {
        a.powf(p)
    }
}

fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

impl EntryDistribution {
    pub fn new(family: Family) -> Result<Self> {
        let (shift, scale) = match &family {
            Family::Gaussian | Family::Rademacher => (0.0, 1.0),
            Family::UniformSymmetric => (0.0, (1.0f64 / 3.0).sqrt()),
            Family::StudentT { df } => {
                if !(df.is_finite() && *df > 2.0) {
                    return Err(Error::Parameter(format!("student-t needs df > 2, got {df}")));
                }
                (0.0, (df / (df - 2.0)).sqrt())
            }
            Family::SymmetrizedPareto { tail_index } => {
                let a = *tail_index;
                if !(a.is_finite() && a > 2.0) {
                    return Err(Error::Parameter(format!("pareto needs tail index > 2, got {a}")));
                }
                (0.0, (a / (a - 2.0)).sqrt())
            }
            Family::CenteredLognormal { sigma } => {
                let s = *sigma;
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::Parameter(format!("lognormal needs sigma > 0, got {s}")));
                }
                let s2 = s * s;
                ((0.5 * s2).exp(), (s2.exp_m1() * s2.exp()).sqrt())
            }
            Family::TwoPointSparse { p } => {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(Error::Parameter(format!("two-point needs p in (0,1), got {p}")));
                }
                (*p, (p * (1.0 - p)).sqrt())
            }
            Family::Empirical { samples } => {
                if samples.is_empty() {
                    return Err(Error::Parameter("empirical law needs at least one sample".into()));
                }
                if samples.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parameter("empirical samples must be finite".into()));
                }
                let n = samples.len() as f64;
                let mean = samples.iter().sum::<f64>() / n;
                let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                // A constant sample cannot be normalized; it is kept so that the
                // concentration routines can reject it explicitly.
                let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
                (mean, scale)
            }
        };
        let smoothing = if Self::family_is_atomic(&family) { DEFAULT_SMOOTHING } else { 0.0 };
        Ok(Self { family, shift, scale, smoothing })
    }

    pub fn gaussian() -> Self {
        Self::new(Family::Gaussian).expect("valid")
    }

    pub fn rademacher() -> Self {
        Self::new(Family::Rademacher).expect("valid")
    }

    pub fn uniform_symmetric() -> Self {
        Self::new(Family::UniformSymmetric).expect("valid")
    }

    pub fn student_t(df: f64) -> Result<Self> {
        Self::new(Family::StudentT { df })
    }

    pub fn pareto(tail_index: f64) -> Result<Self> {
        Self::new(Family::SymmetrizedPareto { tail_index })
    }

    pub fn lognormal(sigma: f64) -> Result<Self> {
        Self::new(Family::CenteredLognormal { sigma })
    }

    pub fn two_point(p: f64) -> Result<Self> {
        Self::new(Family::TwoPointSparse { p })
    }

    pub fn empirical(samples: Vec<f64>) -> Result<Self> {
        Self::new(Family::Empirical { samples: samples.into() })
    }

    /// Loads a newline-delimited list of reals.
    pub fn empirical_from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| {
                Error::Parse(format!("{}:{}: not a number: {line:?}", path.display(), lineno + 1))
            })?;
            samples.push(v);
        }
        Self::empirical(samples)
    }

    /// Parses `family[:param[,param]]`, e.g. `student-t:3`, `pareto:2.5`,
    /// `two-point:0.01`, `empirical:/path/to/file`.
    pub fn from_spec(spec: &str) -> Result<Self> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (spec.trim(), None),
        };
        let num = |what: &str| -> Result<f64> {
            let a = arg.ok_or_else(|| Error::Parse(format!("{name} needs a {what} parameter")))?;
            a.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad {what} for {name}: {a:?}")))
        };
        let no_arg = || -> Result<()> {
            match arg {
                Some(a) => Err(Error::Parse(format!("{name} takes no parameter, got {a:?}"))),
                None => Ok(()),
            }
        };
        match name {
            "gaussian" | "normal" => no_arg().map(|_| Self::gaussian()),
            "rademacher" => no_arg().map(|_| Self::rademacher()),
            "uniform" | "uniform-symmetric" => no_arg().map(|_| Self::uniform_symmetric()),
            "student-t" | "t" => Self::student_t(num("df")?),
            "pareto" | "symmetrized-pareto" => Self::pareto(num("tail index")?),
            "lognormal" | "centered-lognormal" => Self::lognormal(num("sigma")?),
            "two-point" | "two-point-sparse" => Self::two_point(num("p")?),
            "empirical" => {
                let path = arg.ok_or_else(|| Error::Parse("empirical needs a file path".into()))?;
                Self::empirical_from_file(Path::new(path))
            }
            other => Err(Error::Parse(format!("unknown distribution family {other:?}"))),
        }
    }

    pub fn with_smoothing(mut self, width: f64) -> Result<Self> {
        if !(width.is_finite() && width >= 0.0) {
            return Err(Error::Parameter(format!("smoothing width must be >= 0, got {width}")));
        }
        self.smoothing = width;
        Ok(self)
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    fn family_is_atomic(family: &Family) -> bool {
        matches!(
            family,
            Family::Rademacher | Family::TwoPointSparse { .. } | Family::Empirical { .. }
        )
    }

    pub fn is_atomic(&self) -> bool {
        Self::family_is_atomic(&self.family)
    }

    /// True for an empirical sample with zero spread.
    pub fn is_degenerate(&self) -> bool {
        match &self.family {
            Family::Empirical { samples } => samples.iter().all(|&v| v == samples[0]),
            _ => false,
        }
    }

    /// Mean and variance of the normalized law: closed form for analytic
    /// families, sample moments for the empirical one.
    pub fn normalized_moments(&self) -> (f64, f64) {
        let (raw_mean, raw_var) = match &self.family {
            Family::Gaussian | Family::Rademacher => (0.0, 1.0),
            Family::UniformSymmetric => (0.0, 1.0 / 3.0),
            Family::StudentT { df } => (0.0, df / (df - 2.0)),
            Family::SymmetrizedPareto { tail_index: a } => (0.0, a / (a - 2.0)),
            Family::CenteredLognormal { sigma } => {
                let s2 = sigma * sigma;
                ((0.5 * s2).exp(), s2.exp_m1() * s2.exp())
            }
            Family::TwoPointSparse { p } => (*p, p * (1.0 - p)),
            Family::Empirical { samples } => {
                let n = samples.len() as f64;
                let m = samples.iter().sum::<f64>() / n;
                (m, samples.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            }
        };
        ((raw_mean - self.shift) / self.scale, raw_var / (self.scale * self.scale))
    }

    /// Fills `out` with i.i.d. normalized draws.
    pub fn fill(&self, rng: &mut Rng, out: &mut [f64]) {
        let (shift, scale) = (self.shift, self.scale);
        match &self.family {
            Family::Gaussian => {
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            Family::Rademacher => {
                for v in out.iter_mut() {
                    *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
            Family::UniformSymmetric => {
                for v in out.iter_mut() {
                    *v = rng.random_range(-1.0..1.0) / scale;
                }
            }
            Family::StudentT { df } => {
                let t = StudentT::new(*df).expect("validated df");
                for v in out.iter_mut() {
                    *v = t.sample(rng) / scale;
                }
            }
            Family::SymmetrizedPareto { tail_index } => {
                let p = Pareto::new(1.0, *tail_index).expect("validated tail index");
                for v in out.iter_mut() {
                    let magnitude: f64 = p.sample(rng);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    *v = sign * magnitude / scale;
                }
            }
            Family::CenteredLognormal { sigma } => {
                for v in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = ((sigma * z).exp() - shift) / scale;
                }
            }
            Family::TwoPointSparse { p } => {
                for v in out.iter_mut() {
                    let raw = if rng.random::<f64>() < *p { 1.0 } else { 0.0 };
                    *v = (raw - shift) / scale;
                }
            }
            Family::Empirical { samples } => {
                for v in out.iter_mut() {
                    *v = (samples[rng.random_range(0..samples.len())] - shift) / scale;
                }
            }
        }
    }

    /// `count` i.i.d. draws from the normalized law.
    pub fn sample(&self, rng: &mut Rng, count: usize) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(Error::Parameter("sample count must be >= 1".into()));
        }
        let mut out = vec![0.0; count];
        self.fill(rng, &mut out);
        Ok(out)
    }

    /// Atoms of `|x|` with their weights, for the atomic families.
    fn abs_atoms(&self) -> Option<Vec<(f64, f64)>> {
        match &self.family {
            Family::Rademacher => Some(vec![(1.0, 1.0)]),
            Family::TwoPointSparse { p } => Some(vec![
                ((1.0 - p) / self.scale, *p),
                (p / self.scale, 1.0 - p),
            ]),
            Family::Empirical { samples } => {
                let w = 1.0 / samples.len() as f64;
                Some(samples.iter().map(|v| (((v - self.shift) / self.scale).abs(), w)).collect())
            }
            _ => None,
        }
    }

    /// `P{|x| >= s}` for the normalized law, without smoothing.
    pub fn abs_survival(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 1.0;
        }
        match &self.family {
            Family::Gaussian => erfc(s / std::f64::consts::SQRT_2),
            Family::UniformSymmetric => (1.0 - s / 3f64.sqrt()).clamp(0.0, 1.0),
            Family::StudentT { df } => {
                let u = s * self.scale;
                beta_reg(0.5 * df, 0.5, df / (df + u * u))
            }
            Family::SymmetrizedPareto { tail_index } => {
                let u = s * self.scale;
                if u <= 1.0 {
                    1.0
                } else {
                    u.powf(-tail_index)
                }
            }
            Family::CenteredLognormal { sigma } => {
                let hi = self.shift + s * self.scale;
                let lo = self.shift - s * self.scale;
                let upper = std_normal_sf(hi.ln() / sigma);
                let lower = if lo > 0.0 { std_normal_cdf(lo.ln() / sigma) } else { 0.0 };
                (upper + lower).min(1.0)
            }
            _ => self
                .abs_atoms()
                .expect("atomic family")
                .iter()
                .filter(|(a, _)| *a >= s)
                .map(|(_, w)| w)
                .sum::<f64>()
                .min(1.0),
        }
    }

    /// `P{|x| + u >= s}` with `u ~ U[0, smoothing]` for atomic laws; plain
    /// `abs_survival` otherwise.
    pub fn smoothed_abs_survival(&self, s: f64) -> f64 {
        let width = self.smoothing;
        if !self.is_atomic() || width == 0.0 {
            return self.abs_survival(s);
        }
        if s <= 0.0 {
            return 1.0;
        }
        self.abs_atoms()
            .expect("atomic family")
            .iter()
            .map(|(a, w)| w * ((a + width - s) / width).clamp(0.0, 1.0))
            .sum::<f64>()
            .min(1.0)
    }

    /// Essential infimum of `|x| (+u)`.
    fn abs_ess_inf(&self) -> f64 {
        match &self.family {
            Family::Gaussian
            | Family::UniformSymmetric
            | Family::StudentT { .. }
            | Family::CenteredLognormal { .. } => 0.0,
            Family::SymmetrizedPareto { .. } => 1.0 / self.scale,
            _ => self
                .abs_atoms()
                .expect("atomic family")
                .iter()
                .filter(|(_, w)| *w > 0.0)
                .map(|(a, _)| *a)
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Smallest `s >= 0` with `P{|x| (+u) >= s} <= target`, `target in (0,1)`.
    fn abs_inverse_survival(&self, target: f64) -> f64 {
        let width = if self.is_atomic() { self.smoothing } else { 0.0 };
        match &self.family {
            Family::Gaussian => std::f64::consts::SQRT_2 * erfc_inv(target),
            Family::UniformSymmetric => 3f64.sqrt() * (1.0 - target),
            Family::SymmetrizedPareto { tail_index } => target.powf(-1.0 / tail_index) / self.scale,
            Family::Rademacher => 1.0 + width * (1.0 - target),
            _ => bisect_inverse_survival(|s| self.smoothed_abs_survival(s), target),
        }
    }

    /// Dyadic levels of `xi = (|x| (+u))^p`, `k = 0..=k_max`.
    ///
    /// Every analytic family is inverted through its closed-form survival
    /// function; the empirical family falls back to lower quantiles of a
    /// seeded sample of size `max(10^6, 2^(k_max+6))`.
    pub fn levels(&self, p_moment: f64, k_max: usize) -> Result<LevelSequence> {
        check_level_args(p_moment, k_max)?;
        if let Family::Empirical { samples } = &self.family {
            let n = (1usize << (k_max + 6).min(62)).max(1_000_000);
            if n > MAX_LEVEL_SAMPLES {
                return Err(Error::Resolution(format!(
                    "empirical levels up to K = {k_max} need {n} samples (cap {MAX_LEVEL_SAMPLES})"
                )));
            }
            let seed = samples
                .iter()
                .fold(0u64, |acc, v| derive_seed(acc, v.to_bits()));
            let mut rng = rng_from_seed(seed);
            let mut draws = self.sample(&mut rng, n)?;
            let width = self.smoothing;
            for v in draws.iter_mut() {
                let u = if width > 0.0 { rng.random_range(0.0..width) } else { 0.0 };
                *v = pow_moment(v.abs() + u, p_moment);
            }
            return LevelSequence::from_samples(draws, k_max);
        }
        let mut values = Vec::with_capacity(k_max + 1);
        values.push(pow_moment(self.abs_ess_inf(), p_moment));
        for k in 1..=k_max {
            let s = self.abs_inverse_survival((-(k as f64)).exp2());
            values.push(pow_moment(s, p_moment));
        }
        LevelSequence::new(values, LevelSource::AnalyticInverseCdf)
    }

    /// `P{xi >= tau}` for `xi = (|x| (+u))^p`.
    pub fn moment_survival(&self, tau: f64, p_moment: f64) -> f64 {
        if tau <= 0.0 {
            return 1.0;
        }
        self.smoothed_abs_survival(tau.powf(1.0 / p_moment))
    }
}

impl fmt::Display for EntryDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            Family::Gaussian => write!(f, "gaussian"),
            Family::Rademacher => write!(f, "rademacher"),
            Family::UniformSymmetric => write!(f, "uniform-symmetric"),
            Family::StudentT { df } => write!(f, "student-t:{df}"),
            Family::SymmetrizedPareto { tail_index } => write!(f, "pareto:{tail_index}"),
            Family::CenteredLognormal { sigma } => write!(f, "lognormal:{sigma}"),
            Family::TwoPointSparse { p } => write!(f, "two-point:{p}"),
            Family::Empirical { samples } => write!(f, "empirical[{}]", samples.len()),
        }
    }
}

fn check_level_args(p_moment: f64, k_max: usize) -> Result<()> {
    if !(p_moment.is_finite() && p_moment >= 1.0) {
        return Err(Error::Parameter(format!("moment exponent must be >= 1, got {p_moment}")));
    }
    if k_max < 1 {
        return Err(Error::Parameter("level count K must be >= 1".into()));
    }
    Ok(())
}

/// Smallest `s >= 0` with `survival(s) <= target` for a nonincreasing survival.
fn bisect_inverse_survival(survival: impl Fn(f64) -> f64, target: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    while survival(hi) > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if survival(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

impl LevelSequence {
    pub fn new(values: Vec<f64>, source: LevelSource) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Parameter("a level sequence needs K >= 1".into()));
        }
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Numerical("levels must be non-negative numbers".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Numerical("levels must be nondecreasing".into()));
        }
        Ok(Self { values, source })
    }

    /// Levels of a variable given its survival function `t -> P{xi >= t}`,
    /// inverted numerically. `tau_0` is the essential infimum.
    pub fn from_survival(survival: impl Fn(f64) -> f64, k_max: usize) -> Result<Self> {
        check_level_args(1.0, k_max)?;
        // Largest t with survival(t) == 1.
        let tau0 = if survival(0.0) < 1.0 {
            0.0
        } else {
            let mut lo = 0.0;
            let mut hi = 1.0;
            while survival(hi) >= 1.0 {
                lo = hi;
                hi *= 2.0;
                if hi > 1e300 {
                    return Err(Error::Numerical("survival function never drops below 1".into()));
                }
            }
            for _ in 0..400 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if survival(mid) >= 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        let mut values = vec![tau0];
        for k in 1..=k_max {
            values.push(bisect_inverse_survival(&survival, (-(k as f64)).exp2()).max(tau0));
        }
        Self::new(values, LevelSource::AnalyticInverseCdf)
    }

    /// Lower empirical quantiles `tau_k = inf{t : F_N(t) >= 1 - 2^-k}`.
    pub fn from_samples(mut samples: Vec<f64>, k_max: usize) -> Result<Self> {
        check_level_args(1.0, k_max)?;
        if samples.is_empty() {
            return Err(Error::Parameter("no samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("samples must be finite".into()));
        }
        let n = samples.len();
        if (-(k_max as f64)).exp2() * (n as f64) < MIN_TAIL_COUNT {
            return Err(Error::Resolution(format!(
                "K = {k_max} leaves fewer than {MIN_TAIL_COUNT} of {n} samples above the top level"
            )));
        }
        samples.sort_by(f64::total_cmp);
        let values = (0..=k_max)
            .map(|k| {
                let q = 1.0 - (-(k as f64)).exp2();
                let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
                samples[rank - 1]
            })
            .collect();
        Self::new(values, LevelSource::EmpiricalQuantile)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> LevelSource {
        self.source
    }

    /// Deepest level index `K`.
    pub fn k_max(&self) -> usize {
        self.values.len() - 1
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// `sum_{k<=K} 2^{-k-1} tau_k`, a lower bound for `E xi`.
    pub fn expectation_lower_bound(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, t)| t * (-(k as f64) - 1.0).exp2())
            .sum()
    }

    /// `sum_{k<K} tau_{k+1} 2^{-k}`: the per-coordinate mean of the majorant.
    pub fn majorant_sum(&self) -> f64 {
        self.values[1..]
            .iter()
            .enumerate()
            .map(|(k, t)| t * (-(k as f64)).exp2())
            .sum()
    }
}

/// Exact empirical `max_lambda #{i : |s_i - lambda| <= z} / N` and a maximizing
/// `lambda`, by sort and two-pointer sweep.
pub fn levy_concentration(samples: &[f64], z: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Parameter("levy concentration of an empty sample".into()));
    }
    if !(z >= 0.0) {
        return Err(Error::Parameter(format!("window half-width must be >= 0, got {z}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(levy_concentration_sorted(&sorted, z))
}

/// As [`levy_concentration`] for input already sorted ascending.
pub fn levy_concentration_sorted(sorted: &[f64], z: f64) -> (f64, f64) {
    let width = 2.0 * z;
    let mut best = 0usize;
    let mut best_left = sorted[0];
    let mut hi = 0usize;
    for lo in 0..sorted.len() {
        if hi < lo {
            hi = lo;
        }
        while hi + 1 < sorted.len() && sorted[hi + 1] - sorted[lo] <= width {
            hi += 1;
        }
        let count = hi - lo + 1;
        if count > best {
            best = count;
            best_left = sorted[lo];
        }
    }
    (best as f64 / sorted.len() as f64, best_left + z)
}

/// Searches `v in {2^-j}` for the largest window with empirical concentration
/// at most 0.9, using `samples` seeded draws. `u = estimate + 3/sqrt(N)`.
pub fn levy_params(dist: &EntryDistribution, samples: usize) -> Result<LevyParams> {
    let mut rng = rng_from_seed(LEVY_SEED);
    levy_params_with_rng(dist, samples, &mut rng)
}

pub fn levy_params_with_rng(
    dist: &EntryDistribution,
    samples: usize,
    rng: &mut Rng,
) -> Result<LevyParams> {
    if samples == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    if dist.is_degenerate() {
        return Err(Error::NoValidPair("the empirical law is constant".into()));
    }
    let mut draws = dist.sample(rng, samples)?;
    draws.sort_by(f64::total_cmp);
    levy_params_from_sorted(&draws)
}

/// The `(v, u)` search on an explicit sample.
pub fn levy_params_from_sorted(sorted: &[f64]) -> Result<LevyParams> {
    if sorted.is_empty() {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let margin = 3.0 / (sorted.len() as f64).sqrt();
    for j in 0..64 {
        let v = (-(j as f64)).exp2();
        let (estimate, _) = levy_concentration_sorted(sorted, v);
        if estimate <= 0.9 {
            let u = estimate + margin;
            if u >= 1.0 {
                break;
            }
            return Ok(LevyParams { v, u, estimate, margin });
        }
    }
    Err(Error::NoValidPair(
        "no window 2^-j with empirical concentration <= 0.9 (near-constant input)".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
    }

    fn catalogue() -> Vec<EntryDistribution> {
        vec![
            EntryDistribution::gaussian(),
            EntryDistribution::rademacher(),
            EntryDistribution::uniform_symmetric(),
            EntryDistribution::student_t(3.0).unwrap(),
            EntryDistribution::pareto(2.5).unwrap(),
            EntryDistribution::lognormal(0.8).unwrap(),
            EntryDistribution::two_point(0.1).unwrap(),
        ]
    }

    #[test]
    fn parameter_errors() {
        assert!(matches!(EntryDistribution::student_t(2.0), Err(Error::Parameter(_))));
        assert!(matches!(EntryDistribution::pareto(1.5), Err(Error::Parameter(_))));
        assert!(matches!(EntryDistribution::two_point(1.0), Err(Error::Parameter(_))));
        assert!(matches!(EntryDistribution::two_point(0.0), Err(Error::Parameter(_))));
        let mut rng = rng_from_seed(1);
        assert!(EntryDistribution::gaussian().sample(&mut rng, 0).is_err());
    }

    #[test]
    fn closed_form_normalization() {
        for d in catalogue() {
            let (m, v) = d.normalized_moments();
            assert!(m.abs() < 1e-12, "{d}: mean {m}");
            assert!((v - 1.0).abs() < 1e-12, "{d}: var {v}");
        }
        // Var(t_3) = 3, so the scale is sqrt(3).
        assert!((EntryDistribution::student_t(3.0).unwrap().scale() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rademacher_support() {
        let mut rng = rng_from_seed(11);
        let xs = EntryDistribution::rademacher().sample(&mut rng, 4).unwrap();
        assert!(xs.iter().all(|x| *x == 1.0 || *x == -1.0));
    }

    #[test]
    fn gaussian_and_student_variance() {
        let mut rng = rng_from_seed(5);
        let g = EntryDistribution::gaussian().sample(&mut rng, 1_000_000).unwrap();
        assert!((mean_var(&g).1 - 1.0).abs() < 0.01);
        let t = EntryDistribution::student_t(3.0).unwrap().sample(&mut rng, 1_000_000).unwrap();
        assert!((mean_var(&t).1 - 1.0).abs() < 0.05);
    }

    #[test]
    fn sampling_is_deterministic() {
        for d in catalogue() {
            let a = d.sample(&mut rng_from_seed(42), 64).unwrap();
            let b = d.sample(&mut rng_from_seed(42), 64).unwrap();
            assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn empirical_normalization_within_tolerance() {
        let mut rng = rng_from_seed(3);
        let raw = EntryDistribution::lognormal(0.5).unwrap().sample(&mut rng, 4000).unwrap();
        let raw: Vec<f64> = raw.iter().map(|x| 3.0 * x + 7.0).collect();
        let d = EntryDistribution::empirical(raw).unwrap();
        let n = 200_000;
        let xs = d.sample(&mut rng, n).unwrap();
        let (m, v) = mean_var(&xs);
        let tol = 1.0 / (n as f64).sqrt();
        assert!(m.abs() < 3.0 * tol, "mean {m}");
        assert!((v - 1.0).abs() < 5.0 * tol * 3.0, "var {v}");
        let (cm, cv) = d.normalized_moments();
        assert!(cm.abs() < 1e-12 && (cv - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exponential_levels_match_k_ln2() {
        let lv = LevelSequence::from_survival(|t| (-t).exp().min(1.0), 12).unwrap();
        for k in 0..=12 {
            assert!((lv.tau(k) - k as f64 * std::f64::consts::LN_2).abs() < 1e-12, "k={k}");
        }
        // Empirical cross-check.
        let mut rng = rng_from_seed(9);
        let xs: Vec<f64> = (0..1_000_000).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let emp = LevelSequence::from_samples(xs, 8).unwrap();
        for k in 1..=8 {
            let tol = 3.0 * (2f64).powf(k as f64 / 2.0) / 1000.0;
            assert!((emp.tau(k) - lv.tau(k)).abs() < tol.max(0.01), "k={k}");
        }
    }

    #[test]
    fn uniform_levels() {
        let lv = LevelSequence::from_survival(|t| (1.0 - t).clamp(0.0, 1.0), 10).unwrap();
        for k in 0..=10 {
            assert!((lv.tau(k) - (1.0 - (-(k as f64)).exp2())).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_levels_hit_dyadic_tails() {
        for d in catalogue() {
            for p in [1.0, 2.0] {
                let lv = d.levels(p, 20).unwrap();
                assert_eq!(lv.source(), LevelSource::AnalyticInverseCdf);
                for k in 1..=20 {
                    let target = (-(k as f64)).exp2();
                    let got = d.moment_survival(lv.tau(k), p);
                    // Atomic laws are smoothed over a width of 1e-6, which limits
                    // the attainable resolution to about eps / 1e-6.
                    let tol = if d.is_atomic() { 1e-8 } else { 1e-6 * target };
                    assert!(
                        (got - target).abs() < tol,
                        "{d} p={p} k={k}: {got} vs {target}"
                    );
                }
            }
        }
    }

    #[test]
    fn tau0_is_essential_infimum() {
        assert_eq!(EntryDistribution::gaussian().levels(2.0, 3).unwrap().tau(0), 0.0);
        let r = EntryDistribution::rademacher().levels(2.0, 3).unwrap();
        assert_eq!(r.tau(0), 1.0);
        let p = EntryDistribution::pareto(3.0).unwrap();
        let lv = p.levels(2.0, 3).unwrap();
        assert!((lv.tau(0) - 1.0 / (p.scale() * p.scale())).abs() < 1e-15);
    }

    #[test]
    fn expectation_dominates_truncated_level_sum() {
        let mut rng = rng_from_seed(77);
        for d in catalogue() {
            let lv = d.levels(2.0, 16).unwrap();
            let n = 400_000;
            let xs = d.sample(&mut rng, n).unwrap();
            let xi: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let (m, v) = mean_var(&xi);
            let bound = m + 3.0 * v.sqrt() / (n as f64).sqrt() + d.smoothing() * 3.0;
            assert!(lv.expectation_lower_bound() <= bound, "{d}: {} > {bound}", lv.expectation_lower_bound());
        }
    }

    #[test]
    fn empirical_levels_resolution_error() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert!(matches!(LevelSequence::from_samples(xs.clone(), 5), Err(Error::Resolution(_))));
        assert!(LevelSequence::from_samples(xs, 4).is_ok());
        let d = EntryDistribution::empirical(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(d.levels(2.0, 30), Err(Error::Resolution(_))));
    }

    #[test]
    fn empirical_family_levels_are_quantiles() {
        let d = EntryDistribution::empirical(vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let lv = d.levels(1.0, 3).unwrap();
        assert_eq!(lv.source(), LevelSource::EmpiricalQuantile);
        for k in 1..=3 {
            let target = (-(k as f64)).exp2();
            let tail = d.moment_survival(lv.tau(k), 1.0);
            // Atomic law: at most one atom weight of slack around the target.
            assert!(tail >= target - 0.2 - 1e-3 && tail <= target + 0.2 + 1e-3);
        }
    }

    #[test]
    fn levy_concentration_basics() {
        let (l, lambda) = levy_concentration(&[0.0, 0.0, 0.0, 1.0], 0.1).unwrap();
        assert_eq!(l, 0.75);
        assert!(lambda.abs() <= 0.1);
        let xs = [3.0, -1.0, 4.0, 1.5, -9.0];
        assert_eq!(levy_concentration(&xs, 6.5).unwrap().0, 1.0);
        assert!(levy_concentration(&[], 1.0).is_err());
    }

    #[test]
    fn uniform_concentration_is_window_length() {
        let mut rng = rng_from_seed(21);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let (l, _) = levy_concentration(&xs, 0.1).unwrap();
        assert!((l - 0.2).abs() < 0.01, "{l}");
    }

    #[test]
    fn levy_params_rademacher_and_gaussian() {
        let n = 100_000;
        let r = levy_params(&EntryDistribution::rademacher(), n).unwrap();
        let margin = 3.0 / (n as f64).sqrt();
        assert_eq!(r.v, 0.5);
        assert!((r.u - (0.5 + margin)).abs() < 0.01);
        let mut rng = rng_from_seed(8);
        let g = EntryDistribution::gaussian().sample(&mut rng, n).unwrap();
        let (l, _) = levy_concentration(&g, 0.25).unwrap();
        // Phi(0.25) - Phi(-0.25)
        let exact = 1.0 - erfc(0.25 / std::f64::consts::SQRT_2);
        assert!((exact - 0.1974).abs() < 1e-4);
        assert!((l - exact).abs() < 0.01, "{l}");
        let gp = levy_params(&EntryDistribution::gaussian(), n).unwrap();
        assert!(gp.u < 1.0 && gp.estimate <= 0.9);
    }

    #[test]
    fn levy_params_rejects_constant_input() {
        let d = EntryDistribution::empirical(vec![0.0; 100]).unwrap();
        assert!(matches!(levy_params(&d, 1000), Err(Error::NoValidPair(_))));
    }

    #[test]
    fn spec_grammar() {
        assert_eq!(EntryDistribution::from_spec("student-t:3").unwrap(), EntryDistribution::student_t(3.0).unwrap());
        assert_eq!(EntryDistribution::from_spec("pareto:2.5").unwrap(), EntryDistribution::pareto(2.5).unwrap());
        assert_eq!(EntryDistribution::from_spec("two-point:0.01").unwrap(), EntryDistribution::two_point(0.01).unwrap());
        assert!(EntryDistribution::from_spec("cauchy").is_err());
        assert!(EntryDistribution::from_spec("student-t").is_err());
        assert!(EntryDistribution::from_spec("gaussian:1").is_err());
        for d in catalogue() {
            assert_eq!(EntryDistribution::from_spec(&d.to_string()).unwrap(), d);
        }
    }

    #[test]
    fn empirical_file_loading() {
        let dir = std::env::temp_dir().join(format!("ht-emp-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.txt");
        std::fs::write(&path, "1\n2\n\n3\n").unwrap();
        let d = EntryDistribution::from_spec(&format!("empirical:{}", path.display())).unwrap();
        match d.family() {
            Family::Empirical { samples } => assert_eq!(&samples[..], &[1.0, 2.0, 3.0]),
            _ => unreachable!(),
        }
        std::fs::write(&path, "1\nx\n").unwrap();
        assert!(matches!(EntryDistribution::empirical_from_file(&path), Err(Error::Parse(_))));
    }
}
