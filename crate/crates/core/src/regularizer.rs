//! Diagonal contractions that fit the rows of a matrix into a controlled
//! Euclidean ball, built level by level from dyadic exceedance sets, and
//! their discretization to the grid `{1} U {2^(-2^k)}`.
//!
//! For a non-negative vector `y` and levels `tau_0..tau_K`, every level `k < K`
//! whose exceedance set `E_k = {i : y_i >= tau_k}` is too large, i.e.
//! `delta * |E_k| >= L 2^-k n`, shrinks the coordinates of `E_k` by
//! `f_k = L 2^-k n / (delta |E_k|)`. Using the nested indicators
//! `1{y_i >= tau_k}` as the exceedance fields gives the pointwise majorant
//! `y_i <= sum_k tau_{k+1} 1{y_i >= tau_k}` whenever `y_i <= tau_K`, so
//!
//! ```text
//! <D y, 1> <= (L n / delta) * sum_{k<K} tau_{k+1} 2^-k
//! ```
//!
//! holds for every input, not just on average.

use rand::Rng as _;
use rayon::prelude::*;

use crate::coverings::{GridOperator, GRID_MAX_CODE};
use crate::distributions::{pow_moment, EntryDistribution, LevelSequence};
use crate::error::{Error, Result};
use crate::norms::{inf2_upper, Matrix};
use crate::rng::Rng;

/// Smallest admissible budget constant.
pub const MIN_BUDGET: f64 = 2.0 * std::f64::consts::E;

/// Hard ceiling on the number of levels when raising `K` to cover large entries.
pub const MAX_LEVELS: usize = 256;

/// Relative slack used when checking the deterministic bounds in floating point.
const BOUND_SLACK: f64 = 1e-12;

/// What to do with coordinates above the deepest level `tau_K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Raise `K` for the row until `tau_K` covers its largest coordinate.
    RaiseLevels,
    /// Keep `K` and report the uncovered coordinates.
    Clamp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerParams {
    /// Budget constant `L >= 2e`.
    pub budget: f64,
    pub delta: f64,
    pub p_moment: f64,
    pub alpha: f64,
    /// Level count `K`; `None` selects `ceil(log2(L n / delta)) + 2`.
    pub level_cap: Option<usize>,
    pub overflow: OverflowPolicy,
}

impl RegularizerParams {
    pub fn new(delta: f64) -> Result<Self> {
        let p = Self {
            budget: MIN_BUDGET,
            delta,
            p_moment: 2.0,
            alpha: 0.5,
            level_cap: None,
            overflow: OverflowPolicy::RaiseLevels,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= MIN_BUDGET) {
            return Err(Error::Parameter(format!("budget L must be >= 2e, got {}", self.budget)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Parameter(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if !(self.p_moment >= 1.0 && self.p_moment.is_finite()) {
            return Err(Error::Parameter(format!("p must be >= 1, got {}", self.p_moment)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    /// `ceil(log2(L n / delta))`: below this many levels the truncated sum
    /// cannot be trusted.
    pub fn min_levels(&self, n: usize) -> usize {
        (self.budget * n as f64 / self.delta).log2().ceil().max(1.0) as usize
    }

    pub fn default_levels(&self, n: usize) -> usize {
        self.min_levels(n) + 2
    }

    pub fn levels_for(&self, n: usize) -> usize {
        self.level_cap.unwrap_or_else(|| self.default_levels(n))
    }

    fn shrink_threshold(&self, level: usize, n: usize) -> f64 {
        self.budget * (-(level as f64)).exp2() * n as f64 / self.delta
    }
}

/// One shrink step: the coordinates in `indices` are multiplied by
/// `exp(log_factor)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFactor {
    /// Row whose contraction produced the step (matrix regularizer only).
    pub row: Option<usize>,
    pub level: usize,
    pub indices: Vec<usize>,
    pub log_factor: f64,
}

/// Positive diagonal operator with entries in `(0, 1]`, stored in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalContraction {
    log_diag: Vec<f64>,
    factors: Vec<LevelFactor>,
    log_det: f64,
}

/// Sum with a fixed pairwise reduction tree.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

impl DiagonalContraction {
    pub fn identity(n: usize) -> Self {
        Self { log_diag: vec![0.0; n], factors: Vec::new(), log_det: 0.0 }
    }

    /// Replays the factor list on the identity.
    pub fn from_factors(n: usize, factors: Vec<LevelFactor>) -> Result<Self> {
        let mut log_diag = vec![0.0; n];
        for f in &factors {
            if !(f.log_factor <= 0.0) {
                return Err(Error::Domain(format!("shrink factor exp({}) exceeds 1", f.log_factor)));
            }
            for &i in &f.indices {
                if i >= n {
                    return Err(Error::Shape(format!("factor index {i} out of range for n = {n}")));
                }
                log_diag[i] += f.log_factor;
            }
        }
        let log_det = pairwise_sum(&log_diag);
        Ok(Self { log_diag, factors, log_det })
    }

    pub fn n(&self) -> usize {
        self.log_diag.len()
    }

    pub fn log_diagonal(&self) -> &[f64] {
        &self.log_diag
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.log_diag.iter().map(|l| l.exp()).collect()
    }

    pub fn factors(&self) -> &[LevelFactor] {
        &self.factors
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn is_identity(&self) -> bool {
        self.log_diag.iter().all(|l| *l == 0.0)
    }

    /// `sum_k |E_k| ln f_k` over the recorded factors.
    pub fn factor_log_det(&self) -> f64 {
        self.factors.iter().map(|f| f.indices.len() as f64 * f.log_factor).sum()
    }

    /// Checks entries in `(0,1]`, the log-determinant, and that replaying the
    /// factors reproduces the diagonal bit for bit.
    pub fn verify(&self) -> Result<()> {
        if self.log_diag.iter().any(|l| !(*l <= 0.0) || !l.is_finite()) {
            return Err(Error::Numerical("diagonal entry outside (0, 1]".into()));
        }
        let sum = self.log_diag.iter().sum::<f64>();
        if (sum - self.log_det).abs() > 1e-12 * sum.abs().max(1.0) {
            return Err(Error::Numerical(format!("log det {} != sum of logs {sum}", self.log_det)));
        }
        let replay = Self::from_factors(self.n(), self.factors.clone())?;
        if replay.log_diag != self.log_diag {
            return Err(Error::Numerical("factor decomposition does not reproduce the diagonal".into()));
        }
        Ok(())
    }
}

/// Output of [`heart_contraction`].
#[derive(Clone, Debug)]
pub struct HeartOutcome {
    pub contraction: DiagonalContraction,
    /// `<D y, 1>`.
    pub l1_value: f64,
    /// `(L n / delta) sum_{k<K} tau_{k+1} 2^-k`.
    pub l1_bound: f64,
    /// `|E_k|` for `k = 0..K-1`.
    pub exceedance_counts: Vec<usize>,
    /// Coordinates not dominated by the truncated majorant (above `tau_K`).
    pub uncovered: Vec<usize>,
}

impl HeartOutcome {
    pub fn bound_holds(&self) -> bool {
        self.l1_value <= self.l1_bound * (1.0 + BOUND_SLACK)
    }
}

/// Contraction from explicit exceedance sets `sets[k]`, `k = 0..K-1`.
fn contract_from_sets(
    n: usize,
    sets: Vec<Vec<usize>>,
    params: &RegularizerParams,
    row: Option<usize>,
) -> DiagonalContraction {
    let mut factors = Vec::new();
    for (k, set) in sets.into_iter().enumerate() {
        let nu = set.len();
        if nu == 0 {
            continue;
        }
        let threshold = params.shrink_threshold(k, n);
        if params.delta * nu as f64 >= params.budget * (-(k as f64)).exp2() * n as f64 {
            let f = threshold / nu as f64;
            if f < 1.0 {
                factors.push(LevelFactor { row, level: k, indices: set, log_factor: f.ln() });
            }
        }
    }
    DiagonalContraction::from_factors(n, factors).expect("factors built in range")
}

/// The level-by-level contraction of a non-negative vector `y`.
pub fn heart_contraction(
    y: &[f64],
    levels: &LevelSequence,
    params: &RegularizerParams,
) -> Result<HeartOutcome> {
    params.validate()?;
    if y.is_empty() {
        return Err(Error::Shape("empty input vector".into()));
    }
    if let Some(i) = y.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("coordinate {i} is negative or not finite: {}", y[i])));
    }
    let n = y.len();
    let k_max = levels.k_max();
    if k_max < params.min_levels(n) {
        return Err(Error::Parameter(format!(
            "need at least {} levels for n = {n}, got {k_max}",
            params.min_levels(n)
        )));
    }
    let tau = levels.values();
    let sets: Vec<Vec<usize>> = (0..k_max)
        .map(|k| (0..n).filter(|&i| y[i] >= tau[k]).collect())
        .collect();
    let exceedance_counts = sets.iter().map(Vec::len).collect();
    let uncovered = (0..n)
        .filter(|&i| {
            let z: f64 = (0..k_max).filter(|&k| y[i] >= tau[k]).map(|k| tau[k + 1]).sum();
            z < y[i]
        })
        .collect::<Vec<_>>();
    let contraction = contract_from_sets(n, sets, params, None);
    let l1_value = contraction
        .log_diagonal()
        .iter()
        .zip(y)
        .map(|(l, v)| l.exp() * v)
        .sum::<f64>();
    let l1_bound = params.budget * n as f64 / params.delta * levels.majorant_sum();
    let outcome = HeartOutcome { contraction, l1_value, l1_bound, exceedance_counts, uncovered };
    if outcome.uncovered.is_empty() && !outcome.bound_holds() {
        return Err(Error::Numerical(format!(
            "l1 fit violated: {} > {}",
            outcome.l1_value, outcome.l1_bound
        )));
    }
    Ok(outcome)
}

/// The same construction driven by independent Bernoulli(2^-k) fields instead
/// of nested exceedance indicators. Returns the majorant vector
/// `z_i = sum_k tau_{k+1} xi_i^k` and its contraction.
pub fn independent_heart(
    n: usize,
    levels: &LevelSequence,
    params: &RegularizerParams,
    rng: &mut Rng,
) -> Result<(Vec<f64>, DiagonalContraction)> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Shape("n must be >= 1".into()));
    }
    let k_max = levels.k_max();
    let mut z = vec![0.0; n];
    let mut sets = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let prob = (-(k as f64)).exp2();
        let set: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < prob).collect();
        for &i in &set {
            z[i] += levels.tau(k + 1);
        }
        sets.push(set);
    }
    Ok((z, contract_from_sets(n, sets, params, None)))
}

/// Output of [`row_regularizer`].
#[derive(Clone, Debug)]
pub struct RowRegularization {
    pub contraction: DiagonalContraction,
    /// Deterministic bound on every row norm of `A D`.
    pub row_norm_bound: f64,
    /// Per-row bounds `sqrt((L n / delta) sum_{k<K_i} tau_{k+1} 2^-k)`.
    pub row_bounds: Vec<f64>,
    /// Level count used for each row.
    pub row_levels: Vec<usize>,
    /// Rows whose per-row `l1` fit failed (always empty unless entries were
    /// left uncovered under [`OverflowPolicy::Clamp`]).
    pub l1_violations: Vec<usize>,
    /// Number of entries above the deepest level available.
    pub uncovered_entries: usize,
}

/// Levels of `|x|^2` extended until `tau_K` covers `max_y` (or no further
/// extension is possible).
fn covering_levels(
    dist: &EntryDistribution,
    params: &RegularizerParams,
    base: usize,
    max_y: f64,
) -> Result<LevelSequence> {
    let mut k = base;
    let mut levels = dist.levels(params.p_moment, k)?;
    if params.overflow == OverflowPolicy::Clamp {
        return Ok(levels);
    }
    while levels.tau(levels.k_max()) < max_y && k < MAX_LEVELS {
        k = (k + 8).min(MAX_LEVELS);
        match dist.levels(params.p_moment, k) {
            Ok(l) => levels = l,
            Err(Error::Resolution(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(levels)
}

fn truncate(levels: &LevelSequence, k: usize) -> LevelSequence {
    LevelSequence::new(levels.values()[..=k].to_vec(), levels.source()).expect("prefix of valid levels")
}

/// `D = prod_i T_i^{1/2}` where `T_i` is the heart contraction of the squared
/// entries of row `i`.
pub fn row_regularizer(
    a: &Matrix,
    dist: &EntryDistribution,
    params: &RegularizerParams,
) -> Result<RowRegularization> {
    params.validate()?;
    if !a.is_square() {
        return Err(Error::Shape(format!("expected a square matrix, got {}x{}", a.rows(), a.cols())));
    }
    let mut params = params.clone();
    params.p_moment = 2.0;
    let n = a.cols();
    let max_y = a.data().iter().map(|v| v * v).fold(0.0, f64::max);
    let base = params.levels_for(n).max(params.min_levels(n));
    let levels = covering_levels(dist, &params, base, max_y)?;
    let k_top = levels.k_max();

    let rows: Vec<(DiagonalContraction, f64, usize, bool, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y: Vec<f64> = a.row(i).iter().map(|v| pow_moment(v.abs(), 2.0)).collect();
            let row_max = y.iter().copied().fold(0.0, f64::max);
            let k_i = match params.overflow {
                OverflowPolicy::Clamp => base.min(k_top),
                OverflowPolicy::RaiseLevels => (base..=k_top)
                    .find(|&k| levels.tau(k) >= row_max)
                    .unwrap_or(k_top),
            };
            let lv = truncate(&levels, k_i);
            let out = heart_contraction(&y, &lv, &params)?;
            let bound = (out.l1_bound).sqrt();
            let mut c = out.contraction.clone();
            for f in c.factors.iter_mut() {
                f.row = Some(i);
            }
            Ok((c, bound, k_i, out.bound_holds(), out.uncovered.len()))
        })
        .collect::<Result<_>>()?;

    let mut factors = Vec::new();
    let mut row_bounds = Vec::with_capacity(n);
    let mut row_levels = Vec::with_capacity(n);
    let mut l1_violations = Vec::new();
    let mut uncovered_entries = 0;
    for (i, (c, bound, k_i, ok, unc)) in rows.into_iter().enumerate() {
        for mut f in c.factors {
            f.log_factor *= 0.5;
            factors.push(f);
        }
        row_bounds.push(bound);
        row_levels.push(k_i);
        if !ok {
            l1_violations.push(i);
        }
        uncovered_entries += unc;
    }
    let contraction = DiagonalContraction::from_factors(n, factors)?;
    let row_norm_bound = row_bounds.iter().copied().fold(0.0, f64::max);
    Ok(RowRegularization {
        contraction,
        row_norm_bound,
        row_bounds,
        row_levels,
        l1_violations,
        uncovered_entries,
    })
}

/// Grid value for one diagonal entry given its natural log: the largest
/// `2^-e`, `e in {0, 1, 2, 4, ..., 512}`, not exceeding `sqrt(2) t`.
/// Returns `(code, capped)`.
pub fn grid_code(log_t: f64) -> (u16, bool) {
    let needed = -0.5 - log_t / std::f64::consts::LN_2;
    if needed <= 0.0 {
        return (0, false);
    }
    let mut e: u16 = 1;
    while (e as f64) < needed {
        if e >= GRID_MAX_CODE {
            return (GRID_MAX_CODE, true);
        }
        e *= 2;
    }
    (e, false)
}

/// Output of [`discretize`].
#[derive(Clone, Debug)]
pub struct Discretized {
    pub grid: GridOperator,
    /// Coordinates where the exponent cap was hit; the upper half of the
    /// sandwich `t^2 <= t~ <= sqrt(2) t` fails there.
    pub capped: Vec<usize>,
}

/// Coordinatewise grid rounding with `t^2 <= t~ <= sqrt(2) t`.
pub fn discretize(d: &DiagonalContraction) -> Discretized {
    let mut capped = Vec::new();
    let codes = d
        .log_diagonal()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let (e, cap) = grid_code(l);
            if cap {
                capped.push(i);
            }
            e
        })
        .collect();
    Discretized { grid: GridOperator::new(codes).expect("codes come from the grid"), capped }
}

/// Pass/fail record for a grid regularization.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCertificate {
    pub n: usize,
    pub delta: f64,
    pub logdet: f64,
    pub logdet_threshold: f64,
    pub max_row_norm: f64,
    pub inf2_upper: f64,
    pub pass: bool,
}

impl GridCertificate {
    pub fn to_record(&self) -> String {
        format!(
            "n={}\ndelta={:?}\nlogdet={:?}\nlogdet_threshold={:?}\nmax_row_norm={:?}\ninf2_upper={:?}\npass={}\n",
            self.n, self.delta, self.logdet, self.logdet_threshold, self.max_row_norm, self.inf2_upper, self.pass
        )
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got {line:?}")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::Parse(format!("missing key {k}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Parse(format!("bad value for {k}")))
        };
        Ok(Self {
            n: get("n")?.parse().map_err(|_| Error::Parse("bad value for n".into()))?,
            delta: num("delta")?,
            logdet: num("logdet")?,
            logdet_threshold: num("logdet_threshold")?,
            max_row_norm: num("max_row_norm")?,
            inf2_upper: num("inf2_upper")?,
            pass: get("pass")?.parse().map_err(|_| Error::Parse("bad value for pass".into()))?,
        })
    }
}

/// Output of [`regularize_to_grid`].
#[derive(Clone, Debug)]
pub struct GridRegularization {
    pub rows: RowRegularization,
    pub discretized: Discretized,
    pub certificate: GridCertificate,
}

impl GridRegularization {
    pub fn grid(&self) -> &GridOperator {
        &self.discretized.grid
    }
}

/// `row_regularizer` followed by `discretize`, certified against
/// `log det >= -delta n`.
pub fn regularize_to_grid(
    a: &Matrix,
    dist: &EntryDistribution,
    params: &RegularizerParams,
) -> Result<GridRegularization> {
    let rows = row_regularizer(a, dist, params)?;
    let discretized = discretize(&rows.contraction);
    let ad = a.scale_columns(&discretized.grid.diagonal())?;
    let n = a.cols();
    let logdet = discretized.grid.log_det();
    let logdet_threshold = -params.delta * n as f64;
    let certificate = GridCertificate {
        n,
        delta: params.delta,
        logdet,
        logdet_threshold,
        max_row_norm: ad.row_norms().into_iter().fold(0.0, f64::max),
        inf2_upper: inf2_upper(&ad)?,
        pass: logdet >= logdet_threshold,
    };
    Ok(GridRegularization { rows, discretized, certificate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::LevelSource;
    use crate::rng::rng_from_seed;

    fn params(delta: f64) -> RegularizerParams {
        RegularizerParams::new(delta).unwrap()
    }

    fn levels(values: Vec<f64>) -> LevelSequence {
        LevelSequence::new(values, LevelSource::AnalyticInverseCdf).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(RegularizerParams::new(0.0).is_err());
        assert!(RegularizerParams::new(1.5).is_err());
        let mut p = params(0.5);
        p.budget = 5.0;
        assert!(p.validate().is_err());
        // n = 4, delta = 1: log2(8e) = 4.44 -> 5 levels minimum.
        assert_eq!(params(1.0).min_levels(4), 5);
        assert_eq!(params(1.0).default_levels(4), 7);
    }

    #[test]
    fn no_trigger_gives_identity() {
        let lv = LevelSequence::from_survival(|t| (-t).exp().min(1.0), 12).unwrap();
        let y = vec![0.1, 0.2, 0.3, 0.05];
        let out = heart_contraction(&y, &lv, &params(1.0)).unwrap();
        assert!(out.contraction.is_identity());
        assert_eq!(out.contraction.log_det(), 0.0);
        assert!(out.bound_holds());
    }

    /// Hand trace: n = 4, delta = 1, L = 2e. Level k triggers iff
    /// nu_k >= 8e * 2^-k, i.e. nu_k >= 21.7, 10.9, 5.4, 2.7, 1.36, 0.68, ...
    /// With every coordinate at 10 and levels (0, 1, 2, 3, 4, 5, 6, 20), the
    /// exceedance sets for k = 0..6 are all four coordinates, so levels 3..6
    /// trigger with factors 8e 2^-k / 4 = 0.6796, 0.3398, 0.1699, 0.0850.
    #[test]
    fn hand_traced_four_vector() {
        let e = std::f64::consts::E;
        let lv = levels(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 20.0]);
        let y = vec![10.0; 4];
        let out = heart_contraction(&y, &lv, &params(1.0)).unwrap();
        let c = &out.contraction;
        assert_eq!(out.exceedance_counts, vec![4; 7]);
        let trig: Vec<usize> = c.factors().iter().map(|f| f.level).collect();
        assert_eq!(trig, vec![3, 4, 5, 6]);
        let expect_log: f64 = (3..=6).map(|k| (2.0 * e * 4.0 * (-(k as f64)).exp2() / 4.0).ln()).sum();
        for l in c.log_diagonal() {
            assert!((l - expect_log).abs() < 1e-14);
        }
        // d = 2e*2^-3 * 2e*2^-4 * 2e*2^-5 * 2e*2^-6 = (2e)^4 2^-18
        let d = (2.0 * e).powi(4) * (-18f64).exp2();
        assert!((c.diagonal()[0] - d).abs() < 1e-15);
        assert!((out.l1_value - 40.0 * d).abs() < 1e-12);
        assert!(out.bound_holds());
        c.verify().unwrap();
    }

    #[test]
    fn heart_errors() {
        let lv = levels((0..10).map(|k| k as f64).collect());
        assert!(matches!(heart_contraction(&[1.0, -1.0], &lv, &params(1.0)), Err(Error::Domain(_))));
        assert!(matches!(heart_contraction(&[], &lv, &params(1.0)), Err(Error::Shape(_))));
        let short = levels(vec![0.0, 1.0]);
        assert!(matches!(heart_contraction(&[1.0; 4], &short, &params(1.0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn determinant_bookkeeping() {
        let dist = EntryDistribution::student_t(3.0).unwrap();
        let lv = dist.levels(2.0, 16).unwrap();
        let mut rng = rng_from_seed(4);
        for _ in 0..50 {
            let y: Vec<f64> = dist.sample(&mut rng, 64).unwrap().iter().map(|x| x * x).collect();
            let out = heart_contraction(&y, &lv, &params(0.05)).unwrap();
            let c = &out.contraction;
            let det = c.log_det().exp();
            let from_factors = c.factor_log_det().exp();
            assert!((det - from_factors).abs() <= 1e-10 * det.max(f64::MIN_POSITIVE));
            c.verify().unwrap();
        }
    }

    #[test]
    fn majorant_flags_coordinates_above_top_level() {
        let lv = levels((0..=10).map(|k| k as f64).collect());
        let mut y = vec![0.5; 8];
        y[3] = 100.0;
        let mut p = params(1.0);
        p.overflow = OverflowPolicy::Clamp;
        let out = heart_contraction(&y, &lv, &p).unwrap();
        assert_eq!(out.uncovered, vec![3]);
    }

    #[test]
    fn bounded_matrix_gives_identity() {
        // |a_ij|^2 below tau_1 for the gaussian second-moment levels.
        let dist = EntryDistribution::gaussian();
        let tau1 = dist.levels(2.0, 1).unwrap().tau(1);
        let a = Matrix::from_fn(16, 16, |i, j| if (i + j) % 2 == 0 { 0.5 } else { -0.5 } * tau1.sqrt());
        let r = row_regularizer(&a, &dist, &params(0.5)).unwrap();
        assert!(r.contraction.is_identity());
        let r = row_regularizer(&Matrix::identity(32), &dist, &params(0.5)).unwrap();
        assert!(r.contraction.is_identity());
    }

    #[test]
    fn row_regularizer_rejects_rectangular() {
        let a = Matrix::zeros(3, 4);
        assert!(matches!(
            row_regularizer(&a, &EntryDistribution::gaussian(), &params(0.5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn single_row_matches_heart() {
        let dist = EntryDistribution::pareto(2.5).unwrap();
        let mut rng = rng_from_seed(17);
        let a = Matrix::random(1, 1, &dist, &mut rng);
        let p = params(0.3);
        let r = row_regularizer(&a, &dist, &p).unwrap();
        let lv = dist.levels(2.0, r.row_levels[0]).unwrap();
        let h = heart_contraction(&[a.get(0, 0).powi(2)], &lv, &p).unwrap();
        assert!((r.contraction.log_det() - 0.5 * h.contraction.log_det()).abs() < 1e-15);
    }

    #[test]
    fn row_norms_respect_bound() {
        let dist = EntryDistribution::gaussian();
        let p = params(0.1);
        for seed in 0..5 {
            let a = Matrix::random(128, 128, &dist, &mut rng_from_seed(seed));
            let r = row_regularizer(&a, &dist, &p).unwrap();
            let ad = a.scale_columns(&r.contraction.diagonal()).unwrap();
            for (i, norm) in ad.row_norms().into_iter().enumerate() {
                assert!(norm <= r.row_bounds[i] * (1.0 + 1e-12));
            }
            assert!(r.l1_violations.is_empty());
            assert_eq!(r.uncovered_entries, 0);
            r.contraction.verify().unwrap();
        }
    }

    #[test]
    fn grid_rounding_examples() {
        assert_eq!(grid_code(0.0), (0, false));
        assert_eq!(grid_code(0.5f64.ln()), (1, false));
        assert_eq!(grid_code(0.3f64.ln()), (2, false));
        let (e, cap) = grid_code(-1e4);
        assert_eq!((e, cap), (GRID_MAX_CODE, true));
    }

    /// Direct search over the grid values for the oracle.
    fn grid_oracle(t: f64) -> f64 {
        let mut best = 0.0f64;
        for v in std::iter::once(1.0).chain((0..=9).map(|k| (-((1u32 << k) as f64)).exp2())) {
            if v <= std::f64::consts::SQRT_2 * t {
                best = best.max(v);
            }
        }
        best
    }

    #[test]
    fn discretization_matches_grid_search() {
        let mut rng = rng_from_seed(23);
        for _ in 0..100_000 {
            let t: f64 = 1.0 - rng.random::<f64>();
            let (e, cap) = grid_code(t.ln());
            assert!(!cap);
            let tt = (-(e as f64)).exp2();
            assert!(t * t <= tt && tt <= std::f64::consts::SQRT_2 * t, "t = {t}");
            assert_eq!(tt, grid_oracle(t), "t = {t}");
        }
    }

    #[test]
    fn discretize_determinant_comparison() {
        let dist = EntryDistribution::student_t(3.0).unwrap();
        let a = Matrix::random(64, 64, &dist, &mut rng_from_seed(2));
        let r = row_regularizer(&a, &dist, &params(0.1)).unwrap();
        let g = discretize(&r.contraction);
        assert!(g.capped.is_empty());
        assert!(g.grid.log_det() >= 2.0 * r.contraction.log_det() - 1e-9);
        for (gv, dv) in g.grid.diagonal().iter().zip(r.contraction.diagonal()) {
            assert!(*gv <= std::f64::consts::SQRT_2 * dv * (1.0 + 1e-12));
        }
    }

    #[test]
    fn identity_matrix_certificate() {
        let dist = EntryDistribution::gaussian();
        let out = regularize_to_grid(&Matrix::identity(16), &dist, &params(0.25)).unwrap();
        assert!(out.grid().is_identity());
        assert!(out.certificate.pass);
        assert_eq!(out.certificate.logdet, 0.0);
        let back = GridCertificate::from_record(&out.certificate.to_record()).unwrap();
        assert_eq!(back, out.certificate);
    }

    #[test]
    fn independent_mode_marginals() {
        let lv = EntryDistribution::gaussian().levels(2.0, 12).unwrap();
        let p = params(0.5);
        let mut rng = rng_from_seed(31);
        let (z, d) = independent_heart(200, &lv, &p, &mut rng).unwrap();
        assert_eq!(z.len(), 200);
        d.verify().unwrap();
    }
}
