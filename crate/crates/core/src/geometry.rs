//! The sphere split into compressible and incompressible vectors, nets on the
//! compressible part, a certified scan for the essential least common
//! denominator, and integer-point nets for LCD level sets.

use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::norms::norm;
use crate::rng::Rng;

/// Tolerance on `||x|| = 1`.
pub const UNIT_TOL: f64 = 1e-10;

/// Default number of points allowed in an exhaustive compressible net.
pub const DEFAULT_NET_BUDGET: usize = 2_000_000;

/// Default cap on lattice points enumerated by [`integer_point_net`].
pub const DEFAULT_LATTICE_CAP: usize = 5_000_000;

/// Consecutive rejections that end the greedy packing of a sub-sphere.
const PACKING_PATIENCE: usize = 2_000;

/// Function evaluations allowed in one LCD scan before giving up refinement.
const LCD_EVAL_BUDGET: usize = 50_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereParams {
    pub theta: f64,
    pub rho: f64,
}

impl SphereParams {
    pub fn new(theta: f64, rho: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::Parameter(format!("theta must lie in (0, 1), got {theta}")));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Parameter(format!("rho must lie in (0, 1), got {rho}")));
        }
        Ok(Self { theta, rho })
    }

    /// `floor(theta n)`, the sparsity level.
    pub fn sparsity(&self, n: usize) -> usize {
        sparsity(n, self.theta)
    }

    /// `r = rho^2 sqrt(theta) / 2`, the LCD tolerance under which
    /// incompressible vectors have LCD at least `q sqrt(n)`.
    pub fn incompressible_r(&self) -> f64 {
        0.5 * self.rho * self.rho * self.theta.sqrt()
    }

    /// `q = sqrt(theta) / 3`.
    pub fn incompressible_q(&self) -> f64 {
        self.theta.sqrt() / 3.0
    }
}

fn sparsity(n: usize, theta: f64) -> usize {
    ((theta * n as f64) + 1e-12).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SphereClass {
    Comp,
    Incomp,
}

impl fmt::Display for SphereClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SphereClass::Comp => "comp",
            SphereClass::Incomp => "incomp",
        })
    }
}

/// Rejects vectors that are not unit length; nothing is normalized silently.
pub fn check_unit(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Shape("empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("vector has non-finite entries".into()));
    }
    let r = norm(x);
    if (r - 1.0).abs() > UNIT_TOL {
        return Err(Error::Domain(format!("expected a unit vector, got norm {r}")));
    }
    Ok(())
}

/// Distance from `x` to the `floor(theta n)`-sparse vectors: the norm of all
/// but the largest-magnitude coordinates.
pub fn sparse_distance(x: &[f64], theta: f64) -> Result<f64> {
    check_unit(x)?;
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Parameter(format!("theta must lie in (0, 1], got {theta}")));
    }
    let m = sparsity(x.len(), theta);
    let mut sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    Ok(sq[m.min(sq.len())..].iter().sum::<f64>().sqrt())
}

/// `Comp` iff the sparse distance is at most `rho`.
pub fn classify(x: &[f64], params: &SphereParams) -> Result<SphereClass> {
    Ok(if sparse_distance(x, params.theta)? <= params.rho { SphereClass::Comp } else { SphereClass::Incomp })
}

/// Indices with `rho/sqrt(2n) <= |x_i| <= 1/sqrt(theta n)`. For incompressible
/// `x` there are at least `rho^2 theta n / 2` of them; a shortfall is reported
/// as a numerical error.
pub fn spread_set(x: &[f64], params: &SphereParams) -> Result<Vec<usize>> {
    let class = classify(x, params)?;
    let n = x.len() as f64;
    let lo = params.rho / (2.0 * n).sqrt();
    let hi = 1.0 / (params.theta * n).sqrt();
    let set: Vec<usize> = (0..x.len()).filter(|&i| (lo..=hi).contains(&x[i].abs())).collect();
    if class == SphereClass::Incomp && (set.len() as f64) < 0.5 * params.rho * params.rho * params.theta * n {
        return Err(Error::Numerical(format!(
            "incompressible vector with only {} spread coordinates (need {})",
            set.len(),
            0.5 * params.rho * params.rho * params.theta * n
        )));
    }
    Ok(set)
}

/// Uniform point on `S^{n-1}`.
pub fn random_unit(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let r = norm(&g);
        if r > 0.0 {
            return g.iter().map(|v| v / r).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Option<Vec<f64>> {
    let r = norm(&v);
    (r > 0.0 && r.is_finite()).then(|| v.into_iter().map(|x| x / r).collect())
}

/// A sparse unit vector on a random support plus a perturbation of random
/// size, normalized. Used to produce vectors near the Comp/Incomp boundary.
fn sparse_plus_noise(n: usize, m: usize, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let support = sample_indices(rng, n, m.max(1).min(n));
    let mut v = vec![0.0; n];
    for i in support.iter() {
        v[i] = rng.sample(StandardNormal);
    }
    let base = normalized(v).unwrap_or_else(|| random_unit(n, rng));
    let g = random_unit(n, rng);
    normalized(base.iter().zip(&g).map(|(b, e)| b + noise * e).collect()).unwrap_or(base)
}

/// Rejection sample of a compressible unit vector.
pub fn random_compressible(n: usize, params: &SphereParams, rng: &mut Rng) -> Result<Vec<f64>> {
    let m = params.sparsity(n);
    if m == 0 {
        return Err(Error::Parameter(format!("theta n < 1 for n = {n}: no sparse vectors")));
    }
    for _ in 0..10_000 {
        let noise = rng.random::<f64>() * params.rho;
        let x = sparse_plus_noise(n, m, noise, rng);
        if classify(&x, params)? == SphereClass::Comp {
            return Ok(x);
        }
    }
    Err(Error::Budget("no compressible vector found in 10^4 draws".into()))
}

/// Rejection sample of an incompressible unit vector: half of the draws are
/// uniform on the sphere, half are sparse vectors with noise (closer to the
/// boundary).
pub fn random_incompressible(n: usize, params: &SphereParams, rng: &mut Rng) -> Result<Vec<f64>> {
    let m = params.sparsity(n);
    for _ in 0..10_000 {
        let x = if rng.random::<bool>() {
            random_unit(n, rng)
        } else {
            let noise = params.rho + rng.random::<f64>() * 2.0;
            sparse_plus_noise(n, m, noise, rng)
        };
        if classify(&x, params)? == SphereClass::Incomp {
            return Ok(x);
        }
    }
    Err(Error::Budget("no incompressible vector found in 10^4 draws".into()))
}

/// How [`comp_net`] chooses supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetMode {
    /// Every support of size `floor(theta n)`.
    Exhaustive { budget: usize },
    /// This many uniformly random supports.
    Sampled { supports: usize },
}

/// Union over supports of a `rho`-net of the sub-sphere, stored as the
/// support list and one shared sub-sphere net.
#[derive(Clone, Debug)]
pub struct CompNet {
    pub n: usize,
    pub params: SphereParams,
    pub supports: Vec<Vec<usize>>,
    pub subnet: Vec<Vec<f64>>,
    pub exhaustive: bool,
}

fn binomial_f64(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn all_supports(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..m).collect();
    loop {
        out.push(cur.clone());
        let mut i = m;
        while i > 0 && cur[i - 1] == n - m + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..m {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Greedy `rho`-separated set on `S^{m-1}`: stops after a long run of
/// rejected samples, so it is a `rho`-net with high probability.
/// More than `cap` points is a budget error.
pub fn sphere_packing(m: usize, rho: f64, cap: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if m == 1 {
        return Ok(vec![vec![1.0], vec![-1.0]]);
    }
    let mut kept: Vec<Vec<f64>> = Vec::new();
    let mut misses = 0;
    let r2 = rho * rho;
    while misses < PACKING_PATIENCE {
        let p = random_unit(m, rng);
        let far = kept
            .iter()
            .all(|q| q.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() > r2);
        if far {
            if kept.len() == cap {
                return Err(Error::Budget(format!("rho-packing of S^{} exceeds {cap} points", m - 1)));
            }
            kept.push(p);
            misses = 0;
        } else {
            misses += 1;
        }
    }
    Ok(kept)
}

/// `(1 + 2/rho)^m`: volumetric bound on a `rho`-separated set in `S^{m-1}`.
fn packing_size_bound(m: usize, rho: f64) -> f64 {
    (1.0 + 2.0 / rho).powi(m as i32)
}

/// `ln((e/theta)^{theta n} (5/rho)^{theta n})`.
pub fn comp_net_log_bound(n: usize, params: &SphereParams) -> f64 {
    params.theta * n as f64 * ((std::f64::consts::E / params.theta).ln() + (5.0 / params.rho).ln())
}

pub fn comp_net(n: usize, params: &SphereParams, mode: NetMode, rng: &mut Rng) -> Result<CompNet> {
    let m = params.sparsity(n);
    if m == 0 {
        return Err(Error::Parameter(format!("theta n < 1 for n = {n}: no sparse vectors")));
    }
    let (budget, count) = match mode {
        NetMode::Exhaustive { budget } => (budget, binomial_f64(n, m)),
        NetMode::Sampled { supports } => (DEFAULT_NET_BUDGET.max(supports), supports.max(1) as f64),
    };
    // Refuse before packing when even the supports do not fit, or when the
    // volumetric bound on the sub-sphere net is far beyond the budget.
    if count > budget as f64 || count * packing_size_bound(m, params.rho) > 1e3 * budget as f64 {
        return Err(Error::Budget(format!(
            "net over {count:.3e} supports of size {m} may exceed the budget of {budget} points; use sampled mode"
        )));
    }
    let cap = ((budget as f64 / count).floor() as usize).max(2);
    let subnet = sphere_packing(m, params.rho, cap, rng)?;
    let (supports, exhaustive) = match mode {
        NetMode::Exhaustive { .. } => (all_supports(n, m), true),
        NetMode::Sampled { supports } => {
            let s = (0..supports)
                .map(|_| {
                    let mut v = sample_indices(rng, n, m).into_vec();
                    v.sort_unstable();
                    v
                })
                .collect();
            (s, false)
        }
    };
    let net = CompNet { n, params: *params, supports, subnet, exhaustive };
    if exhaustive && (net.len() as f64).ln() > comp_net_log_bound(n, params) + 1e-9 {
        return Err(Error::Numerical(format!(
            "net of size {} exceeds the (e/theta)^(theta n) (5/rho)^(theta n) bound",
            net.len()
        )));
    }
    Ok(net)
}

impl CompNet {
    pub fn len(&self) -> usize {
        self.supports.len() * self.subnet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn embed(&self, support: &[usize], p: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        for (&i, &c) in support.iter().zip(p) {
            v[i] = c;
        }
        v
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        self.supports.iter().flat_map(move |s| self.subnet.iter().map(move |p| self.embed(s, p)))
    }

    /// Distance from `x` to the closest net point on the support of its
    /// largest `floor(theta n)` coordinates (an upper bound on the distance to
    /// the net). `None` if that support is not part of the net.
    pub fn distance_on_top_support(&self, x: &[f64]) -> Option<f64> {
        let m = self.params.sparsity(self.n);
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
        let mut top = idx[..m].to_vec();
        top.sort_unstable();
        let s = self.supports.iter().find(|s| **s == top)?;
        let off: f64 = (0..x.len()).filter(|i| top.binary_search(i).is_err()).map(|i| x[i] * x[i]).sum();
        let best = self
            .subnet
            .iter()
            .map(|p| s.iter().zip(p).map(|(&i, c)| (x[i] - c) * (x[i] - c)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        Some((best + off).sqrt())
    }
}

/// Parameters of the LCD scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LcdParams {
    pub h: f64,
    pub r: f64,
    pub t_max: f64,
    /// Coarse step; at most `min(r, 1)/8`.
    pub step: f64,
    /// Width at which refinement stops.
    pub tol: f64,
}

impl LcdParams {
    pub fn new(h: f64, r: f64, t_max: f64) -> Result<Self> {
        let p = Self { h, r, t_max, step: r.min(1.0) / 8.0, tol: 1e-9 };
        p.validate()?;
        Ok(p)
    }

    pub fn with_step(mut self, step: f64) -> Result<Self> {
        self.step = step;
        self.validate()?;
        Ok(self)
    }

    pub fn with_tol(mut self, tol: f64) -> Result<Self> {
        self.tol = tol;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::Parameter(format!("h must be positive, got {}", self.h)));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Parameter(format!("r must lie in (0, 1), got {}", self.r)));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::Parameter(format!("t_max must be positive and finite, got {}", self.t_max)));
        }
        if !(self.step > 0.0 && self.step <= self.r.min(1.0) / 8.0 * (1.0 + 1e-12)) {
            return Err(Error::Parameter(format!(
                "coarse step {} must lie in (0, min(r,1)/8 = {}]",
                self.step,
                self.r.min(1.0) / 8.0
            )));
        }
        if !(self.tol > 0.0 && self.tol <= self.step) {
            return Err(Error::Parameter(format!("tolerance {} must lie in (0, step]", self.tol)));
        }
        Ok(())
    }
}

/// Scan outcome: the LCD lies in `[lower_bound, t_star]`, or above
/// `lower_bound` when censored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LcdResult {
    /// First point found with `dist(t x, Z^n) < min(r t, h)`; `None` when
    /// censored at `t_max`.
    pub t_star: Option<f64>,
    /// `dist(t_star x, Z^n)`.
    pub dist: Option<f64>,
    /// No solution exists in `(0, lower_bound)`.
    pub lower_bound: f64,
    pub censored: bool,
}

impl LcdResult {
    /// Upper end of the bracket (`inf` when censored).
    pub fn upper(&self) -> f64 {
        self.t_star.unwrap_or(f64::INFINITY)
    }

    /// `t_star=<t>|censored;dist=<d>;lower_bound=<l>`.
    pub fn to_record(&self) -> String {
        match (self.t_star, self.dist) {
            (Some(t), Some(d)) => format!("t_star={t:?}\ndist={d:?}\nlower_bound={:?}\n", self.lower_bound),
            _ => format!("censored=true\nlower_bound={:?}\n", self.lower_bound),
        }
    }
}

/// `dist(t x, Z^n)`.
pub fn lattice_distance(x: &[f64], t: f64) -> f64 {
    x.iter()
        .map(|&v| {
            let y = t * v;
            let d = y - y.round();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

struct Scan<'a> {
    x: &'a [f64],
    p: LcdParams,
    evals: usize,
}

impl Scan<'_> {
    /// `min(r t, h) - dist(t x, Z^n)`: positive exactly at solutions.
    fn f(&mut self, t: f64) -> f64 {
        self.evals += 1;
        (self.p.r * t).min(self.p.h) - lattice_distance(self.x, t)
    }

    fn lipschitz(&self) -> f64 {
        1.0 + self.p.r
    }
}

/// Certified scan for `inf{t > 0 : dist(t x, Z^n) < min(r t, h)}`.
///
/// For `t <= 1/2` every `|t x_i| <= 1/2`, so the distance is `t > r t` and
/// nothing can be found; the scan starts there. The margin function is
/// `(1+r)`-Lipschitz, so an interval `[a, b]` is solution-free once
/// `(F(a) + F(b))/2 + (1+r)(b-a)/2 <= 0`. Intervals that cannot be cleared are
/// split left first down to `tol`; the first point with `F > 0` is `t_star`.
pub fn lcd(x: &[f64], params: &LcdParams) -> Result<LcdResult> {
    check_unit(x)?;
    params.validate()?;
    let mut scan = Scan { x, p: *params, evals: 0 };
    let start = 0.5f64.min(params.t_max);
    let mut lower = start;
    let mut lower_frozen = false;
    let mut a = start;
    let mut fa = scan.f(a);
    if fa > 0.0 {
        // Unreachable for unit x; kept for safety.
        return Ok(LcdResult { t_star: Some(a), dist: Some(lattice_distance(x, a)), lower_bound: 0.0, censored: false });
    }
    while a < params.t_max {
        let b = (a + params.step).min(params.t_max);
        let fb = scan.f(b);
        // Stack of pending intervals, processed left to right.
        let mut stack = vec![(a, fa, b, fb)];
        while let Some((lo, flo, hi, fhi)) = stack.pop() {
            let width = hi - lo;
            if 0.5 * (flo + fhi) + 0.5 * scan.lipschitz() * width <= 0.0 {
                if !lower_frozen {
                    lower = hi;
                }
                continue;
            }
            if width <= params.tol || scan.evals > LCD_EVAL_BUDGET {
                if fhi > 0.0 {
                    return Ok(LcdResult {
                        t_star: Some(hi),
                        dist: Some(lattice_distance(x, hi)),
                        lower_bound: lower,
                        censored: false,
                    });
                }
                lower_frozen = true;
                continue;
            }
            let mid = 0.5 * (lo + hi);
            let fm = scan.f(mid);
            if fm > 0.0 && mid - lo <= params.tol {
                return Ok(LcdResult {
                    t_star: Some(mid),
                    dist: Some(lattice_distance(x, mid)),
                    lower_bound: lower,
                    censored: false,
                });
            }
            stack.push((mid, fm, hi, fhi));
            stack.push((lo, flo, mid, fm));
        }
        a = b;
        fa = fb;
    }
    Ok(LcdResult { t_star: None, dist: None, lower_bound: lower, censored: true })
}

/// Whether the LCD lies in `[k, 2k)`, decided from the certified bracket.
pub fn level_set_membership(x: &[f64], k: f64, params: &LcdParams) -> Result<bool> {
    if !(k > 0.0) {
        return Err(Error::Parameter(format!("k must be positive, got {k}")));
    }
    let res = lcd(x, params)?;
    let (lo, hi) = (res.lower_bound, res.upper());
    if hi < k || lo >= 2.0 * k {
        Ok(false)
    } else if lo >= k && hi < 2.0 * k {
        Ok(true)
    } else {
        Err(Error::Indeterminate(format!("LCD bracket [{lo}, {hi}] straddles [{k}, {})", 2.0 * k)))
    }
}

/// Normalized primitive lattice directions `p/||p||`, `0 < ||p|| <= 3k`.
#[derive(Clone, Debug)]
pub struct IntegerNet {
    pub points: Vec<Vec<f64>>,
    /// Non-zero lattice points in the ball of radius `3k`.
    pub lattice_count: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Enumerates lattice points of squared norm at most `r2` coordinate by
/// coordinate; `visit` sees each non-zero point.
fn for_each_lattice_point(n: usize, r2: i64, cap: usize, visit: &mut impl FnMut(&[i64])) -> Result<u64> {
    fn rec(
        cur: &mut Vec<i64>,
        n: usize,
        left: i64,
        count: &mut u64,
        cap: usize,
        visit: &mut impl FnMut(&[i64]),
    ) -> Result<()> {
        if cur.len() == n {
            if cur.iter().any(|&c| c != 0) {
                *count += 1;
                if *count > cap as u64 {
                    return Err(Error::Cap(format!("more than {cap} lattice points")));
                }
                visit(cur);
            }
            return Ok(());
        }
        let m = (left as f64).sqrt().floor() as i64;
        let m = (m - 1..=m + 1).rev().find(|v| v * v <= left).unwrap_or(0).max(0);
        for c in -m..=m {
            cur.push(c);
            rec(cur, n, left - c * c, count, cap, visit)?;
            cur.pop();
        }
        Ok(())
    }
    let mut count = 0;
    rec(&mut Vec::with_capacity(n), n, r2, &mut count, cap, visit)?;
    Ok(count)
}

/// `{p/||p|| : p in Z^n, 0 < ||p|| <= 3k}` without duplicates (one point per
/// primitive vector), in lexicographic order of the primitive vectors.
pub fn integer_point_net(n: usize, k: f64, cap: usize) -> Result<IntegerNet> {
    if n == 0 {
        return Err(Error::Parameter("n must be >= 1".into()));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Parameter(format!("k must be positive, got {k}")));
    }
    let radius = 3.0 * k;
    let r2 = (radius * radius * (1.0 + 1e-12)).floor() as i64;
    let mut points = Vec::new();
    let lattice_count = for_each_lattice_point(n, r2, cap, &mut |p| {
        let g = p.iter().fold(0u64, |g, &c| gcd(g, c.unsigned_abs()));
        if g == 1 {
            let len = (p.iter().map(|&c| c * c).sum::<i64>() as f64).sqrt();
            points.push(p.iter().map(|&c| c as f64 / len).collect());
        }
    })?;
    debug_assert!(points.len() as u64 <= lattice_count);
    Ok(IntegerNet { points, lattice_count })
}

/// Euclidean distance from `x` to the nearest point of `net`.
pub fn nearest_distance(net: &[Vec<f64>], x: &[f64]) -> f64 {
    net.iter()
        .map(|p| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}
