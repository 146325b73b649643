//! Grid operators and the lazy covering of `B_2^n` by translates of
//! parallelepipeds `D((nδ)^{-1/2} B_inf^n)`.
//!
//! The collection of parallelepipeds is never built. A point is mapped to the
//! parallelepiped containing it by [`locate_parallelepiped`]; nets are refined
//! on demand through [`RefinedNet`].

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::float::FloatCore;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::norms::{inf2_upper, norm, Matrix};

/// Largest exponent code; the smallest grid value is `2^-512`.
pub const GRID_MAX_CODE: u16 = 512;

/// Tolerance on `||x|| <= 1` for points fed to the locators.
pub const UNIT_BALL_SLACK: f64 = 1e-10;

/// Diagonal operator with entries `2^-e_i`, `e_i in {0, 1, 2, 4, ..., 512}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridOperator {
    codes: Vec<u16>,
}

fn valid_code(e: u16) -> bool {
    e == 0 || (e.is_power_of_two() && e <= GRID_MAX_CODE)
}

impl GridOperator {
    pub fn new(codes: Vec<u16>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Shape("grid operator needs n >= 1".into()));
        }
        if let Some(i) = codes.iter().position(|&e| !valid_code(e)) {
            return Err(Error::Domain(format!("code {} at {i} is not 0 or a power of two <= 512", codes[i])));
        }
        Ok(Self { codes })
    }

    pub fn identity(n: usize) -> Self {
        Self { codes: vec![0; n.max(1)] }
    }

    pub fn n(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.codes.iter().map(|&e| (-(e as f64)).exp2()).collect()
    }

    pub fn log_diagonal(&self) -> Vec<f64> {
        self.codes.iter().map(|&e| -(e as f64) * std::f64::consts::LN_2).collect()
    }

    /// Sum of codes; the determinant is `2^-code_sum`.
    pub fn code_sum(&self) -> u64 {
        self.codes.iter().map(|&e| e as u64).sum()
    }

    pub fn log_det(&self) -> f64 {
        -(self.code_sum() as f64) * std::f64::consts::LN_2
    }

    pub fn is_identity(&self) -> bool {
        self.codes.iter().all(|&e| e == 0)
    }

    /// Space-separated exponent codes.
    pub fn to_text(&self) -> String {
        let parts: Vec<String> = self.codes.iter().map(u16::to_string).collect();
        parts.join(" ")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let codes = text
            .split_whitespace()
            .map(|t| t.parse::<u16>().map_err(|_| Error::Parse(format!("bad grid code {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(codes)
    }
}

impl fmt::Display for GridOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Largest admissible code sum for `det >= exp(-delta n)`.
fn code_budget(n: usize, delta: f64) -> u64 {
    let limit = delta * n as f64;
    let mut b = (limit / std::f64::consts::LN_2).floor().max(0.0) as u64;
    while b > 0 && b as f64 * std::f64::consts::LN_2 > limit {
        b -= 1;
    }
    while (b + 1) as f64 * std::f64::consts::LN_2 <= limit {
        b += 1;
    }
    b
}

/// Non-zero codes in increasing order.
fn nonzero_codes() -> impl Iterator<Item = u64> {
    (0..=9).map(|k| 1u64 << k)
}

/// Number of grid operators of size `n` with `det >= exp(-delta n)`.
///
/// Tuples with `m` non-unit entries are counted as `C(n, m)` placements times
/// the number of ordered `m`-tuples of non-zero codes with sum within the
/// budget; the latter comes from a table over `(m, sum)`.
pub fn count_grid_operators(n: usize, delta: f64) -> Result<BigUint> {
    if n == 0 {
        return Err(Error::Parameter("n must be >= 1".into()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Parameter(format!("delta must lie in (0, 1], got {delta}")));
    }
    let budget = code_budget(n, delta) as usize;
    let max_m = budget.min(n);
    // row[s] = ordered tuples of the current length with code sum s
    let mut row: Vec<BigUint> = vec![BigUint::from(0u32); budget + 1];
    row[0] = BigUint::from(1u32);
    let mut total = BigUint::from(1u32); // m = 0: the identity
    let mut binom = BigUint::from(1u32);
    for m in 1..=max_m {
        let mut next: Vec<BigUint> = vec![BigUint::from(0u32); budget + 1];
        for s in (m - 1)..=budget {
            if row[s] == BigUint::from(0u32) {
                continue;
            }
            for c in nonzero_codes() {
                let t = s + c as usize;
                if t > budget {
                    break;
                }
                next[t] += &row[s];
            }
        }
        row = next;
        binom = binom * BigUint::from(n - m + 1) / BigUint::from(m);
        let tuples: BigUint = row.iter().sum();
        total += &binom * tuples;
    }
    let bound = grid_count_log_bound(n, delta);
    if ln_biguint(&total) > bound + 1e-9 * bound.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "grid count exceeds (2e/delta)^(4 delta n) at n = {n}, delta = {delta}"
        )));
    }
    Ok(total)
}

/// `ln((2e/delta)^(4 delta n))`.
pub fn grid_count_log_bound(n: usize, delta: f64) -> f64 {
    4.0 * delta * n as f64 * (2.0 * std::f64::consts::E / delta).ln()
}

/// Natural log of a big integer (`-inf` for zero).
pub fn ln_biguint(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits == 0 {
        return f64::NEG_INFINITY;
    }
    if bits <= 1000 {
        let digits = x.to_u64_digits();
        let v = digits.iter().rev().fold(0.0f64, |acc, &d| acc * 18446744073709551616.0 + d as f64);
        return v.ln();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_u64_digits();
    let v = top.iter().rev().fold(0.0f64, |acc, &d| acc * 18446744073709551616.0 + d as f64);
    v.ln() + shift as f64 * std::f64::consts::LN_2
}

/// `ln((2e K^2)^(8n/K^2))`: translates of `(K/sqrt(n)) B_inf^n` needed to
/// cover `B_2^n`.
pub fn cube_cover_log_bound(n: usize, k: f64) -> f64 {
    8.0 * n as f64 / (k * k) * (2.0 * std::f64::consts::E * k * k).ln()
}

/// `13 delta n ln(2e/delta)`: log-size of the parallelepiped collection.
pub fn collection_log_bound(n: usize, delta: f64) -> f64 {
    13.0 * delta * n as f64 * (2.0 * std::f64::consts::E / delta).ln()
}

/// Center of a cube of side `K/sqrt(n)` on the lattice `(K/sqrt(n)) Z^n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CubeCenter {
    /// Lattice coordinates; the center is `index * step`.
    pub index: Vec<i64>,
}

impl CubeCenter {
    pub fn support(&self) -> usize {
        self.index.iter().filter(|&&c| c != 0).count()
    }

    pub fn point(&self, step: f64) -> Vec<f64> {
        self.index.iter().map(|&c| c as f64 * step).collect()
    }
}

fn check_ball(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Shape("empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("vector has non-finite entries".into()));
    }
    let r = norm(x);
    if r > 1.0 + UNIT_BALL_SLACK {
        return Err(Error::Domain(format!("point has norm {r} > 1")));
    }
    Ok(())
}

/// Clamps `K` to `[2, 2 sqrt(n)]`.
pub fn clamp_cube_parameter(n: usize, k: f64) -> f64 {
    k.clamp(2.0, 2.0 * (n.max(1) as f64).sqrt())
}

/// Side of the cube lattice for parameter `K`.
pub fn cube_step(n: usize, k: f64) -> f64 {
    clamp_cube_parameter(n, k) / (n as f64).sqrt()
}

/// Sparse cube containing `x`: coordinates with `|x_i| >= K/(2 sqrt n)` are
/// rounded to the nearest multiple of `K/sqrt(n)`, the rest go to zero.
pub fn locate_cube(x: &[f64], k: f64) -> Result<CubeCenter> {
    check_ball(x)?;
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Parameter(format!("cube parameter must be positive, got {k}")));
    }
    let n = x.len();
    let step = cube_step(n, k);
    let half = 0.5 * step;
    let index = x
        .iter()
        .map(|&v| if v.abs() >= half { (v / step).round() as i64 } else { 0 })
        .collect();
    Ok(CubeCenter { index })
}

/// Identifies one parallelepiped `center + D((nδ)^{-1/2} B_inf^n)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParallelepipedId {
    pub grid: Arc<GridOperator>,
    pub outer: Vec<i64>,
    /// Cell indices. Unbounded: a half-width of `2^-512` puts the index of an
    /// ordinary coordinate far beyond any machine integer.
    pub inner: Vec<BigInt>,
    delta_bits: u64,
}

impl ParallelepipedId {
    pub fn delta(&self) -> f64 {
        f64::from_bits(self.delta_bits)
    }

    pub fn n(&self) -> usize {
        self.outer.len()
    }

    /// Half-widths `d_i / sqrt(n delta)`.
    pub fn half_widths(&self) -> Vec<f64> {
        half_widths(&self.grid, self.delta())
    }

    /// Center rounded to floating point.
    pub fn center(&self) -> Vec<f64> {
        let n = self.n();
        let step = outer_step(n, self.delta());
        self.outer
            .iter()
            .zip(&self.inner)
            .zip(self.half_widths())
            .map(|((&o, j), h)| {
                let (hm, he) = exact_parts(h);
                let offset = (BigInt::from(2) * j * hm).to_f64().unwrap_or(f64::NAN) * 2f64.powi(he);
                o as f64 * step + offset
            })
            .collect()
    }

    /// Exact test of `|x_i - c_i| <= h_i` for every coordinate.
    pub fn contains(&self, x: &[f64]) -> bool {
        let step = outer_step(self.n(), self.delta());
        x.len() == self.n()
            && x.iter()
                .zip(&self.outer)
                .zip(&self.inner)
                .zip(self.half_widths())
                .all(|(((&v, &o), j), h)| in_closed_cell(v, o as f64 * step, h, j))
    }

    /// `delta=<d>;grid=<codes>;outer=<i,..>;inner=<j,..>`.
    pub fn canonical(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let codes: Vec<String> = self.grid.codes().iter().map(u16::to_string).collect();
        format!(
            "delta={:?};grid={};outer={};inner={}",
            self.delta(),
            codes.join(","),
            join(&self.outer),
            join(&self.inner)
        )
    }
}

impl fmt::Display for ParallelepipedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

fn half_widths(grid: &GridOperator, delta: f64) -> Vec<f64> {
    let s = 1.0 / (grid.n() as f64 * delta).sqrt();
    grid.diagonal().into_iter().map(|d| d * s).collect()
}

fn outer_step(n: usize, delta: f64) -> f64 {
    cube_step(n, 1.0 / delta.sqrt())
}

/// Covering hypotheses: `delta <= 1/4`, `n >= 1/(4 delta)`.
pub fn check_covering_params(n: usize, delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 0.25) {
        return Err(Error::Parameter(format!("delta must lie in (0, 1/4], got {delta}")));
    }
    if (n as f64) < 1.0 / (4.0 * delta) {
        return Err(Error::Parameter(format!("n = {n} is below 1/(4 delta) = {}", 1.0 / (4.0 * delta))));
    }
    Ok(())
}

/// `(m, e)` with `v = m 2^e` exactly.
fn exact_parts(v: f64) -> (BigInt, i32) {
    let (mantissa, exponent, sign) = v.integer_decode();
    let sign = if sign < 0 { Sign::Minus } else { Sign::Plus };
    (BigInt::from_biguint(sign, BigUint::from(mantissa)), exponent as i32)
}

/// `x - s` and `h` as integers over the common scale `2^e`.
fn scaled_offsets(x: f64, s: f64, h: f64) -> (BigInt, BigInt) {
    let parts = [exact_parts(x), exact_parts(s), exact_parts(h)];
    let e0 = parts.iter().map(|p| p.1).min().expect("three parts");
    let lift = |(m, e): &(BigInt, i32)| m << (e - e0) as usize;
    (lift(&parts[0]) - lift(&parts[1]), lift(&parts[2]))
}

/// Index `j` of the half-open cell `((2j-1)h, (2j+1)h]` holding `x - s`,
/// computed exactly (ties go to the lower cell).
fn cell_index(x: f64, s: f64, h: f64) -> BigInt {
    let (w, h) = scaled_offsets(x, s, h);
    let num = w - &h;
    let den = h << 1usize;
    let q = &num / &den;
    // `/` truncates toward zero; round up for positive non-exact quotients.
    if num.sign() == Sign::Plus && !(&num % &den).is_zero() {
        q + 1
    } else {
        q
    }
}

/// `(2j-1)h <= x - s <= (2j+1)h`, exactly.
fn in_closed_cell(x: f64, s: f64, h: f64, j: &BigInt) -> bool {
    let (w, h) = scaled_offsets(x, s, h);
    let c = (j << 1usize) * &h;
    w >= &c - &h && w <= c + h
}

/// The parallelepiped of the collection built from `grid` that contains `x`.
pub fn locate_parallelepiped(x: &[f64], grid: &Arc<GridOperator>, delta: f64) -> Result<ParallelepipedId> {
    let n = x.len();
    if grid.n() != n {
        return Err(Error::Shape(format!("grid of size {} for a vector of length {n}", grid.n())));
    }
    check_covering_params(n, delta)?;
    let cube = locate_cube(x, 1.0 / delta.sqrt())?;
    let step = outer_step(n, delta);
    let h = half_widths(grid, delta);
    let inner = x
        .iter()
        .zip(&cube.index)
        .zip(&h)
        .map(|((&v, &o), &hi)| cell_index(v, o as f64 * step, hi))
        .collect();
    let id = ParallelepipedId { grid: Arc::clone(grid), outer: cube.index, inner, delta_bits: delta.to_bits() };
    if !id.contains(x) {
        return Err(Error::Numerical(format!("located parallelepiped {id} does not contain the point")));
    }
    Ok(id)
}

/// `(n delta)^{-1/2} ||A D||_{inf->2}` upper bound: half the diameter of the
/// image of every parallelepiped built from `grid`.
pub fn covering_radius_certificate(a: &Matrix, grid: &GridOperator, delta: f64) -> Result<f64> {
    if a.cols() != grid.n() {
        return Err(Error::Shape(format!("{} columns for a grid of size {}", a.cols(), grid.n())));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Parameter(format!("delta must lie in (0, 1], got {delta}")));
    }
    let ad = a.scale_columns(&grid.diagonal())?;
    Ok(inf2_upper(&ad)? / (grid.n() as f64 * delta).sqrt())
}

/// Answer to one [`RefinedNet::query`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetHit {
    pub base_index: usize,
    pub id: ParallelepipedId,
    pub anchor: Vec<f64>,
    /// True when this query created the anchor.
    pub fresh: bool,
}

/// A Euclidean `eps`-net refined by the parallelepiped collection of one grid
/// operator: each point maps to the anchor of the cell
/// `(base point, parallelepiped of (x - y)/eps)`, the first point seen in that
/// cell.
#[derive(Debug)]
pub struct RefinedNet {
    base: Vec<Vec<f64>>,
    eps: f64,
    delta: f64,
    grid: Arc<GridOperator>,
    anchors: Mutex<HashMap<(usize, ParallelepipedId), Vec<f64>>>,
}

impl RefinedNet {
    pub fn new(base: Vec<Vec<f64>>, eps: f64, delta: f64, grid: GridOperator) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::Parameter("base net is empty".into()));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        if base.iter().any(|p| p.len() != grid.n()) {
            return Err(Error::Shape("base net points must match the grid dimension".into()));
        }
        check_covering_params(grid.n(), delta)?;
        Ok(Self { base, eps, delta, grid: Arc::new(grid), anchors: Mutex::new(HashMap::new()) })
    }

    pub fn base(&self) -> &[Vec<f64>] {
        &self.base
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn grid(&self) -> &GridOperator {
        &self.grid
    }

    /// Nearest base point (lowest index on ties) within `eps`.
    fn nearest(&self, x: &[f64]) -> Result<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.base.iter().enumerate() {
            let d = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, d) = best.expect("base net is non-empty");
        if d > self.eps * (1.0 + UNIT_BALL_SLACK) {
            return Err(Error::Coverage(format!(
                "no base point within {} of {:?} (nearest at {d})",
                self.eps,
                &x[..x.len().min(8)]
            )));
        }
        Ok((i, d))
    }

    pub fn query(&self, x: &[f64]) -> Result<NetHit> {
        if x.len() != self.grid.n() {
            return Err(Error::Shape(format!("query of length {} for n = {}", x.len(), self.grid.n())));
        }
        let (base_index, dist) = self.nearest(x)?;
        let y = &self.base[base_index];
        // Points at distance exactly eps (up to slack) are pulled into the ball.
        let scale = if dist > self.eps { 1.0 / dist } else { 1.0 / self.eps };
        let w: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - b) * scale).collect();
        let id = locate_parallelepiped(&w, &self.grid, self.delta)?;
        let mut map = self.anchors.lock().expect("anchor map poisoned");
        let key = (base_index, id.clone());
        let fresh = !map.contains_key(&key);
        let anchor = map.entry(key).or_insert_with(|| x.to_vec()).clone();
        Ok(NetHit { base_index, id, anchor, fresh })
    }

    /// Number of anchors created so far.
    pub fn len(&self) -> usize {
        self.anchors.lock().expect("anchor map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of distinct parallelepipeds touched, across base points.
    pub fn distinct_ids(&self) -> usize {
        let map = self.anchors.lock().expect("anchor map poisoned");
        let ids: std::collections::HashSet<&ParallelepipedId> = map.keys().map(|(_, id)| id).collect();
        ids.len()
    }

    /// Anchors sorted by canonical key, for stable output.
    pub fn anchors(&self) -> Vec<(usize, String, Vec<f64>)> {
        let map = self.anchors.lock().expect("anchor map poisoned");
        let mut out: Vec<_> = map.iter().map(|((b, id), a)| (*b, id.canonical(), a.clone())).collect();
        out.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::inf2_exact;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    #[test]
    fn grid_operator_validation() {
        assert!(GridOperator::new(vec![0, 1, 2, 512]).is_ok());
        assert!(GridOperator::new(vec![3]).is_err());
        assert!(GridOperator::new(vec![1024]).is_err());
        assert!(GridOperator::new(vec![]).is_err());
        let g = GridOperator::new(vec![0, 1, 4]).unwrap();
        assert_eq!(g.diagonal(), vec![1.0, 0.5, 0.0625]);
        assert!((g.log_det() - (-5.0 * std::f64::consts::LN_2)).abs() < 1e-15);
        assert_eq!(GridOperator::from_text(&g.to_text()).unwrap(), g);
        assert!(GridOperator::from_text("0 x").is_err());
    }

    #[test]
    fn small_counts() {
        // det >= e^{-delta} with one coordinate: only the identity when delta < ln 2.
        assert_eq!(count_grid_operators(1, 0.5).unwrap(), BigUint::from(1u32));
        assert_eq!(count_grid_operators(2, 0.4).unwrap(), BigUint::from(3u32));
        assert!(count_grid_operators(0, 0.4).is_err());
        assert!(count_grid_operators(3, 1.5).is_err());
    }

    #[test]
    fn ln_of_big_integers() {
        let x = BigUint::from(1u32) << 3000u32;
        assert!((ln_biguint(&x) - 3000.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((ln_biguint(&BigUint::from(1000u32)) - 1000f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_count_is_finite() {
        let c = count_grid_operators(400, 0.25).unwrap();
        assert!(ln_biguint(&c) <= grid_count_log_bound(400, 0.25));
    }

    #[test]
    fn cube_examples() {
        assert_eq!(locate_cube(&[0.0; 5], 2.0).unwrap().index, vec![0; 5]);
        let c = locate_cube(&[0.9, 0.1, 0.1, 0.1], 2.0).unwrap();
        assert_eq!(c.index, vec![1, 0, 0, 0]);
        assert!(matches!(locate_cube(&[1.0, 1.0], 2.0), Err(Error::Domain(_))));
    }

    fn random_ball(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let r = norm(&g);
        let radius: f64 = rng.random::<f64>().powf(1.0 / n as f64);
        g.iter().map(|v| v / r * radius).collect()
    }

    #[test]
    fn cube_support_and_distance() {
        let mut rng = rng_from_seed(9);
        for _ in 0..10_000 {
            let n = rng.random_range(1..40);
            let k = 2.0 + rng.random::<f64>() * (2.0 * (n as f64).sqrt() - 2.0).max(0.0);
            let x = random_ball(&mut rng, n);
            let c = locate_cube(&x, k).unwrap();
            let step = cube_step(n, k);
            let kk = clamp_cube_parameter(n, k);
            assert!(c.support() as f64 <= 4.0 * n as f64 / (kk * kk) + 1e-9);
            for (v, p) in x.iter().zip(c.point(step)) {
                assert!((v - p).abs() <= 0.5 * step * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn parallelepiped_identity_grid() {
        let g = Arc::new(GridOperator::identity(4));
        let id = locate_parallelepiped(&[0.3, -0.2, 0.1, 0.0], &g, 0.25).unwrap();
        for h in id.half_widths() {
            assert!((h - 1.0).abs() < 1e-15);
        }
        assert!(id.contains(&[0.3, -0.2, 0.1, 0.0]));
    }

    #[test]
    fn snap_ties_go_low() {
        // Cell j covers ((2j-1)h, (2j+1)h]; the boundary h belongs to cell 0.
        let j = |w: f64| cell_index(w, 0.0, 0.5);
        assert_eq!(j(0.5), BigInt::from(0));
        assert_eq!(j(0.5000001), BigInt::from(1));
        assert_eq!(j(-0.5), BigInt::from(-1));
        assert_eq!(j(0.0), BigInt::from(0));
        assert_eq!(j(1.5), BigInt::from(1));
        assert_eq!(j(-1.5000001), BigInt::from(-2));
        // Offsets far below the resolution of x stay exact.
        assert_eq!(cell_index(0.25, 0.0, 2f64.powi(-300)), BigInt::from(1) << 297usize);
        assert!(in_closed_cell(0.25, 0.0, 2f64.powi(-300), &(BigInt::from(1) << 297usize)));
    }

    #[test]
    fn cell_stability() {
        let g = Arc::new(GridOperator::new(vec![0, 1]).unwrap());
        let x = [0.3, 0.3];
        let a = locate_parallelepiped(&x, &g, 0.25).unwrap();
        // Shift inside the same cell: toward the center by a fraction of the half-width.
        let c = a.center();
        let h = a.half_widths();
        let shifted: Vec<f64> = x.iter().zip(&c).zip(&h).map(|((v, c), h)| c + 0.5 * (v - c).clamp(-h, *h)).collect();
        let b = locate_parallelepiped(&shifted, &g, 0.25).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.canonical(), b.canonical());
    }

    #[test]
    fn covering_params_enforced() {
        let g = Arc::new(GridOperator::identity(2));
        assert!(locate_parallelepiped(&[0.1, 0.1], &g, 0.5).is_err());
        let g = Arc::new(GridOperator::identity(1));
        assert!(locate_parallelepiped(&[0.1], &g, 0.1).is_err());
    }

    #[test]
    fn certificate_examples() {
        let n = 9;
        let delta = 0.25;
        let g = GridOperator::identity(n);
        let c = covering_radius_certificate(&Matrix::identity(n), &g, delta).unwrap();
        assert!((c - 1.0 / delta.sqrt()).abs() < 1e-12);
        assert_eq!(covering_radius_certificate(&Matrix::zeros(n, n), &g, delta).unwrap(), 0.0);
    }

    #[test]
    fn certificate_dominates_corner_diameter() {
        let mut rng = rng_from_seed(12);
        for _ in 0..100 {
            let n = rng.random_range(4..=10);
            let codes: Vec<u16> = (0..n).map(|_| [0u16, 0, 1, 2, 4][rng.random_range(0..5)]).collect();
            let g = GridOperator::new(codes).unwrap();
            let a = Matrix::from_fn(n, n, |_, _| rng.sample(StandardNormal));
            let cert = covering_radius_certificate(&a, &g, 0.25).unwrap();
            let ad = a.scale_columns(&g.diagonal()).unwrap();
            let diam = 2.0 * inf2_exact(&ad).unwrap().0 / (n as f64 * 0.25).sqrt();
            assert!(diam <= 2.0 * cert * (1.0 + 1e-12));
        }
    }

    #[test]
    fn refined_net_memoizes() {
        let n = 4;
        let base: Vec<Vec<f64>> = (0..n)
            .flat_map(|i| {
                [1.0, -1.0].map(|s| {
                    let mut e = vec![0.0; n];
                    e[i] = s;
                    e
                })
            })
            .collect();
        let net = RefinedNet::new(base.clone(), 1.5, 0.25, GridOperator::new(vec![0, 1, 0, 2]).unwrap()).unwrap();
        let first = net.query(&base[2]).unwrap();
        assert!(first.fresh);
        assert_eq!(first.anchor, base[2]);
        let again = net.query(&base[2]).unwrap();
        assert!(!again.fresh);
        assert_eq!(again.anchor, first.anchor);
        assert_eq!(net.len(), 1);
        let far = RefinedNet::new(vec![vec![1.0, 0.0, 0.0, 0.0]], 0.1, 0.25, GridOperator::identity(4)).unwrap();
        assert!(matches!(far.query(&[0.0, 1.0, 0.0, 0.0]), Err(Error::Coverage(_))));
    }
}
