//! Minimax calibration: closed-form risk ratios and the optimal two-decay
//! weighting scheme.
//!
//! The weight problem reduces to a one-dimensional search over
//! `a = sum_j w_j / (j+n0)^(alpha q1)`. For fixed `a` the variance-minimizing
//! weights are a combination of two power sequences whose coefficients come
//! from the inverse `Xi` of a 2x2 matrix of power sums `phi`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::oracles::BiasOrder;
use crate::sum::{neumaier, NeumaierSum};

/// `sum_{j=1}^n (j+n0)^(-kappa)`, accumulated from the smallest term up.
pub fn phi_sum(kappa: f64, n: usize, n0: usize) -> Result<f64> {
    if n < 1 {
        return Err(domain("phi_sum needs n >= 1"));
    }
    if !kappa.is_finite() {
        return Err(domain(format!("kappa must be finite, got {kappa}")));
    }
    Ok(neumaier((1..=n).rev().map(|j| ((j + n0) as f64).powf(-kappa))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiMatrix {
    pub xi11: f64,
    pub xi12: f64,
    pub xi22: f64,
    /// The power-sum matrix being inverted: `phi(1)`, `phi(fast)`, `phi(slow)`.
    pub phi11: f64,
    pub phi12: f64,
    pub phi22: f64,
    pub n: usize,
    pub n0: usize,
    pub order: BiasOrder,
}

impl XiMatrix {
    /// `(lambda1, lambda2) = Xi [a, 1]'`.
    pub fn lambdas(&self, a: f64) -> (f64, f64) {
        (self.xi11 * a + self.xi12, self.xi12 * a + self.xi22)
    }

    pub fn as_array(&self) -> [[f64; 2]; 2] {
        [[self.xi11, self.xi12], [self.xi12, self.xi22]]
    }

    pub fn phi_array(&self) -> [[f64; 2]; 2] {
        [[self.phi11, self.phi12], [self.phi12, self.phi22]]
    }
}

pub fn xi_matrix(order: BiasOrder, n: usize, n0: usize) -> Result<XiMatrix> {
    if n < 2 {
        return Err(domain(format!("the phi-matrix is singular for n = {n}; need n >= 2")));
    }
    let (k1, k2) = (order.fast_decay(), order.slow_decay());
    let phi11 = phi_sum(1.0, n, n0)?;
    let phi12 = phi_sum(k1, n, n0)?;
    let phi22 = phi_sum(k2, n, n0)?;
    // det = phi11 * sum_j (v_j - c u_j)^2 with u_j^2 = (j+n0)^-1, v_j^2 = (j+n0)^-k2,
    // c = phi12/phi11: the residual form avoids cancelling phi11*phi22 - phi12^2.
    let c = phi12 / phi11;
    let resid = neumaier((1..=n).rev().map(|j| {
        let x = (j + n0) as f64;
        let r = x.powf(-0.5 * k2) - c * x.powf(-0.5);
        r * r
    }));
    let det = phi11 * resid;
    if !(det > 0.0) || !det.is_finite() {
        return Err(domain(format!("the phi-matrix is numerically singular for n = {n}, n0 = {n0}")));
    }
    Ok(XiMatrix {
        xi11: phi22 / det,
        xi12: -phi12 / det,
        xi22: phi11 / det,
        phi11,
        phi12,
        phi22,
        n,
        n0,
        order,
    })
}

/// `xi11 a^2 + 2 xi12 a + xi22`: the minimal weighted variance sum at `a`.
pub fn ztilde_squared(a: f64, xi: &XiMatrix) -> f64 {
    xi.xi11 * a * a + 2.0 * xi.xi12 * a + xi.xi22
}

/// Objective of the line search, `|a|^(2q2/(q1+q2)) Z(a)^(q1/(q1+q2))`.
pub fn a_objective(a: f64, xi: &XiMatrix) -> f64 {
    let q = xi.order.q1 + xi.order.q2;
    a.abs().powf(2.0 * xi.order.q2 / q) * ztilde_squared(a, xi).powf(xi.order.q1 / q)
}

/// `(K^(2(q1+q2)) - xi11) a^2 - 2 xi12 a - xi22`; feasible where `>= 0`.
pub fn constraint_value(a: f64, xi: &XiMatrix, k: f64) -> f64 {
    let q = xi.order.q1 + xi.order.q2;
    (k.powf(2.0 * q) - xi.xi11) * a * a - 2.0 * xi.xi12 * a - xi.xi22
}

/// Asymptotic location of the minimizer, used to place the search grid.
pub fn pilot_a(order: BiasOrder, k: f64, n: usize) -> f64 {
    let q = order.q1 + order.q2;
    (order.q1 / q).sqrt() / (k.powf(q) * (n as f64).powf(order.q1 / (2.0 * q)))
}

/// Closed interval; either end may be infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, a: f64) -> bool {
        self.lo <= a && a <= self.hi
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleRegion {
    /// Disjoint, sorted, at most two.
    pub intervals: Vec<Interval>,
    /// Real roots of the constraint quadratic, ascending.
    pub roots: Vec<f64>,
}

impl FeasibleRegion {
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, a: f64) -> bool {
        self.intervals.iter().any(|iv| iv.contains(a))
    }
}

/// Real roots of `qa x^2 + qb x + qc` via the cancellation-free formula.
fn quadratic_roots(qa: f64, qb: f64, qc: f64) -> Vec<f64> {
    if qa == 0.0 {
        return if qb == 0.0 { vec![] } else { vec![-qc / qb] };
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return vec![];
    }
    let sq = disc.sqrt();
    let t = -0.5 * (qb + if qb >= 0.0 { sq } else { -sq });
    let mut r = if t == 0.0 { vec![0.0, 0.0] } else { vec![t / qa, qc / t] };
    r.sort_by(f64::total_cmp);
    r
}

pub fn feasible_region(xi: &XiMatrix, k: f64) -> FeasibleRegion {
    let q = xi.order.q1 + xi.order.q2;
    let qa = k.powf(2.0 * q) - xi.xi11;
    let (qb, qc) = (-2.0 * xi.xi12, -xi.xi22);
    let roots = quadratic_roots(qa, qb, qc);
    let intervals = if qa > 0.0 {
        // qc < 0 forces two real roots of opposite sign
        vec![
            Interval { lo: f64::NEG_INFINITY, hi: roots[0] },
            Interval { lo: roots[1], hi: f64::INFINITY },
        ]
    } else if qa < 0.0 {
        match roots.as_slice() {
            [lo, hi] => vec![Interval { lo: *lo, hi: *hi }],
            _ => vec![],
        }
    } else if qb > 0.0 {
        vec![Interval { lo: roots[0], hi: f64::INFINITY }]
    } else if qb < 0.0 {
        vec![Interval { lo: f64::NEG_INFINITY, hi: roots[0] }]
    } else {
        vec![]
    };
    FeasibleRegion { intervals, roots }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AStarSolution {
    pub a: f64,
    pub objective: f64,
    pub region: FeasibleRegion,
}

const GRID_POINTS: usize = 10_000;
const BRACKET_FACTOR: f64 = 1e3;
const GOLDEN_RTOL: f64 = 1e-12;

fn check_k(k: f64) -> Result<()> {
    if k.is_finite() && k > 0.0 {
        Ok(())
    } else {
        Err(domain("K must be positive"))
    }
}

pub fn solve_a_star(xi: &XiMatrix, k: f64) -> Result<f64> {
    solve_a_star_detailed(xi, k).map(|s| s.a)
}

/// Global minimizer of [`a_objective`] over the feasible region.
///
/// Each interval is scanned on a log-spaced grid in `|a|`, the best cell is
/// refined by golden section, and the finite endpoints and interior
/// stationary points are compared as extra candidates.
pub fn solve_a_star_detailed(xi: &XiMatrix, k: f64) -> Result<AStarSolution> {
    check_k(k)?;
    let region = feasible_region(xi, k);
    if region.is_empty() {
        return Err(Error::Infeasible {
            n: xi.n,
            k,
            reason: format!(
                "no a satisfies the inflation constraint (needs K^(2(q1+q2)) * phi(1) >= 1, phi(1) = {:.4})",
                xi.phi11
            ),
        });
    }
    let pilot = pilot_a(xi.order, k, xi.n);
    let f = |a: f64| a_objective(a, xi);
    let stationary = stationary_points(xi);

    let mut best: Option<(f64, f64)> = None;
    for iv in &region.intervals {
        let (a, v) = search_interval(iv, pilot, &f, &stationary);
        best = Some(match best {
            None => (a, v),
            Some((ba, bv)) => {
                // prefer positive a unless the other is strictly better
                let strictly = |x: f64, y: f64| x < y * (1.0 - 1e-12);
                if strictly(v, bv) || (!strictly(bv, v) && a > 0.0 && ba < 0.0) {
                    (a, v)
                } else {
                    (ba, bv)
                }
            }
        });
    }
    let (a, objective) = best.expect("region is nonempty");
    Ok(AStarSolution { a, objective, region })
}

/// Roots of `(p+2r) xi11 a^2 + (2p+2r) xi12 a + p xi22`, where the
/// derivative of the log-objective vanishes.
fn stationary_points(xi: &XiMatrix) -> Vec<f64> {
    let q = xi.order.q1 + xi.order.q2;
    let p = 2.0 * xi.order.q2 / q;
    let r = xi.order.q1 / q;
    quadratic_roots((p + 2.0 * r) * xi.xi11, (2.0 * p + 2.0 * r) * xi.xi12, p * xi.xi22)
}

fn search_interval(iv: &Interval, pilot: f64, f: &impl Fn(f64) -> f64, stationary: &[f64]) -> (f64, f64) {
    // Work in t = |a|; intervals never contain 0 because constraint(0) = -xi22 < 0.
    let sign = if iv.hi <= 0.0 { -1.0 } else { 1.0 };
    let (near, far) = if sign > 0.0 { (iv.lo, iv.hi) } else { (-iv.hi, -iv.lo) };
    let g = |t: f64| f(sign * t);

    let mut cands: Vec<f64> = Vec::new();
    cands.push(near);
    if far.is_finite() {
        cands.push(far);
    }
    cands.extend(stationary.iter().filter(|&&s| iv.contains(s)).map(|s| s * sign));

    let mut upper = if far.is_finite() { far } else { BRACKET_FACTOR * pilot.max(near) };
    for _ in 0..40 {
        let (t_best, t_lo, t_hi) = log_grid_min(near, upper, &g);
        let at_open_end = far.is_infinite() && t_best >= upper;
        if at_open_end {
            upper *= 10.0;
            continue;
        }
        cands.push(golden_section(&g, t_lo, t_hi, t_best));
        break;
    }

    let mut best = (near, g(near));
    for t in cands {
        let v = g(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    (sign * best.0, best.1)
}

/// Minimum of `g` over a log-spaced grid on `[lo, hi]`, with its neighbour cell.
fn log_grid_min(lo: f64, hi: f64, g: &impl Fn(f64) -> f64) -> (f64, f64, f64) {
    if hi <= lo {
        return (lo, lo, lo);
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    let m = GRID_POINTS - 1;
    let at = |i: usize| if i == 0 { lo } else if i == m { hi } else { (llo + (lhi - llo) * i as f64 / m as f64).exp() };
    let mut best = (0, g(lo));
    for i in 1..=m {
        let v = g(at(i));
        if v < best.1 {
            best = (i, v);
        }
    }
    let i = best.0;
    (at(i), at(i.saturating_sub(1)), at((i + 1).min(m)))
}

fn golden_section(g: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, start: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    if b <= a {
        return start;
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    while (b - a) > GOLDEN_RTOL * c.abs().max(f64::MIN_POSITIVE) {
        if gc < gd {
            b = d;
            d = c;
            gd = gc;
            c = b - INV_PHI * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + INV_PHI * (b - a);
            gd = g(d);
        }
    }
    let mid = 0.5 * (a + b);
    if g(mid) <= g(start) {
        mid
    } else {
        start
    }
}

/// Two-decay weight row `lambda1 (j+n0)^-fast + lambda2 (j+n0)^-slow`.
pub fn two_decay_weights(lambda1: f64, lambda2: f64, n: usize, n0: usize, order: BiasOrder) -> Vec<f64> {
    let (k1, k2) = (order.fast_decay(), order.slow_decay());
    (1..=n)
        .map(|j| {
            let x = (j + n0) as f64;
            lambda1 * x.powf(-k1) + lambda2 * x.powf(-k2)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub n: usize,
    pub n0: usize,
    pub order: BiasOrder,
    #[serde(rename = "K")]
    pub k: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub a_star: f64,
    /// Realized `d~/d`, at most `K`.
    pub eta_star: f64,
    pub s_star: f64,
    pub weights: Vec<f64>,
}

impl WeightScheme {
    /// `n^(q1/(q1+q2)) S_n*`, the finite-n counterpart of the AMRR.
    pub fn scaled_s_star(&self) -> f64 {
        (self.n as f64).powf(self.order.rate()) * self.s_star
    }

    pub fn weight_sum(&self) -> f64 {
        neumaier(self.weights.iter().copied())
    }

    /// `sum_j w_j (j+n0)^(-alpha q1)`.
    pub fn bias_sum(&self) -> f64 {
        let e = -self.order.alpha() * self.order.q1;
        neumaier(self.weights.iter().enumerate().map(|(i, w)| w * ((i + 1 + self.n0) as f64).powf(e)))
    }

    /// `sum_j (j+n0)^(2 alpha q2) w_j^2`.
    pub fn variance_sum(&self) -> f64 {
        let e = 2.0 * self.order.alpha() * self.order.q2;
        neumaier(self.weights.iter().enumerate().map(|(i, w)| w * w * ((i + 1 + self.n0) as f64).powf(e)))
    }

    /// Rows `j,weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["j", "weight"])?;
        for (i, w) in self.weights.iter().enumerate() {
            wtr.write_record([(i + 1).to_string(), format!("{w:e}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The minimax-optimal weighted scheme for budget `n`.
pub fn optimal_weights(n: usize, n0: usize, order: BiasOrder, k: f64) -> Result<WeightScheme> {
    check_k(k)?;
    if n < 2 {
        return Err(Error::Infeasible { n, k, reason: "the weighted scheme needs at least two runs".into() });
    }
    let xi = xi_matrix(order, n, n0)?;
    let sol = solve_a_star_detailed(&xi, k)?;
    let a = sol.a;
    let (lambda1, lambda2) = xi.lambdas(a);
    let z2 = ztilde_squared(a, &xi);
    let eta_star = (z2 / (a * a)).powf(1.0 / (2.0 * (order.q1 + order.q2)));
    Ok(WeightScheme {
        n,
        n0,
        order,
        k,
        lambda1,
        lambda2,
        a_star: a,
        eta_star,
        s_star: sol.objective,
        weights: two_decay_weights(lambda1, lambda2, n, n0, order),
    })
}

/// AMRR of the optimally weighted estimator, `q1/((q1+q2) K^(2 q2))`.
pub fn amrr_general(order: BiasOrder, k: f64) -> Result<f64> {
    check_k(k)?;
    Ok(order.rate() / k.powf(2.0 * order.q2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursiveCalibration {
    pub c: f64,
    pub beta: f64,
    /// `d~ = d_scale * d`.
    pub d_scale: f64,
}

impl RecursiveCalibration {
    pub fn new(c: f64, beta: f64, d_scale: f64, order: BiasOrder) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(domain("c must be positive"));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(domain("beta must lie in (0, 1]"));
        }
        if !(d_scale > 0.0 && d_scale.is_finite()) {
            return Err(domain("d_scale must be positive"));
        }
        let c_min = order.q1 / (2.0 * (order.q1 + order.q2));
        if beta == 1.0 && c <= c_min {
            return Err(domain(format!("with beta = 1 the step constant must exceed {c_min}")));
        }
        Ok(Self { c, beta, d_scale })
    }
}

/// Recursive estimator with `d~ = d`: best ratio and the step constant attaining it.
pub fn amrr_recursive_tied(order: BiasOrder) -> (f64, RecursiveCalibration) {
    let (q1, q2) = (order.q1, order.q2);
    let s = q1 + q2;
    let ratio = q1 * q1 / (16.0 * s * s) + q1 / (2.0 * s) + 1.0;
    let c = (5.0 * q1 + 4.0 * q2) / (2.0 * s);
    (ratio, RecursiveCalibration { c, beta: 1.0, d_scale: 1.0 })
}

fn free_ratio_and_scale(order: BiasOrder) -> (f64, f64) {
    let (q1, q2) = (order.q1, order.q2);
    let s = q1 + q2;
    let m = (q1 + 2.0 * q2) / s;
    let ratio = 2f64.powf(2.0 * q2 / s) * m.powf(-m);
    let d_scale = ((q1 + 2.0 * q2) / (4.0 * s)).powf(1.0 / (2.0 * s));
    (ratio, d_scale)
}

/// Recursive estimator with `d~ = g(d)` free: ratio, `d~/d`, and `c = 1`.
pub fn amrr_recursive_free(order: BiasOrder) -> (f64, RecursiveCalibration) {
    let (ratio, d_scale) = free_ratio_and_scale(order);
    (ratio, RecursiveCalibration { c: 1.0, beta: 1.0, d_scale })
}

/// Averaged estimator: same ratio and `d~/d` as the free recursive one, for
/// any `c > 0` and `0 < beta < 1`.
pub fn amrr_averaged(order: BiasOrder, c: f64, beta: f64) -> Result<(f64, RecursiveCalibration)> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(domain("the averaged estimator needs 0 < beta < 1"));
    }
    let (ratio, d_scale) = free_ratio_and_scale(order);
    Ok((ratio, RecursiveCalibration::new(c, beta, d_scale, order)?))
}

/// Reference solution of the equality-constrained least squares
/// `min sum_j s_j w_j^2  s.t.  sum_j mu_j w_j = a,  sum_j w_j = 1`
/// from the full KKT system, for small `n`.
pub fn brute_force_weights(n: usize, n0: usize, order: BiasOrder, a: f64) -> Result<Vec<f64>> {
    if n == 0 || n > 50 {
        return Err(domain(format!("brute_force_weights is an oracle for 1 <= n <= 50, got {n}")));
    }
    let alpha = order.alpha();
    let m = n + 2;
    let mut kkt = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for i in 0..n {
        let x = (i + 1 + n0) as f64;
        kkt[(i, i)] = 2.0 * x.powf(2.0 * alpha * order.q2);
        let mu = x.powf(-alpha * order.q1);
        kkt[(i, n)] = mu;
        kkt[(n, i)] = mu;
        kkt[(i, n + 1)] = 1.0;
        kkt[(n + 1, i)] = 1.0;
    }
    rhs[n] = a;
    rhs[n + 1] = 1.0;
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| domain(format!("KKT system is singular for n = {n}")))?;
    Ok(sol.iter().take(n).copied().collect())
}

/// `sum_j (j+n0)^(2 alpha q2) w_j^2` for an arbitrary weight row.
pub fn weighted_variance_sum(weights: &[f64], n0: usize, order: BiasOrder) -> f64 {
    let e = 2.0 * order.alpha() * order.q2;
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * w * ((i + 1 + n0) as f64).powf(e))
        .collect::<NeumaierSum>()
        .value()
}
