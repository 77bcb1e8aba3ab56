//! Reference oracles shared by the integration tests. Nothing here calls the
//! solver under test; objective and constraint are re-derived from the Xi
//! entries.

#![allow(dead_code)]

use mmrisk_core::calibration::XiMatrix;

pub const GRID_STEP: f64 = 1e-6;
const LEAF: i64 = 2048;

pub struct GridProblem {
    pub xi11: f64,
    pub xi12: f64,
    pub xi22: f64,
    pub p: f64,
    pub r: f64,
    pub k_pow: f64,
}

impl GridProblem {
    pub fn new(xi: &XiMatrix, k: f64) -> Self {
        let q = xi.order.q1 + xi.order.q2;
        Self {
            xi11: xi.xi11,
            xi12: xi.xi12,
            xi22: xi.xi22,
            p: 2.0 * xi.order.q2 / q,
            r: xi.order.q1 / q,
            k_pow: k.powf(2.0 * q),
        }
    }

    pub fn z(&self, a: f64) -> f64 {
        self.xi11 * a * a + 2.0 * self.xi12 * a + self.xi22
    }

    pub fn f(&self, a: f64) -> f64 {
        a.abs().powf(self.p) * self.z(a).powf(self.r)
    }

    /// `K^(2Q) a^2 >= Z(a)`, the inflation constraint written directly.
    pub fn feasible(&self, a: f64) -> bool {
        self.k_pow * a * a - self.z(a) >= 0.0
    }

    fn min_z(&self, lo: f64, hi: f64) -> f64 {
        let v = -self.xi12 / self.xi11;
        let mut m = self.z(lo).min(self.z(hi));
        if v > lo && v < hi {
            m = m.min(self.z(v));
        }
        m.max(0.0)
    }

    /// Certified lower bound of `f` on `[lo, hi]`.
    fn lower_bound(&self, lo: f64, hi: f64) -> f64 {
        let min_abs = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
        min_abs.powf(self.p) * self.min_z(lo, hi).powf(self.r)
    }

    /// Boundary point between a feasible and an infeasible abscissa.
    fn boundary(&self, mut inside: f64, mut outside: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if mid == inside || mid == outside {
                break;
            }
            if self.feasible(mid) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    }

    /// Smallest eigenvalue of Xi.
    fn lambda_min(&self) -> f64 {
        let tr = self.xi11 + self.xi22;
        let det = self.xi11 * self.xi22 - self.xi12 * self.xi12;
        let disc = ((self.xi11 - self.xi22).powi(2) + 4.0 * self.xi12 * self.xi12).sqrt();
        // det / larger root avoids cancellation
        det / (0.5 * (tr + disc))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridMin {
    pub a: f64,
    pub objective: f64,
    pub evaluated: u64,
}

/// Minimum of `f` over feasible points of the `GRID_STEP` lattice plus the
/// constraint boundaries located between lattice neighbours. `upper` is the
/// value of any feasible point; it only bounds the search range.
pub fn grid_minimize(prob: &GridProblem, upper: f64) -> Option<GridMin> {
    // f(a) >= lambda_min^r a^2, so nothing beyond R beats `upper`.
    let lmin = prob.lambda_min();
    assert!(lmin > 0.0, "Xi must be positive definite");
    let radius = (upper / lmin.powf(prob.r)).sqrt() * (1.0 + 1e-9) + GRID_STEP;
    let m = (radius / GRID_STEP).ceil() as i64;
    let mut best = GridMin { a: f64::NAN, objective: upper, evaluated: 0 };
    let mut found = false;
    search(prob, -m, m, &mut best, &mut found);
    found.then_some(best)
}

fn search(prob: &GridProblem, i0: i64, i1: i64, best: &mut GridMin, found: &mut bool) {
    let (lo, hi) = (i0 as f64 * GRID_STEP, i1 as f64 * GRID_STEP);
    if prob.lower_bound(lo, hi) > best.objective {
        return;
    }
    if i1 - i0 <= LEAF {
        let mut prev: Option<(f64, bool)> = None;
        for i in i0..=i1 {
            let a = i as f64 * GRID_STEP;
            let ok = prob.feasible(a);
            best.evaluated += 1;
            if ok {
                consider(prob, a, best, found);
            }
            if let Some((pa, pok)) = prev {
                if pok != ok {
                    let b = if ok { prob.boundary(a, pa) } else { prob.boundary(pa, a) };
                    consider(prob, b, best, found);
                }
            }
            prev = Some((a, ok));
        }
        return;
    }
    let mid = i0 + (i1 - i0) / 2;
    let (l, r) = ((i0, mid), (mid, i1));
    let lb_l = prob.lower_bound(l.0 as f64 * GRID_STEP, l.1 as f64 * GRID_STEP);
    let lb_r = prob.lower_bound(r.0 as f64 * GRID_STEP, r.1 as f64 * GRID_STEP);
    let order = if lb_l <= lb_r { [l, r] } else { [r, l] };
    for (a, b) in order {
        search(prob, a, b, best, found);
    }
}

fn consider(prob: &GridProblem, a: f64, best: &mut GridMin, found: &mut bool) {
    let f = prob.f(a);
    if f <= best.objective {
        *found = true;
        if f < best.objective || best.a.is_nan() {
            best.a = a;
        }
        best.objective = f;
    }
}
