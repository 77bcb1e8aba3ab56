//! Simulation oracles emitting `theta + b(delta) + v(delta)`.
//!
//! Two families live here: a synthetic model whose bias and noise constants
//! are known exactly, and finite-difference / simultaneous-perturbation
//! gradient oracles wrapped around any [`NoisyFunction`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::stream::StreamKey;

/// Orders of the bias (`delta^q1`) and of the noise (`delta^-q2`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasOrder {
    pub q1: f64,
    pub q2: f64,
}

impl BiasOrder {
    pub fn new(q1: f64, q2: f64) -> Result<Self> {
        if !(q1.is_finite() && q1 > 0.0) {
            return Err(domain(format!("q1 must be positive, got {q1}")));
        }
        if !(q2.is_finite() && q2 > 0.0) {
            return Err(domain(format!("q2 must be positive, got {q2}")));
        }
        Ok(Self { q1, q2 })
    }

    /// Central finite differences: bias `delta^2`, noise `delta^-1`.
    pub const CENTRAL: BiasOrder = BiasOrder { q1: 2.0, q2: 1.0 };
    /// Forward/backward finite differences: bias `delta`, noise `delta^-1`.
    pub const ONE_SIDED: BiasOrder = BiasOrder { q1: 1.0, q2: 1.0 };

    /// MSE-optimal decay exponent of the perturbation, `1/(2(q1+q2))`.
    pub fn alpha(&self) -> f64 {
        1.0 / (2.0 * (self.q1 + self.q2))
    }

    /// Optimal MSE rate exponent, `q1/(q1+q2)`.
    pub fn rate(&self) -> f64 {
        self.q1 / (self.q1 + self.q2)
    }

    /// Faster of the two weight decays, `(q1+2q2)/(2(q1+q2))`.
    pub fn fast_decay(&self) -> f64 {
        (self.q1 + 2.0 * self.q2) / (2.0 * (self.q1 + self.q2))
    }

    /// Slower of the two weight decays, `q2/(q1+q2)`.
    pub fn slow_decay(&self) -> f64 {
        self.q2 / (self.q1 + self.q2)
    }
}

/// Anything that emits one biased, noisy sample per call at a given `delta`.
pub trait Oracle: Sync {
    fn dim(&self) -> usize;

    /// Writes one sample into `out` (length `dim()`).
    fn sample_into(&self, delta: f64, stream: &StreamKey, out: &mut [f64]) -> Result<()>;

    fn sample(&self, delta: f64, stream: &StreamKey) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(delta, stream, &mut out)?;
        Ok(out)
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn sample_into(&self, delta: f64, stream: &StreamKey, out: &mut [f64]) -> Result<()> {
        (**self).sample_into(delta, stream, out)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta > 0.0 {
        Ok(())
    } else {
        Err(domain(format!("delta must be positive, got {delta}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracleSpec {
    pub theta: Vec<f64>,
    /// Leading bias coefficient `B`.
    pub bias: Vec<f64>,
    /// Per-coordinate noise standard deviation; its squared norm is `sigma^2`
    /// (or the covariance trace in several dimensions).
    pub noise_scale: Vec<f64>,
    pub order: BiasOrder,
    /// Coefficient of the `delta^(q1+1)` correction term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub higher_order_bias: Option<Vec<f64>>,
}

impl SyntheticOracleSpec {
    /// A model satisfying the standing assumptions: nonzero `B`, positive noise.
    pub fn new(
        theta: Vec<f64>,
        bias: Vec<f64>,
        noise_scale: Vec<f64>,
        order: BiasOrder,
        higher_order_bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let spec = Self::degenerate(theta, bias, noise_scale, order, higher_order_bias)?;
        if spec.bias.iter().all(|&b| b == 0.0) {
            return Err(domain("bias coefficient B must have a nonzero coordinate"));
        }
        if spec.noise_trace() <= 0.0 {
            return Err(domain("noise scale must have positive squared norm"));
        }
        Ok(spec)
    }

    /// Like [`new`](Self::new) but allows `B = 0` and/or zero noise.
    pub fn degenerate(
        theta: Vec<f64>,
        bias: Vec<f64>,
        noise_scale: Vec<f64>,
        order: BiasOrder,
        higher_order_bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let p = theta.len();
        if p == 0 {
            return Err(domain("theta must have dimension >= 1"));
        }
        if bias.len() != p || noise_scale.len() != p {
            return Err(domain("theta, bias and noise_scale must share a dimension"));
        }
        if let Some(h) = &higher_order_bias {
            if h.len() != p {
                return Err(domain("higher_order_bias must match theta's dimension"));
            }
        }
        let all = theta
            .iter()
            .chain(&bias)
            .chain(&noise_scale)
            .chain(higher_order_bias.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(domain("synthetic model parameters must be finite"));
        }
        if noise_scale.iter().any(|&s| s < 0.0) {
            return Err(domain("noise scale must be non-negative"));
        }
        BiasOrder::new(order.q1, order.q2)?;
        Ok(Self { theta, bias, noise_scale, order, higher_order_bias })
    }

    /// Scalar model with the central-difference orders unless overridden.
    pub fn scalar(theta: f64, bias: f64, sigma: f64, order: BiasOrder) -> Result<Self> {
        Self::new(vec![theta], vec![bias], vec![sigma], order, None)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `||B||^2`.
    pub fn bias_norm_sq(&self) -> f64 {
        self.bias.iter().map(|b| b * b).sum()
    }

    /// `sigma^2` (or `tr(Sigma)`).
    pub fn noise_trace(&self) -> f64 {
        self.noise_scale.iter().map(|s| s * s).sum()
    }

    /// Exact expectation of one sample at `delta`.
    pub fn mean_at(&self, delta: f64) -> Vec<f64> {
        let dq1 = delta.powf(self.order.q1);
        (0..self.dim())
            .map(|i| {
                let h = self.higher_order_bias.as_ref().map_or(0.0, |h| h[i]);
                self.theta[i] + self.bias[i] * dq1 + h * dq1 * delta
            })
            .collect()
    }
}

/// One draw of `theta + B delta^q1 + H delta^(q1+1) + s * Z / delta^q2`.
pub fn synthetic_sample(spec: &SyntheticOracleSpec, delta: f64, stream: &StreamKey) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.dim()];
    spec.sample_into(delta, stream, &mut out)?;
    Ok(out)
}

impl Oracle for SyntheticOracleSpec {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    #[inline]
    fn sample_into(&self, delta: f64, stream: &StreamKey, out: &mut [f64]) -> Result<()> {
        check_delta(delta)?;
        let dq1 = delta.powf(self.order.q1);
        let inv_dq2 = delta.powf(-self.order.q2);
        let mut rng = stream.rng();
        for (i, o) in out.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let mut v = self.theta[i] + self.bias[i] * dq1 + self.noise_scale[i] * z * inv_dq2;
            if let Some(h) = &self.higher_order_bias {
                v += h[i] * dq1 * delta;
            }
            *o = v;
        }
        Ok(())
    }
}

/// A black-box function observed through unbiased noisy evaluations.
///
/// Re-evaluating with the same [`StreamKey`] must reproduce the same value;
/// distinct keys give independent noise.
pub trait NoisyFunction: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], stream: &StreamKey) -> f64;

    /// Rejects points outside the function's domain.
    fn check_point(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }

    /// Human-readable description of the mean function.
    fn describe(&self) -> String;
}

/// `mean(x) + noise_sd * Z`.
pub struct GaussianNoisy<F> {
    dim: usize,
    mean: F,
    noise_sd: f64,
    label: String,
}

impl<F> GaussianNoisy<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, noise_sd: f64, label: impl Into<String>, mean: F) -> Self {
        Self { dim, mean, noise_sd, label: label.into() }
    }

    pub fn noiseless(dim: usize, label: impl Into<String>, mean: F) -> Self {
        Self::new(dim, 0.0, label, mean)
    }
}

impl<F> NoisyFunction for GaussianNoisy<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], stream: &StreamKey) -> f64 {
        let m = (self.mean)(x);
        if self.noise_sd == 0.0 {
            return m;
        }
        let z: f64 = stream.rng().sample(StandardNormal);
        m + self.noise_sd * z
    }

    fn describe(&self) -> String {
        format!("{} + N(0, {}^2)", self.label, self.noise_sd)
    }
}

/// Stream slots used by the difference schemes below.
pub mod slot {
    pub const PLUS: u64 = 0;
    pub const MINUS: u64 = 1;
    pub const DIRECTION: u64 = 2;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdScheme {
    Central,
    Forward,
    Backward,
}

impl FdScheme {
    /// Bias and noise orders of the scheme for smooth `f`.
    pub fn order(self) -> BiasOrder {
        match self {
            FdScheme::Central => BiasOrder::CENTRAL,
            FdScheme::Forward | FdScheme::Backward => BiasOrder::ONE_SIDED,
        }
    }
}

fn shifted(x: &[f64], coord: usize, by: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[coord] += by;
    y
}

/// One finite-difference sample along coordinate `coord`.
///
/// With `crn` both evaluations share one sub-stream; otherwise they use the
/// independent slots [`slot::PLUS`] and [`slot::MINUS`].
pub fn fd_sample<F: NoisyFunction + ?Sized>(
    f: &F,
    scheme: FdScheme,
    x: &[f64],
    coord: usize,
    delta: f64,
    stream: &StreamKey,
    crn: bool,
) -> Result<f64> {
    check_delta(delta)?;
    if x.len() != f.dim() {
        return Err(domain(format!("point has dimension {}, function expects {}", x.len(), f.dim())));
    }
    if coord >= x.len() {
        return Err(domain(format!("coordinate {coord} out of range for dimension {}", x.len())));
    }
    let ks_plus = stream.child(slot::PLUS);
    let ks_minus = if crn { ks_plus } else { stream.child(slot::MINUS) };
    let (hi, lo, width) = match scheme {
        FdScheme::Central => (shifted(x, coord, delta), shifted(x, coord, -delta), 2.0 * delta),
        FdScheme::Forward => (shifted(x, coord, delta), x.to_vec(), delta),
        FdScheme::Backward => (x.to_vec(), shifted(x, coord, -delta), delta),
    };
    f.check_point(&hi)?;
    f.check_point(&lo)?;
    Ok((f.eval(&hi, &ks_plus) - f.eval(&lo, &ks_minus)) / width)
}

pub fn cfd_sample<F: NoisyFunction + ?Sized>(
    f: &F,
    x: &[f64],
    coord: usize,
    delta: f64,
    stream: &StreamKey,
    crn: bool,
) -> Result<f64> {
    fd_sample(f, FdScheme::Central, x, coord, delta, stream, crn)
}

pub fn ffd_sample<F: NoisyFunction + ?Sized>(
    f: &F,
    x: &[f64],
    coord: usize,
    delta: f64,
    stream: &StreamKey,
    crn: bool,
) -> Result<f64> {
    fd_sample(f, FdScheme::Forward, x, coord, delta, stream, crn)
}

pub fn bfd_sample<F: NoisyFunction + ?Sized>(
    f: &F,
    x: &[f64],
    coord: usize,
    delta: f64,
    stream: &StreamKey,
    crn: bool,
) -> Result<f64> {
    fd_sample(f, FdScheme::Backward, x, coord, delta, stream, crn)
}

/// Rademacher direction drawn from the stream's direction slot.
pub fn rademacher_direction(dim: usize, stream: &StreamKey) -> Vec<f64> {
    let mut rng = stream.child(slot::DIRECTION).rng();
    (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Simultaneous-perturbation gradient sample along a given direction `h`.
pub fn sp_sample_along<F: NoisyFunction + ?Sized>(
    f: &F,
    x: &[f64],
    delta: f64,
    h: &[f64],
    stream: &StreamKey,
) -> Result<Vec<f64>> {
    check_delta(delta)?;
    if x.len() != f.dim() || h.len() != x.len() {
        return Err(domain("point, direction and function dimensions differ"));
    }
    if h.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(domain("perturbation direction must have finite nonzero components"));
    }
    let plus: Vec<f64> = x.iter().zip(h).map(|(xi, hi)| xi + delta * hi).collect();
    let minus: Vec<f64> = x.iter().zip(h).map(|(xi, hi)| xi - delta * hi).collect();
    f.check_point(&plus)?;
    f.check_point(&minus)?;
    let diff = f.eval(&plus, &stream.child(slot::PLUS)) - f.eval(&minus, &stream.child(slot::MINUS));
    Ok(h.iter().map(|hi| diff / (2.0 * delta * hi)).collect())
}

/// Simultaneous-perturbation gradient sample with a Rademacher direction.
pub fn sp_sample<F: NoisyFunction + ?Sized>(
    f: &F,
    x: &[f64],
    delta: f64,
    stream: &StreamKey,
) -> Result<Vec<f64>> {
    check_delta(delta)?;
    let h = rademacher_direction(x.len(), stream);
    sp_sample_along(f, x, delta, &h, stream)
}

/// Finite-difference derivative of a noisy function as an [`Oracle`].
pub struct FiniteDifferenceOracle<F> {
    pub function: F,
    pub point: Vec<f64>,
    pub coord: usize,
    pub scheme: FdScheme,
    pub crn: bool,
}

impl<F: NoisyFunction> Oracle for FiniteDifferenceOracle<F> {
    fn dim(&self) -> usize {
        1
    }

    fn sample_into(&self, delta: f64, stream: &StreamKey, out: &mut [f64]) -> Result<()> {
        out[0] = fd_sample(&self.function, self.scheme, &self.point, self.coord, delta, stream, self.crn)?;
        Ok(())
    }
}

/// Simultaneous-perturbation gradient of a noisy function as an [`Oracle`].
pub struct SimultaneousPerturbationOracle<F> {
    pub function: F,
    pub point: Vec<f64>,
}

impl<F: NoisyFunction> Oracle for SimultaneousPerturbationOracle<F> {
    fn dim(&self) -> usize {
        self.point.len()
    }

    fn sample_into(&self, delta: f64, stream: &StreamKey, out: &mut [f64]) -> Result<()> {
        let g = sp_sample(&self.function, &self.point, delta, stream)?;
        out.copy_from_slice(&g);
        Ok(())
    }
}
