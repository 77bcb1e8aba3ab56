//! Transient M/M/1 simulation: average system time of the first customers
//! of an initially empty queue, and derivative oracles over the two rates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::oracles::{cfd_sample, sp_sample, NoisyFunction, Oracle};
use crate::stream::StreamKey;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueParams {
    pub arrival_rate: f64,
    pub service_rate: f64,
    pub num_customers: usize,
}

impl Default for QueueParams {
    fn default() -> Self {
        Self { arrival_rate: 4.0, service_rate: 4.0, num_customers: 10 }
    }
}

impl QueueParams {
    pub fn new(arrival_rate: f64, service_rate: f64, num_customers: usize) -> Result<Self> {
        let p = Self { arrival_rate, service_rate, num_customers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
            return Err(domain(format!("arrival rate must be positive, got {}", self.arrival_rate)));
        }
        if !(self.service_rate.is_finite() && self.service_rate > 0.0) {
            return Err(domain(format!("service rate must be positive, got {}", self.service_rate)));
        }
        if self.num_customers == 0 {
            return Err(domain("need at least one customer"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientSample {
    pub avg_system_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_customer_times: Option<Vec<f64>>,
}

/// Exponential variate by inversion; `u` in `[0, 1)`.
#[inline]
pub fn exp_inverse(u: f64, rate: f64) -> f64 {
    -(-u).ln_1p() / rate
}

/// Uniforms `(U_A, U_S)` for `k` customers, drawn alternately from the stream.
pub fn draw_uniforms(k: usize, stream: &StreamKey) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream.rng();
    let mut ua = Vec::with_capacity(k);
    let mut us = Vec::with_capacity(k);
    for _ in 0..k {
        ua.push(rng.random::<f64>());
        us.push(rng.random::<f64>());
    }
    (ua, us)
}

/// Per-customer system times by the Lindley recursion from given
/// interarrival and service times.
pub fn lindley_system_times(interarrivals: &[f64], services: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(services.len());
    let mut wait = 0.0f64;
    for j in 0..services.len() {
        if j > 0 {
            wait = (wait + services[j - 1] - interarrivals[j]).max(0.0);
        }
        out.push(wait + services[j]);
    }
    out
}

/// Transient sample from explicit uniforms (one pair per customer).
pub fn mm1_from_uniforms(params: &QueueParams, ua: &[f64], us: &[f64], keep_times: bool) -> TransientSample {
    let a: Vec<f64> = ua.iter().map(|&u| exp_inverse(u, params.arrival_rate)).collect();
    let s: Vec<f64> = us.iter().map(|&u| exp_inverse(u, params.service_rate)).collect();
    let times = lindley_system_times(&a, &s);
    let avg_system_time = times.iter().sum::<f64>() / times.len() as f64;
    TransientSample { avg_system_time, per_customer_times: keep_times.then_some(times) }
}

/// Average system time of the first `num_customers` of an empty, idle queue.
pub fn mm1_transient_sample(params: &QueueParams, stream: &StreamKey) -> Result<TransientSample> {
    params.validate()?;
    let (ua, us) = draw_uniforms(params.num_customers, stream);
    Ok(mm1_from_uniforms(params, &ua, &us, true))
}

/// Allocation-free average system time; the hot path of the oracles.
fn avg_system_time(arrival_rate: f64, service_rate: f64, k: usize, stream: &StreamKey) -> f64 {
    let mut rng = stream.rng();
    let (mut wait, mut prev_service, mut total) = (0.0f64, 0.0f64, 0.0f64);
    for j in 0..k {
        let a = exp_inverse(rng.random::<f64>(), arrival_rate);
        let s = exp_inverse(rng.random::<f64>(), service_rate);
        if j > 0 {
            wait = (wait + prev_service - a).max(0.0);
        }
        total += wait + s;
        prev_service = s;
    }
    total / k as f64
}

/// Discrete-event simulation of a FIFO single-server queue with an explicit
/// event list, kept independent of the Lindley recursion.
pub mod event_driven {
    use std::cmp::Ordering;
    use std::collections::{BinaryHeap, VecDeque};

    #[derive(Clone, Copy, Debug, PartialEq)]
    enum Kind {
        Departure,
        Arrival,
    }

    #[derive(Clone, Copy, Debug)]
    struct Event {
        time: f64,
        kind: Kind,
        customer: usize,
    }

    impl PartialEq for Event {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other) == Ordering::Equal
        }
    }
    impl Eq for Event {}
    impl PartialOrd for Event {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Event {
        // min-heap on time; departures first on ties, then by customer
        fn cmp(&self, other: &Self) -> Ordering {
            other
                .time
                .total_cmp(&self.time)
                .then_with(|| match (self.kind, other.kind) {
                    (Kind::Departure, Kind::Arrival) => Ordering::Greater,
                    (Kind::Arrival, Kind::Departure) => Ordering::Less,
                    _ => Ordering::Equal,
                })
                .then_with(|| other.customer.cmp(&self.customer))
        }
    }

    /// System time of each customer, arrivals at cumulative interarrival times.
    pub fn system_times(interarrivals: &[f64], services: &[f64]) -> Vec<f64> {
        let k = services.len();
        let mut arrival_time = vec![0.0; k];
        let mut departure_time = vec![0.0; k];
        let mut events = BinaryHeap::new();
        let mut t = 0.0;
        for (j, a) in interarrivals.iter().take(k).enumerate() {
            t += a;
            arrival_time[j] = t;
            events.push(Event { time: t, kind: Kind::Arrival, customer: j });
        }
        let mut waiting = VecDeque::new();
        let mut busy = false;
        while let Some(ev) = events.pop() {
            match ev.kind {
                Kind::Arrival => {
                    if busy {
                        waiting.push_back(ev.customer);
                    } else {
                        busy = true;
                        events.push(Event { time: ev.time + services[ev.customer], kind: Kind::Departure, customer: ev.customer });
                    }
                }
                Kind::Departure => {
                    departure_time[ev.customer] = ev.time;
                    match waiting.pop_front() {
                        Some(next) => {
                            events.push(Event { time: ev.time + services[next], kind: Kind::Departure, customer: next });
                        }
                        None => busy = false,
                    }
                }
            }
        }
        departure_time.iter().zip(&arrival_time).map(|(d, a)| d - a).collect()
    }
}

/// The queue as a noisy function of `(arrival_rate, service_rate)`.
///
/// Variates come from the stream by inversion, so re-evaluating at other
/// rates with the same key gives common random numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mm1System {
    pub num_customers: usize,
}

impl NoisyFunction for Mm1System {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64], stream: &StreamKey) -> f64 {
        avg_system_time(x[0], x[1], self.num_customers, stream)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() == 2 && x.iter().all(|r| r.is_finite() && *r > 0.0) {
            Ok(())
        } else {
            Err(domain(format!("queue rates must be positive, got {x:?}")))
        }
    }

    fn describe(&self) -> String {
        format!("expected average system time of the first {} customers of an M/M/1 queue", self.num_customers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateTarget {
    Arrival,
    Service,
}

impl RateTarget {
    fn coord(self) -> usize {
        match self {
            RateTarget::Arrival => 0,
            RateTarget::Service => 1,
        }
    }
}

/// Reference derivatives at arrival = service = 4, first 10 customers.
pub const TRUE_ARRIVAL_DERIVATIVE: f64 = 0.0946;
pub const TRUE_SERVICE_DERIVATIVE: f64 = -0.2501;

fn rates(params: &QueueParams) -> [f64; 2] {
    [params.arrival_rate, params.service_rate]
}

/// One central-difference sample of the derivative in one rate.
pub fn mm1_derivative_oracle(
    params: &QueueParams,
    target: RateTarget,
    delta: f64,
    stream: &StreamKey,
    crn: bool,
) -> Result<f64> {
    params.validate()?;
    let x = rates(params);
    let rate = x[target.coord()];
    if delta >= rate {
        return Err(domain(format!("delta = {delta} must be below the perturbed rate {rate}")));
    }
    cfd_sample(&Mm1System { num_customers: params.num_customers }, &x, target.coord(), delta, stream, crn)
}

/// One simultaneous-perturbation sample of the gradient in both rates.
pub fn mm1_gradient_oracle_sp(params: &QueueParams, delta: f64, stream: &StreamKey) -> Result<[f64; 2]> {
    params.validate()?;
    let x = rates(params);
    if delta >= x[0].min(x[1]) {
        return Err(domain(format!("delta = {delta} must be below both rates {x:?}")));
    }
    let g = sp_sample(&Mm1System { num_customers: params.num_customers }, &x, delta, stream)?;
    Ok([g[0], g[1]])
}

/// [`mm1_derivative_oracle`] as an [`Oracle`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mm1CfdOracle {
    pub params: QueueParams,
    pub target: RateTarget,
    #[serde(default)]
    pub crn: bool,
}

impl Oracle for Mm1CfdOracle {
    fn dim(&self) -> usize {
        1
    }

    fn sample_into(&self, delta: f64, stream: &StreamKey, out: &mut [f64]) -> Result<()> {
        out[0] = mm1_derivative_oracle(&self.params, self.target, delta, stream, self.crn)?;
        Ok(())
    }
}

/// [`mm1_gradient_oracle_sp`] as an [`Oracle`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mm1SpOracle {
    pub params: QueueParams,
}

impl Oracle for Mm1SpOracle {
    fn dim(&self) -> usize {
        2
    }

    fn sample_into(&self, delta: f64, stream: &StreamKey, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&mm1_gradient_oracle_sp(&self.params, delta, stream)?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{sp_sample_along, GaussianNoisy};
    use rand::SeedableRng;

    fn key() -> StreamKey {
        StreamKey::root(77)
    }

    #[test]
    fn empty_system_limit() {
        let p = QueueParams::default();
        let ua = vec![1.0 - 1e-12; 10];
        let us: Vec<f64> = (0..10).map(|i| 0.05 + 0.09 * i as f64).collect();
        let s = mm1_from_uniforms(&p, &ua, &us, true);
        let mean_s = us.iter().map(|&u| exp_inverse(u, 4.0)).sum::<f64>() / 10.0;
        assert!((s.avg_system_time - mean_s).abs() < 1e-15);
    }

    #[test]
    fn single_customer_is_service_time() {
        let p = QueueParams::new(4.0, 4.0, 1).unwrap();
        let s = mm1_transient_sample(&p, &key()).unwrap();
        let (_, us) = draw_uniforms(1, &key());
        assert_eq!(s.avg_system_time, exp_inverse(us[0], 4.0));
    }

    #[test]
    fn fast_path_matches_reference_path() {
        let p = QueueParams::default();
        for r in 0..200 {
            let k = key().child(r);
            let slow = mm1_transient_sample(&p, &k).unwrap().avg_system_time;
            let fast = Mm1System { num_customers: 10 }.eval(&[4.0, 4.0], &k);
            assert!((slow - fast).abs() <= 1e-14 * slow.abs());
        }
    }

    #[test]
    fn lindley_matches_event_list() {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(5);
        for _ in 0..1000 {
            let lam: f64 = rng.random_range(0.2..8.0);
            let mu: f64 = rng.random_range(0.2..8.0);
            let k: usize = rng.random_range(1..40);
            let a: Vec<f64> = (0..k).map(|_| exp_inverse(rng.random(), lam)).collect();
            let s: Vec<f64> = (0..k).map(|_| exp_inverse(rng.random(), mu)).collect();
            let l = lindley_system_times(&a, &s);
            let e = event_driven::system_times(&a, &s);
            for (x, y) in l.iter().zip(&e) {
                assert!((x - y).abs() <= 1e-9 * x.max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn faster_service_never_hurts() {
        for r in 0..300 {
            let (ua, us) = draw_uniforms(10, &key().child(r));
            let slow = mm1_from_uniforms(&QueueParams::new(4.0, 3.0, 10).unwrap(), &ua, &us, true);
            let fast = mm1_from_uniforms(&QueueParams::new(4.0, 3.5, 10).unwrap(), &ua, &us, true);
            for (a, b) in fast.per_customer_times.unwrap().iter().zip(slow.per_customer_times.as_ref().unwrap()) {
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn interarrivals_are_exponential() {
        // Kolmogorov-Smirnov at the 1% level: D < 1.628 / sqrt(n)
        let n = 100_000;
        let lam = 4.0;
        let mut xs: Vec<f64> = (0..n as u64)
            .map(|i| exp_inverse(draw_uniforms(1, &key().child(i)).0[0], lam))
            .collect();
        xs.sort_by(f64::total_cmp);
        let nf = n as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-lam * x).exp();
                (f - i as f64 / nf).abs().max(((i + 1) as f64 / nf - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / nf.sqrt(), "D = {d}");
    }

    #[test]
    fn oracle_reproducible_and_checked() {
        let p = QueueParams::default();
        let a = mm1_derivative_oracle(&p, RateTarget::Arrival, 0.05, &key(), false).unwrap();
        let b = mm1_derivative_oracle(&p, RateTarget::Arrival, 0.05, &key(), false).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let g1 = mm1_gradient_oracle_sp(&p, 0.05, &key()).unwrap();
        let g2 = mm1_gradient_oracle_sp(&p, 0.05, &key()).unwrap();
        assert_eq!(g1, g2);
        assert!(mm1_derivative_oracle(&p, RateTarget::Service, 4.0, &key(), false).is_err());
        assert!(mm1_gradient_oracle_sp(&p, 5.0, &key()).is_err());
        assert!(QueueParams::new(0.0, 1.0, 10).is_err());
    }

    #[test]
    fn sp_on_linear_stub_averages_to_gradient() {
        let stub = GaussianNoisy::noiseless(2, "0.3 lambda - 1.2 mu", |x: &[f64]| 0.3 * x[0] - 1.2 * x[1]);
        let mut acc = [0.0; 2];
        for h in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
            let g = sp_sample_along(&stub, &[4.0, 4.0], 0.05, &h, &key()).unwrap();
            acc[0] += g[0] / 4.0;
            acc[1] += g[1] / 4.0;
        }
        assert!((acc[0] - 0.3).abs() < 1e-12 && (acc[1] + 1.2).abs() < 1e-12);
    }

    #[test]
    fn cfd_means_near_reference_derivatives() {
        // 2e5 draws: a cheap version of the long-run check in the acceptance suite
        let p = QueueParams::default();
        for (target, truth) in [(RateTarget::Arrival, TRUE_ARRIVAL_DERIVATIVE), (RateTarget::Service, TRUE_SERVICE_DERIVATIVE)] {
            let n = 200_000u64;
            let (mut s, mut ss) = (0.0, 0.0);
            for i in 0..n {
                let v = mm1_derivative_oracle(&p, target, 0.05, &key().child(i), false).unwrap();
                s += v;
                ss += v * v;
            }
            let nf = n as f64;
            let mean = s / nf;
            let se = ((ss / nf - mean * mean) / nf).sqrt();
            assert!((mean - truth).abs() < 4.0 * se, "{target:?}: {mean} +- {se}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn raising_mu_never_raises_any_time(lam in 0.5f64..8.0, mu in 0.5f64..8.0, bump in 0.01f64..4.0,
                                                k in 1usize..30, seed in any::<u64>()) {
                let (ua, us) = draw_uniforms(k, &StreamKey::root(seed));
                let slow = mm1_from_uniforms(&QueueParams::new(lam, mu, k).unwrap(), &ua, &us, true);
                let fast = mm1_from_uniforms(&QueueParams::new(lam, mu + bump, k).unwrap(), &ua, &us, true);
                for (a, b) in fast.per_customer_times.unwrap().iter().zip(slow.per_customer_times.as_ref().unwrap()) {
                    prop_assert!(a <= b);
                }
            }

            #[test]
            fn lindley_equals_events(lam in 0.2f64..8.0, mu in 0.2f64..8.0, k in 1usize..40, seed in any::<u64>()) {
                let (ua, us) = draw_uniforms(k, &StreamKey::root(seed));
                let a: Vec<f64> = ua.iter().map(|&u| exp_inverse(u, lam)).collect();
                let s: Vec<f64> = us.iter().map(|&u| exp_inverse(u, mu)).collect();
                for (x, y) in lindley_system_times(&a, &s).iter().zip(&event_driven::system_times(&a, &s)) {
                    prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
                }
            }
        }
    }
}
