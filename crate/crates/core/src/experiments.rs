//! Replicated Monte Carlo comparisons of estimators, risk ratios against the
//! baseline, closed-form and empirical table reproduction, and report
//! persistence.
//!
//! Replication `r` at budget `n` draws from `root(seed).child(n).child(r)`;
//! every estimator in that replication reuses the same stream, so ratios are
//! paired. Replications run on a rayon pool and are collected in index
//! order, which makes reports independent of the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{amrr_general, amrr_recursive_free, amrr_recursive_tied, optimal_weights, WeightScheme};
use crate::error::{config, Error, Result};
use crate::estimators::{
    averaged_estimate, baseline_estimate, predict_mse_leading, recursive_estimate, weighted_estimate,
    weighted_schedule, DeltaSchedule, PredictKind, RecursiveParams, ScaleRule,
};
use crate::oracles::{BiasOrder, Oracle, SyntheticOracleSpec};
use crate::queueing::{Mm1CfdOracle, Mm1SpOracle, QueueParams, RateTarget, TRUE_ARRIVAL_DERIVATIVE, TRUE_SERVICE_DERIVATIVE};
use crate::stream::StreamKey;
use crate::sum::neumaier;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// z-value of the reported jackknife half-widths (95%).
pub const HALF_WIDTH_Z: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Mm1Setting {
    /// Central differences in one rate.
    Cfd { target: RateTarget },
    /// Simultaneous perturbation over both rates.
    Sp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelSpec {
    Synthetic {
        spec: SyntheticOracleSpec,
    },
    Mm1 {
        #[serde(default)]
        queue: QueueParams,
        setting: Mm1Setting,
        #[serde(default)]
        crn: bool,
        /// Overrides the reference derivative(s) used as the truth.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        theta: Option<Vec<f64>>,
    },
}

impl ModelSpec {
    pub fn order(&self) -> BiasOrder {
        match self {
            ModelSpec::Synthetic { spec } => spec.order,
            ModelSpec::Mm1 { .. } => BiasOrder::CENTRAL,
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        match self {
            ModelSpec::Synthetic { spec } => spec.theta.clone(),
            ModelSpec::Mm1 { theta: Some(t), .. } => t.clone(),
            ModelSpec::Mm1 { setting: Mm1Setting::Cfd { target: RateTarget::Arrival }, .. } => vec![TRUE_ARRIVAL_DERIVATIVE],
            ModelSpec::Mm1 { setting: Mm1Setting::Cfd { target: RateTarget::Service }, .. } => vec![TRUE_SERVICE_DERIVATIVE],
            ModelSpec::Mm1 { setting: Mm1Setting::Sp, .. } => vec![TRUE_ARRIVAL_DERIVATIVE, TRUE_SERVICE_DERIVATIVE],
        }
    }

    pub fn oracle(&self) -> Result<Box<dyn Oracle>> {
        Ok(match self {
            ModelSpec::Synthetic { spec } => Box::new(spec.clone()),
            ModelSpec::Mm1 { queue, setting, crn, .. } => {
                queue.validate()?;
                match setting {
                    Mm1Setting::Cfd { target } => Box::new(Mm1CfdOracle { params: *queue, target: *target, crn: *crn }),
                    Mm1Setting::Sp => Box::new(Mm1SpOracle { params: *queue }),
                }
            }
        })
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatorKind {
    Baseline,
    Recursive {
        c: f64,
        #[serde(default = "one")]
        beta: f64,
        /// `d~ = d_scale * baseline_d`.
        #[serde(default = "one")]
        d_scale: f64,
    },
    Averaged {
        c: f64,
        beta: f64,
        #[serde(default = "one")]
        d_scale: f64,
    },
    Weighted {
        /// Defaults to the experiment's `K`.
        #[serde(default, rename = "K", skip_serializing_if = "Option::is_none")]
        k: Option<f64>,
        #[serde(default)]
        scale_rule: ScaleRule,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: EstimatorKind,
}

impl EstimatorConfig {
    pub fn baseline() -> Self {
        Self { name: None, kind: EstimatorKind::Baseline }
    }

    pub fn recursive(c: f64, beta: f64, d_scale: f64) -> Self {
        Self { name: None, kind: EstimatorKind::Recursive { c, beta, d_scale } }
    }

    pub fn averaged(c: f64, beta: f64, d_scale: f64) -> Self {
        Self { name: None, kind: EstimatorKind::Averaged { c, beta, d_scale } }
    }

    pub fn weighted(k: f64) -> Self {
        Self { name: None, kind: EstimatorKind::Weighted { k: Some(k), scale_rule: ScaleRule::EtaStar } }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn label(&self, default_k: f64) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match &self.kind {
            EstimatorKind::Baseline => "baseline".into(),
            EstimatorKind::Recursive { .. } => "recursive".into(),
            EstimatorKind::Averaged { .. } => "averaged".into(),
            EstimatorKind::Weighted { k, scale_rule } => {
                let tag = match scale_rule {
                    ScaleRule::EtaStar => "",
                    ScaleRule::Inflation => ",d=Kd",
                };
                format!("weighted(K={}{tag})", k.unwrap_or(default_k))
            }
        }
    }
}

fn default_replications() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub estimators: Vec<EstimatorConfig>,
    pub budgets: Vec<usize>,
    pub baseline_d: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(default)]
    pub n0: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Parses JSON; unknown estimator kinds and malformed fields become
    /// configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config(format!("invalid experiment config: {e}")))
    }

    /// The M/M/1 defaults: burn-in 500 and 1000 replications.
    pub fn mm1(setting: Mm1Setting, estimators: Vec<EstimatorConfig>, budgets: Vec<usize>, d: f64, k: f64, seed: u64) -> Self {
        Self {
            model: ModelSpec::Mm1 { queue: QueueParams::default(), setting, crn: false, theta: None },
            estimators,
            budgets,
            baseline_d: d,
            k,
            n0: 500,
            replications: default_replications(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(config("replications must be at least 2"));
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(config("budgets must be a nonempty list of positive integers"));
        }
        if !(self.baseline_d.is_finite() && self.baseline_d > 0.0) {
            return Err(config("baseline_d must be positive"));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(config("K must be positive"));
        }
        if self.estimators.is_empty() {
            return Err(config("no estimators configured"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.estimators {
            if !seen.insert(e.label(self.k)) {
                return Err(config(format!("duplicate estimator label {:?}; set distinct names", e.label(self.k))));
            }
            if let EstimatorKind::Weighted { k: Some(k), .. } = e.kind {
                if !(k.is_finite() && k > 0.0) {
                    return Err(config("K must be positive"));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Estimators with a baseline guaranteed in front.
    fn lineup(&self) -> Vec<EstimatorConfig> {
        let mut list = Vec::with_capacity(self.estimators.len() + 1);
        match self.estimators.iter().position(|e| e.kind == EstimatorKind::Baseline) {
            Some(i) => {
                list.push(self.estimators[i].clone());
                list.extend(self.estimators.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, e)| e.clone()));
            }
            None => {
                list.push(EstimatorConfig::baseline());
                list.extend(self.estimators.iter().cloned());
            }
        }
        list
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimator: String,
    pub n: usize,
    pub mse: f64,
    /// Standard deviation of the squared errors over `sqrt(replications)`.
    pub se: f64,
    /// `mse / baseline mse` at the same `n`.
    pub ratio: f64,
    /// Jackknife half-width of `ratio`.
    pub ratio_half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<f64>,
    /// Set when the baseline MSE is zero and the ratio is 1 by convention.
    #[serde(default)]
    pub degenerate: bool,
    /// Per-replication squared errors, in replication order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub squared_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub estimator: String,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: f64,
    pub a_star: f64,
    pub eta_star: f64,
    pub s_star: f64,
    pub scaled_s_star: f64,
    pub d_tilde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub replications: usize,
    pub generator: String,
    /// Left empty unless requested, so reruns stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub schemes: Vec<SchemeSummary>,
}

impl ExperimentReport {
    pub fn row(&self, estimator: &str, n: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.n == n)
    }

    pub fn estimators(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.estimator) {
                out.push(r.estimator.clone());
            }
        }
        out
    }

    pub fn budgets(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.n) {
                out.push(r.n);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Flat CSV: `estimator,n,mse,se,ratio,theory`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["estimator", "n", "mse", "se", "ratio", "theory"])?;
        for r in &self.rows {
            wtr.write_record([
                r.estimator.clone(),
                r.n.to_string(),
                r.mse.to_string(),
                r.se.to_string(),
                r.ratio.to_string(),
                r.theory.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Rows per budget, a column per estimator, ratios in brackets.
    pub fn summary(&self) -> String {
        let ests = self.estimators();
        let mut cells: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["n".to_string()];
        header.extend(ests.iter().cloned());
        cells.push(header);
        for n in self.budgets() {
            let mut line = vec![n.to_string()];
            for e in &ests {
                line.push(match self.row(e, n) {
                    Some(r) if e == &ests[0] => format!("{:.3e}", r.mse),
                    Some(r) => format!("{:.3e} ({})", r.mse, format_sig(r.ratio, 4)),
                    None => "-".into(),
                });
            }
            cells.push(line);
        }
        render_columns(&cells)
    }
}

/// Left-aligned, space-padded columns.
pub fn render_columns(cells: &[Vec<String>]) -> String {
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| cells.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in cells {
        let line: Vec<String> = row.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// `x` with `digits` significant digits; scientific outside `[1e-3, 1e6)`.
pub fn format_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-3..6).contains(&mag) {
        return format!("{:.*e}", digits.saturating_sub(1), x);
    }
    let decimals = (digits as i32 - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Ratio of two paired means with a jackknife half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub ratio: f64,
    pub half_width: f64,
    pub degenerate: bool,
}

/// `mean(num) / mean(den)` with leave-one-out jackknife over replications.
pub fn jackknife_ratio(num: &[f64], den: &[f64]) -> RatioEstimate {
    let m = num.len().min(den.len());
    let sn = neumaier(num[..m].iter().copied());
    let sd = neumaier(den[..m].iter().copied());
    if sd == 0.0 {
        return RatioEstimate { ratio: 1.0, half_width: 0.0, degenerate: true };
    }
    let ratio = sn / sd;
    if m < 2 {
        return RatioEstimate { ratio, half_width: f64::INFINITY, degenerate: false };
    }
    let loo: Vec<f64> = (0..m).map(|i| (sn - num[i]) / (sd - den[i])).collect();
    let mean = neumaier(loo.iter().copied()) / m as f64;
    let ss = neumaier(loo.iter().map(|r| (r - mean) * (r - mean)));
    let var = (m as f64 - 1.0) / m as f64 * ss;
    RatioEstimate { ratio, half_width: HALF_WIDTH_Z * var.sqrt(), degenerate: false }
}

/// Risk ratio of `estimator` against the baseline at budget `n`.
pub fn paired_risk_ratio(report: &ExperimentReport, estimator: &str, n: usize) -> Result<RatioEstimate> {
    let base_label = report
        .rows
        .first()
        .map(|r| r.estimator.clone())
        .ok_or_else(|| config("report has no rows"))?;
    let base = report.row(&base_label, n).ok_or_else(|| config(format!("no baseline row at n = {n}")))?;
    let row = report
        .row(estimator, n)
        .ok_or_else(|| config(format!("no row for estimator {estimator:?} at n = {n}")))?;
    if row.squared_errors.is_empty() || base.squared_errors.is_empty() {
        return Err(config("report carries no replication-level errors"));
    }
    Ok(jackknife_ratio(&row.squared_errors, &base.squared_errors))
}

enum Prepared {
    Baseline(DeltaSchedule),
    Recursive(DeltaSchedule, RecursiveParams),
    Averaged(DeltaSchedule, RecursiveParams),
    Weighted(DeltaSchedule, Box<WeightScheme>),
}

impl Prepared {
    fn run(&self, oracle: &dyn Oracle, n: usize, stream: &StreamKey) -> Result<Vec<f64>> {
        Ok(match self {
            Prepared::Baseline(s) => baseline_estimate(oracle, n, s, stream)?.estimate,
            Prepared::Recursive(s, p) => recursive_estimate(oracle, n, s, p, stream)?.estimate,
            Prepared::Averaged(s, p) => averaged_estimate(oracle, n, s, p, stream)?.estimate,
            Prepared::Weighted(s, w) => weighted_estimate(oracle, n, s, w, stream)?.estimate,
        })
    }

    /// Leading-order MSE on the synthetic model; `None` when unknown.
    fn theory(&self, model: &ModelSpec, n: usize) -> Option<f64> {
        let ModelSpec::Synthetic { spec } = model else { return None };
        let (b2, s2, order) = (spec.bias_norm_sq(), spec.noise_trace(), spec.order);
        let nf = n as f64;
        match self {
            Prepared::Baseline(s) => predict_mse_leading(PredictKind::Baseline, order, s.scale, s.alpha, b2, s2, nf).ok(),
            Prepared::Recursive(s, p) => {
                predict_mse_leading(PredictKind::Recursive { c: p.c, beta: p.beta }, order, s.scale, s.alpha, b2, s2, nf).ok()
            }
            Prepared::Averaged(s, p) => {
                predict_mse_leading(PredictKind::Averaged { c: p.c, beta: p.beta }, order, s.scale, s.alpha, b2, s2, nf).ok()
            }
            Prepared::Weighted(s, w) => {
                let a = w.bias_sum();
                Some(s.scale.powf(2.0 * order.q1) * a * a * b2 + s2 / s.scale.powf(2.0 * order.q2) * w.variance_sum())
            }
        }
    }
}

fn prepare(
    est: &EstimatorConfig,
    cfg: &ExperimentConfig,
    n: usize,
    label: &str,
    schemes: &mut Vec<SchemeSummary>,
) -> Result<Prepared> {
    let order = cfg.model.order();
    let d = cfg.baseline_d;
    Ok(match &est.kind {
        EstimatorKind::Baseline => Prepared::Baseline(DeltaSchedule::optimal(d, order, cfg.n0)?),
        EstimatorKind::Recursive { c, beta, d_scale } => Prepared::Recursive(
            DeltaSchedule::optimal(d_scale * d, order, cfg.n0).map_err(|e| config(e.to_string()))?,
            RecursiveParams::new(*c, *beta)?,
        ),
        EstimatorKind::Averaged { c, beta, d_scale } => {
            if *beta >= 1.0 {
                return Err(config(format!("averaged estimator needs beta < 1, got {beta}")));
            }
            Prepared::Averaged(
                DeltaSchedule::optimal(d_scale * d, order, cfg.n0).map_err(|e| config(e.to_string()))?,
                RecursiveParams::new(*c, *beta)?,
            )
        }
        EstimatorKind::Weighted { k, scale_rule } => {
            let k = k.unwrap_or(cfg.k);
            let scheme = optimal_weights(n, cfg.n0, order, k)?;
            let sched = weighted_schedule(&scheme, d, *scale_rule)?;
            schemes.push(SchemeSummary {
                estimator: label.to_string(),
                n,
                k,
                a_star: scheme.a_star,
                eta_star: scheme.eta_star,
                s_star: scheme.s_star,
                scaled_s_star: scheme.scaled_s_star(),
                d_tilde: sched.scale,
            });
            Prepared::Weighted(sched, Box::new(scheme))
        }
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config(format!("cannot start worker pool: {e}")))
}

/// Runs every estimator at every budget over `config.replications` paired
/// replications. `workers = 0` uses all cores.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let oracle = cfg.model.oracle()?;
    let theta = cfg.model.theta();
    if theta.len() != oracle.dim() {
        return Err(config(format!("truth has dimension {}, oracle has {}", theta.len(), oracle.dim())));
    }
    let lineup = cfg.lineup();
    let labels: Vec<String> = lineup.iter().map(|e| e.label(cfg.k)).collect();
    let root = StreamKey::root(cfg.seed);
    let pool = pool(workers)?;
    let mut rows = Vec::new();
    let mut schemes = Vec::new();

    for &n in &cfg.budgets {
        let plan: Vec<Prepared> = lineup
            .iter()
            .zip(&labels)
            .map(|(e, l)| prepare(e, cfg, n, l, &mut schemes))
            .collect::<Result<_>>()?;
        let base_stream = root.child(n as u64);
        let per_rep: Vec<Vec<f64>> = pool.install(|| {
            (0..cfg.replications)
                .into_par_iter()
                .map(|r| {
                    let stream = base_stream.child(r as u64);
                    plan.iter()
                        .map(|p| {
                            let est = p.run(oracle.as_ref(), n, &stream)?;
                            Ok(est.iter().zip(&theta).map(|(e, t)| (e - t) * (e - t)).sum())
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let columns: Vec<Vec<f64>> = (0..plan.len()).map(|i| per_rep.iter().map(|r| r[i]).collect()).collect();
        let reps = cfg.replications as f64;
        for (i, errs) in columns.iter().enumerate() {
            let mse = neumaier(errs.iter().copied()) / reps;
            let var = neumaier(errs.iter().map(|e| (e - mse) * (e - mse))) / (reps - 1.0);
            let ratio = jackknife_ratio(errs, &columns[0]);
            let row = ReportRow {
                estimator: labels[i].clone(),
                n,
                mse,
                se: (var / reps).sqrt(),
                ratio: ratio.ratio,
                ratio_half_width: ratio.half_width,
                theory: plan[i].theory(&cfg.model, n),
                degenerate: ratio.degenerate,
                squared_errors: errs.clone(),
            };
            if ![row.mse, row.se, row.ratio].iter().all(|v| v.is_finite()) {
                return Err(Error::Domain(format!("non-finite result for {} at n = {n}", row.estimator)));
            }
            rows.push(row);
        }
    }

    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            replications: cfg.replications,
            generator: format!("mmrisk-core {}", env!("CARGO_PKG_VERSION")),
            timestamp: None,
        },
        config: cfg.clone(),
        rows,
        schemes,
    })
}

/// `k` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..k)
        .map(|i| match i {
            0 => lo,
            i if i == k - 1 => hi,
            i => (a + (b - a) * i as f64 / (k - 1) as f64).exp(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub bias: f64,
    pub sigma: f64,
    pub estimator: String,
    pub n: usize,
    pub ratio: f64,
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub max_ratio: f64,
}

/// Re-runs a scalar synthetic experiment over a `(B, sigma)` grid and
/// records the worst ratio of each non-baseline estimator.
pub fn adversarial_sweep(base: &ExperimentConfig, biases: &[f64], sigmas: &[f64], workers: usize) -> Result<SweepReport> {
    let ModelSpec::Synthetic { spec } = &base.model else {
        return Err(config("the adversarial sweep needs a synthetic model"));
    };
    if spec.dim() != 1 {
        return Err(config("the adversarial sweep needs a scalar synthetic model"));
    }
    let mut cells = Vec::new();
    for &b in biases {
        for &s in sigmas {
            let mut cfg = base.clone();
            let cell_spec = SyntheticOracleSpec::new(spec.theta.clone(), vec![b], vec![s], spec.order, spec.higher_order_bias.clone())?;
            cfg.model = ModelSpec::Synthetic { spec: cell_spec };
            let report = run_experiment(&cfg, workers)?;
            let base_label = report.rows[0].estimator.clone();
            for r in report.rows.iter().filter(|r| r.estimator != base_label) {
                cells.push(SweepCell {
                    bias: b,
                    sigma: s,
                    estimator: r.estimator.clone(),
                    n: r.n,
                    ratio: r.ratio,
                    half_width: r.ratio_half_width,
                });
            }
        }
    }
    let max_ratio = cells.iter().map(|c| c.ratio).fold(f64::NEG_INFINITY, f64::max);
    Ok(SweepReport { cells, max_ratio })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormEntry {
    pub label: String,
    pub ratio: f64,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_scale: Option<f64>,
    pub configuration: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormTable {
    pub id: u8,
    pub title: String,
    pub order: BiasOrder,
    pub entries: Vec<ClosedFormEntry>,
}

impl ClosedFormTable {
    pub fn render(&self) -> String {
        let mut cells = vec![vec!["estimator".to_string(), "AMRR".into(), "configuration".into()]];
        for e in &self.entries {
            cells.push(vec![e.label.clone(), format_sig(e.ratio, 4), e.configuration.clone()]);
        }
        format!("{}\n{}", self.title, render_columns(&cells))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TableOutput {
    ClosedForm(ClosedFormTable),
    Empirical(ExperimentReport),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableOptions {
    pub replications: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self { replications: 1000, seed: 2024, workers: 0 }
    }
}

fn recursive_tables(id: u8, order: BiasOrder) -> ClosedFormTable {
    let (tied, tc) = amrr_recursive_tied(order);
    let (free, fc) = amrr_recursive_free(order);
    ClosedFormTable {
        id,
        title: format!("AMRR and optimal configurations, q1 = {}, q2 = {}", order.q1, order.q2),
        order,
        entries: vec![
            ClosedFormEntry {
                label: "recursive, d~ = d".into(),
                ratio: tied,
                k: None,
                c: Some(tc.c),
                d_scale: Some(1.0),
                configuration: format!("c = {}, beta = 1", format_sig(tc.c, 3)),
            },
            ClosedFormEntry {
                label: "recursive, d~ = g(d)".into(),
                ratio: free,
                k: None,
                c: Some(1.0),
                d_scale: Some(fc.d_scale),
                configuration: format!("d~ = {}d, c = 1, beta = 1", format_sig(fc.d_scale, 2)),
            },
            ClosedFormEntry {
                label: "averaged".into(),
                ratio: free,
                k: None,
                c: None,
                d_scale: Some(fc.d_scale),
                configuration: format!("d~ = {}d, c > 0, 0 < beta < 1", format_sig(fc.d_scale, 2)),
            },
        ],
    }
}

fn general_tables(id: u8, order: BiasOrder) -> Result<ClosedFormTable> {
    let entries = (5..=20)
        .map(|i| {
            let k = i as f64 / 10.0;
            Ok(ClosedFormEntry {
                label: format!("K = {k:.1}"),
                ratio: amrr_general(order, k)?,
                k: Some(k),
                c: None,
                d_scale: None,
                configuration: format!("d~ = {k:.1}d, two-decay weights"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClosedFormTable {
        id,
        title: format!("AMRR of the general weighted estimator against K, q1 = {}, q2 = {}", order.q1, order.q2),
        order,
        entries,
    })
}

/// Budgets of the empirical tables before scaling.
pub const TABLE_BUDGETS: [usize; 6] = [10_000, 20_000, 30_000, 50_000, 80_000, 100_000];

/// Experiment behind empirical table 5, 6, 7 or 8 at the given scale.
pub fn table_config(id: u8, scale: f64, opts: &TableOptions) -> Result<ExperimentConfig> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(config(format!("scale must lie in (0, 1], got {scale}")));
    }
    let budgets: Vec<usize> = TABLE_BUDGETS.iter().map(|&b| (b as f64 * scale).round() as usize).collect();
    if budgets[0] < 1000 {
        return Err(config(format!("scale {scale} shrinks the smallest budget below 1000")));
    }
    let (setting, d, ks): (Mm1Setting, f64, &[f64]) = match id {
        5 => (Mm1Setting::Cfd { target: RateTarget::Arrival }, 1.0, &[1.0, 2.0, 3.0, 4.0]),
        6 => (Mm1Setting::Cfd { target: RateTarget::Arrival }, 2.0, &[1.0, 2.0, 3.0, 4.0]),
        7 => (Mm1Setting::Sp, 1.0, &[1.0, 2.0]),
        8 => (Mm1Setting::Sp, 2.0, &[1.0, 2.0]),
        _ => return Err(config(format!("no empirical table {id}; choose 5-8"))),
    };
    let (_, free) = amrr_recursive_free(BiasOrder::CENTRAL);
    let mut estimators = vec![EstimatorConfig::baseline(), EstimatorConfig::recursive(1.0, 1.0, free.d_scale)];
    estimators.extend(ks.iter().map(|&k| EstimatorConfig::weighted(k)));
    let mut cfg = ExperimentConfig::mm1(setting, estimators, budgets, d, 1.0, opts.seed);
    cfg.replications = opts.replications;
    Ok(cfg)
}

/// Tables 1-4 from closed forms; 5-8 by Monte Carlo at budgets times `scale`.
pub fn reproduce_table(id: u8, scale: f64, opts: &TableOptions) -> Result<TableOutput> {
    match id {
        1 => Ok(TableOutput::ClosedForm(recursive_tables(1, BiasOrder::CENTRAL))),
        2 => Ok(TableOutput::ClosedForm(recursive_tables(2, BiasOrder::ONE_SIDED))),
        3 => Ok(TableOutput::ClosedForm(general_tables(3, BiasOrder::CENTRAL)?)),
        4 => Ok(TableOutput::ClosedForm(general_tables(4, BiasOrder::ONE_SIDED)?)),
        5..=8 => Ok(TableOutput::Empirical(run_experiment(&table_config(id, scale, opts)?, opts.workers)?)),
        _ => Err(config(format!("no table {id}; choose 1-8"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Writes `(n, j, weight)` rows (CSV) or the full schemes (JSON).
pub fn emit_weight_distribution<W: Write>(schemes: &[WeightScheme], format: Format, mut out: W) -> Result<()> {
    match format {
        Format::Csv => {
            let mut wtr = csv::Writer::from_writer(out);
            wtr.write_record(["n", "j", "weight"])?;
            for s in schemes {
                for (i, w) in s.weights.iter().enumerate() {
                    wtr.write_record([s.n.to_string(), (i + 1).to_string(), format!("{w:e}")])?;
                }
            }
            wtr.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, schemes)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Weight schemes for several budgets at one `K`.
pub fn weight_distribution(budgets: &[usize], n0: usize, order: BiasOrder, k: f64) -> Result<Vec<WeightScheme>> {
    budgets.iter().map(|&n| optimal_weights(n, n0, order, k)).collect()
}

/// Per-estimator MSE columns keyed by label, in budget order.
pub fn mse_table(report: &ExperimentReport) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in &report.rows {
        out.entry(r.estimator.clone()).or_default().push((r.n, r.mse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(b: f64, s: f64) -> ModelSpec {
        ModelSpec::Synthetic { spec: SyntheticOracleSpec::degenerate(vec![0.0], vec![b], vec![s], BiasOrder::CENTRAL, None).unwrap() }
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            model: synthetic(1.0, 1.0),
            estimators: vec![
                EstimatorConfig::baseline(),
                EstimatorConfig::recursive(1.0, 1.0, 1.0),
                EstimatorConfig::averaged(1.0, 0.5, 0.83),
                EstimatorConfig::weighted(1.0),
            ],
            budgets: vec![200, 500],
            baseline_d: 1.0,
            k: 1.0,
            n0: 0,
            replications: 40,
            seed: 9,
        }
    }

    #[test]
    fn degenerate_model_gives_zero_mse() {
        let mut cfg = small_config();
        cfg.model = synthetic(0.0, 0.0);
        let rep = run_experiment(&cfg, 1).unwrap();
        for r in &rep.rows {
            assert_eq!(r.mse, 0.0);
            assert_eq!(r.ratio, 1.0);
            assert!(r.degenerate);
        }
    }

    #[test]
    fn report_shape_and_baseline_ratio() {
        let rep = run_experiment(&small_config(), 1).unwrap();
        assert_eq!(rep.rows.len(), 8);
        assert_eq!(rep.estimators(), vec!["baseline", "recursive", "averaged", "weighted(K=1)"]);
        for n in [200, 500] {
            let b = rep.row("baseline", n).unwrap();
            assert_eq!(b.ratio, 1.0);
            for r in rep.rows.iter().filter(|r| r.n == n) {
                assert!((r.ratio - r.mse / b.mse).abs() < 1e-12 * r.ratio);
                assert!(r.theory.is_some());
                let sd = {
                    let m = r.mse;
                    (r.squared_errors.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / 39.0).sqrt()
                };
                assert!((r.se - sd / 40f64.sqrt()).abs() < 1e-12 * r.se.max(1e-300));
            }
        }
        assert_eq!(rep.schemes.len(), 2);
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let cfg = small_config();
        let a = run_experiment(&cfg, 1).unwrap().to_json().unwrap();
        let b = run_experiment(&cfg, 3).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_added_when_missing() {
        let mut cfg = small_config();
        cfg.estimators = vec![EstimatorConfig::weighted(2.0)];
        let rep = run_experiment(&cfg, 1).unwrap();
        assert_eq!(rep.estimators(), vec!["baseline", "weighted(K=2)"]);
    }

    #[test]
    fn config_errors() {
        let mut cfg = small_config();
        cfg.replications = 1;
        assert!(matches!(run_experiment(&cfg, 1), Err(Error::Config(_))));
        let mut cfg = small_config();
        cfg.estimators.push(EstimatorConfig::baseline());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let json = serde_json::to_string(&small_config()).unwrap().replace("\"averaged\"", "\"bogus\"");
        assert!(matches!(ExperimentConfig::from_json(&json), Err(Error::Config(_))));
        let back = ExperimentConfig::from_json(&serde_json::to_string(&small_config()).unwrap()).unwrap();
        assert_eq!(back, small_config());
    }

    #[test]
    fn paired_ratio_properties() {
        let rep = run_experiment(&small_config(), 1).unwrap();
        let same = paired_risk_ratio(&rep, "baseline", 500).unwrap();
        assert_eq!(same.ratio, 1.0);
        let r = paired_risk_ratio(&rep, "weighted(K=1)", 500).unwrap();
        assert!(r.ratio > 0.0 && r.half_width > 0.0);
        let mut doubled = rep.clone();
        for row in doubled.rows.iter_mut().filter(|r| r.estimator == "baseline") {
            row.squared_errors.iter_mut().for_each(|e| *e *= 2.0);
        }
        let r2 = paired_risk_ratio(&doubled, "weighted(K=1)", 500).unwrap();
        assert!((r2.ratio - r.ratio / 2.0).abs() < 1e-12);
        assert!(paired_risk_ratio(&rep, "weighted(K=1)", 123).is_err());
    }

    #[test]
    fn jackknife_of_exact_proportion_is_zero_width() {
        let den = [1.0, 2.0, 3.0, 4.0];
        let num = [0.5, 1.0, 1.5, 2.0];
        let r = jackknife_ratio(&num, &den);
        assert!((r.ratio - 0.5).abs() < 1e-15 && r.half_width < 1e-12);
    }

    #[test]
    fn csv_header_and_rows() {
        let rep = run_experiment(&small_config(), 1).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "estimator,n,mse,se,ratio,theory");
        assert_eq!(lines.count(), rep.rows.len());
    }

    #[test]
    fn json_round_trip() {
        let rep = run_experiment(&small_config(), 1).unwrap();
        assert_eq!(ExperimentReport::from_json(&rep.to_json().unwrap()).unwrap(), rep);
        assert_eq!(rep.provenance.config_hash.len(), 64);
        assert!(rep.provenance.timestamp.is_none());
    }

    #[test]
    fn closed_form_tables() {
        let TableOutput::ClosedForm(t2) = reproduce_table(2, 1.0, &TableOptions::default()).unwrap() else { panic!() };
        let printed: Vec<f64> = t2.entries.iter().map(|e| (e.ratio * 100.0).round() / 100.0).collect();
        assert_eq!(printed, vec![1.27, 1.09, 1.09]);
        let TableOutput::ClosedForm(t3) = reproduce_table(3, 1.0, &TableOptions::default()).unwrap() else { panic!() };
        assert_eq!(t3.entries.len(), 16);
        assert!((t3.entries[0].ratio - 8.0 / 3.0).abs() < 1e-12);
        assert!(t3.render().contains("K = 0.5"));
        assert!(reproduce_table(9, 1.0, &TableOptions::default()).is_err());
        assert!(reproduce_table(5, 0.05, &TableOptions::default()).is_err());
    }

    #[test]
    fn table_configs() {
        let cfg = table_config(5, 0.1, &TableOptions::default()).unwrap();
        assert_eq!(cfg.budgets, vec![1000, 2000, 3000, 5000, 8000, 10000]);
        assert_eq!(cfg.n0, 500);
        assert_eq!(cfg.estimators.len(), 6);
        assert_eq!(table_config(8, 1.0, &TableOptions::default()).unwrap().estimators.len(), 4);
    }

    #[test]
    fn weight_distribution_shape() {
        let budgets: Vec<usize> = (1..=20).map(|i| 100 * i).collect();
        let schemes = weight_distribution(&budgets, 0, BiasOrder::CENTRAL, 1.0).unwrap();
        let s1000 = &schemes[9];
        assert_eq!(s1000.n, 1000);
        assert!(s1000.weights[0] < 0.0 && s1000.weights[999] > 0.0);
        let maxes: Vec<f64> = schemes.iter().map(|s| s.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()))).collect();
        // Below n = 300 the optimum is interior (eta* < 1) and the weights are
        // flatter; once the constraint binds the spread shrinks with n.
        assert!(schemes[0].eta_star < 1.0 && maxes[0] < maxes[2]);
        assert!(maxes[2..].windows(2).all(|w| w[1] < w[0]), "{maxes:?}");
        let mut buf = Vec::new();
        emit_weight_distribution(&schemes[..1], Format::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,j,weight\n100,1,"));
        let total: f64 = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn summary_layout() {
        let rep = run_experiment(&small_config(), 1).unwrap();
        let s = rep.summary();
        let first = s.lines().next().unwrap();
        assert!(first.starts_with("n ") && first.contains("weighted(K=1)"));
        assert_eq!(s.lines().count(), 3);
        assert!(s.lines().nth(1).unwrap().contains('('));
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_sig(2.0 / 3.0, 4), "0.6667");
        assert_eq!(format_sig(1.08866, 4), "1.089");
        assert_eq!(format_sig(0.78254, 4), "0.7825");
        assert_eq!(format_sig(1.21e-4, 4), "1.210e-4");
        assert_eq!(format_sig(1.0, 4), "1.000");
    }
}
