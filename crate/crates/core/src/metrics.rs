//! Per-epoch records, message accounting and the convergence-bound tracker.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::nn::{softmax_cross_entropy, Tensor};
use crate::transport::MessageType;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid bound parameters: {0}")]
    InvalidBound(String),
    #[error("objective is not strongly convex: {0}")]
    NotConvex(String),
}

/// Which part of a session a message belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Setup,
    Train,
    Eval,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTraffic {
    pub train_up: u64,
    pub train_down: u64,
    pub eval_up: u64,
    pub eval_down: u64,
    pub bytes: u64,
    pub bytes_by_type: BTreeMap<String, u64>,
}

/// Messages exchanged between the hub and one passive party, seen from the
/// passive side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartyTraffic {
    pub party: u16,
    pub setup_messages: u64,
    pub setup_bytes: u64,
    pub epochs: Vec<EpochTraffic>,
}

impl PartyTraffic {
    pub fn new(party: u16, epochs: usize) -> Self {
        Self {
            party,
            epochs: vec![EpochTraffic::default(); epochs],
            ..Self::default()
        }
    }

    pub fn record(&mut self, phase: Phase, epoch: usize, up: bool, kind: MessageType, bytes: usize) {
        let bytes = bytes as u64;
        if phase == Phase::Setup {
            self.setup_messages += 1;
            self.setup_bytes += bytes;
            return;
        }
        let e = &mut self.epochs[epoch];
        match (phase, up) {
            (Phase::Train, true) => e.train_up += 1,
            (Phase::Train, false) => e.train_down += 1,
            (_, true) => e.eval_up += 1,
            (_, false) => e.eval_down += 1,
        }
        e.bytes += bytes;
        *e.bytes_by_type.entry(kind.name().to_string()).or_default() += bytes;
    }

    pub fn train_messages(&self) -> u64 {
        self.epochs.iter().map(|e| e.train_up + e.train_down).sum()
    }
}

/// Communication totals of one session.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub method: String,
    /// Training messages per batch per passive party the method prescribes.
    pub messages_per_batch: u64,
    pub batches_per_epoch: u64,
    pub epochs: u64,
    pub passive: Vec<PartyTraffic>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub method: String,
    pub epochs: u64,
    pub batches_per_epoch: u64,
    /// Observed training messages per passive party, over the whole run.
    pub observed_per_passive: Vec<u64>,
    pub expected_per_passive: u64,
    /// Model-exchange round units with embedding aggregation: 1 x 4 x T.
    pub vfedmh_round_units: u64,
    /// Round units for prediction-aggregation methods: models x 2 x T.
    pub existing_round_units: u64,
    pub num_models: u64,
    pub mismatches: Vec<String>,
}

impl LedgerReport {
    pub fn consistent(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares observed counts with `per_batch x batches x T`, and evaluates
/// both round-unit formulas at `(epochs, num_models)`.
pub fn ledger_check(ledger: &RoundLedger, epochs: u64, num_models: u64) -> LedgerReport {
    let expected = ledger.messages_per_batch * ledger.batches_per_epoch * epochs;
    let mut mismatches = Vec::new();
    let mut observed = Vec::new();
    for p in &ledger.passive {
        let total = p.train_messages();
        observed.push(total);
        if total != expected {
            mismatches.push(format!("party {}: {total} training messages, expected {expected}", p.party));
        }
        for (e, t) in p.epochs.iter().enumerate() {
            let per_epoch = ledger.messages_per_batch * ledger.batches_per_epoch;
            if t.train_up + t.train_down != per_epoch {
                mismatches.push(format!(
                    "party {} epoch {e}: {} training messages, expected {per_epoch}",
                    p.party,
                    t.train_up + t.train_down
                ));
            }
        }
    }
    LedgerReport {
        method: ledger.method.clone(),
        epochs,
        batches_per_epoch: ledger.batches_per_epoch,
        observed_per_passive: observed,
        expected_per_passive: expected,
        vfedmh_round_units: 4 * epochs,
        existing_round_units: num_models * 2 * epochs,
        num_models,
        mismatches,
    }
}

impl std::fmt::Display for LedgerReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "method: {}", self.method)?;
        writeln!(
            f,
            "per passive party: expected {} training messages ({} batches x {} epochs)",
            self.expected_per_passive, self.batches_per_epoch, self.epochs
        )?;
        for (k, o) in self.observed_per_passive.iter().enumerate() {
            writeln!(f, "  passive #{}: observed {o}", k + 1)?;
        }
        writeln!(f, "round units, embedding aggregation: 1 x 4 x {} = {}", self.epochs, self.vfedmh_round_units)?;
        writeln!(
            f,
            "round units, prediction aggregation: {} x 2 x {} = {}",
            self.num_models, self.epochs, self.existing_round_units
        )?;
        if self.consistent() {
            write!(f, "ledger consistent")
        } else {
            for m in &self.mismatches {
                writeln!(f, "MISMATCH {m}")?;
            }
            write!(f, "ledger inconsistent")
        }
    }
}

/// Constants of the contraction bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// Smoothness.
    pub l: f64,
    /// Strong convexity.
    pub mu: f64,
    /// Bound on the squared gradient norm.
    pub g: f64,
    pub sigma2: f64,
    pub eta: f64,
    /// Initial gap f(theta_0) - f(theta*).
    pub b0: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let all = [self.l, self.mu, self.g, self.sigma2, self.eta, self.b0];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::InvalidBound("non-finite constant".into()));
        }
        if !(self.mu > 0.0) || self.l < self.mu {
            return Err(MetricsError::InvalidBound(format!("need L >= mu > 0, got L={} mu={}", self.l, self.mu)));
        }
        if self.g < 0.0 || self.eta <= 0.0 || self.sigma2 <= 0.0 {
            return Err(MetricsError::InvalidBound("need G >= 0, eta > 0, sigma^2 > 0".into()));
        }
        Ok(())
    }

    pub fn contraction(&self) -> f64 {
        1.0 - self.mu * self.sigma2 * self.eta
    }

    pub fn informative(&self) -> bool {
        let c = self.mu * self.sigma2 * self.eta;
        c > 0.0 && c < 1.0
    }

    /// Limit of the recursion when it contracts.
    pub fn fixed_point(&self) -> f64 {
        0.5 * self.eta * self.eta * self.l * self.g / (self.mu * self.sigma2 * self.eta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTrajectory {
    /// b_0 ..= b_T.
    pub values: Vec<f64>,
    pub informative: bool,
}

/// `b_{t+1} = (1 - mu sigma^2 eta) b_t + eta^2 L G / 2`, for `t < steps`.
pub fn bound_trajectory(p: &BoundParams, steps: usize) -> BoundTrajectory {
    let informative = p.informative();
    if !informative {
        log::warn!(
            "contraction factor {} is outside (0, 1); the bound is non-informative",
            p.contraction()
        );
    }
    let a = p.contraction();
    let c = 0.5 * p.eta * p.eta * p.l * p.g;
    let mut values = Vec::with_capacity(steps + 1);
    let mut b = p.b0;
    values.push(b);
    for _ in 0..steps {
        b = a * b + c;
        values.push(b);
    }
    BoundTrajectory { values, informative }
}

/// Steps whose gap exceeds the bound, out of `min(len)` compared steps.
pub fn bound_violations(gaps: &[f64], bound: &BoundTrajectory) -> (usize, usize) {
    let n = gaps.len().min(bound.values.len());
    let bad = gaps.iter().zip(&bound.values).filter(|(g, b)| g > b).count();
    (bad, n)
}

/// A smooth strongly convex objective over a flat parameter vector.
pub trait ConvexObjective {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> f64;
    fn gradient(&self, theta: &[f64]) -> Vec<f64>;
    /// Upper bound on the largest Hessian eigenvalue.
    fn smoothness(&self) -> f64;
    /// Lower bound on the smallest Hessian eigenvalue.
    fn strong_convexity(&self) -> f64;
}

/// `f(theta) = 1/2 sum_i a_i theta_i^2`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub curvature: Vec<f64>,
}

impl ConvexObjective for Quadratic {
    fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        0.5 * self.curvature.iter().zip(theta).map(|(a, t)| a * t * t).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.curvature.iter().zip(theta).map(|(a, t)| a * t).collect()
    }

    fn smoothness(&self) -> f64 {
        self.curvature.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn strong_convexity(&self) -> f64 {
        self.curvature.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Mean softmax cross-entropy of a dense layer on fixed features plus
/// `lambda/2 |theta|^2`. Parameters are laid out like a dense layer: the
/// `classes x dims` weight matrix row-major, then the bias.
#[derive(Clone, Debug)]
pub struct RegularizedSoftmax {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub lambda: f64,
    smoothness: f64,
}

impl RegularizedSoftmax {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, lambda: f64) -> Result<Self, MetricsError> {
        if !(lambda > 0.0) {
            return Err(MetricsError::NotConvex(format!("regularization {lambda} must be positive")));
        }
        if features.rows() != labels.len() || features.rows() == 0 {
            return Err(MetricsError::NotConvex("features and labels disagree".into()));
        }
        let gram = augmented_gram_max_eigenvalue(&features, 1e-12, 10_000);
        // The softmax Hessian block diag(p) - p p^T has norm at most 1/2.
        let smoothness = gram / (2.0 * features.rows() as f64) + lambda;
        Ok(Self {
            features,
            labels,
            classes,
            lambda,
            smoothness,
        })
    }

    fn dims(&self) -> usize {
        self.features.row_width()
    }

    fn logits(&self, theta: &[f64]) -> Tensor {
        let (n, d, m) = (self.features.rows(), self.dims(), self.classes);
        let (w, b) = theta.split_at(m * d);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let x = self.features.row(i);
            for c in 0..m {
                let row = &w[c * d..(c + 1) * d];
                out[i * m + c] = b[c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Tensor::new(vec![n, m], out).expect("shape")
    }
}

impl ConvexObjective for RegularizedSoftmax {
    fn dim(&self) -> usize {
        self.classes * (self.dims() + 1)
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let (loss, _) = softmax_cross_entropy(&self.logits(theta), &self.labels).expect("labels checked");
        loss + 0.5 * self.lambda * theta.iter().map(|t| t * t).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (n, d, m) = (self.features.rows(), self.dims(), self.classes);
        let (_, g) = softmax_cross_entropy(&self.logits(theta), &self.labels).expect("labels checked");
        let mut out: Vec<f64> = theta.iter().map(|t| self.lambda * t).collect();
        for i in 0..n {
            let x = self.features.row(i);
            let gi = g.row(i);
            for c in 0..m {
                let row = &mut out[c * d..(c + 1) * d];
                row.iter_mut().zip(x).for_each(|(o, xv)| *o += gi[c] * xv);
            }
            for c in 0..m {
                out[m * d + c] += gi[c];
            }
        }
        out
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn strong_convexity(&self) -> f64 {
        self.lambda
    }
}

/// Largest eigenvalue of `X~^T X~`, with `X~` the features plus a ones
/// column, by power iteration.
pub fn augmented_gram_max_eigenvalue(features: &Tensor, tol: f64, max_iter: usize) -> f64 {
    let (n, d) = (features.rows(), features.row_width());
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let mut w = vec![0.0; d + 1];
        for i in 0..n {
            let x = features.row(i);
            let s: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
            w[..d].iter_mut().zip(x).for_each(|(o, a)| *o += s * a);
            w[d] += s;
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        w.iter_mut().for_each(|x| *x /= norm);
        v = w;
        if (next - lambda).abs() <= tol * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Accelerated gradient descent (step `1/L`) until the gradient norm drops
/// below `tol`. Returns the minimizer and the iterations used.
pub fn solve_optimum(obj: &dyn ConvexObjective, start: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let l = obj.smoothness();
    let mu = obj.strong_convexity();
    let q = (mu / l).sqrt();
    let momentum = (1.0 - q) / (1.0 + q);
    let mut x = start.to_vec();
    let mut y = x.clone();
    for it in 0..max_iter {
        let g = obj.gradient(&y);
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < tol {
            return (y, it);
        }
        let next: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - b / l).collect();
        y = next.iter().zip(&x).map(|(n, p)| n + momentum * (n - p)).collect();
        x = next;
    }
    (x, max_iter)
}

/// Bound constants for running `steps` full-batch gradient steps of size
/// `eta` from `start`. G is 1.5 times the largest squared gradient norm seen
/// along that offline trajectory; sigma^2 is 1 for exact gradients.
pub fn estimate_constants(obj: &dyn ConvexObjective, start: &[f64], eta: f64, steps: usize, f_star: f64) -> BoundParams {
    let mut theta = start.to_vec();
    let mut g_max: f64 = 0.0;
    for _ in 0..=steps {
        let g = obj.gradient(&theta);
        g_max = g_max.max(g.iter().map(|v| v * v).sum());
        theta.iter_mut().zip(&g).for_each(|(t, gv)| *t -= eta * gv);
    }
    BoundParams {
        l: obj.smoothness(),
        mu: obj.strong_convexity(),
        g: 1.5 * g_max,
        sigma2: 1.0,
        eta,
        b0: obj.value(start) - f_star,
    }
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub party: u16,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub msgs_up: u64,
    pub msgs_down: u64,
    pub bytes: u64,
}

pub fn write_records_csv<W: Write>(records: &[EpochRecord], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(["party", "epoch", "train_loss", "test_acc", "msgs_up", "msgs_down", "bytes"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<EpochRecord>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// Final figures of a run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub parties: usize,
    pub epochs: usize,
    pub final_test_acc: Vec<f64>,
    pub final_train_loss: Vec<f64>,
    pub ledger: RoundLedger,
    pub ledger_report: LedgerReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bound_violation_rate: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mu: f64, eta: f64, l: f64, g: f64, b0: f64) -> BoundParams {
        BoundParams {
            l,
            mu,
            g,
            sigma2: 1.0,
            eta,
            b0,
        }
    }

    #[test]
    fn one_step_by_hand() {
        let t = bound_trajectory(&params(2.0, 0.1, 2.0, 1.0, 1.0), 1);
        assert!((t.values[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn full_contraction_with_no_noise_hits_zero() {
        let t = bound_trajectory(&params(1.0, 1.0, 1.0, 0.0, 5.0), 1);
        assert_eq!(t.values[1], 0.0);
        assert!(!t.informative);
    }

    #[test]
    fn tiny_step_keeps_initial_gap() {
        let t = bound_trajectory(&params(1.0, 1e-300, 1.0, 1.0, 3.0), 10);
        assert!(t.values.iter().all(|&b| b == 3.0));
    }

    #[test]
    fn approaches_fixed_point_monotonically() {
        let p = params(0.5, 0.2, 2.0, 4.0, 10.0);
        let t = bound_trajectory(&p, 400);
        assert!(t.values.windows(2).all(|w| w[1] <= w[0]));
        assert!((t.values[400] - p.fixed_point()).abs() < 1e-9);
    }

    #[test]
    fn quadratic_constants_are_exact() {
        let q = Quadratic { curvature: vec![2.0] };
        assert_eq!(q.smoothness(), 2.0);
        assert_eq!(q.strong_convexity(), 2.0);
        let p = estimate_constants(&q, &[1.0], 0.1, 5, 0.0);
        assert_eq!(p.b0, 1.0);
        assert!((p.g - 1.5 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_zero_messages() {
        let ledger = RoundLedger {
            method: "vfedmh".into(),
            messages_per_batch: 4,
            batches_per_epoch: 8,
            epochs: 0,
            passive: vec![PartyTraffic::new(1, 0)],
        };
        let r = ledger_check(&ledger, 0, 3);
        assert_eq!(r.observed_per_passive, vec![0]);
        assert_eq!(r.expected_per_passive, 0);
        assert!(r.consistent());
    }
}
