//! The convex calibration problem used to check the contraction bound:
//! frozen random embedding nets, an L2-regularized linear softmax decision
//! layer, and full-batch gradient steps run through the real protocol.

use serde::{Deserialize, Serialize};

use crate::data::{synth_blobs, vertical_split};
use crate::metrics::{
    bound_trajectory, bound_violations, estimate_constants, solve_optimum, BoundParams, ConvexObjective,
    MetricsError, Quadratic, RegularizedSoftmax,
};
use crate::nn::{forward_embedding, InputShape, LayerDescriptor, NetworkSpec, Tensor};
use crate::optim::OptimizerConfig;
use crate::protocol::{run_session, PartySetup, ProtocolError, SessionConfig};
use crate::secure::{aggregate, mask_embedding, BlindingMask};

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, CalibrationError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    /// `1/2 sum a_i theta_i^2` minimized offline by gradient descent.
    Quadratic { curvature: Vec<f64>, start: Vec<f64> },
    /// Softmax decision layers on frozen embeddings, trained in a session.
    Softmax {
        samples: usize,
        classes: usize,
        dims: usize,
        spread: f64,
        parties: usize,
        embedding_dim: usize,
        /// Hidden widths of the decision net; any makes it non-convex.
        #[serde(default)]
        decision_hidden: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundCheckConfig {
    pub problem: Problem,
    /// L2 weight; the strong-convexity constant of the softmax problem.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Step size; `1/L` when unset.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

fn default_lambda() -> f64 {
    0.1
}

fn default_epochs() -> usize {
    20
}

fn default_seeds() -> usize {
    20
}

/// One party's trajectory against its bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRun {
    pub seed: u64,
    pub party: usize,
    pub params: BoundParams,
    pub gaps: Vec<f64>,
    pub bound: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub runs: Vec<BoundRun>,
    pub violations: usize,
    pub steps: usize,
    pub informative: bool,
    pub fixed_point: f64,
}

impl BoundReport {
    pub fn violation_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.violations as f64 / self.steps as f64
        }
    }

    fn push(&mut self, run: BoundRun, informative: bool) {
        let traj = crate::metrics::BoundTrajectory {
            values: run.bound.clone(),
            informative,
        };
        let (bad, n) = bound_violations(&run.gaps, &traj);
        self.violations += bad;
        self.steps += n;
        self.informative &= informative;
        self.runs.push(run);
    }
}

pub fn run_bound_check(cfg: &BoundCheckConfig) -> Result<BoundReport> {
    if cfg.seeds == 0 {
        return Err(CalibrationError::Invalid("seeds must be at least 1".into()));
    }
    let mut report = BoundReport {
        runs: Vec::new(),
        violations: 0,
        steps: 0,
        informative: true,
        fixed_point: f64::NAN,
    };
    match &cfg.problem {
        Problem::Quadratic { curvature, start } => {
            if curvature.len() != start.len() || curvature.iter().any(|&a| !(a > 0.0)) {
                return Err(CalibrationError::Metrics(MetricsError::NotConvex(
                    "curvatures must be positive, one per start coordinate".into(),
                )));
            }
            let q = Quadratic {
                curvature: curvature.clone(),
            };
            let eta = cfg.eta.unwrap_or(1.0 / q.smoothness());
            let params = estimate_constants(&q, start, eta, cfg.epochs, 0.0);
            params.validate()?;
            let traj = bound_trajectory(&params, cfg.epochs);
            let mut theta = start.clone();
            let mut gaps = vec![q.value(&theta)];
            for _ in 0..cfg.epochs {
                let g = q.gradient(&theta);
                theta.iter_mut().zip(&g).for_each(|(t, g)| *t -= eta * g);
                gaps.push(q.value(&theta));
            }
            report.fixed_point = params.fixed_point();
            report.push(
                BoundRun {
                    seed: cfg.seed,
                    party: 0,
                    params,
                    gaps,
                    bound: traj.values,
                },
                traj.informative,
            );
        }
        Problem::Softmax { .. } => {
            for s in 0..cfg.seeds {
                softmax_runs(cfg, cfg.seed.wrapping_add(s as u64), &mut report)?;
            }
        }
    }
    Ok(report)
}

fn softmax_runs(cfg: &BoundCheckConfig, seed: u64, report: &mut BoundReport) -> Result<()> {
    let Problem::Softmax {
        samples,
        classes,
        dims,
        spread,
        parties,
        embedding_dim,
        decision_hidden,
    } = &cfg.problem
    else {
        unreachable!()
    };
    let (classes, embedding_dim, parties) = (*classes, *embedding_dim, *parties);
    let data = synth_blobs(*samples, classes, *dims, *spread, seed).map_err(ProtocolError::from)?;
    let shards = vertical_split(&data, parties).map_err(ProtocolError::from)?;

    let mut decision: Vec<LayerDescriptor> = Vec::new();
    for &h in decision_hidden {
        decision.push(LayerDescriptor::Dense { outputs: h });
        decision.push(LayerDescriptor::Relu);
    }
    decision.push(LayerDescriptor::Dense { outputs: classes });
    let mut setups = Vec::with_capacity(parties);
    for shard in &shards {
        let mut layers = vec![LayerDescriptor::Dense { outputs: embedding_dim }, LayerDescriptor::Relu];
        layers.extend(decision.iter().cloned());
        let spec = NetworkSpec::from_descriptors(InputShape::Flat(shard.width()), &layers, 2, embedding_dim, classes)
            .map_err(ProtocolError::from)?;
        if !spec.has_linear_decision() {
            return Err(MetricsError::NotConvex("the decision network must be a single dense layer".into()).into());
        }
        setups.push(PartySetup {
            spec,
            optimizer: OptimizerConfig::sgd(1.0),
        });
    }
    let mut session = SessionConfig::new(setups, seed);
    let states = session.initial_states();

    // The embeddings never change, so the global embedding of every round
    // is this matrix (rows permuted by the batch order).
    let codec = session.codec;
    let mut own = None;
    let mut masked = Vec::new();
    for (k, shard) in shards.iter().enumerate() {
        let (e, _) = forward_embedding(&states[k], &session.parties[k].spec, &shard.features).map_err(ProtocolError::from)?;
        if k == 0 {
            own = Some(e);
        } else {
            let zero = BlindingMask::zero(e.len(), 0);
            masked.push(mask_embedding(&e, &zero, &codec, parties - 1).map_err(ProtocolError::from)?);
        }
    }
    let phi: Tensor = aggregate(&own.expect("active party"), &masked, &codec, parties).map_err(ProtocolError::from)?;
    let obj = RegularizedSoftmax::new(phi, data.labels.clone(), classes, cfg.lambda)?;
    let eta = cfg.eta.unwrap_or(1.0 / obj.smoothness());

    session.epochs = cfg.epochs;
    session.batch_size = data.len();
    session.train_embedding = false;
    session.decision_l2 = cfg.lambda;
    session.record_history = true;
    for p in &mut session.parties {
        p.optimizer = OptimizerConfig::sgd(eta);
    }
    let out = run_session(&session, &data, None, states)?;

    let decision_params = |k: usize, flat: &[f64]| -> Vec<f64> {
        let spec = &session.parties[k].spec;
        let start: usize = out.states[k].params[..spec.param_range(spec.decision_layers()).start]
            .iter()
            .map(Tensor::len)
            .sum();
        flat[start..].to_vec()
    };
    let start0 = decision_params(0, &out.history[0][0]);
    let (theta_star, _) = solve_optimum(&obj, &start0, 1e-10, 1_000_000);
    let f_star = obj.value(&theta_star);
    for (k, hist) in out.history.iter().enumerate() {
        let theta0 = decision_params(k, &hist[0]);
        let params = estimate_constants(&obj, &theta0, eta, cfg.epochs, f_star);
        params.validate()?;
        let traj = bound_trajectory(&params, cfg.epochs);
        let gaps = hist.iter().map(|h| obj.value(&decision_params(k, h)) - f_star).collect();
        if report.fixed_point.is_nan() {
            report.fixed_point = params.fixed_point();
        }
        report.push(
            BoundRun {
                seed,
                party: k,
                params,
                gaps,
                bound: traj.values,
            },
            traj.informative,
        );
    }
    Ok(())
}
