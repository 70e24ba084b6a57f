//! Comparison methods: the active party training alone on its own columns,
//! and prediction aggregation, where every party runs its whole network on
//! its own columns and the hub averages the logits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, batches_per_epoch, Dataset};
use crate::metrics::{PartyTraffic, Phase};
use crate::nn::{argmax_rows, backward_full, forward_full, softmax_cross_entropy, NetworkState, Tensor};
use crate::protocol::{
    assemble, check_round, check_states, eval_batches, eval_nonce, shard, Mailbox, ActiveOutcome,
    Labels, LocalModel, PartyData, PassiveOutcome, ProtocolError, SessionConfig, SessionOutcome, Tracked,
};
use crate::transport::{memory_star, Endpoint, Message, MessageType, PartyId, RoundNonce};

type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vfedmh,
    Local,
    Aggvfl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Vfedmh => "vfedmh",
            Method::Local => "local",
            Method::Aggvfl => "aggvfl",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vfedmh" => Ok(Method::Vfedmh),
            "local" => Ok(Method::Local),
            "aggvfl" => Ok(Method::Aggvfl),
            other => Err(format!("unknown method `{other}` (vfedmh, local, aggvfl)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub state: NetworkState,
    pub train_loss: Vec<f64>,
    /// NaN without a test set.
    pub test_acc: Vec<f64>,
}

/// Ordinary supervised training of party 0's whole network on party 0's
/// columns. No messages are exchanged.
pub fn run_local(
    cfg: &SessionConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    state: NetworkState,
) -> Result<LocalOutcome> {
    cfg.validate_parties()?;
    let shards = shard(train, test, cfg.parties.len())?;
    let local_cfg = SessionConfig {
        parties: vec![cfg.parties[0].clone()],
        ..cfg.clone()
    };
    let mut model = LocalModel::new(&local_cfg, 0, state)?;
    let x_train = &shards.train[0];
    let n = train.len();
    let mut out = LocalOutcome {
        state: NetworkState { params: vec![], version: 0 },
        train_loss: Vec::new(),
        test_acc: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for rows in batch_iter(n, cfg.batch_size, epoch as u64, cfg.seed) {
            let x = x_train.gather_rows(&rows);
            let y: Vec<usize> = rows.iter().map(|&i| train.labels[i]).collect();
            let (logits, trace) = forward_full(&model.state, model.spec, &x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            loss_sum += loss * rows.len() as f64;
            let grads = backward_full(&model.state, model.spec, &trace, &grad)?;
            model.step(&grads)?;
        }
        out.train_loss.push(loss_sum / n.max(1) as f64);
        let acc = match (test, &shards.test) {
            (Some(t), Some(xs)) => {
                let (logits, _) = forward_full(&model.state, model.spec, &xs[0])?;
                crate::nn::accuracy(&logits, &t.labels)
            }
            _ => f64::NAN,
        };
        out.test_acc.push(acc);
    }
    out.state = model.state;
    Ok(out)
}

fn average(logits: &BTreeMap<PartyId, Tensor>) -> Tensor {
    let mut it = logits.values();
    let mut sum = it.next().expect("at least the hub's logits").clone();
    for t in it {
        sum.add_assign(t).expect("logit shapes checked");
    }
    sum.scale(1.0 / logits.len() as f64);
    sum
}

/// Gathers every passive party's logits for one round and averages them
/// with the hub's.
fn collect_logits<E: Endpoint>(
    cfg: &SessionConfig,
    ep: &mut E,
    mailbox: &mut Mailbox,
    own: Tensor,
    nonce: RoundNonce,
    passive: usize,
) -> Result<Tensor> {
    let shape = own.shape().to_vec();
    let mut preds = BTreeMap::from([(PartyId::ACTIVE, own)]);
    while preds.len() < passive + 1 {
        let env = mailbox.take(ep, cfg.timeout, MessageType::Prediction, nonce)?;
        let Message::Prediction { party, nonce: got, logits } = env.message else { unreachable!() };
        check_round(env.from, nonce, got)?;
        if party != env.from || logits.shape() != shape.as_slice() {
            return Err(ProtocolError::Unexpected {
                from: env.from,
                expected: "own prediction for this batch",
                got: "foreign or misshapen prediction",
            });
        }
        if preds.insert(party, logits).is_some() {
            return Err(ProtocolError::Duplicate(party));
        }
    }
    Ok(average(&preds))
}

/// Hub side of prediction aggregation.
pub fn run_aggvfl_active<E: Endpoint>(
    cfg: &SessionConfig,
    state: NetworkState,
    data: PartyData<'_>,
    labels: Labels<'_>,
    ep: &mut E,
) -> Result<ActiveOutcome> {
    cfg.validate_parties()?;
    let passive = cfg.passive();
    let c = cfg.parties.len();
    let mut model = LocalModel::new(cfg, 0, state)?;
    let n = labels.train.len();
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let mut out = ActiveOutcome {
        state: NetworkState { params: vec![], version: 0 },
        train_loss: Vec::new(),
        test_acc: Vec::new(),
        history: Vec::new(),
    };
    if cfg.record_history {
        out.history.push(model.state.flatten());
    }
    let mut mailbox = Mailbox::new(passive);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for (b, rows) in batch_iter(n, cfg.batch_size, epoch as u64, cfg.seed).iter().enumerate() {
            let nonce = RoundNonce::new(epoch as u32, b as u32);
            let x = data.train.gather_rows(rows);
            let y: Vec<usize> = rows.iter().map(|&i| labels.train[i]).collect();
            let (own, trace) = forward_full(&model.state, model.spec, &x)?;
            let mean = collect_logits(cfg, ep, &mut mailbox, own, nonce, passive)?;
            let (loss, mut grad) = softmax_cross_entropy(&mean, &y)?;
            if !loss.is_finite() {
                return Err(ProtocolError::NonFiniteLoss { party: PartyId::ACTIVE, nonce, loss });
            }
            loss_sum += loss * rows.len() as f64;
            grad.scale(1.0 / c as f64);
            for k in 1..=passive {
                let to = PartyId(k as u16);
                ep.send(to, &Message::LossAndGrad { party: to, nonce, loss, grad: grad.clone() })?;
            }
            let grads = backward_full(&model.state, model.spec, &trace, &grad)?;
            model.step(&grads)?;
        }
        // Every party's model is judged by the shared averaged prediction.
        out.train_loss.push(vec![loss_sum / n.max(1) as f64; c]);
        let mut acc = f64::NAN;
        if let (Some(test), Some(test_labels)) = (data.test, labels.test) {
            let mut correct = 0;
            for (j, rows) in eval_batches(test_labels.len(), cfg.batch_size).iter().enumerate() {
                let x = test.gather_rows(rows);
                let (own, _) = forward_full(&model.state, model.spec, &x)?;
                let mean = collect_logits(cfg, ep, &mut mailbox, own, eval_nonce(epoch, per_epoch, j), passive)?;
                correct += argmax_rows(&mean)
                    .iter()
                    .zip(rows)
                    .filter(|(p, &i)| **p == test_labels[i])
                    .count();
            }
            acc = correct as f64 / test_labels.len().max(1) as f64;
        }
        out.test_acc.push(vec![acc; c]);
        if cfg.record_history {
            out.history.push(model.state.flatten());
        }
    }
    out.state = model.state;
    Ok(out)
}

/// Passive side of prediction aggregation.
pub fn run_aggvfl_passive<E: Endpoint>(
    cfg: &SessionConfig,
    id: PartyId,
    state: NetworkState,
    data: PartyData<'_>,
    ep: &mut E,
) -> Result<PassiveOutcome> {
    cfg.validate_parties()?;
    let k = id.index();
    if id.is_active() || k > cfg.passive() {
        return Err(ProtocolError::Config(format!("{id} is not a passive party of this session")));
    }
    let mut model = LocalModel::new(cfg, k, state)?;
    let mut io = Tracked {
        ep,
        traffic: PartyTraffic::new(id.0, cfg.epochs),
        phase: Phase::Train,
        epoch: 0,
        timeout: cfg.timeout,
    };
    let n = data.train.rows();
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let mut losses = Vec::new();
    let mut history = Vec::new();
    if cfg.record_history {
        history.push(model.state.flatten());
    }
    for epoch in 0..cfg.epochs {
        io.epoch = epoch;
        io.phase = Phase::Train;
        let mut loss_sum = 0.0;
        for (b, rows) in batch_iter(n, cfg.batch_size, epoch as u64, cfg.seed).iter().enumerate() {
            let nonce = RoundNonce::new(epoch as u32, b as u32);
            let x = data.train.gather_rows(rows);
            let (logits, trace) = forward_full(&model.state, model.spec, &x)?;
            io.send(&Message::Prediction { party: id, nonce, logits })?;
            let Message::LossAndGrad { nonce: got, loss, grad, .. } = io.recv(MessageType::LossAndGrad)? else {
                unreachable!()
            };
            check_round(PartyId::ACTIVE, nonce, got)?;
            loss_sum += loss * rows.len() as f64;
            let grads = backward_full(&model.state, model.spec, &trace, &grad)?;
            model.step(&grads)?;
        }
        losses.push(loss_sum / n.max(1) as f64);
        if let Some(test) = data.test {
            io.phase = Phase::Eval;
            for (j, rows) in eval_batches(test.rows(), cfg.batch_size).iter().enumerate() {
                let x = test.gather_rows(rows);
                let (logits, _) = forward_full(&model.state, model.spec, &x)?;
                io.send(&Message::Prediction { party: id, nonce: eval_nonce(epoch, per_epoch, j), logits })?;
            }
        }
        if cfg.record_history {
            history.push(model.state.flatten());
        }
    }
    Ok(PassiveOutcome {
        id,
        state: model.state,
        traffic: io.traffic,
        train_loss: losses,
        shared_secrets: 0,
        history,
    })
}

/// Prediction aggregation over in-memory channels. A single party
/// degenerates to local training.
pub fn run_aggvfl(
    cfg: &SessionConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    states: Vec<NetworkState>,
) -> Result<SessionOutcome> {
    cfg.validate_parties()?;
    check_states(cfg, &states)?;
    let shards = shard(train, test, cfg.parties.len())?;
    let (mut hub, spokes) = memory_star(cfg.passive());
    let mut states = states.into_iter();
    let active_state = states.next().expect("checked");
    let (active, passive) = thread::scope(|s| {
        let handles: Vec<_> = spokes
            .into_iter()
            .zip(states)
            .enumerate()
            .map(|(k, (mut ep, state))| {
                let data = PartyData {
                    train: &shards.train[k + 1],
                    test: shards.test.as_ref().map(|t| &t[k + 1]),
                };
                s.spawn(move || run_aggvfl_passive(cfg, PartyId(k as u16 + 1), state, data, &mut ep))
            })
            .collect();
        let active = run_aggvfl_active(
            cfg,
            active_state,
            PartyData {
                train: &shards.train[0],
                test: shards.test.as_ref().map(|t| &t[0]),
            },
            Labels {
                train: &train.labels,
                test: test.map(|t| t.labels.as_slice()),
            },
            &mut hub,
        );
        drop(hub);
        let passive: Vec<Result<PassiveOutcome>> = handles
            .into_iter()
            .enumerate()
            .map(|(k, h)| h.join().unwrap_or(Err(ProtocolError::Panicked(PartyId(k as u16 + 1)))))
            .collect();
        (active, passive)
    });
    let active = active?;
    let passive = passive.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(assemble("aggvfl", 2, cfg, train.len(), active, passive))
}
