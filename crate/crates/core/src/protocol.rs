//! The training session: key setup through the hub, then per batch
//! masked embeddings up, global embedding down, predictions up, loss and
//! logit gradients down, and a local update at every party.

use std::collections::{BTreeMap, VecDeque};
use std::net::{SocketAddr, TcpListener};
use std::ops::Range;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{batch_iter, batches_per_epoch, split_ranges, vertical_split, DataError, Dataset};
use crate::metrics::{EpochRecord, LedgerReport, PartyTraffic, Phase, RoundLedger, Summary, ledger_check};
use crate::nn::{
    argmax_rows, backward_decision, backward_embedding, forward_decision, forward_embedding,
    softmax_cross_entropy, Architecture, ForwardTrace, InputShape, NetworkSpec, NetworkState, NnError,
    Tensor,
};
use crate::optim::{OptimError, Optimizer, OptimizerConfig};
use crate::secure::{
    aggregate, blinding_mask, derive_shared, keygen, mask_embedding, BlindingMask, FixedPointCodec,
    GroupParams, RingTensor, SecureError, SharedSecret,
};
use crate::transport::{
    memory_star, Endpoint, Envelope, Message, MessageType, PartyId, RoundNonce, TcpHub, TcpLink,
    TransportError,
};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("secure aggregation: {0}")]
    Secure(#[from] SecureError),
    #[error("network: {0}")]
    Nn(#[from] NnError),
    #[error("optimizer: {0}")]
    Optim(#[from] OptimError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("invalid session: {0}")]
    Config(String),
    #[error("party {party} is on batch {got:#018x}, expected {expected:#018x} in round {nonce:?}")]
    BatchMismatch {
        party: PartyId,
        nonce: RoundNonce,
        expected: u64,
        got: u64,
    },
    #[error("party {party} sent round {got:?} while round {expected:?} is running")]
    RoundMismatch {
        party: PartyId,
        expected: RoundNonce,
        got: RoundNonce,
    },
    #[error("unexpected {got} from {from} while waiting for {expected}")]
    Unexpected {
        from: PartyId,
        expected: &'static str,
        got: &'static str,
    },
    #[error("party {0} contributed twice")]
    Duplicate(PartyId),
    #[error("no prediction from party {0}")]
    MissingPrediction(PartyId),
    #[error("non-finite loss {loss} for party {party} in round {nonce:?}")]
    NonFiniteLoss {
        party: PartyId,
        nonce: RoundNonce,
        loss: f64,
    },
    #[error("party {0} thread panicked")]
    Panicked(PartyId),
}

type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Debug)]
pub struct PartySetup {
    pub spec: NetworkSpec,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Shared seed for the sample order and model initialization.
    pub seed: u64,
    /// Party 0 is the active party.
    pub parties: Vec<PartySetup>,
    pub codec: FixedPointCodec,
    pub group: GroupParams,
    /// With masking off, embeddings still travel fixed-point encoded but
    /// with zero blinding factors.
    pub masking: bool,
    /// Seed for the key pairs; fresh OS randomness when unset. Keys never
    /// influence results since the masks cancel exactly.
    pub key_seed: Option<u64>,
    pub train_embedding: bool,
    /// `lambda/2 |theta|^2` on decision-net parameters.
    pub decision_l2: f64,
    /// Keep flattened parameters after every epoch.
    pub record_history: bool,
    pub timeout: Duration,
}

impl SessionConfig {
    pub fn new(parties: Vec<PartySetup>, seed: u64) -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            seed,
            parties,
            codec: FixedPointCodec::default(),
            group: GroupParams::safe_prime_256(),
            masking: true,
            key_seed: None,
            train_embedding: true,
            decision_l2: 0.0,
            record_history: false,
            timeout: Duration::from_secs(120),
        }
    }

    pub fn passive(&self) -> usize {
        self.parties.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parties.len() < 2 {
            return Err(ProtocolError::Config("need the active party and at least one passive party".into()));
        }
        self.validate_parties()
    }

    /// Checks everything but the party count.
    pub(crate) fn validate_parties(&self) -> Result<()> {
        if self.parties.is_empty() {
            return Err(ProtocolError::Config("no parties".into()));
        }
        if self.parties.len() > u16::MAX as usize {
            return Err(ProtocolError::Config("too many parties".into()));
        }
        if self.batch_size == 0 {
            return Err(ProtocolError::Config("batch size must be positive".into()));
        }
        if !(self.decision_l2 >= 0.0) {
            return Err(ProtocolError::Config("decision_l2 must be non-negative".into()));
        }
        let first = &self.parties[0].spec;
        for (k, p) in self.parties.iter().enumerate() {
            p.spec.validate()?;
            p.optimizer.validate()?;
            if p.spec.embedding_dim != first.embedding_dim || p.spec.classes != first.classes {
                return Err(ProtocolError::Config(format!(
                    "party {k}: embedding width and class count must agree across parties"
                )));
            }
        }
        Ok(())
    }

    /// Seeded initial parameters, one generator per party.
    pub fn initial_states(&self) -> Vec<NetworkState> {
        self.parties
            .iter()
            .enumerate()
            .map(|(k, p)| NetworkState::init(&p.spec, &mut ChaCha8Rng::seed_from_u64(party_seed(self.seed, k))))
            .collect()
    }
}

pub fn party_seed(seed: u64, party: usize) -> u64 {
    seed ^ (party as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Input layout the `arch` network sees for a slice of `width` columns.
pub fn input_shape(arch: Architecture, width: usize, row_width: Option<usize>) -> InputShape {
    if arch.is_convolutional() {
        InputShape::Image(InputShape::image_for(width, row_width))
    } else {
        InputShape::Flat(width)
    }
}

/// One stock network per party, sized for its contiguous column slice.
pub fn party_specs(dataset: &Dataset, archs: &[Architecture], embedding_dim: usize) -> Result<Vec<NetworkSpec>> {
    let ranges = split_ranges(dataset.width(), archs.len())?;
    archs
        .iter()
        .zip(ranges)
        .map(|(&arch, cols)| {
            let rw = shard_row_width(dataset.row_width, &cols);
            Ok(NetworkSpec::build(arch, input_shape(arch, cols.len(), rw), embedding_dim, dataset.classes)?)
        })
        .collect()
}

fn shard_row_width(row_width: Option<usize>, cols: &Range<usize>) -> Option<usize> {
    row_width.filter(|&rw| cols.start % rw == 0 && cols.len() % rw == 0)
}

/// Identifier of a batch: the first 8 bytes of SHA-256 over its sample
/// indices.
pub fn batch_id(rows: &[usize]) -> u64 {
    let mut h = Sha256::new();
    for &r in rows {
        h.update((r as u64).to_le_bytes());
    }
    let d: [u8; 32] = h.finalize().into();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Loss and logit gradient for every expected party.
pub fn active_assist_loss(
    predictions: &BTreeMap<PartyId, Tensor>,
    expected: &[PartyId],
    labels: &[usize],
) -> Result<BTreeMap<PartyId, (f64, Tensor)>> {
    expected
        .iter()
        .map(|&p| {
            let logits = predictions.get(&p).ok_or(ProtocolError::MissingPrediction(p))?;
            Ok((p, softmax_cross_entropy(logits, labels)?))
        })
        .collect()
}

/// Features of one party, training and optional test rows.
#[derive(Clone, Copy, Debug)]
pub struct PartyData<'a> {
    pub train: &'a Tensor,
    pub test: Option<&'a Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub train: &'a [usize],
    pub test: Option<&'a [usize]>,
}

/// Rows of a party's network that are updated locally.
pub(crate) struct LocalModel<'a> {
    pub spec: &'a NetworkSpec,
    pub state: NetworkState,
    pub optimizer: Optimizer,
    pub parties: usize,
    pub train_embedding: bool,
    pub decision_l2: f64,
}

impl<'a> LocalModel<'a> {
    pub fn new(cfg: &'a SessionConfig, party: usize, state: NetworkState) -> Result<Self> {
        Ok(Self {
            spec: &cfg.parties[party].spec,
            state,
            optimizer: Optimizer::new(cfg.parties[party].optimizer.clone())?,
            parties: cfg.parties.len(),
            train_embedding: cfg.train_embedding,
            decision_l2: cfg.decision_l2,
        })
    }

    /// Backpropagates `grad_logits` through the decision net and, with the
    /// 1/C share of the global-embedding gradient, through this party's own
    /// embedding net; then takes one optimizer step.
    pub fn update(&mut self, emb: &ForwardTrace, dec: &ForwardTrace, grad_logits: &Tensor) -> Result<()> {
        let grads = party_gradients(
            self.spec,
            &self.state,
            emb,
            dec,
            grad_logits,
            self.parties,
            self.train_embedding,
            self.decision_l2,
        )?;
        self.step(&grads)
    }

    pub fn step(&mut self, grads: &[Tensor]) -> Result<()> {
        self.optimizer.step(&mut self.state.params, grads)?;
        self.state.mark_updated();
        Ok(())
    }
}

/// Parameter gradients of one party for one round (see [`LocalModel::update`]).
#[allow(clippy::too_many_arguments)]
pub fn party_gradients(
    spec: &NetworkSpec,
    state: &NetworkState,
    emb: &ForwardTrace,
    dec: &ForwardTrace,
    grad_logits: &Tensor,
    parties: usize,
    train_embedding: bool,
    decision_l2: f64,
) -> Result<Vec<Tensor>> {
    let (mut dec_grads, mut grad_e) = backward_decision(state, spec, dec, grad_logits)?;
    let dec_range = spec.param_range(spec.decision_layers());
    if decision_l2 > 0.0 {
        for (g, p) in dec_grads.iter_mut().zip(&state.params[dec_range.clone()]) {
            g.data_mut()
                .iter_mut()
                .zip(p.data())
                .for_each(|(g, p)| *g += decision_l2 * p);
        }
    }
    let mut grads = if train_embedding {
        grad_e.scale(1.0 / parties as f64);
        backward_embedding(state, spec, emb, &grad_e)?
    } else {
        state.params[..dec_range.start]
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect()
    };
    grads.extend(dec_grads);
    Ok(grads)
}

/// Results held by the active party after a session.
#[derive(Clone, Debug)]
pub struct ActiveOutcome {
    pub state: NetworkState,
    /// `[epoch][party]` mean training loss.
    pub train_loss: Vec<Vec<f64>>,
    /// `[epoch][party]` test accuracy; NaN without a test set.
    pub test_acc: Vec<Vec<f64>>,
    pub history: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct PassiveOutcome {
    pub id: PartyId,
    pub state: NetworkState,
    pub traffic: PartyTraffic,
    pub train_loss: Vec<f64>,
    pub shared_secrets: usize,
    pub history: Vec<Vec<f64>>,
}

pub(crate) fn expect_kind(env: &Envelope, kind: MessageType) -> Result<()> {
    if env.message.kind() != kind {
        return Err(ProtocolError::Unexpected {
            from: env.from,
            expected: kind.name(),
            got: env.message.kind().name(),
        });
    }
    Ok(())
}

/// Hub-side reordering buffer. Passive parties run ahead during evaluation
/// (nothing comes back after a prediction), so messages of a later round
/// can arrive while an earlier one is still being collected.
pub(crate) struct Mailbox {
    pending: VecDeque<Envelope>,
    limit: usize,
}

impl Mailbox {
    pub fn new(passive: usize) -> Self {
        Self {
            pending: VecDeque::new(),
            limit: 8 * passive + 8,
        }
    }

    /// Next message of `kind` for round `nonce`, from any sender.
    pub fn take<E: Endpoint>(
        &mut self,
        ep: &mut E,
        timeout: Duration,
        kind: MessageType,
        nonce: RoundNonce,
    ) -> Result<Envelope> {
        let wanted = |e: &Envelope| e.message.kind() == kind && e.message.nonce() == Some(nonce);
        if let Some(pos) = self.pending.iter().position(wanted) {
            return Ok(self.pending.remove(pos).expect("position is valid"));
        }
        loop {
            let env = ep.recv(timeout)?;
            if wanted(&env) {
                return Ok(env);
            }
            match env.message.nonce() {
                None => {
                    return Err(ProtocolError::Unexpected {
                        from: env.from,
                        expected: kind.name(),
                        got: env.message.kind().name(),
                    })
                }
                Some(got) if got < nonce => {
                    return Err(ProtocolError::RoundMismatch {
                        party: env.from,
                        expected: nonce,
                        got,
                    })
                }
                Some(_) => {
                    if self.pending.len() >= self.limit {
                        return Err(ProtocolError::Unexpected {
                            from: env.from,
                            expected: kind.name(),
                            got: "too many messages ahead of the current round",
                        });
                    }
                    self.pending.push_back(env);
                }
            }
        }
    }
}

pub(crate) fn check_round(party: PartyId, expected: RoundNonce, got: RoundNonce) -> Result<()> {
    if expected != got {
        return Err(ProtocolError::RoundMismatch { party, expected, got });
    }
    Ok(())
}

pub(crate) fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Round nonce batch index of eval batch `j` in an epoch with `train` batches.
pub(crate) fn eval_nonce(epoch: usize, train: usize, j: usize) -> RoundNonce {
    RoundNonce::new(epoch as u32, (train + j) as u32)
}

/// Runs the active party (id 0) to completion.
pub fn run_active<E: Endpoint>(
    cfg: &SessionConfig,
    state: NetworkState,
    data: PartyData<'_>,
    labels: Labels<'_>,
    ep: &mut E,
) -> Result<ActiveOutcome> {
    cfg.validate()?;
    let k_passive = cfg.passive();
    let c = cfg.parties.len();
    let passive: Vec<PartyId> = (1..=k_passive).map(|k| PartyId(k as u16)).collect();
    let mut model = LocalModel::new(cfg, 0, state)?;

    // Collect and relay public keys. The hub learns no shared secret.
    let mut keys = BTreeMap::new();
    while keys.len() < k_passive {
        let env = ep.recv(cfg.timeout)?;
        expect_kind(&env, MessageType::PublicKey)?;
        let Message::PublicKey { party, key } = env.message else { unreachable!() };
        if party != env.from {
            return Err(ProtocolError::Unexpected {
                from: env.from,
                expected: "own public key",
                got: "relayed public key",
            });
        }
        if keys.insert(party, key).is_some() {
            return Err(ProtocolError::Duplicate(party));
        }
    }
    for &to in &passive {
        for (&party, key) in keys.iter().filter(|(&p, _)| p != to) {
            ep.send(to, &Message::PublicKey { party, key: key.clone() })?;
        }
    }

    let n = labels.train.len();
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let mut out = ActiveOutcome {
        state: NetworkState { params: vec![], version: 0 },
        train_loss: Vec::with_capacity(cfg.epochs),
        test_acc: Vec::with_capacity(cfg.epochs),
        history: Vec::new(),
    };
    if cfg.record_history {
        out.history.push(model.state.flatten());
    }
    let mut mailbox = Mailbox::new(k_passive);
    let mut everyone = vec![PartyId::ACTIVE];
    everyone.extend(&passive);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = vec![0.0; c];
        for (b, rows) in batch_iter(n, cfg.batch_size, epoch as u64, cfg.seed).iter().enumerate() {
            let nonce = RoundNonce::new(epoch as u32, b as u32);
            let x = data.train.gather_rows(rows);
            let y: Vec<usize> = rows.iter().map(|&i| labels.train[i]).collect();
            let (preds, emb, dec) = active_forward(cfg, &model, ep, &mut mailbox, &x, rows, nonce, &passive)?;
            let replies = active_assist_loss(&preds, &everyone, &y)?;
            for (&party, (loss, _)) in &replies {
                if !loss.is_finite() {
                    return Err(ProtocolError::NonFiniteLoss { party, nonce, loss: *loss });
                }
                loss_sum[party.index()] += loss * rows.len() as f64;
            }
            for &to in &passive {
                let (loss, grad) = replies[&to].clone();
                ep.send(to, &Message::LossAndGrad { party: to, nonce, loss, grad })?;
            }
            model.update(&emb, &dec, &replies[&PartyId::ACTIVE].1)?;
        }
        out.train_loss.push(loss_sum.iter().map(|s| s / n.max(1) as f64).collect());

        let mut acc = vec![f64::NAN; c];
        if let (Some(test), Some(test_labels)) = (data.test, labels.test) {
            let mut correct = vec![0usize; c];
            for (j, rows) in eval_batches(test_labels.len(), cfg.batch_size).iter().enumerate() {
                let nonce = eval_nonce(epoch, per_epoch, j);
                let x = test.gather_rows(rows);
                let (preds, _, _) = active_forward(cfg, &model, ep, &mut mailbox, &x, rows, nonce, &passive)?;
                for (party, logits) in &preds {
                    correct[party.index()] += argmax_rows(logits)
                        .iter()
                        .zip(rows)
                        .filter(|(p, &i)| **p == test_labels[i])
                        .count();
                }
            }
            acc = correct.iter().map(|&k| k as f64 / test_labels.len().max(1) as f64).collect();
        }
        out.test_acc.push(acc);
        if cfg.record_history {
            out.history.push(model.state.flatten());
        }
    }
    out.state = model.state;
    Ok(out)
}

/// Embedding exchange and prediction collection for one batch. Returns all
/// parties' logits (the hub's own included) and the hub's traces.
#[allow(clippy::too_many_arguments)]
fn active_forward<E: Endpoint>(
    cfg: &SessionConfig,
    model: &LocalModel<'_>,
    ep: &mut E,
    mailbox: &mut Mailbox,
    x: &Tensor,
    rows: &[usize],
    nonce: RoundNonce,
    passive: &[PartyId],
) -> Result<(BTreeMap<PartyId, Tensor>, ForwardTrace, ForwardTrace)> {
    let id = batch_id(rows);
    let (e_a, emb_trace) = forward_embedding(&model.state, model.spec, x)?;
    let mut masked: BTreeMap<PartyId, RingTensor> = BTreeMap::new();
    while masked.len() < passive.len() {
        let env = mailbox.take(ep, cfg.timeout, MessageType::MaskedEmbedding, nonce)?;
        let Message::MaskedEmbedding { party, nonce: got, batch_id: their, embedding } = env.message else {
            unreachable!()
        };
        check_round(env.from, nonce, got)?;
        if party != env.from {
            return Err(ProtocolError::Unexpected {
                from: env.from,
                expected: "own embedding",
                got: "embedding of another party",
            });
        }
        if their != id {
            return Err(ProtocolError::BatchMismatch { party, nonce, expected: id, got: their });
        }
        if masked.insert(party, embedding).is_some() {
            return Err(ProtocolError::Duplicate(party));
        }
    }
    let contributions: Vec<RingTensor> = masked.into_values().collect();
    let global = aggregate(&e_a, &contributions, &cfg.codec, cfg.parties.len())?;
    let msg = Message::GlobalEmbedding { nonce, batch_id: id, embedding: global.clone() };
    for &to in passive {
        ep.send(to, &msg)?;
    }
    let (r_a, dec_trace) = forward_decision(&model.state, model.spec, &global)?;
    let mut preds = BTreeMap::from([(PartyId::ACTIVE, r_a)]);
    while preds.len() < passive.len() + 1 {
        let env = mailbox.take(ep, cfg.timeout, MessageType::Prediction, nonce)?;
        let Message::Prediction { party, nonce: got, logits } = env.message else { unreachable!() };
        check_round(env.from, nonce, got)?;
        if party != env.from || party.is_active() {
            return Err(ProtocolError::Unexpected {
                from: env.from,
                expected: "own prediction",
                got: "prediction of another party",
            });
        }
        if preds.insert(party, logits).is_some() {
            return Err(ProtocolError::Duplicate(party));
        }
    }
    Ok((preds, emb_trace, dec_trace))
}

/// Passive-side bookkeeping around an endpoint.
pub(crate) struct Tracked<'e, E: Endpoint> {
    pub ep: &'e mut E,
    pub traffic: PartyTraffic,
    pub phase: Phase,
    pub epoch: usize,
    pub timeout: Duration,
}

impl<E: Endpoint> Tracked<'_, E> {
    pub fn send(&mut self, m: &Message) -> Result<()> {
        let bytes = self.ep.send(PartyId::ACTIVE, m)?;
        self.traffic.record(self.phase, self.epoch, true, m.kind(), bytes);
        Ok(())
    }

    pub fn recv(&mut self, kind: MessageType) -> Result<Message> {
        let env = self.ep.recv(self.timeout)?;
        expect_kind(&env, kind)?;
        self.traffic.record(self.phase, self.epoch, false, kind, env.bytes);
        Ok(env.message)
    }
}

/// Runs passive party `id` to completion.
pub fn run_passive<E: Endpoint>(
    cfg: &SessionConfig,
    id: PartyId,
    state: NetworkState,
    data: PartyData<'_>,
    ep: &mut E,
) -> Result<PassiveOutcome> {
    cfg.validate()?;
    let k = id.index();
    let k_passive = cfg.passive();
    if id.is_active() || k > k_passive {
        return Err(ProtocolError::Config(format!("{id} is not a passive party of this session")));
    }
    let mut model = LocalModel::new(cfg, k, state)?;
    let mut io = Tracked {
        ep,
        traffic: PartyTraffic::new(id.0, cfg.epochs),
        phase: Phase::Setup,
        epoch: 0,
        timeout: cfg.timeout,
    };

    let seed = cfg.key_seed.map_or_else(rand::random, |s| party_seed(s, k));
    let keys = keygen(&cfg.group, seed)?;
    io.send(&Message::PublicKey { party: id, key: keys.public().clone() })?;
    let mut secrets: BTreeMap<usize, SharedSecret> = BTreeMap::new();
    while secrets.len() + 1 < k_passive {
        let Message::PublicKey { party, key } = io.recv(MessageType::PublicKey)? else { unreachable!() };
        if party == id || party.is_active() || party.index() > k_passive {
            return Err(ProtocolError::Unexpected {
                from: PartyId::ACTIVE,
                expected: "peer public key",
                got: "public key of a non-peer",
            });
        }
        let ck = derive_shared(keys.secret(), &key, &cfg.group)?;
        if secrets.insert(party.index(), ck).is_some() {
            return Err(ProtocolError::Duplicate(party));
        }
    }

    let n = data.train.rows();
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut history = Vec::new();
    if cfg.record_history {
        history.push(model.state.flatten());
    }
    let round = |model: &LocalModel<'_>,
                 io: &mut Tracked<'_, E>,
                 x: &Tensor,
                 rows: &[usize],
                 nonce: RoundNonce|
     -> Result<(ForwardTrace, ForwardTrace)> {
        let bid = batch_id(rows);
        let (e_k, emb) = forward_embedding(&model.state, model.spec, x)?;
        let mask = if cfg.masking {
            blinding_mask(k, k_passive, &secrets, e_k.len(), nonce.as_u64())?
        } else {
            BlindingMask::zero(e_k.len(), nonce.as_u64())
        };
        let embedding = mask_embedding(&e_k, &mask, &cfg.codec, k_passive)?;
        io.send(&Message::MaskedEmbedding { party: id, nonce, batch_id: bid, embedding })?;
        let Message::GlobalEmbedding { nonce: got, batch_id: their, embedding } =
            io.recv(MessageType::GlobalEmbedding)?
        else {
            unreachable!()
        };
        check_round(PartyId::ACTIVE, nonce, got)?;
        if their != bid {
            return Err(ProtocolError::BatchMismatch { party: PartyId::ACTIVE, nonce, expected: bid, got: their });
        }
        let (logits, dec) = forward_decision(&model.state, model.spec, &embedding)?;
        io.send(&Message::Prediction { party: id, nonce, logits })?;
        Ok((emb, dec))
    };

    for epoch in 0..cfg.epochs {
        io.epoch = epoch;
        io.phase = Phase::Train;
        let mut loss_sum = 0.0;
        for (b, rows) in batch_iter(n, cfg.batch_size, epoch as u64, cfg.seed).iter().enumerate() {
            let nonce = RoundNonce::new(epoch as u32, b as u32);
            let x = data.train.gather_rows(rows);
            let (emb, dec) = round(&model, &mut io, &x, rows, nonce)?;
            let Message::LossAndGrad { party, nonce: got, loss, grad } = io.recv(MessageType::LossAndGrad)? else {
                unreachable!()
            };
            check_round(PartyId::ACTIVE, nonce, got)?;
            if party != id {
                return Err(ProtocolError::Unexpected {
                    from: PartyId::ACTIVE,
                    expected: "own loss",
                    got: "loss of another party",
                });
            }
            loss_sum += loss * rows.len() as f64;
            model.update(&emb, &dec, &grad)?;
        }
        losses.push(loss_sum / n.max(1) as f64);
        if let Some(test) = data.test {
            io.phase = Phase::Eval;
            for (j, rows) in eval_batches(test.rows(), cfg.batch_size).iter().enumerate() {
                let x = test.gather_rows(rows);
                round(&model, &mut io, &x, rows, eval_nonce(epoch, per_epoch, j))?;
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
        shared_secrets: secrets.len(),
        history,
    })
}

/// Everything a finished session produced.
#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub method: String,
    pub states: Vec<NetworkState>,
    /// `[epoch][party]`.
    pub train_loss: Vec<Vec<f64>>,
    /// `[epoch][party]`; NaN without a test set.
    pub test_acc: Vec<Vec<f64>>,
    pub ledger: RoundLedger,
    /// `[party][epoch]` flattened parameters, epoch 0 being the start.
    pub history: Vec<Vec<Vec<f64>>>,
    pub shared_secrets: Vec<usize>,
}

impl SessionOutcome {
    /// One row per party per epoch. The active party's row carries no
    /// message counts; its traffic is the sum of the passive rows.
    pub fn records(&self) -> Vec<EpochRecord> {
        let mut out = Vec::new();
        for (epoch, losses) in self.train_loss.iter().enumerate() {
            for (k, &train_loss) in losses.iter().enumerate() {
                let t = (k > 0).then(|| &self.ledger.passive[k - 1].epochs[epoch]);
                out.push(EpochRecord {
                    party: k as u16,
                    epoch,
                    train_loss,
                    test_acc: self.test_acc[epoch][k],
                    msgs_up: t.map_or(0, |t| t.train_up + t.eval_up),
                    msgs_down: t.map_or(0, |t| t.train_down + t.eval_down),
                    bytes: t.map_or(0, |t| t.bytes),
                });
            }
        }
        out
    }

    pub fn final_test_acc(&self) -> Vec<f64> {
        self.test_acc.last().cloned().unwrap_or_default()
    }

    pub fn ledger_report(&self, num_models: u64) -> LedgerReport {
        ledger_check(&self.ledger, self.ledger.epochs, num_models)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            method: self.method.clone(),
            parties: self.states.len(),
            epochs: self.train_loss.len(),
            final_test_acc: self.final_test_acc(),
            final_train_loss: self.train_loss.last().cloned().unwrap_or_default(),
            ledger: self.ledger.clone(),
            ledger_report: self.ledger_report(3),
            bound_violation_rate: None,
        }
    }
}

/// Column slices of the training (and test) rows, one per party.
pub(crate) struct Shards {
    pub train: Vec<Tensor>,
    pub test: Option<Vec<Tensor>>,
}

pub(crate) fn shard(train: &Dataset, test: Option<&Dataset>, parties: usize) -> Result<Shards> {
    if let Some(t) = test {
        if t.width() != train.width() {
            return Err(ProtocolError::Config(format!(
                "test set has {} columns, training set {}",
                t.width(),
                train.width()
            )));
        }
    }
    let split = |d: &Dataset| -> Result<Vec<Tensor>> {
        Ok(vertical_split(d, parties)?.into_iter().map(|s| s.features).collect())
    };
    Ok(Shards {
        train: split(train)?,
        test: test.map(split).transpose()?,
    })
}

pub(crate) fn check_states(cfg: &SessionConfig, states: &[NetworkState]) -> Result<()> {
    if states.len() != cfg.parties.len() {
        return Err(ProtocolError::Config(format!(
            "{} initial states for {} parties",
            states.len(),
            cfg.parties.len()
        )));
    }
    Ok(())
}

/// Runs every party on its own thread over the given endpoints.
fn run_over<H, P>(
    cfg: &SessionConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    states: Vec<NetworkState>,
    hub: impl FnOnce() -> Result<H> + Send,
    spokes: Vec<Box<dyn FnOnce() -> Result<P> + Send + '_>>,
) -> Result<SessionOutcome>
where
    H: Endpoint,
    P: Endpoint,
{
    cfg.validate()?;
    check_states(cfg, &states)?;
    let shards = shard(train, test, cfg.parties.len())?;
    let mut states = states.into_iter();
    let active_state = states.next().expect("checked");
    let (active, passive) = thread::scope(|s| {
        let mut handles = Vec::new();
        for (k, (connect, state)) in spokes.into_iter().zip(states).enumerate() {
            let data = PartyData {
                train: &shards.train[k + 1],
                test: shards.test.as_ref().map(|t| &t[k + 1]),
            };
            handles.push(s.spawn(move || -> Result<PassiveOutcome> {
                let mut ep = connect()?;
                run_passive(cfg, PartyId(k as u16 + 1), state, data, &mut ep)
            }));
        }
        let active = (|| {
            let mut ep = hub()?;
            run_active(
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
                &mut ep,
            )
        })();
        let passive: Vec<Result<PassiveOutcome>> = handles
            .into_iter()
            .enumerate()
            .map(|(k, h)| h.join().unwrap_or(Err(ProtocolError::Panicked(PartyId(k as u16 + 1)))))
            .collect();
        (active, passive)
    });
    // The hub's error explains a passive party's disconnect, so report it first.
    let active = active?;
    let passive = passive.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(assemble("vfedmh", 4, cfg, train.len(), active, passive))
}

/// Combines the hub's and the passive parties' results into one outcome.
/// `per_batch` is the method's training messages per batch per passive party.
pub fn assemble(
    method: &str,
    per_batch: u64,
    cfg: &SessionConfig,
    n: usize,
    active: ActiveOutcome,
    passive: Vec<PassiveOutcome>,
) -> SessionOutcome {
    let mut states = vec![active.state];
    let mut history = vec![active.history];
    let mut traffic = Vec::new();
    let mut secrets = vec![0];
    for p in passive {
        states.push(p.state);
        history.push(p.history);
        traffic.push(p.traffic);
        secrets.push(p.shared_secrets);
    }
    SessionOutcome {
        method: method.into(),
        states,
        train_loss: active.train_loss,
        test_acc: active.test_acc,
        ledger: RoundLedger {
            method: method.into(),
            messages_per_batch: per_batch,
            batches_per_epoch: batches_per_epoch(n, cfg.batch_size) as u64,
            epochs: cfg.epochs as u64,
            passive: traffic,
        },
        history,
        shared_secrets: secrets,
    }
}

/// Single-process session over in-memory channels, one thread per party.
pub fn run_session(
    cfg: &SessionConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    states: Vec<NetworkState>,
) -> Result<SessionOutcome> {
    let (hub, spokes) = memory_star(cfg.passive());
    let spokes = spokes
        .into_iter()
        .map(|ep| Box::new(move || Ok(ep)) as Box<dyn FnOnce() -> Result<_> + Send>)
        .collect();
    run_over(cfg, train, test, states, move || Ok(hub), spokes)
}

/// Same session with every party on its own loopback TCP connection.
pub fn run_session_tcp(
    cfg: &SessionConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    states: Vec<NetworkState>,
) -> Result<SessionOutcome> {
    let listener = TcpListener::bind("127.0.0.1:0").map_err(TransportError::from)?;
    let addr: SocketAddr = listener.local_addr().map_err(TransportError::from)?;
    let timeout = cfg.timeout;
    let spokes = (1..=cfg.passive())
        .map(|k| {
            Box::new(move || Ok(TcpLink::connect(addr, PartyId(k as u16), timeout)?))
                as Box<dyn FnOnce() -> Result<TcpLink> + Send>
        })
        .collect();
    run_over(
        cfg,
        train,
        test,
        states,
        move || Ok(TcpHub::accept(&listener, cfg.passive(), timeout)?),
        spokes,
    )
}
