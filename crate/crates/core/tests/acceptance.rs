//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! straight to stdout, so the lines show up even when output is captured.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfedmh::baselines::{run_aggvfl, run_local};
use vfedmh::calibration::{run_bound_check, BoundCheckConfig, Problem};
use vfedmh::data::{batch_iter, load_idx, synth_blobs, vertical_split, Dataset};
use vfedmh::metrics::ledger_check;
use vfedmh::nn::{
    backward_full, finite_diff_gradient, forward_decision, forward_embedding, forward_full, relative_error,
    softmax_cross_entropy, Architecture, ImageShape, InputShape, LayerDescriptor, LayerSpec, NetworkSpec, NetworkState, Tensor,
};
use vfedmh::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use vfedmh::protocol::{party_gradients, party_specs, run_session, PartySetup, SessionConfig, SessionOutcome};
use vfedmh::secure::{
    aggregate, blinding_mask, derive_shared, keygen, mask_embedding, FixedPointCodec, GroupParams, SharedSecret,
};
use vfedmh::transport::{memory_star, Endpoint, Frame, FrameError, Message, PartyId, TransportError};

use common::{encoded, random_message, tcp_star, WAIT};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn say(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn criterion(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> (bool, String)) -> bool {
    let start = Instant::now();
    let (ok, detail) = f();
    let took = start.elapsed();
    let ok = ok && took <= limit;
    say(format!(
        "{} {id:>2} {name}: {detail} [{:.1}s, limit {}s]",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    ));
    ok
}

fn random_secret<R: Rng>(rng: &mut R) -> SharedSecret {
    SharedSecret(rng.random())
}

/// Symmetric pairwise secrets for `k` passive parties, keyed by party.
fn key_set<R: Rng>(rng: &mut R, k: usize) -> Vec<BTreeMap<usize, SharedSecret>> {
    let mut per: Vec<BTreeMap<usize, SharedSecret>> = vec![BTreeMap::new(); k + 1];
    for i in 1..=k {
        for j in i + 1..=k {
            let s = random_secret(rng);
            per[i].insert(j, s);
            per[j].insert(i, s);
        }
    }
    per
}

/// Log-uniform side length in `1..=128`.
fn side<R: Rng>(rng: &mut R) -> usize {
    (rng.random_range(0.0..(129f64).ln())).exp().floor().clamp(1.0, 128.0) as usize
}

fn mask_cancellation() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0usize;
    let mut elements = 0usize;
    let mut bad = 0usize;
    for k in 2..=8 {
        for set in 0..50 {
            let secrets = key_set(&mut rng, k);
            for nonce_idx in 0..20 {
                // Every K sees the full 128x128 shape once; other shapes are
                // log-uniform per side with at most 512 elements.
                let len = if set == 0 && nonce_idx == 0 {
                    128 * 128
                } else {
                    loop {
                        let l = side(&mut rng) * side(&mut rng);
                        if l <= 512 {
                            break l;
                        }
                    }
                };
                let nonce: u64 = rng.random();
                let mut sum = vec![0u64; len];
                for (party, sec) in secrets.iter().enumerate().skip(1) {
                    let m = blinding_mask(party, k, sec, len, nonce).unwrap();
                    for (s, v) in sum.iter_mut().zip(&m.values) {
                        *s = s.wrapping_add(*v);
                    }
                }
                bad += sum.iter().filter(|&&v| v != 0).count();
                cases += 1;
                elements += len;
            }
        }
    }
    (bad == 0, format!("{cases} cases, {elements} elements, {bad} nonzero sums"))
}

fn key_symmetry() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let small = GroupParams::new(BigUint::from(23u32), BigUint::from(5u32), true).unwrap();
    let large = GroupParams::safe_prime_256();
    let mut bad = 0;
    for group in [&small, &large] {
        for _ in 0..100 {
            let a = keygen(group, rng.random()).unwrap();
            let b = keygen(group, rng.random()).unwrap();
            let ab = derive_shared(a.secret(), b.public(), group).unwrap();
            let ba = derive_shared(b.secret(), a.public(), group).unwrap();
            bad += usize::from(ab != ba);
        }
    }
    (bad == 0, format!("200 pairs over p=23 and the 256-bit group, {bad} asymmetric"))
}

fn small_mlp_config(train: &Dataset, seed: u64) -> SessionConfig {
    let archs = [Architecture::Mlp3, Architecture::Cnn2, Architecture::Mlp3];
    let opts = [
        OptimizerConfig::new(OptimizerKind::Sgd, 0.05),
        OptimizerConfig::new(OptimizerKind::Momentum, 0.02),
        OptimizerConfig::new(OptimizerKind::Adam, 0.002),
    ];
    let specs = party_specs(train, &archs, 16).unwrap();
    let parties = specs.into_iter().zip(opts).map(|(spec, optimizer)| PartySetup { spec, optimizer }).collect();
    let mut cfg = SessionConfig::new(parties, seed);
    cfg.epochs = 20;
    cfg.batch_size = 128;
    cfg
}

/// The training loop with embeddings averaged in plain f64: no fixed point,
/// no masks, no transport.
fn reference_train(cfg: &SessionConfig, train: &Dataset, mut states: Vec<NetworkState>) -> Vec<NetworkState> {
    let c = cfg.parties.len();
    let shards = vertical_split(train, c).unwrap();
    let mut opts: Vec<Optimizer> = cfg.parties.iter().map(|p| Optimizer::new(p.optimizer.clone()).unwrap()).collect();
    for epoch in 0..cfg.epochs {
        for rows in batch_iter(train.len(), cfg.batch_size, epoch as u64, cfg.seed) {
            let y: Vec<usize> = rows.iter().map(|&i| train.labels[i]).collect();
            let mut traces = Vec::with_capacity(c);
            let mut global: Option<Tensor> = None;
            for k in 0..c {
                let x = shards[k].features.gather_rows(&rows);
                let (e, t) = forward_embedding(&states[k], &cfg.parties[k].spec, &x).unwrap();
                match &mut global {
                    None => global = Some(e),
                    Some(g) => g.add_assign(&e).unwrap(),
                }
                traces.push(t);
            }
            let mut global = global.unwrap();
            global.scale(1.0 / c as f64);
            for k in 0..c {
                let spec = &cfg.parties[k].spec;
                let (logits, dec) = forward_decision(&states[k], spec, &global).unwrap();
                let (_, g) = softmax_cross_entropy(&logits, &y).unwrap();
                let grads = party_gradients(spec, &states[k], &traces[k], &dec, &g, c, true, 0.0).unwrap();
                opts[k].step(&mut states[k].params, &grads).unwrap();
                states[k].mark_updated();
            }
        }
    }
    states
}

fn aggregation_transparency(ledger_runs: &mut Vec<SessionOutcome>) -> (bool, String) {
    let codec = FixedPointCodec::default();
    let s = codec.scale();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst_ratio: f64 = 0.0;
    let mut bad = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let c = k + 1;
        let rows = rng.random_range(1..=16);
        let cols = rng.random_range(1..=16);
        let mut draw = || {
            let data = (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect();
            Tensor::new(vec![rows, cols], data).unwrap()
        };
        let active = draw();
        let passive: Vec<Tensor> = (0..k).map(|_| draw()).collect();
        let secrets = key_set(&mut rng, k);
        let nonce: u64 = rng.random();
        let masked: Vec<_> = passive
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let m = blinding_mask(i + 1, k, &secrets[i + 1], e.len(), nonce).unwrap();
                mask_embedding(e, &m, &codec, k).unwrap()
            })
            .collect();
        let got = aggregate(&active, &masked, &codec, c).unwrap();
        let tol = k as f64 / (2.0 * s * c as f64);
        for i in 0..active.len() {
            let plain = (active.data()[i] + passive.iter().map(|e| e.data()[i]).sum::<f64>()) / c as f64;
            let err = (got.data()[i] - plain).abs();
            worst_ratio = worst_ratio.max(err / tol);
            // 1e-12 absorbs the rounding of the f64 reference sum itself.
            bad += usize::from(err > tol + 1e-12);
        }
    }

    let data = synth_blobs(900, 10, 24, 0.5, 31).unwrap();
    let cfg = small_mlp_config(&data, 31);
    let masked = run_session(&cfg, &data, None, cfg.initial_states()).unwrap();
    let mut plain_cfg = cfg.clone();
    plain_cfg.masking = false;
    let unmasked = run_session(&plain_cfg, &data, None, cfg.initial_states()).unwrap();
    let reference = reference_train(&cfg, &data, cfg.initial_states());
    let mut max_diff: f64 = 0.0;
    let mut identical = true;
    for k in 0..cfg.parties.len() {
        let a = masked.states[k].flatten();
        identical &= a == unmasked.states[k].flatten();
        for (x, y) in a.iter().zip(reference[k].flatten()) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    ledger_runs.push(masked);
    (
        bad == 0 && max_diff <= 1e-3 && identical,
        format!(
            "1000 instances, worst error {worst_ratio:.3} of K/(2SC), {bad} over; 20-epoch run vs f64 reference: \
             max |dtheta| {max_diff:.2e}; masked == unmasked: {identical}"
        ),
    )
}

/// Max relative error of backprop against central differences for a full
/// network and a batch.
fn net_gradient_error(spec: &NetworkSpec, state: &NetworkState, x: &Tensor, y: &[usize]) -> f64 {
    let (logits, trace) = forward_full(state, spec, x).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, y).unwrap();
    let analytic = backward_full(state, spec, &trace, &g).unwrap();
    let numeric = finite_diff_gradient(
        state,
        |s| softmax_cross_entropy(&forward_full(s, spec, x).unwrap().0, y).unwrap().0,
        1e-3,
    );
    max_rel(&analytic, &numeric)
}

fn max_rel(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| relative_error(*p, *q, 1e-2)))
        .fold(0.0, f64::max)
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn labels<R: Rng>(rng: &mut R, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Pre-activations are kept this far from the ReLU kink and pool windows
/// keep this gap between their top two entries, so the difference stencil
/// never crosses a point where the derivative is undefined.
const KINK_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug)]
enum Component {
    Dense,
    Conv,
    Pool,
    Relu,
}

/// Draws a network exercising `component` plus a batch that stays clear of
/// kinks; the embedding output is the layer whose kinks matter.
fn gradient_case(component: Component, seed: u64) -> (NetworkSpec, NetworkState, Tensor, Vec<usize>) {
    use LayerDescriptor::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=5);
    let batch = rng.random_range(1..=4);
    loop {
        let (input, layers, emb) = match component {
            Component::Dense => {
                let w = rng.random_range(1..=8);
                let h = rng.random_range(1..=6);
                (InputShape::Flat(w), vec![Dense { outputs: h }, Dense { outputs: classes }], h)
            }
            Component::Relu => {
                let w = rng.random_range(1..=8);
                let h = rng.random_range(1..=6);
                (InputShape::Flat(w), vec![Dense { outputs: h }, Relu, Dense { outputs: classes }], h)
            }
            Component::Conv => {
                let img = ImageShape::new(rng.random_range(1..=2), rng.random_range(3..=6), rng.random_range(3..=6));
                let kernel = (rng.random_range(1..=3), rng.random_range(1..=3));
                let stride = rng.random_range(1..=2);
                let ch = rng.random_range(1..=3);
                let out = LayerSpec::Conv2d { input: img, out_channels: ch, kernel, stride }.output_width();
                (
                    InputShape::Image(img),
                    vec![Conv { out_channels: ch, kernel, stride }, Dense { outputs: classes }],
                    out,
                )
            }
            Component::Pool => {
                let img = ImageShape::new(1, rng.random_range(4..=7), rng.random_range(4..=7));
                let ch = rng.random_range(1..=2);
                let conv = LayerSpec::Conv2d { input: img, out_channels: ch, kernel: (3, 3), stride: 1 };
                (
                    InputShape::Image(img),
                    vec![
                        Conv { out_channels: ch, kernel: (3, 3), stride: 1 },
                        MaxPool { window: (2, 2) },
                        Dense { outputs: classes },
                    ],
                    conv.output_width(),
                )
            }
        };
        let spec = NetworkSpec::from_descriptors(input, &layers, 1, emb, classes).unwrap();
        let state = NetworkState::init(&spec, &mut rng);
        let x = normal_tensor(&mut rng, vec![batch, input.width()]);
        let y = labels(&mut rng, batch, classes);
        let (pre, _) = forward_embedding(&state, &spec, &x).unwrap();
        let clear = match component {
            Component::Relu => pre.data().iter().all(|v| v.abs() > KINK_MARGIN),
            Component::Pool => pool_windows_clear(&pre, spec.layers[0].output_image().unwrap()),
            _ => true,
        };
        if clear {
            return (spec, state, x, y);
        }
    }
}

fn pool_windows_clear(pre: &Tensor, img: ImageShape) -> bool {
    for r in 0..pre.rows() {
        let row = pre.row(r);
        for c in 0..img.channels {
            for wy in 0..img.height / 2 {
                for wx in 0..img.width / 2 {
                    let mut v: Vec<f64> = (0..4)
                        .map(|i| row[c * img.height * img.width + (2 * wy + i / 2) * img.width + 2 * wx + i % 2])
                        .collect();
                    v.sort_by(|a, b| b.total_cmp(a));
                    if v[0] - v[1] <= KINK_MARGIN {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Party `k`'s gradient from the protocol against differences of the loss
/// it sees, with every other party's embedding held fixed.
fn self_path_error(seed: u64) -> f64 {
    use LayerDescriptor::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=5);
    let d = rng.random_range(1..=5);
    let classes = rng.random_range(2..=4);
    let batch = rng.random_range(1..=4);
    let k = rng.random_range(0..c);
    let mut fixed = Tensor::zeros(vec![batch, d]);
    let mut own = None;
    for j in 0..c {
        let w = rng.random_range(1..=6);
        let spec = NetworkSpec::from_descriptors(
            InputShape::Flat(w),
            &[Dense { outputs: d }, Dense { outputs: classes }],
            1,
            d,
            classes,
        )
        .unwrap();
        let state = NetworkState::init(&spec, &mut rng);
        let x = normal_tensor(&mut rng, vec![batch, w]);
        if j == k {
            own = Some((spec, state, x));
        } else {
            let (e, _) = forward_embedding(&state, &spec, &x).unwrap();
            fixed.add_assign(&e).unwrap();
        }
    }
    let (spec, state, x) = own.unwrap();
    let y = labels(&mut rng, batch, classes);
    let loss = |s: &NetworkState| {
        let (mut e, _) = forward_embedding(s, &spec, &x).unwrap();
        e.add_assign(&fixed).unwrap();
        e.scale(1.0 / c as f64);
        softmax_cross_entropy(&forward_decision(s, &spec, &e).unwrap().0, &y).unwrap().0
    };
    let (mut e, emb) = forward_embedding(&state, &spec, &x).unwrap();
    e.add_assign(&fixed).unwrap();
    e.scale(1.0 / c as f64);
    let (logits, dec) = forward_decision(&state, &spec, &e).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &y).unwrap();
    let analytic = party_gradients(&spec, &state, &emb, &dec, &g, c, true, 0.0).unwrap();
    let numeric = finite_diff_gradient(&state, loss, 1e-3);
    max_rel(&analytic, &numeric)
}

fn softmax_ce_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=10);
    let batch = rng.random_range(1..=8);
    let mut logits = normal_tensor(&mut rng, vec![batch, classes]);
    logits.scale(rng.random_range(0.1..20.0));
    let y = labels(&mut rng, batch, classes);
    let (_, analytic) = softmax_cross_entropy(&logits, &y).unwrap();
    let state = NetworkState {
        params: vec![logits],
        version: 0,
    };
    let numeric = finite_diff_gradient(&state, |s| softmax_cross_entropy(&s.params[0], &y).unwrap().0, 1e-3);
    max_rel(&[analytic], &numeric)
}

fn gradient_correctness() -> (bool, String) {
    const N: u64 = 50;
    let mut parts = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, errs: Vec<f64>| {
        let worst = errs.iter().copied().fold(0.0, f64::max);
        ok &= worst < 1e-4 && errs.len() as u64 >= N;
        parts.push(format!("{name} {worst:.1e}"));
    };
    for (name, comp) in [
        ("dense", Component::Dense),
        ("conv", Component::Conv),
        ("pool", Component::Pool),
        ("relu", Component::Relu),
    ] {
        let errs = (0..N)
            .map(|s| {
                let (spec, state, x, y) = gradient_case(comp, 1000 * (comp as u64 + 1) + s);
                net_gradient_error(&spec, &state, &x, &y)
            })
            .collect();
        record(name, errs);
    }
    record("softmax-ce", (0..N).map(|s| softmax_ce_error(5000 + s)).collect());
    record("self-path 1/C", (0..N).map(|s| self_path_error(6000 + s)).collect());
    (ok, format!("worst relative error over {N} seeds each: {}", parts.join(", ")))
}

fn hetero_config(train: &Dataset, seed: u64) -> SessionConfig {
    let archs = [Architecture::Mlp3, Architecture::Cnn2, Architecture::Lenet, Architecture::Mlp3];
    let opts = [
        OptimizerConfig::new(OptimizerKind::Sgd, 0.2),
        OptimizerConfig::new(OptimizerKind::Momentum, 0.05),
        OptimizerConfig::new(OptimizerKind::Adagrad, 0.05),
        OptimizerConfig::new(OptimizerKind::Adam, 0.005),
    ];
    let specs = party_specs(train, &archs, 64).unwrap();
    let parties = specs.into_iter().zip(opts).map(|(spec, optimizer)| PartySetup { spec, optimizer }).collect();
    let mut cfg = SessionConfig::new(parties, seed);
    cfg.epochs = 20;
    cfg.batch_size = 128;
    cfg
}

fn blobs(seed: u64) -> (Dataset, Dataset) {
    synth_blobs(4000, 10, 64, 0.5, seed).unwrap().split_at(3200)
}

fn mnist() -> (Dataset, Dataset) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
    (train, test)
}

fn fmt_acc(a: &[f64]) -> String {
    a.iter().map(|v| format!("{:.1}", 100.0 * v)).collect::<Vec<_>>().join("/")
}

/// Runs the heterogeneous session and Local for one seed; returns whether
/// the seed meets the bar, the outcome and a description.
fn hetero_seed(train: &Dataset, test: &Dataset, seed: u64, bar: f64) -> (bool, SessionOutcome, String) {
    let cfg = hetero_config(train, seed);
    let out = run_session(&cfg, train, Some(test), cfg.initial_states()).unwrap();
    let local = run_local(&cfg, train, Some(test), cfg.initial_states().remove(0)).unwrap();
    let local_acc = *local.test_acc.last().unwrap();
    let acc = out.final_test_acc();
    let ok = acc.iter().all(|&a| a >= bar && a >= local_acc + 0.10);
    let desc = format!("s{seed} {} vs local {:.1}", fmt_acc(&acc), 100.0 * local_acc);
    (ok, out, desc)
}

fn heterogeneous(blob_runs: &mut Vec<SessionOutcome>) -> (bool, String) {
    let mut blob_pass = 0;
    let mut descs = Vec::new();
    for seed in SEEDS {
        let (train, test) = blobs(seed);
        let (ok, out, d) = hetero_seed(&train, &test, seed, 0.90);
        blob_pass += usize::from(ok);
        blob_runs.push(out);
        descs.push(d);
    }
    let (train, test) = mnist();
    let mut mnist_pass = 0;
    let mut mdescs = Vec::new();
    for seed in SEEDS {
        let (ok, _, d) = hetero_seed(&train, &test, seed, 0.88);
        mnist_pass += usize::from(ok);
        mdescs.push(d);
    }
    (
        blob_pass >= 4 && mnist_pass >= 4,
        format!(
            "blobs {blob_pass}/5 seeds ({}); mnist {mnist_pass}/5 seeds ({})",
            descs.join("; "),
            mdescs.join("; ")
        ),
    )
}

fn ledger(runs: &[SessionOutcome], sizes: &[usize]) -> (bool, String) {
    let mut ok = !runs.is_empty();
    let mut parts = Vec::new();
    for (out, &n) in runs.iter().zip(sizes) {
        let batches = n.div_ceil(128) as u64;
        let expected = 4 * batches * 20;
        let report = ledger_check(&out.ledger, 20, 3);
        let observed_ok = report.observed_per_passive.len() + 1 == out.states.len()
            && report.observed_per_passive.iter().all(|&o| o == expected);
        ok &= observed_ok && report.consistent();
        ok &= report.vfedmh_round_units == 80 && report.existing_round_units == 120;
        parts.push(format!(
            "N={n}: {:?} observed, {expected} expected",
            report.observed_per_passive
        ));
    }
    (ok, format!("{}; round units 80 vs 120", parts.join("; ")))
}

fn ordering(blob_runs: &[SessionOutcome]) -> (bool, String) {
    let mut vf = Vec::new();
    let mut agg = Vec::new();
    for (seed, out) in SEEDS.iter().zip(blob_runs) {
        let (train, test) = blobs(*seed);
        let cfg = hetero_config(&train, *seed);
        let a = run_aggvfl(&cfg, &train, Some(&test), cfg.initial_states()).unwrap();
        let acc = out.final_test_acc();
        vf.push(acc.iter().sum::<f64>() / acc.len() as f64);
        agg.push(a.final_test_acc()[0]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (m_vf, m_agg) = (mean(&vf), mean(&agg));
    (
        vf.len() == SEEDS.len() && m_vf >= m_agg,
        format!("mean accuracy VFedMH {:.2}% vs aggVFL {:.2}% ({})", 100.0 * m_vf, 100.0 * m_agg, fmt_acc(&agg)),
    )
}

fn bound() -> (bool, String) {
    let cfg = BoundCheckConfig {
        problem: Problem::Softmax {
            samples: 400,
            classes: 4,
            dims: 16,
            spread: 0.5,
            parties: 3,
            embedding_dim: 8,
            decision_hidden: vec![],
        },
        lambda: 0.1,
        eta: None,
        epochs: 20,
        seed: 100,
        seeds: 20,
    };
    match run_bound_check(&cfg) {
        Ok(r) => {
            let rate = r.violation_rate();
            (
                r.runs.len() == 60 && rate <= 0.05 && r.informative,
                format!(
                    "{} of {} steps above b_t ({:.1}%) over 20 seeds x 3 parties, b_inf {:.3e}",
                    r.violations,
                    r.steps,
                    100.0 * rate,
                    r.fixed_point
                ),
            )
        }
        Err(e) => (false, format!("error: {e}")),
    }
}

fn optimizer_equivalence() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let kinds = [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adagrad, OptimizerKind::Adam];
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let kind = kinds[case % 4];
        let mut cfg = OptimizerConfig::new(kind, rng.random_range(1e-4..1.0));
        cfg.momentum = rng.random_range(0.0..0.99);
        cfg.beta1 = rng.random_range(0.0..0.99);
        cfg.beta2 = rng.random_range(0.9..0.9999);
        let mut opt = Optimizer::new(cfg.clone()).unwrap();
        let mut theta = rng.random_range(-10.0..10.0);
        let mut p = vec![Tensor::filled(vec![1], theta)];
        let (mut v, mut s, mut m) = (0.0f64, 0.0f64, 0.0f64);
        let lr = cfg.learning_rate;
        for t in 1..=rng.random_range(1..=10) {
            let g: f64 = rng.random_range(-5.0..5.0);
            theta = match kind {
                OptimizerKind::Sgd => theta - lr * g,
                OptimizerKind::Momentum => {
                    v = cfg.momentum * v + g;
                    theta - lr * v
                }
                OptimizerKind::Adagrad => {
                    s += g * g;
                    theta - lr * g / (s.sqrt() + cfg.adagrad_eps)
                }
                OptimizerKind::Adam => {
                    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
                    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
                    let mh = m / (1.0 - cfg.beta1.powi(t));
                    let vh = v / (1.0 - cfg.beta2.powi(t));
                    theta - lr * mh / (vh.sqrt() + cfg.adam_eps)
                }
            };
            opt.step(&mut p, &[Tensor::filled(vec![1], g)]).unwrap();
            worst = worst.max((p[0].data()[0] - theta).abs());
        }
    }
    (worst <= 1e-12, format!("1000 scalar cases, max deviation {worst:.1e}"))
}

fn malformed_variants(good: &[u8]) -> Vec<(&'static str, Vec<u8>)> {
    let mut magic = good.to_vec();
    magic[1] ^= 0x20;
    let mut version = good.to_vec();
    version[4] = 2;
    let mut kind = good.to_vec();
    kind[5] = 0xee;
    let mut oversize = good.to_vec();
    oversize[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    let mut long = good.to_vec();
    long.push(0);
    let mut lying = good.to_vec();
    let len = u32::from_le_bytes(lying[8..12].try_into().unwrap());
    lying[8..12].copy_from_slice(&(len + 3).to_le_bytes());
    lying.extend_from_slice(&[0xff; 3]);
    vec![
        ("magic", magic),
        ("version", version),
        ("type", kind),
        ("oversize", oversize),
        ("truncated", good[..good.len() - 1].to_vec()),
        ("header", good[..7].to_vec()),
        ("trailing", long),
        ("payload", lying),
    ]
}

fn wire() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut ok = true;
    let mut sent = 0usize;

    // Memory transport: 250 up, 250 down.
    let (mut hub, mut spokes) = memory_star(2);
    for r in 0..250u32 {
        let spoke = &mut spokes[(r % 2) as usize];
        let up = random_message(&mut rng, spoke.party(), r + 1);
        spoke.send(PartyId::ACTIVE, &up).unwrap();
        let env = hub.recv(WAIT).unwrap();
        ok &= encoded(env.from, &env.message) == encoded(spoke.party(), &up);
        let down = random_message(&mut rng, PartyId::ACTIVE, r + 1);
        hub.send(spoke.party(), &down).unwrap();
        let env = spoke.recv(WAIT).unwrap();
        ok &= env.from == PartyId::ACTIVE && encoded(env.from, &env.message) == encoded(PartyId::ACTIVE, &down);
        sent += 2;
    }

    // TCP: 250 up and 250 down over two links.
    let (mut hub, links) = tcp_star(2);
    let down: Vec<Message> = (0..250).map(|i| random_message(&mut rng, PartyId::ACTIVE, 1 + i as u32)).collect();
    thread::scope(|s| {
        let mut handles = Vec::new();
        for (idx, mut link) in links.into_iter().enumerate() {
            let expected: Vec<Message> = down.iter().skip(idx).step_by(2).cloned().collect();
            handles.push(s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(200 + idx as u64);
                let ups: Vec<Message> = (0..125u32).map(|r| random_message(&mut rng, link.party(), 1 + r)).collect();
                for m in &ups {
                    link.send(PartyId::ACTIVE, m).unwrap();
                }
                let mut fine = true;
                for want in expected {
                    let env = link.recv(WAIT).unwrap();
                    fine &= encoded(PartyId::ACTIVE, &env.message) == encoded(PartyId::ACTIVE, &want);
                }
                (ups, fine)
            }));
        }
        for (i, m) in down.iter().enumerate() {
            hub.send(PartyId(1 + (i % 2) as u16), m).unwrap();
        }
        let mut got: Vec<Vec<Message>> = vec![Vec::new(); 2];
        for _ in 0..250 {
            let env = hub.recv(WAIT).unwrap();
            got[env.from.index() - 1].push(env.message);
        }
        for (i, h) in handles.into_iter().enumerate() {
            let (ups, fine) = h.join().unwrap();
            let sender = PartyId(1 + i as u16);
            ok &= fine && ups.len() == got[i].len();
            ok &= ups.iter().zip(&got[i]).all(|(a, b)| encoded(sender, a) == encoded(sender, b));
        }
    });
    sent += 500;

    // Malformed frames: the decoder and the memory transport reject each.
    let good = encoded(PartyId(1), &random_message(&mut rng, PartyId(1), 1));
    let mut rejected = 0;
    let variants = malformed_variants(&good);
    for (_, bytes) in &variants {
        let decode_err = matches!(
            Frame::decode(bytes),
            Err(FrameError::BadMagic(_)
                | FrameError::BadVersion(_)
                | FrameError::UnknownType(_)
                | FrameError::Oversize(_)
                | FrameError::Truncated { .. }
                | FrameError::Payload(_))
        );
        let (mut hub, mut spokes) = memory_star(1);
        spokes[0].send_raw(PartyId::ACTIVE, bytes.clone()).unwrap();
        let transport_err = matches!(hub.recv(WAIT), Err(TransportError::Malformed(_)));
        rejected += usize::from(decode_err && transport_err);
    }
    ok &= rejected == variants.len();
    (
        ok,
        format!("{sent} messages bit-exact over memory and TCP, {rejected}/{} malformed frames rejected", variants.len()),
    )
}

#[test]
fn acceptance_criteria() {
    // The harness has already printed `test acceptance_criteria ... ` without a newline.
    say(String::new());
    let mut results = Vec::new();
    let mut ledger_runs = Vec::new();
    let mut blob_runs = Vec::new();
    results.push(criterion(1, "mask cancellation", Duration::from_secs(5), mask_cancellation));
    results.push(criterion(2, "shared-key symmetry", Duration::from_secs(5), key_symmetry));
    results.push(criterion(3, "aggregation transparency", Duration::from_secs(120), || {
        aggregation_transparency(&mut ledger_runs)
    }));
    results.push(criterion(4, "gradient correctness", Duration::from_secs(120), gradient_correctness));
    results.push(criterion(5, "heterogeneous end-to-end", Duration::from_secs(600), || {
        heterogeneous(&mut blob_runs)
    }));
    let runs: Vec<SessionOutcome> = ledger_runs.iter().chain(blob_runs.iter().take(1)).cloned().collect();
    results.push(criterion(6, "communication ledger", Duration::from_secs(1), || ledger(&runs, &[900, 3200])));
    results.push(criterion(7, "embedding vs prediction aggregation", Duration::from_secs(900), || {
        ordering(&blob_runs)
    }));
    results.push(criterion(8, "convergence bound", Duration::from_secs(120), bound));
    results.push(criterion(9, "optimizer equivalence", Duration::from_secs(5), optimizer_equivalence));
    results.push(criterion(10, "wire round-trip", Duration::from_secs(10), wire));
    let passed = results.iter().filter(|&&r| r).count();
    say(format!("{passed}/{} acceptance criteria passed", results.len()));
    assert_eq!(passed, results.len(), "failing criteria are listed above");
}
