#![allow(dead_code)]

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use num_bigint::BigUint;
use rand::Rng;
use vfedmh::nn::Tensor;
use vfedmh::secure::RingTensor;
use vfedmh::transport::{Endpoint, Frame, Message, PartyId, RoundNonce, TcpHub, TcpLink};

pub const WAIT: Duration = Duration::from_secs(10);

pub fn encoded(sender: PartyId, m: &Message) -> Vec<u8> {
    Frame {
        sender,
        message: m.clone(),
    }
    .encode()
    .unwrap()
}

/// Loopback hub with `passive` connected links. Each link has already
/// delivered one hello frame (a prediction at batch 0).
pub fn tcp_star(passive: usize) -> (TcpHub, Vec<TcpLink>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (mut hub, links) = thread::scope(|s| {
        let h = s.spawn(|| {
            (1..=passive)
                .map(|k| {
                    let mut link = TcpLink::connect(addr, PartyId(k as u16), WAIT).unwrap();
                    let hello = Message::Prediction {
                        party: PartyId(k as u16),
                        nonce: RoundNonce::new(0, 0),
                        logits: Tensor::from_rows(&[vec![0.0]]),
                    };
                    link.send(PartyId::ACTIVE, &hello).unwrap();
                    link
                })
                .collect::<Vec<_>>()
        });
        let hub = TcpHub::accept(&listener, passive, WAIT).unwrap();
        (hub, h.join().unwrap())
    });
    for _ in 0..passive {
        hub.recv(WAIT).unwrap();
    }
    (hub, links)
}

fn random_shape<R: Rng>(rng: &mut R) -> Vec<usize> {
    let rank = rng.random_range(1..=4);
    (0..rank).map(|_| rng.random_range(0..=6)).collect()
}

fn random_f64<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..8) {
        0 => 0.0,
        1 => -0.0,
        2 => f64::MAX,
        3 => f64::MIN_POSITIVE,
        4 => 5e-324,
        _ => {
            let bits: u64 = rng.random();
            let v = f64::from_bits(bits);
            if v.is_finite() {
                v
            } else {
                rng.random_range(-1e6..1e6)
            }
        }
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R) -> Tensor {
    let shape = random_shape(rng);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| random_f64(rng)).collect()).unwrap()
}

/// A random message of a random kind. `round` becomes the batch index of the
/// nonce so callers can keep nonces increasing.
pub fn random_message<R: Rng>(rng: &mut R, party: PartyId, round: u32) -> Message {
    let nonce = RoundNonce::new(round / 7, round);
    match rng.random_range(0..5) {
        0 => {
            let len = rng.random_range(0..=40);
            let mut bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            if let Some(b) = bytes.first_mut() {
                *b |= 1;
            }
            Message::PublicKey {
                party,
                key: BigUint::from_bytes_be(&bytes),
            }
        }
        1 => {
            let shape = random_shape(rng);
            let n = shape.iter().product();
            Message::MaskedEmbedding {
                party,
                nonce,
                batch_id: rng.random(),
                embedding: RingTensor {
                    shape,
                    values: (0..n).map(|_| rng.random()).collect(),
                },
            }
        }
        2 => Message::GlobalEmbedding {
            nonce,
            batch_id: rng.random(),
            embedding: random_tensor(rng),
        },
        3 => Message::Prediction {
            party,
            nonce,
            logits: random_tensor(rng),
        },
        _ => Message::LossAndGrad {
            party,
            nonce,
            loss: random_f64(rng),
            grad: random_tensor(rng),
        },
    }
}
