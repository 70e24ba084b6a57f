pub mod nn;
pub mod optim;
pub mod secure;
pub mod transport;
pub mod data;
pub mod metrics;
pub mod protocol;
pub mod baselines;
pub mod calibration;
