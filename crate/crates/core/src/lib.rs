pub mod calibration;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod oracles;
pub mod queueing;
pub mod stream;
pub mod sum;
