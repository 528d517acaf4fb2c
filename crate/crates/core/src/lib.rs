pub mod bindings;
pub mod cli;
pub mod estimators;
pub mod harness;
pub mod ib;
pub mod inference;
pub mod linalg;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod serde_vec;
pub mod sim;
pub mod toy;
