//! FogBus: a fog computing framework that links IoT gateways, fog workers
//! and cloud instances, with a proof-of-work ledger guarding every payload.

pub mod analytic;
pub mod apps;
pub mod bench;
pub mod broker;
pub mod cloud;
pub mod cluster;
pub mod crypto;
pub mod gateway;
pub mod ledger;
pub mod model;
pub mod net;
pub mod proto;
pub mod worker;

pub use analytic::{analyze, classify, AnalyticConfig};
pub use ledger::{Chain, ChainVerdict, DataBlock};
pub use model::*;
