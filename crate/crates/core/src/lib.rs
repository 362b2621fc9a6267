pub mod config;
pub mod matops;
pub mod model;
pub mod qpsolve;
pub mod estimators;
pub mod arrival;
pub mod analysis;
pub mod netsim;
pub mod report;
