pub mod autodiff;
pub mod data;
pub mod geometry;
pub mod harness;
pub mod icp;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod refine;
