pub mod affine;
pub mod fixtures;
pub mod linalg;
pub mod optim;
pub mod panel;
pub mod pricing;
pub mod ratings;
pub mod regimes;
pub mod simulate;
