pub mod clustering;
pub mod electrode;
pub mod estimator;
pub mod nsga2;
pub mod numeric;
pub mod pipeline;
pub mod regressor;
pub mod signal;
