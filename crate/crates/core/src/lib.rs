pub mod aeh;
pub mod analytics;
pub mod interface;
pub mod kg;
pub mod llm;
pub mod materials;
pub mod protocol;
pub mod retrieval;
pub mod runner;
pub mod scenario;

/// Analytics types at `f64`, the precision the CLI and service use.
pub type SuccessStats = analytics::SuccessStats<f64>;
/// Success statistics over exact rationals.
pub type ExactSuccessStats = analytics::SuccessStats<num_rational::Ratio<i64>>;
pub type DecayFit = analytics::DecayFit<f64>;
pub type SomModel = analytics::SomModel<f64>;
