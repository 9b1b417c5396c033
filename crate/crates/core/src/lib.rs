pub mod backtest;
pub mod blend;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod filters;
pub mod linalg;
pub mod portfolio;
pub mod pricing;
pub mod synth;

pub use error::{Error, Result};
pub use backtest::{run_backtest, BacktestResult, HyperParams};
pub use data::{AssetPanel, FactorSeries};
pub use pricing::ActiveModel;
pub use synth::{generate, GeneratorSpec};
