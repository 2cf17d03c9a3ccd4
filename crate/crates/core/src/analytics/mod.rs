//! Success statistics, the attempt decay fit, the SOM and report files.

mod decay;
mod report;
mod som;
mod stats;

pub use decay::*;
pub use report::*;
pub use som::*;
pub use stats::*;
