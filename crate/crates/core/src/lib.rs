//! Local convergence analysis of iterative hard thresholding for matrix
//! completion: solvers, the exact rate `1 - lambda_min(H)`, its large-scale
//! limit, and the random-matrix experiments behind them.

pub mod asymptotics;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod quadrature;
pub mod rate;
pub mod rmt;
pub mod sampling;
pub mod seed;
pub mod solver;
pub mod special;

pub use asymptotics::{asymptotic_rate, AsymptoticParams, LimitingEsd};
pub use error::{Error, Result};
pub use experiment::{fit_empirical_rate, run_sweep, CellResult, RateFit, SweepConfig};
pub use linalg::{rank_r_project, svd, DenseMatrix, LowRankModel, SvdResult};
pub use rate::{iteration_bound, lambda_min_h, IterationBound, RateReport};
pub use rmt::{esd_of_truncation, histogram_distance, Construction, EsdSample};
pub use sampling::{uniform_sample, SamplingSet};
pub use solver::{run_ihtsvd, SolverConfig, SolverTrace, StepSize, StopReason, UpdateForm};
pub use special::exp_integral_e1;
