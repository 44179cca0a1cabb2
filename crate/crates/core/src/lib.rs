//! Active/passive portfolio allocation under a hidden-Markov market model.
//!
//! The crate is organised bottom-up:
//!
//! - [`market`]: the regime-switching model and a grid-switching simulator
//! - [`filter`]: online posterior of the latent regime from observed log prices
//! - [`allocator`]: the closed-form optimal portfolio and its special cases
//! - [`estimation`]: Baum-Welch EM, Viterbi, model selection, nearest generator
//! - [`backtest`]: walk-forward backtests with calibrated preferences
//! - [`cli`]: the command-line front end

pub mod allocator;
pub mod backtest;
pub mod cli;
pub mod error;
pub mod estimation;
pub mod filter;
pub mod io;
pub mod linalg;
pub mod market;

pub use error::{Error, Result};
pub use filter::{filter_path, filter_step, init_filter, Filter, FilterRun, FilterState};
pub use market::{simulate_path, transition_matrix, HmmModel, PricePath, DEFAULT_DT};
