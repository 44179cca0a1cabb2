//! Maximum-likelihood estimation of the hidden-Markov market from return data.

pub mod em;
pub mod generator;
pub mod hmm;
pub mod init;
pub mod selection;
pub mod viterbi;

pub use em::{em_fit, EmConfig, EmResult, RestartOutcome};
pub use generator::{nearest_generator, GeneratorFit};
pub use hmm::{forward_backward, forward_log_likelihood, log_emissions, model_log_likelihood, StepParams};
pub use init::init_strategy;
pub use selection::{n_free_params, select_states, CriteriaRow, Criterion, Selection};
pub use viterbi::{viterbi, viterbi_fitted, viterbi_params};
