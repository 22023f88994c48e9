//! Variational annealing for combinatorial optimization on graphs.
//!
//! Problems are encoded as Ising energies ([`ising`]), solved by an
//! autoregressive policy trained with PPO under an annealed free-energy
//! reward ([`policy`], [`ppo`]), and compared against mean-field and greedy
//! baselines ([`baselines`]) using exact oracles ([`exact`]) and the metrics in
//! [`metrics`].

pub mod baselines;
pub mod error;
pub mod exact;
pub mod graph;
pub mod instance_gen;
pub mod ising;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
