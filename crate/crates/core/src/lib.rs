//! Multi-objective policy-gradient fine-tuning of a flow-matching sampler.
//!
//! The crate covers the stochastic sampler and its log-densities
//! ([`flowmatch`]), the reward suite ([`rewards`]), two-stage advantage
//! normalization ([`dsan`]), the adaptive priority scheduler
//! ([`scheduler`]), the clipped policy-gradient update ([`grpo`]),
//! hypervolume metrics ([`pareto`]) and the experiment driver ([`harness`]).

pub mod dsan;
pub mod error;
pub mod flowmatch;
pub mod grpo;
pub mod harness;
pub mod pareto;
pub mod rewards;
pub mod rng;
pub mod scheduler;
pub mod stats;

pub use dsan::{AdvantageMatrix, GroupRewards, Matrix};
pub use error::{Error, Result};
pub use flowmatch::{Context, FlowPolicyParams, NoiseSchedule, TimeGrid, Trajectory};
pub use rewards::{RewardSpec, RewardVector, RunningPerformance, UtopiaPoints};
pub use scheduler::{FactorGates, PriorityFactors, SchedulerConfig, SchedulerState, WeightState, WeightingMode};
