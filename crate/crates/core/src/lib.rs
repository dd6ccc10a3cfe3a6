//! Desk-scale reinforcement learning as a service.
//!
//! A scheduler admits jobs onto a pool of simulated accelerator slots and
//! launches one task server per job. Task servers own a token policy, run
//! multi-turn rollouts through a four-state episode machine against
//! turn-based environments, and apply group-baseline policy-gradient updates.
//! A protocol coordinator lets independently trained agents share one
//! environment through phase barriers and turn grants.

pub mod client;
pub mod coordinator;
pub mod env;
pub mod fsm;
pub mod policy;
pub mod protocol;
pub mod rpc;
pub mod scheduler;
pub mod sft;
pub mod task_server;
pub mod types;
