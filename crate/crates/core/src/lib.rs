//! Regex rule pools that compress terminal output for coding agents.
//!
//! [`executor::compress`] applies at most one [`rule::CompressionRule`] to a
//! command's output and passes anything that reports a failure through
//! untouched. A [`session::TaskSession`] manages one task's rules, asking a
//! model (through [`gateway::LlmGateway`]) to adapt, create and replace them.
//! Finished sessions write back into a [`pool::GlobalRulePool`], persisted by
//! [`store::PoolStore`]. [`harness`] replays recorded trajectories and drives
//! evolution until the pool's top rules settle.

pub mod complaint;
pub mod executor;
pub mod gateway;
pub mod harness;
pub mod pool;
pub mod rule;
pub mod session;
pub mod store;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rules.md")]
    mod rules {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/pool.md")]
    mod pool {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
    #[doc = include_str!("../../../book/src/evolution.md")]
    mod evolution {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
