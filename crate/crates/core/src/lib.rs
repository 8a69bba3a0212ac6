//! Safe decentralized landing for drone swarms.
//!
//! The crate bundles a simplified swarm simulator with obstacles and moving
//! landing pads ([`world`], [`env`]), a barrier-function safety filter over
//! velocity commands ([`safety`]), a from-scratch MLP stack ([`nn`]), a
//! multi-agent PPO trainer ([`mappo`]) and the run/evaluation harness
//! ([`harness`]).

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod harness;
pub mod mappo;
pub mod nn;
pub mod safety;
pub mod world;

pub use error::{Error, Result};
pub use world::Vec3;
