//! Off-policy learning (OPL) of prompt policies for contextual bandits with
//! auxiliary outputs.
//!
//! A logging policy picks a discrete action (a prompt), a generator turns the
//! (query, action) pair into a sentence embedding, and the user reacts to the
//! sentence with a reward. Only the logged action's reward is observed, so a
//! new policy has to be trained counterfactually. This crate provides:
//!
//! - a fully specified synthetic environment with closed-form expected
//!   rewards ([`synthetic_env`]),
//! - JSONL serialization of logged feedback ([`data_io`]),
//! - six policy-gradient estimators — online, regression, IS, DR, POTEC, and
//!   the kernel-based direct sentence off-policy gradient (DSO) —
//!   ([`gradients`]),
//! - marginal sentence-density estimation by Monte Carlo or function
//!   approximation ([`density`]),
//! - training loops and ground-truth evaluation ([`learner`], [`evaluation`]),
//! - an exact enumeration oracle that verifies the bias and variance
//!   identities of DSO on small discrete instances ([`oracle`]).

pub mod data_io;
pub mod density;
pub mod evaluation;
pub mod gradients;
pub mod kernels;
pub mod learner;
pub mod nn;
pub mod oracle;
pub mod policies;
pub mod rng;
pub mod synthetic_env;
pub mod types;
