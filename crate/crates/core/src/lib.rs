//! Desk-scale lab for guided decoding with verifiable rewards.
//!
//! A small trainable "guide" model steers a frozen "backbone" decoder by
//! adding its per-token log-probabilities to the backbone's at every decode
//! step. The guide is trained with group-relative policy optimization against
//! rule-checked rewards, and everything is small enough that the results can
//! be cross-checked against brute-force oracles.
//!
//! Layout:
//! - [`numkit`]: tensors, reverse-mode tape, AdamW, gradient checking
//! - [`lm`]: char-level decoder-only transformer, vocab, checkpoints
//! - [`tasks`]: synthetic reward-checked tasks and pretraining corpora
//! - [`policy`]: composed backbone+guides policy, sampling, scoring
//! - [`grpo`]: advantages, clipped surrogate loss, the training loop
//! - [`oracle`]: exact enumeration, soft-Q backward induction, exact KL
//! - [`harness`]: run configs, run directories, the CLI-facing commands

pub mod error;
pub mod grpo;
pub mod harness;
pub mod lm;
pub mod numkit;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
