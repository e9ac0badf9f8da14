// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head-level demographic bias localisation for vision transformers.
//!
//! The library works on cached, already-projected residual-stream
//! contributions (initial token, every MLP block, every attention head) and
//! provides:
//!
//! - [`store`]: the contribution store, prototype and classifier containers;
//! - [`decomposition`]: reconstruction, zero-shot classification, mean ablation;
//! - [`ranking`]: zero-shot concept alignment per head and threshold selection;
//! - [`textspan`]: greedy variance-explaining text labels per head;
//! - [`stats`]: chi-squared tests, Benjamini–Hochberg, Cramér's V;
//! - [`audit`]: the end-to-end pipeline with layer-matched random controls;
//! - [`synth`]: planted-bias synthetic stores and brute-force oracles.

pub mod audit;
pub mod cli;
pub mod decomposition;
pub mod error;
pub mod ranking;
pub mod rng;
pub mod stats;
pub mod textspan;
pub mod store;
pub mod synth;

pub use decomposition::{classify, head_means, reconstruct, AblationPlan, Classification, HeadId};
pub use error::{DecompositionError, StatsError, StoreError, Untestable};
pub use store::{
    load_classifier, load_prototypes, load_store, save_classifier, save_prototypes, save_store,
    ClassifierMatrix, DemographicAttribute, DictionaryEntry, HeadContributionStore, PrototypeSet,
    StoreManifest, TextCategory,
};
