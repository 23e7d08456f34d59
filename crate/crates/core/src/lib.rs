//! Continual-learning engine for brain-response retrieval with de-biased
//! contrastive training and angular feature distillation, plus the synthetic
//! memory-decay benchmark it is verified on.

pub mod cli;
pub mod encoder;
pub mod engine;
pub mod losses;
pub mod retrieval;
pub mod rng;
pub mod stats;
pub mod suite;
pub mod synth;
pub mod tensor;
