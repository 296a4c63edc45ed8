//! Joint speech and speaker training for far-field speaker verification.
//!
//! A speaker-embedding encoder (x-vector or ECAPA-TDNN) is trained with an
//! additive angular margin classifier while one of its frame-level layers is
//! pulled towards the frame vectors of a frozen phonetic teacher. The crate
//! also ships the verification back-end (cosine scoring, adaptive score
//! normalization, EER and minDCF) and a synthetic corpus generator.

pub mod audio;
pub mod backbones;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod ops;
pub mod synth;
pub mod teacher;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
