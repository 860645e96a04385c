//! Exemplar-controlled dialogue generation: a language model conditioned on
//! the dialogue context and on the semantic-frame sequence of an exemplar
//! response.
//!
//! Pipeline: [`frames`] tags text with frame labels, [`corpus`] builds
//! context/response pairs, [`sequence`] lays them out as token sequences,
//! [`noising`] perturbs the frame block during [`trainer`] fine-tuning,
//! [`retrieval`] picks exemplars, [`generation`] decodes with nucleus
//! sampling and [`evaluation`] scores the output. Model code lives behind
//! the [`backend::LmBackend`] trait.

pub mod backend;
pub mod corpus;
pub mod evaluation;
pub mod frames;
pub mod generation;
pub mod noising;
pub mod retrieval;
pub mod sequence;
pub mod text;
pub mod tokenizer;
pub mod trainer;

pub use backend::{BackendError, LmBackend};
pub use frames::{Frame, FrameLexicon, FrameSequence, FrameTagger};
