//! Multi-task sentiment and multi-label emotion classification over
//! utterance sequences with three feature modalities (text, acoustic,
//! visual), built around contextual inter-modal attention.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
