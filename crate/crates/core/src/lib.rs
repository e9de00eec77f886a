//! Defocus-tolerant virtual staining.
//!
//! A refocusing generator is trained with a style loss computed by a frozen,
//! previously trained virtual-staining generator, so that its outputs are
//! suitable inputs for that stainer. The crate also carries the synthetic
//! data, registration, evaluation metrics and whole-slide scan-time model
//! used to compare staining of defocused, refocused and in-focus inputs.

pub mod tensor;
pub mod models;
pub mod losses;
pub mod metrics;
pub mod scan;
pub mod imgproc;
pub mod phantom;
pub mod registration;
pub mod pipeline;
