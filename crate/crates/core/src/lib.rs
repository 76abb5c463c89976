//! Deep joint source-channel coding over cooperative relay channels.
//!
//! The crate simulates half-duplex and full-duplex relay channels, trains
//! ViT-based source/relay/destination codecs end to end, and compares them
//! with amplify-and-forward relaying and with separation-based rate bounds.

pub mod autodiff;
pub mod baseline;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod par;
pub mod plot;
pub mod protocols;
pub mod rates;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
