//! Vector-quantized image tokenizer for text-rich figures, trained with an OCR
//! perceptual loss next to the usual VGG perceptual, pixel and adversarial terms.

pub mod adversarial;
pub mod cli;
pub mod codec;
pub mod conv;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod perceptual;
pub mod quantizer;
pub mod tokenfile;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Tokenizer;
