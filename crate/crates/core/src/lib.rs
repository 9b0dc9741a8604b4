//! Multilingual report generation for 12-lead cardiac signals.

pub mod caption;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod lang;
pub mod metrics;
pub mod nn;
pub mod pretrain;
pub mod tokenize;
pub mod train;
pub mod translate;

pub use error::{Error, Result};
pub use lang::Language;
pub use cardiocap_tensor::Scalar;

pub type Dataset32 = corpus::Dataset<f32>;
pub type Dataset64 = corpus::Dataset<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Decoder32 = decoder::Decoder<f32>;
pub type Decoder64 = decoder::Decoder<f64>;
pub type CaptioningModel32 = caption::CaptioningModel<f32>;
pub type CaptioningModel64 = caption::CaptioningModel<f64>;
