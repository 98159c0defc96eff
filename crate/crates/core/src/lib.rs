pub mod acoustics;
pub mod corpus;
pub mod dsp;
pub mod echomodel;
pub mod emsep;
pub mod error;
pub mod harness;
pub mod nmf;
pub mod metrics;
pub mod musep;
pub mod num;
pub mod spectral;

pub use error::{Error, Result};
pub use num::Real;

pub type Dictionary64 = nmf::Dictionary<f64>;
pub type ChannelMatrix64 = echomodel::ChannelMatrix<f64>;
pub type Stft64 = spectral::Stft<f64>;
pub type Spectrogram64 = spectral::Spectrogram<f64>;
