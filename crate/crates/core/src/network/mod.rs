//! The lifting-wavelet reconstruction network.
//!
//! An input projection lifts the radar signal to `C` channels, `N` lifting
//! units decompose it into per-scale detail components and a final
//! approximation, `N` inverse lifting units synthesize it back, and an output
//! projection collapses the channels to the ECG estimate.

pub mod block;
pub mod config;
pub mod lifting;
pub mod model;

pub use block::PredictUpdateBlock;
pub use config::{CsConvLayout, ModelConfig, SplitInit};
pub use lifting::{InverseLiftingUnit, LiftingUnit, Resampling};
pub use model::{count_params_flops, Complexity, FeatureDump, FeatureStage, Model, Network};
