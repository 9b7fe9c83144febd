//! The performance model: a basis network producing `Φ` and a Gaussian
//! belief over the weights that combine its columns.

mod belief;
mod checkpoint;
mod config;
mod network;
mod normalize;
mod record;

pub use belief::{predict, KfPrior, WeightBelief, MEASUREMENT_NOISE_FLOOR};
pub use checkpoint::{Checkpoint, TrainingStage};
pub use config::ModelConfig;
pub use network::{BasisNetwork, BatchInputs, Dense, Mlp};
pub use normalize::{Normalizer, Standardizer};
pub use record::EpisodeRecord;
