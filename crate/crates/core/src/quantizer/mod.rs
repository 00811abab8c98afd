//! Speech front end: log mel-filterbank frames quantized against a k-means
//! codebook into discrete speech tokens.

mod codebook;
mod features;
mod kmeans;

pub use codebook::{discretize, Codebook, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use features::{featurize, Featurizer, FrameFeaturizerConfig, LOG_FLOOR};
pub use kmeans::{train_codebook, KmeansReport};
