//! Drifting data streams.
//!
//! A stream is a sequence of steps `t = 0, 1, …`; the distribution at each
//! step comes from a [`Source`] reshaped by a [`DriftSchedule`]. Everything
//! here is a pure function of `(config, seed, t)`.

mod idx;
mod sample;
mod schedule;
mod source;
mod tensor_file;

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels};
pub use sample::{
    augment_pair, sample_balanced, sample_batch, sample_ood, sample_ood_from, AugConfig, DriftState, StreamBatch,
    StreamCursor,
};
pub use schedule::{class_probs, tailed_profile, DriftSchedule, MeanTransform};
pub use source::{drift_witness, LabeledDataset, MixtureConfig, Source, SourceModel, SEPARATION_MARGIN};
pub use tensor_file::{
    decode_tensor, decode_tensor_at, encode_tensor, load_tensor, save_tensor, save_tensor_as, DType, TENSOR_MAGIC,
    TENSOR_VERSION,
};
