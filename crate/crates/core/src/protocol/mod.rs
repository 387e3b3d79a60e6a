//! Open-set evaluation protocol: class splits, openness, datasets and metrics.

mod data;
mod metrics;
mod splits;
mod synth;

pub use data::{data_root, load_image_folder, load_mnist, read_idx_images, read_idx_labels, ImageSet, DATA_DIR_ENV};
pub use metrics::{auroc, closed_set_accuracy, macro_f1, F1Report, MetricsReport};
pub use splits::{make_splits, openness, SplitEntry, SplitFile, SplitSpec};
pub use synth::{synth_mnist_noise, synth_noise_dataset};
