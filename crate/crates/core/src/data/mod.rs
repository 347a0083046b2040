//! Datasets, normalization, split strategies, synthetic generators and CSV I/O.

mod csvio;
mod dataset;
mod split;
mod synth;

pub use csvio::{load_csv, load_csv_table, write_csv, write_csv_with, CsvTable};
pub use dataset::{denormalize, normalize, ColumnStats, Dataset, NormStats};
pub use split::{rows_by_norm, split, split_indices, SplitIndices, SplitKind, SplitSpec, Splits};
pub use synth::{
    four_mode_arch, gen_sine_tasks, gen_toy_four_modes, gen_toy_latent_rbf, toy_rbf_arch,
    FourModeToy, Gap, LatentRbfToy, ModeDescriptor, SineTask, TaskSet,
    FOUR_MODE_POINTS_PER_MODE, TOY_RBF_POINTS,
};
