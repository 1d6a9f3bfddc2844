//! Measurement and experiment layer: the equivariance-error metric, the
//! static strictness checker, the sampling-mismatch demonstration, the
//! synthetic dataset, training and robustness sweeps, and CSV output.

pub mod dataset;
pub mod gradcheck;
pub mod metric;
pub mod mismatch;
pub mod report;
pub mod robustness;
pub mod strictness;
pub mod train;

pub use dataset::{angular_error_deg, gen_dataset, gen_split, render, Dataset, DatasetSpec, Samples, ShapeClass, Split};
pub use gradcheck::{run_gradcheck, GradcheckResult};
pub use metric::{equiv_error, equiv_error_pair, quarter_turns_for_angle, stagewise_error, EquivError, EquivErrorReport, StageError};
pub use mismatch::{sampling_mismatch_demo, MismatchDemo};
pub use robustness::{robustness_sweep, rotate_images, RobustnessCurve, RobustnessPoint};
pub use strictness::{check_strictness, LayerCheck, StrictnessReport, Verdict};
pub use train::{evaluate, train, train_step, EpochRecord, Evaluation, TrainConfig, TrainState, TrainingHistory};
