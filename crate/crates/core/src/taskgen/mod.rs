//! Teacher hypernetwork and task distributions.

pub mod dataset;
mod episode;
mod latent;
mod linalg;
mod masks;
mod teacher;

pub use episode::{control_episode, indexed_episode, sample_batch, sample_episode, Episode, Split, INPUT_BOUND};
pub use latent::{sample_latent, Mask, TaskLatent};
pub use linalg::{opnorm, opnorm_with, OPNORM_MAX_ITER, OPNORM_TOL};
pub use masks::{mask_set, two_hot_masks, DistributionName, Support, TaskDistribution, TABLE_MODULES};
pub use teacher::{
    init_teacher, task_weights, teacher_forward, teacher_label, truncated_normal, TeacherDims, TeacherParams,
    DEGENERATE_NORM, TRUNCATION,
};
