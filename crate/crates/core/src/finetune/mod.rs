//! Synthetic product scenes, mask samplers, training loops and the
//! over-completion evaluation.

pub mod eval;
pub mod masks;
pub mod metric;
pub mod scene;
pub mod train;

pub use eval::{eval_compare, evaluate, sign_test, train_arms, Comparison, EvalConfig, ExperimentConfig, MetricReport};
pub use masks::{sample_instance_mask, sample_random_mask, training_hole, truncates, MaskSamplerKind};
pub use metric::overcompletion_score;
pub use scene::{gen_scene, gen_scene_sized, SceneCorpus, SyntheticScene};
pub use train::{train, Branch, OptimizerSpec, TrainConfig, TrainLog};
