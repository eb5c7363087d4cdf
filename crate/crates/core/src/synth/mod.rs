//! Synthetic scenes, sparse sampling and the desk-scale experiments built on
//! the library: the toy depth trainer, the attention benchmark and the
//! densification ablation.
//!
//! All randomness comes from ChaCha8 seeded with `seed_from_u64(seed)`; each
//! consumer selects its own stream (see [`scene::streams`]), so adding draws
//! in one consumer never shifts another.

pub mod ablation;
pub mod bench;
pub mod scene;
pub mod train;

pub use ablation::{dilation_ablation, AblationRow};
pub use bench::{bench_attention, fit_slope, BenchConfig, BenchResult, BenchRow, SlopeFit};
pub use scene::{gen_scene, rng_for, sample_sparse, Layout, SampleMode, Scene, SceneSpec};
pub use train::{train_toy, CurvePoint, Init, Objective, TrainConfig, TrainMode, TrainOutcome};
