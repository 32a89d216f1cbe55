//! Synthetic tasks, the experiment grid runner and finite-difference suite.

pub mod ablation;
pub mod gradsuite;
pub mod run;
pub mod task;

pub use ablation::{run_ablation, AblationRow, Preset, Variant};
pub use task::{generate_task, load_task, write_task, DomainSpec, Task, TaskError, TaskSpec};
pub use run::{resolve_task, run_training};
