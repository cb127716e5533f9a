//! Experiment engine behind the command-line front end.

pub mod bound;
pub mod config;
pub mod report;
pub mod run;
pub mod scenario;
pub mod sweep;

pub use bound::{verify_bound, BoundReport};
pub use config::{RunConfig, SweepAxis, SweepSpec};
pub use report::cmd_report;
pub use run::{cmd_train, load_run, run_dir, train_many, train_run, TrainedRun};
pub use scenario::{run_scenario, ScenarioReport};
pub use sweep::{cmd_sweep, SweepResult};
