//! The domain stream: per-step two-stage training, baselines, checkpoints and
//! per-step evaluation.

pub mod run;
pub mod stage1;
pub mod stage2;
pub mod state;

use serde::Serialize;

pub use run::{
    evaluate_state, load_sources, run_plan, step_dir, DomainSource, PlanOutcome, RunOptions,
    StepResult, AGGREGATE_FILE, CONFIG_FILE, LOG_FILE,
};
pub use stage1::{run_stage1, Stage1Report};
pub use stage2::{prepare_stage2, run_stage2, Stage2Init, Stage2Report};
pub use state::{ModelState, StepHeads};

use crate::config::Method;
use crate::data::BatchSpec;

/// Training ingredients a method switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Recipe {
    /// Stage 1, text-initialized classifier and the projection loss.
    pub text_guided: bool,
    /// Divide the stage-2 plan by the slow factor after the first domain.
    pub slow_paced: bool,
}

impl Recipe {
    pub fn for_method(method: Method) -> Self {
        match method {
            Method::Teata => Self {
                text_guided: true,
                slow_paced: true,
            },
            Method::Sft | Method::Joint => Self {
                text_guided: false,
                slow_paced: false,
            },
        }
    }
}

/// One epoch's summary, as written to the run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub step: usize,
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub head_lr: f64,
}

/// Shrinks P when a domain has fewer identities than a batch asks for.
pub(crate) fn effective_batch(spec: &BatchSpec, identities: usize) -> BatchSpec {
    let p = spec.identities_per_batch().min(identities.max(1));
    BatchSpec {
        batch_size: p * spec.instances_per_identity,
        instances_per_identity: spec.instances_per_identity,
    }
}
