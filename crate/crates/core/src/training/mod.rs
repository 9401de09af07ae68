//! Two-stage training: denoising reconstruction with relevance
//! reprediction, then style fine-tuning through soft generation.

pub mod ablation;
pub mod log;
pub mod stage1;
pub mod stage2;

use serde::{Deserialize, Serialize};

pub use ablation::{evaluate_transfer, run_ablation, AblationOutcome, AblationSetup, Variant};
pub use log::{LogRow, TrainLog};
pub use stage1::{
    build_relevance_cache, ensure_cache, evaluate_stage1, stage1_loss, stage1_step, train_stage1, RelevanceCache, Stage1Config,
    Stage1Eval, Stage1Report, Stage1Terms,
};
pub use stage2::{
    epoch_batches, stage2_loss, stage2_step, step_noise, train_stage2, Stage2Config, Stage2Context, Stage2Report,
    Stage2Step, Stage2Terms, Switches,
};

/// Named loss terms of one step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sr: f64,
    pub l_xl: f64,
    pub l_st: f64,
    pub l_yl: f64,
    pub l_cp: f64,
    pub l_lm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn stage1_total(&self) -> f64 {
        self.l_sr + self.l_xl
    }

    pub fn stage2_total(&self, alpha: f64, beta: f64, gamma: f64) -> f64 {
        self.l_st + alpha * self.l_yl + beta * self.l_cp + gamma * self.l_lm
    }
}
