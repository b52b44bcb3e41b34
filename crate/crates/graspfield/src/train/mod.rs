//! Two-stage training: novel-view-synthesis pretraining of the encoder and
//! field core, then transfer learning of the grasp head over a frozen
//! backbone. The joint baseline trains everything at once on the grasp
//! objective with no pretraining.

mod grasp;
mod nvs;

pub use grasp::{grasp_loss, train_grasp, train_joint_baseline, GraspTrainConfig};
pub use nvs::{nvs_step, train_nvs, NvsConfig, NvsStepInput};

use crate::error::Result;
use crate::field::{ModelParams, ParamTensor};
use crate::tensor::{adam_step, AdamHyper, AdamState, Gradients, NodeId, Tape};
use serde::{Deserialize, Serialize};

/// Linear warmup: 0 at step 0, `max` from `warmup_steps` on.
pub fn warmup_lr(max: f64, warmup_steps: usize, step: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps as u64 {
        max
    } else {
        max * step as f64 / warmup_steps as f64
    }
}

/// One log line per optimizer step; serialized as `log.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f32,
    pub lr_encoder: f64,
    pub lr_core: f64,
    pub lr_head: f64,
}

pub fn write_log_csv(path: &std::path::Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut text = String::from("step,loss,lr_encoder,lr_core,lr_head\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.lr_encoder, r.lr_core, r.lr_head
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Adam accumulators for every tensor of one parameter group.
pub(crate) struct GroupState {
    states: Vec<AdamState>,
}

impl GroupState {
    pub fn new(group: &[ParamTensor]) -> Self {
        GroupState { states: group.iter().map(|pt| AdamState::new(pt.data.len())).collect() }
    }

    /// Applies one Adam step to a whole group from tape gradients.
    pub fn apply(
        &mut self,
        group: &mut [ParamTensor],
        nodes: &[NodeId],
        tape: &Tape,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        let hyper = AdamHyper::with_lr(lr as f32);
        for ((pt, &node), state) in group.iter_mut().zip(nodes.iter()).zip(self.states.iter_mut()) {
            let g = grads.or_zeros(tape, node);
            adam_step(&mut pt.data, g.data(), state, &hyper)?;
        }
        Ok(())
    }
}

/// Per-group Adam accumulators for a whole model.
pub struct OptimizerStates {
    pub(crate) encoder: GroupState,
    pub(crate) core: GroupState,
    pub(crate) head: GroupState,
}

impl OptimizerStates {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerStates {
            encoder: GroupState::new(&params.encoder),
            core: GroupState::new(&params.core),
            head: GroupState::new(&params.head),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_hits_the_documented_endpoints() {
        // (0, half, max) at steps 0, 5000, 10000 for the 10000-step default
        assert_eq!(warmup_lr(1e-4, 10000, 0), 0.0);
        assert_eq!(warmup_lr(1e-4, 10000, 5000), 0.5e-4);
        assert_eq!(warmup_lr(1e-4, 10000, 10000), 1e-4);
        assert_eq!(warmup_lr(1e-5, 10000, 5000), 0.5e-5);
        assert_eq!(warmup_lr(1e-5, 10000, 10000), 1e-5);
        // constant after warmup
        assert_eq!(warmup_lr(1e-4, 10000, 50000), 1e-4);
    }
}
