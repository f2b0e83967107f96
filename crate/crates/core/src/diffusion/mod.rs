//! Noise schedules, the training objective, and DDIM sampling.

mod sample;
mod schedule;
mod train;

pub use sample::{cfg_combine, ddim_step, sample, sample_from, timestep_sequence, SampleConfig};
pub use schedule::{
    eps_from_v, eps_from_v_batch, make_schedule, q_sample, q_sample_batch, to_v, v_from_x0,
    v_target, v_target_batch, x0_from_eps, x0_from_v, x0_from_v_batch, DiffusionTarget,
    NoiseSchedule, ScheduleKind,
};
pub use train::{training_step, StepOutput, TrainBatch, TrainStepConfig};

use crate::autodiff::{Tape, Var};
use crate::codec::LatentKind;
use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::transformer::{ConditioningBundle, Denoiser};

/// Anything that maps a noisy latent batch to a v-prediction.
pub trait VModel<T: Real> {
    fn params(&self) -> &ParamStore<T>;

    fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        kind: LatentKind,
        bundle: &ConditioningBundle<T>,
    ) -> Result<Var>;

    fn uses_self_cond(&self) -> bool {
        false
    }

    fn uses_frame_pred(&self) -> bool {
        false
    }

    /// Gradient-free prediction on plain tensors.
    fn predict(
        &self,
        z: &Tensor<T>,
        kind: LatentKind,
        bundle: &ConditioningBundle<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(self.params());
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, zv, kind, bundle)?;
        Ok(tape.value(out).clone())
    }
}

impl<T: Real> VModel<T> for Denoiser<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        kind: LatentKind,
        bundle: &ConditioningBundle<T>,
    ) -> Result<Var> {
        Denoiser::forward(self, tape, z, kind, bundle)
    }

    fn uses_self_cond(&self) -> bool {
        self.config.self_cond
    }

    fn uses_frame_pred(&self) -> bool {
        self.config.frame_pred
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use core::cell::RefCell;

    use alloc::vec::Vec;

    use super::*;

    /// Returns the exact `v` for a single known clean point.
    pub struct OnePointOracle<'a> {
        pub x0: Tensor<f64>,
        pub sched: &'a NoiseSchedule,
        pub empty: ParamStore<f64>,
        pub seen_self_cond: RefCell<Vec<bool>>,
        pub first_gamma: RefCell<Option<f64>>,
    }

    impl<'a> OnePointOracle<'a> {
        pub fn new(x0: Tensor<f64>, sched: &'a NoiseSchedule) -> Self {
            Self {
                x0,
                sched,
                empty: ParamStore::new(),
                seen_self_cond: RefCell::new(Vec::new()),
                first_gamma: RefCell::new(None),
            }
        }
    }

    impl VModel<f64> for OnePointOracle<'_> {
        fn params(&self) -> &ParamStore<f64> {
            &self.empty
        }

        fn forward(
            &self,
            tape: &mut Tape<'_, f64>,
            z: Var,
            _: LatentKind,
            b: &ConditioningBundle<f64>,
        ) -> Result<Var> {
            let t = b.t[0] as usize;
            self.first_gamma
                .borrow_mut()
                .get_or_insert(self.sched.gammas[t]);
            self.seen_self_cond.borrow_mut().push(b.self_cond.is_some());
            let (a, s) = self.sched.coefs(t)?;
            let v = tape.value(z).zip_map(&self.x0, |zt, x| (a * zt - x) / s)?;
            Ok(tape.constant(v))
        }

        fn uses_self_cond(&self) -> bool {
            true
        }
    }
}
