use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{q_sample_batch, v_target_batch, x0_from_v_batch, NoiseSchedule};
use super::VModel;
use crate::autodiff::Tape;
use crate::codec::LatentKind;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tasks::build_fp_conditioning_batch;
use crate::tensor::Tensor;
use crate::transformer::ConditioningBundle;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStepConfig {
    /// Probability of the two-pass self-conditioned objective.
    pub p_sc: f64,
    /// Probability of replacing a sample's condition with the null token.
    pub cond_drop_prob: f64,
    /// Probability of conditioning a video sample on its first latent frames.
    pub p_fp: f64,
}

impl Default for TrainStepConfig {
    fn default() -> Self {
        Self {
            p_sc: 0.9,
            cond_drop_prob: 0.1,
            p_fp: 0.0,
        }
    }
}

impl TrainStepConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_sc", self.p_sc),
            ("cond_drop_prob", self.cond_drop_prob),
            ("p_fp", self.p_fp),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A homogeneous batch of `[B, F, H, W, c]` latents.
#[derive(Clone, Debug)]
pub struct TrainBatch<T: Real> {
    pub latents: Tensor<T>,
    pub kind: LatentKind,
    pub normalized: bool,
    pub tokens: Option<Vec<Vec<u32>>>,
    /// Super-resolution conditioning, already augmented.
    pub low_res: Option<Tensor<T>>,
    pub t_sr: Option<Vec<f64>>,
}

impl<T: Real> TrainBatch<T> {
    pub fn new(latents: Tensor<T>, kind: LatentKind) -> Self {
        Self {
            latents,
            kind,
            normalized: true,
            tokens: None,
            low_res: None,
            t_sr: None,
        }
    }

    pub fn batch(&self) -> usize {
        self.latents.shape().first().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput<T: Real> {
    pub loss: f64,
    /// Indexed by parameter id.
    pub grads: Vec<Option<Tensor<T>>>,
    pub forwards: usize,
    pub self_conditioned: bool,
    pub timesteps: Vec<usize>,
}

/// One evaluation of the v-prediction objective with self-conditioning,
/// condition dropout and frame-prediction conditioning.
pub fn training_step<T, M, R>(
    batch: &TrainBatch<T>,
    model: &M,
    sched: &NoiseSchedule,
    cfg: &TrainStepConfig,
    rng: &mut R,
) -> Result<StepOutput<T>>
where
    T: Real,
    M: VModel<T> + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if !batch.normalized {
        return Err(Error::NormalizationState(
            "training expects normalized latents",
        ));
    }
    let b = batch.batch();
    if b == 0 || batch.latents.shape().len() != 5 {
        return Err(Error::Shape(alloc::format!(
            "training batch {:?}",
            batch.latents.shape()
        )));
    }
    let x0 = &batch.latents;
    let ts: Vec<usize> = (0..b)
        .map(|_| rng.random_range(1..=sched.num_steps))
        .collect();
    let eps_data: Vec<T> = (0..x0.numel())
        .map(|_| {
            T::of(<StandardNormal as Distribution<f64>>::sample(
                &StandardNormal,
                rng,
            ))
        })
        .collect();
    let eps = Tensor::from_vec(x0.shape(), eps_data)?;
    let x_t = q_sample_batch(x0, &ts, &eps, sched)?;
    let target = v_target_batch(x0, &eps, &ts, sched)?;

    let mut bundle = ConditioningBundle::new(ts.iter().map(|&t| t as f64).collect());
    bundle.tokens = batch.tokens.clone();
    bundle.cfg_null = (0..b)
        .map(|_| rng.random_bool(cfg.cond_drop_prob))
        .collect();
    bundle.low_res = batch.low_res.clone();
    bundle.t_sr = batch.t_sr.clone();
    if model.uses_frame_pred() {
        let n: Vec<usize> = (0..b)
            .map(|_| {
                if batch.kind == LatentKind::Video && rng.random_bool(cfg.p_fp) {
                    rng.random_range(1..=2)
                } else {
                    0
                }
            })
            .collect();
        bundle.fp = Some(build_fp_conditioning_batch(x0, &n)?);
    }

    let mut forwards = 0;
    let self_conditioned = model.uses_self_cond() && rng.random_bool(cfg.p_sc);
    if self_conditioned {
        let v0 = model.predict(&x_t, batch.kind, &bundle)?;
        forwards += 1;
        bundle.self_cond = Some(x0_from_v_batch(&x_t, &v0, &ts, sched)?);
    }
    let mut tape = Tape::with_params(model.params());
    let zv = tape.constant(x_t);
    let out = model.forward(&mut tape, zv, batch.kind, &bundle)?;
    forwards += 1;
    let tv = tape.constant(target);
    let loss = tape.mse(out, tv);
    let loss_val = tape.value(loss).data()[0].as_f64();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(alloc::format!(
            "loss {loss_val} at timesteps {ts:?}"
        )));
    }
    let grads = tape.backward(loss);
    Ok(StepOutput {
        loss: loss_val,
        grads: tape.param_grads(&grads),
        forwards,
        self_conditioned,
        timesteps: ts,
    })
}

#[cfg(test)]
mod tests {
    use core::cell::{Cell, RefCell};

    use super::*;
    use crate::autodiff::Var;
    use crate::diffusion::schedule::eps_from_v_batch;
    use crate::diffusion::testing::OnePointOracle;
    use crate::params::{ParamId, ParamStore};
    use crate::test_util::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `v = w_z·z + w_sc·self_cond`, recording what it saw.
    struct LinearProbe {
        params: ParamStore<f64>,
        wz: ParamId,
        wsc: ParamId,
        calls: Cell<usize>,
        seen: RefCell<Vec<ConditioningBundle<f64>>>,
        inputs: RefCell<Vec<Tensor<f64>>>,
        frame_pred: bool,
    }

    impl LinearProbe {
        fn new(frame_pred: bool) -> Self {
            let mut params = ParamStore::new();
            let wz = params.add("wz", Tensor::from_vec(&[1], alloc::vec![0.7]).unwrap());
            let wsc = params.add("wsc", Tensor::from_vec(&[1], alloc::vec![-0.4]).unwrap());
            Self {
                params,
                wz,
                wsc,
                calls: Cell::new(0),
                seen: RefCell::new(Vec::new()),
                inputs: RefCell::new(Vec::new()),
                frame_pred,
            }
        }
    }

    impl VModel<f64> for LinearProbe {
        fn params(&self) -> &ParamStore<f64> {
            &self.params
        }

        fn forward(
            &self,
            tape: &mut Tape<'_, f64>,
            z: Var,
            _: LatentKind,
            b: &ConditioningBundle<f64>,
        ) -> Result<Var> {
            self.calls.set(self.calls.get() + 1);
            self.seen.borrow_mut().push(b.clone());
            self.inputs.borrow_mut().push(tape.value(z).clone());
            let wz = tape.param(self.wz);
            let wsc = tape.param(self.wsc);
            let a = tape.mul_bcast(z, wz);
            let sc = tape.constant(
                b.self_cond
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(z))),
            );
            let c = tape.mul_bcast(sc, wsc);
            Ok(tape.add(a, c))
        }

        fn uses_self_cond(&self) -> bool {
            true
        }

        fn uses_frame_pred(&self) -> bool {
            self.frame_pred
        }
    }

    fn batch(seed: u64) -> TrainBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainBatch::new(randn(&[3, 3, 2, 2, 2], &mut rng), LatentKind::Video)
    }

    fn cfg(p_sc: f64) -> TrainStepConfig {
        TrainStepConfig {
            p_sc,
            cond_drop_prob: 0.0,
            p_fp: 0.0,
        }
    }

    #[test]
    fn forward_counts_follow_self_conditioning_probability() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (p, want) in [(0.0, 1), (1.0, 2)] {
            for _ in 0..5 {
                let m = LinearProbe::new(false);
                let out = training_step(&batch(1), &m, &s, &cfg(p), &mut rng).unwrap();
                assert_eq!(out.forwards, want);
                assert_eq!(m.calls.get(), want);
            }
        }
    }

    #[test]
    fn first_pass_contributes_no_gradient() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = LinearProbe::new(false);
        let b = batch(2);
        let out = training_step(&b, &m, &s, &cfg(1.0), &mut rng).unwrap();
        let seen = m.seen.borrow();
        let inputs = m.inputs.borrow();
        assert!(seen[0].self_cond.is_none());
        let x_t = &inputs[1];
        let sc = seen[1].self_cond.clone().unwrap();
        // Recover the noise from x_t and the known clean batch, then the target.
        let v_true = {
            let ts = &out.timesteps;
            let mut v = Vec::new();
            let per = x_t.numel() / 3;
            for (i, &t) in ts.iter().enumerate() {
                let (a, sg) = s.coefs(t).unwrap();
                for j in i * per..(i + 1) * per {
                    let eps = (x_t.data()[j] - a * b.latents.data()[j]) / sg;
                    v.push(a * eps - sg * b.latents.data()[j]);
                }
            }
            v
        };
        let n = x_t.numel() as f64;
        let (wz, wsc) = (0.7, -0.4);
        let (mut gz, mut gsc, mut loss) = (0.0, 0.0, 0.0);
        for j in 0..x_t.numel() {
            let r = wz * x_t.data()[j] + wsc * sc.data()[j] - v_true[j];
            loss += r * r / n;
            gz += 2.0 * r * x_t.data()[j] / n;
            gsc += 2.0 * r * sc.data()[j] / n;
        }
        assert!((out.loss - loss).abs() < 1e-10);
        assert!((out.grads[0].as_ref().unwrap().data()[0] - gz).abs() < 1e-10);
        assert!((out.grads[1].as_ref().unwrap().data()[0] - gsc).abs() < 1e-10);
        // The self-conditioning input is the first pass's clean estimate.
        let v0 = x_t.scale(wz);
        let x0_hat = x0_from_v_batch(x_t, &v0, &out.timesteps, &s).unwrap();
        assert!(x0_hat.max_abs_diff(&sc) < 1e-12);
        let _ = eps_from_v_batch(x_t, &v0, &out.timesteps, &s).unwrap();
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn::<f64, _>(&[1, 3, 2, 2, 2], &mut rng);
        let oracle = OnePointOracle::new(x0.clone(), &s);
        for _ in 0..20 {
            let out = training_step(
                &TrainBatch::new(x0.clone(), LatentKind::Video),
                &oracle,
                &s,
                &cfg(0.0),
                &mut rng,
            )
            .unwrap();
            assert!(out.loss < 1e-18, "{}", out.loss);
        }
    }

    #[test]
    fn mse_gradient_is_two_delta_over_n() {
        let mut tape = Tape::<f64>::new();
        let y = Tensor::from_vec(&[4], alloc::vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let delta = [0.1, -0.3, 0.0, 0.25];
        let out = tape.leaf(
            y.zip_map(&Tensor::from_vec(&[4], delta.to_vec()).unwrap(), |a, b| {
                a + b
            })
            .unwrap(),
        );
        let yv = tape.constant(y.clone());
        let l = tape.mse(out, yv);
        let g = tape.backward(l);
        for (gi, d) in g.get(out).unwrap().iter().zip(delta) {
            assert!((gi - 2.0 * d / 4.0).abs() < 1e-12);
        }
        let mut tape = Tape::<f64>::new();
        let out = tape.leaf(y.clone());
        let yv = tape.constant(y);
        let l = tape.mse(out, yv);
        assert!(tape.backward(l).get(out).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unnormalized_batches_are_rejected() {
        let s = NoiseSchedule::standard(true);
        let mut b = batch(4);
        b.normalized = false;
        let m = LinearProbe::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            training_step(&b, &m, &s, &cfg(0.0), &mut rng),
            Err(Error::NormalizationState(_))
        ));
        let bad = TrainStepConfig {
            p_sc: 1.5,
            ..cfg(0.0)
        };
        assert!(training_step(&batch(4), &m, &s, &bad, &mut rng).is_err());
    }

    #[test]
    fn condition_dropout_and_frame_prediction() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = LinearProbe::new(true);
        let mut b = batch(7);
        b.tokens = Some(alloc::vec![alloc::vec![1]; 3]);
        let c = TrainStepConfig {
            p_sc: 0.0,
            cond_drop_prob: 1.0,
            p_fp: 1.0,
        };
        training_step(&b, &m, &s, &c, &mut rng).unwrap();
        let seen = m.seen.borrow();
        assert_eq!(seen[0].cfg_null, [true; 3]);
        let fp = seen[0].fp.as_ref().unwrap();
        assert_eq!(fp.shape(), &[3, 3, 2, 2, 3]);
        for i in 0..3 {
            let mask: Vec<f64> = (0..3)
                .map(|f| fp.data()[((i * 3 + f) * 4) * 3 + 2])
                .collect();
            assert!(
                mask == [1.0, 0.0, 0.0] || mask == [1.0, 1.0, 0.0],
                "{mask:?}"
            );
        }
        drop(seen);
        let m2 = LinearProbe::new(true);
        let mut img = batch(8);
        img.kind = LatentKind::ImageStack;
        training_step(&img, &m2, &s, &c, &mut rng).unwrap();
        let fp = m2.seen.borrow()[0].fp.clone().unwrap();
        assert!(fp.data().iter().all(|&x| x == 0.0));
    }
}
