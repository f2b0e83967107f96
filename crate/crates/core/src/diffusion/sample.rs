use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{eps_from_v, x0_from_v, NoiseSchedule};
use super::VModel;
use crate::codec::LatentKind;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::transformer::ConditioningBundle;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    /// 1 uses the conditional prediction only.
    pub guidance: f64,
    /// Feed the previous step's clean estimate back as self-conditioning.
    pub self_cond: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 1.0,
            self_cond: true,
            seed: 0,
        }
    }
}

/// `n + 1` timesteps from `total` down to 0 at a uniform stride.
pub fn timestep_sequence(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::Config(alloc::format!(
            "{n} sampling steps for a {total}-step schedule"
        )));
    }
    Ok((0..=n).rev().map(|k| (k * total + n / 2) / n).collect())
}

/// Deterministic DDIM update from `t` to `t_prev < t`.
pub fn ddim_step<T: Real>(
    x_t: &Tensor<T>,
    v: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::Config(alloc::format!(
            "ddim step from {t} to {t_prev} does not descend"
        )));
    }
    s.check(t)?;
    let x0 = x0_from_v(x_t, v, t, s)?;
    let eps = eps_from_v(x_t, v, t, s)?;
    let (a, b) = s.coefs(t_prev)?;
    let (a, b) = (T::of(a), T::of(b));
    x0.zip_map(&eps, |x, e| a * x + b * e)
}

/// `v_u + w·(v_c - v_u)`
pub fn cfg_combine<T: Real>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    let w = T::of(w);
    v_uncond.zip_map(v_cond, |u, c| u + w * (c - u))
}

/// Samples from standard normal noise of `shape` seeded by `cfg.seed`.
pub fn sample<T: Real, M: VModel<T> + ?Sized>(
    model: &M,
    shape: &[usize],
    kind: LatentKind,
    bundle: &ConditioningBundle<T>,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            T::of(<StandardNormal as Distribution<f64>>::sample(
                &StandardNormal,
                &mut rng,
            ))
        })
        .collect();
    let x = Tensor::from_vec(shape, data)?;
    sample_from(model, x, kind, bundle, sched, cfg)
}

/// Runs the DDIM chain from the given terminal-step latent `x`.
pub fn sample_from<T: Real, M: VModel<T> + ?Sized>(
    model: &M,
    mut x: Tensor<T>,
    kind: LatentKind,
    bundle: &ConditioningBundle<T>,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor<T>> {
    let b = x.shape().first().copied().unwrap_or(0);
    if bundle.batch() != b {
        return Err(Error::Shape(alloc::format!(
            "bundle for batch {}, latents {:?}",
            bundle.batch(),
            x.shape()
        )));
    }
    let ts = timestep_sequence(sched.num_steps, cfg.steps)?;
    let self_cond = cfg.self_cond && model.uses_self_cond();
    let mut cond = bundle.clone();
    let mut uncond = bundle.nulled();
    uncond.fp = None;
    let mut x0_prev: Option<Tensor<T>> = None;
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        cond.t = alloc::vec![t as f64; b];
        uncond.t = cond.t.clone();
        if self_cond {
            cond.self_cond = x0_prev.clone();
            uncond.self_cond = x0_prev.clone();
        }
        let vc = model.predict(&x, kind, &cond)?;
        let v = if cfg.guidance == 1.0 {
            vc
        } else {
            let vu = model.predict(&x, kind, &uncond)?;
            cfg_combine(&vc, &vu, cfg.guidance)?
        };
        if self_cond {
            x0_prev = Some(x0_from_v(&x, &v, t, sched)?);
        }
        x = ddim_step(&x, &v, t, t_prev, sched)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{q_sample, v_target};
    use crate::diffusion::testing::OnePointOracle;
    use crate::test_util::randn;

    #[test]
    fn timestep_sequences() {
        assert_eq!(timestep_sequence(1000, 2).unwrap(), [1000, 500, 0]);
        let s = timestep_sequence(1000, 50).unwrap();
        assert_eq!((s.len(), s[0], s[50], s[1]), (51, 1000, 0, 980));
        assert_eq!(timestep_sequence(1000, 1000).unwrap().len(), 1001);
        assert!(timestep_sequence(1000, 1001).is_err());
        assert!(timestep_sequence(1000, 0).is_err());
    }

    #[test]
    fn ddim_step_cases() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = randn::<f64, _>(&[10], &mut rng);
        let eps = randn::<f64, _>(&[10], &mut rng);
        let xt = q_sample(&x0, 700, &eps, &s).unwrap();
        let v = v_target(&x0, &eps, 700, &s).unwrap();
        assert!(ddim_step(&xt, &v, 700, 0, &s).unwrap().max_abs_diff(&x0) < 1e-12);
        for tp in [1, 250, 699] {
            let want = q_sample(&x0, tp, &eps, &s).unwrap();
            assert!(ddim_step(&xt, &v, 700, tp, &s).unwrap().max_abs_diff(&want) < 1e-5);
        }
        assert!(ddim_step(&xt, &v, 700, 700, &s).is_err());
        assert!(ddim_step(&xt, &v, 700, 900, &s).is_err());
    }

    #[test]
    fn guidance_combination() {
        let a = Tensor::from_vec(&[1], alloc::vec![1.0f64]).unwrap();
        let z = Tensor::from_vec(&[1], alloc::vec![0.0f64]).unwrap();
        assert_eq!(cfg_combine(&a, &z, 1.0).unwrap(), a);
        assert_eq!(cfg_combine(&a, &z, 0.0).unwrap(), z);
        assert_eq!(cfg_combine(&a, &z, 2.0).unwrap().data(), &[2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = randn::<f64, _>(&[16], &mut rng);
        for w in [0.0, 0.5, 3.0, -1.0] {
            assert_eq!(cfg_combine(&r, &r, w).unwrap(), r);
        }
    }

    #[test]
    fn oracle_sampling_recovers_the_point() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn::<f64, _>(&[1, 2, 2, 2, 3], &mut rng);
        for n in [2, 10, 50, 1000] {
            let m = OnePointOracle::new(x0.clone(), &s);
            let cfg = SampleConfig {
                steps: n,
                seed: 9,
                ..Default::default()
            };
            let out = sample(
                &m,
                x0.shape(),
                LatentKind::Video,
                &ConditioningBundle::new(alloc::vec![0.0]),
                &s,
                &cfg,
            )
            .unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-3, "{n} steps");
            assert_eq!(*m.first_gamma.borrow(), Some(0.0));
            let seen = m.seen_self_cond.borrow();
            assert!(!seen[0] && seen[1..].iter().all(|&x| x));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn::<f64, _>(&[1, 2, 2, 2, 3], &mut rng);
        let m = OnePointOracle::new(x0.clone(), &s);
        let b = ConditioningBundle::new(alloc::vec![0.0]);
        let cfg = SampleConfig {
            steps: 5,
            self_cond: false,
            seed: 4,
            ..Default::default()
        };
        let a = sample(&m, x0.shape(), LatentKind::Video, &b, &s, &cfg).unwrap();
        let c = sample(&m, x0.shape(), LatentKind::Video, &b, &s, &cfg).unwrap();
        assert_eq!(a, c);
        assert!(m.seen_self_cond.borrow().iter().all(|&x| !x));
    }

    #[test]
    fn unit_guidance_skips_the_unconditional_pass() {
        let s = NoiseSchedule::standard(true);
        let x0 = Tensor::<f64>::zeros(&[1, 1, 1, 1, 2]);
        for (w, calls) in [(1.0, 4), (2.0, 8)] {
            let m = OnePointOracle::new(x0.clone(), &s);
            let cfg = SampleConfig {
                steps: 4,
                guidance: w,
                ..Default::default()
            };
            sample(
                &m,
                x0.shape(),
                LatentKind::Video,
                &ConditioningBundle::new(alloc::vec![0.0]),
                &s,
                &cfg,
            )
            .unwrap();
            assert_eq!(m.seen_self_cond.borrow().len(), calls);
        }
    }
}
