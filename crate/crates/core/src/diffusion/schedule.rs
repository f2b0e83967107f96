//! Discrete noise schedules and the v-parameterisation algebra.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
        }
    }
}

/// Cumulative signal level `γ(t)` for `t = 0..=num_steps`; `t = 0` is clean
/// data.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zero_terminal_snr: bool,
    /// `betas[0] = 0`; `betas[t]` is the noise added by step `t`.
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub sqrt_gamma: Vec<f64>,
    pub sqrt_one_minus_gamma: Vec<f64>,
}

pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    zero_terminal_snr: bool,
) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(alloc::format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(alloc::format!(
            "invalid beta range {beta_start} .. {beta_end}"
        )));
    }
    let mut sqrt_g = Vec::with_capacity(steps + 1);
    sqrt_g.push(1.0);
    let mut g = 1.0;
    for i in 0..steps {
        let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
        g *= 1.0 - beta;
        sqrt_g.push(Float::sqrt(g));
    }
    if zero_terminal_snr {
        let (first, last) = (sqrt_g[1], sqrt_g[steps]);
        for s in &mut sqrt_g[1..] {
            *s = (*s - last) * first / (first - last);
        }
        sqrt_g[steps] = 0.0;
    }
    let gammas: Vec<f64> = sqrt_g.iter().map(|s| s * s).collect();
    let mut betas = alloc::vec![0.0];
    betas.extend((1..=steps).map(|t| 1.0 - gammas[t] / gammas[t - 1]));
    Ok(NoiseSchedule {
        kind,
        num_steps: steps,
        beta_start,
        beta_end,
        zero_terminal_snr,
        betas,
        sqrt_one_minus_gamma: gammas.iter().map(|g| Float::sqrt(1.0 - g)).collect(),
        sqrt_gamma: sqrt_g,
        gammas,
    })
}

impl NoiseSchedule {
    /// Linear 1000-step schedule from 1e-4 to 0.02.
    pub fn standard(zero_terminal_snr: bool) -> Self {
        make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02, zero_terminal_snr)
            .expect("valid constants")
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.num_steps {
            return Err(Error::Timestep {
                t,
                steps: self.num_steps,
            });
        }
        Ok(())
    }

    pub fn gamma(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.gammas[t])
    }

    /// `(√γ(t), √(1-γ(t)))`
    pub fn coefs(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        Ok((self.sqrt_gamma[t], self.sqrt_one_minus_gamma[t]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DiffusionTarget {
    #[default]
    V,
    Eps,
    X0,
}

fn combine<T: Real>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>> {
    let (ca, cb) = (T::of(ca), T::of(cb));
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// Per-sample coefficients over the leading axis of `a`/`b`.
fn combine_batch<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ts: &[usize],
    coef: impl Fn(usize) -> Result<(f64, f64)>,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(alloc::format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if ts.is_empty() || !a.numel().is_multiple_of(ts.len()) || a.shape().first() != Some(&ts.len())
    {
        return Err(Error::Shape(alloc::format!(
            "{} timesteps for leading axis of {:?}",
            ts.len(),
            a.shape()
        )));
    }
    let per = a.numel() / ts.len();
    let mut out = Vec::with_capacity(a.numel());
    for (i, &t) in ts.iter().enumerate() {
        let (ca, cb) = coef(t)?;
        let (ca, cb) = (T::of(ca), T::of(cb));
        let r = i * per..(i + 1) * per;
        out.extend(
            a.data()[r.clone()]
                .iter()
                .zip(&b.data()[r])
                .map(|(&x, &y)| ca * x + cb * y),
        );
    }
    Tensor::from_vec(a.shape(), out)
}

/// `x_t = √γ·x0 + √(1-γ)·ε`
pub fn q_sample<T: Real>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, b) = s.coefs(t)?;
    combine(x0, a, eps, b)
}

/// `v = √γ·ε - √(1-γ)·x0`
pub fn v_target<T: Real>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, b) = s.coefs(t)?;
    combine(eps, a, x0, -b)
}

/// `x0 = √γ·x_t - √(1-γ)·v`
pub fn x0_from_v<T: Real>(
    x_t: &Tensor<T>,
    v: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, b) = s.coefs(t)?;
    combine(x_t, a, v, -b)
}

/// `ε = √(1-γ)·x_t + √γ·v`
pub fn eps_from_v<T: Real>(
    x_t: &Tensor<T>,
    v: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, b) = s.coefs(t)?;
    combine(x_t, b, v, a)
}

/// `v` implied by a clean-data estimate; undefined where `γ = 1`.
pub fn v_from_x0<T: Real>(
    x_t: &Tensor<T>,
    x0: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, b) = s.coefs(t)?;
    if b == 0.0 {
        return Err(Error::Timestep {
            t,
            steps: s.num_steps,
        });
    }
    combine(x_t, a / b, x0, -1.0 / b)
}

/// `x0` from a noise estimate; undefined where `γ = 0`.
pub fn x0_from_eps<T: Real>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, b) = s.coefs(t)?;
    if a == 0.0 {
        return Err(Error::Timestep {
            t,
            steps: s.num_steps,
        });
    }
    combine(x_t, 1.0 / a, eps, -b / a)
}

pub fn q_sample_batch<T: Real>(
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    combine_batch(x0, eps, ts, |t| s.coefs(t))
}

pub fn v_target_batch<T: Real>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    ts: &[usize],
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    combine_batch(eps, x0, ts, |t| s.coefs(t).map(|(a, b)| (a, -b)))
}

pub fn x0_from_v_batch<T: Real>(
    x_t: &Tensor<T>,
    v: &Tensor<T>,
    ts: &[usize],
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    combine_batch(x_t, v, ts, |t| s.coefs(t).map(|(a, b)| (a, -b)))
}

pub fn eps_from_v_batch<T: Real>(
    x_t: &Tensor<T>,
    v: &Tensor<T>,
    ts: &[usize],
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    combine_batch(x_t, v, ts, |t| s.coefs(t).map(|(a, b)| (b, a)))
}

/// Converts a model output of any target kind to `v`.
pub fn to_v<T: Real>(
    kind: DiffusionTarget,
    x_t: &Tensor<T>,
    pred: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    match kind {
        DiffusionTarget::V => Ok(pred.clone()),
        DiffusionTarget::X0 => v_from_x0(x_t, pred, t, s),
        DiffusionTarget::Eps => {
            let x0 = x0_from_eps(x_t, pred, t, s)?;
            v_target(&x0, pred, t, s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::randn;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_schedule_endpoints() {
        let plain = NoiseSchedule::standard(false);
        let oracle: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert!((plain.gammas[1000] - oracle).abs() < 1e-15);
        assert!((plain.gammas[1000] - 4.04e-5).abs() < 1e-6);
        assert_eq!(plain.gammas[0], 1.0);
        let z = NoiseSchedule::standard(true);
        assert_eq!(z.gammas[1000], 0.0);
        assert!((z.sqrt_gamma[1] - plain.sqrt_gamma[1]).abs() < 1e-12);
        assert_eq!(z.betas[1000], 1.0);
        assert!(plain.gamma(1001).is_err());
    }

    #[test]
    fn invalid_ranges() {
        for (s, a, b) in [
            (1, 1e-4, 0.02),
            (10, 0.0, 0.02),
            (10, 0.03, 0.02),
            (10, 1e-4, 1.0),
        ] {
            assert!(make_schedule(ScheduleKind::Linear, s, a, b, false).is_err());
        }
    }

    #[test]
    fn q_sample_special_cases() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = randn::<f64, _>(&[3, 4], &mut rng);
        let eps = randn::<f64, _>(&[3, 4], &mut rng);
        assert_eq!(q_sample(&x0, 0, &eps, &s).unwrap(), x0);
        assert_eq!(q_sample(&x0, 1000, &eps, &s).unwrap(), eps);
        assert_eq!(v_target(&x0, &eps, 0, &s).unwrap(), eps);
        assert_eq!(v_target(&x0, &eps, 1000, &s).unwrap(), x0.scale(-1.0));
        let mut q = s.clone();
        q.sqrt_gamma[5] = 0.5;
        q.sqrt_one_minus_gamma[5] = 0.75f64.sqrt();
        let xt = q_sample(&x0, 5, &eps, &q).unwrap();
        let want = x0
            .zip_map(&eps, |a, b| 0.5 * a + 0.75f64.sqrt() * b)
            .unwrap();
        assert!(xt.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn target_conversions_agree() {
        let s = NoiseSchedule::standard(false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = randn::<f64, _>(&[8], &mut rng);
        let eps = randn::<f64, _>(&[8], &mut rng);
        let xt = q_sample(&x0, 400, &eps, &s).unwrap();
        let v = v_target(&x0, &eps, 400, &s).unwrap();
        assert!(
            to_v(DiffusionTarget::X0, &xt, &x0, 400, &s)
                .unwrap()
                .max_abs_diff(&v)
                < 1e-12
        );
        assert!(
            to_v(DiffusionTarget::Eps, &xt, &eps, 400, &s)
                .unwrap()
                .max_abs_diff(&v)
                < 1e-12
        );
    }

    #[test]
    fn batch_forms_use_per_sample_steps() {
        let s = NoiseSchedule::standard(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn::<f32, _>(&[3, 2, 2], &mut rng);
        let eps = randn::<f32, _>(&[3, 2, 2], &mut rng);
        let ts = [0, 500, 1000];
        let xt = q_sample_batch(&x0, &ts, &eps, &s).unwrap();
        let v = v_target_batch(&x0, &eps, &ts, &s).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let a = q_sample(
                &x0.slice_outer(i, i + 1).unwrap(),
                t,
                &eps.slice_outer(i, i + 1).unwrap(),
                &s,
            )
            .unwrap();
            assert_eq!(a.data(), xt.slice_outer(i, i + 1).unwrap().data());
        }
        assert!(x0_from_v_batch(&xt, &v, &ts, &s).unwrap().max_abs_diff(&x0) < 1e-5);
        assert!(
            eps_from_v_batch(&xt, &v, &ts, &s)
                .unwrap()
                .max_abs_diff(&eps)
                < 1e-5
        );
        assert!(q_sample_batch(&x0, &[1, 2], &eps, &s).is_err());
    }

    proptest! {
        #[test]
        fn schedules_are_monotone(steps in 2usize..400, a in 1e-5f64..0.05, span in 0.0f64..0.2, z in any::<bool>()) {
            let s = make_schedule(ScheduleKind::Linear, steps, a, (a + span).min(0.5), z).unwrap();
            prop_assert_eq!(s.gammas[0], 1.0);
            for t in 1..=steps {
                prop_assert!(s.gammas[t] <= s.gammas[t - 1]);
            }
            if z {
                prop_assert_eq!(s.gammas[steps], 0.0);
            } else {
                prop_assert!(s.gammas[steps] > 0.0);
            }
        }

        #[test]
        fn v_round_trip(seed in any::<u64>(), t in 0usize..=1000, z in any::<bool>()) {
            let s = NoiseSchedule::standard(z);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = randn::<f32, _>(&[16], &mut rng);
            let eps = randn::<f32, _>(&[16], &mut rng);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let v = v_target(&x0, &eps, t, &s).unwrap();
            prop_assert!(x0_from_v(&xt, &v, t, &s).unwrap().max_abs_diff(&x0) < 1e-5);
            prop_assert!(eps_from_v(&xt, &v, t, &s).unwrap().max_abs_diff(&eps) < 1e-5);
        }
    }
}
