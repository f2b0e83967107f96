//! Decoupled-weight-decay Adam with a warmup-cosine learning rate.

use anyhow::{bail, Result};
use lvd_core::{ParamStore, Tensor};

use crate::config::OptimConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// Linear warmup over `warmup_frac · total` steps, then cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warm = ((total as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let p = ((step - warm) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, cfg: &OptimConfig) -> Self {
        let zeros = |p: &ParamStore<f32>| p.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Applies one update; parameters without a gradient are left alone.
    /// Decay applies to matrices and higher-rank tensors only.
    pub fn update(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &[Option<Tensor<f32>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            bail!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            );
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                bail!(
                    "gradient shape {:?} for parameter of shape {:?}",
                    g.shape(),
                    p.shape()
                );
            }
            let decay = if p.shape().len() >= 2 {
                (lr * self.weight_decay) as f32
            } else {
                0.0
            };
            let step_size = (lr / bc1) as f32;
            let bc2 = bc2 as f32;
            let eps = self.eps as f32;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= decay * *w;
                *w -= step_size * *m / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
pub fn ema_update(ema: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) {
    let d = decay as f32;
    let ids: Vec<_> = ema.ids().collect();
    for id in ids {
        let src = params.get(id).data().to_vec();
        for (e, s) in ema.get_mut(id).data_mut().iter_mut().zip(src) {
            *e = d * *e + (1.0 - d) * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimConfig {
        OptimConfig {
            steps: 100,
            batch: 1,
            lr: 0.1,
            warmup_frac: 0.05,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(1.0, 0, 100, 0.05) - 0.2).abs() < 1e-12);
        assert!((cosine_lr(1.0, 4, 100, 0.05) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 5, 100, 0.05) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 99, 100, 0.05) < 1e-3);
        let mid = cosine_lr(1.0, 5 + 95 / 2, 100, 0.05);
        assert!((mid - 0.5).abs() < 0.02, "{mid}");
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(&[2], vec![1.0f32, -1.0]).unwrap());
        let mut opt = AdamW::new(&p, &cfg());
        let g = Tensor::from_vec(&[2], vec![3.0f32, -0.01]).unwrap();
        opt.update(&mut p, &[Some(g)], 0.1).unwrap();
        let w = p.iter().next().unwrap().1.data().to_vec();
        assert!(
            (w[0] - 0.9).abs() < 1e-5 && (w[1] + 0.9).abs() < 1e-4,
            "{w:?}"
        );
    }

    #[test]
    fn minimizes_a_quadratic_and_decays_matrices_only() {
        let mut p = ParamStore::new();
        p.add(
            "w",
            Tensor::from_vec(&[3], vec![2.0f32, -3.0, 0.5]).unwrap(),
        );
        let mut opt = AdamW::new(&p, &cfg());
        for s in 0..300 {
            let g = p.iter().next().unwrap().1.scale(2.0);
            opt.update(&mut p, &[Some(g)], cosine_lr(0.1, s, 300, 0.05))
                .unwrap();
        }
        assert!(p
            .iter()
            .next()
            .unwrap()
            .1
            .data()
            .iter()
            .all(|x| x.abs() < 1e-2));

        let mut q = ParamStore::new();
        q.add("m", Tensor::full(&[2, 2], 1.0f32));
        q.add("b", Tensor::full(&[2], 1.0f32));
        let mut opt = AdamW::new(
            &q,
            &OptimConfig {
                weight_decay: 0.5,
                ..cfg()
            },
        );
        let zero = |s: &[usize]| Some(Tensor::zeros(s));
        opt.update(&mut q, &[zero(&[2, 2]), zero(&[2])], 0.1)
            .unwrap();
        let vals: Vec<f32> = q.iter().map(|(_, t)| t.data()[0]).collect();
        assert!((vals[0] - 0.95).abs() < 1e-6 && vals[1] == 1.0, "{vals:?}");
    }
}
