//! Adaptive layer-norm modulation, either one MLP per block or a shared MLP
//! with per-block low-rank corrections.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::params::ParamStore;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaLnMode {
    /// An independent `d → 6d` map per block.
    Separate,
    /// One shared `d → 6d` map plus a bias-free rank-`rank` correction for
    /// every block after the first. `rank == 0` is pure sharing.
    Lora { rank: usize },
}

/// Six `[B, d]` modulation vectors for one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modulation {
    pub gamma1: Var,
    pub beta1: Var,
    pub alpha1: Var,
    pub gamma2: Var,
    pub beta2: Var,
    pub alpha2: Var,
}

#[derive(Clone, Debug)]
pub struct LoraPair {
    /// `d → r`
    pub down: Linear,
    /// `r → 6d`
    pub up: Linear,
}

#[derive(Clone, Debug)]
pub struct AdaLnLora {
    pub mode: AdaLnMode,
    pub d: usize,
    pub num_layers: usize,
    /// The shared map (LoRA) or one map per layer (separate).
    pub shared: Vec<Linear>,
    /// `lora[i]` corrects layer `i + 2`.
    pub lora: Vec<LoraPair>,
}

impl AdaLnLora {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        num_layers: usize,
        mode: AdaLnMode,
        rng: &mut R,
    ) -> Self {
        let map = |store: &mut ParamStore<T>, rng: &mut R, n: &str| {
            Linear::new(store, n, d, 6 * d, true, Init::Zeros, rng)
        };
        let (shared, lora) = match mode {
            AdaLnMode::Separate => (
                (0..num_layers)
                    .map(|i| map(store, rng, &alloc::format!("{name}.layer{}", i + 1)))
                    .collect(),
                Vec::new(),
            ),
            AdaLnMode::Lora { rank } => {
                let shared = alloc::vec![map(store, rng, &alloc::format!("{name}.shared"))];
                let lora = if rank == 0 {
                    Vec::new()
                } else {
                    (2..=num_layers)
                        .map(|i| LoraPair {
                            down: Linear::new(
                                store,
                                &alloc::format!("{name}.lora{i}.down"),
                                d,
                                rank,
                                false,
                                Init::FanIn,
                                rng,
                            ),
                            up: Linear::new(
                                store,
                                &alloc::format!("{name}.lora{i}.up"),
                                rank,
                                6 * d,
                                false,
                                Init::Zeros,
                                rng,
                            ),
                        })
                        .collect()
                };
                (shared, lora)
            }
        };
        Self {
            mode,
            d,
            num_layers,
            shared,
            lora,
        }
    }

    /// Raw `[B, 6d]` modulation `A^layer` for conditioning `c + t` (`[B, d]`),
    /// `layer` counted from 1.
    pub fn raw<T: Real>(&self, tape: &mut Tape<'_, T>, cond: Var, layer: usize) -> Result<Var> {
        if layer == 0 || layer > self.num_layers {
            return Err(Error::Config(alloc::format!(
                "adaptive norm layer {layer} outside 1..={}",
                self.num_layers
            )));
        }
        let act = tape.silu(cond);
        match self.mode {
            AdaLnMode::Separate => Ok(self.shared[layer - 1].forward(tape, act)),
            AdaLnMode::Lora { .. } => {
                let base = self.shared[0].forward(tape, act);
                if layer == 1 || self.lora.is_empty() {
                    return Ok(base);
                }
                let pair = &self.lora[layer - 2];
                let low = pair.down.forward(tape, cond);
                let delta = pair.up.forward(tape, low);
                Ok(tape.add(base, delta))
            }
        }
    }

    /// `A^layer` split as `(γ1, γ2, β1, β2, α1, α2)`.
    pub fn params<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cond: Var,
        layer: usize,
    ) -> Result<Modulation> {
        let a = self.raw(tape, cond, layer)?;
        let b = tape.shape(a)[0];
        let d = self.d;
        let parts: Vec<Var> = (0..6)
            .map(|j| {
                let idx: Vec<u32> = (0..b)
                    .flat_map(|r| (r * 6 * d + j * d..r * 6 * d + (j + 1) * d).map(|x| x as u32))
                    .collect();
                tape.gather(a, idx.into(), &[b, d])
            })
            .collect();
        let [gamma1, gamma2, beta1, beta2, alpha1, alpha2] =
            [parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]];
        Ok(Modulation {
            gamma1,
            beta1,
            alpha1,
            gamma2,
            beta2,
            alpha2,
        })
    }

    pub fn num_params(&self) -> usize {
        self.shared.iter().map(Linear::num_params).sum::<usize>()
            + self
                .lora
                .iter()
                .map(|p| p.down.num_params() + p.up.num_params())
                .sum::<usize>()
    }
}

/// Parameter count of the modulation maps alone, from the configuration.
pub fn adaln_param_count(d: usize, num_layers: usize, mode: AdaLnMode) -> usize {
    let map = 6 * d * d + 6 * d;
    match mode {
        AdaLnMode::Separate => num_layers * map,
        AdaLnMode::Lora { rank } => map + num_layers.saturating_sub(1) * (d * rank + rank * 6 * d),
    }
}
