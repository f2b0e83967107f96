//! Small parameterised layers shared by the codec and the denoiser.

use alloc::string::String;
use num_traits::Float;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Normal with std `1/sqrt(fan_in)`.
    FanIn,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init_param(
            store,
            alloc::format!("{name}.w"),
            &[d_in, d_out],
            init,
            d_in,
            rng,
        );
        let b = bias.then(|| store.zeros(alloc::format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bcast(y, b)
            }
            None => y,
        }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

pub(crate) fn init_param<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: String,
    shape: &[usize],
    init: Init,
    fan_in: usize,
    rng: &mut R,
) -> ParamId {
    match init {
        Init::Zeros => store.zeros(name, shape),
        Init::Normal(std) => store.normal(name, shape, std, rng),
        Init::FanIn => store.normal(name, shape, 1.0 / Float::sqrt(fan_in.max(1) as f64), rng),
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(
                store,
                &alloc::format!("{name}.fc1"),
                d,
                hidden,
                true,
                Init::FanIn,
                rng,
            ),
            fc2: Linear::new(
                store,
                &alloc::format!("{name}.fc2"),
                hidden,
                d,
                true,
                Init::FanIn,
                rng,
            ),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(tape, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}
