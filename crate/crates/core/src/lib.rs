#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod codec;
pub mod conv;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod layout;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod test_util {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::{ParamStore, Real, Tensor};

    pub fn randn<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                T::of(<StandardNormal as Distribution<f64>>::sample(
                    &StandardNormal,
                    rng,
                ))
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Overwrites every parameter with `N(0, std²)` noise.
    pub fn randomize<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, std: f64, rng: &mut R) {
        for id in store.ids().collect::<alloc::vec::Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store
                .set(id, randn::<T, R>(&shape, rng).scale(T::of(std)))
                .unwrap();
        }
    }
}
