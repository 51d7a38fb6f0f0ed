//! Learned layers built from the [`crate::ops`] kernels.
//!
//! Every layer follows the same protocol:
//!
//! * `forward(&self, x, mode)` returns the output plus a cache and never mutates the layer;
//! * `commit_stats(&mut self, &cache)` folds the batch statistics of a train-mode pass
//!   into the batch-norm running averages;
//! * `backward(&mut self, &cache, grad)` adds parameter gradients into each
//!   [`Param::grad`] and returns the gradient for the layer input.

mod basic;
mod dipc;
mod involution;

pub use basic::{BatchNorm2d, BatchNormLayerCache, Conv2d, ConvBlock, ConvBlockCache};
pub use dipc::{DipcBlock, DipcCache, DipcConfig, Mixer, MixerBranch, MixerCache};
pub use involution::{InvolutionCache, InvolutionConfig, InvolutionLayer};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Shape4, Tensor4};

/// A trainable tensor and its accumulated gradient (same shape).
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor4<T>) -> Self {
        let grad = Tensor4::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub(crate) fn accumulate(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Shared view of a named tensor inside a module.
pub enum Slot<'a, T> {
    Param(&'a Param<T>),
    Buffer(&'a Tensor4<T>),
}

pub enum SlotMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Tensor4<T>),
}

impl<T> Slot<'_, T> {
    pub fn tensor(&self) -> &Tensor4<T> {
        match self {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => b,
        }
    }

    pub fn is_param(&self) -> bool {
        matches!(self, Slot::Param(_))
    }
}

impl<T> SlotMut<'_, T> {
    pub fn tensor_mut(&mut self) -> &mut Tensor4<T> {
        match self {
            SlotMut::Param(p) => &mut p.value,
            SlotMut::Buffer(b) => b,
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Walks named parameters and buffers in a fixed order.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>));

    /// Trainable scalars (batch-norm running statistics excluded).
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| {
            if s.is_param() {
                n += s.tensor().len();
            }
        });
        n
    }

    /// Non-trainable scalars (running statistics).
    fn buffer_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| {
            if !s.is_param() {
                n += s.tensor().len();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, s| {
            if let SlotMut::Param(p) = s {
                p.zero_grad();
            }
        });
    }
}

/// Seeded initializer. Weights are He-uniform on `±sqrt(6 / fan_in)`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn he_uniform<T: Real>(&mut self, shape: Shape4, fan_in: usize) -> Tensor4<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor4::from_fn(shape, |_| T::from_f64(self.rng.random_range(-bound..bound)))
    }
}

/// The discrete choices a forward pass made: ReLU on/off per unit and the
/// winning position of every max-pool window. Two passes with equal patterns
/// ran through the same piecewise-smooth region of the network.
pub trait Switches {
    fn switches(&self, out: &mut Vec<u32>);
}

pub(crate) fn relu_switches<T: Real>(pre: &Tensor4<T>, out: &mut Vec<u32>) {
    out.extend(pre.data().iter().map(|&v| u32::from(v > T::zero())));
}
