//! Differentiable operators: each forward has a matching explicit backward.
//!
//! All kernels accumulate every output element in a fixed loop order, so results
//! are bit-identical regardless of how many threads run them.

mod batchnorm;
mod conv;
mod eltwise;
mod involution;
mod pool;

pub use batchnorm::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_infer, batchnorm2d_train, BatchNormCache,
    BatchNormConfig, RunningStats,
};
pub use conv::{conv2d, conv2d_backward, ConvGeometry, ConvGrads, ConvSpec};
pub use eltwise::{
    add, add_backward, eltwise, eltwise_backward, mul, mul_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, sigmoid_scalar, EltwiseKind,
};
pub use involution::{
    involution2d, involution2d_backward, involution_output_size, InvolutionGeometry,
};
pub use pool::{
    avgpool2d, avgpool2d_backward, maxpool2d, maxpool2d_backward, upsample2x, upsample2x_backward,
    MaxPoolIndices,
};

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use crate::tensor::Real;

/// Identifies a backward kernel, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    Involution2d,
    MaxPool2d,
    AvgPool2d,
    Upsample2x,
    BatchNorm2d,
    Relu,
    Sigmoid,
    Add,
    Mul,
    Tversky,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::Conv2d,
        OpKind::Involution2d,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::Upsample2x,
        OpKind::BatchNorm2d,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Tversky,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Involution2d => "involution2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::AvgPool2d => "avgpool2d",
            OpKind::Upsample2x => "upsample2x",
            OpKind::BatchNorm2d => "batchnorm2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Tversky => "tversky",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op '{s}'"))
    }
}

thread_local! {
    static FLIPPED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Fault injection for the gradient-check suite: while `f` runs on this thread,
/// the backward kernel of `op` returns negated gradients.
///
/// The flag is read on the calling thread at the entry of each backward.
pub fn with_flipped_backward<R>(op: Option<OpKind>, f: impl FnOnce() -> R) -> R {
    let prev = FLIPPED.with(|c| c.replace(op));
    let out = f();
    FLIPPED.with(|c| c.set(prev));
    out
}

#[inline]
pub(crate) fn backward_sign<T: Real>(op: OpKind) -> T {
    if FLIPPED.with(|c| c.get()) == Some(op) {
        -T::one()
    } else {
        T::one()
    }
}

#[inline]
pub(crate) fn scale_in_place<T: Real>(data: &mut [T], s: T) {
    if s != T::one() {
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Half-open range of output indices `i < out_len` for which
/// `i * stride + offset` lands inside `0..in_len`.
#[inline]
pub(crate) fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let room = in_len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = (hi as usize).min(out_len);
    let lo = lo as usize;
    (lo.min(hi), hi)
}
