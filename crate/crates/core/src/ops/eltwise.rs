use super::{backward_sign, OpKind};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EltwiseKind {
    Relu,
    Sigmoid,
    Add,
    Mul,
}

impl EltwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, EltwiseKind::Add | EltwiseKind::Mul)
    }
}

/// Logistic function. Saturated results are rounded into the open interval
/// `(0, 1)` (the nearest representable values) rather than to exactly 0 or 1.
#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    let y = T::one() / (T::one() + (-v).exp());
    let below_one = T::one() - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(below_one)
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

fn zip_with<T: Real>(
    op: &'static str,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor4<T>> {
    b.shape().expect(op, a.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::from_vec(a.shape(), data)
}

pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

/// Gradient of `relu` given the forward input.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = backward_sign::<T>(OpKind::Relu);
    zip_with("relu_backward", x, grad, |x, g| if x > T::zero() { g * s } else { T::zero() })
}

/// Gradient of `sigmoid` given the forward output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = backward_sign::<T>(OpKind::Sigmoid);
    zip_with("sigmoid_backward", y, grad, |y, g| g * y * (T::one() - y) * s)
}

pub fn add_backward<T: Real>(grad: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let s = backward_sign::<T>(OpKind::Add);
    let g = grad.map(|v| v * s);
    (g.clone(), g)
}

pub fn mul_backward<T: Real>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    grad: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let s = backward_sign::<T>(OpKind::Mul);
    let ga = zip_with("mul_backward", grad, b, |g, y| g * y * s)?;
    let gb = zip_with("mul_backward", grad, a, |g, x| g * x * s)?;
    Ok((ga, gb))
}

/// Dispatching form over the four pointwise kinds.
pub fn eltwise<T: Real>(kind: EltwiseKind, a: &Tensor4<T>, b: Option<&Tensor4<T>>) -> Result<Tensor4<T>> {
    let need = || Error::arg("eltwise", format!("{kind:?} needs a second operand"));
    match kind {
        EltwiseKind::Relu => Ok(relu(a)),
        EltwiseKind::Sigmoid => Ok(sigmoid(a)),
        EltwiseKind::Add => add(a, b.ok_or_else(need)?),
        EltwiseKind::Mul => mul(a, b.ok_or_else(need)?),
    }
}

/// Gradients for [`eltwise`]: `out` is the forward result (used by sigmoid).
pub fn eltwise_backward<T: Real>(
    kind: EltwiseKind,
    a: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    out: &Tensor4<T>,
    grad: &Tensor4<T>,
) -> Result<(Tensor4<T>, Option<Tensor4<T>>)> {
    match kind {
        EltwiseKind::Relu => Ok((relu_backward(a, grad)?, None)),
        EltwiseKind::Sigmoid => Ok((sigmoid_backward(out, grad)?, None)),
        EltwiseKind::Add => {
            let (ga, gb) = add_backward(grad);
            Ok((ga, Some(gb)))
        }
        EltwiseKind::Mul => {
            let b = b.ok_or_else(|| Error::arg("eltwise_backward", "mul needs a second operand"))?;
            let (ga, gb) = mul_backward(a, b, grad)?;
            Ok((ga, Some(gb)))
        }
    }
}
