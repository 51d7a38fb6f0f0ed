use super::{join, relu_switches, BatchNorm2d, BatchNormLayerCache, Conv2d, Init, Module, Slot, SlotMut, Switches};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, InvolutionGeometry};
use crate::tensor::{Real, Tensor4};
use crate::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InvolutionConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub groups: usize,
    pub reduction: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl InvolutionConfig {
    /// Groups follow `max(1, C / 16)`.
    pub fn with_default_groups(channels: usize, kernel_size: usize, reduction: usize, dilation: usize) -> Self {
        InvolutionConfig {
            channels,
            kernel_size,
            groups: (channels / 16).max(1),
            reduction,
            dilation,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "InvolutionLayer";
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::arg(op, format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.groups == 0 || self.reduction == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::arg(op, "groups, reduction, stride and dilation must be >= 1"));
        }
        if !self.channels.is_multiple_of(self.groups) {
            return Err(Error::arg(op, format!("{} channels not divisible by {} groups", self.channels, self.groups)));
        }
        if !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::arg(
                op,
                format!("{} channels not divisible by reduction {}", self.channels, self.reduction),
            ));
        }
        Ok(())
    }

    fn geometry(&self) -> InvolutionGeometry {
        InvolutionGeometry {
            kernel_size: self.kernel_size,
            groups: self.groups,
            stride: self.stride,
            dilation: self.dilation,
        }
    }
}

/// Involution whose per-pixel kernels come from a small generator:
/// `avgpool_s → 1×1 conv (C → C/r) → ReLU → BatchNorm → 1×1 conv (C/r → K²·G)`.
#[derive(Clone, Debug)]
pub struct InvolutionLayer<T> {
    pub config: InvolutionConfig,
    pub reduce: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub span: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct InvolutionCache<T> {
    input: Tensor4<T>,
    pooled: Option<Tensor4<T>>,
    reduced: Tensor4<T>,
    bn: BatchNormLayerCache<T>,
    normalized: Tensor4<T>,
    kernels: Tensor4<T>,
}

impl<T: Real> InvolutionLayer<T> {
    pub fn new(init: &mut Init, config: InvolutionConfig) -> Result<Self> {
        config.validate()?;
        let hidden = config.channels / config.reduction;
        let taps = config.kernel_size * config.kernel_size * config.groups;
        Ok(InvolutionLayer {
            config,
            reduce: Conv2d::new(init, config.channels, hidden, 1, ConvGeometry::default()),
            bn: BatchNorm2d::new(hidden),
            span: Conv2d::new(init, hidden, taps, 1, ConvGeometry::default()),
        })
    }

    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, InvolutionCache<T>)> {
        let c = x.shape().c;
        if c != self.config.channels {
            return Err(Error::shape("InvolutionLayer", "c", self.config.channels, c));
        }
        let pooled = if self.config.stride > 1 {
            Some(ops::avgpool2d(x, self.config.stride)?)
        } else {
            None
        };
        let reduced = self.reduce.forward(pooled.as_ref().unwrap_or(x))?;
        let act = ops::relu(&reduced);
        let (normalized, bn) = self.bn.forward(&act, mode)?;
        let kernels = self.span.forward(&normalized)?;
        let out = ops::involution2d(x, &kernels, self.config.geometry())?;
        Ok((
            out,
            InvolutionCache {
                input: x.clone(),
                pooled,
                reduced,
                bn,
                normalized,
                kernels,
            },
        ))
    }

    pub fn commit_stats(&mut self, cache: &InvolutionCache<T>) {
        self.bn.commit_stats(&cache.bn);
    }

    pub fn backward(&mut self, cache: &InvolutionCache<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (mut gx, gk) = ops::involution2d_backward(&cache.input, &cache.kernels, self.config.geometry(), grad)?;
        let g = self.span.backward(&cache.normalized, &gk)?;
        let g = self.bn.backward(&cache.bn, &g)?;
        let g = ops::relu_backward(&cache.reduced, &g)?;
        let gen_in = cache.pooled.as_ref().unwrap_or(&cache.input);
        let g = self.reduce.backward(gen_in, &g)?;
        let g = match cache.pooled {
            Some(_) => ops::avgpool2d_backward(cache.input.shape(), self.config.stride, &g)?,
            None => g,
        };
        gx.add_assign(&g)?;
        Ok(gx)
    }
}

impl<T: Real> Switches for InvolutionCache<T> {
    fn switches(&self, out: &mut Vec<u32>) {
        relu_switches(&self.reduced, out);
    }
}

impl<T: Real> Module<T> for InvolutionLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.span.visit(&join(prefix, "span"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.span.visit_mut(&join(prefix, "span"), f);
    }
}
