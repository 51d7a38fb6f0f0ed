use super::{join, relu_switches, Init, Module, Param, Slot, SlotMut, Switches};
use crate::error::Result;
use crate::ops::{self, BatchNormCache, BatchNormConfig, ConvGeometry, ConvSpec, RunningStats};
use crate::tensor::{Real, Shape4, Tensor4};
use crate::Mode;

/// Convolution with learned kernel `(out, in, k, k)` and bias `(out, 1, 1, 1)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geometry: ConvGeometry,
}

impl<T: Real> Conv2d<T> {
    pub fn new(init: &mut Init, in_c: usize, out_c: usize, k: usize, geometry: ConvGeometry) -> Self {
        let weight = init.he_uniform(Shape4::new(out_c, in_c, k, k), in_c * k * k);
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(Tensor4::zeros(Shape4::new(out_c, 1, 1, 1))),
            geometry,
        }
    }

    /// `k × k`, stride 1, spatial size preserved.
    pub fn same(init: &mut Init, in_c: usize, out_c: usize, k: usize, dilation: usize) -> Self {
        Self::new(init, in_c, out_c, k, ConvGeometry::same(k, dilation))
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    fn spec(&self) -> ConvSpec<'_, T> {
        ConvSpec {
            kernel: &self.weight.value,
            bias: self.bias.value.data(),
            geometry: self.geometry,
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ops::conv2d(x, &self.spec())
    }

    /// `input` is the tensor that was passed to `forward`.
    pub fn backward(&mut self, input: &Tensor4<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = ops::conv2d_backward(input, &self.spec(), grad)?;
        self.weight.accumulate(g.kernel.data());
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&self.weight));
        f(&join(prefix, "bias"), Slot::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), SlotMut::Param(&mut self.bias));
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor4<T>,
    pub running_var: Tensor4<T>,
    pub config: BatchNormConfig,
}

#[derive(Clone, Debug)]
pub struct BatchNormLayerCache<T> {
    inner: BatchNormCache<T>,
    batch_stats: Option<Vec<(T, T)>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape4::new(channels, 1, 1, 1);
        BatchNorm2d {
            gamma: Param::new(Tensor4::full(s, T::one())),
            beta: Param::new(Tensor4::zeros(s)),
            running_mean: Tensor4::zeros(s),
            running_var: Tensor4::full(s, T::one()),
            config: BatchNormConfig::default(),
        }
    }

    fn running(&self) -> RunningStats<T> {
        RunningStats {
            mean: self.running_mean.data().to_vec(),
            var: self.running_var.data().to_vec(),
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, BatchNormLayerCache<T>)> {
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        match mode {
            Mode::Train => {
                let (out, inner, stats) = ops::batchnorm2d_train(x, gamma, beta, self.config.eps)?;
                Ok((
                    out,
                    BatchNormLayerCache {
                        inner,
                        batch_stats: Some(stats),
                    },
                ))
            }
            Mode::Infer => {
                let (out, inner) = ops::batchnorm2d_infer(x, gamma, beta, &self.running(), self.config.eps)?;
                Ok((
                    out,
                    BatchNormLayerCache {
                        inner,
                        batch_stats: None,
                    },
                ))
            }
        }
    }

    pub fn commit_stats(&mut self, cache: &BatchNormLayerCache<T>) {
        let Some(stats) = &cache.batch_stats else {
            return;
        };
        let m = T::from_f64(self.config.momentum);
        let keep = T::one() - m;
        let means = self.running_mean.data_mut();
        for (r, s) in means.iter_mut().zip(stats) {
            *r = keep * *r + m * s.0;
        }
        let vars = self.running_var.data_mut();
        for (r, s) in vars.iter_mut().zip(stats) {
            *r = keep * *r + m * s.1;
        }
    }

    pub fn backward(&mut self, cache: &BatchNormLayerCache<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (gx, gg, gb) = ops::batchnorm2d_backward(&cache.inner, self.gamma.value.data(), grad)?;
        self.gamma.accumulate(&gg);
        self.beta.accumulate(&gb);
        Ok(gx)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "gamma"), Slot::Param(&self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        f(&join(prefix, "gamma"), SlotMut::Param(&mut self.gamma));
        f(&join(prefix, "beta"), SlotMut::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), SlotMut::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), SlotMut::Buffer(&mut self.running_var));
    }
}

/// conv → ReLU → BatchNorm.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<T> {
    input: Tensor4<T>,
    pre_relu: Tensor4<T>,
    bn: BatchNormLayerCache<T>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new(init: &mut Init, in_c: usize, out_c: usize, k: usize, dilation: usize) -> Self {
        ConvBlock {
            conv: Conv2d::same(init, in_c, out_c, k, dilation),
            bn: BatchNorm2d::new(out_c),
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, ConvBlockCache<T>)> {
        let pre_relu = self.conv.forward(x)?;
        let act = ops::relu(&pre_relu);
        let (out, bn) = self.bn.forward(&act, mode)?;
        Ok((
            out,
            ConvBlockCache {
                input: x.clone(),
                pre_relu,
                bn,
            },
        ))
    }

    pub fn commit_stats(&mut self, cache: &ConvBlockCache<T>) {
        self.bn.commit_stats(&cache.bn);
    }

    pub fn backward(&mut self, cache: &ConvBlockCache<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.bn.backward(&cache.bn, grad)?;
        let g = ops::relu_backward(&cache.pre_relu, &g)?;
        self.conv.backward(&cache.input, &g)
    }
}

impl<T: Real> Switches for ConvBlockCache<T> {
    fn switches(&self, out: &mut Vec<u32>) {
        relu_switches(&self.pre_relu, out);
    }
}

impl<T: Real> Module<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
