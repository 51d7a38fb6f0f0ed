use super::{
    join, Conv2d, ConvBlock, ConvBlockCache, Init, InvolutionCache, InvolutionConfig, InvolutionLayer, Module,
    Slot, SlotMut, Switches,
};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, MaxPoolIndices};
use crate::tensor::{Real, Tensor4};
use crate::Mode;

/// What sits at each rung of the dilation pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixer {
    Involution { kernel_size: usize, reduction: usize },
    /// Plain `k × k` dilated convolution with `c → c` channels (the no-involution ablation).
    Convolution { kernel_size: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DipcConfig {
    /// Encoder level `n ∈ 1..=4`; the raw image is max-pooled `n` times for the salient map.
    pub level: usize,
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub mixer: Mixer,
    /// Add the fused input `E` back before the output convolution.
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub enum MixerBranch<T> {
    Involution(InvolutionLayer<T>),
    Convolution(Conv2d<T>),
}

#[derive(Clone, Debug)]
pub enum MixerCache<T> {
    Involution(InvolutionCache<T>),
    Convolution(Tensor4<T>),
}

impl<T: Real> MixerBranch<T> {
    fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, MixerCache<T>)> {
        match self {
            MixerBranch::Involution(l) => {
                let (y, c) = l.forward(x, mode)?;
                Ok((y, MixerCache::Involution(c)))
            }
            MixerBranch::Convolution(conv) => Ok((conv.forward(x)?, MixerCache::Convolution(x.clone()))),
        }
    }

    fn backward(&mut self, cache: &MixerCache<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        match (self, cache) {
            (MixerBranch::Involution(l), MixerCache::Involution(c)) => l.backward(c, grad),
            (MixerBranch::Convolution(conv), MixerCache::Convolution(x)) => conv.backward(x, grad),
            _ => Err(Error::arg("DipcBlock", "branch cache does not match branch kind")),
        }
    }

    fn commit_stats(&mut self, cache: &MixerCache<T>) {
        if let (MixerBranch::Involution(l), MixerCache::Involution(c)) = (self, cache) {
            l.commit_stats(c);
        }
    }
}

/// Dilated-involution pyramid with salient-map attention.
///
/// For feature input `f` of shape `(b, c, H, W)` and the raw image batch:
///
/// 1. `S` = image max-pooled `level` times, `(b, 3, H/2, W/2)`
/// 2. `P` = maxpool₂(f)
/// 3. `E` = `P` + 1×1 conv(`S` → c)
/// 4. `Yᵢ` = mixer at dilation `dᵢ` applied to `E`
/// 5. `Z` = sum over adjacent pairs, `(Y₁+Y₂) + (Y₂+Y₃)` for three rungs
/// 6. `A` = sigmoid(3×3 conv(`Z`))
/// 7. `O` = `A ⊙ P`
/// 8. out = ConvBlock(`O + E` → 2c)
#[derive(Clone, Debug)]
pub struct DipcBlock<T> {
    pub config: DipcConfig,
    pub salient: Conv2d<T>,
    pub branches: Vec<MixerBranch<T>>,
    pub attention: Conv2d<T>,
    pub output: ConvBlock<T>,
}

#[derive(Clone, Debug)]
pub struct DipcCache<T> {
    pool: MaxPoolIndices,
    pooled: Tensor4<T>,
    salient_map: Tensor4<T>,
    branches: Vec<MixerCache<T>>,
    fused: Tensor4<T>,
    attention: Tensor4<T>,
    output: ConvBlockCache<T>,
}

impl<T> DipcCache<T> {
    /// The sigmoid attention map `A`.
    pub fn attention(&self) -> &Tensor4<T> {
        &self.attention
    }

    pub fn salient_map(&self) -> &Tensor4<T> {
        &self.salient_map
    }
}

impl<T: Real> DipcBlock<T> {
    pub fn new(init: &mut Init, config: DipcConfig) -> Result<Self> {
        let c = config.channels;
        if config.level == 0 {
            return Err(Error::arg("DipcBlock", "level must be >= 1"));
        }
        if config.dilations.is_empty() {
            return Err(Error::arg("DipcBlock", "at least one dilation rate is required"));
        }
        let salient = Conv2d::new(init, 3, c, 1, ConvGeometry::default());
        let branches = config
            .dilations
            .iter()
            .map(|&d| match config.mixer {
                Mixer::Involution { kernel_size, reduction } => InvolutionLayer::new(
                    init,
                    InvolutionConfig::with_default_groups(c, kernel_size, reduction, d),
                )
                .map(MixerBranch::Involution),
                Mixer::Convolution { kernel_size } => {
                    Ok(MixerBranch::Convolution(Conv2d::same(init, c, c, kernel_size, d)))
                }
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::arg("DipcBlock", format!("level {}: {e}", config.level)))?;
        let attention = Conv2d::same(init, c, c, 3, 1);
        let output = ConvBlock::new(init, c, 2 * c, 3, 1);
        Ok(DipcBlock {
            config,
            salient,
            branches,
            attention,
            output,
        })
    }

    fn salient_map(&self, image: &Tensor4<T>, f: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (fs, is) = (f.shape(), image.shape());
        let scale = 1usize << (self.config.level - 1);
        if is.c != 3 {
            return Err(Error::shape("DipcBlock", "image channels", 3, is.c));
        }
        if is.n != fs.n {
            return Err(Error::shape("DipcBlock", "image batch", fs.n, is.n));
        }
        if is.h != fs.h * scale || is.w != fs.w * scale {
            return Err(Error::arg(
                "DipcBlock",
                format!(
                    "level {} expects a {}x{} image for {}x{} features, got {}x{}",
                    self.config.level,
                    fs.h * scale,
                    fs.w * scale,
                    fs.h,
                    fs.w,
                    is.h,
                    is.w
                ),
            ));
        }
        let mut s = ops::maxpool2d(image, 2, 2)?.0;
        for _ in 1..self.config.level {
            s = ops::maxpool2d(&s, 2, 2)?.0;
        }
        Ok(s)
    }

    /// `f` is `(b, c, H, W)`; `image` is the raw `(b, 3, H·2^(level−1), W·2^(level−1))` batch.
    pub fn forward(&self, f: &Tensor4<T>, image: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, DipcCache<T>)> {
        let c = self.config.channels;
        if f.shape().c != c {
            return Err(Error::shape("DipcBlock", "c", c, f.shape().c));
        }
        if !f.shape().h.is_multiple_of(2) || !f.shape().w.is_multiple_of(2) {
            return Err(Error::arg("DipcBlock", format!("feature size {} must be even", f.shape())));
        }
        let salient_map = self.salient_map(image, f)?;
        let (pooled, pool) = ops::maxpool2d(f, 2, 2)?;
        let projected = self.salient.forward(&salient_map)?;
        let entry = ops::add(&pooled, &projected)?;

        let mut ys = Vec::with_capacity(self.branches.len());
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (y, cache) = b.forward(&entry, mode)?;
            ys.push(y);
            branch_caches.push(cache);
        }
        let fused = if ys.len() == 1 {
            ys[0].clone()
        } else {
            let mut acc = ops::add(&ys[0], &ys[1])?;
            for pair in ys.windows(2).skip(1) {
                acc = ops::add(&acc, &ops::add(&pair[0], &pair[1])?)?;
            }
            acc
        };

        let attention = ops::sigmoid(&self.attention.forward(&fused)?);
        let gated = ops::mul(&attention, &pooled)?;
        let merged = if self.config.residual {
            ops::add(&gated, &entry)?
        } else {
            gated
        };
        let (out, output) = self.output.forward(&merged, mode)?;
        Ok((
            out,
            DipcCache {
                pool,
                pooled,
                salient_map,
                branches: branch_caches,
                fused,
                attention,
                output,
            },
        ))
    }

    pub fn commit_stats(&mut self, cache: &DipcCache<T>) {
        for (b, c) in self.branches.iter_mut().zip(&cache.branches) {
            b.commit_stats(c);
        }
        self.output.commit_stats(&cache.output);
    }

    /// Number of adjacent pairs each pyramid rung takes part in.
    fn pair_multiplicity(&self, i: usize) -> usize {
        let m = self.branches.len();
        if m == 1 || i == 0 || i == m - 1 {
            1
        } else {
            2
        }
    }

    /// Returns the gradient for the feature input `f` (the image gets none).
    pub fn backward(&mut self, cache: &DipcCache<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g_merged = self.output.backward(&cache.output, grad)?;
        let (g_gated, mut g_entry) = if self.config.residual {
            ops::add_backward(&g_merged)
        } else {
            let zero = Tensor4::zeros(g_merged.shape());
            (g_merged, zero)
        };
        let (g_att, mut g_pooled) = ops::mul_backward(&cache.attention, &cache.pooled, &g_gated)?;
        let g_att_pre = ops::sigmoid_backward(&cache.attention, &g_att)?;
        let g_fused = self.attention.backward(&cache.fused, &g_att_pre)?;

        for i in 0..self.branches.len() {
            let mult = T::from_f64(self.pair_multiplicity(i) as f64);
            let g_y = g_fused.map(|v| v * mult);
            let g = self.branches[i].backward(&cache.branches[i], &g_y)?;
            g_entry.add_assign(&g)?;
        }

        let (g_pool_from_entry, g_proj) = ops::add_backward(&g_entry);
        self.salient.backward(&cache.salient_map, &g_proj)?;
        g_pooled.add_assign(&g_pool_from_entry)?;
        ops::maxpool2d_backward(&cache.pool, &g_pooled)
    }
}

impl<T: Real> Switches for DipcCache<T> {
    fn switches(&self, out: &mut Vec<u32>) {
        out.extend(self.pool.offsets.iter().map(|&o| o as u32));
        for b in &self.branches {
            if let MixerCache::Involution(c) = b {
                c.switches(out);
            }
        }
        self.output.switches(out);
    }
}

impl<T: Real> Module<T> for DipcBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.salient.visit(&join(prefix, "salient"), f);
        for (b, d) in self.branches.iter().zip(&self.config.dilations) {
            let name = join(prefix, &format!("mix_d{d}"));
            match b {
                MixerBranch::Involution(l) => l.visit(&name, f),
                MixerBranch::Convolution(c) => c.visit(&name, f),
            }
        }
        self.attention.visit(&join(prefix, "attention"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        self.salient.visit_mut(&join(prefix, "salient"), f);
        for (b, d) in self.branches.iter_mut().zip(&self.config.dilations) {
            let name = join(prefix, &format!("mix_d{d}"));
            match b {
                MixerBranch::Involution(l) => l.visit_mut(&name, f),
                MixerBranch::Convolution(c) => c.visit_mut(&name, f),
            }
        }
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn config(level: usize, c: usize, mixer: Mixer) -> DipcConfig {
        DipcConfig { level, channels: c, dilations: vec![1, 2, 4], mixer, residual: true }
    }

    const INV3: Mixer = Mixer::Involution { kernel_size: 3, reduction: 4 };

    #[test]
    fn output_shape_law_small() {
        let block = DipcBlock::<f32>::new(&mut Init::new(0), config(2, 8, INV3)).unwrap();
        let f = Tensor4::from_fn(Shape4::new(2, 8, 8, 8), |i| (i as f32 * 0.01).sin());
        let image = Tensor4::from_fn(Shape4::new(2, 3, 16, 16), |i| (i % 255) as f32 / 255.0);
        let (out, cache) = block.forward(&f, &image, Mode::Train).unwrap();
        assert_eq!(out.shape(), Shape4::new(2, 16, 4, 4));
        assert_eq!(cache.salient_map().shape(), Shape4::new(2, 3, 4, 4));
        let a = cache.attention();
        assert!(a.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn rejects_inconsistent_image() {
        let block = DipcBlock::<f32>::new(&mut Init::new(0), config(2, 8, INV3)).unwrap();
        let f = Tensor4::zeros(Shape4::new(1, 8, 8, 8));
        let image = Tensor4::zeros(Shape4::new(1, 3, 8, 8));
        assert!(block.forward(&f, &image, Mode::Infer).is_err());
    }

    #[test]
    fn convolution_mixer_has_more_parameters() {
        for c in [32, 64, 128] {
            for k in [3, 7] {
                let inv = DipcBlock::<f32>::new(
                    &mut Init::new(0),
                    config(1, c, Mixer::Involution { kernel_size: k, reduction: 4 }),
                )
                .unwrap();
                let conv = DipcBlock::<f32>::new(&mut Init::new(0), config(1, c, Mixer::Convolution { kernel_size: k }))
                    .unwrap();
                assert!(conv.param_count() > inv.param_count(), "c={c} k={k}");
            }
        }
    }

    #[test]
    fn pair_multiplicities() {
        let block = DipcBlock::<f32>::new(&mut Init::new(0), config(1, 8, INV3)).unwrap();
        let m: Vec<_> = (0..3).map(|i| block.pair_multiplicity(i)).collect();
        assert_eq!(m, vec![1, 2, 1]);
    }
}
