//! The full encoder-decoder network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{
    join, Conv2d, ConvBlock, ConvBlockCache, DipcBlock, DipcCache, DipcConfig, Init, Mixer, Module, Slot, SlotMut,
    Switches,
};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Real, Shape4, Tensor4};
use crate::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Every involution replaced by a dilated `K × K` convolution.
    NoInvolution,
    /// Bottleneck convolutions use `bottleneck_dilation`.
    DilatedBottleneck,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoInvolution, Variant::DilatedBottleneck];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoInvolution => "no-involution",
            Variant::DilatedBottleneck => "dilated-bottleneck",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected full, no-involution or dilated-bottleneck)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedNetConfig {
    pub img_size: usize,
    /// Input channels of the four encoder levels; the stem produces `encoder_channels[0]`.
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    /// Output widths of the five decoder levels, deepest first.
    pub decoder_channels: Vec<usize>,
    pub involution_k: usize,
    pub involution_r: usize,
    pub dilations: Vec<usize>,
    pub variant: Variant,
    pub bottleneck_dilation: usize,
    pub residual: bool,
    pub seed: u64,
}

impl Default for SpeedNetConfig {
    fn default() -> Self {
        SpeedNetConfig {
            img_size: 224,
            encoder_channels: vec![32, 32, 64, 128],
            bottleneck_channels: 128,
            decoder_channels: vec![64, 64, 32, 32, 32],
            involution_k: 7,
            involution_r: 4,
            dilations: vec![1, 2, 4],
            variant: Variant::Full,
            bottleneck_dilation: 2,
            residual: true,
            seed: 0,
        }
    }
}

impl SpeedNetConfig {
    /// Small network used by tests and the synthetic overfit run.
    pub fn toy(img_size: usize) -> Self {
        SpeedNetConfig {
            img_size,
            encoder_channels: vec![8, 8, 16, 32],
            bottleneck_channels: 32,
            decoder_channels: vec![16, 16, 8, 8, 8],
            involution_k: 3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_channels.len() != 4 {
            return bad(format!("encoder_channels needs 4 entries, got {}", self.encoder_channels.len()));
        }
        if self.decoder_channels.len() != 5 {
            return bad(format!("decoder_channels needs 5 entries, got {}", self.decoder_channels.len()));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) || self.bottleneck_channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if self.img_size < 16 || !self.img_size.is_multiple_of(16) {
            return bad(format!("img_size {} must be a positive multiple of 16", self.img_size));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be a non-empty list of positive integers".into());
        }
        if self.bottleneck_dilation == 0 {
            return bad("bottleneck_dilation must be >= 1".into());
        }
        if self.involution_k.is_multiple_of(2) {
            return bad(format!("involution_k {} must be odd", self.involution_k));
        }
        if self.involution_r == 0 {
            return bad("involution_r must be >= 1".into());
        }
        Ok(())
    }

    fn mixer(&self) -> Mixer {
        match self.variant {
            Variant::NoInvolution => Mixer::Convolution {
                kernel_size: self.involution_k,
            },
            _ => Mixer::Involution {
                kernel_size: self.involution_k,
                reduction: self.involution_r,
            },
        }
    }

    fn bottleneck_dilation_used(&self) -> usize {
        match self.variant {
            Variant::DilatedBottleneck => self.bottleneck_dilation,
            _ => 1,
        }
    }

    /// Channel counts of the five skip tensors, deepest first.
    fn skip_channels(&self) -> [usize; 5] {
        let c = &self.encoder_channels;
        [self.bottleneck_channels, c[3], c[2], c[1], c[0]]
    }
}

/// One encoder level: DIPC block followed by two convolution blocks.
#[derive(Clone, Debug)]
pub struct EncoderLevel<T> {
    pub dipc: DipcBlock<T>,
    pub convs: [ConvBlock<T>; 2],
}

/// One decoder level: skip concat, two convolution blocks, then optionally 2× upsampling.
#[derive(Clone, Debug)]
pub struct DecoderLevel<T> {
    pub convs: [ConvBlock<T>; 2],
    pub upsample: bool,
    input_channels: usize,
}

#[derive(Clone, Debug)]
pub struct SpeedNet<T> {
    pub config: SpeedNetConfig,
    pub stem: [ConvBlock<T>; 2],
    pub encoder: Vec<EncoderLevel<T>>,
    pub bottleneck: [ConvBlock<T>; 2],
    pub decoder: Vec<DecoderLevel<T>>,
    pub head: Conv2d<T>,
}

#[derive(Clone, Debug)]
struct EncoderCache<T> {
    dipc: DipcCache<T>,
    convs: [ConvBlockCache<T>; 2],
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    stem: [ConvBlockCache<T>; 2],
    encoder: Vec<EncoderCache<T>>,
    bottleneck: [ConvBlockCache<T>; 2],
    decoder: Vec<[ConvBlockCache<T>; 2]>,
    head_input: Tensor4<T>,
    output: Tensor4<T>,
    /// Shapes of every encoder-level output, for tests and diagnostics.
    pub encoder_shapes: Vec<Shape4>,
}

impl<T> ModelCache<T> {
    pub fn output(&self) -> &Tensor4<T> {
        &self.output
    }
}

impl<T: Real> Switches for ModelCache<T> {
    fn switches(&self, out: &mut Vec<u32>) {
        let caches = self
            .stem
            .iter()
            .chain(self.encoder.iter().flat_map(|e| e.convs.iter()))
            .chain(&self.bottleneck)
            .chain(self.decoder.iter().flatten());
        for c in caches {
            c.switches(out);
        }
        for e in &self.encoder {
            e.dipc.switches(out);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Trainable scalars.
    pub trainable: usize,
    /// Trainable scalars plus batch-norm running statistics.
    pub total_with_stats: usize,
    /// Exact size of an f32 checkpoint without optimizer state.
    pub bytes32: usize,
}

fn pair<T: Real>(init: &mut Init, in_c: usize, out_c: usize, dilation: usize) -> [ConvBlock<T>; 2] {
    let a = ConvBlock::new(init, in_c, out_c, 3, dilation);
    let b = ConvBlock::new(init, out_c, out_c, 3, dilation);
    [a, b]
}

fn pair_forward<T: Real>(
    blocks: &[ConvBlock<T>; 2],
    x: &Tensor4<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, [ConvBlockCache<T>; 2])> {
    let (y, c0) = blocks[0].forward(x, mode)?;
    let (y, c1) = blocks[1].forward(&y, mode)?;
    Ok((y, [c0, c1]))
}

fn pair_commit<T: Real>(blocks: &mut [ConvBlock<T>; 2], caches: &[ConvBlockCache<T>; 2]) {
    blocks[0].commit_stats(&caches[0]);
    blocks[1].commit_stats(&caches[1]);
}

fn pair_backward<T: Real>(
    blocks: &mut [ConvBlock<T>; 2],
    caches: &[ConvBlockCache<T>; 2],
    grad: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let g = blocks[1].backward(&caches[1], grad)?;
    blocks[0].backward(&caches[0], &g)
}

fn visit_pair<T: Real>(blocks: &[ConvBlock<T>; 2], prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
    blocks[0].visit(&join(prefix, "0"), f);
    blocks[1].visit(&join(prefix, "1"), f);
}

fn visit_pair_mut<T: Real>(blocks: &mut [ConvBlock<T>; 2], prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
    blocks[0].visit_mut(&join(prefix, "0"), f);
    blocks[1].visit_mut(&join(prefix, "1"), f);
}

impl<T: Real> SpeedNet<T> {
    /// Builds the network with seeded He-uniform weights.
    pub fn new(config: SpeedNetConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let enc = config.encoder_channels.clone();
        let stem = pair(&mut init, 3, enc[0], 1);

        let mut encoder = Vec::with_capacity(4);
        for (n, &c) in enc.iter().enumerate() {
            let next = enc.get(n + 1).copied().unwrap_or(config.bottleneck_channels);
            let dipc = DipcBlock::new(
                &mut init,
                DipcConfig {
                    level: n + 1,
                    channels: c,
                    dilations: config.dilations.clone(),
                    mixer: config.mixer(),
                    residual: config.residual,
                },
            )
            .map_err(|e| Error::Config(format!("encoder level {}: {e}", n + 1)))?;
            let convs = pair(&mut init, 2 * c, next, 1);
            encoder.push(EncoderLevel { dipc, convs });
        }

        let b = config.bottleneck_channels;
        let bottleneck = pair(&mut init, b, b, config.bottleneck_dilation_used());

        let mut decoder = Vec::with_capacity(5);
        let mut prev = b;
        for (i, (&w, &skip)) in config.decoder_channels.iter().zip(&config.skip_channels()).enumerate() {
            decoder.push(DecoderLevel {
                convs: pair(&mut init, prev + skip, w, 1),
                upsample: i < 4,
                input_channels: prev,
            });
            prev = w;
        }
        let head = Conv2d::new(&mut init, prev, 1, 1, ConvGeometry::default());
        Ok(SpeedNet {
            config,
            stem,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    /// `batch` is `(n, 3, S, S)` with `S = img_size`; returns probabilities `(n, 1, S, S)`.
    pub fn forward(&self, batch: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, ModelCache<T>)> {
        let s = batch.shape();
        let size = self.config.img_size;
        if s.c != 3 || s.h != size || s.w != size {
            return Err(Error::arg(
                "SpeedNet",
                format!("expected input (n, 3, {size}, {size}), got {s}"),
            ));
        }
        let (x, stem) = pair_forward(&self.stem, batch, mode)?;
        let mut skips = vec![x.clone()];
        let mut x = x;
        let mut encoder = Vec::with_capacity(4);
        let mut encoder_shapes = Vec::with_capacity(4);
        for level in &self.encoder {
            let (y, dipc) = level.dipc.forward(&x, batch, mode)?;
            let (y, convs) = pair_forward(&level.convs, &y, mode)?;
            encoder.push(EncoderCache { dipc, convs });
            encoder_shapes.push(y.shape());
            skips.push(y.clone());
            x = y;
        }
        let (mut x, bottleneck) = pair_forward(&self.bottleneck, &x, mode)?;
        let mut decoder = Vec::with_capacity(5);
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = Tensor4::concat_channels(&x, &skip)?;
            let (y, caches) = pair_forward(&level.convs, &cat, mode)?;
            decoder.push(caches);
            x = if level.upsample { ops::upsample2x(&y) } else { y };
        }
        let output = ops::sigmoid(&self.head.forward(&x)?);
        output.debug_assert_finite("SpeedNet");
        Ok((
            output.clone(),
            ModelCache {
                stem,
                encoder,
                bottleneck,
                decoder,
                head_input: x,
                output,
                encoder_shapes,
            },
        ))
    }

    /// Inference-mode forward; never mutates the model.
    pub fn predict(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward(batch, Mode::Infer)?.0)
    }

    /// Folds the batch statistics of a train-mode pass into every running average.
    pub fn commit_stats(&mut self, cache: &ModelCache<T>) {
        pair_commit(&mut self.stem, &cache.stem);
        for (level, c) in self.encoder.iter_mut().zip(&cache.encoder) {
            level.dipc.commit_stats(&c.dipc);
            pair_commit(&mut level.convs, &c.convs);
        }
        pair_commit(&mut self.bottleneck, &cache.bottleneck);
        for (level, c) in self.decoder.iter_mut().zip(&cache.decoder) {
            pair_commit(&mut level.convs, c);
        }
    }

    /// Train-mode forward that also updates the running statistics.
    pub fn forward_train(&mut self, batch: &Tensor4<T>) -> Result<(Tensor4<T>, ModelCache<T>)> {
        let (out, cache) = self.forward(batch, Mode::Train)?;
        self.commit_stats(&cache);
        Ok((out, cache))
    }

    /// Accumulates parameter gradients given `d loss / d output`.
    pub fn backward(&mut self, cache: &ModelCache<T>, grad: &Tensor4<T>) -> Result<()> {
        let g = ops::sigmoid_backward(&cache.output, grad)?;
        let mut g = self.head.backward(&cache.head_input, &g)?;
        let mut skip_grads = Vec::with_capacity(5);
        for (level, caches) in self.decoder.iter_mut().zip(&cache.decoder).rev() {
            if level.upsample {
                g = ops::upsample2x_backward(&g)?;
            }
            let gcat = pair_backward(&mut level.convs, caches, &g)?;
            let (gx, gskip) = gcat.split_channels(level.input_channels)?;
            skip_grads.push(gskip);
            g = gx;
        }
        // skip_grads is now ordered stem, L1, L2, L3, L4.
        let mut g = pair_backward(&mut self.bottleneck, &cache.bottleneck, &g)?;
        for (level, c) in self.encoder.iter_mut().zip(&cache.encoder).rev() {
            g.add_assign(&skip_grads.pop().expect("skip gradient"))?;
            let gy = pair_backward(&mut level.convs, &c.convs, &g)?;
            g = level.dipc.backward(&c.dipc, &gy)?;
        }
        g.add_assign(&skip_grads.pop().expect("stem skip gradient"))?;
        pair_backward(&mut self.stem, &cache.stem, &g)?;
        Ok(())
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let trainable = self.param_count();
        let total_with_stats = trainable + self.buffer_count();
        let bytes32 = crate::training::checkpoint::model_file_size(self);
        ParamCounts {
            trainable,
            total_with_stats,
            bytes32,
        }
    }

    /// Trainable parameters grouped by top-level component, in forward order.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        self.visit("", &mut |name, slot| {
            if !slot.is_param() {
                return;
            }
            let group = name.split('.').next().unwrap_or(name);
            match out.last_mut() {
                Some((g, n)) if g == group => *n += slot.tensor().len(),
                _ => out.push((group.to_string(), slot.tensor().len())),
            }
        });
        out
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Real>(&self) -> SpeedNet<U> {
        let mut other = SpeedNet::<U>::new(self.config.clone()).expect("config already validated");
        let mut values = Vec::new();
        self.visit("", &mut |_, s| values.push(s.tensor().cast::<U>()));
        let mut it = values.into_iter();
        other.visit_mut("", &mut |_, mut s| *s.tensor_mut() = it.next().expect("same layout"));
        other
    }
}

impl<T: Real> Module<T> for SpeedNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        visit_pair(&self.stem, &join(prefix, "stem"), f);
        for (n, level) in self.encoder.iter().enumerate() {
            let p = join(prefix, &format!("enc{}", n + 1));
            level.dipc.visit(&join(&p, "dipc"), f);
            visit_pair(&level.convs, &join(&p, "convs"), f);
        }
        visit_pair(&self.bottleneck, &join(prefix, "bottleneck"), f);
        for (i, level) in self.decoder.iter().enumerate() {
            visit_pair(&level.convs, &join(prefix, &format!("dec{}.convs", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, T>)) {
        visit_pair_mut(&mut self.stem, &join(prefix, "stem"), f);
        for (n, level) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("enc{}", n + 1));
            level.dipc.visit_mut(&join(&p, "dipc"), f);
            visit_pair_mut(&mut level.convs, &join(&p, "convs"), f);
        }
        visit_pair_mut(&mut self.bottleneck, &join(prefix, "bottleneck"), f);
        for (i, level) in self.decoder.iter_mut().enumerate() {
            visit_pair_mut(&mut level.convs, &join(prefix, &format!("dec{}.convs", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
