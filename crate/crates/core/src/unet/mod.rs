//! Two-headed U-net for label-free cell boundary learning.
//!
//! The encoder is `depth` blocks of two 3×3 conv + batch-norm + ReLU layers
//! followed by 2×2 max pooling, with widths `base · 2^k`. A bottleneck of two
//! such layers plus dropout sits at the lowest resolution. Each decoder block
//! upsamples with a 2×2 stride-2 transposed convolution, concatenates the skip
//! connection and applies two more conv layers. Two 1×1 sigmoid heads produce
//! the SSIM-trained and RMS-trained outputs; their sum filtered with a
//! Laplacian is the boundary map.

mod io;
mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use loss::{
    gradient_magnitude_var, hybrid_loss, hybrid_loss_var, loss_rms, loss_rms_var, loss_ssim, loss_ssim_var,
    rms_target, ssim_var, LossBreakdown, LossVars,
};
pub use train::{train, EpochLoss, TrainConfig, TrainReport};

use crate::autograd::{BatchNormStats, Mode, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::imageops::{convolve_fixed, normalize_minmax, FixedKernel, ImageGray};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnetConfig {
    /// Side of the square input tile in pixels.
    pub input_size: usize,
    pub base_width: usize,
    /// Number of encoder (and decoder) blocks.
    pub depth: usize,
    pub dropout: f32,
    pub seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_width: 16,
            depth: 4,
            dropout: 0.2,
            seed: 0,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_width < 1 {
            return Err(Error::Config("base width must be at least 1".into()));
        }
        if self.depth >= usize::BITS as usize || self.input_size == 0 || !self.input_size.is_multiple_of(1usize << self.depth) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Output width of encoder block `k`; `k == depth` is the bottleneck.
    pub fn width(&self, k: usize) -> usize {
        self.base_width << k
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvBn {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DoubleConv([ConvBn; 2]);

#[derive(Clone, Copy, Debug, PartialEq)]
struct UpBlock {
    weight: ParamId,
    bias: ParamId,
    convs: DoubleConv,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Head {
    weight: ParamId,
    bias: ParamId,
}

/// Tape handles of the two heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub y_ssim: Var,
    pub y_rms: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnetOutputs {
    pub y_ssim: Tensor4,
    pub y_rms: Tensor4,
    /// Laplacian of `y_ssim + y_rms`.
    pub boundary: Tensor4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unet {
    config: UnetConfig,
    params: ParamStore,
    stats_names: Vec<String>,
    stats: Vec<BatchNormStats>,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoder: Vec<UpBlock>,
    head_ssim: Head,
    head_rms: Head,
}

struct Builder {
    params: ParamStore,
    stats_names: Vec<String>,
    stats: Vec<BatchNormStats>,
    rng: ChaCha8Rng,
}

impl Builder {
    /// He-style uniform init: U(-b, b) with b = sqrt(6 / fan_in).
    fn kaiming(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f32).sqrt();
        let t = Tensor4::uniform(shape, -bound, bound, &mut self.rng);
        self.params.insert(name, t)
    }

    /// He-style init for a 2×2 transposed convolution with the four taps tied,
    /// so that at initialization it acts as nearest-neighbour upsampling
    /// followed by a channel mix and adds no period-2 pattern.
    fn kaiming_tied_taps(&mut self, name: String, cin: usize, cout: usize) -> Result<ParamId> {
        let bound = (6.0 / cin as f32).sqrt();
        let base = Tensor4::uniform([cin, cout, 1, 1], -bound, bound, &mut self.rng);
        let data = base.data().iter().flat_map(|&v| [v; 4]).collect();
        self.params.insert(name, Tensor4::from_vec([cin, cout, 2, 2], data)?)
    }

    fn conv_bn(&mut self, prefix: &str, idx: usize, cin: usize, cout: usize) -> Result<ConvBn> {
        let weight = self.kaiming(format!("{prefix}.conv{idx}.weight"), [cout, cin, 3, 3], cin * 9)?;
        let bias = self.params.insert(format!("{prefix}.conv{idx}.bias"), Tensor4::zeros([1, cout, 1, 1]))?;
        let gamma = self
            .params
            .insert(format!("{prefix}.bn{idx}.gamma"), Tensor4::full([1, cout, 1, 1], 1.0))?;
        let beta = self.params.insert(format!("{prefix}.bn{idx}.beta"), Tensor4::zeros([1, cout, 1, 1]))?;
        self.stats_names.push(format!("{prefix}.bn{idx}"));
        self.stats.push(BatchNormStats::new(cout));
        Ok(ConvBn {
            weight,
            bias,
            gamma,
            beta,
            stats: self.stats.len() - 1,
        })
    }

    fn double(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<DoubleConv> {
        Ok(DoubleConv([self.conv_bn(prefix, 0, cin, cout)?, self.conv_bn(prefix, 1, cout, cout)?]))
    }

    fn head(&mut self, name: &str, cin: usize) -> Result<Head> {
        Ok(Head {
            weight: self.kaiming(format!("{name}.weight"), [1, cin, 1, 1], cin)?,
            bias: self.params.insert(format!("{name}.bias"), Tensor4::zeros([1, 1, 1, 1]))?,
        })
    }
}

impl Unet {
    pub fn new(config: UnetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            stats_names: Vec::new(),
            stats: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = 1;
        for k in 0..config.depth {
            encoder.push(b.double(&format!("enc{k}"), cin, config.width(k))?);
            cin = config.width(k);
        }
        let bottleneck = b.double("mid", cin, config.width(config.depth))?;
        let mut decoder = Vec::with_capacity(config.depth);
        for k in (0..config.depth).rev() {
            let (up_in, out) = (config.width(k + 1), config.width(k));
            let prefix = format!("dec{k}");
            let weight = b.kaiming_tied_taps(format!("{prefix}.up.weight"), up_in, out)?;
            let bias = b.params.insert(format!("{prefix}.up.bias"), Tensor4::zeros([1, out, 1, 1]))?;
            let convs = b.double(&prefix, 2 * out, out)?;
            decoder.push(UpBlock { weight, bias, convs });
        }
        let head_ssim = b.head("head_ssim", config.width(0))?;
        let head_rms = b.head("head_rms", config.width(0))?;
        Ok(Self {
            config,
            params: b.params,
            stats_names: b.stats_names,
            stats: b.stats,
            encoder,
            bottleneck,
            decoder,
            head_ssim,
            head_rms,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batch-norm running statistics with their layer names.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &BatchNormStats)> {
        self.stats_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub(crate) fn running_stats_mut(&mut self, name: &str) -> Option<&mut BatchNormStats> {
        let i = self.stats_names.iter().position(|n| n == name)?;
        Some(&mut self.stats[i])
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        let s = self.config.input_size;
        if shape.c != 1 || shape.h != s || shape.w != s || shape.n == 0 {
            return Err(Error::dim("unet forward", shape, Shape4::new(shape.n.max(1), 1, s, s)));
        }
        Ok(())
    }

    /// Builds the forward graph on `tape`. In train mode batch-norm statistics
    /// are updated and dropout draws from `rng`.
    pub fn forward_tape(&mut self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<HeadVars> {
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.graph(tape, x, mode, &mut stats, Some(rng));
        self.stats = stats;
        out
    }

    fn graph(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        stats: &mut [BatchNormStats],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadVars> {
        self.check_input(tape.value(x).shape())?;
        let p = &self.params;
        let conv_bn_relu = |tape: &mut Tape, stats: &mut [BatchNormStats], l: &ConvBn, x: Var| -> Result<Var> {
            let w = tape.param(p, l.weight);
            let b = tape.param(p, l.bias);
            let c = tape.conv2d(x, w, Some(b), 1, 1)?;
            let g = tape.param(p, l.gamma);
            let be = tape.param(p, l.beta);
            let n = tape.batch_norm2d(c, g, be, &mut stats[l.stats], mode)?;
            Ok(tape.relu(n))
        };
        let double = |tape: &mut Tape, stats: &mut [BatchNormStats], d: &DoubleConv, x: Var| -> Result<Var> {
            let h = conv_bn_relu(tape, stats, &d.0[0], x)?;
            conv_bn_relu(tape, stats, &d.0[1], h)
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for block in &self.encoder {
            let s = double(tape, stats, block, h)?;
            skips.push(s);
            h = tape.max_pool2d(s, 2)?;
        }
        h = double(tape, stats, &self.bottleneck, h)?;
        if let (Mode::Train, Some(rng)) = (mode, rng) {
            if self.config.dropout > 0.0 {
                h = tape.dropout(h, self.config.dropout, rng);
            }
        }
        for (up, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let w = tape.param(p, up.weight);
            let b = tape.param(p, up.bias);
            let u = tape.conv_transpose2d(h, w, Some(b), 2)?;
            let cat = tape.concat_channels(u, skip)?;
            h = double(tape, stats, &up.convs, cat)?;
        }
        let head = |tape: &mut Tape, hd: &Head| -> Result<Var> {
            let w = tape.param(p, hd.weight);
            let b = tape.param(p, hd.bias);
            let z = tape.conv2d(h, w, Some(b), 1, 0)?;
            Ok(tape.sigmoid(z))
        };
        Ok(HeadVars {
            y_ssim: head(tape, &self.head_ssim)?,
            y_rms: head(tape, &self.head_rms)?,
        })
    }

    /// Eval-mode forward pass: running batch-norm statistics, no dropout.
    pub fn forward(&self, batch: &Tensor4) -> Result<UnetOutputs> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let mut stats = self.stats.clone();
        let heads = self.graph(&mut tape, x, Mode::Eval, &mut stats, None)?;
        let y_ssim = tape.value(heads.y_ssim).clone();
        let y_rms = tape.value(heads.y_rms).clone();
        let boundary = fuse_boundary(&y_ssim, &y_rms)?;
        Ok(UnetOutputs {
            y_ssim,
            y_rms,
            boundary,
        })
    }

    /// Preprocesses `img`, runs the eval forward pass and returns the absolute
    /// boundary response stretched to [0, 1].
    pub fn predict_boundary(&self, img: &ImageGray) -> Result<ImageGray> {
        let s = self.config.input_size;
        if img.h != s || img.w != s {
            return Err(Error::dim("predict_boundary", (img.h, img.w), (s, s)));
        }
        let x = gray_batch(&[normalize_minmax(img)])?;
        let out = self.forward(&x)?;
        let abs = ImageGray::new(s, s, out.boundary.data().iter().map(|v| v.abs()).collect())?;
        Ok(normalize_minmax(&abs))
    }

    /// Flips each head whose eval output correlates negatively with its
    /// inputs over `images` (already normalized). Negating a head's weight and
    /// bias maps `y` to `1 - y`, which leaves both loss terms unchanged but
    /// keeps the heads from cancelling in the fused sum. Returns which heads
    /// were flipped as `[ssim, rms]`.
    pub fn orient_heads(&mut self, images: &[ImageGray]) -> Result<[bool; 2]> {
        let mut cov = [0f64; 2];
        for chunk in images.chunks(8) {
            let x = gray_batch(chunk)?;
            let out = self.forward(&x)?;
            let xm = x.sum() / x.len() as f64;
            for (k, y) in [&out.y_ssim, &out.y_rms].into_iter().enumerate() {
                let ym = y.sum() / y.len() as f64;
                cov[k] += x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &b)| (a as f64 - xm) * (b as f64 - ym))
                    .sum::<f64>();
            }
        }
        let mut flipped = [false; 2];
        for (k, head) in [self.head_ssim, self.head_rms].into_iter().enumerate() {
            if cov[k] < 0.0 {
                for id in [head.weight, head.bias] {
                    let t = &mut self.params.get_mut(id).value;
                    *t = t.map(|v| -v);
                }
                flipped[k] = true;
            }
        }
        Ok(flipped)
    }

    /// Order-sensitive checksum of all parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the raw bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f32| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter() {
            p.value.data().iter().for_each(|&v| feed(v));
        }
        for s in &self.stats {
            s.mean.iter().chain(&s.var).for_each(|&v| feed(v));
        }
        h
    }
}

/// `Laplacian(y_ssim + y_rms)` per batch item, zero padded.
pub fn fuse_boundary(y_ssim: &Tensor4, y_rms: &Tensor4) -> Result<Tensor4> {
    let s = y_ssim.shape();
    if s != y_rms.shape() || s.c != 1 {
        return Err(Error::dim("fuse_boundary", s, y_rms.shape()));
    }
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        let sum = y_ssim.item(n).iter().zip(y_rms.item(n)).map(|(a, b)| a + b).collect();
        let lap = convolve_fixed(&ImageGray::new(s.h, s.w, sum)?, FixedKernel::Laplacian);
        out.extend(lap.pixels);
    }
    Tensor4::from_vec(s, out)
}

/// Stacks equally sized grayscale images into an (n, 1, h, w) tensor.
pub fn gray_batch(images: &[ImageGray]) -> Result<Tensor4> {
    let first = images.first().ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if (img.h, img.w) != (first.h, first.w) {
            return Err(Error::dim("gray_batch", (first.h, first.w), (img.h, img.w)));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor4::from_vec([images.len(), 1, first.h, first.w], data)
}

/// Batch item `n` of a single-channel tensor as an image.
pub fn item_image(t: &Tensor4, n: usize) -> Result<ImageGray> {
    let s = t.shape();
    if s.c != 1 {
        return Err(Error::dim("item_image", s, "single channel"));
    }
    ImageGray::new(s.h, s.w, t.item(n).to_vec())
}
