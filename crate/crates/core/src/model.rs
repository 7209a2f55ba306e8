//! The resolution-adaptive UNet: a shared encoder/bottleneck/decoder with
//! multi-scale gateway blocks (MSBs) at depths 1..D−1 and one 1×1×1
//! segmentation head per resolution level. Depth-d inputs enter through
//! MSB_d and reuse the deeper encoder, the bottleneck and the decoder blocks
//! at depths ≥ d; a plain-UNet degenerate mode drops the MSBs and keeps only
//! the full-resolution head.

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    batch_norm, concat_channels, conv3d, conv_transpose3d, instance_norm, max_pool3d, ConvSpec,
    NormMode, RunningStats,
};
use crate::tensor::{Init, Tensor};

/// Normalization flavor used inside every conv block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Instance,
}

/// Static architecture description.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Number of resolution levels D (2..=5). Depth d features live at
    /// spatial scale 1/2^d with c0·2^d channels.
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Full-resolution spatial shape; every extent must be divisible by
    /// 2^(D−1).
    pub full_shape: [usize; 3],
    pub norm: NormKind,
    /// When false the model is a plain UNet: no MSBs, single head.
    pub msb_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_channels: 8,
            num_classes: 3,
            in_channels: 1,
            full_shape: [32, 64, 32],
            norm: NormKind::Instance,
            msb_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.depth) {
            return Err(Error::Config(format!("depth must be in 2..=5, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::Config(
                "base_channels/in_channels must be > 0 and num_classes >= 2".into(),
            ));
        }
        if self.num_classes > 16 {
            return Err(Error::Config("num_classes must be <= 16".into()));
        }
        let div = 1usize << (self.depth - 1);
        for (axis, &e) in self.full_shape.iter().enumerate() {
            if e == 0 || e % div != 0 {
                return Err(Error::Config(format!(
                    "full_shape axis {axis} extent {e} not divisible by {div}"
                )));
            }
        }
        Ok(())
    }

    /// Channels at depth d: c0·2^d.
    pub fn channels_at(&self, d: usize) -> usize {
        self.base_channels << d
    }

    /// Spatial shape at depth d: full/2^d.
    pub fn shape_at(&self, d: usize) -> [usize; 3] {
        let s = 1usize << d;
        [self.full_shape[0] / s, self.full_shape[1] / s, self.full_shape[2] / s]
    }
}

/// Output of the full-resolution path.
pub struct FullPathOutput {
    pub logits: Tensor,
    /// Encoder features f_enc^(d) for d = 1..D−1, in depth order.
    pub enc_feats: Vec<Tensor>,
}

/// Output of a reduced-resolution path entered at depth d.
pub struct ScalePathOutput {
    pub logits: Tensor,
    /// MSB feature map, shape-aligned with f_enc^(d).
    pub f_msb: Tensor,
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv3dLayer {
    spec: ConvSpec,
    weight: Tensor,
    bias: Tensor,
}

impl Conv3dLayer {
    fn new(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<Conv3dLayer> {
        let ws = spec.weight_shape();
        let fan_in = spec.in_channels * spec.kernel.iter().product::<usize>();
        let bound = (6.0 / fan_in as f32).sqrt();
        let weight = Tensor::create(
            &ws,
            Init::Uniform { seed: rng.gen(), lo: -bound, hi: bound },
        )?
        .with_requires_grad();
        let bias = Tensor::zeros(&[spec.out_channels]).with_requires_grad();
        Ok(Conv3dLayer { spec, weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv3d(x, &self.weight, Some(&self.bias), &self.spec)
    }

}

struct NormLayer {
    kind: NormKind,
    gamma: Tensor,
    beta: Tensor,
    running: RefCell<RunningStats>,
    eps: f32,
    momentum: f32,
}

impl NormLayer {
    fn new(kind: NormKind, channels: usize) -> NormLayer {
        NormLayer {
            kind,
            gamma: Tensor::full(&[channels], 1.0).with_requires_grad(),
            beta: Tensor::zeros(&[channels]).with_requires_grad(),
            running: RefCell::new(RunningStats::new(channels)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        match self.kind {
            NormKind::Instance => instance_norm(x, &self.gamma, &self.beta, self.eps),
            NormKind::Batch => {
                let mut running = self.running.borrow_mut();
                batch_norm(
                    x,
                    &self.gamma,
                    &self.beta,
                    self.eps,
                    self.momentum,
                    mode,
                    Some(&mut running),
                )
            }
        }
    }
}

/// Two stages of 3³ conv → norm → ReLU.
struct ConvBlock {
    conv1: Conv3dLayer,
    norm1: NormLayer,
    conv2: Conv3dLayer,
    norm2: NormLayer,
}

impl ConvBlock {
    fn new(in_ch: usize, out_ch: usize, norm: NormKind, rng: &mut ChaCha8Rng) -> Result<ConvBlock> {
        Ok(ConvBlock {
            conv1: Conv3dLayer::new(ConvSpec::unit_stride(in_ch, out_ch, 3, 1), rng)?,
            norm1: NormLayer::new(norm, out_ch),
            conv2: Conv3dLayer::new(ConvSpec::unit_stride(out_ch, out_ch, 3, 1), rng)?,
            norm2: NormLayer::new(norm, out_ch),
        })
    }

    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?, mode)?.relu();
        Ok(self.norm2.forward(&self.conv2.forward(&h)?, mode)?.relu())
    }

    fn params(&self, out: &mut Vec<Tensor>) {
        out.push(self.conv1.weight.clone());
        out.push(self.conv1.bias.clone());
        out.push(self.norm1.gamma.clone());
        out.push(self.norm1.beta.clone());
        out.push(self.conv2.weight.clone());
        out.push(self.conv2.bias.clone());
        out.push(self.norm2.gamma.clone());
        out.push(self.norm2.beta.clone());
    }
}

/// Transposed 2³ stride-2 convolution (upsampling by 2).
struct UpConv {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Result<UpConv> {
        let fan_in = in_ch * 8;
        let bound = (6.0 / fan_in as f32).sqrt();
        let weight = Tensor::create(
            &[in_ch, out_ch, 2, 2, 2],
            Init::Uniform { seed: rng.gen(), lo: -bound, hi: bound },
        )?
        .with_requires_grad();
        let bias = Tensor::zeros(&[out_ch]).with_requires_grad();
        Ok(UpConv { weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose3d(x, &self.weight, Some(&self.bias))
    }

}

struct Head {
    conv: Conv3dLayer,
}

impl Head {
    fn new(in_ch: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Head> {
        Ok(Head {
            conv: Conv3dLayer::new(ConvSpec::unit_stride(in_ch, classes, 1, 0), rng)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub struct Model {
    pub config: ModelConfig,
    /// Encoder blocks at depths 0..D−1 (max-pool between consecutive blocks).
    enc: Vec<ConvBlock>,
    /// Extra double conv at the deepest spatial scale, c0·2^(D−1) → same.
    bottleneck: ConvBlock,
    /// ups[d] upsamples from depth d+1 features to depth d (d = 0..D−2).
    ups: Vec<UpConv>,
    /// dec[d] fuses concat(skip_d, up_d) → c0·2^d (d = 0..D−2).
    dec: Vec<ConvBlock>,
    /// heads[d]: 1×1×1 conv, c0·2^d → C. Plain-UNet mode keeps only head 0.
    heads: Vec<Head>,
    /// msbs[i] is MSB_(i+1): double conv in_channels → c0·2^(i+1).
    msbs: Vec<ConvBlock>,
    /// Names of blocks executed since the last `reset_touches`.
    touched: RefCell<BTreeSet<String>>,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_max = config.depth;

        let mut enc = Vec::new();
        for d in 0..d_max {
            let in_ch = if d == 0 { config.in_channels } else { config.channels_at(d - 1) };
            enc.push(ConvBlock::new(in_ch, config.channels_at(d), config.norm, &mut rng)?);
        }
        let deep = config.channels_at(d_max - 1);
        let bottleneck = ConvBlock::new(deep, deep, config.norm, &mut rng)?;

        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for d in 0..d_max - 1 {
            // up input channels: bottleneck output at the deepest decoder
            // stage, otherwise the previous decoder stage's output.
            let up_in = if d == d_max - 2 { deep } else { config.channels_at(d + 1) };
            ups.push(UpConv::new(up_in, config.channels_at(d), &mut rng)?);
            dec.push(ConvBlock::new(
                2 * config.channels_at(d),
                config.channels_at(d),
                config.norm,
                &mut rng,
            )?);
        }

        let head_count = if config.msb_enabled { d_max } else { 1 };
        let mut heads = Vec::new();
        for d in 0..head_count {
            heads.push(Head::new(config.channels_at(d), config.num_classes, &mut rng)?);
        }

        let mut msbs = Vec::new();
        if config.msb_enabled {
            for d in 1..d_max {
                msbs.push(ConvBlock::new(
                    config.in_channels,
                    config.channels_at(d),
                    config.norm,
                    &mut rng,
                )?);
            }
        }

        Ok(Model {
            config: config.clone(),
            enc,
            bottleneck,
            ups,
            dec,
            heads,
            msbs,
            touched: RefCell::new(BTreeSet::new()),
        })
    }

    fn touch(&self, name: &str) {
        self.touched.borrow_mut().insert(name.to_string());
    }

    pub fn reset_touches(&self) {
        self.touched.borrow_mut().clear();
    }

    pub fn touches(&self) -> BTreeSet<String> {
        self.touched.borrow().clone()
    }

    fn check_input(&self, x: &Tensor, d: usize) -> Result<()> {
        let s = x.shape();
        let want = self.config.shape_at(d);
        if s.len() != 5
            || s[1] != self.config.in_channels
            || s[2] != want[0]
            || s[3] != want[1]
            || s[4] != want[2]
        {
            return Err(Error::Shape(format!(
                "expected input (N,{},{},{},{}) for depth {d}, got {s:?}",
                self.config.in_channels, want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// Encoder depths `from..D−1` starting at `h` (already the output of
    /// depth `from−1`), then the bottleneck. Returns (skips for depths
    /// from..D−1 excluding the given feature, bottleneck output).
    fn run_deep(&self, h: Tensor, from: usize, mode: NormMode) -> Result<(Vec<Tensor>, Tensor)> {
        let d_max = self.config.depth;
        let mut skips = Vec::new();
        let mut h = h;
        for d in from..d_max {
            h = self.enc[d].forward(&max_pool3d(&h)?, mode)?;
            self.touch(&format!("enc{d}"));
            skips.push(h.clone());
        }
        self.touch("bottleneck");
        let b = self.bottleneck.forward(&h, mode)?;
        Ok((skips, b))
    }

    /// Decoder stages from the bottleneck up to depth `stop` inclusive.
    /// `skip_at` maps depth → skip tensor for depths stop..D−1.
    fn run_decoder(
        &self,
        bottom: Tensor,
        stop: usize,
        skip_at: &dyn Fn(usize) -> Tensor,
        mode: NormMode,
    ) -> Result<Tensor> {
        let mut h = bottom;
        for d in (stop..self.config.depth - 1).rev() {
            self.touch(&format!("up{d}"));
            let up = self.ups[d].forward(&h)?;
            let cat = concat_channels(&skip_at(d), &up)?;
            self.touch(&format!("dec{d}"));
            h = self.dec[d].forward(&cat, mode)?;
        }
        Ok(h)
    }

    /// Full-resolution path: all encoder blocks, bottleneck, full decoder,
    /// head 0. Also returns f_enc^(1..D−1) for consistency targets.
    pub fn forward_full(&self, x: &Tensor, mode: NormMode) -> Result<FullPathOutput> {
        self.check_input(x, 0)?;
        self.touch("enc0");
        let h0 = self.enc[0].forward(x, mode)?;
        let (skips, bottom) = self.run_deep(h0.clone(), 1, mode)?;
        let enc_feats = skips.clone();
        let skip_at = move |d: usize| if d == 0 { h0.clone() } else { skips[d - 1].clone() };
        let h = self.run_decoder(bottom, 0, &skip_at, mode)?;
        self.touch("head0");
        let logits = self.heads[0].conv.forward(&h)?;
        Ok(FullPathOutput { logits, enc_feats })
    }

    /// Reduced-resolution path entered at depth d (1 ≤ d ≤ D−1): MSB_d
    /// replaces the shallow encoder, its output is both the depth-d skip and
    /// the input to the deeper encoder; decoding stops at depth d, where
    /// head_d emits logits at 1/2^d resolution.
    pub fn forward_scale(&self, x: &Tensor, d: usize, mode: NormMode) -> Result<ScalePathOutput> {
        if !self.config.msb_enabled {
            return Err(Error::Contract("forward_scale requires msb_enabled".into()));
        }
        let d_max = self.config.depth;
        if d == 0 || d >= d_max {
            return Err(Error::Contract(format!(
                "entry depth must be in 1..={}, got {d}",
                d_max - 1
            )));
        }
        self.check_input(x, d)?;
        self.touch(&format!("msb{d}"));
        let f_msb = self.msbs[d - 1].forward(x, mode)?;
        let (skips, bottom) = self.run_deep(f_msb.clone(), d + 1, mode)?;
        let f_msb_skip = f_msb.clone();
        let skip_at =
            move |k: usize| if k == d { f_msb_skip.clone() } else { skips[k - d - 1].clone() };
        let h = self.run_decoder(bottom, d, &skip_at, mode)?;
        self.touch(&format!("head{d}"));
        let logits = self.heads[d].conv.forward(&h)?;
        Ok(ScalePathOutput { logits, f_msb })
    }

    /// All trainable parameters in a fixed declaration order.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for b in &self.enc {
            b.params(&mut out);
        }
        self.bottleneck.params(&mut out);
        for u in &self.ups {
            out.push(u.weight.clone());
            out.push(u.bias.clone());
        }
        for b in &self.dec {
            b.params(&mut out);
        }
        for h in &self.heads {
            out.push(h.conv.weight.clone());
            out.push(h.conv.bias.clone());
        }
        for b in &self.msbs {
            b.params(&mut out);
        }
        out
    }

    /// Parameter groups by block name (for gradient-flow assertions).
    pub fn named_param_groups(&self) -> Vec<(String, Vec<Tensor>)> {
        let mut out = Vec::new();
        for (d, b) in self.enc.iter().enumerate() {
            let mut p = Vec::new();
            b.params(&mut p);
            out.push((format!("enc{d}"), p));
        }
        let mut p = Vec::new();
        self.bottleneck.params(&mut p);
        out.push(("bottleneck".into(), p));
        for (d, u) in self.ups.iter().enumerate() {
            out.push((format!("up{d}"), vec![u.weight.clone(), u.bias.clone()]));
        }
        for (d, b) in self.dec.iter().enumerate() {
            let mut p = Vec::new();
            b.params(&mut p);
            out.push((format!("dec{d}"), p));
        }
        for (d, h) in self.heads.iter().enumerate() {
            out.push((format!("head{d}"), vec![h.conv.weight.clone(), h.conv.bias.clone()]));
        }
        for (i, b) in self.msbs.iter().enumerate() {
            let mut p = Vec::new();
            b.params(&mut p);
            out.push((format!("msb{}", i + 1), p));
        }
        out
    }

    /// Running-statistics buffers in declaration order (batch norm only;
    /// instance norm keeps none that matter but slots are still serialized).
    pub fn norm_buffers(&self) -> Vec<&RefCell<RunningStats>> {
        let mut out: Vec<&RefCell<RunningStats>> = Vec::new();
        let blocks = self
            .enc
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.dec.iter())
            .chain(self.msbs.iter());
        for b in blocks {
            out.push(&b.norm1.running);
            out.push(&b.norm2.running);
        }
        out
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// Analytic parameter and MAC counters
// ---------------------------------------------------------------------------

fn conv_params(in_ch: usize, out_ch: usize, k: usize) -> usize {
    in_ch * out_ch * k * k * k + out_ch
}

fn block_params(in_ch: usize, out_ch: usize) -> usize {
    conv_params(in_ch, out_ch, 3) + conv_params(out_ch, out_ch, 3) + 4 * out_ch
}

/// Total trainable parameter count, computed analytically from the config.
pub fn param_count(config: &ModelConfig) -> usize {
    let d_max = config.depth;
    let mut n = 0usize;
    for d in 0..d_max {
        let in_ch = if d == 0 { config.in_channels } else { config.channels_at(d - 1) };
        n += block_params(in_ch, config.channels_at(d));
    }
    let deep = config.channels_at(d_max - 1);
    n += block_params(deep, deep);
    for d in 0..d_max - 1 {
        let up_in = if d == d_max - 2 { deep } else { config.channels_at(d + 1) };
        n += up_in * config.channels_at(d) * 8 + config.channels_at(d); // transposed conv
        n += block_params(2 * config.channels_at(d), config.channels_at(d));
    }
    let head_count = if config.msb_enabled { d_max } else { 1 };
    for d in 0..head_count {
        n += conv_params(config.channels_at(d), config.num_classes, 1);
    }
    if config.msb_enabled {
        for d in 1..d_max {
            n += block_params(config.in_channels, config.channels_at(d));
        }
    }
    n
}

fn voxels(shape: [usize; 3]) -> usize {
    shape[0] * shape[1] * shape[2]
}

fn block_macs(in_ch: usize, out_ch: usize, shape: [usize; 3]) -> u64 {
    let v = voxels(shape) as u64;
    v * (in_ch * out_ch * 27) as u64 + v * (out_ch * out_ch * 27) as u64
}

/// Analytic multiply-accumulate count of the layer set executed by the path
/// entered at `entry_depth` (0 = full resolution). Counts convolutions only.
pub fn flop_count(config: &ModelConfig, entry_depth: usize, batch: usize) -> Result<u64> {
    config.validate()?;
    let d_max = config.depth;
    if entry_depth >= d_max {
        return Err(Error::Contract(format!(
            "entry_depth must be in 0..{d_max}, got {entry_depth}"
        )));
    }
    let mut macs = 0u64;
    if entry_depth == 0 {
        macs += block_macs(config.in_channels, config.channels_at(0), config.shape_at(0));
    } else {
        // MSB_d at scale 1/2^d
        macs += block_macs(
            config.in_channels,
            config.channels_at(entry_depth),
            config.shape_at(entry_depth),
        );
    }
    for d in entry_depth.max(1)..d_max {
        if d > entry_depth || entry_depth == 0 {
            macs += block_macs(config.channels_at(d - 1), config.channels_at(d), config.shape_at(d));
        }
    }
    let deep = config.channels_at(d_max - 1);
    macs += block_macs(deep, deep, config.shape_at(d_max - 1));
    for d in (entry_depth..d_max - 1).rev() {
        let up_in = if d == d_max - 2 { deep } else { config.channels_at(d + 1) };
        // transposed 2³/s2 conv: one kernel tap per output voxel
        macs += (voxels(config.shape_at(d)) * up_in * config.channels_at(d)) as u64;
        macs += block_macs(2 * config.channels_at(d), config.channels_at(d), config.shape_at(d));
    }
    macs += (voxels(config.shape_at(entry_depth))
        * config.channels_at(entry_depth)
        * config.num_classes) as u64;
    Ok(macs * batch as u64)
}
