//! The U-Net-like inpainting network and its two-phase training schedule.
//!
//! Encoder blocks are stride-2 gated convolutions (optionally batch-normed,
//! ReLU); decoder blocks upsample by 2 and apply a stride-1 gated convolution
//! (optionally batch-normed, leaky ReLU). Skip connections concatenate the
//! encoder feature maps and their side-band masks into the decoder at equal
//! resolution; the output head is an ordinary convolution with a sigmoid over
//! the last decoder features, the holed input and the original mask, so valid
//! pixels can be copied straight through.
//!
//! A partial-convolution variant of the same architecture is available for
//! baseline comparisons; there the rule-based mask update of each partial
//! convolution replaces the side-band max-pooled masks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::adam::{adam_step, AdamState, ParamSet};
use crate::loss::{compute_terms, FeatureExtractor, LossConfig};
use crate::ops::{
    batch_norm2d, conv2d, max_pool2, pconv2d, upsample_nearest, BnMode, BnState, ConvParams,
};
use crate::phantom::{generate_hole_mask, HoleSpec};
use crate::tensor::{backward, Scalar, Tensor};
use crate::volume::ImageSlice;
use crate::{metrics, rng, Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Image channels (1 or 2).
    pub in_channels: usize,
    /// Number of encoder (= decoder) blocks.
    pub depth: usize,
    /// Output width of each encoder level; length equals `depth`.
    pub widths: Vec<usize>,
    /// Odd convolution kernel extent.
    pub kernel: usize,
    pub leaky_slope: f64,
    pub bn_encoder: bool,
    pub bn_decoder: bool,
    /// Square input extent, divisible by `2^depth`.
    pub input_size: usize,
}

impl NetConfig {
    /// Desk-scale default: depth 4, widths (16,32,64,64), 64x64 inputs.
    pub fn desk(in_channels: usize) -> Self {
        NetConfig {
            in_channels,
            depth: 4,
            widths: vec![16, 32, 64, 64],
            kernel: 3,
            leaky_slope: 0.2,
            bn_encoder: true,
            bn_decoder: true,
            input_size: 64,
        }
    }

    /// Published scale: 8 blocks at 512x512. Widths are not published; these
    /// are the customary doubling-then-plateau choice.
    pub fn paper(in_channels: usize) -> Self {
        NetConfig {
            in_channels,
            depth: 8,
            widths: vec![64, 128, 256, 512, 512, 512, 512, 512],
            kernel: 3,
            leaky_slope: 0.2,
            bn_encoder: true,
            bn_decoder: true,
            input_size: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_channels > 2 {
            return Err(Error::InvalidConfig("in_channels must be 1 or 2".into()));
        }
        if self.depth < 2 {
            return Err(Error::InvalidConfig("depth must be >= 2".into()));
        }
        if self.widths.len() != self.depth {
            return Err(Error::InvalidConfig(format!(
                "widths has {} entries for depth {}",
                self.widths.len(),
                self.depth
            )));
        }
        if self.kernel % 2 == 0 || self.kernel < 3 {
            return Err(Error::InvalidConfig("kernel must be odd and >= 3".into()));
        }
        if self.leaky_slope <= 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::InvalidConfig("leaky slope must be in (0,1)".into()));
        }
        let div = 1usize << self.depth;
        if self.input_size % div != 0 || self.input_size / div == 0 {
            return Err(Error::IndivisibleSize {
                size: self.input_size,
                divisor: div,
            });
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Decoder output width at decoder step `j` (1-based).
    fn decoder_width(&self, j: usize) -> usize {
        if j < self.depth {
            self.widths[self.depth - 1 - j]
        } else {
            self.widths[0]
        }
    }
}

/// Which convolution operator the blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Gated,
    Partial,
}

#[derive(Clone)]
struct ConvRef {
    weight: usize,
    bias: usize,
}

#[derive(Clone)]
struct BnRef<S: Scalar> {
    gamma: usize,
    beta: usize,
    state: BnState<S>,
}

#[derive(Clone)]
struct Block<S: Scalar> {
    feature: ConvRef,
    /// Present for gated blocks only.
    gating: Option<ConvRef>,
    bn: Option<BnRef<S>>,
}

/// The inpainting model: parameters, per-block BN state and wiring.
#[derive(Clone)]
pub struct InpaintModel<S: Scalar> {
    pub cfg: NetConfig,
    pub kind: ConvKind,
    pub params: ParamSet<S>,
    encoder: Vec<Block<S>>,
    decoder: Vec<Block<S>>,
    head: ConvRef,
    pub seed: u64,
}

fn init_conv<S: Scalar>(
    params: &mut ParamSet<S>,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    seed: u64,
    salt: u64,
) -> ConvRef {
    let fan_in = in_ch * kernel * kernel;
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut r = rng::stream(seed, 0x1417, salt);
    let n = out_ch * in_ch * kernel * kernel;
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(r.gen_range(-limit..limit)))
        .collect();
    let weight = params.push(
        format!("{name}.weight"),
        Tensor::leaf(&[out_ch, in_ch, kernel, kernel], data).expect("init dims"),
    );
    let bias = params.push(
        format!("{name}.bias"),
        Tensor::leaf(&[out_ch], vec![S::zero(); out_ch]).expect("init dims"),
    );
    ConvRef { weight, bias }
}

fn init_bn<S: Scalar>(params: &mut ParamSet<S>, name: &str, channels: usize) -> BnRef<S> {
    let gamma = params.push(
        format!("{name}.gamma"),
        Tensor::leaf(&[channels], vec![S::one(); channels]).expect("init dims"),
    );
    let beta = params.push(
        format!("{name}.beta"),
        Tensor::leaf(&[channels], vec![S::zero(); channels]).expect("init dims"),
    );
    BnRef {
        gamma,
        beta,
        state: BnState::new(channels),
    }
}

/// Deterministically build a network from a seed.
pub fn build_network<S: Scalar>(
    cfg: &NetConfig,
    kind: ConvKind,
    seed: u64,
) -> Result<InpaintModel<S>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut salt = 0u64;

    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut in_ch = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        salt += 1;
        let feature = init_conv(
            &mut params,
            &format!("enc{i}.feature"),
            w,
            in_ch,
            cfg.kernel,
            seed,
            salt,
        );
        let gating = match kind {
            ConvKind::Gated => {
                salt += 1;
                Some(init_conv(
                    &mut params,
                    &format!("enc{i}.gating"),
                    w,
                    in_ch,
                    cfg.kernel,
                    seed,
                    salt,
                ))
            }
            ConvKind::Partial => None,
        };
        let bn = cfg
            .bn_encoder
            .then(|| init_bn(&mut params, &format!("enc{i}.bn"), w));
        encoder.push(Block {
            feature,
            gating,
            bn,
        });
        in_ch = w;
    }

    let mut decoder = Vec::with_capacity(cfg.depth);
    let mut prev = cfg.widths[cfg.depth - 1];
    for j in 1..=cfg.depth {
        let out_w = cfg.decoder_width(j);
        let in_w = if j < cfg.depth {
            // Upsampled features + encoder skip features + side-band mask.
            prev + cfg.widths[cfg.depth - 1 - j] + 1
        } else {
            prev
        };
        salt += 1;
        let feature = init_conv(
            &mut params,
            &format!("dec{}.feature", j - 1),
            out_w,
            in_w,
            cfg.kernel,
            seed,
            salt,
        );
        let gating = match kind {
            ConvKind::Gated => {
                salt += 1;
                Some(init_conv(
                    &mut params,
                    &format!("dec{}.gating", j - 1),
                    out_w,
                    in_w,
                    cfg.kernel,
                    seed,
                    salt,
                ))
            }
            ConvKind::Partial => None,
        };
        let bn = cfg
            .bn_decoder
            .then(|| init_bn(&mut params, &format!("dec{}.bn", j - 1), out_w));
        decoder.push(Block {
            feature,
            gating,
            bn,
        });
        prev = out_w;
    }

    salt += 1;
    let head = init_conv(
        &mut params,
        "head",
        cfg.in_channels,
        cfg.decoder_width(cfg.depth) + cfg.in_channels + 1,
        cfg.kernel,
        seed,
        salt,
    );

    Ok(InpaintModel {
        cfg: cfg.clone(),
        kind,
        params,
        encoder,
        decoder,
        head,
        seed,
    })
}

/// Composite image: valid pixels from `image`, holes from `output`.
pub fn compose<S: Scalar>(
    output: &Tensor<S>,
    image: &Tensor<S>,
    mask: &Tensor<S>,
) -> Result<Tensor<S>> {
    let inv = crate::loss::mask_complement(mask);
    image.mul_mask(mask)?.add(&output.mul_mask(&inv)?)
}

/// Valid-anywhere combination of two binary mask lineages.
fn mask_union<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let data: Vec<S> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            if x == S::one() || y == S::one() {
                S::one()
            } else {
                S::zero()
            }
        })
        .collect();
    Tensor::from_vec(a.shape(), data)
}

impl<S: Scalar> InpaintModel<S> {
    fn conv_params(&self, r: &ConvRef, stride: usize, detach: bool) -> ConvParams<S> {
        let (w, b) = (self.params.get(r.weight), self.params.get(r.bias));
        let (w, b) = if detach {
            (w.detach(), b.detach())
        } else {
            (w.clone(), b.clone())
        };
        ConvParams::new(w, Some(b), stride, self.cfg.padding()).expect("validated at build")
    }

    fn check_input(&self, image: &Tensor<S>, mask: &Tensor<S>) -> Result<()> {
        let (n, c, h, w) = image.dims4()?;
        if c != self.cfg.in_channels || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match configured ({}, {}, {})",
                image.shape(),
                self.cfg.in_channels,
                self.cfg.input_size,
                self.cfg.input_size
            )));
        }
        let (mn, mc, mh, mw) = mask.dims4()?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} does not match image {:?}",
                mask.shape(),
                image.shape()
            )));
        }
        Ok(())
    }

    /// Single wiring used by both training and inference. BN honors each
    /// block's mode (frozen never mutates); `detach` drops parameters from
    /// the tape for tape-free inference.
    fn forward_inner(
        &mut self,
        image: &Tensor<S>,
        mask: &Tensor<S>,
        detach: bool,
    ) -> Result<Tensor<S>> {
        self.check_input(image, mask)?;
        // Holes are zeroed first regardless of how the input was prepared.
        let holed = if detach {
            image.detach().mul_mask(&mask.detach())?
        } else {
            image.mul_mask(mask)?
        };

        let depth = self.cfg.depth;
        let slope = S::from_f64(self.cfg.leaky_slope);
        let mut x = holed.clone();
        let mut m = mask.detach();
        let mut feats: Vec<Tensor<S>> = Vec::with_capacity(depth);
        let mut masks: Vec<Tensor<S>> = Vec::with_capacity(depth);

        for i in 0..depth {
            let feature = self.conv_params(&self.encoder[i].feature, 2, detach);
            x = match self.kind {
                ConvKind::Gated => {
                    let gating = self.conv_params(
                        self.encoder[i].gating.as_ref().expect("gated block"),
                        2,
                        detach,
                    );
                    // Side-band mask: any valid pixel survives downsampling.
                    m = max_pool2(&m)?;
                    let f = conv2d(&x, &feature)?;
                    let g = conv2d(&x, &gating)?;
                    f.mul(&g.sigmoid())?
                }
                ConvKind::Partial => {
                    let (f, updated) = pconv2d(&x, &m, &feature)?;
                    m = updated;
                    f
                }
            };
            if let Some(bn) = &mut self.encoder[i].bn {
                let (gamma, beta) = (self.params.get(bn.gamma), self.params.get(bn.beta));
                let (gamma, beta) = if detach {
                    (gamma.detach(), beta.detach())
                } else {
                    (gamma.clone(), beta.clone())
                };
                x = batch_norm2d(&x, &gamma, &beta, &mut bn.state)?;
            }
            x = x.relu();
            feats.push(x.clone());
            masks.push(m.clone());
        }

        let mut y = feats[depth - 1].clone();
        let mut ym = masks[depth - 1].clone();
        for j in 1..=depth {
            y = upsample_nearest(&y, 2)?;
            ym = upsample_nearest(&ym, 2)?;
            if j < depth {
                ym = mask_union(&ym, &masks[depth - 1 - j])?;
                y = Tensor::concat_channels(&[&y, &feats[depth - 1 - j], &ym])?;
            }
            let feature = self.conv_params(&self.decoder[j - 1].feature, 1, detach);
            y = match self.kind {
                ConvKind::Gated => {
                    let gating = self.conv_params(
                        self.decoder[j - 1].gating.as_ref().expect("gated block"),
                        1,
                        detach,
                    );
                    let f = conv2d(&y, &feature)?;
                    let g = conv2d(&y, &gating)?;
                    f.mul(&g.sigmoid())?
                }
                ConvKind::Partial => {
                    let (f, updated) = pconv2d(&y, &ym, &feature)?;
                    ym = updated;
                    f
                }
            };
            if let Some(bn) = &mut self.decoder[j - 1].bn {
                let (gamma, beta) = (self.params.get(bn.gamma), self.params.get(bn.beta));
                let (gamma, beta) = if detach {
                    (gamma.detach(), beta.detach())
                } else {
                    (gamma.clone(), beta.clone())
                };
                y = batch_norm2d(&y, &gamma, &beta, &mut bn.state)?;
            }
            y = y.leaky_relu(slope);
        }

        // Output head sees the decoder features, the holed input and the
        // original mask, so valid pixels can pass straight through.
        let head_in = Tensor::concat_channels(&[&y, &holed, &mask.detach()])?;
        let head = self.conv_params(&self.head, 1, detach);
        Ok(conv2d(&head_in, &head)?.sigmoid())
    }

    /// Training forward: records the graph and honors each BN block's mode
    /// (updating running statistics where in train mode).
    pub fn forward_train(&mut self, image: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_inner(image, mask, false)
    }

    /// Inference forward: no gradient tape, frozen BN, no mutation. The model
    /// can be shared read-only across threads.
    pub fn infer(&self, image: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
        // Cheap structural clone (tensor storage is shared); freezing every
        // BN block makes the stateful path mutation-free.
        let mut view = self.clone();
        view.set_all_bn_mode(BnMode::Frozen);
        view.forward_inner(image, mask, true)
    }

    /// Switch the mode of every encoder BN block.
    pub fn set_encoder_bn_mode(&mut self, mode: BnMode) {
        for b in &mut self.encoder {
            if let Some(bn) = &mut b.bn {
                bn.state.mode = mode;
            }
        }
    }

    pub fn set_all_bn_mode(&mut self, mode: BnMode) {
        self.set_encoder_bn_mode(mode);
        for b in &mut self.decoder {
            if let Some(bn) = &mut b.bn {
                bn.state.mode = mode;
            }
        }
    }

    /// Running statistics of encoder BN blocks (for freeze verification).
    pub fn encoder_bn_stats(&self) -> Vec<(Vec<S>, Vec<S>)> {
        self.encoder
            .iter()
            .filter_map(|b| {
                b.bn
                    .as_ref()
                    .map(|bn| (bn.state.running_mean.clone(), bn.state.running_var.clone()))
            })
            .collect()
    }

    /// Every named tensor of the model: parameters plus BN running statistics
    /// plus a `__meta__` descriptor, sufficient to rebuild it exactly.
    pub fn to_named(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = Vec::new();
        let kind = match self.kind {
            ConvKind::Gated => 0.0,
            ConvKind::Partial => 1.0,
        };
        let meta = vec![
            S::from_f64(1.0), // descriptor version
            S::from_f64(kind),
            S::from_usize(self.cfg.in_channels),
            S::from_usize(self.cfg.depth),
            S::from_usize(self.cfg.kernel),
            S::from_f64(self.cfg.leaky_slope),
            S::from_f64(if self.cfg.bn_encoder { 1.0 } else { 0.0 }),
            S::from_f64(if self.cfg.bn_decoder { 1.0 } else { 0.0 }),
            S::from_usize(self.cfg.input_size),
            S::from_f64(self.seed as f64),
        ];
        out.push(("__meta__".to_string(), vec![meta.len()], meta));
        out.push((
            "__widths__".to_string(),
            vec![self.cfg.widths.len()],
            self.cfg.widths.iter().map(|&w| S::from_usize(w)).collect(),
        ));
        for (name, t) in self.params.iter() {
            out.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
        }
        for (prefix, blocks) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (i, b) in blocks.iter().enumerate() {
                if let Some(bn) = &b.bn {
                    let c = bn.state.channels();
                    out.push((
                        format!("{prefix}{i}.bn.running_mean"),
                        vec![c],
                        bn.state.running_mean.clone(),
                    ));
                    out.push((
                        format!("{prefix}{i}.bn.running_var"),
                        vec![c],
                        bn.state.running_var.clone(),
                    ));
                }
            }
        }
        out
    }

    /// Rebuild a model from `to_named` output.
    pub fn from_named(named: &[(String, Vec<usize>, Vec<S>)]) -> Result<InpaintModel<S>> {
        let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<S>)> {
            named
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint missing tensor `{name}`")))
        };
        let meta = &find("__meta__")?.2;
        if meta.len() < 10 || meta[0].to_f64() != 1.0 {
            return Err(Error::InvalidConfig("unsupported model descriptor".into()));
        }
        let kind = if meta[1].to_f64() == 0.0 {
            ConvKind::Gated
        } else {
            ConvKind::Partial
        };
        let widths = find("__widths__")?
            .2
            .iter()
            .map(|w| w.to_f64() as usize)
            .collect::<Vec<_>>();
        let cfg = NetConfig {
            in_channels: meta[2].to_f64() as usize,
            depth: meta[3].to_f64() as usize,
            widths,
            kernel: meta[4].to_f64() as usize,
            leaky_slope: meta[5].to_f64(),
            bn_encoder: meta[6].to_f64() != 0.0,
            bn_decoder: meta[7].to_f64() != 0.0,
            input_size: meta[8].to_f64() as usize,
        };
        let seed = meta[9].to_f64() as u64;
        let mut model = build_network::<S>(&cfg, kind, seed)?;
        for idx in 0..model.params.len() {
            let name = model.params.name(idx).to_string();
            let (_, shape, data) = find(&name)?;
            if shape != model.params.get(idx).shape() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor `{name}`: {:?} vs {:?}",
                    shape,
                    model.params.get(idx).shape()
                )));
            }
            model.params.replace(idx, Tensor::leaf(shape, data.clone())?);
        }
        for (prefix, blocks) in [("enc", &mut model.encoder), ("dec", &mut model.decoder)] {
            for (i, b) in blocks.iter_mut().enumerate() {
                if let Some(bn) = &mut b.bn {
                    bn.state.running_mean =
                        find(&format!("{prefix}{i}.bn.running_mean"))?.2.clone();
                    bn.state.running_var = find(&format!("{prefix}{i}.bn.running_var"))?.2.clone();
                }
            }
        }
        Ok(model)
    }
}

// ── Training ────────────────────────────────────────────────────────

/// The two-phase schedule: phase 1 trains with all BN live; phase 2 lowers
/// the learning rate and freezes encoder BN statistics.
#[derive(Debug, Clone, Copy)]
pub struct TrainSchedule {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub batch_size: usize,
    /// Freeze encoder BN statistics in phase 2.
    pub freeze_encoder_bn_phase2: bool,
    /// Mark the epoch callback as checkpoint-due every N epochs (0 = never).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainSchedule {
    /// Published schedule: 150+150 epochs, learning rates 1e-4 and 5e-5,
    /// batches of 8.
    pub fn paper(seed: u64) -> Self {
        TrainSchedule {
            phase1_epochs: 150,
            phase2_epochs: 150,
            lr1: 1e-4,
            lr2: 5e-5,
            batch_size: 8,
            freeze_encoder_bn_phase2: true,
            checkpoint_every: 10,
            seed,
        }
    }

    /// Desk schedule: 20+20 epochs, same learning rates.
    pub fn desk(seed: u64) -> Self {
        TrainSchedule {
            phase1_epochs: 20,
            phase2_epochs: 20,
            ..Self::paper(seed)
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.lr1 <= 0.0 || self.lr2 <= 0.0 {
            return Err(Error::InvalidConfig("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// Held-out reconstruction quality, computed on composites at the 0-255
/// metric scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// 1 or 2.
    pub phase: usize,
    pub mean_loss: f64,
    pub val: Option<ValMetrics>,
    /// True when the schedule's checkpoint cadence fires this epoch.
    pub checkpoint_due: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose validation SSIM was best (model selection criterion).
    pub best_epoch: Option<usize>,
}

fn batch_tensors(
    slices: &[ImageSlice],
    indices: &[usize],
    masks: &[Vec<f32>],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = &slices[indices[0]];
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut img = Vec::with_capacity(indices.len() * c * h * w);
    let mut msk = Vec::with_capacity(indices.len() * h * w);
    for (bi, &i) in indices.iter().enumerate() {
        img.extend_from_slice(&slices[i].data);
        msk.extend_from_slice(&masks[bi]);
    }
    Ok((
        Tensor::from_vec(&[indices.len(), c, h, w], img)?,
        Tensor::from_vec(&[indices.len(), 1, h, w], msk)?,
    ))
}

/// Validation pass: corrupt each held-out slice with its fixed mask, infer,
/// compose, and score the composite against the clean slice.
pub fn validate_model(
    model: &InpaintModel<f32>,
    val: &[ImageSlice],
    val_masks: &[Vec<f32>],
) -> Result<ValMetrics> {
    let scale = 255.0f32;
    let mut mses = Vec::with_capacity(val.len());
    let mut psnrs = Vec::with_capacity(val.len());
    let mut ssims = Vec::with_capacity(val.len());
    for (s, m) in val.iter().zip(val_masks) {
        let image = s.to_tensor::<f32>();
        let mask = Tensor::from_vec(&[1, 1, s.height, s.width], m.clone())?;
        let out = model.infer(&image, &mask)?;
        let comp = compose(&out, &image, &mask)?;
        let a: Vec<f32> = s.data.iter().map(|&v| v * scale).collect();
        let b: Vec<f32> = comp.data().iter().map(|&v| v * scale).collect();
        mses.push(metrics::mse(&a, &b)?);
        let p = metrics::psnr(&a, &b, 255.0)?;
        psnrs.push(if p.is_finite() { p } else { 99.0 });
        ssims.push(metrics::ssim(&a, &b, 255.0)?);
    }
    Ok(ValMetrics {
        mse: metrics::aggregate(&mses)?.mean,
        psnr: metrics::aggregate(&psnrs)?.mean,
        ssim: metrics::aggregate(&ssims)?.mean,
    })
}

/// Fixed hole masks for a validation set, derived from the schedule seed.
pub fn validation_masks(
    hole_spec: &HoleSpec,
    schedule_seed: u64,
    n: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut spec = hole_spec.clone();
    spec.seed = schedule_seed ^ 0x0a11;
    (0..n)
        .map(|i| generate_hole_mask(&spec, h, w, i as u64))
        .collect()
}

/// Train on healthy slices corrupted by generated holes; returns the loss
/// history and leaves the model at its best-validation-SSIM epoch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut InpaintModel<f32>,
    train_slices: &[ImageSlice],
    val_slices: &[ImageSlice],
    hole_spec: &HoleSpec,
    schedule: &TrainSchedule,
    loss_cfg: &LossConfig,
    psi: &FeatureExtractor<f32>,
    mut on_epoch: impl FnMut(&InpaintModel<f32>, &EpochStats),
) -> Result<TrainReport> {
    schedule.validate()?;
    loss_cfg.weights.validate()?;
    if train_slices.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let total = schedule.total_epochs();
    let mut report = TrainReport::default();
    if total == 0 {
        return Ok(report);
    }
    let (h, w) = (train_slices[0].height, train_slices[0].width);

    let val_masks = validation_masks(hole_spec, schedule.seed, val_slices.len(), h, w)?;

    let mut optimizer = AdamState::new(&model.params);
    let mut best: Option<(f64, usize, Vec<(String, Vec<usize>, Vec<f32>)>)> = None;

    let n = train_slices.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_hole_spec = hole_spec.clone();
    train_hole_spec.seed = schedule.seed ^ 0x7281;

    for epoch in 0..total {
        let phase = if epoch < schedule.phase1_epochs { 1 } else { 2 };
        if phase == 2 && epoch == schedule.phase1_epochs && schedule.freeze_encoder_bn_phase2 {
            model.set_encoder_bn_mode(BnMode::Frozen);
        }
        let lr = if phase == 1 { schedule.lr1 } else { schedule.lr2 } as f32;

        let mut shuffle_rng = rng::stream(schedule.seed, 0x54f1e, epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_acc = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let masks: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&i| generate_hole_mask(&train_hole_spec, h, w, (epoch * n + i) as u64))
                .collect::<Result<_>>()?;
            let (gt, mask) = batch_tensors(train_slices, chunk, &masks)?;
            let out = model.forward_train(&gt, &mask)?;
            let comp = compose(&out, &gt, &mask)?;
            let terms = compute_terms(&out, &gt, &mask, &comp, psi, loss_cfg)?;
            let total_loss = terms.total(&loss_cfg.weights)?;
            let loss_value = total_loss.item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            let grads = backward(&total_loss)?;
            adam_step(&mut model.params, &grads, &mut optimizer, lr)?;
            loss_acc += loss_value;
            steps += 1;
        }

        let val = if val_slices.is_empty() {
            None
        } else {
            Some(validate_model(model, val_slices, &val_masks)?)
        };
        if let Some(v) = &val {
            let is_better = best.as_ref().map(|(s, _, _)| v.ssim > *s).unwrap_or(true);
            if is_better {
                best = Some((v.ssim, epoch, model.to_named()));
            }
        }

        let stats = EpochStats {
            epoch,
            phase,
            mean_loss: loss_acc / steps.max(1) as f64,
            val,
            checkpoint_due: schedule.checkpoint_every > 0
                && (epoch + 1) % schedule.checkpoint_every == 0,
        };
        on_epoch(model, &stats);
        report.epochs.push(stats);
    }

    // Keep the best-validation epoch as the final model.
    if let Some((_, epoch, snapshot)) = best {
        *model = InpaintModel::from_named(&snapshot)?;
        if schedule.freeze_encoder_bn_phase2 && epoch >= schedule.phase1_epochs {
            model.set_encoder_bn_mode(BnMode::Frozen);
        }
        report.best_epoch = Some(epoch);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_counts_blocks_and_is_deterministic() {
        let cfg = NetConfig::desk(2);
        let a = build_network::<f32>(&cfg, ConvKind::Gated, 99).unwrap();
        assert_eq!(a.encoder.len(), 4);
        assert_eq!(a.decoder.len(), 4);
        let b = build_network::<f32>(&cfg, ConvKind::Gated, 99).unwrap();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1.data(), y.1.data());
        }
        let c = build_network::<f32>(&cfg, ConvKind::Gated, 100).unwrap();
        assert_ne!(a.params.get(0).data(), c.params.get(0).data());
    }

    #[test]
    fn paper_scale_config_builds_eight_blocks() {
        let cfg = NetConfig::paper(2);
        cfg.validate().unwrap();
        let m = build_network::<f32>(&cfg, ConvKind::Gated, 1).unwrap();
        assert_eq!(m.encoder.len(), 8);
        assert_eq!(m.decoder.len(), 8);
    }

    #[test]
    fn indivisible_input_size_is_rejected() {
        let bad = NetConfig {
            input_size: 60,
            ..NetConfig::desk(1)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_is_in_unit_interval_and_shape_preserving() {
        let cfg = NetConfig::desk(2);
        let model = build_network::<f32>(&cfg, ConvKind::Gated, 3).unwrap();
        let mut rng = crate::rng::root(12);
        let image = Tensor::uniform(&mut rng, &[1, 2, 64, 64], 0.0, 1.0);
        for mask_val in [0.0f32, 1.0] {
            let mask = Tensor::full(&[1, 1, 64, 64], mask_val);
            let out = model.infer(&image, &mask).unwrap();
            assert_eq!(out.shape(), image.shape());
            assert!(out
                .data()
                .iter()
                .all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn partial_variant_runs_end_to_end() {
        let cfg = NetConfig {
            depth: 3,
            widths: vec![4, 8, 8],
            input_size: 16,
            ..NetConfig::desk(2)
        };
        let model = build_network::<f32>(&cfg, ConvKind::Partial, 21).unwrap();
        let mut rng = crate::rng::root(22);
        let image = Tensor::uniform(&mut rng, &[2, 2, 16, 16], 0.0, 1.0);
        let mask_data: Vec<f32> = (0..2 * 256)
            .map(|i| if i % 7 == 0 { 0.0 } else { 1.0 })
            .collect();
        let mask = Tensor::from_vec(&[2, 1, 16, 16], mask_data).unwrap();
        let out = model.infer(&image, &mask).unwrap();
        assert_eq!(out.shape(), image.shape());
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn composite_equals_input_on_all_valid_mask() {
        let mut rng = crate::rng::root(13);
        let image = Tensor::uniform::<_>(&mut rng, &[1, 2, 8, 8], 0.0, 1.0);
        let output = Tensor::uniform::<_>(&mut rng, &[1, 2, 8, 8], 0.0, 1.0);
        let ones = Tensor::full(&[1, 1, 8, 8], 1.0f32);
        let comp = compose(&output, &image, &ones).unwrap();
        assert_eq!(comp.data(), image.data());
        let zeros = Tensor::zeros(&[1, 1, 8, 8]);
        let comp0 = compose(&output, &image, &zeros).unwrap();
        assert_eq!(comp0.data(), output.data());
    }

    #[test]
    fn checkerboard_composite_selects_elementwise() {
        let image = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let output = Tensor::from_vec(&[1, 1, 2, 2], vec![9.0f32, 8.0, 7.0, 6.0]).unwrap();
        let mask = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let comp = compose(&output, &image, &mask).unwrap();
        assert_eq!(comp.data(), &[1.0, 8.0, 7.0, 4.0]);
    }

    #[test]
    fn named_roundtrip_reproduces_inference_exactly() {
        let cfg = NetConfig {
            depth: 3,
            widths: vec![4, 8, 8],
            input_size: 16,
            ..NetConfig::desk(2)
        };
        let model = build_network::<f32>(&cfg, ConvKind::Gated, 77).unwrap();
        let named = model.to_named();
        let rebuilt = InpaintModel::from_named(&named).unwrap();
        let mut rng = crate::rng::root(14);
        let image = Tensor::uniform(&mut rng, &[1, 2, 16, 16], 0.0, 1.0);
        let mask_data: Vec<f32> = (0..256)
            .map(|i| if i % 5 == 0 { 0.0 } else { 1.0 })
            .collect();
        let mask = Tensor::from_vec(&[1, 1, 16, 16], mask_data).unwrap();
        let a = model.infer(&image, &mask).unwrap();
        let b = rebuilt.infer(&image, &mask).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_epoch_schedule_returns_model_unchanged() {
        let cfg = NetConfig {
            depth: 2,
            widths: vec![4, 4],
            input_size: 16,
            ..NetConfig::desk(1)
        };
        let mut model = build_network::<f32>(&cfg, ConvKind::Gated, 8).unwrap();
        let before: Vec<Vec<f32>> = model
            .params
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let schedule = TrainSchedule {
            phase1_epochs: 0,
            phase2_epochs: 0,
            ..TrainSchedule::desk(1)
        };
        let pcfg = crate::phantom::PhantomConfig::new(16, 1).unwrap();
        let slices: Vec<ImageSlice> = (0..4)
            .map(|i| crate::phantom::generate_healthy_slice(&pcfg, 1, i).image)
            .collect();
        let psi = FeatureExtractor::<f32>::new(1, 1, &[4, 4, 4]).unwrap();
        let report = train(
            &mut model,
            &slices,
            &[],
            &HoleSpec::for_size(16, 2),
            &schedule,
            &LossConfig::default(),
            &psi,
            |_, _| {},
        )
        .unwrap();
        assert!(report.epochs.is_empty());
        for ((_, t), b) in model.params.iter().zip(&before) {
            assert_eq!(t.data(), b.as_slice());
        }
    }
}
