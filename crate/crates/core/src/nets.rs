//! Network architectures: SaliencyNet (encoder + dense atrous pyramids
//! producing the deterministic feature S^d), DepthCorrectionNet (encoder
//! plus upsampling decoder producing refined depth D'), and PredictionNet
//! (channel mixing plus 1x1 head producing the saliency logit map P).
//!
//! All forwards are written against [`crate::tensor`] vars so one code path
//! serves training and inference.

use crate::tensor::{
    bilinear_resize, concat_channels, conv2d, max_pool2, permute_channels, squeeze_leading, Arr,
    BoundParams, Conv2dSpec, ParamId, ParamSet, Var,
};
use crate::{CoreError, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Negative slope for all leaky rectifier activations.
pub const LEAKY_SLOPE: f64 = 0.1;

fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    if std == 0.0 {
        return Arr::zeros(IxDyn(shape));
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut a = Arr::zeros(IxDyn(shape));
    // Fill in flat order so parameter initialization is layout-stable.
    for v in a.iter_mut() {
        *v = normal.sample(rng);
    }
    a
}

/// Per-layer weight-initialization rule. Biases always start at zero.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Every weight from N(0, std), regardless of layer size.
    Std(f64),
    /// N(0, gain^2 / fan_in): keeps activation scale roughly constant
    /// through deep stacks, which a single constant std cannot do when
    /// fan-in varies by an order of magnitude between layers.
    FanIn { gain: f64 },
}

impl Init {
    fn std_for(&self, fan_in: usize) -> f64 {
        match self {
            Init::Std(s) => *s,
            Init::FanIn { gain } => gain / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

/// Convolution weights plus bias. Bias starts at zero.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvLayer {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: Conv2dSpec,
        init: Init,
    ) -> Self {
        let std = init.std_for(in_ch * spec.kernel * spec.kernel);
        let w = params.register(
            format!("{name}.w"),
            init_tensor(rng, &[out_ch, in_ch, spec.kernel, spec.kernel], std),
        );
        let b = params.register(format!("{name}.b"), Arr::zeros(IxDyn(&[out_ch])));
        ConvLayer { w, b, spec }
    }

    pub fn forward<'t>(&self, bound: &BoundParams<'t>, x: Var<'t>) -> Var<'t> {
        conv2d(x, bound.get(self.w), bound.get(self.b), self.spec)
    }

    /// Convolution followed by the shared leaky activation.
    pub fn forward_act<'t>(&self, bound: &BoundParams<'t>, x: Var<'t>) -> Var<'t> {
        self.forward(bound, x).leaky_relu(LEAKY_SLOPE)
    }
}

/// Dense layer weights plus bias.
#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let w = params.register(
            format!("{name}.w"),
            init_tensor(rng, &[out_dim, in_dim], init.std_for(in_dim)),
        );
        let b = params.register(format!("{name}.b"), Arr::zeros(IxDyn(&[out_dim])));
        LinearLayer { w, b }
    }

    pub fn forward<'t>(&self, bound: &BoundParams<'t>, x: Var<'t>) -> Var<'t> {
        crate::tensor::linear(x, bound.get(self.w), bound.get(self.b))
    }
}

/// Test-time (or training-time) dropout state for the MC-dropout baseline.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl DropoutCtx<'_> {
    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate) so expectations match the dry path.
    fn apply<'t>(&mut self, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let keep = 1.0 - self.rate;
        let mask = Arr::from_shape_fn(IxDyn(&shape), |_| {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        x.mul_arr(&mask)
    }
}

/// Apply dropout when a context is present, identity otherwise. Layers call
/// this unconditionally so the stochastic and dry paths share one graph
/// shape.
pub fn maybe_dropout<'t>(x: Var<'t>, ctx: &mut Option<DropoutCtx<'_>>) -> Var<'t> {
    match ctx {
        Some(c) => c.apply(x),
        None => x,
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Small channel plan for tests and desk-scale runs; one strided conv
    /// per stage.
    Tiny,
    /// VGG16 channel plan (64..512, multiple convs per stage, max pooling),
    /// without pretrained weights.
    Vgg16Shape,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub stage_channels: [usize; 5],
    pub daspp_dilations: Vec<usize>,
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        EncoderConfig {
            variant: EncoderVariant::Tiny,
            stage_channels: [16, 24, 32, 48, 64],
            daspp_dilations: vec![3, 6, 12, 18],
        }
    }

    pub fn vgg16_shape() -> Self {
        EncoderConfig {
            variant: EncoderVariant::Vgg16Shape,
            stage_channels: [64, 128, 256, 512, 512],
            daspp_dilations: vec![3, 6, 12, 18],
        }
    }

    fn convs_per_stage(&self, stage: usize) -> usize {
        match self.variant {
            EncoderVariant::Tiny => 1,
            // VGG16: 2, 2, 3, 3, 3 convolutions per stage.
            EncoderVariant::Vgg16Shape => {
                if stage < 2 {
                    2
                } else {
                    3
                }
            }
        }
    }
}

/// Five-stage downsampling encoder; each stage halves the resolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Vec<ConvLayer>>,
}

impl Encoder {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        config: &EncoderConfig,
        init: Init,
    ) -> Self {
        let mut stages = Vec::with_capacity(5);
        let mut prev = in_ch;
        for (s, &ch) in config.stage_channels.iter().enumerate() {
            let mut convs = Vec::new();
            for c in 0..config.convs_per_stage(s) {
                // Tiny downsamples with the stride-2 conv itself; the VGG
                // plan keeps stride 1 and pools after the stage.
                let spec = if config.variant == EncoderVariant::Tiny {
                    Conv2dSpec::strided(3, 2)
                } else {
                    Conv2dSpec::unit(3)
                };
                convs.push(ConvLayer::new(
                    params,
                    rng,
                    &format!("{name}.s{s}.c{c}"),
                    if c == 0 { prev } else { ch },
                    ch,
                    spec,
                    init,
                ));
            }
            prev = ch;
            stages.push(convs);
        }
        Encoder {
            config: config.clone(),
            stages,
        }
    }

    /// Outputs of all five stages, at resolutions H/2 .. H/32.
    pub fn forward<'t>(
        &self,
        bound: &BoundParams<'t>,
        x: Var<'t>,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Vec<Var<'t>> {
        let mut outs = Vec::with_capacity(5);
        let mut cur = x;
        for stage in &self.stages {
            for conv in stage {
                cur = conv.forward_act(bound, cur);
            }
            if self.config.variant == EncoderVariant::Vgg16Shape {
                cur = max_pool2(cur);
            }
            cur = maybe_dropout(cur, dropout);
            outs.push(cur);
        }
        outs
    }
}

// ---------------------------------------------------------------------------
// Dense atrous pyramid
// ---------------------------------------------------------------------------

/// Dense ASPP block: atrous branches where each branch sees the stage input
/// concatenated with all earlier branch outputs, then a 1x1 fuse back to the
/// stage width.
#[derive(Clone, Debug)]
struct DenseAspp {
    branches: Vec<ConvLayer>,
    fuse: ConvLayer,
}

impl DenseAspp {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        dilations: &[usize],
        init: Init,
    ) -> Self {
        let growth = (ch / 4).max(4);
        let mut branches = Vec::with_capacity(dilations.len());
        for (i, &d) in dilations.iter().enumerate() {
            branches.push(ConvLayer::new(
                params,
                rng,
                &format!("{name}.d{d}"),
                ch + i * growth,
                growth,
                Conv2dSpec::dilated(3, d),
                init,
            ));
        }
        let fuse = ConvLayer::new(
            params,
            rng,
            &format!("{name}.fuse"),
            ch + dilations.len() * growth,
            ch,
            Conv2dSpec::unit(1),
            init,
        );
        DenseAspp { branches, fuse }
    }

    fn forward<'t>(&self, bound: &BoundParams<'t>, x: Var<'t>) -> Var<'t> {
        let mut feats = vec![x];
        for branch in &self.branches {
            let input = if feats.len() == 1 {
                feats[0]
            } else {
                concat_channels(&feats)
            };
            feats.push(branch.forward_act(bound, input));
        }
        self.fuse.forward_act(bound, concat_channels(&feats))
    }
}

// ---------------------------------------------------------------------------
// SaliencyNet
// ---------------------------------------------------------------------------

/// Encoder + per-stage dense atrous pyramid; all stages are resized to
/// H/8 x W/8, concatenated, and fused to the M-channel feature S^d.
#[derive(Clone, Debug)]
pub struct SaliencyNet {
    encoder: Encoder,
    aspp: Vec<DenseAspp>,
    head: ConvLayer,
    pub m: usize,
}

impl SaliencyNet {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        config: &EncoderConfig,
        m: usize,
        init: Init,
    ) -> Self {
        let encoder = Encoder::new(params, rng, "sal.enc", 4, config, init);
        let aspp = config
            .stage_channels
            .iter()
            .enumerate()
            .map(|(s, &ch)| {
                DenseAspp::new(
                    params,
                    rng,
                    &format!("sal.aspp{s}"),
                    ch,
                    &config.daspp_dilations,
                    init,
                )
            })
            .collect();
        let total: usize = config.stage_channels.iter().sum();
        let head = ConvLayer::new(
            params,
            rng,
            "sal.head",
            total,
            m,
            Conv2dSpec::unit(1),
            init,
        );
        SaliencyNet { encoder, aspp, head, m }
    }

    /// `x` is the 4-channel RGB+D' input `[4, H, W]` with H, W divisible
    /// by 8; output is `[M, H/8, W/8]`.
    pub fn forward<'t>(
        &self,
        bound: &BoundParams<'t>,
        x: Var<'t>,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        let (h, w) = (shape[1], shape[2]);
        if h % 8 != 0 || w % 8 != 0 || h < 32 || w < 32 {
            return Err(CoreError::Invalid(format!(
                "saliency input {h}x{w} must be divisible by 8 and at least 32"
            )));
        }
        let stages = self.encoder.forward(bound, x, dropout);
        let (th, tw) = (h / 8, w / 8);
        let resized: Vec<Var<'t>> = stages
            .iter()
            .zip(&self.aspp)
            .map(|(&s, aspp)| bilinear_resize(aspp.forward(bound, s), th, tw))
            .collect();
        Ok(self.head.forward_act(bound, concat_channels(&resized)))
    }
}

// ---------------------------------------------------------------------------
// DepthCorrectionNet
// ---------------------------------------------------------------------------

/// Encoder (same shape as SaliencyNet's, separate weights) plus a decoder of
/// four upsample+conv blocks, a 1x1 projection, bilinear resize to the input
/// size, and a sigmoid.
#[derive(Clone, Debug)]
pub struct DepthCorrectionNet {
    encoder: Encoder,
    decoder: Vec<ConvLayer>,
    head: ConvLayer,
}

impl DepthCorrectionNet {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        config: &EncoderConfig,
        init: Init,
    ) -> Self {
        let encoder = Encoder::new(params, rng, "dc.enc", 4, config, init);
        let chans = config.stage_channels;
        // Decoder channel plan mirrors the encoder: 64 -> 48 -> 32 -> 24 -> 16.
        let mut decoder = Vec::with_capacity(4);
        let mut prev = chans[4];
        for i in 0..4 {
            let out = chans[3 - i];
            decoder.push(ConvLayer::new(
                params,
                rng,
                &format!("dc.dec{i}"),
                prev,
                out,
                Conv2dSpec::unit(3),
                init,
            ));
            prev = out;
        }
        let head = ConvLayer::new(params, rng, "dc.head", prev, 1, Conv2dSpec::unit(1), init);
        DepthCorrectionNet {
            encoder,
            decoder,
            head,
        }
    }

    /// `x` is `[4, H, W]` (RGB + raw depth); output D' is `[H, W]` in [0, 1].
    pub fn forward<'t>(
        &self,
        bound: &BoundParams<'t>,
        x: Var<'t>,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        let (h, w) = (shape[1], shape[2]);
        if h % 8 != 0 || w % 8 != 0 || h < 32 || w < 32 {
            return Err(CoreError::Invalid(format!(
                "depth-correction input {h}x{w} must be divisible by 8 and at least 32"
            )));
        }
        let stages = self.encoder.forward(bound, x, dropout);
        let mut cur = *stages.last().expect("five stages");
        for conv in &self.decoder {
            let s = cur.shape();
            cur = bilinear_resize(cur, s[1] * 2, s[2] * 2);
            cur = conv.forward_act(bound, cur);
            cur = maybe_dropout(cur, dropout);
        }
        let logit = bilinear_resize(self.head.forward(bound, cur), h, w);
        Ok(squeeze_leading(logit).sigmoid())
    }
}

// ---------------------------------------------------------------------------
// PredictionNet
// ---------------------------------------------------------------------------

/// Persisted random channel permutation used to interleave deterministic and
/// stochastic features before the prediction head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPermutation {
    pub r: Vec<usize>,
}

impl MixPermutation {
    pub fn identity(n: usize) -> Self {
        MixPermutation {
            r: (0..n).collect(),
        }
    }

    /// Fisher-Yates shuffle of the identity, drawn from `rng` once at model
    /// initialization and persisted with the checkpoint.
    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut r: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            r.swap(i, j);
        }
        MixPermutation { r }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.r.len()];
        for (i, &v) in self.r.iter().enumerate() {
            inv[v] = i;
        }
        MixPermutation { r: inv }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.r.len()];
        for &v in &self.r {
            if v >= self.r.len() || seen[v] {
                return Err(CoreError::Invalid("r is not a permutation".into()));
            }
            seen[v] = true;
        }
        Ok(())
    }
}

/// Three 1x1 convolutions (K, K/2, 1 channels) over the mixed feature,
/// followed by bilinear upsampling to the full resolution.
#[derive(Clone, Debug)]
pub struct PredictionNet {
    c1: ConvLayer,
    c2: ConvLayer,
    c3: ConvLayer,
    pub k: usize,
    pub m: usize,
}

impl PredictionNet {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        k: usize,
        m: usize,
        init: Init,
    ) -> Self {
        assert!(k >= 2 && k % 2 == 0, "K must be even and at least 2");
        let c1 = ConvLayer::new(params, rng, "pred.c1", k + m, k, Conv2dSpec::unit(1), init);
        let c2 = ConvLayer::new(params, rng, "pred.c2", k, k / 2, Conv2dSpec::unit(1), init);
        let c3 = ConvLayer::new(params, rng, "pred.c3", k / 2, 1, Conv2dSpec::unit(1), init);
        PredictionNet { c1, c2, c3, k, m }
    }

    /// Concatenate S^d (M channels) with S^s (K channels), mix channels by
    /// `r`, and predict the `[H, W]` logit map. `dropout` covers the two
    /// hidden convolutions, the decoder half of the test-time-dropout
    /// baseline.
    pub fn forward<'t>(
        &self,
        bound: &BoundParams<'t>,
        sd: Var<'t>,
        ss: Var<'t>,
        r: &MixPermutation,
        out_h: usize,
        out_w: usize,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var<'t>> {
        if r.len() != self.k + self.m {
            return Err(CoreError::Invalid(format!(
                "permutation length {} != K+M = {}",
                r.len(),
                self.k + self.m
            )));
        }
        let ssd = concat_channels(&[sd, ss]);
        let msd = permute_channels(ssd, &r.r);
        let y = maybe_dropout(self.c1.forward_act(bound, msd), dropout);
        let y = maybe_dropout(self.c2.forward_act(bound, y), dropout);
        let logit = self.c3.forward(bound, y);
        Ok(squeeze_leading(bilinear_resize(logit, out_h, out_w)))
    }
}

/// Named dense outputs of one full forward pass, at value level.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    /// Deterministic feature S^d, `[M, H/8, W/8]`.
    pub sd: ArrayD<f64>,
    /// Stochastic feature S^s, `[K, H/8, W/8]`.
    pub ss: ArrayD<f64>,
    /// Refined depth D', `[H, W]` in [0, 1].
    pub dprime: Array2<f64>,
    /// Pre-activation saliency map, `[H, W]`.
    pub p_logit: Array2<f64>,
}
