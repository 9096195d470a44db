//! Probabilistic-baseline ablations: the VAE variant (standard-normal
//! prior), multi-head decoders trained on the closest prediction,
//! Monte-Carlo test-time dropout, and the architecture with the depth
//! correction branch removed.
//!
//! All variants train through the same epoch loop as the main pipeline and
//! expose the same `sample_predictions` surface, so the consensus and metric
//! stages run unchanged when comparing them side by side.

use crate::consensus::{consensus, PredictionSet};
use crate::dataset::{derive_seed, rgbd_input, rgbdy_input, to_intensity, RgbdSample};
use crate::latent::{
    expand_value, expand_with_noise, kl_divergence_var, GaussianLatent, GaussianLatentVar,
};
use crate::losses::{bce_with_logits_mean, depth_loss, smoothness_loss, total_loss};
use crate::nets::{
    maybe_dropout, ConvLayer, DepthCorrectionNet, DropoutCtx, SaliencyNet,
};
use crate::pipeline::{
    run_training, train, EpochLog, LossParts, SaliencyModel, TrainConfig, TrainSpec, TAG_INIT,
};
use crate::tensor::{
    bilinear_resize, concat_channels, scalar, squeeze_leading, stable_sigmoid, unsqueeze_leading,
    Conv2dSpec, ParamSet, Tape, Var,
};
use crate::tensor::BoundParams;
use crate::{CoreError, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

// ---------------------------------------------------------------------------
// Variant configuration
// ---------------------------------------------------------------------------

/// Which model family an ablation run trains and samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// The full conditional model; the reference the others are compared to.
    #[serde(rename = "cvae")]
    Cvae,
    /// Latent prior fixed to a standard normal; the input-conditioned
    /// encoder plays the posterior role and the annotation never touches
    /// the latent path.
    #[serde(rename = "vae")]
    Vae,
    /// LatentNet removed; several decoder heads trained on whichever one is
    /// currently closest to the annotation.
    #[serde(rename = "mhead")]
    Mhead,
    /// LatentNet removed; stochasticity comes from dropout kept active at
    /// test time.
    #[serde(rename = "mcdropout")]
    McDropout,
    /// Depth correction branch removed; raw depth feeds the saliency
    /// encoder directly and the depth loss term is absent.
    #[serde(rename = "no-depthcorr")]
    NoDepthCorr,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Cvae => "cvae",
            Variant::Vae => "vae",
            Variant::Mhead => "mhead",
            Variant::McDropout => "mcdropout",
            Variant::NoDepthCorr => "no-depthcorr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cvae" => Ok(Variant::Cvae),
            "vae" => Ok(Variant::Vae),
            "mhead" => Ok(Variant::Mhead),
            "mcdropout" => Ok(Variant::McDropout),
            "no-depthcorr" => Ok(Variant::NoDepthCorr),
            other => Err(CoreError::Config(format!(
                "unknown variant {other:?}; expected cvae, vae, mhead, mcdropout, or no-depthcorr"
            ))),
        }
    }
}

/// Knobs of the baseline families. `heads` only matters for `mhead`;
/// `dropout_rate` and `dropout_samples` only for `mcdropout`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Decoder copies in the multi-head baseline.
    pub heads: usize,
    /// Probability of zeroing an activation in a stochastic test forward.
    pub dropout_rate: f64,
    /// Stochastic forwards fused per prediction set.
    pub dropout_samples: usize,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            variant: Variant::Cvae,
            heads: 5,
            dropout_rate: 0.1,
            dropout_samples: 5,
        }
    }
}

impl VariantConfig {
    pub fn for_variant(variant: Variant) -> Self {
        VariantConfig {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Mhead && self.heads < 2 {
            return Err(CoreError::Config(format!(
                "mhead needs at least 2 heads, got {}",
                self.heads
            )));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(CoreError::Config(format!(
                "dropout_rate must be inside (0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.dropout_samples < 1 {
            return Err(CoreError::Config(
                "dropout_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gaussian-latent variants (vae, no-depthcorr) on the shared SaliencyModel
// ---------------------------------------------------------------------------

/// Variant loss over the standard [`SaliencyModel`] parameter set.
///
/// `Vae`: the stochastic feature is drawn from the input-conditioned latent
/// net and the divergence pulls that net toward a standard normal; the
/// annotation-conditioned net never runs, so Y cannot reach the latent path.
///
/// `NoDepthCorr`: raw RGB-D feeds the saliency encoder, the correction
/// branch never runs, and the depth term is identically zero.
pub fn gaussian_variant_loss<'t>(
    model: &SaliencyModel,
    variant: Variant,
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    sample: &RgbdSample,
    y: &Array2<f64>,
    eps: &ArrayD<f64>,
) -> Result<(Var<'t>, LossParts)> {
    let (h, w) = (sample.height(), sample.width());
    if y.dim() != (h, w) {
        return Err(CoreError::Shape {
            context: "training annotation".into(),
            expected: format!("[{h}, {w}]"),
            actual: format!("{:?}", y.shape()),
        });
    }
    let (th, tw) = (h / 8, w / 8);
    if eps.shape() != [model.config.k, th, tw] {
        return Err(CoreError::Shape {
            context: "latent noise map".into(),
            expected: format!("[{}, {th}, {tw}]", model.config.k),
            actual: format!("{:?}", eps.shape()),
        });
    }
    let ig = to_intensity(&sample.rgb)?.ig;
    let weights = &model.config.weights;
    let x4 = tape.leaf(rgbd_input(&sample.rgb, &sample.depth));

    let (sd, dl, kl, ss) = match variant {
        Variant::Vae => {
            let dprime = model.depth_net.forward(bound, x4, &mut None)?;
            let rgb = tape.leaf(sample.rgb.clone().into_dyn());
            let sal_in = concat_channels(&[rgb, unsqueeze_leading(dprime)]);
            let sd = model.saliency_net.forward(bound, sal_in, &mut None)?;
            let z = model.prior_net.forward(bound, x4)?;
            let standard =
                GaussianLatentVar::leaf(tape, &GaussianLatent::standard(model.config.k));
            let kl = kl_divergence_var(z, standard);
            let ss = expand_with_noise(z, eps);
            let dl = depth_loss(dprime, &sample.depth, &ig, weights);
            (sd, dl, kl, ss)
        }
        Variant::NoDepthCorr => {
            let sd = model.saliency_net.forward(bound, x4, &mut None)?;
            let p = model.prior_net.forward(bound, x4)?;
            let q = model
                .posterior_net
                .forward(bound, tape.leaf(rgbdy_input(&sample.rgb, &sample.depth, y)))?;
            let kl = kl_divergence_var(q, p);
            let ss = expand_with_noise(q, eps);
            // The branch is gone entirely; a zero leaf keeps the weighted
            // total one expression for every variant.
            let dl = tape.leaf(scalar(0.0));
            (sd, dl, kl, ss)
        }
        other => {
            return Err(CoreError::Invalid(format!(
                "gaussian_variant_loss does not build {other}; \
                 cvae has loss_on_tape, headed variants have HeadedModel"
            )));
        }
    };

    let logit = model
        .prediction_net
        .forward(bound, sd, ss, &model.r, h, w, &mut None)?;
    let rec = bce_with_logits_mean(logit, y).add(kl);
    let sm = smoothness_loss(logit.sigmoid(), &ig, weights);
    let total = total_loss(rec, dl, sm, weights);
    let parts = LossParts {
        total: total.scalar(),
        cvae: rec.scalar(),
        kl: kl.scalar(),
        depth: dl.scalar(),
        smooth: sm.scalar(),
    };
    Ok((total, parts))
}

/// Deterministic (annotation = canonical GT, zero noise) variant loss.
pub fn gaussian_variant_deterministic_loss(
    model: &SaliencyModel,
    variant: Variant,
    sample: &RgbdSample,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let eps = ArrayD::zeros(IxDyn(&[
        model.config.k,
        sample.height() / 8,
        sample.width() / 8,
    ]));
    let (_, parts) = gaussian_variant_loss(model, variant, &tape, &bound, sample, sample.gt(), &eps)?;
    Ok(parts.total)
}

/// A [`SaliencyModel`] trained under a variant objective.
struct GaussianVariantTrainer {
    model: SaliencyModel,
    variant: Variant,
}

impl TrainSpec for GaussianVariantTrainer {
    fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    fn params(&self) -> &ParamSet {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.model.params
    }

    fn step_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        sample: &RgbdSample,
        y: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, LossParts)> {
        let mut eps = ArrayD::zeros(IxDyn(&[
            self.model.config.k,
            sample.height() / 8,
            sample.width() / 8,
        ]));
        for v in eps.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        gaussian_variant_loss(&self.model, self.variant, tape, bound, sample, y, &eps)
    }

    fn validation_loss(&self, samples: &[RgbdSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(CoreError::Invalid("validation over an empty set".into()));
        }
        let mut acc = 0.0;
        for s in samples {
            acc += gaussian_variant_deterministic_loss(&self.model, self.variant, s)?;
        }
        Ok(acc / samples.len() as f64)
    }

    fn save_epoch(&self, _dir: &Path, _epoch: usize, _val_loss: f64) -> Result<()> {
        // Variant runs log epochs but do not checkpoint: the checkpoint
        // format records the standard pipeline's objective, and a variant
        // comparison lives in its report, not in restored weights.
        Ok(())
    }
}

/// Deterministic saliency feature of the no-depth-correction variant: raw
/// RGB-D straight into the saliency encoder.
fn raw_depth_feature(model: &SaliencyModel, sample: &RgbdSample) -> Result<ArrayD<f64>> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let x4 = tape.leaf(rgbd_input(&sample.rgb, &sample.depth));
    let sd = model.saliency_net.forward(&bound, x4, &mut None)?;
    Ok(sd.value())
}

/// `sample_predictions` for the no-depth-correction wiring.
fn no_depthcorr_sample(
    model: &SaliencyModel,
    sample: &RgbdSample,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PredictionSet> {
    if c < 1 {
        return Err(CoreError::Invalid(
            "sampling needs at least one prediction (C >= 1)".into(),
        ));
    }
    let (h, w) = (sample.height(), sample.width());
    let sd = raw_depth_feature(model, sample)?;
    let latent = model.prior_latent(sample)?;
    let mut maps = Vec::with_capacity(c);
    for _ in 0..c {
        let ss = expand_value(&latent, h / 8, w / 8, rng);
        let logit = model.predict_logit(&sd, &ss, h, w)?;
        maps.push(logit.mapv(stable_sigmoid));
    }
    consensus(&maps)
}

// ---------------------------------------------------------------------------
// Multi-head reconstruction loss
// ---------------------------------------------------------------------------

/// Closest-prediction objective: the minimum over heads of the per-head mean
/// BCE. The gradient flows only to the first minimising head, so one decoder
/// specialises per sample while the others stay untouched.
pub fn mhead_loss<'t>(head_logits: &[Var<'t>], y: &Array2<f64>) -> Var<'t> {
    let bces = per_head_bces(head_logits, y);
    crate::tensor::min_of(&bces)
}

fn per_head_bces<'t>(head_logits: &[Var<'t>], y: &Array2<f64>) -> Vec<Var<'t>> {
    assert!(!head_logits.is_empty(), "mhead loss needs at least one head");
    head_logits
        .iter()
        .map(|&l| bce_with_logits_mean(l, y))
        .collect()
}

/// Index of the head [`mhead_loss`] routes its gradient to: the first
/// strict minimum, mirroring the winner rule of the min node.
fn winning_head(bces: &[Var<'_>]) -> usize {
    let mut best_i = 0;
    let mut best = f64::INFINITY;
    for (i, b) in bces.iter().enumerate() {
        let v = b.scalar();
        if v < best {
            best_i = i;
            best = v;
        }
    }
    best_i
}

// ---------------------------------------------------------------------------
// Latent-free headed model (mhead, mcdropout)
// ---------------------------------------------------------------------------

/// One decoder copy: three 1x1 convolutions over the deterministic feature,
/// upsampled to the full resolution. Mirrors the standard prediction head
/// with the stochastic channels removed.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    c1: ConvLayer,
    c2: ConvLayer,
    c3: ConvLayer,
}

impl PredictionHead {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        m: usize,
        init_std: f64,
    ) -> Self {
        let mid = (m / 2).max(1);
        let c1 = ConvLayer::new(params, rng, &format!("{name}.c1"), m, m, Conv2dSpec::unit(1), init_std);
        let c2 = ConvLayer::new(params, rng, &format!("{name}.c2"), m, mid, Conv2dSpec::unit(1), init_std);
        let c3 = ConvLayer::new(params, rng, &format!("{name}.c3"), mid, 1, Conv2dSpec::unit(1), init_std);
        PredictionHead { c1, c2, c3 }
    }

    /// `sd` is `[M, H/8, W/8]`; returns the `[H, W]` logit map. `dropout`
    /// covers the two hidden convolutions, the decoder half of the
    /// test-time-dropout baseline.
    pub fn forward<'t>(
        &self,
        bound: &BoundParams<'t>,
        sd: Var<'t>,
        out_h: usize,
        out_w: usize,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Var<'t> {
        let y = maybe_dropout(self.c1.forward_act(bound, sd), dropout);
        let y = maybe_dropout(self.c2.forward_act(bound, y), dropout);
        let logit = self.c3.forward(bound, y);
        squeeze_leading(bilinear_resize(logit, out_h, out_w))
    }
}

/// The latent-free architecture shared by the multi-head and MC-dropout
/// baselines: depth correction and the saliency encoder as in the standard
/// model, then one or more decoder heads on the deterministic feature.
pub struct HeadedModel {
    pub config: TrainConfig,
    pub variant: VariantConfig,
    pub params: ParamSet,
    pub depth_net: DepthCorrectionNet,
    pub saliency_net: SaliencyNet,
    pub heads: Vec<PredictionHead>,
}

impl HeadedModel {
    pub fn new(config: &TrainConfig, variant: &VariantConfig) -> Result<Self> {
        config.validate()?;
        variant.validate()?;
        let n_heads = match variant.variant {
            Variant::Mhead => variant.heads,
            Variant::McDropout => 1,
            other => {
                return Err(CoreError::Config(format!(
                    "HeadedModel covers mhead and mcdropout, not {other}"
                )));
            }
        };
        if config.m < 2 {
            return Err(CoreError::Config(format!(
                "headed decoders need M >= 2 feature channels, got {}",
                config.m
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_INIT, 0));
        let enc = config.encoder_config();
        let std = config.weight_init_std;
        let depth_net = DepthCorrectionNet::new(&mut params, &mut rng, &enc, std);
        let saliency_net = SaliencyNet::new(&mut params, &mut rng, &enc, config.m, std);
        let heads = (0..n_heads)
            .map(|i| PredictionHead::new(&mut params, &mut rng, &format!("head{i}"), config.m, std))
            .collect();
        Ok(HeadedModel {
            config: config.clone(),
            variant: *variant,
            params,
            depth_net,
            saliency_net,
            heads,
        })
    }

    /// Refined depth and deterministic feature; `dropout` reaches the
    /// saliency encoder only, never the depth branch.
    fn features<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        sample: &RgbdSample,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let x4 = tape.leaf(rgbd_input(&sample.rgb, &sample.depth));
        let dprime = self.depth_net.forward(bound, x4, &mut None)?;
        let rgb = tape.leaf(sample.rgb.clone().into_dyn());
        let sal_in = concat_channels(&[rgb, unsqueeze_leading(dprime)]);
        let sd = self.saliency_net.forward(bound, sal_in, dropout)?;
        Ok((dprime, sd))
    }

    /// Full training loss: closest-head BCE, depth objective, and the
    /// smoothness term on the winning head's prediction, so every gradient
    /// path respects the winner-takes-all rule.
    pub fn loss_on_tape<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        sample: &RgbdSample,
        y: &Array2<f64>,
    ) -> Result<(Var<'t>, LossParts)> {
        let (h, w) = (sample.height(), sample.width());
        if y.dim() != (h, w) {
            return Err(CoreError::Shape {
                context: "training annotation".into(),
                expected: format!("[{h}, {w}]"),
                actual: format!("{:?}", y.shape()),
            });
        }
        let ig = to_intensity(&sample.rgb)?.ig;
        let weights = &self.config.weights;
        let (dprime, sd) = self.features(tape, bound, sample, &mut None)?;
        let logits: Vec<Var<'t>> = self
            .heads
            .iter()
            .map(|head| head.forward(bound, sd, h, w, &mut None))
            .collect();
        let bces = per_head_bces(&logits, y);
        let winner = winning_head(&bces);
        let rec = crate::tensor::min_of(&bces);
        let dl = depth_loss(dprime, &sample.depth, &ig, weights);
        let sm = smoothness_loss(logits[winner].sigmoid(), &ig, weights);
        let total = total_loss(rec, dl, sm, weights);
        let parts = LossParts {
            total: total.scalar(),
            cvae: rec.scalar(),
            kl: 0.0,
            depth: dl.scalar(),
            smooth: sm.scalar(),
        };
        Ok((total, parts))
    }

    /// Deterministic per-sample loss (canonical GT annotation).
    pub fn deterministic_loss(&self, sample: &RgbdSample) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let (_, parts) = self.loss_on_tape(&tape, &bound, sample, sample.gt())?;
        Ok(parts.total)
    }

    /// One gray prediction map from the given head, with optional dropout
    /// through the saliency encoder and that head's hidden convolutions.
    fn head_prediction(
        &self,
        sample: &RgbdSample,
        head: usize,
        dropout_rate: Option<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>> {
        let (h, w) = (sample.height(), sample.width());
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut ctx = dropout_rate.map(|rate| DropoutCtx { rate, rng });
        let (_, sd) = self.features(&tape, &bound, sample, &mut ctx)?;
        let logit = self.heads[head].forward(&bound, sd, h, w, &mut ctx);
        let map: Array2<f64> = logit
            .value()
            .into_dimensionality()
            .expect("logit map is 2-d");
        Ok(map.mapv(stable_sigmoid))
    }

    /// Multi-sample inference through the shared consensus interface.
    ///
    /// `mhead`: prediction `i` comes from head `i mod heads`; the heads are
    /// deterministic, so `c` beyond the head count only repeats maps.
    /// `mcdropout`: `c` stochastic forwards with dropout live at the
    /// configured rate.
    pub fn sample_predictions(
        &self,
        sample: &RgbdSample,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PredictionSet> {
        if c < 1 {
            return Err(CoreError::Invalid(
                "sampling needs at least one prediction (C >= 1)".into(),
            ));
        }
        let maps: Vec<Array2<f64>> = match self.variant.variant {
            Variant::Mhead => (0..c)
                .map(|i| self.head_prediction(sample, i % self.heads.len(), None, rng))
                .collect::<Result<_>>()?,
            Variant::McDropout => (0..c)
                .map(|_| self.head_prediction(sample, 0, Some(self.variant.dropout_rate), rng))
                .collect::<Result<_>>()?,
            other => {
                return Err(CoreError::Invalid(format!(
                    "HeadedModel cannot sample as {other}"
                )));
            }
        };
        consensus(&maps)
    }
}

/// Monte-Carlo dropout inference at an explicit rate and count, feeding the
/// shared consensus module. `rate = 0` degenerates to identical forwards.
pub fn mcdropout_sample(
    model: &HeadedModel,
    sample: &RgbdSample,
    n: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PredictionSet> {
    if model.variant.variant != Variant::McDropout {
        return Err(CoreError::Invalid(format!(
            "mcdropout_sample needs an mcdropout model, got {}",
            model.variant.variant
        )));
    }
    if n < 1 {
        return Err(CoreError::Invalid(
            "sampling needs at least one prediction (C >= 1)".into(),
        ));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(CoreError::Invalid(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    let maps: Vec<Array2<f64>> = (0..n)
        .map(|_| model.head_prediction(sample, 0, Some(rate), rng))
        .collect::<Result<_>>()?;
    consensus(&maps)
}

impl TrainSpec for HeadedModel {
    fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn step_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        sample: &RgbdSample,
        y: &Array2<f64>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, LossParts)> {
        // Training is dry for both headed families; dropout is a test-time
        // device in the MC baseline.
        self.loss_on_tape(tape, bound, sample, y)
    }

    fn validation_loss(&self, samples: &[RgbdSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(CoreError::Invalid("validation over an empty set".into()));
        }
        let mut acc = 0.0;
        for s in samples {
            acc += self.deterministic_loss(s)?;
        }
        Ok(acc / samples.len() as f64)
    }

    fn save_epoch(&self, _dir: &Path, _epoch: usize, _val_loss: f64) -> Result<()> {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Unified variant training and sampling
// ---------------------------------------------------------------------------

/// A trained model of any variant, behind one sampling surface.
pub enum VariantModel {
    Gaussian {
        model: SaliencyModel,
        variant: Variant,
    },
    Headed(HeadedModel),
}

impl VariantModel {
    pub fn variant(&self) -> Variant {
        match self {
            VariantModel::Gaussian { variant, .. } => *variant,
            VariantModel::Headed(h) => h.variant.variant,
        }
    }

    /// Draw `c` predictions and fuse them; identical call shape for every
    /// variant so consensus and metric code never branches.
    pub fn sample_predictions(
        &self,
        sample: &RgbdSample,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PredictionSet> {
        match self {
            VariantModel::Gaussian { model, variant } => match variant {
                // The VAE samples its latent exactly like the conditional
                // model at test time; they differ only in training.
                Variant::Cvae | Variant::Vae => model.sample_predictions(sample, c, rng),
                Variant::NoDepthCorr => no_depthcorr_sample(model, sample, c, rng),
                other => Err(CoreError::Invalid(format!(
                    "Gaussian variant model cannot sample as {other}"
                ))),
            },
            VariantModel::Headed(h) => h.sample_predictions(sample, c, rng),
        }
    }

    /// Refined depth where the variant has a correction branch.
    pub fn refined_depth(&self, sample: &RgbdSample) -> Result<Option<Array2<f64>>> {
        match self {
            VariantModel::Gaussian { variant, .. } if *variant == Variant::NoDepthCorr => Ok(None),
            VariantModel::Gaussian { model, .. } => model.refined_depth(sample).map(Some),
            VariantModel::Headed(h) => {
                let tape = Tape::new();
                let bound = h.params.bind(&tape);
                let (dprime, _) = h.features(&tape, &bound, sample, &mut None)?;
                Ok(Some(
                    dprime
                        .value()
                        .into_dimensionality()
                        .expect("refined depth is 2-d"),
                ))
            }
        }
    }
}

/// Outcome of one variant run, mirroring the pipeline's `TrainOutcome`.
pub struct VariantOutcome {
    pub model: VariantModel,
    pub epochs_run: usize,
    pub logs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
    pub final_val_loss: f64,
}

/// Train any variant through the shared epoch loop. Only the `cvae` variant
/// writes checkpoints; every variant writes the JSONL epoch log when
/// `out_dir` is given.
pub fn train_variant(
    samples: &[RgbdSample],
    config: &TrainConfig,
    vc: &VariantConfig,
    out_dir: Option<&Path>,
) -> Result<VariantOutcome> {
    vc.validate()?;
    match vc.variant {
        Variant::Cvae => {
            let run = train(samples, config, out_dir)?;
            Ok(VariantOutcome {
                model: VariantModel::Gaussian {
                    model: run.model,
                    variant: Variant::Cvae,
                },
                epochs_run: run.epochs_run,
                logs: run.logs,
                step_losses: run.step_losses,
                final_val_loss: run.final_val_loss,
            })
        }
        Variant::Vae | Variant::NoDepthCorr => {
            let trainer = GaussianVariantTrainer {
                model: SaliencyModel::new(config)?,
                variant: vc.variant,
            };
            let run = run_training(trainer, samples, out_dir, 1)?;
            Ok(VariantOutcome {
                model: VariantModel::Gaussian {
                    model: run.model.model,
                    variant: run.model.variant,
                },
                epochs_run: run.epochs_run,
                logs: run.logs,
                step_losses: run.step_losses,
                final_val_loss: run.final_val_loss,
            })
        }
        Variant::Mhead | Variant::McDropout => {
            let model = HeadedModel::new(config, vc)?;
            let run = run_training(model, samples, out_dir, 1)?;
            Ok(VariantOutcome {
                model: VariantModel::Headed(run.model),
                epochs_run: run.epochs_run,
                logs: run.logs,
                step_losses: run.step_losses,
                final_val_loss: run.final_val_loss,
            })
        }
    }
}
