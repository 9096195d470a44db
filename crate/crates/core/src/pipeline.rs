//! The end-to-end training loop, binary checkpointing, and multi-sample
//! inference that ties the networks, losses, and consensus together.
//!
//! Determinism contract: every random stream (weight init, epoch shuffling,
//! per-step annotation choice and latent noise) is derived from
//! `(config.seed, purpose tag, indices)` via [`derive_seed`], never shared
//! sequentially. Per-sample gradients are therefore independent of worker
//! count, and the batch reduction always sums in slot order, so training is
//! bit-reproducible with or without the `parallel` feature.

use crate::consensus::{consensus, PredictionSet};
use crate::dataset::{
    derive_seed, rgbd_input, rgbdy_input, to_intensity, DatasetManifest, RgbdSample,
};
use crate::latent::{
    expand_value, expand_with_noise, kl_divergence_var, GaussianLatent, LatentNet, LatentNetConfig,
};
use crate::losses::{bce_with_logits_mean, depth_loss, smoothness_loss, total_loss, LossWeights};
use crate::nets::{
    DepthCorrectionNet, EncoderConfig, EncoderVariant, FeatureMaps, MixPermutation, PredictionNet,
    SaliencyNet,
};
use crate::tensor::{
    concat_channels, stable_sigmoid, unsqueeze_leading, Arr, BoundParams, ParamSet, Tape, Var,
};
use crate::{CoreError, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Stream tags for [`derive_seed`]; distinct per purpose so no two streams
/// ever coincide.
pub(crate) const TAG_INIT: u64 = 0x01;
const TAG_SHUFFLE: u64 = 0x02;
const TAG_STEP: u64 = 0x03;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How one annotation is picked per sample per step when a sample carries
/// several (the augmented ground-truth sets hold four).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationStrategy {
    /// Uniformly at random each step; the default, which is what makes the
    /// learned conditional distribution multimodal.
    Uniform,
    /// Always the canonical annotation (index 0).
    GtOnly,
    /// Cycle through the annotations by step index.
    RoundRobin,
}

/// Everything the trainer needs, expressible as a flat TOML file. Loss
/// weights are flattened into the same namespace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Base learning rate; decays by `lr_decay_per_epoch` after each epoch.
    pub lr: f64,
    pub lr_decay_per_epoch: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Square input resolution; must be a multiple of 8 and at least 32.
    pub image_size: usize,
    /// First-moment coefficient of the adaptive-moment optimizer.
    pub momentum: f64,
    /// Std-dev of the normal weight initialization; biases start at zero.
    pub weight_init_std: f64,
    /// Latent dimensionality; even, because the mixed feature is split in
    /// half by the first prediction convolution.
    pub k: usize,
    /// Channel count of the deterministic feature S^d.
    pub m: usize,
    pub seed: u64,
    pub encoder: EncoderVariant,
    pub annotations: AnnotationStrategy,
    /// Optional hard cap on total optimizer steps, for short runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(flatten)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay_per_epoch: 0.9,
            epochs: 30,
            batch: 6,
            image_size: 352,
            momentum: 0.9,
            weight_init_std: 0.01,
            k: 8,
            m: 32,
            seed: 7,
            encoder: EncoderVariant::Vgg16Shape,
            annotations: AnnotationStrategy::Uniform,
            max_steps: None,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: 64x64 inputs on the tiny encoder.
    pub fn tiny(seed: u64) -> Self {
        TrainConfig {
            image_size: 64,
            encoder: EncoderVariant::Tiny,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        match self.encoder {
            EncoderVariant::Tiny => EncoderConfig::tiny(),
            EncoderVariant::Vgg16Shape => EncoderConfig::vgg16_shape(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad(format!(
                "lr_decay_per_epoch must lie in (0, 1], got {}",
                self.lr_decay_per_epoch
            ));
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be at least 1".into());
        }
        if self.image_size % 8 != 0 || self.image_size < 32 {
            return bad(format!(
                "image_size must be a multiple of 8 and at least 32, got {}",
                self.image_size
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_init_std.is_finite() && self.weight_init_std >= 0.0) {
            return bad(format!(
                "weight_init_std must be nonnegative, got {}",
                self.weight_init_std
            ));
        }
        if self.k < 2 || self.k % 2 != 0 {
            return bad(format!("K must be even and at least 2, got {}", self.k));
        }
        if self.m == 0 {
            return bad("M must be at least 1".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps, when set, must be at least 1".into());
        }
        let w = &self.weights;
        if w.lambda1 < 0.0 || w.lambda2 < 0.0 || w.alpha < 0.0 {
            return bad("loss weights lambda1, lambda2, alpha must be nonnegative".into());
        }
        if !(w.psi_eps > 0.0 && w.smoothl1_beta > 0.0) {
            return bad("psi_eps and smoothl1_beta must be positive".into());
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch: `lr * decay^(epoch-1)`, computed
    /// fresh each epoch rather than accumulated so the schedule is a pure
    /// function of the epoch number.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        assert!(epoch >= 1, "epochs are 1-based");
        self.lr * self.lr_decay_per_epoch.powi((epoch - 1) as i32)
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("cannot serialize config: {e}")))?;
        fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let config: TrainConfig = toml::from_str(&text)
            .map_err(|e| CoreError::Config(format!("cannot parse config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The full model: depth correction, deterministic saliency feature, latent
/// prior/posterior, and the mixing prediction head, all registered on one
/// [`ParamSet`] in a fixed order.
#[derive(Clone, Debug)]
pub struct SaliencyModel {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub depth_net: DepthCorrectionNet,
    pub saliency_net: SaliencyNet,
    pub prior_net: LatentNet,
    pub posterior_net: LatentNet,
    pub prediction_net: PredictionNet,
    /// Channel permutation drawn once at initialization and persisted.
    pub r: MixPermutation,
}

/// Detached loss components of one forward pass. `cvae` is the full
/// probabilistic objective (reconstruction plus divergence); `kl` is its
/// divergence share alone, logged separately so latent collapse is visible
/// in training logs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cvae: f64,
    pub kl: f64,
    pub depth: f64,
    pub smooth: f64,
}

impl LossParts {
    fn add_assign(&mut self, other: &LossParts) {
        self.total += other.total;
        self.cvae += other.cvae;
        self.kl += other.kl;
        self.depth += other.depth;
        self.smooth += other.smooth;
    }

    fn scaled(&self, f: f64) -> LossParts {
        LossParts {
            total: self.total * f,
            cvae: self.cvae * f,
            kl: self.kl * f,
            depth: self.depth * f,
            smooth: self.smooth * f,
        }
    }
}

impl SaliencyModel {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_INIT, 0));
        let enc = config.encoder_config();
        let std = config.weight_init_std;
        let depth_net = DepthCorrectionNet::new(&mut params, &mut rng, &enc, std);
        let saliency_net = SaliencyNet::new(&mut params, &mut rng, &enc, config.m, std);
        let prior_net = LatentNet::new(
            &mut params,
            &mut rng,
            "prior",
            LatentNetConfig::prior(config.k),
            std,
        );
        let posterior_net = LatentNet::new(
            &mut params,
            &mut rng,
            "post",
            LatentNetConfig::posterior(config.k),
            std,
        );
        let prediction_net = PredictionNet::new(&mut params, &mut rng, config.k, config.m, std);
        let r = MixPermutation::random(config.k + config.m, &mut rng);
        Ok(SaliencyModel {
            config: config.clone(),
            params,
            depth_net,
            saliency_net,
            prior_net,
            posterior_net,
            prediction_net,
            r,
        })
    }

    /// One full training forward on `tape`: refine depth, build the
    /// deterministic feature from RGB plus refined depth, infer prior
    /// (RGB+D) and posterior (RGB+D+Y) latents, expand the posterior with
    /// the supplied noise map, predict, and assemble the weighted total
    /// loss. Returns the loss node plus its detached components.
    pub fn loss_on_tape<'t>(
        &self,
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
        if eps.shape() != [self.config.k, th, tw] {
            return Err(CoreError::Shape {
                context: "latent noise map".into(),
                expected: format!("[{}, {th}, {tw}]", self.config.k),
                actual: format!("{:?}", eps.shape()),
            });
        }
        let ig = to_intensity(&sample.rgb)?.ig;
        let x4 = tape.leaf(rgbd_input(&sample.rgb, &sample.depth));
        let dprime = self.depth_net.forward(bound, x4, &mut None)?;
        let rgb = tape.leaf(sample.rgb.clone().into_dyn());
        let sal_in = concat_channels(&[rgb, unsqueeze_leading(dprime)]);
        let sd = self.saliency_net.forward(bound, sal_in, &mut None)?;
        let p = self.prior_net.forward(bound, x4)?;
        let q = self
            .posterior_net
            .forward(bound, tape.leaf(rgbdy_input(&sample.rgb, &sample.depth, y)))?;
        let ss = expand_with_noise(q, eps);
        let logit = self
            .prediction_net
            .forward(bound, sd, ss, &self.r, h, w, &mut None)?;
        // Same composition as `cvae_loss`, kept split so the KL share can be
        // recorded on its own.
        let kl = kl_divergence_var(q, p);
        let cvae = bce_with_logits_mean(logit, y).add(kl);
        let dl = depth_loss(dprime, &sample.depth, &ig, &self.config.weights);
        let sm = smoothness_loss(logit.sigmoid(), &ig, &self.config.weights);
        let total = total_loss(cvae, dl, sm, &self.config.weights);
        let parts = LossParts {
            total: total.scalar(),
            cvae: cvae.scalar(),
            kl: kl.scalar(),
            depth: dl.scalar(),
            smooth: sm.scalar(),
        };
        Ok((total, parts))
    }

    /// Noise-free loss against the canonical annotation; the quantity a
    /// checkpoint records and a loader must reproduce.
    pub fn deterministic_loss(&self, sample: &RgbdSample) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let eps = ArrayD::zeros(IxDyn(&[
            self.config.k,
            sample.height() / 8,
            sample.width() / 8,
        ]));
        let (_, parts) = self.loss_on_tape(&tape, &bound, sample, sample.gt(), &eps)?;
        Ok(parts.total)
    }

    /// Mean [`Self::deterministic_loss`] over a sample set.
    pub fn validation_loss(&self, samples: &[RgbdSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(CoreError::Invalid("validation over an empty set".into()));
        }
        let mut acc = 0.0;
        for s in samples {
            acc += self.deterministic_loss(s)?;
        }
        Ok(acc / samples.len() as f64)
    }

    /// The deterministic half of inference: refined depth D' and the
    /// deterministic feature S^d, both at value level.
    pub fn deterministic_maps(&self, sample: &RgbdSample) -> Result<(Array2<f64>, ArrayD<f64>)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x4 = tape.leaf(rgbd_input(&sample.rgb, &sample.depth));
        let dprime = self.depth_net.forward(&bound, x4, &mut None)?;
        let rgb = tape.leaf(sample.rgb.clone().into_dyn());
        let sal_in = concat_channels(&[rgb, unsqueeze_leading(dprime)]);
        let sd = self.saliency_net.forward(&bound, sal_in, &mut None)?;
        let d2 = dprime
            .value()
            .into_dimensionality()
            .expect("refined depth is 2-d");
        Ok((d2, sd.value()))
    }

    /// Refined depth map alone.
    pub fn refined_depth(&self, sample: &RgbdSample) -> Result<Array2<f64>> {
        Ok(self.deterministic_maps(sample)?.0)
    }

    /// Latent parameters inferred from RGB plus raw depth.
    pub fn prior_latent(&self, sample: &RgbdSample) -> Result<GaussianLatent> {
        self.prior_net
            .forward_value(&self.params, &rgbd_input(&sample.rgb, &sample.depth))
    }

    /// Prediction-head forward at value level for one stochastic feature.
    pub fn predict_logit(
        &self,
        sd: &ArrayD<f64>,
        ss: &ArrayD<f64>,
        h: usize,
        w: usize,
    ) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let logit = self.prediction_net.forward(
            &bound,
            tape.leaf(sd.clone()),
            tape.leaf(ss.clone()),
            &self.r,
            h,
            w,
            &mut None,
        )?;
        Ok(logit
            .value()
            .into_dimensionality()
            .expect("logit map is 2-d"))
    }

    /// All named inference maps for one latent draw.
    pub fn infer_features(
        &self,
        sample: &RgbdSample,
        rng: &mut ChaCha8Rng,
    ) -> Result<FeatureMaps> {
        let (h, w) = (sample.height(), sample.width());
        let (dprime, sd) = self.deterministic_maps(sample)?;
        let latent = self.prior_latent(sample)?;
        let ss = expand_value(&latent, h / 8, w / 8, rng);
        let p_logit = self.predict_logit(&sd, &ss, h, w)?;
        Ok(FeatureMaps {
            sd,
            ss,
            dprime,
            p_logit,
        })
    }

    /// Multi-sample inference: one prior forward fixes the latent Gaussian,
    /// then `c` independent expansions produce `c` gray maps that the
    /// consensus module fuses. With a collapsed prior (sigma = 0) all maps
    /// are identical by construction.
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
        let (h, w) = (sample.height(), sample.width());
        let (_, sd) = self.deterministic_maps(sample)?;
        let latent = self.prior_latent(sample)?;
        let mut maps = Vec::with_capacity(c);
        for _ in 0..c {
            let ss = expand_value(&latent, h / 8, w / 8, rng);
            let logit = self.predict_logit(&sd, &ss, h, w)?;
            maps.push(logit.mapv(stable_sigmoid));
        }
        consensus(&maps)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with bias correction. The paper-side contract
/// fixes the first-moment coefficient (0.9); the second moment and epsilon
/// use the customary 0.999 and 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64) -> Self {
        let zeros: Vec<Arr> = params
            .values()
            .iter()
            .map(|p| Arr::zeros(p.raw_dim()))
            .collect();
        Adam {
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update over all parameters; `grads` must be in registration
    /// order, as produced by [`BoundParams::grads`].
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Arr], lr: f64) {
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient list does not match optimizer state"
        );
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (g, m, v) = (&grads[i], &mut self.m[i], &mut self.v[i]);
            for ((pv, &gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One line of the JSONL training log: per-epoch means of the loss parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: f64,
    pub cvae: f64,
    pub kl: f64,
    pub depth: f64,
    pub smooth: f64,
}

/// Everything a finished run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SaliencyModel,
    /// Last epoch that ran (possibly partially, under `max_steps`).
    pub epochs_run: usize,
    pub logs: Vec<EpochLog>,
    /// Mean batch loss per optimizer step, for convergence assertions.
    pub step_losses: Vec<f64>,
    /// Deterministic validation loss of the final model over the training
    /// set; also recorded in the final checkpoint when one is written.
    pub final_val_loss: f64,
}

/// Train a fresh model. When `out_dir` is given, writes `train_log.jsonl`
/// plus one checkpoint per epoch (`epoch_NNN.ckpt`).
pub fn train(
    samples: &[RgbdSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = SaliencyModel::new(config)?;
    train_from(model, samples, out_dir, 1)
}

/// Load every sample behind a manifest and train on them.
pub fn train_manifest(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let samples = manifest.load_all()?;
    train(&samples, config, out_dir)
}

/// Run the training loop on an existing model starting at `start_epoch`
/// (1-based; later epochs see decayed learning rates). Optimizer moments
/// always start at zero: checkpoints store parameters, not Adam state, so a
/// resumed run is a warm restart rather than a bit-exact continuation.
pub fn train_from(
    model: SaliencyModel,
    samples: &[RgbdSample],
    out_dir: Option<&Path>,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    let run = run_training(model, samples, out_dir, start_epoch)?;
    Ok(TrainOutcome {
        model: run.model,
        epochs_run: run.epochs_run,
        logs: run.logs,
        step_losses: run.step_losses,
        final_val_loss: run.final_val_loss,
    })
}

/// The seam between the epoch loop and a model family. The CVAE pipeline and
/// the ablation baselines train through the same loop via this trait; only
/// the per-step loss graph, the validation quantity, and the end-of-epoch
/// artifact differ.
pub(crate) trait TrainSpec: Sync {
    fn config(&self) -> &TrainConfig;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Build one training loss on `tape`. `rng` is the per-(step, slot)
    /// stream, already advanced past the annotation choice; implementations
    /// draw whatever stochastic inputs they need from it.
    fn step_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        sample: &RgbdSample,
        y: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, LossParts)>;

    /// Deterministic loss over a sample set, recorded per epoch.
    fn validation_loss(&self, samples: &[RgbdSample]) -> Result<f64>;

    /// Persist an end-of-epoch artifact, if this family has one.
    fn save_epoch(&self, dir: &Path, epoch: usize, val_loss: f64) -> Result<()>;
}

impl TrainSpec for SaliencyModel {
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
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, LossParts)> {
        let mut eps = ArrayD::zeros(IxDyn(&[
            self.config.k,
            sample.height() / 8,
            sample.width() / 8,
        ]));
        for v in eps.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        self.loss_on_tape(tape, bound, sample, y, &eps)
    }

    fn validation_loss(&self, samples: &[RgbdSample]) -> Result<f64> {
        SaliencyModel::validation_loss(self, samples)
    }

    fn save_epoch(&self, dir: &Path, epoch: usize, val_loss: f64) -> Result<()> {
        save_checkpoint(
            &dir.join(format!("epoch_{epoch:03}.ckpt")),
            self,
            epoch,
            Some(val_loss),
        )
    }
}

/// What [`run_training`] hands back for any model family.
pub(crate) struct RunOutcome<M> {
    pub model: M,
    pub epochs_run: usize,
    pub logs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
    pub final_val_loss: f64,
}

/// The shared epoch loop: shuffle, batch, per-slot derived streams, slot-order
/// gradient reduction, Adam, logging, and per-epoch artifacts.
pub(crate) fn run_training<M: TrainSpec>(
    mut model: M,
    samples: &[RgbdSample],
    out_dir: Option<&Path>,
    start_epoch: usize,
) -> Result<RunOutcome<M>> {
    let config = model.config().clone();
    config.validate()?;
    if samples.is_empty() {
        return Err(CoreError::Invalid("training needs at least one sample".into()));
    }
    if start_epoch < 1 || start_epoch > config.epochs {
        return Err(CoreError::Invalid(format!(
            "start_epoch {start_epoch} outside 1..={}",
            config.epochs
        )));
    }
    for s in samples {
        s.validate()?;
        if s.height() != config.image_size || s.width() != config.image_size {
            return Err(CoreError::Invalid(format!(
                "sample {} is {}x{}, config expects {}x{}",
                s.id,
                s.height(),
                s.width(),
                config.image_size,
                config.image_size
            )));
        }
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some(fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?)
        }
        None => None,
    };

    let mut adam = Adam::new(model.params(), config.momentum);
    let mut logs = Vec::new();
    let mut step_losses = Vec::new();
    let mut global_step = 0usize;
    let mut done = false;

    for epoch in start_epoch..=config.epochs {
        let lr = config.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_SHUFFLE, epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.random_range(0..=i));
        }

        let mut epoch_acc = LossParts::default();
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(config.batch) {
            let step = global_step;
            let model_ref = &model;
            let job = |(slot, &si): (usize, &usize)| -> Result<(LossParts, Vec<Arr>)> {
                let sample = &samples[si];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed,
                    TAG_STEP,
                    ((step as u64) << 16) | slot as u64,
                ));
                let y = pick_annotation(sample, config.annotations, step, &mut rng);
                let tape = Tape::new();
                let bound = model_ref.params().bind(&tape);
                let (loss, parts) = model_ref.step_loss(&tape, &bound, sample, y, &mut rng)?;
                if !parts.total.is_finite() {
                    return Err(CoreError::NonFiniteLoss { step });
                }
                let grads = tape.backward(loss);
                Ok((parts, bound.grads(&grads)))
            };
            #[cfg(feature = "parallel")]
            let results: Vec<Result<(LossParts, Vec<Arr>)>> =
                chunk.par_iter().enumerate().map(job).collect();
            #[cfg(not(feature = "parallel"))]
            let results: Vec<Result<(LossParts, Vec<Arr>)>> =
                chunk.iter().enumerate().map(job).collect();

            // Reduce in slot order so the sum is worker-count independent.
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_parts = LossParts::default();
            let mut grad_acc: Vec<Arr> = model
                .params()
                .values()
                .iter()
                .map(|p| Arr::zeros(p.raw_dim()))
                .collect();
            for res in results {
                let (parts, grads) = res?;
                batch_parts.add_assign(&parts);
                for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                    *acc += g;
                }
            }
            for g in grad_acc.iter_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            let batch_mean = batch_parts.scaled(scale);
            adam.step(model.params_mut(), &grad_acc, lr);

            step_losses.push(batch_mean.total);
            epoch_acc.add_assign(&batch_mean);
            epoch_steps += 1;
            global_step += 1;
            if config.max_steps.is_some_and(|cap| global_step >= cap) {
                done = true;
                break;
            }
        }

        if !model.params().all_finite() {
            return Err(CoreError::Invalid(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let log = EpochLog {
            epoch,
            lr,
            steps: epoch_steps,
            loss: epoch_acc.total / epoch_steps.max(1) as f64,
            cvae: epoch_acc.cvae / epoch_steps.max(1) as f64,
            kl: epoch_acc.kl / epoch_steps.max(1) as f64,
            depth: epoch_acc.depth / epoch_steps.max(1) as f64,
            smooth: epoch_acc.smooth / epoch_steps.max(1) as f64,
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&log)?;
            writeln!(f, "{line}")
                .map_err(|e| CoreError::io(out_dir.expect("out_dir set").join("train_log.jsonl"), e))?;
        }
        logs.push(log);
        if let Some(dir) = out_dir {
            let val = model.validation_loss(samples)?;
            model.save_epoch(dir, epoch, val)?;
        }
        if done {
            break;
        }
    }

    let final_val_loss = model.validation_loss(samples)?;
    let epochs_run = logs.last().map(|l| l.epoch).unwrap_or(0);
    Ok(RunOutcome {
        model,
        epochs_run,
        logs,
        step_losses,
        final_val_loss,
    })
}

fn pick_annotation<'a>(
    sample: &'a RgbdSample,
    strategy: AnnotationStrategy,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> &'a Array2<f64> {
    let n = sample.annotations.len();
    let idx = match strategy {
        AnnotationStrategy::GtOnly => 0,
        AnnotationStrategy::Uniform => rng.random_range(0..n),
        AnnotationStrategy::RoundRobin => step % n,
    };
    &sample.annotations[idx]
}

/// Moving average with the given window; the convergence assertions in the
/// integration tests run on this rather than the raw step losses.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be at least 1");
    if losses.len() < window {
        return Vec::new();
    }
    let inv = 1.0 / window as f64;
    (0..=losses.len() - window)
        .map(|i| losses[i..i + window].iter().sum::<f64>() * inv)
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SALCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header preceding the raw parameter data. All random streams are
/// derived from `(config.seed, tag, indices)`, so `(config, epoch)` is the
/// complete generator state; no raw generator words need persisting.
#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    r: MixPermutation,
    epoch: usize,
    val_loss: Option<f64>,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

/// A checkpoint restored from disk.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: SaliencyModel,
    pub epoch: usize,
    /// Deterministic validation loss recorded at save time, if any.
    pub val_loss: Option<f64>,
}

/// Binary layout: magic, u32 version, u64 header length, JSON header, then
/// every parameter tensor as little-endian f64 in registration order.
pub fn save_checkpoint(
    path: &Path,
    model: &SaliencyModel,
    epoch: usize,
    val_loss: Option<f64>,
) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        r: model.r.clone(),
        epoch,
        val_loss,
        params: model
            .params
            .iter()
            .map(|(name, a)| ParamMeta {
                name: name.to_string(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes =
        Vec::with_capacity(20 + json.len() + 8 * model.params.scalar_count());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, a) in model.params.iter() {
        for &v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let fail = |reason: String| CoreError::Checkpoint {
        path: PathBuf::from(path),
        reason,
    };
    if bytes.len() < 20 {
        return Err(fail("file too short to hold a header".into()));
    }
    if &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic bytes; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize;
    if body + json_len > bytes.len() {
        return Err(fail("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[body..body + json_len])
        .map_err(|e| fail(format!("header is not valid JSON: {e}")))?;
    header
        .r
        .validate()
        .map_err(|_| fail("r is not a permutation".into()))?;
    if header.r.len() != header.config.k + header.config.m {
        return Err(fail(format!(
            "permutation length {} does not match K+M = {}",
            header.r.len(),
            header.config.k + header.config.m
        )));
    }
    let mut model = SaliencyModel::new(&header.config)?;
    if header.params.len() != model.params.len() {
        return Err(fail(format!(
            "checkpoint stores {} tensors, the model defines {}",
            header.params.len(),
            model.params.len()
        )));
    }
    model.r = header.r;
    let mut off = body + json_len;
    for meta in &header.params {
        let id = model
            .params
            .id_of(&meta.name)
            .ok_or_else(|| fail(format!("unknown tensor name {}", meta.name)))?;
        let target = model.params.value_mut(id);
        if target.shape() != meta.shape.as_slice() {
            return Err(fail(format!(
                "tensor {} has shape {:?}, expected {:?}",
                meta.name,
                meta.shape,
                target.shape()
            )));
        }
        let n = target.len();
        if off + 8 * n > bytes.len() {
            return Err(fail("truncated parameter data".into()));
        }
        for v in target.iter_mut() {
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
    }
    if off != bytes.len() {
        return Err(fail(format!(
            "{} trailing bytes after parameter data",
            bytes.len() - off
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        epoch: header.epoch,
        val_loss: header.val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_scene, SynthConfig};

    fn tiny_scenes(n: usize, size: usize, seed: u64) -> Vec<RgbdSample> {
        let config = SynthConfig {
            count: n,
            size,
            seed,
            ..SynthConfig::default()
        };
        (0..n).map(|i| synth_scene(&config, i)).collect()
    }

    fn test_config(size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            image_size: size,
            encoder: EncoderVariant::Tiny,
            k: 4,
            m: 8,
            batch: 2,
            epochs: 1,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_configs_validate_and_bad_ones_do_not() {
        TrainConfig::default().validate().expect("paper-scale defaults are valid");
        TrainConfig::tiny(3).validate().expect("tiny profile is valid");

        let cases: Vec<(&str, TrainConfig)> = vec![
            ("lr zero", TrainConfig { lr: 0.0, ..TrainConfig::tiny(1) }),
            ("decay zero", TrainConfig { lr_decay_per_epoch: 0.0, ..TrainConfig::tiny(1) }),
            ("decay above one", TrainConfig { lr_decay_per_epoch: 1.5, ..TrainConfig::tiny(1) }),
            ("odd K", TrainConfig { k: 5, ..TrainConfig::tiny(1) }),
            ("K below two", TrainConfig { k: 0, ..TrainConfig::tiny(1) }),
            ("size not multiple of 8", TrainConfig { image_size: 60, ..TrainConfig::tiny(1) }),
            ("zero batch", TrainConfig { batch: 0, ..TrainConfig::tiny(1) }),
        ];
        for (what, config) in cases {
            assert!(config.validate().is_err(), "{what} must be rejected");
        }
    }

    #[test]
    fn lr_schedule_matches_decimal_literals_exactly() {
        let config = TrainConfig::default();
        assert_eq!(config.lr_for_epoch(1), 1e-4);
        assert_eq!(config.lr_for_epoch(2), 9e-5);
        assert_eq!(config.lr_for_epoch(3), 8.1e-5);
    }

    #[test]
    fn config_toml_round_trip_and_sparse_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        let mut config = TrainConfig::tiny(11);
        config.lr = 2.5e-3;
        config.annotations = AnnotationStrategy::RoundRobin;
        config.max_steps = Some(40);
        config.weights.lambda1 = 0.45;
        config.save_toml(&path).unwrap();
        let back = TrainConfig::load_toml(&path).unwrap();
        assert_eq!(back, config, "TOML round trip preserves every field");

        let sparse = dir.path().join("sparse.toml");
        fs::write(&sparse, "lr = 0.002\nseed = 9\nannotations = \"gt-only\"\n").unwrap();
        let parsed = TrainConfig::load_toml(&sparse).unwrap();
        assert_eq!(parsed.lr, 0.002);
        assert_eq!(parsed.seed, 9);
        assert_eq!(parsed.annotations, AnnotationStrategy::GtOnly);
        assert_eq!(parsed.epochs, 30, "unset keys fall back to defaults");
        assert_eq!(parsed.weights, LossWeights::default());
    }

    #[test]
    fn model_construction_is_seed_deterministic() {
        let config = test_config(32, 5);
        let a = SaliencyModel::new(&config).unwrap();
        let b = SaliencyModel::new(&config).unwrap();
        assert_eq!(a.r, b.r, "same seed, same permutation");
        for ((na, va), (_, vb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(va, vb, "parameter {na} differs between identical seeds");
        }
        let c = SaliencyModel::new(&TrainConfig { seed: 6, ..config }).unwrap();
        let same = a
            .params
            .iter()
            .zip(c.params.iter())
            .all(|((_, va), (_, vb))| va == vb);
        assert!(!same, "different seeds must give different weights");
    }

    #[test]
    fn adam_first_step_size_is_lr_and_quadratic_converges() {
        // On dLoss/dx = x the first bias-corrected step is exactly lr in
        // magnitude (up to eps), for any gradient scale.
        let mut params = ParamSet::new();
        let id = params.register("x", ndarray::arr1(&[5.0, -3.0, 0.25]).into_dyn());
        let mut adam = Adam::new(&params, 0.9);
        let g0 = params.value(id).clone();
        adam.step(&mut params, &[g0], 0.1);
        for (&x, &x0) in params.value(id).iter().zip([5.0f64, -3.0, 0.25].iter()) {
            assert!(
                (x - (x0 - 0.1 * x0.signum())).abs() < 1e-6,
                "first step moves by ~lr: {x0} -> {x}"
            );
        }
        for _ in 0..300 {
            let g = params.value(id).clone();
            adam.step(&mut params, &[g], 0.1);
        }
        assert!(
            params.value(id).iter().all(|v| v.abs() < 1e-2),
            "quadratic minimum reached, got {:?}",
            params.value(id)
        );
    }

    #[test]
    fn deterministic_loss_is_reproducible_and_finite() {
        let samples = tiny_scenes(1, 32, 21);
        let model = SaliencyModel::new(&test_config(32, 3)).unwrap();
        let a = model.deterministic_loss(&samples[0]).unwrap();
        let b = model.deterministic_loss(&samples[0]).unwrap();
        assert!(a.is_finite() && a > 0.0, "fresh-model loss is positive, got {a}");
        assert_eq!(a, b, "no hidden randomness in the deterministic loss");
    }

    #[test]
    fn train_runs_are_bitwise_identical_for_equal_seeds() {
        let samples = tiny_scenes(4, 32, 33);
        let config = TrainConfig {
            max_steps: Some(3),
            ..test_config(32, 17)
        };
        let a = train(&samples, &config, None).unwrap();
        let b = train(&samples, &config, None).unwrap();
        assert_eq!(a.step_losses, b.step_losses, "identical loss trajectories");
        assert_eq!(
            a.final_val_loss.to_bits(),
            b.final_val_loss.to_bits(),
            "final losses agree bit for bit"
        );
        for ((name, va), (_, vb)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(va, vb, "parameter {name} diverged between identical runs");
        }
    }

    #[test]
    fn training_with_poisoned_weights_aborts_with_step_index() {
        let samples = tiny_scenes(2, 32, 41);
        let mut model = SaliencyModel::new(&test_config(32, 19)).unwrap();
        let id = model.params.id_of("pred.c3.w").expect("head weight exists");
        model.params.value_mut(id)[[0, 0, 0, 0]] = f64::NAN;
        let err = train_from(model, &samples, None, 1).unwrap_err();
        match err {
            CoreError::NonFiniteLoss { step } => assert_eq!(step, 0, "fails on the first step"),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn epoch_logs_and_checkpoints_land_in_out_dir() {
        let samples = tiny_scenes(3, 32, 55);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            epochs: 2,
            ..test_config(32, 23)
        };
        let outcome = train(&samples, &config, Some(dir.path())).unwrap();
        assert_eq!(outcome.epochs_run, 2);
        assert_eq!(outcome.logs.len(), 2);

        let text = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let lines: Vec<EpochLog> = text
            .lines()
            .map(|l| serde_json::from_str(l).expect("valid JSONL"))
            .collect();
        assert_eq!(lines.len(), 2, "one log line per epoch");
        for (i, log) in lines.iter().enumerate() {
            assert_eq!(log.epoch, i + 1);
            assert_eq!(log.lr, config.lr_for_epoch(i + 1), "logged lr follows the schedule");
            assert_eq!(log.steps, 2, "3 samples at batch 2 make 2 steps");
            assert!(log.loss.is_finite());
        }
        assert!(dir.path().join("epoch_001.ckpt").is_file());
        assert!(dir.path().join("epoch_002.ckpt").is_file());
    }

    #[test]
    fn short_training_reduces_the_loss() {
        let samples = tiny_scenes(2, 32, 77);
        let config = TrainConfig {
            lr: 3e-3,
            epochs: 30,
            max_steps: Some(30),
            annotations: AnnotationStrategy::GtOnly,
            ..test_config(32, 29)
        };
        let outcome = train(&samples, &config, None).unwrap();
        let first = outcome.step_losses[0];
        let last = *outcome.step_losses.last().unwrap();
        assert!(
            last < first,
            "loss after 30 steps ({last:.4}) should be below the first step ({first:.4})"
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_rejects_corruption() {
        let samples = tiny_scenes(1, 32, 91);
        let model = SaliencyModel::new(&test_config(32, 31)).unwrap();
        let val = model.validation_loss(&samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, 4, Some(val)).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 4);
        assert_eq!(loaded.val_loss, Some(val));
        assert_eq!(loaded.model.r, model.r, "permutation survives the round trip");
        assert_eq!(loaded.model.config, model.config);
        for ((name, va), (_, vb)) in model.params.iter().zip(loaded.model.params.iter()) {
            assert_eq!(va, vb, "tensor {name} not restored bit-exactly");
        }
        let reval = loaded.model.validation_loss(&samples).unwrap();
        assert!(
            (reval - val).abs() <= 1e-6,
            "recorded validation loss {val} not reproduced ({reval})"
        );

        // Version bump must be a hard error.
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        let vpath = dir.path().join("version.ckpt");
        fs::write(&vpath, &bytes).unwrap();
        let err = load_checkpoint(&vpath).unwrap_err();
        assert!(
            err.to_string().contains("version"),
            "version mismatch should say so, got: {err}"
        );

        // Truncation and bad magic are explicit format errors.
        let good = fs::read(&path).unwrap();
        let tpath = dir.path().join("trunc.ckpt");
        fs::write(&tpath, &good[..good.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&tpath),
            Err(CoreError::Checkpoint { .. })
        ));
        let mpath = dir.path().join("magic.ckpt");
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&mpath, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&mpath),
            Err(CoreError::Checkpoint { .. })
        ));
    }

    #[test]
    fn sample_predictions_rejects_zero_and_handles_single_draw() {
        let samples = tiny_scenes(1, 32, 101);
        let model = SaliencyModel::new(&test_config(32, 37)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(model.sample_predictions(&samples[0], 0, &mut rng).is_err());

        let set = model.sample_predictions(&samples[0], 1, &mut rng).unwrap();
        assert_eq!(set.gray.len(), 1);
        assert_eq!(
            set.majority, set.binary[0],
            "a single draw is its own majority"
        );
        for ((&g, &b), &c) in set.gray[0]
            .iter()
            .zip(set.binary[0].iter())
            .zip(set.consensus_gray.iter())
        {
            let expect = if b == 1.0 { g } else { 0.0 };
            assert_eq!(c, expect, "C=1 consensus copies the map where it voted 1");
        }
    }

    #[test]
    fn collapsed_prior_sigma_gives_identical_samples() {
        let samples = tiny_scenes(1, 32, 111);
        let mut config = test_config(32, 41);
        config.weight_init_std = 0.0;
        let mut model = SaliencyModel::new(&config).unwrap();
        // With zero weights the latent output equals the bias; forcing the
        // logvar half strongly negative underflows sigma to exactly 0.
        let id = model.params.id_of("prior.out.b").expect("prior bias");
        let bias = model.params.value_mut(id);
        for i in config.k..2 * config.k {
            bias[[i]] = -2000.0;
        }
        let latent = model.prior_latent(&samples[0]).unwrap();
        assert!(latent.sigma().iter().all(|&s| s == 0.0), "sigma collapsed");

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = model.sample_predictions(&samples[0], 4, &mut rng).unwrap();
        for c in 1..4 {
            assert_eq!(
                set.gray[0], set.gray[c],
                "zero-sigma prior must make all draws identical"
            );
        }
        assert_eq!(set.majority, set.binary[0]);
    }

    #[test]
    fn smoothed_window_means_are_correct() {
        let xs = [4.0, 2.0, 6.0, 0.0, 8.0];
        assert_eq!(smoothed(&xs, 2), vec![3.0, 4.0, 3.0, 4.0]);
        assert_eq!(smoothed(&xs, 5), vec![4.0]);
        assert!(smoothed(&xs[..1], 2).is_empty());
    }
}
