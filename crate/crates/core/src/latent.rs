//! The latent-variable machinery: PriorNet and PosteriorNet (shared
//! "LatentNet" structure), the diagonal-Gaussian latent space with its
//! closed-form KL divergence, and the 2-D noise-map Feature Expanding that
//! turns a latent draw into the stochastic feature S^s.

use crate::nets::{ConvLayer, Init, LinearLayer};
use crate::tensor::{
    global_avg_pool, slice1d, Arr, BoundParams, Conv2dSpec, ParamSet, Tape, Var,
};
use crate::{CoreError, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Parameters of a K-dimensional diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Array1<f64>, logvar: Array1<f64>) -> Result<Self> {
        if mu.len() != logvar.len() || mu.is_empty() {
            return Err(CoreError::Invalid(
                "mu and logvar must have equal nonzero length".into(),
            ));
        }
        let g = GaussianLatent { mu, logvar };
        if !g.sigma().iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(CoreError::Invalid("sigma must be positive and finite".into()));
        }
        Ok(g)
    }

    pub fn standard(k: usize) -> Self {
        GaussianLatent {
            mu: Array1::zeros(k),
            logvar: Array1::zeros(k),
        }
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Array1<f64> {
        self.logvar.mapv(|lv| (0.5 * lv).exp())
    }
}

/// Closed-form KL(q || p) for diagonal Gaussians, summed over dimensions.
pub fn kl_divergence(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64> {
    if q.k() != p.k() {
        return Err(CoreError::Invalid(format!(
            "KL dimension mismatch: {} vs {}",
            q.k(),
            p.k()
        )));
    }
    let mut total = 0.0;
    for i in 0..q.k() {
        let (mq, lq) = (q.mu[i], q.logvar[i]);
        let (mp, lp) = (p.mu[i], p.logvar[i]);
        total += 0.5 * ((lq - lp).exp() + (mq - mp).powi(2) * (-lp).exp() - 1.0 + lp - lq);
    }
    Ok(total)
}

/// Monte-Carlo estimate of KL(q || p) as E_q[log q(z) - log p(z)].
/// Slow; used as an independent oracle for the closed form.
pub fn kl_divergence_monte_carlo(
    q: &GaussianLatent,
    p: &GaussianLatent,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let k = q.k();
    let sq = q.sigma();
    let sp = p.sigma();
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut log_q = 0.0;
        let mut log_p = 0.0;
        for i in 0..k {
            let eps: f64 = rng.sample(StandardNormal);
            let z = q.mu[i] + sq[i] * eps;
            log_q += gaussian_log_pdf(z, q.mu[i], sq[i]);
            log_p += gaussian_log_pdf(z, p.mu[i], sp[i]);
        }
        acc += log_q - log_p;
    }
    acc / samples as f64
}

fn gaussian_log_pdf(z: f64, mu: f64, sigma: f64) -> f64 {
    let d = (z - mu) / sigma;
    -0.5 * d * d - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Tape-level latent parameters, kept as two K-vectors so gradients flow
/// into the encoder that produced them.
#[derive(Clone, Copy)]
pub struct GaussianLatentVar<'t> {
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
}

impl<'t> GaussianLatentVar<'t> {
    pub fn detach(&self) -> GaussianLatent {
        GaussianLatent {
            mu: self
                .mu
                .value()
                .into_dimensionality()
                .expect("mu is a vector"),
            logvar: self
                .logvar
                .value()
                .into_dimensionality()
                .expect("logvar is a vector"),
        }
    }

    /// Leaf copy of a value-level latent (no gradient into any encoder).
    pub fn leaf(tape: &'t Tape, g: &GaussianLatent) -> Self {
        GaussianLatentVar {
            mu: tape.leaf(g.mu.clone().into_dyn()),
            logvar: tape.leaf(g.logvar.clone().into_dyn()),
        }
    }
}

/// Closed-form KL between two tape-level Gaussians; returns a scalar node so
/// gradients reach both sets of parameters.
pub fn kl_divergence_var<'t>(
    q: GaussianLatentVar<'t>,
    p: GaussianLatentVar<'t>,
) -> Var<'t> {
    // 0.5 * sum( exp(lq-lp) + (mq-mp)^2 * exp(-lp) - 1 + lp - lq )
    let ratio = q.logvar.sub(p.logvar).exp();
    let sq_term = q.mu.sub(p.mu).square().mul(p.logvar.neg().exp());
    ratio
        .add(sq_term)
        .add_scalar(-1.0)
        .add(p.logvar.sub(q.logvar))
        .sum()
        .mul_scalar(0.5)
}

/// Configuration for the five-stage latent encoders.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentNetConfig {
    pub k: usize,
    pub conv_channels: [usize; 5],
    /// 4 for the prior (RGB+D), 5 for the posterior (RGB+D+Y).
    pub input_channels: usize,
}

impl LatentNetConfig {
    pub fn prior(k: usize) -> Self {
        LatentNetConfig {
            k,
            conv_channels: [8, 16, 16, 32, 32],
            input_channels: 4,
        }
    }

    pub fn posterior(k: usize) -> Self {
        LatentNetConfig {
            input_channels: 5,
            ..Self::prior(k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::Config("latent K must be >= 1".into()));
        }
        if self.input_channels != 4 && self.input_channels != 5 {
            return Err(CoreError::Config(
                "latent input_channels must be 4 (prior) or 5 (posterior)".into(),
            ));
        }
        Ok(())
    }
}

/// Five stride-2 convolutions, a 1x1 conv to 4K channels, global average
/// pooling, and a linear map to the 2K values (mu, logvar).
#[derive(Clone, Debug)]
pub struct LatentNet {
    stages: Vec<ConvLayer>,
    to_4k: ConvLayer,
    out: LinearLayer,
    pub config: LatentNetConfig,
}

impl LatentNet {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: LatentNetConfig,
        init: Init,
    ) -> Self {
        config.validate().expect("invalid latent config");
        let mut stages = Vec::with_capacity(5);
        let mut prev = config.input_channels;
        for (s, &ch) in config.conv_channels.iter().enumerate() {
            stages.push(ConvLayer::new(
                params,
                rng,
                &format!("{name}.s{s}"),
                prev,
                ch,
                Conv2dSpec::strided(3, 2),
                init,
            ));
            prev = ch;
        }
        let k = config.k;
        let to_4k = ConvLayer::new(
            params,
            rng,
            &format!("{name}.c1_4k"),
            prev,
            4 * k,
            Conv2dSpec::unit(1),
            init_std,
        );
        let out = LinearLayer::new(params, rng, &format!("{name}.out"), 4 * k, 2 * k, init);
        LatentNet {
            stages,
            to_4k,
            out,
            config,
        }
    }

    /// Forward to latent parameters. `x` is `[input_channels, H, W]` with
    /// min(H, W) >= 32 so five halvings stay nonempty.
    pub fn forward<'t>(
        &self,
        bound: &BoundParams<'t>,
        x: Var<'t>,
    ) -> Result<GaussianLatentVar<'t>> {
        let shape = x.shape();
        if shape[0] != self.config.input_channels {
            return Err(CoreError::Invalid(format!(
                "latent input has {} channels, expected {}",
                shape[0], self.config.input_channels
            )));
        }
        if shape[1] < 32 || shape[2] < 32 {
            return Err(CoreError::Invalid(format!(
                "latent input {}x{} too small for five downsamplings",
                shape[1], shape[2]
            )));
        }
        let mut cur = x;
        for conv in &self.stages {
            cur = conv.forward_act(bound, cur);
        }
        let features = self.to_4k.forward_act(bound, cur);
        let pooled = global_avg_pool(features);
        let out = self.out.forward(bound, pooled);
        let k = self.config.k;
        Ok(GaussianLatentVar {
            mu: slice1d(out, 0, k),
            logvar: slice1d(out, k, k),
        })
    }

    /// Value-level forward for inference.
    pub fn forward_value(&self, params: &ParamSet, x: &ArrayD<f64>) -> Result<GaussianLatent> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let latent = self.forward(&bound, tape.leaf(x.clone()))?;
        Ok(latent.detach())
    }
}

/// Feature Expanding: broadcast each latent dimension into an H x W channel
/// through a 2-D standard-normal noise map, reparameterized so gradients
/// reach mu and logvar. `S^s[k] = sigma_k * eps_k + mu_k`.
pub fn expand<'t>(
    latent: GaussianLatentVar<'t>,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Var<'t> {
    let k = latent.mu.shape()[0];
    let mut eps = ArrayD::zeros(IxDyn(&[k, height, width]));
    for v in eps.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    expand_with_noise(latent, &eps)
}

/// Deterministic core of [`expand`] with the noise map supplied by the
/// caller; also used to force zero noise at test time.
pub fn expand_with_noise<'t>(latent: GaussianLatentVar<'t>, eps: &ArrayD<f64>) -> Var<'t> {
    let tape = latent.mu.tape;
    let k = latent.mu.shape()[0];
    assert_eq!(eps.shape()[0], k, "noise map must have K channels");
    let (h, w) = (eps.shape()[1], eps.shape()[2]);
    let value = tape.with_values2(latent.mu.id, latent.logvar.id, |mu, lv| {
        let mut out = ArrayD::zeros(IxDyn(&[k, h, w]));
        for ki in 0..k {
            let sigma = (0.5 * lv[[ki]]).exp();
            let m = mu[[ki]];
            for y in 0..h {
                for x in 0..w {
                    out[[ki, y, x]] = sigma * eps[[ki, y, x]] + m;
                }
            }
        }
        out
    });
    let eps = eps.clone();
    tape.push(
        value,
        vec![latent.mu.id, latent.logvar.id],
        Some(Box::new(move |g, parents, _| {
            let lv = parents[1];
            let mut dmu = Arr::zeros(IxDyn(&[k]));
            let mut dlv = Arr::zeros(IxDyn(&[k]));
            for ki in 0..k {
                let sigma = (0.5 * lv[[ki]]).exp();
                let mut gm = 0.0;
                let mut gs = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let gv = g[[ki, y, x]];
                        gm += gv;
                        gs += gv * eps[[ki, y, x]];
                    }
                }
                dmu[[ki]] = gm;
                // d sigma / d logvar = 0.5 * sigma
                dlv[[ki]] = gs * 0.5 * sigma;
            }
            vec![dmu, dlv]
        })),
    )
}

/// Value-level expansion for inference sampling.
pub fn expand_value(
    latent: &GaussianLatent,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayD<f64> {
    let k = latent.k();
    let sigma = latent.sigma();
    let mut out = ArrayD::zeros(IxDyn(&[k, height, width]));
    for ki in 0..k {
        for y in 0..height {
            for x in 0..width {
                let eps: f64 = rng.sample(StandardNormal);
                out[[ki, y, x]] = sigma[ki] * eps + latent.mu[ki];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use ndarray::array;
    use rand::SeedableRng;

    fn g(mu: &[f64], logvar: &[f64]) -> GaussianLatent {
        GaussianLatent::new(Array1::from(mu.to_vec()), Array1::from(logvar.to_vec())).unwrap()
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let q = g(&[0.3, -1.0, 2.0], &[0.1, -0.4, 0.9]);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_anchor() {
        // KL(N(1,1) || N(0,1)) = 0.5
        let q = g(&[1.0], &[0.0]);
        let p = g(&[0.0], &[0.0]);
        assert!((kl_divergence(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_variance_four_anchor() {
        // KL(N(0,4) || N(0,1)) = 0.5*(4 - 1 - ln 4) = 0.806852...
        let q = g(&[0.0], &[4.0f64.ln()]);
        let p = g(&[0.0], &[0.0]);
        let expect = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((kl_divergence(&q, &p).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_matches_monte_carlo_oracle_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let q = g(&[0.7, -0.3], &[0.4, -0.8]);
        let p = g(&[-0.2, 0.5], &[0.0, 0.6]);
        let exact = kl_divergence(&q, &p).unwrap();
        let mc = kl_divergence_monte_carlo(&q, &p, 200_000, &mut rng);
        assert!(
            (mc - exact).abs() / exact.max(1.0) < 2e-2,
            "MC {mc} vs closed form {exact}"
        );
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let k = rng.random_range(1..=8usize);
            let draw = |rng: &mut ChaCha8Rng| {
                let mu = Array1::from_shape_fn(k, |_| rng.random_range(-2.0..2.0));
                let lv = Array1::from_shape_fn(k, |_| rng.random_range(-2.0..2.0));
                GaussianLatent::new(mu, lv).unwrap()
            };
            let q = draw(&mut rng);
            let p = draw(&mut rng);
            let kl = kl_divergence(&q, &p).unwrap();
            assert!(kl >= 0.0, "KL must be nonnegative, got {kl}");
            if q != p {
                assert!(kl > 0.0, "KL is zero only for equal parameters");
            }
        }
    }

    #[test]
    fn kl_var_gradients_match_finite_differences() {
        let build = |inputs: &[Arr]| -> f64 {
            let tape = Tape::new();
            let q = GaussianLatentVar {
                mu: tape.leaf(inputs[0].clone()),
                logvar: tape.leaf(inputs[1].clone()),
            };
            let p = GaussianLatentVar {
                mu: tape.leaf(inputs[2].clone()),
                logvar: tape.leaf(inputs[3].clone()),
            };
            kl_divergence_var(q, p).scalar()
        };
        let inputs = [
            array![0.5, -0.2, 1.1].into_dyn(),
            array![0.3, -0.6, 0.2].into_dyn(),
            array![-0.4, 0.8, 0.0].into_dyn(),
            array![0.1, 0.4, -0.5].into_dyn(),
        ];
        let tape = Tape::new();
        let q = GaussianLatentVar {
            mu: tape.leaf(inputs[0].clone()),
            logvar: tape.leaf(inputs[1].clone()),
        };
        let p = GaussianLatentVar {
            mu: tape.leaf(inputs[2].clone()),
            logvar: tape.leaf(inputs[3].clone()),
        };
        let kl = kl_divergence_var(q, p);
        assert!(
            (kl.scalar() - kl_divergence(&q.detach(), &p.detach()).unwrap()).abs() < 1e-12,
            "tape and value KL agree"
        );
        let grads = tape.backward(kl);
        let analytic = [
            grads.wrt(q.mu),
            grads.wrt(q.logvar),
            grads.wrt(p.mu),
            grads.wrt(p.logvar),
        ];
        let numeric = gradcheck::finite_diff(&build, &inputs);
        let err = gradcheck::max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "KL gradcheck: {err}");
    }

    #[test]
    fn latent_net_zero_weights_give_standard_gaussian() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = LatentNet::new(&mut params, &mut rng, "prior", LatentNetConfig::prior(8), Init::Std(0.0));
        let x = ArrayD::from_elem(IxDyn(&[4, 32, 32]), 0.7);
        let latent = net.forward_value(&params, &x).unwrap();
        assert!(latent.mu.iter().all(|&v| v == 0.0));
        assert!(latent.logvar.iter().all(|&v| v == 0.0));
        assert!(latent.sigma().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn latent_net_output_length_is_2k() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = LatentNet::new(
            &mut params,
            &mut rng,
            "post",
            LatentNetConfig::posterior(6),
            0.01,
        );
        for size in [32usize, 64] {
            let x = ArrayD::from_elem(IxDyn(&[5, size, size]), 0.3);
            let latent = net.forward_value(&params, &x).unwrap();
            assert_eq!(latent.k(), 6);
            assert_eq!(latent.logvar.len(), 6);
        }
        let small = ArrayD::from_elem(IxDyn(&[5, 16, 16]), 0.3);
        assert!(net.forward_value(&params, &small).is_err(), "too small");
    }

    #[test]
    fn latent_net_distinguishes_inputs() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = LatentNet::new(&mut params, &mut rng, "prior", LatentNetConfig::prior(4), Init::Std(0.05));
        let mut xr = ChaCha8Rng::seed_from_u64(9);
        let a = ArrayD::from_shape_fn(IxDyn(&[4, 32, 32]), |_| xr.random_range(0.0..1.0));
        let b = ArrayD::from_shape_fn(IxDyn(&[4, 32, 32]), |_| xr.random_range(0.0..1.0));
        let la = net.forward_value(&params, &a).unwrap();
        let lb = net.forward_value(&params, &b).unwrap();
        assert_ne!(la.mu, lb.mu, "different inputs produce different mu");
    }

    #[test]
    fn expand_zero_sigma_gives_constant_channels() {
        let tape = Tape::new();
        let latent = GaussianLatentVar {
            mu: tape.leaf(array![0.4, -1.2].into_dyn()),
            // Strongly negative logvar underflows sigma to exactly 0.
            logvar: tape.leaf(array![-2000.0, -2000.0].into_dyn()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ss = expand(latent, 6, 7, &mut rng).value();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(ss[[0, y, x]], 0.4);
                assert_eq!(ss[[1, y, x]], -1.2);
            }
        }
    }

    #[test]
    fn expand_is_seeded_and_channel_means_concentrate() {
        let latent = g(&[0.7, -0.5], &[0.2, -0.1]);
        let mut r1 = ChaCha8Rng::seed_from_u64(123);
        let mut r2 = ChaCha8Rng::seed_from_u64(123);
        let a = expand_value(&latent, 32, 32, &mut r1);
        let b = expand_value(&latent, 32, 32, &mut r2);
        assert_eq!(a, b, "same seed, same expansion");

        let mut r3 = ChaCha8Rng::seed_from_u64(9);
        let big = expand_value(&latent, 256, 256, &mut r3);
        let sigma = latent.sigma();
        for ki in 0..2 {
            let mean = big
                .index_axis(ndarray::Axis(0), ki)
                .iter()
                .sum::<f64>()
                / (256.0 * 256.0);
            let bound = 4.0 * sigma[ki] / 256.0;
            assert!(
                (mean - latent.mu[ki]).abs() < bound,
                "channel {ki} mean {mean} vs mu {} (bound {bound})",
                latent.mu[ki]
            );
        }
    }

    #[test]
    fn expand_is_reparameterized() {
        // Per-channel spatial mean of S^s has gradient exactly 1 w.r.t. mu_k,
        // and the logvar gradient matches finite differences.
        let mu0 = array![0.3, -0.8].into_dyn();
        let lv0 = array![0.4, -0.2].into_dyn();
        let mut eps_rng = ChaCha8Rng::seed_from_u64(31);
        let eps = {
            let mut e = ArrayD::zeros(IxDyn(&[2, 5, 4]));
            for v in e.iter_mut() {
                *v = eps_rng.sample(StandardNormal);
            }
            e
        };

        let tape = Tape::new();
        let latent = GaussianLatentVar {
            mu: tape.leaf(mu0.clone()),
            logvar: tape.leaf(lv0.clone()),
        };
        let ss = expand_with_noise(latent, &eps);
        // Sum of channel means: d/d mu_k = 1 exactly for each k.
        let loss = ss.sum().mul_scalar(1.0 / 20.0);
        let grads = tape.backward(loss);
        let dmu = grads.wrt(latent.mu);
        assert!((dmu.sum() - 2.0).abs() < 1e-12);
        for ki in 0..2 {
            assert!((dmu[[ki]] - 1.0).abs() < 1e-12, "reparameterized mean gradient");
        }

        let analytic = [dmu, grads.wrt(latent.logvar)];
        let f = |inputs: &[Arr]| {
            let tape = Tape::new();
            let latent = GaussianLatentVar {
                mu: tape.leaf(inputs[0].clone()),
                logvar: tape.leaf(inputs[1].clone()),
            };
            expand_with_noise(latent, &eps).sum().mul_scalar(1.0 / 20.0).scalar()
        };
        let numeric = gradcheck::finite_diff(&f, &[mu0, lv0]);
        assert!(gradcheck::max_rel_error(&analytic, &numeric) < 1e-6);
    }
}
