use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{CodecConfig, LayerKind, Subnet};
use super::entropy::{self, FactorizedDensity};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvKind, Gdn, Layer, LayerCache, Param, Stack, Tap};
use crate::pruner::StructuredMask;
use crate::tensor::Tensor;

/// How latents are made discrete (or not) in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentQuant {
    /// Additive uniform noise on `[-0.5, 0.5]` (training proxy).
    Noise,
    /// Mean-centred rounding for `y`, plain rounding for `z`.
    Round,
    /// No quantization at all; used for gradient checks.
    Identity,
}

impl FromStr for LatentQuant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(LatentQuant::Noise),
            "round" => Ok(LatentQuant::Round),
            "identity" => Ok(LatentQuant::Identity),
            other => Err(Error::Argument(format!("unknown quantization mode '{}'", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

impl ForwardMode {
    pub fn latent_quant(self) -> LatentQuant {
        match self {
            ForwardMode::Train => LatentQuant::Noise,
            ForwardMode::Eval => LatentQuant::Round,
        }
    }
}

/// Quantizes a latent. `mu` (when given) centres the rounding; noise mode ignores it.
pub fn quantize_latent(y: &Tensor, mu: Option<&Tensor>, mode: LatentQuant, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if let Some(m) = mu {
        y.expect_shape(m.shape())?;
    }
    Ok(match mode {
        LatentQuant::Identity => y.clone(),
        LatentQuant::Noise => y.map(|v| v + rng.random_range(-0.5..=0.5)),
        LatentQuant::Round => match mu {
            Some(m) => y.zip_map(m, |v, m| (v - m).round() + m)?,
            None => y.map(f64::round),
        },
    })
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub x_hat: Tensor,
    pub y: Tensor,
    pub y_hat: Tensor,
    pub z: Tensor,
    pub z_hat: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub likelihood_y: Vec<f64>,
    pub likelihood_z: Vec<f64>,
}

/// Layer caches kept for the backward pass.
pub struct ForwardTrace {
    g_a: Vec<LayerCache>,
    h_a: Vec<LayerCache>,
    h_s: Vec<LayerCache>,
    g_s: Vec<LayerCache>,
    sigma_raw: Tensor,
}

/// Mean-scale hyperprior codec: `g_a`, `h_a`, `h_s`, `g_s` plus the
/// factorized density for the hyper-latent.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub g_a: Stack,
    pub h_a: Stack,
    pub h_s: Stack,
    pub g_s: Stack,
    pub entropy: FactorizedDensity,
    /// Static structured masks, keyed by layer id.
    pub masks: BTreeMap<String, StructuredMask>,
}

fn build_stack(config: &CodecConfig, subnet: Subnet) -> Stack {
    let layers = config
        .specs(subnet)
        .map(|s| match s.kind {
            LayerKind::Conv => Layer::Conv(Conv2d::new(ConvKind::Conv, s.in_ch, s.out_ch, s.kernel, s.stride)),
            LayerKind::TransposedConv => {
                Layer::Conv(Conv2d::new(ConvKind::Transposed, s.in_ch, s.out_ch, s.kernel, s.stride))
            }
            LayerKind::Gdn => Layer::Gdn(Gdn::new(s.in_ch, false)),
            LayerKind::Igdn => Layer::Gdn(Gdn::new(s.in_ch, true)),
            LayerKind::Relu => Layer::Relu,
        })
        .collect();
    Stack::new(subnet.name(), layers)
}

impl CodecModel {
    /// Builds a model with uniform fan-in initialization.
    ///
    /// Analysis weights get a sqrt(6) larger range. With the default range
    /// the initial latents are around 0.03, far below the unit quantization
    /// noise, and training spends hundreds of steps on a plateau that
    /// reconstructs only the mean colour.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for subnet in Subnet::ALL {
            let gain = if subnet == Subnet::Analysis { 6f64.sqrt() } else { 1.0 };
            for layer in model.stack_mut(subnet).layers.iter_mut() {
                if let Layer::Conv(c) = layer {
                    let bound = 1.0 / ((c.in_ch * c.kernel * c.kernel) as f64).sqrt();
                    let w_bound = gain * bound;
                    c.weight.value.iter_mut().for_each(|w| *w = rng.random_range(-w_bound..w_bound));
                    c.bias.value.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
                }
            }
        }
        Ok(model)
    }

    /// Builds a model whose convolution weights and biases are all zero.
    pub fn zeroed(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        Ok(CodecModel {
            g_a: build_stack(&config, Subnet::Analysis),
            h_a: build_stack(&config, Subnet::HyperAnalysis),
            h_s: build_stack(&config, Subnet::HyperSynthesis),
            g_s: build_stack(&config, Subnet::Synthesis),
            entropy: FactorizedDensity::new(config.hyper_channels(), 10.0),
            config,
            masks: BTreeMap::new(),
        })
    }

    pub fn stack(&self, subnet: Subnet) -> &Stack {
        match subnet {
            Subnet::Analysis => &self.g_a,
            Subnet::HyperAnalysis => &self.h_a,
            Subnet::HyperSynthesis => &self.h_s,
            Subnet::Synthesis => &self.g_s,
        }
    }

    pub fn stack_mut(&mut self, subnet: Subnet) -> &mut Stack {
        match subnet {
            Subnet::Analysis => &mut self.g_a,
            Subnet::HyperAnalysis => &mut self.h_a,
            Subnet::HyperSynthesis => &mut self.h_s,
            Subnet::Synthesis => &mut self.g_s,
        }
    }

    fn parse_id(id: &str) -> Option<(Subnet, usize)> {
        let (name, idx) = id.split_once('.')?;
        let subnet = Subnet::ALL.into_iter().find(|s| s.name() == name)?;
        Some((subnet, idx.parse().ok()?))
    }

    pub fn conv_layer(&self, id: &str) -> Option<&Conv2d> {
        let (s, i) = Self::parse_id(id)?;
        self.stack(s).conv(i)
    }

    pub fn conv_layer_mut(&mut self, id: &str) -> Option<&mut Conv2d> {
        let (s, i) = Self::parse_id(id)?;
        self.stack_mut(s).conv_mut(i)
    }

    /// Every convolution layer id in topological order (`g_a`, `h_a`, `h_s`, `g_s`).
    pub fn conv_layer_ids(&self) -> Vec<String> {
        Subnet::ALL
            .iter()
            .flat_map(|&s| {
                let st = self.stack(s);
                st.conv_indices().into_iter().map(move |i| st.layer_id(i))
            })
            .collect()
    }

    /// Convolution layers eligible for structured pruning: all of them except
    /// the final layers of `g_s` and `h_s`, whose widths are fixed by the
    /// interface.
    pub fn prunable_layer_ids(&self) -> Vec<String> {
        let excluded: Vec<String> = [Subnet::Synthesis, Subnet::HyperSynthesis]
            .iter()
            .filter_map(|&s| {
                let st = self.stack(s);
                st.conv_indices().last().map(|&i| st.layer_id(i))
            })
            .collect();
        self.conv_layer_ids().into_iter().filter(|id| !excluded.contains(id)).collect()
    }

    pub fn is_prunable(&self, id: &str) -> bool {
        self.prunable_layer_ids().iter().any(|p| p == id)
    }

    /// Calls `f` on every trainable parameter with a stable name.
    pub fn visit_params(&mut self, mut f: impl FnMut(&str, &mut Param)) {
        for subnet in Subnet::ALL {
            let st = self.stack_mut(subnet);
            let name = st.name.clone();
            for (i, layer) in st.layers.iter_mut().enumerate() {
                match layer {
                    Layer::Conv(c) => {
                        f(&format!("{}.{}.weight", name, i), &mut c.weight);
                        f(&format!("{}.{}.bias", name, i), &mut c.bias);
                        if let Some(q) = c.quant.as_mut() {
                            f(&format!("{}.{}.quant.scale", name, i), &mut q.scale);
                            f(&format!("{}.{}.quant.zero_point", name, i), &mut q.zero_point);
                        }
                    }
                    Layer::Gdn(g) => {
                        f(&format!("{}.{}.beta", name, i), &mut g.beta);
                        f(&format!("{}.{}.gamma", name, i), &mut g.gamma);
                    }
                    Layer::Relu => {}
                }
            }
        }
        for (name, p) in self.entropy.params_mut() {
            f(&name, p);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(|_, p| p.zero_grad());
    }

    /// Total number of model parameters (excluding quantizer parameters).
    pub fn param_count(&self) -> usize {
        let mut n = self.entropy.param_count();
        for subnet in Subnet::ALL {
            for layer in &self.stack(subnet).layers {
                n += match layer {
                    Layer::Conv(c) => c.param_count(),
                    Layer::Gdn(g) => g.beta.len() + g.gamma.len(),
                    Layer::Relu => 0,
                };
            }
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        let mut m = self.clone();
        m.visit_params(|_, p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let f = self.config.total_factor();
        if x.channels() != self.config.input_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.config.input_channels,
                x.channels()
            )));
        }
        if x.height() == 0 || x.width() == 0 || x.height() % f != 0 || x.width() % f != 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} is not divisible by the downsampling factor {}",
                x.height(),
                x.width(),
                f
            )));
        }
        Ok(())
    }

    /// Full pipeline `x → y → z → ẑ → (μ, σ) → ŷ → x̂`.
    ///
    /// With [`LatentQuant::Round`] the reconstruction is clamped to `[0, 1]`.
    /// `tap`, when given, records every convolution's input and output.
    pub fn forward_with(
        &self,
        x: &Tensor,
        quant: LatentQuant,
        rng: &mut ChaCha8Rng,
        tap: Option<&mut Tap>,
    ) -> Result<(ForwardOutput, ForwardTrace)> {
        self.check_input(x)?;
        let mut tap = tap;
        let (y, g_a) = self.g_a.forward(x, tap.as_deref_mut())?;
        let (z, h_a) = self.h_a.forward(&y, tap.as_deref_mut())?;
        let z_hat = quantize_latent(&z, None, quant, rng)?;
        let (params, h_s) = self.h_s.forward(&z_hat, tap.as_deref_mut())?;
        let m = self.config.m_channels;
        let (mu, sigma_raw) = params.split_channels(m)?;
        let sigma = sigma_raw.map(entropy::scale_from_raw);
        let y_hat = match quant {
            LatentQuant::Round => quantize_latent(&y, Some(&mu), quant, rng)?,
            _ => quantize_latent(&y, None, quant, rng)?,
        };
        let likelihood_y = entropy::likelihood_y(y_hat.data(), mu.data(), sigma.data())?;
        let likelihood_z = self.entropy.likelihood(z_hat.data(), z_hat.plane())?;
        let (mut x_hat, g_s) = self.g_s.forward(&y_hat, tap.as_deref_mut())?;
        if quant == LatentQuant::Round {
            x_hat.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        Ok((
            ForwardOutput { x_hat, y, y_hat, z, z_hat, mu, sigma, likelihood_y, likelihood_z },
            ForwardTrace { g_a, h_a, h_s, g_s, sigma_raw },
        ))
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        Ok(self.forward_with(x, mode.latent_quant(), rng, None)?.0)
    }

    /// Deterministic inference pass (rounded latents).
    pub fn eval_forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(x, ForwardMode::Eval, &mut rng)
    }

    /// Back-propagates upstream gradients through the whole codec.
    ///
    /// `dx_hat` is dL/dx̂; `dp_y`, `dp_z` are dL/dp for the (floored) likelihoods.
    pub(crate) fn backward(
        &mut self,
        out: &ForwardOutput,
        trace: &ForwardTrace,
        dx_hat: &Tensor,
        dp_y: &[f64],
        dp_z: &[f64],
    ) -> Result<()> {
        let mut dy_hat = self.g_s.backward(dx_hat, &trace.g_s)?;
        let mut dmu = Tensor::zeros(out.mu.shape());
        let mut dsraw = Tensor::zeros(out.mu.shape());
        for i in 0..out.y_hat.len() {
            let (yv, mv, sv) = (out.y_hat.data()[i], out.mu.data()[i], out.sigma.data()[i]);
            let (gy, gm, gs) = entropy::likelihood_y_grad(yv, mv, sv, dp_y[i]);
            dy_hat.data_mut()[i] += gy;
            dmu.data_mut()[i] = gm;
            let raw = trace.sigma_raw.data()[i];
            let sp = crate::nn::softplus(raw);
            dsraw.data_mut()[i] = entropy::lower_bound_grad(sp, entropy::SIGMA_FLOOR, gs) * crate::nn::sigmoid(raw);
        }
        let dparams = Tensor::concat_channels(&dmu, &dsraw)?;
        let mut dz_hat = self.h_s.backward(&dparams, &trace.h_s)?;
        let dz_rate = self.entropy.likelihood_backward(out.z_hat.data(), out.z_hat.plane(), dp_z)?;
        for (d, r) in dz_hat.data_mut().iter_mut().zip(dz_rate) {
            *d += r;
        }
        let mut dy = self.h_a.backward(&dz_hat, &trace.h_a)?;
        dy.add_assign(&dy_hat)?;
        self.g_a.backward(&dy, &trace.g_a)?;
        Ok(())
    }

    /// Zeroes weights (and biases of removed filters) according to `self.masks`.
    pub fn enforce_masks(&mut self) {
        let masks: Vec<StructuredMask> = self.masks.values().cloned().collect();
        for m in masks {
            if let Some(c) = self.conv_layer_mut(&m.layer_id) {
                zero_masked(&mut c.weight.value, &mut c.bias.value, &m, c.in_ch, c.kernel);
            }
        }
    }

    /// Discards gradients at masked positions.
    pub fn mask_gradients(&mut self) {
        let masks: Vec<StructuredMask> = self.masks.values().cloned().collect();
        for m in masks {
            if let Some(c) = self.conv_layer_mut(&m.layer_id) {
                zero_masked(&mut c.weight.grad, &mut c.bias.grad, &m, c.in_ch, c.kernel);
            }
        }
    }

    /// Keeps constrained parameters feasible and masked weights at zero.
    pub fn project_params(&mut self) {
        for subnet in Subnet::ALL {
            for layer in self.stack_mut(subnet).layers.iter_mut() {
                match layer {
                    Layer::Gdn(g) => g.project(),
                    Layer::Conv(c) => {
                        if let Some(q) = c.quant.as_mut() {
                            q.project();
                        }
                    }
                    Layer::Relu => {}
                }
            }
        }
        self.enforce_masks();
    }
}

fn zero_masked(weight: &mut [f64], bias: &mut [f64], m: &StructuredMask, in_ch: usize, kernel: usize) {
    let kk = kernel * kernel;
    for (o, &keep_o) in m.keep_out.iter().enumerate() {
        if !keep_o {
            bias[o] = 0.0;
        }
        for (i, &keep_i) in m.keep_in.iter().enumerate() {
            if !keep_o || !keep_i {
                let start = (o * in_ch + i) * kk;
                weight[start..start + kk].iter_mut().for_each(|w| *w = 0.0);
            }
        }
    }
}
