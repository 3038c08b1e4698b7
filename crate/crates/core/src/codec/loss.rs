use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::entropy::{self, bits_grad};
use super::model::{CodecModel, ForwardOutput, LatentQuant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multiplier that puts `[0, 1]` MSE on the 8-bit scale.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

/// Rate, distortion and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDLossBreakdown {
    pub rate_bits_y: f64,
    pub rate_bits_z: f64,
    /// Total bits divided by the batch's pixel count.
    pub bpp: f64,
    /// Mean squared error on `[0, 1]` pixels.
    pub distortion: f64,
    pub lambda: f64,
    /// `bpp + lambda * 255² * distortion`.
    pub total: f64,
}

fn check(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical { term: term.into(), detail: format!("value {}", v) })
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape())?;
    if a.is_empty() {
        return Err(Error::Argument("empty tensor".into()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Assembles the RD loss from likelihoods and reconstructions.
pub fn rd_from_parts(
    likelihood_y: &[f64],
    likelihood_z: &[f64],
    x: &Tensor,
    x_hat: &Tensor,
    lambda: f64,
) -> Result<RDLossBreakdown> {
    if !(lambda > 0.0) {
        return Err(Error::Argument(format!("lambda must be positive, got {}", lambda)));
    }
    let pixels = (x.batch() * x.plane()) as f64;
    let rate_bits_y = check("rate_y", entropy::bits(likelihood_y))?;
    let rate_bits_z = check("rate_z", entropy::bits(likelihood_z))?;
    let bpp = check("bpp", (rate_bits_y + rate_bits_z) / pixels)?;
    let distortion = check("distortion", mse(x, x_hat)?)?;
    let total = check("total", bpp + lambda * DISTORTION_SCALE * distortion)?;
    Ok(RDLossBreakdown { rate_bits_y, rate_bits_z, bpp, distortion, lambda, total })
}

impl CodecModel {
    /// RD loss of one batch under the given latent quantization.
    pub fn rd_loss_with(
        &self,
        x: &Tensor,
        lambda: f64,
        quant: LatentQuant,
        rng: &mut ChaCha8Rng,
    ) -> Result<(RDLossBreakdown, ForwardOutput)> {
        let (out, _) = self.forward_with(x, quant, rng, None)?;
        let rd = rd_from_parts(&out.likelihood_y, &out.likelihood_z, x, &out.x_hat, lambda)?;
        Ok((rd, out))
    }

    /// Deterministic (rounded) RD loss.
    pub fn rd_loss(&self, x: &Tensor, lambda: f64) -> Result<RDLossBreakdown> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        Ok(self.rd_loss_with(x, lambda, LatentQuant::Round, &mut rng)?.0)
    }

    /// Forward + backward. Gradients are *accumulated* into the parameters
    /// (call [`CodecModel::zero_grad`] first); masked positions get zero gradient.
    pub fn loss_and_grad(
        &mut self,
        x: &Tensor,
        lambda: f64,
        quant: LatentQuant,
        rng: &mut ChaCha8Rng,
    ) -> Result<RDLossBreakdown> {
        let (out, trace) = self.forward_with(x, quant, rng, None)?;
        let rd = rd_from_parts(&out.likelihood_y, &out.likelihood_z, x, &out.x_hat, lambda)?;
        let pixels = (x.batch() * x.plane()) as f64;
        let dp_y: Vec<f64> = out.likelihood_y.iter().map(|&p| bits_grad(p) / pixels).collect();
        let dp_z: Vec<f64> = out.likelihood_z.iter().map(|&p| bits_grad(p) / pixels).collect();
        let scale = lambda * DISTORTION_SCALE * 2.0 / x.len() as f64;
        let dx_hat = out.x_hat.zip_map(x, |a, b| scale * (a - b))?;
        self.backward(&out, &trace, &dx_hat, &dp_y, &dp_z)?;
        self.mask_gradients();
        Ok(rd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_reconstruction_with_certain_latents_costs_nothing() {
        let x = Tensor::full([1, 3, 4, 4], 0.5);
        let rd = rd_from_parts(&[1.0; 10], &[1.0; 3], &x, &x, 0.01).unwrap();
        assert_eq!(rd.total, 0.0);
    }

    #[test]
    fn half_likelihoods_cost_one_bit_each() {
        let x = Tensor::full([2, 3, 8, 8], 0.5);
        let e = 40;
        let rd = rd_from_parts(&vec![0.5; e], &[], &x, &x, 0.01).unwrap();
        assert!((rd.bpp - e as f64 / 128.0).abs() < 1e-15);
    }

    #[test]
    fn nan_term_is_identified() {
        let x = Tensor::full([1, 1, 2, 2], 0.5);
        let bad = Tensor::full([1, 1, 2, 2], f64::NAN);
        match rd_from_parts(&[0.5], &[0.5], &x, &bad, 0.01) {
            Err(Error::Numerical { term, .. }) => assert_eq!(term, "distortion"),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn lambda_must_be_positive() {
        let x = Tensor::full([1, 1, 2, 2], 0.5);
        assert!(rd_from_parts(&[0.5], &[0.5], &x, &x, 0.0).is_err());
    }
}
