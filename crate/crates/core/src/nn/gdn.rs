use super::{gemm, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BETA_MIN: f64 = 1e-6;

/// Generalized divisive normalization, `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`,
/// or its inverse (multiplicative) form.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub channels: usize,
    pub inverse: bool,
    pub beta: Param,
    /// Row-major `channels × channels`.
    pub gamma: Param,
}

pub struct GdnCache {
    input: Tensor,
    norm: Tensor,
}

impl Gdn {
    pub fn new(channels: usize, inverse: bool) -> Self {
        let mut gamma = vec![0.0; channels * channels];
        for i in 0..channels {
            gamma[i * channels + i] = 0.1;
        }
        Gdn { channels, inverse, beta: Param::new(vec![1.0; channels]), gamma: Param::new(gamma) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GdnCache)> {
        let c = self.channels;
        if x.channels() != c {
            return Err(Error::Shape(format!("GDN expects {} channels, got {}", c, x.channels())));
        }
        let p = x.plane();
        let sq = x.map(|v| v * v);
        let mut norm = Tensor::zeros(x.shape());
        for b in 0..x.batch() {
            let dst = norm.image_mut(b);
            for (ch, &beta) in self.beta.value.iter().enumerate() {
                dst[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = beta);
            }
            gemm(c, c, p, &self.gamma.value, false, sq.image(b), false, dst, 1.0);
        }
        let y = if self.inverse {
            x.zip_map(&norm, |a, n| a * n.sqrt())?
        } else {
            x.zip_map(&norm, |a, n| a / n.sqrt())?
        };
        Ok((y, GdnCache { input: x.clone(), norm }))
    }

    pub fn backward(&mut self, dy: &Tensor, cache: &GdnCache) -> Result<Tensor> {
        let c = self.channels;
        let x = &cache.input;
        let p = x.plane();
        // g_k = dy_k x_k n_k^{-3/2} (forward) or dy_k x_k n_k^{-1/2} (inverse).
        let (g, sign) = if self.inverse {
            (
                Tensor::from_vec(
                    x.shape(),
                    dy.data()
                        .iter()
                        .zip(x.data())
                        .zip(cache.norm.data())
                        .map(|((d, a), n)| d * a / n.sqrt())
                        .collect(),
                )?,
                0.5,
            )
        } else {
            (
                Tensor::from_vec(
                    x.shape(),
                    dy.data()
                        .iter()
                        .zip(x.data())
                        .zip(cache.norm.data())
                        .map(|((d, a), n)| d * a / (n * n.sqrt()))
                        .collect(),
                )?,
                -0.5,
            )
        };
        let sq = x.map(|v| v * v);
        let mut dx = Tensor::zeros(x.shape());
        let mut gt = vec![0.0; c * p];
        let mut dgamma = vec![0.0; c * c];
        for b in 0..x.batch() {
            let gb = g.image(b);
            for ch in 0..c {
                self.beta.grad[ch] += sign * gb[ch * p..(ch + 1) * p].iter().sum::<f64>();
            }
            gemm(c, p, c, gb, false, sq.image(b), true, &mut dgamma, 1.0);
            gemm(c, c, p, &self.gamma.value, true, gb, false, &mut gt, 0.0);
            let xb = x.image(b);
            let nb = cache.norm.image(b);
            let db = dy.image(b);
            let out = dx.image_mut(b);
            for i in 0..c * p {
                let direct = if self.inverse { db[i] * nb[i].sqrt() } else { db[i] / nb[i].sqrt() };
                out[i] = direct + 2.0 * sign * xb[i] * gt[i];
            }
        }
        for (g, d) in self.gamma.grad.iter_mut().zip(dgamma) {
            *g += sign * d;
        }
        Ok(dx)
    }

    /// Projects parameters back onto the feasible set (beta > 0, gamma >= 0).
    pub fn project(&mut self) {
        self.beta.value.iter_mut().for_each(|b| *b = b.max(BETA_MIN));
        self.gamma.value.iter_mut().for_each(|g| *g = g.max(0.0));
    }
}
