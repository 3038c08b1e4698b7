//! Entropy models: a Gaussian conditional for `ŷ` and a learned factorized
//! density for `ẑ`.

use std::f64::consts::{LN_2, SQRT_2};

use crate::error::{Error, Result};
use crate::nn::{inv_softplus, sigmoid, softplus, Param};

/// Lower bound applied to predicted scales.
pub const SIGMA_FLOOR: f64 = 0.11;
/// Lower bound applied to per-element likelihoods (2^-24).
pub const P_FLOOR: f64 = 1.0 / 16_777_216.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn std_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / SQRT_2)
}

#[inline]
fn std_pdf(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Gradient of a lower-bounded value: passes through when the value is above
/// the bound or when the incoming gradient would push it upward.
#[inline]
pub(crate) fn lower_bound_grad(raw: f64, bound: f64, grad: f64) -> f64 {
    if raw >= bound || grad < 0.0 {
        grad
    } else {
        0.0
    }
}

/// Unfloored probability mass of the unit-width bin centred on `y` under
/// `N(mu, sigma²)`.
#[inline]
pub fn gaussian_bin_mass(y: f64, mu: f64, sigma: f64) -> f64 {
    let v = (y - mu).abs();
    std_cdf((0.5 - v) / sigma) - std_cdf((-0.5 - v) / sigma)
}

/// Maps the raw scale output of `h_s` to `sigma = max(softplus(raw), SIGMA_FLOOR)`.
pub fn scale_from_raw(raw: f64) -> f64 {
    softplus(raw).max(SIGMA_FLOOR)
}

/// Per-element likelihoods of `ŷ` under the mean-scale Gaussian prior.
pub fn likelihood_y(y_hat: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    if y_hat.len() != mu.len() || y_hat.len() != sigma.len() {
        return Err(Error::Shape("latent, mean and scale must have equal sizes".into()));
    }
    y_hat
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&y, &m), &s)| {
            if !(s > 0.0) {
                return Err(Error::Invariant(format!("non-positive scale {}", s)));
            }
            Ok(gaussian_bin_mass(y, m, s.max(SIGMA_FLOOR)).max(P_FLOOR))
        })
        .collect()
}

/// Gradients of the Gaussian bin mass w.r.t. (y, mu, sigma), given
/// `dl_dp` for the floored probability.
pub(crate) fn likelihood_y_grad(y: f64, mu: f64, sigma: f64, dl_dp: f64) -> (f64, f64, f64) {
    let d = y - mu;
    let v = d.abs();
    let a = (0.5 - v) / sigma;
    let b = (-0.5 - v) / sigma;
    let p_raw = std_cdf(a) - std_cdf(b);
    let g = lower_bound_grad(p_raw, P_FLOOR, dl_dp);
    let (pa, pb) = (std_pdf(a), std_pdf(b));
    let dp_dv = (pb - pa) / sigma;
    let dp_dsigma = (b * pb - a * pa) / sigma;
    let sgn = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    (g * dp_dv * sgn, -g * dp_dv * sgn, g * dp_dsigma)
}

/// Sum of `-log2 p` over a likelihood vector.
pub fn bits(likelihoods: &[f64]) -> f64 {
    likelihoods.iter().map(|p| -p.log2()).sum()
}

/// `d(-log2 p)/dp`.
#[inline]
pub(crate) fn bits_grad(p: f64) -> f64 {
    -1.0 / (p * LN_2)
}

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];

/// Per-channel learned cumulative density (a small monotone network per
/// channel) used for the hyper-latent.
#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    pub channels: usize,
    /// Raw matrices; the effective matrix is `softplus(raw)`. Entry `k` is
    /// `channels × FILTERS[k+1] × FILTERS[k]`.
    pub matrices: Vec<Param>,
    /// Entry `k` is `channels × FILTERS[k+1]`.
    pub biases: Vec<Param>,
    /// Raw gating factors (effective value `tanh(raw)`); entry `k` is `channels × FILTERS[k+1]`.
    pub factors: Vec<Param>,
}

struct CdfTrace {
    hidden: [[f64; 3]; 4],
    pre: [[f64; 3]; 4],
}

impl FactorizedDensity {
    pub fn new(channels: usize, init_scale: f64) -> Self {
        let scale = init_scale.powf(1.0 / (FILTERS.len() - 1) as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..FILTERS.len() - 1 {
            let (fi, fo) = (FILTERS[k], FILTERS[k + 1]);
            let init = inv_softplus(1.0 / scale / fo as f64);
            matrices.push(Param::new(vec![init; channels * fo * fi]));
            biases.push(Param::new(vec![0.0; channels * fo]));
            if k < FILTERS.len() - 2 {
                factors.push(Param::new(vec![0.0; channels * fo]));
            }
        }
        FactorizedDensity { channels, matrices, biases, factors }
    }

    pub fn param_count(&self) -> usize {
        self.matrices.iter().chain(&self.biases).chain(&self.factors).map(Param::len).sum()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (k, p) in self.matrices.iter_mut().enumerate() {
            out.push((format!("entropy.matrix{}", k), p));
        }
        for (k, p) in self.biases.iter_mut().enumerate() {
            out.push((format!("entropy.bias{}", k), p));
        }
        for (k, p) in self.factors.iter_mut().enumerate() {
            out.push((format!("entropy.factor{}", k), p));
        }
        out
    }

    fn logit(&self, c: usize, x: f64) -> (f64, CdfTrace) {
        let mut tr = CdfTrace { hidden: [[0.0; 3]; 4], pre: [[0.0; 3]; 4] };
        let mut h = [x, 0.0, 0.0];
        for k in 0..4 {
            let (fi, fo) = (FILTERS[k], FILTERS[k + 1]);
            tr.hidden[k] = h;
            let mat = &self.matrices[k].value[c * fo * fi..(c + 1) * fo * fi];
            let bias = &self.biases[k].value[c * fo..(c + 1) * fo];
            let mut pre = [0.0; 3];
            for o in 0..fo {
                pre[o] = bias[o] + (0..fi).map(|i| softplus(mat[o * fi + i]) * h[i]).sum::<f64>();
            }
            tr.pre[k] = pre;
            if k < 3 {
                let fac = &self.factors[k].value[c * fo..(c + 1) * fo];
                for o in 0..fo {
                    h[o] = pre[o] + fac[o].tanh() * pre[o].tanh();
                }
            } else {
                h = pre;
            }
        }
        (h[0], tr)
    }

    /// Back-propagates `d` (gradient w.r.t. the logit) through channel `c`,
    /// accumulating parameter gradients and returning dlogit/dx · d.
    fn logit_backward(&mut self, c: usize, tr: &CdfTrace, d: f64) -> f64 {
        let mut dh = [d, 0.0, 0.0];
        for k in (0..4).rev() {
            let (fi, fo) = (FILTERS[k], FILTERS[k + 1]);
            let mut dpre = [0.0; 3];
            if k < 3 {
                for o in 0..fo {
                    let raw = self.factors[k].value[c * fo + o];
                    let t = raw.tanh();
                    let tp = tr.pre[k][o].tanh();
                    dpre[o] = dh[o] * (1.0 + t * (1.0 - tp * tp));
                    self.factors[k].grad[c * fo + o] += dh[o] * tp * (1.0 - t * t);
                }
            } else {
                dpre[..fo].copy_from_slice(&dh[..fo]);
            }
            let mut dprev = [0.0; 3];
            for o in 0..fo {
                self.biases[k].grad[c * fo + o] += dpre[o];
                for i in 0..fi {
                    let idx = c * fo * fi + o * fi + i;
                    let raw = self.matrices[k].value[idx];
                    self.matrices[k].grad[idx] += dpre[o] * tr.hidden[k][i] * sigmoid(raw);
                    dprev[i] += softplus(raw) * dpre[o];
                }
            }
            dh = dprev;
        }
        dh[0]
    }

    /// Learned cumulative distribution of channel `c` at `x`.
    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(self.logit(c, x).0)
    }

    fn mass(&self, c: usize, x: f64) -> Result<(f64, f64, f64, CdfTrace, CdfTrace)> {
        let (lo, tlo) = self.logit(c, x - 0.5);
        let (up, tup) = self.logit(c, x + 0.5);
        if !(up >= lo) {
            return Err(Error::Invariant(format!(
                "factorized CDF not monotone on channel {} at {} ({} < {})",
                c, x, up, lo
            )));
        }
        let sign = if lo + up > 0.0 { -1.0 } else { 1.0 };
        let p = (sigmoid(sign * up) - sigmoid(sign * lo)).abs();
        Ok((p, lo, up, tlo, tup))
    }

    /// Per-element likelihoods of `ẑ` laid out as `(batch, channels, plane)`.
    pub fn likelihood(&self, z_hat: &[f64], plane: usize) -> Result<Vec<f64>> {
        self.check_layout(z_hat.len(), plane)?;
        z_hat
            .iter()
            .enumerate()
            .map(|(i, &x)| Ok(self.mass((i / plane) % self.channels, x)?.0.max(P_FLOOR)))
            .collect()
    }

    fn check_layout(&self, len: usize, plane: usize) -> Result<()> {
        if plane == 0 || len % (plane * self.channels) != 0 {
            return Err(Error::Shape(format!(
                "{} hyper-latent elements do not match {} channels",
                len, self.channels
            )));
        }
        Ok(())
    }

    /// Accumulates parameter gradients for `sum_i dl_dp[i] * p_i` and returns
    /// the gradient w.r.t. each `ẑ` element.
    pub(crate) fn likelihood_backward(&mut self, z_hat: &[f64], plane: usize, dl_dp: &[f64]) -> Result<Vec<f64>> {
        self.check_layout(z_hat.len(), plane)?;
        let mut dz = vec![0.0; z_hat.len()];
        for (i, &x) in z_hat.iter().enumerate() {
            let c = (i / plane) % self.channels;
            let (p, lo, up, tlo, tup) = self.mass(c, x)?;
            let g = lower_bound_grad(p, P_FLOOR, dl_dp[i]);
            if g == 0.0 {
                continue;
            }
            let sign = if lo + up > 0.0 { -1.0 } else { 1.0 };
            let diff = sigmoid(sign * up) - sigmoid(sign * lo);
            let sd = if diff >= 0.0 { 1.0 } else { -1.0 };
            let dsig = |t: f64| {
                let s = sigmoid(t);
                s * (1.0 - s)
            };
            let d_up = g * sd * sign * dsig(sign * up);
            let d_lo = -g * sd * sign * dsig(sign * lo);
            dz[i] = self.logit_backward(c, &tup, d_up) + self.logit_backward(c, &tlo, d_lo);
        }
        Ok(dz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_bin_approaches_one_as_scale_shrinks() {
        let p = likelihood_y(&[0.3], &[0.3], &[SIGMA_FLOOR]).unwrap()[0];
        let want = std_cdf(0.5 / SIGMA_FLOOR) - std_cdf(-0.5 / SIGMA_FLOOR);
        assert!((p - want).abs() < 1e-15);
        assert!(p > 0.9999);
        let wide = likelihood_y(&[0.0], &[0.0], &[2.0]).unwrap()[0];
        assert!(wide < p);
    }

    #[test]
    fn far_tail_is_floored() {
        let sigma = 0.5;
        let raw = gaussian_bin_mass(10.0 * sigma, 0.0, sigma);
        assert!(raw <= 1e-9);
        assert_eq!(likelihood_y(&[10.0 * sigma], &[0.0], &[sigma]).unwrap()[0], P_FLOOR);
    }

    #[test]
    fn gaussian_mass_sums_to_one_on_integer_grid() {
        let total: f64 = (-50..=50).map(|k| gaussian_bin_mass(k as f64, 0.3, 2.0)).sum();
        assert!((0.999..=1.0 + 1e-12).contains(&total), "{}", total);
    }

    #[test]
    fn non_positive_scale_is_invariant_violation() {
        assert!(matches!(likelihood_y(&[0.0], &[0.0], &[0.0]), Err(Error::Invariant(_))));
    }

    #[test]
    fn gaussian_grad_matches_finite_difference() {
        let h = 1e-6;
        for &(y, mu, s) in &[(0.7, 0.1, 0.8), (-1.3, 0.4, 1.7), (2.0, 2.2, 0.3)] {
            let f = |y: f64, mu: f64, s: f64| -gaussian_bin_mass(y, mu, s).log2();
            let p = gaussian_bin_mass(y, mu, s);
            let (dy, dmu, ds) = likelihood_y_grad(y, mu, s, bits_grad(p));
            assert!((dy - (f(y + h, mu, s) - f(y - h, mu, s)) / (2.0 * h)).abs() < 1e-5);
            assert!((dmu - (f(y, mu + h, s) - f(y, mu - h, s)) / (2.0 * h)).abs() < 1e-5);
            assert!((ds - (f(y, mu, s + h) - f(y, mu, s - h)) / (2.0 * h)).abs() < 1e-5);
        }
    }

    #[test]
    fn initial_density_is_symmetric_and_positive() {
        let d = FactorizedDensity::new(4, 10.0);
        let grid: Vec<f64> = (-6..=6).map(|k| k as f64).collect();
        let z: Vec<f64> = (0..4).flat_map(|_| grid.iter().copied()).collect();
        let p = d.likelihood(&z, grid.len()).unwrap();
        for c in 0..4 {
            for k in 0..grid.len() {
                let a = p[c * grid.len() + k];
                let b = p[c * grid.len() + grid.len() - 1 - k];
                assert!(a > 0.0);
                assert!((a - b).abs() < 1e-15, "p({}) != p(-{})", k, k);
            }
        }
        let total: f64 = (-60..=60).map(|k| d.mass(0, k as f64).unwrap().0).sum::<f64>();
        assert!(total > 0.99 && total <= 1.0 + 1e-9);
    }

    #[test]
    fn factorized_grad_matches_finite_difference() {
        let mut d = FactorizedDensity::new(2, 10.0);
        // break symmetry so all code paths are exercised
        for (k, b) in d.biases.iter_mut().enumerate() {
            b.value.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 + 1.0) - 0.05 * k as f64);
        }
        for f in d.factors.iter_mut() {
            f.value.iter_mut().enumerate().for_each(|(i, v)| *v = 0.3 - 0.2 * i as f64);
        }
        let z = vec![0.4, -1.2, 2.3, 0.05];
        let loss = |d: &FactorizedDensity, z: &[f64]| bits(&d.likelihood(z, 2).unwrap());
        let p = d.likelihood(&z, 2).unwrap();
        let dl: Vec<f64> = p.iter().map(|&p| bits_grad(p)).collect();
        let dz = d.likelihood_backward(&z, 2, &dl).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (loss(&d, &zp) - loss(&d, &zm)) / (2.0 * h);
            assert!((fd - dz[i]).abs() < 1e-5, "dz[{}]: {} vs {}", i, fd, dz[i]);
        }
        for k in 0..4 {
            for j in 0..d.matrices[k].len() {
                let mut dp = d.clone();
                dp.matrices[k].value[j] += h;
                let mut dm = d.clone();
                dm.matrices[k].value[j] -= h;
                let fd = (loss(&dp, &z) - loss(&dm, &z)) / (2.0 * h);
                assert!((fd - d.matrices[k].grad[j]).abs() < 1e-5, "matrix {} {}", k, j);
            }
        }
        for k in 0..3 {
            for j in 0..d.factors[k].len() {
                let mut dp = d.clone();
                dp.factors[k].value[j] += h;
                let mut dm = d.clone();
                dm.factors[k].value[j] -= h;
                let fd = (loss(&dp, &z) - loss(&dm, &z)) / (2.0 * h);
                assert!((fd - d.factors[k].grad[j]).abs() < 1e-5, "factor {} {}", k, j);
            }
        }
    }
}
