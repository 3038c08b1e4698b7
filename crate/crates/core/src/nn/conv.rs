use serde::{Deserialize, Serialize};

use super::{gemm, Param};
use crate::error::{Error, Result};
use crate::quant::FakeQuantState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Conv,
    Transposed,
}

/// Re-expands a compacted output to its interface width; absent channels are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub width: usize,
    pub index: Vec<usize>,
}

/// 2-D convolution (or transposed convolution) with "same" padding `kernel / 2`.
///
/// Weights are stored as `(out, in, k, k)` for both kinds, so filter `i` is
/// always the contiguous block `weight[i * in * k * k ..]`. A transposed layer
/// with stride `s` maps `H` to `H * s`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kind: ConvKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
    /// For each input channel, the incoming channel it reads (`None` reads zeros).
    pub gather: Option<Vec<Option<usize>>>,
    pub scatter: Option<Scatter>,
    pub quant: Option<FakeQuantState>,
}

pub struct ConvCache {
    input: Tensor,
    src_channels: usize,
    act_pass: Option<Vec<bool>>,
    weight_eff: Option<Vec<f64>>,
}

impl ConvCache {
    /// The tensor that was actually convolved (after gather and activation quantization).
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

struct Geometry {
    channels: usize,
    big_h: usize,
    big_w: usize,
    small_h: usize,
    small_w: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Geometry {
    /// `src` is `channels × big_h × big_w`, `col` is `(channels·k·k) × (small_h·small_w)`.
    fn im2col(&self, src: &[f64], col: &mut [f64]) {
        let (k, s, p) = (self.k, self.s as isize, self.p as isize);
        let np = self.small_h * self.small_w;
        for c in 0..self.channels {
            let plane = &src[c * self.big_h * self.big_w..(c + 1) * self.big_h * self.big_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * np;
                    let dst = &mut col[row..row + np];
                    for oy in 0..self.small_h {
                        let iy = oy as isize * s + ky as isize - p;
                        let line = &mut dst[oy * self.small_w..(oy + 1) * self.small_w];
                        if iy < 0 || iy >= self.big_h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let srow = &plane[iy as usize * self.big_w..(iy as usize + 1) * self.big_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *v = if ix < 0 || ix >= self.big_w as isize { 0.0 } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]; accumulates into `dst`.
    fn col2im(&self, col: &[f64], dst: &mut [f64]) {
        let (k, s, p) = (self.k, self.s as isize, self.p as isize);
        let np = self.small_h * self.small_w;
        for c in 0..self.channels {
            let plane = &mut dst[c * self.big_h * self.big_w..(c + 1) * self.big_h * self.big_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * np;
                    let src = &col[row..row + np];
                    for oy in 0..self.small_h {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.big_h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.big_w..(iy as usize + 1) * self.big_w];
                        let line = &src[oy * self.small_w..(oy + 1) * self.small_w];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.big_w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn new(kind: ConvKind, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let kk = kernel * kernel;
        Conv2d {
            kind,
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: Param::new(vec![0.0; out_ch * in_ch * kk]),
            bias: Param::new(vec![0.0; out_ch]),
            gather: None,
            scatter: None,
            quant: None,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Elements per filter (`in · k · k`).
    pub fn filter_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Width of the tensor this layer emits (after any scatter).
    pub fn emitted_channels(&self) -> usize {
        self.scatter.as_ref().map_or(self.out_ch, |s| s.width)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding());
        match self.kind {
            ConvKind::Conv => {
                if h + 2 * p < k || w + 2 * p < k {
                    return Err(Error::Shape(format!("input {}x{} smaller than kernel {}", h, w, k)));
                }
                if h % s != 0 || w % s != 0 {
                    return Err(Error::Shape(format!(
                        "spatial size {}x{} not divisible by stride {}",
                        h, w, s
                    )));
                }
                Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
            }
            ConvKind::Transposed => Ok((h * s, w * s)),
        }
    }

    fn geometry(&self, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Geometry {
        match self.kind {
            ConvKind::Conv => Geometry {
                channels: self.in_ch,
                big_h: in_h,
                big_w: in_w,
                small_h: out_h,
                small_w: out_w,
                k: self.kernel,
                s: self.stride,
                p: self.padding(),
            },
            ConvKind::Transposed => Geometry {
                channels: self.out_ch,
                big_h: out_h,
                big_w: out_w,
                small_h: in_h,
                small_w: in_w,
                k: self.kernel,
                s: self.stride,
                p: self.padding(),
            },
        }
    }

    fn gather_input(&self, x: &Tensor) -> Result<Tensor> {
        match &self.gather {
            None => {
                if x.channels() != self.in_ch {
                    return Err(Error::Shape(format!(
                        "layer expects {} input channels, got {}",
                        self.in_ch,
                        x.channels()
                    )));
                }
                Ok(x.clone())
            }
            Some(map) => {
                let [n, c, h, w] = x.shape();
                let mut out = Tensor::zeros([n, self.in_ch, h, w]);
                for b in 0..n {
                    for (dst, src) in map.iter().enumerate() {
                        if let Some(src) = *src {
                            if src >= c {
                                return Err(Error::Shape(format!(
                                    "gather index {} out of range for {} channels",
                                    src, c
                                )));
                            }
                            out.channel_mut(b, dst).copy_from_slice(x.channel(b, src));
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Weight matrix as `(out·k·k) × in` for the transposed kernel path.
    fn transposed_matrix(&self, w: &[f64]) -> Vec<f64> {
        let kk = self.kernel * self.kernel;
        let mut wt = vec![0.0; w.len()];
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                for q in 0..kk {
                    wt[(o * kk + q) * self.in_ch + i] = w[(o * self.in_ch + i) * kk + q];
                }
            }
        }
        wt
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let src_channels = x.channels();
        let mut input = self.gather_input(x)?;
        let mut act_pass = None;
        let mut weight_eff = None;
        if let Some(q) = self.quant.as_ref().filter(|q| q.enabled) {
            act_pass = Some(q.quantize_activations_in_place(input.data_mut()));
            weight_eff = Some(q.fake_quant_weights(&self.weight.value, self.out_ch)?);
        }
        let w = weight_eff.as_deref().unwrap_or(&self.weight.value);
        let [n, _, h, wd] = input.shape();
        let (oh, ow) = self.output_hw(h, wd)?;
        let geo = self.geometry(h, wd, oh, ow);
        let kk = self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_ch, oh, ow]);
        match self.kind {
            ConvKind::Conv => {
                let np = oh * ow;
                let mut col = vec![0.0; self.in_ch * kk * np];
                for b in 0..n {
                    geo.im2col(input.image(b), &mut col);
                    gemm(self.out_ch, self.in_ch * kk, np, w, false, &col, false, out.image_mut(b), 0.0);
                }
            }
            ConvKind::Transposed => {
                let wt = self.transposed_matrix(w);
                let np = h * wd;
                let mut col = vec![0.0; self.out_ch * kk * np];
                for b in 0..n {
                    gemm(self.out_ch * kk, self.in_ch, np, &wt, false, input.image(b), false, &mut col, 0.0);
                    geo.col2im(&col, out.image_mut(b));
                }
            }
        }
        for b in 0..n {
            for (o, &bv) in self.bias.value.iter().enumerate() {
                out.channel_mut(b, o).iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = self.apply_scatter(out);
        Ok((out, ConvCache { input, src_channels, act_pass, weight_eff }))
    }

    fn apply_scatter(&self, out: Tensor) -> Tensor {
        match &self.scatter {
            None => out,
            Some(sc) => {
                let [n, _, h, w] = out.shape();
                let mut full = Tensor::zeros([n, sc.width, h, w]);
                for b in 0..n {
                    for (j, &dst) in sc.index.iter().enumerate() {
                        full.channel_mut(b, dst).copy_from_slice(out.channel(b, j));
                    }
                }
                full
            }
        }
    }

    /// Back-propagates `dy`, accumulating parameter gradients and returning the
    /// gradient with respect to the layer's incoming tensor.
    pub fn backward(&mut self, dy: &Tensor, cache: &ConvCache) -> Result<Tensor> {
        let dy = match &self.scatter {
            None => dy.clone(),
            Some(sc) => {
                let [n, _, h, w] = dy.shape();
                let mut d = Tensor::zeros([n, self.out_ch, h, w]);
                for b in 0..n {
                    for (j, &src) in sc.index.iter().enumerate() {
                        d.channel_mut(b, j).copy_from_slice(dy.channel(b, src));
                    }
                }
                d
            }
        };
        let input = &cache.input;
        let [n, _, h, wd] = input.shape();
        let [_, _, oh, ow] = dy.shape();
        let geo = self.geometry(h, wd, oh, ow);
        let kk = self.kernel * self.kernel;
        let w: &[f64] = cache.weight_eff.as_deref().unwrap_or(&self.weight.value);
        let mut dw_eff = vec![0.0; w.len()];
        let mut dx = Tensor::zeros(input.shape());
        for b in 0..n {
            for o in 0..self.out_ch {
                self.bias.grad[o] += dy.channel(b, o).iter().sum::<f64>();
            }
        }
        match self.kind {
            ConvKind::Conv => {
                let np = oh * ow;
                let mut col = vec![0.0; self.in_ch * kk * np];
                let mut dcol = vec![0.0; self.in_ch * kk * np];
                for b in 0..n {
                    geo.im2col(input.image(b), &mut col);
                    gemm(self.out_ch, np, self.in_ch * kk, dy.image(b), false, &col, true, &mut dw_eff, 1.0);
                    gemm(self.in_ch * kk, self.out_ch, np, w, true, dy.image(b), false, &mut dcol, 0.0);
                    geo.col2im(&dcol, dx.image_mut(b));
                }
            }
            ConvKind::Transposed => {
                let wt = self.transposed_matrix(w);
                let np = h * wd;
                let mut dcol = vec![0.0; self.out_ch * kk * np];
                let mut dwt = vec![0.0; wt.len()];
                for b in 0..n {
                    geo.im2col(dy.image(b), &mut dcol);
                    gemm(self.in_ch, self.out_ch * kk, np, &wt, true, &dcol, false, dx.image_mut(b), 0.0);
                    gemm(self.out_ch * kk, np, self.in_ch, &dcol, false, input.image(b), true, &mut dwt, 1.0);
                }
                for o in 0..self.out_ch {
                    for i in 0..self.in_ch {
                        for q in 0..kk {
                            dw_eff[(o * self.in_ch + i) * kk + q] = dwt[(o * kk + q) * self.in_ch + i];
                        }
                    }
                }
            }
        }
        match (self.quant.as_mut(), cache.weight_eff.is_some()) {
            (Some(q), true) => {
                let dw = q.backward_weights(&self.weight.value, self.out_ch, &dw_eff);
                for (g, d) in self.weight.grad.iter_mut().zip(dw) {
                    *g += d;
                }
            }
            _ => {
                for (g, d) in self.weight.grad.iter_mut().zip(&dw_eff) {
                    *g += d;
                }
            }
        }
        if let Some(pass) = &cache.act_pass {
            for (d, &keep) in dx.data_mut().iter_mut().zip(pass) {
                if !keep {
                    *d = 0.0;
                }
            }
        }
        match &self.gather {
            None => Ok(dx),
            Some(map) => {
                let [n, _, h, w] = dx.shape();
                let mut dsrc = Tensor::zeros([n, cache.src_channels, h, w]);
                for b in 0..n {
                    for (j, src) in map.iter().enumerate() {
                        if let Some(src) = *src {
                            let g = dx.channel(b, j).to_vec();
                            for (d, v) in dsrc.channel_mut(b, src).iter_mut().zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
                Ok(dsrc)
            }
        }
    }

    /// Number of stored parameters (weights and biases).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(layer: &Conv2d, x: &Tensor) -> Tensor {
        let [n, _, h, w] = x.shape();
        let (oh, ow) = layer.output_hw(h, w).unwrap();
        let (k, s, p) = (layer.kernel as isize, layer.stride as isize, layer.padding() as isize);
        let mut out = Tensor::zeros([n, layer.out_ch, oh, ow]);
        for b in 0..n {
            for o in 0..layer.out_ch {
                for i in 0..layer.in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = layer.weight.value[((o * layer.in_ch + i) * layer.kernel + ky as usize)
                                * layer.kernel
                                + kx as usize];
                            match layer.kind {
                                ConvKind::Conv => {
                                    for oy in 0..oh as isize {
                                        for ox in 0..ow as isize {
                                            let iy = oy * s + ky - p;
                                            let ix = ox * s + kx - p;
                                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                                let idx = out.idx(b, o, oy as usize, ox as usize);
                                                out.data_mut()[idx] += wv * x.get(b, i, iy as usize, ix as usize);
                                            }
                                        }
                                    }
                                }
                                ConvKind::Transposed => {
                                    for iy in 0..h as isize {
                                        for ix in 0..w as isize {
                                            let oy = iy * s + ky - p;
                                            let ox = ix * s + kx - p;
                                            if oy >= 0 && ox >= 0 && oy < oh as isize && ox < ow as isize {
                                                let idx = out.idx(b, o, oy as usize, ox as usize);
                                                out.data_mut()[idx] += wv * x.get(b, i, iy as usize, ix as usize);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let bv = layer.bias.value[o];
                out.channel_mut(b, o).iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    }

    fn random_layer(kind: ConvKind, cin: usize, cout: usize, k: usize, s: usize, rng: &mut ChaCha8Rng) -> Conv2d {
        let mut l = Conv2d::new(kind, cin, cout, k, s);
        l.weight.value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        l.bias.value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        l
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(kind, k, s, hw) in &[
            (ConvKind::Conv, 5, 2, 8),
            (ConvKind::Conv, 3, 1, 6),
            (ConvKind::Transposed, 5, 2, 4),
            (ConvKind::Transposed, 3, 1, 5),
        ] {
            let layer = random_layer(kind, 3, 4, k, s, &mut rng);
            let x = random_tensor([2, 3, hw, hw], &mut rng);
            let (y, _) = layer.forward(&x).unwrap();
            assert!(y.max_abs_diff(&naive_conv(&layer, &x)) < 1e-12, "{:?}", kind);
        }
    }

    #[test]
    fn transposed_output_is_upsampled() {
        let l = Conv2d::new(ConvKind::Transposed, 2, 2, 5, 2);
        assert_eq!(l.output_hw(4, 6).unwrap(), (8, 12));
        let c = Conv2d::new(ConvKind::Conv, 2, 2, 5, 2);
        assert_eq!(c.output_hw(8, 12).unwrap(), (4, 6));
        assert!(c.output_hw(7, 8).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &kind in &[ConvKind::Conv, ConvKind::Transposed] {
            let mut layer = random_layer(kind, 2, 3, 3, 2, &mut rng);
            let x = random_tensor([1, 2, 4, 4], &mut rng);
            let (y, cache) = layer.forward(&x).unwrap();
            let r = random_tensor(y.shape(), &mut rng);
            // loss = <r, y>
            let dx = layer.backward(&r, &cache).unwrap();
            let loss = |l: &Conv2d, x: &Tensor| -> f64 {
                let (y, _) = l.forward(x).unwrap();
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for i in [0, 5, 17, layer.weight.len() - 1] {
                let mut lp = layer.clone();
                lp.weight.value[i] += h;
                let mut lm = layer.clone();
                lm.weight.value[i] -= h;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                assert!((fd - layer.weight.grad[i]).abs() < 1e-6, "{:?} w{}", kind, i);
            }
            for i in [0, 7, x.len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
                assert!((fd - dx.data()[i]).abs() < 1e-6, "{:?} x{}", kind, i);
            }
        }
    }

    #[test]
    fn gather_and_scatter_route_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = random_layer(ConvKind::Conv, 2, 2, 3, 1, &mut rng);
        layer.gather = Some(vec![Some(2), None]);
        layer.scatter = Some(Scatter { width: 4, index: vec![1, 3] });
        let x = random_tensor([1, 3, 4, 4], &mut rng);
        let (y, cache) = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 4, 4, 4]);
        assert!(y.channel(0, 0).iter().all(|&v| v == 0.0));
        let dx = layer.backward(&y, &cache).unwrap();
        assert_eq!(dx.shape(), [1, 3, 4, 4]);
        assert!(dx.channel(0, 0).iter().all(|&v| v == 0.0));
    }
}
