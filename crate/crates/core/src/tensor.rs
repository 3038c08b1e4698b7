use crate::error::{Error, Result};

/// Dense 4-axis tensor in (batch, channel, height, width) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    /// Elements in one (height, width) plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    /// One image of the batch as a (channels × plane) slice.
    pub fn image(&self, n: usize) -> &[f64] {
        let sz = self.shape[1] * self.plane();
        &self.data[n * sz..(n + 1) * sz]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [f64] {
        let sz = self.shape[1] * self.plane();
        &mut self.data[n * sz..(n + 1) * sz]
    }

    /// One channel plane of one image.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: [usize; 4]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("expected {:?}, got {:?}", shape, self.shape)));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Splits the channel axis at `at`, returning (channels[..at], channels[at..]).
    pub fn split_channels(&self, at: usize) -> Result<(Tensor, Tensor)> {
        let [n, c, h, w] = self.shape;
        if at > c {
            return Err(Error::Shape(format!("cannot split {} channels at {}", c, at)));
        }
        let p = h * w;
        let mut a = Tensor::zeros([n, at, h, w]);
        let mut b = Tensor::zeros([n, c - at, h, w]);
        for i in 0..n {
            let src = self.image(i);
            a.image_mut(i).copy_from_slice(&src[..at * p]);
            b.image_mut(i).copy_from_slice(&src[at * p..]);
        }
        Ok((a, b))
    }

    /// Inverse of [`Tensor::split_channels`].
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [n, ca, h, w] = a.shape;
        if b.shape[0] != n || b.shape[2] != h || b.shape[3] != w {
            return Err(Error::Shape(format!("cannot concat {:?} and {:?}", a.shape, b.shape)));
        }
        let cb = b.shape[1];
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        let p = h * w;
        for i in 0..n {
            let dst = out.image_mut(i);
            dst[..ca * p].copy_from_slice(a.image(i));
            dst[ca * p..].copy_from_slice(b.image(i));
        }
        Ok(out)
    }

    /// Selects a subset of batch entries.
    pub fn select_batch(&self, indices: &[usize]) -> Tensor {
        let [_, c, h, w] = self.shape;
        let mut out = Tensor::zeros([indices.len(), c, h, w]);
        for (dst, &src) in indices.iter().enumerate() {
            out.image_mut(dst).copy_from_slice(self.image(src));
        }
        out
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Argument("nothing to stack".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in parts {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", first.shape, t.shape)));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: [n, c, h, w], data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
