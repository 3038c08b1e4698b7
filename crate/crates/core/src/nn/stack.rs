use std::collections::BTreeMap;

use super::{Conv2d, ConvCache, Gdn, GdnCache};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Gdn(Gdn),
    Relu,
}

pub enum LayerCache {
    Conv(ConvCache),
    Gdn(GdnCache),
    Relu(Tensor),
}

/// Captured convolution inputs and outputs, keyed by layer id.
///
/// The output is the compact (pre-scatter) response of the layer; the input is
/// what the kernel actually saw.
#[derive(Default, Debug, Clone)]
pub struct Tap {
    pub features: BTreeMap<String, (Tensor, Tensor)>,
}

/// A named sequence of layers. Layer ids are `"{name}.{index}"`.
#[derive(Clone, Debug)]
pub struct Stack {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Stack { name: name.into(), layers }
    }

    pub fn layer_id(&self, index: usize) -> String {
        format!("{}.{}", self.name, index)
    }

    /// Indices of the convolution layers, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv(_)).then_some(i))
            .collect()
    }

    pub fn conv(&self, index: usize) -> Option<&Conv2d> {
        match self.layers.get(index) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, index: usize) -> Option<&mut Conv2d> {
        match self.layers.get_mut(index) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor, mut tap: Option<&mut Tap>) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = match layer {
                Layer::Conv(c) => {
                    let (y, cache) = c.forward(&cur)?;
                    if let Some(t) = tap.as_deref_mut() {
                        let compact = match &c.scatter {
                            None => y.clone(),
                            Some(sc) => {
                                let [n, _, h, w] = y.shape();
                                let mut out = Tensor::zeros([n, c.out_ch, h, w]);
                                for b in 0..n {
                                    for (j, &src) in sc.index.iter().enumerate() {
                                        out.channel_mut(b, j).copy_from_slice(y.channel(b, src));
                                    }
                                }
                                out
                            }
                        };
                        t.features.insert(self.layer_id(i), (cache.input().clone(), compact));
                    }
                    (y, LayerCache::Conv(cache))
                }
                Layer::Gdn(g) => {
                    let (y, cache) = g.forward(&cur)?;
                    (y, LayerCache::Gdn(cache))
                }
                Layer::Relu => {
                    let y = cur.map(|v| v.max(0.0));
                    (y, LayerCache::Relu(cur))
                }
            };
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    pub fn backward(&mut self, dy: &Tensor, caches: &[LayerCache]) -> Result<Tensor> {
        if caches.len() != self.layers.len() {
            return Err(Error::Invariant(format!("{}: cache/layer count mismatch", self.name)));
        }
        let mut grad = dy.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            grad = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv(cc)) => c.backward(&grad, cc)?,
                (Layer::Gdn(g), LayerCache::Gdn(gc)) => g.backward(&grad, gc)?,
                (Layer::Relu, LayerCache::Relu(input)) => grad.zip_map(input, |d, x| if x > 0.0 { d } else { 0.0 })?,
                _ => return Err(Error::Invariant(format!("{}: cache kind mismatch", self.name))),
            };
        }
        Ok(grad)
    }
}
