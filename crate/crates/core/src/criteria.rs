//! Per-channel importance under the L2-norm, HRank and CHIP criteria, for
//! both output feature maps (filters) and input feature maps (filter channels).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, LatentQuant};
use crate::error::{arg_err, Error, Result};
use crate::nn::Tap;
use crate::tensor::Tensor;

/// Relative singular-value threshold for the numerical rank.
pub const RANK_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    L2,
    Hrank,
    Chip,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::L2 => "l2",
            Criterion::Hrank => "hrank",
            Criterion::Chip => "chip",
        }
    }

    /// Whether the criterion needs calibration feature maps.
    pub fn feature_guided(self) -> bool {
        !matches!(self, Criterion::L2)
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" | "l2-norm" | "l2norm" => Ok(Criterion::L2),
            "hrank" => Ok(Criterion::Hrank),
            "chip" => Ok(Criterion::Chip),
            other => arg_err(format!("unknown criterion '{}'", other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Filters of the layer (its output feature maps).
    OutputMaps,
    /// Filter channels of the layer (its input feature maps).
    InputMaps,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::OutputMaps => "output_maps",
            Direction::InputMaps => "input_maps",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub layer_id: String,
    pub direction: Direction,
    pub criterion: Criterion,
    pub scores: Vec<f64>,
}

/// Images used for feature-guided criteria.
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    pub images: Vec<Tensor>,
}

impl CalibrationSet {
    /// Splits batches into single images.
    pub fn new(batches: &[Tensor]) -> Result<Self> {
        let images: Vec<Tensor> =
            batches.iter().flat_map(|b| (0..b.batch()).map(move |i| b.select_batch(&[i]))).collect();
        if images.is_empty() {
            return arg_err("calibration set is empty");
        }
        Ok(CalibrationSet { images })
    }

    pub fn count(&self) -> usize {
        self.images.len()
    }

    pub fn truncated(&self, n: usize) -> CalibrationSet {
        CalibrationSet { images: self.images.iter().take(n.max(1)).cloned().collect() }
    }
}

/// L2 norm of each filter (`OutputMaps`) or of each input-channel slice
/// across all filters (`InputMaps`). `shape` is `(out, in, k, k)`.
pub fn l2_importance(layer_id: &str, weights: &[f64], shape: [usize; 4], direction: Direction) -> Result<ImportanceScores> {
    let [out, inp, kh, kw] = shape;
    if weights.is_empty() || out * inp * kh * kw == 0 {
        return arg_err(format!("layer {} is empty", layer_id));
    }
    if weights.len() != out * inp * kh * kw {
        return Err(Error::Shape(format!("{} weights for shape {:?}", weights.len(), shape)));
    }
    let kk = kh * kw;
    let n = match direction {
        Direction::OutputMaps => out,
        Direction::InputMaps => inp,
    };
    let mut sq = vec![0.0; n];
    for o in 0..out {
        for i in 0..inp {
            let s: f64 = weights[(o * inp + i) * kk..(o * inp + i + 1) * kk].iter().map(|w| w * w).sum();
            match direction {
                Direction::OutputMaps => sq[o] += s,
                Direction::InputMaps => sq[i] += s,
            }
        }
    }
    Ok(ImportanceScores {
        layer_id: layer_id.into(),
        direction,
        criterion: Criterion::L2,
        scores: sq.into_iter().map(f64::sqrt).collect(),
    })
}

fn check_maps(layer_id: &str, maps: &[Tensor]) -> Result<usize> {
    let first = maps.first().ok_or_else(|| Error::Argument(format!("{}: empty calibration set", layer_id)))?;
    let c = first.channels();
    for m in maps {
        if m.channels() != c {
            return Err(Error::Shape(format!("{}: inconsistent feature-map widths", layer_id)));
        }
        if !m.all_finite() {
            return Err(Error::Numerical { term: layer_id.into(), detail: "non-finite feature map".into() });
        }
    }
    Ok(c)
}

/// Number of singular values above `RANK_TOL · σ_max`.
pub fn numerical_rank(plane: &[f64], h: usize, w: usize) -> usize {
    let sv = DMatrix::from_row_slice(h, w, plane).singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

/// Average numerical rank of each channel over the calibration images.
/// Every entry of `feature_maps` is one image's `(n, C, h, w)` response; all
/// batch entries are used.
pub fn hrank_importance(layer_id: &str, feature_maps: &[Tensor], direction: Direction) -> Result<ImportanceScores> {
    let c = check_maps(layer_id, feature_maps)?;
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for t in feature_maps {
        for b in 0..t.batch() {
            for (ch, s) in sums.iter_mut().enumerate() {
                *s += numerical_rank(t.channel(b, ch), t.height(), t.width()) as f64;
            }
            count += 1;
        }
    }
    Ok(ImportanceScores {
        layer_id: layer_id.into(),
        direction,
        criterion: Criterion::Hrank,
        scores: sums.into_iter().map(|s| s / count as f64).collect(),
    })
}

fn nuclear_from_gram(gram: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(gram.clone()).eigenvalues.iter().map(|&e| e.max(0.0).sqrt()).sum()
}

/// Drop in nuclear norm of the (channels × pixels) feature matrix when one
/// channel is zeroed, averaged over the calibration images.
pub fn chip_importance(layer_id: &str, feature_maps: &[Tensor], direction: Direction) -> Result<ImportanceScores> {
    let c = check_maps(layer_id, feature_maps)?;
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for t in feature_maps {
        for b in 0..t.batch() {
            let a = DMatrix::from_row_slice(c, t.plane(), t.image(b));
            let gram = &a * a.transpose();
            let full = nuclear_from_gram(&gram);
            for (ch, s) in sums.iter_mut().enumerate() {
                let mut g = gram.clone();
                g.row_mut(ch).fill(0.0);
                g.column_mut(ch).fill(0.0);
                *s += (full - nuclear_from_gram(&g)).max(0.0);
            }
            count += 1;
        }
    }
    Ok(ImportanceScores {
        layer_id: layer_id.into(),
        direction,
        criterion: Criterion::Chip,
        scores: sums.into_iter().map(|s| s / count as f64).collect(),
    })
}

/// Channel indices ordered least important first; ties go to the lower index.
pub fn rank_channels(scores: &ImportanceScores) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]).then(a.cmp(&b)));
    order
}

/// Per-layer (input, output) feature maps, one entry per calibration image.
#[derive(Clone, Debug, Default)]
pub struct FeatureBank {
    pub maps: BTreeMap<String, (Vec<Tensor>, Vec<Tensor>)>,
}

impl FeatureBank {
    /// Runs every calibration image through the model in eval mode and
    /// records each convolution's input and output.
    pub fn collect(model: &CodecModel, calib: &CalibrationSet) -> Result<Self> {
        let mut bank = FeatureBank::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for img in &calib.images {
            let mut tap = Tap::default();
            model.forward_with(img, LatentQuant::Round, &mut rng, Some(&mut tap))?;
            for (id, (input, output)) in tap.features {
                let e = bank.maps.entry(id).or_default();
                e.0.push(input);
                e.1.push(output);
            }
        }
        Ok(bank)
    }

    pub fn maps(&self, layer_id: &str, direction: Direction) -> Result<&[Tensor]> {
        let (i, o) = self
            .maps
            .get(layer_id)
            .ok_or_else(|| Error::Argument(format!("no feature maps for layer {}", layer_id)))?;
        Ok(match direction {
            Direction::OutputMaps => o,
            Direction::InputMaps => i,
        })
    }
}

/// Importance of one layer's channels under `criterion`.
pub fn layer_importance(
    model: &CodecModel,
    bank: Option<&FeatureBank>,
    layer_id: &str,
    direction: Direction,
    criterion: Criterion,
) -> Result<ImportanceScores> {
    let conv = model
        .conv_layer(layer_id)
        .ok_or_else(|| Error::Argument(format!("unknown layer {}", layer_id)))?;
    match criterion {
        Criterion::L2 => l2_importance(
            layer_id,
            &conv.weight.value,
            [conv.out_ch, conv.in_ch, conv.kernel, conv.kernel],
            direction,
        ),
        Criterion::Hrank | Criterion::Chip => {
            let bank = bank.ok_or_else(|| Error::State("feature-guided criterion needs feature maps".into()))?;
            let maps = bank.maps(layer_id, direction)?;
            if criterion == Criterion::Hrank {
                hrank_importance(layer_id, maps, direction)
            } else {
                chip_importance(layer_id, maps, direction)
            }
        }
    }
}

/// Writes `layer_id,direction,criterion,channel,score` rows.
pub fn write_scores_csv(path: &Path, scores: &[ImportanceScores]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer_id", "direction", "criterion", "channel", "score"])?;
    for s in scores {
        for (ch, v) in s.scores.iter().enumerate() {
            w.write_record([
                s.layer_id.as_str(),
                s.direction.name(),
                s.criterion.name(),
                &ch.to_string(),
                &format!("{:e}", v),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
