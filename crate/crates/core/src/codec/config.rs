use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the four sub-networks of the codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subnet {
    #[serde(rename = "g_a")]
    Analysis,
    #[serde(rename = "h_a")]
    HyperAnalysis,
    #[serde(rename = "h_s")]
    HyperSynthesis,
    #[serde(rename = "g_s")]
    Synthesis,
}

impl Subnet {
    pub const ALL: [Subnet; 4] = [Subnet::Analysis, Subnet::HyperAnalysis, Subnet::HyperSynthesis, Subnet::Synthesis];

    pub fn name(self) -> &'static str {
        match self {
            Subnet::Analysis => "g_a",
            Subnet::HyperAnalysis => "h_a",
            Subnet::HyperSynthesis => "h_s",
            Subnet::Synthesis => "g_s",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
    Gdn,
    Igdn,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub subnet: Subnet,
    pub kind: LayerKind,
    #[serde(default)]
    pub kernel: usize,
    #[serde(default)]
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl LayerSpec {
    fn conv(subnet: Subnet, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec { subnet, kind: LayerKind::Conv, kernel, stride, in_ch, out_ch }
    }
    fn tconv(subnet: Subnet, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec { subnet, kind: LayerKind::TransposedConv, kernel, stride, in_ch, out_ch }
    }
    fn pointwise(subnet: Subnet, kind: LayerKind, ch: usize) -> Self {
        LayerSpec { subnet, kind, kernel: 0, stride: 1, in_ch: ch, out_ch: ch }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::TransposedConv)
    }
}

/// Widths and layer list of the mean-scale hyperprior codec.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub n_channels: usize,
    pub m_channels: usize,
    pub input_channels: usize,
    pub layer_specs: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecPreset {
    Full,
    Desk,
}

impl CodecConfig {
    /// Standard mean-scale hyperprior topology with internal width `n` and latent width `m`.
    pub fn mean_scale(n: usize, m: usize, input_channels: usize) -> Result<Self> {
        use LayerKind::*;
        use Subnet::*;
        let mid = (3 * m).div_ceil(2);
        let specs = vec![
            LayerSpec::conv(Analysis, input_channels, n, 5, 2),
            LayerSpec::pointwise(Analysis, Gdn, n),
            LayerSpec::conv(Analysis, n, n, 5, 2),
            LayerSpec::pointwise(Analysis, Gdn, n),
            LayerSpec::conv(Analysis, n, n, 5, 2),
            LayerSpec::pointwise(Analysis, Gdn, n),
            LayerSpec::conv(Analysis, n, m, 5, 2),
            LayerSpec::conv(HyperAnalysis, m, n, 3, 1),
            LayerSpec::pointwise(HyperAnalysis, Relu, n),
            LayerSpec::conv(HyperAnalysis, n, n, 5, 2),
            LayerSpec::pointwise(HyperAnalysis, Relu, n),
            LayerSpec::conv(HyperAnalysis, n, n, 5, 2),
            LayerSpec::tconv(HyperSynthesis, n, m, 5, 2),
            LayerSpec::pointwise(HyperSynthesis, Relu, m),
            LayerSpec::tconv(HyperSynthesis, m, mid, 5, 2),
            LayerSpec::pointwise(HyperSynthesis, Relu, mid),
            LayerSpec::conv(HyperSynthesis, mid, 2 * m, 3, 1),
            LayerSpec::tconv(Synthesis, m, n, 5, 2),
            LayerSpec::pointwise(Synthesis, Igdn, n),
            LayerSpec::tconv(Synthesis, n, n, 5, 2),
            LayerSpec::pointwise(Synthesis, Igdn, n),
            LayerSpec::tconv(Synthesis, n, n, 5, 2),
            LayerSpec::pointwise(Synthesis, Igdn, n),
            LayerSpec::tconv(Synthesis, n, input_channels, 5, 2),
        ];
        let cfg = CodecConfig { n_channels: n, m_channels: m, input_channels, layer_specs: specs };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(preset: CodecPreset) -> Self {
        match preset {
            CodecPreset::Full => Self::mean_scale(128, 192, 3),
            CodecPreset::Desk => Self::mean_scale(32, 48, 3),
        }
        .expect("built-in presets are valid")
    }

    pub fn desk() -> Self {
        Self::preset(CodecPreset::Desk)
    }

    pub fn full() -> Self {
        Self::preset(CodecPreset::Full)
    }

    pub fn specs(&self, subnet: Subnet) -> impl Iterator<Item = &LayerSpec> {
        self.layer_specs.iter().filter(move |s| s.subnet == subnet)
    }

    fn scale_factor(&self, subnet: Subnet) -> usize {
        self.specs(subnet).filter(|s| s.is_conv()).map(|s| s.stride).product()
    }

    /// Spatial downsampling of `g_a`.
    pub fn latent_factor(&self) -> usize {
        self.scale_factor(Subnet::Analysis)
    }

    /// Factor input sizes must divide: `g_a` followed by `h_a`.
    pub fn total_factor(&self) -> usize {
        self.scale_factor(Subnet::Analysis) * self.scale_factor(Subnet::HyperAnalysis)
    }

    /// Width of the hyper-latent `z`.
    pub fn hyper_channels(&self) -> usize {
        self.specs(Subnet::HyperAnalysis).last().map_or(0, |s| s.out_ch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_channels == 0 || self.m_channels == 0 || self.input_channels == 0 {
            return bad("all widths must be at least 1".into());
        }
        for subnet in Subnet::ALL {
            let specs: Vec<&LayerSpec> = self.specs(subnet).collect();
            if specs.is_empty() {
                return bad(format!("{} has no layers", subnet.name()));
            }
            for w in specs.windows(2) {
                if w[0].out_ch != w[1].in_ch {
                    return bad(format!(
                        "{}: width {} does not feed width {}",
                        subnet.name(),
                        w[0].out_ch,
                        w[1].in_ch
                    ));
                }
            }
            for s in &specs {
                if s.in_ch == 0 || s.out_ch == 0 {
                    return bad(format!("{}: zero-width layer", subnet.name()));
                }
                if s.is_conv() && (s.kernel % 2 == 0 || s.stride == 0) {
                    return bad(format!("{}: kernels must be odd and strides positive", subnet.name()));
                }
                match s.kind {
                    LayerKind::Conv | LayerKind::TransposedConv => {}
                    _ if s.in_ch != s.out_ch => return bad("pointwise layers keep width".into()),
                    _ => {}
                }
            }
        }
        let first = |s: Subnet| self.specs(s).next().unwrap();
        let last = |s: Subnet| self.specs(s).last().unwrap();
        let m = self.m_channels;
        if first(Subnet::Analysis).in_ch != self.input_channels || last(Subnet::Analysis).out_ch != m {
            return bad("g_a must map input channels to M".into());
        }
        if first(Subnet::Synthesis).in_ch != m || last(Subnet::Synthesis).out_ch != self.input_channels {
            return bad("g_s must map M to input channels".into());
        }
        if first(Subnet::HyperAnalysis).in_ch != m {
            return bad("h_a must read M channels".into());
        }
        if first(Subnet::HyperSynthesis).in_ch != self.hyper_channels() {
            return bad("h_s must read the hyper-latent width".into());
        }
        if last(Subnet::HyperSynthesis).out_ch != 2 * m {
            return bad("h_s must emit 2M channels (mean and scale halves)".into());
        }
        let up = |s: Subnet| -> usize {
            self.specs(s).filter(|l| l.kind == LayerKind::TransposedConv).map(|l| l.stride).product()
        };
        let down = |s: Subnet| -> usize { self.specs(s).filter(|l| l.kind == LayerKind::Conv).map(|l| l.stride).product() };
        if down(Subnet::Synthesis) != 1 || up(Subnet::Synthesis) != down(Subnet::Analysis) || up(Subnet::Analysis) != 1 {
            return bad("g_s must mirror the downsampling of g_a".into());
        }
        if down(Subnet::HyperSynthesis) != 1 || up(Subnet::HyperSynthesis) != down(Subnet::HyperAnalysis) {
            return bad("h_s must mirror the downsampling of h_a".into());
        }
        Ok(())
    }
}
