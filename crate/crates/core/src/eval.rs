//! PSNR, bits per pixel, rate-distortion curves and BD-rate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec::{entropy, CodecModel};
use crate::data::EvalImage;
use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1 / MSE)` for pixels in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return arg_err(format!("shape mismatch {:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    if x.is_empty() {
        return arg_err("empty images");
    }
    let mse = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn bpp(total_bits: f64, pixel_count: usize) -> Result<f64> {
    if pixel_count == 0 {
        return arg_err("pixel count must be positive");
    }
    Ok(total_bits / pixel_count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub label: String,
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts points by rate and checks they are usable.
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for p in &points {
            if !(p.bpp >= 0.0) || !p.psnr_db.is_finite() {
                return Err(Error::Evaluation(format!("invalid RD point {:?}", p)));
            }
        }
        Ok(RDCurve { label: label.into(), points })
    }
}

/// Least-squares cubic through `(x, y)`; coefficients in ascending order of
/// the normalized variable `(x - centre) / spread`.
struct Cubic {
    coef: [f64; 4],
    centre: f64,
    spread: f64,
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Result<Cubic> {
        let centre = x.iter().sum::<f64>() / x.len() as f64;
        let spread = x.iter().map(|v| (v - centre).abs()).fold(0.0, f64::max).max(1e-12);
        let v = DMatrix::from_fn(x.len(), 4, |r, c| ((x[r] - centre) / spread).powi(c as i32));
        let sol = v
            .svd(true, true)
            .solve(&DVector::from_column_slice(y), 1e-12)
            .map_err(|e| Error::Evaluation(format!("cubic fit failed: {}", e)))?;
        Ok(Cubic { coef: [sol[0], sol[1], sol[2], sol[3]], centre, spread })
    }

    /// Exact integral over `[a, b]` in the original variable.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |x: f64| {
            let t = (x - self.centre) / self.spread;
            self.coef.iter().enumerate().map(|(k, c)| c * t.powi(k as i32 + 1) / (k as f64 + 1.0)).sum::<f64>()
        };
        (anti(b) - anti(a)) * self.spread
    }
}

/// Average rate difference of `test` against `reference` at equal PSNR, in
/// percent. Negative values mean `test` needs fewer bits.
pub fn bd_rate(reference: &RDCurve, test: &RDCurve) -> Result<f64> {
    for c in [reference, test] {
        if c.points.len() < 4 {
            return Err(Error::Evaluation(format!("curve '{}' has fewer than 4 points", c.label)));
        }
        if c.points.iter().any(|p| p.bpp <= 0.0) {
            return Err(Error::Evaluation(format!("curve '{}' has a non-positive rate", c.label)));
        }
    }
    let prep = |c: &RDCurve| -> (Vec<f64>, Vec<f64>) {
        (c.points.iter().map(|p| p.psnr_db).collect(), c.points.iter().map(|p| p.bpp.log10()).collect())
    };
    let (qr, rr) = prep(reference);
    let (qt, rt) = prep(test);
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = min(&qr).max(min(&qt));
    let hi = max(&qr).min(max(&qt));
    if !(hi > lo) {
        return Err(Error::Evaluation(format!(
            "PSNR ranges of '{}' and '{}' do not overlap",
            reference.label, test.label
        )));
    }
    let fr = Cubic::fit(&qr, &rr)?;
    let ft = Cubic::fit(&qt, &rt)?;
    let avg = (ft.integral(lo, hi) - fr.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Per-image evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub source: String,
    pub bpp: f64,
    pub psnr_db: f64,
}

/// Rounded-latent evaluation of one image: estimated bits over the original
/// (unpadded) pixel count, PSNR over the unpadded region.
pub fn evaluate_image(model: &CodecModel, image: &EvalImage) -> Result<ImageScore> {
    let out = model.eval_forward(&image.pixels)?;
    let bits = entropy::bits(&out.likelihood_y) + entropy::bits(&out.likelihood_z);
    let original = image.original();
    let recon = image.unpad(&out.x_hat);
    Ok(ImageScore {
        source: image.source.clone(),
        bpp: bpp(bits, image.height * image.width)?,
        psnr_db: psnr(&original, &recon)?,
    })
}

/// Mean bpp and mean PSNR over `images`, summed in order.
pub fn evaluate_model(model: &CodecModel, images: &[EvalImage]) -> Result<(f64, f64, Vec<ImageScore>)> {
    if images.is_empty() {
        return arg_err("evaluation set is empty");
    }
    let scores = images.iter().map(|im| evaluate_image(model, im)).collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    let mean_bpp = scores.iter().map(|s| s.bpp).sum::<f64>() / n;
    let mean_psnr = scores.iter().map(|s| s.psnr_db).sum::<f64>() / n;
    Ok((mean_bpp, mean_psnr, scores))
}

/// One RD point per λ in `lambdas`, each from the model trained at that λ.
pub fn build_rd_curve(
    label: &str,
    lambdas: &[f64],
    models: &[(f64, &CodecModel)],
    images: &[EvalImage],
) -> Result<RDCurve> {
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let model = models
            .iter()
            .find(|(l, _)| *l == lambda)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::Argument(format!("no model for lambda {}", lambda)))?;
        let (b, p, _) = evaluate_model(model, images)?;
        points.push(RDPoint { lambda, bpp: b, psnr_db: p });
    }
    RDCurve::new(label, points)
}

/// Writes `label,lambda,bpp,psnr_db` rows.
pub fn write_curves_csv(path: &Path, curves: &[RDCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "lambda", "bpp", "psnr_db"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([c.label.clone(), p.lambda.to_string(), p.bpp.to_string(), p.psnr_db.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads curves written by [`write_curves_csv`], preserving label order.
pub fn read_curves_csv(path: &Path) -> Result<Vec<RDCurve>> {
    #[derive(Deserialize)]
    struct Row {
        label: String,
        lambda: f64,
        bpp: f64,
        psnr_db: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut curves: Vec<(String, Vec<RDPoint>)> = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        let p = RDPoint { lambda: row.lambda, bpp: row.bpp, psnr_db: row.psnr_db };
        match curves.iter_mut().find(|(l, _)| *l == row.label) {
            Some((_, pts)) => pts.push(p),
            None => curves.push((row.label, vec![p])),
        }
    }
    curves.into_iter().map(|(l, p)| RDCurve::new(l, p)).collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-9);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

/// Renders PSNR against bpp as SVG, one series per curve.
pub fn render_svg(curves: &[RDCurve]) -> Result<String> {
    let pts: Vec<&RDPoint> = curves.iter().flat_map(|c| &c.points).collect();
    if pts.is_empty() {
        return arg_err("nothing to plot");
    }
    let (w, h, ml, mr, mt, mb) = (720.0, 480.0, 70.0, 190.0, 30.0, 55.0);
    let fold = |f: fn(&RDPoint) -> f64| {
        pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(f(p)), b.max(f(p))))
    };
    let (mut x0, mut x1) = fold(|p| p.bpp);
    let (mut y0, mut y1) = fold(|p| p.psnr_db);
    let pad = |a: &mut f64, b: &mut f64| {
        let d = ((*b - *a) * 0.05).max(1e-3);
        *a -= d;
        *b += d;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let sx = |v: f64| ml + (v - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |v: f64| h - mb - (v - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - ml - mr,
        h - mt - mb
    );
    for t in nice_ticks(x0, x1, 6) {
        let _ = writeln!(
            s,
            r##"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="#ddd"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"##,
            sx(t),
            mt,
            h - mb,
            h - mb + 16.0,
            format!("{:.3}", t).trim_end_matches('0').trim_end_matches('.')
        );
    }
    for t in nice_ticks(y0, y1, 6) {
        let _ = writeln!(
            s,
            r##"<line x1="{1}" y1="{0:.2}" x2="{2}" y2="{0:.2}" stroke="#ddd"/><text x="{3}" y="{4:.2}" text-anchor="end">{5}</text>"##,
            sy(t),
            ml,
            w - mr,
            ml - 6.0,
            sy(t) + 4.0,
            format!("{:.2}", t).trim_end_matches('0').trim_end_matches('.')
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">Rate (bpp)</text>"#, ml + (w - ml - mr) / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(18,{}) rotate(-90)" text-anchor="middle">PSNR (dB)</text>"#,
        mt + (h - mt - mb) / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr_db))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, path.join(" "), color);
        for p in &c.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}"/>"#, sx(p.bpp), sy(p.psnr_db), color);
        }
        let ly = mt + 12.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{3}" stroke-width="2"/><text x="{4}" y="{5}">{6}</text>"#,
            w - mr + 12.0,
            ly,
            w - mr + 36.0,
            color,
            w - mr + 42.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the SVG plot to `path` and the plotted values to `path` with a
/// `.csv` extension. Returns the CSV path.
pub fn emit_plot(curves: &[RDCurve], path: &Path) -> Result<PathBuf> {
    if curves.is_empty() {
        return arg_err("no curves to plot");
    }
    std::fs::write(path, render_svg(curves)?)?;
    let csv_path = path.with_extension("csv");
    write_curves_csv(&csv_path, curves)?;
    Ok(csv_path)
}

/// Plain-text table with left-aligned first column and right-aligned others.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{:<w$}", c, w = widths[i]) } else { format!("{:>w$}", c, w = widths[i]) })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
