//! Decomposition diagnostics: per-layer components, the residual, and their
//! autocorrelation, written as CSV files and small SVG line charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::save_csv;
use crate::error::{Error, Result};
use crate::losses::{acf, AcfMatrix};
use crate::model::Model;
use crate::patching::SeriesTensor;
use crate::tensor::Tensor;

/// A decomposed `[C, L]` series in the input's own units.
///
/// With instance normalization on, components are scaled back by the
/// per-channel std and the residual also gets the mean, so
/// `input == sum(components) + residual` holds on the original scale.
#[derive(Clone, Debug)]
pub struct DecompositionReport {
    pub input: SeriesTensor<f64>,
    pub components: Vec<SeriesTensor<f64>>,
    pub residual: SeriesTensor<f64>,
    pub input_acf: AcfMatrix,
    pub residual_acf: AcfMatrix,
    /// Half-width of the white-noise band, `alpha / sqrt(L)`.
    pub band: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportSummary {
    pub layers: usize,
    pub input_len: usize,
    pub alpha: f64,
    pub band: f64,
    pub input_max_abs_acf: f64,
    pub residual_max_abs_acf: f64,
    pub residual_within_band: bool,
    /// Largest `|input - sum(components) - residual|` over all points.
    pub reconstruction_error: f64,
}

pub fn decomposition_report(model: &Model<f64>, x: &SeriesTensor<f64>) -> Result<DecompositionReport> {
    let cfg = model.config();
    if x.channels() != cfg.channels || x.len() != cfg.input_len {
        return Err(Error::shape(
            "decomposition input",
            &[x.channels(), x.len()],
            &[cfg.channels, cfg.input_len],
        ));
    }
    let d = model.decompose(x.values(), None)?;
    let (c, l) = (x.channels(), x.len());
    let (mean, std) = match &d.norm {
        Some(n) => (n.mean.data().to_vec(), n.std.data().to_vec()),
        None => (vec![0.0; c], vec![1.0; c]),
    };
    let rescale = |t: &Tensor<f64>, shift: bool| -> Result<SeriesTensor<f64>> {
        let mut v = t.data().to_vec();
        for ch in 0..c {
            for val in &mut v[ch * l..(ch + 1) * l] {
                *val = *val * std[ch] + if shift { mean[ch] } else { 0.0 };
            }
        }
        SeriesTensor::new(Tensor::new(vec![c, l], v)?)
    };
    let components = d
        .components
        .iter()
        .map(|s| rescale(s, false))
        .collect::<Result<Vec<_>>>()?;
    let residual = rescale(&d.residual, true)?;
    Ok(DecompositionReport {
        input_acf: acf(x.values())?,
        residual_acf: acf(residual.values())?,
        input: x.clone(),
        components,
        residual,
        band: cfg.alpha / (l as f64).sqrt(),
    })
}

impl DecompositionReport {
    pub fn summary(&self, alpha: f64) -> ReportSummary {
        let residual_max = self.residual_acf.max_abs();
        ReportSummary {
            layers: self.components.len(),
            input_len: self.input.len(),
            alpha,
            band: self.band,
            input_max_abs_acf: self.input_acf.max_abs(),
            residual_max_abs_acf: residual_max,
            residual_within_band: residual_max <= self.band,
            reconstruction_error: self.reconstruction_error(),
        }
    }

    pub fn reconstruction_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, &x) in self.input.values().data().iter().enumerate() {
            let s: f64 = self.components.iter().map(|c| c.values().data()[i]).sum();
            worst = worst.max((x - s - self.residual.values().data()[i]).abs());
        }
        worst
    }

    /// Writes `component_{i}.csv` (1-based), `residual.csv`, `acf_input.csv`,
    /// `acf_residual.csv` and one SVG per file. Returns every path written.
    pub fn write(&self, dir: &Path, channel_names: Option<&[String]>) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut emit_series = |stem: String, s: &SeriesTensor<f64>, title: &str| -> Result<()> {
            let csv = dir.join(format!("{stem}.csv"));
            save_csv(&csv, s, channel_names)?;
            let svg = dir.join(format!("{stem}.svg"));
            let lines: Vec<Vec<f64>> = (0..s.channels()).map(|c| s.channel(c).to_vec()).collect();
            crate::io::write_atomic(&svg, line_chart(title, &lines, None).as_bytes())?;
            written.push(csv);
            written.push(svg);
            Ok(())
        };
        for (i, comp) in self.components.iter().enumerate() {
            emit_series(
                format!("component_{}", i + 1),
                comp,
                &format!("component {}", i + 1),
            )?;
        }
        emit_series("residual".into(), &self.residual, "residual")?;
        for (stem, m) in [
            ("acf_input", &self.input_acf),
            ("acf_residual", &self.residual_acf),
        ] {
            let csv = dir.join(format!("{stem}.csv"));
            m.write_csv(&csv)?;
            let lines: Vec<Vec<f64>> = (0..m.degenerate.len()).map(|r| m.row(r).to_vec()).collect();
            let svg = dir.join(format!("{stem}.svg"));
            let title = stem.replace('_', " ");
            crate::io::write_atomic(&svg, line_chart(&title, &lines, Some(self.band)).as_bytes())?;
            written.push(csv);
            written.push(svg);
        }
        Ok(written)
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A static SVG with one polyline per series; `band` draws dashed lines at `±band`.
pub fn line_chart(title: &str, series: &[Vec<f64>], band: Option<f64>) -> String {
    let (w, h, pad) = (640.0, 240.0, 30.0);
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in series
        .iter()
        .flatten()
        .copied()
        .chain(band.into_iter().flat_map(|b| [b, -b]))
    {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 1.0, hi + 1.0);
    }
    let sx = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n.max(2) - 1) as f64;
    let sy = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{pad}" y="18" font-family="sans-serif" font-size="13">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="2" y="{:.1}" font-family="sans-serif" font-size="9">{hi:.3}</text><text x="2" y="{:.1}" font-family="sans-serif" font-size="9">{lo:.3}</text>"#,
        sy(hi) + 3.0,
        sy(lo) + 3.0
    );
    if lo < 0.0 && hi > 0.0 {
        let y = sy(0.0);
        let _ = writeln!(
            out,
            r##"<line x1="{pad}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#999" stroke-width="0.5"/>"##,
            w - pad
        );
    }
    if let Some(b) = band {
        for v in [b, -b] {
            let y = sy(v);
            let _ = writeln!(
                out,
                r##"<line x1="{pad}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#555" stroke-dasharray="4 3" stroke-width="0.8"/>"##,
                w - pad
            );
        }
    }
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            pts.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
