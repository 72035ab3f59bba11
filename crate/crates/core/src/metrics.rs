//! PSNR and SSIM, and the per-phantom evaluation report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_by_phantom, DecompositionSample};
use crate::error::{Error, Result};
use crate::projection::{Label, ProjectionImage};

/// Value reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 300.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ProjectionImage, b: &ProjectionImage, peak: f64) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.is_empty() {
        return Err(Error::shape("images are empty"));
    }
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::param(format!("peak must be finite and > 0, got {peak}")));
    }
    Ok(())
}

pub fn mse(a: &ProjectionImage, b: &ProjectionImage) -> Result<f64> {
    if !a.same_size(b) || a.is_empty() {
        return Err(Error::shape("mse needs equal, non-empty images"));
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ProjectionImage, b: &ProjectionImage, peak: f64) -> Result<f64> {
    check_pair(a, b, peak)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Mean structural similarity over all window positions that fit inside
/// the image (11×11 Gaussian window, σ = 1.5).
pub fn ssim(a: &ProjectionImage, b: &ProjectionImage, peak: f64) -> Result<f64> {
    check_pair(a, b, peak)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let win = gaussian_window();
    let (w, h) = (a.width, a.height);
    let at = |img: &ProjectionImage, x: usize, y: usize| img.data[y * w + x] as f64;
    let rows: Vec<f64> = (0..=h - SSIM_WINDOW)
        .into_par_iter()
        .map(|y0| {
            let mut row_sum = 0.0;
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = win[dy * SSIM_WINDOW + dx];
                        mu_a += k * at(a, x0 + dx, y0 + dy);
                        mu_b += k * at(b, x0 + dx, y0 + dy);
                    }
                }
                let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = win[dy * SSIM_WINDOW + dx];
                        let da = at(a, x0 + dx, y0 + dy) - mu_a;
                        let db = at(b, x0 + dx, y0 + dy) - mu_b;
                        var_a += k * da * da;
                        var_b += k * db * db;
                        cov += k * da * db;
                    }
                }
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                row_sum += num / den;
            }
            row_sum
        })
        .collect();
    let count = ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64;
    Ok(rows.iter().sum::<f64>() / count)
}

/// Anything that maps input projections to `d` component projections.
pub trait Decompose: Sync {
    fn decompose_batch(&self, inputs: &[&ProjectionImage]) -> Result<Vec<Vec<ProjectionImage>>>;
}

/// Baseline that predicts every component as `input / d`.
pub struct EvenSplit {
    pub components: usize,
}

impl Decompose for EvenSplit {
    fn decompose_batch(&self, inputs: &[&ProjectionImage]) -> Result<Vec<Vec<ProjectionImage>>> {
        let share = 1.0 / self.components as f32;
        Ok(inputs
            .iter()
            .map(|img| {
                (0..self.components)
                    .map(|c| ProjectionImage {
                        data: img.data.iter().map(|&v| v * share).collect(),
                        label: Label::Component(c),
                        ..(*img).clone()
                    })
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum PeakPolicy {
    /// Per component, the maximum of the ground truth over the evaluated set;
    /// for the reconstruction, the maximum input.
    #[default]
    GroundTruthMax,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Phantom name, or `overall`.
    pub group: String,
    pub samples: usize,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub reconstruction_psnr: f64,
    pub reconstruction_ssim: f64,
    /// Mean over pixels of `|Σ predicted components − input|`.
    pub constraint_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub components: usize,
    pub peaks: Vec<f64>,
    pub reconstruction_peak: f64,
    pub sample_count: usize,
    /// One row per phantom in order of appearance, then the overall row.
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn overall(&self) -> &ReportRow {
        self.rows.last().expect("report always has an overall row")
    }

    /// Aligned-column table; SSIM shown as a percentage.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<14} {:>6}", "group", "n");
        for c in 0..self.components {
            let _ = write!(header, " {:>9}", format!("psnr{c}"));
        }
        let _ = write!(header, " {:>9}", "psnr_rec");
        for c in 0..self.components {
            let _ = write!(header, " {:>8}", format!("ssim{c}%"));
        }
        let _ = write!(header, " {:>9} {:>11}", "ssim_rec%", "|sum-in|");
        let mut out = header;
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<14} {:>6}", row.group, row.samples);
            for p in &row.psnr {
                let _ = write!(out, " {:>9.3}", p);
            }
            let _ = write!(out, " {:>9.3}", row.reconstruction_psnr);
            for s in &row.ssim {
                let _ = write!(out, " {:>8.2}", s * 100.0);
            }
            let _ = write!(out, " {:>9.2} {:>11.3e}", row.reconstruction_ssim * 100.0, row.constraint_mae);
            out.push('\n');
        }
        out
    }
}

struct SampleScores {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    rec_psnr: f64,
    rec_ssim: f64,
    abs_err_sum: f64,
    pixels: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn summarize(group: String, scores: &[&SampleScores], d: usize) -> ReportRow {
    let psnr: Vec<f64> = (0..d).map(|c| mean(scores.iter().map(|s| s.psnr[c]))).collect();
    let ssim: Vec<f64> = (0..d).map(|c| mean(scores.iter().map(|s| s.ssim[c]))).collect();
    let pixels: usize = scores.iter().map(|s| s.pixels).sum();
    ReportRow {
        group,
        samples: scores.len(),
        mean_psnr: mean(psnr.iter().copied()),
        mean_ssim: mean(ssim.iter().copied()),
        psnr,
        ssim,
        reconstruction_psnr: mean(scores.iter().map(|s| s.rec_psnr)),
        reconstruction_ssim: mean(scores.iter().map(|s| s.rec_ssim)),
        constraint_mae: scores.iter().map(|s| s.abs_err_sum).sum::<f64>() / pixels as f64,
    }
}

/// Runs `model` over every sample input, in chunks of 16.
pub fn predict_all(model: &dyn Decompose, samples: &[DecompositionSample]) -> Result<Vec<Vec<ProjectionImage>>> {
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let inputs: Vec<&ProjectionImage> = chunk.iter().map(|s| &s.input).collect();
        let out = model.decompose_batch(&inputs)?;
        if out.len() != chunk.len() {
            return Err(Error::shape("model returned the wrong number of predictions"));
        }
        predictions.extend(out);
    }
    Ok(predictions)
}

/// Scores `model` on every sample: per-component and reconstruction
/// PSNR/SSIM averaged per phantom and overall.
pub fn evaluate(model: &dyn Decompose, samples: &[DecompositionSample], policy: PeakPolicy) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::param("cannot evaluate an empty dataset"));
    }
    let predictions = predict_all(model, samples)?;
    evaluate_predictions(samples, &predictions, policy)
}

/// Scores precomputed predictions, `predictions[i]` belonging to `samples[i]`.
pub fn evaluate_predictions(
    samples: &[DecompositionSample],
    predictions: &[Vec<ProjectionImage>],
    policy: PeakPolicy,
) -> Result<MetricReport> {
    let first = samples.first().ok_or_else(|| Error::param("cannot evaluate an empty dataset"))?;
    let d = first.components();
    for s in samples {
        s.validate()?;
        if s.components() != d {
            return Err(Error::shape("samples disagree on the component count"));
        }
    }
    if predictions.len() != samples.len() || predictions.iter().any(|p| p.len() != d) {
        return Err(Error::shape("predictions do not match the samples"));
    }
    let (peaks, rec_peak) = match policy {
        PeakPolicy::Fixed(p) => (vec![p; d], p),
        PeakPolicy::GroundTruthMax => {
            let peaks = (0..d)
                .map(|c| samples.iter().map(|s| s.targets[c].max() as f64).fold(0.0, f64::max))
                .collect();
            let rec = samples.iter().map(|s| s.input.max() as f64).fold(0.0, f64::max);
            (peaks, rec)
        }
    };
    // All-zero ground truth leaves no dynamic range; fall back to 1.
    let peaks: Vec<f64> = peaks.into_iter().map(|p| if p > 0.0 { p } else { 1.0 }).collect();
    let rec_peak = if rec_peak > 0.0 { rec_peak } else { 1.0 };

    let scores: Vec<SampleScores> = samples
        .par_iter()
        .zip(predictions)
        .map(|(s, pred)| -> Result<SampleScores> {
            let mut psnr_v = Vec::with_capacity(d);
            let mut ssim_v = Vec::with_capacity(d);
            for c in 0..d {
                psnr_v.push(psnr(&pred[c], &s.targets[c], peaks[c])?);
                ssim_v.push(ssim(&pred[c], &s.targets[c], peaks[c])?);
            }
            let mut sum = ProjectionImage::zeros(s.input.width, s.input.height, Label::Reconstruction);
            for p in pred {
                for (acc, &v) in sum.data.iter_mut().zip(&p.data) {
                    *acc += v;
                }
            }
            let abs_err_sum = sum
                .data
                .iter()
                .zip(&s.input.data)
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum();
            Ok(SampleScores {
                psnr: psnr_v,
                ssim: ssim_v,
                rec_psnr: psnr(&sum, &s.input, rec_peak)?,
                rec_ssim: ssim(&sum, &s.input, rec_peak)?,
                abs_err_sum,
                pixels: s.input.len(),
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut offset_of = std::collections::HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        offset_of.entry(s.phantom.as_str()).or_insert_with(Vec::new).push(i);
    }
    for (phantom, _) in group_by_phantom(samples) {
        let members: Vec<&SampleScores> = offset_of[phantom.as_str()].iter().map(|&i| &scores[i]).collect();
        rows.push(summarize(phantom, &members, d));
    }
    let all: Vec<&SampleScores> = scores.iter().collect();
    rows.push(summarize("overall".into(), &all, d));
    Ok(MetricReport {
        components: d,
        peaks,
        reconstruction_peak: rec_peak,
        sample_count: samples.len(),
        rows,
    })
}
