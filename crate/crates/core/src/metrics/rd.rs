use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use super::quality::{db_convert, max_scales, msssim, psnr};
use super::stats::Histogram;
use crate::checkpoint::{model_hash, ModelHash};
use crate::coder::{decode_image_with_hash, encode_image_with_hash, pad_amount, Bitstream};
use crate::entropy::analyze;
use crate::error::{Error, Result};
use crate::interpca::{interp_lambda, Alpha, RateControl};
use crate::layers::{CompressionModel, Gate};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityKind {
    Psnr,
    MsSsim,
    /// MS-SSIM in decibels.
    MsSsimDb,
}

impl fmt::Display for QualityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityKind::Psnr => "psnr_db",
            QualityKind::MsSsim => "msssim",
            QualityKind::MsSsimDb => "msssim_db",
        })
    }
}

impl FromStr for QualityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psnr_db" | "psnr" => Ok(QualityKind::Psnr),
            "msssim" => Ok(QualityKind::MsSsim),
            "msssim_db" => Ok(QualityKind::MsSsimDb),
            _ => Err(Error::Format(format!("unknown quality kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
    kind: QualityKind,
}

impl RdCurve {
    /// Points are sorted by rate.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>, kind: QualityKind) -> Self {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        RdCurve { label: label.into(), points, kind }
    }

    /// Positive, strictly increasing rates and finite, in-range qualities.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Format(format!("curve `{}`: {msg}", self.label)));
        for p in &self.points {
            if !(p.bpp.is_finite() && p.bpp > 0.0) {
                return bad(format!("bpp must be positive, got {}", p.bpp));
            }
            if !p.quality.is_finite() {
                return bad(format!("quality must be finite, got {}", p.quality));
            }
            if self.kind == QualityKind::MsSsim && !(p.quality > 0.0 && p.quality <= 1.0) {
                return bad(format!("MS-SSIM must lie in (0, 1], got {}", p.quality));
            }
        }
        if self.points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return bad("rates must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn kind(&self) -> QualityKind {
        self.kind
    }

    pub fn bpps(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp).collect()
    }

    pub fn qualities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.quality).collect()
    }
}

/// Writes curves as `label,bpp,quality,quality_kind` rows.
pub fn write_curves<W: Write>(out: W, curves: &[RdCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "bpp", "quality", "quality_kind"]).map_err(csv_err)?;
    for c in curves {
        for p in &c.points {
            w.write_record([c.label.clone(), p.bpp.to_string(), p.quality.to_string(), c.kind.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads curves back, grouping rows by label in first-seen order.
pub fn read_curves<R: Read>(input: R) -> Result<Vec<RdCurve>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["label", "bpp", "quality", "quality_kind"] {
        return Err(Error::Format("expected header `label,bpp,quality,quality_kind`".into()));
    }
    let mut curves: Vec<RdCurve> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| {
            rec[i].trim().parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad number `{}`", line + 2, &rec[i])))
        };
        let point = RdPoint { bpp: num(1)?, quality: num(2)? };
        let kind: QualityKind = rec[3].trim().parse()?;
        match curves.iter_mut().find(|c| c.label == rec[0]) {
            Some(c) if c.kind != kind => {
                return Err(Error::Format(format!("curve `{}` mixes quality kinds", c.label)));
            }
            Some(c) => {
                c.points.push(point);
                c.points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
            }
            None => curves.push(RdCurve::new(&rec[0], vec![point], kind)),
        }
    }
    Ok(curves)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Outcome of coding one image at one rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    /// Bits per pixel of the full bitstream, header included.
    pub bpp: f64,
    /// Model rate of the latents in bits per pixel.
    pub model_bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

/// Mean results over a set of images at one rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub j: usize,
    pub alpha: Alpha,
    pub lambda: f64,
    pub bpp: f64,
    pub model_bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
    pub msssim_db: f64,
    pub images: Vec<ImageResult>,
}

/// Codes `x`, decodes the bytes and scores the clamped reconstruction.
pub fn evaluate_image(model: &CompressionModel, hash: ModelHash, x: &Tensor, rate: &RateControl) -> Result<ImageResult> {
    let enc = encode_image_with_hash(model, hash, x, rate)?;
    let bytes = enc.bitstream.to_bytes();
    let dec = decode_image_with_hash(model, hash, &Bitstream::from_bytes(&bytes)?)?;
    let out = dec.output().map(|v| v.clamp(0.0, 1.0));
    let [_, _, h, w] = x.shape();
    let scales = max_scales(h, w);
    if scales == 0 {
        return Err(Error::Insufficient(format!("image {h}x{w} is too small for MS-SSIM")));
    }
    let pixels = (h * w) as f64;
    Ok(ImageResult {
        bpp: enc.bitstream.bpp(),
        model_bpp: (enc.ry_bits + enc.rz_bits) / pixels,
        psnr: psnr(x, &out)?,
        msssim: msssim(x, &out, scales)?,
    })
}

/// Evaluates every rate over every image on up to `threads` threads.
/// Results do not depend on the thread count.
pub fn rd_sweep(model: &CompressionModel, images: &[Tensor], rates: &[RateControl], threads: usize) -> Result<Vec<SweepPoint>> {
    if images.is_empty() {
        return Err(Error::Insufficient("no images to evaluate".into()));
    }
    let hash = model_hash(model);
    let jobs: Vec<(usize, usize)> = (0..rates.len()).flat_map(|r| (0..images.len()).map(move |i| (r, i))).collect();
    let threads = threads.clamp(1, jobs.len().max(1));
    let chunk = jobs.len().div_ceil(threads);
    let results: Vec<Result<ImageResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk.max(1))
            .map(|part| {
                s.spawn(move || {
                    part.iter().map(|&(r, i)| evaluate_image(model, hash, &images[i], &rates[r])).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut results = results.into_iter();
    let mut out = Vec::with_capacity(rates.len());
    for rate in rates {
        let per: Vec<ImageResult> = results.by_ref().take(images.len()).collect::<Result<_>>()?;
        let n = per.len() as f64;
        let mean = |f: fn(&ImageResult) -> f64| per.iter().map(f).sum::<f64>() / n;
        let ms = mean(|r| r.msssim);
        out.push(SweepPoint {
            j: rate.j,
            alpha: rate.alpha,
            lambda: interp_lambda(rate)?,
            bpp: mean(|r| r.bpp),
            model_bpp: mean(|r| r.model_bpp),
            psnr: mean(|r| r.psnr),
            msssim: ms,
            msssim_db: db_convert(ms),
            images: per,
        });
    }
    Ok(out)
}

/// Every table entry as its own rate, lowest lambda first.
pub fn table_rates(lambda_table: &[f64]) -> Result<Vec<RateControl>> {
    (0..lambda_table.len()).map(|i| RateControl::at_table_index(lambda_table, i)).collect()
}

/// `alpha = 1 - k/m` for `k = 0..rows` inside interval `j`, lambda
/// increasing. `rows` is at most `m + 1`.
pub fn fine_rates(lambda_table: &[f64], j: usize, m: u16, rows: usize) -> Result<Vec<RateControl>> {
    if m == 0 {
        return Err(Error::Config("grid density must be positive".into()));
    }
    if rows > m as usize + 1 {
        return Err(Error::Config(format!("at most {} rows fit a 1/{m} grid, asked for {rows}", m as usize + 1)));
    }
    (0..rows as u16).map(|k| RateControl::inference(lambda_table, j, Alpha::new(m - k, m)?, m)).collect()
}

/// Every grid point `alpha = 1 - k/m` across the whole table, lambda
/// increasing, each lambda once.
pub fn grid_rates(lambda_table: &[f64], m: u16) -> Result<Vec<RateControl>> {
    let n = lambda_table.len();
    if n < 2 {
        return Err(Error::Config("need at least two lambdas".into()));
    }
    let mut out = Vec::new();
    for j in 0..n - 1 {
        out.extend(fine_rates(lambda_table, j, m, m as usize)?);
    }
    out.push(RateControl::inference(lambda_table, n - 2, Alpha::ZERO, m)?);
    Ok(out)
}

/// Sweep points as a curve of one quality kind.
pub fn to_curve(label: &str, points: &[SweepPoint], kind: QualityKind) -> RdCurve {
    let pts = points
        .iter()
        .map(|p| RdPoint {
            bpp: p.bpp,
            quality: match kind {
                QualityKind::Psnr => p.psnr,
                QualityKind::MsSsim => p.msssim,
                QualityKind::MsSsimDb => p.msssim_db,
            },
        })
        .collect();
    RdCurve::new(label, pts, kind)
}

/// Mean gate response of one layer at one table entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStat {
    pub net: &'static str,
    pub layer: usize,
    pub index: usize,
    pub lambda: f64,
    pub mean_scale: f64,
    /// Additive shift, present for conditional convolution only.
    pub mean_shift: Option<f64>,
}

/// Mean gate scales for every gated layer and every table entry.
pub fn gate_statistics(model: &CompressionModel) -> Result<Vec<GateStat>> {
    let table = &model.config.lambda_table;
    let mut out = Vec::new();
    for (net, layer, gate) in model.gates() {
        for (i, &lambda) in table.iter().enumerate() {
            let (mean_scale, mean_shift) = match gate {
                Gate::Interp(g) => {
                    let s = g.scale_values(&model.store, &RateControl::at_table_index(table, i)?)?;
                    (s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64, None)
                }
                Gate::Conditional(g) => {
                    let (m, b) = g.row_means(&model.store, i);
                    (m, Some(b))
                }
            };
            out.push(GateStat { net, layer, index: i, lambda, mean_scale, mean_shift });
        }
    }
    Ok(out)
}

pub fn write_gate_statistics<W: Write>(out: W, stats: &[GateStat]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["net", "layer", "index", "lambda", "mean_scale", "mean_shift"]).map_err(csv_err)?;
    for s in stats {
        w.write_record([
            s.net.to_string(),
            s.layer.to_string(),
            s.index.to_string(),
            s.lambda.to_string(),
            s.mean_scale.to_string(),
            s.mean_shift.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Histograms of the quantized latent and hyper latent over a set of images.
pub fn latent_histograms(model: &CompressionModel, images: &[Tensor], rate: &RateControl) -> Result<(Histogram, Histogram)> {
    let ri = model.rate_input(rate)?;
    let (mut ys, mut zs) = (Vec::new(), Vec::new());
    for x in images {
        let [_, _, h, w] = x.shape();
        let xp = x.pad_replicate(pad_amount(h), pad_amount(w));
        let a = analyze(model, &xp, &ri)?;
        ys.extend_from_slice(a.y_hat.data());
        zs.extend_from_slice(a.z_hat.data());
    }
    Ok((Histogram::from_values(&ys)?, Histogram::from_values(&zs)?))
}
