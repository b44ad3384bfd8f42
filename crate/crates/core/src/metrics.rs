//! PSNR / SSIM and the Linear / Warp-Only / Full interpolation protocol.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataio::Triplet;
use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::par;
use crate::tvl1::Tvl1Params;
use crate::warp::{self, Refiner};

pub const PEAK: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (w, h) = a.dims();
    let (da, db) = (a.data(), b.data());
    let sum = par::sum_rows(h, |y| {
        da[y * w..(y + 1) * w]
            .iter()
            .zip(&db[y * w..(y + 1) * w])
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum()
    });
    Ok(sum / (w * h) as f64)
}

/// PSNR in dB with peak 1.0. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    psnr_with_peak(a, b, PEAK)
}

pub fn psnr_with_peak(a: &ScalarField, b: &ScalarField, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5).
pub fn ssim(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidDimensions {
            width: w,
            height: h,
            reason: "SSIM needs both dimensions >= 11",
        });
    }
    let k = ssim_kernel();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let (da, db) = (a.data(), b.data());

    // Horizontal pass: five moment maps of size ow x h.
    let horiz: Vec<[f64; 5]> = par::map_indexed(h, |y| {
        (0..ow)
            .map(|x| {
                let mut m = [0.0f64; 5];
                for (j, &kv) in k.iter().enumerate() {
                    let i = y * w + x + j;
                    let (p, q) = (da[i] as f64, db[i] as f64);
                    m[0] += kv * p;
                    m[1] += kv * q;
                    m[2] += kv * p * p;
                    m[3] += kv * q * q;
                    m[4] += kv * p * q;
                }
                m
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();

    let total = par::sum_rows(oh, |y| {
        let mut s = 0.0;
        for x in 0..ow {
            let mut m = [0.0f64; 5];
            for (j, &kv) in k.iter().enumerate() {
                let row = &horiz[(y + j) * ow + x];
                for c in 0..5 {
                    m[c] += kv * row[c];
                }
            }
            s += ssim_from_moments(m, c1, c2);
        }
        s
    });
    Ok(total / (ow * oh) as f64)
}

#[inline]
fn ssim_from_moments(m: [f64; 5], c1: f64, c2: f64) -> f64 {
    let (mu_a, mu_b) = (m[0], m[1]);
    let var_a = m[2] - mu_a * mu_a;
    let var_b = m[3] - mu_b * mu_b;
    let cov = m[4] - mu_a * mu_b;
    let v = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    v.clamp(-1.0, 1.0)
}

/// `(1 - alpha) * frame_t + alpha * frame_t1`.
pub fn linear_interp_baseline(
    frame_t: &ScalarField,
    frame_t1: &ScalarField,
    alpha: f32,
) -> Result<ScalarField> {
    frame_t.ensure_same_dims(frame_t1)?;
    let data = frame_t
        .data()
        .iter()
        .zip(frame_t1.data())
        .map(|(&a, &b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    ScalarField::new(frame_t.width(), frame_t.height(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    WarpOnly,
    Full,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Linear => "Linear",
            Method::WarpOnly => "Warp-Only",
            Method::Full => "Full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    /// `None` when every sample had infinite PSNR.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub samples: usize,
    /// Samples with identical prediction and ground truth; excluded from the PSNR mean.
    pub infinite_psnr: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub sequence: String,
    #[serde(flatten)]
    pub row: MethodRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub psnr_peak: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub alpha: f32,
    pub tvl1: Tvl1Params,
    pub refiner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodRow>,
    pub per_sequence: Vec<SequenceRow>,
    pub fingerprint: Fingerprint,
}

impl EvalReport {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} | {:>10} | {:>8} | {:>7}",
            "Method", "PSNR", "SSIM", "Samples"
        )?;
        writeln!(f, "{:-<12}-+-{:->10}-+-{:->8}-+-{:->7}", "", "", "", "")?;
        for r in &self.rows {
            let p = match r.mean_psnr {
                Some(v) => format!("{v:.3}"),
                None => "inf".to_string(),
            };
            writeln!(
                f,
                "{:<12} | {:>10} | {:>8.4} | {:>7}",
                r.method.label(),
                p,
                r.mean_ssim,
                r.samples
            )?;
        }
        Ok(())
    }
}

/// Scores for one prediction.
#[derive(Debug, Clone, Copy)]
struct Score {
    psnr: f64,
    ssim: f64,
}

fn aggregate(method: Method, scores: &[Score]) -> MethodRow {
    let finite: Vec<f64> = scores
        .iter()
        .map(|s| s.psnr)
        .filter(|p| p.is_finite())
        .collect();
    let mean_psnr = if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    MethodRow {
        method,
        mean_psnr,
        mean_ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len().max(1) as f64,
        samples: scores.len(),
        infinite_psnr: scores.len() - finite.len(),
    }
}

/// Runs each method at `alpha = 0.5` on every triplet and averages PSNR/SSIM
/// against the held-out middle frame.
///
/// `Full` requires a refiner; Warp-Only is interpolation without refinement.
pub fn evaluate(
    triplets: &[Triplet],
    methods: &[Method],
    params: &Tvl1Params,
    refiner: Option<&dyn Refiner>,
) -> Result<EvalReport> {
    const ALPHA: f32 = 0.5;
    if triplets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if methods.contains(&Method::Full) && refiner.is_none() {
        return Err(Error::InvalidParams(
            "the Full method needs a refinement model".into(),
        ));
    }
    params.validate()?;
    let needs_flow = methods.iter().any(|m| *m != Method::Linear);

    let per_sample: Vec<Result<Vec<Score>>> = par::map_indexed(triplets.len(), |i| {
        let t = &triplets[i];
        let warped = if needs_flow {
            Some(warp::interpolate(&t.frame_t, &t.frame_t1, ALPHA, params)?)
        } else {
            None
        };
        methods
            .iter()
            .map(|m| {
                let pred = match m {
                    Method::Linear => linear_interp_baseline(&t.frame_t, &t.frame_t1, ALPHA)?,
                    Method::WarpOnly => warped.clone().expect("computed above"),
                    Method::Full => refiner.expect("checked above").refine_frame(
                        &t.frame_t,
                        &t.frame_t1,
                        warped.as_ref().expect("computed above"),
                    )?,
                };
                Ok(Score {
                    psnr: psnr(&pred, &t.target)?,
                    ssim: ssim(&pred, &t.target)?,
                })
            })
            .collect()
    });
    let per_sample: Vec<Vec<Score>> = per_sample.into_iter().collect::<Result<_>>()?;

    let column = |mi: usize, filter: &dyn Fn(usize) -> bool| -> Vec<Score> {
        per_sample
            .iter()
            .enumerate()
            .filter(|(i, _)| filter(*i))
            .map(|(_, s)| s[mi])
            .collect()
    };
    let rows = methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| aggregate(m, &column(mi, &|_| true)))
        .collect();

    let mut sequences: Vec<&str> = Vec::new();
    for t in triplets {
        if !sequences.contains(&t.sequence.as_str()) {
            sequences.push(&t.sequence);
        }
    }
    let mut per_sequence = Vec::new();
    for seq in sequences {
        for (mi, &m) in methods.iter().enumerate() {
            let scores = column(mi, &|i| triplets[i].sequence == seq);
            per_sequence.push(SequenceRow {
                sequence: seq.to_string(),
                row: aggregate(m, &scores),
            });
        }
    }

    Ok(EvalReport {
        rows,
        per_sequence,
        fingerprint: Fingerprint {
            psnr_peak: PEAK,
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            ssim_k1: SSIM_K1,
            ssim_k2: SSIM_K2,
            alpha: ALPHA,
            tvl1: params.clone(),
            refiner: refiner.map(|r| r.fingerprint()),
        },
    })
}
