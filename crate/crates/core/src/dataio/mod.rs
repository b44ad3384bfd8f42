//! Frame sequences, dataset manifests, triplet windowing and augmentation.

pub mod formats;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarField;

pub use formats::{load_flow, load_frame, save_flow, save_frame, write_atomic, FrameFormat};
pub use synth::{generate_synthetic, SyntheticSpec, Texture};

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<ScalarField>,
    pub cadence_minutes: f64,
    pub source_id: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<ScalarField>, cadence_minutes: f64, source_id: String) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::SequenceTooShort {
                needed: 2,
                got: frames.len(),
            });
        }
        if !(cadence_minutes > 0.0 && cadence_minutes.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "cadence must be > 0 minutes, got {cadence_minutes}"
            )));
        }
        for f in &frames[1..] {
            frames[0].ensure_same_dims(f)?;
        }
        Ok(Self {
            frames,
            cadence_minutes,
            source_id,
        })
    }
}

/// Two input frames and the frame the model should produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub frame_t: ScalarField,
    pub frame_t1: ScalarField,
    pub target: ScalarField,
    /// Source sequence id, used for per-sequence reporting.
    pub sequence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletMode {
    /// `(f[i], f[i+2]) -> f[i+1]`
    #[default]
    Interpolation,
    /// `(f[i], f[i+1]) -> f[i+2]`
    Future,
}

pub fn make_triplets(
    seq: &FrameSequence,
    stride: usize,
    mode: TripletMode,
) -> Result<Vec<Triplet>> {
    if seq.frames.len() < 3 {
        return Err(Error::SequenceTooShort {
            needed: 3,
            got: seq.frames.len(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidParams("triplet stride must be >= 1".into()));
    }
    let f = &seq.frames;
    Ok((0..f.len() - 2)
        .step_by(stride)
        .map(|i| {
            let (a, b, t) = match mode {
                TripletMode::Interpolation => (i, i + 2, i + 1),
                TripletMode::Future => (i, i + 1, i + 2),
            };
            Triplet {
                frame_t: f[a].clone(),
                frame_t1: f[b].clone(),
                target: f[t].clone(),
                sequence: seq.source_id.clone(),
            }
        })
        .collect())
}

/// One crop window plus rotation, shared by every field of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub x0: usize,
    pub y0: usize,
    pub quarter_turns: u8,
}

/// Draws a crop origin uniformly and a rotation from {0, 90, 180, 270}.
/// Non-square crops only rotate by 0 or 180 so batch shapes stay fixed.
pub fn draw_augment<R: Rng + ?Sized>(
    dims: (usize, usize),
    crop: (usize, usize),
    rng: &mut R,
) -> Result<AugmentDraw> {
    let (w, h) = dims;
    let (cw, ch) = crop;
    if cw > w || ch > h {
        return Err(Error::CropTooLarge {
            crop_w: cw,
            crop_h: ch,
            width: w,
            height: h,
        });
    }
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    let quarter_turns = if cw == ch {
        rng.gen_range(0..4u8)
    } else {
        2 * rng.gen_range(0..2u8)
    };
    Ok(AugmentDraw {
        x0,
        y0,
        quarter_turns,
    })
}

pub fn apply_augment(
    fields: &[ScalarField],
    crop: (usize, usize),
    draw: AugmentDraw,
) -> Result<Vec<ScalarField>> {
    fields
        .iter()
        .map(|f| {
            Ok(f.crop(draw.x0, draw.y0, crop.0, crop.1)?
                .rot90(draw.quarter_turns))
        })
        .collect()
}

/// Crops and rotates all `fields` identically.
pub fn augment<R: Rng + ?Sized>(
    fields: &[ScalarField],
    crop: (usize, usize),
    rng: &mut R,
) -> Result<Vec<ScalarField>> {
    let first = fields.first().ok_or(Error::EmptyDataset)?;
    for f in &fields[1..] {
        first.ensure_same_dims(f)?;
    }
    let draw = draw_augment(first.dims(), crop, rng)?;
    apply_augment(fields, crop, draw)
}

pub fn augment_triplet<R: Rng + ?Sized>(
    t: &Triplet,
    crop: (usize, usize),
    rng: &mut R,
) -> Result<Triplet> {
    let mut out = augment(
        &[t.frame_t.clone(), t.frame_t1.clone(), t.target.clone()],
        crop,
        rng,
    )?
    .into_iter();
    Ok(Triplet {
        frame_t: out.next().expect("3 fields"),
        frame_t1: out.next().expect("3 fields"),
        target: out.next().expect("3 fields"),
        sequence: t.sequence.clone(),
    })
}

/// Ordered frame paths for one sequence; relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub source_id: String,
    pub cadence_minutes: f64,
    pub frames: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: FrameFormat,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Loads every frame. `base_dir` is normally the manifest's parent directory.
    pub fn load_sequences(&self, base_dir: &Path) -> Result<Vec<FrameSequence>> {
        if self.sequences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.sequences
            .iter()
            .map(|s| {
                let frames = s
                    .frames
                    .iter()
                    .map(|p| load_frame(&base_dir.join(p), self.format))
                    .collect::<Result<Vec<_>>>()?;
                FrameSequence::new(frames, s.cadence_minutes, s.source_id.clone())
            })
            .collect()
    }
}

/// Loads a manifest and all of its sequences.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<FrameSequence>> {
    let m = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    m.load_sequences(base)
}
