//! On-disk formats: 16-bit binary PGM, raw little-endian f32 with a JSON
//! sidecar, and Middlebury `.flo` flow files.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FlowField, ScalarField};

pub const FLOW_MAGIC: [u8; 4] = *b"PIEH";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    #[default]
    Pgm16,
    Rawf32,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Pgm16 => "pgm",
            FrameFormat::Rawf32 => "f32",
        }
    }

    /// Guesses from the file extension: `.pgm` is PGM, anything else raw f32.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pgm") => FrameFormat::Pgm16,
            _ => FrameFormat::Rawf32,
        }
    }
}

impl FromStr for FrameFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm16" => Ok(FrameFormat::Pgm16),
            "rawf32" => Ok(FrameFormat::Rawf32),
            other => Err(Error::InvalidParams(format!(
                "unknown frame format `{other}` (expected pgm16 or rawf32)"
            ))),
        }
    }
}

impl fmt::Display for FrameFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameFormat::Pgm16 => "pgm16",
            FrameFormat::Rawf32 => "rawf32",
        })
    }
}

/// Sidecar describing a raw f32 frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    /// `"minmax"` rescales to `[0, 1]` before clamping; `"none"` only clamps.
    #[serde(default = "default_normalize")]
    pub normalize: String,
}

fn default_normalize() -> String {
    "none".into()
}

/// `frame.f32` -> `frame.f32.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_frame(path: &Path, format: FrameFormat) -> Result<ScalarField> {
    match format {
        FrameFormat::Pgm16 => decode_pgm(&read(path)?),
        FrameFormat::Rawf32 => {
            let side = sidecar_path(path);
            let sidecar: RawSidecar = serde_json::from_slice(&read(&side)?)?;
            decode_rawf32(&read(path)?, &sidecar)
        }
    }
}

pub fn save_frame(field: &ScalarField, path: &Path, format: FrameFormat) -> Result<()> {
    match format {
        FrameFormat::Pgm16 => write_atomic(path, &encode_pgm(field)),
        FrameFormat::Rawf32 => {
            let sidecar = RawSidecar {
                width: field.width(),
                height: field.height(),
                normalize: default_normalize(),
            };
            write_atomic(
                &sidecar_path(path),
                serde_json::to_string(&sidecar)?.as_bytes(),
            )?;
            write_atomic(path, &encode_rawf32(field))
        }
    }
}

pub fn encode_rawf32(field: &ScalarField) -> Vec<u8> {
    field.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_rawf32(bytes: &[u8], sidecar: &RawSidecar) -> Result<ScalarField> {
    let n = sidecar.width * sidecar.height;
    if bytes.len() != n * 4 {
        if bytes.len() < n * 4 {
            return Err(Error::Truncated {
                expected: n * 4,
                actual: bytes.len(),
            });
        }
        return Err(Error::Parse {
            offset: n * 4,
            message: format!("{} trailing bytes after frame data", bytes.len() - n * 4),
        });
    }
    let mut data = Vec::with_capacity(n);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::Parse {
                offset: i * 4,
                message: "non-finite sample".into(),
            });
        }
        data.push(v);
    }
    match sidecar.normalize.as_str() {
        "none" => {}
        "minmax" => {
            let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = hi - lo;
            for v in &mut data {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
        other => {
            return Err(Error::InvalidParams(format!(
                "unknown sidecar normalize mode `{other}`"
            )))
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ScalarField::new(sidecar.width, sidecar.height, data)
}

pub fn encode_pgm(field: &ScalarField) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", field.width(), field.height()).into_bytes();
    for &v in field.data() {
        let s = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                message: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

/// Binary PGM (`P5`). Samples are one byte for `maxval < 256`, otherwise
/// two bytes big-endian; values are divided by `maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<ScalarField> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Parse {
            offset: 0,
            message: "missing P5 magic".into(),
        });
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("maxval {maxval} outside 1..=65535"),
        });
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::Parse {
            offset: cur.pos,
            message: "expected single whitespace after maxval".into(),
        });
    }
    let start = cur.pos + 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width.checked_mul(height).ok_or(Error::InvalidDimensions {
        width,
        height,
        reason: "pixel count overflows",
    })?;
    let need = n * bps;
    let body = &bytes[start..];
    if body.len() < need {
        return Err(Error::Truncated {
            expected: start + need,
            actual: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let s = if bps == 1 {
            body[i] as usize
        } else {
            u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as usize
        };
        if s > maxval {
            return Err(Error::Parse {
                offset: start + i * bps,
                message: format!("sample {s} exceeds maxval {maxval}"),
            });
        }
        data.push(s as f32 / maxval as f32);
    }
    ScalarField::new(width, height, data)
}

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u().len());
    out.extend_from_slice(&FLOW_MAGIC);
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            actual: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != FLOW_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let width = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let height = i32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if width <= 0 || height <= 0 {
        return Err(Error::Parse {
            offset: 4,
            message: format!("non-positive flow size {width}x{height}"),
        });
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for c in bytes[12..expected].chunks_exact(8) {
        u.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        v.push(f32::from_le_bytes([c[4], c[5], c[6], c[7]]));
    }
    FlowField::new(w, h, u, v)
}

pub fn save_flow(flow: &FlowField, path: &Path) -> Result<()> {
    write_atomic(path, &encode_flow(flow))
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    decode_flow(&read(path)?)
}
