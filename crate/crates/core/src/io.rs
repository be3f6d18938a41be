//! Binary PPM (P6), PFM and Middlebury FLO readers/writers, plus the camera
//! JSON document.
//!
//! Float formats are widened to `f64` on load and narrowed to `f32` on write;
//! `load(write(g)) == g` holds bit-for-bit for grids whose samples are exactly
//! representable in `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::grid::{FlowField, ImageGrid};

/// Float value of the ASCII tag "PIEH" read as little-endian f32.
pub const FLO_MAGIC: f32 = 202021.25;
const FLO_TAG: &[u8; 4] = b"PIEH";
const FLO_MAX_DIM: i64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    Ppm,
    Pfm,
    Flo,
}

impl MapFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ppm" => Some(MapFormat::Ppm),
            "pfm" => Some(MapFormat::Pfm),
            "flo" => Some(MapFormat::Flo),
            _ => None,
        }
    }
}

/// Result of [`load_map`].
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedMap {
    Image(ImageGrid),
    Flow(FlowField),
}

impl LoadedMap {
    pub fn into_image(self) -> Result<ImageGrid> {
        match self {
            LoadedMap::Image(g) => Ok(g),
            LoadedMap::Flow(_) => Err(Error::Format("expected an image, found a flow field".into())),
        }
    }

    pub fn into_flow(self) -> Result<FlowField> {
        match self {
            LoadedMap::Flow(f) => Ok(f),
            LoadedMap::Image(_) => Err(Error::Format("expected a flow field, found an image".into())),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: impl AsRef<Path>, format: MapFormat) -> Result<LoadedMap> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    match format {
        MapFormat::Ppm => decode_ppm(&bytes).map(LoadedMap::Image),
        MapFormat::Pfm => decode_pfm(&bytes).map(LoadedMap::Image),
        MapFormat::Flo => decode_flo(&bytes).map(LoadedMap::Flow),
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    decode_ppm(&read_bytes(path.as_ref())?)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    decode_pfm(&read_bytes(path.as_ref())?)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&read_bytes(path.as_ref())?)
}

pub fn write_ppm(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(grid)?)
}

pub fn write_pfm(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(grid)?)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flo(flow))
}

/// Writes an image in the requested format. FLO takes flow fields only, see [`write_flo`].
pub fn write_map(grid: &ImageGrid, path: impl AsRef<Path>, format: MapFormat) -> Result<()> {
    match format {
        MapFormat::Ppm => write_ppm(grid, path),
        MapFormat::Pfm => write_pfm(grid, path),
        MapFormat::Flo => Err(Error::Format(
            "FLO stores flow fields only; image grids cannot be written as FLO".into(),
        )),
    }
}

/// `round(255 * clamp(v, 0, 1))`, rounding half away from zero.
pub fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * v).round() as u8
}

// ---------------------------------------------------------------------------
// header tokenizer shared by PPM and PFM

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Truncated {
                expected: start + 1,
                found: self.bytes.len(),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Header(format!("non-ascii {what}")))
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| Error::Header(format!("invalid {what}: {tok:?}")))
    }

    /// Consumes the single whitespace byte separating header and payload.
    fn end_of_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            Some(_) => Err(Error::Header("missing whitespace after header".into())),
            None => Err(Error::Truncated {
                expected: self.pos + 1,
                found: self.bytes.len(),
            }),
        }
    }
}

fn positive_dim(v: i64, what: &str) -> Result<usize> {
    if v <= 0 || v > FLO_MAX_DIM {
        return Err(Error::Header(format!("invalid {what}: {v}")));
    }
    Ok(v as usize)
}

// ---------------------------------------------------------------------------
// PPM

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.len() < 2 {
        return Err(Error::Truncated {
            expected: 2,
            found: bytes.len(),
        });
    }
    if &bytes[..2] != b"P6" {
        return Err(Error::Header("PPM magic must be P6".into()));
    }
    let mut cur = HeaderCursor::new(bytes);
    cur.pos = 2;
    let width = positive_dim(cur.parse::<i64>("width")?, "width")?;
    let height = positive_dim(cur.parse::<i64>("height")?, "height")?;
    let maxval: i64 = cur.parse("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Header(format!("unsupported PPM maxval {maxval}")));
    }
    let start = cur.end_of_header()?;
    let n = width * height * 3;
    let payload = &bytes[start..];
    if payload.len() < n {
        return Err(Error::Truncated {
            expected: start + n,
            found: bytes.len(),
        });
    }
    let scale = maxval as f64;
    let data = payload[..n].iter().map(|&b| b as f64 / scale).collect();
    ImageGrid::new(width, height, 3, data)
}

pub fn encode_ppm(grid: &ImageGrid) -> Result<Vec<u8>> {
    if grid.channels() != 3 {
        return Err(Error::Format(format!(
            "PPM needs 3 channels, grid has {}",
            grid.channels()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.data().iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

// ---------------------------------------------------------------------------
// PFM (rows stored bottom-to-top)

pub fn decode_pfm(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.len() < 2 {
        return Err(Error::Truncated {
            expected: 2,
            found: bytes.len(),
        });
    }
    let channels = match &bytes[..2] {
        b"Pf" => 1,
        b"PF" => 3,
        _ => return Err(Error::Header("PFM magic must be Pf or PF".into())),
    };
    let mut cur = HeaderCursor::new(bytes);
    cur.pos = 2;
    let width = positive_dim(cur.parse::<i64>("width")?, "width")?;
    let height = positive_dim(cur.parse::<i64>("height")?, "height")?;
    let scale: f64 = cur.parse("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Header(format!("invalid PFM scale {scale}")));
    }
    let little = scale < 0.0;
    let start = cur.end_of_header()?;
    let n = width * height * channels;
    let payload = &bytes[start..];
    if payload.len() < 4 * n {
        return Err(Error::Truncated {
            expected: start + 4 * n,
            found: bytes.len(),
        });
    }
    let mut data = vec![0.0; n];
    let row = width * channels;
    for (k, chunk) in payload[..4 * n].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = k / row;
        let col = k % row;
        data[(height - 1 - file_row) * row + col] = v as f64;
    }
    ImageGrid::new(width, height, channels, data)
}

pub fn encode_pfm(grid: &ImageGrid) -> Result<Vec<u8>> {
    let magic = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Format(format!("PFM needs 1 or 3 channels, grid has {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", grid.width(), grid.height()).into_bytes();
    let row = grid.width() * grid.channels();
    for y in (0..grid.height()).rev() {
        for &v in &grid.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Middlebury FLO

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != FLO_TAG {
        return Err(Error::Header("FLO tag must be PIEH".into()));
    }
    let width = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let height = i32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    let width = positive_dim(width as i64, "width")?;
    let height = positive_dim(height as i64, "height")?;
    let n = width * height;
    let expected = 12 + 8 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, px) in bytes[12..expected].chunks_exact(8).enumerate() {
        let a = f32::from_le_bytes([px[0], px[1], px[2], px[3]]);
        let b = f32::from_le_bytes([px[4], px[5], px[6], px[7]]);
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFiniteFlow {
                x: i % width,
                y: i / width,
            });
        }
        u.push(a as f64);
        v.push(b as f64);
    }
    FlowField::new(width, height, u, v)
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let n = flow.width() * flow.height();
    let mut out = Vec::with_capacity(12 + 8 * n);
    out.extend_from_slice(FLO_TAG);
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (a, b) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&(*a as f32).to_le_bytes());
        out.extend_from_slice(&(*b as f32).to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------------------
// camera JSON: {fx, fy, cx, cy, R: [9 row-major], t: [3]}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDoc {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
}

impl CameraDoc {
    pub fn new(k: &Intrinsics, pose: &Pose) -> Self {
        let r = pose.rotation();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        let t = pose.translation();
        CameraDoc {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            rotation,
            t: [t.x, t.y, t.z],
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::from_parts(&self.rotation, &self.t)
    }
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<(Intrinsics, Pose)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: CameraDoc = serde_json::from_str(&text).map_err(|e| {
        Error::Format(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    Ok((doc.intrinsics()?, doc.pose()?))
}

pub fn write_camera(k: &Intrinsics, pose: &Pose, path: impl AsRef<Path>) -> Result<()> {
    let doc = CameraDoc::new(k, pose);
    let text = serde_json::to_string_pretty(&doc).expect("camera doc serializes");
    write_bytes(path.as_ref(), text.as_bytes())
}

/// Reads a JSON or TOML document (chosen by extension; anything other than
/// `.toml` is parsed as JSON). Parse errors carry line and column.
pub fn read_structured<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_structured(&text, path.extension().and_then(|e| e.to_str()) == Some("toml"))
        .map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

/// Parses `text` as TOML or JSON; the error string locates the problem.
pub fn parse_structured<T: serde::de::DeserializeOwned>(text: &str, toml_syntax: bool) -> Result<T, String> {
    if toml_syntax {
        toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => {
                let (line, col) = line_col(text, span.start);
                format!("line {line}, column {col}: {}", e.message())
            }
            None => e.message().to_string(),
        })
    } else {
        serde_json::from_str(text).map_err(|e| format!("line {}, column {}: {e}", e.line(), e.column()))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}
