//! Single-channel image sequences, sector geometry and the `STSQ` container.
//!
//! A [`Sequence`] stores `height × width × frames` intensities in `[0, 1]`,
//! frame-major then row-major. The on-disk layout is:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "STSQ"
//! 4       1     version (1)
//! 5       4     height  (u32 LE)
//! 9       4     width   (u32 LE)
//! 13      4     frames  (u32 LE)
//! 17      4     dtype   (u32 LE, 1 = f32)
//! 21      4·N   values  (f32 LE, frame-major)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const STSQ_MAGIC: &[u8; 4] = b"STSQ";
pub const STSQ_VERSION: u8 = 1;
pub const STSQ_DTYPE_F32: u32 = 1;
pub const STSQ_HEADER_LEN: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    height: usize,
    width: usize,
    frames: usize,
    data: Vec<f32>,
}

impl Sequence {
    pub fn new(height: usize, width: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || frames == 0 {
            return Err(Error::Dimension(format!(
                "sequence dims must be positive, got {height}x{width}x{frames}"
            )));
        }
        let expected = height * width * frames;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "sequence {height}x{width}x{frames} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Range(format!(
                "value {v} at index {i} is outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            frames,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, frames: usize) -> Result<Self> {
        Self::new(height, width, frames, vec![0.0; height * width * frames])
    }

    /// Builds a sequence by clamping arbitrary values into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(
        height: usize,
        width: usize,
        frames: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Self::new(height, width, frames, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.frames)
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, frame: usize) -> usize {
        frame * self.height * self.width + row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, frame: usize) -> f32 {
        self.data[self.index(row, col, frame)]
    }

    pub fn frame(&self, frame: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[frame * n..(frame + 1) * n]
    }

    /// Reorders frames so that output frame `j` is input frame `order[j]`.
    pub fn with_frame_order(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.frames || order.iter().any(|&f| f >= self.frames) {
            return Err(Error::Dimension(
                "frame order does not match sequence".into(),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &f in order {
            data.extend_from_slice(self.frame(f));
        }
        Ok(Self { data, ..*self })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STSQ_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(STSQ_MAGIC);
        out.push(STSQ_VERSION);
        for d in [self.height, self.width, self.frames] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&STSQ_DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STSQ_HEADER_LEN {
            return Err(Error::Length {
                expected: STSQ_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[0..4] != STSQ_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        if bytes[4] != STSQ_VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let word =
            |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let (h, w, f) = (word(5) as usize, word(9) as usize, word(13) as usize);
        let dtype = word(17);
        if dtype != STSQ_DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let expected = STSQ_HEADER_LEN + 4 * h * w * f;
        if bytes.len() != expected {
            return Err(Error::Length {
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes[STSQ_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(h, w, f, data)
    }
}

pub fn encode_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&seq.to_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn decode_sequence(path: &Path) -> Result<Sequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Sequence::from_bytes(&bytes)
}

/// Unit conversion between the physical velocities of moving clutter and
/// pixel displacements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalCalibration {
    pub cm_per_pixel: f64,
    pub seconds_per_frame: f64,
}

impl Default for PhysicalCalibration {
    /// 15 cm imaging depth over 128 pixels, 50 frames per one-second cycle.
    fn default() -> Self {
        Self {
            cm_per_pixel: 15.0 / 128.0,
            seconds_per_frame: 0.02,
        }
    }
}

impl PhysicalCalibration {
    pub fn new(cm_per_pixel: f64, seconds_per_frame: f64) -> Result<Self> {
        if !(cm_per_pixel > 0.0 && seconds_per_frame > 0.0) {
            return Err(Error::Parameter(
                "calibration values must be positive".into(),
            ));
        }
        Ok(Self {
            cm_per_pixel,
            seconds_per_frame,
        })
    }

    pub fn pixels_per_frame(&self, velocity_cm_s: f64) -> f64 {
        velocity_cm_s / self.cm_per_pixel * self.seconds_per_frame
    }
}

/// Downward-opening sector field of view. Coordinates are continuous with
/// pixel `(r, c)` centred at `(r + 0.5, c + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorGeometry {
    pub apex_row: f64,
    pub apex_col: f64,
    pub half_angle_deg: f64,
    pub radius: f64,
}

impl SectorGeometry {
    pub fn new(apex_row: f64, apex_col: f64, half_angle_deg: f64, radius: f64) -> Result<Self> {
        if !(half_angle_deg > 0.0 && half_angle_deg < 90.0) {
            return Err(Error::Parameter(format!(
                "half angle {half_angle_deg} must lie in (0, 90)"
            )));
        }
        if !(radius > 0.0) {
            return Err(Error::Parameter("sector radius must be positive".into()));
        }
        Ok(Self {
            apex_row,
            apex_col,
            half_angle_deg,
            radius,
        })
    }

    /// Apex at the top centre, 45° half angle, radius equal to the height.
    pub fn default_for(height: usize, width: usize) -> Self {
        Self {
            apex_row: 0.0,
            apex_col: width as f64 / 2.0,
            half_angle_deg: 45.0,
            radius: height as f64,
        }
    }

    /// Polar coordinates of a continuous point relative to the apex: radial
    /// distance and signed angle in degrees from the downward axis (positive
    /// towards increasing column).
    pub fn polar(&self, row: f64, col: f64) -> (f64, f64) {
        let dy = row - self.apex_row;
        let dx = col - self.apex_col;
        (dx.hypot(dy), dx.atan2(dy).to_degrees())
    }

    /// Inverse of [`SectorGeometry::polar`].
    pub fn point_at(&self, radius: f64, angle_deg: f64) -> (f64, f64) {
        let a = angle_deg.to_radians();
        (
            self.apex_row + radius * a.cos(),
            self.apex_col + radius * a.sin(),
        )
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        let dy = row - self.apex_row;
        let dx = col - self.apex_col;
        if dy < 0.0 || dx.hypot(dy) > self.radius {
            return false;
        }
        dx.abs() <= dy * self.half_angle_deg.to_radians().tan()
    }

    pub fn mask(&self, height: usize, width: usize) -> SectorMask {
        let mut bits = vec![false; height * width];
        for r in 0..height {
            for c in 0..width {
                bits[r * width + c] = self.contains(r as f64 + 0.5, c as f64 + 0.5);
            }
        }
        SectorMask {
            height,
            width,
            bits,
        }
    }
}

pub fn sector_mask(geom: &SectorGeometry, height: usize, width: usize) -> SectorMask {
    geom.mask(height, width)
}

/// Binary H×W image marking in-sector pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SectorMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension("mask size mismatch".into()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}
