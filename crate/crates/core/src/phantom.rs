//! Deterministic cardiac-like phantom: a bright contracting annulus (the
//! wall) around a dark cavity, embedded in moderately bright tissue, with a
//! multiplicative speckle texture that deforms with the wall. Everything
//! outside the sector is exactly zero.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::sequence::{SectorGeometry, Sequence};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub geometry: SectorGeometry,
    pub speckle_seed: u64,
    pub wall_brightness: f32,
    pub cavity_brightness: f32,
    /// Peak relative reduction of the ring radius over one cycle.
    pub contraction_amplitude: f64,
    pub cycle_frames: usize,
}

impl PhantomConfig {
    pub fn new(height: usize, width: usize, cycle_frames: usize) -> Self {
        Self {
            height,
            width,
            geometry: SectorGeometry::default_for(height, width),
            speckle_seed: 0,
            wall_brightness: 0.8,
            cavity_brightness: 0.08,
            contraction_amplitude: 0.2,
            cycle_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Parameter("phantom size must be positive".into()));
        }
        if !(self.wall_brightness > self.cavity_brightness)
            || !(0.0..=1.0).contains(&self.wall_brightness)
            || !(0.0..=1.0).contains(&self.cavity_brightness)
        {
            return Err(Error::Parameter(
                "need 0 <= cavity_brightness < wall_brightness <= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.contraction_amplitude) {
            return Err(Error::Parameter(
                "contraction_amplitude must lie in [0, 1)".into(),
            ));
        }
        if self.cycle_frames == 0 {
            return Err(Error::Parameter("cycle_frames must be positive".into()));
        }
        Ok(())
    }

    fn tissue_brightness(&self) -> f32 {
        self.cavity_brightness + 0.35 * (self.wall_brightness - self.cavity_brightness)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Outside,
    Cavity,
    Wall,
    Tissue,
}

/// Seed-dependent layout of one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomLayout {
    pub center_row: f64,
    pub center_col: f64,
    pub rest_radius: f64,
    pub thickness: f64,
    pub phase: f64,
}

impl PhantomLayout {
    pub fn new(cfg: &PhantomConfig, seed: u64) -> Self {
        let mut rng = stream(derive_seed(seed, "phantom-layout", 0));
        let h = cfg.height as f64;
        let w = cfg.width as f64;
        let g = &cfg.geometry;
        let depth = g.radius.min(h - g.apex_row);
        let center_row = g.apex_row + depth * rng.random_range(0.5..0.6);
        let center_col = g.apex_col + w * rng.random_range(-0.03..0.03);
        let rest_radius = h.min(w) * rng.random_range(0.2..0.25);
        let thickness = (h * 0.07).max(2.0);
        Self {
            center_row,
            center_col,
            rest_radius,
            thickness,
            phase: rng.random_range(0.0..1.0),
        }
    }

    pub fn radius_at(&self, cfg: &PhantomConfig, frame: usize) -> f64 {
        let t = frame as f64 / cfg.cycle_frames as f64 + self.phase;
        let squeeze = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t).cos());
        self.rest_radius * (1.0 - cfg.contraction_amplitude * squeeze)
    }

    pub fn region(&self, cfg: &PhantomConfig, row: usize, col: usize, frame: usize) -> Region {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        if !cfg.geometry.contains(y, x) {
            return Region::Outside;
        }
        let rho = (y - self.center_row).hypot(x - self.center_col);
        let r = self.radius_at(cfg, frame);
        let half = 0.5 * self.thickness;
        if rho < r - half {
            Region::Cavity
        } else if rho <= r + half {
            Region::Wall
        } else {
            Region::Tissue
        }
    }
}

/// Region label map for one frame, row-major.
pub fn phantom_regions(cfg: &PhantomConfig, seed: u64, frame: usize) -> Vec<Region> {
    let layout = PhantomLayout::new(cfg, seed);
    let mut out = Vec::with_capacity(cfg.height * cfg.width);
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            out.push(layout.region(cfg, r, c, frame));
        }
    }
    out
}

/// Smoothed Rayleigh speckle with unit mean, on a padded grid.
struct SpeckleField {
    rows: usize,
    cols: usize,
    pad: usize,
    values: Vec<f32>,
}

impl SpeckleField {
    fn new(height: usize, width: usize, seed: u64) -> Self {
        let pad = height.max(width) / 2 + 2;
        let rows = height + 2 * pad;
        let cols = width + 2 * pad;
        let mut rng = stream(derive_seed(seed, "speckle", 0));
        let raw: Vec<f64> = (0..rows * cols)
            .map(|_| {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                (-2.0 * u.ln()).sqrt()
            })
            .collect();
        // [1 2 1] x [1 2 1] / 16 smoothing, edges clamped
        let k = [1.0, 2.0, 1.0];
        let mut values = vec![0.0f32; rows * cols];
        let rayleigh_mean = (std::f64::consts::PI / 2.0).sqrt();
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for (i, ki) in k.iter().enumerate() {
                    let rr = (r + i).saturating_sub(1).min(rows - 1);
                    for (j, kj) in k.iter().enumerate() {
                        let cc = (c + j).saturating_sub(1).min(cols - 1);
                        acc += ki * kj * raw[rr * cols + cc];
                    }
                }
                let s = acc / 16.0 / rayleigh_mean;
                values[r * cols + c] = (1.0 + 0.5 * (s - 1.0)) as f32;
            }
        }
        Self {
            rows,
            cols,
            pad,
            values,
        }
    }

    fn sample(&self, y: f64, x: f64) -> f32 {
        let fy = (y + self.pad as f64 - 0.5).clamp(0.0, (self.rows - 1) as f64);
        let fx = (x + self.pad as f64 - 0.5).clamp(0.0, (self.cols - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.rows - 1), (x0 + 1).min(self.cols - 1));
        let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
        let bottom = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Renders a phantom sequence. Pure function of its arguments.
pub fn generate_phantom(cfg: &PhantomConfig, frames: usize, seed: u64) -> Result<Sequence> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::Parameter("frames must be at least 1".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let layout = PhantomLayout::new(cfg, seed);
    let speckle = SpeckleField::new(h, w, cfg.speckle_seed);
    let sector = cfg.geometry.mask(h, w);
    let tissue = cfg.tissue_brightness();
    let mut data = vec![0.0f32; h * w * frames];
    for f in 0..frames {
        let scale = layout.rest_radius / layout.radius_at(cfg, f);
        for r in 0..h {
            for c in 0..w {
                if !sector.get(r, c) {
                    continue;
                }
                let base = match layout.region(cfg, r, c, f) {
                    Region::Outside => continue,
                    Region::Cavity => cfg.cavity_brightness,
                    Region::Wall => cfg.wall_brightness,
                    Region::Tissue => tissue,
                };
                // texture is anchored to the deforming tissue
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let sy = layout.center_row + (y - layout.center_row) * scale;
                let sx = layout.center_col + (x - layout.center_col) * scale;
                let v = base * speckle.sample(sy, sx);
                data[f * h * w + r * w + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Sequence::new(h, w, frames, data)
}
