//! Parametric reverberation clutter.
//!
//! Patterns are separable Gaussian blobs scaled so the centre pixel equals the
//! pattern's grayscale gain. Near-field (NF) patterns sit static on the sector
//! centreline close to the transducer; rib/lung (RL) patterns sit in a narrow
//! sub-sector along the left or right edge, oriented across the beam, and may
//! drift laterally towards the sector interior.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::sequence::{PhysicalCalibration, SectorGeometry, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClutterClass {
    Nf,
    Rl,
    NfRl,
}

impl ClutterClass {
    pub fn label(self) -> &'static str {
        match self {
            ClutterClass::Nf => "NF",
            ClutterClass::Rl => "RL",
            ClutterClass::NfRl => "NF_RL",
        }
    }
}

impl fmt::Display for ClutterClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CardiacLevel {
    Base,
    Mid,
    Apex,
}

impl CardiacLevel {
    /// Radial band as fractions of the sector radius. The apex level is the
    /// third nearest the transducer.
    pub fn radial_band(self) -> (f64, f64) {
        match self {
            CardiacLevel::Apex => (0.0, 1.0 / 3.0),
            CardiacLevel::Mid => (1.0 / 3.0, 2.0 / 3.0),
            CardiacLevel::Base => (2.0 / 3.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SectorEdge {
    Right,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NfParams {
    pub sigma_v: f64,
    pub sigma_h: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlParams {
    pub sigma_v: f64,
    pub sigma_h: f64,
    pub gain: f64,
    pub level: CardiacLevel,
    pub edge: SectorEdge,
    pub velocity_cm_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClutterSpec {
    pub class: ClutterClass,
    pub nf: Option<NfParams>,
    pub rl: Option<RlParams>,
    pub pattern_id: usize,
}

impl ClutterSpec {
    pub fn is_moving(&self) -> bool {
        self.rl.is_some_and(|rl| rl.velocity_cm_s != 0.0)
    }
}

/// Parameter grids of the NF-only and RL-only tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NfGrid {
    pub sigma_v: Vec<f64>,
    pub sigma_h: Vec<f64>,
    pub gain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlGrid {
    pub sigma_v: Vec<f64>,
    pub sigma_h: Vec<f64>,
    pub gain: Vec<f64>,
    pub level: Vec<CardiacLevel>,
    pub edge: Vec<SectorEdge>,
    pub velocity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternGrids {
    pub nf: NfGrid,
    pub rl: RlGrid,
    pub joint_nf: NfGrid,
    pub joint_rl: RlGrid,
}

impl Default for PatternGrids {
    fn default() -> Self {
        use CardiacLevel::*;
        use SectorEdge::*;
        Self {
            nf: NfGrid {
                sigma_v: vec![10.0, 15.0, 20.0],
                sigma_h: vec![5.0, 10.0],
                gain: vec![150.0, 200.0, 255.0],
            },
            rl: RlGrid {
                sigma_v: vec![3.0, 5.0],
                sigma_h: vec![7.0, 9.0, 11.0],
                gain: vec![150.0, 200.0, 255.0],
                level: vec![Base, Mid, Apex],
                edge: vec![Right, Left],
                velocity: vec![0.0, 0.5, 1.0],
            },
            joint_nf: NfGrid {
                sigma_v: vec![10.0, 15.0, 20.0],
                sigma_h: vec![5.0, 10.0],
                gain: vec![200.0, 255.0],
            },
            joint_rl: RlGrid {
                sigma_v: vec![5.0],
                sigma_h: vec![9.0, 11.0],
                gain: vec![200.0, 255.0],
                level: vec![Mid, Apex],
                edge: vec![Right],
                velocity: vec![0.0, 1.0],
            },
        }
    }
}

impl NfGrid {
    fn combos(&self) -> Vec<NfParams> {
        let mut out = Vec::new();
        for &sigma_v in &self.sigma_v {
            for &sigma_h in &self.sigma_h {
                for &gain in &self.gain {
                    out.push(NfParams {
                        sigma_v,
                        sigma_h,
                        gain,
                    });
                }
            }
        }
        out
    }
}

impl RlGrid {
    fn combos(&self) -> Vec<RlParams> {
        let mut out = Vec::new();
        for &sigma_v in &self.sigma_v {
            for &sigma_h in &self.sigma_h {
                for &gain in &self.gain {
                    for &level in &self.level {
                        for &edge in &self.edge {
                            for &velocity_cm_s in &self.velocity {
                                out.push(RlParams {
                                    sigma_v,
                                    sigma_h,
                                    gain,
                                    level,
                                    edge,
                                    velocity_cm_s,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl PatternGrids {
    /// Full factorial enumeration: NF patterns first, then RL, then joint
    /// NF×RL combinations; `pattern_id` is the position in this list.
    pub fn enumerate(&self) -> Vec<ClutterSpec> {
        let mut out = Vec::new();
        for nf in self.nf.combos() {
            out.push(ClutterSpec {
                class: ClutterClass::Nf,
                nf: Some(nf),
                rl: None,
                pattern_id: out.len(),
            });
        }
        for rl in self.rl.combos() {
            out.push(ClutterSpec {
                class: ClutterClass::Rl,
                nf: None,
                rl: Some(rl),
                pattern_id: out.len(),
            });
        }
        let joint_rl = self.joint_rl.combos();
        for nf in self.joint_nf.combos() {
            for rl in &joint_rl {
                out.push(ClutterSpec {
                    class: ClutterClass::NfRl,
                    nf: Some(nf),
                    rl: Some(*rl),
                    pattern_id: out.len(),
                });
            }
        }
        out
    }
}

pub fn enumerate_pattern_specs() -> Vec<ClutterSpec> {
    PatternGrids::default().enumerate()
}

/// Training-set size as the product of pattern, view, vendor and group counts.
pub fn dataset_size(patterns: usize, views: usize, vendors: usize, groups: usize) -> usize {
    patterns * views * vendors * groups
}

/// Discretised clutter pattern. `values` is row-major over
/// `(2·half_rows + 1) × (2·half_cols + 1)`, rows running along the axial
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPatch {
    pub sigma_v: f64,
    pub sigma_h: f64,
    pub gain: f64,
    pub half_rows: usize,
    pub half_cols: usize,
    pub values: Vec<f32>,
}

impl GaussianPatch {
    pub fn rows(&self) -> usize {
        2 * self.half_rows + 1
    }

    pub fn cols(&self) -> usize {
        2 * self.half_cols + 1
    }

    /// Value at an integer offset from the centre (0 outside the support).
    pub fn at(&self, dv: isize, dh: isize) -> f32 {
        let r = dv + self.half_rows as isize;
        let c = dh + self.half_cols as isize;
        if r < 0 || c < 0 || r >= self.rows() as isize || c >= self.cols() as isize {
            return 0.0;
        }
        self.values[r as usize * self.cols() + c as usize]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Bilinear sample at fractional patch-centred coordinates; samples
    /// outside the support read as zero.
    pub fn sample(&self, dv: f64, dh: f64) -> f32 {
        let y = dv + self.half_rows as f64;
        let x = dh + self.half_cols as f64;
        if y <= -1.0 || x <= -1.0 || y >= self.rows() as f64 || x >= self.cols() as f64 {
            return 0.0;
        }
        let (y0, x0) = (y.floor(), x.floor());
        let (ty, tx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut acc = 0.0f64;
        for (dy, wy) in [(0isize, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0isize, 1.0 - tx), (1, tx)] {
                let w = wy * wx;
                if w == 0.0 {
                    continue;
                }
                let r = y0 + dy - self.half_rows as isize;
                let c = x0 + dx - self.half_cols as isize;
                acc += w * self.at(r, c) as f64;
            }
        }
        acc as f32
    }
}

/// Peak-normalised separable Gaussian patch whose support extends 3σ in both
/// directions.
pub fn gaussian_patch(sigma_v: f64, sigma_h: f64, gain: f64) -> Result<GaussianPatch> {
    if !(sigma_v > 0.0 && sigma_h > 0.0) {
        return Err(Error::Parameter(format!(
            "sigmas must be positive, got sigma_v={sigma_v}, sigma_h={sigma_h}"
        )));
    }
    if !(0.0..=255.0).contains(&gain) {
        return Err(Error::Parameter(format!("gain {gain} outside [0, 255]")));
    }
    let half_rows = (3.0 * sigma_v).ceil() as usize;
    let half_cols = (3.0 * sigma_h).ceil() as usize;
    let peak = gain / 255.0;
    let mut values = Vec::with_capacity((2 * half_rows + 1) * (2 * half_cols + 1));
    for i in 0..=2 * half_rows {
        let dv = i as f64 - half_rows as f64;
        let pv = (-dv * dv / (2.0 * sigma_v * sigma_v)).exp();
        for j in 0..=2 * half_cols {
            let dh = j as f64 - half_cols as f64;
            let ph = (-dh * dh / (2.0 * sigma_h * sigma_h)).exp();
            values.push((peak * pv * ph) as f32);
        }
    }
    Ok(GaussianPatch {
        sigma_v,
        sigma_h,
        gain,
        half_rows,
        half_cols,
        values,
    })
}

/// Placement and rendering knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementConfig {
    /// Axial band for NF centres, as fractions of image height below the apex.
    pub nf_band: (f64, f64),
    /// Opening angle of the RL edge sub-sectors, degrees.
    pub sub_sector_deg: f64,
    pub mask_threshold: f32,
    pub calibration: PhysicalCalibration,
    /// Multiplier applied to pattern sigmas at render time, for frames
    /// smaller or larger than the 128-pixel reference.
    pub pattern_scale: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            nf_band: (0.05, 0.25),
            sub_sector_deg: 35.0,
            mask_threshold: 0.02,
            calibration: PhysicalCalibration::default(),
            pattern_scale: 1.0,
        }
    }
}

/// One rendered blob: its patch, orientation and per-frame centre.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedComponent {
    pub patch: GaussianPatch,
    /// Angle of the patch's axial axis from the image's downward axis, degrees.
    pub rotation_deg: f64,
    pub centers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedClutter {
    pub spec: ClutterSpec,
    pub components: Vec<PlacedComponent>,
    pub frames: usize,
}

pub fn place_nf(
    params: &NfParams,
    geom: &SectorGeometry,
    height: usize,
    frames: usize,
    cfg: &PlacementConfig,
    seed: u64,
) -> Result<PlacedComponent> {
    let h = height as f64;
    let (lo, hi) = (
        geom.apex_row + cfg.nf_band.0 * h,
        geom.apex_row + cfg.nf_band.1 * h,
    );
    if lo < 0.0 || hi > h || lo > hi {
        return Err(Error::Placement(format!(
            "near-field band [{lo:.2}, {hi:.2}] lies outside the {height}-row image"
        )));
    }
    let mut rng = stream(derive_seed(seed, "nf-placement", 0));
    let row = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    let patch = gaussian_patch(
        params.sigma_v * cfg.pattern_scale,
        params.sigma_h * cfg.pattern_scale,
        params.gain,
    )?;
    Ok(PlacedComponent {
        patch,
        rotation_deg: 0.0,
        centers: vec![(row, geom.apex_col); frames],
    })
}

/// Angular range (degrees from the downward axis) of an edge sub-sector.
pub fn edge_sub_sector(geom: &SectorGeometry, edge: SectorEdge, opening_deg: f64) -> (f64, f64) {
    let inner = (geom.half_angle_deg - opening_deg).max(0.0);
    match edge {
        SectorEdge::Right => (inner, geom.half_angle_deg),
        SectorEdge::Left => (-geom.half_angle_deg, -inner),
    }
}

pub fn place_rl(
    params: &RlParams,
    geom: &SectorGeometry,
    height: usize,
    width: usize,
    frames: usize,
    cfg: &PlacementConfig,
    seed: u64,
) -> Result<PlacedComponent> {
    let (a0, a1) = edge_sub_sector(geom, params.edge, cfg.sub_sector_deg);
    let (f0, f1) = params.level.radial_band();
    let (r0, r1) = (f0 * geom.radius, f1 * geom.radius);
    let mut rng = stream(derive_seed(seed, "rl-placement", 0));
    let in_image = |(row, col): (f64, f64)| {
        row >= 0.0 && col >= 0.0 && row < height as f64 && col < width as f64
    };
    let mut found = None;
    for _ in 0..4096 {
        let angle = rng.random_range(a0..=a1);
        let radius = rng.random_range(r0..=r1);
        let p = geom.point_at(radius, angle);
        if in_image(p) {
            found = Some((p, angle));
            break;
        }
    }
    let ((row, col), angle) = found.ok_or_else(|| {
        Error::Placement(format!(
            "{:?} edge sub-sector has no in-image point at the {:?} level",
            params.edge, params.level
        ))
    })?;
    let step = cfg.calibration.pixels_per_frame(params.velocity_cm_s);
    let dir = match params.edge {
        SectorEdge::Right => -1.0,
        SectorEdge::Left => 1.0,
    };
    let centers = (0..frames)
        .map(|f| (row, col + dir * step * f as f64))
        .collect();
    let patch = gaussian_patch(
        params.sigma_v * cfg.pattern_scale,
        params.sigma_h * cfg.pattern_scale,
        params.gain,
    )?;
    Ok(PlacedComponent {
        patch,
        rotation_deg: angle,
        centers,
    })
}

pub fn place_clutter(
    spec: &ClutterSpec,
    geom: &SectorGeometry,
    height: usize,
    width: usize,
    frames: usize,
    cfg: &PlacementConfig,
    seed: u64,
) -> Result<PlacedClutter> {
    let mut components = Vec::new();
    if let Some(nf) = &spec.nf {
        components.push(place_nf(nf, geom, height, frames, cfg, seed)?);
    }
    if let Some(rl) = &spec.rl {
        components.push(place_rl(rl, geom, height, width, frames, cfg, seed)?);
    }
    Ok(PlacedClutter {
        spec: spec.clone(),
        components,
        frames,
    })
}

/// Real-valued H×W×F volume, frame-major like [`Sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            frames,
            data: vec![0.0; height * width * frames],
        }
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[f * n..(f + 1) * n]
    }
}

fn render_component(c: &PlacedComponent, vol: &mut Volume) {
    let (h, w) = (vol.height, vol.width);
    let theta = c.rotation_deg.to_radians();
    let (ct, st) = (theta.cos(), theta.sin());
    let reach = ((c.patch.half_rows + 1) as f64).hypot((c.patch.half_cols + 1) as f64);
    for (f, &(cy, cx)) in c.centers.iter().enumerate().take(vol.frames) {
        let r_lo = (cy - reach).floor().max(0.0) as usize;
        let r_hi = ((cy + reach).ceil().max(0.0) as usize).min(h);
        let c_lo = (cx - reach).floor().max(0.0) as usize;
        let c_hi = ((cx + reach).ceil().max(0.0) as usize).min(w);
        for r in r_lo..r_hi {
            for col in c_lo..c_hi {
                let dy = r as f64 + 0.5 - cy;
                let dx = col as f64 + 0.5 - cx;
                // axial axis along (cos θ, sin θ) in (row, col)
                let dv = dy * ct + dx * st;
                let dh = -dy * st + dx * ct;
                let v = c.patch.sample(dv, dh);
                if v != 0.0 {
                    vol.data[f * h * w + r * w + col] += v;
                }
            }
        }
    }
}

/// Renders every component at its per-frame centre; pixels falling outside
/// the image are dropped.
pub fn render_clutter_volume(
    placed: &PlacedClutter,
    height: usize,
    width: usize,
    frames: usize,
) -> Result<Volume> {
    if frames != placed.frames {
        return Err(Error::Dimension(format!(
            "placement has {} frames, asked to render {frames}",
            placed.frames
        )));
    }
    let mut vol = Volume::zeros(height, width, frames);
    for c in &placed.components {
        render_component(c, &mut vol);
    }
    Ok(vol)
}

/// Saturating superimposition with sector pruning. Returns the cluttered
/// sequence and the binary clutter mask (as a 0/1 sequence).
pub fn superimpose(
    clean: &Sequence,
    clutter: &Volume,
    geom: &SectorGeometry,
    mask_threshold: f32,
) -> Result<(Sequence, Sequence)> {
    let (h, w, f) = clean.dims();
    if (clutter.height, clutter.width, clutter.frames) != (h, w, f) {
        return Err(Error::Dimension(format!(
            "clean is {h}x{w}x{f}, clutter is {}x{}x{}",
            clutter.height, clutter.width, clutter.frames
        )));
    }
    let sector = geom.mask(h, w);
    let n = h * w;
    let mut out = vec![0.0f32; n * f];
    let mut mask = vec![0.0f32; n * f];
    for fi in 0..f {
        for p in 0..n {
            if !sector.bits()[p] {
                continue;
            }
            let i = fi * n + p;
            let c = clutter.data[i];
            out[i] = (clean.data()[i] + c).min(1.0);
            if c > mask_threshold {
                mask[i] = 1.0;
            }
        }
    }
    Ok((Sequence::new(h, w, f, out)?, Sequence::new(h, w, f, mask)?))
}

/// The Bernoulli/uniform draw behind [`time_shift_pair`]: `Some(start)` with
/// a 1-based start frame when the pair is shifted. A shift may land on frame
/// 1, which leaves the pair unchanged.
pub fn shift_draw(p: f64, frames: usize, seed: u64) -> Option<usize> {
    let mut rng = stream(derive_seed(seed, "time-shift", 0));
    let shift = rng.random_bool(p.clamp(0.0, 1.0));
    let start = rng.random_range(1..=frames.max(1));
    shift.then_some(start)
}

/// Cyclic time shift applied identically to an input/target pair. With
/// probability `p` the pair is rotated to start at a uniformly drawn
/// 1-based frame; otherwise it is returned as is with start frame 1.
pub fn time_shift_pair(
    input: &Sequence,
    target: &Sequence,
    p: f64,
    seed: u64,
) -> Result<(Sequence, Sequence, usize)> {
    if input.frames() != target.frames() {
        return Err(Error::Dimension(
            "input and target frame counts differ".into(),
        ));
    }
    let frames = input.frames();
    let Some(start) = shift_draw(p, frames, seed) else {
        return Ok((input.clone(), target.clone(), 1));
    };
    let order: Vec<usize> = (0..frames).map(|j| (j + start - 1) % frames).collect();
    Ok((
        input.with_frame_order(&order)?,
        target.with_frame_order(&order)?,
        start,
    ))
}
