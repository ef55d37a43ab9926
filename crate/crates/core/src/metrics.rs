//! MARE, spatial SSIM and spatiotemporal SSIM, plus per-class evaluation
//! reports.
//!
//! Both SSIM variants slide a Gaussian window over `[0, 255]`-scaled values
//! with stride one, keeping only windows that fit entirely ("valid"). A window
//! is skipped when the reference and test patches are both entirely zero, or
//! when its spatial footprint contains no in-sector pixel.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clutter::ClutterSpec;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestRecord};
use crate::sequence::{decode_sequence, SectorGeometry, SectorMask, Sequence};

pub const PIXEL_SCALE: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "SSIM window {} must be odd",
                self.window
            )));
        }
        if !(self.gaussian_sigma > 0.0
            && self.k1 > 0.0
            && self.k2 > 0.0
            && self.dynamic_range > 0.0)
        {
            return Err(Error::Parameter("SSIM constants must be positive".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Temporal extent of the 3D window for a sequence of `frames` frames.
    pub fn temporal_window(&self, frames: usize) -> usize {
        self.window.min(frames)
    }
}

/// Normalised 1D Gaussian of length `n`, centred between its end taps.
pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn check_shapes(a: &Sequence, b: &Sequence) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "sequences differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference after scaling both sequences to `[0, 255]`.
pub fn mare(reference: &Sequence, test: &Sequence) -> Result<f64> {
    check_shapes(reference, test)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| (PIXEL_SCALE * a as f64 - PIXEL_SCALE * b as f64).abs())
        .sum();
    Ok(sum / reference.data().len() as f64)
}

/// Dense `[d0][d1][d2]` volume of doubles.
#[derive(Clone)]
struct Grid {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Grid {
    fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    data.push(f(a, b, c));
                }
            }
        }
        Self { dims, data }
    }

    fn at(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.dims[1] + b) * self.dims[2] + c]
    }

    /// Valid correlation with `taps` along `axis`.
    fn filter(&self, axis: usize, taps: &[f64]) -> Grid {
        let mut dims = self.dims;
        dims[axis] = dims[axis] + 1 - taps.len();
        Grid::from_fn(dims, |a, b, c| {
            let mut idx = [a, b, c];
            let start = idx[axis];
            taps.iter()
                .enumerate()
                .map(|(k, &t)| {
                    idx[axis] = start + k;
                    t * self.at(idx[0], idx[1], idx[2])
                })
                .sum()
        })
    }

    fn filter_all(&self, taps: [&[f64]; 3]) -> Grid {
        self.filter(2, taps[2])
            .filter(1, taps[1])
            .filter(0, taps[0])
    }

    fn map2(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        Grid {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

/// Scaled `[frames][rows][cols]` grid of a sequence.
fn scaled(seq: &Sequence) -> Grid {
    let (h, w, f) = seq.dims();
    Grid::from_fn([f, h, w], |t, r, c| PIXEL_SCALE * seq.get(r, c, t) as f64)
}

fn ssim_core(
    reference: &Sequence,
    test: &Sequence,
    cfg: &SsimConfig,
    sector: &SectorMask,
    temporal: usize,
) -> Result<f64> {
    cfg.validate()?;
    check_shapes(reference, test)?;
    let (h, w, f) = reference.dims();
    if (sector.height(), sector.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "sector mask is {}x{}, sequences are {h}x{w}",
            sector.height(),
            sector.width()
        )));
    }
    let n = cfg.window;
    if n > h || n > w || temporal > f || temporal == 0 {
        return Err(Error::Dimension(format!(
            "{n}x{n}x{temporal} window does not fit {h}x{w}x{f}"
        )));
    }
    let g = gaussian_taps(n, cfg.gaussian_sigma);
    let gt = if temporal == 1 {
        vec![1.0]
    } else {
        gaussian_taps(temporal, cfg.gaussian_sigma)
    };
    let taps: [&[f64]; 3] = [&gt, &g, &g];
    let x = scaled(reference);
    let y = scaled(test);
    let mx = x.filter_all(taps);
    let my = y.filter_all(taps);
    let sxx = x.map2(&x, |a, b| a * b).filter_all(taps);
    let syy = y.map2(&y, |a, b| a * b).filter_all(taps);
    let sxy = x.map2(&y, |a, b| a * b).filter_all(taps);

    let box_t = vec![1.0; temporal];
    let box_s = vec![1.0; n];
    let boxes: [&[f64]; 3] = [&box_t, &box_s, &box_s];
    let nonzero = Grid::from_fn([f, h, w], |t, r, c| {
        (reference.get(r, c, t) != 0.0 || test.get(r, c, t) != 0.0) as u8 as f64
    })
    .filter_all(boxes);
    let in_sector = Grid::from_fn([1, h, w], |_, r, c| sector.get(r, c) as u8 as f64).filter_all([
        &[1.0],
        &box_s,
        &box_s,
    ]);

    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    let [dt, dr, dc] = mx.dims;
    for t in 0..dt {
        for r in 0..dr {
            for c in 0..dc {
                if nonzero.at(t, r, c) == 0.0 || in_sector.at(0, r, c) == 0.0 {
                    continue;
                }
                let (ux, uy) = (mx.at(t, r, c), my.at(t, r, c));
                let vx = sxx.at(t, r, c) - ux * ux;
                let vy = syy.at(t, r, c) - uy * uy;
                let cov = sxy.at(t, r, c) - ux * uy;
                let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
                let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric);
    }
    Ok(total / count as f64)
}

/// Mean SSIM over all included `window × window` patches of every frame.
pub fn ssim2d(
    reference: &Sequence,
    test: &Sequence,
    cfg: &SsimConfig,
    sector: &SectorMask,
) -> Result<f64> {
    ssim_core(reference, test, cfg, sector, 1)
}

/// Mean SSIM over all included space-time blocks. The temporal extent shrinks
/// to the frame count for short sequences, with the Gaussian renormalised.
pub fn ssim3d(
    reference: &Sequence,
    test: &Sequence,
    cfg: &SsimConfig,
    sector: &SectorMask,
) -> Result<f64> {
    ssim_core(
        reference,
        test,
        cfg,
        sector,
        cfg.temporal_window(reference.frames()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single row.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub class: String,
    pub mare: f64,
    pub ssim2d: f64,
    pub ssim3d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub filter: String,
    pub config_digest: String,
    /// Temporal extent actually used by the 3D SSIM windows.
    pub ssim3d_temporal_window: usize,
    pub rows: Vec<EvalRow>,
    pub aggregates: BTreeMap<String, BTreeMap<String, MeanStd>>,
}

impl EvalReport {
    pub fn from_rows(
        filter: &str,
        config_digest: &str,
        temporal: usize,
        rows: Vec<EvalRow>,
    ) -> Self {
        let mut by_class: BTreeMap<String, Vec<&EvalRow>> = BTreeMap::new();
        for r in &rows {
            by_class.entry(r.class.clone()).or_default().push(r);
        }
        let aggregates = by_class
            .into_iter()
            .map(|(class, rs)| {
                let stat = |f: fn(&EvalRow) -> f64| {
                    MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                let metrics = BTreeMap::from([
                    ("mare".to_string(), stat(|r| r.mare)),
                    ("ssim2d".to_string(), stat(|r| r.ssim2d)),
                    ("ssim3d".to_string(), stat(|r| r.ssim3d)),
                ]);
                (class, metrics)
            })
            .collect();
        Self {
            filter: filter.to_string(),
            config_digest: config_digest.to_string(),
            ssim3d_temporal_window: temporal,
            rows,
            aggregates,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Clutter class label of a manifest pattern id within an enumeration.
pub fn class_of(specs: &[ClutterSpec], pattern_id: usize) -> Result<String> {
    specs
        .get(pattern_id)
        .map(|s| s.class.label().to_string())
        .ok_or_else(|| Error::Range(format!("pattern id {pattern_id} is not enumerated")))
}

/// File holding the prediction for a manifest id.
pub fn prediction_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.stsq"))
}

/// Scores the predictions in `dir` against the clean references of
/// `records`. The sector defaults to the phantom geometry for the frame size.
pub fn evaluate<'a>(
    manifest: &DatasetManifest,
    records: impl IntoIterator<Item = &'a ManifestRecord>,
    dir: &Path,
    filter: &str,
    cfg: &SsimConfig,
    geometry: Option<&SectorGeometry>,
    specs: &[ClutterSpec],
) -> Result<EvalReport> {
    cfg.validate()?;
    let records: Vec<&ManifestRecord> = records.into_iter().collect();
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !prediction_path(dir, &r.id).is_file())
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut temporal = cfg.window;
    for r in &records {
        let reference = decode_sequence(&manifest.resolve(&r.clean_path))?;
        let test = decode_sequence(&prediction_path(dir, &r.id))?;
        let (h, w, f) = reference.dims();
        let sector = match geometry {
            Some(g) => g.mask(h, w),
            None => SectorGeometry::default_for(h, w).mask(h, w),
        };
        temporal = temporal.min(cfg.temporal_window(f));
        rows.push(EvalRow {
            id: r.id.clone(),
            class: class_of(specs, r.pattern_id)?,
            mare: mare(&reference, &test)?,
            ssim2d: ssim2d(&reference, &test, cfg, &sector)?,
            ssim3d: ssim3d(&reference, &test, cfg, &sector)?,
        });
    }
    let digest = sha256_hex(
        format!(
            "filter={filter}\nssim={}\ngeometry={geometry:?}\n",
            serde_json::to_string(cfg).unwrap()
        )
        .as_bytes(),
    );
    Ok(EvalReport::from_rows(filter, &digest, temporal, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_taps_normalised_and_symmetric() {
        for n in [1, 4, 11] {
            let g = gaussian_taps(n, 1.5);
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..n {
                assert!((g[i] - g[n - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mean_std_single_and_pair() {
        assert_eq!(
            MeanStd::of(&[2.0]),
            MeanStd {
                mean: 2.0,
                std: 0.0
            }
        );
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constants() {
        let c = SsimConfig::default();
        assert!((c.c1() - 6.5025).abs() < 1e-12);
        assert!((c.c2() - 58.5225).abs() < 1e-12);
        assert!(SsimConfig { window: 10, ..c }.validate().is_err());
    }
}
