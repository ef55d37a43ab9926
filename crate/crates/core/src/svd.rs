//! Multi-ensemble SVD clutter filter.
//!
//! The image is cut into non-overlapping `roi × roi` tiles. Each tile's frames
//! form the columns of a Casorati matrix (`roi²` rows, one column per frame);
//! the `k` leading singular components, which carry the slow high-energy
//! clutter, are subtracted and the remainder is written back.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sequence::Sequence;

const SVD_EPS: f64 = 1e-14;
const SVD_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvdFilterConfig {
    pub roi: usize,
    pub drop_count: usize,
}

impl Default for SvdFilterConfig {
    fn default() -> Self {
        Self {
            roi: 5,
            drop_count: 1,
        }
    }
}

impl SvdFilterConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.roi == 0 {
            return Err(Error::Parameter("roi must be at least 1".into()));
        }
        let rank = (self.roi * self.roi).min(frames);
        if self.drop_count >= rank {
            return Err(Error::Parameter(format!(
                "drop count {} must be below min(roi², frames) = {rank}",
                self.drop_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CasoratiBlock {
    pub origin: (usize, usize),
    pub roi: usize,
    /// `roi² × frames`; column `f` is the row-major tile of frame `f`.
    pub matrix: DMatrix<f64>,
}

pub fn build_casorati(seq: &Sequence, origin: (usize, usize), roi: usize) -> Result<CasoratiBlock> {
    let (h, w, frames) = seq.dims();
    let (r0, c0) = origin;
    if roi == 0 || r0 + roi > h || c0 + roi > w {
        return Err(Error::Dimension(format!(
            "{roi}x{roi} tile at ({r0}, {c0}) does not fit a {h}x{w} image"
        )));
    }
    let matrix = DMatrix::from_fn(roi * roi, frames, |i, f| {
        seq.get(r0 + i / roi, c0 + i % roi, f) as f64
    });
    Ok(CasoratiBlock {
        origin,
        roi,
        matrix,
    })
}

/// Writes a block back into frame-major `height × width × frames` storage.
pub fn scatter_block(block: &CasoratiBlock, height: usize, width: usize, out: &mut [f64]) {
    let (r0, c0) = block.origin;
    let roi = block.roi;
    for f in 0..block.matrix.ncols() {
        for i in 0..roi * roi {
            let (r, c) = (r0 + i / roi, c0 + i % roi);
            out[(f * height + r) * width + c] = block.matrix[(i, f)];
        }
    }
}

/// Singular values in descending order.
pub fn singular_values(block: &CasoratiBlock) -> Result<Vec<f64>> {
    let svd = block
        .matrix
        .clone()
        .try_svd(false, false, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| non_convergence(block))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

fn non_convergence(block: &CasoratiBlock) -> Error {
    Error::Numeric(format!(
        "SVD did not converge for the tile at {:?}",
        block.origin
    ))
}

/// Removes the `k` largest singular components.
pub fn filter_block(block: &CasoratiBlock, k: usize) -> Result<CasoratiBlock> {
    let rank = block.matrix.nrows().min(block.matrix.ncols());
    if k >= rank.max(1) {
        return Err(Error::Parameter(format!(
            "cannot drop {k} of {rank} singular components"
        )));
    }
    if k == 0 {
        return Ok(block.clone());
    }
    let svd = block
        .matrix
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| non_convergence(block))?;
    let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut matrix = block.matrix.clone();
    for &j in &order[..k] {
        let s = svd.singular_values[j];
        matrix -= (u.column(j) * s) * vt.row(j);
    }
    Ok(CasoratiBlock {
        origin: block.origin,
        roi: block.roi,
        matrix,
    })
}

/// Filtered sequence plus the padding applied to reach a multiple of the
/// tile size (zero when the image already tiles exactly).
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFiltered {
    pub sequence: Sequence,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

/// Filters every tile without clamping. The result is frame-major over the
/// original `height × width`.
pub fn svd_filter_unclamped(
    seq: &Sequence,
    cfg: &SvdFilterConfig,
) -> Result<(Vec<f64>, usize, usize)> {
    let (h, w, frames) = seq.dims();
    cfg.validate(frames)?;
    let roi = cfg.roi;
    let (ph, pw) = (h.div_ceil(roi) * roi, w.div_ceil(roi) * roi);
    let padded = if (ph, pw) == (h, w) {
        seq.clone()
    } else {
        // edge replication
        let mut data = Vec::with_capacity(ph * pw * frames);
        for f in 0..frames {
            for r in 0..ph {
                for c in 0..pw {
                    data.push(seq.get(r.min(h - 1), c.min(w - 1), f));
                }
            }
        }
        Sequence::new(ph, pw, frames, data)?
    };
    let mut out = vec![0.0f64; ph * pw * frames];
    for r0 in (0..ph).step_by(roi) {
        for c0 in (0..pw).step_by(roi) {
            let block = build_casorati(&padded, (r0, c0), roi)?;
            scatter_block(&filter_block(&block, cfg.drop_count)?, ph, pw, &mut out);
        }
    }
    let mut cropped = Vec::with_capacity(h * w * frames);
    for f in 0..frames {
        for r in 0..h {
            let at = (f * ph + r) * pw;
            cropped.extend_from_slice(&out[at..at + w]);
        }
    }
    Ok((cropped, ph - h, pw - w))
}

pub fn svd_filter_sequence(seq: &Sequence, cfg: &SvdFilterConfig) -> Result<SvdFiltered> {
    let (data, pad_rows, pad_cols) = svd_filter_unclamped(seq, cfg)?;
    let (h, w, f) = seq.dims();
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(SvdFiltered {
        sequence: Sequence::new(h, w, f, data)?,
        pad_rows,
        pad_cols,
    })
}
