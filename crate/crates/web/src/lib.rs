//! Browser demo. Three operations on one in-memory sequence: render a
//! phantom with an enumerated clutter pattern, run the SVD baseline on it,
//! and score both against the clean phantom.
//!
//! [`DemoCore`] is plain Rust so it can be tested natively; [`Demo`] is the
//! JavaScript-facing wrapper.

use declutter::clutter::{ClutterSpec, PatternGrids};
use declutter::metrics::{mare, ssim2d, ssim3d, SsimConfig};
use declutter::pipeline::{simulate_pair, SimulateConfig};
use declutter::svd::{svd_filter_sequence, SvdFilterConfig};
use declutter::Sequence;
use wasm_bindgen::prelude::*;

pub struct DemoCore {
    cfg: SimulateConfig,
    specs: Vec<ClutterSpec>,
    clean: Option<Sequence>,
    cluttered: Option<Sequence>,
    mask: Option<Sequence>,
    filtered: Option<Sequence>,
}

/// MARE, 2D SSIM and 3D SSIM of one sequence against the clean phantom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub mare: f64,
    pub ssim2d: f64,
    pub ssim3d: f64,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl DemoCore {
    pub fn new(size: usize, frames: usize) -> Result<Self, String> {
        let cfg = SimulateConfig::desk(size, size, frames);
        cfg.validate().map_err(err)?;
        Ok(Self {
            cfg,
            specs: PatternGrids::default().enumerate(),
            clean: None,
            cluttered: None,
            mask: None,
            filtered: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.cfg.frames
    }

    pub fn size(&self) -> usize {
        self.cfg.height
    }

    pub fn pattern_count(&self) -> usize {
        self.specs.len()
    }

    pub fn pattern_label(&self, id: usize) -> String {
        let Some(s) = self.specs.get(id) else {
            return String::new();
        };
        let mut parts = vec![format!("#{id} {}", s.class)];
        if let Some(nf) = &s.nf {
            parts.push(format!(
                "NF σv={} σh={} gain={}",
                nf.sigma_v, nf.sigma_h, nf.gain
            ));
        }
        if let Some(rl) = &s.rl {
            parts.push(format!(
                "RL σv={} σh={} gain={} {:?} {:?} {} cm/s",
                rl.sigma_v, rl.sigma_h, rl.gain, rl.level, rl.edge, rl.velocity_cm_s
            ));
        }
        parts.join(" · ")
    }

    pub fn simulate(&mut self, pattern_id: usize, seed: u64) -> Result<(), String> {
        let spec = self
            .specs
            .get(pattern_id)
            .ok_or_else(|| format!("pattern {pattern_id} is not enumerated"))?;
        let pair = simulate_pair(&self.cfg, spec, seed).map_err(err)?;
        self.clean = Some(pair.clean);
        self.cluttered = Some(pair.cluttered);
        self.mask = Some(pair.mask);
        self.filtered = None;
        Ok(())
    }

    pub fn svd_filter(&mut self, roi: usize, drop_count: usize) -> Result<(), String> {
        let input = self.cluttered.as_ref().ok_or("simulate a sequence first")?;
        let cfg = SvdFilterConfig { roi, drop_count };
        self.filtered = Some(svd_filter_sequence(input, &cfg).map_err(err)?.sequence);
        Ok(())
    }

    fn score(&self, test: &Sequence) -> Result<Scores, String> {
        let clean = self.clean.as_ref().ok_or("simulate a sequence first")?;
        let cfg = SsimConfig::default();
        let sector = self.cfg.geometry().mask(self.cfg.height, self.cfg.width);
        Ok(Scores {
            mare: mare(clean, test).map_err(err)?,
            ssim2d: ssim2d(clean, test, &cfg, &sector).map_err(err)?,
            ssim3d: ssim3d(clean, test, &cfg, &sector).map_err(err)?,
        })
    }

    /// Scores of the cluttered input and, once filtered, of the SVD output.
    pub fn scores(&self) -> Result<(Scores, Option<Scores>), String> {
        let cluttered = self.cluttered.as_ref().ok_or("simulate a sequence first")?;
        let filtered = self.filtered.as_ref().map(|f| self.score(f)).transpose()?;
        Ok((self.score(cluttered)?, filtered))
    }

    pub fn layer(&self, name: &str) -> Option<&Sequence> {
        match name {
            "clean" => self.clean.as_ref(),
            "cluttered" => self.cluttered.as_ref(),
            "mask" => self.mask.as_ref(),
            "filtered" => self.filtered.as_ref(),
            _ => None,
        }
    }

    /// Grey-level RGBA bytes of one frame, ready for `ImageData`.
    pub fn frame_rgba(&self, name: &str, frame: usize) -> Vec<u8> {
        let Some(seq) = self.layer(name) else {
            return Vec::new();
        };
        if frame >= seq.frames() {
            return Vec::new();
        }
        seq.frame(frame)
            .iter()
            .flat_map(|&v| {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }
}

#[wasm_bindgen]
pub struct Demo(DemoCore);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, frames: u32) -> Result<Demo, JsError> {
        DemoCore::new(size as usize, frames as usize)
            .map(Demo)
            .map_err(|e| JsError::new(&e))
    }

    pub fn frames(&self) -> u32 {
        self.0.frames() as u32
    }

    pub fn size(&self) -> u32 {
        self.0.size() as u32
    }

    #[wasm_bindgen(js_name = patternCount)]
    pub fn pattern_count(&self) -> u32 {
        self.0.pattern_count() as u32
    }

    #[wasm_bindgen(js_name = patternLabel)]
    pub fn pattern_label(&self, id: u32) -> String {
        self.0.pattern_label(id as usize)
    }

    pub fn simulate(&mut self, pattern_id: u32, seed: u32) -> Result<(), JsError> {
        self.0
            .simulate(pattern_id as usize, u64::from(seed))
            .map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = svdFilter)]
    pub fn svd_filter(&mut self, roi: u32, drop_count: u32) -> Result<(), JsError> {
        self.0
            .svd_filter(roi as usize, drop_count as usize)
            .map_err(|e| JsError::new(&e))
    }

    /// `[mare, ssim2d, ssim3d]` of the cluttered input, followed by the same
    /// three for the filtered output when there is one.
    pub fn scores(&self) -> Result<Vec<f64>, JsError> {
        let (c, f) = self.0.scores().map_err(|e| JsError::new(&e))?;
        let mut out = vec![c.mare, c.ssim2d, c.ssim3d];
        if let Some(f) = f {
            out.extend([f.mare, f.ssim2d, f.ssim3d]);
        }
        Ok(out)
    }

    #[wasm_bindgen(js_name = frameRgba)]
    pub fn frame_rgba(&self, layer: &str, frame: u32) -> Vec<u8> {
        self.0.frame_rgba(layer, frame as usize)
    }
}
