//! `key = value` configuration files.
//!
//! Every tunable of the pipeline has a dotted key (`sim.frames`, `net.levels`,
//! `train.epochs`, …). [`RunConfig::to_text`] writes the fully resolved
//! configuration in a canonical order; its SHA-256 is the config digest.
//!
//! The master `seed` derives the network initialisation and training seeds;
//! explicit `net.seed` / `train.seed` keys override the derived values.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::clutter::{CardiacLevel, NfGrid, PatternGrids, PlacementConfig, RlGrid, SectorEdge};
use crate::error::{Error, Result};
use crate::metrics::{sha256_hex, SsimConfig};
use crate::net::{LossKind, NetConfig, TrainConfig};
use crate::pipeline::{ClassFilter, SimulateConfig};
use crate::rng::derive_seed;
use crate::sequence::PhysicalCalibration;
use crate::svd::SvdFilterConfig;

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored; repeated keys are an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let items: Result<Vec<T>> = v.split(',').map(|s| parse(key, s.trim())).collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::Format(format!("{key}: empty list")));
    }
    Ok(items)
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn level_name(l: CardiacLevel) -> &'static str {
    match l {
        CardiacLevel::Base => "base",
        CardiacLevel::Mid => "mid",
        CardiacLevel::Apex => "apex",
    }
}

fn parse_level(key: &str, s: &str) -> Result<CardiacLevel> {
    match s {
        "base" => Ok(CardiacLevel::Base),
        "mid" => Ok(CardiacLevel::Mid),
        "apex" => Ok(CardiacLevel::Apex),
        _ => Err(Error::Format(format!("{key}: unknown level {s:?}"))),
    }
}

fn edge_name(e: SectorEdge) -> &'static str {
    match e {
        SectorEdge::Left => "left",
        SectorEdge::Right => "right",
    }
}

fn parse_edge(key: &str, s: &str) -> Result<SectorEdge> {
    match s {
        "left" => Ok(SectorEdge::Left),
        "right" => Ok(SectorEdge::Right),
        _ => Err(Error::Format(format!("{key}: unknown edge {s:?}"))),
    }
}

/// Everything a simulate → train → filter → eval run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimulateConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub svd: SvdFilterConfig,
    pub ssim: SsimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            sim: SimulateConfig::desk(64, 64, 16),
            net: NetConfig::desk_scale(),
            train: TrainConfig::new(LossKind::Rec),
            svd: SvdFilterConfig::default(),
            ssim: SsimConfig::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.net.seed = derive_seed(seed, "net", 0);
        self.train.seed = derive_seed(seed, "train", 0);
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply(&parse_key_values(&text)?)?;
        Ok(cfg)
    }

    /// Applies overrides. `sim.height`, `sim.width` and `sim.frames` are
    /// applied first and reset the size-dependent simulation defaults;
    /// `train.loss` resets the loss weights before explicit λ keys.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let get = |k: &str| kv.get(k).map(String::as_str);
        if let Some(v) = get("seed") {
            self.set_seed(parse("seed", v)?);
        }
        if get("sim.height").is_some() || get("sim.width").is_some() || get("sim.frames").is_some()
        {
            let h = get("sim.height").map_or(Ok(self.sim.height), |v| parse("sim.height", v))?;
            let w = get("sim.width").map_or(Ok(self.sim.width), |v| parse("sim.width", v))?;
            let f = get("sim.frames").map_or(Ok(self.sim.frames), |v| parse("sim.frames", v))?;
            let keep = (self.sim.class, self.sim.limit, self.sim.holdout);
            self.sim = SimulateConfig::desk(h, w, f);
            (self.sim.class, self.sim.limit, self.sim.holdout) = keep;
        }
        if let Some(v) = get("train.loss") {
            let kind: LossKind = parse("train.loss", v)?;
            let keep = self.train.clone();
            self.train = TrainConfig {
                seed: keep.seed,
                epochs: keep.epochs,
                initial_lr: keep.initial_lr,
                batch_size: keep.batch_size,
                shift_probability: keep.shift_probability,
                discriminator: keep.discriminator,
                ..TrainConfig::new(kind)
            };
        }
        for (k, v) in kv {
            self.set(k, v)?;
        }
        Ok(())
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let s = &mut self.sim;
        let p = &mut s.placement;
        let t = &mut self.train;
        let n = &mut self.net;
        match k {
            "seed" | "sim.height" | "sim.width" | "sim.frames" | "train.loss" => {}
            "sim.class" => s.class = parse(k, v)?,
            "sim.limit" => {
                s.limit = if v == "none" {
                    None
                } else {
                    Some(parse(k, v)?)
                }
            }
            "sim.holdout" => s.holdout = parse(k, v)?,
            "sim.cm_per_pixel" => p.calibration.cm_per_pixel = parse(k, v)?,
            "sim.seconds_per_frame" => p.calibration.seconds_per_frame = parse(k, v)?,
            "sim.nf_band_low" => p.nf_band.0 = parse(k, v)?,
            "sim.nf_band_high" => p.nf_band.1 = parse(k, v)?,
            "sim.sub_sector_deg" => p.sub_sector_deg = parse(k, v)?,
            "sim.mask_threshold" => p.mask_threshold = parse(k, v)?,
            "sim.pattern_scale" => p.pattern_scale = parse(k, v)?,
            "sim.wall_brightness" => s.phantom.wall_brightness = parse(k, v)?,
            "sim.cavity_brightness" => s.phantom.cavity_brightness = parse(k, v)?,
            "sim.contraction_amplitude" => s.phantom.contraction_amplitude = parse(k, v)?,
            "sim.cycle_frames" => s.phantom.cycle_frames = parse(k, v)?,
            "net.levels" => n.levels = parse(k, v)?,
            "net.base_channels" => n.base_channels = parse(k, v)?,
            "net.attention" => n.use_attention = parse(k, v)?,
            "net.residual" => n.use_residual_skip = parse(k, v)?,
            "net.temporal_kernels" => n.temporal_kernels = parse(k, v)?,
            "net.dropout" => n.dropout_rate = parse(k, v)?,
            "net.seed" => n.seed = parse(k, v)?,
            "train.lambda_rec" => t.lambda_rec = parse(k, v)?,
            "train.lambda_adv" => t.lambda_adv = parse(k, v)?,
            "train.lambda_prc" => t.lambda_prc = parse(k, v)?,
            "train.epochs" => t.epochs = parse(k, v)?,
            "train.lr" => t.initial_lr = parse(k, v)?,
            "train.batch_size" => t.batch_size = parse(k, v)?,
            "train.shift_probability" => t.shift_probability = parse(k, v)?,
            "train.seed" => t.seed = parse(k, v)?,
            "train.disc_blocks" => t.discriminator.blocks = parse(k, v)?,
            "train.disc_channels" => t.discriminator.base_channels = parse(k, v)?,
            "svd.roi" => self.svd.roi = parse(k, v)?,
            "svd.drop" => self.svd.drop_count = parse(k, v)?,
            "ssim.window" => self.ssim.window = parse(k, v)?,
            "ssim.sigma" => self.ssim.gaussian_sigma = parse(k, v)?,
            "ssim.k1" => self.ssim.k1 = parse(k, v)?,
            "ssim.k2" => self.ssim.k2 = parse(k, v)?,
            "ssim.dynamic_range" => self.ssim.dynamic_range = parse(k, v)?,
            _ => return set_grid(&mut s.grids, k, v),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.svd.validate(self.sim.frames)?;
        self.ssim.validate()
    }

    /// Canonical `key = value` listing of every setting.
    pub fn to_text(&self) -> String {
        let s = &self.sim;
        let p = &s.placement;
        let n = &self.net;
        let t = &self.train;
        let mut lines: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("sim.height".into(), s.height.to_string()),
            ("sim.width".into(), s.width.to_string()),
            ("sim.frames".into(), s.frames.to_string()),
            ("sim.class".into(), s.class.to_string()),
            (
                "sim.limit".into(),
                s.limit.map_or("none".into(), |l| l.to_string()),
            ),
            ("sim.holdout".into(), s.holdout.to_string()),
            (
                "sim.cm_per_pixel".into(),
                p.calibration.cm_per_pixel.to_string(),
            ),
            (
                "sim.seconds_per_frame".into(),
                p.calibration.seconds_per_frame.to_string(),
            ),
            ("sim.nf_band_low".into(), p.nf_band.0.to_string()),
            ("sim.nf_band_high".into(), p.nf_band.1.to_string()),
            ("sim.sub_sector_deg".into(), p.sub_sector_deg.to_string()),
            ("sim.mask_threshold".into(), p.mask_threshold.to_string()),
            ("sim.pattern_scale".into(), p.pattern_scale.to_string()),
            (
                "sim.wall_brightness".into(),
                s.phantom.wall_brightness.to_string(),
            ),
            (
                "sim.cavity_brightness".into(),
                s.phantom.cavity_brightness.to_string(),
            ),
            (
                "sim.contraction_amplitude".into(),
                s.phantom.contraction_amplitude.to_string(),
            ),
            (
                "sim.cycle_frames".into(),
                s.phantom.cycle_frames.to_string(),
            ),
            ("net.levels".into(), n.levels.to_string()),
            ("net.base_channels".into(), n.base_channels.to_string()),
            ("net.attention".into(), n.use_attention.to_string()),
            ("net.residual".into(), n.use_residual_skip.to_string()),
            (
                "net.temporal_kernels".into(),
                n.temporal_kernels.to_string(),
            ),
            ("net.dropout".into(), n.dropout_rate.to_string()),
            ("net.seed".into(), n.seed.to_string()),
            ("train.loss".into(), t.loss_kind.to_string()),
            ("train.lambda_rec".into(), t.lambda_rec.to_string()),
            ("train.lambda_adv".into(), t.lambda_adv.to_string()),
            ("train.lambda_prc".into(), t.lambda_prc.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.lr".into(), t.initial_lr.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            (
                "train.shift_probability".into(),
                t.shift_probability.to_string(),
            ),
            ("train.seed".into(), t.seed.to_string()),
            (
                "train.disc_blocks".into(),
                t.discriminator.blocks.to_string(),
            ),
            (
                "train.disc_channels".into(),
                t.discriminator.base_channels.to_string(),
            ),
            ("svd.roi".into(), self.svd.roi.to_string()),
            ("svd.drop".into(), self.svd.drop_count.to_string()),
            ("ssim.window".into(), self.ssim.window.to_string()),
            ("ssim.sigma".into(), self.ssim.gaussian_sigma.to_string()),
            ("ssim.k1".into(), self.ssim.k1.to_string()),
            ("ssim.k2".into(), self.ssim.k2.to_string()),
            (
                "ssim.dynamic_range".into(),
                self.ssim.dynamic_range.to_string(),
            ),
        ];
        grid_lines(&s.grids, &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

fn nf_lines(prefix: &str, g: &NfGrid, lines: &mut Vec<(String, String)>) {
    lines.push((format!("{prefix}.sigma_v"), join(&g.sigma_v)));
    lines.push((format!("{prefix}.sigma_h"), join(&g.sigma_h)));
    lines.push((format!("{prefix}.gain"), join(&g.gain)));
}

fn rl_lines(prefix: &str, g: &RlGrid, lines: &mut Vec<(String, String)>) {
    lines.push((format!("{prefix}.sigma_v"), join(&g.sigma_v)));
    lines.push((format!("{prefix}.sigma_h"), join(&g.sigma_h)));
    lines.push((format!("{prefix}.gain"), join(&g.gain)));
    let levels: Vec<&str> = g.level.iter().map(|&l| level_name(l)).collect();
    lines.push((format!("{prefix}.level"), levels.join(", ")));
    let edges: Vec<&str> = g.edge.iter().map(|&e| edge_name(e)).collect();
    lines.push((format!("{prefix}.edge"), edges.join(", ")));
    lines.push((format!("{prefix}.velocity"), join(&g.velocity)));
}

fn grid_lines(g: &PatternGrids, lines: &mut Vec<(String, String)>) {
    nf_lines("grid.nf", &g.nf, lines);
    rl_lines("grid.rl", &g.rl, lines);
    nf_lines("grid.joint_nf", &g.joint_nf, lines);
    rl_lines("grid.joint_rl", &g.joint_rl, lines);
}

fn set_grid(g: &mut PatternGrids, k: &str, v: &str) -> Result<()> {
    let unknown = || Error::Format(format!("unknown configuration key {k:?}"));
    let rest = k.strip_prefix("grid.").ok_or_else(unknown)?;
    let (table, field) = rest.split_once('.').ok_or_else(unknown)?;
    let nf = match table {
        "nf" => Some(&mut g.nf),
        "joint_nf" => Some(&mut g.joint_nf),
        _ => None,
    };
    if let Some(nf) = nf {
        match field {
            "sigma_v" => nf.sigma_v = parse_list(k, v)?,
            "sigma_h" => nf.sigma_h = parse_list(k, v)?,
            "gain" => nf.gain = parse_list(k, v)?,
            _ => return Err(unknown()),
        }
        return Ok(());
    }
    let rl = match table {
        "rl" => &mut g.rl,
        "joint_rl" => &mut g.joint_rl,
        _ => return Err(unknown()),
    };
    match field {
        "sigma_v" => rl.sigma_v = parse_list(k, v)?,
        "sigma_h" => rl.sigma_h = parse_list(k, v)?,
        "gain" => rl.gain = parse_list(k, v)?,
        "velocity" => rl.velocity = parse_list(k, v)?,
        "level" => {
            rl.level = v
                .split(',')
                .map(|s| parse_level(k, s.trim()))
                .collect::<Result<_>>()?
        }
        "edge" => {
            rl.edge = v
                .split(',')
                .map(|s| parse_edge(k, s.trim()))
                .collect::<Result<_>>()?
        }
        _ => return Err(unknown()),
    }
    Ok(())
}

/// Placement defaults for an `height`-row frame: sigmas scale with
/// `height / 128`, 15 cm of depth span the frame and one cardiac cycle spans
/// the sequence.
pub fn desk_placement(height: usize, frames: usize) -> PlacementConfig {
    PlacementConfig {
        calibration: PhysicalCalibration {
            cm_per_pixel: 15.0 / height as f64,
            seconds_per_frame: 1.0 / frames as f64,
        },
        pattern_scale: height as f64 / 128.0,
        ..PlacementConfig::default()
    }
}

impl ClassFilter {
    pub fn label(self) -> &'static str {
        match self {
            ClassFilter::Nf => "nf",
            ClassFilter::Rl => "rl",
            ClassFilter::NfRl => "nfrl",
            ClassFilter::All => "all",
        }
    }
}

impl Display for ClassFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ClassFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nf" => Ok(ClassFilter::Nf),
            "rl" => Ok(ClassFilter::Rl),
            "nfrl" | "nf_rl" => Ok(ClassFilter::NfRl),
            "all" => Ok(ClassFilter::All),
            _ => Err(Error::Parameter(format!(
                "unknown clutter class {s:?} (expected nf, rl, nfrl or all)"
            ))),
        }
    }
}
