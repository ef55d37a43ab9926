//! File-based workflow: simulate a paired dataset, train a filter, run a
//! filter over a manifest and score its outputs.
//!
//! Directory layout written by [`simulate_dataset`]:
//!
//! ```text
//! out/manifest.tsv
//! out/clean/<id>.stsq  out/cluttered/<id>.stsq  out/mask/<id>.stsq
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::clutter::{
    place_clutter, render_clutter_volume, superimpose, ClutterClass, ClutterSpec, PatternGrids,
    PlacementConfig,
};
use crate::config::{desk_placement, parse_key_values, RunConfig};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::metrics::{evaluate, prediction_path, sha256_hex, EvalReport, SsimConfig};
use crate::net::{
    build_network, dump_attention, load_pairs, pretrain_perceptual, train_pairs, write_log_csv,
    EpochLog, FilterNet, LossKind, NetConfig, PerceptualNet, TrainConfig, TrainOutcome,
};
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::rng::{derive_seed, stream};
use crate::sequence::{decode_sequence, encode_sequence, SectorGeometry, Sequence};
use crate::svd::{svd_filter_sequence, SvdFilterConfig};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const WEIGHTS_FILE: &str = "model.wgt";
pub const NET_CONFIG_FILE: &str = "model.cfg";
pub const LOG_FILE: &str = "train_log.csv";
pub const FILTER_ID_FILE: &str = "filter.txt";
pub const TIMINGS_FILE: &str = "timings.json";

/// Which enumerated patterns a simulation draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassFilter {
    Nf,
    Rl,
    NfRl,
    All,
}

impl ClassFilter {
    pub fn accepts(self, class: ClutterClass) -> bool {
        match self {
            ClassFilter::Nf => class == ClutterClass::Nf,
            ClassFilter::Rl => class == ClutterClass::Rl,
            ClassFilter::NfRl => class == ClutterClass::NfRl,
            ClassFilter::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub class: ClassFilter,
    /// Number of records; `None` instantiates every selected pattern once.
    pub limit: Option<usize>,
    /// Fraction of records tagged `val`.
    pub holdout: f64,
    pub placement: PlacementConfig,
    pub phantom: PhantomConfig,
    pub grids: PatternGrids,
}

impl SimulateConfig {
    pub fn desk(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            frames,
            class: ClassFilter::All,
            limit: None,
            holdout: 0.25,
            placement: desk_placement(height, frames),
            phantom: PhantomConfig::new(height, width, frames),
            grids: PatternGrids::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Parameter("sequence size must be positive".into()));
        }
        if (self.phantom.height, self.phantom.width) != (self.height, self.width) {
            return Err(Error::Parameter(
                "phantom size differs from sequence size".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.holdout) {
            return Err(Error::Parameter("holdout must lie in [0, 1]".into()));
        }
        if self.limit == Some(0) {
            return Err(Error::Parameter("limit must be positive".into()));
        }
        self.phantom.validate()
    }

    pub fn geometry(&self) -> SectorGeometry {
        self.phantom.geometry
    }
}

/// Evenly spaced selection from the patterns of the requested class. A limit
/// larger than the selection cycles through it again.
pub fn select_patterns(
    specs: &[ClutterSpec],
    class: ClassFilter,
    limit: Option<usize>,
) -> Result<Vec<ClutterSpec>> {
    let pool: Vec<&ClutterSpec> = specs.iter().filter(|s| class.accepts(s.class)).collect();
    if pool.is_empty() {
        return Err(Error::Parameter(format!("no patterns of class {class}")));
    }
    let n = limit.unwrap_or(pool.len());
    let len = pool.len();
    Ok((0..n)
        .map(|i| {
            let j = if n <= len { i * len / n } else { i % len };
            pool[j].clone()
        })
        .collect())
}

/// One simulated triplet.
#[derive(Debug, Clone)]
pub struct SimulatedPair {
    pub clean: Sequence,
    pub cluttered: Sequence,
    pub mask: Sequence,
    pub start_frame_offset: usize,
}

fn drop_leading_frames(seq: &Sequence, offset: usize) -> Result<Sequence> {
    let (h, w, f) = seq.dims();
    Sequence::new(h, w, f - offset, seq.data()[offset * h * w..].to_vec())
}

/// Renders a phantom, places and superimposes `spec`. The clip starts
/// `start_frame_offset` frames into the rendered cycle.
pub fn simulate_pair(cfg: &SimulateConfig, spec: &ClutterSpec, seed: u64) -> Result<SimulatedPair> {
    let f = cfg.frames;
    let offset = stream(derive_seed(seed, "offset", 0)).random_range(0..f);
    let total = f + offset;
    let phantom = PhantomConfig {
        speckle_seed: derive_seed(seed, "speckle", 0),
        ..cfg.phantom.clone()
    };
    let clean = generate_phantom(&phantom, total, derive_seed(seed, "phantom", 0))?;
    let geom = cfg.geometry();
    let placed = place_clutter(
        spec,
        &geom,
        cfg.height,
        cfg.width,
        total,
        &cfg.placement,
        derive_seed(seed, "clutter", 0),
    )?;
    let vol = render_clutter_volume(&placed, cfg.height, cfg.width, total)?;
    let (cluttered, mask) = superimpose(&clean, &vol, &geom, cfg.placement.mask_threshold)?;
    Ok(SimulatedPair {
        clean: drop_leading_frames(&clean, offset)?,
        cluttered: drop_leading_frames(&cluttered, offset)?,
        mask: drop_leading_frames(&mask, offset)?,
        start_frame_offset: offset,
    })
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

/// Writes `out/manifest.tsv` and the STSQ triplets it lists.
pub fn simulate_dataset(cfg: &SimulateConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let specs = select_patterns(&cfg.grids.enumerate(), cfg.class, cfg.limit)?;
    for sub in ["clean", "cluttered", "mask"] {
        create_dir(&out.join(sub))?;
    }
    let n = specs.len();
    let held = (n as f64 * cfg.holdout).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(derive_seed(seed, "split", 0)));
    let mut split = vec![Split::Train; n];
    for &i in &order[..held] {
        split[i] = Split::Validation;
    }
    let mut records = Vec::with_capacity(n);
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("s{i:04}");
        let pair = simulate_pair(cfg, spec, derive_seed(seed, "record", i as u64))?;
        let file = format!("{id}.stsq");
        let (clean, cluttered, mask) = (
            PathBuf::from("clean").join(&file),
            PathBuf::from("cluttered").join(&file),
            PathBuf::from("mask").join(&file),
        );
        encode_sequence(&pair.clean, &out.join(&clean))?;
        encode_sequence(&pair.cluttered, &out.join(&cluttered))?;
        encode_sequence(&pair.mask, &out.join(&mask))?;
        records.push(ManifestRecord {
            id,
            clean_path: clean,
            cluttered_path: cluttered,
            mask_path: mask,
            pattern_id: spec.pattern_id,
            start_frame_offset: pair.start_frame_offset,
            split: split[i],
        });
    }
    let manifest = DatasetManifest::new(out, records)?;
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// `net.*` lines of the canonical configuration.
pub fn net_config_text(net: &NetConfig) -> String {
    let cfg = RunConfig {
        net: net.clone(),
        ..RunConfig::default()
    };
    cfg.to_text()
        .lines()
        .filter(|l| l.starts_with("net."))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn parse_net_config(text: &str) -> Result<NetConfig> {
    let kv = parse_key_values(text)?;
    if let Some(k) = kv.keys().find(|k| !k.starts_with("net.")) {
        return Err(Error::Format(format!(
            "unexpected key {k:?} in network config"
        )));
    }
    let mut cfg = RunConfig::default();
    cfg.apply(&kv)?;
    cfg.net.validate()?;
    Ok(cfg.net)
}

/// Loads `model.wgt` together with its `model.cfg` sidecar.
pub fn load_network(weights: &Path) -> Result<FilterNet> {
    let sidecar = weights.with_file_name(NET_CONFIG_FILE);
    let cfg = parse_net_config(&read_text(&sidecar)?)?;
    let mut net = build_network(&cfg)?;
    net.params.load(weights)?;
    Ok(net)
}

pub fn save_network(net: &FilterNet, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join(WEIGHTS_FILE);
    net.params.save(&path)?;
    write_text(&dir.join(NET_CONFIG_FILE), &net_config_text(&net.config))?;
    Ok(path)
}

/// Trains a fresh network on the manifest's `train` split and writes
/// `model.wgt`, `model.cfg` and `train_log.csv` into `out`. A `rec_prc` run
/// first pre-trains a plain autoencoder on clean sequences as the perceptual
/// feature extractor.
pub fn train_to_dir(
    manifest: &DatasetManifest,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    out: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(FilterNet, TrainOutcome)> {
    let tr = load_pairs(manifest, Split::Train)?;
    let va = load_pairs(manifest, Split::Validation)?;
    let perceptual = if train_cfg.loss_kind == LossKind::RecPrc {
        let vanilla = build_network(&PerceptualNet::vanilla_config(net_cfg))?;
        Some(pretrain_perceptual(vanilla, &tr, &va, train_cfg)?.0)
    } else {
        None
    };
    let mut net = build_network(net_cfg)?;
    let outcome = train_pairs(&mut net, &tr, &va, train_cfg, perceptual.as_ref(), on_epoch)?;
    save_network(&net, out)?;
    write_log_csv(&out.join(LOG_FILE), &outcome.log)?;
    Ok((net, outcome))
}

pub enum FilterMethod {
    Net(Box<FilterNet>),
    Svd(SvdFilterConfig),
}

impl FilterMethod {
    /// Stable description of the filter, used as the report's `filter` field.
    pub fn describe(&self) -> String {
        match self {
            FilterMethod::Net(net) => format!("net weights={}", sha256_hex(&net.params.to_bytes())),
            FilterMethod::Svd(c) => format!("svd roi={} drop={}", c.roi, c.drop_count),
        }
    }

    pub fn apply(&self, seq: &Sequence) -> Result<Sequence> {
        match self {
            FilterMethod::Net(net) => net.filter_sequence(seq),
            FilterMethod::Svd(c) => Ok(svd_filter_sequence(seq, c)?.sequence),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterTiming {
    pub id: String,
    pub seconds: f64,
}

/// Filters the cluttered input of every record into `out/<id>.stsq`.
/// Wall-clock times go to `timings.json`, kept apart from the outputs so
/// those stay reproducible. With `attention_out`, per-scale maps are written
/// as `<id>_scale<l>_{intermediate,final}.stsq`.
pub fn filter_records<'a>(
    manifest: &DatasetManifest,
    records: impl IntoIterator<Item = &'a ManifestRecord>,
    method: &FilterMethod,
    out: &Path,
    attention_out: Option<&Path>,
) -> Result<Vec<FilterTiming>> {
    create_dir(out)?;
    if let Some(dir) = attention_out {
        if !matches!(method, FilterMethod::Net(_)) {
            return Err(Error::Contract(
                "attention maps need a network filter".into(),
            ));
        }
        create_dir(dir)?;
    }
    let mut timings = Vec::new();
    for r in records {
        let input = decode_sequence(&manifest.resolve(&r.cluttered_path))?;
        let start = Instant::now();
        let filtered = method.apply(&input)?;
        timings.push(FilterTiming {
            id: r.id.clone(),
            seconds: start.elapsed().as_secs_f64(),
        });
        encode_sequence(&filtered, &prediction_path(out, &r.id))?;
        if let (Some(dir), FilterMethod::Net(net)) = (attention_out, method) {
            for maps in dump_attention(net, &input)? {
                let base = format!("{}_scale{}", r.id, maps.scale);
                encode_sequence(
                    &maps.intermediate,
                    &dir.join(format!("{base}_intermediate.stsq")),
                )?;
                encode_sequence(&maps.final_map, &dir.join(format!("{base}_final.stsq")))?;
            }
        }
    }
    write_text(
        &out.join(FILTER_ID_FILE),
        &format!("{}\n", method.describe()),
    )?;
    let json = serde_json::to_string_pretty(&timings).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&out.join(TIMINGS_FILE), &format!("{json}\n"))?;
    Ok(timings)
}

/// Scores the predictions in `pred_dir` and writes the report. An existing
/// report is only replaced when `force` is set.
#[allow(clippy::too_many_arguments)]
pub fn eval_to_file<'a>(
    manifest: &DatasetManifest,
    records: impl IntoIterator<Item = &'a ManifestRecord>,
    pred_dir: &Path,
    ssim: &SsimConfig,
    geometry: &SectorGeometry,
    grids: &PatternGrids,
    report: &Path,
    force: bool,
) -> Result<EvalReport> {
    if report.exists() && !force {
        return Err(Error::Contract(format!(
            "{} exists; pass --force to overwrite",
            report.display()
        )));
    }
    let id_file = pred_dir.join(FILTER_ID_FILE);
    let filter = if id_file.is_file() {
        read_text(&id_file)?.trim().to_string()
    } else {
        "unknown".to_string()
    };
    let rep = evaluate(
        manifest,
        records,
        pred_dir,
        &filter,
        ssim,
        Some(geometry),
        &grids.enumerate(),
    )?;
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(report, &rep.to_json())?;
    Ok(rep)
}

/// Records of one split, or all of them.
pub fn records_of(manifest: &DatasetManifest, split: Option<Split>) -> Vec<&ManifestRecord> {
    manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect()
}
