//! Experiment orchestration: scaling curves, anchor sweeps, ablation grids,
//! and strategy comparisons, each emitting sorted plot-ready CSV plus a
//! manifest with a canonical config hash.
//!
//! Grid cells (sweep value x seed) are independent and run in parallel;
//! rows are sorted by key before writing so output bytes are deterministic.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressor::{Ablation, FusionMode};
use crate::error::{Error, Result};
use crate::numcore::{peak_tensor_bytes, reset_peak_tensor_bytes};
use crate::pipeline::{evaluate, median, train, Checkpoint, PipelineConfig};
use crate::selection::Strategy;

/// Which config field a grid experiment varies, with its value list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    KViews(Vec<usize>),
    NAnchors(Vec<usize>),
    Strategy(Vec<Strategy>),
    FusionMode(Vec<FusionMode>),
    Beta(Vec<f64>),
    Ablation(Vec<Ablation>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::KViews(v) => v.len(),
            SweepAxis::NAnchors(v) => v.len(),
            SweepAxis::Strategy(v) => v.len(),
            SweepAxis::FusionMode(v) => v.len(),
            SweepAxis::Beta(v) => v.len(),
            SweepAxis::Ablation(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn default_eval_scenes() -> usize {
    5
}

fn default_narrow() -> f64 {
    0.5
}

fn default_wide() -> f64 {
    1.8
}

/// A grid experiment: a base config, one swept axis, and the seeds each cell
/// is repeated over.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: PipelineConfig,
    pub sweep: SweepAxis,
    pub seeds: Vec<u64>,
    /// Held-out scenes per evaluation; seeds are fixed and disjoint from
    /// training scene seeds.
    #[serde(default = "default_eval_scenes")]
    pub eval_scenes: usize,
    /// Narrow camera-arc span for the anchor sweep (radians).
    #[serde(default = "default_narrow")]
    pub narrow_baseline: f64,
    /// Wide camera-arc span for the anchor sweep (radians).
    #[serde(default = "default_wide")]
    pub wide_baseline: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::config(format!(
                "experiment name {:?} must be non-empty and filesystem-safe \
                 ([A-Za-z0-9_-])",
                self.name
            )));
        }
        if self.sweep.is_empty() {
            return Err(Error::config("sweep value list is empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if self.eval_scenes == 0 {
            return Err(Error::config("eval_scenes must be positive"));
        }
        if !(self.narrow_baseline > 0.0 && self.wide_baseline > self.narrow_baseline) {
            return Err(Error::config(
                "baselines must satisfy 0 < narrow < wide",
            ));
        }
        self.base.validate()
    }
}

/// Fixed held-out scene seeds, disjoint from training scene seeds (which are
/// splitmix-derived 64-bit values, never small integers).
pub fn held_out_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| 9_000_000 + i).collect()
}

pub fn ablation_label(a: Ablation) -> String {
    match (a.single_block, a.no_self_attention) {
        (false, false) => "full".to_string(),
        (true, false) => "single_block".to_string(),
        (false, true) => "no_self_attention".to_string(),
        (true, true) => "single_block+no_self_attention".to_string(),
    }
}

pub fn mode_label(m: FusionMode) -> &'static str {
    match m {
        FusionMode::Default => "default",
        FusionMode::FuseAnchors => "fuse_anchors",
        FusionMode::NoFusion => "no_fusion",
    }
}

pub fn strategy_label(s: Strategy) -> &'static str {
    match s {
        Strategy::Fps => "fps",
        Strategy::Overlap => "overlap",
        Strategy::KmeansPose => "kmeans_pose",
        Strategy::KmeansFeature => "kmeans_feature",
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    writeln!(out, "{header}").unwrap();
    for row in rows {
        writeln!(out, "{row}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.6}")
}

/// Train one grid cell and evaluate it on the shared held-out scenes.
fn train_and_eval(cfg: &PipelineConfig, seed: u64, eval_scenes: usize) -> Result<(Checkpoint, crate::pipeline::EvalReport)> {
    let (ckpt, _) = train(cfg, seed)?;
    let report = evaluate(&ckpt, cfg, &held_out_seeds(eval_scenes))?;
    Ok((ckpt, report))
}

/// One scaling row: an untrained forward pass measured at a given view count,
/// in compressed (fixed N) and baseline (N = K, no fusion) modes.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub k_views: usize,
    pub mode: String,
    pub n_anchors: usize,
    pub n_primitives: usize,
    pub wallclock_ms: f64,
    pub peak_bytes: usize,
}

pub const SCALING_HEADER: &str = "k_views,mode,n_anchors,n_primitives,wallclock_ms,peak_bytes";

/// Measure primitive count, forward wall-clock, and peak live-tensor bytes
/// across view counts, comparing fixed-anchor compression against the
/// uncompressed per-view baseline.
pub fn cmd_scaling(spec: &ExperimentSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let ks = match &spec.sweep {
        SweepAxis::KViews(v) => v.clone(),
        other => {
            return Err(Error::config(format!(
                "scaling requires a k_views sweep, got {other:?}"
            )))
        }
    };
    let seeds = held_out_seeds(spec.eval_scenes);
    let mut rows_data = Vec::new();
    for &k in &ks {
        if k < spec.base.n_anchors {
            return Err(Error::config(format!(
                "scaling: k_views={k} is below n_anchors={}",
                spec.base.n_anchors
            )));
        }
        // Compressed: fixed N, default fusion.
        let mut compressed = spec.base.clone();
        compressed.k_views = k;
        // Baseline: every view is its own anchor; no fusion.
        let mut baseline = spec.base.clone();
        baseline.k_views = k;
        baseline.n_anchors = k;
        baseline.mode = FusionMode::NoFusion;
        for (mode_name, cfg) in [("compressed", compressed), ("baseline", baseline)] {
            let ckpt = Checkpoint::init(&cfg, spec.seeds[0])?;
            // Warm one forward so allocator and page-cache effects do not
            // skew the first-K measurement, then measure with a fresh peak.
            evaluate(&ckpt, &cfg, &seeds[..1]).map_err(|e| {
                Error::config(format!("scaling at k_views={k} ({mode_name}): {e}"))
            })?;
            reset_peak_tensor_bytes();
            let report = evaluate(&ckpt, &cfg, &seeds).map_err(|e| {
                Error::config(format!("scaling at k_views={k} ({mode_name}): {e}"))
            })?;
            rows_data.push(ScalingRow {
                k_views: k,
                mode: mode_name.to_string(),
                n_anchors: cfg.n_anchors,
                n_primitives: report.n_primitives,
                wallclock_ms: report.wallclock_ms_per_forward,
                peak_bytes: peak_tensor_bytes(),
            });
        }
    }
    rows_data.sort_by(|a, b| (a.k_views, &a.mode).cmp(&(b.k_views, &b.mode)));
    let rows: Vec<String> = rows_data
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.k_views,
                r.mode,
                r.n_anchors,
                r.n_primitives,
                fmt_f64(r.wallclock_ms),
                r.peak_bytes
            )
        })
        .collect();
    let path = out_dir.join("scaling.csv");
    write_csv(&path, SCALING_HEADER, &rows)?;
    Ok(vec![path])
}

pub const ANCHOR_SWEEP_HEADER: &str = "baseline,n_anchors,seed,psnr,task,kl";

/// Train across anchor counts at two camera-arc spans and report held-out
/// PSNR, producing the PSNR-vs-N curve for each span.
pub fn cmd_anchor_sweep(spec: &ExperimentSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let ns = match &spec.sweep {
        SweepAxis::NAnchors(v) => v.clone(),
        other => {
            return Err(Error::config(format!(
                "anchor sweep requires an n_anchors sweep, got {other:?}"
            )))
        }
    };
    let spans = [
        ("narrow", spec.narrow_baseline),
        ("wide", spec.wide_baseline),
    ];
    let mut cells = Vec::new();
    for &(span_name, span) in &spans {
        for &n in &ns {
            if n == 0 || n > spec.base.k_views {
                return Err(Error::config(format!(
                    "anchor sweep: n_anchors={n} is outside 1..=k_views"
                )));
            }
            for &seed in &spec.seeds {
                cells.push((span_name, span, n, seed));
            }
        }
    }
    let results: Vec<Result<String>> = cells
        .par_iter()
        .map(|&(span_name, span, n, seed)| {
            let mut cfg = spec.base.clone();
            cfg.n_anchors = n;
            cfg.baseline = span;
            let (_, report) = train_and_eval(&cfg, seed, spec.eval_scenes)?;
            Ok(format!(
                "{},{},{},{},{},{}",
                span_name,
                n,
                seed,
                fmt_f64(report.mean_psnr),
                fmt_f64(report.task),
                fmt_f64(report.kl)
            ))
        })
        .collect();
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort();
    let path = out_dir.join("anchor_sweep.csv");
    write_csv(&path, ANCHOR_SWEEP_HEADER, &rows)?;
    Ok(vec![path])
}

pub const ABLATE_HEADER: &str = "variant,seed,psnr,task,kl";

/// Train each variant of a fusion-mode, block-ablation, or beta sweep with
/// shared seeds and report held-out PSNR, task loss, and KL.
pub fn cmd_ablate(spec: &ExperimentSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    // (label, configured variant) pairs.
    let variants: Vec<(String, PipelineConfig)> = match &spec.sweep {
        SweepAxis::FusionMode(v) => v
            .iter()
            .map(|&m| {
                let mut cfg = spec.base.clone();
                cfg.mode = m;
                (mode_label(m).to_string(), cfg)
            })
            .collect(),
        SweepAxis::Ablation(v) => v
            .iter()
            .map(|&a| {
                let mut cfg = spec.base.clone();
                cfg.ablation = a;
                (ablation_label(a), cfg)
            })
            .collect(),
        SweepAxis::Beta(v) => v
            .iter()
            .map(|&b| {
                let mut cfg = spec.base.clone();
                cfg.beta = b;
                (format!("beta={b:e}"), cfg)
            })
            .collect(),
        other => {
            return Err(Error::config(format!(
                "ablate requires a fusion_mode, ablation, or beta sweep, got {other:?}"
            )))
        }
    };
    let cells: Vec<(&String, &PipelineConfig, u64)> = variants
        .iter()
        .flat_map(|(label, cfg)| spec.seeds.iter().map(move |&s| (label, cfg, s)))
        .collect();
    let results: Vec<Result<String>> = cells
        .par_iter()
        .map(|&(label, cfg, seed)| {
            let (_, report) = train_and_eval(cfg, seed, spec.eval_scenes)?;
            Ok(format!(
                "{},{},{},{},{}",
                label,
                seed,
                fmt_f64(report.mean_psnr),
                fmt_f64(report.task),
                fmt_f64(report.kl)
            ))
        })
        .collect();
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort();
    let path = out_dir.join("ablate.csv");
    write_csv(&path, ABLATE_HEADER, &rows)?;
    Ok(vec![path])
}

pub const STRATEGIES_HEADER: &str = "strategy,seed,psnr,task,kl";

/// Train once per anchor-selection strategy with shared seeds and report the
/// held-out PSNR table.
pub fn cmd_strategies(spec: &ExperimentSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let strategies = match &spec.sweep {
        SweepAxis::Strategy(v) => v.clone(),
        other => {
            return Err(Error::config(format!(
                "strategies requires a strategy sweep, got {other:?}"
            )))
        }
    };
    let cells: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| spec.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results: Vec<Result<String>> = cells
        .par_iter()
        .map(|&(strategy, seed)| {
            let mut cfg = spec.base.clone();
            cfg.strategy = strategy;
            let (_, report) = train_and_eval(&cfg, seed, spec.eval_scenes)?;
            Ok(format!(
                "{},{},{},{},{}",
                strategy_label(strategy),
                seed,
                fmt_f64(report.mean_psnr),
                fmt_f64(report.task),
                fmt_f64(report.kl)
            ))
        })
        .collect();
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort();
    let path = out_dir.join("strategies.csv");
    write_csv(&path, STRATEGIES_HEADER, &rows)?;
    Ok(vec![path])
}

/// SHA-256 of the canonical (sorted-key) JSON form of any config value.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value maps are BTreeMaps, so re-serializing through Value
    // sorts keys and yields a canonical byte string.
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub files: Vec<String>,
}

/// Write `manifest.json` beside the produced files, listing them by name
/// (sorted) with the canonical config hash.
pub fn write_manifest<T: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &T,
    files: &[PathBuf],
) -> Result<PathBuf> {
    let mut names: Vec<String> = files
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| Error::invalid(format!("output path {p:?} has no file name")))
        })
        .collect::<Result<_>>()?;
    names.sort();
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: config_hash(config)?,
        files: names,
    };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Run medians per sweep-key over the seed column of a written CSV. Used by
/// the ordering summaries the grid commands print.
pub fn median_by_key(rows: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut by_key: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for (key, value) in rows {
        by_key.entry(key.clone()).or_default().push(*value);
    }
    by_key
        .into_iter()
        .map(|(key, vals)| (key, median(&vals)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::METRICS_HEADER;

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            name: "tiny".to_string(),
            base: PipelineConfig {
                k_views: 4,
                n_anchors: 2,
                image: 16,
                patch: 4,
                channels: 16,
                heads: 4,
                blocks: 1,
                train_targets: 2,
                eval_targets: 2,
                steps: 0,
                scene_blobs: 3,
                ..PipelineConfig::default()
            },
            sweep: SweepAxis::KViews(vec![4, 6]),
            seeds: vec![7],
            eval_scenes: 2,
            narrow_baseline: 0.5,
            wide_baseline: 1.8,
        }
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let mut spec = tiny_spec();
        spec.name = "has space".to_string();
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec();
        spec.sweep = SweepAxis::KViews(vec![]);
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec();
        spec.seeds.clear();
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec();
        spec.narrow_baseline = 2.0;
        assert!(spec.validate().is_err());

        assert!(tiny_spec().validate().is_ok());
    }

    #[test]
    fn scaling_rows_follow_count_law() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let files = cmd_scaling(&spec, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SCALING_HEADER);
        let rows: Vec<Vec<String>> = lines
            .map(|l| l.split(',').map(|s| s.to_string()).collect())
            .collect();
        // One baseline and one compressed row per K, sorted by (K, mode).
        assert_eq!(rows.len(), 4);
        let grid_sq = (16 / 4) * (16 / 4);
        for row in &rows {
            let k: usize = row[0].parse().unwrap();
            let n_prims: usize = row[3].parse().unwrap();
            match row[1].as_str() {
                "baseline" => assert_eq!(n_prims, k * grid_sq),
                "compressed" => assert_eq!(n_prims, 2 * grid_sq),
                other => panic!("unexpected mode {other}"),
            }
        }
    }

    #[test]
    fn scaling_rejects_wrong_axis() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.sweep = SweepAxis::Beta(vec![0.0]);
        assert!(matches!(
            cmd_scaling(&spec, dir.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn strategies_table_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.sweep = SweepAxis::Strategy(vec![Strategy::Fps, Strategy::KmeansPose]);
        let files1 = cmd_strategies(&spec, dir.path()).unwrap();
        let a = std::fs::read(&files1[0]).unwrap();
        let files2 = cmd_strategies(&spec, dir.path()).unwrap();
        let b = std::fs::read(&files2[0]).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        // Header + one row per (strategy x seed).
        assert_eq!(text.lines().count(), 1 + 2 * spec.seeds.len());
        assert_eq!(text.lines().next().unwrap(), STRATEGIES_HEADER);
        assert!(text.contains("fps,"));
    }

    #[test]
    fn ablate_covers_all_three_axes() {
        let dir = tempfile::tempdir().unwrap();
        for sweep in [
            SweepAxis::FusionMode(vec![FusionMode::Default, FusionMode::NoFusion]),
            SweepAxis::Ablation(vec![
                Ablation::default(),
                Ablation { single_block: true, no_self_attention: false },
            ]),
            SweepAxis::Beta(vec![0.0, 1e-5]),
        ] {
            let mut spec = tiny_spec();
            spec.sweep = sweep;
            let files = cmd_ablate(&spec, dir.path()).unwrap();
            let text = std::fs::read_to_string(&files[0]).unwrap();
            assert_eq!(text.lines().count(), 1 + 2 * spec.seeds.len());
        }
    }

    #[test]
    fn anchor_sweep_emits_both_spans() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.sweep = SweepAxis::NAnchors(vec![1, 4]);
        let files = cmd_anchor_sweep(&spec, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        // 2 spans x 2 values x 1 seed rows plus the header.
        assert_eq!(text.lines().count(), 1 + 4);
        assert!(text.contains("narrow,"));
        assert!(text.contains("wide,"));
    }

    #[test]
    fn config_hash_changes_iff_config_changes() {
        let spec = tiny_spec();
        let h1 = config_hash(&spec).unwrap();
        let h2 = config_hash(&tiny_spec()).unwrap();
        assert_eq!(h1, h2);
        let mut other = tiny_spec();
        other.base.beta = 2e-5;
        assert_ne!(h1, config_hash(&other).unwrap());
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn manifest_lists_sorted_file_names() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let files = vec![dir.path().join("b.csv"), dir.path().join("a.csv")];
        let path = write_manifest(dir.path(), "scaling", &spec, &files).unwrap();
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(manifest.files, vec!["a.csv", "b.csv"]);
        assert_eq!(manifest.command, "scaling");
        assert_eq!(manifest.config_hash, config_hash(&spec).unwrap());
    }

    #[test]
    fn median_by_key_groups_seeds() {
        let rows = vec![
            ("a".to_string(), 1.0),
            ("a".to_string(), 3.0),
            ("b".to_string(), 2.0),
        ];
        let med = median_by_key(&rows);
        assert_eq!(med, vec![("a".to_string(), 2.0), ("b".to_string(), 2.0)]);
    }

    #[test]
    fn metrics_header_matches_training_output() {
        // The bench CSVs sit beside the training metrics file; keep the two
        // header constants from drifting apart silently.
        assert_eq!(METRICS_HEADER.split(',').count(), 7);
    }
}
