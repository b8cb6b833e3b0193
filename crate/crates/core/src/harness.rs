//! IoU metrics, evaluation and experiment orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::colorspace::align_images;
use crate::domains::{
    build_domain_suite, derive_seed, generate_dataset, style_bank, CorruptionParams, DatasetSpec,
    DomainTag, Scene,
};
use crate::error::{Error, Result};
use crate::image::{Image, SegClass, SegMask};
use crate::meta_train::{train_from, LogRecord, MetaConfig, Objective, TrainLog};
use crate::model::{forward, init_params, ArchConfig, ModelParams};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-class intersection and union pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: [u64; 3],
    pub union: [u64; 3],
}

impl IouCounts {
    pub fn add(&mut self, other: &IouCounts) {
        for c in 0..3 {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
    }

    /// Both-empty classes score 1.
    pub fn report(&self, threshold: f64) -> IoUReport {
        let per_class: BTreeMap<SegClass, f64> = SegClass::ALL
            .iter()
            .map(|&class| {
                let (i, u) = (self.intersection[class.index()], self.union[class.index()]);
                (class, if u == 0 { 1.0 } else { i as f64 / u as f64 })
            })
            .collect();
        let average = per_class.values().sum::<f64>() / per_class.len() as f64;
        IoUReport {
            per_class,
            average,
            threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_class: BTreeMap<SegClass, f64>,
    pub average: f64,
    pub threshold: f64,
}

impl IoUReport {
    pub fn class(&self, class: SegClass) -> f64 {
        self.per_class[&class]
    }
}

/// Counts after binarizing `pred` with `p >= threshold`.
pub fn iou_counts(pred: &Image, label: &SegMask, threshold: f64) -> Result<IouCounts> {
    if pred.dims() != (label.height(), label.width(), SegMask::CLASSES) {
        return Err(Error::dims(format!(
            "prediction {:?} vs label {}x{}x3",
            pred.dims(),
            label.height(),
            label.width()
        )));
    }
    let mut counts = IouCounts::default();
    for class in SegClass::ALL {
        let c = class.index();
        for (&p, &y) in pred.plane(c).iter().zip(label.plane(class)) {
            let on = p >= threshold;
            let truth = y == 1;
            counts.intersection[c] += (on && truth) as u64;
            counts.union[c] += (on || truth) as u64;
        }
    }
    Ok(counts)
}

pub fn iou(pred: &Image, label: &SegMask, threshold: f64) -> Result<IoUReport> {
    Ok(iou_counts(pred, label, threshold)?.report(threshold))
}

/// Restyles every non-ego CAV toward the ego's LAB statistics.
pub fn align_scene(scene: &Scene, ego_index: usize) -> Result<Scene> {
    let ego = scene
        .cav_images
        .get(ego_index)
        .ok_or_else(|| Error::invalid(format!("ego index {ego_index} with {} CAVs", scene.n_cavs())))?;
    let others: Vec<Image> = scene
        .cav_images
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ego_index)
        .map(|(_, img)| img.clone())
        .collect();
    let mut aligned = align_images(ego, &others)?.into_iter();
    scene.map_images(|i, img| {
        Ok(if i == ego_index {
            img.clone()
        } else {
            aligned.next().expect("one aligned image per peer")
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_scene: Vec<IoUReport>,
    /// From counts pooled over all scenes.
    pub aggregate: IoUReport,
}

/// Predicts every scene (optionally aligning to CAV 0 first) and scores it.
pub fn evaluate(params: &ModelParams, scenes: &[Scene], use_alignment: bool) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let counts: Vec<IouCounts> = scenes
        .par_iter()
        .map(|scene| {
            let prepared;
            let scene = if use_alignment {
                prepared = align_scene(scene, 0)?;
                &prepared
            } else {
                scene
            };
            let (pred, _) = forward(params, &scene.cav_images)?;
            iou_counts(&pred, &scene.label, DEFAULT_THRESHOLD)
        })
        .collect::<Result<_>>()?;
    let mut total = IouCounts::default();
    for c in &counts {
        total.add(c);
    }
    Ok(EvalReport {
        per_scene: counts.iter().map(|c| c.report(DEFAULT_THRESHOLD)).collect(),
        aggregate: total.report(DEFAULT_THRESHOLD),
    })
}

pub fn evaluate_suite(
    params: &ModelParams,
    suite: &BTreeMap<DomainTag, Vec<Scene>>,
    use_alignment: bool,
) -> Result<BTreeMap<DomainTag, EvalReport>> {
    suite
        .iter()
        .map(|(tag, scenes)| Ok((*tag, evaluate(params, scenes, use_alignment)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub ampaug: bool,
    pub meta_consistency: bool,
    pub alignment: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Toggles {
    pub fn all(on: bool) -> Self {
        Self {
            ampaug: on,
            meta_consistency: on,
            alignment: on,
        }
    }

    /// Directory-friendly name such as `amp1_meta0_align1`.
    pub fn label(&self) -> String {
        format!(
            "amp{}_meta{}_align{}",
            self.ampaug as u8, self.meta_consistency as u8, self.alignment as u8
        )
    }

    /// The eight on/off combinations.
    pub fn grid() -> Vec<Toggles> {
        (0..8u8)
            .map(|bits| Toggles {
                ampaug: bits & 4 != 0,
                meta_consistency: bits & 2 != 0,
                alignment: bits & 1 != 0,
            })
            .collect()
    }
}

/// Amplitude bank source: `count` randomly styled scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSpec {
    pub count: usize,
    pub seed: u64,
}

impl Default for BankSpec {
    fn default() -> Self {
        Self { count: 64, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub train: DatasetSpec,
    pub test: DatasetSpec,
    pub arch: ArchConfig,
    /// Seed for weight initialization.
    pub init_seed: u64,
    /// Plain source-only epochs run before the toggled phase.
    pub erm_epochs: usize,
    /// Step size of the source-only phase.
    pub erm_lr: f64,
    pub meta: MetaConfig,
    pub corruption: CorruptionParams,
    pub toggles: Toggles,
    pub bank: BankSpec,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            train: DatasetSpec::default(),
            test: DatasetSpec {
                count: 50,
                seed: 1_000_003,
                ..DatasetSpec::default()
            },
            arch: ArchConfig::default(),
            init_seed: 0,
            erm_epochs: 30,
            erm_lr: 2e-4,
            meta: MetaConfig::default(),
            corruption: CorruptionParams::default(),
            toggles: Toggles::default(),
            bank: BankSpec::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// JSON with keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// SHA-256 of the canonical JSON, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output_dir = None;
        hex(&Sha256::digest(cfg.canonical_json().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub run_id: String,
    pub config_hash: String,
    pub domain_tag: DomainTag,
    pub iou: IoUReport,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ResultsRecord>,
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Generates data, trains per the toggles and evaluates on the four
/// shifted domains. Every stage failure is tagged with its stage name.
///
/// With `ampaug` off the meta-test branch is the source itself; with
/// `meta_consistency` off the toggled phase is plain ERM (on source and,
/// when enabled, augmented scenes).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let hash = cfg.hash();
    let run_id = format!("{}-{}", cfg.name, &hash[..12]);
    log::info!("run {run_id}: {}", cfg.toggles.label());

    let train_set = generate_dataset(&cfg.train, &cfg.corruption.jitter).map_err(|e| e.in_stage("generate"))?;
    let test_set = generate_dataset(&cfg.test, &cfg.corruption.jitter).map_err(|e| e.in_stage("generate"))?;
    let suite = build_domain_suite(&test_set, &cfg.corruption).map_err(|e| e.in_stage("corrupt"))?;
    let bank = if cfg.toggles.ampaug {
        Some(
            style_bank(cfg.bank.count, cfg.train.height, cfg.train.width, cfg.bank.seed)
                .map_err(|e| e.in_stage("bank"))?,
        )
    } else {
        None
    };

    let params = init_params(&cfg.arch, cfg.init_seed).map_err(|e| e.in_stage("init"))?;
    let pre_cfg = MetaConfig {
        epochs: cfg.erm_epochs,
        outer_lr: cfg.erm_lr,
        seed: derive_seed(cfg.meta.seed, 0xE53),
        ..cfg.meta
    };
    let (params, mut log) =
        train_from(params, &train_set, None, &pre_cfg, Objective::Erm).map_err(|e| e.in_stage("pretrain"))?;
    let objective = if cfg.toggles.meta_consistency {
        Objective::Meta
    } else {
        Objective::Erm
    };
    let (params, tail) =
        train_from(params, &train_set, bank.as_ref(), &cfg.meta, objective).map_err(|e| e.in_stage("train"))?;
    let offset = log.len();
    log.extend(tail.into_iter().map(|r| LogRecord {
        iter: r.iter + offset,
        epoch: r.epoch + cfg.erm_epochs,
        ..r
    }));

    let reports = evaluate_suite(&params, &suite, cfg.toggles.alignment).map_err(|e| e.in_stage("evaluate"))?;
    let wall_time_s = started.elapsed().as_secs_f64();
    let records: Vec<ResultsRecord> = reports
        .into_iter()
        .map(|(tag, report)| ResultsRecord {
            run_id: run_id.clone(),
            config_hash: hash.clone(),
            domain_tag: tag,
            iou: report.aggregate,
            wall_time_s,
        })
        .collect();

    if let Some(dir) = &cfg.output_dir {
        write_run(dir, cfg, &records, &log, &params).map_err(|e| e.in_stage("write"))?;
    }
    Ok(RunOutput {
        records,
        params,
        log,
    })
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    records: &[ResultsRecord],
    log: &[LogRecord],
    params: &ModelParams,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_jsonl(&dir.join(RESULTS_FILE), records)?;
    write_jsonl(&dir.join(TRAIN_LOG_FILE), log)?;
    params.save(dir.join(CHECKPOINT_FILE))
}

/// Runs every toggle combination into `root/<toggles label>/`.
pub fn ablate(base: &ExperimentConfig, root: impl AsRef<Path>) -> Result<Vec<(Toggles, Vec<ResultsRecord>)>> {
    let root = root.as_ref();
    Toggles::grid()
        .into_iter()
        .map(|toggles| {
            let cfg = ExperimentConfig {
                name: format!("{}-{}", base.name, toggles.label()),
                toggles,
                output_dir: Some(root.join(toggles.label())),
                ..base.clone()
            };
            Ok((toggles, run_experiment(&cfg)?.records))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{generate_scene, generate_scene_with, JitterParams};

    fn mask_from(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> bool) -> SegMask {
        let mut m = SegMask::empty(h, w);
        for class in SegClass::ALL {
            for y in 0..h {
                for x in 0..w {
                    m.set(class, y, x, f(class.index(), y, x));
                }
            }
        }
        m
    }

    #[test]
    fn perfect_prediction() {
        let label = mask_from(5, 5, |c, y, x| (c + y * x) % 3 == 0);
        let r = iou(&label.to_image(), &label, 0.5).unwrap();
        assert_eq!(r.average, 1.0);
        assert!(r.per_class.values().all(|&v| v == 1.0));
    }

    #[test]
    fn disjoint_and_half() {
        let label = mask_from(10, 10, |_, y, _| y < 5);
        let pred = mask_from(10, 10, |_, y, _| y >= 5).to_image();
        assert_eq!(iou(&pred, &label, 0.5).unwrap().average, 0.0);

        let gt = mask_from(10, 10, |_, _, _| true);
        let half = mask_from(10, 10, |_, y, _| y < 5).to_image();
        assert_eq!(iou(&half, &gt, 0.5).unwrap().class(SegClass::Road), 0.5);
    }

    #[test]
    fn empty_classes_score_one() {
        let label = SegMask::empty(3, 3);
        let r = iou(&Image::zeros(3, 3, 3), &label, 0.5).unwrap();
        assert_eq!(r.average, 1.0);
        assert!(iou(&Image::zeros(3, 4, 3), &label, 0.5).is_err());
    }

    #[test]
    fn alignment_on_identical_views_is_near_identity() {
        let params = init_params(&ArchConfig::default(), 4).unwrap();
        let scene = generate_scene_with(8, 16, 16, 3, &JitterParams::none()).unwrap();
        let aligned = align_scene(&scene, 0).unwrap();
        let (a, _) = forward(&params, &scene.cav_images).unwrap();
        let (b, _) = forward(&params, &aligned.cav_images).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
        let plain = evaluate(&params, std::slice::from_ref(&scene), false).unwrap();
        let with = evaluate(&params, std::slice::from_ref(&scene), true).unwrap();
        assert!((plain.aggregate.average - with.aggregate.average).abs() < 1e-6);
    }

    #[test]
    fn evaluate_report_count() {
        let params = init_params(&ArchConfig::default(), 4).unwrap();
        let base: Vec<Scene> = (0..3).map(|s| generate_scene(s, 8, 8, 2).unwrap()).collect();
        let suite = build_domain_suite(&base, &CorruptionParams::default()).unwrap();
        let reports = evaluate_suite(&params, &suite, true).unwrap();
        let total: usize = reports.values().map(|r| r.per_scene.len()).sum();
        assert_eq!(total, 3 * 4);
    }

    #[test]
    fn config_hash_ignores_field_order() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_value(&cfg).unwrap();
        let mut entries: Vec<(String, serde_json::Value)> =
            json.as_object().unwrap().clone().into_iter().collect();
        entries.reverse();
        let text = format!(
            "{{{}}}",
            entries
                .iter()
                .map(|(k, v)| format!("{:?}:{}", k, v))
                .collect::<Vec<_>>()
                .join(",")
        );
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig {
            init_seed: 1,
            ..cfg.clone()
        };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn toggle_grid_is_complete() {
        let grid = Toggles::grid();
        let labels: std::collections::BTreeSet<String> = grid.iter().map(Toggles::label).collect();
        assert_eq!(labels.len(), 8);
    }
}
