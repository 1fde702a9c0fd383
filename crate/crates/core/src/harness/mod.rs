//! Experiment harness: TOML configuration, device-disjoint splits, paired
//! task sets, detection metrics, transferability matrices and reports.
//!
//! Every random choice in an experiment is drawn from a stream derived from
//! the master seed and a label naming the cell (task, detector, attack), so a
//! run is a pure function of its configuration.

mod pipeline;
mod report;

pub use pipeline::{
    prepare, run_campaign, run_experiment, stage_attack, stage_dataset, stage_evaluate, stage_features,
    stage_manipulate, stage_report, stage_train, stage_run, train_detectors, Experiment, ExperimentResults,
    TaskData,
};
pub use report::{
    emit_report, metrics_markdown, parse_metrics_csv, parse_transfer_csv, transfer_markdown, write_metrics_csv,
    write_transfer_csv, ReportFiles, ReportMeta,
};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackLogRecord, RestorerHyper};
use crate::detectors::{BayarArch, DetectorKind, DetectorModel, LinearHyper, NetHyper, TrainSet, DEFAULT_SOFT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::imaging::{encode_pgm, DatasetSpec, DevicePatch, ImagePatch};
use crate::manipulations::{apply, ManipulationSpec};
use crate::rng::{derive_seed, fingerprint, stream};
use crate::spamfeat::SpamConfig;

/// Train/test partition settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Devices drawn for training; the rest are used for testing.
    pub train_devices: usize,
    /// Cap on pristine/manipulated pairs per task on each side.
    pub max_train_pairs: Option<usize>,
    pub max_test_pairs: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_devices: 6, max_train_pairs: None, max_test_pairs: Some(1000) }
    }
}

/// Settings of the soft SPAM-equivalent network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftConfig {
    pub temperature: f64,
    /// Fine-tune the classifier head after conversion.
    pub finetune: bool,
    pub train: NetHyper,
}

impl Default for SoftConfig {
    fn default() -> Self {
        Self { temperature: DEFAULT_SOFT_TEMPERATURE, finetune: false, train: NetHyper { epochs: 2, ..NetHyper::default() } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Icm,
    Gan,
}

impl AttackMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Icm => "icm",
            AttackMethod::Gan => "gan",
        }
    }
}

/// One attack campaign: a method, the detector it targets and the detectors
/// that score the resulting images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub method: AttackMethod,
    pub target: DetectorKind,
    /// Empty means every configured detector.
    #[serde(default)]
    pub evaluators: Vec<DetectorKind>,
    /// Task ids (e.g. `median7`); empty means every task.
    #[serde(default)]
    pub tasks: Vec<String>,
    /// Manipulated test patches attacked per task.
    #[serde(default = "default_max_patches")]
    pub max_patches: usize,
    #[serde(default)]
    pub params: AttackConfig,
    #[serde(default)]
    pub restorer: RestorerHyper,
    /// Training pairs for the restorer.
    #[serde(default = "default_restorer_pairs")]
    pub restorer_pairs: usize,
}

fn default_max_patches() -> usize {
    200
}

fn default_restorer_pairs() -> usize {
    256
}

impl CampaignConfig {
    pub fn new(method: AttackMethod, target: DetectorKind) -> Self {
        Self {
            method,
            target,
            evaluators: Vec::new(),
            tasks: Vec::new(),
            max_patches: default_max_patches(),
            params: AttackConfig::default(),
            restorer: RestorerHyper::default(),
            restorer_pairs: default_restorer_pairs(),
        }
    }
}

/// Complete description of an experiment. Hyperparameter `seed` fields and
/// the dataset seed are overwritten with values derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    pub manipulations: Vec<ManipulationSpec>,
    pub detectors: Vec<DetectorKind>,
    pub spam: SpamConfig,
    pub linear: LinearHyper,
    pub bayar: BayarArch,
    pub bayar_train: NetHyper,
    pub soft: SoftConfig,
    pub attacks: Vec<CampaignConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            split: SplitConfig::default(),
            manipulations: ManipulationSpec::table_rows(),
            detectors: vec![DetectorKind::SpamLinear, DetectorKind::CozzNetSoft, DetectorKind::BayarNet],
            spam: SpamConfig::default(),
            linear: LinearHyper::default(),
            bayar: BayarArch::default(),
            bayar_train: NetHyper { epochs: 6, lr: 0.005, grad_clip: 0.5, ..NetHyper::default() },
            soft: SoftConfig::default(),
            attacks: vec![CampaignConfig::new(AttackMethod::Fgsm, DetectorKind::BayarNet)],
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the configuration; every failure is a [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(config_err);
        wrap(self.dataset.validate())?;
        wrap(self.spam.validate())?;
        let ids: BTreeSet<u32> = self.dataset.devices.iter().map(|d| d.device_id).collect();
        if ids.len() != self.dataset.devices.len() {
            return Err(config_err("device ids must be unique"));
        }
        if self.split.train_devices == 0 || self.split.train_devices >= ids.len() {
            return Err(config_err(format!(
                "split.train_devices must be in 1..{}, got {}",
                ids.len(),
                self.split.train_devices
            )));
        }
        if self.manipulations.is_empty() {
            return Err(config_err("at least one manipulation is required"));
        }
        let mut task_ids = BTreeSet::new();
        for m in &self.manipulations {
            wrap(m.validate())?;
            if !task_ids.insert(m.id()) {
                return Err(config_err(format!("duplicate manipulation '{}'", m.id())));
            }
        }
        if self.detectors.is_empty() {
            return Err(config_err("at least one detector is required"));
        }
        for c in &self.attacks {
            wrap(c.params.validate())?;
            if !self.detectors.contains(&c.target) {
                return Err(config_err(format!("attack target {} is not among the detectors", c.target)));
            }
            if let Some(e) = c.evaluators.iter().find(|e| !self.detectors.contains(e)) {
                return Err(config_err(format!("evaluator {e} is not among the detectors")));
            }
            if let Some(t) = c.tasks.iter().find(|t| !task_ids.contains(*t)) {
                return Err(config_err(format!("attack task '{t}' is not a configured manipulation")));
            }
            let ok = match c.method {
                AttackMethod::Fgsm | AttackMethod::Pgd | AttackMethod::Gan => c.target.is_differentiable(),
                AttackMethod::Icm => c.target == DetectorKind::SpamLinear,
            };
            if !ok {
                return Err(config_err(format!("{} cannot target {}", c.method.as_str(), c.target)));
            }
            if c.max_patches == 0 {
                return Err(config_err("max_patches must be >= 1"));
            }
        }
        Ok(())
    }

    /// Short hash of the canonical JSON form of the configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// The dataset description with its seed derived from the master seed.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec { seed: derive_seed(self.seed, "dataset"), ..self.dataset.clone() }
    }

    pub fn cell_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

/// Train and test device ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSplit {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

impl DeviceSplit {
    /// Fails if a device appears on both sides.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<u32> = self.train.iter().copied().collect();
        if let Some(d) = self.test.iter().find(|d| train.contains(d)) {
            return Err(Error::invalid(format!("device {d} is on both sides of the split")));
        }
        Ok(())
    }
}

/// Draws `train_count` devices at random for training.
pub fn split_devices(devices: &[u32], train_count: usize, seed: u64) -> Result<DeviceSplit> {
    let mut ids: Vec<u32> = devices.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if train_count >= ids.len() {
        return Err(Error::invalid(format!("train_count {train_count} must be below the {} devices", ids.len())));
    }
    if train_count == 0 {
        return Err(Error::invalid("train_count must be >= 1"));
    }
    ids.shuffle(&mut stream(seed, "device-split"));
    let mut train = ids[..train_count].to_vec();
    let mut test = ids[train_count..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(DeviceSplit { train, test })
}

/// Splits patches by device. Every patch of a device lands on one side.
pub fn split_by_device(
    patches: &[DevicePatch],
    train_count: usize,
    seed: u64,
) -> Result<(DeviceSplit, Vec<DevicePatch>, Vec<DevicePatch>)> {
    let devices: Vec<u32> = patches.iter().map(|p| p.device_id).collect();
    let split = split_devices(&devices, train_count, seed)?;
    let (train, test): (Vec<DevicePatch>, Vec<DevicePatch>) =
        patches.iter().cloned().partition(|p| split.train.contains(&p.device_id));
    Ok((split, train, test))
}

/// Stable identifier of a dataset patch, also its relative file stem.
pub fn patch_id(p: &DevicePatch) -> String {
    format!("dev{:02}/im{:04}_p{:03}", p.device_id, p.image_index, p.patch_index)
}

/// Picks at most `cap` patches with a seeded draw, keeping dataset order.
pub fn select_capped(n: usize, cap: Option<usize>, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(cap) = cap.filter(|&c| c < n) {
        idx.shuffle(&mut stream(seed, "cap"));
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

/// Labelled pairs for one task. Entry `2k` is a pristine patch and `2k + 1`
/// its manipulated version, so classes are balanced by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedSet {
    pub set: TrainSet,
    /// Patch id of every pair.
    pub ids: Vec<String>,
}

impl PairedSet {
    pub fn pairs(&self) -> usize {
        self.ids.len()
    }

    pub fn pristine(&self, k: usize) -> &ImagePatch {
        &self.set.patches[2 * k]
    }

    pub fn manipulated(&self, k: usize) -> &ImagePatch {
        &self.set.patches[2 * k + 1]
    }
}

/// Builds pairs from pristine patches; `manipulated` supplies the
/// manipulated version of each selected patch.
pub fn build_pairs(
    patches: &[DevicePatch],
    cap: Option<usize>,
    seed: u64,
    mut manipulated: impl FnMut(&DevicePatch) -> Result<ImagePatch>,
) -> Result<PairedSet> {
    let mut out = PairedSet::default();
    for k in select_capped(patches.len(), cap, seed) {
        let p = &patches[k];
        let m = manipulated(p)?;
        out.set.push(p.patch.clone(), 0, p.device_id);
        out.set.push(m, 1, p.device_id);
        out.ids.push(patch_id(p));
    }
    Ok(out)
}

/// Pairs with the manipulation applied in memory.
pub fn build_task_set(patches: &[DevicePatch], spec: &ManipulationSpec, cap: Option<usize>, seed: u64) -> Result<PairedSet> {
    build_pairs(patches, cap, seed, |p| apply(&p.patch, spec))
}

/// Confusion counts and rates (percent) of one detector on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub detector: String,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
    pub fpr: f64,
    pub tpr: f64,
    pub acc: f64,
}

impl MetricsRow {
    pub fn from_counts(task: &str, detector: &str, tn: usize, fp: usize, fn_: usize, tp: usize) -> Result<Self> {
        let (neg, pos) = (tn + fp, tp + fn_);
        if neg == 0 || pos == 0 {
            return Err(Error::invalid("evaluation needs both pristine and manipulated patches"));
        }
        Ok(Self {
            task: task.into(),
            detector: detector.into(),
            tn,
            fp,
            fn_,
            tp,
            fpr: 100.0 * fp as f64 / neg as f64,
            tpr: 100.0 * tp as f64 / pos as f64,
            acc: 100.0 * (tp + tn) as f64 / (neg + pos) as f64,
        })
    }
}

/// Scores every patch of `test` and tallies the confusion matrix.
pub fn evaluate(model: &DetectorModel, task: &str, test: &TrainSet) -> Result<MetricsRow> {
    let (mut tn, mut fp, mut fn_, mut tp) = (0, 0, 0, 0);
    for (x, &label) in test.patches.iter().zip(&test.labels) {
        match (label, model.predict(x)?) {
            (0, 0) => tn += 1,
            (0, _) => fp += 1,
            (_, 0) => fn_ += 1,
            _ => tp += 1,
        }
    }
    MetricsRow::from_counts(task, model.kind.as_str(), tn, fp, fn_, tp)
}

/// Detection rate of one evaluator on images attacked against a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub attack: String,
    pub target: String,
    pub evaluator: String,
    pub task: String,
    pub detected: usize,
    pub total: usize,
    pub tpr_under_attack: f64,
}

impl TransferCell {
    pub fn from_counts(attack: &str, target: &str, evaluator: &str, task: &str, detected: usize, total: usize) -> Result<Self> {
        if total == 0 || detected > total {
            return Err(Error::invalid("transfer cell needs 0 <= detected <= total and total > 0"));
        }
        Ok(Self {
            attack: attack.into(),
            target: target.into(),
            evaluator: evaluator.into(),
            task: task.into(),
            detected,
            total,
            tpr_under_attack: 100.0 * detected as f64 / total as f64,
        })
    }
}

/// Adversarial images produced once for a (method, target, task) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub attack: AttackMethod,
    pub target: DetectorKind,
    pub task: String,
    pub records: Vec<AttackLogRecord>,
    pub patches: Vec<ImagePatch>,
}

/// Hash recorded for adversarial images: fingerprint of the PGM bytes.
pub fn patch_sha(p: &ImagePatch) -> String {
    fingerprint(&encode_pgm(p))
}

/// Scores the cached adversarial images with every evaluator. Each image is
/// checked against its recorded hash first.
pub fn transfer_matrix(batch: &AdversarialBatch, evaluators: &[&DetectorModel]) -> Result<Vec<TransferCell>> {
    if batch.records.len() != batch.patches.len() || batch.patches.is_empty() {
        return Err(Error::invalid("adversarial batch is empty or inconsistent"));
    }
    for (r, p) in batch.records.iter().zip(&batch.patches) {
        let sha = patch_sha(p);
        if sha != r.sha {
            return Err(Error::invalid(format!("adversarial image {} hash {sha} does not match log {}", r.id, r.sha)));
        }
    }
    evaluators
        .iter()
        .map(|m| {
            let mut detected = 0;
            for p in &batch.patches {
                detected += usize::from(m.predict(p)? == 1);
            }
            TransferCell::from_counts(
                batch.attack.as_str(),
                batch.target.as_str(),
                m.kind.as_str(),
                &batch.task,
                detected,
                batch.patches.len(),
            )
        })
        .collect()
}

/// Output directory layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `dataset/pristine` or `dataset/<task>`.
    pub fn images_dir(&self, task: Option<&str>) -> PathBuf {
        self.root.join("dataset").join(task.unwrap_or("pristine"))
    }

    pub fn split_file(&self) -> PathBuf {
        self.root.join("dataset").join("split.json")
    }

    pub fn features_file(&self, task: &str) -> PathBuf {
        self.root.join("features").join(format!("{task}.csv"))
    }

    pub fn model_file(&self, task: &str, kind: DetectorKind) -> PathBuf {
        self.root.join("models").join(format!("{task}__{kind}.cfxm"))
    }

    pub fn attack_dir(&self, method: AttackMethod, target: DetectorKind, task: &str) -> PathBuf {
        self.root.join("attacks").join(method.as_str()).join(format!("{target}__{task}"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::DeviceSpec;

    fn tiny_patches() -> Vec<DevicePatch> {
        let spec = DatasetSpec {
            devices: DeviceSpec::default_devices(),
            images_per_device: 2,
            patch_size: 16,
            patches_per_image: 4,
            patch_stride: 16,
            seed: 3,
            image_width: None,
            image_height: None,
        };
        crate::imaging::generate_dataset(&spec).unwrap()
    }

    #[test]
    fn split_six_of_nine() {
        let ids: Vec<u32> = (0..9).collect();
        let s = split_devices(&ids, 6, 42).unwrap();
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.test.len(), 3);
        s.check_disjoint().unwrap();
        assert_eq!(s, split_devices(&ids, 6, 42).unwrap());
        assert!(matches!(split_devices(&ids, 9, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_by_device_partitions() {
        let patches = tiny_patches();
        let (split, train, test) = split_by_device(&patches, 6, 5).unwrap();
        assert_eq!(train.len() + test.len(), patches.len());
        assert!(train.iter().all(|p| split.train.contains(&p.device_id)));
        assert!(test.iter().all(|p| split.test.contains(&p.device_id)));
        let ids: BTreeSet<String> = train.iter().chain(&test).map(patch_id).collect();
        assert_eq!(ids.len(), patches.len());
    }

    #[test]
    fn task_set_pairs_and_cap() {
        let patches = tiny_patches();
        let spec = ManipulationSpec::Median { kernel: 3 };
        let s = build_task_set(&patches, &spec, Some(10), 1).unwrap();
        assert_eq!(s.pairs(), 10);
        assert_eq!(s.set.len(), 20);
        for k in 0..s.pairs() {
            assert_eq!(s.set.labels[2 * k], 0);
            assert_eq!(s.set.labels[2 * k + 1], 1);
            assert_eq!(&apply(s.pristine(k), &spec).unwrap(), s.manipulated(k));
        }
        assert_eq!(s, build_task_set(&patches, &spec, Some(10), 1).unwrap());
        assert_eq!(build_task_set(&patches, &spec, None, 1).unwrap().pairs(), patches.len());
    }

    #[test]
    fn metrics_examples() {
        let r = MetricsRow::from_counts("t", "d", 98, 2, 2, 98).unwrap();
        assert_eq!((format!("{:.2}", r.fpr), format!("{:.2}", r.tpr), format!("{:.2}", r.acc)), ("2.00".into(), "98.00".into(), "98.00".into()));
        let perfect = MetricsRow::from_counts("t", "d", 50, 0, 0, 50).unwrap();
        assert_eq!((perfect.fpr, perfect.tpr, perfect.acc), (0.0, 100.0, 100.0));
        let constant = MetricsRow::from_counts("t", "d", 50, 0, 50, 0).unwrap();
        assert_eq!((constant.fpr, constant.tpr, constant.acc), (0.0, 0.0, 50.0));
        assert!(MetricsRow::from_counts("t", "d", 0, 0, 3, 4).is_err());
    }

    #[test]
    fn config_defaults_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn config_errors_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_toml("seed = \"x\""), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[split]\ntrain_devices = 9"), Err(Error::Config(_))));
        let icm_on_cnn = "[[attacks]]\nmethod = \"icm\"\ntarget = \"bayar_net\"\n";
        assert!(matches!(ExperimentConfig::from_toml(icm_on_cnn), Err(Error::Config(_))));
        let partial = "seed = 9\n[dataset]\nimages_per_device = 3\n";
        let cfg = ExperimentConfig::from_toml(partial).unwrap();
        assert_eq!(cfg.dataset.images_per_device, 3);
        assert_eq!(cfg.dataset.patch_size, 64);
    }
}
