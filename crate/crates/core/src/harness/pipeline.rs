//! Experiment orchestration, in memory and as on-disk stages.
//!
//! Disk layout under the output root:
//!
//! ```text
//! dataset/manifest.json                      dataset fingerprint and device split
//! dataset/pristine/devDD/imIIII_pPPP.pgm     pristine patches
//! dataset/<task>/devDD/imIIII_pPPP.pgm       manipulated patches
//! features/<task>.csv                        SPAM features of every selected pair
//! models/<task>__<detector>.cfxm             trained detectors
//! attacks/<method>/<target>__<task>/         adversarial PGMs and log.jsonl
//! results/metrics.json, results/transfer.json
//! reports/metrics.csv, transfer.csv, report.md
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    build_pairs, emit_report, evaluate, patch_id, patch_sha, select_capped, split_by_device, transfer_matrix,
    AdversarialBatch, AttackMethod, CampaignConfig, DeviceSplit, ExperimentConfig, Layout, MetricsRow, PairedSet,
    ReportFiles, ReportMeta, TransferCell,
};
use crate::attacks::{
    fgsm, icm_attack, pgd, read_attack_log, restore_attack, train_restorer, write_attack_log, AttackLogRecord,
    IcmMode, RestorerHyper,
};
use crate::detectors::{
    cozznet_from_spam, finetune_cozznet, train_bayar, train_spam_linear, CozzMode, DetectorKind, DetectorModel,
    LinearHyper, NetHyper,
};
use crate::error::{Error, Result};
use crate::imaging::{generate_dataset, read_pgm, write_pgm, DevicePatch, ImagePatch};
use crate::manipulations::{apply, ManipulationSpec};
use crate::rng::{derive_seed, fingerprint};
use crate::spamfeat::{extract_spam_with, write_feature_csv, SymmetryTable};

/// Train and test pairs of one manipulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: ManipulationSpec,
    pub id: String,
    pub train: PairedSet,
    pub test: PairedSet,
}

/// A dataset split into per-task pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub split: DeviceSplit,
    pub tasks: Vec<TaskData>,
}

impl Experiment {
    pub fn task(&self, id: &str) -> Result<&TaskData> {
        self.tasks.iter().find(|t| t.id == id).ok_or_else(|| Error::invalid(format!("unknown task '{id}'")))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResults {
    pub rows: Vec<MetricsRow>,
    pub cells: Vec<TransferCell>,
    pub batches: Vec<AdversarialBatch>,
}

fn assemble(
    cfg: &ExperimentConfig,
    split: DeviceSplit,
    train: &[DevicePatch],
    test: &[DevicePatch],
    mut manipulated: impl FnMut(&ManipulationSpec, &DevicePatch) -> Result<ImagePatch>,
) -> Result<Experiment> {
    split.check_disjoint()?;
    let mut tasks = Vec::with_capacity(cfg.manipulations.len());
    for spec in &cfg.manipulations {
        let id = spec.id();
        let tr = build_pairs(train, cfg.split.max_train_pairs, cfg.cell_seed(&format!("pairs/{id}/train")), |p| {
            manipulated(spec, p)
        })?;
        let te = build_pairs(test, cfg.split.max_test_pairs, cfg.cell_seed(&format!("pairs/{id}/test")), |p| {
            manipulated(spec, p)
        })?;
        if tr.set.devices.iter().any(|d| !split.train.contains(d)) || te.set.devices.iter().any(|d| !split.test.contains(d)) {
            return Err(Error::invalid(format!("device leakage in task {id}")));
        }
        if tr.pairs() < 2 || te.pairs() < 1 {
            return Err(Error::invalid(format!("task {id} has too few patches on one side of the split")));
        }
        tasks.push(TaskData { spec: *spec, id, train: tr, test: te });
    }
    Ok(Experiment { split, tasks })
}

/// Generates the dataset, splits it by device and builds every task's pairs.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let patches = generate_dataset(&cfg.dataset_spec())?;
    let (split, train, test) = split_by_device(&patches, cfg.split.train_devices, cfg.cell_seed("split"))?;
    assemble(cfg, split, &train, &test, |spec, p| apply(&p.patch, spec))
}

/// Trains the configured detectors for one task, in configuration order.
/// The feature networks are converted from the linear SPAM detector.
pub fn train_detectors(cfg: &ExperimentConfig, task: &TaskData) -> Result<Vec<DetectorModel>> {
    let set = &task.train.set;
    let seed = |kind: DetectorKind| cfg.cell_seed(&format!("train/{}/{kind}", task.id));
    let spam = if cfg.detectors.iter().any(|&k| k != DetectorKind::BayarNet) {
        let hyper = LinearHyper { seed: seed(DetectorKind::SpamLinear), ..cfg.linear.clone() };
        Some(train_spam_linear(set, &cfg.spam, &hyper)?)
    } else {
        None
    };
    let spam_ref = || spam.as_ref().expect("trained above");
    cfg.detectors
        .iter()
        .map(|&kind| {
            let model = match kind {
                DetectorKind::SpamLinear => spam_ref().clone(),
                DetectorKind::CozzNetHard => cozznet_from_spam(spam_ref(), CozzMode::Hard, cfg.soft.temperature)?,
                DetectorKind::CozzNetSoft => {
                    let m = cozznet_from_spam(spam_ref(), CozzMode::Soft, cfg.soft.temperature)?;
                    if cfg.soft.finetune {
                        finetune_cozznet(&m, set, &NetHyper { seed: seed(kind), ..cfg.soft.train.clone() })?
                    } else {
                        m
                    }
                }
                DetectorKind::BayarNet => {
                    train_bayar(set, &cfg.bayar, &NetHyper { seed: seed(kind), ..cfg.bayar_train.clone() })?
                }
            };
            log::info!("trained {kind} on {}", task.id);
            Ok(model)
        })
        .collect()
}

fn find_model(models: &[DetectorModel], kind: DetectorKind) -> Result<&DetectorModel> {
    models.iter().find(|m| m.kind == kind).ok_or_else(|| Error::invalid(format!("no trained {kind} detector")))
}

/// Attacks up to `max_patches` manipulated test patches of `task`.
pub fn run_campaign(
    cfg: &ExperimentConfig,
    campaign: &CampaignConfig,
    task: &TaskData,
    models: &[DetectorModel],
) -> Result<AdversarialBatch> {
    let target = find_model(models, campaign.target)?;
    let seed = cfg.cell_seed(&format!("attack/{}/{}/{}", campaign.method.as_str(), campaign.target, task.id));
    let restorer = if campaign.method == AttackMethod::Gan {
        let picks = select_capped(task.train.pairs(), Some(campaign.restorer_pairs), derive_seed(seed, "restorer-pairs"));
        let pairs: Vec<(ImagePatch, ImagePatch)> =
            picks.iter().map(|&k| (task.train.manipulated(k).clone(), task.train.pristine(k).clone())).collect();
        let hyper = RestorerHyper { seed: derive_seed(seed, "restorer"), ..campaign.restorer.clone() };
        let (r, log) = train_restorer(target, &pairs, &hyper)?;
        log::info!("restorer for {} on {}: generator loss {:?}", campaign.target, task.id, log.gen_loss);
        Some(r)
    } else {
        None
    };
    let table = SymmetryTable::build(cfg.spam.t, cfg.spam.cooc_order);
    let mut batch = AdversarialBatch {
        attack: campaign.method,
        target: campaign.target,
        task: task.id.clone(),
        records: Vec::new(),
        patches: Vec::new(),
    };
    for k in select_capped(task.test.pairs(), Some(campaign.max_patches), derive_seed(seed, "patches")) {
        let x0 = task.test.manipulated(k);
        let res = match campaign.method {
            AttackMethod::Fgsm => fgsm(target, x0, campaign.params.epsilon)?,
            AttackMethod::Pgd => pgd(target, x0, &campaign.params)?,
            AttackMethod::Icm => {
                let params = crate::attacks::AttackConfig {
                    seed: derive_seed(seed, &format!("icm/{}", task.test.ids[k])),
                    ..campaign.params.clone()
                };
                let spam_cfg = target.spam_config().expect("icm target is spam_linear");
                let f_target = match params.icm_mode {
                    IcmMode::RestorePristine => {
                        Some(extract_spam_with(task.test.pristine(k), spam_cfg, &table)?)
                    }
                    IcmMode::CrossBoundary => None,
                };
                icm_attack(target, x0, f_target.as_ref(), &params)?
            }
            AttackMethod::Gan => restore_attack(target, restorer.as_ref().expect("trained above"), x0)?,
        };
        batch.records.push(AttackLogRecord {
            id: task.test.ids[k].clone(),
            task: task.id.clone(),
            target: campaign.target.as_str().into(),
            attack: campaign.method.as_str().into(),
            success: res.success,
            psnr_db: res.psnr_db,
            sweeps_or_steps: res.sweeps_or_steps,
            sha: patch_sha(&res.adversarial),
        });
        batch.patches.push(res.adversarial);
    }
    Ok(batch)
}

fn campaign_tasks(cfg: &ExperimentConfig, c: &CampaignConfig) -> Vec<String> {
    if c.tasks.is_empty() {
        cfg.manipulations.iter().map(ManipulationSpec::id).collect()
    } else {
        c.tasks.clone()
    }
}

fn evaluator_kinds(cfg: &ExperimentConfig, c: &CampaignConfig) -> Vec<DetectorKind> {
    if c.evaluators.is_empty() {
        cfg.detectors.clone()
    } else {
        c.evaluators.clone()
    }
}

/// Runs every stage in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    let exp = prepare(cfg)?;
    let mut out = ExperimentResults::default();
    let mut models = BTreeMap::new();
    for task in &exp.tasks {
        let trained = train_detectors(cfg, task)?;
        for m in &trained {
            out.rows.push(evaluate(m, &task.id, &task.test.set)?);
        }
        models.insert(task.id.clone(), trained);
    }
    for c in &cfg.attacks {
        for tid in campaign_tasks(cfg, c) {
            let task = exp.task(&tid)?;
            let ms = &models[&tid];
            let batch = run_campaign(cfg, c, task, ms)?;
            let evals = evaluator_kinds(cfg, c).into_iter().map(|k| find_model(ms, k)).collect::<Result<Vec<_>>>()?;
            out.cells.extend(transfer_matrix(&batch, &evals)?);
            out.batches.push(batch);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Disk stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dataset: String,
    split: DeviceSplit,
}

fn dataset_fingerprint(cfg: &ExperimentConfig) -> String {
    fingerprint(&serde_json::to_vec(&cfg.dataset_spec()).expect("spec serializes"))
}

fn create_parent(path: &Path) -> Result<()> {
    let dir = path.parent().expect("path has a parent");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn patch_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.pgm"))
}

/// Generates the pristine patches and fixes the device split.
pub fn stage_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<usize> {
    cfg.validate()?;
    let patches = generate_dataset(&cfg.dataset_spec())?;
    let (split, _, _) = split_by_device(&patches, cfg.split.train_devices, cfg.cell_seed("split"))?;
    let dir = layout.images_dir(None);
    for p in &patches {
        let path = patch_path(&dir, &patch_id(p));
        create_parent(&path)?;
        write_pgm(&p.patch, &path)?;
    }
    write_json(&layout.split_file().with_file_name("manifest.json"), &Manifest { dataset: dataset_fingerprint(cfg), split })?;
    Ok(patches.len())
}

fn parse_patch_name(dev: &str, file: &str) -> Option<(u32, usize, usize)> {
    let d = dev.strip_prefix("dev")?.parse().ok()?;
    let stem = file.strip_suffix(".pgm")?;
    let (im, p) = stem.split_once('_')?;
    Some((d, im.strip_prefix("im")?.parse().ok()?, p.strip_prefix('p')?.parse().ok()?))
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        out.push((e.file_name().to_string_lossy().into_owned(), e.path()));
    }
    out.sort();
    Ok(out)
}

fn load_manifest(cfg: &ExperimentConfig, layout: &Layout) -> Result<Manifest> {
    let path = layout.split_file().with_file_name("manifest.json");
    let m: Manifest = serde_json::from_str(&read_text(&path)?)?;
    if m.dataset != dataset_fingerprint(cfg) {
        return Err(Error::invalid(format!("{} was built from a different dataset configuration", path.display())));
    }
    Ok(m)
}

fn load_pristine(layout: &Layout) -> Result<Vec<DevicePatch>> {
    let root = layout.images_dir(None);
    let mut out = Vec::new();
    for (dev, dpath) in sorted_entries(&root)? {
        for (file, fpath) in sorted_entries(&dpath)? {
            let (device_id, image_index, patch_index) = parse_patch_name(&dev, &file)
                .ok_or_else(|| Error::invalid(format!("unexpected file {}", fpath.display())))?;
            out.push(DevicePatch { device_id, image_index, patch_index, patch: read_pgm(&fpath)? });
        }
    }
    out.sort_by_key(|p| (p.device_id, p.image_index, p.patch_index));
    Ok(out)
}

/// Writes the manipulated version of every pristine patch, per task.
pub fn stage_manipulate(cfg: &ExperimentConfig, layout: &Layout) -> Result<usize> {
    cfg.validate()?;
    load_manifest(cfg, layout)?;
    let patches = load_pristine(layout)?;
    let mut n = 0;
    for spec in &cfg.manipulations {
        let dir = layout.images_dir(Some(&spec.id()));
        for p in &patches {
            let path = patch_path(&dir, &patch_id(p));
            create_parent(&path)?;
            write_pgm(&apply(&p.patch, spec)?, &path)?;
            n += 1;
        }
    }
    Ok(n)
}

/// Rebuilds the experiment from the dataset and manipulation stages.
fn load_experiment(cfg: &ExperimentConfig, layout: &Layout) -> Result<Experiment> {
    cfg.validate()?;
    let manifest = load_manifest(cfg, layout)?;
    let patches = load_pristine(layout)?;
    let (train, test): (Vec<DevicePatch>, Vec<DevicePatch>) =
        patches.into_iter().partition(|p| manifest.split.train.contains(&p.device_id));
    assemble(cfg, manifest.split, &train, &test, |spec, p| {
        read_pgm(patch_path(&layout.images_dir(Some(&spec.id())), &patch_id(p)))
    })
}

/// Exports the SPAM features of every selected pair.
pub fn stage_features(cfg: &ExperimentConfig, layout: &Layout) -> Result<usize> {
    let exp = load_experiment(cfg, layout)?;
    let table = SymmetryTable::build(cfg.spam.t, cfg.spam.cooc_order);
    let mut n = 0;
    for task in &exp.tasks {
        let mut rows = Vec::new();
        for (side, set) in [("train", &task.train), ("test", &task.test)] {
            for (k, id) in set.ids.iter().enumerate() {
                for (label, tag) in [(0u8, "pristine"), (1u8, "manipulated")] {
                    let x = &set.set.patches[2 * k + usize::from(label)];
                    rows.push((format!("{side}/{id}/{tag}"), label, extract_spam_with(x, &cfg.spam, &table)?));
                }
            }
        }
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &cfg.spam, &rows)?;
        write_file(&layout.features_file(&task.id), &buf)?;
        n += rows.len();
    }
    Ok(n)
}

/// Trains and saves every detector of every task.
pub fn stage_train(cfg: &ExperimentConfig, layout: &Layout) -> Result<usize> {
    let exp = load_experiment(cfg, layout)?;
    let mut n = 0;
    for task in &exp.tasks {
        for m in train_detectors(cfg, task)? {
            let path = layout.model_file(&task.id, m.kind);
            create_parent(&path)?;
            m.save(&path)?;
            n += 1;
        }
    }
    Ok(n)
}

fn load_models(cfg: &ExperimentConfig, layout: &Layout, task: &str) -> Result<Vec<DetectorModel>> {
    cfg.detectors.iter().map(|&k| DetectorModel::load(layout.model_file(task, k))).collect()
}

/// Scores the test pairs with the saved detectors.
pub fn stage_evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<MetricsRow>> {
    let exp = load_experiment(cfg, layout)?;
    let mut rows = Vec::new();
    for task in &exp.tasks {
        for m in load_models(cfg, layout, &task.id)? {
            rows.push(evaluate(&m, &task.id, &task.test.set)?);
        }
    }
    write_json(&layout.results_dir().join("metrics.json"), &rows)?;
    Ok(rows)
}

fn file_stem(id: &str) -> String {
    id.replace('/', "_")
}

/// Runs the attack campaigns, stores the adversarial images and scores the
/// stored bytes with every evaluator.
pub fn stage_attack(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<TransferCell>> {
    let exp = load_experiment(cfg, layout)?;
    let mut cells = Vec::new();
    for c in &cfg.attacks {
        for tid in campaign_tasks(cfg, c) {
            let task = exp.task(&tid)?;
            let models = load_models(cfg, layout, &tid)?;
            let batch = run_campaign(cfg, c, task, &models)?;
            let dir = layout.attack_dir(c.method, c.target, &tid);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (r, p) in batch.records.iter().zip(&batch.patches) {
                write_pgm(p, patch_path(&dir, &file_stem(&r.id)))?;
            }
            let mut log = Vec::new();
            write_attack_log(&mut log, &batch.records)?;
            write_file(&dir.join("log.jsonl"), &log)?;

            let records = read_attack_log(&read_text(&dir.join("log.jsonl"))?)?;
            let patches =
                records.iter().map(|r| read_pgm(patch_path(&dir, &file_stem(&r.id)))).collect::<Result<Vec<_>>>()?;
            let stored = AdversarialBatch { attack: c.method, target: c.target, task: tid.clone(), records, patches };
            let evals = evaluator_kinds(cfg, c).into_iter().map(|k| find_model(&models, k)).collect::<Result<Vec<_>>>()?;
            cells.extend(transfer_matrix(&stored, &evals)?);
        }
    }
    write_json(&layout.results_dir().join("transfer.json"), &cells)?;
    Ok(cells)
}

/// Turns the stored results into CSV and Markdown reports.
pub fn stage_report(cfg: &ExperimentConfig, layout: &Layout) -> Result<ReportFiles> {
    let rows: Vec<MetricsRow> = serde_json::from_str(&read_text(&layout.results_dir().join("metrics.json"))?)?;
    let transfer = layout.results_dir().join("transfer.json");
    let cells: Vec<TransferCell> =
        if transfer.exists() { serde_json::from_str(&read_text(&transfer)?)? } else { Vec::new() };
    let meta = ReportMeta { fingerprint: cfg.fingerprint(), seed: cfg.seed };
    emit_report(&rows, &cells, &meta, &layout.reports_dir())
}

/// Every stage in order.
pub fn stage_run(cfg: &ExperimentConfig, layout: &Layout) -> Result<ReportFiles> {
    stage_dataset(cfg, layout)?;
    stage_manipulate(cfg, layout)?;
    stage_features(cfg, layout)?;
    stage_train(cfg, layout)?;
    stage_evaluate(cfg, layout)?;
    if !cfg.attacks.is_empty() {
        stage_attack(cfg, layout)?;
    }
    stage_report(cfg, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_names_parse() {
        assert_eq!(parse_patch_name("dev03", "im0012_p004.pgm"), Some((3, 12, 4)));
        assert_eq!(parse_patch_name("dev03", "notes.txt"), None);
    }
}
