//! Cross-validation, epoch selection, ensembling and one-shot retraining.
//!
//! A run trains `n_folds × replicates` models: for each held-out fold, several
//! replicates that differ only in initialization. Each model is
//! kept at the grid epoch with the best validation AUC (earliest on ties).
//! External cohorts are scored by averaging the probabilities of all models.
//! The comparator retrains one model on all training slides for the epoch that
//! maximizes the validation AUC averaged over every job.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abmil::{predict, AbmilModel, Bag};
use crate::error::{Error, Result};
use crate::feature_store::{sample_bag, write_atomic, FeatureMatrix, LossKind, Manifest, SlideManifestEntry, TaskSpec};
use crate::optim::{train_epochs, AdamConfig};
use crate::rng;
use crate::stats::task_auc;
use crate::synthgen::Cohort;

/// Checkpoint epochs evaluated during cross-validation.
pub const DEFAULT_EPOCH_GRID: [usize; 14] = [1, 3, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 100];
/// Additional epochs for long-training configurations.
pub const EXTENDED_EPOCHS: [usize; 8] = [120, 150, 180, 200, 220, 250, 280, 300];

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub n_folds: usize,
    pub replicates: usize,
    pub epoch_grid: Vec<usize>,
    pub adam: AdamConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            replicates: 5,
            epoch_grid: DEFAULT_EPOCH_GRID.to_vec(),
            adam: AdamConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn with_extended_grid(mut self) -> Self {
        self.epoch_grid.extend(EXTENDED_EPOCHS);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::validation("need at least two folds"));
        }
        if self.replicates == 0 {
            return Err(Error::validation("need at least one replicate"));
        }
        if self.epoch_grid.is_empty()
            || self.epoch_grid[0] == 0
            || self.epoch_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::validation("epoch grid must be strictly increasing positive epochs"));
        }
        Ok(())
    }
}

/// Bags of one cohort, ready for training or inference.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cohort_id: String,
    pub slide_ids: Vec<String>,
    pub case_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub bags: Vec<Bag>,
}

impl Dataset {
    /// Draws one bag of `spec.n_t` tiles per slide; the draw is keyed by slide id and `sample_seed`.
    pub fn from_parts(
        cohort_id: &str,
        entries: &[SlideManifestEntry],
        matrices: &[FeatureMatrix],
        spec: &TaskSpec,
        sample_seed: u64,
    ) -> Result<Self> {
        if entries.len() != matrices.len() {
            return Err(Error::DimensionMismatch {
                expected: entries.len(),
                found: matrices.len(),
            });
        }
        let bags = entries
            .par_iter()
            .zip(matrices)
            .map(|(e, m)| {
                let bag = sample_bag(m, &e.slide_id, spec.n_t, sample_seed)
                    .map_err(|err| Error::validation(format!("slide {}: {err}", e.slide_id)))?;
                Ok(Bag::from_matrix(&bag))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cohort_id: cohort_id.to_string(),
            slide_ids: entries.iter().map(|e| e.slide_id.clone()).collect(),
            case_ids: entries.iter().map(|e| e.case_id.clone()).collect(),
            labels: entries.iter().map(|e| e.label).collect(),
            bags,
        })
    }

    pub fn from_cohort(c: &Cohort, spec: &TaskSpec, sample_seed: u64) -> Result<Self> {
        Self::from_parts(&c.cohort_id, &c.entries, &c.matrices, spec, sample_seed)
    }

    pub fn load(cohort_id: &str, manifest: &Manifest, spec: &TaskSpec, sample_seed: u64) -> Result<Self> {
        let matrices = manifest.read_all()?;
        Self::from_parts(cohort_id, &manifest.entries, &matrices, spec, sample_seed)
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.bags.first().map(Bag::dim)
    }

    fn subset(&self, idx: &[usize]) -> (Vec<Bag>, Vec<usize>) {
        (
            idx.iter().map(|&i| self.bags[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Case-grouped, label-stratified fold assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub n_folds: usize,
    pub fold_of_case: BTreeMap<String, usize>,
}

impl SplitPlan {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.fold_of_case.get(case_id).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,fold\n");
        for (c, f) in &self.fold_of_case {
            out.push_str(&format!("{c},{f}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, n_folds: usize) -> Result<Self> {
        let mut fold_of_case = BTreeMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let (c, f) = line
                .split_once(',')
                .ok_or_else(|| Error::validation(format!("splits.csv row {}: malformed", i + 1)))?;
            let f: usize = f
                .trim()
                .parse()
                .ok()
                .filter(|&f| f < n_folds)
                .ok_or_else(|| Error::validation(format!("splits.csv row {}: bad fold", i + 1)))?;
            fold_of_case.insert(c.to_string(), f);
        }
        Ok(Self {
            n_folds,
            fold_of_case,
        })
    }
}

/// Label of a case: its most frequent slide label, smallest on ties.
fn case_labels(entries: &[SlideManifestEntry]) -> BTreeMap<&str, (usize, usize)> {
    let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for e in entries {
        *counts
            .entry(e.case_id.as_str())
            .or_default()
            .entry(e.label)
            .or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(case, by_label)| {
            let n_slides = by_label.values().sum();
            let label = by_label
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&l, _)| l)
                .unwrap();
            (case, (label, n_slides))
        })
        .collect()
}

/// Assigns whole cases to folds so that every fold's per-class case count is
/// within one of every other's.
///
/// Within each class, cases are shuffled by `seed`, ordered largest-first by
/// slide count, and each goes to the fold with the fewest cases of that class
/// (then fewest slides overall, then lowest index).
pub fn make_splits(entries: &[SlideManifestEntry], n_folds: usize, seed: u64) -> Result<SplitPlan> {
    if n_folds < 2 {
        return Err(Error::validation("need at least two folds"));
    }
    let cases = case_labels(entries);
    let mut by_class: BTreeMap<usize, Vec<(&str, usize)>> = BTreeMap::new();
    for (&case, &(label, n)) in &cases {
        by_class.entry(label).or_default().push((case, n));
    }
    for (label, members) in &by_class {
        if members.len() < n_folds {
            return Err(Error::validation(format!(
                "class {label} has {} cases, fewer than {n_folds} folds",
                members.len()
            )));
        }
    }
    let mut fold_slides = vec![0usize; n_folds];
    let mut fold_of_case = BTreeMap::new();
    for (&label, members) in by_class.iter_mut() {
        members.shuffle(&mut rng::stream(rng::mix(seed, &[0x5917, label as u64]), 0));
        members.sort_by(|a, b| b.1.cmp(&a.1));
        let mut fold_cases = vec![0usize; n_folds];
        for &(case, n) in members.iter() {
            let f = (0..n_folds)
                .min_by_key(|&f| (fold_cases[f], fold_slides[f], f))
                .unwrap();
            fold_cases[f] += 1;
            fold_slides[f] += n;
            fold_of_case.insert(case.to_string(), f);
        }
    }
    Ok(SplitPlan {
        n_folds,
        fold_of_case,
    })
}

/// Index of the earliest maximum.
pub fn earliest_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Seed of job `(fold, replicate)`; independent of scheduling.
pub fn job_seed(master: u64, fold: usize, replicate: usize) -> u64 {
    rng::mix(master, &[fold as u64, replicate as u64])
}

/// Data-order seed of a fold, shared by its replicates so that they differ only in initialization.
pub fn fold_order_seed(master: u64, fold: usize) -> u64 {
    rng::mix(master, &[fold as u64, 0x0D])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRecord {
    pub fold: usize,
    pub replicate: usize,
    pub seed: u64,
    pub selected_epoch: usize,
    /// Validation AUC at each grid epoch.
    pub val_auc_by_epoch: Vec<f64>,
    /// Snapshot at the selected epoch, rounded to checkpoint precision.
    pub model: AbmilModel,
}

impl CvRecord {
    pub fn model_id(&self) -> String {
        format!("fold{}_rep{}", self.fold, self.replicate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRun {
    pub task: TaskSpec,
    pub config: ProtocolConfig,
    pub master_seed: u64,
    pub plan: SplitPlan,
    pub train_slide_ids: Vec<String>,
    /// Ordered by `(fold, replicate)`.
    pub records: Vec<CvRecord>,
}

impl CvRun {
    pub fn model_ids(&self) -> Vec<String> {
        self.records.iter().map(CvRecord::model_id).collect()
    }
}

fn predict_all(model: &AbmilModel, bags: &[Bag]) -> Result<Vec<Vec<f64>>> {
    bags.iter().map(|b| predict(model, b)).collect()
}

pub fn cross_validate(
    data: &Dataset,
    spec: &TaskSpec,
    plan: &SplitPlan,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<CvRun> {
    cfg.validate()?;
    spec.validate()?;
    if plan.n_folds != cfg.n_folds {
        return Err(Error::validation(format!(
            "split plan has {} folds, config expects {}",
            plan.n_folds, cfg.n_folds
        )));
    }
    let d = data.dim().ok_or_else(|| Error::validation("empty training cohort"))?;
    let folds: Vec<usize> = data
        .case_ids
        .iter()
        .map(|c| {
            plan.fold_of(c)
                .ok_or_else(|| Error::validation(format!("case {c} missing from split plan")))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..cfg.n_folds)
        .flat_map(|f| (0..cfg.replicates).map(move |r| (f, r)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(fold, replicate)| {
            let train_idx: Vec<usize> = (0..data.len()).filter(|&i| folds[i] != fold).collect();
            let val_idx: Vec<usize> = (0..data.len()).filter(|&i| folds[i] == fold).collect();
            let (train_bags, train_labels) = data.subset(&train_idx);
            let (val_bags, val_labels) = data.subset(&val_idx);
            let mut distinct = val_labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 {
                return Err(Error::SingleClass(format!(
                    "validation fold {fold} contains a single class"
                )));
            }
            let s = job_seed(seed, fold, replicate);
            let init = AbmilModel::init(d, spec.output_dim(), rng::mix(s, &[1]))?;
            let out = train_epochs(
                init,
                &train_bags,
                &train_labels,
                spec.loss,
                cfg.adam,
                &cfg.epoch_grid,
                fold_order_seed(seed, fold),
            )?;
            let val_auc_by_epoch = out
                .snapshots
                .iter()
                .map(|(_, m)| task_auc(&val_labels, &predict_all(m, &val_bags)?))
                .collect::<Result<Vec<f64>>>()?;
            let best = earliest_argmax(&val_auc_by_epoch);
            let (selected_epoch, mut model) = out.snapshots[best].clone();
            model.round_to_f32();
            Ok(CvRecord {
                fold,
                replicate,
                seed: s,
                selected_epoch,
                val_auc_by_epoch,
                model,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CvRun {
        task: spec.clone(),
        config: cfg.clone(),
        master_seed: seed,
        plan: plan.clone(),
        train_slide_ids: data.slide_ids.clone(),
        records,
    })
}

/// Per-slide scores of one or many models on a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub cohort_id: String,
    pub slide_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// Combined score vector per slide.
    pub scores: Vec<Vec<f64>>,
    pub model_ids: Vec<String>,
    /// `per_model[m][slide]`; empty when only the combined scores are kept.
    pub per_model: Vec<Vec<Vec<f64>>>,
}

fn check_disjoint(run: &CvRun, cohort: &Dataset) -> Result<()> {
    let train: HashSet<&str> = run.train_slide_ids.iter().map(String::as_str).collect();
    let mut leaked: Vec<String> = cohort
        .slide_ids
        .iter()
        .filter(|s| train.contains(s.as_str()))
        .cloned()
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        leaked.truncate(10);
        Err(Error::Leakage(leaked))
    }
}

fn check_dim(d_model: usize, cohort: &Dataset) -> Result<()> {
    match cohort.dim() {
        Some(d) if d != d_model => Err(Error::DimensionMismatch {
            expected: d_model,
            found: d,
        }),
        _ => Ok(()),
    }
}

/// Mean of the models' probabilities, per slide and class.
///
/// Each mean is accumulated in sorted order relative to the smallest value, so it
/// does not depend on checkpoint order and equals the common value when all agree.
pub fn ensemble_predict(run: &CvRun, cohort: &Dataset) -> Result<PredictionSet> {
    let expected = run.config.n_folds * run.config.replicates;
    if run.records.len() != expected {
        return Err(Error::validation(format!(
            "run holds {} checkpoints, expected {expected}",
            run.records.len()
        )));
    }
    check_disjoint(run, cohort)?;
    let d_model = run.records[0].model.layout().d;
    check_dim(d_model, cohort)?;
    let per_model: Vec<Vec<Vec<f64>>> = run
        .records
        .par_iter()
        .map(|r| predict_all(&r.model, &cohort.bags))
        .collect::<Result<_>>()?;
    let c_out = run.task.output_dim();
    let scores = (0..cohort.len())
        .map(|s| {
            (0..c_out)
                .map(|c| {
                    let mut v: Vec<f64> = per_model.iter().map(|m| m[s][c]).collect();
                    v.sort_unstable_by(f64::total_cmp);
                    v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / v.len() as f64
                })
                .collect()
        })
        .collect();
    Ok(PredictionSet {
        cohort_id: cohort.cohort_id.clone(),
        slide_ids: cohort.slide_ids.clone(),
        labels: cohort.labels.clone(),
        scores,
        model_ids: run.model_ids(),
        per_model,
    })
}

/// Grid epoch maximizing the validation AUC averaged over all jobs (earliest on ties).
pub fn mean_curve_epoch(run: &CvRun) -> Result<usize> {
    let grid = &run.config.epoch_grid;
    if run.records.is_empty() || run.records.iter().any(|r| r.val_auc_by_epoch.len() != grid.len()) {
        return Err(Error::validation("run lacks complete validation curves"));
    }
    let mean: Vec<f64> = (0..grid.len())
        .map(|e| {
            run.records.iter().map(|r| r.val_auc_by_epoch[e]).sum::<f64>() / run.records.len() as f64
        })
        .collect();
    Ok(grid[earliest_argmax(&mean)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrained {
    pub epoch: usize,
    pub model: AbmilModel,
}

impl Retrained {
    pub fn predict(&self, run: &CvRun, cohort: &Dataset) -> Result<PredictionSet> {
        check_disjoint(run, cohort)?;
        check_dim(self.model.layout().d, cohort)?;
        let scores = cohort
            .bags
            .par_iter()
            .map(|b| predict(&self.model, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionSet {
            cohort_id: cohort.cohort_id.clone(),
            slide_ids: cohort.slide_ids.clone(),
            labels: cohort.labels.clone(),
            scores,
            model_ids: vec!["retrain".into()],
            per_model: Vec::new(),
        })
    }
}

/// Trains a single model on every training slide for the epoch chosen by [`mean_curve_epoch`].
pub fn one_shot_retrain(run: &CvRun, data: &Dataset, seed: u64) -> Result<Retrained> {
    let epoch = mean_curve_epoch(run)?;
    let d = data.dim().ok_or_else(|| Error::validation("empty training cohort"))?;
    let s = rng::mix(seed, &[0x7E7A]);
    let init = AbmilModel::init(d, run.task.output_dim(), rng::mix(s, &[1]))?;
    let out = train_epochs(
        init,
        &data.bags,
        &data.labels,
        run.task.loss,
        run.config.adam,
        &[epoch],
        rng::mix(s, &[2]),
    )?;
    let (_, mut model) = out.snapshots.into_iter().next().unwrap();
    model.round_to_f32();
    Ok(Retrained { epoch, model })
}

// ---------------------------------------------------------------------------
// Run directory

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct RunTaskJson {
    task_id: String,
    class_count: usize,
    n_t: usize,
    mpp: f64,
    loss: String,
    labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct RunJobJson {
    fold: usize,
    replicate: usize,
    seed: u64,
    selected_epoch: usize,
    checkpoint: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct RetrainJson {
    epoch: usize,
    checkpoint: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct RunJson {
    model_name: String,
    task: RunTaskJson,
    master_seed: u64,
    n_folds: usize,
    replicates: usize,
    epoch_grid: Vec<usize>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    batch_size: usize,
    #[serde(default)]
    extra: BTreeMap<String, String>,
    train_slide_ids: Vec<String>,
    jobs: Vec<RunJobJson>,
    retrain: Option<RetrainJson>,
}

/// Everything persisted for one trained run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub model_name: String,
    pub run: CvRun,
    pub retrained: Option<Retrained>,
    /// Free-form provenance echoed into `run.json` (input paths, sampling seed, ...).
    pub extra: BTreeMap<String, String>,
}

pub fn checkpoint_name(fold: usize, replicate: usize) -> String {
    format!("fold{fold}_rep{replicate}.abm1")
}

const RETRAIN_CHECKPOINT: &str = "retrain.abm1";

impl RunArtifacts {
    /// Writes `run.json`, `splits.csv`, `val_curves.csv` and one checkpoint per job.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let run = &self.run;
        let json = RunJson {
            model_name: self.model_name.clone(),
            task: RunTaskJson {
                task_id: run.task.task_id.clone(),
                class_count: run.task.class_count,
                n_t: run.task.n_t,
                mpp: run.task.mpp,
                loss: run.task.loss.to_string(),
                labels: run.task.label_names.clone(),
            },
            master_seed: run.master_seed,
            n_folds: run.config.n_folds,
            replicates: run.config.replicates,
            epoch_grid: run.config.epoch_grid.clone(),
            lr: run.config.adam.lr,
            beta1: run.config.adam.beta1,
            beta2: run.config.adam.beta2,
            eps: run.config.adam.eps,
            batch_size: run.config.adam.batch_size,
            extra: self.extra.clone(),
            train_slide_ids: run.train_slide_ids.clone(),
            jobs: run
                .records
                .iter()
                .map(|r| RunJobJson {
                    fold: r.fold,
                    replicate: r.replicate,
                    seed: r.seed,
                    selected_epoch: r.selected_epoch,
                    checkpoint: checkpoint_name(r.fold, r.replicate),
                })
                .collect(),
            retrain: self.retrained.as_ref().map(|r| RetrainJson {
                epoch: r.epoch,
                checkpoint: RETRAIN_CHECKPOINT.into(),
            }),
        };
        let mut text = serde_json::to_string_pretty(&json).map_err(|e| Error::validation(e.to_string()))?;
        text.push('\n');
        write_atomic(&dir.join("run.json"), text.as_bytes())?;
        write_atomic(&dir.join("splits.csv"), run.plan.to_csv().as_bytes())?;

        let mut curves = String::from("fold,replicate,epoch,val_auc\n");
        for r in &run.records {
            for (e, auc) in run.config.epoch_grid.iter().zip(&r.val_auc_by_epoch) {
                curves.push_str(&format!("{},{},{e},{auc}\n", r.fold, r.replicate));
            }
            r.model.save(&dir.join(checkpoint_name(r.fold, r.replicate)))?;
        }
        write_atomic(&dir.join("val_curves.csv"), curves.as_bytes())?;
        if let Some(rt) = &self.retrained {
            rt.model.save(&dir.join(RETRAIN_CHECKPOINT))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let json: RunJson = serde_json::from_str(&read("run.json")?)
            .map_err(|e| Error::validation(format!("{}: {e}", dir.join("run.json").display())))?;
        let task = TaskSpec {
            task_id: json.task.task_id,
            class_count: json.task.class_count,
            n_t: json.task.n_t,
            mpp: json.task.mpp,
            loss: json.task.loss.parse::<LossKind>()?,
            label_names: json.task.labels,
        };
        task.validate()?;
        let config = ProtocolConfig {
            n_folds: json.n_folds,
            replicates: json.replicates,
            epoch_grid: json.epoch_grid,
            adam: AdamConfig {
                lr: json.lr,
                beta1: json.beta1,
                beta2: json.beta2,
                eps: json.eps,
                batch_size: json.batch_size,
            },
        };
        config.validate()?;
        let plan = SplitPlan::from_csv(&read("splits.csv")?, config.n_folds)?;

        let mut curves: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for (i, line) in read("val_curves.csv")?.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let parsed = (f.len() == 4)
                .then(|| {
                    Some((
                        f[0].parse().ok()?,
                        f[1].parse().ok()?,
                        f[2].parse().ok()?,
                        f[3].parse().ok()?,
                    ))
                })
                .flatten()
                .ok_or_else(|| Error::validation(format!("val_curves.csv row {}: malformed", i + 1)))?;
            let (fold, rep, epoch, auc): (usize, usize, usize, f64) = parsed;
            curves.entry((fold, rep)).or_default().push((epoch, auc));
        }

        let mut records = Vec::with_capacity(json.jobs.len());
        for job in &json.jobs {
            let path = dir.join(&job.checkpoint);
            if !path.exists() {
                return Err(Error::validation(format!("missing checkpoint {}", path.display())));
            }
            let curve = curves.remove(&(job.fold, job.replicate)).unwrap_or_default();
            let epochs: Vec<usize> = curve.iter().map(|c| c.0).collect();
            if epochs != config.epoch_grid {
                return Err(Error::validation(format!(
                    "validation curve of fold {} replicate {} does not match the epoch grid",
                    job.fold, job.replicate
                )));
            }
            records.push(CvRecord {
                fold: job.fold,
                replicate: job.replicate,
                seed: job.seed,
                selected_epoch: job.selected_epoch,
                val_auc_by_epoch: curve.iter().map(|c| c.1).collect(),
                model: AbmilModel::load(&path)?,
            });
        }
        let retrained = match &json.retrain {
            Some(r) => Some(Retrained {
                epoch: r.epoch,
                model: AbmilModel::load(&dir.join(&r.checkpoint))?,
            }),
            None => None,
        };
        Ok(Self {
            model_name: json.model_name,
            run: CvRun {
                task,
                config,
                master_seed: json.master_seed,
                plan,
                train_slide_ids: json.train_slide_ids,
                records,
            },
            retrained,
            extra: json.extra,
        })
    }
}

/// `preds_{cohort}.csv`: slide id, label, combined score column(s), then one
/// column per model and class when per-model scores are present.
pub fn write_predictions(path: &Path, p: &PredictionSet) -> Result<()> {
    let c_out = p.scores.first().map_or(1, Vec::len);
    let score_cols = |prefix: &str| -> Vec<String> {
        if c_out == 1 {
            vec![prefix.to_string()]
        } else {
            (0..c_out).map(|c| format!("{prefix}_c{c}")).collect()
        }
    };
    let mut header = vec!["slide_id".to_string(), "label".to_string()];
    header.extend(score_cols("score"));
    for id in &p.model_ids {
        if !p.per_model.is_empty() {
            header.extend(score_cols(id));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for (s, id) in p.slide_ids.iter().enumerate() {
        let mut row = vec![id.clone(), p.labels[s].to_string()];
        row.extend(p.scores[s].iter().map(f64::to_string));
        for m in &p.per_model {
            row.extend(m[s].iter().map(f64::to_string));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_predictions(path: &Path, cohort_id: &str) -> Result<PredictionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |row: usize, m: &str| Error::validation(format!("{}: row {row}: {m}", path.display()));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty file"))?.split(',').collect();
    if header.len() < 3 || header[0] != "slide_id" || header[1] != "label" {
        return Err(bad(1, "expected slide_id,label,score..."));
    }
    let c_out = if header[2] == "score" {
        1
    } else {
        header[2..].iter().take_while(|h| h.starts_with("score_c")).count()
    };
    let rest = &header[2 + c_out..];
    if rest.len() % c_out != 0 {
        return Err(bad(1, "per-model columns do not match score width"));
    }
    let model_ids: Vec<String> = rest
        .chunks(c_out)
        .map(|c| {
            let h = c[0];
            if c_out == 1 {
                h.to_string()
            } else {
                h.trim_end_matches("_c0").to_string()
            }
        })
        .collect();
    let n_models = model_ids.len();
    let mut p = PredictionSet {
        cohort_id: cohort_id.to_string(),
        slide_ids: Vec::new(),
        labels: Vec::new(),
        scores: Vec::new(),
        model_ids: if n_models == 0 { vec![] } else { model_ids },
        per_model: vec![Vec::new(); n_models],
    };
    let mut seen = BTreeSet::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(bad(row, "wrong number of fields"));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(bad(row, "duplicate slide"));
        }
        p.slide_ids.push(f[0].to_string());
        p.labels.push(f[1].parse().map_err(|_| bad(row, "bad label"))?);
        let nums = f[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| bad(row, "bad score")))
            .collect::<Result<Vec<f64>>>()?;
        p.scores.push(nums[..c_out].to_vec());
        for (m, chunk) in nums[c_out..].chunks(c_out).enumerate() {
            p.per_model[m].push(chunk.to_vec());
        }
    }
    Ok(p)
}

pub fn predictions_path(dir: &Path, cohort_id: &str, retrain: bool) -> PathBuf {
    if retrain {
        dir.join(format!("preds_{cohort_id}_retrain.csv"))
    } else {
        dir.join(format!("preds_{cohort_id}.csv"))
    }
}
