//! Model comparison tables: bootstrap AUCs, pairwise tests, and the
//! ensembling / average / retraining estimators, as CSV and markdown.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature_store::write_atomic;
use crate::kv::{self, KvFile};
use crate::protocol::PredictionSet;
use crate::rng;
use crate::stats::{bootstrap_task_auc, pairwise_matrix, task_auc, AucSummary, Sided, TaskScores};

/// External predictions of one model on one task.
#[derive(Debug, Clone)]
pub struct ModelPredictions {
    pub model: String,
    pub task: String,
    /// Ensemble scores, with per-model columns when available.
    pub ensemble: PredictionSet,
    pub retrain: Option<PredictionSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareMeta {
    pub seed: u64,
    pub n_boot: usize,
    pub n_perm: usize,
    pub sided: Sided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucRow {
    pub model: String,
    pub task: String,
    pub summary: AucSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PValueRow {
    pub model_a: String,
    pub model_b: String,
    pub task: String,
    pub p_raw: f64,
    pub p_holm: f64,
    /// Fisher combination over all tasks of the pair; repeated on each row.
    pub p_combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblingRow {
    pub model: String,
    pub task: String,
    pub ensemble: f64,
    pub average_mean: f64,
    pub average_std: f64,
    pub n_models: usize,
    pub retrain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub meta: CompareMeta,
    pub aucs: Vec<AucRow>,
    pub pvalues: Vec<PValueRow>,
    pub ensembling: Vec<EnsemblingRow>,
}

fn sided_str(s: Sided) -> &'static str {
    match s {
        Sided::One => "one",
        Sided::Two => "two",
    }
}

pub fn parse_sided(s: &str) -> Result<Sided> {
    match s {
        "one" => Ok(Sided::One),
        "two" => Ok(Sided::Two),
        other => Err(Error::validation(format!("unknown test sidedness `{other}` (one|two)"))),
    }
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn compare(inputs: &[ModelPredictions], meta: CompareMeta) -> Result<Comparison> {
    if inputs.is_empty() {
        return Err(Error::validation("nothing to compare"));
    }
    let mut by_key: BTreeMap<(&str, &str), &ModelPredictions> = BTreeMap::new();
    for p in inputs {
        if by_key.insert((&p.task, &p.model), p).is_some() {
            return Err(Error::validation(format!(
                "model {} has two prediction sets for task {}",
                p.model, p.task
            )));
        }
    }

    let mut aucs = Vec::new();
    let mut ensembling = Vec::new();
    for (&(task, model), p) in &by_key {
        let e = &p.ensemble;
        let seed = rng::mix(meta.seed, &[rng::hash_str(task)]);
        let summary = bootstrap_task_auc(&e.labels, &e.scores, meta.n_boot, seed)
            .map_err(|err| Error::validation(format!("{model} on {task}: {err}")))?;
        aucs.push(AucRow {
            model: model.to_string(),
            task: task.to_string(),
            summary,
        });
        let ensemble = task_auc(&e.labels, &e.scores)?;
        let individual = e
            .per_model
            .iter()
            .map(|s| task_auc(&e.labels, s))
            .collect::<Result<Vec<f64>>>()?;
        let (average_mean, average_std) = if individual.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&individual)
        };
        let retrain = match &p.retrain {
            Some(r) => Some(task_auc(&r.labels, &r.scores)?),
            None => None,
        };
        ensembling.push(EnsemblingRow {
            model: model.to_string(),
            task: task.to_string(),
            ensemble,
            average_mean,
            average_std,
            n_models: individual.len(),
            retrain,
        });
    }

    let models: Vec<String> = inputs
        .iter()
        .map(|p| p.model.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let all_tasks: BTreeSet<&str> = inputs.iter().map(|p| p.task.as_str()).collect();
    let mut shared = Vec::new();
    for &task in &all_tasks {
        let sets: Option<Vec<&PredictionSet>> = models
            .iter()
            .map(|m| by_key.get(&(task, m.as_str())).map(|p| &p.ensemble))
            .collect();
        let Some(sets) = sets else { continue };
        let first = sets[0];
        for s in &sets[1..] {
            if s.slide_ids != first.slide_ids || s.labels != first.labels {
                return Err(Error::validation(format!(
                    "task {task}: models were evaluated on different slides"
                )));
            }
        }
        shared.push(TaskScores {
            task_id: task.to_string(),
            labels: first.labels.clone(),
            scores: sets.iter().map(|s| s.scores.clone()).collect(),
        });
    }

    let mut pvalues = Vec::new();
    if models.len() >= 2 && !shared.is_empty() {
        let pm = pairwise_matrix(&models, &shared, meta.n_perm, meta.seed, meta.sided)?;
        for i in 0..models.len() {
            for j in 0..models.len() {
                let (Some(raw), Some(holm), Some(comb)) = (&pm.raw[i][j], &pm.holm[i][j], pm.combined[i][j]) else {
                    continue;
                };
                for (t, task) in pm.tasks.iter().enumerate() {
                    pvalues.push(PValueRow {
                        model_a: models[i].clone(),
                        model_b: models[j].clone(),
                        task: task.clone(),
                        p_raw: raw[t],
                        p_holm: holm[t],
                        p_combined: comb,
                    });
                }
            }
        }
    }
    Ok(Comparison {
        meta,
        aucs,
        pvalues,
        ensembling,
    })
}

// ---------------------------------------------------------------------------
// CSV persistence

pub const AUCS_CSV: &str = "aucs.csv";
pub const PVALUES_CSV: &str = "pvalues.csv";
pub const ENSEMBLING_CSV: &str = "ensembling.csv";
pub const META_KV: &str = "compare.kv";
pub const REPORT_MD: &str = "report.md";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Comparison {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = kv::render(&[
            ("seed", self.meta.seed.to_string()),
            ("n_boot", self.meta.n_boot.to_string()),
            ("n_perm", self.meta.n_perm.to_string()),
            ("sided", sided_str(self.meta.sided).to_string()),
        ]);
        write_atomic(&dir.join(META_KV), meta.as_bytes())?;

        let mut s = String::from("model,task,point_auc,median_auc,ci_low,ci_high,n_boot\n");
        for r in &self.aucs {
            let a = &r.summary;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.model, r.task, a.point_auc, a.median_auc, a.ci_low, a.ci_high, a.n_boot
            );
        }
        write_atomic(&dir.join(AUCS_CSV), s.as_bytes())?;

        let mut s = String::from("model_a,model_b,task,p_raw,p_holm,p_combined\n");
        for r in &self.pvalues {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.model_a, r.model_b, r.task, r.p_raw, r.p_holm, r.p_combined
            );
        }
        write_atomic(&dir.join(PVALUES_CSV), s.as_bytes())?;

        let mut s = String::from("model,task,ensemble_auc,average_mean,average_std,n_models,retrain_auc\n");
        for r in &self.ensembling {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.model,
                r.task,
                r.ensemble,
                r.average_mean,
                r.average_std,
                r.n_models,
                opt(r.retrain)
            );
        }
        write_atomic(&dir.join(ENSEMBLING_CSV), s.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kvf = KvFile::load(&dir.join(META_KV))?;
        let meta = CompareMeta {
            seed: kvf.get_or("seed", 0)?,
            n_boot: kvf.get_or("n_boot", 0)?,
            n_perm: kvf.get_or("n_perm", 0)?,
            sided: parse_sided(kvf.get_str("sided").unwrap_or("one"))?,
        };
        let aucs = read_rows(&dir.join(AUCS_CSV), 7, |f| {
            Some(AucRow {
                model: f[0].to_string(),
                task: f[1].to_string(),
                summary: AucSummary {
                    point_auc: f[2].parse().ok()?,
                    median_auc: f[3].parse().ok()?,
                    ci_low: f[4].parse().ok()?,
                    ci_high: f[5].parse().ok()?,
                    n_boot: f[6].parse().ok()?,
                },
            })
        })?;
        let pvalues = read_rows(&dir.join(PVALUES_CSV), 6, |f| {
            Some(PValueRow {
                model_a: f[0].to_string(),
                model_b: f[1].to_string(),
                task: f[2].to_string(),
                p_raw: f[3].parse().ok()?,
                p_holm: f[4].parse().ok()?,
                p_combined: f[5].parse().ok()?,
            })
        })?;
        let ensembling = read_rows(&dir.join(ENSEMBLING_CSV), 7, |f| {
            Some(EnsemblingRow {
                model: f[0].to_string(),
                task: f[1].to_string(),
                ensemble: f[2].parse().ok()?,
                average_mean: f[3].parse().ok()?,
                average_std: f[4].parse().ok()?,
                n_models: f[5].parse().ok()?,
                retrain: if f[6].is_empty() {
                    None
                } else {
                    Some(f[6].parse().ok()?)
                },
            })
        })?;
        Ok(Self {
            meta,
            aucs,
            pvalues,
            ensembling,
        })
    }
}

fn read_rows<T>(path: &Path, width: usize, parse: impl Fn(&[&str]) -> Option<T>) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            (f.len() == width)
                .then(|| parse(&f))
                .flatten()
                .ok_or_else(|| Error::validation(format!("{}: row {}: malformed", path.display(), i + 1)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Markdown

fn fmt_auc(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else {
        format!("{v:.3}")
    }
}

fn fmt_p(p: f64) -> String {
    if p < 1e-3 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// Renders the comparison as markdown.
pub fn render_markdown(c: &Comparison) -> String {
    let mut out = String::from("# Benchmark report\n\n");
    let models: Vec<&str> = c
        .aucs
        .iter()
        .map(|r| r.model.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tasks: Vec<&str> = c
        .aucs
        .iter()
        .map(|r| r.task.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cell: BTreeMap<(&str, &str), &AucSummary> = c
        .aucs
        .iter()
        .map(|r| ((r.model.as_str(), r.task.as_str()), &r.summary))
        .collect();

    let average = |m: &str| -> f64 {
        let v: Vec<f64> = tasks
            .iter()
            .filter_map(|t| cell.get(&(m, *t)).map(|s| s.median_auc))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut rows: Vec<(&str, f64)> = models.iter().map(|&m| (m, average(m))).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));

    let rank_marks = |values: Vec<(&str, f64)>| -> BTreeMap<String, u8> {
        let mut distinct: Vec<f64> = values.iter().map(|v| v.1).collect();
        distinct.sort_by(|a, b| b.total_cmp(a));
        distinct.dedup();
        values
            .into_iter()
            .filter_map(|(m, v)| {
                if Some(&v) == distinct.first() {
                    Some((m.to_string(), 1))
                } else if Some(&v) == distinct.get(1) {
                    Some((m.to_string(), 2))
                } else {
                    None
                }
            })
            .collect()
    };
    let mark = |text: String, rank: Option<&u8>| match rank {
        Some(1) => format!("**{text}**"),
        Some(2) => format!("<u>{text}</u>"),
        _ => text,
    };

    out.push_str("## External AUC\n\n");
    let _ = writeln!(
        out,
        "Median AUC over {} bootstrap resamples with 95% interval. Rows are sorted by the average of the per-task medians; per task, the best model is in bold and the second best underlined.\n",
        c.meta.n_boot
    );
    let _ = writeln!(out, "| Model | {} | Average |", tasks.join(" | "));
    let _ = writeln!(out, "|---|{}---|", "---|".repeat(tasks.len()));
    let task_ranks: Vec<BTreeMap<String, u8>> = tasks
        .iter()
        .map(|t| {
            rank_marks(
                models
                    .iter()
                    .filter_map(|m| cell.get(&(*m, *t)).map(|s| (*m, s.median_auc)))
                    .collect(),
            )
        })
        .collect();
    let avg_ranks = rank_marks(rows.clone());
    for (m, avg) in &rows {
        let mut line = format!("| {m} |");
        for (ti, t) in tasks.iter().enumerate() {
            let text = match cell.get(&(*m, *t)) {
                Some(s) => mark(
                    format!("{} [{}, {}]", fmt_auc(s.median_auc), fmt_auc(s.ci_low), fmt_auc(s.ci_high)),
                    task_ranks[ti].get(*m),
                ),
                None => "n/a".into(),
            };
            let _ = write!(line, " {text} |");
        }
        let _ = writeln!(line, " {} |", mark(fmt_auc(*avg), avg_ranks.get(*m)));
        out.push_str(&line);
    }

    out.push_str("\n## Pairwise comparison\n\n");
    if models.len() < 2 {
        out.push_str("Omitted: only one model was evaluated.\n");
    } else if c.pvalues.is_empty() {
        out.push_str("Omitted: no task was evaluated for every model.\n");
    } else {
        let pair_tasks: BTreeSet<&str> = c.pvalues.iter().map(|r| r.task.as_str()).collect();
        let side = match c.meta.sided {
            Sided::One => "one-sided test that the row model has the higher AUC",
            Sided::Two => "two-sided test of equal AUC",
        };
        let _ = writeln!(
            out,
            "Combined p-values: paired permutation test ({} permutations, {side}) on each of {} task(s), Holm-adjusted within the pair, then combined with Fisher's method.\n",
            c.meta.n_perm,
            pair_tasks.len()
        );
        let combined: BTreeMap<(&str, &str), f64> = c
            .pvalues
            .iter()
            .map(|r| ((r.model_a.as_str(), r.model_b.as_str()), r.p_combined))
            .collect();
        let order: Vec<&str> = rows.iter().map(|r| r.0).collect();
        let _ = writeln!(out, "| Model | {} |", order.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(order.len()));
        for a in &order {
            let mut line = format!("| {a} |");
            for b in &order {
                let text = if a == b {
                    "-".to_string()
                } else {
                    combined.get(&(*a, *b)).map_or("n/a".into(), |&p| fmt_p(p))
                };
                let _ = write!(line, " {text} |");
            }
            line.push('\n');
            out.push_str(&line);
        }
    }

    out.push_str("\n## Ensembling\n\n");
    out.push_str("Ensembling: AUC of the mean prediction of all cross-validation models. Average: mean ± standard deviation of the individual models' AUCs. Retraining: AUC of one model retrained on the full training set.\n\n");
    out.push_str("| Model | Task | Ensembling | Average | Retraining |\n|---|---|---|---|---|\n");
    let mut ens: Vec<&EnsemblingRow> = c.ensembling.iter().collect();
    let pos: BTreeMap<&str, usize> = rows.iter().enumerate().map(|(i, r)| (r.0, i)).collect();
    ens.sort_by(|a, b| {
        pos.get(a.model.as_str())
            .cmp(&pos.get(b.model.as_str()))
            .then(a.model.cmp(&b.model))
            .then(a.task.cmp(&b.task))
    });
    for r in ens {
        let average = if r.n_models == 0 {
            "n/a".into()
        } else {
            format!("{} ± {}", fmt_auc(r.average_mean), fmt_auc(r.average_std))
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {average} | {} |",
            r.model,
            r.task,
            fmt_auc(r.ensemble),
            r.retrain.map_or("n/a".into(), fmt_auc)
        );
    }
    out
}

/// Writes the CSVs and `report.md`; the markdown is rendered from the CSVs as read back.
pub fn write_report(c: &Comparison, dir: &Path) -> Result<String> {
    c.save(dir)?;
    rerender(dir)
}

/// Re-renders `report.md` from the CSVs in `dir`.
pub fn rerender(dir: &Path) -> Result<String> {
    let md = render_markdown(&Comparison::load(dir)?);
    write_atomic(&dir.join(REPORT_MD), md.as_bytes())?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(model: &str, task: &str, scores: &[f64], labels: &[usize]) -> ModelPredictions {
        let n = scores.len();
        let ensemble = PredictionSet {
            cohort_id: "ext".into(),
            slide_ids: (0..n).map(|i| format!("s{i}")).collect(),
            labels: labels.to_vec(),
            scores: scores.iter().map(|&s| vec![s]).collect(),
            model_ids: vec!["a".into(), "b".into()],
            per_model: vec![
                scores.iter().map(|&s| vec![s]).collect(),
                scores.iter().rev().map(|&s| vec![s]).collect(),
            ],
        };
        ModelPredictions {
            model: model.into(),
            task: task.into(),
            retrain: Some(ensemble.clone()),
            ensemble,
        }
    }

    fn meta() -> CompareMeta {
        CompareMeta {
            seed: 1,
            n_boot: 200,
            n_perm: 200,
            sided: Sided::One,
        }
    }

    const LABELS: [usize; 8] = [0, 0, 0, 0, 1, 1, 1, 1];

    #[test]
    fn single_model_omits_matrix() {
        let c = compare(&[preds("m", "t", &[0.1, 0.2, 0.3, 0.6, 0.5, 0.7, 0.8, 0.9], &LABELS)], meta()).unwrap();
        assert!(c.pvalues.is_empty());
        let md = render_markdown(&c);
        assert!(md.contains("Omitted: only one model"));
        assert!(md.contains("| m |"));
    }

    #[test]
    fn ranking_and_average() {
        let good = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let mid = [0.1, 0.2, 0.3, 0.6, 0.5, 0.7, 0.8, 0.9];
        let bad = [0.8, 0.2, 0.3, 0.6, 0.5, 0.1, 0.7, 0.4];
        let c = compare(
            &[
                preds("bad", "t", &bad, &LABELS),
                preds("good", "t", &good, &LABELS),
                preds("mid", "t", &mid, &LABELS),
            ],
            meta(),
        )
        .unwrap();
        let md = render_markdown(&c);
        let pos = |s: &str| md.find(s).unwrap();
        assert!(pos("| good |") < pos("| mid |") && pos("| mid |") < pos("| bad |"));
        assert!(md.contains("| **1.000** |"));
        assert_eq!(c.pvalues.len(), 6);
    }

    #[test]
    fn csv_round_trip_renders_identically() {
        let dir = tempfile::tempdir().unwrap();
        let c = compare(
            &[
                preds("a", "t1", &[0.1, 0.2, 0.3, 0.6, 0.5, 0.7, 0.8, 0.9], &LABELS),
                preds("b", "t1", &[0.3, 0.2, 0.1, 0.6, 0.5, 0.4, 0.8, 0.9], &LABELS),
            ],
            meta(),
        )
        .unwrap();
        let md = write_report(&c, dir.path()).unwrap();
        assert_eq!(Comparison::load(dir.path()).unwrap(), c);
        assert_eq!(md, render_markdown(&c));
    }

    #[test]
    fn mismatched_slides_rejected() {
        let mut b = preds("b", "t", &[0.1; 8], &LABELS);
        b.ensemble.slide_ids[0] = "other".into();
        let err = compare(&[preds("a", "t", &[0.2; 8], &LABELS), b], meta()).unwrap_err();
        assert!(err.to_string().contains("different slides"));
    }
}
