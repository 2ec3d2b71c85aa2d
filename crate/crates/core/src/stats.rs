//! AUC, bootstrap intervals, paired permutation tests and p-value combination.
//!
//! Resampling loops draw replicate `k` from stream `k` of the caller's seed,
//! so results do not depend on how many worker threads run them.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_N_BOOT: usize = 10_000;
pub const DEFAULT_N_PERM: usize = 10_000;
/// Tolerance when comparing permuted AUC differences to the observed one.
const DELTA_TOL: f64 = 1e-12;
const MAX_REDRAWS: usize = 10_000;

/// Mann–Whitney AUC: (correctly ordered pairs + ½·ties) / (n₊·n₋).
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based) midranks of positives, doubled to stay in integers
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos_in_group = idx[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        // midrank of ranks i+1..=j, times two
        rank_sum2 += pos_in_group * (i + 1 + j) as u64;
        i = j;
    }
    let u2 = rank_sum2 - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Unweighted mean of one-vs-rest AUCs over the classes present.
pub fn auc_macro_ovr(labels: &[usize], scores: &[Vec<f64>]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    let width = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != width) {
        return Err(Error::validation("score vectors differ in length"));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::SingleClass(format!("only class {:?} present", present)));
    }
    if let Some(&c) = present.iter().find(|&&c| c >= width) {
        return Err(Error::validation(format!("label {c} has no score column")));
    }
    let mut total = 0.0;
    for &c in &present {
        let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let s: Vec<f64> = scores.iter().map(|v| v[c]).collect();
        total += auc(&l, &s)?;
    }
    Ok(total / present.len() as f64)
}

/// AUC of a task: binary AUC of the single score for one-column scores,
/// macro one-vs-rest otherwise.
pub fn task_auc(labels: &[usize], scores: &[Vec<f64>]) -> Result<f64> {
    if scores.first().is_some_and(|s| s.len() == 1) {
        if labels.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                found: scores.len(),
            });
        }
        let l: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        let s: Vec<f64> = scores.iter().map(|v| v[0]).collect();
        auc(&l, &s)
    } else {
        auc_macro_ovr(labels, scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucSummary {
    pub point_auc: f64,
    pub median_auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_boot: usize,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn distinct_classes(labels: &[usize], idx: &[usize]) -> usize {
    let first = labels[idx[0]];
    if idx.iter().any(|&i| labels[i] != first) {
        2
    } else {
        1
    }
}

pub fn bootstrap_auc(labels: &[bool], scores: &[f64], n_boot: usize, seed: u64) -> Result<AucSummary> {
    let l: Vec<usize> = labels.iter().map(|&b| usize::from(b)).collect();
    let s: Vec<Vec<f64>> = scores.iter().map(|&v| vec![v]).collect();
    bootstrap_task_auc(&l, &s, n_boot, seed)
}

/// Percentile bootstrap of [`task_auc`]: median and 95% interval over
/// `n_boot` resamples. Resamples with a single class are redrawn.
pub fn bootstrap_task_auc(labels: &[usize], scores: &[Vec<f64>], n_boot: usize, seed: u64) -> Result<AucSummary> {
    let point_auc = task_auc(labels, scores)?;
    if n_boot == 0 {
        return Err(Error::validation("n_boot must be positive"));
    }
    let n = labels.len();
    let mut aucs: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let mut idx = vec![0usize; n];
            for _ in 0..MAX_REDRAWS {
                for slot in idx.iter_mut() {
                    *slot = r.random_range(0..n);
                }
                if distinct_classes(labels, &idx) > 1 {
                    let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    let s: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
                    return task_auc(&l, &s);
                }
            }
            Err(Error::SingleClass("bootstrap cannot draw both classes".into()))
        })
        .collect::<Result<_>>()?;
    aucs.sort_unstable_by(f64::total_cmp);
    Ok(AucSummary {
        point_auc,
        median_auc: percentile_sorted(&aucs, 0.5),
        ci_low: percentile_sorted(&aucs, 0.025),
        ci_high: percentile_sorted(&aucs, 0.975),
        n_boot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sided {
    /// Alternative: model A has the higher AUC.
    One,
    Two,
}

/// Paired permutation test on the AUC difference `auc(a) − auc(b)`.
///
/// Each permutation swaps the two models' scores on every slide with
/// probability ½. The p-value carries add-one smoothing.
pub fn permutation_test(
    labels: &[usize],
    scores_a: &[Vec<f64>],
    scores_b: &[Vec<f64>],
    n_perm: usize,
    seed: u64,
    sided: Sided,
) -> Result<f64> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(Error::validation(format!(
            "misaligned slides: {} labels, {} and {} scores",
            labels.len(),
            scores_a.len(),
            scores_b.len()
        )));
    }
    let observed = task_auc(labels, scores_a)? - task_auc(labels, scores_b)?;
    let n = labels.len();
    let hits: usize = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, k as u64);
            let mut pa = Vec::with_capacity(n);
            let mut pb = Vec::with_capacity(n);
            for i in 0..n {
                if r.random_bool(0.5) {
                    pa.push(scores_b[i].clone());
                    pb.push(scores_a[i].clone());
                } else {
                    pa.push(scores_a[i].clone());
                    pb.push(scores_b[i].clone());
                }
            }
            let delta = task_auc(labels, &pa)? - task_auc(labels, &pb)?;
            let hit = match sided {
                Sided::One => delta >= observed - DELTA_TOL,
                Sided::Two => delta.abs() >= observed.abs() - DELTA_TOL,
            };
            Ok(usize::from(hit))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (k, &i) in order.iter().enumerate() {
        let adj = ((m - k) as f64 * p[i]).min(1.0);
        running = running.max(adj);
        out[i] = running;
    }
    out
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma function Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "gamma_q requires a > 0");
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefix = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // series for P(a, x)
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..10_000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        1.0 - sum * log_prefix.exp()
    } else {
        // continued fraction for Q(a, x), modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-17 {
                break;
            }
        }
        log_prefix.exp() * h
    }
}

/// Survival function of the χ² distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

/// Fisher's method: χ²₂ₖ survival of `−2 Σ ln pᵢ`.
pub fn fisher_combine(p: &[f64]) -> f64 {
    if p.is_empty() {
        return 1.0;
    }
    let x: f64 = -2.0 * p.iter().map(|v| v.ln()).sum::<f64>();
    chi2_sf(x, 2.0 * p.len() as f64)
}

/// Per-task predictions of several models on one aligned cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub task_id: String,
    pub labels: Vec<usize>,
    /// `scores[model][slide]` is that model's score vector for the slide.
    pub scores: Vec<Vec<Vec<f64>>>,
}

/// Pairwise superiority tests across tasks.
///
/// Cell `(i, j)` tests whether model `i` beats model `j`; the diagonal is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatrix {
    pub models: Vec<String>,
    pub tasks: Vec<String>,
    /// `raw[i][j][t]`: permutation p-value of task `t`.
    pub raw: Vec<Vec<Option<Vec<f64>>>>,
    /// Holm-adjusted across tasks within the pair.
    pub holm: Vec<Vec<Option<Vec<f64>>>>,
    /// Fisher combination of the Holm-adjusted values.
    pub combined: Vec<Vec<Option<f64>>>,
}

pub fn pairwise_matrix(
    models: &[String],
    tasks: &[TaskScores],
    n_perm: usize,
    seed: u64,
    sided: Sided,
) -> Result<PairwiseMatrix> {
    let m = models.len();
    if m < 2 {
        return Err(Error::validation("pairwise comparison needs at least two models"));
    }
    if tasks.is_empty() {
        return Err(Error::validation("pairwise comparison needs at least one task"));
    }
    for t in tasks {
        if t.scores.len() != m {
            return Err(Error::validation(format!(
                "task {}: {} score sets for {m} models",
                t.task_id,
                t.scores.len()
            )));
        }
        if let Some(bad) = t.scores.iter().position(|s| s.len() != t.labels.len()) {
            return Err(Error::validation(format!(
                "task {}: predictions of {} misaligned with labels",
                t.task_id, models[bad]
            )));
        }
    }
    let mut raw = vec![vec![None; m]; m];
    let mut holm = vec![vec![None; m]; m];
    let mut combined = vec![vec![None; m]; m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let ps = tasks
                .iter()
                .enumerate()
                .map(|(ti, t)| {
                    let s = rng::mix(seed, &[ti as u64, i.min(j) as u64, i.max(j) as u64]);
                    permutation_test(&t.labels, &t.scores[i], &t.scores[j], n_perm, s, sided)
                })
                .collect::<Result<Vec<f64>>>()?;
            let adj = holm_adjust(&ps);
            combined[i][j] = Some(fisher_combine(&adj));
            raw[i][j] = Some(ps);
            holm[i][j] = Some(adj);
        }
    }
    Ok(PairwiseMatrix {
        models: models.to_vec(),
        tasks: tasks.iter().map(|t| t.task_id.clone()).collect(),
        raw,
        holm,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_count(labels: &[bool], scores: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_reference_cases() {
        let l = [false, false, true, true];
        assert_eq!(auc(&l, &[0.1, 0.4, 0.35, 0.8]).unwrap(), 0.75);
        assert_eq!(auc(&l, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auc(&l, &[0.3; 4]).unwrap(), 0.5);
        assert!(matches!(auc(&[true, true], &[0.1, 0.2]), Err(Error::SingleClass(_))));
    }

    #[test]
    fn auc_with_ties_matches_pair_count() {
        let l = [true, false, true, false, true, false, false];
        let s = [0.5, 0.5, 0.2, 0.2, 0.9, 0.1, 0.9];
        assert_eq!(auc(&l, &s).unwrap(), pair_count(&l, &s));
    }

    #[test]
    fn macro_ovr_cases() {
        let labels = [0, 1, 0, 1, 1];
        let p1 = [0.2, 0.7, 0.6, 0.4, 0.9];
        let two: Vec<Vec<f64>> = p1.iter().map(|&p| vec![1.0 - p, p]).collect();
        let bin = auc(&labels.map(|y| y == 1), &p1).unwrap();
        assert_eq!(auc_macro_ovr(&labels, &two).unwrap(), bin);

        let same = vec![vec![0.3, 0.3, 0.4]; 6];
        assert_eq!(auc_macro_ovr(&[0, 1, 2, 0, 1, 2], &same).unwrap(), 0.5);

        let labels3 = [0, 0, 1, 1, 2, 2];
        let s3 = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.4, 0.5, 0.1],
            vec![0.3, 0.6, 0.1],
            vec![0.2, 0.3, 0.5],
            vec![0.1, 0.2, 0.7],
            vec![0.5, 0.1, 0.4],
        ];
        let per_class: f64 = (0..3)
            .map(|c| {
                let l: Vec<bool> = labels3.iter().map(|&y| y == c).collect();
                let s: Vec<f64> = s3.iter().map(|v| v[c]).collect();
                pair_count(&l, &s)
            })
            .sum::<f64>()
            / 3.0;
        assert!((auc_macro_ovr(&labels3, &s3).unwrap() - per_class).abs() < 1e-15);
        assert!(auc_macro_ovr(&[1, 1], &[vec![0.1, 0.9], vec![0.2, 0.8]]).is_err());
    }

    #[test]
    fn bootstrap_separated_and_deterministic() {
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.9 } else { 0.1 }).collect();
        let s = bootstrap_auc(&labels, &scores, 500, 1).unwrap();
        assert_eq!((s.median_auc, s.ci_low, s.ci_high), (1.0, 1.0, 1.0));

        let noisy: Vec<f64> = (0..40).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let a = bootstrap_auc(&labels, &noisy, 2000, 7).unwrap();
        let b = bootstrap_auc(&labels, &noisy, 2000, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= a.median_auc && a.median_auc <= a.ci_high);
    }

    #[test]
    fn bootstrap_redraws_single_class_resamples() {
        // with one positive among three, many resamples lack it
        let s = bootstrap_auc(&[true, false, false], &[0.9, 0.1, 0.2], 300, 3).unwrap();
        assert_eq!(s.n_boot, 300);
        assert_eq!(s.median_auc, 1.0);
    }

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn permutation_identical_models() {
        let labels = vec![0, 1, 0, 1, 1, 0];
        let s = col(&[0.1, 0.8, 0.3, 0.6, 0.4, 0.5]);
        let p1 = permutation_test(&labels, &s, &s, 999, 1, Sided::One).unwrap();
        let p2 = permutation_test(&labels, &s, &s, 999, 1, Sided::Two).unwrap();
        assert_eq!(p1, 1.0);
        assert_eq!(p2, 1.0);
    }

    #[test]
    fn permutation_dominant_model() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let a = col(&labels.iter().map(|&y| y as f64).collect::<Vec<_>>());
        let b = col(&labels.iter().map(|&y| 1.0 - y as f64).collect::<Vec<_>>());
        let p = permutation_test(&labels, &a, &b, 5000, 2, Sided::One).unwrap();
        assert!(p < 0.01, "{p}");
        assert!(permutation_test(&labels[1..], &a, &b, 10, 2, Sided::One).is_err());
    }

    #[test]
    fn holm_cases() {
        let adj = holm_adjust(&[0.01, 0.04, 0.03]);
        for (a, e) in adj.iter().zip([0.03, 0.06, 0.06]) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(holm_adjust(&[0.2]), vec![0.2]);
        assert_eq!(holm_adjust(&[0.3; 4]), vec![1.0; 4]);
        assert_eq!(holm_adjust(&[0.1; 3]), vec![0.1 * 3.0; 3]);
    }

    #[test]
    fn fisher_cases() {
        for p in [0.001, 0.05, 0.5, 0.99] {
            assert!((fisher_combine(&[p]) - p).abs() < 1e-12, "{p}");
        }
        let x = -4.0 * 0.05f64.ln();
        let closed = (-x / 2.0).exp() * (1.0 + x / 2.0);
        let f = fisher_combine(&[0.05, 0.05]);
        assert!((f - closed).abs() < 1e-14);
        assert!((f - 0.01748).abs() < 1e-4);
        assert!(fisher_combine(&[0.05, 0.05, 1.0]) >= f);
    }

    #[test]
    fn gamma_q_matches_integer_closed_form() {
        // Q(k, x) = e^{-x} Σ_{i<k} x^i / i!
        for k in 1..=12 {
            for &x in &[0.01, 0.5, 1.0, 3.0, 7.5, 15.0, 40.0] {
                let mut term = 1.0;
                let mut sum = 1.0;
                for i in 1..k {
                    term *= x / i as f64;
                    sum += term;
                }
                let exact = (-x as f64).exp() * sum;
                let got = gamma_q(k as f64, x);
                assert!(((got - exact) / exact).abs() < 1e-10, "k={k} x={x}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn gamma_q_half_integer_against_statrs() {
        use statrs::function::gamma::gamma_ur;
        for &a in &[0.5, 1.5, 2.5, 7.5] {
            for &x in &[0.1, 1.0, 4.0, 20.0] {
                let r = gamma_ur(a, x);
                assert!(((gamma_q(a, x) - r) / r).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pairwise_identical_models_not_significant() {
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let s = col(&(0..16).map(|i| ((i * 7) % 16) as f64).collect::<Vec<_>>());
        let tasks: Vec<TaskScores> = (0..2)
            .map(|t| TaskScores {
                task_id: format!("t{t}"),
                labels: labels.clone(),
                scores: vec![s.clone(), s.clone(), s.clone()],
            })
            .collect();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let pm = pairwise_matrix(&names, &tasks, 200, 4, Sided::One).unwrap();
        for i in 0..3 {
            assert!(pm.combined[i][i].is_none());
            for j in 0..3 {
                if i != j {
                    assert!(pm.combined[i][j].unwrap() >= 0.5);
                }
            }
        }
    }
}
