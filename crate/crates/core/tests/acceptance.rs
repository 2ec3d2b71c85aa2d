//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{brute_force_tiles, max_fd_error, random_instance, random_mask};
use milbench::abmil::{parameter_count, AbmilModel};
use milbench::feature_store::{LossKind, SlideManifestEntry};
use milbench::protocol::{
    cross_validate, ensemble_predict, make_splits, one_shot_retrain, CvRun, Dataset, ProtocolConfig, RunArtifacts,
};
use milbench::rng;
use milbench::stats::{auc, fisher_combine, holm_adjust, task_auc};
use milbench::synthgen::{generate, oracle_score, SynthSpec};
use milbench::tiler::{enumerate_tiles, Mask, TilingConfig};
use milbench::Error;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Grid used for the training runs below; the full grid is the default in `ProtocolConfig`.
const ACCEPTANCE_GRID: [usize; 6] = [1, 3, 5, 10, 15, 20];

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn parameter_count_criterion() -> Outcome {
    let formula = parameter_count(1024, 1);
    let stored = AbmilModel::init(1024, 1, 0).unwrap().params().len();
    outcome(
        formula == 164_482 && stored == 164_482,
        format!("formula {formula}, stored values {stored}, expected 164482"),
    )
}

fn gradient_criterion() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut full = 0;
    for seed in 0..100u64 {
        let (model, bag, label, kind) = if seed % 50 == 0 {
            // full hidden width
            let (_, bag, label, kind) = random_instance(seed + 10_000, 4);
            let c_out = if kind == LossKind::MultiCe { 3 } else { 1 };
            full += 1;
            let model = AbmilModel::init(bag.dim(), c_out, seed).unwrap();
            (model, bag, label.min(c_out.max(2) - 1), kind)
        } else {
            random_instance(seed, 4 + (seed as usize % 13))
        };
        worst = worst.max(max_fd_error(&model, &bag, label, kind, 1e-4));
    }
    outcome(
        worst < 1e-4,
        format!("100 instances ({full} at hidden width 128), max relative error {worst:.2e} < 1e-4"),
    )
}

fn pair_count(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &a) in labels.iter().enumerate() {
        for (j, &b) in labels.iter().enumerate() {
            if a && !b {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn auc_criterion() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut with_ties = 0;
    let mut r = rng::stream(0xA0C, 0);
    for _ in 0..1000 {
        let n = r.random_range(2..=500);
        let levels = r.random_range(2..=n.max(3));
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 * 0.37).collect();
        let mut distinct = scores.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < n {
            with_ties += 1;
        }
        worst = worst.max((auc(&labels, &scores).unwrap() - pair_count(&labels, &scores)).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("1000 instances (n <= 500, {with_ties} with ties), max |difference| {worst:.1e}"),
    )
}

fn stats_criterion() -> Outcome {
    let holm = holm_adjust(&[0.01, 0.04, 0.03]);
    let holm_ok = holm.iter().zip([0.03, 0.06, 0.06]).all(|(a, b)| (a - b).abs() < 1e-12);
    let x = -2.0 * 2.0 * 0.05f64.ln();
    let closed = (-x / 2.0).exp() * (1.0 + x / 2.0);
    let f = fisher_combine(&[0.05, 0.05]);
    let fisher_ok = (f - closed).abs() < 1e-10 && (f - 0.01748).abs() < 1e-4;
    let single_ok = [0.001, 0.05, 0.5, 0.99]
        .iter()
        .all(|&p| (fisher_combine(&[p]) - p).abs() < 1e-12);
    outcome(
        holm_ok && fisher_ok && single_ok,
        format!("holm {holm:?}; fisher([0.05,0.05]) {f:.6} (closed form {closed:.6}); fisher([p]) == p: {single_ok}"),
    )
}

fn run_bytes(run: &CvRun) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    RunArtifacts {
        model_name: "m".into(),
        run: run.clone(),
        retrained: None,
        extra: BTreeMap::new(),
    }
    .save(dir.path())
    .unwrap();
    std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn protocol_criterion() -> Outcome {
    // splits on random manifests with multi-slide cases
    let mut r = rng::stream(0x5B1, 0);
    let mut splits_ok = true;
    for inst in 0..50 {
        let n_cases = r.random_range(15..80);
        let classes = r.random_range(2..4);
        let mut entries = Vec::new();
        for k in 0..n_cases {
            let label = if k < 5 * classes { k % classes } else { r.random_range(0..classes) };
            for s in 0..r.random_range(1..4) {
                entries.push(SlideManifestEntry {
                    slide_id: format!("c{k}s{s}"),
                    case_id: format!("c{k}"),
                    label,
                    feature_path: "f.fmx".into(),
                });
            }
        }
        let plan = make_splits(&entries, 5, inst).unwrap();
        for class in 0..classes {
            let mut counts = [0usize; 5];
            for k in 0..n_cases {
                let e = entries.iter().find(|e| e.case_id == format!("c{k}")).unwrap();
                if e.label == class {
                    counts[plan.fold_of(&e.case_id).unwrap()] += 1;
                }
            }
            splits_ok &= counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1;
        }
        splits_ok &= plan.fold_of_case.len() == n_cases;
    }

    let spec = SynthSpec {
        n_slides: 60,
        n_external: 40,
        tiles_min: 10,
        tiles_max: 20,
        seed: 21,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let task = spec.task_spec();
    let train = Dataset::from_cohort(&data.train, &task, 1).unwrap();
    let ext = Dataset::from_cohort(&data.external, &task, 1).unwrap();
    let train_ids: HashSet<&String> = train.slide_ids.iter().collect();
    let disjoint = ext.slide_ids.iter().all(|s| !train_ids.contains(s));
    let cfg = ProtocolConfig {
        epoch_grid: vec![1, 2, 3],
        ..ProtocolConfig::default()
    };
    let plan = make_splits(&data.train.entries, 5, 3).unwrap();
    let serial = single_thread(|| cross_validate(&train, &task, &plan, &cfg, 17).unwrap());
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| cross_validate(&train, &task, &plan, &cfg, 17).unwrap());
    let identical = serial.records.len() == 25 && run_bytes(&serial) == run_bytes(&parallel);
    let mut leaky = ext.clone();
    leaky.slide_ids[0] = train.slide_ids[0].clone();
    let leak_caught = matches!(ensemble_predict(&serial, &leaky), Err(Error::Leakage(_)));
    outcome(
        splits_ok && disjoint && identical && leak_caught,
        format!(
            "splits balanced and grouped: {splits_ok}; cohorts disjoint: {disjoint}; leakage rejected: {leak_caught}; 1 vs 4 workers byte-identical: {identical}"
        ),
    )
}

struct Benchmark {
    ensemble: f64,
    retrain: f64,
    average: f64,
    oracle: f64,
}

fn benchmark(spec: &SynthSpec, grid: &[usize], seed: u64) -> Benchmark {
    let data = generate(spec).unwrap();
    let task = spec.task_spec();
    let train = Dataset::from_cohort(&data.train, &task, seed).unwrap();
    let ext = Dataset::from_cohort(&data.external, &task, seed).unwrap();
    let cfg = ProtocolConfig {
        epoch_grid: grid.to_vec(),
        ..ProtocolConfig::default()
    };
    let plan = make_splits(&data.train.entries, cfg.n_folds, seed).unwrap();
    let run = cross_validate(&train, &task, &plan, &cfg, seed).unwrap();
    let preds = ensemble_predict(&run, &ext).unwrap();
    let retrained = one_shot_retrain(&run, &train, seed).unwrap();
    let rt = retrained.predict(&run, &ext).unwrap();
    let individual: Vec<f64> = preds.per_model.iter().map(|m| task_auc(&ext.labels, m).unwrap()).collect();
    let oracle: Vec<Vec<f64>> = data.external.matrices.iter().map(|m| vec![oracle_score(spec, m)]).collect();
    Benchmark {
        ensemble: task_auc(&ext.labels, &preds.scores).unwrap(),
        retrain: task_auc(&ext.labels, &rt.scores).unwrap(),
        average: individual.iter().sum::<f64>() / individual.len() as f64,
        oracle: task_auc(&ext.labels, &oracle).unwrap(),
    }
}

fn end_to_end_criterion() -> Outcome {
    let spec = SynthSpec {
        seed: 2024,
        ..SynthSpec::default()
    };
    let t = Instant::now();
    let signal = single_thread(|| benchmark(&spec, &ACCEPTANCE_GRID, 1));
    let t_signal = t.elapsed();
    let t = Instant::now();
    let control = single_thread(|| benchmark(&SynthSpec { shift: 0.0, ..spec.clone() }, &ACCEPTANCE_GRID, 1));
    let t_control = t.elapsed();
    let limit = Duration::from_secs(300);
    let pass = signal.ensemble >= 0.95
        && signal.ensemble <= signal.oracle + 0.02
        && (0.4..=0.6).contains(&control.ensemble)
        && t_signal < limit
        && t_control < limit;
    outcome(
        pass,
        format!(
            "mu=4: ensemble AUC {:.4} (oracle {:.4}) in {:.0?}; mu=0: ensemble AUC {:.4} in {:.0?}; 1 thread, epochs {ACCEPTANCE_GRID:?}",
            signal.ensemble, signal.oracle, t_signal, control.ensemble, t_control
        ),
    )
}

fn ensembling_criterion() -> Outcome {
    let reps = 20;
    let mut diffs = Vec::new();
    let (mut over_retrain, mut over_average) = (0, 0);
    for rep in 0..reps {
        let spec = SynthSpec {
            n_slides: 100,
            n_external: 100,
            tiles_min: 20,
            tiles_max: 40,
            shift: 2.0,
            label_noise: 0.15,
            seed: 500 + rep,
            ..SynthSpec::default()
        };
        let b = benchmark(&spec, &ACCEPTANCE_GRID, rep);
        diffs.push(b.ensemble - b.retrain);
        over_retrain += usize::from(b.ensemble >= b.retrain);
        over_average += usize::from(b.ensemble >= b.average);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let needed = (0.7 * reps as f64).ceil() as usize;
    outcome(
        mean >= 0.0 && over_retrain >= needed && over_average >= needed,
        format!(
            "{reps} replicates (noise 0.15, mu=2): mean(ensemble - retrain) {mean:+.4}; ensemble >= retrain {over_retrain}/{reps}; ensemble >= average {over_average}/{reps}"
        ),
    )
}

fn tiling_criterion() -> Outcome {
    let mut r = rng::stream(0x711E, 0);
    let mut mismatches = 0;
    let mut tiles_seen = 0;
    for inst in 0..100u64 {
        let (w, h): (usize, usize) = if inst < 5 {
            (2048, 2048)
        } else {
            (r.random_range(1..=2048), r.random_range(1..=2048))
        };
        let cfg = TilingConfig {
            tile_px: [32, 64, 100, 224, 256][r.random_range(0..5)],
            mask_downsample: r.random_range(1..=16),
            min_tissue: r.random_range(0.0..1.0),
            ..TilingConfig::default()
        };
        let mask = random_mask(inst, w.div_ceil(cfg.mask_downsample), h.div_ceil(cfg.mask_downsample));
        let fast = enumerate_tiles(w, h, &mask, &cfg).unwrap();
        tiles_seen += fast.len();
        if fast != brute_force_tiles(w, h, &mask, &cfg) {
            mismatches += 1;
        }
    }
    let cfg = TilingConfig::default();
    let full = Mask::new(56, 56, vec![true; 56 * 56]).unwrap();
    let four: Vec<(u32, u32)> = enumerate_tiles(448, 448, &full, &cfg)
        .unwrap()
        .iter()
        .map(|t| (t.x, t.y))
        .collect();
    let four_ok = four == vec![(0, 0), (224, 0), (0, 224), (224, 224)];
    outcome(
        mismatches == 0 && four_ok,
        format!("100 instances up to 2048x2048 ({tiles_seen} tiles), {mismatches} mismatches; 448x448 -> {four:?}"),
    )
}

fn cli(args: &[&str], cwd: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_milbench"))
        .args(args)
        .current_dir(cwd)
        .env("BENCH_JOBS", "1")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn pipeline(dir: &Path) -> Option<Vec<u8>> {
    std::fs::write(
        dir.join("synth.kv"),
        "n_slides = 60\nn_external = 40\ntiles_min = 10\ntiles_max = 20\nshift = 3\n",
    )
    .ok()?;
    std::fs::write(
        dir.join("run.kv"),
        "task = s/task.kv\ntrain = s/train/manifest.csv\nexternals = s/external/manifest.csv\nepoch_grid = 1,3,5\nn_boot = 2000\nn_perm = 2000\n",
    )
    .ok()?;
    let steps: [&[&str]; 5] = [
        &["synth", "--config", "synth.kv", "--seed", "5", "--out", "s"],
        &["train", "--config", "run.kv", "--seed", "1", "--name", "alpha", "--out", "a"],
        &["train", "--config", "run.kv", "--seed", "2", "--name", "beta", "--out", "b"],
        &["eval", "--run", "b", "--external", "s/external/manifest.csv"],
        &["compare", "--config", "run.kv", "--run", "a", "--run", "b", "--out", "cmp"],
    ];
    for s in steps {
        if !cli(s, dir) {
            return None;
        }
    }
    std::fs::read(dir.join("cmp/report.md")).ok()
}

fn determinism_criterion() -> Outcome {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline(d1.path()), pipeline(d2.path())) {
        (Some(a), Some(b)) => outcome(
            a == b && !a.is_empty(),
            format!("report.md {} bytes, identical: {}", a.len(), a == b),
        ),
        _ => outcome(false, "pipeline failed"),
    }
}

fn main() {
    let criteria: [(&str, Option<Duration>, fn() -> Outcome); 9] = [
        ("parameter count", None, parameter_count_criterion),
        ("gradient fidelity", Some(Duration::from_secs(30)), gradient_criterion),
        ("AUC oracle equivalence", Some(Duration::from_secs(10)), auc_criterion),
        ("statistics oracles", None, stats_criterion),
        ("protocol invariants", Some(Duration::from_secs(60)), protocol_criterion),
        ("end-to-end synthetic benchmark", None, end_to_end_criterion),
        ("ensembling benefit", Some(Duration::from_secs(1800)), ensembling_criterion),
        ("tiling oracle", Some(Duration::from_secs(10)), tiling_criterion),
        ("CLI determinism", None, determinism_criterion),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, limit, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let mut o = run();
        let took = t.elapsed();
        if let Some(l) = limit {
            if took > l {
                o.pass = false;
                o.detail.push_str(&format!("; exceeded {l:?}"));
            }
        }
        failed += usize::from(!o.pass);
        println!(
            "{} {name} [{:.1}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
