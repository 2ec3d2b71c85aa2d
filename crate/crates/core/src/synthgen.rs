//! Synthetic MIL cohorts with a planted witness-tile signal.
//!
//! Background tiles are standard normal. A slide whose (true) class is `c ≥ 1`
//! holds `⌈witness_rate · n⌉` tiles shifted by `shift · u_c`, where `u_c` is a
//! fixed unit direction derived from the seed. Observed labels are flipped with
//! probability `label_noise`, case by case.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_store::{write_features, write_manifest, FeatureMatrix, SlideManifestEntry, TaskSpec};
use crate::kv::{render, KvFile};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub task_id: String,
    /// Slides in the training cohort.
    pub n_slides: usize,
    /// Slides in the external cohort.
    pub n_external: usize,
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub dim: usize,
    pub witness_rate: f64,
    pub shift: f64,
    pub label_noise: f64,
    pub class_count: usize,
    pub slides_per_case: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            task_id: "synth".into(),
            n_slides: 200,
            n_external: 200,
            tiles_min: 30,
            tiles_max: 60,
            dim: 16,
            witness_rate: 0.2,
            shift: 4.0,
            label_noise: 0.0,
            class_count: 2,
            slides_per_case: 1,
            seed: 0,
        }
    }
}

const SYNTH_KEYS: [&str; 12] = [
    "task_id",
    "n_slides",
    "n_external",
    "tiles_min",
    "tiles_max",
    "dim",
    "witness_rate",
    "shift",
    "label_noise",
    "class_count",
    "slides_per_case",
    "seed",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(m.to_string()));
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return bad("witness_rate must lie in (0, 1]");
        }
        if !(self.shift >= 0.0) {
            return bad("shift must be non-negative");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5)");
        }
        if self.class_count < 2 {
            return bad("class_count must be at least 2");
        }
        if self.tiles_min == 0 || self.tiles_max < self.tiles_min {
            return bad("tile range must satisfy 1 <= tiles_min <= tiles_max");
        }
        if self.dim == 0 || self.slides_per_case == 0 {
            return bad("dim and slides_per_case must be positive");
        }
        if self.n_slides == 0 || self.n_external == 0 {
            return bad("cohorts must be non-empty");
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(&SYNTH_KEYS)?;
        let d = Self::default();
        let n_slides = kv.get_or("n_slides", d.n_slides)?;
        let spec = Self {
            task_id: kv.get_or("task_id", d.task_id)?,
            n_slides,
            n_external: kv.get_or("n_external", n_slides)?,
            tiles_min: kv.get_or("tiles_min", d.tiles_min)?,
            tiles_max: kv.get_or("tiles_max", d.tiles_max)?,
            dim: kv.get_or("dim", d.dim)?,
            witness_rate: kv.get_or("witness_rate", d.witness_rate)?,
            shift: kv.get_or("shift", d.shift)?,
            label_noise: kv.get_or("label_noise", d.label_noise)?,
            class_count: kv.get_or("class_count", d.class_count)?,
            slides_per_case: kv.get_or("slides_per_case", d.slides_per_case)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        spec.validate()
            .map_err(|e| Error::validation(format!("{}: {e}", kv.origin())))?;
        Ok(spec)
    }

    pub fn to_kv_string(&self) -> String {
        render(&[
            ("task_id", self.task_id.clone()),
            ("n_slides", self.n_slides.to_string()),
            ("n_external", self.n_external.to_string()),
            ("tiles_min", self.tiles_min.to_string()),
            ("tiles_max", self.tiles_max.to_string()),
            ("dim", self.dim.to_string()),
            ("witness_rate", self.witness_rate.to_string()),
            ("shift", self.shift.to_string()),
            ("label_noise", self.label_noise.to_string()),
            ("class_count", self.class_count.to_string()),
            ("slides_per_case", self.slides_per_case.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    /// Task description matching the generated cohorts. Bags are never subsampled.
    pub fn task_spec(&self) -> TaskSpec {
        let mut spec = if self.class_count == 2 {
            TaskSpec::binary(&self.task_id)
        } else {
            TaskSpec::multiclass(&self.task_id, self.class_count)
        };
        spec.n_t = self.tiles_max;
        spec
    }

    /// Unit signal direction of class `class` (meaningful for `class ≥ 1`).
    pub fn direction(&self, class: usize) -> Vec<f64> {
        let mut r = rng::stream(rng::mix(self.seed, &[0xD1]), class as u64);
        let v: Vec<f64> = (0..self.dim).map(|_| r.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub cohort_id: String,
    pub entries: Vec<SlideManifestEntry>,
    pub matrices: Vec<FeatureMatrix>,
    /// Labels before noise was applied.
    pub true_labels: Vec<usize>,
}

impl Cohort {
    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Writes `dir/manifest.csv` and `dir/features/<slide_id>.fmx`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (e, m) in self.entries.iter().zip(&self.matrices) {
            write_features(m, &dir.join(&e.feature_path))?;
        }
        write_manifest(&dir.join("manifest.csv"), &self.entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Cohort,
    pub external: Cohort,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let directions: Vec<Vec<f64>> = (0..spec.class_count).map(|c| spec.direction(c)).collect();
    Ok(SynthData {
        train: make_cohort(spec, &directions, 0, "train", spec.n_slides),
        external: make_cohort(spec, &directions, 1, "external", spec.n_external),
    })
}

fn make_cohort(spec: &SynthSpec, dirs: &[Vec<f64>], index: u64, name: &str, n: usize) -> Cohort {
    let n_cases = n.div_ceil(spec.slides_per_case);
    let mut case_labels: Vec<usize> = (0..n_cases).map(|k| k % spec.class_count).collect();
    case_labels.shuffle(&mut rng::stream(rng::mix(spec.seed, &[index, 0xCA5E]), 0));
    let observed: Vec<usize> = case_labels
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            let mut r = rng::stream(rng::mix(spec.seed, &[index, 0x0015E]), k as u64);
            if r.random_bool(spec.label_noise) {
                if spec.class_count == 2 {
                    1 - y
                } else {
                    (y + r.random_range(1..spec.class_count)) % spec.class_count
                }
            } else {
                y
            }
        })
        .collect();

    let prefix = format!("{}_{}", spec.task_id, name);
    let slides: Vec<(SlideManifestEntry, FeatureMatrix, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let case = i / spec.slides_per_case;
            let truth = case_labels[case];
            let matrix = make_slide(spec, dirs, truth, rng::mix(spec.seed, &[index, i as u64]));
            let slide_id = format!("{prefix}_{i:05}");
            let entry = SlideManifestEntry {
                feature_path: format!("features/{slide_id}.fmx").into(),
                slide_id,
                case_id: format!("{prefix}_case{case:05}"),
                label: observed[case],
            };
            (entry, matrix, truth)
        })
        .collect();

    let mut cohort = Cohort {
        cohort_id: name.to_string(),
        entries: Vec::with_capacity(n),
        matrices: Vec::with_capacity(n),
        true_labels: Vec::with_capacity(n),
    };
    for (e, m, t) in slides {
        cohort.entries.push(e);
        cohort.matrices.push(m);
        cohort.true_labels.push(t);
    }
    cohort
}

fn make_slide(spec: &SynthSpec, dirs: &[Vec<f64>], class: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng::stream(seed, 0);
    let n = r.random_range(spec.tiles_min..=spec.tiles_max);
    let witnesses = if class == 0 {
        0
    } else {
        ((spec.witness_rate * n as f64).ceil() as usize).min(n)
    };
    let mut is_witness: Vec<bool> = (0..n).map(|i| i < witnesses).collect();
    is_witness.shuffle(&mut r);
    let mut values = Vec::with_capacity(n * spec.dim);
    for &w in &is_witness {
        for j in 0..spec.dim {
            let mut v: f64 = r.sample(StandardNormal);
            if w {
                v += spec.shift * dirs[class][j];
            }
            values.push(v as f32);
        }
    }
    let side = (n as f64).sqrt().ceil() as u32;
    let coords = (0..n as u32).map(|i| ((i % side) * 224, (i / side) * 224)).collect();
    FeatureMatrix::new(spec.dim, coords, values).expect("generated matrix is valid")
}

/// Largest projection of a real tile on the class-1 signal direction.
pub fn oracle_score(spec: &SynthSpec, bag: &FeatureMatrix) -> f64 {
    oracle_score_along(&spec.direction(1), bag)
}

pub fn oracle_score_along(direction: &[f64], bag: &FeatureMatrix) -> f64 {
    (0..bag.n_real())
        .map(|i| {
            bag.row(i)
                .iter()
                .zip(direction)
                .map(|(&x, &u)| f64::from(x) * u)
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}
