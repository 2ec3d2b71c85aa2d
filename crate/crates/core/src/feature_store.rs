//! Cohort manifests, the `FMX1` feature-matrix file format and tile-bag sampling.
//!
//! Feature file layout (little-endian):
//!
//! | field            | type                     |
//! |------------------|--------------------------|
//! | magic            | `b"FMX1"`                |
//! | version          | u32 = 1                  |
//! | n_tiles          | u32                      |
//! | dim              | u32                      |
//! | n_real           | u32                      |
//! | coords           | n_tiles × (u32 x, u32 y) |
//! | values           | n_tiles·dim f32, row-major |
//!
//! The first `n_real` rows are real tiles; the rest are all-zero padding.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::rng;

pub const FEATURE_MAGIC: &[u8; 4] = b"FMX1";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 20;

/// Per-slide tile embeddings.
///
/// Rows `0..n_real` are real tiles, rows `n_real..n_tiles` are padding whose
/// values and coordinates are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    n_real: usize,
    coords: Vec<(u32, u32)>,
    values: Vec<f32>,
}

impl FeatureMatrix {
    /// A matrix made only of real tiles.
    pub fn new(dim: usize, coords: Vec<(u32, u32)>, values: Vec<f32>) -> Result<Self> {
        let n = coords.len();
        Self::with_padding(dim, n, coords, values)
    }

    pub fn with_padding(
        dim: usize,
        n_real: usize,
        coords: Vec<(u32, u32)>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let m = Self {
            dim,
            n_real,
            coords,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("feature dimension must be positive"));
        }
        if self.n_real == 0 {
            return Err(Error::EmptySlide);
        }
        let n = self.coords.len();
        if self.n_real > n {
            return Err(Error::validation(format!(
                "n_real {} exceeds n_tiles {n}",
                self.n_real
            )));
        }
        if self.values.len() != n * self.dim {
            return Err(Error::DimensionMismatch {
                expected: n * self.dim,
                found: self.values.len(),
            });
        }
        let pad_values = &self.values[self.n_real * self.dim..];
        let pad_coords = &self.coords[self.n_real..];
        if pad_values.iter().any(|v| v.to_bits() != 0) || pad_coords.iter().any(|&c| c != (0, 0))
        {
            return Err(Error::validation("padding rows must be all-zero"));
        }
        Ok(())
    }

    pub fn n_tiles(&self) -> usize {
        self.coords.len()
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `true` for real tiles, `false` for padding.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.n_tiles()).map(|i| i < self.n_real).collect()
    }

    /// Real rows only.
    pub fn real_values(&self) -> &[f32] {
        &self.values[..self.n_real * self.dim]
    }

    /// Copy with `k` extra padding rows appended.
    pub fn padded(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.coords.extend(std::iter::repeat_n((0, 0), k));
        out.values.extend(std::iter::repeat_n(0.0, k * self.dim));
        out
    }
}

/// Exact encoded size of an `FMX1` file.
pub fn encoded_len(n_tiles: usize, dim: usize) -> Option<usize> {
    let coords = n_tiles.checked_mul(8)?;
    let values = n_tiles.checked_mul(dim)?.checked_mul(4)?;
    FEATURE_HEADER_LEN.checked_add(coords)?.checked_add(values)
}

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(m.n_tiles(), m.dim).unwrap_or(0));
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, m.n_tiles() as u32, m.dim as u32, m.n_real as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &(x, y) in &m.coords {
        buf.extend_from_slice(&x.to_le_bytes());
        buf.extend_from_slice(&y.to_le_bytes());
    }
    for v in &m.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    let fmt = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(fmt(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != FEATURE_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let (n_tiles, dim, n_real) = (word(1) as usize, word(2) as usize, word(3) as usize);
    if dim == 0 {
        return Err(fmt(12, "zero dimension".into()));
    }
    if n_real == 0 || n_real > n_tiles {
        return Err(fmt(16, format!("invalid n_real {n_real} for n_tiles {n_tiles}")));
    }
    let total = encoded_len(n_tiles, dim).ok_or_else(|| fmt(8, "dimension overflow".into()))?;
    if bytes.len() < total {
        return Err(fmt(bytes.len(), format!("truncated file, expected {total} bytes")));
    }
    if bytes.len() > total {
        return Err(fmt(total, "trailing bytes".into()));
    }
    let mut off = FEATURE_HEADER_LEN;
    let mut coords = Vec::with_capacity(n_tiles);
    for _ in 0..n_tiles {
        let x = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let y = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
        coords.push((x, y));
        off += 8;
    }
    let values: Vec<f32> = bytes[off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = FeatureMatrix {
        dim,
        n_real,
        coords,
        values,
    };
    m.validate().map_err(|e| fmt(off, e.to_string()))?;
    Ok(m)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    m.validate()?;
    if m.n_tiles() > u32::MAX as usize || m.dim > u32::MAX as usize {
        return Err(Error::validation("matrix too large for FMX1"));
    }
    write_atomic(path, &encode_features(m))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Draws a bag of exactly `n_t` rows.
///
/// With at least `n_t` real tiles the rows are a uniform sample without
/// replacement (kept in original order); otherwise every real tile is kept and
/// zero padding fills the rest. The draw depends only on `(slide_id, seed)`.
pub fn sample_bag(m: &FeatureMatrix, slide_id: &str, n_t: usize, seed: u64) -> Result<FeatureMatrix> {
    if m.n_real == 0 {
        return Err(Error::EmptySlide);
    }
    if n_t == 0 {
        return Err(Error::validation("n_t must be positive"));
    }
    let rows: Vec<usize> = if m.n_real > n_t {
        let mut r = rng::stream(rng::hash_str(slide_id) ^ seed, 0);
        let mut idx = rand::seq::index::sample(&mut r, m.n_real, n_t).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..m.n_real).collect()
    };
    let n_real = rows.len();
    let mut coords = Vec::with_capacity(n_t);
    let mut values = Vec::with_capacity(n_t * m.dim);
    for &i in &rows {
        coords.push(m.coords[i]);
        values.extend_from_slice(m.row(i));
    }
    coords.resize(n_t, (0, 0));
    values.resize(n_t * m.dim, 0.0);
    Ok(FeatureMatrix {
        dim: m.dim,
        n_real,
        coords,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    BinaryCe,
    MultiCe,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary-ce" => Ok(LossKind::BinaryCe),
            "multi-ce" => Ok(LossKind::MultiCe),
            other => Err(Error::validation(format!("unknown loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::BinaryCe => "binary-ce",
            LossKind::MultiCe => "multi-ce",
        })
    }
}

/// A slide-level classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub class_count: usize,
    /// Tiles per bag.
    pub n_t: usize,
    /// Target microns per pixel.
    pub mpp: f64,
    pub loss: LossKind,
    /// Optional display names, one per class.
    pub label_names: Vec<String>,
}

impl TaskSpec {
    pub const DEFAULT_N_T: usize = 5000;
    pub const DEFAULT_MPP: f64 = 0.5;

    pub fn binary(task_id: &str) -> Self {
        Self {
            task_id: task_id.to_string(),
            class_count: 2,
            n_t: Self::DEFAULT_N_T,
            mpp: Self::DEFAULT_MPP,
            loss: LossKind::BinaryCe,
            label_names: Vec::new(),
        }
    }

    pub fn multiclass(task_id: &str, class_count: usize) -> Self {
        Self {
            class_count,
            loss: LossKind::MultiCe,
            ..Self::binary(task_id)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::validation("task_id must be non-empty"));
        }
        if self.class_count < 2 {
            return Err(Error::validation("class_count must be at least 2"));
        }
        if self.n_t == 0 {
            return Err(Error::validation("n_t must be positive"));
        }
        if !(self.mpp > 0.0) {
            return Err(Error::validation("mpp must be positive"));
        }
        match (self.class_count, self.loss) {
            (2, LossKind::MultiCe) => {
                return Err(Error::validation("a 2-class task must use binary-ce"))
            }
            (c, LossKind::BinaryCe) if c > 2 => {
                return Err(Error::validation("binary-ce requires class_count = 2"))
            }
            _ => {}
        }
        if !self.label_names.is_empty() && self.label_names.len() != self.class_count {
            return Err(Error::validation("label_names must list one name per class"));
        }
        Ok(())
    }

    /// Width of the classifier head: 1 for binary tasks, C otherwise.
    pub fn output_dim(&self) -> usize {
        match self.loss {
            LossKind::BinaryCe => 1,
            LossKind::MultiCe => self.class_count,
        }
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(&["task_id", "class_count", "n_t", "mpp", "loss", "labels"])?;
        let class_count: usize = kv.get_or("class_count", 2)?;
        let default_loss = if class_count == 2 {
            LossKind::BinaryCe
        } else {
            LossKind::MultiCe
        };
        let spec = Self {
            task_id: kv.require_str("task_id")?.to_string(),
            class_count,
            n_t: kv.get_or("n_t", Self::DEFAULT_N_T)?,
            mpp: kv.get_or("mpp", Self::DEFAULT_MPP)?,
            loss: kv.get_or("loss", default_loss)?,
            label_names: kv.get_list("labels")?.unwrap_or_default(),
        };
        spec.validate().map_err(|e| Error::validation(format!("{}: {e}", kv.origin())))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let mut pairs = vec![
            ("task_id", self.task_id.clone()),
            ("class_count", self.class_count.to_string()),
            ("n_t", self.n_t.to_string()),
            ("mpp", self.mpp.to_string()),
            ("loss", self.loss.to_string()),
        ];
        if !self.label_names.is_empty() {
            pairs.push(("labels", self.label_names.join(",")));
        }
        crate::kv::render(&pairs)
    }
}

/// Metadata describing a tile feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorDescriptor {
    pub name: String,
    pub dim: usize,
    pub notes: String,
}

impl ExtractorDescriptor {
    pub fn new(name: &str, dim: usize, notes: &str) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("extractor dimension must be positive"));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            notes: notes.to_string(),
        })
    }

    pub fn to_kv_string(&self) -> String {
        crate::kv::render(&[
            ("name", self.name.clone()),
            ("dim", self.dim.to_string()),
            ("notes", self.notes.clone()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideManifestEntry {
    pub slide_id: String,
    pub case_id: String,
    pub label: usize,
    /// Relative to the manifest's directory.
    pub feature_path: PathBuf,
}

/// A loaded manifest together with the directory feature paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<SlideManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path, spec: &TaskSpec) -> Result<Self> {
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries: load_manifest(path, spec)?,
        })
    }

    pub fn feature_path(&self, e: &SlideManifestEntry) -> PathBuf {
        self.root.join(&e.feature_path)
    }

    pub fn read_all(&self) -> Result<Vec<FeatureMatrix>> {
        self.entries
            .iter()
            .map(|e| read_features(&self.feature_path(e)))
            .collect()
    }
}

const MANIFEST_COLUMNS: [&str; 4] = ["slide_id", "case_id", "label", "feature_path"];

pub fn load_manifest(path: &Path, spec: &TaskSpec) -> Result<Vec<SlideManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, spec, &path.display().to_string())
}

pub fn parse_manifest(text: &str, spec: &TaskSpec, origin: &str) -> Result<Vec<SlideManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| Error::validation(format!("{origin}: {e}"));
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut col = [0usize; 4];
    for (slot, name) in col.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::validation(format!("{origin}: missing column `{name}`")))?;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let slide_id = field(col[0]).to_string();
        let case_id = field(col[1]).to_string();
        if slide_id.is_empty() || case_id.is_empty() {
            return Err(Error::validation(format!(
                "{origin}: row {row}: empty slide_id or case_id"
            )));
        }
        let label_str = field(col[2]);
        let label = label_str
            .parse::<usize>()
            .ok()
            .filter(|&l| l < spec.class_count)
            .ok_or_else(|| {
                Error::validation(format!(
                    "{origin}: row {row}: unknown label `{label_str}` for {} classes",
                    spec.class_count
                ))
            })?;
        if !seen.insert(slide_id.clone()) {
            return Err(Error::validation(format!(
                "{origin}: row {row}: duplicate slide_id `{slide_id}`"
            )));
        }
        out.push(SlideManifestEntry {
            slide_id,
            case_id,
            label,
            feature_path: PathBuf::from(field(col[3])),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[SlideManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::validation(format!("{}: {e}", path.display()));
    w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    for e in entries {
        w.write_record([
            e.slide_id.as_str(),
            e.case_id.as_str(),
            &e.label.to_string(),
            &e.feature_path.to_string_lossy(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    write_atomic(path, &bytes)
}
