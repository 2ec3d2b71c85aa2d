//! Gated-attention multiple-instance aggregator.
//!
//! For a bag of tile embeddings `x_i` (only real, unpadded rows take part):
//!
//! ```text
//! h_i = x_i W_proj + b_proj
//! a_i = w_attn · (tanh(h_i V + b_V) ⊙ σ(h_i U + b_U)) + b_attn
//! α   = softmax(a)
//! z   = Σ α_i h_i
//! out = z W_cls + b_cls        (logistic for one output, softmax otherwise)
//! ```
//!
//! Parameters live in one flat `f64` buffer in declaration order, which is
//! also the checkpoint order.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::feature_store::{write_atomic, FeatureMatrix, LossKind};
use crate::rng;

/// Embedding width of the aggregator.
pub const HIDDEN: usize = 128;
/// Lower clamp applied to probabilities inside the log-likelihood.
pub const PROB_CLAMP: f64 = 1e-7;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ABM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub hidden: usize,
    pub c_out: usize,
}

/// Named parameter tensors in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    WProj,
    BProj,
    V,
    BV,
    U,
    BU,
    WAttn,
    BAttn,
    WCls,
    BCls,
}

impl Tensor {
    pub const ALL: [Tensor; 10] = [
        Tensor::WProj,
        Tensor::BProj,
        Tensor::V,
        Tensor::BV,
        Tensor::U,
        Tensor::BU,
        Tensor::WAttn,
        Tensor::BAttn,
        Tensor::WCls,
        Tensor::BCls,
    ];

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Tensor::BProj | Tensor::BV | Tensor::BU | Tensor::BAttn | Tensor::BCls
        )
    }
}

impl Layout {
    pub fn new(d: usize, hidden: usize, c_out: usize) -> Result<Self> {
        if d == 0 || hidden == 0 || c_out == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        Ok(Self { d, hidden, c_out })
    }

    /// `(rows, cols)` of a tensor; vectors have one row.
    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        let (d, h, c) = (self.d, self.hidden, self.c_out);
        match t {
            Tensor::WProj => (d, h),
            Tensor::V | Tensor::U => (h, h),
            Tensor::WCls => (h, c),
            Tensor::BProj | Tensor::BV | Tensor::BU | Tensor::WAttn => (1, h),
            Tensor::BAttn => (1, 1),
            Tensor::BCls => (1, c),
        }
    }

    pub fn range(&self, t: Tensor) -> Range<usize> {
        let mut start = 0;
        for u in Tensor::ALL {
            let (r, c) = self.shape(u);
            if u == t {
                return start..start + r * c;
            }
            start += r * c;
        }
        unreachable!()
    }

    pub fn len(&self) -> usize {
        Tensor::ALL
            .iter()
            .map(|&t| {
                let (r, c) = self.shape(t);
                r * c
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fan-in used for initialization of a weight tensor.
    fn fan_in(&self, t: Tensor) -> usize {
        match t {
            Tensor::WProj => self.d,
            _ => self.hidden,
        }
    }
}

/// Closed-form parameter count at the default hidden width.
pub fn parameter_count(d: usize, c_out: usize) -> usize {
    let h = HIDDEN;
    (d * h + h) + 2 * (h * h + h) + (h + 1) + (h * c_out + c_out)
}

/// Aggregator parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilModel {
    layout: Layout,
    params: Vec<f64>,
}

impl AbmilModel {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            params: vec![0.0; layout.len()],
        }
    }

    /// Uniform(±1/√fan_in) weights and zero biases, drawn from a stream keyed by `seed`.
    pub fn init(d: usize, c_out: usize, seed: u64) -> Result<Self> {
        Self::init_with_hidden(d, HIDDEN, c_out, seed)
    }

    pub fn init_with_hidden(d: usize, hidden: usize, c_out: usize, seed: u64) -> Result<Self> {
        let layout = Layout::new(d, hidden, c_out)?;
        let mut model = Self::zeros(layout);
        let mut r = rng::stream(seed, 0);
        for t in Tensor::ALL {
            if t.is_bias() {
                continue;
            }
            let bound = 1.0 / (layout.fan_in(t) as f64).sqrt();
            for w in model.tensor_mut(t) {
                *w = r.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_params(layout: Layout, params: Vec<f64>) -> Result<Self> {
        if params.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                found: params.len(),
            });
        }
        Ok(Self { layout, params })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.params[self.layout.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.layout.range(t);
        &mut self.params[r]
    }

    fn mat(&self, t: Tensor) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(self.layout.shape(t), self.tensor(t)).unwrap()
    }

    fn vec(&self, t: Tensor) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.tensor(t))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Rounds every parameter to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.layout.hidden != HIDDEN {
            return Err(Error::validation(format!(
                "checkpoints require hidden width {HIDDEN}"
            )));
        }
        let mut buf = Vec::with_capacity(12 + 4 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.layout.d as u32).to_le_bytes());
        buf.extend_from_slice(&(self.layout.c_out as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < 12 {
            return Err(fmt(bytes.len(), "truncated header".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let c_out = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let layout = Layout::new(d, HIDDEN, c_out).map_err(|e| fmt(4, e.to_string()))?;
        let expected = layout
            .len()
            .checked_mul(4)
            .and_then(|n| n.checked_add(12))
            .ok_or_else(|| fmt(4, "dimension overflow".into()))?;
        if bytes.len() != expected {
            return Err(fmt(
                bytes.len().min(expected),
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let params = bytes[12..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self { layout, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Real rows of a bag as a dense `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    rows: Array2<f64>,
    n_tiles: usize,
}

impl Bag {
    pub fn from_matrix(m: &FeatureMatrix) -> Self {
        let rows = Array2::from_shape_vec(
            (m.n_real(), m.dim()),
            m.real_values().iter().map(|&v| f64::from(v)).collect(),
        )
        .unwrap();
        Self {
            rows,
            n_tiles: m.n_tiles(),
        }
    }

    pub fn from_rows(rows: Array2<f64>) -> Self {
        let n_tiles = rows.nrows();
        Self { rows, n_tiles }
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn n_real(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Intermediates cached by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    x: Array2<f64>,
    hidden: Array2<f64>,
    tanh_gate: Array2<f64>,
    sigm_gate: Array2<f64>,
    attn_logits: Array1<f64>,
    attn: Array1<f64>,
    pooled: Array1<f64>,
    logits: Array1<f64>,
    probs: Array1<f64>,
    n_tiles: usize,
}

impl ForwardTrace {
    pub fn probs(&self) -> &[f64] {
        self.probs.as_slice().unwrap()
    }

    pub fn logits(&self) -> &[f64] {
        self.logits.as_slice().unwrap()
    }

    /// Attention logits over real rows.
    pub fn attention_logits(&self) -> &[f64] {
        self.attn_logits.as_slice().unwrap()
    }

    /// Attention weight per bag row; padding rows get exactly zero.
    pub fn attention(&self) -> Vec<f64> {
        let mut out = self.attn.to_vec();
        out.resize(self.n_tiles, 0.0);
        out
    }

    pub fn pooled(&self) -> &[f64] {
        self.pooled.as_slice().unwrap()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = v.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

fn output_probs(logits: &Array1<f64>) -> Array1<f64> {
    if logits.len() == 1 {
        logits.mapv(sigmoid)
    } else {
        softmax(logits)
    }
}

pub fn forward(model: &AbmilModel, bag: &FeatureMatrix) -> Result<(Vec<f64>, ForwardTrace)> {
    let trace = forward_bag(model, &Bag::from_matrix(bag))?;
    Ok((trace.probs.to_vec(), trace))
}

pub fn forward_bag(model: &AbmilModel, bag: &Bag) -> Result<ForwardTrace> {
    let lay = model.layout;
    if bag.dim() != lay.d {
        return Err(Error::DimensionMismatch {
            expected: lay.d,
            found: bag.dim(),
        });
    }
    if bag.n_real() == 0 {
        return Err(Error::EmptySlide);
    }
    let x = bag.rows.clone();
    let hidden = x.dot(&model.mat(Tensor::WProj)) + &model.vec(Tensor::BProj);
    let tanh_gate = (hidden.dot(&model.mat(Tensor::V)) + &model.vec(Tensor::BV)).mapv(f64::tanh);
    let sigm_gate = (hidden.dot(&model.mat(Tensor::U)) + &model.vec(Tensor::BU)).mapv(sigmoid);
    let gated = &tanh_gate * &sigm_gate;
    let attn_logits = gated.dot(&model.vec(Tensor::WAttn)) + model.tensor(Tensor::BAttn)[0];
    let attn = softmax(&attn_logits);
    let pooled = attn.dot(&hidden);
    let logits = pooled.dot(&model.mat(Tensor::WCls)) + &model.vec(Tensor::BCls);
    let probs = output_probs(&logits);
    Ok(ForwardTrace {
        x,
        hidden,
        tanh_gate,
        sigm_gate,
        attn_logits,
        attn,
        pooled,
        logits,
        probs,
        n_tiles: bag.n_tiles,
    })
}

/// Class probabilities for one bag (a single probability for binary heads).
pub fn predict(model: &AbmilModel, bag: &Bag) -> Result<Vec<f64>> {
    Ok(forward_bag(model, bag)?.probs.to_vec())
}

/// Negative log-likelihood with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss(probs: &[f64], label: usize, kind: LossKind) -> f64 {
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    match kind {
        LossKind::BinaryCe => {
            let p = clamp(probs[0]);
            if label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        }
        LossKind::MultiCe => -clamp(probs[label]).ln(),
    }
}

/// Gradient of the loss with respect to the output logits.
fn logit_grad(trace: &ForwardTrace, label: usize, kind: LossKind) -> Array1<f64> {
    match kind {
        LossKind::BinaryCe => Array1::from_elem(1, trace.probs[0] - label as f64),
        LossKind::MultiCe => {
            let mut g = trace.probs.clone();
            g[label] -= 1.0;
            g
        }
    }
}

/// Exact gradient of `loss(forward(bag), label)` for every parameter.
pub fn backward(model: &AbmilModel, trace: &ForwardTrace, label: usize, kind: LossKind) -> AbmilModel {
    let mut grad = AbmilModel::zeros(model.layout);
    accumulate_gradient(model, trace, label, kind, 1.0, &mut grad);
    grad
}

/// Adds `scale × ∂loss/∂θ` into `grad`.
pub fn accumulate_gradient(
    model: &AbmilModel,
    trace: &ForwardTrace,
    label: usize,
    kind: LossKind,
    scale: f64,
    grad: &mut AbmilModel,
) {
    let dlogits = logit_grad(trace, label, kind) * scale;
    let w_cls = model.mat(Tensor::WCls);

    // classifier head
    let d_wcls = outer(&trace.pooled.view(), &dlogits.view());
    add_into(grad.tensor_mut(Tensor::WCls), d_wcls.as_slice().unwrap());
    add_into(grad.tensor_mut(Tensor::BCls), dlogits.as_slice().unwrap());
    let d_pooled = w_cls.dot(&dlogits);

    // attention pooling
    let d_attn = trace.hidden.dot(&d_pooled);
    let s = trace.attn.dot(&d_attn);
    let d_alogits = &trace.attn * &(d_attn - s);

    let gated = &trace.tanh_gate * &trace.sigm_gate;
    add_into(
        grad.tensor_mut(Tensor::WAttn),
        gated.t().dot(&d_alogits).as_slice().unwrap(),
    );
    grad.tensor_mut(Tensor::BAttn)[0] += d_alogits.sum();

    // gates: dP = da ⊗ w
    let w_attn = model.vec(Tensor::WAttn);
    let d_gated = outer(&d_alogits.view(), &w_attn);
    let d_g1 = &d_gated * &trace.sigm_gate * &trace.tanh_gate.mapv(|t| 1.0 - t * t);
    let d_g2 = &d_gated * &trace.tanh_gate * &trace.sigm_gate.mapv(|s| s * (1.0 - s));
    let ht = trace.hidden.t();
    add_into(grad.tensor_mut(Tensor::V), ht.dot(&d_g1).as_slice().unwrap());
    add_into(grad.tensor_mut(Tensor::U), ht.dot(&d_g2).as_slice().unwrap());
    add_into(grad.tensor_mut(Tensor::BV), d_g1.sum_axis(Axis(0)).as_slice().unwrap());
    add_into(grad.tensor_mut(Tensor::BU), d_g2.sum_axis(Axis(0)).as_slice().unwrap());

    // projection
    let d_hidden = outer(&trace.attn.view(), &d_pooled.view())
        + d_g1.dot(&model.mat(Tensor::V).t())
        + d_g2.dot(&model.mat(Tensor::U).t());
    add_into(
        grad.tensor_mut(Tensor::WProj),
        trace.x.t().dot(&d_hidden).as_standard_layout().as_slice().unwrap(),
    );
    add_into(
        grad.tensor_mut(Tensor::BProj),
        d_hidden.sum_axis(Axis(0)).as_slice().unwrap(),
    );
}

fn outer(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    Array2::from_shape_fn((n, m), |(i, j)| a[i] * b[j])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn rand_bag(n: usize, d: usize, seed: u64) -> Bag {
        let mut r = rng::stream(seed, 9);
        Bag::from_rows(Array2::from_shape_fn((n, d), |_| r.random_range(-1.5..1.5)))
    }

    #[test]
    fn parameter_count_closed_form() {
        assert_eq!(parameter_count(1024, 1), 164_482);
        assert_eq!(parameter_count(768, 1), 131_714);
        assert_eq!(parameter_count(1, 1), 33_538);
        for (d, c) in [(1, 1), (16, 3), (1024, 1), (2560, 5)] {
            let m = AbmilModel::init(d, c, 0).unwrap();
            assert_eq!(m.params().len(), parameter_count(d, c));
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = AbmilModel::init(8, 1, 3).unwrap();
        assert_eq!(a, AbmilModel::init(8, 1, 3).unwrap());
        assert_ne!(a, AbmilModel::init(8, 1, 4).unwrap());
        assert!(a.tensor(Tensor::BProj).iter().all(|&b| b == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.tensor(Tensor::WProj).iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn singleton_bag_gets_full_attention() {
        let m = AbmilModel::init(4, 1, 1).unwrap();
        let t = forward_bag(&m, &rand_bag(1, 4, 2)).unwrap();
        assert_eq!(t.attention(), vec![1.0]);
    }

    #[test]
    fn padding_rows_are_ignored() {
        let m = AbmilModel::init(3, 1, 5).unwrap();
        let fm = FeatureMatrix::new(3, vec![(0, 0); 4], (0..12).map(|i| i as f32 / 7.0).collect())
            .unwrap();
        let (p, t) = forward(&m, &fm).unwrap();
        let (q, tq) = forward(&m, &fm.padded(6)).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-6);
        let att = tq.attention();
        assert_eq!(att.len(), 10);
        assert!(att[4..].iter().all(|&a| a == 0.0));
        assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(&att[..4], t.attention().as_slice());
    }

    #[test]
    fn rows_permute_freely() {
        let m = AbmilModel::init(5, 3, 8).unwrap();
        let bag = rand_bag(7, 5, 4);
        let mut rows = bag.rows().to_owned();
        rows.invert_axis(Axis(0));
        let p = predict(&m, &bag).unwrap();
        let q = predict(&m, &Bag::from_rows(rows)).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = AbmilModel::init(5, 1, 8).unwrap();
        assert!(matches!(
            forward_bag(&m, &rand_bag(3, 4, 1)),
            Err(Error::DimensionMismatch { expected: 5, found: 4 })
        ));
    }

    #[test]
    fn loss_values() {
        assert!((loss(&[0.5], 0, LossKind::BinaryCe) - 2f64.ln()).abs() < 1e-12);
        assert!((loss(&[0.5], 1, LossKind::BinaryCe) - 2f64.ln()).abs() < 1e-12);
        assert!((loss(&[0.2; 5], 3, LossKind::MultiCe) - 5f64.ln()).abs() < 1e-12);
        assert!((loss(&[0.9], 1, LossKind::BinaryCe) - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(loss(&[0.0], 1, LossKind::BinaryCe).is_finite());
    }

    #[test]
    fn bias_gradient_equals_residual_with_zero_head() {
        let mut m = AbmilModel::init(4, 1, 2).unwrap();
        m.tensor_mut(Tensor::WCls).fill(0.0);
        m.tensor_mut(Tensor::BCls)[0] = 0.3;
        let bag = Bag::from_rows(Array2::from_elem((3, 4), 0.5));
        let t = forward_bag(&m, &bag).unwrap();
        let p = sigmoid(0.3);
        assert!((t.probs()[0] - p).abs() < 1e-15);
        for y in [0, 1] {
            let g = backward(&m, &t, y, LossKind::BinaryCe);
            assert!((g.tensor(Tensor::BCls)[0] - (p - y as f64)).abs() < 1e-15);
            // nothing flows below a zero classifier
            assert!(g.tensor(Tensor::WProj).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = AbmilModel::init(6, 2, 11).unwrap();
        m.round_to_f32();
        let bytes = m.encode().unwrap();
        assert_eq!(bytes.len(), 12 + 4 * parameter_count(6, 2));
        assert_eq!(AbmilModel::decode(&bytes, Path::new("m")).unwrap(), m);
        let mut bad = bytes.clone();
        bad[3] = b'0';
        assert!(matches!(
            AbmilModel::decode(&bad, Path::new("m")),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(AbmilModel::decode(&bytes[..bytes.len() - 4], Path::new("m")).is_err());
    }
}
