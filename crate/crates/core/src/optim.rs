//! Adam and the epoch/mini-batch training loop.

use rand::seq::SliceRandom;

use crate::abmil::{accumulate_gradient, forward_bag, loss, AbmilModel, Bag};
use crate::error::{Error, Result};
use crate::feature_store::LossKind;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut AbmilModel, grad: &AbmilModel, state: &mut AdamState) -> Result<()> {
    let n = model.params().len();
    if grad.params().len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: grad.params().len(),
        });
    }
    if let Some(i) = grad.params().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at parameter {i} (step {})",
            state.step + 1
        )));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let params = model.params_mut();
    for i in 0..n {
        let g = grad.params()[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `(epoch, model)` pairs in ascending epoch order.
    pub snapshots: Vec<(usize, AbmilModel)>,
    /// Mean training loss of each epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains for `max(snapshot_epochs)` epochs and returns copies of the model
/// after each requested epoch.
///
/// Each epoch visits the bags in an order drawn from stream `epoch` of `seed`;
/// gradients are averaged over each batch, including a final partial batch.
pub fn train_epochs(
    mut model: AbmilModel,
    bags: &[Bag],
    labels: &[usize],
    kind: LossKind,
    adam: AdamConfig,
    snapshot_epochs: &[usize],
    seed: u64,
) -> Result<TrainOutcome> {
    if bags.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    if bags.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: bags.len(),
            found: labels.len(),
        });
    }
    if adam.batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let mut wanted: Vec<usize> = snapshot_epochs.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if wanted.first() == Some(&0) {
        return Err(Error::validation("epoch 0 is not a valid snapshot"));
    }
    let epochs = wanted.last().copied().unwrap_or(0);

    let mut state = AdamState::new(adam, model.params().len());
    let mut grad = AbmilModel::zeros(model.layout());
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut snapshots = Vec::with_capacity(wanted.len());
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut next = wanted.iter().peekable();

    for epoch in 1..=epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(seed, epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(adam.batch_size) {
            grad.params_mut().fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let trace = forward_bag(&model, &bags[i])?;
                let l = loss(trace.probs(), labels[i], kind);
                if !l.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss on bag {i} in epoch {epoch}"
                    )));
                }
                total += l;
                accumulate_gradient(&model, &trace, labels[i], kind, scale, &mut grad);
            }
            adam_step(&mut model, &grad, &mut state)?;
        }
        epoch_losses.push(total / bags.len() as f64);
        if next.peek() == Some(&&epoch) {
            next.next();
            snapshots.push((epoch, model.clone()));
        }
    }
    Ok(TrainOutcome {
        snapshots,
        epoch_losses,
        steps: state.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abmil::{Layout, Tensor};
    use ndarray::Array2;
    use rand::Rng;

    fn scalar_model(w: f64) -> AbmilModel {
        let lay = Layout::new(1, 1, 1).unwrap();
        let mut m = AbmilModel::zeros(lay);
        m.params_mut()[0] = w;
        m
    }

    fn one_hot_grad(g: f64) -> AbmilModel {
        scalar_model(g)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = scalar_model(0.0);
        let mut st = AdamState::new(AdamConfig::default(), m.params().len());
        adam_step(&mut m, &one_hot_grad(1.0), &mut st).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((m.params()[0] - expected).abs() < 1e-18);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_model() {
        let mut m = scalar_model(0.7);
        let before = m.clone();
        let mut st = AdamState::new(AdamConfig::default(), m.params().len());
        let zero = AbmilModel::zeros(m.layout());
        adam_step(&mut m, &zero, &mut st).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn two_steps_hand_computed() {
        let (g, lr, b1, b2, eps) = (0.5f64, 1e-3, 0.9f64, 0.999f64, 1e-8);
        let mut m = scalar_model(1.0);
        let mut st = AdamState::new(AdamConfig::default(), m.params().len());
        adam_step(&mut m, &one_hot_grad(g), &mut st).unwrap();
        adam_step(&mut m, &one_hot_grad(g), &mut st).unwrap();
        // m1 = 0.1 g, m2 = 0.19 g; v1 = 0.001 g², v2 = 0.001999 g²
        let m2 = (1.0 - b1) * b1 * g + (1.0 - b1) * g;
        let v2 = (1.0 - b2) * b2 * g * g + (1.0 - b2) * g * g;
        assert!((st.m[0] - m2).abs() < 1e-15);
        assert!((st.v[0] - v2).abs() < 1e-15);
        let step1 = lr * g / ((g * g).sqrt() + eps);
        let step2 = lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((m.params()[0] - (1.0 - step1 - step2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut m = scalar_model(0.0);
        let mut st = AdamState::new(AdamConfig::default(), m.params().len());
        let err = adam_step(&mut m, &one_hot_grad(f64::NAN), &mut st).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    fn toy_set(n: usize, d: usize, seed: u64) -> (Vec<Bag>, Vec<usize>) {
        let mut r = rng::stream(seed, 0);
        let mut bags = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let rows = Array2::from_shape_fn((6, d), |(t, j)| {
                let shift = if y == 1 && t == 0 && j == 0 { 3.0 } else { 0.0 };
                r.random_range(-1.0..1.0) + shift
            });
            bags.push(Bag::from_rows(rows));
            labels.push(y);
        }
        (bags, labels)
    }

    #[test]
    fn batch_counts() {
        let (bags, labels) = toy_set(33, 3, 1);
        let m = AbmilModel::init_with_hidden(3, 8, 1, 0).unwrap();
        let out = train_epochs(m.clone(), &bags, &labels, LossKind::BinaryCe, AdamConfig::default(), &[1], 5)
            .unwrap();
        assert_eq!(out.steps, 3);
        let out = train_epochs(m, &bags[..1], &labels[..1], LossKind::BinaryCe, AdamConfig::default(), &[1], 5)
            .unwrap();
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn snapshots_are_deterministic_and_ordered() {
        let (bags, labels) = toy_set(20, 3, 2);
        let m = AbmilModel::init_with_hidden(3, 8, 1, 0).unwrap();
        let run = || {
            train_epochs(m.clone(), &bags, &labels, LossKind::BinaryCe, AdamConfig::default(), &[3, 1, 5], 9)
                .unwrap()
        };
        let (a, b) = (run(), run());
        let epochs: Vec<usize> = a.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(epochs, vec![1, 3, 5]);
        for ((_, x), (_, y)) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(x.params(), y.params());
        }
        assert_ne!(a.snapshots[0].1, a.snapshots[2].1);
    }

    #[test]
    fn loss_halves_on_separable_data() {
        let (bags, labels) = toy_set(32, 4, 3);
        let m = AbmilModel::init(4, 1, 1).unwrap();
        let out = train_epochs(m, &bags, &labels, LossKind::BinaryCe, AdamConfig::default(), &[100], 4)
            .unwrap();
        let first = out.epoch_losses[0];
        let last = *out.epoch_losses.last().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(out.snapshots[0].1.tensor(Tensor::WCls).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_set_rejected() {
        let m = AbmilModel::init(2, 1, 1).unwrap();
        assert!(train_epochs(m, &[], &[], LossKind::BinaryCe, AdamConfig::default(), &[1], 0).is_err());
    }
}
