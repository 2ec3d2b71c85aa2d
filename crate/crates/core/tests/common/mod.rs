#![allow(dead_code)]

use milbench::abmil::{backward, forward_bag, loss, AbmilModel, Bag};
use milbench::feature_store::LossKind;
use milbench::rng;
use milbench::tiler::{Mask, TileRecord, TilingConfig};
use ndarray::Array2;
use rand::Rng;

/// Loss of `model` on one labelled bag.
pub fn bag_loss(model: &AbmilModel, bag: &Bag, label: usize, kind: LossKind) -> f64 {
    loss(forward_bag(model, bag).unwrap().probs(), label, kind)
}

/// Largest relative error between the analytic gradient and central differences.
pub fn max_fd_error(model: &AbmilModel, bag: &Bag, label: usize, kind: LossKind, eps: f64) -> f64 {
    let trace = forward_bag(model, bag).unwrap();
    let analytic = backward(model, &trace, label, kind);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        let w = model.params()[i];
        probe.params_mut()[i] = w + eps;
        let up = bag_loss(&probe, bag, label, kind);
        probe.params_mut()[i] = w - eps;
        let down = bag_loss(&probe, bag, label, kind);
        probe.params_mut()[i] = w;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.params()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// A random gradient-check instance: small dims, random weights and rows.
pub fn random_instance(seed: u64, hidden: usize) -> (AbmilModel, Bag, usize, LossKind) {
    let mut r = rng::stream(seed, 0);
    let d = r.random_range(1..=5);
    let n = r.random_range(1..=6);
    let multi = r.random_bool(0.3);
    let (c_out, kind) = if multi {
        (r.random_range(3..=4), LossKind::MultiCe)
    } else {
        (1, LossKind::BinaryCe)
    };
    let mut model = AbmilModel::init_with_hidden(d, hidden, c_out, seed).unwrap();
    for p in model.params_mut() {
        *p += r.random_range(-0.3..0.3);
    }
    let rows = Array2::from_shape_fn((n, d), |_| r.random_range(-2.0..2.0));
    let label = if multi { r.random_range(0..c_out) } else { r.random_range(0..2) };
    (model, Bag::from_rows(rows), label, kind)
}

/// Tiles whose per-pixel mask fraction reaches the threshold, counted from a
/// full-resolution integral image of the upsampled mask.
pub fn brute_force_tiles(width: usize, height: usize, mask: &Mask, cfg: &TilingConfig) -> Vec<TileRecord> {
    let f = cfg.mask_downsample;
    let t = cfg.tile_px;
    let w1 = width + 1;
    let mut sat = vec![0u64; w1 * (height + 1)];
    for y in 0..height {
        let mut row = 0u64;
        for x in 0..width {
            row += u64::from(mask.get(x / f, y / f));
            sat[(y + 1) * w1 + x + 1] = sat[y * w1 + x + 1] + row;
        }
    }
    let mut out = Vec::new();
    for ty in 0..height / t {
        for tx in 0..width / t {
            let (x0, y0, x1, y1) = (tx * t, ty * t, (tx + 1) * t, (ty + 1) * t);
            let hits = sat[y1 * w1 + x1] + sat[y0 * w1 + x0] - sat[y0 * w1 + x1] - sat[y1 * w1 + x0];
            let frac = hits as f64 / (t * t) as f64;
            if frac >= cfg.min_tissue {
                out.push(TileRecord {
                    x: x0 as u32,
                    y: y0 as u32,
                    tissue_fraction: frac,
                });
            }
        }
    }
    out
}

/// Random blobby mask at mask resolution.
pub fn random_mask(seed: u64, w: usize, h: usize) -> Mask {
    let mut r = rng::stream(seed, 1);
    let blobs: Vec<(f64, f64, f64)> = (0..r.random_range(1..6))
        .map(|_| {
            (
                r.random_range(0.0..w as f64),
                r.random_range(0.0..h as f64),
                r.random_range(1.0..(w.max(h) as f64 / 2.0).max(2.0)),
            )
        })
        .collect();
    let noise = r.random_range(0.0..0.2);
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let inside = blobs.iter().any(|&(cx, cy, rad)| (x - cx).powi(2) + (y - cy).powi(2) <= rad * rad);
            inside ^ r.random_bool(noise)
        })
        .collect();
    Mask::new(w, h, data).unwrap()
}
