//! Tissue detection and tile-grid extraction on plain raster images.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Row-major raster with 1 (gray) or 3 (RGB) channels, values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::validation(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected: width * height * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Raster {
        let mut data = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let start = (row * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Raster {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }

    /// Loads an 8-bit PNG; alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        let (channels, bytes, w, h) = match img.color().channel_count() {
            1 | 2 => {
                let g = img.into_luma8();
                let (w, h) = g.dimensions();
                (1, g.into_raw(), w, h)
            }
            _ => {
                let c = img.into_rgb8();
                let (w, h) = c.dimensions();
                (3, c.into_raw(), w, h)
            }
        };
        Raster::new(
            w as usize,
            h as usize,
            channels,
            bytes.into_iter().map(f32::from).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }
}

/// Binary tissue mask at reduced resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Reads a mask image; pixels brighter than mid-gray are tissue.
    pub fn load_png(path: &Path) -> Result<Self> {
        let r = Raster::load_png(path)?;
        let data = (0..r.width * r.height)
            .map(|i| {
                let px = &r.data[i * r.channels..(i + 1) * r.channels];
                px.iter().sum::<f32>() / r.channels as f32 > 127.5
            })
            .collect();
        Mask::new(r.width, r.height, data)
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&b| if b { 255.0 } else { 0.0 }).collect(),
        }
    }
}

/// Source of tissue masks.
pub trait MaskProvider: Sync {
    /// Mask for `image` at `1 / downsample` of its resolution (dims rounded up).
    fn mask(&self, image: &Raster, downsample: usize) -> Result<Mask>;
}

/// Global Otsu threshold on a per-pixel tissue score.
#[derive(Debug, Clone, Copy, Default)]
pub struct OtsuMaskProvider;

impl MaskProvider for OtsuMaskProvider {
    fn mask(&self, image: &Raster, downsample: usize) -> Result<Mask> {
        tissue_mask_otsu(image, downsample)
    }
}

/// Uses a precomputed mask as-is.
#[derive(Debug, Clone)]
pub struct FixedMaskProvider(pub Mask);

impl MaskProvider for FixedMaskProvider {
    fn mask(&self, image: &Raster, downsample: usize) -> Result<Mask> {
        check_mask_shape(image.width, image.height, &self.0, downsample)?;
        Ok(self.0.clone())
    }
}

/// Darkness or saturation, whichever is larger. Background glass is bright and gray.
fn tissue_score(px: &[f32]) -> f64 {
    if px.len() == 1 {
        return 255.0 - f64::from(px[0]);
    }
    let (r, g, b) = (f64::from(px[0]), f64::from(px[1]), f64::from(px[2]));
    let lum = 0.299 * r + 0.587 * g + 0.114 * b;
    let sat = r.max(g).max(b) - r.min(g).min(b);
    (255.0 - lum).max(sat)
}

/// Otsu threshold over a 256-bin histogram; `None` when only one bin is populated.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t);
        }
    }
    Some(best.1)
}

/// Tissue mask by global thresholding of block-averaged tissue scores.
///
/// Each mask cell averages the score over its `downsample × downsample`
/// footprint (clipped at the image border). Cells scoring above the Otsu
/// threshold are tissue; an image without contrast yields an empty mask.
pub fn tissue_mask_otsu(image: &Raster, downsample: usize) -> Result<Mask> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::validation("zero-area image"));
    }
    if downsample == 0 {
        return Err(Error::validation("mask downsample must be positive"));
    }
    let mw = image.width.div_ceil(downsample);
    let mh = image.height.div_ceil(downsample);
    let mut scores = vec![0.0f64; mw * mh];
    for my in 0..mh {
        for mx in 0..mw {
            let (x0, y0) = (mx * downsample, my * downsample);
            let (x1, y1) = (
                (x0 + downsample).min(image.width),
                (y0 + downsample).min(image.height),
            );
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += tissue_score(image.pixel(x, y));
                }
            }
            scores[my * mw + mx] = s / ((x1 - x0) * (y1 - y0)) as f64;
        }
    }
    let mut hist = [0u64; 256];
    let bins: Vec<usize> = scores
        .iter()
        .map(|s| s.round().clamp(0.0, 255.0) as usize)
        .collect();
    for &b in &bins {
        hist[b] += 1;
    }
    let data = match otsu_threshold(&hist) {
        Some(t) => bins.iter().map(|&b| b > t).collect(),
        None => vec![false; mw * mh],
    };
    Mask::new(mw, mh, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TilingConfig {
    pub tile_px: usize,
    pub mpp_in: f64,
    pub mpp_out: f64,
    pub min_tissue: f64,
    /// Mask cells per side of one image pixel block at output resolution.
    pub mask_downsample: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            tile_px: 224,
            mpp_in: 0.5,
            mpp_out: 0.5,
            min_tissue: 0.60,
            mask_downsample: 8,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_px == 0 {
            return Err(Error::validation("tile_px must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_tissue) {
            return Err(Error::validation("min_tissue must lie in [0, 1]"));
        }
        if self.mask_downsample == 0 {
            return Err(Error::validation("mask_downsample must be positive"));
        }
        if !(self.mpp_in > 0.0 && self.mpp_out > 0.0) {
            return Err(Error::validation("mpp values must be positive"));
        }
        if self.mpp_out < self.mpp_in * (1.0 - 1e-9) {
            return Err(Error::validation("mpp_out below mpp_in would require upsampling"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(&["tile_px", "mpp_in", "mpp_out", "min_tissue", "mask_downsample"])?;
        let d = Self::default();
        let cfg = Self {
            tile_px: kv.get_or("tile_px", d.tile_px)?,
            mpp_in: kv.get_or("mpp_in", d.mpp_in)?,
            mpp_out: kv.get_or("mpp_out", d.mpp_out)?,
            min_tissue: kv.get_or("min_tissue", d.min_tissue)?,
            mask_downsample: kv.get_or("mask_downsample", d.mask_downsample)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileRecord {
    pub x: u32,
    pub y: u32,
    pub tissue_fraction: f64,
}

fn check_mask_shape(width: usize, height: usize, mask: &Mask, downsample: usize) -> Result<()> {
    let (ew, eh) = (width.div_ceil(downsample), height.div_ceil(downsample));
    if mask.width != ew || mask.height != eh {
        return Err(Error::validation(format!(
            "mask is {}x{}, expected {ew}x{eh} for a {width}x{height} image at downsample {downsample}",
            mask.width, mask.height
        )));
    }
    Ok(())
}

/// Number of image pixels in `[lo, hi)` covered by each mask cell, as `(cell, count)`.
fn cell_overlaps(lo: usize, hi: usize, f: usize) -> impl Iterator<Item = (usize, usize)> {
    (lo / f..hi.div_ceil(f)).map(move |c| {
        let a = (c * f).max(lo);
        let b = ((c + 1) * f).min(hi);
        (c, b - a)
    })
}

/// Grid tiles (anchored at the origin, edge remainders dropped) whose tissue
/// fraction reaches `cfg.min_tissue`, in row-major order.
///
/// The fraction is the share of tile pixels whose nearest-neighbor mask cell is tissue.
pub fn enumerate_tiles(width: usize, height: usize, mask: &Mask, cfg: &TilingConfig) -> Result<Vec<TileRecord>> {
    cfg.validate()?;
    let f = cfg.mask_downsample;
    check_mask_shape(width, height, mask, f)?;
    let t = cfg.tile_px;
    let (nx, ny) = (width / t, height / t);
    let area = (t * t) as f64;
    let rows: Vec<Vec<TileRecord>> = (0..ny)
        .into_par_iter()
        .map(|ty| {
            let y0 = ty * t;
            let row_cells: Vec<(usize, usize)> = cell_overlaps(y0, y0 + t, f).collect();
            (0..nx)
                .filter_map(|tx| {
                    let x0 = tx * t;
                    let mut count = 0usize;
                    for &(my, hy) in &row_cells {
                        for (mx, wx) in cell_overlaps(x0, x0 + t, f) {
                            if mask.get(mx, my) {
                                count += hy * wx;
                            }
                        }
                    }
                    let frac = count as f64 / area;
                    (frac >= cfg.min_tissue).then_some(TileRecord {
                        x: x0 as u32,
                        y: y0 as u32,
                        tissue_fraction: frac,
                    })
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Box-filter downsample from `mpp_in` to `mpp_out`.
///
/// Output pixel `i` averages the source interval `[i·k, (i+1)·k)` with
/// fractional edge weights, where `k = mpp_out / mpp_in`.
pub fn resample_to_mpp(image: &Raster, mpp_in: f64, mpp_out: f64) -> Result<Raster> {
    if !(mpp_in > 0.0 && mpp_out > 0.0) {
        return Err(Error::validation("mpp values must be positive"));
    }
    let k = mpp_out / mpp_in;
    if k < 1.0 - 1e-12 {
        return Err(Error::validation(format!(
            "upsampling from {mpp_in} to {mpp_out} mpp is not supported"
        )));
    }
    if (k - 1.0).abs() <= 1e-12 {
        return Ok(image.clone());
    }
    let ow = (image.width as f64 / k).floor() as usize;
    let oh = (image.height as f64 / k).floor() as usize;
    let weights = |n: usize| -> Vec<Vec<(usize, f64)>> {
        (0..n)
            .map(|i| {
                let (a, b) = (i as f64 * k, (i + 1) as f64 * k);
                (a.floor() as usize..b.ceil() as usize)
                    .map(|s| (s, (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0)))
                    .filter(|&(_, w)| w > 0.0)
                    .collect()
            })
            .collect()
    };
    let (wx, wy) = (weights(ow), weights(oh));
    let c = image.channels;
    let norm = k * k;
    let mut data = vec![0.0f32; ow * oh * c];
    data.par_chunks_mut(ow * c.max(1))
        .enumerate()
        .for_each(|(oy, row)| {
            for (ox, out) in row.chunks_mut(c).enumerate() {
                let mut acc = [0.0f64; 3];
                for &(sy, w1) in &wy[oy] {
                    for &(sx, w2) in &wx[ox] {
                        let px = image.pixel(sx, sy);
                        for ch in 0..c {
                            acc[ch] += w1 * w2 * f64::from(px[ch]);
                        }
                    }
                }
                for ch in 0..c {
                    out[ch] = (acc[ch] / norm) as f32;
                }
            }
        });
    Ok(Raster {
        width: ow,
        height: oh,
        channels: c,
        data,
    })
}

/// Resample, mask and enumerate tiles for one slide image.
pub fn tile_image(image: &Raster, cfg: &TilingConfig, masks: &dyn MaskProvider) -> Result<(Raster, Vec<TileRecord>)> {
    cfg.validate()?;
    let scaled = resample_to_mpp(image, cfg.mpp_in, cfg.mpp_out)?;
    let mask = masks.mask(&scaled, cfg.mask_downsample)?;
    let tiles = enumerate_tiles(scaled.width, scaled.height, &mask, cfg)?;
    Ok((scaled, tiles))
}
