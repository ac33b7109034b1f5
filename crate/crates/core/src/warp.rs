//! Dense displacement fields, bilinear backward warping with validity masks,
//! and forward splatting.

use std::sync::Arc;

use crate::autodiff::{SparseResample, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tps::{TpsWarp, Vec2};

/// Sample positions closer than this to an integer are snapped onto it, so
/// fitted warps that are integer translations up to rounding resample exactly.
const SNAP_EPS: f64 = 1e-9;

/// Accumulated splat weight below which a target pixel is left empty.
pub const SPLAT_WEIGHT_FLOOR: f64 = 1e-6;

/// Per-pixel `(dx, dy)` displacement over an `height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    height: usize,
    width: usize,
    displacement: Vec<Vec2>,
}

impl WarpField {
    pub fn new(height: usize, width: usize, displacement: Vec<Vec2>) -> Result<Self> {
        if displacement.len() != height * width {
            return Err(Error::invalid("displacement field size does not match grid"));
        }
        if displacement.iter().any(|d| !d.x.is_finite() || !d.y.is_finite()) {
            return Err(Error::invalid("displacement field must be finite"));
        }
        Ok(WarpField {
            height,
            width,
            displacement,
        })
    }

    pub fn constant(height: usize, width: usize, d: Vec2) -> Self {
        WarpField {
            height,
            width,
            displacement: vec![d; height * width],
        }
    }

    /// Evaluate `warp` at every pixel centre.
    pub fn from_tps(warp: &TpsWarp, height: usize, width: usize) -> Self {
        let mut displacement = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                displacement.push(warp.eval(Vec2::new(x as f64, y as f64)));
            }
        }
        WarpField {
            height,
            width,
            displacement,
        }
    }

    pub fn negated(&self) -> Self {
        WarpField {
            height: self.height,
            width: self.width,
            displacement: self.displacement.iter().map(|d| -*d).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, y: usize, x: usize) -> Vec2 {
        self.displacement[y * self.width + x]
    }
}

/// Binary map of pixels whose bilinear samples stayed inside the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != height * width {
            return Err(Error::invalid("mask size does not match grid"));
        }
        Ok(ValidityMask { height, width, valid })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        ValidityMask {
            height,
            width,
            valid: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        ValidityMask {
            height: self.height,
            width: self.width,
            valid: self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// 0/1 values, one per pixel.
    pub fn to_values(&self) -> Vec<f64> {
        self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// Stack masks into a `[B, H, W]` tensor of 0/1.
    pub fn stack(masks: &[&ValidityMask]) -> Result<Tensor> {
        let first = masks.first().ok_or_else(|| Error::invalid("empty mask batch"))?;
        let mut data = Vec::with_capacity(masks.len() * first.valid.len());
        for m in masks {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::invalid("masks in a batch must share dimensions"));
            }
            data.extend(m.to_values());
        }
        Tensor::new(vec![masks.len(), first.height, first.width], data)
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

/// Bilinear neighbours of `p`: `(x, y, weight)` for the four surrounding
/// pixel centres, including neighbours with zero weight.
fn bilinear_neighbours(p: Vec2) -> [(i64, i64, f64); 4] {
    let (px, py) = (snap(p.x), snap(p.y));
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
}

/// Sampling taps for `output(q) = input(q − field(q))` with zero padding,
/// plus the validity mask: a pixel is valid iff every neighbour with
/// non-zero weight lies inside the source grid.
pub fn backward_taps(field: &WarpField, in_height: usize, in_width: usize) -> (SparseResample, ValidityMask) {
    let (h, w) = (field.height, field.width);
    let mut taps = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = Vec2::new(x as f64, y as f64) - field.at(y, x);
            let mut t = [(0u32, 0.0); 4];
            let mut ok = true;
            for (slot, (nx, ny, wt)) in t.iter_mut().zip(bilinear_neighbours(p)) {
                if wt == 0.0 {
                    continue;
                }
                if nx < 0 || ny < 0 || nx >= in_width as i64 || ny >= in_height as i64 {
                    ok = false;
                    continue;
                }
                *slot = ((ny as usize * in_width + nx as usize) as u32, wt);
            }
            taps.push(t);
            valid.push(ok);
        }
    }
    (
        SparseResample::new(1, in_height * in_width, h, w, taps),
        ValidityMask {
            height: h,
            width: w,
            valid,
        },
    )
}

fn check_grid(image: &Image, field: &WarpField) -> Result<()> {
    if (image.height(), image.width()) != (field.height, field.width) {
        return Err(Error::invalid(format!(
            "image is {}x{} but warp field is {}x{}",
            image.height(),
            image.width(),
            field.height,
            field.width
        )));
    }
    Ok(())
}

/// Backward warp with bilinear sampling and zero padding.
pub fn backward_warp_field(image: &Image, field: &WarpField) -> Result<(Image, ValidityMask)> {
    check_grid(image, field)?;
    let (taps, mask) = backward_taps(field, image.height(), image.width());
    Ok((apply_taps(image, &taps), mask))
}

/// Backward warp by a fitted TPS: `output(q') = input(q' − f̃(q'))`.
pub fn backward_warp(image: &Image, warp: &TpsWarp) -> Result<(Image, ValidityMask)> {
    let field = WarpField::from_tps(warp, image.height(), image.width());
    backward_warp_field(image, &field)
}

/// Resample a single image through precomputed taps.
pub fn apply_taps(image: &Image, taps: &SparseResample) -> Image {
    let c = image.channels();
    let mut out = Image::zeros(taps.out_height, taps.out_width, c);
    for (o, dst) in out.data_mut().chunks_exact_mut(c.max(1)).enumerate() {
        for &(idx, wt) in taps.taps_for(0, o) {
            if wt == 0.0 {
                continue;
            }
            let src = &image.data()[idx as usize * c..(idx as usize + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    out
}

/// Wrap per-image taps for use on a recorded `[B, H, W, C]` tensor.
pub fn batch_taps(parts: &[SparseResample]) -> Arc<SparseResample> {
    Arc::new(SparseResample::stack(parts))
}

/// Forward splatting: every source pixel `q` (optionally only those with
/// `sources[q]`) is distributed bilinearly to `q + field(q)`. Targets are
/// normalised by their accumulated weight where it exceeds
/// [`SPLAT_WEIGHT_FLOOR`] and left at zero elsewhere.
pub fn forward_splat_field(
    image: &Image,
    field: &WarpField,
    sources: Option<&ValidityMask>,
) -> Result<(Image, Vec<f64>)> {
    check_grid(image, field)?;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut acc = Image::zeros(h, w, c);
    let mut weights = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if sources.is_some_and(|m| !m.get(y, x)) {
                continue;
            }
            let target = Vec2::new(x as f64, y as f64) + field.at(y, x);
            let value = image.pixel(y, x);
            for (nx, ny, wt) in bilinear_neighbours(target) {
                if wt == 0.0 || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                weights[ny * w + nx] += wt;
                for (d, s) in acc.pixel_mut(ny, nx).iter_mut().zip(value) {
                    *d += wt * s;
                }
            }
        }
    }
    for (i, &wt) in weights.iter().enumerate() {
        let px = &mut acc.data_mut()[i * c..(i + 1) * c];
        if wt > SPLAT_WEIGHT_FLOOR {
            px.iter_mut().for_each(|v| *v /= wt);
        } else {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok((acc, weights))
}

/// Forward splat by a fitted forward TPS warp `f`: sources move to `q + f(q)`.
pub fn forward_splat(image: &Image, warp: &TpsWarp) -> Result<(Image, Vec<f64>)> {
    let field = WarpField::from_tps(warp, image.height(), image.width());
    forward_splat_field(image, &field, None)
}
