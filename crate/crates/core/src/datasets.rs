//! Seeded dataset generators: interleaved half-moons and synthetic dense
//! scenes, plus labeled/unlabeled splits.

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::photometric::{apply_photometric, PhotometricRanges};

/// Points on two interleaved half circles, labels 1 and 2.
#[derive(Debug, Clone, PartialEq)]
pub struct MoonsDataset {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    pub labeled: Vec<usize>,
}

impl MoonsDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `[N, 2]` tensor of the selected points (all when `indices` is None).
    pub fn tensor(&self, indices: Option<&[usize]>) -> Tensor {
        let rows: Vec<f64> = match indices {
            Some(ix) => ix.iter().flat_map(|&i| self.points[i]).collect(),
            None => self.points.iter().flatten().copied().collect(),
        };
        Tensor::new(vec![rows.len() / 2, 2], rows).expect("two columns")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Number of labeled points per moon in [`two_moons`].
pub const MOONS_LABELED_PER_CLASS: usize = 3;

/// `n/2` points per moon at evenly spaced angles `t_k = πk/(m−1)`: moon 1
/// at `(cos t, sin t)`, moon 2 at `(1 − cos t, 0.5 − sin t)`, each jittered
/// by isotropic Gaussian noise. Three points per moon, evenly spaced in `t`,
/// are marked labeled.
pub fn two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<MoonsDataset> {
    if !n.is_multiple_of(2) || n == 0 {
        return Err(Error::invalid(format!("two_moons needs a positive even n, got {n}")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid(format!("noise_sd must be nonnegative, got {noise_sd}")));
    }
    let m = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sd).expect("finite nonnegative sd");
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for moon in 0..2u8 {
        for k in 0..m {
            let t = if m > 1 { PI * k as f64 / (m - 1) as f64 } else { 0.0 };
            let (x, y) = match moon {
                0 => (t.cos(), t.sin()),
                _ => (1.0 - t.cos(), 0.5 - t.sin()),
            };
            let (ex, ey) = if noise_sd > 0.0 {
                (normal.sample(&mut rng), normal.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            points.push([x + ex, y + ey]);
            labels.push(moon + 1);
        }
    }
    let per_class = MOONS_LABELED_PER_CLASS.min(m);
    let mut labeled = Vec::with_capacity(2 * per_class);
    for moon in 0..2 {
        for j in 0..per_class {
            let k = (((j as f64 + 0.5) * m as f64 / per_class as f64).round() as usize).min(m - 1);
            labeled.push(moon * m + k);
        }
    }
    Ok(MoonsDataset {
        points,
        labels,
        labeled,
    })
}

/// `floor(n·p)` distinct indices drawn uniformly without replacement, sorted.
pub fn make_split(n: usize, proportion: f64, seed: u64) -> Result<Vec<usize>> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::invalid(format!("label proportion {proportion} outside (0, 1]")));
    }
    // tolerance guards against products like 0.29·100 = 28.999…
    let k = ((n as f64 * proportion) + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "proportion {proportion} of {n} items selects nothing"
        )));
    }
    if k >= n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ix = index::sample(&mut rng, n, k).into_vec();
    ix.sort_unstable();
    Ok(ix)
}

/// Appearance parameters of [`synth_scenes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneStyle {
    /// Base colour of shape classes 2, 3, … (class 1 is background).
    pub class_colors: Vec<[f64; 3]>,
    /// Per-shape uniform colour jitter, per channel.
    pub jitter: f64,
    /// Shapes per scene, inclusive.
    pub shapes: (usize, usize),
    /// Shape radius range as fractions of the image height.
    pub radius: (f64, f64),
    /// Standard deviation of per-pixel sensor noise.
    pub noise_sd: f64,
    /// Grey level range of the two background gradient endpoints.
    pub background_level: (f64, f64),
    /// Per-channel deviation of a background endpoint from its grey level.
    pub background_tint: f64,
    /// Optional per-scene lighting change applied before sensor noise.
    pub illumination: Option<PhotometricRanges>,
}

impl Default for SceneStyle {
    fn default() -> Self {
        SceneStyle {
            class_colors: vec![[0.85, 0.2, 0.2], [0.2, 0.75, 0.3], [0.25, 0.3, 0.9], [0.9, 0.8, 0.2]],
            jitter: 0.1,
            shapes: (2, 5),
            radius: (1.0 / 16.0, 1.0 / 5.0),
            noise_sd: 0.02,
            background_level: (0.5, 0.5),
            background_tint: 0.35,
            illumination: None,
        }
    }
}

impl SceneStyle {
    pub fn classes(&self) -> usize {
        self.class_colors.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.background_level;
        let ok = !self.class_colors.is_empty()
            && self.class_colors.len() < 255
            && self.shapes.0 <= self.shapes.1
            && 0.0 < self.radius.0
            && self.radius.0 < self.radius.1
            && (0.0..=1.0).contains(&lo)
            && (lo..=1.0).contains(&hi)
            && self.background_tint >= 0.0
            && self.jitter >= 0.0
            && self.noise_sd >= 0.0;
        if !ok {
            return Err(Error::invalid("degenerate scene style"));
        }
        match &self.illumination {
            Some(r) => r.validate(),
            None => Ok(()),
        }
    }
}

/// Images with dense labels in `1..=classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
    pub classes: usize,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Classes (1-based) present in the given scenes.
    pub fn classes_present(&self, indices: &[usize]) -> Vec<u8> {
        let mut seen = vec![false; self.classes + 1];
        for &i in indices {
            for &y in self.labels[i].data() {
                seen[y as usize] = true;
            }
        }
        (1..=self.classes as u8).filter(|&c| seen[c as usize]).collect()
    }

    /// A labeled split of proportion `p` that contains every class. Seeds
    /// `seed, seed+1, …` are tried in order.
    pub fn labeled_split(&self, proportion: f64, seed: u64) -> Result<Vec<usize>> {
        let everything = self.classes_present(&(0..self.len()).collect::<Vec<_>>());
        for attempt in 0..100 {
            let split = make_split(self.len(), proportion, seed.wrapping_add(attempt))?;
            if self.classes_present(&split) == everything {
                return Ok(split);
            }
        }
        Err(Error::invalid(format!(
            "no split of proportion {proportion} covers every class"
        )))
    }
}

/// Shape that paints a class region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Pixels whose centre is strictly closer than `r` to `(cx, cy)`.
    Disk { cx: f64, cy: f64, r: f64 },
    /// Pixels with `x0 ≤ x < x1`, `y0 ≤ y < y1`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                dx * dx + dy * dy < r * r
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

/// Paint `shape` with `color` and `class` onto a scene.
pub fn paint(image: &mut Image, labels: &mut LabelMap, shape: &Shape, class: u8, color: [f64; 3]) {
    for y in 0..image.height() {
        for x in 0..image.width() {
            if shape.contains(y, x) {
                image.pixel_mut(y, x).copy_from_slice(&color);
                labels.set(y, x, class);
            }
        }
    }
}

fn scene<R: Rng>(rng: &mut R, h: usize, w: usize, style: &SceneStyle) -> (Image, LabelMap) {
    let mut endpoint = || -> [f64; 3] {
        let (lo, hi) = style.background_level;
        let g = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let t = style.background_tint;
        std::array::from_fn(|_| (g + rng.random_range(-t..=t)).clamp(0.0, 1.0))
    };
    let c0 = endpoint();
    let c1 = endpoint();
    let angle = rng.random_range(0.0..2.0 * PI);
    let (ux, uy) = (angle.cos(), angle.sin());
    let span = (w as f64 * ux.abs() + h as f64 * uy.abs()).max(1.0);
    let mut image = Image::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let proj = (x as f64 - w as f64 / 2.0) * ux + (y as f64 - h as f64 / 2.0) * uy;
            let s = (proj / span + 0.5).clamp(0.0, 1.0);
            for (k, v) in image.pixel_mut(y, x).iter_mut().enumerate() {
                *v = (1.0 - s) * c0[k] + s * c1[k];
            }
        }
    }
    let mut labels = LabelMap::filled(h, w, 1);
    let count = rng.random_range(style.shapes.0..=style.shapes.1);
    for _ in 0..count {
        let class_ix = rng.random_range(0..style.class_colors.len());
        let base = style.class_colors[class_ix];
        let color: [f64; 3] =
            std::array::from_fn(|k| (base[k] + rng.random_range(-style.jitter..=style.jitter)).clamp(0.0, 1.0));
        let r = rng.random_range(style.radius.0..style.radius.1) * h as f64;
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let shape = if rng.random_bool(0.5) {
            Shape::Disk { cx, cy, r }
        } else {
            let half_w = r * rng.random_range(0.6..1.4);
            let half_h = r * rng.random_range(0.6..1.4);
            let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
            Shape::Rect {
                x0: clip(cx - half_w, w),
                y0: clip(cy - half_h, h),
                x1: clip(cx + half_w, w),
                y1: clip(cy + half_h, h),
            }
        };
        paint(&mut image, &mut labels, &shape, class_ix as u8 + 2, color);
    }
    if let Some(ranges) = &style.illumination {
        let params = ranges.sample(rng);
        image = apply_photometric(&image, &params).expect("three channels");
    }
    if style.noise_sd > 0.0 {
        let normal = Normal::new(0.0, style.noise_sd).expect("positive sd");
        for v in image.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    (image, labels)
}

/// `n` scenes: a smooth two-colour gradient background (class 1) with 2–5
/// discs and rectangles painted over it in jittered class colours.
pub fn synth_scenes(n: usize, height: usize, width: usize, seed: u64) -> Result<SceneDataset> {
    synth_scenes_with(n, height, width, seed, &SceneStyle::default())
}

pub fn synth_scenes_with(n: usize, height: usize, width: usize, seed: u64, style: &SceneStyle) -> Result<SceneDataset> {
    if height < 16 || width < 16 {
        return Err(Error::invalid(format!(
            "scenes must be at least 16x16, got {height}x{width}"
        )));
    }
    style.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (images, labels) = (0..n).map(|_| scene(&mut rng, height, width, style)).unzip();
    Ok(SceneDataset {
        images,
        labels,
        classes: style.classes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_closed_form() {
        let d = two_moons(200, 0.0, 1).unwrap();
        assert_eq!(d.points[0], [1.0, 0.0]);
        assert_eq!(d.points[100], [0.0, 0.5]);
        assert!((d.points[99][0] + 1.0).abs() < 1e-15 && d.points[99][1].abs() < 1e-15);
        assert_eq!(d.labels.iter().filter(|&&y| y == 1).count(), 100);
        assert_eq!(d.labeled.len(), 6);
        assert_eq!(d.labels_of(&d.labeled), vec![1, 1, 1, 2, 2, 2]);
        assert!(two_moons(201, 0.1, 1).is_err());
        assert!(two_moons(10, -1.0, 1).is_err());
    }

    #[test]
    fn moons_are_seeded() {
        assert_eq!(two_moons(100, 0.08, 3).unwrap(), two_moons(100, 0.08, 3).unwrap());
        assert_ne!(two_moons(100, 0.08, 3).unwrap(), two_moons(100, 0.08, 4).unwrap());
        let d = two_moons(10, 0.08, 3).unwrap();
        assert_eq!(d.tensor(Some(&[1, 2])).shape(), &[2, 2]);
        assert_eq!(d.tensor(None).data()[2..4], d.points[1]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        assert_eq!(make_split(10, 1.0, 0).unwrap(), (0..10).collect::<Vec<_>>());
        let s = make_split(2975, 1.0 / 8.0, 0).unwrap();
        assert_eq!(s.len(), 371);
        assert!(s.windows(2).all(|w| w[0] < w[1]) && *s.last().unwrap() < 2975);
        assert_eq!(make_split(100, 0.29, 5).unwrap().len(), 29);
        assert_eq!(make_split(200, 0.125, 5).unwrap(), make_split(200, 0.125, 5).unwrap());
        for k in 0..10 {
            assert_ne!(
                make_split(200, 0.125, 2 * k).unwrap(),
                make_split(200, 0.125, 2 * k + 1).unwrap()
            );
        }
        assert!(make_split(5, 0.1, 0).is_err());
        assert!(make_split(5, 0.0, 0).is_err());
        assert!(make_split(5, 1.5, 0).is_err());
    }

    #[test]
    fn disk_membership_is_strict() {
        let mut im = Image::zeros(64, 64, 3);
        let mut labels = LabelMap::filled(64, 64, 1);
        let disk = Shape::Disk {
            cx: 32.0,
            cy: 32.0,
            r: 8.0,
        };
        paint(&mut im, &mut labels, &disk, 3, [1.0, 0.0, 0.0]);
        for y in 0..64 {
            for x in 0..64 {
                let d2 = (x as f64 - 32.0).powi(2) + (y as f64 - 32.0).powi(2);
                assert_eq!(labels.get(y, x) == 3, d2 < 64.0, "({x},{y})");
            }
        }
        assert_eq!(labels.get(32, 40), 1);
        assert_eq!(labels.get(32, 39), 3);
    }

    #[test]
    fn scenes_are_seeded_and_well_formed() {
        let a = synth_scenes(6, 32, 24, 9).unwrap();
        assert_eq!(a, synth_scenes(6, 32, 24, 9).unwrap());
        assert_ne!(a.images, synth_scenes(6, 32, 24, 10).unwrap().images);
        for (im, y) in a.images.iter().zip(&a.labels) {
            assert_eq!((im.height(), im.width(), y.height(), y.width()), (32, 24, 32, 24));
            assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(y.data().iter().all(|&c| (1..=5).contains(&c)));
            assert!(y.data().contains(&1));
        }
        assert!(synth_scenes(1, 15, 32, 0).is_err());
    }

    #[test]
    fn labeled_split_covers_all_classes() {
        let d = synth_scenes(40, 32, 32, 1).unwrap();
        let split = d.labeled_split(0.125, 3).unwrap();
        assert_eq!(split.len(), 5);
        assert_eq!(
            d.classes_present(&split),
            d.classes_present(&(0..40).collect::<Vec<_>>())
        );
    }

    #[test]
    fn style_knobs_alter_colours_not_layout() {
        let plain = SceneStyle {
            noise_sd: 0.0,
            ..SceneStyle::default()
        };
        let lit = SceneStyle {
            illumination: Some(PhotometricRanges::default()),
            ..plain.clone()
        };
        let grey = SceneStyle {
            background_tint: 0.0,
            ..plain.clone()
        };
        let a = synth_scenes_with(5, 20, 20, 4, &plain).unwrap();
        let b = synth_scenes_with(5, 20, 20, 4, &lit).unwrap();
        // lighting is drawn after the first layout, so later scenes diverge
        assert_eq!(a.labels[0], b.labels[0]);
        assert_ne!(a.images, b.images);
        assert!(b
            .images
            .iter()
            .all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        // an untinted background is grey wherever no shape was painted
        let g = synth_scenes_with(5, 20, 20, 4, &grey).unwrap();
        for (im, y) in g.images.iter().zip(&g.labels) {
            for (px, &c) in im.data().chunks(3).zip(y.data()) {
                if c == 1 {
                    assert!((px[0] - px[1]).abs() < 1e-12 && (px[1] - px[2]).abs() < 1e-12);
                }
            }
        }
        let bad = SceneStyle {
            background_level: (0.8, 0.2),
            ..SceneStyle::default()
        };
        assert!(synth_scenes_with(1, 16, 16, 0, &bad).is_err());
        let json = serde_json::to_string(&lit).unwrap();
        assert_eq!(serde_json::from_str::<SceneStyle>(&json).unwrap(), lit);
        assert!(serde_json::from_str::<SceneStyle>(r#"{"tint":1}"#).is_err());
    }
}
