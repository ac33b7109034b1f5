//! Per-pixel photometric perturbation: brightness shift, saturation scale,
//! hue rotation, contrast scale and channel permutation, applied in that
//! order. Values are clamped to `[0, 1]` once, after contrast.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    /// Added to every channel.
    pub brightness: f64,
    /// Multiplies HSV saturation.
    pub saturation: f64,
    /// Added to HSV hue, degrees.
    pub hue: f64,
    /// Multiplies every channel.
    pub contrast: f64,
    /// Output channel `k` takes input channel `permutation[k]`.
    pub permutation: [usize; 3],
}

impl PhotometricParams {
    pub const IDENTITY: PhotometricParams = PhotometricParams {
        brightness: 0.0,
        saturation: 1.0,
        hue: 0.0,
        contrast: 1.0,
        permutation: [0, 1, 2],
    };

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &p in &self.permutation {
            if p > 2 || seen[p] {
                return Err(Error::invalid(format!(
                    "{:?} is not a channel permutation",
                    self.permutation
                )));
            }
            seen[p] = true;
        }
        if !(self.saturation > 0.0 && self.contrast > 0.0) {
            return Err(Error::invalid("saturation and contrast factors must be positive"));
        }
        Ok(())
    }

    /// Transform one RGB triple.
    pub fn apply_pixel(&self, rgb: [f64; 3]) -> [f64; 3] {
        let mut p = rgb.map(|v| v + self.brightness);
        if self.saturation != 1.0 || self.hue != 0.0 {
            let (h, s, v) = rgb_to_hsv(p);
            let s = (s * self.saturation).clamp(0.0, 1.0);
            p = hsv_to_rgb((h + self.hue).rem_euclid(360.0), s, v);
        }
        let p = p.map(|v| (v * self.contrast).clamp(0.0, 1.0));
        self.permutation.map(|k| p[k])
    }
}

/// Sampling ranges for [`PhotometricParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricRanges {
    pub brightness: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: (f64, f64),
    pub contrast: (f64, f64),
    pub permute_channels: bool,
}

impl Default for PhotometricRanges {
    fn default() -> Self {
        PhotometricRanges {
            brightness: (-0.25, 0.25),
            saturation: (0.25, 2.0),
            hue: (-36.0, 36.0),
            contrast: (0.25, 2.0),
            permute_channels: true,
        }
    }
}

impl PhotometricRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("saturation", self.saturation),
            ("hue", self.hue),
            ("contrast", self.contrast),
        ] {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.saturation.0 <= 0.0 || self.contrast.0 <= 0.0 {
            return Err(Error::Config("saturation and contrast ranges must be positive".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PhotometricParams {
        let mut uniform = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let brightness = uniform(self.brightness);
        let saturation = uniform(self.saturation);
        let hue = uniform(self.hue);
        let contrast = uniform(self.contrast);
        let mut permutation = [0, 1, 2];
        if self.permute_channels {
            permutation.shuffle(rng);
        }
        PhotometricParams {
            brightness,
            saturation,
            hue,
            contrast,
            permutation,
        }
    }
}

/// Draw parameters from the default ranges.
pub fn sample_photometric<R: Rng + ?Sized>(rng: &mut R) -> PhotometricParams {
    PhotometricRanges::default().sample(rng)
}

/// Apply `params` to every pixel of an RGB image.
pub fn apply_photometric(image: &Image, params: &PhotometricParams) -> Result<Image> {
    if image.channels() != 3 {
        return Err(Error::invalid(format!(
            "photometric perturbation needs 3 channels, got {}",
            image.channels()
        )));
    }
    params.validate()?;
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let t = params.apply_pixel([px[0], px[1], px[2]]);
        px.copy_from_slice(&t);
    }
    Ok(out)
}

/// Hexcone RGB → (hue in degrees, saturation, value).
fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let v = r.max(g).max(b);
    let delta = v - r.min(g).min(b);
    if v <= 0.0 || delta == 0.0 {
        return (0.0, 0.0, v);
    }
    let s = delta / v;
    let h = if v == r {
        60.0 * ((g - b) / delta)
    } else if v == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h.rem_euclid(360.0), s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    if c == 0.0 {
        return [v, v, v];
    }
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identity_is_bitwise_noop() {
        let im = random_image(1, 8, 8);
        assert_eq!(apply_photometric(&im, &PhotometricParams::IDENTITY).unwrap(), im);
    }

    #[test]
    fn brightness_on_black() {
        let im = Image::zeros(3, 3, 3);
        let p = PhotometricParams {
            brightness: 0.25,
            ..PhotometricParams::IDENTITY
        };
        let out = apply_photometric(&im, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn gray_is_fixed_under_saturation_and_hue() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = PhotometricParams {
                saturation: rng.random_range(0.25..2.0),
                hue: rng.random_range(-36.0..36.0),
                ..PhotometricParams::IDENTITY
            };
            assert_eq!(p.apply_pixel([0.4, 0.4, 0.4]), [0.4, 0.4, 0.4]);
        }
    }

    #[test]
    fn composition_order_brightness_before_contrast() {
        let p = PhotometricParams {
            brightness: 0.2,
            contrast: 2.0,
            ..PhotometricParams::IDENTITY
        };
        // (0.5 + 0.2) * 2 = 1.4 before the clamp
        assert_eq!(p.apply_pixel([0.5, 0.5, 0.5]), [1.0, 1.0, 1.0]);
        let q = PhotometricParams {
            brightness: 0.1,
            contrast: 0.5,
            ..PhotometricParams::IDENTITY
        };
        // brightness first gives 0.3; contrast first would give 0.25
        assert!((q.apply_pixel([0.5, 0.5, 0.5])[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn hue_rotation_and_permutation() {
        let p = PhotometricParams {
            hue: 120.0,
            ..PhotometricParams::IDENTITY
        };
        let out = p.apply_pixel([1.0, 0.0, 0.0]);
        assert!((out[0]).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12 && out[2].abs() < 1e-12);
        let p = PhotometricParams {
            permutation: [2, 0, 1],
            ..PhotometricParams::IDENTITY
        };
        assert_eq!(p.apply_pixel([0.1, 0.2, 0.3]), [0.3, 0.1, 0.2]);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let rgb = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let (h, s, v) = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(h, s, v);
            for k in 0..3 {
                assert!((back[k] - rgb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_stays_in_unit_range() {
        let im = random_image(4, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = sample_photometric(&mut rng);
            let out = apply_photometric(&im, &p).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pixels_are_independent() {
        let im = random_image(6, 5, 4);
        let p = sample_photometric(&mut ChaCha8Rng::seed_from_u64(7));
        let out = apply_photometric(&im, &p).unwrap();
        // reverse the row order before and after
        let flip = |src: &Image| {
            let mut o = src.clone();
            for y in 0..5 {
                for x in 0..4 {
                    o.pixel_mut(y, x).copy_from_slice(src.pixel(4 - y, x));
                }
            }
            o
        };
        assert_eq!(flip(&apply_photometric(&flip(&im), &p).unwrap()), out);
    }

    #[test]
    fn sampler_ranges_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1_000_000;
        let mut sum_s = 0.0;
        let mut perms = std::collections::HashSet::new();
        for _ in 0..n {
            let p = sample_photometric(&mut rng);
            assert!((-0.25..=0.25).contains(&p.brightness));
            assert!((0.25..=2.0).contains(&p.saturation));
            assert!((0.25..=2.0).contains(&p.contrast));
            assert!((-36.0..=36.0).contains(&p.hue));
            sum_s += p.saturation;
            perms.insert(p.permutation);
        }
        assert!((sum_s / n as f64 - 1.125).abs() < 0.01);
        assert_eq!(perms.len(), 6);
        let a = sample_photometric(&mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_photometric(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(apply_photometric(&Image::zeros(2, 2, 1), &PhotometricParams::IDENTITY).is_err());
        let p = PhotometricParams {
            permutation: [0, 0, 1],
            ..PhotometricParams::IDENTITY
        };
        assert!(apply_photometric(&Image::zeros(2, 2, 3), &p).is_err());
    }
}
