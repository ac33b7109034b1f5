use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{PerturbationKind, PerturbationParams, PerturbationSampler};
use crate::error::Result;
use crate::image::LabelMap;
use crate::netpbm::{load_ppm, save_pgm, save_ppm};
use crate::photometric::PhotometricRanges;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpOptions {
    pub seed: u64,
    /// Use the identity perturbation instead of sampling one.
    pub identity: bool,
    pub kind: PerturbationKind,
    pub radius_fraction: f64,
    pub photometric: PhotometricRanges,
}

impl Default for WarpOptions {
    fn default() -> Self {
        WarpOptions {
            seed: 0,
            identity: false,
            kind: PerturbationKind::PhTps,
            radius_fraction: 0.05,
            photometric: PhotometricRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpReport {
    pub tau: PerturbationParams,
    pub valid_pixels: usize,
}

/// Perturbs one PPM image, writing the result and its validity mask
/// (255 valid, 0 invalid).
pub fn run_warp_cli(input: &Path, output: &Path, mask_path: &Path, options: &WarpOptions) -> Result<WarpReport> {
    let image = load_ppm(input)?;
    let (h, w) = (image.height(), image.width());
    let tau = if options.identity {
        PerturbationParams::identity(h, w)
    } else {
        let sampler = PerturbationSampler {
            kind: options.kind,
            radius_fraction: options.radius_fraction,
            photometric: options.photometric,
        };
        sampler.sample(&mut ChaCha8Rng::seed_from_u64(options.seed), h, w)?
    };
    let perturbed = tau.apply(&image)?;
    save_ppm(output, &perturbed.image)?;
    let mask_bytes = perturbed
        .mask
        .as_slice()
        .iter()
        .map(|&v| if v { 255 } else { 0 })
        .collect();
    save_pgm(mask_path, &LabelMap::new(h, w, mask_bytes)?)?;
    Ok(WarpReport {
        tau,
        valid_pixels: perturbed.mask.count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use rand::Rng;

    fn random_ppm(dir: &Path, h: usize, w: usize) -> std::path::PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes: Vec<f64> = (0..h * w * 3).map(|_| f64::from(rng.random::<u8>()) / 255.0).collect();
        let path = dir.join("in.ppm");
        save_ppm(&path, &Image::new(h, w, 3, bytes).unwrap()).unwrap();
        path
    }

    #[test]
    fn identity_copies_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let input = random_ppm(dir.path(), 9, 13);
        let (out, mask) = (dir.path().join("o.ppm"), dir.path().join("m.pgm"));
        let opts = WarpOptions {
            identity: true,
            ..WarpOptions::default()
        };
        let report = run_warp_cli(&input, &out, &mask, &opts).unwrap();
        assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out).unwrap());
        assert!(crate::netpbm::load_pgm(&mask).unwrap().data().iter().all(|&v| v == 255));
        assert_eq!(report.valid_pixels, 9 * 13);
    }

    #[test]
    fn seeded_output_is_reproducible_and_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let input = random_ppm(dir.path(), 448, 40);
        let run = |name: &str| {
            let out = dir.path().join(format!("{name}.ppm"));
            let r = run_warp_cli(
                &input,
                &out,
                &dir.path().join(format!("{name}.pgm")),
                &WarpOptions::default(),
            )
            .unwrap();
            (r, std::fs::read(out).unwrap())
        };
        let (a, bytes_a) = run("a");
        let (b, bytes_b) = run("b");
        assert_eq!(a, b);
        assert_eq!(bytes_a, bytes_b);
        for d in a.tau.geometric.displacements {
            assert!(d.x.abs().max(d.y.abs()) <= 22.4);
        }
    }
}
