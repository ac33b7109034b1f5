use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseResample, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::photometric::{apply_photometric, PhotometricParams, PhotometricRanges};
use crate::tps::{sample_geometric, GeometricParams, Vec2};
use crate::warp::{apply_taps, backward_taps, batch_taps, ValidityMask, WarpField};

/// τ = (γ, φ): the input perturbation `T^G_γ ∘ T^P_φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationParams {
    pub geometric: GeometricParams,
    pub photometric: PhotometricParams,
}

/// Result of perturbing one image.
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub image: Image,
    pub mask: ValidityMask,
    /// Backward displacement field of the geometric part.
    pub field: WarpField,
    /// The geometric part as a resampling, reusable on predictions.
    pub taps: SparseResample,
}

impl PerturbationParams {
    pub fn identity(height: usize, width: usize) -> Self {
        PerturbationParams {
            geometric: GeometricParams::identity(height, width),
            photometric: PhotometricParams::IDENTITY,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.geometric.is_identity() && self.photometric == PhotometricParams::IDENTITY
    }

    pub fn field(&self) -> Result<WarpField> {
        let (h, w) = (self.geometric.height, self.geometric.width);
        if self.geometric.is_identity() {
            return Ok(WarpField::constant(h, w, Vec2::ZERO));
        }
        Ok(WarpField::from_tps(&self.geometric.backward_warp()?, h, w))
    }

    /// Photometric perturbation first, then the backward TPS warp.
    pub fn apply(&self, image: &Image) -> Result<Perturbed> {
        let (h, w) = (self.geometric.height, self.geometric.width);
        if (image.height(), image.width()) != (h, w) {
            return Err(Error::invalid(format!(
                "perturbation sampled for {h}x{w} applied to a {}x{} image",
                image.height(),
                image.width()
            )));
        }
        let field = self.field()?;
        let (taps, mask) = backward_taps(&field, h, w);
        let colored = if self.photometric == PhotometricParams::IDENTITY {
            image.clone()
        } else {
            apply_photometric(image, &self.photometric)?
        };
        Ok(Perturbed {
            image: apply_taps(&colored, &taps),
            mask,
            field,
            taps,
        })
    }
}

/// Which parts of τ are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// Photometric only.
    Ph,
    /// Geometric only.
    Tps,
    #[serde(alias = "phtps")]
    PhTps,
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ph" => Ok(PerturbationKind::Ph),
            "tps" => Ok(PerturbationKind::Tps),
            "phtps" | "ph-tps" => Ok(PerturbationKind::PhTps),
            _ => Err(Error::Config(format!(
                "unknown perturbation kind {s:?} (ph, tps, phtps)"
            ))),
        }
    }
}

/// Sampling configuration for dense perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSampler {
    pub kind: PerturbationKind,
    /// Displacement bound as a fraction of the image height.
    pub radius_fraction: f64,
    pub photometric: PhotometricRanges,
}

impl Default for PerturbationSampler {
    fn default() -> Self {
        PerturbationSampler {
            kind: PerturbationKind::PhTps,
            radius_fraction: 0.05,
            photometric: PhotometricRanges::default(),
        }
    }
}

impl PerturbationSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, height: usize, width: usize) -> Result<PerturbationParams> {
        let geometric = match self.kind {
            PerturbationKind::Ph => GeometricParams::identity(height, width),
            _ => sample_geometric(rng, height, width, self.radius_fraction * height as f64)?,
        };
        let photometric = match self.kind {
            PerturbationKind::Tps => PhotometricParams::IDENTITY,
            _ => self.photometric.sample(rng),
        };
        Ok(PerturbationParams { geometric, photometric })
    }
}

/// A perturbation for a whole batch.
#[derive(Debug, Clone)]
pub enum Perturbation {
    /// Additive input noise with the shape of the batch (point inputs).
    Noise(Tensor),
    /// One τ per image of an NHWC batch.
    Dense(Vec<PerturbationParams>),
}

/// A perturbation applied to a concrete batch.
pub(crate) struct Prepared {
    pub input: Tensor,
    pub warp: Option<Arc<SparseResample>>,
    pub parts: Vec<Perturbed>,
}

impl Prepared {
    /// Row validity over every axis but the last.
    pub fn mask_rows(&self, rows: usize) -> Vec<bool> {
        if self.parts.is_empty() {
            return vec![true; rows];
        }
        self.parts
            .iter()
            .flat_map(|p| p.mask.as_slice().iter().copied())
            .collect()
    }
}

pub(crate) fn prepare(x: &Tensor, tau: &Perturbation) -> Result<Prepared> {
    match tau {
        Perturbation::Noise(eps) => {
            if eps.shape() != x.shape() {
                return Err(Error::shape("perturb", x.shape(), eps.shape()));
            }
            let data = x.data().iter().zip(eps.data()).map(|(a, b)| a + b).collect();
            Ok(Prepared {
                input: Tensor::new(x.shape().to_vec(), data)?,
                warp: None,
                parts: Vec::new(),
            })
        }
        Perturbation::Dense(params) => {
            let images = Image::unstack(x)?;
            if images.len() != params.len() {
                return Err(Error::invalid(format!(
                    "{} perturbations for a batch of {}",
                    params.len(),
                    images.len()
                )));
            }
            let parts = images
                .iter()
                .zip(params)
                .map(|(im, p)| p.apply(im))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = parts.iter().map(|p| &p.image).collect();
            let input = Image::stack(&refs)?;
            let taps: Vec<SparseResample> = parts.iter().map(|p| p.taps.clone()).collect();
            Ok(Prepared {
                input,
                warp: Some(batch_taps(&taps)),
                parts,
            })
        }
    }
}
