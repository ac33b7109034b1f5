//! Two-dimensional thin-plate-spline warps.
//!
//! A warp maps a point `q` to the displacement of its correspondence,
//! `f(q) = A·[1; q] + Σ_i w_i φ(‖q − c_i‖)` with `φ(r) = r² ln r`. Fitting
//! enforces `f(c_i) = d_i` together with the side conditions `Σ w_i = 0` and
//! `Σ w_i c_i = 0`, which select the minimum-bending-energy interpolant.
//!
//! Points are `(x, y)` in pixel units with pixel centres on integer
//! coordinates.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn linf(self) -> f64 {
        self.x.abs().max(self.y.abs())
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// TPS radial basis `r² ln r`, continuously extended with `φ(0) = 0`.
pub fn radial_basis(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpsWarp {
    control_points: Vec<Vec2>,
    /// Rows produce the x and y displacement from `[1, qx, qy]`.
    affine: [[f64; 3]; 2],
    /// One `(w_x, w_y)` coefficient pair per control point.
    coeffs: Vec<Vec2>,
}

impl TpsWarp {
    /// The warp that displaces nothing.
    pub fn zero(control_points: &[Vec2]) -> Self {
        TpsWarp {
            control_points: control_points.to_vec(),
            affine: [[0.0; 3]; 2],
            coeffs: vec![Vec2::ZERO; control_points.len()],
        }
    }

    /// Solve the `(n+3)×(n+3)` TPS system for both output coordinates.
    pub fn fit(control_points: &[Vec2], displacements: &[Vec2]) -> Result<Self> {
        let n = control_points.len();
        if n < 3 {
            return Err(Error::invalid(format!("TPS needs at least 3 control points, got {n}")));
        }
        if displacements.len() != n {
            return Err(Error::invalid(format!(
                "{n} control points but {} displacements",
                displacements.len()
            )));
        }
        let m = n + 3;
        let mut system = vec![0.0; m * m];
        for (i, ci) in control_points.iter().enumerate() {
            for (j, cj) in control_points.iter().enumerate() {
                system[i * m + j] = radial_basis((*ci - *cj).norm());
            }
            for (k, v) in [1.0, ci.x, ci.y].into_iter().enumerate() {
                system[i * m + n + k] = v;
                system[(n + k) * m + i] = v;
            }
        }
        let mut rhs_x = vec![0.0; m];
        let mut rhs_y = vec![0.0; m];
        for (i, d) in displacements.iter().enumerate() {
            rhs_x[i] = d.x;
            rhs_y[i] = d.y;
        }
        let lu = LuFactors::factor(system, m)?;
        let sx = lu.solve(&rhs_x);
        let sy = lu.solve(&rhs_y);
        Ok(TpsWarp {
            control_points: control_points.to_vec(),
            affine: [[sx[n], sx[n + 1], sx[n + 2]], [sy[n], sy[n + 1], sy[n + 2]]],
            coeffs: (0..n).map(|i| Vec2::new(sx[i], sy[i])).collect(),
        })
    }

    pub fn eval(&self, q: Vec2) -> Vec2 {
        let [ax, ay] = &self.affine;
        let mut out = Vec2::new(ax[0] + ax[1] * q.x + ax[2] * q.y, ay[0] + ay[1] * q.x + ay[2] * q.y);
        for (c, w) in self.control_points.iter().zip(&self.coeffs) {
            let phi = radial_basis((q - *c).norm());
            out.x += w.x * phi;
            out.y += w.y * phi;
        }
        out
    }

    pub fn control_points(&self) -> &[Vec2] {
        &self.control_points
    }

    pub fn affine(&self) -> [[f64; 3]; 2] {
        self.affine
    }

    pub fn coeffs(&self) -> &[Vec2] {
        &self.coeffs
    }

    /// Largest absolute entry of the non-affine coefficient matrix.
    pub fn coeffs_linf(&self) -> f64 {
        self.coeffs.iter().map(|w| w.linf()).fold(0.0, f64::max)
    }
}

/// Control points and displacements of the reverse map: each control point
/// moves to `c_i + d_i`. Backward warping samples `q' − f̃(q')`, so the
/// fitted reverse warp carries `c_i' ↦ d_i` and lands `c_i'` back on `c_i`.
pub fn reverse_warp_params(control_points: &[Vec2], displacements: &[Vec2]) -> (Vec<Vec2>, Vec<Vec2>) {
    let moved = control_points.iter().zip(displacements).map(|(c, d)| *c + *d).collect();
    (moved, displacements.to_vec())
}

/// Centres of the four image quadrants, row-major:
/// top-left, top-right, bottom-left, bottom-right.
pub fn quadrant_centers(height: usize, width: usize) -> [Vec2; 4] {
    let (h, w) = (height as f64, width as f64);
    [
        Vec2::new(0.25 * w, 0.25 * h),
        Vec2::new(0.75 * w, 0.25 * h),
        Vec2::new(0.25 * w, 0.75 * h),
        Vec2::new(0.75 * w, 0.75 * h),
    ]
}

/// Displacements `γ = (d_1..d_4)` attached to the quadrant centres of an
/// `height × width` image. The centres are the control points of the
/// backward-sampling warp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub displacements: [Vec2; 4],
    pub height: usize,
    pub width: usize,
}

impl GeometricParams {
    pub fn identity(height: usize, width: usize) -> Self {
        GeometricParams {
            displacements: [Vec2::ZERO; 4],
            height,
            width,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.displacements.iter().all(|d| *d == Vec2::ZERO)
    }

    /// Warp used for backward sampling: fitted at the quadrant centres.
    pub fn backward_warp(&self) -> Result<TpsWarp> {
        TpsWarp::fit(&quadrant_centers(self.height, self.width), &self.displacements)
    }

    /// The corresponding forward warp, fitted at the source points `c_i' − d_i`.
    pub fn forward_warp(&self) -> Result<TpsWarp> {
        let sources: Vec<Vec2> = quadrant_centers(self.height, self.width)
            .iter()
            .zip(&self.displacements)
            .map(|(c, d)| *c - *d)
            .collect();
        TpsWarp::fit(&sources, &self.displacements)
    }

    pub fn max_linf(&self) -> f64 {
        self.displacements.iter().map(|d| d.linf()).fold(0.0, f64::max)
    }
}

/// Default displacement bound for an image of height `h`.
pub fn default_radius(height: usize) -> f64 {
    0.05 * height as f64
}

/// Draw four displacements from `N(0, r·I₂)` (covariance `r·I`, so each
/// coordinate has standard deviation `√r`) and clamp every coordinate to
/// `[−r, r]`, bounding the L∞ norm by `r`.
pub fn sample_geometric<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, r: f64) -> Result<GeometricParams> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("displacement bound must be positive, got {r}")));
    }
    let normal = Normal::new(0.0, r.sqrt()).expect("positive standard deviation");
    let mut displacements = [Vec2::ZERO; 4];
    for d in displacements.iter_mut() {
        let x = normal.sample(rng).clamp(-r, r);
        let y = normal.sample(rng).clamp(-r, r);
        *d = Vec2::new(x, y);
    }
    Ok(GeometricParams {
        displacements,
        height,
        width,
    })
}

/// LU factorisation with partial pivoting of a dense row-major matrix.
struct LuFactors {
    lu: Vec<f64>,
    perm: Vec<usize>,
    n: usize,
}

impl LuFactors {
    fn factor(mut a: Vec<f64>, n: usize) -> Result<Self> {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) =
                (k..n)
                    .map(|i| (i, a[i * n + k].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= 1e-12 * scale {
                return Err(Error::SingularSystem(format!(
                    "pivot {pivot:e} at column {k}; control points coincide or are collinear"
                )));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let diag = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / diag;
                a[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
        }
        Ok(LuFactors { lu: a, perm, n })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}
