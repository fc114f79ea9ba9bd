//! Procedural leaves and analytic deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::deformation::DeformPair;
use super::shape_space::{ShapeDataset, ShapeSample};
use crate::error::{ensure, Result};
use crate::sdf::Mask2D;
use crate::shape::extract_base_mesh;

/// Blade outline: a superellipse along `x` with skew, serrated margin and a
/// wedge notch where the petiole attaches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeafParams {
    /// Half-width over half-length.
    pub aspect: f64,
    pub exponent: f64,
    /// Width change from base to tip, in `[-1, 1]`.
    pub skew: f64,
    pub serration: f64,
    pub teeth: u32,
    pub notch_depth: f64,
    pub notch_width: f64,
}

impl LeafParams {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            aspect: rng.gen_range(0.3..0.65),
            exponent: rng.gen_range(1.5..2.8),
            skew: rng.gen_range(-0.25..0.25),
            serration: rng.gen_range(0.0..0.05),
            teeth: rng.gen_range(6..=14),
            notch_depth: rng.gen_range(0.0..0.12),
            notch_width: rng.gen_range(0.0..0.08),
        }
    }

    fn inside(&self, u: f64, v: f64) -> bool {
        let t = (u - 0.5) / 0.4;
        let d = (v - 0.5) / 0.4;
        if t.abs() >= 1.0 {
            return false;
        }
        let profile = (1.0 - t.abs().powf(self.exponent)).powf(1.0 / self.exponent);
        let teeth = 1.0 + self.serration * (self.teeth as f64 * std::f64::consts::PI * t).sin();
        let h = self.aspect * profile * (1.0 + self.skew * t) * teeth;
        if d.abs() >= h {
            return false;
        }
        let from_base = t + 1.0;
        if self.notch_depth > 0.0 && from_base < self.notch_depth {
            let half = self.notch_width * (1.0 - from_base / self.notch_depth);
            if d.abs() < half {
                return false;
            }
        }
        true
    }
}

/// Rasterizes, normalizes to 90% of the UV square and cleans a leaf mask.
pub fn leaf_mask(params: &LeafParams, res: usize) -> Result<Mask2D> {
    let raw = Mask2D::from_fn(res, |u, v| params.inside(u, v))?;
    let mut m = raw.normalized(res, 0.9)?;
    m.cleanup();
    m.validate()?;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformKind {
    /// Both halves rotate up about the midrib; magnitude is the fold angle.
    Fold,
    /// Parabolic cupping; magnitude is the curvature.
    Cup,
    /// Rotation about the midrib growing along it; magnitude is radians per
    /// UV unit.
    Twist,
}

/// Ground truth of a synthetic pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformTruth {
    pub kind: DeformKind,
    pub magnitude: f64,
}

/// Applies an analytic deformation to flat leaf vertices whose midrib is the
/// line `v = 0.5`.
pub fn apply_deformation(kind: DeformKind, magnitude: f64, vertices: &[[f64; 3]]) -> Vec<[f64; 3]> {
    vertices
        .iter()
        .map(|p| {
            let (x, d) = (p[0] - 0.5, p[1] - 0.5);
            match kind {
                DeformKind::Fold => {
                    let (s, c) = (magnitude / 2.0).sin_cos();
                    [p[0], 0.5 + d * c, p[2] + d.abs() * s]
                }
                DeformKind::Cup => [p[0], p[1], p[2] + magnitude * (d * d + 0.25 * x * x)],
                DeformKind::Twist => {
                    let (s, c) = (magnitude * x).sin_cos();
                    [p[0], 0.5 + d * c - p[2] * s, d * s + p[2] * c]
                }
            }
        })
        .collect()
}

/// Masks plus one deformed cloud per mask. The cloud is the deformed vertex
/// set of the mask's own base mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub shapes: ShapeDataset,
    pub pairs: Vec<DeformPair>,
    pub leaf_params: Vec<LeafParams>,
}

pub fn generate_synthetic_dataset(n: usize, seed: u64, res: usize) -> Result<SyntheticDataset> {
    ensure!(n >= 1, Validation, "dataset needs at least one leaf");
    ensure!(res >= 16, Validation, "mask resolution must be at least 16");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut leaf_params = Vec::with_capacity(n);
    for i in 0..n {
        let lp = LeafParams::random(&mut rng);
        let mask = leaf_mask(&lp, res)?;
        let kind = [DeformKind::Fold, DeformKind::Cup, DeformKind::Twist][i % 3];
        let magnitude = match kind {
            DeformKind::Fold => rng.gen_range(10f64.to_radians()..70f64.to_radians()),
            DeformKind::Cup => rng.gen_range(0.3..1.5),
            DeformKind::Twist => rng.gen_range(0.3..1.2) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
        };
        let base = extract_base_mesh(&mask)?;
        let cloud = apply_deformation(kind, magnitude, &base.mesh.vertices);
        let id = format!("leaf_{i:04}");
        pairs.push(DeformPair {
            id: format!("pair_{i:04}"),
            base_id: id.clone(),
            cloud,
            truth: Some(DeformTruth { kind, magnitude }),
        });
        samples.push(ShapeSample { id, mask });
        leaf_params.push(lp);
    }
    Ok(SyntheticDataset { shapes: ShapeDataset { samples }, pairs, leaf_params })
}
