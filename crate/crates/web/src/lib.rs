//! WebAssembly bindings for the browser demo: procedural leaf masks, their
//! signed distance fields, analytic deformations and a control-point bend.

use nlf_core::deform::{lbs_deform, BlendMode, RigidTransform};
use nlf_core::engine::Tensor;
use nlf_core::sdf::{jump_flood_sdf, Mask2D};
use nlf_core::shape::{extract_base_mesh, BaseMesh};
use nlf_core::training::{apply_deformation, leaf_mask, DeformKind, LeafParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: nlf_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn mask_from_bytes(res: usize, bits: &[u8]) -> Result<Mask2D, JsValue> {
    if bits.len() != res * res {
        return Err(JsValue::from_str(&format!("mask has {} pixels, expected {}", bits.len(), res * res)));
    }
    Mask2D::unit(res, bits.iter().map(|&b| b != 0).collect()).map_err(js_err)
}

/// Procedural leaf mask, row-major with row 0 at the bottom; 1 is inside.
#[wasm_bindgen]
pub fn random_leaf(seed: u64, res: usize) -> Result<Vec<u8>, JsValue> {
    let params = LeafParams::random(&mut ChaCha8Rng::seed_from_u64(seed));
    let m = leaf_mask(&params, res).map_err(js_err)?;
    Ok(m.bits().iter().map(|&b| u8::from(b)).collect())
}

/// Signed distance of every pixel center to the mask boundary in UV units,
/// positive inside.
#[wasm_bindgen]
pub fn signed_distance(res: usize, bits: &[u8]) -> Result<Vec<f64>, JsValue> {
    let m = mask_from_bytes(res, bits)?;
    m.validate().map_err(js_err)?;
    Ok(jump_flood_sdf(&m, false).map_err(js_err)?.values().to_vec())
}

/// Triangle mesh of a leaf: flat `x y z` triples and vertex-index triples.
#[wasm_bindgen]
pub struct LeafMesh {
    vertices: Vec<f64>,
    faces: Vec<u32>,
}

#[wasm_bindgen]
impl LeafMesh {
    #[wasm_bindgen(getter)]
    pub fn vertices(&self) -> Vec<f64> {
        self.vertices.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn faces(&self) -> Vec<u32> {
        self.faces.clone()
    }
}

fn leaf_mesh(base: &BaseMesh, vertices: &[[f64; 3]]) -> LeafMesh {
    LeafMesh {
        vertices: vertices.iter().flatten().copied().collect(),
        faces: base.mesh.faces.iter().flatten().map(|&i| i as u32).collect(),
    }
}

fn base_mesh(res: usize, bits: &[u8]) -> Result<BaseMesh, JsValue> {
    extract_base_mesh(&mask_from_bytes(res, bits)?).map_err(js_err)
}

/// Fold, cup or twist of the flat leaf, by name.
#[wasm_bindgen]
pub fn deform_leaf(res: usize, bits: &[u8], kind: &str, magnitude: f64) -> Result<LeafMesh, JsValue> {
    let kind = match kind {
        "fold" => DeformKind::Fold,
        "cup" => DeformKind::Cup,
        "twist" => DeformKind::Twist,
        k => return Err(JsValue::from_str(&format!("unknown deformation `{k}`"))),
    };
    let base = base_mesh(res, bits)?;
    Ok(leaf_mesh(&base, &apply_deformation(kind, magnitude, &base.mesh.vertices)))
}

/// Control points along the midrib, from petiole to tip.
const MIDRIB: [f64; 5] = [0.05, 0.275, 0.5, 0.725, 0.95];

/// Blend weights of a vertex: a normalized Gaussian of its distance to each
/// midrib control point.
fn bend_weights(vertices: &[[f64; 3]], width: f64) -> Tensor {
    let k = MIDRIB.len();
    let mut w = Vec::with_capacity(vertices.len() * k);
    for p in vertices {
        let row: Vec<f64> = MIDRIB.iter().map(|&c| (-((p[0] - c) / width).powi(2)).exp()).collect();
        let s: f64 = row.iter().sum();
        w.extend(row.iter().map(|x| x / s));
    }
    Tensor::matrix(vertices.len(), k, w).expect("weights shape")
}

/// Bends the leaf along its midrib by linear blend skinning: each control
/// point rotates about the width axis by its share of `angle` (radians) and
/// carries the chain beyond it along.
#[wasm_bindgen]
pub fn bend_leaf(res: usize, bits: &[u8], angle: f64, width: f64) -> Result<LeafMesh, JsValue> {
    if !(width > 0.0) {
        return Err(JsValue::from_str("blend width must be positive"));
    }
    let base = base_mesh(res, bits)?;
    let weights = bend_weights(&base.mesh.vertices, width);
    let step = angle / (MIDRIB.len() - 1) as f64;
    // Forward kinematics along the midrib polyline.
    let mut controls = Vec::with_capacity(MIDRIB.len());
    let mut transforms = Vec::with_capacity(MIDRIB.len());
    let (mut pos, mut theta) = ([MIDRIB[0], 0.5, 0.0], 0.0f64);
    for (i, &c) in MIDRIB.iter().enumerate() {
        if i > 0 {
            let seg = c - MIDRIB[i - 1];
            pos = [pos[0] + seg * theta.cos(), 0.5, pos[2] + seg * theta.sin()];
            theta += step;
        }
        let rest = [c, 0.5, 0.0];
        let (s, co) = (-theta / 2.0).sin_cos();
        transforms.push(RigidTransform {
            rotation: [co, 0.0, s, 0.0],
            translation: [pos[0] - rest[0], pos[1] - rest[1], pos[2] - rest[2]],
        });
        controls.push(rest);
    }
    let moved =
        lbs_deform(&base.mesh.vertices, &weights, &transforms, &controls, BlendMode::Pivoted).map_err(js_err)?;
    Ok(leaf_mesh(&base, &moved))
}
