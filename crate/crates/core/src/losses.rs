//! Objective terms and evaluation metrics.
//!
//! Each term exists as a plain function on values and, where training needs
//! gradients, as a `record_*` builder that places it on a [`Tape`].

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::engine::{ParamSet, SparseMatrix, Tape, Tensor, Unary, Var};
use crate::error::{ensure, Error, Result};
use crate::mesh::{self, TriMesh};
use crate::sdf::{truncate_sdf, Mask2D};
use crate::shape::ShapeDecoder;
use crate::spatial::KdTree;

/// Guard added to angles in the boundary-angle penalty.
pub const ANGLE_EPS: f64 = 1e-6;
/// Guard on the deformation latent norm in the mapping loss.
pub const MAP_EPS: f64 = 1e-8;

fn ensure_same_len(a: usize, b: usize, what: &str) -> Result<()> {
    ensure!(a == b, Dimension, "{what}: {a} vs {b} values");
    ensure!(a > 0, Validation, "{what}: no samples");
    Ok(())
}

/// Mean absolute difference of truncated distances.
pub fn loss_sdf(pred: &[f64], truth: &[f64], delta: f64) -> Result<f64> {
    ensure_same_len(pred.len(), truth.len(), "sdf loss")?;
    ensure!(delta > 0.0, Validation, "truncation distance must be positive");
    Ok(pred.iter().zip(truth).map(|(p, t)| (truncate_sdf(*p, delta) - truncate_sdf(*t, delta)).abs()).sum::<f64>()
        / pred.len() as f64)
}

/// Mean absolute difference between a soft mask and a binary mask.
pub fn loss_silhouette(soft: &[f64], truth: &[bool]) -> Result<f64> {
    ensure_same_len(soft.len(), truth.len(), "silhouette loss")?;
    Ok(soft.iter().zip(truth).map(|(s, &t)| (s - if t { 1.0 } else { 0.0 }).abs()).sum::<f64>() / soft.len() as f64)
}

/// Mean squared deviation of gradient norms from one.
pub fn eikonal_from_gradients(grads: &[[f64; 2]]) -> Result<f64> {
    ensure!(!grads.is_empty(), Validation, "eikonal loss: no samples");
    Ok(grads.iter().map(|g| (g[0].hypot(g[1]) - 1.0).powi(2)).sum::<f64>() / grads.len() as f64)
}

/// Eikonal penalty of the shape decoder at `points` for latent `z`.
pub fn loss_eikonal(decoder: &ShapeDecoder, params: &ParamSet, z: &[f64], points: &[[f64; 2]]) -> Result<f64> {
    ensure!(!points.is_empty(), Validation, "eikonal loss: no samples");
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let q = tape.constant(Tensor::from_raw(points.len(), 2, points.iter().flat_map(|p| *p).collect()));
    let zv = tape.constant(Tensor::row(z));
    let (_, du, dv) = decoder.record_with_gradient(&mut tape, &bound, q, zv)?;
    let g: Vec<[f64; 2]> =
        tape.value(du).data().iter().zip(tape.value(dv).data()).map(|(&a, &b)| [a, b]).collect();
    eikonal_from_gradients(&g)
}

/// Gaussian prior `||z||^2 / sigma^2`.
pub fn loss_latent(z: &[f64], sigma: f64) -> Result<f64> {
    ensure!(sigma > 0.0, Validation, "prior scale must be positive");
    Ok(z.iter().map(|x| x * x).sum::<f64>() / (sigma * sigma))
}

/// Bidirectional nearest-neighbour distance with per-direction means.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]], squared: bool) -> Result<f64> {
    let (ab, ba) = chamfer_directions(a, b, squared)?;
    Ok(ab + ba)
}

/// The two directional means `(A -> B, B -> A)`.
pub fn chamfer_directions(a: &[[f64; 3]], b: &[[f64; 3]], squared: bool) -> Result<(f64, f64)> {
    ensure!(!a.is_empty() && !b.is_empty(), Validation, "chamfer distance of an empty point set");
    let f = |d2: f64| if squared { d2 } else { d2.sqrt() };
    let tb = KdTree::new(b);
    let ta = KdTree::new(a);
    let ab = a.iter().map(|p| f(tb.nearest(p).1)).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|p| f(ta.nearest(p).1)).sum::<f64>() / b.len() as f64;
    Ok((ab, ba))
}

/// Mean squared change of edge lengths between two embeddings of `mesh`.
pub fn loss_edge_length(mesh: &TriMesh, deformed: &[[f64; 3]]) -> Result<f64> {
    ensure_same_len(mesh.vertices.len(), deformed.len(), "edge length loss")?;
    let edges = mesh.edges();
    ensure!(!edges.is_empty(), Validation, "edge length loss: mesh has no edges");
    Ok(edges
        .iter()
        .map(|&[a, b]| {
            let l0 = mesh::norm(mesh::sub(mesh.vertices[a], mesh.vertices[b]));
            let l1 = mesh::norm(mesh::sub(deformed[a], deformed[b]));
            (l0 - l1).powi(2)
        })
        .sum::<f64>()
        / edges.len() as f64)
}

/// Uniform graph Laplacian `I - D^-1 A` of the mesh connectivity.
pub fn uniform_laplacian(mesh: &TriMesh) -> SparseMatrix {
    let nb = mesh.neighbors();
    let n = nb.len();
    let mut trip = Vec::new();
    for (i, ring) in nb.iter().enumerate() {
        if ring.is_empty() {
            continue;
        }
        trip.push((i, i, 1.0));
        let w = 1.0 / ring.len() as f64;
        for &j in ring {
            trip.push((i, j, -w));
        }
    }
    SparseMatrix::from_triplets(n, n, trip)
}

/// Mean squared norm of the uniform Laplacian of `vertices` over `mesh`.
pub fn loss_laplacian(mesh: &TriMesh, vertices: &[[f64; 3]]) -> Result<f64> {
    ensure_same_len(mesh.vertices.len(), vertices.len(), "laplacian loss")?;
    let l = uniform_laplacian(mesh).mul_dense(&Tensor::from_points(vertices));
    Ok(l.data().iter().map(|x| x * x).sum::<f64>() / vertices.len() as f64)
}

/// `(chamfer / ||z_d|| - phi)^2`.
pub fn loss_map(chamfer_value: f64, zd: &[f64], phi: f64) -> f64 {
    let n = zd.iter().map(|x| x * x).sum::<f64>().sqrt().max(MAP_EPS);
    (chamfer_value / n - phi).powi(2)
}

/// Sum of squared length changes of consecutive (cyclic) contour edges.
pub fn loss_boundary_length(contour: &[usize], base: &[[f64; 3]], deformed: &[[f64; 3]]) -> Result<f64> {
    ensure_same_len(base.len(), deformed.len(), "boundary length loss")?;
    let n = contour.len();
    ensure!(n >= 2, Validation, "contour needs at least two vertices");
    ensure!(contour.iter().all(|&i| i < base.len()), Validation, "contour index out of range");
    Ok((0..n)
        .map(|i| {
            let (a, b) = (contour[i], contour[(i + 1) % n]);
            let l0 = mesh::norm(mesh::sub(base[a], base[b]));
            let l1 = mesh::norm(mesh::sub(deformed[a], deformed[b]));
            (l0 - l1).powi(2)
        })
        .sum())
}

/// Corner of a boundary face: the angle at `apex` between edges to `a` and `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryCorner {
    pub apex: usize,
    pub a: usize,
    pub b: usize,
}

/// Corners at contour vertices of every face that has a contour edge.
pub fn boundary_corners(mesh: &TriMesh, contour: &[usize]) -> Vec<BoundaryCorner> {
    let n = contour.len();
    let mut edge = std::collections::BTreeSet::new();
    for i in 0..n {
        let (a, b) = (contour[i], contour[(i + 1) % n]);
        edge.insert((a.min(b), a.max(b)));
    }
    let on_contour: std::collections::BTreeSet<usize> = contour.iter().copied().collect();
    let mut out = Vec::new();
    for f in &mesh.faces {
        let has_edge = (0..3).any(|k| {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edge.contains(&(a.min(b), a.max(b)))
        });
        if !has_edge {
            continue;
        }
        for k in 0..3 {
            if on_contour.contains(&f[k]) {
                out.push(BoundaryCorner { apex: f[k], a: f[(k + 1) % 3], b: f[(k + 2) % 3] });
            }
        }
    }
    out
}

fn corner_angle(v: &[[f64; 3]], c: &BoundaryCorner) -> f64 {
    let e1 = mesh::sub(v[c.a], v[c.apex]);
    let e2 = mesh::sub(v[c.b], v[c.apex]);
    let d = mesh::norm(e1) * mesh::norm(e2);
    if d == 0.0 {
        return 0.0;
    }
    (mesh::dot(e1, e2) / d).clamp(-1.0, 1.0).acos()
}

/// Sum of `1 / (theta + eps)` over boundary corners.
pub fn loss_face_angle(corners: &[BoundaryCorner], vertices: &[[f64; 3]]) -> Result<f64> {
    ensure!(
        corners.iter().all(|c| c.apex.max(c.a).max(c.b) < vertices.len()),
        Validation,
        "corner index out of range"
    );
    Ok(corners.iter().map(|c| 1.0 / (corner_angle(vertices, c) + ANGLE_EPS)).sum())
}

/// Unsquared distance to an anchor latent.
pub fn loss_anchor(z: &[f64], anchor: &[f64]) -> Result<f64> {
    ensure!(z.len() == anchor.len(), Dimension, "latent lengths differ: {} vs {}", z.len(), anchor.len());
    Ok(z.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Mean cosine between each ground-truth vertex normal and the normal of the
/// closest predicted vertex.
pub fn metric_normal_consistency(gt: &TriMesh, pred: &TriMesh) -> Result<f64> {
    ensure!(!gt.vertices.is_empty() && !pred.vertices.is_empty(), Validation, "normal consistency of an empty mesh");
    let ng = gt.vertex_normals();
    let np = pred.vertex_normals();
    let tree = KdTree::new(&pred.vertices);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, n) in gt.vertices.iter().zip(&ng) {
        if mesh::norm(*n) == 0.0 {
            continue;
        }
        let (j, _) = tree.nearest(v);
        sum += mesh::dot(*n, np[j]);
        count += 1;
    }
    ensure!(count > 0, Degenerate, "ground-truth mesh has no faces");
    Ok(sum / count as f64)
}

/// Symmetric chamfer distance with Euclidean (unsquared) nearest-neighbour
/// distances, averaged over the two directions.
pub fn metric_chamfer_l2(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    let (ab, ba) = chamfer_directions(a, b, false)?;
    Ok((ab + ba) / 2.0)
}

/// Exact distance from each point to the nearest point of a triangle mesh.
pub fn point_to_mesh_distances(points: &[[f64; 3]], target: &TriMesh) -> Result<Vec<f64>> {
    ensure!(!target.faces.is_empty(), Validation, "distance to a mesh without faces");
    let tree = KdTree::new(&target.vertices);
    let mut incident = vec![Vec::new(); target.vertices.len()];
    let mut max_edge = 0.0f64;
    for (f, tri) in target.faces.iter().enumerate() {
        for k in 0..3 {
            incident[tri[k]].push(f);
            max_edge = max_edge.max(mesh::norm(mesh::sub(target.vertices[tri[k]], target.vertices[tri[(k + 1) % 3]])));
        }
    }
    Ok(points
        .iter()
        .map(|p| {
            let (_, d2) = tree.nearest(p);
            let mut best = d2;
            let mut seen = std::collections::BTreeSet::new();
            for v in tree.within(p, d2.sqrt() + max_edge) {
                for &f in &incident[v] {
                    if seen.insert(f) {
                        let [a, b, c] = target.faces[f];
                        let (va, vb, vc) = (target.vertices[a], target.vertices[b], target.vertices[c]);
                        let q = mesh::closest_point_on_triangle(*p, va, vb, vc);
                        best = best.min(crate::spatial::dist2(p, &q));
                    }
                }
            }
            best.sqrt()
        })
        .collect())
}

/// Symmetric chamfer between a point cloud and a mesh surface: the mean
/// point-to-surface distance of the cloud and the mean nearest-cloud distance
/// of the mesh vertices, averaged.
pub fn metric_surface_chamfer(cloud: &[[f64; 3]], target: &TriMesh) -> Result<f64> {
    ensure!(!cloud.is_empty() && !target.vertices.is_empty(), Validation, "chamfer of an empty set");
    let to_mesh = point_to_mesh_distances(cloud, target)?;
    let tree = KdTree::new(cloud);
    let to_cloud: f64 = target.vertices.iter().map(|v| tree.nearest(v).1.sqrt()).sum::<f64>() / target.vertices.len() as f64;
    Ok((to_mesh.iter().sum::<f64>() / to_mesh.len() as f64 + to_cloud) / 2.0)
}

pub fn mask_iou(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    a.iou(b)
}

/// Relative weights of the objective terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub sdf: f64,
    pub silhouette: f64,
    pub eikonal: f64,
    pub latent: f64,
    pub chamfer: f64,
    pub edge_length: f64,
    pub laplacian: f64,
    pub map: f64,
    pub boundary: f64,
    pub angle: f64,
    pub anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sdf: 1.0,
            silhouette: 1.0,
            eikonal: 0.01,
            latent: 1e-4,
            chamfer: 1.0,
            edge_length: 0.1,
            laplacian: 0.1,
            map: 0.01,
            boundary: 0.1,
            angle: 0.01,
            anchor: 0.1,
        }
    }
}

impl LossWeights {
    pub const NAMES: [&'static str; 11] =
        ["sdf", "sil", "eik", "lat", "cham", "leng", "lap", "map", "bound", "ang", "anc"];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "sdf" => self.sdf,
            "sil" => self.silhouette,
            "eik" => self.eikonal,
            "lat" => self.latent,
            "cham" => self.chamfer,
            "leng" => self.edge_length,
            "lap" => self.laplacian,
            "map" => self.map,
            "bound" => self.boundary,
            "ang" => self.angle,
            "anc" => self.anchor,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        ensure!(value.is_finite() && value >= 0.0, Validation, "loss weight `{name}` must be a nonnegative number");
        let slot = match name {
            "sdf" => &mut self.sdf,
            "sil" => &mut self.silhouette,
            "eik" => &mut self.eikonal,
            "lat" => &mut self.latent,
            "cham" => &mut self.chamfer,
            "leng" => &mut self.edge_length,
            "lap" => &mut self.laplacian,
            "map" => &mut self.map,
            "bound" => &mut self.boundary,
            "ang" => &mut self.angle,
            "anc" => &mut self.anchor,
            _ => return Err(Error::Validation(format!("unknown loss term `{name}`"))),
        };
        *slot = value;
        Ok(())
    }
}

/// Named term values with their weights and weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn add(&mut self, name: &str, weight: f64, value: f64) {
        self.terms.insert(name.to_string(), value);
        self.weights.insert(name.to_string(), weight);
        self.total = self.terms.iter().map(|(k, v)| self.weights[k] * v).sum();
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.terms {
            write!(f, "{k}={v:.6e} ")?;
        }
        write!(f, "total={:.6e}", self.total)
    }
}

/// Tape builders for the differentiable terms.
pub mod record {
    use super::*;

    pub fn sdf(tape: &mut Tape, pred: Var, truth: &[f64], delta: f64) -> Var {
        let t = Tensor::from_raw(truth.len(), 1, truth.iter().map(|&d| truncate_sdf(d, delta)).collect());
        let t = tape.constant(t);
        let p = tape.clamp(pred, -delta, delta);
        let d = tape.sub(p, t);
        let a = tape.abs(d);
        tape.mean(a)
    }

    /// Soft mask `sigmoid(k f)` against binary targets.
    pub fn silhouette(tape: &mut Tape, pred: Var, truth: &[bool], k: f64) -> Var {
        let t = tape.constant(Tensor::from_raw(truth.len(), 1, truth.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()));
        let s = tape.scale(pred, k);
        let s = tape.sigmoid(s);
        let d = tape.sub(s, t);
        let a = tape.abs(d);
        tape.mean(a)
    }

    pub fn eikonal(tape: &mut Tape, du: Var, dv: Var) -> Var {
        let g = tape.concat(&[du, dv]);
        let n = tape.row_norm(g, 1e-12);
        let d = tape.add_const(n, -1.0);
        let s = tape.square(d);
        tape.mean(s)
    }

    /// Mean over rows of `||z||^2 / sigma^2`.
    pub fn latent(tape: &mut Tape, z: Var, sigma: f64) -> Var {
        let rows = tape.value(z).rows() as f64;
        let s = tape.square(z);
        let s = tape.sum(s);
        tape.scale(s, 1.0 / (sigma * sigma * rows))
    }

    /// Edge-length preservation against fixed base edge lengths.
    pub fn edge_length(tape: &mut Tape, mesh: &TriMesh, deformed: Var) -> Var {
        let edges = mesh.edges();
        let a = Rc::new(edges.iter().map(|e| e[0]).collect::<Vec<_>>());
        let b = Rc::new(edges.iter().map(|e| e[1]).collect::<Vec<_>>());
        let base: Vec<f64> =
            edges.iter().map(|&[i, j]| mesh::norm(mesh::sub(mesh.vertices[i], mesh.vertices[j]))).collect();
        let pa = tape.gather_rows(deformed, a);
        let pb = tape.gather_rows(deformed, b);
        let d = tape.sub(pa, pb);
        let l = tape.row_norm(d, 1e-16);
        let l0 = tape.constant(Tensor::from_raw(base.len(), 1, base));
        let diff = tape.sub(l, l0);
        let sq = tape.square(diff);
        tape.mean(sq)
    }

    pub fn laplacian(tape: &mut Tape, lap: Rc<SparseMatrix>, deformed: Var) -> Var {
        let l = tape.sparse_matmul(lap, deformed);
        let sq = tape.square(l);
        let s = tape.row_sum(sq);
        tape.mean(s)
    }

    pub fn chamfer(tape: &mut Tape, a: Var, b: Var) -> Var {
        tape.chamfer(a, b, true)
    }

    /// `(chamfer / ||z_d|| - phi)^2` with `phi` a `1 x 1` variable.
    pub fn map(tape: &mut Tape, chamfer_value: Var, zd: Var, phi: Var) -> Var {
        let n = tape.row_norm(zd, 0.0);
        let n = tape.unary(Unary::Clamp(MAP_EPS, f64::INFINITY), n);
        let r = tape.div(chamfer_value, n);
        let d = tape.sub(r, phi);
        tape.square(d)
    }

    pub fn boundary_length(tape: &mut Tape, contour: &[usize], base: &[[f64; 3]], deformed: Var) -> Var {
        let n = contour.len();
        let a = Rc::new(contour.to_vec());
        let b = Rc::new((0..n).map(|i| contour[(i + 1) % n]).collect::<Vec<_>>());
        let l0: Vec<f64> = (0..n).map(|i| mesh::norm(mesh::sub(base[a[i]], base[b[i]]))).collect();
        let pa = tape.gather_rows(deformed, a);
        let pb = tape.gather_rows(deformed, b);
        let d = tape.sub(pa, pb);
        let l = tape.row_norm(d, 1e-16);
        let l0 = tape.constant(Tensor::from_raw(n, 1, l0));
        let diff = tape.sub(l, l0);
        let sq = tape.square(diff);
        tape.sum(sq)
    }

    pub fn face_angle(tape: &mut Tape, corners: &[BoundaryCorner], deformed: Var) -> Var {
        let apex = Rc::new(corners.iter().map(|c| c.apex).collect::<Vec<_>>());
        let ia = Rc::new(corners.iter().map(|c| c.a).collect::<Vec<_>>());
        let ib = Rc::new(corners.iter().map(|c| c.b).collect::<Vec<_>>());
        let p = tape.gather_rows(deformed, apex);
        let pa = tape.gather_rows(deformed, ia);
        let pb = tape.gather_rows(deformed, ib);
        let e1 = tape.sub(pa, p);
        let e2 = tape.sub(pb, p);
        let dot = tape.row_dot(e1, e2);
        let n1 = tape.row_norm(e1, 1e-16);
        let n2 = tape.row_norm(e2, 1e-16);
        let nn = tape.mul(n1, n2);
        let c = tape.div(dot, nn);
        let c = tape.clamp(c, -1.0 + 1e-9, 1.0 - 1e-9);
        let theta = tape.unary(Unary::Acos, c);
        let t = tape.add_const(theta, ANGLE_EPS);
        let r = tape.unary(Unary::Recip, t);
        tape.sum(r)
    }

    pub fn anchor(tape: &mut Tape, z: Var, anchor: &[f64]) -> Var {
        let a = tape.constant(Tensor::row(anchor));
        let d = tape.sub(z, a);
        let s = tape.square(d);
        let s = tape.sum(s);
        let s = tape.add_const(s, 1e-18);
        tape.sqrt(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surface_chamfer_against_flat_square() {
        let m = TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        // Points hovering above the interior are at their height from the surface.
        let d = point_to_mesh_distances(&[[0.3, 0.6, 0.25], [0.5, 0.5, -0.1], [2.0, 0.5, 0.0]], &m).unwrap();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.1).abs() < 1e-12 && (d[2] - 1.0).abs() < 1e-12);
        assert!(metric_surface_chamfer(&m.vertices, &m).unwrap().abs() < 1e-12);
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_mesh(n: usize) -> TriMesh {
        let mut v = Vec::new();
        for j in 0..n {
            for i in 0..n {
                v.push([i as f64, j as f64, 0.0]);
            }
        }
        let mut f = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = j * n + i;
                f.push([a, a + 1, a + n + 1]);
                f.push([a, a + n + 1, a + n]);
            }
        }
        TriMesh::new(v, f).unwrap()
    }

    /// Central-difference check of a scalar tape function of one input tensor.
    fn fd_check(x0: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.leaf("x", x0.clone());
        let y = f(&mut tape, x);
        let g = tape.backward(y).unwrap().named("x").cloned().unwrap_or_else(|| Tensor::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += d;
                let mut t = Tape::new();
                let v = t.constant(xp);
                let y = f(&mut t, v);
                t.scalar_value(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "component {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn sdf_and_silhouette_values() {
        assert!((loss_sdf(&[0.5], &[-0.5], 0.01).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(loss_sdf(&[0.1, -0.3], &[0.1, -0.3], 0.01).unwrap(), 0.0);
        assert_eq!(loss_silhouette(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
        assert_eq!(loss_silhouette(&[0.0, 1.0], &[true, false]).unwrap(), 1.0);
        assert_eq!(loss_silhouette(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..50).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let t: Vec<f64> = (0..50).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let mut oracle = 0.0;
        for i in 0..50 {
            oracle += (p[i].clamp(-0.01, 0.01) - t[i].clamp(-0.01, 0.01)).abs();
        }
        assert!((loss_sdf(&p, &t, 0.01).unwrap() - oracle / 50.0).abs() < 1e-15);
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::from_raw(50, 1, p.clone()));
        let l = record::sdf(&mut tape, pv, &t, 0.01);
        assert!((tape.scalar_value(l) - oracle / 50.0).abs() < 1e-15);
    }

    #[test]
    fn eikonal_linear_fields() {
        assert_eq!(eikonal_from_gradients(&[[1.0, 0.0], [0.6, 0.8]]).unwrap(), 0.0);
        assert_eq!(eikonal_from_gradients(&[[2.0, 0.0]]).unwrap(), 1.0);
    }

    #[test]
    fn latent_prior() {
        assert_eq!(loss_latent(&[0.0; 4], 10.0).unwrap(), 0.0);
        assert!((loss_latent(&[6.0, 8.0], 10.0).unwrap() - 1.0).abs() < 1e-15);
        fd_check(&Tensor::row(&[0.3, -1.2, 2.0]), |t, z| record::latent(t, z, 10.0));
    }

    #[test]
    fn chamfer_values() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], true).unwrap(), 2.0);
        assert!(chamfer(&[], &[[1.0, 0.0, 0.0]], true).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<[f64; 3]> = (0..40).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let b: Vec<[f64; 3]> = (0..25).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let bf = |x: &[[f64; 3]], y: &[[f64; 3]]| {
            x.iter()
                .map(|p| y.iter().map(|q| crate::spatial::dist2(p, q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        let oracle = bf(&a, &b) + bf(&b, &a);
        assert!((chamfer(&a, &b, true).unwrap() - oracle).abs() < 1e-12);
        assert!((chamfer(&b, &a, true).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn edge_and_laplacian() {
        let m = grid_mesh(4);
        assert_eq!(loss_edge_length(&m, &m.vertices).unwrap(), 0.0);
        // Uniform 2x scale of a mesh with only unit edges.
        let sq = TriMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 3f64.sqrt() / 2.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let scaled: Vec<[f64; 3]> = sq.vertices.iter().map(|v| mesh::scale(*v, 2.0)).collect();
        assert!((loss_edge_length(&sq, &scaled).unwrap() - 1.0).abs() < 1e-12);
        // Interior vertices of a regular grid with the full 1-ring have zero Laplacian;
        // lifting one interior vertex by h contributes h^2 at that vertex.
        let mut lifted = m.vertices.clone();
        let base = loss_laplacian(&m, &m.vertices).unwrap();
        lifted[5][2] = 0.5;
        let after = loss_laplacian(&m, &lifted).unwrap();
        let ring = m.neighbors()[5].len() as f64;
        let mut oracle = 0.25;
        for &j in &m.neighbors()[5] {
            oracle += (0.5 / m.neighbors()[j].len() as f64).powi(2);
        }
        let _ = ring;
        assert!((after - base - oracle / 16.0).abs() < 1e-12);
        let shifted: Vec<[f64; 3]> = lifted.iter().map(|v| mesh::add(*v, [3.0, -1.0, 2.0])).collect();
        assert!((loss_laplacian(&m, &shifted).unwrap() - after).abs() < 1e-12);
        let lap = Rc::new(uniform_laplacian(&m));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::from_points(&m.vertices.iter().map(|v| [v[0] + rng.gen::<f64>() * 0.3, v[1], rng.gen()]).collect::<Vec<_>>());
        fd_check(&x0, |t, x| record::laplacian(t, lap.clone(), x));
        fd_check(&x0, |t, x| record::edge_length(t, &m, x));
        let mut tape = Tape::new();
        let v = tape.constant(x0.clone());
        let l = record::edge_length(&mut tape, &m, v);
        assert!((tape.scalar_value(l) - loss_edge_length(&m, &x0.to_points()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn map_loss() {
        assert_eq!(loss_map(2.0, &[1.0, 0.0], 2.0), 0.0);
        assert_eq!(loss_map(0.0, &[0.3, 0.0], 0.0), 0.0);
        assert_eq!(loss_map(0.0, &[0.0, 0.0], 0.5), 0.25);
        fd_check(&Tensor::row(&[0.4, -0.7, 0.2]), |t, z| {
            let c = t.constant(Tensor::scalar(0.3));
            let phi = t.constant(Tensor::scalar(0.1));
            record::map(t, c, z, phi)
        });
    }

    #[test]
    fn boundary_terms() {
        let c = vec![0, 1, 2, 3];
        let base = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let rot: Vec<[f64; 3]> = base.iter().map(|v| [-v[1] + 3.0, v[0], v[2] + 1.0]).collect();
        assert!(loss_boundary_length(&c, &base, &rot).unwrap() < 1e-24);
        let mut stretched = base.clone();
        stretched[1] = [2.0, 0.0, 0.0];
        stretched[2] = [2.0, 1.0, 0.0];
        assert!((loss_boundary_length(&c, &base, &stretched).unwrap() - 2.0).abs() < 1e-12);
        let eq = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 3f64.sqrt() / 2.0, 0.0]];
        let v = loss_face_angle(&[BoundaryCorner { apex: 0, a: 1, b: 2 }], &eq).unwrap();
        assert!((v - 3.0 / std::f64::consts::PI).abs() < 1e-5);
        let right = loss_face_angle(&[BoundaryCorner { apex: 0, a: 1, b: 3 }], &base).unwrap();
        assert!((right - 2.0 / std::f64::consts::PI).abs() < 1e-5);
        let flat = vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!((loss_face_angle(&[BoundaryCorner { apex: 0, a: 1, b: 2 }], &flat).unwrap() - 1.0 / ANGLE_EPS).abs() < 1.0);
        let x0 = Tensor::from_points(&[[0.1, 0.0, 0.2], [1.0, 0.1, 0.0], [1.2, 0.9, 0.1], [0.0, 1.1, 0.0]]);
        fd_check(&x0, |t, x| record::boundary_length(t, &c, &base, x));
        let corners = [BoundaryCorner { apex: 0, a: 1, b: 3 }, BoundaryCorner { apex: 2, a: 3, b: 1 }];
        fd_check(&x0, |t, x| record::face_angle(t, &corners, x));
    }

    #[test]
    fn anchor_distance() {
        assert_eq!(loss_anchor(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_anchor(&[1.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        let (a, b, c) = ([0.3, -1.0], [1.0, 2.0], [-2.0, 0.5]);
        assert!(loss_anchor(&a, &c).unwrap() <= loss_anchor(&a, &b).unwrap() + loss_anchor(&b, &c).unwrap());
        fd_check(&Tensor::row(&[0.3, 0.4]), |t, z| record::anchor(t, z, &[1.0, -1.0]));
    }

    #[test]
    fn normal_consistency_cases() {
        let m = grid_mesh(5);
        assert!((metric_normal_consistency(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        let flipped = TriMesh::new(m.vertices.clone(), m.faces.iter().map(|f| [f[0], f[2], f[1]]).collect()).unwrap();
        assert!((metric_normal_consistency(&m, &flipped).unwrap() + 1.0).abs() < 1e-12);
        let tilted = TriMesh::new(m.vertices.iter().map(|v| [v[0], v[1], v[0]]).collect(), m.faces.clone()).unwrap();
        assert!((metric_normal_consistency(&m, &tilted).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn report_total() {
        let mut r = LossReport::default();
        r.add("sdf", 1.0, 0.5);
        r.add("eik", 0.1, 2.0);
        assert!((r.total - 0.7).abs() < 1e-12);
        let mut w = LossWeights::default();
        w.set("map", 0.5).unwrap();
        assert_eq!(w.get("map"), Some(0.5));
        assert!(w.set("nope", 1.0).is_err());
    }
}
