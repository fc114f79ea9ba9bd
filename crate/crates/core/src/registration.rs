//! Alignment chain for building correspondences between a flat base leaf and a
//! deformed scan: rigid canonicalization, contour keypoints, as-rigid-as-possible
//! registration and coherent point drift.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};

use crate::engine::{SparseMatrix, Tensor};
use crate::error::{ensure, Error, Result};
use crate::mesh::{self, TriMesh};
use crate::spatial::KdTree;

/// Similarity transform `p -> scale * R p + translation`. Rows of `rotation`
/// are the canonical axes expressed in input coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl RigidPose {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut o = [0.0; 3];
        for a in 0..3 {
            o[a] = self.scale * mesh::dot(r[a], p) + self.translation[a];
        }
        o
    }

    pub fn apply_all(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        pts.iter().map(|p| self.apply(*p)).collect()
    }
}

/// Options of [`rigid_align`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignOptions {
    /// Number of candidate second-axis directions over a half turn.
    pub candidates: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { candidates: 180 }
    }
}

fn convex_hull_area(pts: &mut [[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    let n = hull.len();
    (0..n).map(|i| hull[i][0] * hull[(i + 1) % n][1] - hull[(i + 1) % n][0] * hull[i][1]).sum::<f64>().abs() / 2.0
}

fn third_moment(pts: &[[f64; 3]], axis: [f64; 3]) -> f64 {
    pts.iter().map(|p| mesh::dot(*p, axis).powi(3)).sum::<f64>() / pts.len() as f64
}

/// Orients `axis` so the cloud's third moment along it is positive, falling
/// back to a positive largest component when the cloud is symmetric.
fn orient(pts: &[[f64; 3]], axis: [f64; 3], spread: f64) -> [f64; 3] {
    let m3 = third_moment(pts, axis);
    let flip = if m3.abs() > 1e-6 * spread.powi(3) {
        m3 < 0.0
    } else {
        let k = (0..3).max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs()).then(b.cmp(&a))).unwrap();
        axis[k] < 0.0
    };
    if flip {
        mesh::scale(axis, -1.0)
    } else {
        axis
    }
}

/// Canonical pose of a leaf cloud: first axis along the largest principal
/// component, second axis the direction orthogonal to it along which the
/// projected silhouette (convex hull) has minimal area, third axis their cross
/// product. The centroid goes to the origin and the extent along the first
/// axis is scaled to 1.
pub fn rigid_align(points: &[[f64; 3]], opts: AlignOptions) -> Result<RigidPose> {
    ensure!(points.len() >= 10, Validation, "rigid alignment needs at least 10 points, got {}", points.len());
    ensure!(opts.candidates >= 1, Validation, "need at least one candidate direction");
    let c = mesh::centroid(points);
    let centered: Vec<[f64; 3]> = points.iter().map(|p| mesh::sub(*p, c)).collect();
    let mut cov = Matrix3::<f64>::zeros();
    for p in &centered {
        let v = Vector3::new(p[0], p[1], p[2]);
        cov += v * v.transpose();
    }
    cov /= points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l0 = eig.eigenvalues[order[0]];
    let l1 = eig.eigenvalues[order[1]];
    ensure!(l0 > 0.0 && l1 > 1e-12 * l0, Degenerate, "point cloud is collinear");
    let col = |k: usize| {
        let v = eig.eigenvectors.column(order[k]);
        let n = v.norm();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let spread = l0.sqrt();
    let x = orient(&centered, col(0), spread);
    let e1 = col(1);
    let e2 = mesh::cross(x, e1);
    let mut best = (f64::INFINITY, e1);
    let mut buf = vec![[0.0; 2]; centered.len()];
    for k in 0..opts.candidates {
        let th = std::f64::consts::PI * k as f64 / opts.candidates as f64;
        let d = mesh::add(mesh::scale(e1, th.cos()), mesh::scale(e2, th.sin()));
        // Silhouette seen along `d`, in the plane spanned by x and x cross d.
        let w = mesh::cross(x, d);
        for (b, p) in buf.iter_mut().zip(&centered) {
            *b = [mesh::dot(*p, x), mesh::dot(*p, w)];
        }
        let area = convex_hull_area(&mut buf);
        if area < best.0 - 1e-15 {
            best = (area, d);
        }
    }
    // The sign of y comes from the stronger skew, along y itself or out of
    // plane: a leaf symmetric across its midrib has none along y, but its cup
    // or fold side fixes the handedness.
    let y = best.1;
    let m3y = third_moment(&centered, y);
    let m3z = third_moment(&centered, mesh::cross(x, y));
    let m3 = if m3z.abs() > m3y.abs() { m3z } else { m3y };
    let y = if m3.abs() > 1e-6 * spread.powi(3) {
        if m3 < 0.0 {
            mesh::scale(y, -1.0)
        } else {
            y
        }
    } else {
        orient(&centered, y, spread)
    };
    let z = mesh::cross(x, y);
    let (lo, hi) = centered.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let t = mesh::dot(*p, x);
        (lo.min(t), hi.max(t))
    });
    let scale = 1.0 / (hi - lo);
    let rotation = [x, y, z];
    let rc = [mesh::dot(x, c), mesh::dot(y, c), mesh::dot(z, c)];
    Ok(RigidPose { rotation, translation: mesh::scale(rc, -scale), scale })
}

/// A point on the segment between contour positions `from` and `to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContourSample {
    pub from: usize,
    pub to: usize,
    pub t: f64,
    pub point: [f64; 3],
}

/// `n` points at equal arc-length spacing along a closed contour, starting at
/// the tip (largest x) and following the contour order. When `n` equals the
/// contour length the contour vertices themselves are returned.
pub fn sample_contour_keypoints(contour: &[[f64; 3]], n: usize) -> Result<Vec<ContourSample>> {
    let m = contour.len();
    ensure!(m >= 2, Validation, "contour needs at least two points");
    ensure!(n >= 1, Validation, "keypoint count must be positive");
    let tip = (0..m).fold(0, |b, i| if contour[i][0] > contour[b][0] { i } else { b });
    if n == m {
        return Ok((0..m)
            .map(|k| {
                let i = (tip + k) % m;
                ContourSample { from: i, to: (i + 1) % m, t: 0.0, point: contour[i] }
            })
            .collect());
    }
    let seg: Vec<f64> =
        (0..m).map(|k| mesh::norm(mesh::sub(contour[(tip + k + 1) % m], contour[(tip + k) % m]))).collect();
    let total: f64 = seg.iter().sum();
    ensure!(total > 0.0, Degenerate, "contour has zero length");
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    let mut start = 0.0;
    for s in 0..n {
        let target = total * s as f64 / n as f64;
        while k + 1 < m && start + seg[k] < target {
            start += seg[k];
            k += 1;
        }
        let (i, j) = ((tip + k) % m, (tip + k + 1) % m);
        let t = if seg[k] > 0.0 { ((target - start) / seg[k]).clamp(0.0, 1.0) } else { 0.0 };
        let point = mesh::add(contour[i], mesh::scale(mesh::sub(contour[j], contour[i]), t));
        out.push(ContourSample { from: i, to: j, t, point });
    }
    Ok(out)
}

/// Linear constraint `(1 - t) p_a + t p_b ~ target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointConstraint {
    pub a: usize,
    pub b: usize,
    pub t: f64,
    pub target: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArapOptions {
    pub iterations: usize,
    pub keypoint_weight: f64,
    /// Weight of the nearest-neighbour term towards the target cloud.
    pub cloud_weight: f64,
}

impl Default for ArapOptions {
    fn default() -> Self {
        Self { iterations: 50, keypoint_weight: 10.0, cloud_weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArapResult {
    pub vertices: Vec<[f64; 3]>,
    /// Energy before every global step, then the final energy.
    pub energies: Vec<f64>,
    /// Rings whose rotation fell back to identity in the last local step.
    pub identity_fallbacks: usize,
}

fn best_rotation(s: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = s.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    if svd.singular_values.iter().filter(|&&x| x > 1e-12 * svd.singular_values.max().max(1e-300)).count() < 2 {
        return None;
    }
    // Maximizes tr(R^T S^T) for S = sum e e'^T: R = V U^T.
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let mut v = vt.transpose();
        let k = (0..3).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap();
        v.column_mut(k).scale_mut(-1.0);
        r = v * u.transpose();
    }
    r.iter().all(|x| x.is_finite()).then_some(r)
}

fn cg_solve(a: &SparseMatrix, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) {
    let n = b.len();
    let matvec = |v: &[f64]| a.mul_dense(&Tensor::from_raw(n, 1, v.to_vec())).into_data();
    let ax = matvec(x);
    let mut r: Vec<f64> = (0..n).map(|i| b[i] - ax[i]).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * bn {
            break;
        }
        let ap = matvec(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
}

/// As-rigid-as-possible registration of `mesh` to keypoint constraints and,
/// optionally, a target cloud.
///
/// Alternates per-vertex best-fit ring rotations, nearest-neighbour
/// assignments to the cloud and a linear solve for vertex positions. With
/// both keypoints and a cloud, the cloud stage is warm-started from the
/// keypoint-only fit. Every step minimizes the same energy over its block of
/// variables, so the recorded energies never increase.
pub fn arap_register(
    mesh: &TriMesh,
    keypoints: &[KeypointConstraint],
    cloud: Option<&[[f64; 3]]>,
    opts: ArapOptions,
) -> Result<ArapResult> {
    let n = mesh.vertices.len();
    ensure!(n > 0, Validation, "mesh has no vertices");
    ensure!(
        keypoints.iter().all(|k| k.a < n && k.b < n && (0.0..=1.0).contains(&k.t)),
        Validation,
        "keypoint constraint out of range"
    );
    ensure!(
        !keypoints.is_empty() || cloud.is_some_and(|c| !c.is_empty()),
        Validation,
        "registration needs keypoints or a target cloud"
    );
    let rings = mesh.neighbors();
    let v0 = &mesh.vertices;
    let wk = opts.keypoint_weight;
    let wc = if cloud.is_some() { opts.cloud_weight } else { 0.0 };
    let tree = cloud.map(KdTree::new);
    let cloud = cloud.unwrap_or(&[]);

    let mut trip = Vec::new();
    for (i, ring) in rings.iter().enumerate() {
        for &j in ring {
            // Directed pair (i, j) contributes (e_i - e_j)(e_i - e_j)^T.
            trip.push((i, i, 1.0));
            trip.push((j, j, 1.0));
            trip.push((i, j, -1.0));
            trip.push((j, i, -1.0));
        }
        if wc > 0.0 {
            trip.push((i, i, wc));
        }
    }
    for k in keypoints {
        let c = [(k.a, 1.0 - k.t), (k.b, k.t)];
        for &(p, cp) in &c {
            for &(q, cq) in &c {
                trip.push((p, q, wk * cp * cq));
            }
        }
    }
    let a = SparseMatrix::from_triplets(n, n, trip);

    let energy = |p: &[[f64; 3]], rots: &[Matrix3<f64>], nn: &[usize]| -> f64 {
        let mut e = 0.0;
        for (i, ring) in rings.iter().enumerate() {
            for &j in ring {
                let d = mesh::sub(v0[i], v0[j]);
                let rd = rots[i] * Vector3::new(d[0], d[1], d[2]);
                let q = mesh::sub(p[i], p[j]);
                e += (q[0] - rd[0]).powi(2) + (q[1] - rd[1]).powi(2) + (q[2] - rd[2]).powi(2);
            }
        }
        for k in keypoints {
            let x = mesh::add(mesh::scale(p[k.a], 1.0 - k.t), mesh::scale(p[k.b], k.t));
            e += wk * crate::spatial::dist2(&x, &k.target);
        }
        if wc > 0.0 {
            for (i, &m) in nn.iter().enumerate() {
                e += wc * crate::spatial::dist2(&p[i], &cloud[m]);
            }
        }
        e
    };

    // Nearest-neighbour assignments from the rest pose lock onto wrong points
    // once the cloud is displaced by more than the vertex spacing, so the
    // cloud stage starts from the keypoint-only solution.
    let mut p = if wc > 0.0 && !keypoints.is_empty() {
        arap_register(mesh, keypoints, None, opts)?.vertices
    } else {
        v0.clone()
    };
    let mut rots = vec![Matrix3::identity(); n];
    let mut nn = vec![0usize; if wc > 0.0 { n } else { 0 }];
    let mut energies = Vec::with_capacity(opts.iterations + 1);
    let mut fallbacks = 0;
    for _ in 0..opts.iterations {
        fallbacks = 0;
        for (i, ring) in rings.iter().enumerate() {
            let mut s = Matrix3::zeros();
            for &j in ring {
                let e = mesh::sub(v0[i], v0[j]);
                let f = mesh::sub(p[i], p[j]);
                s += Vector3::new(e[0], e[1], e[2]) * Vector3::new(f[0], f[1], f[2]).transpose();
            }
            rots[i] = match best_rotation(&s) {
                Some(r) => r,
                None => {
                    fallbacks += 1;
                    Matrix3::identity()
                }
            };
        }
        if let Some(tree) = &tree {
            for (i, slot) in nn.iter_mut().enumerate() {
                *slot = tree.nearest(&p[i]).0;
            }
        }
        let e_now = energy(&p, &rots, &nn);
        ensure!(e_now.is_finite(), Numerical, "registration energy is not finite");
        if let Some(&prev) = energies.last() {
            if prev - e_now <= 1e-12 * prev || e_now < 1e-24 {
                energies.push(e_now);
                break;
            }
        }
        energies.push(e_now);
        for axis in 0..3 {
            let mut b = vec![0.0; n];
            for (i, ring) in rings.iter().enumerate() {
                for &j in ring {
                    let d = mesh::sub(v0[i], v0[j]);
                    let r = (rots[i] * Vector3::new(d[0], d[1], d[2]))[axis];
                    b[i] += r;
                    b[j] -= r;
                }
                if wc > 0.0 {
                    b[i] += wc * cloud[nn[i]][axis];
                }
            }
            for k in keypoints {
                b[k.a] += wk * (1.0 - k.t) * k.target[axis];
                b[k.b] += wk * k.t * k.target[axis];
            }
            let mut x: Vec<f64> = p.iter().map(|v| v[axis]).collect();
            cg_solve(&a, &b, &mut x, 1e-12, 4 * n + 100);
            for (v, xi) in p.iter_mut().zip(x) {
                v[axis] = xi;
            }
        }
    }
    energies.push(energy(&p, &rots, &nn));
    Ok(ArapResult { vertices: p, energies, identity_fallbacks: fallbacks })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpdOptions {
    pub beta: f64,
    pub lambda: f64,
    pub outlier_weight: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for CpdOptions {
    fn default() -> Self {
        Self { beta: 2.0, lambda: 3.0, outlier_weight: 0.1, max_iterations: 150, tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub target_index: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpdResult {
    /// Moved source points, in input units.
    pub moved: Vec<[f64; 3]>,
    pub displacement: Vec<[f64; 3]>,
    pub correspondences: Vec<Correspondence>,
    /// Posterior mass each target point receives from the mixture components.
    pub target_mass: Vec<f64>,
    /// Penalized negative log-likelihood after every EM iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn normalize(points: &[[f64; 3]]) -> ([f64; 3], f64, DMatrix<f64>) {
    let c = mesh::centroid(points);
    let var = points.iter().map(|p| crate::spatial::dist2(p, &c)).sum::<f64>() / points.len() as f64;
    let s = var.sqrt().max(1e-300);
    let m = DMatrix::from_fn(points.len(), 3, |i, a| (points[i][a] - c[a]) / s);
    (c, s, m)
}

/// Non-rigid coherent point drift moving `source` towards `target`.
///
/// Both sets are normalized to zero mean and unit RMS radius; the target's
/// normalization defines the working frame, so results are returned in input
/// units.
pub fn cpd_register(source: &[[f64; 3]], target: &[[f64; 3]], opts: CpdOptions) -> Result<CpdResult> {
    ensure!(!source.is_empty() && !target.is_empty(), Validation, "point drift needs two non-empty clouds");
    ensure!((0.0..1.0).contains(&opts.outlier_weight), Validation, "outlier weight must be in [0, 1)");
    ensure!(opts.beta > 0.0 && opts.lambda > 0.0, Validation, "kernel width and regularization must be positive");
    let (m, n, d) = (source.len(), target.len(), 3.0);
    let (tc, ts, x) = normalize(target);
    let y = DMatrix::from_fn(m, 3, |i, a| (source[i][a] - tc[a]) / ts);
    let g = DMatrix::from_fn(m, m, |i, j| {
        let mut s = 0.0;
        for a in 0..3 {
            s += (y[(i, a)] - y[(j, a)]).powi(2);
        }
        (-s / (2.0 * opts.beta * opts.beta)).exp()
    });
    let mut w = DMatrix::<f64>::zeros(m, 3);
    let mut t = y.clone();
    let mut sigma2 = 0.0;
    for i in 0..m {
        for j in 0..n {
            for a in 0..3 {
                sigma2 += (x[(j, a)] - y[(i, a)]).powi(2);
            }
        }
    }
    sigma2 /= d * m as f64 * n as f64;

    let coincident = {
        let (ab, ba) = crate::losses::chamfer_directions(source, target, true)?;
        ab + ba <= 1e-24 * ts * ts
    };
    let mut p = DMatrix::<f64>::zeros(m, n);
    let mut objective = Vec::new();
    let mut iterations = 0;
    let e_step = |t: &DMatrix<f64>, sigma2: f64, p: &mut DMatrix<f64>| -> f64 {
        let c = (2.0 * std::f64::consts::PI * sigma2).powf(d / 2.0) * opts.outlier_weight
            / (1.0 - opts.outlier_weight)
            * m as f64
            / n as f64;
        let mut nll = 0.0;
        for j in 0..n {
            let mut denom = c;
            for i in 0..m {
                let mut s = 0.0;
                for a in 0..3 {
                    s += (x[(j, a)] - t[(i, a)]).powi(2);
                }
                let v = (-s / (2.0 * sigma2)).exp();
                p[(i, j)] = v;
                denom += v;
            }
            for i in 0..m {
                p[(i, j)] /= denom;
            }
            // Mixture density with the normalizing constant of each component.
            let norm = (1.0 - opts.outlier_weight) / (m as f64 * (2.0 * std::f64::consts::PI * sigma2).powf(d / 2.0));
            nll -= (denom * norm).ln();
        }
        nll
    };
    let penalty = |w: &DMatrix<f64>| -> f64 { opts.lambda / 2.0 * (w.transpose() * &g * w).trace() };

    if coincident {
        e_step(&t, 1e-10, &mut p);
        iterations = 1;
        objective.push(0.0);
    } else {
        let mut prev = e_step(&t, sigma2, &mut p) + penalty(&w);
        objective.push(prev);
        for it in 0..opts.max_iterations {
            iterations = it + 1;
            let p1: Vec<f64> = (0..m).map(|i| p.row(i).sum()).collect();
            let pt1: Vec<f64> = (0..n).map(|j| p.column(j).sum()).collect();
            let np: f64 = p1.iter().sum();
            let px = &p * &x;
            let mut rhs = px.clone();
            for i in 0..m {
                for a in 0..3 {
                    rhs[(i, a)] -= p1[i] * y[(i, a)];
                }
            }
            let solve = |lambda: f64| -> Option<DMatrix<f64>> {
                let mut a = DMatrix::from_fn(m, m, |i, j| p1[i] * g[(i, j)]);
                for i in 0..m {
                    a[(i, i)] += lambda * sigma2;
                }
                let sol = a.lu().solve(&rhs)?;
                sol.iter().all(|v| v.is_finite()).then_some(sol)
            };
            w = match solve(opts.lambda) {
                Some(s) => s,
                None => solve(opts.lambda * 10.0)
                    .ok_or_else(|| Error::Numerical("point drift M-step system is singular".into()))?,
            };
            t = &y + &g * &w;
            let mut num = 0.0;
            for j in 0..n {
                for a in 0..3 {
                    num += pt1[j] * x[(j, a)] * x[(j, a)];
                }
            }
            for i in 0..m {
                for a in 0..3 {
                    num += -2.0 * px[(i, a)] * t[(i, a)] + p1[i] * t[(i, a)] * t[(i, a)];
                }
            }
            sigma2 = (num / (np * d)).max(1e-10);
            let obj = e_step(&t, sigma2, &mut p) + penalty(&w);
            ensure!(obj.is_finite(), Numerical, "point drift objective is not finite");
            objective.push(obj);
            if (prev - obj).abs() < opts.tolerance {
                break;
            }
            prev = obj;
        }
    }
    let moved: Vec<[f64; 3]> =
        (0..m).map(|i| [t[(i, 0)] * ts + tc[0], t[(i, 1)] * ts + tc[1], t[(i, 2)] * ts + tc[2]]).collect();
    let displacement = moved.iter().zip(source).map(|(a, b)| mesh::sub(*a, *b)).collect();
    let correspondences = (0..m)
        .map(|i| {
            let row = p.row(i);
            let total: f64 = row.sum();
            let (j, best) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
            Correspondence { target_index: j, confidence: if total > 0.0 { (best / total).clamp(0.0, 1.0) } else { 0.0 } }
        })
        .collect();
    let target_mass = (0..n).map(|j| p.column(j).sum()).collect();
    Ok(CpdResult { moved, displacement, correspondences, target_mass, objective, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ellipse(n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = Vec::new();
        while out.len() < n {
            let (x, y): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if x * x + y * y < 1.0 {
                out.push([2.0 * x, 0.8 * y, 0.0]);
            }
        }
        out
    }

    fn rot(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
        let n = mesh::norm(axis);
        let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    fn apply(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
        [mesh::dot(r[0], p), mesh::dot(r[1], p), mesh::dot(r[2], p)]
    }

    fn check_orthonormal(pose: &RigidPose) {
        let m = Matrix3::from_fn(|i, j| pose.rotation[i][j]);
        assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9);
        assert!((m.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ellipse_aligned_is_identity() {
        let pts = ellipse(400);
        let pose = rigid_align(&pts, AlignOptions::default()).unwrap();
        check_orthonormal(&pose);
        for a in 0..3 {
            assert!(pose.rotation[a][a].abs() > (1f64.to_radians()).cos(), "{:?}", pose.rotation);
        }
        assert!(rigid_align(&pts[..5], AlignOptions::default()).is_err());
        let line: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(matches!(rigid_align(&line, AlignOptions::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rotated_ellipse_axes_recovered() {
        let pts = ellipse(400);
        let r = rot([0.3, -0.5, 0.8], 1.1);
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| mesh::add(apply(&r, *p), [1.0, 2.0, -3.0])).collect();
        let pose = rigid_align(&moved, AlignOptions::default()).unwrap();
        check_orthonormal(&pose);
        // Each canonical axis is parallel to the rotated world axis (the
        // ellipse is symmetric, so signs are not observable).
        for a in 0..3 {
            let world = [r[0][a], r[1][a], r[2][a]];
            assert!(mesh::dot(pose.rotation[a], world).abs() > 2f64.to_radians().cos());
        }
    }

    #[test]
    fn hull_area_of_square() {
        let mut pts = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]];
        assert!((convex_hull_area(&mut pts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn keypoint_sampling() {
        let sq = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let all = sample_contour_keypoints(&sq, 4).unwrap();
        assert_eq!(all.iter().map(|s| s.point).collect::<Vec<_>>(), vec![sq[1], sq[2], sq[3], sq[0]]);
        let two = sample_contour_keypoints(&sq, 2).unwrap();
        assert_eq!(two[0].point, [1.0, 0.0, 0.0]);
        assert_eq!(two[1].point, [0.0, 1.0, 0.0]);
        let circle: Vec<[f64; 3]> = (0..200)
            .map(|i| {
                let a = i as f64 / 200.0 * std::f64::consts::TAU;
                [a.cos(), a.sin(), 0.0]
            })
            .collect();
        let s = sample_contour_keypoints(&circle, 16).unwrap();
        let gaps: Vec<f64> = (0..16).map(|i| mesh::norm(mesh::sub(s[(i + 1) % 16].point, s[i].point))).collect();
        let mean = gaps.iter().sum::<f64>() / 16.0;
        assert!(gaps.iter().all(|g| (g - mean).abs() < 1e-3));
    }

    fn plate(n: usize) -> TriMesh {
        let mut v = Vec::new();
        for j in 0..n {
            for i in 0..n {
                v.push([i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64, 0.0]);
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

    #[test]
    fn arap_recovers_translation() {
        let m = plate(6);
        let shift = [0.3, -0.2, 0.5];
        let keys: Vec<KeypointConstraint> = [0usize, 5, 30, 35, 14]
            .iter()
            .map(|&i| KeypointConstraint { a: i, b: i, t: 0.0, target: mesh::add(m.vertices[i], shift) })
            .collect();
        let cloud: Vec<[f64; 3]> = m.vertices.iter().map(|v| mesh::add(*v, shift)).collect();
        let r = arap_register(&m, &keys, Some(&cloud), ArapOptions { iterations: 100, ..Default::default() }).unwrap();
        for (p, v) in r.vertices.iter().zip(&m.vertices) {
            for a in 0..3 {
                assert!((p[a] - v[a] - shift[a]).abs() < 1e-5);
            }
        }
        assert!(r.energies.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(*r.energies.last().unwrap() < 1e-10);
        let direct = arap_register(&m, &keys, None, ArapOptions { iterations: 2, ..Default::default() }).unwrap();
        for (p, v) in direct.vertices.iter().zip(&m.vertices) {
            assert!(mesh::norm(mesh::sub(mesh::sub(*p, *v), shift)) < 1e-9);
        }
    }

    #[test]
    fn cpd_identity_and_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src: Vec<[f64; 3]> = (0..150).map(|_| [rng.gen(), rng.gen::<f64>() * 0.6, 0.0]).collect();
        let same = cpd_register(&src, &src, CpdOptions::default()).unwrap();
        assert!(same.iterations <= 2);
        assert!(same.displacement.iter().all(|d| mesh::norm(*d) < 1e-9));
        let warped: Vec<[f64; 3]> =
            src.iter().map(|p| [p[0], p[1], 0.05 * (std::f64::consts::PI * p[0]).sin()]).collect();
        let r = cpd_register(&src, &warped, CpdOptions::default()).unwrap();
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", r.objective);
        let err = r.moved.iter().zip(&warped).map(|(a, b)| mesh::norm(mesh::sub(*a, *b))).sum::<f64>() / 150.0;
        assert!(err < 0.01, "mean error {err}");
    }
}
