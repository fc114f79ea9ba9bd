//! Triangle meshes and the topology queries the model needs.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{ensure, Error, Result};

/// Indexed triangle mesh with optional per-vertex texture coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Either empty or one entry per vertex.
    pub uvs: Vec<[f64; 2]>,
}

pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let m = Self { vertices, faces, uvs: Vec::new() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for f in &self.faces {
            ensure!(f.iter().all(|&i| i < n), Validation, "face {f:?} references a missing vertex");
            ensure!(f[0] != f[1] && f[1] != f[2] && f[0] != f[2], Validation, "face {f:?} repeats a vertex");
        }
        ensure!(self.uvs.is_empty() || self.uvs.len() == n, Validation, "texture coordinates must match vertices");
        ensure!(
            self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite())),
            Numerical,
            "mesh has non-finite vertex coordinates"
        );
        Ok(())
    }

    /// Unique undirected edges, each stored with the smaller index first.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert([a.min(b), a.max(b)]);
            }
        }
        set.into_iter().collect()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// Sorted 1-ring neighbours of every vertex.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![BTreeSet::new(); self.vertices.len()];
        for [a, b] in self.edges() {
            nb[a].insert(b);
            nb[b].insert(a);
        }
        nb.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// The single boundary cycle, following face orientation, starting at the
    /// smallest boundary vertex index.
    pub fn boundary_loop(&self) -> Result<Vec<usize>> {
        let mut half = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                half.insert((f[k], f[(k + 1) % 3]));
            }
        }
        let mut next: BTreeMap<usize, usize> = BTreeMap::new();
        for &(a, b) in &half {
            if !half.contains(&(b, a)) && next.insert(a, b).is_some() {
                return Err(Error::Degenerate(format!("boundary is not a simple cycle at vertex {a}")));
            }
        }
        let (&start, _) = next.iter().next().ok_or_else(|| Error::Degenerate("mesh has no boundary".into()))?;
        let mut out = vec![start];
        let mut cur = next[&start];
        while cur != start {
            ensure!(out.len() <= next.len(), Degenerate, "boundary walk does not close");
            out.push(cur);
            cur = *next.get(&cur).ok_or_else(|| Error::Degenerate("boundary walk hit a dead end".into()))?;
        }
        ensure!(out.len() == next.len(), Degenerate, "mesh boundary has {} loops", if out.len() < next.len() { 2 } else { 1 });
        Ok(out)
    }

    pub fn face_normal(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.faces[f];
        cross(sub(self.vertices[b], self.vertices[a]), sub(self.vertices[c], self.vertices[a]))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| norm(self.face_normal(f)) / 2.0).sum()
    }

    /// Area-weighted, unit-length vertex normals. Isolated vertices get zero.
    pub fn vertex_normals(&self) -> Vec<[f64; 3]> {
        let mut n = vec![[0.0; 3]; self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let fnorm = self.face_normal(fi);
            for &v in f {
                n[v] = add(n[v], fnorm);
            }
        }
        n.into_iter()
            .map(|v| {
                let l = norm(v);
                if l > 0.0 {
                    scale(v, 1.0 / l)
                } else {
                    v
                }
            })
            .collect()
    }

    /// Longest side of the axis-aligned bounding box.
    pub fn extent(&self) -> f64 {
        extent(&self.vertices)
    }

    /// Deterministic area-uniform surface samples using a stratified sequence.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<[f64; 3]> {
        use rand::{Rng, SeedableRng};
        if self.faces.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            acc += norm(self.face_normal(f));
            cdf.push(acc);
        }
        (0..n)
            .map(|i| {
                let t = (i as f64 + rng.gen::<f64>()) / n as f64 * acc;
                let f = cdf.partition_point(|&c| c < t).min(self.faces.len() - 1);
                let (mut r1, mut r2): (f64, f64) = (rng.gen(), rng.gen());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                let [a, b, c] = self.faces[f];
                let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
                add(pa, add(scale(sub(pb, pa), r1), scale(sub(pc, pa), r2)))
            })
            .collect()
    }
}

pub fn extent(points: &[[f64; 3]]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max)
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len().max(1) as f64;
    let s = points.iter().fold([0.0; 3], |a, p| add(a, *p));
    scale(s, 1.0 / n)
}

/// Closest point on triangle `(a, b, c)` to `p`.
pub fn closest_point_on_triangle(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return add(a, scale(ab, d1 / (d1 - d3)));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return add(a, scale(ac, d2 / (d2 - d6)));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return add(b, scale(sub(c, b), (d4 - d3) / ((d4 - d3) + (d5 - d6))));
    }
    let denom = 1.0 / (va + vb + vc);
    add(a, add(scale(ab, vb * denom), scale(ac, vc * denom)))
}
