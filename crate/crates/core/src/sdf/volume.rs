use crate::error::{ensure, Result};
use crate::spatial::KdTree;

/// Axis-aligned cubic voxel lattice. Voxel `(x, y, z)` has its center at
/// `origin + (index + 0.5) * voxel`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridFrame {
    pub origin: [f64; 3],
    pub voxel: f64,
    pub res: usize,
}

impl GridFrame {
    pub fn new(center: [f64; 3], side: f64, res: usize) -> Result<Self> {
        ensure!(res > 0, Validation, "grid resolution must be positive");
        ensure!(side > 0.0 && side.is_finite(), Validation, "grid side must be positive");
        let h = side / 2.0;
        Ok(Self { origin: [center[0] - h, center[1] - h, center[2] - h], voxel: side / res as f64, res })
    }

    /// Cube around the bounding box of `points`, enlarged by `margin` (relative).
    /// A degenerate box falls back to a unit side.
    pub fn around(points: &[[f64; 3]], res: usize, margin: f64) -> Result<Self> {
        ensure!(!points.is_empty(), Validation, "point set is empty");
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let side = if ext > 0.0 { ext * (1.0 + margin) } else { 1.0 };
        Self::new([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0], side, res)
    }

    pub fn center_of(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + (x as f64 + 0.5) * self.voxel,
            self.origin[1] + (y as f64 + 0.5) * self.voxel,
            self.origin[2] + (z as f64 + 0.5) * self.voxel,
        ]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.res + y) * self.res + z
    }
}

/// Unsigned truncated distance volume with values in `[0, delta]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid3D {
    pub frame: GridFrame,
    pub delta: f64,
    pub values: Vec<f64>,
}

impl SdfGrid3D {
    pub fn res(&self) -> usize {
        self.frame.res
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.frame.index(x, y, z)]
    }
}

/// Truncated unsigned distance from every voxel center to the nearest point.
pub fn backproject_to_grid(points: &[[f64; 3]], frame: GridFrame, delta: f64) -> Result<SdfGrid3D> {
    ensure!(!points.is_empty(), Validation, "point set is empty");
    ensure!(delta > 0.0, Validation, "truncation distance must be positive");
    ensure!(points.iter().all(|p| p.iter().all(|c| c.is_finite())), Numerical, "point set has non-finite coordinates");
    let tree = KdTree::new(points);
    let r = frame.res;
    let mut values = vec![0.0; r * r * r];
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                let (_, d2) = tree.nearest(&frame.center_of(x, y, z));
                values[frame.index(x, y, z)] = d2.sqrt().min(delta);
            }
        }
    }
    Ok(SdfGrid3D { frame, delta, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_center() {
        let frame = GridFrame::new([0.0; 3], 3.0, 3).unwrap();
        let g = backproject_to_grid(&[[0.0, 0.0, 0.0]], frame, 10.0).unwrap();
        assert_eq!(g.get(1, 1, 1), 0.0);
        for (x, y, z) in [(0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)] {
            assert!((g.get(x, y, z) - frame.voxel).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_distance_and_truncation() {
        let mut pts = Vec::new();
        for i in 0..41 {
            for j in 0..41 {
                pts.push([-1.0 + i as f64 * 0.05, -1.0 + j as f64 * 0.05, 0.0]);
            }
        }
        let frame = GridFrame::new([0.0; 3], 1.0, 8).unwrap();
        let delta = 0.3;
        let g = backproject_to_grid(&pts, frame, delta).unwrap();
        for x in 2..6 {
            for z in 0..8 {
                let c = frame.center_of(x, 3, z);
                let expect = c[2].abs().min(delta);
                assert!((g.get(x, 3, z) - expect).abs() < 0.026, "{} {}", g.get(x, 3, z), expect);
                assert!(g.get(x, 3, z) <= delta);
            }
        }
        assert!(backproject_to_grid(&[], frame, delta).is_err());
    }
}
