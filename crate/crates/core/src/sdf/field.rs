use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::Mask2D;
use crate::error::{ensure, Result};

/// Signed distance samples at pixel centers, positive inside.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid2D {
    width: usize,
    height: usize,
    cell: f64,
    values: Vec<f64>,
}

impl SdfGrid2D {
    pub fn new(width: usize, height: usize, cell: f64, values: Vec<f64>) -> Result<Self> {
        ensure!(width > 0 && height > 0, Validation, "grid dimensions must be positive");
        ensure!(values.len() == width * height, Dimension, "grid needs {} values, got {}", width * height, values.len());
        ensure!(cell > 0.0, Validation, "cell size must be positive");
        ensure!(values.iter().all(|v| v.is_finite()), Numerical, "grid contains non-finite values");
        Ok(Self { width, height, cell, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.width + i]
    }

    /// Bilinear interpolation between pixel centers, clamped at the border.
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let x = (u / self.cell - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v / self.cell - 0.5).clamp(0.0, (self.height - 1) as f64);
        let i0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let j0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);
        let fx = x - i0 as f64;
        let fy = y - j0 as f64;
        let a = self.get(i0, j0) * (1.0 - fx) + self.get(i1, j0) * fx;
        let b = self.get(i0, j1) * (1.0 - fx) + self.get(i1, j1) * fx;
        a * (1.0 - fy) + b * fy
    }

    /// Occupancy recovered from the sign.
    pub fn to_mask(&self) -> Result<Mask2D> {
        Mask2D::new(self.width, self.height, self.values.iter().map(|&d| d > 0.0).collect(), self.cell)
    }
}

const UNSET: u32 = u32::MAX;

/// Nearest-seed propagation by jump flooding with a final unit-step pass.
fn flood(width: usize, height: usize, seed: impl Fn(usize) -> bool) -> Vec<u32> {
    let n = width * height;
    let mut near: Vec<u32> = (0..n).map(|p| if seed(p) { p as u32 } else { UNSET }).collect();
    let mut next = near.clone();
    let d2 = |p: usize, s: u32| {
        let (px, py) = ((p % width) as i64, (p / width) as i64);
        let (sx, sy) = ((s as usize % width) as i64, (s as usize / width) as i64);
        (px - sx) * (px - sx) + (py - sy) * (py - sy)
    };
    let mut steps = Vec::new();
    let mut k = width.max(height).next_power_of_two() / 2;
    while k >= 1 {
        steps.push(k);
        k /= 2;
    }
    steps.extend([2, 1]);
    for &k in &steps {
        let k = k as isize;
        for p in 0..n {
            let (x, y) = ((p % width) as isize, (p / width) as isize);
            let mut best = near[p];
            let mut best_d = if best == UNSET { i64::MAX } else { d2(p, best) };
            for dy in [-k, 0, k] {
                for dx in [-k, 0, k] {
                    let (qx, qy) = (x + dx, y + dy);
                    if qx < 0 || qy < 0 || qx >= width as isize || qy >= height as isize {
                        continue;
                    }
                    let s = near[qy as usize * width + qx as usize];
                    if s == UNSET {
                        continue;
                    }
                    let d = d2(p, s);
                    if d < best_d || (d == best_d && s < best) {
                        best = s;
                        best_d = d;
                    }
                }
            }
            next[p] = best;
        }
        std::mem::swap(&mut near, &mut next);
    }
    near
}

/// Signed distance transform of a binary mask by jump flooding.
///
/// Foreground pixels get `+` the distance to the nearest background pixel
/// center and background pixels get `-` the distance to the nearest foreground
/// pixel center, in UV units. With `normalize` the result is divided by its
/// largest magnitude.
pub fn jump_flood_sdf(mask: &Mask2D, normalize: bool) -> Result<SdfGrid2D> {
    mask.validate()?;
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    let to_bg = flood(w, h, |p| !bits[p]);
    let to_fg = flood(w, h, |p| bits[p]);
    let s = mask.pixel_scale();
    let dist = |p: usize, q: u32| {
        let q = q as usize;
        let dx = (p % w) as f64 - (q % w) as f64;
        let dy = (p / w) as f64 - (q / w) as f64;
        (dx * dx + dy * dy).sqrt() * s
    };
    let mut values: Vec<f64> =
        (0..w * h).map(|p| if bits[p] { dist(p, to_bg[p]) } else { -dist(p, to_fg[p]) }).collect();
    if normalize {
        let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        values.iter_mut().for_each(|v| *v /= m);
    }
    SdfGrid2D::new(w, h, s, values)
}

/// Clamps a signed distance to `[-delta, delta]`.
pub fn truncate_sdf(d: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    d.clamp(-delta, delta)
}

/// Logistic soft occupancy `1 / (1 + exp(-k d))`.
pub fn sdf_to_soft_mask(d: f64, k: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-k * d).exp())
    } else {
        let e = (k * d).exp();
        e / (1.0 + e)
    }
}

/// Thresholds soft occupancies at 0.5.
pub fn threshold_soft_mask(width: usize, height: usize, soft: &[f64], pixel_scale: f64) -> Result<Mask2D> {
    Mask2D::new(width, height, soft.iter().map(|&s| s > 0.5).collect(), pixel_scale)
}

/// A UV location with its interpolated signed distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample {
    pub uv: [f64; 2],
    pub d: f64,
}

/// Draws `n` training points: half from cells within two cells of the zero
/// level set (jittered inside the cell), half uniformly over the grid. Values
/// come from bilinear interpolation.
pub fn sample_training_points(grid: &SdfGrid2D, n: usize, seed: u64) -> Result<Vec<SdfSample>> {
    ensure!(n >= 1, Validation, "sample count must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = 2.0 * grid.cell;
    let near: Vec<usize> = (0..grid.values.len()).filter(|&p| grid.values[p].abs() < band).collect();
    let su = grid.width as f64 * grid.cell;
    let sv = grid.height as f64 * grid.cell;
    let n_near = if near.is_empty() { 0 } else { n / 2 };
    let mut out = Vec::with_capacity(n);
    while out.len() < n_near {
        let p = near[rng.gen_range(0..near.len())];
        let mut sample = None;
        for _ in 0..8 {
            let u = ((p % grid.width) as f64 + rng.gen::<f64>()) * grid.cell;
            let v = ((p / grid.width) as f64 + rng.gen::<f64>()) * grid.cell;
            let d = grid.sample(u, v);
            if d.abs() < band {
                sample = Some(SdfSample { uv: [u, v], d });
                break;
            }
        }
        let s = sample.unwrap_or_else(|| {
            let uv = [((p % grid.width) as f64 + 0.5) * grid.cell, ((p / grid.width) as f64 + 0.5) * grid.cell];
            SdfSample { uv, d: grid.values[p] }
        });
        out.push(s);
    }
    while out.len() < n {
        let u = rng.gen::<f64>() * su;
        let v = rng.gen::<f64>() * sv;
        out.push(SdfSample { uv: [u, v], d: grid.sample(u, v) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(mask: &Mask2D) -> Vec<f64> {
        let (w, h) = (mask.width(), mask.height());
        let s = mask.pixel_scale();
        (0..w * h)
            .map(|p| {
                let inside = mask.bits()[p];
                let best = (0..w * h)
                    .filter(|&q| mask.bits()[q] != inside)
                    .map(|q| {
                        let dx = (p % w) as f64 - (q % w) as f64;
                        let dy = (p / w) as f64 - (q / w) as f64;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                if inside {
                    best * s
                } else {
                    -best * s
                }
            })
            .collect()
    }

    #[test]
    fn single_pixel_corner_distance() {
        let mut bits = vec![false; 25];
        bits[12] = true;
        let m = Mask2D::unit(5, bits).unwrap();
        let g = jump_flood_sdf(&m, false).unwrap();
        let cell = 0.2;
        assert!((g.get(0, 0) + 2.0 * 2f64.sqrt() * cell).abs() < 1e-12);
        assert!((g.get(2, 2) - cell).abs() < 1e-12);
    }

    #[test]
    fn degenerate_masks_rejected() {
        assert!(matches!(jump_flood_sdf(&Mask2D::unit(4, vec![true; 16]).unwrap(), false), Err(crate::Error::Degenerate(_))));
        assert!(matches!(jump_flood_sdf(&Mask2D::unit(4, vec![false; 16]).unwrap(), false), Err(crate::Error::Degenerate(_))));
    }

    #[test]
    fn jump_flood_close_to_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let w = rng.gen_range(8..40);
            let h = rng.gen_range(8..40);
            let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.3)).collect();
            let m = Mask2D::new(w, h, bits, 1.0).unwrap();
            let g = jump_flood_sdf(&m, false).unwrap();
            for (a, b) in g.values().iter().zip(brute(&m)) {
                assert!((a - b).abs() <= 2f64.sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn soft_mask_values() {
        assert!((sdf_to_soft_mask(0.1, 50.0) - 0.9933071490757153).abs() < 1e-12);
        assert_eq!(sdf_to_soft_mask(0.0, 50.0), 0.5);
        assert!((sdf_to_soft_mask(-0.1, 50.0) - (1.0 - 0.9933071490757153)).abs() < 1e-12);
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_sdf(0.5, 0.01), 0.01);
        assert_eq!(truncate_sdf(-0.5, 0.01), -0.01);
        assert_eq!(truncate_sdf(0.003, 0.01), 0.003);
    }

    #[test]
    fn normalized_grid_bounded() {
        let m = Mask2D::from_fn(32, |u, v| (u - 0.5).hypot(v - 0.5) < 0.3).unwrap();
        let g = jump_flood_sdf(&m, true).unwrap();
        let max = g.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disk_center_value() {
        let m = Mask2D::from_fn(64, |u, v| (u - 0.5).hypot(v - 0.5) < 0.3).unwrap();
        let g = jump_flood_sdf(&m, false).unwrap();
        assert!((g.sample(0.5, 0.5) - 0.3).abs() <= 1.0 / 64.0 * 1.5);
    }

    #[test]
    fn samples_at_nodes_and_near_boundary_fraction() {
        let m = Mask2D::from_fn(32, |u, v| (u - 0.5).hypot(v - 0.5) < 0.3).unwrap();
        let g = jump_flood_sdf(&m, false).unwrap();
        assert_eq!(g.sample(g.cell() * 3.5, g.cell() * 7.5), g.get(3, 7));
        let s = sample_training_points(&g, 20000, 1).unwrap();
        let near = s.iter().filter(|p| p.d.abs() < 2.0 * g.cell()).count();
        assert!(near as f64 / 20000.0 >= 0.45);
        assert!(sample_training_points(&g, 0, 1).is_err());
    }
}
