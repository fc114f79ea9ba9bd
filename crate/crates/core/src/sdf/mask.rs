use std::collections::VecDeque;

use crate::error::{ensure, Result};

/// Binary occupancy image. Row 0 is the bottom row (smallest `v`); pixel
/// `(i, j)` has its center at `((i + 0.5) * pixel_scale, (j + 0.5) * pixel_scale)`
/// in UV units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask2D {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    pixel_scale_bits: u64,
}

impl Mask2D {
    pub fn new(width: usize, height: usize, bits: Vec<bool>, pixel_scale: f64) -> Result<Self> {
        ensure!(width > 0 && height > 0, Validation, "mask dimensions must be positive");
        ensure!(bits.len() == width * height, Dimension, "mask needs {} pixels, got {}", width * height, bits.len());
        ensure!(pixel_scale > 0.0 && pixel_scale.is_finite(), Validation, "pixel scale must be positive");
        Ok(Self { width, height, bits, pixel_scale_bits: pixel_scale.to_bits() })
    }

    /// Square mask over the unit UV square.
    pub fn unit(res: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(res > 0, Validation, "mask resolution must be positive");
        Self::new(res, res, bits, 1.0 / res as f64)
    }

    /// Rasterizes a predicate over pixel centers of a `res x res` unit-square mask.
    pub fn from_fn(res: usize, f: impl Fn(f64, f64) -> bool) -> Result<Self> {
        ensure!(res > 0, Validation, "mask resolution must be positive");
        let s = 1.0 / res as f64;
        let bits = (0..res * res).map(|k| f(((k % res) as f64 + 0.5) * s, ((k / res) as f64 + 0.5) * s)).collect();
        Self::unit(res, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_scale(&self) -> f64 {
        f64::from_bits(self.pixel_scale_bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.width + i]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_signed(&self, i: isize, j: isize) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height && self.get(i as usize, j as usize)
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[j * self.width + i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        let s = self.pixel_scale();
        [(i as f64 + 0.5) * s, (j as f64 + 0.5) * s]
    }

    /// At least one foreground and one background pixel.
    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        ensure!(n > 0, Degenerate, "mask has no foreground pixels");
        ensure!(n < self.bits.len(), Degenerate, "mask has no background pixels");
        Ok(())
    }

    fn components(&self, value: bool) -> (Vec<usize>, usize) {
        let (w, h) = (self.width, self.height);
        let mut label = vec![usize::MAX; w * h];
        let mut n = 0;
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            if self.bits[start] != value || label[start] != usize::MAX {
                continue;
            }
            label[start] = n;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                let (i, j) = (p % w, p / w);
                let mut visit = |q: usize| {
                    if self.bits[q] == value && label[q] == usize::MAX {
                        label[q] = n;
                        queue.push_back(q);
                    }
                };
                if i > 0 {
                    visit(p - 1);
                }
                if i + 1 < w {
                    visit(p + 1);
                }
                if j > 0 {
                    visit(p - w);
                }
                if j + 1 < h {
                    visit(p + w);
                }
            }
            n += 1;
        }
        (label, n)
    }

    /// Keeps the largest 4-connected foreground component (lowest label on ties).
    pub fn keep_largest_component(&mut self) {
        let (label, n) = self.components(true);
        if n <= 1 {
            return;
        }
        let mut sizes = vec![0usize; n];
        for &l in label.iter().filter(|&&l| l != usize::MAX) {
            sizes[l] += 1;
        }
        let best = (0..n).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        for (b, &l) in self.bits.iter_mut().zip(&label) {
            *b = *b && l == best;
        }
    }

    /// Fills background regions that do not touch the image border.
    pub fn fill_holes(&mut self) {
        let (label, n) = self.components(false);
        let (w, h) = (self.width, self.height);
        let mut touches = vec![false; n];
        for j in 0..h {
            for i in 0..w {
                if i == 0 || j == 0 || i + 1 == w || j + 1 == h {
                    let l = label[j * w + i];
                    if l != usize::MAX {
                        touches[l] = true;
                    }
                }
            }
        }
        for (b, &l) in self.bits.iter_mut().zip(&label) {
            if l != usize::MAX && !touches[l] {
                *b = true;
            }
        }
    }

    fn block_full(&self, i: isize, j: isize) -> bool {
        self.get_signed(i, j) && self.get_signed(i + 1, j) && self.get_signed(i, j + 1) && self.get_signed(i + 1, j + 1)
    }

    /// Whether a foreground pixel belongs to at least one fully occupied 2x2 block.
    pub fn in_full_block(&self, i: usize, j: usize) -> bool {
        let (i, j) = (i as isize, j as isize);
        self.block_full(i - 1, j - 1) || self.block_full(i, j - 1) || self.block_full(i - 1, j) || self.block_full(i, j)
    }

    /// Segmentation cleanup producing a mask whose pixel triangulation is a
    /// single disk: largest 4-connected component, holes filled, pixels outside
    /// every full 2x2 block removed, and corner-only block contacts closed.
    pub fn cleanup(&mut self) {
        for _ in 0..64 {
            let before = self.bits.clone();
            self.keep_largest_component();
            self.fill_holes();
            self.close_pinches();
            self.fill_block_holes();
            self.keep_largest_block_component();
            if self.bits == before {
                break;
            }
        }
    }

    /// Keeps only pixels covered by the largest edge-connected set of fully
    /// occupied 2x2 blocks.
    fn keep_largest_block_component(&mut self) {
        let (w, h) = (self.width, self.height);
        if w < 2 || h < 2 {
            self.bits.iter_mut().for_each(|b| *b = false);
            return;
        }
        let (bw, bh) = (w - 1, h - 1);
        let full: Vec<bool> = (0..bw * bh).map(|b| self.block_full((b % bw) as isize, (b / bw) as isize)).collect();
        let mut label = vec![usize::MAX; bw * bh];
        let mut sizes = Vec::new();
        for start in 0..bw * bh {
            if !full[start] || label[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            label[start] = id;
            while let Some(b) = queue.pop_front() {
                size += 1;
                let (i, j) = (b % bw, b / bw);
                let mut nbrs = Vec::with_capacity(4);
                if i > 0 {
                    nbrs.push(b - 1);
                }
                if i + 1 < bw {
                    nbrs.push(b + 1);
                }
                if j > 0 {
                    nbrs.push(b - bw);
                }
                if j + 1 < bh {
                    nbrs.push(b + bw);
                }
                for q in nbrs {
                    if full[q] && label[q] == usize::MAX {
                        label[q] = id;
                        queue.push_back(q);
                    }
                }
            }
            sizes.push(size);
        }
        let keep = (0..sizes.len()).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)));
        let mut bits = vec![false; w * h];
        if let Some(keep) = keep {
            for b in 0..bw * bh {
                if label[b] == keep {
                    let (i, j) = (b % bw, b / bw);
                    for (x, y) in [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                        bits[y * w + x] = true;
                    }
                }
            }
        }
        self.bits = bits;
    }

    /// Fills the 3x3 neighbourhood of pixels where two full blocks meet only at
    /// that pixel.
    fn close_pinches(&mut self) {
        let (w, h) = (self.width, self.height);
        let mut fill = Vec::new();
        for j in 0..h {
            for i in 0..w {
                if !self.bits[j * w + i] {
                    continue;
                }
                let (a, b) = (i as isize, j as isize);
                let ll = self.block_full(a - 1, b - 1);
                let lr = self.block_full(a, b - 1);
                let ul = self.block_full(a - 1, b);
                let ur = self.block_full(a, b);
                if (ll && ur && !lr && !ul) || (lr && ul && !ll && !ur) {
                    fill.push((i, j));
                }
            }
        }
        for (i, j) in fill {
            for dj in -1isize..=1 {
                for di in -1isize..=1 {
                    let (x, y) = (i as isize + di, j as isize + dj);
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        self.bits[y as usize * w + x as usize] = true;
                    }
                }
            }
        }
    }

    /// Fills regions of partially occupied 2x2 blocks that are enclosed by full
    /// blocks, which would otherwise leave holes in the pixel triangulation.
    fn fill_block_holes(&mut self) {
        // Block grid padded by one empty ring; block (bi, bj) covers pixels
        // (bi - 1 ..= bi, bj - 1 ..= bj).
        let (bw, bh) = (self.width + 1, self.height + 1);
        let full: Vec<bool> =
            (0..bw * bh).map(|b| self.block_full((b % bw) as isize - 1, (b / bw) as isize - 1)).collect();
        let mut outside = vec![false; bw * bh];
        let mut queue = VecDeque::from([0usize]);
        outside[0] = true;
        while let Some(b) = queue.pop_front() {
            let (i, j) = (b % bw, b / bw);
            let mut nbrs = Vec::with_capacity(4);
            if i > 0 {
                nbrs.push(b - 1);
            }
            if i + 1 < bw {
                nbrs.push(b + 1);
            }
            if j > 0 {
                nbrs.push(b - bw);
            }
            if j + 1 < bh {
                nbrs.push(b + bw);
            }
            for q in nbrs {
                if !full[q] && !outside[q] {
                    outside[q] = true;
                    queue.push_back(q);
                }
            }
        }
        for b in 0..bw * bh {
            if full[b] || outside[b] {
                continue;
            }
            let (bi, bj) = ((b % bw) as isize - 1, (b / bw) as isize - 1);
            for (x, y) in [(bi, bj), (bi + 1, bj), (bi, bj + 1), (bi + 1, bj + 1)] {
                if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
                    self.set(x as usize, y as usize, true);
                }
            }
        }
    }

    /// Foreground bounding box as `(imin, jmin, imax, jmax)` inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for j in 0..self.height {
            for i in 0..self.width {
                if self.get(i, j) {
                    bb = Some(match bb {
                        None => (i, j, i, j),
                        Some((a, b, c, d)) => (a.min(i), b.min(j), c.max(i), d.max(j)),
                    });
                }
            }
        }
        bb
    }

    /// Resamples the mask into a `res x res` unit-square mask with the foreground
    /// bounding box centered and isotropically scaled to `extent` of the square.
    pub fn normalized(&self, res: usize, extent: f64) -> Result<Mask2D> {
        ensure!(res > 0, Validation, "mask resolution must be positive");
        let (i0, j0, i1, j1) =
            self.bounding_box().ok_or_else(|| crate::Error::Degenerate("mask has no foreground pixels".into()))?;
        let bw = (i1 - i0 + 1) as f64;
        let bh = (j1 - j0 + 1) as f64;
        let scale = bw.max(bh) / extent; // source pixels per UV unit
        let cx = (i0 + i1 + 1) as f64 / 2.0;
        let cy = (j0 + j1 + 1) as f64 / 2.0;
        Mask2D::from_fn(res, |u, v| {
            let x = cx + (u - 0.5) * scale;
            let y = cy + (v - 0.5) * scale;
            self.get_signed(x.floor() as isize, y.floor() as isize)
        })
    }

    pub fn iou(&self, other: &Mask2D) -> Result<f64> {
        ensure!(
            self.width == other.width && self.height == other.height,
            Dimension,
            "masks differ in size: {}x{} vs {}x{}",
            self.width,
            self.height,
            other.width,
            other.height
        );
        let inter = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count();
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}
