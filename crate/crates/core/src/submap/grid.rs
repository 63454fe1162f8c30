use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;

/// Default relative tolerance on second differences of inverse depth.
pub const PLANARITY_TOLERANCE: f64 = 1e-3;

/// Dense depth and confidence sampled on a regular lattice of pixel centers.
///
/// Sample `(row, col)` sits at pixel `((col + 0.5) W / cols, (row + 0.5) H / rows)`
/// of a `W × H` image. Depth is the camera z-coordinate; a sample with zero
/// confidence carries no geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthGrid {
    pub cols: usize,
    pub rows: usize,
    pub width: f64,
    pub height: f64,
    pub depth: Vec<f64>,
    pub confidence: Vec<f64>,
}

/// Interpolated depth at a continuous pixel position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthSample {
    pub depth: f64,
    pub confidence: f64,
}

impl DepthGrid {
    pub fn new(cols: usize, rows: usize, width: f64, height: f64) -> Self {
        DepthGrid {
            cols,
            rows,
            width,
            height,
            depth: vec![0.0; cols * rows],
            confidence: vec![0.0; cols * rows],
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Pixel coordinates of lattice sample `(row, col)`.
    pub fn sample_pixel(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            (col as f64 + 0.5) * self.width / self.cols as f64,
            (row as f64 + 0.5) * self.height / self.rows as f64,
        )
    }

    pub fn set(&mut self, row: usize, col: usize, depth: f64, confidence: f64) {
        let i = self.index(row, col);
        self.depth[i] = depth;
        self.confidence[i] = confidence;
    }

    pub fn in_image(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width && pixel.y < self.height
    }

    /// Multiplies every depth by `s`.
    pub fn scale_depth(&mut self, s: f64) {
        for d in &mut self.depth {
            *d *= s;
        }
    }

    /// Bilinear interpolation of inverse depth, gated on local planarity.
    ///
    /// Inverse depth is affine in pixel coordinates on any plane, so the
    /// interpolation is exact wherever the surrounding 4×4 block of samples
    /// sees a single plane. Blocks whose second differences exceed
    /// `tolerance` times the largest inverse depth (creases, occlusion
    /// edges, sky) return `None`, as do positions outside the sample hull.
    pub fn interpolate(&self, pixel: &Vec2, tolerance: f64) -> Option<DepthSample> {
        if self.cols < 2 || self.rows < 2 {
            return None;
        }
        let gx = pixel.x * self.cols as f64 / self.width - 0.5;
        let gy = pixel.y * self.rows as f64 / self.height - 0.5;
        if !(gx >= 0.0 && gy >= 0.0 && gx <= (self.cols - 1) as f64 && gy <= (self.rows - 1) as f64)
        {
            return None;
        }
        let c0 = (gx.floor() as usize).min(self.cols - 2);
        let r0 = (gy.floor() as usize).min(self.rows - 2);
        let cs = stencil_start(c0, self.cols);
        let rs = stencil_start(r0, self.rows);
        let nc = self.cols.min(4);
        let nr = self.rows.min(4);

        let mut q = [[0.0f64; 4]; 4];
        let mut q_max = 0.0f64;
        for (a, row) in q.iter_mut().enumerate().take(nr) {
            for (b, cell) in row.iter_mut().enumerate().take(nc) {
                let i = self.index(rs + a, cs + b);
                if !(self.confidence[i] > 0.0 && self.depth[i] > 0.0) {
                    return None;
                }
                *cell = 1.0 / self.depth[i];
                q_max = q_max.max(*cell);
            }
        }
        let tol = tolerance * q_max;
        for row in q.iter().take(nr) {
            for b in 1..nc.saturating_sub(1) {
                if (row[b - 1] - 2.0 * row[b] + row[b + 1]).abs() > tol {
                    return None;
                }
            }
        }
        for b in 0..nc {
            for a in 1..nr.saturating_sub(1) {
                if (q[a - 1][b] - 2.0 * q[a][b] + q[a + 1][b]).abs() > tol {
                    return None;
                }
            }
        }
        for a in 0..nr - 1 {
            for b in 0..nc - 1 {
                if (q[a][b] - q[a][b + 1] - q[a + 1][b] + q[a + 1][b + 1]).abs() > tol {
                    return None;
                }
            }
        }

        let fx = gx - c0 as f64;
        let fy = gy - r0 as f64;
        let (a0, b0) = (r0 - rs, c0 - cs);
        let bilerp = |v00: f64, v01: f64, v10: f64, v11: f64| {
            (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
        };
        let inv = bilerp(q[a0][b0], q[a0][b0 + 1], q[a0 + 1][b0], q[a0 + 1][b0 + 1]);
        let conf = |r: usize, c: usize| self.confidence[self.index(r, c)];
        let confidence = bilerp(conf(r0, c0), conf(r0, c0 + 1), conf(r0 + 1, c0), conf(r0 + 1, c0 + 1));
        Some(DepthSample {
            depth: 1.0 / inv,
            confidence,
        })
    }
}

/// First index of a 4-wide window containing `[c, c + 1]`, clamped to the grid.
fn stencil_start(c: usize, n: usize) -> usize {
    if n <= 4 {
        return 0;
    }
    c.saturating_sub(1).min(n - 4)
}
