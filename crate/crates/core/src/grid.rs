use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular grid with `nx * ny` nodes placed at cell centres.
///
/// Node `k` sits at column `k % nx`, row `k / nx`. One-dimensional domains use
/// `ny = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Self> {
        let grid = GridSpec { lx, ly, nx, ny };
        grid.validate()?;
        Ok(grid)
    }

    pub fn line(length: f64, nx: usize) -> Result<Self> {
        // Unit width keeps the decorrelation formula well defined for 1D domains.
        Self::new(length, 1.0, nx, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lx.is_finite() && self.lx > 0.0 && self.ly.is_finite() && self.ly > 0.0) {
            return Err(Error::invalid("grid", "extents must be finite and positive"));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::invalid("grid", "cell counts must be at least 1"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    /// Smallest cell spacing along an axis that actually has more than one node.
    pub fn cell_size(&self) -> f64 {
        match (self.nx > 1, self.ny > 1) {
            (true, true) => self.dx().min(self.dy()),
            (false, true) => self.dy(),
            _ => self.dx(),
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.lx.hypot(self.ly)
    }

    pub fn x_coords(&self) -> Vec<f64> {
        (0..self.nx).map(|i| (i as f64 + 0.5) * self.dx()).collect()
    }

    pub fn y_coords(&self) -> Vec<f64> {
        (0..self.ny).map(|j| (j as f64 + 0.5) * self.dy()).collect()
    }

    pub fn node(&self, k: usize) -> (f64, f64) {
        let (i, j) = (k % self.nx, k / self.nx);
        ((i as f64 + 0.5) * self.dx(), (j as f64 + 0.5) * self.dy())
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (xa, ya) = self.node(a);
        let (xb, yb) = self.node(b);
        (xa - xb).hypot(ya - yb)
    }
}

/// Spatial decorrelation scale `sqrt(Lx * Ly) / (nx * ny + 1)`.
pub fn decorrelation_length(grid: &GridSpec) -> f64 {
    (grid.lx * grid.ly).sqrt() / ((grid.nx * grid.ny) as f64 + 1.0)
}
