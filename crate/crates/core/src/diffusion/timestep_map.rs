//! Per-patch predicted time-steps over a tiling grid, exportable as CSV and
//! as a grayscale heat-map image.

use std::path::Path;

use crate::err::{Error, Result};
use crate::image::{save_png_rgb8, Image, ValueRange};
use crate::tile::PatchGrid;

/// One predicted time-step per grid patch, row-major.
#[derive(Debug, Clone)]
pub struct TimeStepMap {
    grid: PatchGrid,
    t_values: Vec<f64>,
    t_max: usize,
}

impl TimeStepMap {
    pub fn new(grid: PatchGrid, t_values: Vec<f64>, t_max: usize) -> Result<Self> {
        let want = grid.rows.len() * grid.cols.len();
        if t_values.len() != want {
            return Err(Error::invalid(format!(
                "expected {want} patch values for a {}x{} grid, got {}",
                grid.rows.len(),
                grid.cols.len(),
                t_values.len()
            )));
        }
        let hi = (t_max - 1) as f64;
        for &t in &t_values {
            if !t.is_finite() || !(0.0..=hi).contains(&t) {
                return Err(Error::invalid(format!("time-step {t} outside [0, {hi}]")));
            }
        }
        Ok(TimeStepMap { grid, t_values, t_max })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.t_values[row * self.grid.cols.len() + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.t_values
    }

    pub fn mean(&self) -> f64 {
        self.t_values.iter().sum::<f64>() / self.t_values.len() as f64
    }

    /// `row,col,t` lines with a header.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("row,col,t\n");
        for r in 0..self.grid.rows.len() {
            for c in 0..self.grid.cols.len() {
                out.push_str(&format!("{r},{c},{:.6}\n", self.value(r, c)));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// Grayscale rendering with one `cell`-sized square per patch; black is
    /// step 0, white is the last step.
    pub fn to_heatmap(&self, cell: usize) -> Result<Image<f64>> {
        if cell == 0 {
            return Err(Error::invalid("cell size must be positive"));
        }
        let denom = ((self.t_max - 1) as f64).max(1.0);
        Image::from_fn(
            3,
            self.grid.rows.len() * cell,
            self.grid.cols.len() * cell,
            ValueRange::EightBit,
            |_, y, x| (255.0 * self.value(y / cell, x / cell) / denom).round(),
        )
    }

    pub fn write_heatmap_png(&self, path: &Path, cell: usize) -> Result<()> {
        save_png_rgb8(path, &self.to_heatmap(cell)?)
    }
}
