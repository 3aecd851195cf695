//! Sinusoidal 3D positional encoding of pooled world coordinates.
//!
//! The output splits into three blocks of `D/3` (x, then y, then z). Each
//! block holds `D/6` interleaved `(sin, cos)` pairs; pair `j` uses frequency
//! `base^(−6j/D)` applied to `scale · coord`.

use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosEncConfig {
    pub dim: usize,
    pub base: f64,
    pub scale: f64,
}

impl PosEncConfig {
    pub fn new(dim: usize) -> Result<Self> {
        let cfg = Self {
            dim,
            base: 10_000.0,
            scale: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(6) {
            return Err(Error::invalid(format!(
                "encoding dim must be a positive multiple of 6, got {}",
                self.dim
            )));
        }
        if !(self.base > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid("encoding base must be positive and scale finite"));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let pairs = self.dim / 6;
        (0..pairs)
            .map(|j| self.base.powf(-((6 * j) as f64) / self.dim as f64))
            .collect()
    }
}

/// Encodes `T × N × 3` coordinates into `T × N × D`.
pub fn sinusoidal_3d(coords: ArrayView3<f64>, cfg: &PosEncConfig) -> Result<Array3<f64>> {
    cfg.validate()?;
    let (t, n, c) = coords.dim();
    if c != 3 {
        return Err(Error::dim(format!("coordinates need 3 components, got {c}")));
    }
    let freqs = cfg.frequencies();
    let block = cfg.dim / 3;
    let mut out = Array3::zeros((t, n, cfg.dim));
    for ti in 0..t {
        for ni in 0..n {
            let mut row = out.slice_mut(s![ti, ni, ..]);
            for axis in 0..3 {
                let x = cfg.scale * coords[[ti, ni, axis]];
                for (j, f) in freqs.iter().enumerate() {
                    let (sin, cos) = (x * f).sin_cos();
                    row[axis * block + 2 * j] = sin;
                    row[axis * block + 2 * j + 1] = cos;
                }
            }
        }
    }
    Ok(out)
}
