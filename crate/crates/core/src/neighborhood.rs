use crate::error::{Error, Result};

/// Odd square kernel size `k >= 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelSize(usize);

impl KernelSize {
    pub const THREE: KernelSize = KernelSize(3);

    pub fn new(k: usize) -> Result<Self> {
        if k >= 3 && k % 2 == 1 {
            Ok(Self(k))
        } else {
            Err(Error::InvalidConfig(format!(
                "kernel size must be odd and >= 3, got {k}"
            )))
        }
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0
    }

    #[inline]
    pub fn radius(self) -> isize {
        (self.0 / 2) as isize
    }

    /// Number of neighbours, `k*k - 1`.
    #[inline]
    pub fn neighbors(self) -> usize {
        self.0 * self.0 - 1
    }

    /// Integer displacements `(dx, dy)` of the k x k window minus its centre,
    /// in raster order (row by row, left to right).
    pub fn ring(self) -> Vec<(isize, isize)> {
        let r = self.radius();
        let mut out = Vec::with_capacity(self.neighbors());
        for dy in -r..=r {
            for dx in -r..=r {
                if dx != 0 || dy != 0 {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

impl Default for KernelSize {
    fn default() -> Self {
        Self::THREE
    }
}
