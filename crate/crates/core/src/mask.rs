//! Binary raster masks and the small morphology the metrics and prompt
//! generators need.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "mask dimensions must be >= 1");
        BinaryMask { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        BinaryMask { width, height, bits }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if !self.same_dims(other) {
            return Err(Error::Shape {
                op,
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert!(self.same_dims(other));
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn intersect(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert!(self.same_dims(other));
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert!(self.same_dims(other));
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect(),
        }
    }

    /// Contour pixels: foreground with a 4-neighbor that is background or
    /// off-image.
    pub fn contour(&self) -> BinaryMask {
        let mut out = BinaryMask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x == self.width - 1
                    || y == self.height - 1
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                if edge {
                    out.set(x, y, true);
                }
            }
        }
        out
    }

    /// Chebyshev dilation by `r` (8-neighborhood applied r times).
    pub fn dilate_chebyshev(&self, r: usize) -> BinaryMask {
        let mut cur = self.clone();
        for _ in 0..r {
            let mut next = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if cur.get(x, y) {
                        continue;
                    }
                    'scan: for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx >= 0
                                && ny >= 0
                                && (nx as usize) < self.width
                                && (ny as usize) < self.height
                                && cur.get(nx as usize, ny as usize)
                            {
                                next.set(x, y, true);
                                break 'scan;
                            }
                        }
                    }
                }
            }
            cur = next;
        }
        cur
    }

    /// Pixels within Chebyshev distance `r` of the boundary between
    /// foreground and background (both sides of the edge included).
    pub fn boundary_band(&self, r: usize) -> BinaryMask {
        let mut seed = self.contour();
        // background pixels adjacent to foreground are part of the boundary
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    continue;
                }
                let near_fg = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx >= 0
                        && ny >= 0
                        && (nx as usize) < self.width
                        && (ny as usize) < self.height
                        && self.get(nx as usize, ny as usize)
                });
                if near_fg {
                    seed.set(x, y, true);
                }
            }
        }
        seed.dilate_chebyshev(r.saturating_sub(1))
    }

    /// Indices of foreground pixels, row-major.
    pub fn foreground_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| if *b { Some(i) } else { None })
            .collect()
    }
}
