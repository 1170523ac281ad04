//! Convolution footprints: rectangular or ellipsoidal sets of integer offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer shift `(p, q)` along `(k1, k2)`.
pub type Offset = (isize, isize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportShape {
    Rectangular,
    Ellipsoidal,
}

/// Centered kernel footprint of nominal size `r1 x r2` (both odd).
///
/// The ellipsoidal variant keeps only offsets inside the ellipse inscribed
/// in the rectangle: `(p/a)^2 + (q/b)^2 <= 1` with `a = (r1-1)/2`,
/// `b = (r2-1)/2`; a zero semi-axis pins that coordinate to 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KernelSupport {
    r1: usize,
    r2: usize,
    shape: SupportShape,
    offsets: Vec<Offset>,
}

impl KernelSupport {
    pub fn new(r1: usize, r2: usize, shape: SupportShape) -> Result<Self> {
        if r1 % 2 == 0 || r2 % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel sizes must be odd, got {r1}x{r2}"
            )));
        }
        let a = (r1 / 2) as isize;
        let b = (r2 / 2) as isize;
        let mut offsets = Vec::new();
        for p in -a..=a {
            for q in -b..=b {
                let inside = match shape {
                    SupportShape::Rectangular => true,
                    SupportShape::Ellipsoidal => match (a, b) {
                        (0, _) | (_, 0) => true,
                        _ => p * p * b * b + q * q * a * a <= a * a * b * b,
                    },
                };
                if inside {
                    offsets.push((p, q));
                }
            }
        }
        Ok(Self {
            r1,
            r2,
            shape,
            offsets,
        })
    }

    pub fn rectangular(r1: usize, r2: usize) -> Result<Self> {
        Self::new(r1, r2, SupportShape::Rectangular)
    }

    pub fn ellipsoidal(r1: usize, r2: usize) -> Result<Self> {
        Self::new(r1, r2, SupportShape::Ellipsoidal)
    }

    #[inline]
    pub fn r1(&self) -> usize {
        self.r1
    }

    #[inline]
    pub fn r2(&self) -> usize {
        self.r2
    }

    /// Half-widths `(a, b)`.
    #[inline]
    pub fn radii(&self) -> (usize, usize) {
        (self.r1 / 2, self.r2 / 2)
    }

    #[inline]
    pub fn shape(&self) -> SupportShape {
        self.shape
    }

    /// Offsets in row-major order.
    #[inline]
    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn contains(&self, offset: Offset) -> bool {
        self.offsets.contains(&offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_count(r: usize) -> usize {
        let a = (r / 2) as i64;
        let mut n = 0;
        for x in -a..=a {
            for y in -a..=a {
                if x * x + y * y <= a * a {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn ellipse_counts_match_enumeration() {
        let s3 = KernelSupport::ellipsoidal(3, 3).unwrap();
        assert_eq!(s3.len(), 5);
        assert!(!s3.contains((1, 1)));
        assert_eq!(KernelSupport::rectangular(3, 3).unwrap().len(), 9);
        for r in [3, 5, 7, 9] {
            assert_eq!(KernelSupport::ellipsoidal(r, r).unwrap().len(), brute_force_count(r));
        }
        assert_eq!(KernelSupport::ellipsoidal(7, 7).unwrap().len(), 29);
    }

    #[test]
    fn ellipse_is_subset_of_rectangle() {
        for (r1, r2) in [(3, 5), (7, 7), (1, 5), (9, 3)] {
            let e = KernelSupport::ellipsoidal(r1, r2).unwrap();
            let r = KernelSupport::rectangular(r1, r2).unwrap();
            assert!(e.offsets().iter().all(|&o| r.contains(o)));
            let (a, b) = e.radii();
            assert!(e
                .offsets()
                .iter()
                .all(|&(p, q)| p.unsigned_abs() <= a && q.unsigned_abs() <= b));
        }
    }

    #[test]
    fn degenerate_axis_keeps_full_line() {
        let s = KernelSupport::ellipsoidal(1, 5).unwrap();
        assert_eq!(s.offsets(), &[(0, -2), (0, -1), (0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn even_sizes_are_rejected() {
        assert!(KernelSupport::ellipsoidal(4, 3).is_err());
        assert!(KernelSupport::rectangular(3, 2).is_err());
    }
}
