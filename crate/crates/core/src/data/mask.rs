use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Binary per-pixel mask, row-major, one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `(row, col)` of every set pixel in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    /// Inclusive bounding box `(row_min, col_min, row_max, col_max)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let px = self.pixels();
        if px.is_empty() {
            return None;
        }
        let rmin = px.iter().map(|p| p.0).min().unwrap();
        let rmax = px.iter().map(|p| p.0).max().unwrap();
        let cmin = px.iter().map(|p| p.1).min().unwrap();
        let cmax = px.iter().map(|p| p.1).max().unwrap();
        Some((rmin, cmin, rmax, cmax))
    }

    pub fn is_superset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| *b == 0 || *a != 0)
    }

    /// One step of 8-neighborhood dilation.
    fn dilate_once(&self) -> Mask {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    continue;
                }
                let hit = neighbors8(r, c, self.height, self.width).any(|(rr, cc)| self.get(rr, cc));
                if hit {
                    out.set(r, c, true);
                }
            }
        }
        out
    }

    /// Unset pixels 4-adjacent to a set pixel.
    pub fn border_background(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    continue;
                }
                let near = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    rr >= 0
                        && cc >= 0
                        && (rr as usize) < self.height
                        && (cc as usize) < self.width
                        && self.get(rr as usize, cc as usize)
                });
                if near {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

fn neighbors8(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1isize..=1)
        .flat_map(move |dr| (-1isize..=1).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| dr != 0 || dc != 0)
        .filter_map(move |(dr, dc)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w).then_some((rr as usize, cc as usize))
        })
}

/// Simulates an imperfect segmentation: dilates by `dilation_px` (8-connected)
/// and then switches on `round(leak_fraction · B)` of the `B` background
/// pixels bordering the dilated mask, chosen uniformly with `seed`.
pub fn corrupt_mask(mask: &Mask, dilation_px: usize, leak_fraction: f64, seed: u64) -> Mask {
    let mut out = mask.clone();
    for _ in 0..dilation_px {
        out = out.dilate_once();
    }
    let leak = leak_fraction.clamp(0.0, 1.0);
    if leak > 0.0 {
        let border = out.border_background();
        let k = (leak * border.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in rand::seq::index::sample(&mut rng, border.len(), k.min(border.len())) {
            let (r, c) = border[i];
            out.set(r, c, true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: usize, h: usize, r0: usize, c0: usize, size: usize) -> Mask {
        let mut m = Mask::empty(w, h);
        for r in r0..r0 + size {
            for c in c0..c0 + size {
                m.set(r, c, true);
            }
        }
        m
    }

    #[test]
    fn identity_when_no_corruption() {
        let m = square(20, 15, 4, 5, 6);
        assert_eq!(corrupt_mask(&m, 0, 0.0, 1), m);
    }

    #[test]
    fn dilation_is_superset() {
        let m = square(20, 15, 4, 5, 6);
        let d = corrupt_mask(&m, 2, 0.0, 1);
        assert!(d.is_superset_of(&m));
        assert_eq!(d.count(), 10 * 10);
    }

    #[test]
    fn leak_count_matches_expectation() {
        let m = square(40, 40, 10, 10, 12);
        let border = m.border_background().len();
        assert_eq!(border, 48);
        let out = corrupt_mask(&m, 0, 0.3, 7);
        let flipped = out.count() - m.count();
        let expected = 0.3 * border as f64;
        assert!((flipped as f64 - expected).abs() <= 0.05 * expected, "{flipped} vs {expected}");
        assert!(out.is_superset_of(&m));
        assert_eq!(out, corrupt_mask(&m, 0, 0.3, 7));
    }

    #[test]
    fn bbox_and_pixels() {
        let m = square(10, 10, 2, 3, 2);
        assert_eq!(m.bbox(), Some((2, 3, 3, 4)));
        assert_eq!(m.pixels(), vec![(2, 3), (2, 4), (3, 3), (3, 4)]);
        assert_eq!(Mask::empty(3, 3).bbox(), None);
    }
}
