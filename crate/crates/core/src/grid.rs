//! Single-channel raster types shared by the image pipeline.

use crate::{Error, Result};

/// Row-major grayscale image of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "grid {height}x{width} needs {} samples, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn crop(&self, rect: Rect) -> Grid {
        let mut data = Vec::with_capacity(rect.height() * rect.width());
        for y in rect.y0..=rect.y1 {
            data.extend_from_slice(&self.data[y * self.width + rect.x0..=y * self.width + rect.x1]);
        }
        Grid {
            height: rect.height(),
            width: rect.width(),
            data,
        }
    }

    /// Bilinear resampling with corner-aligned sample positions, so that a
    /// same-size resize is the identity.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        let mut data = Vec::with_capacity(height * width);
        let ys = sample_positions(self.height, height);
        let xs = sample_positions(self.width, width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst > 1 {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn bounding_box(&self) -> Option<Rect> {
        let mut rect: Option<Rect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let r = rect.get_or_insert(Rect { y0: y, x0: x, y1: y, x1: x });
                    r.y0 = r.y0.min(y);
                    r.x0 = r.x0.min(x);
                    r.y1 = r.y1.max(y);
                    r.x1 = r.x1.max(x);
                }
            }
        }
        rect
    }

    pub fn crop(&self, rect: Rect) -> Mask {
        Mask::from_fn(rect.height(), rect.width(), |y, x| self.get(y + rect.y0, x + rect.x0))
    }

    /// Nearest-neighbour resampling on the same corner-aligned lattice as
    /// [`Grid::resize_bilinear`].
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let map = |i: usize, src: usize, dst: usize| {
            if dst > 1 {
                ((i * (src - 1)) as f64 / (dst - 1) as f64).round() as usize
            } else {
                0
            }
        };
        Mask::from_fn(height, width, |y, x| {
            self.get(map(y, self.height, height), map(x, self.width, width))
        })
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && !*b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }
}

/// 8-connected components of `mask`, each as a list of flat indices, in
/// raster order of their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(idx) = stack.pop() {
            members.push(idx);
            let (y, x) = (idx / w, idx % w);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask.data[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        components.push(members);
    }
    components
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let g = Grid::new(3, 4, (0..12).map(|v| v as f64 * 0.37).collect()).unwrap();
        assert_eq!(g.resize_bilinear(3, 4), g);
    }

    #[test]
    fn resize_preserves_corners() {
        let g = Grid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = g.resize_bilinear(5, 7);
        assert_eq!(r.get(0, 0), 0.0);
        assert_eq!(r.get(0, 6), 1.0);
        assert_eq!(r.get(4, 0), 2.0);
        assert_eq!(r.get(4, 6), 3.0);
        assert!((r.get(2, 3) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn components_use_eight_connectivity() {
        let m = Mask::from_fn(4, 4, |y, x| (y == x) || (y == 0 && x == 3));
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 4);
    }
}
