//! Dense row-major 2-D grids and the coordinate types shared by every stage.
//!
//! Coordinates are `(x = column, y = row)` with the origin at the top-left
//! pixel center. Sub-pixel values are allowed everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sub-pixel image location.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Image extent in pixels, height first to match the usual `H×W` notation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl Size {
    pub const fn hw(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn area(self) -> usize {
        self.height * self.width
    }

    /// Size after `levels` ceil-halvings.
    pub fn halved(self, levels: usize) -> Self {
        let div = 1usize << levels;
        Self {
            height: self.height.div_ceil(div),
            width: self.width.div_ceil(div),
        }
    }

    pub fn contains(self, p: Point) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

impl std::fmt::Display for Size {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(size: Size, value: T) -> Self {
        Self {
            width: size.width,
            height: size.height,
            data: vec![value; size.area()],
        }
    }

    pub fn from_vec(size: Size, data: Vec<T>) -> Result<Self> {
        if data.len() != size.area() {
            return Err(Error::Shape(format!(
                "grid {size} needs {} values, got {}",
                size.area(),
                data.len()
            )));
        }
        Ok(Self {
            width: size.width,
            height: size.height,
            data,
        })
    }

    pub fn from_fn(size: Size, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(size.area());
        for y in 0..size.height {
            for x in 0..size.width {
                data.push(f(x, y));
            }
        }
        Self {
            width: size.width,
            height: size.height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> Size {
        Size::hw(self.height, self.width)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Copy of the `size` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, size: Size) -> Result<Self> {
        if x0 + size.width > self.width || y0 + size.height > self.height {
            return Err(Error::OutOfBounds(format!(
                "crop {size} at ({x0}, {y0}) exceeds grid {}",
                self.size()
            )));
        }
        let mut data = Vec::with_capacity(size.area());
        for y in y0..y0 + size.height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + size.width]);
        }
        Ok(Self {
            width: size.width,
            height: size.height,
            data,
        })
    }
}

impl<T: Copy + PartialOrd> Grid<T> {
    /// Location of the maximum; ties resolve to the smallest row-major index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate().skip(1) {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

/// Samples a grid at a sub-pixel location with bilinear weights. Coordinates
/// are clamped to the grid, which replicates the border.
pub fn bilinear_clamped<T>(grid: &Grid<T>, x: f64, y: f64) -> f64
where
    T: Copy + Into<f64>,
{
    let max_x = (grid.width - 1) as f64;
    let max_y = (grid.height - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(grid.width - 1);
    let y1 = (y0 + 1).min(grid.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = grid.get(x0, y0).into() * (1.0 - fx) + grid.get(x1, y0).into() * fx;
    let bottom = grid.get(x0, y1).into() * (1.0 - fx) + grid.get(x1, y1).into() * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Reflects a coordinate into `[0, len - 1]` (mirror about the border pixel
/// centers, no edge duplication).
pub fn reflect(coord: f64, len: usize) -> f64 {
    if len <= 1 {
        return 0.0;
    }
    let max = (len - 1) as f64;
    let period = 2.0 * max;
    let mut c = coord.rem_euclid(period);
    if c > max {
        c = period - c;
    }
    c
}

/// Bilinear sample with reflected borders.
pub fn bilinear_reflect(grid: &Grid<f32>, x: f64, y: f64) -> f32 {
    let x = reflect(x, grid.width);
    let y = reflect(y, grid.height);
    bilinear_clamped(grid, x, y) as f32
}

/// Bilinear resize using pixel-center alignment.
pub fn resize_bilinear(grid: &Grid<f32>, size: Size) -> Grid<f32> {
    let sx = grid.width as f64 / size.width as f64;
    let sy = grid.height as f64 / size.height as f64;
    Grid::from_fn(size, |x, y| {
        let src_x = (x as f64 + 0.5) * sx - 0.5;
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        bilinear_clamped(grid, src_x, src_y) as f32
    })
}

/// Min-max normalization to `[0, 1]`; constant images map to zero.
pub fn normalize_min_max(grid: &mut Grid<f32>) {
    let (lo, hi) = grid
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    for v in grid.as_mut_slice() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_uses_ceil() {
        let s = Size::hw(192, 191);
        assert_eq!(s.halved(1), Size::hw(96, 96));
        assert_eq!(s.halved(3), Size::hw(24, 24));
        assert_eq!(Size::hw(5, 5).halved(2), Size::hw(2, 2));
    }

    #[test]
    fn argmax_breaks_ties_row_major() {
        let g = Grid::from_vec(Size::hw(2, 3), vec![0.0, 1.0, 1.0, 1.0, 0.5, 0.0]).unwrap();
        assert_eq!(g.argmax(), (1, 0));
    }

    #[test]
    fn reflect_mirrors_about_border_centers() {
        assert_eq!(reflect(-1.0, 5), 1.0);
        assert_eq!(reflect(5.0, 5), 3.0);
        assert_eq!(reflect(2.5, 5), 2.5);
        assert_eq!(reflect(-9.0, 5), 1.0);
    }

    #[test]
    fn resize_identity_keeps_pixels() {
        let g = Grid::from_fn(Size::hw(4, 6), |x, y| (x * 10 + y) as f32);
        assert_eq!(resize_bilinear(&g, g.size()), g);
    }

    #[test]
    fn crop_rejects_overflow() {
        let g = Grid::filled(Size::hw(4, 4), 0.0f32);
        assert!(g.crop(2, 2, Size::hw(3, 2)).is_err());
        assert_eq!(g.crop(2, 1, Size::hw(3, 2)).unwrap().size(), Size::hw(3, 2));
    }
}
