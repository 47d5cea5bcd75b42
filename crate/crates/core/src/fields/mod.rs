//! Dense 2-D fields, binary masks, and their Z-ordered stacks.
//!
//! Every surface the pipeline touches (images, logits, probabilities,
//! attribution maps, ground-truth masks) is one of these types. Storage is
//! row-major; `(row, col)` indexing throughout.

mod format;
mod morphology;

pub use format::{
    read_field, read_mask, read_mask_stack, read_pgm, read_pgm_mask, read_stack, write_field,
    write_mask, write_mask_stack, write_pgm, write_pgm_normalized, write_ppm_heat_overlay,
    write_stack, FIELD_MAGIC, STACK_MAGIC,
};
pub use morphology::{
    boundary, dilate, distance_transform, squared_distance_transform, DistanceMap,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Field2D {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape((height, width), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field element {i}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Self::new(height, width, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| self.get(c, r))
    }
}

/// Binary mask with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask2D {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask2D {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape((height, width), data.len()));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Invalid(format!("mask element {i} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Self::new(height, width, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    /// Mask from pixel coordinates `(row, col)`.
    pub fn from_points(height: usize, width: usize, points: &[(usize, usize)]) -> Self {
        let mut m = Self::zeros(height, width);
        for &(r, c) in points {
            m.set(r, c, true);
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn to_field(&self) -> Field2D {
        Field2D {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Pointwise subset test.
    pub fn is_subset_of(&self, other: &Mask2D) -> bool {
        self.shape() == other.shape()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| self.get(c, r))
    }
}

/// `out[i,j] = 1` iff `p[i,j] > threshold` (strict).
pub fn binarize(p: &Field2D, threshold: f32) -> Mask2D {
    Mask2D {
        height: p.height,
        width: p.width,
        data: p.data.iter().map(|&v| (v > threshold) as u8).collect(),
    }
}

/// Ordered stack of equally shaped slices, index = anatomical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack<T> {
    slices: Vec<T>,
}

pub type FieldStack = Stack<Field2D>;
pub type MaskStack = Stack<Mask2D>;

pub trait Slice {
    fn dims(&self) -> (usize, usize);
}

impl Slice for Field2D {
    fn dims(&self) -> (usize, usize) {
        self.shape()
    }
}

impl Slice for Mask2D {
    fn dims(&self) -> (usize, usize) {
        self.shape()
    }
}

impl<T: Slice> Stack<T> {
    pub fn new(slices: Vec<T>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Invalid("stack depth must be >= 1".into()))?
            .dims();
        if let Some(bad) = slices.iter().find(|s| s.dims() != first) {
            return Err(Error::shape(first, bad.dims()));
        }
        Ok(Self { slices })
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices[0].dims()
    }

    pub fn slices(&self) -> &[T] {
        &self.slices
    }

    pub fn get(&self, i: usize) -> &T {
        &self.slices[i]
    }

    pub fn into_slices(self) -> Vec<T> {
        self.slices
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_is_strict() {
        let p = Field2D::from_rows(&[&[0.4, 0.6]]).unwrap();
        assert_eq!(binarize(&p, 0.5).data(), &[0, 1]);
        let half = Field2D::filled(3, 3, 0.5);
        assert!(binarize(&half, 0.5).is_blank());
        let q = Field2D::from_rows(&[&[-1.0, 2.0]]).unwrap();
        assert_eq!(binarize(&q, 0.0).data(), &[0, 1]);
    }

    #[test]
    fn constructors_validate() {
        assert!(Field2D::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Field2D::new(1, 1, vec![f32::NAN]).is_err());
        assert!(Mask2D::new(1, 2, vec![0, 2]).is_err());
        assert!(MaskStack::new(vec![]).is_err());
        assert!(MaskStack::new(vec![Mask2D::zeros(2, 2), Mask2D::zeros(2, 3)]).is_err());
    }
}
