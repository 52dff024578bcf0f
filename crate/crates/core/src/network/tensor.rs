use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::geometry::Image;
use crate::math::Real;

/// Dense `[batch, channels, height, width]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(shape_err!("{} values for tensor shape {:?}", data.len(), shape));
        }
        Ok(Self { shape, data })
    }

    /// Stacks single-channel images into a `[n, 1, h, w]` batch.
    pub fn from_images<'a, I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Image>,
    {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in images {
            match dims {
                None => dims = Some(img.dims()),
                Some(d) if d != img.dims() => {
                    return Err(shape_err!("batch mixes {:?} and {:?} images", d, img.dims()));
                }
                _ => {}
            }
            data.extend(img.pixels().iter().map(|&v| T::from_f64(v as f64)));
            n += 1;
        }
        let (h, w) = dims.ok_or_else(|| shape_err!("empty image batch"))?;
        Ok(Self { shape: [n, 1, h, w], data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Items `start..end` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let len = self.item_len();
        let mut shape = self.shape;
        shape[0] = end - start;
        Self { shape, data: self.data[start * len..end * len].to_vec() }
    }

    /// Concatenates along the batch axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("nothing to concatenate"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(shape_err!("cannot concatenate {:?} with {:?}", first.shape, p.shape));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}
