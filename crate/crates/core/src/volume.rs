use crate::error::{Error, Result};

/// Dense voxel grid stored x-fastest: `index = z·(Y·X) + y·X + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<V> {
    pub shape: [usize; 3],
    pub data: Vec<V>,
}

impl<V: Clone> Volume<V> {
    pub fn filled(shape: [usize; 3], value: V) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }
}

impl<V> Volume<V> {
    pub fn new(shape: [usize; 3], data: Vec<V>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &V {
        &self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: V) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// Inverse of [`Volume::index`].
    #[inline]
    pub fn position(&self, index: usize) -> [usize; 3] {
        let plane = self.shape[0] * self.shape[1];
        [index % self.shape[0], (index % plane) / self.shape[0], index / plane]
    }
}
