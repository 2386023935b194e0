//! Coordinate/feature sparse tensors and the dense rasters they come from.
//!
//! A [`SparseTensor`] stores only valid pixels: a coordinate list
//! `(u, v, s)` (column, row, batch index) and a matching `N x Q` feature
//! matrix. Depth rasters use the validity-by-positivity convention: a pixel
//! is valid iff its value is strictly positive.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pixel coordinate plus batch index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub u: u32,
    pub v: u32,
    pub s: u32,
}

impl Coord {
    pub const fn new(u: u32, v: u32) -> Self {
        Coord { u, v, s: 0 }
    }

    /// Row-major canonical ordering key: batch, then row, then column.
    pub fn canonical_key(&self) -> (u32, u32, u32) {
        (self.s, self.v, self.u)
    }
}

/// Dense `H x W x Q` raster, row-major with the channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

/// Densified sparse features and skip-connection feature maps.
pub type DenseFeatureMap<T> = DenseMap<T>;

impl<T: Scalar> DenseMap<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        DenseMap { width, height, channels, data: vec![T::zero(); width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} raster needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(DenseMap { width, height, channels, data })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Feature vector at column `u`, row `v`.
    pub fn at(&self, u: usize, v: usize) -> &[T] {
        let o = (v * self.width + u) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> DenseMap<U> {
        DenseMap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

/// Single-channel metric depth raster; `> 0` means valid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T = f32>(pub DenseMap<T>);

impl<T: Scalar> DepthMap<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        Ok(DepthMap(DenseMap::from_vec(width, height, 1, data)?))
    }

    pub fn from_dense(map: DenseMap<T>) -> Result<Self> {
        if map.channels != 1 {
            return Err(Error::Shape(format!("depth map needs 1 channel, got {}", map.channels)));
        }
        Ok(DepthMap(map))
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap(DenseMap::zeros(width, height, 1))
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn values(&self) -> &[T] {
        &self.0.data
    }

    pub fn values_mut(&mut self) -> &mut Vec<T> {
        &mut self.0.data
    }

    pub fn get(&self, u: usize, v: usize) -> T {
        self.0.data[v * self.0.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.0.data.iter().filter(|&&d| d > T::zero()).count()
    }

    /// Flat indices of valid pixels in row-major order.
    pub fn valid_indices(&self) -> Vec<usize> {
        self.0.data.iter().enumerate().filter(|(_, &d)| d > T::zero()).map(|(i, _)| i).collect()
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap(self.0.cast())
    }
}

/// RGB raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T = f32>(pub DenseMap<T>);

impl<T: Scalar> ImageTensor<T> {
    pub fn from_dense(map: DenseMap<T>) -> Result<Self> {
        if map.channels != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {}", map.channels)));
        }
        if !map.is_finite() {
            return Err(Error::DataValidation("image contains non-finite values".into()));
        }
        Ok(ImageTensor(map))
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor(self.0.cast())
    }
}

/// Coordinate matrix plus feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<T> {
    pub coords: Vec<Coord>,
    /// `N x channels`, row `n` belongs to `coords[n]`.
    pub feats: Vec<T>,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub batch: usize,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn empty(width: usize, height: usize, channels: usize) -> Self {
        SparseTensor { coords: Vec::new(), feats: Vec::new(), width, height, channels, batch: 1 }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, n: usize) -> &[T] {
        &self.feats[n * self.channels..(n + 1) * self.channels]
    }

    /// Checks length agreement, bounds and uniqueness of coordinates.
    pub fn validate(&self) -> Result<()> {
        if self.feats.len() != self.coords.len() * self.channels {
            return Err(Error::Invariant(format!(
                "{} coordinates but {} feature values for Q={}",
                self.coords.len(),
                self.feats.len(),
                self.channels
            )));
        }
        let mut seen = HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if c.u as usize >= self.width || c.v as usize >= self.height || c.s as usize >= self.batch {
                return Err(Error::Invariant(format!(
                    "coordinate ({}, {}, {}) outside {}x{} raster with batch {}",
                    c.u, c.v, c.s, self.width, self.height, self.batch
                )));
            }
            if !seen.insert(*c) {
                return Err(Error::Invariant(format!("duplicate coordinate ({}, {}, {})", c.u, c.v, c.s)));
            }
        }
        Ok(())
    }
}

/// Gathers the strictly positive pixels of `d` in row-major order.
pub fn sparsify<T: Scalar>(d: &DepthMap<T>) -> Result<SparseTensor<T>> {
    if let Some(i) = d.values().iter().position(|x| !x.is_finite()) {
        return Err(Error::DataValidation(format!("non-finite depth at flat index {i}")));
    }
    let w = d.width();
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for (i, &x) in d.values().iter().enumerate() {
        if x > T::zero() {
            coords.push(Coord::new((i % w) as u32, (i / w) as u32));
            feats.push(x);
        }
    }
    Ok(SparseTensor { coords, feats, width: w, height: d.height(), channels: 1, batch: 1 })
}

/// Scatters features into a zero raster. Requires batch size 1.
pub fn densify<T: Scalar>(s: &SparseTensor<T>) -> Result<DenseFeatureMap<T>> {
    if s.batch != 1 {
        return Err(Error::Contract(format!("densify expects batch size 1, got {}", s.batch)));
    }
    if s.feats.len() != s.coords.len() * s.channels {
        return Err(Error::Invariant("coordinate/feature length mismatch".into()));
    }
    let mut out = DenseMap::zeros(s.width, s.height, s.channels);
    for (n, c) in s.coords.iter().enumerate() {
        if c.u as usize >= s.width || c.v as usize >= s.height || c.s != 0 {
            return Err(Error::Invariant(format!(
                "coordinate ({}, {}, {}) outside {}x{} raster",
                c.u, c.v, c.s, s.width, s.height
            )));
        }
        let o = (c.v as usize * s.width + c.u as usize) * s.channels;
        out.data[o..o + s.channels].copy_from_slice(s.feature(n));
    }
    Ok(out)
}
