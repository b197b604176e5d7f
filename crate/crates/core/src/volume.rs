//! Dense 3D grids used throughout the pipeline.
//!
//! All grids are stored x-fastest: voxel `(x, y, z)` lives at
//! `x + dims.0 * (y + dims.1 * z)`, which is also the on-disk order of NIfTI.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Dims = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid3<T> {
    pub fn zeros(dims: Dims) -> Self {
        Grid3 {
            dims,
            data: vec![T::default(); dims.0 * dims.1 * dims.2],
        }
    }
}

impl<T: Copy> Grid3<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Grid3 {
            dims,
            data: vec![value; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Shape(format!("zero-sized dims {dims:?}")));
        }
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Shape(format!(
                "{} values do not fill dims {dims:?}",
                data.len()
            )));
        }
        Ok(Grid3 { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    data.push(f(x, y, z));
                }
            }
        }
        Grid3 { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.data[i] = value;
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

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Voxel spacing plus the NIfTI orientation fields, carried along so that
/// derived masks and heatmaps land in the same space as their source.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub voxel_size: (f32, f32, f32),
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Geometry {
    pub fn with_voxel_size(voxel_size: (f32, f32, f32)) -> Self {
        let (dx, dy, dz) = voxel_size;
        Geometry {
            voxel_size,
            qform_code: 0,
            sform_code: 1,
            qfac: 1.0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [
                [dx, 0.0, 0.0, 0.0],
                [0.0, dy, 0.0, 0.0],
                [0.0, 0.0, dz, 0.0],
            ],
        }
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry::with_voxel_size((1.0, 1.0, 1.0))
    }
}

/// An intensity volume with its geometry and the range of the raw data it
/// was loaded from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub grid: Grid3<f32>,
    pub geometry: Geometry,
    pub source_range: (f32, f32),
}

impl ScalarVolume {
    /// Wraps a grid, recording its own value range as the source range.
    pub fn new(grid: Grid3<f32>, geometry: Geometry) -> Self {
        let source_range = value_range(grid.as_slice());
        ScalarVolume {
            grid,
            geometry,
            source_range,
        }
    }

    pub fn voxel_size(&self) -> (f32, f32, f32) {
        self.geometry.voxel_size
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    pub fn min_max(&self) -> (f32, f32) {
        value_range(self.grid.as_slice())
    }
}

pub(crate) fn value_range(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Maps intensities linearly onto `[0, 1]`. A constant volume maps to zeros.
pub fn minmax_normalize(vol: &ScalarVolume) -> ScalarVolume {
    let (lo, hi) = vol.min_max();
    let span = hi - lo;
    let grid = if span > 0.0 && span.is_finite() {
        vol.grid.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        vol.grid.map(|_| 0.0)
    };
    ScalarVolume {
        grid,
        geometry: vol.geometry.clone(),
        source_range: vol.source_range,
    }
}

/// Strictly binary voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid3<u8>,
}

impl BinaryMask {
    pub fn new(grid: Grid3<u8>) -> Result<Self> {
        if let Some(bad) = grid.as_slice().iter().find(|&&v| v > 1) {
            return Err(Error::Shape(format!("mask value {bad} is not binary")));
        }
        Ok(BinaryMask { grid })
    }

    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            grid: Grid3::zeros(dims),
        }
    }

    /// Any nonzero value counts as foreground.
    pub fn from_nonzero(grid: &Grid3<f32>) -> Self {
        BinaryMask {
            grid: grid.map(|v| u8::from(v != 0.0)),
        }
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    pub fn count(&self) -> usize {
        self.grid.as_slice().iter().filter(|&&v| v != 0).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
            && self
                .grid
                .as_slice()
                .iter()
                .zip(other.grid.as_slice())
                .all(|(&a, &b)| a <= b)
    }
}

/// Where a probability volume came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapSource {
    Orientation(crate::geometry::Orientation),
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub grid: Grid3<f32>,
    pub source: HeatmapSource,
}

impl ProbabilityVolume {
    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }
}

/// Connected-component labeling: 0 is background, components are `1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub grid: Grid3<u32>,
    pub sizes: BTreeMap<u32, usize>,
}

impl LabeledVolume {
    pub fn num_components(&self) -> usize {
        self.sizes.len()
    }
}
