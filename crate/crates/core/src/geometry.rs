//! Orientation slicing, center cropping and pad-back.
//!
//! Axis convention: sagittal slices are perpendicular to axis 0, coronal to
//! axis 1 and axial to axis 2. A slice keeps the two remaining axes in
//! increasing order as (rows, cols), so an axial slice of a `(X, Y, Z)`
//! volume is `X × Y`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Grid3;

/// Default in-plane crop used at inference time.
pub const CROP_SIZE: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Sagittal,
    Coronal,
    Axial,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Sagittal, Orientation::Coronal, Orientation::Axial];

    /// Volume axis the slices are perpendicular to.
    pub fn axis(self) -> usize {
        match self {
            Orientation::Sagittal => 0,
            Orientation::Coronal => 1,
            Orientation::Axial => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Sagittal => "sagittal",
            Orientation::Coronal => "coronal",
            Orientation::Axial => "axial",
        }
    }

    /// Number of slices of a volume with `dims` in this orientation.
    pub fn depth(self, dims: (usize, usize, usize)) -> usize {
        [dims.0, dims.1, dims.2][self.axis()]
    }

    /// (rows, cols) of each slice.
    pub fn slice_dims(self, dims: (usize, usize, usize)) -> (usize, usize) {
        match self {
            Orientation::Sagittal => (dims.1, dims.2),
            Orientation::Coronal => (dims.0, dims.2),
            Orientation::Axial => (dims.0, dims.1),
        }
    }

    /// Maps (slice index, row, col) to volume coordinates.
    #[inline]
    pub fn to_volume(self, k: usize, row: usize, col: usize) -> (usize, usize, usize) {
        match self {
            Orientation::Sagittal => (k, row, col),
            Orientation::Coronal => (row, k, col),
            Orientation::Axial => (row, col, k),
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sagittal" => Ok(Orientation::Sagittal),
            "coronal" => Ok(Orientation::Coronal),
            "axial" => Ok(Orientation::Axial),
            other => Err(Error::Config(format!("unknown orientation `{other}`"))),
        }
    }
}

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid2 {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }
}

impl<T: Copy> Grid2<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}×{cols} grid",
                data.len()
            )));
        }
        Ok(Grid2 { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Grid2 { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
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

    /// Mirrors columns (left-right).
    pub fn hflip(&self) -> Self {
        Grid2::from_fn(self.rows, self.cols, |r, c| self.get(r, self.cols - 1 - c))
    }
}

/// Extracts slice `k` of `vol` in `orient`.
pub fn slice<T: Copy>(vol: &Grid3<T>, orient: Orientation, k: usize) -> Grid2<T> {
    let (rows, cols) = orient.slice_dims(vol.dims());
    Grid2::from_fn(rows, cols, |r, c| {
        let (x, y, z) = orient.to_volume(k, r, c);
        vol.get(x, y, z)
    })
}

/// Writes `plane` into slice `k` of `vol`.
pub fn write_slice<T: Copy>(vol: &mut Grid3<T>, orient: Orientation, k: usize, plane: &Grid2<T>) {
    for r in 0..plane.rows() {
        for c in 0..plane.cols() {
            let (x, y, z) = orient.to_volume(k, r, c);
            vol.set(x, y, z, plane.get(r, c));
        }
    }
}

/// All slices of `vol` along `orient`, in index order.
pub fn slice_stack<T: Copy>(vol: &Grid3<T>, orient: Orientation) -> Vec<Grid2<T>> {
    (0..orient.depth(vol.dims()))
        .map(|k| slice(vol, orient, k))
        .collect()
}

/// Inverse of [`slice_stack`].
pub fn reassemble<T: Copy + Default>(slices: &[Grid2<T>], orient: Orientation) -> Result<Grid3<T>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Shape("cannot reassemble zero slices".into()))?;
    let (rows, cols) = first.shape();
    if slices.iter().any(|s| s.shape() != (rows, cols)) {
        return Err(Error::Shape("slices differ in shape".into()));
    }
    let depth = slices.len();
    let dims = match orient {
        Orientation::Sagittal => (depth, rows, cols),
        Orientation::Coronal => (rows, depth, cols),
        Orientation::Axial => (rows, cols, depth),
    };
    let mut vol = Grid3::zeros(dims);
    for (k, s) in slices.iter().enumerate() {
        write_slice(&mut vol, orient, k, s);
    }
    Ok(vol)
}

/// Placement of a crop inside its source slice. Offsets are negative along
/// axes where the source is smaller than the crop (the crop is zero-padded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub row0: isize,
    pub col0: isize,
    pub size: (usize, usize),
    pub source_dims: (usize, usize),
}

impl CropWindow {
    /// Window centered in a slice of `source_dims`; offset = floor((dim − size) / 2).
    pub fn centered(source_dims: (usize, usize), size: (usize, usize)) -> Self {
        let offset = |dim: usize, s: usize| (dim as isize - s as isize).div_euclid(2);
        CropWindow {
            row0: offset(source_dims.0, size.0),
            col0: offset(source_dims.1, size.1),
            size,
            source_dims,
        }
    }

    /// Source coordinate for crop pixel `(r, c)`, if it falls inside the source.
    #[inline]
    pub fn source_coord(&self, r: usize, c: usize) -> Option<(usize, usize)> {
        let sr = self.row0 + r as isize;
        let sc = self.col0 + c as isize;
        (sr >= 0
            && sc >= 0
            && (sr as usize) < self.source_dims.0
            && (sc as usize) < self.source_dims.1)
            .then_some((sr as usize, sc as usize))
    }

    /// Whether source pixel `(r, c)` lies inside the window.
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let (r, c) = (r as isize, c as isize);
        r >= self.row0
            && c >= self.col0
            && r < self.row0 + self.size.0 as isize
            && c < self.col0 + self.size.1 as isize
    }
}

/// Extracts a window from a slice, zero-filling anything outside it.
pub fn crop<T: Copy + Default>(slice: &Grid2<T>, window: &CropWindow) -> Grid2<T> {
    Grid2::from_fn(window.size.0, window.size.1, |r, c| {
        window
            .source_coord(r, c)
            .map_or_else(T::default, |(sr, sc)| slice.get(sr, sc))
    })
}

/// Center crop to `size`, symmetrically zero-padding axes that are too small.
pub fn center_crop<T: Copy + Default>(slice: &Grid2<T>, size: (usize, usize)) -> (Grid2<T>, CropWindow) {
    let window = CropWindow::centered(slice.shape(), size);
    (crop(slice, &window), window)
}

/// Places a crop back into a zero slice of the window's source dims.
pub fn pad_back<T: Copy + Default>(cropped: &Grid2<T>, window: &CropWindow) -> Result<Grid2<T>> {
    if cropped.shape() != window.size {
        return Err(Error::Geometry(format!(
            "crop is {:?} but the window expects {:?}",
            cropped.shape(),
            window.size
        )));
    }
    let mut out = Grid2::zeros(window.source_dims.0, window.source_dims.1);
    for r in 0..window.size.0 {
        for c in 0..window.size.1 {
            if let Some((sr, sc)) = window.source_coord(r, c) {
                out.set(sr, sc, cropped.get(r, c));
            }
        }
    }
    Ok(out)
}
