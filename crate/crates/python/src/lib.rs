//! Python bindings for the `hipseg` segmentation library.
//!
//! Volumes cross the boundary as flat lists in x-fastest order together with
//! their `(nx, ny, nz)` dimensions.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hipseg::config::RunConfig;
use hipseg::consensus::{self, ModelSet};
use hipseg::dataset::Dataset;
use hipseg::labeling::{self, Connectivity};
use hipseg::nn::save_checkpoint;
use hipseg::phantom::{self, PhantomConfig};
use hipseg::training::{train_orientation, write_metrics_log};
use hipseg::volume::{minmax_normalize, HeatmapSource};
use hipseg::{metrics, nifti, BinaryMask, Geometry, Grid3, Orientation, ProbabilityVolume, ScalarVolume};

fn to_py(e: hipseg::Error) -> PyErr {
    match e {
        hipseg::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn connectivity(n: u8) -> PyResult<Connectivity> {
    Connectivity::try_from(n).map_err(to_py)
}

type Dims = (usize, usize, usize);

#[pyclass(name = "Volume", module = "hipseg_py", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: ScalarVolume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, data, voxel_size = (1.0, 1.0, 1.0)))]
    fn new(dims: Dims, data: Vec<f32>, voxel_size: (f32, f32, f32)) -> PyResult<Self> {
        let grid = Grid3::from_vec(dims, data).map_err(to_py)?;
        Ok(PyVolume {
            inner: ScalarVolume::new(grid, Geometry::with_voxel_size(voxel_size)),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVolume {
            inner: nifti::load_volume(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        nifti::save_volume(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    #[getter]
    fn voxel_size(&self) -> (f32, f32, f32) {
        self.inner.voxel_size()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f32> {
        check_index(self.inner.dims(), (x, y, z))?;
        Ok(self.inner.grid.get(x, y, z))
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.grid.as_slice().to_vec()
    }

    /// Rescaled to [0, 1].
    fn normalized(&self) -> Self {
        PyVolume {
            inner: minmax_normalize(&self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.inner.dims())
    }
}

fn check_index(dims: Dims, (x, y, z): Dims) -> PyResult<()> {
    if x >= dims.0 || y >= dims.1 || z >= dims.2 {
        return Err(PyValueError::new_err(format!("index {:?} outside {:?}", (x, y, z), dims)));
    }
    Ok(())
}

#[pyclass(name = "Mask", module = "hipseg_py", from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: BinaryMask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(dims: Dims, data: Vec<u8>) -> PyResult<Self> {
        let grid = Grid3::from_vec(dims, data).map_err(to_py)?;
        Ok(PyMask {
            inner: BinaryMask::new(grid).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyMask {
            inner: nifti::load_mask(path).map_err(to_py)?,
        })
    }

    /// Writes the mask with the geometry of `reference`.
    fn save(&self, path: PathBuf, reference: &PyVolume) -> PyResult<()> {
        nifti::save_mask(&self.inner, &reference.inner, path).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<u8> {
        check_index(self.inner.dims(), (x, y, z))?;
        Ok(self.inner.grid.get(x, y, z))
    }

    fn to_list(&self) -> Vec<u8> {
        self.inner.grid.as_slice().to_vec()
    }

    #[pyo3(signature = (connectivity = 26))]
    fn num_components(&self, connectivity: u8) -> PyResult<usize> {
        Ok(labeling::label_components(&self.inner, self::connectivity(connectivity)?).num_components())
    }

    fn __repr__(&self) -> String {
        format!("Mask(dims={:?}, count={})", self.inner.dims(), self.inner.count())
    }
}

#[pyclass(name = "Heatmap", module = "hipseg_py", from_py_object)]
#[derive(Clone)]
struct PyHeatmap {
    inner: ProbabilityVolume,
}

#[pymethods]
impl PyHeatmap {
    #[new]
    fn new(dims: Dims, data: Vec<f32>) -> PyResult<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PyValueError::new_err(format!("probability {v} outside [0, 1]")));
        }
        Ok(PyHeatmap {
            inner: ProbabilityVolume {
                grid: Grid3::from_vec(dims, data).map_err(to_py)?,
                source: HeatmapSource::Fused,
            },
        })
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    #[getter]
    fn source(&self) -> String {
        match self.inner.source {
            HeatmapSource::Orientation(o) => o.name().to_string(),
            HeatmapSource::Fused => "fused".to_string(),
        }
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f32> {
        check_index(self.inner.dims(), (x, y, z))?;
        Ok(self.inner.grid.get(x, y, z))
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.grid.as_slice().to_vec()
    }

    /// Voxels strictly above `threshold`.
    #[pyo3(signature = (threshold = 0.5))]
    fn binarize(&self, threshold: f32) -> PyMask {
        PyMask {
            inner: consensus::binarize(&self.inner, threshold),
        }
    }

    fn save(&self, path: PathBuf, reference: &PyVolume) -> PyResult<()> {
        nifti::save_heatmap(&self.inner, &reference.inner, path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Heatmap(dims={:?}, source={})", self.inner.dims(), self.source())
    }
}

/// Trained networks for the three orientations.
#[pyclass(name = "Models", module = "hipseg_py")]
struct PyModels {
    inner: ModelSet,
}

#[pymethods]
impl PyModels {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyModels {
            inner: ModelSet::load(dir).map_err(to_py)?,
        })
    }

    /// Runs all three networks, fuses, thresholds and keeps the largest
    /// components. Returns the mask and the fused heatmap.
    #[pyo3(signature = (volume, threshold = 0.5, crop_size = 160, keep = 2, connectivity = 26))]
    fn segment(
        &self,
        py: Python<'_>,
        volume: &PyVolume,
        threshold: f32,
        crop_size: usize,
        keep: usize,
        connectivity: u8,
    ) -> PyResult<(PyMask, PyHeatmap)> {
        let cfg = consensus::ConsensusConfig {
            threshold,
            crop_size,
            keep_components: keep,
            connectivity: self::connectivity(connectivity)?,
            ..consensus::ConsensusConfig::default()
        };
        let vol = minmax_normalize(&volume.inner);
        let seg = py.detach(|| consensus::segment(&vol, &self.inner, &cfg)).map_err(to_py)?;
        Ok((PyMask { inner: seg.mask }, PyHeatmap { inner: seg.fused }))
    }
}

#[pyfunction]
fn dice(pred: &PyMask, reference: &PyMask) -> PyResult<f64> {
    metrics::volumetric_dice(&pred.inner, &reference.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (mask, keep = 2, connectivity = 26))]
fn largest_components(mask: &PyMask, keep: usize, connectivity: u8) -> PyResult<PyMask> {
    Ok(PyMask {
        inner: labeling::largest_components(&mask.inner, self::connectivity(connectivity)?, keep).map_err(to_py)?,
    })
}

/// Weighted voxelwise mean of heatmaps; weights default to equal.
#[pyfunction]
#[pyo3(signature = (heatmaps, weights = None))]
fn fuse(heatmaps: Vec<PyHeatmap>, weights: Option<Vec<f32>>) -> PyResult<PyHeatmap> {
    let weights = weights.unwrap_or_else(|| vec![1.0 / heatmaps.len().max(1) as f32; heatmaps.len()]);
    let refs: Vec<&ProbabilityVolume> = heatmaps.iter().map(|h| &h.inner).collect();
    Ok(PyHeatmap {
        inner: consensus::fuse(&refs, &weights).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (heatmap, threshold = 0.5, keep = 2, connectivity = 26))]
fn postprocess(heatmap: &PyHeatmap, threshold: f32, keep: usize, connectivity: u8) -> PyResult<PyMask> {
    Ok(PyMask {
        inner: consensus::postprocess(&heatmap.inner, threshold, self::connectivity(connectivity)?, keep).map_err(to_py)?,
    })
}

/// One synthetic phantom: raw intensities and the two-structure truth mask.
/// The default 64³ layout is scaled to `dims`.
#[pyfunction]
#[pyo3(signature = (seed = 0, dims = (64, 64, 64)))]
fn generate_phantom(seed: u64, dims: Dims) -> PyResult<(PyVolume, PyMask)> {
    let cfg = PhantomConfig {
        seed,
        ..PhantomConfig::default().scaled_to(dims)
    };
    let (raw, mask) = phantom::generate_phantom(&cfg).map_err(to_py)?;
    Ok((PyVolume { inner: raw }, PyMask { inner: mask }))
}

/// Writes `count` phantoms plus a manifest into `out_dir`. Returns the
/// train/val/test counts.
#[pyfunction]
#[pyo3(signature = (out_dir, count = 20, seed = 0, dims = (64, 64, 64)))]
fn synthesize(out_dir: PathBuf, count: usize, seed: u64, dims: Dims) -> PyResult<(usize, usize, usize)> {
    let base = PhantomConfig::default().scaled_to(dims);
    let data = phantom::generate_dataset(count, &base, seed).map_err(to_py)?;
    data.write(&out_dir).map_err(to_py)?;
    Ok((data.train.len(), data.val.len(), data.test.len()))
}

/// Trains one network per orientation on the dataset in `data_dir` and
/// writes `<orientation>.ckpt` and `<orientation>_metrics.csv` to `out_dir`.
/// `settings` holds configuration overrides such as
/// `{"network.base_width": "8", "training.epochs": "2"}`.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, settings = None, orientations = None))]
fn train(
    py: Python<'_>,
    data_dir: PathBuf,
    out_dir: PathBuf,
    settings: Option<Vec<(String, String)>>,
    orientations: Option<Vec<String>>,
) -> PyResult<Vec<(String, usize, f32)>> {
    let mut cfg = RunConfig::default();
    for (k, v) in settings.unwrap_or_default() {
        cfg.set(&k, &v).map_err(to_py)?;
    }
    cfg.validate().map_err(to_py)?;
    let orients = match orientations {
        None => Orientation::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Orientation>())
            .collect::<hipseg::Result<Vec<_>>>()
            .map_err(to_py)?,
    };
    py.detach(|| -> hipseg::Result<Vec<(String, usize, f32)>> {
        let data = Dataset::load(&data_dir)?;
        std::fs::create_dir_all(&out_dir).map_err(|e| hipseg::Error::Io {
            path: out_dir.clone(),
            source: e,
        })?;
        let mut out = Vec::new();
        for o in orients {
            let model = train_orientation(&data.train, &data.val, o, &cfg.network, &cfg.training, &cfg.sampler)?;
            save_checkpoint(&model.to_checkpoint(), ModelSet::checkpoint_path(&out_dir, o))?;
            write_metrics_log(&model.history, out_dir.join(format!("{}_metrics.csv", o.name())))?;
            out.push((o.name().to_string(), model.best_epoch, model.best_val_dice));
        }
        Ok(out)
    })
    .map_err(to_py)
}

#[pymodule]
fn hipseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyHeatmap>()?;
    m.add_class::<PyModels>()?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(largest_components, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
