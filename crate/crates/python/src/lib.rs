//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pseudofuse::caaf::{caaf_fuse as core_caaf_fuse, RoI, RoIFeaturePair};
use pseudofuse::calib::{project_points, rasterize_depth, PixelDepthSample, SparseDepthMap};
use pseudofuse::cloud::{ball_query as core_ball_query, build_pseudo_cloud, farthest_point_sample as core_fps};
use pseudofuse::cloud::{voxelize_with_members, NO_NEIGHBOR};
use pseudofuse::config::PipelineConfig;
use pseudofuse::depth::{complete_depth, DenseDepthMap};
use pseudofuse::pipeline::gradsuite::gradient_suite as core_gradient_suite;
use pseudofuse::pipeline::{overfit_test, run_pipeline as core_run_pipeline};
use pseudofuse::scene::{generate_scene as core_generate_scene, SyntheticScene};
use pseudofuse::tensor::{LinearLayer, ParamStore, Tensor};

create_exception!(pseudofuse, PseudofuseError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    PseudofuseError::new_err(e.to_string())
}

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::from_rows(rows, cols).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn xyz(points: &[Vec<f64>]) -> PyResult<Vec<[f64; 3]>> {
    points
        .iter()
        .map(|p| match p.as_slice() {
            [x, y, z, ..] => Ok([*x, *y, *z]),
            _ => Err(err(format!("point needs three coordinates, got {}", p.len()))),
        })
        .collect()
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Pipeline configuration; `Config()` holds the defaults.
#[pyclass(name = "Config", module = "pseudofuse", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => PipelineConfig::from_toml(t).map_err(err)?,
            None => PipelineConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn keypoint_count(&self) -> usize {
        self.inner.keypoint_count
    }

    /// Switches to a fusion ablation row (`'a'`, `'b'` or `'c'`).
    fn with_fusion_row(&self, row: char) -> PyResult<Self> {
        let inner = self.inner.clone().with_fusion_row(row).map_err(err)?;
        Ok(Self { inner })
    }

    /// Switches to a feature-source ablation row (`'a'` to `'e'`).
    fn with_source_row(&self, row: char) -> PyResult<Self> {
        let inner = self.inner.clone().with_source_row(row).map_err(err)?;
        Ok(Self { inner })
    }
}

/// Oriented box: center, size `(l, w, h)`, yaw and score.
#[pyclass(name = "Box", module = "pseudofuse", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyBox {
    pub inner: RoI,
}

#[pymethods]
impl PyBox {
    #[new]
    #[pyo3(signature = (center, size, yaw=0.0, score=0.0))]
    fn new(center: [f64; 3], size: [f64; 3], yaw: f64, score: f64) -> PyResult<Self> {
        Ok(Self {
            inner: RoI::new(center, size, yaw, score).map_err(err)?,
        })
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center
    }

    #[getter]
    fn size(&self) -> [f64; 3] {
        self.inner.size
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.inner.yaw
    }

    #[getter]
    fn score(&self) -> f64 {
        self.inner.score
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.inner.contains(p)
    }

    fn corners(&self) -> Vec<[f64; 3]> {
        self.inner.corners().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Box({})", self.inner)
    }
}

/// A generated scene: LiDAR cloud, camera image, ground-truth boxes.
#[pyclass(name = "Scene", module = "pseudofuse", frozen)]
pub struct PyScene {
    pub inner: SyntheticScene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn boxes(&self) -> Vec<PyBox> {
        self.inner.boxes.iter().map(|&inner| PyBox { inner }).collect()
    }

    /// `x y z intensity` rows.
    #[getter]
    fn points(&self) -> Vec<[f64; 4]> {
        let c = &self.inner.raw_cloud;
        c.points
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0], p[1], p[2], c.intensity_at(i)])
            .collect()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.inner.image.width(), self.inner.image.height())
    }

    /// Row-major ground-truth camera depth, or `None`.
    #[getter]
    fn gt_depth(&self) -> Option<Vec<f64>> {
        self.inner.gt_depth.as_ref().map(|d| d.cells().to_vec())
    }

    fn surface_distance(&self, p: [f64; 3]) -> f64 {
        self.inner.surface_distance(p)
    }

    fn export(&self, dir: std::path::PathBuf) -> PyResult<()> {
        self.inner.export(&dir).map_err(err)
    }
}

fn sparse_of(scene: &SyntheticScene) -> PyResult<SparseDepthMap> {
    let samples: Vec<PixelDepthSample> = project_points(&scene.raw_cloud, &scene.calib)
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    rasterize_depth(&samples, scene.calib.width(), scene.calib.height()).map_err(err)
}

fn dense_of(scene: &SyntheticScene) -> PyResult<DenseDepthMap> {
    complete_depth(&scene.image, &sparse_of(scene)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
pub fn generate_scene(config: Option<&PyConfig>, seed: Option<u64>) -> PyResult<PyScene> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let inner = core_generate_scene(&cfg.scene, seed.unwrap_or(cfg.seed)).map_err(err)?;
    Ok(PyScene { inner })
}

/// Z-buffered sparse depth of the LiDAR cloud; empty pixels are 0.
#[pyfunction]
pub fn project_depth(scene: &PyScene) -> PyResult<Vec<f64>> {
    Ok(sparse_of(&scene.inner)?.cells().to_vec())
}

/// Completed dense depth, row-major.
#[pyfunction]
#[pyo3(name = "complete_depth")]
pub fn complete(scene: &PyScene) -> PyResult<Vec<f64>> {
    Ok(dense_of(&scene.inner)?.cells().to_vec())
}

/// Pseudo points as `x y z r g b u v` rows.
#[pyfunction]
#[pyo3(signature = (scene, stride=1))]
pub fn pseudo_cloud(scene: &PyScene, stride: usize) -> PyResult<Vec<Vec<f64>>> {
    let s = &scene.inner;
    let cloud = build_pseudo_cloud(&s.image, &dense_of(s)?, &s.calib, stride).map_err(err)?;
    Ok(rows(&cloud.to_matrix()))
}

/// Indices chosen by farthest point sampling.
#[pyfunction]
#[pyo3(signature = (points, count, start=0))]
pub fn farthest_point_sample(points: Vec<Vec<f64>>, count: usize, start: usize) -> PyResult<Vec<usize>> {
    Ok(core_fps(&xyz(&points)?, count, start).map_err(err)?.indices)
}

/// Neighbor indices within `radius` of each center, at most `max_neighbors`.
#[pyfunction]
pub fn ball_query(
    centers: Vec<Vec<f64>>,
    points: Vec<Vec<f64>>,
    radius: f64,
    max_neighbors: usize,
) -> PyResult<Vec<Vec<usize>>> {
    let m = core_ball_query(&xyz(&centers)?, &xyz(&points)?, radius, max_neighbors).map_err(err)?;
    Ok((0..m.rows())
        .map(|i| m.row(i).iter().copied().filter(|&j| j != NO_NEIGHBOR).collect())
        .collect())
}

/// Mean-feature voxelization; returns a dict of keys, counts, features
/// and member indices per voxel.
#[pyfunction]
pub fn voxelize<'py>(
    py: Python<'py>,
    points: Vec<Vec<f64>>,
    voxel_size: [f64; 3],
    range_min: [f64; 3],
    range_max: [f64; 3],
) -> PyResult<Bound<'py, PyDict>> {
    let (grid, members) = voxelize_with_members(&tensor(&points)?, voxel_size, range_min, range_max).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("keys", grid.keys().to_vec())?;
    d.set_item("counts", grid.counts().to_vec())?;
    d.set_item("features", rows(&grid.feature_matrix()))?;
    d.set_item("members", members)?;
    Ok(d)
}

/// Gated fusion of paired RoI features with a given gate layer
/// (`weight` is `2D × 2D`). Returns `(fused, w_raw, w_pse)`.
#[pyfunction]
pub fn caaf_fuse(
    f_raw: Vec<Vec<f64>>,
    f_pse: Vec<Vec<f64>>,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let pair = RoIFeaturePair::new(tensor(&f_raw)?, tensor(&f_pse)?).map_err(err)?;
    let mut store = ParamStore::new();
    let fc = LinearLayer::from_parts(&mut store, "fusion", tensor(&weight)?, Tensor::vector(bias)).map_err(err)?;
    let (fused, gates) = core_caaf_fuse(&pair, &fc, &store).map_err(err)?;
    Ok((rows(&fused.features), rows(&gates.w_raw), rows(&gates.w_pse)))
}

/// One forward pass with fresh parameters; returns the metrics record.
#[pyfunction]
pub fn run_pipeline(py: Python<'_>, config: &PyConfig, scene: &PyScene) -> PyResult<Py<PyAny>> {
    let run = core_run_pipeline(&config.inner, &scene.inner).map_err(err)?;
    json_to_py(py, &run.record.to_json().map_err(err)?)
}

/// Trains on one scene; returns per-step loss totals and the final
/// confidence on each ground-truth box.
#[pyfunction]
#[pyo3(signature = (config, scene, steps=None))]
pub fn overfit(config: &PyConfig, scene: &PyScene, steps: Option<usize>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let steps = steps.unwrap_or(config.inner.steps);
    let (report, _) = overfit_test(&config.inner, &scene.inner, steps).map_err(err)?;
    Ok((report.trajectory.iter().map(|b| b.total).collect(), report.gt_confidence))
}

/// Worst finite-difference relative error per operation.
#[pyfunction]
#[pyo3(signature = (draws=10, seed=0))]
pub fn gradient_suite(draws: usize, seed: u64) -> PyResult<Vec<(String, f64)>> {
    Ok(core_gradient_suite(draws, seed)
        .map_err(err)?
        .into_iter()
        .map(|c| (c.name, c.max_rel_error))
        .collect())
}

#[pymodule]
#[pyo3(name = "pseudofuse")]
fn pseudofuse_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PseudofuseError", m.py().get_type::<PseudofuseError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyBox>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(project_depth, m)?)?;
    m.add_function(wrap_pyfunction!(complete, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(ball_query, m)?)?;
    m.add_function(wrap_pyfunction!(voxelize, m)?)?;
    m.add_function(wrap_pyfunction!(caaf_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(overfit, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    Ok(())
}
