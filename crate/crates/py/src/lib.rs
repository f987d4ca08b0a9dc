//! Python bindings: `import mvinpaint`.
//!
//! Images and masks cross the boundary as nested lists; grids and scenes stay
//! on the Rust side behind handles.

use std::path::PathBuf;

use mvinpaint::dataset::load_scene as load_scene_dir;
use mvinpaint::geometry::{pixel_to_world, world_to_pixel};
use mvinpaint::inpaint::{harmonic_provider, inpaint_scene, render_depths, InpaintInputs, InpaintOptions};
use mvinpaint::optim::LossWeights;
use mvinpaint::refine::{refine_views, RefineConfig};
use mvinpaint::renderer::{render_view, SampleMode};
use mvinpaint::segmentation::{
    fit_geometry as fit_geometry_core, grid_schedule, AnnotationSet, Dilation, FileMasksProvider, GridConfig, InitProvider,
    RegionGrowProvider, SegmentConfig,
};
use mvinpaint::synthetic::SyntheticConfig;
use mvinpaint::{Error, PixelCoord};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Domain(_)
        | Error::Shape(_)
        | Error::Config(_)
        | Error::Format { .. }
        | Error::MissingFiles(_)
        | Error::NotVisible(_)
        | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(module = "mvinpaint", frozen, from_py_object)]
#[derive(Clone)]
struct Intrinsics(mvinpaint::Intrinsics);

#[pymethods]
impl Intrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        mvinpaint::Intrinsics::new(fx, fy, cx, cy, width, height).map(Self).map_err(to_py)
    }

    #[getter]
    fn fx(&self) -> f64 {
        self.0.fx
    }
    #[getter]
    fn fy(&self) -> f64 {
        self.0.fy
    }
    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }
    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }
    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }
    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }

    fn __repr__(&self) -> String {
        let i = &self.0;
        format!("Intrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})", i.fx, i.fy, i.cx, i.cy, i.width, i.height)
    }
}

/// Camera-to-world rigid transform.
#[pyclass(module = "mvinpaint", frozen, from_py_object)]
#[derive(Clone)]
struct Pose(mvinpaint::Pose);

#[pymethods]
impl Pose {
    /// `matrix` is a row-major 4x4 (16 floats); identity when omitted.
    #[new]
    #[pyo3(signature = (matrix=None))]
    fn new(matrix: Option<Vec<f64>>) -> PyResult<Self> {
        match matrix {
            None => Ok(Self(mvinpaint::Pose::identity())),
            Some(m) => mvinpaint::Pose::from_row_major(&m).map(Self).map_err(to_py),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (eye, target, down=[0.0, 1.0, 0.0]))]
    fn look_at(eye: [f64; 3], target: [f64; 3], down: [f64; 3]) -> PyResult<Self> {
        mvinpaint::Pose::look_at(eye.into(), target.into(), down.into())
            .map(Self)
            .map_err(to_py)
    }

    fn to_list(&self) -> Vec<f64> {
        self.0.to_row_major().to_vec()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn compose(&self, other: &Pose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&p.into()).into()
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center().into()
    }

    fn __repr__(&self) -> String {
        format!("Pose({:?})", self.0.to_row_major())
    }
}

/// World point to `(u, v, depth)`.
#[pyfunction]
fn project(pose: &Pose, intrinsics: &Intrinsics, point: [f64; 3]) -> PyResult<(f64, f64, f64)> {
    let (px, z) = world_to_pixel(&pose.0, &intrinsics.0, &point.into()).map_err(to_py)?;
    Ok((px.u, px.v, z))
}

/// Pixel `(u, v)` at camera depth `depth` to a world point.
#[pyfunction]
fn unproject(pose: &Pose, intrinsics: &Intrinsics, u: f64, v: f64, depth: f64) -> PyResult<[f64; 3]> {
    pixel_to_world(&pose.0, &intrinsics.0, depth, &PixelCoord::new(u, v, 0))
        .map(Into::into)
        .map_err(to_py)
}

#[pyclass(module = "mvinpaint", frozen, from_py_object)]
#[derive(Clone)]
struct Mask(mvinpaint::Mask);

#[pymethods]
impl Mask {
    #[new]
    fn new(width: usize, height: usize) -> Self {
        Self(mvinpaint::Mask::new(width, height))
    }

    /// From rows of truthy values.
    #[staticmethod]
    fn from_rows(rows: Vec<Vec<bool>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("rows have different lengths"));
        }
        Ok(Self(mvinpaint::Mask::from_fn(w, h, |x, y| rows[y][x])))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        mvinpaint::Mask::load_png(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_png(&path).map_err(to_py)
    }

    fn to_rows(&self) -> Vec<Vec<bool>> {
        self.0.data.chunks(self.0.width.max(1)).map(<[bool]>::to_vec).collect()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }
    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    fn count(&self) -> usize {
        self.0.count()
    }

    /// Inclusive `(x0, y0, x1, y1)`, or None for an empty mask.
    fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        self.0.bbox()
    }

    fn __getitem__(&self, xy: (usize, usize)) -> PyResult<bool> {
        let (x, y) = xy;
        if x >= self.0.width || y >= self.0.height {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("({x}, {y}) out of range")));
        }
        Ok(self.0.get(x, y))
    }

    fn __eq__(&self, other: &Mask) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{}, count={})", self.0.width, self.0.height, self.0.count())
    }
}

fn masks_of(list: &[Mask]) -> Vec<mvinpaint::Mask> {
    list.iter().map(|m| m.0.clone()).collect()
}

fn wrap_masks(list: Vec<mvinpaint::Mask>) -> Vec<Mask> {
    list.into_iter().map(Mask).collect()
}

#[pyfunction]
#[pyo3(signature = (mask, kernel=5, iterations=5))]
fn dilate(mask: &Mask, kernel: usize, iterations: usize) -> Mask {
    Mask(mvinpaint::segmentation::dilate(&mask.0, kernel, iterations))
}

#[pyfunction]
#[pyo3(signature = (mask, kernel=3, iterations=1))]
fn erode(mask: &Mask, kernel: usize, iterations: usize) -> Mask {
    Mask(mvinpaint::segmentation::erode(&mask.0, kernel, iterations))
}

/// Accuracy and IoU in percent.
#[pyfunction]
fn mask_metrics<'py>(py: Python<'py>, pred: &Mask, truth: &Mask) -> PyResult<Bound<'py, PyDict>> {
    let m = mvinpaint::segmentation::mask_metrics(&pred.0, &truth.0).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("iou", m.iou)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (bbox, width, height, fraction=0.1))]
fn expand_bbox(
    bbox: (usize, usize, usize, usize),
    width: usize,
    height: usize,
    fraction: f64,
) -> PyResult<(usize, usize, usize, usize)> {
    let (x0, y0, x1, y1) = bbox;
    if x0 > x1 || y0 > y1 || x1 >= width || y1 >= height || !(fraction >= 0.0) {
        return Err(PyValueError::new_err(format!("invalid bbox {bbox:?} for {width}x{height}")));
    }
    Ok(mvinpaint::inpaint::expand_bbox(bbox, width, height, fraction))
}

#[pyclass(module = "mvinpaint", frozen)]
struct Scene {
    inner: mvinpaint::Scene,
    root: Option<PathBuf>,
}

#[pymethods]
impl Scene {
    /// Loads a dataset directory holding `transforms.json`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let loaded = load_scene_dir(&path).map_err(to_py)?;
        Ok(Self {
            inner: loaded.scene,
            root: Some(loaded.root),
        })
    }

    #[getter]
    fn view_count(&self) -> usize {
        self.inner.view_count()
    }
    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }
    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }
    #[getter]
    fn root(&self) -> Option<PathBuf> {
        self.root.clone()
    }

    fn stems(&self) -> Vec<String> {
        self.inner.stems()
    }

    fn intrinsics(&self) -> Intrinsics {
        Intrinsics(self.inner.intrinsics)
    }

    fn poses(&self) -> Vec<Pose> {
        self.inner.poses.iter().copied().map(Pose).collect()
    }

    /// Pixel colors of one view as rows of `[r, g, b]` in [0, 1].
    fn image(&self, view: usize) -> PyResult<Vec<Vec<[f64; 3]>>> {
        let img = self
            .inner
            .images
            .get(view)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("view {view} out of range")))?;
        Ok(rows_rgb(img))
    }

    fn __repr__(&self) -> String {
        format!("Scene({} views, {}x{})", self.inner.view_count(), self.inner.width(), self.inner.height())
    }
}

fn rows_rgb(img: &mvinpaint::Image) -> Vec<Vec<[f64; 3]>> {
    let (w, h) = img.dims();
    (0..h).map(|y| (0..w).map(|x| img.get(x, y)).collect()).collect()
}

fn rows_scalar(m: &mvinpaint::ScalarMap) -> Vec<Vec<f64>> {
    m.data.chunks(m.width.max(1)).map(<[f64]>::to_vec).collect()
}

/// Occluder test scene with analytic object-free ground truth.
#[pyclass(module = "mvinpaint", frozen)]
struct SyntheticScene(mvinpaint::synthetic::SyntheticScene);

#[pymethods]
impl SyntheticScene {
    #[new]
    #[pyo3(signature = (width=64, height=64, n_train=16, n_test=4, with_prop=true))]
    fn new(width: u32, height: u32, n_train: usize, n_test: usize, with_prop: bool) -> PyResult<Self> {
        mvinpaint::synthetic::SyntheticScene::occluder(SyntheticConfig {
            width,
            height,
            n_train,
            n_test,
            with_prop,
        })
        .map(Self)
        .map_err(to_py)
    }

    /// Writes a dataset directory with ground-truth masks and test views.
    #[pyo3(signature = (dir, scene_id="synthetic"))]
    fn export(&self, dir: PathBuf, scene_id: &str) -> PyResult<()> {
        self.0.export(&dir, scene_id).map_err(to_py)
    }

    fn scene(&self) -> Scene {
        Scene {
            inner: self.0.scene(),
            root: None,
        }
    }

    fn object_masks(&self) -> Vec<Mask> {
        wrap_masks(self.0.object_masks())
    }

    fn intrinsics(&self) -> Intrinsics {
        Intrinsics(self.0.intrinsics)
    }

    fn train_poses(&self) -> Vec<Pose> {
        self.0.train_poses.iter().copied().map(Pose).collect()
    }

    fn test_poses(&self) -> Vec<Pose> {
        self.0.test_poses.iter().copied().map(Pose).collect()
    }
}

#[pyclass(module = "mvinpaint", frozen, from_py_object)]
#[derive(Clone)]
struct Grid(mvinpaint::RadianceGrid);

#[pymethods]
impl Grid {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        mvinpaint::RadianceGrid::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    #[getter]
    fn resolution(&self) -> [usize; 3] {
        self.0.resolution()
    }

    fn checksum(&self) -> String {
        self.0.checksum()
    }

    /// Renders `{"rgb", "depth", "opacity"}` as nested lists.
    #[pyo3(signature = (intrinsics, pose, samples=96, near=0.1, far=20.0))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        intrinsics: &Intrinsics,
        pose: &Pose,
        samples: usize,
        near: f64,
        far: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let opts = mvinpaint::RenderOptions {
            n_samples: samples,
            mode: SampleMode::Midpoint,
            near,
            far,
            ..Default::default()
        };
        let (intr, p) = (intrinsics.0, pose.0);
        let r = py.detach(|| render_view(&self.0, &intr, &p, &opts)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("rgb", rows_rgb(&r.image))?;
        d.set_item("depth", rows_scalar(&r.depth))?;
        d.set_item("opacity", rows_scalar(&r.opacity))?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Grid({:?})", self.0.resolution())
    }
}

/// Fits a reconstruction grid; returns `(grid, final_loss)`.
#[pyfunction]
#[pyo3(signature = (scene, resolution=32, iterations=1500, seed=0))]
fn fit_geometry(py: Python<'_>, scene: &Scene, resolution: usize, iterations: usize, seed: u64) -> PyResult<(Grid, f64)> {
    let cfg = GridConfig {
        resolution: [resolution; 3],
        ..GridConfig::default()
    };
    let schedule = grid_schedule(iterations, seed);
    let (grid, report) = py
        .detach(|| fit_geometry_core(&scene.inner, &cfg, &schedule, None))
        .map_err(to_py)?;
    Ok((Grid(grid), report.final_loss().unwrap_or(f64::NAN)))
}

/// Multiview masks from clicks on one view (`positive`/`negative` pixel
/// coordinates) or from per-view initial masks.
#[pyfunction]
#[pyo3(signature = (
    scene, source_view=0, positive=None, negative=None, init_masks=None,
    resolution=32, geometry_iterations=1500, iterations=800, stages=2, threshold=0.5, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn segment(
    py: Python<'_>,
    scene: &Scene,
    source_view: usize,
    positive: Option<Vec<[f64; 2]>>,
    negative: Option<Vec<[f64; 2]>>,
    init_masks: Option<Vec<Mask>>,
    resolution: usize,
    geometry_iterations: usize,
    iterations: usize,
    stages: usize,
    threshold: f64,
    seed: u64,
) -> PyResult<Vec<Mask>> {
    let annotations = positive.map(|p| AnnotationSet {
        source_view,
        positive: p,
        negative: negative.unwrap_or_default(),
    });
    let provider: Box<dyn InitProvider> = match init_masks {
        Some(m) => Box::new(FileMasksProvider { masks: masks_of(&m) }),
        None if annotations.is_some() => Box::<RegionGrowProvider>::default(),
        None => return Err(PyValueError::new_err("pass positive points or init_masks")),
    };
    let config = SegmentConfig {
        grid: GridConfig {
            resolution: [resolution; 3],
            ..GridConfig::default()
        },
        geometry_schedule: grid_schedule(geometry_iterations, seed),
        schedule: grid_schedule(iterations, seed.wrapping_add(1)),
        stages,
        threshold,
        ..SegmentConfig::default()
    };
    let out = py
        .detach(|| {
            mvinpaint::segmentation::segment(&scene.inner, annotations.as_ref(), provider.as_ref(), &config, None)
        })
        .map_err(to_py)?;
    Ok(wrap_masks(out.masks.masks))
}

/// Shrinks masks where another view sees the background; returns
/// `(masks, stats)`.
#[pyfunction]
#[pyo3(signature = (scene, grid, masks, dilate_kernel=5, dilate_iters=5, samples=48))]
fn refine<'py>(
    py: Python<'py>,
    scene: &Scene,
    grid: &Grid,
    masks: Vec<Mask>,
    dilate_kernel: usize,
    dilate_iters: usize,
    samples: usize,
) -> PyResult<(Vec<Mask>, Bound<'py, PyAny>)> {
    let dilated: Vec<_> = masks
        .iter()
        .map(|m| mvinpaint::segmentation::dilate(&m.0, dilate_kernel, dilate_iters))
        .collect();
    let opts = scene.inner.render_options(samples, SampleMode::Midpoint, 0);
    let out = py
        .detach(|| {
            let depths = render_depths(&grid.0, &scene.inner, &opts)?;
            refine_views(&scene.inner, &depths, &dilated, &RefineConfig::default())
        })
        .map_err(to_py)?;
    let stats = json_to_py(py, &out.stats)?;
    Ok((wrap_masks(out.masks), stats))
}

/// Removes the masked object with the harmonic provider; returns
/// `(grid, report)`.
#[pyfunction]
#[pyo3(signature = (
    scene, masks, original=None, resolution=64, original_iterations=1500, iterations=1500,
    lambda_lpips=0.01, lambda_depth=1.0, depth_priors=true, refine=true, dilate_kernel=5, dilate_iters=5,
    seed=0, stage_dir=None
))]
#[allow(clippy::too_many_arguments)]
fn inpaint<'py>(
    py: Python<'py>,
    scene: &Scene,
    masks: Vec<Mask>,
    original: Option<&Grid>,
    resolution: usize,
    original_iterations: usize,
    iterations: usize,
    lambda_lpips: f64,
    lambda_depth: f64,
    depth_priors: bool,
    refine: bool,
    dilate_kernel: usize,
    dilate_iters: usize,
    seed: u64,
    stage_dir: Option<PathBuf>,
) -> PyResult<(Grid, Bound<'py, PyAny>)> {
    let d = InpaintOptions::default();
    let opts = InpaintOptions {
        dilation: Dilation {
            kernel: dilate_kernel,
            iterations: dilate_iters,
        },
        grid: GridConfig {
            resolution: [resolution; 3],
            ..d.grid
        },
        original_schedule: grid_schedule(original_iterations, seed),
        schedule: grid_schedule(iterations, seed.wrapping_add(2)),
        weights: LossWeights {
            lambda_lpips,
            lambda_depth,
            ..d.weights
        },
        refine,
        depth_priors,
        ..d
    };
    let masks = masks_of(&masks);
    let provider = harmonic_provider();
    if let Some(dir) = &stage_dir {
        std::fs::create_dir_all(dir).map_err(|e| PyOSError::new_err(e.to_string()))?;
    }
    let out = py
        .detach(|| {
            inpaint_scene(
                &InpaintInputs {
                    scene: &scene.inner,
                    masks: &masks,
                    provider: &provider,
                    original: original.map(|g| &g.0),
                    extractor: None,
                    stage_dir: stage_dir.as_deref(),
                },
                &opts,
                None,
            )
        })
        .map_err(to_py)?;
    let report = json_to_py(py, &out.report)?;
    Ok((Grid(out.grid), report))
}

#[pymodule]
#[pyo3(name = "mvinpaint")]
fn mvinpaint_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Intrinsics>()?;
    m.add_class::<Pose>()?;
    m.add_class::<Mask>()?;
    m.add_class::<Scene>()?;
    m.add_class::<SyntheticScene>()?;
    m.add_class::<Grid>()?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(unproject, m)?)?;
    m.add_function(wrap_pyfunction!(dilate, m)?)?;
    m.add_function(wrap_pyfunction!(erode, m)?)?;
    m.add_function(wrap_pyfunction!(mask_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(expand_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(fit_geometry, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(inpaint, m)?)?;
    Ok(())
}
