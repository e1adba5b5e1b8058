//! Python bindings: volumes, synthetic groups, registration and metrics.
//!
//! Voxel data crosses the boundary as flat lists in x-fastest order, so
//! `numpy.asarray(v.data).reshape(v.dims, order="F")` recovers the array.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use groupreg::error::Error;
use groupreg::image::{Grid, Mask, VectorVolume};
use groupreg::io::config::{config_to_string, parse_config};
use groupreg::io::nifti::INTENT_DISPLACEMENT;
use groupreg::io::{read_volume as read_nifti, write_scalar, write_vector, Datatype, VolumeData};
use groupreg::loss::{self, Group, LossParams, Member};
use groupreg::metrics::{self, MetricsReport};
use groupreg::optimizer::{self, StageConfig};
use groupreg::synth::{self, GroupParams};
use groupreg::transform::{self, DisplacementField};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Folding(_) | Error::EmptyMask(_) | Error::Iterate { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn grid(dims: [usize; 3], spacing: [f64; 3]) -> PyResult<Grid> {
    Grid::new(dims, spacing).map_err(py_err)
}

/// Scalar volume on a regular grid.
#[pyclass(module = "groupreg_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Volume {
    inner: groupreg::image::Volume,
}

#[pymethods]
impl Volume {
    #[new]
    #[pyo3(signature = (dims, data, spacing=[1.0, 1.0, 1.0]))]
    fn new(dims: [usize; 3], data: Vec<f64>, spacing: [f64; 3]) -> PyResult<Self> {
        let inner = groupreg::image::Volume::new(grid(dims, spacing)?, data).map_err(py_err)?;
        Ok(Volume { inner })
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.grid().dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.grid().spacing()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f64> {
        let d = self.inner.grid().dims();
        if x >= d[0] || y >= d[1] || z >= d[2] {
            return Err(PyValueError::new_err(format!("voxel ({x}, {y}, {z}) outside {d:?}")));
        }
        Ok(self.inner.get(x, y, z))
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.dims(), self.spacing())
    }
}

impl Volume {
    fn mask(&self) -> PyResult<Mask> {
        Mask::from_volume(&self.inner).map_err(py_err)
    }
}

/// Three-component field in mm, used for velocities and displacements.
#[pyclass(module = "groupreg_py", skip_from_py_object)]
#[derive(Clone)]
pub struct VectorField {
    inner: VectorVolume,
}

#[pymethods]
impl VectorField {
    #[new]
    #[pyo3(signature = (dims, data, spacing=[1.0, 1.0, 1.0]))]
    fn new(dims: [usize; 3], data: Vec<[f64; 3]>, spacing: [f64; 3]) -> PyResult<Self> {
        let inner = VectorVolume::new(grid(dims, spacing)?, data).map_err(py_err)?;
        Ok(VectorField { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (dims, spacing=[1.0, 1.0, 1.0]))]
    fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> PyResult<Self> {
        Ok(VectorField {
            inner: VectorVolume::zeros(grid(dims, spacing)?),
        })
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.grid().dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.grid().spacing()
    }

    #[getter]
    fn data(&self) -> Vec<[f64; 3]> {
        self.inner.data().to_vec()
    }

    fn max_norm(&self) -> f64 {
        self.inner.max_norm()
    }

    fn scaled(&self, factor: f64) -> VectorField {
        VectorField {
            inner: self.inner.scaled(factor),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("VectorField(dims={:?}, spacing={:?})", self.dims(), self.spacing())
    }
}

impl VectorField {
    fn displacement(&self) -> DisplacementField {
        DisplacementField::new(self.inner.clone())
    }
}

fn volume(inner: groupreg::image::Volume) -> Volume {
    Volume { inner }
}

fn field(inner: VectorVolume) -> VectorField {
    VectorField { inner }
}

/// Synthetic head phantom with tissue labels.
#[pyclass(module = "groupreg_py")]
pub struct Phantom {
    inner: synth::Phantom,
}

#[pymethods]
impl Phantom {
    #[getter]
    fn image(&self) -> Volume {
        volume(self.inner.image.clone())
    }

    #[getter]
    fn clean(&self) -> Volume {
        volume(self.inner.clean.clone())
    }

    #[getter]
    fn labels(&self) -> Volume {
        volume(self.inner.labels.clone())
    }

    #[getter]
    fn head(&self) -> Volume {
        volume(self.inner.head.to_volume())
    }
}

/// Members generated from a phantom with known centred velocities.
#[pyclass(module = "groupreg_py")]
pub struct SyntheticGroup {
    inner: synth::SyntheticGroup,
}

#[pymethods]
impl SyntheticGroup {
    #[getter]
    fn images(&self) -> Vec<Volume> {
        self.inner.group.members().iter().map(|m| volume(m.image.clone())).collect()
    }

    #[getter]
    fn masks(&self) -> Vec<Volume> {
        self.inner.group.members().iter().map(|m| volume(m.mask.to_volume())).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<Volume> {
        self.inner.group.members().iter().filter_map(|m| m.labels.clone()).map(volume).collect()
    }

    #[getter]
    fn true_velocities(&self) -> Vec<VectorField> {
        self.inner.true_velocities.iter().cloned().map(field).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.group.len()
    }
}

/// Registration settings. `stages` is a list of
/// `(downsample_levels, max_iterations, step_size)` tuples.
#[pyclass(module = "groupreg_py", skip_from_py_object)]
#[derive(Clone)]
pub struct RegistrationConfig {
    inner: optimizer::RegistrationConfig,
}

#[pymethods]
impl RegistrationConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut config = RegistrationConfig {
            inner: optimizer::RegistrationConfig::default(),
        };
        if let Some(kwargs) = kwargs {
            for (key, value) in kwargs.iter() {
                let key: String = key.extract()?;
                match key.as_str() {
                    "regularization" => config.inner.lambda = value.extract()?,
                    "window_radius" => config.inner.window_radius = value.extract()?,
                    "squaring_steps" => config.inner.squaring_steps = value.extract()?,
                    "stages" => config.set_stages(value.extract()?),
                    "convergence_tol" => config.inner.convergence_tol = value.extract()?,
                    "seed" => config.inner.seed = value.extract()?,
                    _ => return Err(PyValueError::new_err(format!("unknown setting `{key}`"))),
                }
            }
        }
        config.inner.validate().map_err(py_err)?;
        Ok(config)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = parse_config(text, std::path::Path::new("<string>")).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(RegistrationConfig { inner })
    }

    fn to_toml(&self) -> String {
        config_to_string(&self.inner)
    }

    #[getter]
    fn regularization(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn window_radius(&self) -> usize {
        self.inner.window_radius
    }

    #[getter]
    fn squaring_steps(&self) -> usize {
        self.inner.squaring_steps
    }

    #[getter]
    fn stages(&self) -> Vec<(usize, usize, f64)> {
        self.inner
            .stages
            .iter()
            .map(|s| (s.downsample_levels, s.max_iterations, s.step_size))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "RegistrationConfig(regularization={}, window_radius={}, stages={:?})",
            self.inner.lambda,
            self.inner.window_radius,
            self.stages()
        )
    }
}

impl RegistrationConfig {
    fn set_stages(&mut self, stages: Vec<(usize, usize, f64)>) {
        self.inner.stages = stages
            .into_iter()
            .map(|(downsample_levels, max_iterations, step_size)| StageConfig {
                downsample_levels,
                max_iterations,
                step_size,
            })
            .collect();
    }
}

#[pyclass(module = "groupreg_py")]
pub struct RegistrationResult {
    inner: optimizer::RegistrationResult,
}

#[pymethods]
impl RegistrationResult {
    #[getter]
    fn velocities(&self) -> Vec<VectorField> {
        self.inner.velocities.iter().cloned().map(field).collect()
    }

    #[getter]
    fn displacements(&self) -> Vec<VectorField> {
        self.inner.displacements.iter().map(|u| field(u.field().clone())).collect()
    }

    /// Loss trace of each stage.
    #[getter]
    fn losses(&self) -> Vec<Vec<f64>> {
        self.inner.stages.iter().map(|s| s.losses.clone()).collect()
    }

    #[getter]
    fn wall_time(&self) -> f64 {
        self.inner.wall_time.as_secs_f64()
    }
}

fn build_group(images: &[PyRef<'_, Volume>], masks: &[PyRef<'_, Volume>], labels: Option<&[PyRef<'_, Volume>]>) -> PyResult<Group> {
    if images.len() != masks.len() || labels.is_some_and(|l| l.len() != images.len()) {
        return Err(PyValueError::new_err("images, masks and labels need the same length"));
    }
    let members = images
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (image, mask))| {
            Ok(Member {
                image: image.inner.clone(),
                mask: mask.mask()?,
                labels: labels.map(|l| l[i].inner.clone()),
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    Group::new(members).map_err(py_err)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("group_id", &r.group_id)?;
    d.set_item("n_members", r.n_members)?;
    d.set_item("dice_csf", r.dice_csf)?;
    d.set_item("dice_gm", r.dice_gm)?;
    d.set_item("dice_wm", r.dice_wm)?;
    d.set_item("dice_tumor", r.dice_tumor)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("centrality", r.centrality)?;
    d.set_item("centrality_displacement", r.centrality_displacement)?;
    d.set_item("folding_percent", r.folding_percent)?;
    d.set_item("jacobian_sd", r.jacobian_sd)?;
    d.set_item("masked_voxels", r.masked_voxels)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (dims, spacing=[1.0, 1.0, 1.0], seed=0))]
fn make_phantom(dims: [usize; 3], spacing: [f64; 3], seed: u64) -> PyResult<Phantom> {
    let inner = synth::make_phantom(dims, spacing, seed).map_err(py_err)?;
    Ok(Phantom { inner })
}

#[pyfunction]
#[pyo3(signature = (phantom, n=3, amplitude_mm=3.0, smoothness_sigma_mm=8.0, tumor_growth_mm=0.0, intensity_shift=0.0, seed=0))]
fn make_group(
    phantom: &Phantom,
    n: usize,
    amplitude_mm: f64,
    smoothness_sigma_mm: f64,
    tumor_growth_mm: f64,
    intensity_shift: f64,
    seed: u64,
) -> PyResult<SyntheticGroup> {
    let params = GroupParams {
        n,
        amplitude_mm,
        smoothness_sigma_mm,
        tumor_growth_mm,
        intensity_shift,
    };
    let inner = synth::make_group(&phantom.inner, &params, seed).map_err(py_err)?;
    Ok(SyntheticGroup { inner })
}

/// Registers the images to their implicit mean space. Masks are volumes
/// holding 0 and 1.
#[pyfunction]
#[pyo3(signature = (images, masks, config=None))]
fn register(
    py: Python<'_>,
    images: Vec<PyRef<'_, Volume>>,
    masks: Vec<PyRef<'_, Volume>>,
    config: Option<&RegistrationConfig>,
) -> PyResult<RegistrationResult> {
    let group = build_group(&images, &masks, None)?;
    let config = config.map(|c| c.inner.clone()).unwrap_or_default();
    let inner = py.detach(|| optimizer::register_multistage(&group, &config)).map_err(py_err)?;
    Ok(RegistrationResult { inner })
}

/// Metrics of a registration result as a dict; Dice entries need labels.
#[pyfunction]
#[pyo3(signature = (result, images, masks, labels=None, group_id="group"))]
fn evaluate<'py>(
    py: Python<'py>,
    result: &RegistrationResult,
    images: Vec<PyRef<'py, Volume>>,
    masks: Vec<PyRef<'py, Volume>>,
    labels: Option<Vec<PyRef<'py, Volume>>>,
    group_id: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let group = build_group(&images, &masks, labels.as_deref())?;
    let report = metrics::evaluate_registration(group_id, &group, &result.inner).map_err(py_err)?;
    report_dict(py, &report)
}

#[pyfunction]
#[pyo3(signature = (images, masks, velocities, regularization=0.2, window_radius=4, squaring_steps=7))]
fn total_loss(
    images: Vec<PyRef<'_, Volume>>,
    masks: Vec<PyRef<'_, Volume>>,
    velocities: Vec<PyRef<'_, VectorField>>,
    regularization: f64,
    window_radius: usize,
    squaring_steps: usize,
) -> PyResult<f64> {
    let group = build_group(&images, &masks, None)?;
    let v: Vec<VectorVolume> = velocities.iter().map(|f| f.inner.clone()).collect();
    let params = LossParams {
        lambda: regularization,
        window_radius,
        squaring_steps,
    };
    Ok(loss::total_loss(&group, &v, &params).map_err(py_err)?.total)
}

#[pyfunction]
#[pyo3(signature = (velocity, squaring_steps=7))]
fn exponentiate(velocity: &VectorField, squaring_steps: usize) -> PyResult<VectorField> {
    let u = transform::exponentiate(&velocity.inner, squaring_steps).map_err(py_err)?;
    Ok(field(u.into_inner()))
}

/// Displacement of `outer ∘ inner`.
#[pyfunction]
fn compose(outer: &VectorField, inner: &VectorField) -> PyResult<VectorField> {
    let u = transform::compose(&outer.displacement(), &inner.displacement()).map_err(py_err)?;
    Ok(field(u.into_inner()))
}

/// Resamples `image` at `x + u(x)` with trilinear interpolation.
#[pyfunction]
fn warp(image: &Volume, displacement: &VectorField) -> PyResult<Volume> {
    transform::warp(&image.inner, &displacement.displacement()).map(volume).map_err(py_err)
}

#[pyfunction]
fn jacobian_determinant(displacement: &VectorField) -> PyResult<Volume> {
    let j = transform::jacobian_determinant(&displacement.displacement()).map_err(py_err)?;
    Ok(volume(j.volume().clone()))
}

#[pyfunction]
#[pyo3(signature = (a, b, mask, window_radius=4))]
fn lncc(a: &Volume, b: &Volume, mask: &Volume, window_radius: usize) -> PyResult<f64> {
    loss::lncc(&a.inner, &b.inner, &mask.mask()?, window_radius).map_err(py_err)
}

#[pyfunction]
fn ssim(a: &Volume, b: &Volume, mask: &Volume) -> PyResult<f64> {
    metrics::ssim_masked(&a.inner, &b.inner, &mask.mask()?).map_err(py_err)
}

/// Mean pairwise Dice of one class over a list of label maps.
#[pyfunction]
#[pyo3(signature = (labels, class_id, mask=None))]
fn group_dice(labels: Vec<PyRef<'_, Volume>>, class_id: u32, mask: Option<&Volume>) -> PyResult<f64> {
    let maps: Vec<groupreg::image::Volume> = labels.iter().map(|l| l.inner.clone()).collect();
    let mask = mask.map(Volume::mask).transpose()?;
    metrics::group_dice_masked(&maps, class_id, mask.as_ref()).map_err(py_err)
}

/// Exact two-sided signed-rank test; returns `(statistic, p_value)`.
#[pyfunction]
fn wilcoxon(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = metrics::wilcoxon_signed_rank(&x, &y).map_err(py_err)?;
    Ok((r.statistic, r.p_value))
}

/// Reads a NIfTI-1 file as a `Volume` or, for vector data, a `VectorField`.
#[pyfunction]
fn read_volume(py: Python<'_>, path: std::path::PathBuf) -> PyResult<Py<PyAny>> {
    let vol = read_nifti(&path).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(match vol.data {
        VolumeData::Scalar(v) => Py::new(py, volume(v))?.into_any(),
        VolumeData::Vector(v) => Py::new(py, field(v))?.into_any(),
    })
}

/// Writes float64 NIfTI-1; `.nii.gz` paths are compressed.
#[pyfunction]
fn write_volume(path: std::path::PathBuf, data: &Bound<'_, PyAny>) -> PyResult<()> {
    let result = if let Ok(v) = data.cast::<Volume>() {
        write_scalar(&path, &v.borrow().inner, Datatype::Float64)
    } else if let Ok(f) = data.cast::<VectorField>() {
        write_vector(&path, &f.borrow().inner, Datatype::Float64, INTENT_DISPLACEMENT)
    } else {
        return Err(PyValueError::new_err("expected a Volume or VectorField"));
    };
    result.map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
pub fn groupreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<VectorField>()?;
    m.add_class::<Phantom>()?;
    m.add_class::<SyntheticGroup>()?;
    m.add_class::<RegistrationConfig>()?;
    m.add_class::<RegistrationResult>()?;
    m.add_function(wrap_pyfunction!(make_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(make_group, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(exponentiate, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(jacobian_determinant, m)?)?;
    m.add_function(wrap_pyfunction!(lncc, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(group_dice, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add("CLASS_CSF", metrics::CLASS_CSF)?;
    m.add("CLASS_GM", metrics::CLASS_GM)?;
    m.add("CLASS_WM", metrics::CLASS_WM)?;
    m.add("CLASS_TUMOR", metrics::CLASS_TUMOR)?;
    Ok(())
}
