//! Python bindings: boxes and IoU, scene generation, the refinement network,
//! evaluation and the frame sampler.

use std::path::PathBuf;

use boxadapt::detector::{detect_frames, AnchorSpec, BoxWithUncertainty, Checkpoint, RefineNetParams, RoiSettings};
use boxadapt::eval::{evaluate_detections, EvalOptions, Interpolation};
use boxadapt::geometry::{box_to_corners, corners_to_box, iou_3d, iou_bev, CornerSet, OrientedBox3D};
use boxadapt::meanteacher::{select_frames as select, Curriculum, FrameSamplingState};
use boxadapt::synthdata::{generate_frame, DomainConfig, ProposalParams, SceneFrame};
use boxadapt::training::eval_proposals;
use boxadapt::uncertainty::AuEncoding;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: boxadapt::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn interpolation(points: usize) -> PyResult<Interpolation> {
    match points {
        40 => Ok(Interpolation::Points40),
        11 => Ok(Interpolation::Points11),
        n => Err(PyValueError::new_err(format!("recall points must be 40 or 11, got {n}"))),
    }
}

/// Oriented 3D box: center, length along heading, width, height, yaw.
#[pyclass(name = "Box", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyBox(OrientedBox3D);

#[pymethods]
impl PyBox {
    #[new]
    #[pyo3(signature = (cx, cy, cz, l, w, h, yaw=0.0))]
    fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> PyResult<Self> {
        OrientedBox3D::new([cx, cy, cz], l, w, h, yaw).map(Self).map_err(py_err)
    }

    /// Rebuilds a box from its 8 corners.
    #[staticmethod]
    fn from_corners(corners: Vec<[f64; 3]>) -> PyResult<Self> {
        let set: [[f64; 3]; 8] = corners
            .try_into()
            .map_err(|c: Vec<[f64; 3]>| PyValueError::new_err(format!("expected 8 corners, got {}", c.len())))?;
        corners_to_box(&CornerSet { corners: set }).map(Self).map_err(py_err)
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        [self.0.cx, self.0.cy, self.0.cz]
    }

    #[getter]
    fn dims(&self) -> [f64; 3] {
        [self.0.l, self.0.w, self.0.h]
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.0.yaw
    }

    fn corners(&self) -> Vec<[f64; 3]> {
        box_to_corners(&self.0).corners.to_vec()
    }

    fn iou_bev(&self, other: &PyBox) -> f64 {
        iou_bev(&self.0, &other.0)
    }

    fn iou_3d(&self, other: &PyBox) -> f64 {
        iou_3d(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        let b = &self.0;
        format!("Box(cx={}, cy={}, cz={}, l={}, w={}, h={}, yaw={})", b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)
    }
}

/// One LiDAR frame with its labeled boxes.
#[pyclass(name = "Frame", frozen)]
struct PyFrame(SceneFrame);

#[pymethods]
impl PyFrame {
    /// Draws a frame from the default "sim" or "real" domain.
    #[staticmethod]
    fn generate(domain: &str, seed: u64) -> PyResult<Self> {
        let config = match domain {
            "sim" => DomainConfig::default_sim(),
            "real" => DomainConfig::default_real(),
            other => return Err(PyValueError::new_err(format!("unknown domain {other:?}"))),
        };
        generate_frame(&config, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("frames serialize")
    }

    #[getter]
    fn frame_id(&self) -> &str {
        &self.0.frame_id
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        self.0.points.clone()
    }

    #[getter]
    fn boxes(&self) -> Vec<PyBox> {
        self.0.boxes.iter().map(|g| PyBox(g.bbox)).collect()
    }

    #[getter]
    fn difficulties(&self) -> Vec<&'static str> {
        self.0.boxes.iter().map(|g| g.difficulty.as_str()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.points.len()
    }
}

/// A refined box with its confidence and aleatoric uncertainty.
#[pyclass(name = "Detection", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDetection(BoxWithUncertainty);

#[pymethods]
impl PyDetection {
    #[getter(r#box)]
    fn bbox(&self) -> PyBox {
        PyBox(self.0.bbox)
    }

    #[getter]
    fn confidence(&self) -> f64 {
        self.0.confidence
    }

    #[getter]
    fn au(&self) -> f64 {
        self.0.au
    }

    fn __repr__(&self) -> String {
        format!("Detection(confidence={:.4}, au={:.4})", self.0.confidence, self.0.au)
    }
}

/// Second-stage refinement network with default RoI settings.
#[pyclass(name = "Detector")]
struct PyDetector {
    params: RefineNetParams,
    anchor: AnchorSpec,
}

#[pymethods]
impl PyDetector {
    /// Fresh weights; `encoding` is "corner" or "box".
    #[new]
    #[pyo3(signature = (encoding="corner", seed=0))]
    fn new(encoding: &str, seed: u64) -> PyResult<Self> {
        let encoding = match encoding {
            "corner" => AuEncoding::Corner,
            "box" => AuEncoding::Box,
            other => return Err(PyValueError::new_err(format!("unknown encoding {other:?}"))),
        };
        Ok(Self { params: RefineNetParams::init(encoding, seed), anchor: AnchorSpec::default() })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { params: ck.params().map_err(py_err)?, anchor: ck.anchor })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(&self.params, self.anchor, None).save(&path).map_err(py_err)
    }

    #[getter]
    fn encoding(&self) -> &'static str {
        match self.params.encoding() {
            AuEncoding::Corner => "corner",
            AuEncoding::Box => "box",
        }
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Moves these weights toward `student` by `1 - beta`.
    fn ema_toward(&mut self, student: PyRef<'_, PyDetector>, beta: f64) -> PyResult<()> {
        boxadapt::meanteacher::ema_update(&mut self.params, &student.params, beta).map_err(py_err)
    }

    /// Refines simulated proposals around the frame's objects.
    #[pyo3(signature = (frame, seed=0))]
    fn detect(&self, frame: PyRef<'_, PyFrame>, seed: u64) -> PyResult<Vec<PyDetection>> {
        let roi = RoiSettings { anchor: self.anchor, ..RoiSettings::default() };
        let frames = std::slice::from_ref(&frame.0);
        let proposals = eval_proposals(frames, &ProposalParams::default(), &roi, seed);
        let mut dets = detect_frames(&self.params, frames, &proposals, &roi, seed).map_err(py_err)?;
        Ok(dets.pop().unwrap_or_default().into_iter().map(PyDetection).collect())
    }
}

/// AP report over frames and per-frame detections, as a dict.
#[pyfunction]
#[pyo3(signature = (frames, detections, iou_threshold=0.7, recall_points=40))]
fn evaluate<'py>(
    py: Python<'py>,
    frames: Vec<PyRef<'py, PyFrame>>,
    detections: Vec<Vec<PyRef<'py, PyDetection>>>,
    iou_threshold: f64,
    recall_points: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let frames: Vec<SceneFrame> = frames.iter().map(|f| f.0.clone()).collect();
    let dets: Vec<Vec<BoxWithUncertainty>> =
        detections.iter().map(|ds| ds.iter().map(|d| d.0.clone()).collect()).collect();
    let options = EvalOptions { iou_threshold, interpolation: interpolation(recall_points)? };
    let report = evaluate_detections(&frames, &dets, "python", 0, &options).map_err(py_err)?;
    let text = serde_json::to_string(&report).expect("reports serialize");
    py.import("json")?.call_method1("loads", (text,))
}

/// Rank-ordered selection of the `fraction` least uncertain frames.
#[pyfunction]
fn select_frames(frame_uncertainty: std::collections::BTreeMap<String, f64>, fraction: f64) -> PyResult<Vec<String>> {
    let mut state = FrameSamplingState::new(frame_uncertainty.keys().cloned(), Curriculum::default()).map_err(py_err)?;
    state.u_frame = frame_uncertainty;
    state.set_fraction(fraction);
    select(&state).map_err(py_err)
}

#[pyfunction]
fn normalize_angle(angle: f64) -> f64 {
    boxadapt::geometry::normalize_angle(angle)
}

#[pyfunction]
fn wrap_parallel(angle: f64) -> f64 {
    boxadapt::geometry::wrap_parallel(angle)
}

/// Spearman rank correlation; NaN when either input is constant.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    let r = boxadapt::eval::spearman(&x, &y).map_err(py_err)?;
    Ok(if r.degenerate { f64::NAN } else { r.rho })
}

#[pymodule]
fn boxadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(select_frames, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_angle, m)?)?;
    m.add_function(wrap_pyfunction!(wrap_parallel, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    Ok(())
}
