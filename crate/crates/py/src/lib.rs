//! Python bindings: rasters, edge operations, metrics, dataset manifests and
//! inference with saved checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;

use polypconnect::inpaint::{inpaint_polyp as paint, InpaintCheckpoint};
use polypconnect::mask_gan::{filter_masks as filter, DEFAULT_MAX_FILL, DEFAULT_MIN_FILL};
use polypconnect::metrics::{self, ReaderResponse, ReaderScore, Truth, DEFAULT_SURVEY_THRESHOLD};
use polypconnect::seg::{SegCheckpoint, SegModel};
use polypconnect::{BinaryMask, DatasetManifest, EdgeMap, Error, Layout, RasterImage};

create_exception!(polypconnect_py, PolypError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PolypError::new_err(format!("{}: {e}", e.category())),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for polypconnect::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// RGB image, row-major, channel values in [0, 1].
#[pyclass(name = "RasterImage", frozen)]
struct PyRasterImage(RasterImage);

#[pymethods]
impl PyRasterImage {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        RasterImage::new(width, height, data).py_err().map(Self)
    }

    #[staticmethod]
    #[pyo3(signature = (path, size=None))]
    fn load(path: PathBuf, size: Option<(usize, usize)>) -> PyResult<Self> {
        RasterImage::load(&path, size).py_err().map(Self)
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_png(&path).py_err()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn resize(&self, width: usize, height: usize) -> Self {
        Self(self.0.resize(width, height))
    }

    fn __repr__(&self) -> String {
        format!("RasterImage({}x{})", self.0.width(), self.0.height())
    }
}

macro_rules! binary_field {
    ($py:ident, $name:literal, $inner:ty $(, $extra:item)*) => {
        #[pyclass(name = $name, frozen)]
        struct $py($inner);

        #[pymethods]
        impl $py {
            #[new]
            fn new(width: usize, height: usize, data: Vec<u8>) -> PyResult<Self> {
                <$inner>::new(width, height, data).py_err().map(Self)
            }

            #[staticmethod]
            #[pyo3(signature = (path, size=None))]
            fn load(path: PathBuf, size: Option<(usize, usize)>) -> PyResult<Self> {
                <$inner>::load(&path, size).py_err().map(Self)
            }

            fn save_png(&self, path: PathBuf) -> PyResult<()> {
                self.0.save_png(&path).py_err()
            }

            #[getter]
            fn width(&self) -> usize {
                self.0.width()
            }

            #[getter]
            fn height(&self) -> usize {
                self.0.height()
            }

            fn data(&self) -> Vec<u8> {
                self.0.data().to_vec()
            }

            fn count(&self) -> usize {
                self.0.count()
            }

            fn __repr__(&self) -> String {
                format!("{}({}x{}, {} set)", $name, self.0.width(), self.0.height(), self.0.count())
            }

            $($extra)*
        }
    };
}

binary_field!(PyBinaryMask, "BinaryMask", BinaryMask, fn fill_ratio(&self) -> f64 {
    self.0.fill_ratio()
});
binary_field!(PyEdgeMap, "EdgeMap", EdgeMap);

/// Ordered dataset records, read from or written to a manifest TSV.
#[pyclass(name = "DatasetManifest", frozen)]
struct PyManifest(DatasetManifest);

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        DatasetManifest::read(&path).py_err().map(Self)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write(&path).py_err()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn train(&self) -> Self {
        Self(self.0.train())
    }

    fn val(&self) -> Self {
        Self(self.0.val())
    }

    fn image_paths(&self) -> Vec<PathBuf> {
        self.0.records.iter().map(|r| r.image_path.clone()).collect()
    }
}

#[pyclass(name = "InpaintCheckpoint", frozen)]
struct PyInpaintCheckpoint(InpaintCheckpoint);

#[pymethods]
impl PyInpaintCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        InpaintCheckpoint::load(&path).py_err().map(Self)
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.0.resolution()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.0.iteration
    }
}

#[pyclass(name = "SegModel", frozen)]
struct PySegModel(SegModel, f64);

#[pymethods]
impl PySegModel {
    /// Loads a U-Net checkpoint; `threshold` defaults to the trained one.
    #[staticmethod]
    #[pyo3(signature = (path, threshold=None))]
    fn load(path: PathBuf, threshold: Option<f64>) -> PyResult<Self> {
        let ckpt = SegCheckpoint::load(&path).py_err()?;
        let t = threshold.unwrap_or(ckpt.config.threshold);
        Ok(Self(SegModel::new(&ckpt).py_err()?, t))
    }

    fn predict(&self, image: &PyRasterImage) -> PyResult<PyBinaryMask> {
        let mut masks = self.0.predict(&[&image.0], self.1).py_err()?;
        Ok(PyBinaryMask(masks.remove(0)))
    }
}

#[pyfunction]
#[pyo3(signature = (image, sigma=2.0))]
fn extract_edges(image: &PyRasterImage, sigma: f64) -> PyResult<PyEdgeMap> {
    polypconnect::extract_edges(&image.0, sigma).py_err().map(PyEdgeMap)
}

#[pyfunction]
#[pyo3(signature = (image, mask, sigma=2.0))]
fn extract_polyp_edges(image: &PyRasterImage, mask: &PyBinaryMask, sigma: f64) -> PyResult<PyEdgeMap> {
    polypconnect::extract_polyp_edges(&image.0, &mask.0, sigma)
        .py_err()
        .map(PyEdgeMap)
}

#[pyfunction]
fn merge_edges(clean: &PyEdgeMap, polyp: &PyEdgeMap, mask: &PyBinaryMask) -> PyResult<PyEdgeMap> {
    polypconnect::merge_edges(&clean.0, &polyp.0, &mask.0).py_err().map(PyEdgeMap)
}

#[pyfunction]
fn ssim(a: &PyRasterImage, b: &PyRasterImage) -> PyResult<f64> {
    metrics::ssim(&a.0, &b.0).py_err()
}

#[pyfunction]
fn psnr(a: &PyRasterImage, b: &PyRasterImage) -> PyResult<f64> {
    metrics::psnr(&a.0, &b.0).py_err()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(to_py(Error::Shape("feature rows differ in length".into())));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten()))
}

/// Frechet distance between two feature sets given as lists of rows.
#[pyfunction]
fn fid(features_a: Vec<Vec<f64>>, features_b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fid(&matrix(features_a)?, &matrix(features_b)?).py_err()
}

#[pyfunction]
fn iou_suite(preds: Vec<PyRef<'_, PyBinaryMask>>, gts: Vec<PyRef<'_, PyBinaryMask>>) -> PyResult<BTreeMap<&'static str, f64>> {
    let preds: Vec<BinaryMask> = preds.iter().map(|m| m.0.clone()).collect();
    let gts: Vec<BinaryMask> = gts.iter().map(|m| m.0.clone()).collect();
    let m = metrics::iou_suite(&preds, &gts).py_err()?;
    Ok(BTreeMap::from([
        ("image_iou", m.image_iou),
        ("dataset_iou", m.dataset_iou),
        ("dice", m.dice),
        ("precision", m.precision),
        ("recall", m.recall),
    ]))
}

fn score_dict(s: &ReaderScore) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("tp", f64::from(s.tp)),
        ("fn", f64::from(s.fn_)),
        ("fp", f64::from(s.fp)),
        ("tn", f64::from(s.tn)),
        ("accuracy", s.accuracy),
        ("recall", s.recall),
        ("precision", s.precision),
    ])
}

/// `responses` are `(image_id, confidence, "real" | "generated")` tuples.
#[pyfunction]
#[pyo3(signature = (responses, threshold=DEFAULT_SURVEY_THRESHOLD))]
fn score_survey(responses: Vec<(String, u8, String)>, threshold: u8) -> PyResult<BTreeMap<&'static str, f64>> {
    let responses = responses
        .into_iter()
        .map(|(image_id, confidence, truth)| {
            Ok(ReaderResponse {
                image_id,
                confidence,
                truth: truth.parse::<Truth>().py_err()?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(score_dict(&metrics::score_survey(&responses, threshold).py_err()?))
}

/// Mean rates of reader scores given as `(tp, fn, fp, tn)` counts.
#[pyfunction]
fn survey_mean(counts: Vec<(u32, u32, u32, u32)>) -> PyResult<BTreeMap<&'static str, f64>> {
    let scores: Vec<ReaderScore> = counts
        .into_iter()
        .map(|(tp, fn_, fp, tn)| ReaderScore::from_counts(tp, fn_, fp, tn))
        .collect();
    let m = metrics::survey_mean(&scores).py_err()?;
    Ok(BTreeMap::from([
        ("accuracy", m.accuracy),
        ("recall", m.recall),
        ("precision", m.precision),
    ]))
}

#[pyfunction]
#[pyo3(signature = (masks, min_fill=DEFAULT_MIN_FILL, max_fill=DEFAULT_MAX_FILL))]
fn filter_masks(masks: Vec<PyRef<'_, PyBinaryMask>>, min_fill: f64, max_fill: f64) -> PyResult<Vec<PyBinaryMask>> {
    let masks: Vec<BinaryMask> = masks.iter().map(|m| m.0.clone()).collect();
    Ok(filter(&masks, min_fill, max_fill).py_err()?.into_iter().map(PyBinaryMask).collect())
}

/// `layout` is "labeled" (images/ + masks/) or "unlabeled".
#[pyfunction]
fn load_dataset(root: PathBuf, layout: &str) -> PyResult<PyManifest> {
    let layout = match layout {
        "labeled" => Layout::Labeled,
        "unlabeled" => Layout::Unlabeled,
        other => return Err(to_py(Error::InvalidArgument(format!("unknown layout {other:?}")))),
    };
    polypconnect::load_dataset(&root, layout).py_err().map(PyManifest)
}

#[pyfunction]
#[pyo3(signature = (manifest, val_count=200, seed=0))]
fn split_dataset(manifest: &PyManifest, val_count: usize, seed: u64) -> PyResult<PyManifest> {
    polypconnect::split_dataset(&manifest.0, val_count, seed)
        .py_err()
        .map(PyManifest)
}

#[pyfunction]
fn inpaint_polyp(
    ckpt: &PyInpaintCheckpoint,
    image: &PyRasterImage,
    edges: &PyEdgeMap,
    mask: &PyBinaryMask,
) -> PyResult<PyRasterImage> {
    paint(&ckpt.0, &image.0, &edges.0, &mask.0).py_err().map(PyRasterImage)
}

#[pymodule]
fn polypconnect_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PolypError", m.py().get_type::<PolypError>())?;
    m.add_class::<PyRasterImage>()?;
    m.add_class::<PyBinaryMask>()?;
    m.add_class::<PyEdgeMap>()?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyInpaintCheckpoint>()?;
    m.add_class::<PySegModel>()?;
    m.add_function(wrap_pyfunction!(extract_edges, m)?)?;
    m.add_function(wrap_pyfunction!(extract_polyp_edges, m)?)?;
    m.add_function(wrap_pyfunction!(merge_edges, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(iou_suite, m)?)?;
    m.add_function(wrap_pyfunction!(score_survey, m)?)?;
    m.add_function(wrap_pyfunction!(survey_mean, m)?)?;
    m.add_function(wrap_pyfunction!(filter_masks, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(split_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(inpaint_polyp, m)?)?;
    Ok(())
}
