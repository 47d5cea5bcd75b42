//! Python bindings: phantoms, the segmenter and pair classifier, the probe
//! metrics and the command-line entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use clap::Parser;
use xaiseg::attribution::FocusField;
use xaiseg::fields::{Field2D, Mask2D, MaskStack};
use xaiseg::{cli, model, pairnet, phantom, probe, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_shape<T>(rows: &[Vec<T>]) -> PyResult<(usize, usize)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok((h, w))
}

fn field(rows: Vec<Vec<f32>>) -> PyResult<Field2D> {
    let (h, w) = rows_shape(&rows)?;
    Field2D::new(h, w, rows.concat()).map_err(py_err)
}

/// Any non-zero entry is foreground.
fn mask(rows: Vec<Vec<i64>>) -> PyResult<Mask2D> {
    let (h, w) = rows_shape(&rows)?;
    Mask2D::new(h, w, rows.concat().iter().map(|&v| (v != 0) as u8).collect()).map_err(py_err)
}

fn field_rows(f: &Field2D) -> Vec<Vec<f32>> {
    f.data().chunks(f.width()).map(<[f32]>::to_vec).collect()
}

fn mask_rows(m: &Mask2D) -> Vec<Vec<u8>> {
    m.data().chunks(m.width()).map(<[u8]>::to_vec).collect()
}

/// One phantom volume as nested lists: `images`, `wall` and `lumen`, each
/// indexed `[slice][row][col]`. `radius` overrides the outer radius range.
#[pyfunction]
#[pyo3(signature = (tier = "general", seed = 0, height = 64, width = 64, depth = 8, radius = None))]
fn generate_phantom<'py>(
    py: Python<'py>,
    tier: &str,
    seed: u64,
    height: usize,
    width: usize,
    depth: usize,
    radius: Option<(f64, f64)>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = match tier.parse::<phantom::Tier>().map_err(py_err)? {
        phantom::Tier::Easy => phantom::PhantomSpec::easy(height, width, depth, seed),
        phantom::Tier::Complex => phantom::PhantomSpec::complex(height, width, depth, seed),
    };
    if let Some(r) = radius {
        spec.radius = r;
    }
    let v = phantom::generate(&spec).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("images", v.images.slices().iter().map(field_rows).collect::<Vec<_>>())?;
    d.set_item("wall", v.wall_masks.slices().iter().map(mask_rows).collect::<Vec<_>>())?;
    d.set_item("lumen", v.lumen_masks.slices().iter().map(mask_rows).collect::<Vec<_>>())?;
    Ok(d)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: model::ModelParams,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized segmenter.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> Self {
        Self {
            inner: model::ModelParams::init(seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::ModelParams::read(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.count()
    }

    /// Probabilities, confidence map, attribution field and box for one image.
    #[pyo3(signature = (image, kappa = 1.0))]
    fn infer<'py>(&self, py: Python<'py>, image: Vec<Vec<f32>>, kappa: f64) -> PyResult<Bound<'py, PyDict>> {
        let inf = model::infer(&self.inner, &field(image)?, kappa).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("p_final", field_rows(&inf.p_final))?;
        d.set_item("p_raw", field_rows(&inf.p_raw))?;
        d.set_item("m_c", field_rows(&inf.m_c))?;
        d.set_item("phi", field_rows(&inf.xai.raw))?;
        d.set_item("phi_focus", field_rows(inf.xai.focus.field()))?;
        d.set_item("phi_degenerate", inf.xai.degenerate)?;
        d.set_item("box", inf.b.to_vec())?;
        Ok(d)
    }
}

#[pyclass(name = "PairNet")]
struct PyPairNet {
    inner: pairnet::PairNet,
}

#[pymethods]
impl PyPairNet {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> Self {
        Self {
            inner: pairnet::PairNet::init(seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pairnet::PairNet::read(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    /// Probability that `second` is the slice right after `first`.
    fn score(&self, first: Vec<Vec<i64>>, second: Vec<Vec<i64>>) -> PyResult<f64> {
        let s = pairnet::PairSample {
            first: mask(first)?,
            second: mask(second)?,
            label: false,
            volume: String::new(),
            i: 0,
            j: 1,
        };
        self.inner.score(&s.z().map_err(py_err)?).map_err(py_err)
    }
}

/// `(iou, dice)`; both empty scores `(1, 1)`.
#[pyfunction]
fn iou_dice(pred: Vec<Vec<i64>>, truth: Vec<Vec<i64>>) -> PyResult<(f64, f64)> {
    let o = probe::iou_dice(&mask(pred)?, &mask(truth)?).map_err(py_err)?;
    Ok((o.iou, o.dice))
}

#[pyfunction]
fn hd95(pred: Vec<Vec<i64>>, truth: Vec<Vec<i64>>) -> PyResult<f64> {
    Ok(probe::hd95(&mask(pred)?, &mask(truth)?).map_err(py_err)?.value)
}

#[pyfunction]
fn chamfer(a: Vec<Vec<i64>>, b: Vec<Vec<i64>>) -> PyResult<f64> {
    Ok(probe::chamfer(&mask(a)?, &mask(b)?).map_err(py_err)?.value)
}

/// Mean boundary chamfer over consecutive slices.
#[pyfunction]
fn e_cons(stack: Vec<Vec<Vec<i64>>>) -> PyResult<f64> {
    let masks = stack.into_iter().map(mask).collect::<PyResult<Vec<_>>>()?;
    let s = MaskStack::new(masks).map_err(py_err)?;
    Ok(probe::e_cons(&s).map_err(py_err)?.e_cons)
}

/// Jensen-Shannon divergence after mass-normalizing both fields.
#[pyfunction]
#[pyo3(signature = (p, q, eps = 1e-6))]
fn jsd(p: Vec<Vec<f32>>, q: Vec<Vec<f32>>, eps: f64) -> PyResult<f64> {
    let (p, _) = FocusField::normalize(&field(p)?, eps).map_err(py_err)?;
    let (q, _) = FocusField::normalize(&field(q)?, eps).map_err(py_err)?;
    probe::jsd(&p, &q).map_err(py_err)
}

/// `(foi, fmi)` of an attribution field against a mask.
#[pyfunction]
#[pyo3(signature = (phi, y, eps = 1e-6))]
fn foi_fmi(phi: Vec<Vec<f32>>, y: Vec<Vec<i64>>, eps: f64) -> PyResult<(f64, f64)> {
    let o = probe::foi_fmi(&field(phi)?, &mask(y)?, eps).map_err(py_err)?;
    Ok((o.foi, o.fmi))
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    probe::spearman(&xs, &ys).map_err(py_err)
}

/// Runs a command-line invocation in-process and returns its exit status.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("xaiseg".to_string()).chain(args);
    match cli::Cli::try_parse_from(argv) {
        Ok(c) => match cli::run(c, &mut std::io::stdout()) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                cli::exit_code(&e)
            }
        },
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

#[pymodule]
fn xaiseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", xaiseg::config::VERSION)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPairNet>()?;
    for f in [
        wrap_pyfunction!(generate_phantom, m)?,
        wrap_pyfunction!(iou_dice, m)?,
        wrap_pyfunction!(hd95, m)?,
        wrap_pyfunction!(chamfer, m)?,
        wrap_pyfunction!(e_cons, m)?,
        wrap_pyfunction!(jsd, m)?,
        wrap_pyfunction!(foi_fmi, m)?,
        wrap_pyfunction!(spearman, m)?,
        wrap_pyfunction!(run_cli, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
