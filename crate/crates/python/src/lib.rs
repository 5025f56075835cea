use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: radgen::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Lowercased tokens with sentence punctuation split off.
#[pyfunction]
fn normalize(text: &str) -> Vec<String> {
    radgen::encoders::normalize(text)
}

/// Names of the findings the rule-based labeler marks present.
#[pyfunction]
fn extract_labels(text: &str) -> Vec<String> {
    let names = radgen::metrics::label_names();
    radgen::metrics::extract_labels(text)
        .positives()
        .into_iter()
        .map(|i| names[i].clone())
        .collect()
}

#[pyfunction]
fn label_names() -> Vec<String> {
    radgen::metrics::label_names().to_vec()
}

/// Corpus scores for aligned predictions and references.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, predictions: Vec<String>, references: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let m = radgen::metrics::evaluate_corpus(&predictions, &references).map_err(value_err)?;
    let d = PyDict::new(py);
    for (k, v) in [
        ("b1", m.b1),
        ("b2", m.b2),
        ("b3", m.b3),
        ("b4", m.b4),
        ("rouge_l", m.rouge_l),
        ("meteor", m.meteor),
        ("cider", m.cider),
        ("ce_p", m.ce_p),
        ("ce_r", m.ce_r),
        ("ce_f1", m.ce_f1),
    ] {
        d.set_item(k, v)?;
    }
    d.set_item("n", m.n)?;
    Ok(d)
}

/// (train, val, test) sizes for a corpus of `n` samples.
#[pyfunction]
fn split_sizes(n: usize) -> (usize, usize, usize) {
    radgen::data::split_sizes(n)
}

/// One synthetic pair: report text, present labels and the image as a flat
/// row-major `[size, size, 3]` pixel list.
#[pyfunction]
#[pyo3(signature = (seed, index, size = 64))]
fn synth_sample<'py>(py: Python<'py>, seed: u64, index: usize, size: usize) -> PyResult<Bound<'py, PyDict>> {
    if size == 0 {
        return Err(PyValueError::new_err("size must be positive"));
    }
    let s = radgen::data::synth_sample(seed, index, size);
    let names = radgen::metrics::label_names();
    let labels: Vec<String> = s.findings.labels().positives().into_iter().map(|i| names[i].clone()).collect();
    let d = PyDict::new(py);
    d.set_item("report", s.report)?;
    d.set_item("labels", labels)?;
    d.set_item("shape", (size, size, 3))?;
    d.set_item("pixels", s.image.pixels().to_vec())?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "radgen")]
fn radgen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(extract_labels, m)?)?;
    m.add_function(wrap_pyfunction!(label_names, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(split_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    Ok(())
}
