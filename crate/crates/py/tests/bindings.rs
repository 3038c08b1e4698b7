use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(licprune_py::licprune_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("lp", m).unwrap();
        f(py, &globals);
    });
}

fn eval_f64(py: Python<'_>, g: &Bound<'_, PyDict>, expr: &str) -> f64 {
    let code = std::ffi::CString::new(expr).unwrap();
    py.eval(&code, Some(g), None).unwrap().extract().unwrap()
}

#[test]
fn bd_rate_of_doubled_rates_is_one_hundred_percent() {
    with_module(|py, g| {
        let v = eval_f64(py, g, "lp.bd_rate([(0.2,28.0),(0.35,30.1),(0.6,32.0),(0.95,34.2)], [(0.4,28.0),(0.7,30.1),(1.2,32.0),(1.9,34.2)])");
        assert!((v - 100.0).abs() < 1e-6);
    });
}

#[test]
fn bad_arguments_raise_value_error() {
    with_module(|py, g| {
        let code = std::ffi::CString::new("lp.quantize_weights([1.0], 1, [0.0], [0.0], 8)").unwrap();
        let err = py.eval(&code, Some(g), None).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}

#[test]
fn codec_reports_prunable_layers() {
    with_module(|py, g| {
        let n = eval_f64(py, g, "float(len(lp.Codec('desk').prunable_layers()))");
        assert!(n >= 8.0);
    });
}
