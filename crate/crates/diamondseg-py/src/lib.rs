//! Python bindings. Populated alongside the core crate.

use pyo3::prelude::*;

#[pymodule]
fn diamondseg_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
