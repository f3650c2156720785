//! Loads the module into an embedded interpreter and drives it from Python.

use conquer_py::conquer_py;
use pyo3::prelude::*;

const SCRIPT: &std::ffi::CStr = cr#"
import conquer_py as c

assert c.check_loss(-2.0, 0.25) == 1.5
assert abs(c.smoothed_loss(0.0, 0.5, "uniform", 0.2) - 0.05) < 1e-15
assert abs(c.NoiseLaw.student_t(2).quantile(0.95) - 2.9200) < 1e-4

data = c.Dataset.generate("S1", 300, seed=3)
assert len(data) == 300 and data.dim == 2
fit = c.train(data, [0.1, 0.9], widths=[8], joint=True, epochs=3, seed=1)
pred = fit.predict(data.x[:50])
assert all(r[0] < r[1] for r in pred)
assert len(fit.history) == fit.epochs_run

model = fit.models[0]
again = c.Model.from_json(model.to_json())
assert again.params() == model.params()

report = c.run_trials({"scenario": "S1", "n": 200, "test_size": 100, "n_trials": 2,
                       "taus": [0.5], "model": "custom", "widths": [4],
                       "train": {"max_epochs": 2}})
assert len(report["records"]) == 2

try:
    c.Dataset.generate("S9", 10)
    raise AssertionError("expected an error")
except c.ConquerError as e:
    assert str(e).startswith("invalid_argument: "), str(e)
"#;

#[test]
fn python_drives_the_module() {
    pyo3::append_to_inittab!(conquer_py);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(SCRIPT, None, None) {
            e.print(py);
            panic!("script failed");
        }
    });
}
