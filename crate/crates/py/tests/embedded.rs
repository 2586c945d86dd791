use faewnet_py::faewnet_py;
use pyo3::ffi::c_str;
use pyo3::prelude::*;

fn run(code: &std::ffi::CStr) -> PyResult<()> {
    Python::attach(|py| py.run(code, None, None))
}

#[test]
fn module_is_usable_from_an_embedded_interpreter() {
    pyo3::append_to_inittab!(faewnet_py);
    Python::initialize();

    run(c_str!(
        r#"
import faewnet
t = faewnet.Tensor([1, 2, 2], [1.0, 0.0, 0.0, 0.0])
# an impulse has a flat unit spectrum
assert faewnet.dft2(t, "real").tolist() == [1.0] * 4
assert faewnet.dft2(t, "imag").tolist() == [0.0] * 4
assert faewnet.unfold3x3(faewnet.Tensor.zeros([1, 1, 3, 3])).shape == [1, 9, 9]
y = faewnet.conv2d(faewnet.Tensor([1, 1, 2, 2], [1, 2, 3, 4]), faewnet.Tensor([1, 1, 1, 1], [2.0]))
assert y.tolist() == [2, 4, 6, 8]
m = faewnet.score([1, 0, 1, 1], [1, 1, 0, 1])
assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 0)
s = faewnet.generate(faewnet.GenSpec(size=32, building_size_min=4, building_size_max=8, buildings_max=4), 3, 2)
assert len(s) == 2 and s[0].width == 32 and len(s[0].mask) == 1024
assert all(ok for _, ok, _ in faewnet.selftest("metrics"))
"#
    ))
    .unwrap();

    let err = run(c_str!("import faewnet\nfaewnet.TrainConfig(batch=0)")).unwrap_err();
    Python::attach(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py)));
}
