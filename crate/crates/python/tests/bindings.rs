use pyo3::prelude::*;
use pseudofuse_py::{caaf_fuse, complete, farthest_point_sample, generate_scene, project_depth, PyConfig};

#[test]
fn scene_and_depth_through_bindings() {
    Python::initialize();
    Python::attach(|_py| {
        let cfg = PyConfig {
            inner: Default::default(),
        };
        let scene = generate_scene(Some(&cfg), Some(2)).unwrap();
        let sparse = project_depth(&scene).unwrap();
        let dense = complete(&scene).unwrap();
        assert_eq!(sparse.len(), dense.len());
        assert!(sparse.iter().filter(|&&d| d > 0.0).count() < dense.len());
        assert!(dense.iter().all(|&d| d > 0.0));
    });
}

#[test]
fn zero_gate_layer_halves_both_inputs() {
    Python::initialize();
    Python::attach(|_py| {
        let d = 3;
        let zeros = vec![vec![0.0; 2 * d]; 2 * d];
        let (fused, w_raw, w_pse) = caaf_fuse(vec![vec![2.0; d]], vec![vec![4.0; d]], zeros, vec![0.0; 2 * d]).unwrap();
        assert_eq!(fused[0], vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(w_raw[0].iter().chain(&w_pse[0]).all(|&w| w == 0.5));
    });
}

#[test]
fn errors_become_python_exceptions() {
    Python::initialize();
    Python::attach(|py| {
        let e = farthest_point_sample(vec![vec![0.0, 0.0]], 1, 0).unwrap_err();
        assert!(e.value(py).to_string().contains("three coordinates"));
    });
}
