use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::testutil::{jvp_error, random_tensor};

const TOL: f64 = 1e-5;

#[test]
fn square_sum_derivative() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.square(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn sum_of_leaf_has_unit_adjoint() {
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(&[2, 3], -1.0, 1.0, 1));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn shared_leaf_adjoints_accumulate() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let a = tape.scale(x, 3.0);
    let b = tape.scale(x, 4.0);
    let c = tape.add(a, b).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[7.0, 7.0]);
}

#[test]
fn relu_backward_is_piecewise() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.5, 2.0, 0.0]).unwrap());
    let r = tape.relu(x);
    let w = tape.masked_weighted_sum(r, vec![5.0, 7.0, 11.0]).unwrap();
    let g = tape.backward(w).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 7.0, 0.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_names_the_operation() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2]));
    let b = tape.leaf(Tensor::zeros(vec![3]));
    match tape.add(a, b) {
        Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "add"),
        other => panic!("unexpected {other:?}"),
    }
    let img = tape.leaf(Tensor::zeros(vec![1, 4, 4, 4]));
    let w = tape.leaf(Tensor::zeros(vec![2, 3, 3, 3, 3]));
    let bias = tape.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(
        tape.conv3d(img, w, bias, 1),
        Err(Error::ShapeMismatch { op: "conv3d", .. })
    ));
}

#[test]
fn constants_get_no_adjoint() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let x = tape.leaf(Tensor::scalar(5.0));
    let p = tape.mul(c, x).unwrap();
    let g = tape.backward(p).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap(), &[2.0]);
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let a = random_tensor(&[2, 3, 4], -2.0, 2.0, 10);
    let b = random_tensor(&[2, 3, 4], -2.0, 2.0, 11);
    let err = jvp_error(
        &[a, b],
        |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let q = t.square(m);
            let th = t.tanh(q);
            let r = t.relu(m);
            let o = t.offset(r, 0.3);
            let sc = t.scale(o, -1.7);
            let z = t.add(th, sc).unwrap();
            t.sum(z)
        },
        4,
        1e-6,
        12,
    );
    assert!(err < TOL, "{err}");
}

/// All-ones 3x3x3 kernel on a 1x4x4x4 input: d(sum out)/d(in) is the number
/// of outputs each input voxel touches.
#[test]
fn conv_with_ones_kernel_counts_neighbourhoods() {
    let input = random_tensor(&[1, 4, 4, 4], -1.0, 1.0, 20);
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.constant(Tensor::new(vec![1, 1, 3, 3, 3], vec![1.0; 27]).unwrap());
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv3d(x, w, b, 1).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    let gx = g.get(x).unwrap();
    let touches = |c: usize| if c == 0 || c == 3 { 2.0 } else { 3.0 };
    for z in 0..4 {
        for y in 0..4 {
            for xx in 0..4 {
                let expected = touches(z) * touches(y) * touches(xx);
                assert_eq!(gx[(z * 4 + y) * 4 + xx], expected);
            }
        }
    }
    // central differences on every input voxel
    let h = 1e-6;
    for i in 0..input.len() {
        let f = |shift: f64| {
            let mut t = Tape::new();
            let mut moved = input.clone();
            moved.data_mut()[i] += shift;
            let x = t.leaf(moved);
            let w = t.constant(Tensor::new(vec![1, 1, 3, 3, 3], vec![1.0; 27]).unwrap());
            let b = t.constant(Tensor::zeros(vec![1]));
            let y = t.conv3d(x, w, b, 1).unwrap();
            let s = t.sum(y);
            t.item(s)
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((fd - gx[i]).abs() < 1e-5 * gx[i].abs());
    }
}

#[test]
fn conv_and_deconv_match_finite_differences() {
    for stride in [1, 2] {
        let inputs = [
            random_tensor(&[2, 4, 6, 4], -1.0, 1.0, 30),
            random_tensor(&[3, 2, 3, 3, 3], -0.5, 0.5, 31),
            random_tensor(&[3], -0.5, 0.5, 32),
            random_tensor(&[3, 2, 2, 2, 2], -0.5, 0.5, 33),
            random_tensor(&[2], -0.5, 0.5, 34),
        ];
        let err = jvp_error(
            &inputs,
            |t, v| {
                let c = t.conv3d(v[0], v[1], v[2], stride).unwrap();
                let u = t.deconv3d(c, v[3], v[4]).unwrap();
                let q = t.square(u);
                t.sum(q)
            },
            4,
            1e-6,
            35,
        );
        assert!(err < TOL, "stride {stride}: {err}");
    }
}

#[test]
fn concat_select_and_weighted_sum_match_finite_differences() {
    let inputs = [
        random_tensor(&[2, 3, 3, 3], -1.0, 1.0, 40),
        random_tensor(&[1, 3, 3, 3], -1.0, 1.0, 41),
    ];
    let weights: Vec<f64> = random_tensor(&[1, 3, 3, 3], -1.0, 1.0, 42).data().to_vec();
    let err = jvp_error(
        &inputs,
        |t, v| {
            let c = t.concat_channels(v[0], v[1]).unwrap();
            let sq = t.square(c);
            let s = t.select_channel(sq, 1).unwrap();
            let s2 = t.select_channel(c, 2).unwrap();
            let m = t.mul(s, s2).unwrap();
            t.masked_weighted_sum(m, weights.clone()).unwrap()
        },
        4,
        1e-6,
        43,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn warp_matches_finite_differences_in_image_and_flow() {
    // flow values keep sample points away from lattice planes and borders
    let inputs = [
        random_tensor(&[2, 5, 4, 6], -1.0, 1.0, 50),
        random_tensor(&[3, 5, 4, 6], 0.1, 0.9, 51),
    ];
    let err = jvp_error(
        &inputs,
        |t, v| {
            let w = t.warp(v[0], v[1]).unwrap();
            let q = t.square(w);
            t.sum(q)
        },
        4,
        1e-6,
        52,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn forward_difference_matches_finite_differences_and_is_negative_transpose() {
    let x = random_tensor(&[3, 4, 5, 6], -1.0, 1.0, 60);
    for axis in Axis::ALL {
        let err = jvp_error(
            &[x.clone()],
            |t, v| {
                let d = t.forward_difference(v[0], axis).unwrap();
                let q = t.square(d);
                t.sum(q)
            },
            3,
            1e-6,
            61,
        );
        assert!(err < TOL, "{axis:?}: {err}");

        // <D x, y> = <x, D^T y>
        let y = random_tensor(&[3, 4, 5, 6], -1.0, 1.0, 62);
        let mut dx = vec![0.0; x.len()];
        forward_difference(x.data(), [3, 4, 5, 6], axis, &mut dx);
        let mut dty = vec![0.0; x.len()];
        forward_difference_adjoint(y.data(), [3, 4, 5, 6], axis, &mut dty);
        let lhs: f64 = dx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&dty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn forward_difference_zero_on_last_slab() {
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(&[1, 2, 2, 3], -1.0, 1.0, 70));
    let d = tape.forward_difference(x, Axis::X).unwrap();
    let v = tape.value(d).data();
    for row in v.chunks(3) {
        assert_eq!(row[2], 0.0);
    }
}

#[test]
fn backward_is_deterministic() {
    let build = || {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[2, 4, 4, 4], -1.0, 1.0, 80));
        let w = tape.leaf(random_tensor(&[3, 2, 3, 3, 3], -1.0, 1.0, 81));
        let b = tape.leaf(random_tensor(&[3], -1.0, 1.0, 82));
        let y = tape.conv3d(x, w, b, 2).unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        (g.get(x).unwrap().to_vec(), g.get(w).unwrap().to_vec())
    };
    assert_eq!(build(), build());
}
