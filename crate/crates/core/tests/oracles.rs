//! Forward models checked against independently assembled dense systems.

use lmk::model::OperatorFamily;
use lmk::problems::*;
use nalgebra::{DMatrix, DVector};

/// Dense finite-difference solve of `−(γu')' = f`, `u(0) = 0`, `u(1) = b`,
/// with the unknowns at all `n + 1` nodes and the boundary rows kept.
fn dense_state(gamma: &[f64], f_interior: &[f64], b: f64) -> Vec<f64> {
    let n = gamma.len();
    let h = 1.0 / n as f64;
    let mut m = DMatrix::zeros(n + 1, n + 1);
    let mut rhs = DVector::zeros(n + 1);
    m[(0, 0)] = 1.0;
    m[(n, n)] = 1.0;
    rhs[n] = b;
    for p in 1..n {
        let (gl, gr) = (gamma[p - 1], gamma[p]);
        m[(p, p - 1)] = -gl / (h * h);
        m[(p, p)] = (gl + gr) / (h * h);
        m[(p, p + 1)] = -gr / (h * h);
        rhs[p] = f_interior[p - 1];
    }
    m.lu().solve(&rhs).unwrap().iter().copied().collect()
}

fn gaussian(t: f64, c: f64, w: f64, s: f64) -> f64 {
    s * (-(t - c).powi(2) / (2.0 * w * w)).exp() / w
}

#[test]
fn elliptic_data_at_start_match_dense_oracle() {
    let opts = EllipticOptions::default();
    let p = build_elliptic_1d(opts.clone()).unwrap();
    let n = opts.n_cells;
    let h = 1.0 / n as f64;
    let x0 = p.x0();
    let gamma = vec![opts.gamma_start; n];
    for (i, c) in source_centers(opts.n_loads).into_iter().enumerate() {
        let f: Vec<f64> = (1..n).map(|q| gaussian(q as f64 * h, c, opts.source_width, opts.source_scale)).collect();
        let u = dense_state(&gamma, &f, opts.boundary_value);
        let expected: Vec<f64> = (0..n).map(|j| (u[j + 1] - u[j]) / h.sqrt()).collect();
        let got = p.evaluate(i, &x0).unwrap();
        let err = expected.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = expected.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10 * scale, "load {i}: {err:e}");
    }
}

#[test]
fn elliptic_truth_data_match_dense_oracle() {
    let opts = EllipticOptions {
        measurement: Measurement::NodalField,
        ..EllipticOptions::default()
    };
    let p = build_elliptic_1d(opts.clone()).unwrap();
    let n = opts.n_cells;
    let h = 1.0 / n as f64;
    let gamma: Vec<f64> = (0..n).map(|j| opts.profile.eval((j as f64 + 0.5) * h)).collect();
    let y = p.exact_data().unwrap();
    for (i, c) in source_centers(opts.n_loads).into_iter().enumerate() {
        let f: Vec<f64> = (1..n).map(|q| gaussian(q as f64 * h, c, opts.source_width, opts.source_scale)).collect();
        let u = dense_state(&gamma, &f, opts.boundary_value);
        for q in 1..n {
            assert!((y[i][q - 1] - h.sqrt() * u[q]).abs() <= 1e-12, "load {i} node {q}");
        }
    }
}

#[test]
fn block_linear_data_match_green_function_quadrature() {
    // y(t_j) = ∫ G(t_j, s) x(s) ds with G(t, s) = min(t,s)(1 − max(t,s)),
    // sampled at the grid nodes.
    let p = build_block_linear(16, 4, 0).unwrap();
    let n = 16;
    let h = 1.0 / (n + 1) as f64;
    let x = p.x_true();
    let y: Vec<f64> = p.exact_data().unwrap().concat();
    for j in 1..=n {
        let t = j as f64 * h;
        let v: f64 = (1..=n)
            .map(|l| {
                let s = l as f64 * h;
                h * t.min(s) * (1.0 - t.max(s)) * x[l - 1]
            })
            .sum();
        assert!((y[j - 1] - v).abs() <= 1e-14, "row {j}");
    }
}
