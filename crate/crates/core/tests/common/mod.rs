#![allow(dead_code)]

use nalgebra::DMatrix;
use nsc::Mat;
use proptest::prelude::*;

pub fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Mat<f64> {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Mat::from_row_major(m.nrows(), m.ncols(), data).unwrap()
}

/// Random matrix with entries in `[-scale, scale]`.
pub fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Mat<f64>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Mat::from_row_major(rows, cols, v).unwrap())
}

pub fn any_matrix(max_dim: usize) -> impl Strategy<Value = Mat<f64>> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| matrix(r, c, 3.0))
}

pub fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn vnorm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}
