//! Seeded counter-based randomness.
//!
//! Every draw is a pure function of `(seed, stream, index)`: a ChaCha8 stream
//! keyed by the seed, selected by `stream`, and positioned at a block that
//! only `index` can reach. Reading index `t` never depends on whether indices
//! before it were consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::{norm2, Mat};
use crate::scalar::Real;

/// Stream identifiers, one per independent consumer of a seed.
pub mod streams {
    pub const EXPLORATION: u64 = 1;
    pub const DISTURBANCE: u64 = 2;
    pub const DISTURBANCE_PARAMS: u64 = 3;
    pub const INSTANCE: u64 = 4;
    pub const COMPARATOR: u64 = 5;
    pub const VERIFY: u64 = 6;
    pub const COSTS: u64 = 7;
}

/// Words reserved per index; draws beyond this would spill into index + 1.
const WORDS_PER_INDEX: u128 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    pub seed: u64,
    pub stream: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng { seed, stream }
    }

    /// Generator positioned at the block owned by `index`.
    pub fn at(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(index as u128 * WORDS_PER_INDEX);
        rng
    }

    /// `n` independent signs in `{-1, +1}` for `index`.
    pub fn signs<T: Real>(&self, index: u64, n: usize) -> Vec<T> {
        let mut rng = self.at(index);
        (0..n)
            .map(|_| {
                if rng.next_u32() & 1 == 1 {
                    T::one()
                } else {
                    -T::one()
                }
            })
            .collect()
    }

    pub fn uniform_symmetric<T: Real>(&self, index: u64, n: usize, half_width: f64) -> Vec<T> {
        let mut rng = self.at(index);
        (0..n)
            .map(|_| T::lit(rng.random_range(-half_width..=half_width)))
            .collect()
    }

    pub fn gaussian<T: Real>(&self, index: u64, n: usize, std: f64) -> Vec<T> {
        let mut rng = self.at(index);
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(std * z)
            })
            .collect()
    }
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn gaussian_mat<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat<T> {
    let data = gaussian_vec(rng, rows * cols).into_iter().map(T::lit).collect();
    Mat::from_row_major(rows, cols, data).expect("gaussian entries are finite")
}

/// Random vector uniformly distributed on the sphere of radius `r`.
pub fn sphere_vec<T: Real>(rng: &mut impl Rng, n: usize, r: f64) -> Vec<T> {
    loop {
        let g = gaussian_vec(rng, n);
        let norm = norm2(&g);
        if norm > 1e-12 {
            return g.into_iter().map(|x| T::lit(r * x / norm)).collect();
        }
    }
}

/// Haar-distributed orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<T: Real>(rng: &mut impl Rng, n: usize) -> Mat<T> {
    loop {
        let g: Mat<f64> = gaussian_mat(rng, n, n);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for j in 0..n {
            let mut c: Vec<f64> = (0..n).map(|i| g[(i, j)]).collect();
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for q in &cols {
                    let d: f64 = c.iter().zip(q).map(|(a, b)| a * b).sum();
                    for (ci, qi) in c.iter_mut().zip(q) {
                        *ci -= d * qi;
                    }
                }
            }
            let nrm = norm2(&c);
            if nrm < 1e-8 {
                ok = false;
                break;
            }
            cols.push(c.into_iter().map(|x| x / nrm).collect());
        }
        if ok {
            let mut q = Mat::zeros(n, n);
            for (j, c) in cols.iter().enumerate() {
                for i in 0..n {
                    q[(i, j)] = T::lit(c[i]);
                }
            }
            return q;
        }
    }
}

/// Random matrix with spectral norm exactly `norm` (up to rounding).
pub fn random_with_norm<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, norm: f64) -> Mat<T> {
    loop {
        let g: Mat<f64> = gaussian_mat(rng, rows, cols);
        let s = crate::numerics::spectral_norm(&g).expect("finite");
        if s > 1e-12 {
            return g.scale(norm / s).cast();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_pure_functions_of_index() {
        let r = CounterRng::new(42, streams::EXPLORATION);
        let late: Vec<f64> = r.signs(1000, 4);
        let _: Vec<f64> = r.signs(0, 4);
        assert_eq!(r.signs::<f64>(1000, 4), late);
        assert_ne!(
            CounterRng::new(43, streams::EXPLORATION).signs::<f64>(1000, 16),
            r.signs::<f64>(1000, 16)
        );
    }

    #[test]
    fn signs_are_balanced() {
        let r = CounterRng::new(7, streams::EXPLORATION);
        let total: f64 = (0..4000).map(|t| r.signs::<f64>(t, 1)[0]).sum();
        assert!(total.abs() < 200.0, "{total}");
    }

    #[test]
    fn orthogonal_matrix_is_orthogonal() {
        let mut rng = CounterRng::new(1, streams::INSTANCE).at(0);
        let q: Mat<f64> = random_orthogonal(&mut rng, 4);
        let qtq = &q.transpose() * &q;
        assert!((&qtq - &Mat::identity(4)).max_abs() < 1e-12);
    }
}
