//! Gaussian random projection from parameter space (`p`) to `d` dimensions.
//!
//! `P` is a `p x d` matrix with i.i.d. `N(0, 1/d)` entries. In Gaussian mode
//! it is never materialized: rows are regenerated in blocks of
//! [`ROW_BLOCK`] from a ChaCha stream keyed by `(seed, block index)`, so any
//! row can be reproduced independently of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{check_len, ParamVector};
use crate::{GradexError, Result};

/// Rows of `P` generated per stream.
pub const ROW_BLOCK: usize = 64;

/// Bumped whenever the row generator changes.
pub const GENERATOR_VERSION: u32 = 1;

/// Default projection dimension.
pub const DEFAULT_DIM: usize = 100;

/// Everything needed to regenerate a Gaussian projector exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorId {
    pub seed: u64,
    pub p: usize,
    pub d: usize,
    pub generator_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectorMode {
    Gaussian,
    /// Explicit row-major `p x d` matrix.
    Injected(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    p: usize,
    d: usize,
    seed: u64,
    mode: ProjectorMode,
}

impl Projector {
    pub fn gaussian(p: usize, d: usize, seed: u64) -> Result<Self> {
        if p == 0 || d == 0 {
            return Err(GradexError::InvalidConfig("projector dimensions must be positive".into()));
        }
        Ok(Projector {
            p,
            d,
            seed,
            mode: ProjectorMode::Gaussian,
        })
    }

    pub fn from_id(id: &ProjectorId) -> Result<Self> {
        if id.generator_version != GENERATOR_VERSION {
            return Err(GradexError::InvalidConfig(format!(
                "projector generator version {} is not supported (expected {GENERATOR_VERSION})",
                id.generator_version
            )));
        }
        Projector::gaussian(id.p, id.d, id.seed)
    }

    /// Wraps an explicit row-major `p x d` matrix.
    pub fn injected(p: usize, d: usize, matrix: Vec<f64>) -> Result<Self> {
        check_len("injected projection matrix", p * d, matrix.len())?;
        if p == 0 || d == 0 {
            return Err(GradexError::InvalidConfig("projector dimensions must be positive".into()));
        }
        Ok(Projector {
            p,
            d,
            seed: 0,
            mode: ProjectorMode::Injected(matrix),
        })
    }

    /// `P = I_p`, so projection and lift are both the identity.
    pub fn identity(p: usize) -> Self {
        let mut m = vec![0.0; p * p];
        for i in 0..p {
            m[i * p + i] = 1.0;
        }
        Projector::injected(p, p, m).expect("identity dimensions are consistent")
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> &ProjectorMode {
        &self.mode
    }

    pub fn id(&self) -> ProjectorId {
        ProjectorId {
            seed: self.seed,
            p: self.p,
            d: self.d,
            generator_version: GENERATOR_VERSION,
        }
    }

    fn fill_block(&self, block: usize, rows: usize, buf: &mut Vec<f64>) {
        buf.clear();
        match &self.mode {
            ProjectorMode::Gaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(block as u64);
                let scale = 1.0 / (self.d as f64).sqrt();
                buf.extend((0..rows * self.d).map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                }));
            }
            ProjectorMode::Injected(m) => {
                let start = block * ROW_BLOCK * self.d;
                buf.extend_from_slice(&m[start..start + rows * self.d]);
            }
        }
    }

    /// Visits `P` one row block at a time: `(first_row, rows x d block)`.
    fn for_each_block(&self, mut f: impl FnMut(usize, &[f64])) {
        let mut buf = Vec::with_capacity(ROW_BLOCK * self.d);
        for block in 0..self.p.div_ceil(ROW_BLOCK) {
            let start = block * ROW_BLOCK;
            let rows = ROW_BLOCK.min(self.p - start);
            self.fill_block(block, rows, &mut buf);
            f(start, &buf);
        }
    }

    /// `P^T g`.
    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.project_many(&[g])?.pop().expect("one input"))
    }

    /// `P^T g` for several vectors, regenerating `P` once.
    pub fn project_many(&self, gs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        for g in gs {
            check_len("projected vector", self.p, g.len())?;
        }
        let d = self.d;
        let mut out = vec![vec![0.0; d]; gs.len()];
        self.for_each_block(|start, block| {
            for (g, acc) in gs.iter().zip(out.iter_mut()) {
                for (r, row) in block.chunks_exact(d).enumerate() {
                    let gi = g[start + r];
                    if gi == 0.0 {
                        continue;
                    }
                    for (a, pij) in acc.iter_mut().zip(row) {
                        *a += gi * pij;
                    }
                }
            }
        });
        Ok(out)
    }

    /// `P x`, mapping a `d`-vector back to parameter space.
    pub fn lift(&self, x: &[f64]) -> Result<ParamVector> {
        check_len("lifted vector", self.d, x.len())?;
        let d = self.d;
        let mut out = vec![0.0; self.p];
        self.for_each_block(|start, block| {
            for (r, row) in block.chunks_exact(d).enumerate() {
                out[start + r] = crate::model::dot(row, x);
            }
        });
        ParamVector::new(out).map_err(|_| GradexError::NonFinite("lifted vector"))
    }

    /// `P^T P`, row-major `d x d`.
    pub fn gram(&self) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d * d];
        self.for_each_block(|_, block| {
            for row in block.chunks_exact(d) {
                for i in 0..d {
                    let ri = row[i];
                    for j in i..d {
                        out[i * d + j] += ri * row[j];
                    }
                }
            }
        });
        for i in 0..d {
            for j in 0..i {
                out[i * d + j] = out[j * d + i];
            }
        }
        out
    }

    /// Dense copy of `P` (row-major). Intended for small `p` in tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p * self.d);
        self.for_each_block(|_, block| out.extend_from_slice(block));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_in_zero_out() {
        let proj = Projector::gaussian(130, 7, 3).unwrap();
        assert!(proj.project(&vec![0.0; 130]).unwrap().iter().all(|&v| v == 0.0));
        assert!(proj.lift(&[0.0; 7]).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_is_identity() {
        let proj = Projector::identity(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_vec(&mut rng, 9);
        assert_eq!(proj.project(&g).unwrap(), g);
        assert_eq!(proj.lift(&g).unwrap().as_slice(), &g[..]);
    }

    #[test]
    fn project_is_linear() {
        let proj = Projector::gaussian(200, 11, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_vec(&mut rng, 200);
        let b = random_vec(&mut rng, 200);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let pa = proj.project(&a).unwrap();
        let pb = proj.project(&b).unwrap();
        let ps = proj.project(&sum).unwrap();
        for i in 0..11 {
            assert!((ps[i] - pa[i] - pb[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_is_adjoint_of_project() {
        let proj = Projector::gaussian(150, 13, 8).unwrap();
        let dense = proj.to_dense();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_vec(&mut rng, 150);
        let x = random_vec(&mut rng, 13);
        let lhs = proj.lift(&x).unwrap().as_slice().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let rhs = crate::model::dot(&x, &proj.project(&g).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
        // Dense-matrix oracle for both maps.
        for j in 0..13 {
            let expect: f64 = (0..150).map(|i| dense[i * 13 + j] * g[i]).sum();
            assert!((expect - proj.project(&g).unwrap()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_per_seed_and_block_order_free() {
        let a = Projector::gaussian(300, 10, 77).unwrap();
        let b = Projector::gaussian(300, 10, 77).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
        let c = Projector::gaussian(300, 10, 78).unwrap();
        assert_ne!(a.to_dense(), c.to_dense());
        // A longer matrix with the same seed shares its leading rows.
        let longer = Projector::gaussian(500, 10, 77).unwrap();
        assert_eq!(&longer.to_dense()[..3000], &a.to_dense()[..]);
    }

    #[test]
    fn entry_variance_is_one_over_d() {
        let proj = Projector::gaussian(2000, 50, 4).unwrap();
        let dense = proj.to_dense();
        let n = dense.len() as f64;
        let mean = dense.iter().sum::<f64>() / n;
        let var = dense.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * (1.0 / 50.0 / n).sqrt());
        assert!((var - 0.02).abs() < 0.02 * 0.02);
    }

    #[test]
    fn gram_matches_dense() {
        let proj = Projector::gaussian(70, 5, 1).unwrap();
        let dense = proj.to_dense();
        let gram = proj.gram();
        for i in 0..5 {
            for j in 0..5 {
                let expect: f64 = (0..70).map(|r| dense[r * 5 + i] * dense[r * 5 + j]).sum();
                assert!((gram[i * 5 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_mismatch_errors() {
        let proj = Projector::gaussian(10, 3, 0).unwrap();
        assert!(proj.project(&[1.0; 9]).is_err());
        assert!(proj.lift(&[1.0; 4]).is_err());
        assert!(Projector::injected(2, 2, vec![1.0; 3]).is_err());
    }
}
