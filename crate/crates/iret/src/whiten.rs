//! Descriptor post-processing: L2 normalization and PCA whitening with
//! optional dimensionality reduction, applied as L2 -> whiten -> L2.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::aggregate::Descriptor;
use crate::binio;
use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, SymMatrix};

const WHIT_MAGIC: &[u8; 8] = b"IRWHITV1";
const EIGEN_EPS: f64 = 1e-6;

/// Learned centering + whitening projection.
///
/// `projection` is out_dim x in_dim row-major; row k is the k-th
/// eigenvector (descending eigenvalue) scaled by 1/sqrt(lambda_k + 1e-6),
/// with the sign fixed so each eigenvector's largest-magnitude entry is
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub in_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f64>,
    pub projection: Vec<f64>,
}

/// Scale a vector to unit L2 norm. A zero vector is an error (it signals
/// an empty or degenerate feature upstream).
pub fn l2_normalize(v: &Descriptor) -> Result<Descriptor> {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(Descriptor {
        values: v.values.iter().map(|x| x / norm).collect(),
        normalized: true,
    })
}

/// Fit mean and whitening projection on a descriptor set.
///
/// Covariance uses the 1/n convention; the eigendecomposition is cyclic
/// Jacobi to off-diagonal Frobenius norm 1e-10.
pub fn fit_whitener(descriptors: &[Descriptor], out_dim: usize) -> Result<Whitener> {
    if descriptors.len() < 2 {
        return Err(Error::InvalidArgument(
            "whitener needs at least 2 descriptors".into(),
        ));
    }
    let in_dim = descriptors[0].dim();
    if descriptors.iter().any(|d| d.dim() != in_dim) {
        return Err(Error::ShapeMismatch(
            "descriptors have mixed dimensions".into(),
        ));
    }
    if out_dim == 0 || out_dim > in_dim {
        return Err(Error::InvalidArgument(format!(
            "out_dim must be in 1..={in_dim}, got {out_dim}"
        )));
    }

    let n = descriptors.len() as f64;
    let mut mean = vec![0.0; in_dim];
    for d in descriptors {
        for (m, v) in mean.iter_mut().zip(&d.values) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }

    let mut cov = SymMatrix::zeros(in_dim);
    for d in descriptors {
        let centered: Vec<f64> = d.values.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..in_dim {
            for j in i..in_dim {
                let v = cov.at(i, j) + centered[i] * centered[j];
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..in_dim {
        for j in i..in_dim {
            let v = cov.at(i, j) / n;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }

    let eig = jacobi_eigen(cov);
    let mut projection = Vec::with_capacity(out_dim * in_dim);
    for k in 0..out_dim {
        let lambda = eig.values[k].max(0.0);
        let scale = 1.0 / (lambda + EIGEN_EPS).sqrt();
        let vec = &eig.vectors[k];
        // sign convention: largest-magnitude entry positive
        let mut pivot = 0usize;
        for (i, v) in vec.iter().enumerate() {
            if v.abs() > vec[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if vec[pivot] < 0.0 { -1.0 } else { 1.0 };
        projection.extend(vec.iter().map(|v| v * sign * scale));
    }

    Ok(Whitener {
        in_dim,
        out_dim,
        mean,
        projection,
    })
}

/// Center and project: projection * (v - mean). Not renormalized.
pub fn apply_whitener(w: &Whitener, v: &Descriptor) -> Result<Descriptor> {
    if v.dim() != w.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "whitener expects dim {}, got {}",
            w.in_dim,
            v.dim()
        )));
    }
    let centered: Vec<f64> = v.values.iter().zip(&w.mean).map(|(x, m)| x - m).collect();
    let mut out = Vec::with_capacity(w.out_dim);
    for k in 0..w.out_dim {
        let row = &w.projection[k * w.in_dim..(k + 1) * w.in_dim];
        out.push(row.iter().zip(&centered).map(|(a, b)| a * b).sum());
    }
    Ok(Descriptor::raw(out))
}

/// Full post-processing chain: l2_normalize -> whiten -> l2_normalize.
pub fn postprocess(w: &Whitener, v: &Descriptor) -> Result<Descriptor> {
    l2_normalize(&apply_whitener(w, &l2_normalize(v)?)?)
}

impl Whitener {
    /// Write in the `IRWHITV1` binary format.
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(WHIT_MAGIC).map_err(|e| Error::io(path, e))?;
        binio::write_u32(&mut w, self.in_dim as u32, path)?;
        binio::write_u32(&mut w, self.out_dim as u32, path)?;
        binio::write_f32_slice(&mut w, &self.mean, path)?;
        binio::write_f32_slice(&mut w, &self.projection, path)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        binio::expect_magic(&mut r, WHIT_MAGIC, path)?;
        let in_dim = binio::read_u32(&mut r, path)? as usize;
        let out_dim = binio::read_u32(&mut r, path)? as usize;
        if in_dim == 0 || out_dim == 0 || out_dim > in_dim {
            return Err(Error::malformed(path, "invalid dimensions"));
        }
        let mean = binio::read_f32_vec(&mut r, in_dim, path)?;
        let projection = binio::read_f32_vec(&mut r, out_dim * in_dim, path)?;
        Ok(Whitener {
            in_dim,
            out_dim,
            mean,
            projection,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn d(vals: &[f64]) -> Descriptor {
        Descriptor::raw(vals.to_vec())
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&d(&[1.0, 0.0, 0.0])).unwrap().values, vec![1.0, 0.0, 0.0]);
        let n = l2_normalize(&d(&[3.0, 4.0])).unwrap();
        assert!((n.values[0] - 0.6).abs() < 1e-12);
        assert!((n.values[1] - 0.8).abs() < 1e-12);
        assert!(n.normalized);
        assert!(l2_normalize(&d(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn two_point_whitener() {
        // covariance diag(1, 0); top eigenvector (1,0); lambda = 1
        let x = vec![d(&[1.0, 0.0]), d(&[-1.0, 0.0])];
        let w = fit_whitener(&x, 1).unwrap();
        assert!(w.mean.iter().all(|&m| m.abs() < 1e-12));
        let scale = 1.0 / (1.0 + EIGEN_EPS).sqrt();
        let a = apply_whitener(&w, &x[0]).unwrap().values[0];
        let b = apply_whitener(&w, &x[1]).unwrap().values[0];
        assert!((a - scale).abs() < 1e-9);
        assert!((b + scale).abs() < 1e-9);
    }

    #[test]
    fn out_dim_too_large_errors() {
        let x = vec![d(&[1.0, 0.0]), d(&[0.0, 1.0])];
        assert!(fit_whitener(&x, 3).is_err());
        assert!(fit_whitener(&x[..1], 1).is_err());
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dim = 8;
        let n = 400;
        let xs: Vec<Descriptor> = (0..n)
            .map(|_| {
                // anisotropic: different per-axis scales plus a shared component
                let shared: f64 = rng.gen_range(-1.0..1.0);
                d(&(0..dim)
                    .map(|k| rng.gen_range(-1.0..1.0) * (k as f64 + 0.5) + 0.3 * shared)
                    .collect::<Vec<_>>())
            })
            .collect();
        let w = fit_whitener(&xs, dim).unwrap();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| apply_whitener(&w, x).unwrap().values)
            .collect();
        let mut mean = vec![0.0; dim];
        for y in &ys {
            for (m, v) in mean.iter_mut().zip(y) {
                *m += v / n as f64;
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                let mut c = 0.0;
                for y in &ys {
                    c += (y[i] - mean[i]) * (y[j] - mean[j]);
                }
                c /= n as f64;
                if i == j {
                    assert!((c - 1.0).abs() < 1e-3, "diag ({i}): {c}");
                } else {
                    assert!(c.abs() < 1e-4, "offdiag ({i},{j}): {c}");
                }
            }
        }
    }

    #[test]
    fn reduced_projection_is_prefix_of_full() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dim = 6;
        let xs: Vec<Descriptor> = (0..50)
            .map(|_| d(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let full = fit_whitener(&xs, dim).unwrap();
        let reduced = fit_whitener(&xs, 3).unwrap();
        assert_eq!(reduced.projection, full.projection[..3 * dim].to_vec());
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Descriptor> = (0..20)
            .map(|_| d(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let a = fit_whitener(&xs, 4).unwrap();
        let b = fit_whitener(&xs, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn postprocess_identity_whitener() {
        let w = Whitener {
            in_dim: 2,
            out_dim: 2,
            mean: vec![0.0, 0.0],
            projection: vec![1.0, 0.0, 0.0, 1.0],
        };
        let out = postprocess(&w, &d(&[3.0, 4.0])).unwrap();
        assert!((out.values[0] - 0.6).abs() < 1e-12);
        assert!((out.values[1] - 0.8).abs() < 1e-12);
        assert!(out.normalized);
        // v = mean after normalization -> whitened image is zero -> error
        let wm = Whitener {
            in_dim: 2,
            out_dim: 2,
            mean: vec![1.0, 0.0],
            projection: vec![1.0, 0.0, 0.0, 1.0],
        };
        assert!(postprocess(&wm, &d(&[2.0, 0.0])).is_err());
    }

    #[test]
    fn whitener_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.whit");
        let w = Whitener {
            in_dim: 3,
            out_dim: 2,
            mean: vec![0.5, -0.25, 0.125],
            projection: vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5],
        };
        w.write(&path).unwrap();
        let back = Whitener::read(&path).unwrap();
        assert_eq!(back, w);
    }
}
