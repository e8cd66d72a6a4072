//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Small and dependency-free; adequate for the descriptor dimensions this
//! toolkit handles (d <= 4096, typically far less).

/// Square symmetric matrix stored row-major.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    fn off_diagonal_frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    s += self.at(i, j) * self.at(i, j);
                }
            }
        }
        s.sqrt()
    }
}

/// Eigenvalues and eigenvectors, sorted by descending eigenvalue.
/// `vectors[k]` is the unit eigenvector for `values[k]`.
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi: sweep all upper-triangle pivots, rotating each to zero,
/// until the off-diagonal Frobenius norm drops below 1e-10.
pub fn jacobi_eigen(mut a: SymMatrix) -> EigenDecomposition {
    let n = a.n;
    // v starts as identity; columns accumulate the eigenvectors
    let mut v = SymMatrix::zeros(n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }

    for _ in 0..MAX_SWEEPS {
        if a.off_diagonal_frobenius() <= JACOBI_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // rows/columns p and q of a
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                // eigenvector accumulation
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.at(j, j)
            .partial_cmp(&a.at(i, i))
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &k in &order {
        values.push(a.at(k, k));
        let col: Vec<f64> = (0..n).map(|i| v.at(i, k)).collect();
        vectors.push(col);
    }
    EigenDecomposition { values, vectors }
}
