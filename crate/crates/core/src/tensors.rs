//! Packed symmetric rank-2 and rank-3 tensors. Symmetry is exact by storage:
//! only the sorted index component is kept.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct SymTensor2 {
    n: usize,
    data: Vec<f64>,
}

impl SymTensor2 {
    pub fn zeros(n: usize) -> Self {
        SymTensor2 {
            n,
            data: vec![0.0; n * (n + 1) / 2],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut t = SymTensor2::zeros(n);
        for i in 0..n {
            for j in i..n {
                t.set(i, j, f(i, j));
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn pos(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + j
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.pos(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let p = self.pos(i, j);
        self.data[p] = v;
    }

    pub fn bilinear(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += self.get(i, j) * u[i] * v[j];
            }
        }
        acc
    }

    /// Contraction with a single vector: (T u)_i.
    pub fn contract(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| {
            (0..self.n).map(|j| self.get(i, j) * u[j]).sum()
        })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.to_matrix().symmetric_eigenvalues()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += self.get(i, j).powi(2);
            }
        }
        acc.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymTensor3 {
    n: usize,
    data: Vec<f64>,
}

fn pos3(n: usize, i: usize, j: usize, k: usize) -> usize {
    // requires i <= j <= k
    let mut p = 0;
    for a in 0..i {
        let m = n - a;
        p += m * (m + 1) / 2;
    }
    for b in i..j {
        p += n - b;
    }
    p + (k - j)
}

impl SymTensor3 {
    pub fn zeros(n: usize) -> Self {
        SymTensor3 {
            n,
            data: vec![0.0; n * (n + 1) * (n + 2) / 6],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = SymTensor3::zeros(n);
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    t.set(i, j, k, f(i, j, k));
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn pos(&self, i: usize, j: usize, k: usize) -> usize {
        let mut v = [i, j, k];
        v.sort_unstable();
        pos3(self.n, v[0], v[1], v[2])
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.pos(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let p = self.pos(i, j, k);
        self.data[p] = v;
    }

    pub fn trilinear(&self, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                for k in 0..self.n {
                    acc += self.get(i, j, k) * u[i] * v[j] * w[k];
                }
            }
        }
        acc
    }

    pub fn scale(&self, s: f64) -> SymTensor3 {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                for k in 0..self.n {
                    acc += self.get(i, j, k).powi(2);
                }
            }
        }
        acc.sqrt()
    }

    /// Frobenius norm of the componentwise difference.
    pub fn distance(&self, other: &SymTensor3) -> f64 {
        assert_eq!(self.n, other.n);
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                for k in 0..self.n {
                    acc += (self.get(i, j, k) - other.get(i, j, k)).powi(2);
                }
            }
        }
        acc.sqrt()
    }
}
