//! Banded direct solvers.
//!
//! Every implicit system in the crate is banded up to a handful of dense rows
//! or columns (periodic corners, a free-energy unknown). Those are handled by
//! a Woodbury correction on top of a banded LU with partial pivoting.

use crate::error::{Error, Result};

/// Square matrix with `kl` sub- and `ku` super-diagonals.
///
/// Each row keeps `kl` extra slots on the right for pivoting fill-in.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let off = j as isize - i as isize + self.kl as isize;
        (off >= 0 && (off as usize) < self.width && i < self.n && j < self.n).then(|| i * self.width + off as usize)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.slot(i, j) {
            Some(s) if (j as isize - i as isize) <= self.ku as isize => self.data[s],
            _ => 0.0,
        }
    }

    /// Adds `v` to entry `(i, j)`; panics if the entry lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let in_band = (j as isize - i as isize) <= self.ku as isize;
        match self.slot(i, j) {
            Some(s) if in_band => self.data[s] += v,
            _ => panic!("entry ({i}, {j}) outside band ({}, {})", self.kl, self.ku),
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).expect("entry outside band");
        self.data[s] = v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// LU factorization with partial pivoting restricted to the band.
    pub fn factor(mut self) -> Result<BandedLu> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut mult = vec![0.0; n * kl.max(1)];
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.slot(k, k).unwrap()].abs();
            for r in k + 1..=last_row {
                let v = self.data[self.slot(r, k).unwrap()].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Numerical(format!("singular banded matrix at column {k}")));
            }
            piv[k] = p;
            let last_col = (k + ku + kl).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.slot(k, j).unwrap();
                    let b = self.slot(p, j).unwrap();
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.slot(k, k).unwrap()];
            for r in k + 1..=last_row {
                let s = self.slot(r, k).unwrap();
                let m = self.data[s] / pivot;
                self.data[s] = 0.0;
                mult[k * kl + (r - k - 1)] = m;
                if m != 0.0 {
                    for j in k + 1..=last_col {
                        let u = self.data[self.slot(k, j).unwrap()];
                        let t = self.slot(r, j).unwrap();
                        self.data[t] -= m * u;
                    }
                }
            }
        }
        Ok(BandedLu { m: self, mult, piv })
    }
}

#[derive(Debug, Clone)]
pub struct BandedLu {
    m: BandedMatrix,
    mult: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    pub fn n(&self) -> usize {
        self.m.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let BandedMatrix { n, kl, ku, .. } = self.m;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            for r in k + 1..=(k + kl).min(n - 1) {
                b[r] -= self.mult[k * kl + (r - k - 1)] * bk;
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..=(k + ku + kl).min(n - 1) {
                acc -= self.m.data[self.m.slot(k, j).unwrap()] * b[j];
            }
            b[k] = acc / self.m.data[self.m.slot(k, k).unwrap()];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Solver for `A + sum_j u_j v_j^T` with banded `A`, via Woodbury.
#[derive(Debug, Clone)]
pub struct LowRankUpdated {
    base: BandedLu,
    /// `A^{-1} u_j`
    z: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    capacitance: DenseLu,
}

impl LowRankUpdated {
    pub fn new(base: BandedLu, u: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        assert_eq!(u.len(), v.len());
        let k = u.len();
        let z: Vec<Vec<f64>> = u.iter().map(|col| base.solve(col)).collect();
        let mut cap = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                cap[a * k + b] = dot(&v[a], &z[b]) + if a == b { 1.0 } else { 0.0 };
            }
        }
        let capacitance = DenseLu::factor(k, cap)?;
        Ok(Self { base, z, v, capacitance })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = self.base.solve(b);
        if self.z.is_empty() {
            return y;
        }
        let mut w: Vec<f64> = self.v.iter().map(|va| dot(va, &y)).collect();
        self.capacitance.solve_in_place(&mut w);
        for (zj, cj) in self.z.iter().zip(&w) {
            for (yi, zi) in y.iter_mut().zip(zj) {
                *yi -= cj * zi;
            }
        }
        y
    }
}

/// Small dense LU with partial pivoting.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    pub fn factor(n: usize, mut a: Vec<f64>) -> Result<Self> {
        let mut piv = vec![0; n];
        for k in 0..n {
            let p = (k..n).max_by(|&x, &y| a[x * n + k].abs().total_cmp(&a[y * n + k].abs())).unwrap();
            if a[p * n + k] == 0.0 || !a[p * n + k].is_finite() {
                return Err(Error::Numerical("singular dense matrix".into()));
            }
            piv[k] = p;
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
            }
            for r in k + 1..n {
                let m = a[r * n + k] / a[k * n + k];
                a[r * n + k] = m;
                for j in k + 1..n {
                    a[r * n + j] -= m * a[k * n + j];
                }
            }
        }
        Ok(Self { n, a, piv })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            b.swap(k, self.piv[k]);
            for r in k + 1..n {
                b[r] -= self.a[r * n + k] * b[k];
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..n {
                acc -= self.a[k * n + j] * b[j];
            }
            b[k] = acc / self.a[k * n + k];
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
