//! String kernels on residue chains.
//!
//! `K2` multiplies the residue kernel along two equal-length k-mers, `K3`
//! sums `K2` over every pair of equal-length contiguous substrings (counted
//! with multiplicity), and `K3_hat` is its correlation normalization.
//!
//! `K3` is evaluated diagonal by diagonal: writing `a_t` for the residue
//! kernel values along one diagonal of the `|f| x |g|` table, the sum of all
//! window products starting at `t` obeys `M_t = a_t (1 + M_{t+1})`, so the
//! whole kernel costs `O(|f| |g|)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::AminoChain;
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::gram::GramMatrix;
use crate::substitution::{load_blosum62_2, SubstitutionKernel};

/// Plain accumulation switches to log space beyond this magnitude.
const OVERFLOW_GUARD: f64 = 1e250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Hadamard exponent applied to the substitution table.
    pub beta: f64,
    /// Longest substring length included in the sum; `None` for no cap.
    pub k_max: Option<usize>,
    /// Divide the substring sum by the number of substring pairs.
    pub averaged: bool,
}

impl KernelParams {
    pub fn new(beta: f64) -> Result<Self> {
        let p = KernelParams {
            beta,
            k_max: None,
            averaged: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_k_max(mut self, k_max: Option<usize>) -> Result<Self> {
        self.k_max = k_max;
        self.validate()?;
        Ok(self)
    }

    pub fn with_averaged(mut self, averaged: bool) -> Self {
        self.averaged = averaged;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.k_max == Some(0) {
            return Err(Error::InvalidParameter("k_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// A residue kernel `K1 = B^beta` together with the substring parameters.
#[derive(Debug, Clone)]
pub struct StringKernel {
    size: usize,
    k1: Vec<f64>,
    ln_k1: Vec<f64>,
    params: KernelParams,
}

impl StringKernel {
    /// `base` is raised entrywise to `params.beta`.
    pub fn new(base: &SubstitutionKernel, params: KernelParams) -> Result<Self> {
        params.validate()?;
        let table = base.hadamard_power(params.beta)?;
        let size = table.size();
        let k1: Vec<f64> = (0..size * size)
            .map(|ij| table.get(ij / size, ij % size))
            .collect();
        let ln_k1 = k1.iter().map(|v| v.ln()).collect();
        Ok(StringKernel {
            size,
            k1,
            ln_k1,
            params,
        })
    }

    /// Kernel over BLOSUM62-2.
    pub fn blosum(params: KernelParams) -> Result<Self> {
        Self::new(&load_blosum62_2(), params)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    #[inline]
    pub fn k1(&self, a: u8, b: u8) -> f64 {
        self.k1[a as usize * self.size + b as usize]
    }

    #[inline]
    fn ln_k1(&self, a: u8, b: u8) -> f64 {
        self.ln_k1[a as usize * self.size + b as usize]
    }

    /// Product kernel on two k-mers of equal length.
    pub fn k2(&self, u: &AminoChain, v: &AminoChain) -> Result<f64> {
        if u.len() != v.len() {
            return Err(Error::LengthMismatch(u.len(), v.len()));
        }
        Ok(self.k2_raw(u.residues(), v.residues()))
    }

    fn k2_raw(&self, u: &[u8], v: &[u8]) -> f64 {
        u.iter().zip(v).map(|(&a, &b)| self.k1(a, b)).product()
    }

    fn cap(&self) -> usize {
        self.params.k_max.unwrap_or(usize::MAX)
    }

    /// Number of equal-length substring pairs included in the sum.
    pub fn pair_count(&self, f_len: usize, g_len: usize) -> f64 {
        let top = f_len.min(g_len).min(self.cap());
        (1..=top)
            .map(|l| ((f_len - l + 1) * (g_len - l + 1)) as f64)
            .sum()
    }

    /// Direct enumeration of every substring pair. Quartic in chain length;
    /// intended for checking [`StringKernel::k3`].
    pub fn k3_bruteforce(&self, f: &AminoChain, g: &AminoChain) -> f64 {
        let (f, g) = (f.residues(), g.residues());
        let top = f.len().min(g.len()).min(self.cap());
        let mut total = 0.0;
        for len in 1..=top {
            for i in 0..=(f.len() - len) {
                for j in 0..=(g.len() - len) {
                    total += self.k2_raw(&f[i..i + len], &g[j..j + len]);
                }
            }
        }
        if self.params.averaged {
            total / self.pair_count(f.len(), g.len())
        } else {
            total
        }
    }

    /// Substring-sum kernel. May be `inf` for long chains at large beta; use
    /// [`StringKernel::ln_k3`] when magnitudes matter.
    pub fn k3(&self, f: &AminoChain, g: &AminoChain) -> f64 {
        let raw = self.raw_sum(f.residues(), g.residues());
        let value = if raw.is_finite() && raw < OVERFLOW_GUARD {
            raw
        } else {
            self.ln_raw_sum(f.residues(), g.residues()).exp()
        };
        if self.params.averaged {
            value / self.pair_count(f.len(), g.len())
        } else {
            value
        }
    }

    /// Natural log of [`StringKernel::k3`], finite for any chain lengths.
    pub fn ln_k3(&self, f: &AminoChain, g: &AminoChain) -> f64 {
        let raw = self.raw_sum(f.residues(), g.residues());
        let ln = if raw.is_finite() && raw < OVERFLOW_GUARD {
            raw.ln()
        } else {
            self.ln_raw_sum(f.residues(), g.residues())
        };
        if self.params.averaged {
            ln - self.pair_count(f.len(), g.len()).ln()
        } else {
            ln
        }
    }

    fn raw_sum(&self, f: &[u8], g: &[u8]) -> f64 {
        // Fixed argument order keeps the summation order, and so the
        // rounding, symmetric.
        let (f, g) = if f <= g { (f, g) } else { (g, f) };
        let cap = self.cap();
        let mut total = 0.0;
        for_each_diagonal(f.len(), g.len(), |i0, j0, len| {
            let a = |t: usize| self.k1(f[i0 + t], g[j0 + t]);
            if cap >= len {
                let mut acc = 0.0;
                for t in (0..len).rev() {
                    acc = a(t) * (1.0 + acc);
                    total += acc;
                }
            } else {
                for t in 0..len {
                    let mut prod = 1.0;
                    for l in 0..cap.min(len - t) {
                        prod *= a(t + l);
                        total += prod;
                    }
                }
            }
        });
        total
    }

    fn ln_raw_sum(&self, f: &[u8], g: &[u8]) -> f64 {
        let (f, g) = if f <= g { (f, g) } else { (g, f) };
        let cap = self.cap();
        let mut total = LogSum::default();
        for_each_diagonal(f.len(), g.len(), |i0, j0, len| {
            let ln_a = |t: usize| self.ln_k1(f[i0 + t], g[j0 + t]);
            if cap >= len {
                let mut acc = f64::NEG_INFINITY;
                for t in (0..len).rev() {
                    acc = ln_a(t) + softplus(acc);
                    total.add(acc);
                }
            } else {
                for t in 0..len {
                    let mut prod = 0.0;
                    for l in 0..cap.min(len - t) {
                        prod += ln_a(t + l);
                        total.add(prod);
                    }
                }
            }
        });
        total.value()
    }

    /// Correlation-normalized kernel, in `(0, 1]`.
    pub fn k3_hat(&self, f: &AminoChain, g: &AminoChain) -> f64 {
        if f == g {
            return 1.0;
        }
        let (fg, ff, gg) = (self.k3(f, g), self.k3(f, f), self.k3(g, g));
        let value = if [fg, ff, gg].iter().all(|v| v.is_finite() && *v > 0.0) {
            fg / (ff * gg).sqrt()
        } else {
            (self.ln_k3(f, g) - 0.5 * (self.ln_k3(f, f) + self.ln_k3(g, g))).exp()
        };
        value.min(1.0)
    }

    /// Distance between the feature images of `f` and `g`:
    /// `sqrt(2 - 2 K3_hat(f, g))`.
    pub fn dist_rkhs(&self, f: &AminoChain, g: &AminoChain) -> f64 {
        (2.0 - 2.0 * self.k3_hat(f, g)).max(0.0).sqrt()
    }

    /// Monte Carlo estimate of `K3` from `samples` uniformly drawn substring
    /// pairs. Unbiased; converges to [`StringKernel::k3`].
    pub fn k3_sampled<R: Rng + ?Sized>(
        &self,
        f: &AminoChain,
        g: &AminoChain,
        samples: usize,
        rng: &mut R,
    ) -> f64 {
        let (fr, gr) = (f.residues(), g.residues());
        let top = fr.len().min(gr.len()).min(self.cap());
        let weights: Vec<f64> = (1..=top)
            .map(|l| ((fr.len() - l + 1) * (gr.len() - l + 1)) as f64)
            .collect();
        let total: f64 = weights.iter().sum();
        if samples == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for _ in 0..samples {
            let mut pick = rng.random::<f64>() * total;
            let mut len = top;
            for (l, w) in weights.iter().enumerate() {
                if pick < *w {
                    len = l + 1;
                    break;
                }
                pick -= w;
            }
            let i = rng.random_range(0..=fr.len() - len);
            let j = rng.random_range(0..=gr.len() - len);
            acc += self.k2_raw(&fr[i..i + len], &gr[j..j + len]);
        }
        let mean = acc / samples as f64;
        if self.params.averaged {
            mean
        } else {
            mean * total
        }
    }

    /// Gram matrix of `K3_hat` over the given chains.
    ///
    /// Identical sequences under different identifiers make the matrix
    /// singular; this is logged but allowed.
    pub fn gram(&self, ids: Vec<String>, chains: &[AminoChain]) -> Result<GramMatrix> {
        if chains.is_empty() {
            return Err(Error::Empty("gram over no chains".into()));
        }
        if ids.len() != chains.len() {
            return Err(Error::LengthMismatch(ids.len(), chains.len()));
        }
        warn_duplicates(chains);
        let values = self.gram_values(chains);
        let seqs: Vec<&str> = chains.iter().map(AminoChain::as_str).collect();
        let fp = fingerprint::kernel_fingerprint(&seqs, &self.params, true, &[]);
        GramMatrix::new(ids, values, fp)
    }

    /// Raw normalized Gram values without identifiers.
    pub fn gram_values(&self, chains: &[AminoChain]) -> nalgebra::DMatrix<f64> {
        let n = chains.len();
        let diag: Vec<f64> = chains.par_iter().map(|c| self.ln_k3(c, c)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..n)
                    .map(|j| {
                        if chains[i] == chains[j] {
                            1.0
                        } else {
                            let ln = self.ln_k3(&chains[i], &chains[j]);
                            (ln - 0.5 * (diag[i] + diag[j])).exp().min(1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut m = nalgebra::DMatrix::identity(n, n);
        for (i, row) in rows.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                let j = i + 1 + off;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Cross-kernel table: rows are `queries`, columns are `refs`.
    pub fn cross_values(
        &self,
        queries: &[AminoChain],
        refs: &[AminoChain],
    ) -> nalgebra::DMatrix<f64> {
        let ref_diag: Vec<f64> = refs.par_iter().map(|c| self.ln_k3(c, c)).collect();
        let rows: Vec<Vec<f64>> = queries
            .par_iter()
            .map(|q| {
                let dq = self.ln_k3(q, q);
                refs.iter()
                    .zip(&ref_diag)
                    .map(|(r, dr)| {
                        if q == r {
                            1.0
                        } else {
                            (self.ln_k3(q, r) - 0.5 * (dq + dr)).exp().min(1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        nalgebra::DMatrix::from_fn(queries.len(), refs.len(), |i, j| rows[i][j])
    }
}

fn warn_duplicates(chains: &[AminoChain]) {
    let mut seen = std::collections::HashSet::new();
    let dups = chains.iter().filter(|c| !seen.insert(c.as_str())).count();
    if dups > 0 {
        log::warn!("{dups} duplicate sequence(s) in gram input; matrix will be singular");
    }
}

/// Calls `visit(i0, j0, len)` for every diagonal of an `n x m` table.
fn for_each_diagonal(n: usize, m: usize, mut visit: impl FnMut(usize, usize, usize)) {
    for i0 in 0..n {
        visit(i0, 0, (n - i0).min(m));
    }
    for j0 in 1..m {
        visit(0, j0, n.min(m - j0));
    }
}

/// `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    scaled: f64,
}

impl Default for LogSum {
    fn default() -> Self {
        LogSum {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }
}

impl LogSum {
    fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.scaled = self.scaled * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.scaled += (x - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.scaled.ln()
    }
}
