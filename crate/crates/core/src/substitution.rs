//! Substitution kernels on the residue alphabet.
//!
//! Houses the BLOSUM62-2 odds-ratio table (the un-logged, un-rounded form of
//! BLOSUM62), recovery of the joint frequency table `Q` and its marginal `p`,
//! entrywise (Hadamard) powers, and spectral checks for positive definiteness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::chain::Alphabet;
use crate::error::{Error, Result};

/// Threshold above which an eigenvalue counts as positive.
pub const PD_TOLERANCE: f64 = 1e-10;

/// BLOSUM62-2 odds ratios `Q(x,y) / (p(x) p(y))`, rows and columns in
/// `ARNDCQEGHILKMFPSTWYV` order, 4 decimals.
#[rustfmt::skip]
#[allow(clippy::approx_constant)]
pub const BLOSUM62_2: [[f64; 20]; 20] = [
    [3.9029, 0.6127, 0.5883, 0.5446, 0.8680, 0.7568, 0.7413, 1.0569, 0.5694, 0.6325, 0.6019, 0.7754, 0.7232, 0.4649, 0.7541, 1.4721, 0.9844, 0.4165, 0.5426, 0.9365], // A
    [0.6127, 6.6656, 0.8586, 0.5732, 0.3089, 1.4058, 0.9608, 0.4500, 0.9170, 0.3548, 0.4739, 2.0768, 0.6226, 0.3807, 0.4815, 0.7672, 0.6778, 0.3951, 0.5560, 0.4201], // R
    [0.5883, 0.8586, 7.0941, 1.5539, 0.3978, 1.0006, 0.9113, 0.8637, 1.2220, 0.3279, 0.3100, 0.9398, 0.4745, 0.3543, 0.4999, 1.2315, 0.9842, 0.2778, 0.4860, 0.3690], // N
    [0.5446, 0.5732, 1.5539, 7.3979, 0.3015, 0.8971, 1.6878, 0.6343, 0.6786, 0.3390, 0.2866, 0.7841, 0.3465, 0.2990, 0.5987, 0.9135, 0.6948, 0.2321, 0.3457, 0.3365], // D
    [0.8680, 0.3089, 0.3978, 0.3015, 19.5766, 0.3658, 0.2859, 0.4204, 0.3550, 0.6535, 0.6423, 0.3491, 0.6114, 0.4390, 0.3796, 0.7384, 0.7406, 0.4500, 0.4342, 0.7558], // C
    [0.7568, 1.4058, 1.0006, 0.8971, 0.3658, 6.2444, 1.9017, 0.5386, 1.1680, 0.3829, 0.4773, 1.5543, 0.8643, 0.3340, 0.6413, 0.9656, 0.7913, 0.5094, 0.6111, 0.4668], // Q
    [0.7413, 0.9608, 0.9113, 1.6878, 0.2859, 1.9017, 5.4695, 0.4813, 0.9600, 0.3305, 0.3729, 1.3083, 0.5003, 0.3307, 0.6792, 0.9504, 0.7414, 0.3743, 0.4965, 0.4289], // E
    [1.0569, 0.4500, 0.8637, 0.6343, 0.4204, 0.5386, 0.4813, 6.8763, 0.4930, 0.2750, 0.2845, 0.5889, 0.3955, 0.3406, 0.4774, 0.9036, 0.5793, 0.4217, 0.3487, 0.3370], // G
    [0.5694, 0.9170, 1.2220, 0.6786, 0.3550, 1.1680, 0.9600, 0.4930, 13.5060, 0.3263, 0.3807, 0.7789, 0.5841, 0.6520, 0.4729, 0.7367, 0.5575, 0.4441, 1.7979, 0.3394], // H
    [0.6325, 0.3548, 0.3279, 0.3390, 0.6535, 0.3829, 0.3305, 0.2750, 0.3263, 3.9979, 1.6944, 0.3964, 1.4777, 0.9458, 0.3847, 0.4432, 0.7798, 0.4089, 0.6304, 2.4175], // I
    [0.6019, 0.4739, 0.3100, 0.2866, 0.6423, 0.4773, 0.3729, 0.2845, 0.3807, 1.6944, 3.7966, 0.4283, 1.9943, 1.1546, 0.3711, 0.4289, 0.6603, 0.5680, 0.6921, 1.3142], // L
    [0.7754, 2.0768, 0.9398, 0.7841, 0.3491, 1.5543, 1.3083, 0.5889, 0.7789, 0.3964, 0.4283, 4.7643, 0.6253, 0.3440, 0.7038, 0.9319, 0.7929, 0.3589, 0.5322, 0.4565], // K
    [0.7232, 0.6226, 0.4745, 0.3465, 0.6114, 0.8643, 0.5003, 0.3955, 0.5841, 1.4777, 1.9943, 0.6253, 6.4815, 1.0044, 0.4239, 0.5986, 0.7938, 0.6103, 0.7084, 1.2689], // M
    [0.4649, 0.3807, 0.3543, 0.2990, 0.4390, 0.3340, 0.3307, 0.3406, 0.6520, 0.9458, 1.1546, 0.3440, 1.0044, 8.1288, 0.2874, 0.4400, 0.4817, 1.3744, 2.7694, 0.7451], // F
    [0.7541, 0.4815, 0.4999, 0.5987, 0.3796, 0.6413, 0.6792, 0.4774, 0.4729, 0.3847, 0.3711, 0.7038, 0.4239, 0.2874, 12.8375, 0.7555, 0.6889, 0.2818, 0.3635, 0.4431], // P
    [1.4721, 0.7672, 1.2315, 0.9135, 0.7384, 0.9656, 0.9504, 0.9036, 0.7367, 0.4432, 0.4289, 0.9319, 0.5986, 0.4400, 0.7555, 3.8428, 1.6139, 0.3853, 0.5575, 0.5652], // S
    [0.9844, 0.6778, 0.9842, 0.6948, 0.7406, 0.7913, 0.7414, 0.5793, 0.5575, 0.7798, 0.6603, 0.7929, 0.7938, 0.4817, 0.6889, 1.6139, 4.8321, 0.4309, 0.5732, 0.9809], // T
    [0.4165, 0.3951, 0.2778, 0.2321, 0.4500, 0.5094, 0.3743, 0.4217, 0.4441, 0.4089, 0.5680, 0.3589, 0.6103, 1.3744, 0.2818, 0.3853, 0.4309, 38.1078, 2.1098, 0.3745], // W
    [0.5426, 0.5560, 0.4860, 0.3457, 0.4342, 0.6111, 0.4965, 0.3487, 1.7979, 0.6304, 0.6921, 0.5322, 0.7084, 2.7694, 0.3635, 0.5575, 0.5732, 2.1098, 9.8322, 0.6580], // Y
    [0.9365, 0.4201, 0.3690, 0.3365, 0.7558, 0.4668, 0.4289, 0.3370, 0.3394, 2.4175, 1.3142, 0.4565, 1.2689, 0.7451, 0.4431, 0.5652, 0.9809, 0.3745, 0.6580, 3.6922], // V
];

/// A positive symmetric similarity table over an alphabet, raised entrywise
/// to the power `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionKernel {
    alphabet: Alphabet,
    values: DMatrix<f64>,
    beta: f64,
}

/// Joint probability mass over symbol pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFrequencyTable {
    pub q: DMatrix<f64>,
}

/// Marginal distribution over the alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDistribution {
    pub p: DVector<f64>,
}

/// Spectral summary of a symmetric table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdReport {
    pub min_eigenvalue: f64,
    /// Smallest eigenvalue of the Hadamard log restricted to the zero-sum
    /// subspace. `None` when some entry is not positive.
    pub log_min_eigenvalue: Option<f64>,
    pub conditionally_pd: bool,
}

impl PdReport {
    pub fn is_pd(&self) -> bool {
        self.min_eigenvalue > PD_TOLERANCE
    }
}

/// The embedded BLOSUM62-2 table with `beta = 1`.
pub fn load_blosum62_2() -> SubstitutionKernel {
    let values = DMatrix::from_fn(20, 20, |i, j| BLOSUM62_2[i][j]);
    SubstitutionKernel {
        alphabet: Alphabet::amino(),
        values,
        beta: 1.0,
    }
}

impl SubstitutionKernel {
    /// Builds a kernel from a square table, which must be exactly symmetric
    /// with positive entries.
    pub fn new(alphabet: Alphabet, values: DMatrix<f64>) -> Result<Self> {
        let n = alphabet.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::LengthMismatch(values.nrows(), n));
        }
        check_symmetric(&values)?;
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "substitution entries must be positive, found {v}"
            )));
        }
        Ok(SubstitutionKernel {
            alphabet,
            values,
            beta: 1.0,
        })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn size(&self) -> usize {
        self.alphabet.len()
    }

    /// Entry by alphabet index.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Entry by symbol, e.g. `k.lookup(b'A', b'R')`.
    pub fn lookup(&self, x: u8, y: u8) -> Option<f64> {
        let i = self.alphabet.index_of(x)?;
        let j = self.alphabet.index_of(y)?;
        Some(self.values[(i, j)])
    }

    /// Entrywise power. The resulting `beta` is the product of exponents.
    pub fn hadamard_power(&self, beta: f64) -> Result<SubstitutionKernel> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Hadamard exponent must be positive, got {beta}"
            )));
        }
        let values = if beta == 1.0 {
            self.values.clone()
        } else {
            self.values.map(|v| v.powf(beta))
        };
        Ok(SubstitutionKernel {
            alphabet: self.alphabet.clone(),
            values,
            beta: self.beta * beta,
        })
    }

    /// Solves `B p = 1`, recovering the marginal distribution of the
    /// underlying joint table.
    pub fn marginal(&self) -> Result<MarginalDistribution> {
        let n = self.size();
        let lu = self.values.clone().lu();
        let p = lu
            .solve(&DVector::from_element(n, 1.0))
            .ok_or_else(|| Error::Singular("substitution table".into()))?;
        if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| v.is_nan() || **v <= 0.0) {
            return Err(Error::Numeric(format!(
                "recovered marginal has non-positive entry {v} at {}",
                self.alphabet.symbol(i) as char
            )));
        }
        Ok(MarginalDistribution { p })
    }

    /// `q(x,y) = B(x,y) p(x) p(y)`.
    pub fn recover_joint(&self, marginal: &MarginalDistribution) -> Result<JointFrequencyTable> {
        let n = self.size();
        if marginal.p.len() != n {
            return Err(Error::LengthMismatch(marginal.p.len(), n));
        }
        let p = &marginal.p;
        let q = DMatrix::from_fn(n, n, |i, j| self.values[(i, j)] * p[i] * p[j]);
        Ok(JointFrequencyTable { q })
    }

    pub fn pd_report(&self) -> PdReport {
        pd_report(&self.values).expect("substitution kernels are symmetric")
    }

    /// Tab-separated dump: a header of symbols, then one row per symbol.
    pub fn to_tsv(&self) -> String {
        let syms: Vec<String> = self
            .alphabet
            .symbols()
            .iter()
            .map(|&s| (s as char).to_string())
            .collect();
        let mut out = String::new();
        out.push('\t');
        out.push_str(&syms.join("\t"));
        out.push('\n');
        for (i, s) in syms.iter().enumerate() {
            out.push_str(s);
            for j in 0..self.size() {
                out.push_str(&format!("\t{:.4}", self.values[(i, j)]));
            }
            out.push('\n');
        }
        out
    }
}

impl MarginalDistribution {
    pub fn sum(&self) -> f64 {
        self.p.sum()
    }
}

impl JointFrequencyTable {
    pub fn total(&self) -> f64 {
        self.q.sum()
    }

    pub fn row_sums(&self) -> DVector<f64> {
        DVector::from_iterator(self.q.nrows(), self.q.row_iter().map(|r| r.sum()))
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::LengthMismatch(m.nrows(), m.ncols()));
    }
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if m[(i, j)] != m[(j, i)] {
                return Err(Error::Asymmetric(i, j));
            }
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NAN;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Orthonormal basis of `{v : sum(v) = 0}` in `R^n`, as the columns of an
/// `n x (n-1)` matrix (Helmert contrasts).
pub fn zero_sum_basis(n: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(n, n.saturating_sub(1));
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            u[(i, k - 1)] = 1.0 / norm;
        }
        u[(k, k - 1)] = -(k as f64) / norm;
    }
    u
}

/// Minimum eigenvalue of `m`, plus the conditional positive-definiteness of
/// its Hadamard log on the zero-sum subspace.
///
/// By the Horn–Johnson criterion, a positive symmetric matrix has every
/// positive Hadamard power positive definite iff its Hadamard log is
/// conditionally positive definite.
pub fn pd_report(m: &DMatrix<f64>) -> Result<PdReport> {
    check_symmetric(m)?;
    let min_eigenvalue = min_eigenvalue(m);
    let log_min_eigenvalue = if m.iter().all(|v| *v > 0.0) && m.nrows() >= 2 {
        let log = m.map(f64::ln);
        let u = zero_sum_basis(m.nrows());
        let projected = u.transpose() * log * &u;
        // Symmetrize away rounding from the triple product.
        let projected = (&projected + projected.transpose()) * 0.5;
        Some(min_eigenvalue_of(projected))
    } else {
        None
    };
    Ok(PdReport {
        min_eigenvalue,
        log_min_eigenvalue,
        conditionally_pd: log_min_eigenvalue.is_some_and(|v| v > PD_TOLERANCE),
    })
}

fn min_eigenvalue_of(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.min()
}
