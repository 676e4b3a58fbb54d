//! Seeded synthetic data: random chains, planted mutant families and
//! labels drawn from a known kernel model.

use rand::seq::index::sample;
use rand::Rng;

use crate::chain::{AminoChain, AMINO_SYMBOLS};
use crate::error::Result;
use crate::kernel::StringKernel;

pub fn random_chain<R: Rng + ?Sized>(len: usize, rng: &mut R) -> AminoChain {
    let text: String = (0..len.max(1))
        .map(|_| AMINO_SYMBOLS[rng.random_range(0..AMINO_SYMBOLS.len())] as char)
        .collect();
    AminoChain::parse(&text).expect("alphabet symbols")
}

/// Copy of `seed` with `mutations` point substitutions at distinct
/// positions, each to a different residue.
pub fn point_mutant<R: Rng + ?Sized>(
    seed: &AminoChain,
    mutations: usize,
    rng: &mut R,
) -> AminoChain {
    let mut bytes: Vec<u8> = seed.as_str().bytes().collect();
    for pos in sample(rng, bytes.len(), mutations.min(bytes.len())) {
        let old = bytes[pos];
        let mut new = old;
        while new == old {
            new = AMINO_SYMBOLS[rng.random_range(0..AMINO_SYMBOLS.len())];
        }
        bytes[pos] = new;
    }
    AminoChain::parse(std::str::from_utf8(&bytes).expect("ascii")).expect("alphabet symbols")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedFamilies {
    pub ids: Vec<String>,
    pub chains: Vec<AminoChain>,
    /// Family index of each chain.
    pub family: Vec<usize>,
}

/// `families` random seeds of length `len`, each with `per_family` distinct
/// point mutants carrying `mutations` substitutions.
pub fn planted_families<R: Rng + ?Sized>(
    families: usize,
    per_family: usize,
    len: usize,
    mutations: usize,
    rng: &mut R,
) -> PlantedFamilies {
    let mut out = PlantedFamilies {
        ids: Vec::new(),
        chains: Vec::new(),
        family: Vec::new(),
    };
    let mut seen = std::collections::HashSet::new();
    for f in 0..families {
        let seed = random_chain(len, rng);
        let mut k = 0;
        while k < per_family {
            let m = point_mutant(&seed, mutations, rng);
            if seen.insert(m.as_str().to_string()) {
                out.ids.push(format!("F{}_{}", f + 1, k + 1));
                out.chains.push(m);
                out.family.push(f);
                k += 1;
            }
        }
    }
    out
}

/// Labels `y = s * sum_j c_j K(x, z_j)` with random centers `z_j`, weights
/// `c_j` uniform in `[0, 1]`, and `s` chosen so the median label equals
/// `median`. Values above 1 are clipped.
pub fn kernel_model_labels<R: Rng + ?Sized>(
    chains: &[AminoChain],
    kernel: &StringKernel,
    centers: usize,
    center_len: usize,
    median: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let z: Vec<AminoChain> = (0..centers)
        .map(|_| random_chain(center_len, rng))
        .collect();
    let c: Vec<f64> = (0..centers).map(|_| rng.random::<f64>()).collect();
    let cross = kernel.cross_values(chains, &z);
    let f: Vec<f64> = (0..chains.len())
        .map(|i| (0..centers).map(|j| c[j] * cross[(i, j)]).sum())
        .collect();
    let mut sorted = f.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted[sorted.len() / 2];
    let s = if mid > 0.0 { median / mid } else { 1.0 };
    Ok(f.into_iter().map(|v| (s * v).clamp(0.0, 1.0)).collect())
}

/// Pan-allele labels `y = s * sum_j c_j K_a(a, a_j) K_p(p, z_j)` over
/// `pairs` of (allele index, peptide index). Allele centers `a_j` are drawn
/// from `alleles`, peptide centers are random chains, and `s` scales the
/// largest label to 1.
#[allow(clippy::too_many_arguments)]
pub fn pan_model_labels<R: Rng + ?Sized>(
    alleles: &[AminoChain],
    peptides: &[AminoChain],
    pairs: &[(usize, usize)],
    allele_kernel: &StringKernel,
    peptide_kernel: &StringKernel,
    centers: usize,
    center_len: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let ca: Vec<usize> = (0..centers)
        .map(|_| rng.random_range(0..alleles.len()))
        .collect();
    let cp: Vec<AminoChain> = (0..centers)
        .map(|_| random_chain(center_len, rng))
        .collect();
    let w: Vec<f64> = (0..centers).map(|_| rng.random::<f64>()).collect();
    let ag = allele_kernel.gram_values(alleles);
    let xp = peptide_kernel.cross_values(peptides, &cp);
    let f: Vec<f64> = pairs
        .iter()
        .map(|&(a, p)| {
            (0..centers)
                .map(|j| w[j] * ag[(a, ca[j])] * xp[(p, j)])
                .sum()
        })
        .collect();
    let top = f.iter().copied().fold(0.0, f64::max);
    let s = if top > 0.0 { 1.0 / top } else { 1.0 };
    Ok(f.into_iter().map(|v| (s * v).clamp(0.0, 1.0)).collect())
}
