//! Amino-acid string kernels built on BLOSUM62, kernel ridge regression for
//! peptide binding affinity, and OWA-linkage clustering of HLA alleles.

pub mod chain;
pub mod cli;
pub mod cluster;
pub mod error;
pub mod fingerprint;
pub mod gram;
pub mod ingest;
pub mod kernel;
pub mod pipeline;
pub mod regression;
pub mod selftest;
pub mod substitution;
pub mod synthetic;

pub use chain::{validate_chain, Alphabet, AminoChain};
pub use cluster::{
    agglomerate, diameter, owa_linkage, owa_weights, ClusterTree, DistanceMatrix, OwaParams,
};
pub use error::{Error, ErrorClass, Result};
pub use gram::{pan_gram, pan_kernel, GramMatrix, PanPoint};
pub use ingest::{
    build_registry, normal_form, parse_fasta, AlleleName, AlleleRegistry, MarkerConvention,
};
pub use kernel::{KernelParams, StringKernel};
pub use pipeline::{
    auc, normalize_ic50, rmse, BindingDataset, BindingRecord, MetricsReport, NormalizationSpec,
};
pub use regression::{
    fit, grid_search, loo_residuals, predict, GridSpec, ParamSeq, RlsModel, TrainingSet,
};
pub use substitution::{load_blosum62_2, PdReport, SubstitutionKernel};
