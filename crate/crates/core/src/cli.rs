//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::chain::AminoChain;
use crate::cluster::{agglomerate, DistanceMatrix, HeightKind, OwaParams};
use crate::error::{Error, ErrorClass, Result};
use crate::fingerprint;
use crate::gram::GramMatrix;
use crate::ingest::{
    build_registry, parse_fasta_lenient, AlleleRegistry, MarkerConvention, RegistryOptions,
};
use crate::kernel::{KernelParams, StringKernel};
use crate::pipeline::{
    choices_tsv, ingest_binding_tsv, modulus_of_continuity, predictions_tsv, run_fixed_allele,
    run_pan_allele, FixedAlleleOptions, IngestOptions, NormalizationSpec, PanAlleleOptions,
    PipelineRun, ValueKind,
};
use crate::regression::{GridSpec, ParamSeq};
use crate::selftest;

pub const CACHE_ENV: &str = "AMINOKERNEL_CACHE_DIR";
const DEFAULT_CACHE_DIR: &str = ".aminokernel-cache";
const DEFAULT_SEED: u64 = 20_240_607;

#[derive(Debug, Parser)]
#[command(
    name = "aminokernel",
    version,
    about = "Amino-acid string kernels, affinity regression and allele clustering"
)]
struct Cli {
    /// TOML file with defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build (or load from cache) a normalized Gram matrix.
    Gram(GramArgs),
    /// Per-allele cross-validated prediction.
    PredictFixed(FixedArgs),
    /// Pan-allele cross-validated prediction.
    PredictPan(PanArgs),
    /// Registry, distance matrix, OWA tree and cut summary.
    Cluster(ClusterArgs),
    /// FASTA to deduplicated normal forms.
    Registry(RegistryArgs),
    /// Offline property checks.
    Selftest,
}

#[derive(Debug, Args)]
struct GramArgs {
    /// FASTA file, or TSV of `id<TAB>sequence`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    averaged: bool,
    /// Use RFL..TVQ normal forms of FASTA records.
    #[arg(long)]
    normal_form: bool,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegistryShared {
    /// Allele families to drop, e.g. DRB1*11.
    #[arg(long = "exclude-family")]
    exclude_family: Vec<String>,
    /// Keep null (N-suffixed) alleles.
    #[arg(long)]
    keep_null: bool,
    #[arg(long)]
    markers: Option<MarkerConvention>,
}

#[derive(Debug, Args)]
struct RegistryArgs {
    #[arg(long)]
    fasta: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    shared: RegistryShared,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    fasta: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Number of clusters in the cut summary.
    #[arg(long)]
    k: Option<usize>,
    /// Distance reference set: `full` (all deduplicated alleles) or `subset`.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    shared: RegistryShared,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Binding TSV: allele, peptide, value, [fold].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `ic50` or `normalized`.
    #[arg(long)]
    value: Option<String>,
    #[arg(long)]
    base: Option<f64>,
    /// Lambda grid: `geom:START:END:COUNT`, `exp:FROM:TO` or a comma list.
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Assign this many random folds to records without one.
    #[arg(long)]
    assign_folds: Option<u32>,
}

#[derive(Debug, Args)]
struct FixedArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Beta grid, same syntax as --lambdas.
    #[arg(long)]
    betas: Option<String>,
    /// Also report the modulus of continuity of each allele's predictions.
    #[arg(long)]
    modulus: bool,
}

#[derive(Debug, Args)]
struct PanArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Allele sequences (FASTA) resolved through the registry.
    #[arg(long)]
    fasta: Option<PathBuf>,
    #[arg(long)]
    beta_peptide: Option<f64>,
    /// Allele beta grid, same syntax as --lambdas.
    #[arg(long)]
    beta_alleles: Option<String>,
    #[arg(long)]
    markers: Option<MarkerConvention>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", class_name(e.class()));
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn class_name(c: ErrorClass) -> &'static str {
    match c {
        ErrorClass::Usage => "usage",
        ErrorClass::Data => "data",
        ErrorClass::Numeric => "numeric",
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let threads = cli.threads.or(config.usize("", "threads")?);
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        // Fails only if a global pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let ctx = Context {
        seed: cli.seed.or(config.u64("", "seed")?).unwrap_or(DEFAULT_SEED),
        threads: rayon::current_num_threads(),
        config,
    };
    match cli.command {
        Command::Gram(a) => cmd_gram(&ctx, a),
        Command::PredictFixed(a) => cmd_fixed(&ctx, a),
        Command::PredictPan(a) => cmd_pan(&ctx, a),
        Command::Cluster(a) => cmd_cluster(&ctx, a),
        Command::Registry(a) => cmd_registry(&ctx, a),
        Command::Selftest => cmd_selftest(&ctx),
    }
}

struct Context {
    seed: u64,
    threads: usize,
    config: Config,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

/// Optional TOML defaults. Keys are looked up in the command's table
/// (e.g. `[cluster]`) and then at top level.
#[derive(Debug, Default)]
struct Config {
    table: toml::Table,
}

impl Config {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        Ok(Config { table })
    }

    fn value(&self, section: &str, key: &str) -> Option<&toml::Value> {
        self.table
            .get(section)
            .and_then(|s| s.as_table())
            .and_then(|t| t.get(key))
            .or_else(|| self.table.get(key))
    }

    fn f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(*f)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(usage(format!(
                "config key {key}: expected a number, got {v}"
            ))),
        }
    }

    fn u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => Err(usage(format!(
                "config key {key}: expected a non-negative integer, got {v}"
            ))),
        }
    }

    fn usize(&self, section: &str, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(section, key)?.map(|v| v as usize))
    }

    fn bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(*b)),
            Some(v) => Err(usage(format!(
                "config key {key}: expected a boolean, got {v}"
            ))),
        }
    }

    fn string(&self, section: &str, key: &str) -> Result<Option<String>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(toml::Value::Array(a)) => Ok(Some(
                a.iter()
                    .map(|v| match v {
                        toml::Value::Float(f) => Ok(f.to_string()),
                        toml::Value::Integer(i) => Ok(i.to_string()),
                        toml::Value::String(s) => Ok(s.clone()),
                        other => Err(usage(format!("config key {key}: unexpected {other}"))),
                    })
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
            )),
            Some(v) => Err(usage(format!(
                "config key {key}: expected a string, got {v}"
            ))),
        }
    }

    fn strings(&self, section: &str, key: &str) -> Result<Vec<String>> {
        Ok(self
            .string(section, key)?
            .map(|s| {
                s.split(',')
                    .map(|x| x.trim().to_string())
                    .filter(|x| !x.is_empty())
                    .collect()
            })
            .unwrap_or_default())
    }

    fn path(&self, section: &str, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(section, key)?.map(PathBuf::from))
    }
}

fn existing(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| usage(format!("missing required {what}")))?;
    if !p.exists() {
        return Err(usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

/// Parses `geom:START:END:COUNT`, `exp:FROM:TO` (e^n for integer n) or a
/// comma-separated list.
pub fn parse_param_seq(text: &str) -> Result<ParamSeq> {
    let t = text.trim();
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("bad number {s:?} in {t:?}")))
    };
    let seq = if let Some(rest) = t.strip_prefix("geom:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(usage(format!("expected geom:START:END:COUNT, got {t:?}")));
        }
        let count = parts[2]
            .trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("bad count in {t:?}")))?;
        ParamSeq::geometric(num(parts[0])?, num(parts[1])?, count)
    } else if let Some(rest) = t.strip_prefix("exp:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let ints: Vec<i32> = parts
            .iter()
            .map(|p| {
                p.trim()
                    .parse::<i32>()
                    .map_err(|_| usage(format!("bad exponent in {t:?}")))
            })
            .collect::<Result<_>>()?;
        if ints.len() != 2 || ints[0] > ints[1] {
            return Err(usage(format!("expected exp:FROM:TO, got {t:?}")));
        }
        ParamSeq::list((ints[0]..=ints[1]).map(|n| (n as f64).exp()).collect())
    } else {
        ParamSeq::list(
            t.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(num)
                .collect::<Result<_>>()?,
        )
    };
    seq.values()?;
    Ok(seq)
}

/// Files written by a command; removed again unless `commit` is called.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(&dir)?;
        Ok(Outputs {
            dir,
            created_dir,
            written: Vec::new(),
            committed: false,
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, contents)?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .map(|p| p.display().to_string())
            .collect()
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

fn digest_file(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path)?;
    let hash = Sha256::digest(&bytes);
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    format_version: u32,
    command: &'static str,
    seed: u64,
    threads: usize,
    parameters: serde_json::Value,
    inputs: Vec<InputDigest>,
    fingerprints: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(
        ctx: &Context,
        command: &'static str,
        parameters: serde_json::Value,
        inputs: &[&Path],
    ) -> Result<Self> {
        Ok(Manifest {
            tool: "aminokernel",
            version: env!("CARGO_PKG_VERSION"),
            format_version: fingerprint::FORMAT_VERSION,
            command,
            seed: ctx.seed,
            threads: ctx.threads,
            parameters,
            inputs: inputs
                .iter()
                .map(|p| digest_file(p))
                .collect::<Result<_>>()?,
            fingerprints: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn cache_dir(flag: Option<PathBuf>, ctx: &Context, section: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(p) = std::env::var(CACHE_ENV) {
        if !p.is_empty() {
            return Ok(PathBuf::from(p));
        }
    }
    Ok(ctx
        .config
        .path(section, "cache-dir")?
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR)))
}

/// Gram matrix over `(ids, chains)`, served from `cache` when a file with a
/// matching key exists. `extra` is folded into the fingerprint. Returns the
/// matrix and whether it was a cache hit.
pub fn cached_gram(
    kernel: &StringKernel,
    ids: Vec<String>,
    chains: &[AminoChain],
    cache: &Path,
    extra: &[(&str, &str)],
) -> Result<(GramMatrix, bool)> {
    let seqs: Vec<&str> = chains.iter().map(AminoChain::as_str).collect();
    let fp = fingerprint::kernel_fingerprint(&seqs, kernel.params(), true, extra);
    let mut parts = vec![fp.clone()];
    parts.extend(ids.iter().cloned());
    parts.extend(seqs.iter().map(|s| s.to_string()));
    let key = fingerprint::hash_parts(&parts);
    let path = cache.join(format!("{key}.akgram"));
    if path.exists() {
        match GramMatrix::load(&path, Some(&fp)) {
            Ok(g) if g.index() == ids.as_slice() => {
                log::info!("gram cache hit {}", path.display());
                return Ok((g, true));
            }
            Ok(_) => log::warn!("cache {} has a different index; rebuilding", path.display()),
            Err(e) => log::warn!("unusable cache {}: {e}; rebuilding", path.display()),
        }
    }
    if chains.is_empty() {
        return Err(Error::Empty("gram over no chains".into()));
    }
    let g = GramMatrix::new(ids, kernel.gram_values(chains), fp)?;
    fs::create_dir_all(cache)?;
    let mut bytes = Vec::new();
    g.write_cache(&mut bytes)?;
    write_atomic(&path, &bytes)?;
    Ok((g, false))
}

fn read_fasta_registry(path: &Path, options: &RegistryOptions) -> Result<AlleleRegistry> {
    let parsed = parse_fasta_lenient(BufReader::new(fs::File::open(path)?))?;
    for r in &parsed.rejected {
        log::warn!(
            "{}:{}: record skipped: {}",
            path.display(),
            r.line,
            r.reason
        );
    }
    if parsed.records.is_empty() {
        return Err(Error::Empty(format!(
            "no usable records in {}",
            path.display()
        )));
    }
    Ok(build_registry(&parsed.records, options))
}

fn registry_options(
    ctx: &Context,
    section: &str,
    shared: RegistryShared,
) -> Result<RegistryOptions> {
    let mut exclude = shared.exclude_family;
    if exclude.is_empty() {
        exclude = ctx.config.strings(section, "exclude-family")?;
    }
    let keep_null = shared.keep_null || ctx.config.bool(section, "keep-null")?.unwrap_or(false);
    let markers = match shared.markers {
        Some(m) => m,
        None => ctx
            .config
            .string(section, "markers")?
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or_default(),
    };
    Ok(RegistryOptions {
        exclude_families: exclude,
        drop_nonexpressed: !keep_null,
        markers,
    })
}

fn read_sequences(
    path: &Path,
    normal_form: bool,
    markers: MarkerConvention,
) -> Result<(Vec<String>, Vec<AminoChain>)> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('>') {
        let parsed = crate::ingest::parse_fasta(text.as_bytes())?;
        let mut ids = Vec::new();
        let mut chains = Vec::new();
        for r in parsed {
            let chain = if normal_form {
                crate::ingest::normal_form(&r.sequence, markers)
                    .map_err(|e| Error::NormalForm {
                        name: r.name.raw().to_string(),
                        reason: e.to_string(),
                    })?
                    .chain
            } else {
                AminoChain::parse(&r.sequence)?
            };
            ids.push(r.name.raw().to_string());
            chains.push(chain);
        }
        return Ok((ids, chains));
    }
    let mut ids = Vec::new();
    let mut chains = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected id<TAB>sequence, found {} columns", cols.len()),
            });
        }
        let chain = AminoChain::parse(cols[1]).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        ids.push(cols[0].to_string());
        chains.push(chain);
    }
    Ok((ids, chains))
}

fn cmd_gram(ctx: &Context, a: GramArgs) -> Result<()> {
    let cfg = &ctx.config;
    let input = existing(a.input.or(cfg.path("gram", "input")?), "--input")?;
    let out = a
        .out
        .or(cfg.path("gram", "out")?)
        .ok_or_else(|| usage("missing required --out"))?;
    let beta = a.beta.or(cfg.f64("gram", "beta")?).unwrap_or(0.11387);
    let k_max = a.k_max.or(cfg.usize("gram", "k-max")?);
    let averaged = a.averaged || cfg.bool("gram", "averaged")?.unwrap_or(false);
    let normal_form = a.normal_form || cfg.bool("gram", "normal-form")?.unwrap_or(false);
    let params = KernelParams::new(beta)?
        .with_k_max(k_max)?
        .with_averaged(averaged);
    let cache = cache_dir(a.cache_dir, ctx, "gram")?;

    let (ids, chains) = read_sequences(&input, normal_form, MarkerConvention::Inclusive)?;
    let kernel = StringKernel::blosum(params)?;
    let extra: &[(&str, &str)] = if normal_form {
        &[("markers", "inclusive")]
    } else {
        &[]
    };
    let (gram, hit) = cached_gram(&kernel, ids, &chains, &cache, extra)?;

    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let name = out
        .file_name()
        .ok_or_else(|| usage("--out must name a file"))?
        .to_string_lossy()
        .to_string();
    let mut outputs = Outputs::new(dir)?;
    outputs.write(&name, gram.to_tsv().as_bytes())?;
    let mut manifest = Manifest::new(
        ctx,
        "gram",
        json!({"beta": beta, "k_max": k_max, "averaged": averaged, "normal_form": normal_form,
               "cache_dir": cache.display().to_string(), "cache_hit": hit}),
        &[&input],
    )?;
    manifest
        .fingerprints
        .insert("gram".into(), gram.fingerprint().to_string());
    manifest.outputs = outputs.names();
    outputs.write(
        &format!("{name}.manifest.json"),
        manifest.to_json()?.as_bytes(),
    )?;
    outputs.commit();
    println!(
        "gram {}x{} {} ({})",
        gram.len(),
        gram.len(),
        gram.fingerprint(),
        if hit { "cached" } else { "computed" }
    );
    Ok(())
}

fn cmd_registry(ctx: &Context, a: RegistryArgs) -> Result<()> {
    let fasta = existing(a.fasta.or(ctx.config.path("registry", "fasta")?), "--fasta")?;
    let out_dir = a
        .out_dir
        .or(ctx.config.path("registry", "out-dir")?)
        .ok_or_else(|| usage("missing required --out-dir"))?;
    let options = registry_options(ctx, "registry", a.shared)?;
    let registry = read_fasta_registry(&fasta, &options)?;
    let mut outputs = Outputs::new(out_dir)?;
    outputs.write("registry.tsv", registry.registry_tsv().as_bytes())?;
    outputs.write("exclusions.tsv", registry.exclusions_tsv().as_bytes())?;
    let mut fasta_out = String::new();
    for r in registry.to_records() {
        fasta_out.push_str(&format!(">{}\n{}\n", r.header, r.sequence));
    }
    outputs.write("normal_forms.fasta", fasta_out.as_bytes())?;
    let mut manifest = Manifest::new(
        ctx,
        "registry",
        json!({"exclude_families": options.exclude_families, "drop_nonexpressed": options.drop_nonexpressed,
               "markers": options.markers.as_str()}),
        &[&fasta],
    )?;
    let forms: Vec<&str> = registry
        .entries
        .iter()
        .map(|e| e.normal_form.chain.as_str())
        .collect();
    manifest
        .fingerprints
        .insert("registry".into(), fingerprint::hash_parts(&forms));
    manifest.outputs = outputs.names();
    outputs.write("manifest.json", manifest.to_json()?.as_bytes())?;
    outputs.commit();
    println!(
        "registry: {} entries, {} exclusions",
        registry.len(),
        registry.exclusions.len()
    );
    Ok(())
}

fn cmd_cluster(ctx: &Context, a: ClusterArgs) -> Result<()> {
    let cfg = &ctx.config;
    let fasta = existing(a.fasta.or(cfg.path("cluster", "fasta")?), "--fasta")?;
    let out_dir = a
        .out_dir
        .or(cfg.path("cluster", "out-dir")?)
        .ok_or_else(|| usage("missing required --out-dir"))?;
    let beta = a.beta.or(cfg.f64("cluster", "beta")?).unwrap_or(0.06);
    let k_max = a.k_max.or(cfg.usize("cluster", "k-max")?);
    let gamma = a.gamma.or(cfg.f64("cluster", "gamma")?).unwrap_or(0.1);
    let k = a.k.or(cfg.usize("cluster", "k")?).unwrap_or(16);
    let reference = a
        .reference
        .or(cfg.string("cluster", "reference")?)
        .unwrap_or_else(|| "full".into());
    let owa = OwaParams::new(gamma)?;
    let params = KernelParams::new(beta)?.with_k_max(k_max)?;
    let cache = cache_dir(a.cache_dir, ctx, "cluster")?;
    let options = registry_options(ctx, "cluster", a.shared)?;

    let registry = read_fasta_registry(&fasta, &options)?;
    if registry.len() < 2 {
        return Err(Error::Empty(format!(
            "registry has {} entries; need at least 2",
            registry.len()
        )));
    }
    if k > registry.len() {
        return Err(usage(format!(
            "cannot cut {} alleles into {k} clusters",
            registry.len()
        )));
    }
    let reference_entries = match reference.as_str() {
        "full" => registry.reference_entries(),
        "subset" => registry.entries.iter().collect(),
        other => {
            return Err(usage(format!(
                "--reference must be full or subset, got {other}"
            )))
        }
    };
    let ids: Vec<String> = reference_entries
        .iter()
        .map(|e| e.name.raw().to_string())
        .collect();
    let chains: Vec<AminoChain> = reference_entries
        .iter()
        .map(|e| e.normal_form.chain.clone())
        .collect();
    let kernel = StringKernel::blosum(params)?;
    let (gram, hit) = cached_gram(
        &kernel,
        ids,
        &chains,
        &cache,
        &[("markers", options.markers.as_str())],
    )?;
    let keep: Vec<usize> = registry
        .entries
        .iter()
        .map(|e| gram.resolve(e.name.raw()))
        .collect::<Result<_>>()?;
    let dist = DistanceMatrix::from_gram(&gram, &keep)?;
    let tree = agglomerate(&dist, &owa)?;

    let mut outputs = Outputs::new(out_dir)?;
    outputs.write("registry.tsv", registry.registry_tsv().as_bytes())?;
    outputs.write("exclusions.tsv", registry.exclusions_tsv().as_bytes())?;
    outputs.write("distances.tsv", dist.to_tsv().as_bytes())?;
    outputs.write(
        "tree.nwk",
        (tree.to_newick(HeightKind::Linkage) + "\n").as_bytes(),
    )?;
    outputs.write(
        "tree.diameter.nwk",
        (tree.to_newick(HeightKind::Diameter) + "\n").as_bytes(),
    )?;
    outputs.write("tree.json", (tree.to_json()? + "\n").as_bytes())?;
    outputs.write(
        &format!("cut_{k}.tsv"),
        tree.cut_summary_tsv(k, &dist)?.as_bytes(),
    )?;
    let mut manifest = Manifest::new(
        ctx,
        "cluster",
        json!({"beta": beta, "k_max": k_max, "gamma": gamma, "k": k, "reference": reference,
               "exclude_families": options.exclude_families, "drop_nonexpressed": options.drop_nonexpressed,
               "markers": options.markers.as_str(), "cache_hit": hit}),
        &[&fasta],
    )?;
    manifest
        .fingerprints
        .insert("gram".into(), gram.fingerprint().to_string());
    manifest.outputs = outputs.names();
    outputs.write("manifest.json", manifest.to_json()?.as_bytes())?;
    outputs.commit();
    println!("cluster: {} alleles, cut into {k}", registry.len());
    Ok(())
}

struct LoadedData {
    path: PathBuf,
    dataset: crate::pipeline::BindingDataset,
    out_dir: PathBuf,
    lambdas: ParamSeq,
    k_max: Option<usize>,
    spec: NormalizationSpec,
    value: ValueKind,
}

fn load_data(
    ctx: &Context,
    section: &str,
    a: DataArgs,
    default_base: f64,
    default_lambdas: ParamSeq,
) -> Result<LoadedData> {
    let cfg = &ctx.config;
    let path = existing(a.data.or(cfg.path(section, "data")?), "--data")?;
    let out_dir = a
        .out_dir
        .or(cfg.path(section, "out-dir")?)
        .ok_or_else(|| usage("missing required --out-dir"))?;
    let value = match a.value.or(cfg.string(section, "value")?).as_deref() {
        None | Some("ic50") => ValueKind::Ic50,
        Some("normalized") => ValueKind::Normalized,
        Some(other) => {
            return Err(usage(format!(
                "--value must be ic50 or normalized, got {other}"
            )))
        }
    };
    let spec =
        NormalizationSpec::new(a.base.or(cfg.f64(section, "base")?).unwrap_or(default_base))?;
    let lambdas = match a.lambdas.or(cfg.string(section, "lambdas")?) {
        Some(s) => parse_param_seq(&s)?,
        None => default_lambdas,
    };
    let k_max = a.k_max.or(cfg.usize(section, "k-max")?);
    let (mut dataset, summary) = ingest_binding_tsv(
        BufReader::new(fs::File::open(&path)?),
        &IngestOptions::new(value, spec),
    )?;
    log::info!("ingest: {summary:?}");
    if let Some(k) = a
        .assign_folds
        .or(cfg.u64(section, "assign-folds")?.map(|v| v as u32))
    {
        if k < 2 {
            return Err(usage("--assign-folds needs at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        dataset.assign_missing_folds(k, &mut rng);
    }
    if dataset.is_empty() {
        return Err(Error::Empty(format!(
            "no usable records in {}",
            path.display()
        )));
    }
    Ok(LoadedData {
        path,
        dataset,
        out_dir,
        lambdas,
        k_max,
        spec,
        value,
    })
}

fn write_run(outputs: &mut Outputs, run: &PipelineRun) -> Result<()> {
    outputs.write("metrics.tsv", run.report.to_tsv().as_bytes())?;
    outputs.write(
        "predictions.tsv",
        predictions_tsv(&run.predictions).as_bytes(),
    )?;
    outputs.write("choices.tsv", choices_tsv(&run.choices).as_bytes())?;
    Ok(())
}

fn cmd_fixed(ctx: &Context, a: FixedArgs) -> Result<()> {
    let defaults = GridSpec::fixed_allele_default();
    let betas = match a.betas.or(ctx.config.string("predict-fixed", "betas")?) {
        Some(s) => parse_param_seq(&s)?,
        None => defaults.betas.clone(),
    };
    let modulus = a.modulus
        || ctx
            .config
            .bool("predict-fixed", "modulus")?
            .unwrap_or(false);
    let data = load_data(ctx, "predict-fixed", a.data, 50_000.0, defaults.lambdas)?;
    let grid = GridSpec {
        betas,
        lambdas: data.lambdas.clone(),
    };
    let mut options = FixedAlleleOptions::new(grid.clone());
    options.k_max = data.k_max;
    options.theta = data.spec.theta();
    let run = run_fixed_allele(&data.dataset, &options)?;
    let beta_star = run.aggregate_beta()?;

    let mut outputs = Outputs::new(data.out_dir.clone())?;
    write_run(&mut outputs, &run)?;
    if modulus {
        let kernel = StringKernel::blosum(KernelParams::new(beta_star)?.with_k_max(data.k_max)?)?;
        let mut text = String::from("allele\tn_peptides\tmodulus\n");
        for row in &run.report.rows {
            let preds: Vec<&crate::pipeline::PredictionRow> = run
                .predictions
                .iter()
                .filter(|p| p.allele == row.allele)
                .collect();
            let values: Vec<f64> = preds.iter().map(|p| p.predicted).collect();
            let peptides: Vec<AminoChain> = preds
                .iter()
                .map(|p| AminoChain::parse(&p.peptide))
                .collect::<Result<_>>()?;
            let m = modulus_of_continuity(&values, &peptides, &kernel)?;
            text.push_str(&format!("{}\t{}\t{m:.6}\n", row.allele, row.n));
        }
        outputs.write("modulus.tsv", text.as_bytes())?;
    }
    let mut manifest = Manifest::new(
        ctx,
        "predict-fixed",
        json!({"grid": grid, "k_max": data.k_max, "base": data.spec.base, "theta": data.spec.theta(),
               "value": format!("{:?}", data.value), "beta_star": beta_star, "modulus": modulus}),
        &[&data.path],
    )?;
    manifest.outputs = outputs.names();
    outputs.write("manifest.json", manifest.to_json()?.as_bytes())?;
    outputs.commit();
    println!(
        "predict-fixed: {} alleles, weighted AUC {:.4}, weighted RMSE {:.4}, beta* {:.5}",
        run.report.rows.len(),
        run.report.weighted_auc(),
        run.report.weighted_rmse(),
        beta_star
    );
    Ok(())
}

fn cmd_pan(ctx: &Context, a: PanArgs) -> Result<()> {
    let cfg = &ctx.config;
    let defaults = GridSpec::pan_allele_default();
    let fasta = existing(a.fasta.or(cfg.path("predict-pan", "fasta")?), "--fasta")?;
    let beta_peptide = a
        .beta_peptide
        .or(cfg.f64("predict-pan", "beta-peptide")?)
        .unwrap_or(0.11387);
    let beta_alleles = match a
        .beta_alleles
        .or(cfg.string("predict-pan", "beta-alleles")?)
    {
        Some(s) => parse_param_seq(&s)?,
        None => defaults.betas.clone(),
    };
    let markers = match a.markers {
        Some(m) => m,
        None => cfg
            .string("predict-pan", "markers")?
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or_default(),
    };
    let data = load_data(ctx, "predict-pan", a.data, 15_000.0, defaults.lambdas)?;
    let registry = read_fasta_registry(
        &fasta,
        &RegistryOptions {
            markers,
            ..RegistryOptions::default()
        },
    )?;
    let mut alleles = BTreeMap::new();
    for name in data.dataset.alleles() {
        let entry = registry.resolve(&name).ok_or_else(|| {
            Error::UnknownId(format!("allele {name} not found in {}", fasta.display()))
        })?;
        alleles.insert(name, entry.normal_form.chain.clone());
    }
    let grid = GridSpec {
        betas: beta_alleles,
        lambdas: data.lambdas.clone(),
    };
    let mut options = PanAlleleOptions::new(grid.clone());
    options.beta_peptide = beta_peptide;
    options.k_max = data.k_max;
    options.theta = data.spec.theta();
    let run = run_pan_allele(&data.dataset, &alleles, &options)?;

    let mut outputs = Outputs::new(data.out_dir.clone())?;
    write_run(&mut outputs, &run)?;
    let mut manifest = Manifest::new(
        ctx,
        "predict-pan",
        json!({"grid": grid, "beta_peptide": beta_peptide, "k_max": data.k_max, "base": data.spec.base,
               "theta": data.spec.theta(), "value": format!("{:?}", data.value), "markers": markers.as_str(),
               "alleles": alleles.iter().map(|(k, v)| (k.clone(), v.to_string())).collect::<BTreeMap<_, _>>()}),
        &[&data.path, &fasta],
    )?;
    manifest.outputs = outputs.names();
    outputs.write("manifest.json", manifest.to_json()?.as_bytes())?;
    outputs.commit();
    println!(
        "predict-pan: {} alleles, weighted AUC {:.4}, weighted RMSE {:.4}",
        run.report.rows.len(),
        run.report.weighted_auc(),
        run.report.weighted_rmse()
    );
    Ok(())
}

fn cmd_selftest(ctx: &Context) -> Result<()> {
    let results = selftest::run_all(ctx.seed);
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<24} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} selftest check(s) failed")));
    }
    Ok(())
}
