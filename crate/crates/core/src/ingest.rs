//! Allele sequence ingestion: FASTA parsing, allele names, RFL/TVQ normal
//! forms, and the deduplicated allele registry.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::chain::{Alphabet, AminoChain};
use crate::error::{Error, Result};

pub const START_MARKER: &str = "RFL";
pub const END_MARKER: &str = "TVQ";

/// Normal forms shorter than this are flagged as short sequences.
pub const SHORT_LENGTH: usize = 81;

/// An HLA allele name such as `DRB1*01:01:01` or the older `DRB1*0101`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlleleName {
    raw: String,
    gene: String,
    fields: Vec<u32>,
    /// Widths of the numeric fields as written, for display.
    widths: Vec<usize>,
    suffix: Option<char>,
}

impl AlleleName {
    /// Accepts `GENE*F1:F2[:F3[:F4]][S]`, compact `GENE*FFPP...`, an optional
    /// `HLA-` prefix, and `_` in place of `*`.
    pub fn parse(text: &str) -> Option<AlleleName> {
        let raw = text.trim();
        let body = raw.strip_prefix("HLA-").unwrap_or(raw);
        let (gene, rest) = body.split_once('*').or_else(|| body.split_once('_'))?;
        if gene.is_empty() || !gene.chars().all(|c| c.is_ascii_alphanumeric()) {
            return None;
        }
        let (digits, suffix) = match rest.chars().last() {
            Some(c) if c.is_ascii_alphabetic() => {
                (&rest[..rest.len() - 1], Some(c.to_ascii_uppercase()))
            }
            _ => (rest, None),
        };
        let parts: Vec<&str> = if digits.contains(':') {
            digits.split(':').collect()
        } else {
            split_compact(digits)?
        };
        if parts.is_empty()
            || parts
                .iter()
                .any(|p| p.is_empty() || !p.chars().all(|c| c.is_ascii_digit()))
        {
            return None;
        }
        Some(AlleleName {
            raw: raw.to_string(),
            gene: gene.to_ascii_uppercase(),
            fields: parts
                .iter()
                .map(|p| p.parse().ok())
                .collect::<Option<_>>()?,
            widths: parts.iter().map(|p| p.len()).collect(),
            suffix,
        })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn gene(&self) -> &str {
        &self.gene
    }

    pub fn fields(&self) -> &[u32] {
        &self.fields
    }

    pub fn suffix(&self) -> Option<char> {
        self.suffix
    }

    /// Null (non-expressed) alleles carry the `N` expression suffix.
    pub fn is_null(&self) -> bool {
        self.suffix == Some('N')
    }

    /// Gene plus allele group, e.g. `DRB1*11`.
    pub fn family(&self) -> String {
        format!("{}*{:02}", self.gene, self.fields[0])
    }

    /// Gene, group and protein in compact form, e.g. `DRB1*1101`; the key
    /// used to match benchmark names against registry entries.
    pub fn protein_key(&self) -> String {
        match self.fields.get(1) {
            Some(p) => format!("{}*{:02}{:02}", self.gene, self.fields[0], p),
            None => self.family(),
        }
    }
}

fn split_compact(digits: &str) -> Option<Vec<&str>> {
    if digits.len() < 2 || !digits.is_ascii() {
        return None;
    }
    let (family, rest) = digits.split_at(2);
    let mut parts = vec![family];
    match rest.len() {
        0 => {}
        1..=3 => parts.push(rest),
        _ => {
            // Three-digit proteins appear in odd-length compact names.
            let cut = if rest.len() % 2 == 1 { 3 } else { 2 };
            let (protein, mut tail) = rest.split_at(cut);
            parts.push(protein);
            while tail.len() >= 2 {
                let (f, t) = tail.split_at(2);
                parts.push(f);
                tail = t;
            }
            if !tail.is_empty() {
                parts.push(tail);
            }
        }
    }
    Some(parts)
}

impl Ord for AlleleName {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gene
            .cmp(&other.gene)
            .then_with(|| self.fields.cmp(&other.fields))
            .then_with(|| self.suffix.cmp(&other.suffix))
            .then_with(|| self.raw.cmp(&other.raw))
    }
}

impl PartialOrd for AlleleName {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for AlleleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastaRecord {
    /// Header line without the leading `>`.
    pub header: String,
    pub name: AlleleName,
    /// Uppercase residues, whitespace removed.
    pub sequence: String,
}

/// A record the lenient parser could not accept.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRecord {
    pub line: usize,
    pub header: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FastaParse {
    pub records: Vec<FastaRecord>,
    pub rejected: Vec<RejectedRecord>,
}

/// Strict parse: the first malformed header or illegal residue is an error.
pub fn parse_fasta<R: BufRead>(reader: R) -> Result<Vec<FastaRecord>> {
    let parsed = read_fasta(reader)?;
    match parsed.rejected.into_iter().next() {
        Some(r) => Err(Error::Parse {
            line: r.line,
            msg: r.reason,
        }),
        None => Ok(parsed.records),
    }
}

/// Lenient parse: bad records are collected instead of aborting.
pub fn parse_fasta_lenient<R: BufRead>(reader: R) -> Result<FastaParse> {
    read_fasta(reader)
}

fn read_fasta<R: BufRead>(reader: R) -> Result<FastaParse> {
    let alphabet = Alphabet::amino();
    let mut out = FastaParse::default();
    let mut current: Option<(usize, String, String)> = None;

    let finish = |rec: Option<(usize, String, String)>, out: &mut FastaParse| {
        if let Some((line, header, seq)) = rec {
            match check_record(&alphabet, &header, seq) {
                Ok(r) => out.records.push(r),
                Err(reason) => out.rejected.push(RejectedRecord {
                    line,
                    header,
                    reason,
                }),
            }
        }
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim_end();
        if let Some(h) = trimmed.strip_prefix('>') {
            finish(current.take(), &mut out);
            current = Some((lineno, h.trim().to_string(), String::new()));
        } else if !trimmed.trim().is_empty() {
            match current.as_mut() {
                Some((_, _, seq)) => seq.extend(trimmed.chars().filter(|c| !c.is_whitespace())),
                None => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "sequence data before the first header".into(),
                    })
                }
            }
        }
    }
    finish(current.take(), &mut out);
    Ok(out)
}

fn check_record(
    alphabet: &Alphabet,
    header: &str,
    seq: String,
) -> std::result::Result<FastaRecord, String> {
    let name = header
        .split_whitespace()
        .filter(|t| t.contains('*'))
        .find_map(AlleleName::parse)
        .ok_or_else(|| format!("no allele name in header {header:?}"))?;
    if seq.is_empty() {
        return Err(format!("{name}: empty sequence"));
    }
    let sequence = seq.to_ascii_uppercase();
    if let Some((i, c)) = sequence
        .chars()
        .enumerate()
        .find(|(_, c)| !c.is_ascii() || alphabet.index_of(*c as u8).is_none())
    {
        return Err(format!("{name}: illegal residue {c:?} at position {i}"));
    }
    Ok(FastaRecord {
        header: header.to_string(),
        name,
        sequence,
    })
}

/// Whether the marker trigrams belong to the extracted region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerConvention {
    #[default]
    Inclusive,
    Exclusive,
}

impl MarkerConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            MarkerConvention::Inclusive => "inclusive",
            MarkerConvention::Exclusive => "exclusive",
        }
    }
}

impl std::str::FromStr for MarkerConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inclusive" => Ok(MarkerConvention::Inclusive),
            "exclusive" => Ok(MarkerConvention::Exclusive),
            _ => Err(Error::InvalidParameter(format!(
                "unknown marker convention {s}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalForm {
    pub chain: AminoChain,
    pub short_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalFormError {
    NoStartMarker,
    NoEndMarker,
    MarkersOutOfOrder,
    InvalidRegion(String),
}

impl fmt::Display for NormalFormError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormalFormError::NoStartMarker => write!(f, "no {START_MARKER}"),
            NormalFormError::NoEndMarker => write!(f, "no {END_MARKER}"),
            NormalFormError::MarkersOutOfOrder => {
                write!(f, "{END_MARKER} does not follow {START_MARKER}")
            }
            NormalFormError::InvalidRegion(e) => write!(f, "invalid region: {e}"),
        }
    }
}

/// Region from the first `RFL` through the last `TVQ`.
pub fn normal_form(
    seq: &str,
    convention: MarkerConvention,
) -> std::result::Result<NormalForm, NormalFormError> {
    let seq = seq.to_ascii_uppercase();
    let start = seq
        .find(START_MARKER)
        .ok_or(NormalFormError::NoStartMarker)?;
    let end = seq.rfind(END_MARKER).ok_or(NormalFormError::NoEndMarker)?;
    if end < start + START_MARKER.len() {
        return Err(NormalFormError::MarkersOutOfOrder);
    }
    let region = match convention {
        MarkerConvention::Inclusive => &seq[start..end + END_MARKER.len()],
        MarkerConvention::Exclusive => &seq[start + START_MARKER.len()..end],
    };
    let chain =
        AminoChain::parse(region).map_err(|e| NormalFormError::InvalidRegion(e.to_string()))?;
    Ok(NormalForm {
        short_flag: chain.len() < SHORT_LENGTH,
        chain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryOptions {
    /// Families such as `DRB1*11` removed from the registry entries.
    pub exclude_families: Vec<String>,
    pub drop_nonexpressed: bool,
    pub markers: MarkerConvention,
}

impl Default for RegistryOptions {
    fn default() -> Self {
        RegistryOptions {
            exclude_families: Vec::new(),
            drop_nonexpressed: true,
            markers: MarkerConvention::Inclusive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub name: AlleleName,
    pub normal_form: NormalForm,
    /// Later alleles that had the same normal form.
    pub aliases: Vec<AlleleName>,
}

impl RegistryEntry {
    /// Number of alleles sharing this normal form.
    pub fn shared_by(&self) -> usize {
        1 + self.aliases.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    NonExpressed,
    NormalForm(NormalFormError),
    DuplicateOf(String),
    ExcludedFamily(String),
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExclusionReason::NonExpressed => f.write_str("non-expressed"),
            ExclusionReason::NormalForm(e) => write!(f, "{e}"),
            ExclusionReason::DuplicateOf(n) => write!(f, "duplicate of {n}"),
            ExclusionReason::ExcludedFamily(fam) => write!(f, "excluded family {fam}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub name: AlleleName,
    pub reason: ExclusionReason,
}

/// Alleles with pairwise distinct normal forms, in WHO name order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlleleRegistry {
    pub entries: Vec<RegistryEntry>,
    /// Deduplicated entries removed only by family exclusion. Together with
    /// `entries` they form the full deduplicated set.
    pub family_excluded: Vec<RegistryEntry>,
    pub exclusions: Vec<Exclusion>,
    pub markers: MarkerConvention,
}

pub fn build_registry(records: &[FastaRecord], options: &RegistryOptions) -> AlleleRegistry {
    let mut sorted: Vec<&FastaRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));

    let mut exclusions = Vec::new();
    let mut deduped: Vec<RegistryEntry> = Vec::new();
    let mut by_form: HashMap<String, usize> = HashMap::new();

    for rec in sorted {
        if options.drop_nonexpressed && rec.name.is_null() {
            exclusions.push(Exclusion {
                name: rec.name.clone(),
                reason: ExclusionReason::NonExpressed,
            });
            continue;
        }
        let nf = match normal_form(&rec.sequence, options.markers) {
            Ok(nf) => nf,
            Err(e) => {
                exclusions.push(Exclusion {
                    name: rec.name.clone(),
                    reason: ExclusionReason::NormalForm(e),
                });
                continue;
            }
        };
        match by_form.get(nf.chain.as_str()) {
            Some(&i) => {
                exclusions.push(Exclusion {
                    name: rec.name.clone(),
                    reason: ExclusionReason::DuplicateOf(deduped[i].name.raw().to_string()),
                });
                deduped[i].aliases.push(rec.name.clone());
            }
            None => {
                by_form.insert(nf.chain.as_str().to_string(), deduped.len());
                deduped.push(RegistryEntry {
                    name: rec.name.clone(),
                    normal_form: nf,
                    aliases: Vec::new(),
                });
            }
        }
    }

    let excluded: Vec<String> = options
        .exclude_families
        .iter()
        .map(|f| f.trim().to_ascii_uppercase())
        .collect();
    let (entries, family_excluded): (Vec<_>, Vec<_>) = deduped
        .into_iter()
        .partition(|e| !excluded.contains(&e.name.family()));
    for e in &family_excluded {
        exclusions.push(Exclusion {
            name: e.name.clone(),
            reason: ExclusionReason::ExcludedFamily(e.name.family()),
        });
    }

    AlleleRegistry {
        entries,
        family_excluded,
        exclusions,
        markers: options.markers,
    }
}

impl AlleleRegistry {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All deduplicated entries, including family-excluded ones, in name
    /// order.
    pub fn reference_entries(&self) -> Vec<&RegistryEntry> {
        let mut all: Vec<&RegistryEntry> =
            self.entries.iter().chain(&self.family_excluded).collect();
        all.sort_by(|a, b| a.name.cmp(&b.name));
        all
    }

    /// First entry (in name order, aliases included) matching a benchmark
    /// allele name such as `DRB1*0101`, `DRB1_0101` or `HLA-DRB1*01:01`.
    pub fn resolve(&self, name: &str) -> Option<&RegistryEntry> {
        let key = AlleleName::parse(name)?.protein_key();
        let all = self.reference_entries();
        all.iter()
            .find(|e| e.name.protein_key() == key)
            .or_else(|| {
                all.iter()
                    .find(|e| e.aliases.iter().any(|a| a.protein_key() == key))
            })
            .copied()
    }

    /// Entries as FASTA records whose sequence is the normal form.
    pub fn to_records(&self) -> Vec<FastaRecord> {
        self.entries
            .iter()
            .map(|e| FastaRecord {
                header: e.name.raw().to_string(),
                name: e.name.clone(),
                sequence: e.normal_form.chain.as_str().to_string(),
            })
            .collect()
    }

    pub fn registry_tsv(&self) -> String {
        let mut out = String::from("name\tnormal_form\tlength\tshort\tshared_by\taliases\n");
        for e in &self.entries {
            let aliases: Vec<&str> = e.aliases.iter().map(AlleleName::raw).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.name,
                e.normal_form.chain,
                e.normal_form.chain.len(),
                e.normal_form.short_flag,
                e.shared_by(),
                aliases.join(",")
            ));
        }
        out
    }

    pub fn exclusions_tsv(&self) -> String {
        let mut out = String::from("name\treason\n");
        for x in &self.exclusions {
            out.push_str(&format!("{}\t{}\n", x.name, x.reason));
        }
        out
    }
}
