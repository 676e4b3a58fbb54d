//! Gram matrices over indexed chain sets, their on-disk cache, and the
//! kernel-derived L2 distance.
//!
//! Cache layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "AKGRAM\0\0"
//! version   u32
//! fp_len    u32, then fp_len bytes of UTF-8 fingerprint
//! n         u64
//! n times:  u32 length, then UTF-8 identifier
//! n(n+1)/2  f64 values, lower triangle in row-major order (row i, cols 0..=i)
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fingerprint::{self, FORMAT_VERSION};
use crate::substitution::min_eigenvalue;

const MAGIC: &[u8; 8] = b"AKGRAM\0\0";

/// Symmetric kernel table over uniquely identified items.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    index: Vec<String>,
    positions: HashMap<String, usize>,
    values: DMatrix<f64>,
    fingerprint: String,
}

impl GramMatrix {
    pub fn new(index: Vec<String>, values: DMatrix<f64>, fingerprint: String) -> Result<Self> {
        let n = index.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::LengthMismatch(values.nrows(), n));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if values[(i, j)] != values[(j, i)] {
                    return Err(Error::Asymmetric(i, j));
                }
            }
        }
        let mut positions = HashMap::with_capacity(n);
        for (i, id) in index.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(GramMatrix {
            index,
            positions,
            values,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &[String] {
        &self.index
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn resolve(&self, id: &str) -> Result<usize> {
        self.position(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn get_by_id(&self, x: &str, y: &str) -> Result<f64> {
        Ok(self.get(self.resolve(x)?, self.resolve(y)?))
    }

    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            self.values[(rows[i], cols[j])]
        })
    }

    /// Restriction to a subset of items, in the given order.
    pub fn restrict(&self, keep: &[usize]) -> Result<GramMatrix> {
        let ids: Vec<String> = keep.iter().map(|&i| self.index[i].clone()).collect();
        let fp = fingerprint::hash_parts(
            &std::iter::once(format!("restrict:{}", self.fingerprint))
                .chain(ids.iter().cloned())
                .collect::<Vec<_>>(),
        );
        GramMatrix::new(ids, self.submatrix(keep, keep), fp)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.values)
    }

    /// Root-mean-square difference of rows `x` and `y` over every reference
    /// item.
    pub fn l2_distance(&self, x: usize, y: usize) -> f64 {
        if x == y {
            return 0.0;
        }
        let n = self.len();
        let ss: f64 = (0..n)
            .map(|z| {
                let d = self.values[(x, z)] - self.values[(y, z)];
                d * d
            })
            .sum();
        (ss / n as f64).sqrt()
    }

    /// [`GramMatrix::l2_distance`] by identifier.
    pub fn dist_l2(&self, x: &str, y: &str) -> Result<f64> {
        Ok(self.l2_distance(self.resolve(x)?, self.resolve(y)?))
    }

    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_str(&mut w, &self.fingerprint)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for id in &self.index {
            write_str(&mut w, id)?;
        }
        for i in 0..self.len() {
            for j in 0..=i {
                w.write_all(&self.values[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<GramMatrix> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Cache("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Cache(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let fingerprint = read_str(&mut r)?;
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let n = u64::from_le_bytes(buf) as usize;
        let index = (0..n)
            .map(|_| read_str(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut values = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                r.read_exact(&mut buf)?;
                let v = f64::from_le_bytes(buf);
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
        GramMatrix::new(index, values, fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_cache(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a cache file, rejecting it unless its fingerprint matches.
    pub fn load(path: &Path, expected_fingerprint: Option<&str>) -> Result<GramMatrix> {
        let gram = Self::read_cache(BufReader::new(File::open(path)?))?;
        if let Some(fp) = expected_fingerprint {
            if gram.fingerprint != fp {
                return Err(Error::Cache(format!(
                    "fingerprint mismatch: cache {} vs expected {fp}",
                    gram.fingerprint
                )));
            }
        }
        Ok(gram)
    }

    /// Tab-separated dump with a header row of identifiers.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id");
        for id in &self.index {
            out.push('\t');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.index.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.len() {
                out.push_str(&format!("\t{:.17e}", self.values[(i, j)]));
            }
            out.push('\n');
        }
        out
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::Cache(e.to_string()))
}

/// An (allele, peptide) pair addressed by identifiers in two Gram matrices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PanPoint {
    pub allele: String,
    pub peptide: String,
}

impl PanPoint {
    pub fn new(allele: impl Into<String>, peptide: impl Into<String>) -> Self {
        PanPoint {
            allele: allele.into(),
            peptide: peptide.into(),
        }
    }

    fn resolve(&self, alleles: &GramMatrix, peptides: &GramMatrix) -> Result<(usize, usize)> {
        Ok((
            alleles.resolve(&self.allele)?,
            peptides.resolve(&self.peptide)?,
        ))
    }
}

/// Product kernel `K_allele(a, a') * K_peptide(p, p')`.
pub fn pan_kernel(
    p1: &PanPoint,
    p2: &PanPoint,
    alleles: &GramMatrix,
    peptides: &GramMatrix,
) -> Result<f64> {
    let (a1, q1) = p1.resolve(alleles, peptides)?;
    let (a2, q2) = p2.resolve(alleles, peptides)?;
    Ok(alleles.get(a1, a2) * peptides.get(q1, q2))
}

/// Pan kernel table over index pairs `(allele, peptide)`.
pub fn pan_values(
    pairs: &[(usize, usize)],
    alleles: &DMatrix<f64>,
    peptides: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = pairs.len();
    DMatrix::from_fn(n, n, |i, j| {
        let (a1, p1) = pairs[i];
        let (a2, p2) = pairs[j];
        alleles[(a1, a2)] * peptides[(p1, p2)]
    })
}

/// Gram matrix of the pan kernel over `points`; identifiers are
/// `allele|peptide`.
pub fn pan_gram(
    points: &[PanPoint],
    alleles: &GramMatrix,
    peptides: &GramMatrix,
) -> Result<GramMatrix> {
    if points.is_empty() {
        return Err(Error::Empty("pan gram over no points".into()));
    }
    let pairs = points
        .iter()
        .map(|p| p.resolve(alleles, peptides))
        .collect::<Result<Vec<_>>>()?;
    let values = pan_values(&pairs, alleles.values(), peptides.values());
    let ids: Vec<String> = points
        .iter()
        .map(|p| format!("{}|{}", p.allele, p.peptide))
        .collect();
    let mut parts = vec![
        format!("pan:{}", alleles.fingerprint()),
        peptides.fingerprint().to_string(),
    ];
    parts.extend(ids.iter().cloned());
    GramMatrix::new(ids, values, fingerprint::hash_parts(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> GramMatrix {
        let v = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.3, 0.2, 0.3, 1.0]);
        GramMatrix::new(vec!["x".into(), "y".into(), "z".into()], v, "fp".into()).unwrap()
    }

    #[test]
    fn l2_distance_by_hand() {
        let g = toy();
        // rows x=(1,.5,.2), y=(.5,1,.3): diffs .5,.5,.1
        let expected = ((0.25 + 0.25 + 0.01) / 3.0f64).sqrt();
        assert!((g.dist_l2("x", "y").unwrap() - expected).abs() < 1e-15);
        assert_eq!(g.dist_l2("y", "x").unwrap(), g.dist_l2("x", "y").unwrap());
        assert_eq!(g.dist_l2("z", "z").unwrap(), 0.0);
        assert!(matches!(g.dist_l2("x", "w"), Err(Error::UnknownId(_))));
    }

    #[test]
    fn cache_round_trip() {
        let g = toy();
        let mut buf = Vec::new();
        g.write_cache(&mut buf).unwrap();
        let back = GramMatrix::read_cache(&buf[..]).unwrap();
        assert_eq!(back, g);
        buf[0] = b'X';
        assert!(GramMatrix::read_cache(&buf[..]).is_err());
    }

    #[test]
    fn cache_fingerprint_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        toy().save(&path).unwrap();
        assert!(GramMatrix::load(&path, Some("fp")).is_ok());
        assert!(matches!(
            GramMatrix::load(&path, Some("other")),
            Err(Error::Cache(_))
        ));
    }

    #[test]
    fn rejects_bad_input() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GramMatrix::new(vec!["a".into(), "b".into()], v, String::new()).is_err());
        let v = DMatrix::identity(2, 2);
        assert!(GramMatrix::new(vec!["a".into(), "a".into()], v, String::new()).is_err());
    }

    #[test]
    fn pan_kernel_factors() {
        let alleles = toy();
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 1.0]);
        let peptides = GramMatrix::new(vec!["p".into(), "q".into()], v, "fp2".into()).unwrap();
        let a = PanPoint::new("x", "p");
        assert_eq!(pan_kernel(&a, &a, &alleles, &peptides).unwrap(), 1.0);
        let b = PanPoint::new("y", "p");
        assert_eq!(pan_kernel(&a, &b, &alleles, &peptides).unwrap(), 0.5);
        let c = PanPoint::new("y", "q");
        assert!((pan_kernel(&a, &c, &alleles, &peptides).unwrap() - 0.35).abs() < 1e-15);
        assert!(pan_kernel(&a, &PanPoint::new("w", "p"), &alleles, &peptides).is_err());
        let g = pan_gram(&[a, b, c], &alleles, &peptides).unwrap();
        assert_eq!(g.index()[2], "y|q");
    }
}
