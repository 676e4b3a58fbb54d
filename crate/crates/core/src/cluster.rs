//! OWA-linkage agglomerative clustering over an `L2` kernel distance.

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::GramMatrix;
use crate::ingest::AlleleName;

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    index: Vec<String>,
    d: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn new(index: Vec<String>, d: DMatrix<f64>) -> Result<Self> {
        let n = index.len();
        if d.nrows() != n || d.ncols() != n {
            return Err(Error::LengthMismatch(d.nrows(), n));
        }
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(Error::InvalidParameter(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                if d[(i, j)] != d[(j, i)] {
                    return Err(Error::Asymmetric(i, j));
                }
                if d[(i, j)].is_nan() || d[(i, j)] < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "distance ({i}, {j}) is {}",
                        d[(i, j)]
                    )));
                }
            }
        }
        Ok(DistanceMatrix { index, d })
    }

    /// `D_L2` between the gram rows in `keep`, with every gram row as the
    /// reference set.
    pub fn from_gram(gram: &GramMatrix, keep: &[usize]) -> Result<Self> {
        let n = keep.len();
        if keep.iter().any(|&k| k >= gram.len()) {
            return Err(Error::InvalidParameter("row index outside gram".into()));
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..i).map(|j| gram.l2_distance(keep[i], keep[j])).collect())
            .collect();
        let mut d = DMatrix::zeros(n, n);
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        let index = keep.iter().map(|&k| gram.index()[k].clone()).collect();
        DistanceMatrix::new(index, d)
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
        &self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

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
                out.push_str(&format!("\t{:.10}", self.d[(i, j)]));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OwaParams {
    pub gamma: f64,
}

impl Default for OwaParams {
    fn default() -> Self {
        OwaParams { gamma: 0.1 }
    }
}

impl OwaParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        Ok(OwaParams { gamma })
    }
}

/// Normalized `e^(i/mu)`, `i = 1..=n`, `mu = gamma (1 + n)`.
pub fn owa_weights(n: usize, gamma: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mu = gamma * (1.0 + n as f64);
    // Shift exponents so the largest is 0.
    let raw: Vec<f64> = (1..=n)
        .map(|i| ((i as f64 - n as f64) / mu).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// OWA aggregate of all cross distances between `x` and `y`, sorted in
/// descending order.
pub fn owa_linkage(
    x: &[usize],
    y: &[usize],
    d: &DistanceMatrix,
    params: &OwaParams,
) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("linkage of an empty cluster".into()));
    }
    let xs: HashSet<usize> = x.iter().copied().collect();
    if let Some(v) = y.iter().find(|v| xs.contains(v)) {
        return Err(Error::InvalidParameter(format!(
            "clusters share member {v}"
        )));
    }
    Ok(linkage(x, y, d, params.gamma))
}

fn linkage(x: &[usize], y: &[usize], d: &DistanceMatrix, gamma: f64) -> f64 {
    if x.len() == 1 && y.len() == 1 {
        return d.get(x[0], y[0]);
    }
    let mut cross: Vec<f64> = Vec::with_capacity(x.len() * y.len());
    for &a in x {
        for &b in y {
            cross.push(d.get(a, b));
        }
    }
    cross.sort_by(|a, b| b.total_cmp(a));
    owa_weights(cross.len(), gamma)
        .iter()
        .zip(&cross)
        .map(|(w, v)| w * v)
        .sum()
}

/// Largest pairwise distance within `z`; 0 for singletons.
pub fn diameter(z: &[usize], d: &DistanceMatrix) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Empty("diameter of an empty cluster".into()));
    }
    let mut m = 0.0f64;
    for (i, &a) in z.iter().enumerate() {
        for &b in &z[i + 1..] {
            m = m.max(d.get(a, b));
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Node ids: leaves are `0..n`, merge `k` creates node `n + k`.
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub diameter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

/// Bottom-up merging of the pair with least OWA linkage.
///
/// Linkages are computed from the raw distances; on equal linkage the pair
/// whose smaller node id is least wins, then the smaller larger id.
pub fn agglomerate(d: &DistanceMatrix, params: &OwaParams) -> Result<ClusterTree> {
    let n = d.len();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "clustering needs at least 2 items".into(),
        ));
    }
    OwaParams::new(params.gamma)?;
    // Active clusters in creation order.
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut link: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        for j in (i + 1)..n {
            link.insert((i, j), d.get(i, j));
        }
    }
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        // BTreeMap iterates in (smaller id, larger id) order, so the first
        // strict minimum satisfies the tie rule.
        let (&(a, b), &h) = link
            .iter()
            .fold(None::<(&(usize, usize), &f64)>, |best, cur| match best {
                Some(bst) if bst.1 <= cur.1 => Some(bst),
                _ => Some(cur),
            })
            .expect("at least one active pair");
        let pa = active.iter().position(|c| c.0 == a).expect("active");
        let ca = active.remove(pa);
        let pb = active.iter().position(|c| c.0 == b).expect("active");
        let cb = active.remove(pb);
        let mut members = ca.1;
        members.extend(cb.1);
        members.sort_unstable();
        let id = n + step;
        link.retain(|&(x, y), _| x != a && x != b && y != a && y != b);
        let fresh: Vec<((usize, usize), f64)> = active
            .par_iter()
            .map(|(other, m)| ((*other, id), linkage(m, &members, d, params.gamma)))
            .collect();
        link.extend(fresh);
        merges.push(Merge {
            left: a,
            right: b,
            height: h,
            diameter: diameter(&members, d)?,
        });
        active.push((id, members));
    }
    Ok(ClusterTree {
        leaves: d.index().to_vec(),
        merges,
    })
}

/// Which per-node value to use as tree height in exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeightKind {
    #[default]
    Linkage,
    Diameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeJson {
    id: usize,
    left: usize,
    right: usize,
    height: f64,
    diameter: f64,
    members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeJson {
    leaves: Vec<String>,
    nodes: Vec<NodeJson>,
}

impl ClusterTree {
    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.leaves.len();
        if n < 2 || self.merges.len() != n - 1 {
            return Err(Error::InvalidParameter(format!(
                "{} merges for {n} leaves",
                self.merges.len()
            )));
        }
        let mut used = vec![false; 2 * n - 1];
        for (k, m) in self.merges.iter().enumerate() {
            for c in [m.left, m.right] {
                if c >= n + k || used[c] {
                    return Err(Error::InvalidParameter(format!(
                        "merge {k} uses node {c} illegally"
                    )));
                }
                used[c] = true;
            }
        }
        Ok(())
    }

    /// Leaf indices under `node`, sorted.
    pub fn members(&self, node: usize) -> Vec<usize> {
        let n = self.leaves.len();
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let m = &self.merges[x - n];
                stack.push(m.left);
                stack.push(m.right);
            }
        }
        out.sort_unstable();
        out
    }

    fn node_height(&self, node: usize, kind: HeightKind) -> f64 {
        let n = self.leaves.len();
        if node < n {
            return 0.0;
        }
        let m = &self.merges[node - n];
        match kind {
            HeightKind::Linkage => m.height,
            HeightKind::Diameter => m.diameter,
        }
    }

    /// Partition into `k` clusters by undoing the last `k - 1` merges.
    /// Clusters are ordered by their smallest leaf.
    pub fn cut(&self, k: usize) -> Result<Vec<Vec<usize>>> {
        let n = self.leaves.len();
        if k < 1 || k > n {
            return Err(Error::InvalidParameter(format!(
                "cut into {k} clusters of {n} leaves"
            )));
        }
        let kept = n - k;
        let mut roots: Vec<usize> = (0..n).collect();
        for (step, m) in self.merges[..kept].iter().enumerate() {
            roots.retain(|&r| r != m.left && r != m.right);
            roots.push(n + step);
        }
        let mut clusters: Vec<Vec<usize>> = roots.into_iter().map(|r| self.members(r)).collect();
        clusters.sort_by_key(|c| c[0]);
        Ok(clusters)
    }

    pub fn to_newick(&self, kind: HeightKind) -> String {
        let n = self.leaves.len();
        let root = n + self.merges.len() - 1;
        let mut out = String::new();
        self.write_newick(root, kind, &mut out);
        out.push_str(&format!("{};", fmt_height(self.node_height(root, kind))));
        out
    }

    fn write_newick(&self, node: usize, kind: HeightKind, out: &mut String) {
        let n = self.leaves.len();
        if node < n {
            out.push_str(&quote_newick(&self.leaves[node]));
            return;
        }
        let m = &self.merges[node - n];
        let h = self.node_height(node, kind);
        out.push('(');
        for (i, child) in [m.left, m.right].into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            self.write_newick(child, kind, out);
            if child >= n {
                out.push_str(&fmt_height(self.node_height(child, kind)));
            }
            out.push_str(&format!(
                ":{}",
                fmt_height(h - self.node_height(child, kind))
            ));
        }
        out.push(')');
    }

    pub fn to_json(&self) -> Result<String> {
        let n = self.leaves.len();
        let nodes = self
            .merges
            .iter()
            .enumerate()
            .map(|(k, m)| NodeJson {
                id: n + k,
                left: m.left,
                right: m.right,
                height: m.height,
                diameter: m.diameter,
                members: self
                    .members(n + k)
                    .into_iter()
                    .map(|i| self.leaves[i].clone())
                    .collect(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&TreeJson {
            leaves: self.leaves.clone(),
            nodes,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tj: TreeJson = serde_json::from_str(text)?;
        let n = tj.leaves.len();
        let mut merges = Vec::with_capacity(tj.nodes.len());
        for (k, node) in tj.nodes.into_iter().enumerate() {
            if node.id != n + k {
                return Err(Error::InvalidParameter(format!(
                    "node {} out of sequence (expected {})",
                    node.id,
                    n + k
                )));
            }
            merges.push(Merge {
                left: node.left,
                right: node.right,
                height: node.height,
                diameter: node.diameter,
            });
        }
        let tree = ClusterTree {
            leaves: tj.leaves,
            merges,
        };
        tree.validate()?;
        Ok(tree)
    }

    /// One row per cluster of a `k`-cut: size, diameter, dominant family
    /// and members.
    pub fn cut_summary_tsv(&self, k: usize, d: &DistanceMatrix) -> Result<String> {
        let mut out =
            String::from("cluster\tsize\tdiameter\tdominant_family\tfamily_share\tmembers\n");
        for (c, members) in self.cut(k)?.iter().enumerate() {
            let names: Vec<&str> = members.iter().map(|&i| self.leaves[i].as_str()).collect();
            let (family, count) = dominant_family(&names);
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\t{:.4}\t{}\n",
                c + 1,
                members.len(),
                diameter(members, d)?,
                family,
                count as f64 / members.len() as f64,
                names.join(",")
            ));
        }
        Ok(out)
    }
}

/// Allele family of an identifier, or the identifier itself when it is not
/// an allele name.
pub fn family_of(id: &str) -> String {
    AlleleName::parse(id).map_or_else(|| id.to_string(), |a| a.family())
}

/// Most common family; ties go to the lexicographically first.
pub fn dominant_family(names: &[&str]) -> (String, usize) {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for n in names {
        *counts.entry(family_of(n)).or_default() += 1;
    }
    counts.into_iter().fold(
        (String::new(), 0),
        |best, (f, c)| if c > best.1 { (f, c) } else { best },
    )
}

fn fmt_height(h: f64) -> String {
    format!("{h:.6}")
}

fn quote_newick(name: &str) -> String {
    if name
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '*'))
    {
        name.to_string()
    } else {
        format!("'{}'", name.replace('\'', "''"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(names: &[&str], rows: &[f64]) -> DistanceMatrix {
        let n = names.len();
        DistanceMatrix::new(
            names.iter().map(|s| s.to_string()).collect(),
            DMatrix::from_row_slice(n, n, rows),
        )
        .unwrap()
    }

    #[test]
    fn weights_examples() {
        assert_eq!(owa_weights(1, 0.1), vec![1.0]);
        let w = owa_weights(2, 0.1);
        assert!((w[0] - 0.0344).abs() < 5e-5);
        assert!((w[1] - 0.9656).abs() < 5e-5);
    }

    #[test]
    fn linkage_examples() {
        let d = dm(
            &["a", "b", "c"],
            &[0.0, 0.4, 0.2, 0.4, 0.0, 0.7, 0.2, 0.7, 0.0],
        );
        let p = OwaParams::default();
        assert_eq!(owa_linkage(&[0], &[1], &d, &p).unwrap(), 0.4);
        let l = owa_linkage(&[0], &[1, 2], &d, &p).unwrap();
        let w = owa_weights(2, 0.1);
        assert!((l - (w[0] * 0.4 + w[1] * 0.2)).abs() < 1e-15);
        assert!((l - 0.2069).abs() < 5e-5);
        assert!(owa_linkage(&[0, 1], &[1, 2], &d, &p).is_err());
    }

    #[test]
    fn first_merge_is_closest_pair() {
        let d = dm(
            &["a", "b", "c"],
            &[0.0, 0.1, 0.9, 0.1, 0.0, 0.8, 0.9, 0.8, 0.0],
        );
        let t = agglomerate(&d, &OwaParams::default()).unwrap();
        assert_eq!((t.merges[0].left, t.merges[0].right), (0, 1));
        assert_eq!(t.merges[0].height, 0.1);
        assert_eq!(t.merges.len(), 2);
        assert_eq!(t.cut(1).unwrap(), vec![vec![0, 1, 2]]);
        assert_eq!(t.cut(2).unwrap(), vec![vec![0, 1], vec![2]]);
        assert_eq!(t.cut(3).unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert!(t.cut(0).is_err());
        assert!(t.cut(4).is_err());
    }

    #[test]
    fn tie_rule_prefers_least_creation_index() {
        let d = dm(
            &["a", "b", "c", "d"],
            &[
                0.0, 1.0, 1.0, 0.1, 1.0, 0.0, 0.1, 1.0, 1.0, 0.1, 0.0, 1.0, 0.1, 1.0, 1.0, 0.0,
            ],
        );
        let t = agglomerate(&d, &OwaParams::default()).unwrap();
        assert_eq!((t.merges[0].left, t.merges[0].right), (0, 3));
        assert_eq!((t.merges[1].left, t.merges[1].right), (1, 2));
    }

    #[test]
    fn newick_two_leaves() {
        let d = dm(&["a", "b"], &[0.0, 0.25, 0.25, 0.0]);
        let t = agglomerate(&d, &OwaParams::default()).unwrap();
        assert_eq!(
            t.to_newick(HeightKind::Linkage),
            "(a:0.250000,b:0.250000)0.250000;"
        );
        let d = dm(&["DRB1*01:01", "x y"], &[0.0, 0.5, 0.5, 0.0]);
        let t = agglomerate(&d, &OwaParams::default()).unwrap();
        assert!(t
            .to_newick(HeightKind::Diameter)
            .starts_with("('DRB1*01:01':"));
    }

    #[test]
    fn json_round_trip() {
        let d = dm(
            &["a", "b", "c"],
            &[0.0, 0.1, 0.9, 0.1, 0.0, 0.8, 0.9, 0.8, 0.0],
        );
        let t = agglomerate(&d, &OwaParams::default()).unwrap();
        let back = ClusterTree::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(ClusterTree::from_json("{\"leaves\":[\"a\",\"b\"],\"nodes\":[]}").is_err());
    }

    #[test]
    fn diameter_cases() {
        let d = dm(
            &["a", "b", "c"],
            &[0.0, 0.1, 0.9, 0.1, 0.0, 0.8, 0.9, 0.8, 0.0],
        );
        assert_eq!(diameter(&[2], &d).unwrap(), 0.0);
        assert_eq!(diameter(&[1, 2], &d).unwrap(), 0.8);
        assert_eq!(diameter(&[0, 1, 2], &d).unwrap(), 0.9);
        assert!(diameter(&[], &d).is_err());
    }

    #[test]
    fn summary_rows() {
        let d = dm(
            &["DRB1*01:01", "DRB1*01:02", "DRB1*04:01"],
            &[0.0, 0.1, 0.9, 0.1, 0.0, 0.8, 0.9, 0.8, 0.0],
        );
        let t = agglomerate(&d, &OwaParams::default()).unwrap();
        let s = t.cut_summary_tsv(2, &d).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1\t2\t0.100000\tDRB1*01\t1.0000"));
        assert!(lines[2].starts_with("2\t1\t0.000000\tDRB1*04"));
    }

    #[test]
    fn rejects_bad_matrices() {
        let names: Vec<String> = vec!["a".into(), "b".into()];
        assert!(DistanceMatrix::new(
            names.clone(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0])
        )
        .is_err());
        assert!(
            DistanceMatrix::new(names, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]))
                .is_err()
        );
    }
}
