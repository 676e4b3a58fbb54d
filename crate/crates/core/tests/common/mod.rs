//! Reference implementations shared by the integration tests. Nothing here
//! calls into the numeric code under test.

#![allow(dead_code, clippy::needless_range_loop)]

pub const SYMBOLS: &str = "ARNDCQEGHILKMFPSTWYV";

const TABLE_TSV: &str = include_str!("../data/blosum62_2.tsv");

/// The substitution table as printed, keyed by symbol order of the header.
pub fn table_text() -> Vec<(char, char, String)> {
    let mut lines = TABLE_TSV.lines();
    let header: Vec<char> = lines
        .next()
        .unwrap()
        .split('\t')
        .skip(1)
        .map(|s| s.chars().next().unwrap())
        .collect();
    let mut out = Vec::new();
    for line in lines {
        let mut cells = line.split('\t');
        let row = cells.next().unwrap().chars().next().unwrap();
        for (col, cell) in header.iter().zip(cells) {
            out.push((row, *col, cell.to_string()));
        }
    }
    out
}

/// Table values in `SYMBOLS` order.
pub fn table() -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; 20]; 20];
    for (r, c, v) in table_text() {
        let i = SYMBOLS.find(r).unwrap();
        let j = SYMBOLS.find(c).unwrap();
        t[i][j] = v.parse().unwrap();
    }
    t
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&x, &y| a[x][k].abs().partial_cmp(&a[y][k].abs()).unwrap())
            .unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in (k + 1)..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = ((i + 1)..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

fn idx(c: u8) -> usize {
    SYMBOLS.bytes().position(|s| s == c).unwrap()
}

/// Every equal-length substring pair, multiplied out from the raw table.
pub fn brute_k3(f: &str, g: &str, beta: f64, k_max: Option<usize>) -> f64 {
    let t = table();
    let (f, g) = (f.as_bytes(), g.as_bytes());
    let top = f.len().min(g.len()).min(k_max.unwrap_or(usize::MAX));
    let mut total = 0.0;
    for len in 1..=top {
        for i in 0..=(f.len() - len) {
            for j in 0..=(g.len() - len) {
                let mut prod = 1.0;
                for k in 0..len {
                    prod *= t[idx(f[i + k])][idx(g[j + k])].powf(beta);
                }
                total += prod;
            }
        }
    }
    total
}

pub fn brute_k3_hat(f: &str, g: &str, beta: f64) -> f64 {
    brute_k3(f, g, beta, None) / (brute_k3(f, f, beta, None) * brute_k3(g, g, beta, None)).sqrt()
}

/// Fraction of (binder, non-binder) pairs with a strictly higher binder
/// prediction.
pub fn pair_count_auc(pred: &[f64], obs: &[f64], theta: f64) -> Option<f64> {
    let (mut hits, mut total) = (0u64, 0u64);
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if obs[i] > theta && obs[j] <= theta {
                total += 1;
                if pred[i] > pred[j] {
                    hits += 1;
                }
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// RLS by elimination: coefficients of `(K + ridge I) c = y`.
pub fn ridge_coefficients(k: &[Vec<f64>], y: &[f64], ridge: f64) -> Vec<f64> {
    let mut a = k.to_vec();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += ridge;
    }
    gauss_solve(a, y.to_vec())
}

/// Leave-one-out residuals by refitting on every `m - 1` subset with the
/// per-sample regularizer `lambda`.
pub fn naive_loo(k: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let m = y.len();
    (0..m)
        .map(|i| {
            let rest: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            let kt: Vec<Vec<f64>> = rest
                .iter()
                .map(|&a| rest.iter().map(|&b| k[a][b]).collect())
                .collect();
            let yt: Vec<f64> = rest.iter().map(|&j| y[j]).collect();
            let c = ridge_coefficients(&kt, &yt, (m - 1) as f64 * lambda);
            let pred: f64 = rest.iter().zip(&c).map(|(&j, cj)| cj * k[i][j]).sum();
            y[i] - pred
        })
        .collect()
}

pub fn to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
