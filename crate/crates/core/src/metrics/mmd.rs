use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.ndim() != 2 || b.ndim() != 2 || a.row_len() != b.row_len() {
        return Err(Error::Shape {
            op: "mmd_rbf",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::invalid("MMD needs at least two samples per side"));
    }
    Ok(())
}

/// Median pairwise distance over the pooled rows of `a` and `b`.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 { med } else { 1.0 }
}

struct KernelSums {
    aa: f64,
    bb: f64,
    ab: f64,
    aa_diag: f64,
    bb_diag: f64,
}

fn kernel_sums(a: &Tensor, b: &Tensor, bandwidth: f64) -> KernelSums {
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| (-g * sq_dist(x, y)).exp();
    let within = |t: &Tensor| {
        let mut s = 0.0;
        for i in 0..t.rows() {
            for j in i + 1..t.rows() {
                s += k(t.row(i), t.row(j));
            }
        }
        2.0 * s
    };
    let mut ab = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            ab += k(a.row(i), b.row(j));
        }
    }
    KernelSums {
        aa: within(a),
        bb: within(b),
        ab,
        aa_diag: a.rows() as f64,
        bb_diag: b.rows() as f64,
    }
}

/// Unbiased squared MMD with kernel `exp(-||x - y||^2 / (2 h^2))`. `None`
/// picks `h` by the median heuristic.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    check(a, b)?;
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(a, b));
    let s = kernel_sums(a, b, h);
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    Ok(s.aa / (n * (n - 1.0)) + s.bb / (m * (m - 1.0)) - 2.0 * s.ab / (n * m))
}

/// Biased (V-statistic) squared MMD; exactly zero for identical sets.
pub fn mmd_rbf_biased(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    check(a, b)?;
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(a, b));
    let s = kernel_sums(a, b, h);
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    Ok((s.aa + s.aa_diag) / (n * n) + (s.bb + s.bb_diag) / (m * m) - 2.0 * s.ab / (n * m))
}
