//! Sample-set metrics: 2-Wasserstein distance, intra-cluster diversity,
//! mode coverage and memorization.

use udad_tensor::Tensor;

use crate::{Error, Result};

/// Largest equal-size problem solved exactly.
pub const EXACT_LIMIT: usize = 512;
pub const SINKHORN_REG: f64 = 0.01;
pub const SINKHORN_ITERS: usize = 500;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::InvalidArgument(format!(
            "dimension {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Squared-Euclidean cost matrix, row-major `[n, m]`.
pub fn cost_matrix(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut c = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        c.extend((0..b.rows()).map(|j| sq_dist(a.row(i), b.row(j))));
    }
    c
}

/// Minimum-cost perfect matching on a square `n × n` cost matrix using
/// shortest augmenting paths with potentials. Returns `assign[row] = col`
/// and the total cost.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if cost.len() != n * n {
        return Err(Error::InvalidArgument(format!(
            "cost of length {} is not {n}x{n}",
            cost.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    // 1-based rows/cols; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((assign, total))
}

/// Exact W₂ between equal-size uniform point clouds.
pub fn wasserstein2_exact(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_sets(a, b)?;
    if a.rows() != b.rows() {
        return Err(Error::InvalidArgument("exact W2 needs equal sizes".into()));
    }
    let n = a.rows();
    let (_, total) = min_cost_assignment(&cost_matrix(a, b), n)?;
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Exact for `n = m ≤ 512`, debiased entropic OT otherwise.
pub fn wasserstein2(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_sets(a, b)?;
    if a.rows() == b.rows() && a.rows() <= EXACT_LIMIT {
        wasserstein2_exact(a, b)
    } else {
        Ok(sinkhorn_divergence(a, b, SINKHORN_REG, SINKHORN_ITERS)?
            .max(0.0)
            .sqrt())
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Dual potentials of entropic OT between uniform weights, log-domain.
fn sinkhorn_potentials(
    cost: &[f64],
    n: usize,
    m: usize,
    reg: f64,
    iters: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..iters {
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            f[i] = -reg * log_sum_exp((0..m).map(|j| log_b + (g[j] - row[j]) / reg));
        }
        for j in 0..m {
            g[j] = -reg * log_sum_exp((0..n).map(|i| log_a + (f[i] - cost[i * m + j]) / reg));
        }
    }
    (f, g)
}

fn entropic_ot(a: &Tensor, b: &Tensor, reg: f64, iters: usize) -> f64 {
    let (n, m) = (a.rows(), b.rows());
    let (f, g) = sinkhorn_potentials(&cost_matrix(a, b), n, m, reg, iters);
    f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64
}

/// `OT_ε(a,b) − ½OT_ε(a,a) − ½OT_ε(b,b)`, an estimate of W₂².
pub fn sinkhorn_divergence(a: &Tensor, b: &Tensor, reg: f64, iters: usize) -> Result<f64> {
    check_sets(a, b)?;
    if !(reg > 0.0) {
        return Err(Error::InvalidArgument(format!("regularization {reg}")));
    }
    let ab = entropic_ot(a, b, reg, iters);
    let aa = entropic_ot(a, a, reg, iters);
    let bb = entropic_ot(b, b, reg, iters);
    Ok(ab - 0.5 * (aa + bb))
}

fn nearest(point: &[f64], refs: &Tensor) -> (usize, f64) {
    (0..refs.rows())
        .map(|j| (j, sq_dist(point, refs.row(j))))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diversity {
    pub value: f64,
    /// No cluster held two or more generations.
    pub degenerate: bool,
}

/// Mean pairwise distance inside each nearest-exemplar cluster, averaged
/// over clusters holding at least two generations.
pub fn intra_diversity(generated: &Tensor, exemplars: &Tensor) -> Result<Diversity> {
    check_sets(generated, exemplars)?;
    if generated.rows() < 2 {
        return Err(Error::InvalidArgument(
            "diversity needs at least 2 generations".into(),
        ));
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); exemplars.rows()];
    for i in 0..generated.rows() {
        clusters[nearest(generated.row(i), exemplars).0].push(i);
    }
    let means: Vec<f64> = clusters
        .iter()
        .filter(|c| c.len() >= 2)
        .map(|c| {
            let mut total = 0.0;
            for (p, &i) in c.iter().enumerate() {
                for &j in &c[p + 1..] {
                    total += sq_dist(generated.row(i), generated.row(j)).sqrt();
                }
            }
            total / (c.len() * (c.len() - 1) / 2) as f64
        })
        .collect();
    if means.is_empty() {
        return Ok(Diversity {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Diversity {
        value: means.iter().sum::<f64>() / means.len() as f64,
        degenerate: false,
    })
}

/// Fraction of `centers` with a generation within `radius`.
pub fn mode_coverage(generated: &Tensor, centers: &Tensor, radius: f64) -> Result<f64> {
    check_sets(generated, centers)?;
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("coverage radius {radius}")));
    }
    let r2 = radius * radius;
    let hit = (0..centers.rows())
        .filter(|&c| (0..generated.rows()).any(|i| sq_dist(generated.row(i), centers.row(c)) <= r2))
        .count();
    Ok(hit as f64 / centers.rows() as f64)
}

/// Mean distance from each generation to its nearest exemplar.
pub fn memorization(generated: &Tensor, exemplars: &Tensor) -> Result<f64> {
    check_sets(generated, exemplars)?;
    let total: f64 = (0..generated.rows())
        .map(|i| nearest(generated.row(i), exemplars).1.sqrt())
        .sum();
    Ok(total / generated.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub w2_to_target: f64,
    pub w2_to_source: f64,
    pub diversity: f64,
    pub diversity_degenerate: bool,
    pub coverage: f64,
    pub memorization: f64,
    pub n_generated: usize,
    pub n_reference: usize,
}

/// Reference sets a generator is scored against.
#[derive(Clone, Debug)]
pub struct EvalReference {
    pub target: Tensor,
    pub source: Tensor,
    pub exemplars: Tensor,
    pub centers: Tensor,
    pub radius: f64,
}

pub fn evaluate_samples(generated: &Tensor, reference: &EvalReference) -> Result<MetricsReport> {
    if !generated.is_finite() {
        return Err(Error::NonFinite("generated samples".into()));
    }
    let diversity = intra_diversity(generated, &reference.exemplars)?;
    Ok(MetricsReport {
        w2_to_target: wasserstein2(generated, &reference.target)?,
        w2_to_source: wasserstein2(generated, &reference.source)?,
        diversity: diversity.value,
        diversity_degenerate: diversity.degenerate,
        coverage: mode_coverage(generated, &reference.centers, reference.radius)?,
        memorization: memorization(generated, &reference.exemplars)?,
        n_generated: generated.rows(),
        n_reference: reference.target.rows(),
    })
}
