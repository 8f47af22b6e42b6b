//! Distribution and reconstruction metrics for generated point clouds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{validation_err, Error, Result};
use crate::geometry::{BevHistogram, PointCloud};

/// Moment channels per coordinate (mean, std, skew, excess kurtosis) times four
/// coordinates, then the radial histogram.
pub const MOMENT_FEATURES: usize = 16;
pub const RADIAL_BINS: usize = 16;
pub const FEATURE_DIM: usize = MOMENT_FEATURES + RADIAL_BINS;

const NORMALIZATION_TOLERANCE: f64 = 1e-6;
const COVARIANCE_JITTER: f64 = 1e-6;
const BANDWIDTH_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Static 3-d tree over point indices.
struct KdTree<'a> {
    pts: &'a [[f64; 3]],
    nodes: Vec<KdNode>,
}

struct KdNode {
    idx: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl<'a> KdTree<'a> {
    fn build(pts: &'a [[f64; 3]]) -> Self {
        let mut tree = KdTree {
            pts,
            nodes: Vec::with_capacity(pts.len()),
        };
        let mut order: Vec<usize> = (0..pts.len()).collect();
        tree.build_rec(&mut order, 0);
        tree
    }

    fn build_rec(&mut self, order: &mut [usize], depth: usize) -> Option<usize> {
        if order.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = self.pts;
        order.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let mid = order.len() / 2;
        let id = self.nodes.len();
        self.nodes.push(KdNode {
            idx: order[mid],
            axis,
            left: None,
            right: None,
        });
        let (lo, hi) = order.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut hi[1..], depth + 1);
        self.nodes[id].left = left;
        self.nodes[id].right = right;
        Some(id)
    }

    fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(Some(0), q, &mut best);
        best
    }

    fn search(&self, node: Option<usize>, q: [f64; 3], best: &mut f64) {
        let Some(id) = node else { return };
        let n = &self.nodes[id];
        let d = sq_dist(self.pts[n.idx], q);
        if d < *best {
            *best = d;
        }
        let diff = q[n.axis] - self.pts[n.idx][n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        if diff * diff <= *best {
            self.search(far, q, best);
        }
    }
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn mean_nearest(from: &[[f64; 3]], tree: &KdTree<'_>) -> f64 {
    from.iter().map(|&p| tree.nearest_sq(p)).sum::<f64>() / from.len() as f64
}

/// Symmetric mean squared nearest-neighbour distance, in m².
pub fn chamfer_distance(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::UndefinedInput(
            "Chamfer distance of an empty cloud".into(),
        ));
    }
    let a: Vec<[f64; 3]> = p.points.iter().map(|pt| pt.xyz()).collect();
    let b: Vec<[f64; 3]> = q.points.iter().map(|pt| pt.xyz()).collect();
    let (ta, tb) = (KdTree::build(&a), KdTree::build(&b));
    Ok(mean_nearest(&a, &tb) + mean_nearest(&b, &ta))
}

fn check_normalized(h: &BevHistogram, which: &str) -> Result<()> {
    if h.bins.iter().any(|&b| b < 0.0 || !b.is_finite()) {
        return validation_err(format!("histogram {which} has negative or non-finite bins"));
    }
    let total = h.total();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return validation_err(format!("histogram {which} sums to {total}, expected 1"));
    }
    Ok(())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &BevHistogram, q: &BevHistogram) -> Result<f64> {
    if p.bins.len() != q.bins.len() {
        return validation_err("histograms have different bin counts");
    }
    check_normalized(p, "p")?;
    check_normalized(q, "q")?;
    let m: Vec<f64> = p
        .bins
        .iter()
        .zip(&q.bins)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(0.5 * kl_to_mixture(&p.bins, &m) + 0.5 * kl_to_mixture(&q.bins, &m))
}

fn hist_sq_dist(a: &BevHistogram, b: &BevHistogram) -> f64 {
    a.bins
        .iter()
        .zip(&b.bins)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Median pairwise Euclidean distance over all distinct pairs.
pub fn median_bandwidth(all: &[&BevHistogram]) -> f64 {
    let mut d = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(hist_sq_dist(all[i], all[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    med.max(BANDWIDTH_FLOOR)
}

/// Unbiased squared MMD with a Gaussian kernel at the median-heuristic bandwidth.
pub fn mmd(a: &[BevHistogram], b: &[BevHistogram]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return validation_err(format!(
            "MMD needs at least 2 histograms per set, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    let dim = a[0].bins.len();
    if a.iter().chain(b).any(|h| h.bins.len() != dim) {
        return validation_err("histograms have different bin counts");
    }
    let all: Vec<&BevHistogram> = a.iter().chain(b).collect();
    let sigma = median_bandwidth(&all);
    let k =
        |x: &BevHistogram, y: &BevHistogram| (-hist_sq_dist(x, y) / (2.0 * sigma * sigma)).exp();
    let within = |s: &[BevHistogram]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += k(&s[i], &s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64)
}

/// Mean and unbiased covariance with diagonal jitter.
pub fn fit_gaussian(features: &[FeatureVector]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return validation_err(format!(
            "need at least 2 feature vectors, got {}",
            features.len()
        ));
    }
    let d = features[0].0.len();
    if d == 0 || features.iter().any(|f| f.0.len() != d) {
        return validation_err("feature vectors have inconsistent dimension");
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i].0[j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    for j in 0..d {
        cov[(j, j)] += COVARIANCE_JITTER;
    }
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians given by their parameters.
pub fn frechet_from_params(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return validation_err("Gaussian parameters have inconsistent dimensions");
    }
    // sqrt(Σ1^½ Σ2 Σ1^½) has the singular values of Σ1^½ Σ2^½ as eigenvalues.
    let b = psd_sqrt(s1) * psd_sqrt(s2);
    let tr_sqrt: f64 = b.singular_values().iter().sum();
    Ok((mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt)
}

pub fn frechet_distance(real: &[FeatureVector], generated: &[FeatureVector]) -> Result<f64> {
    let (mu1, s1) = fit_gaussian(real)?;
    let (mu2, s2) = fit_gaussian(generated)?;
    frechet_from_params(&mu1, &s1, &mu2, &s2)
}

pub fn semantic_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.0.len() != b.0.len() {
        return validation_err("feature vectors have different dimensions");
    }
    let na = a.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedInput(
            "cosine similarity of a zero vector".into(),
        ));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Population mean, std, skew and excess kurtosis; higher moments are 0 when std is 0.
fn moments(values: impl Iterator<Item = f64> + Clone, n: f64) -> [f64; 4] {
    let mean = values.clone().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let std = m2.sqrt();
    if std <= 1e-12 * (1.0 + mean.abs()) {
        return [mean, 0.0, 0.0, 0.0];
    }
    [mean, std, m3 / (m2 * std), m4 / (m2 * m2) - 3.0]
}

/// Moment statistics per coordinate followed by a histogram of point range
/// over `[0, max range]`.
pub fn extract_features(cloud: &PointCloud) -> Result<FeatureVector> {
    if cloud.is_empty() {
        return Err(Error::UndefinedInput("features of an empty cloud".into()));
    }
    let n = cloud.len() as f64;
    let mut out = Vec::with_capacity(FEATURE_DIM);
    out.extend(moments(cloud.points.iter().map(|p| p.x), n));
    out.extend(moments(cloud.points.iter().map(|p| p.y), n));
    out.extend(moments(cloud.points.iter().map(|p| p.z), n));
    out.extend(moments(cloud.points.iter().map(|p| p.intensity), n));
    let r_max = cloud.points.iter().map(|p| p.range()).fold(0.0, f64::max);
    let mut hist = [0.0; RADIAL_BINS];
    for p in &cloud.points {
        let bin = if r_max > 0.0 {
            ((p.range() / r_max) * RADIAL_BINS as f64) as usize
        } else {
            0
        };
        hist[bin.min(RADIAL_BINS - 1)] += 1.0 / n;
    }
    out.extend(hist);
    Ok(FeatureVector(out))
}
