//! Embedding-quality analysis: PCA, k-means, KNN balanced accuracy and
//! exact t-SNE, plus CSV/PNG export of 2-D coordinates.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::metrics::{balanced_accuracy, confusion};
use crate::tiler::RasterImage;

/// Centers each column and scales it to unit (population) variance.
/// Constant columns are only centered.
pub fn standardize(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut out = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            out.row_mut(i)[j] = (x.get(i, j) - mean) / scale;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One orthonormal component per row, by decreasing variance.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

/// Principal components of the sample covariance (n − 1 denominator).
/// Each component is signed so its largest-magnitude entry is positive.
pub fn pca_fit(x: &Matrix, n_components: usize) -> Result<Pca> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 samples"));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::invalid(format!("n_components {n_components} must lie in 1..={}", n.min(d))));
    }
    let mean: Vec<f64> = x.col_sums().iter().map(|s| s / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Matrix::zeros(n_components, d);
    let mut explained_variance = Vec::with_capacity(n_components);
    for (r, &k) in order.iter().take(n_components).enumerate() {
        let v = eig.eigenvectors.column(k);
        let lead = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components.row_mut(r)[j] = sign * v[j];
        }
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(Pca { mean, components, explained_variance })
}

impl Pca {
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        let d = self.mean.len();
        if x.cols != d {
            return Err(Error::DimensionMismatch { expected: d, found: x.cols });
        }
        let k = self.components.rows;
        let mut out = Matrix::zeros(x.rows, k);
        for i in 0..x.rows {
            let row = x.row(i);
            for c in 0..k {
                out.row_mut(i)[c] = self.components.row(c).iter().zip(row).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum();
            }
        }
        Ok(out)
    }

    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, z: &Matrix) -> Matrix {
        let d = self.mean.len();
        let mut out = Matrix::zeros(z.rows, d);
        for i in 0..z.rows {
            let row = out.row_mut(i);
            row.copy_from_slice(&self.mean);
            for (c, &w) in z.row(i).iter().enumerate() {
                for (o, &comp) in row.iter_mut().zip(self.components.row(c)) {
                    *o += w * comp;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Matrix,
    pub inertia: f64,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn nearest(point: &[f64], centers: &Matrix) -> (usize, f64) {
    (0..centers.rows).fold((0, f64::INFINITY), |(bi, bd), c| {
        let d = squared_distance(point, centers.row(c));
        if d < bd {
            (c, d)
        } else {
            (bi, bd)
        }
    })
}

fn kmeans_pp<R: Rng>(x: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = x.rows;
    let mut centers = Matrix::zeros(k, x.cols);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            Err(_) => rng.random_range(0..n),
        };
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(x.row(i), x.row(pick)));
        }
    }
    centers
}

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing or `max_iters` is reached. A cluster left empty is
/// reseeded at the point farthest from its current center.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let (n, d) = x.shape();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(x, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let (next, dists): (Vec<usize>, Vec<f64>) = (0..n).map(|i| nearest(x.row(i), &centers)).unzip();
        history.push(dists.iter().sum());
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut far = dists;
        for c in 0..k {
            if counts[c] == 0 {
                let pick = (0..n).fold(0, |b, i| if far[i] > far[b] { i } else { b });
                centers.row_mut(c).copy_from_slice(x.row(pick));
                far[pick] = 0.0;
            } else {
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    let (assignments, dists): (Vec<usize>, Vec<f64>) = (0..n).map(|i| nearest(x.row(i), &centers)).unzip();
    Ok(KMeansResult { assignments, centers, inertia: dists.iter().sum(), inertia_history: history, iterations })
}

/// k-nearest-neighbour labels by majority vote. Equal distances favour the
/// lower train index; tied votes favour the smaller class code.
pub fn knn_predict(train: &Matrix, train_labels: &[usize], test: &Matrix, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if train.rows == 0 || train.rows != train_labels.len() {
        return Err(Error::invalid("train set must be non-empty with one label per row"));
    }
    if test.cols != train.cols {
        return Err(Error::DimensionMismatch { expected: train.cols, found: test.cols });
    }
    let n_classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let k = k.min(train.rows);
    Ok((0..test.rows)
        .map(|t| {
            let mut order: Vec<(f64, usize)> =
                (0..train.rows).map(|i| (squared_distance(test.row(t), train.row(i)), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; n_classes];
            for &(_, i) in &order[..k] {
                votes[train_labels[i]] += 1;
            }
            (0..n_classes).fold(0, |b, c| if votes[c] > votes[b] { c } else { b })
        })
        .collect())
}

pub fn knn_balanced_accuracy(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if test.rows == 0 {
        return Err(Error::invalid("test set is empty"));
    }
    if test.rows != test_labels.len() {
        return Err(Error::invalid("one test label per row required"));
    }
    let predicted = knn_predict(train, train_labels, test, k)?;
    let n_classes = train_labels.iter().chain(test_labels).max().map_or(1, |m| m + 1);
    balanced_accuracy(&confusion(test_labels, &predicted, n_classes)?)
}

/// Adjusted Rand index between two partitions of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("partitions must be non-empty and equally long"));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |m: u64| (m * m.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&m| pairs(m)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub out_dim: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            out_dim: 2,
            learning_rate: 200.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub embedding: Matrix,
    pub kl_divergence: f64,
    /// (completed iterations, KL) every `KL_RECORD_INTERVAL` iterations.
    pub kl_history: Vec<(usize, f64)>,
}

pub const KL_RECORD_INTERVAL: usize = 10;
const BINARY_SEARCH_STEPS: usize = 50;
const ENTROPY_TOLERANCE: f64 = 1e-5;

fn pairwise_sq(x: &Matrix) -> Matrix {
    let n = x.rows;
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = squared_distance(x.row(i), x.row(j));
            d.row_mut(i)[j] = v;
            d.row_mut(j)[i] = v;
        }
    }
    d
}

/// Row-stochastic conditional affinities, each row calibrated by binary
/// search on the Gaussian precision to the target perplexity.
pub fn conditional_probabilities(x: &Matrix, perplexity: f64) -> Result<Matrix> {
    let n = x.rows;
    let d2 = pairwise_sq(x);
    let target = perplexity.ln();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let dists: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, d2.get(i, j))).collect();
        let min = dists.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
        let max = dists.iter().map(|d| d.1).fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::DegeneratePoint(i));
        }
        let (mut beta, mut lo, mut hi) = (1.0 / max, 0.0, f64::INFINITY);
        let mut row = vec![0.0; dists.len()];
        for _ in 0..BINARY_SEARCH_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for (r, &(_, d)) in row.iter_mut().zip(&dists) {
                *r = (-(d - min) * beta).exp();
                sum += *r;
                weighted += (d - min) * *r;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for r in &mut row {
                *r /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < ENTROPY_TOLERANCE {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        for (&v, &(j, _)) in row.iter().zip(&dists) {
            p.row_mut(i)[j] = v;
        }
    }
    Ok(p)
}

/// `(P_{j|i} + P_{i|j}) / 2n`, summing to 1 overall.
pub fn joint_probabilities(conditional: &Matrix) -> Matrix {
    let n = conditional.rows;
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            p.row_mut(i)[j] = (conditional.get(i, j) + conditional.get(j, i)) / (2.0 * n as f64);
        }
    }
    p
}

fn student_t(y: &Matrix) -> (Matrix, f64) {
    let n = y.rows;
    let mut num = Matrix::zeros(n, n);
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let v = 1.0 / (1.0 + squared_distance(y.row(i), y.row(j)));
            num.row_mut(i)[j] = v;
            num.row_mut(j)[i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &Matrix, num: &Matrix, sum: f64) -> f64 {
    let n = p.rows;
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.get(i, j);
            if i != j && pij > 0.0 {
                let q = (num.get(i, j) / sum).max(f64::MIN_POSITIVE);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl.max(0.0)
}

/// Exact O(n²) t-SNE with early exaggeration, momentum and per-coordinate
/// gains.
pub fn tsne(x: &Matrix, config: &TsneConfig) -> Result<TsneResult> {
    let n = x.rows;
    if n < 4 {
        return Err(Error::invalid("t-SNE needs at least 4 points"));
    }
    if !(config.perplexity > 0.0 && config.perplexity < (n - 1) as f64) {
        return Err(Error::invalid(format!("perplexity {} must lie in (0, {})", config.perplexity, n - 1)));
    }
    if config.iterations == 0 || config.out_dim == 0 {
        return Err(Error::invalid("t-SNE needs at least one iteration and one output dimension"));
    }
    let p = joint_probabilities(&conditional_probabilities(x, config.perplexity)?);
    let dim = config.out_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y = Matrix::from_vec(n, dim, (0..n * dim).map(|_| normal.sample(&mut rng)).collect());
    let mut update = Matrix::zeros(n, dim);
    let mut gains = Matrix::from_vec(n, dim, vec![1.0; n * dim]);
    let mut grad = Matrix::zeros(n, dim);
    let mut history = Vec::new();

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations { config.early_exaggeration } else { 1.0 };
        let momentum = if iter < config.exaggeration_iterations { 0.5 } else { 0.8 };
        let (num, sum) = student_t(&y);
        for i in 0..n {
            let g = grad.row_mut(i);
            g.fill(0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num.get(i, j);
                let coeff = 4.0 * (exaggeration * p.get(i, j) - w / sum) * w;
                for (c, gc) in g.iter_mut().enumerate() {
                    *gc += coeff * (y.get(i, c) - y.get(j, c));
                }
            }
        }
        for k in 0..n * dim {
            let (g, u) = (grad.data[k], update.data[k]);
            let gain = &mut gains.data[k];
            *gain = if (g > 0.0) != (u > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
            update.data[k] = momentum * u - config.learning_rate * *gain * g;
            y.data[k] += update.data[k];
        }
        for c in 0..dim {
            let mean = (0..n).map(|i| y.get(i, c)).sum::<f64>() / n as f64;
            for i in 0..n {
                y.row_mut(i)[c] -= mean;
            }
        }
        let done = iter + 1;
        if done % KL_RECORD_INTERVAL == 0 || done == config.iterations {
            let (num, sum) = student_t(&y);
            history.push((done, kl_divergence(&p, &num, sum)));
        }
    }
    let kl_divergence = history.last().map(|h| h.1).unwrap_or(0.0);
    Ok(TsneResult { embedding: y, kl_divergence, kl_history: history })
}

/// Point colours for class codes, cycled modulo the palette length.
pub const PALETTE: [[u8; 3]; 6] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

/// Writes `id,x,y,label` rows for the first two coordinate columns.
pub fn write_coordinates_csv<W: Write>(out: W, ids: &[String], coords: &Matrix, labels: &[usize]) -> Result<()> {
    if ids.len() != coords.rows || labels.len() != coords.rows || coords.cols < 2 {
        return Err(Error::invalid("ids, labels and 2-D coordinates must align"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "x", "y", "label"])?;
    for i in 0..coords.rows {
        w.write_record([ids[i].clone(), coords.get(i, 0).to_string(), coords.get(i, 1).to_string(), labels[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter plot of the first two coordinate columns on white.
pub fn render_scatter(coords: &Matrix, labels: &[usize], size: u32) -> Result<RasterImage> {
    if coords.cols < 2 || labels.len() != coords.rows {
        return Err(Error::invalid("scatter needs 2-D coordinates with one label per point"));
    }
    if size < 16 {
        return Err(Error::invalid("scatter size must be at least 16 pixels"));
    }
    let mut img = RasterImage::filled(size, size, [255, 255, 255])?;
    let bounds = |c: usize| {
        (0..coords.rows).map(|i| coords.get(i, c)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
    };
    let margin = 6.0;
    let span = size as f64 - 2.0 * margin - 1.0;
    let to_px = |v: f64, (lo, hi): (f64, f64)| {
        if hi > lo {
            margin + (v - lo) / (hi - lo) * span
        } else {
            margin + span / 2.0
        }
    };
    let (bx, by) = (bounds(0), bounds(1));
    for i in 0..coords.rows {
        let cx = to_px(coords.get(i, 0), bx).round() as i64;
        let cy = (size as f64 - 1.0 - to_px(coords.get(i, 1), by)).round() as i64;
        let color = PALETTE[labels[i] % PALETTE.len()];
        for dy in -2..=2i64 {
            for dx in -2..=2i64 {
                if dx * dx + dy * dy <= 5 {
                    let (px, py) = (cx + dx, cy + dy);
                    if px >= 0 && py >= 0 && px < size as i64 && py < size as i64 {
                        img.set_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize, classes: usize, dim: usize, sep: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per {
                let mut r: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                r[c % dim] += sep;
                rows.push(r);
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows), labels)
    }

    #[test]
    fn pca_line_example() {
        let x = Matrix::from_rows(&(0..10).map(|t| vec![t as f64, 2.0 * t as f64]).collect::<Vec<_>>());
        let pca = pca_fit(&x, 1).unwrap();
        let s5 = 5f64.sqrt();
        assert!((pca.components.get(0, 0) - 1.0 / s5).abs() < 1e-12);
        assert!((pca.components.get(0, 1) - 2.0 / s5).abs() < 1e-12);
        assert!(pca_fit(&Matrix::from_rows(&[vec![1.0, 2.0]]), 1).is_err());
        assert!(pca_fit(&x, 3).is_err());
    }

    #[test]
    fn pca_full_rank_preserves_distances() {
        let (x, _) = blobs(10, 3, 4, 3.0, 1);
        let pca = pca_fit(&x, 4).unwrap();
        let z = pca.project(&x).unwrap();
        for i in 0..x.rows {
            for j in 0..x.rows {
                let a = squared_distance(x.row(i), x.row(j)).sqrt();
                let b = squared_distance(z.row(i), z.row(j)).sqrt();
                assert!((a - b).abs() < 1e-9);
            }
        }
        let back = pca.reconstruct(&z);
        let err: f64 = back.data.iter().zip(&x.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = x.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-9 * norm);
        for w in pca.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn standardize_gives_unit_variance() {
        let (x, _) = blobs(8, 2, 3, 5.0, 2);
        let z = standardize(&x);
        for j in 0..3 {
            let col: Vec<f64> = (0..z.rows).map(|i| z.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_examples() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![100.0, 0.0], vec![100.0, 1.0]]);
        let r = kmeans(&x, 2, 3, 100).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let c = r.centers.row(r.assignments[0]);
        assert_eq!(c, &[0.0, 0.5]);
        assert!((r.inertia - 1.0).abs() < 1e-12);

        let all = kmeans(&x, 4, 5, 100).unwrap();
        assert_eq!(all.inertia, 0.0);
        assert!(kmeans(&x, 5, 0, 10).is_err());
    }

    #[test]
    fn kmeans_inertia_descends_and_is_seeded() {
        for seed in 0..10 {
            let (x, _) = blobs(30, 5, 3, 1.5, seed);
            let r = kmeans(&x, 5, seed, 100).unwrap();
            for w in r.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.inertia_history);
            }
            assert_eq!(r, kmeans(&x, 5, seed, 100).unwrap());
        }
    }

    #[test]
    fn knn_rules() {
        let train = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![5.0]]);
        let labels = [2, 0, 1, 1];
        assert_eq!(knn_predict(&train, &labels, &Matrix::from_rows(&[vec![5.0]]), 1).unwrap(), vec![1]);
        // Neighbours at distance 1 tie: the lower train index (label 0) is taken first.
        assert_eq!(knn_predict(&train, &labels, &Matrix::from_rows(&[vec![0.0]]), 2).unwrap(), vec![0]);
        // Votes 0:1, 1:1, 2:1 tie: smallest class code wins.
        assert_eq!(knn_predict(&train, &labels, &Matrix::from_rows(&[vec![0.0]]), 3).unwrap(), vec![0]);
        assert_eq!(knn_balanced_accuracy(&train, &labels, &train, &labels, 1).unwrap(), 1.0);
        assert!(knn_balanced_accuracy(&train, &labels, &Matrix::zeros(0, 1), &[], 1).is_err());
        assert!(knn_predict(&train, &labels, &train, 0).is_err());
    }

    #[test]
    fn ari_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!(ari < 1.0 && ari > -1.0);
    }

    #[test]
    fn tsne_probabilities_normalize() {
        let (x, _) = blobs(8, 2, 3, 4.0, 3);
        let cond = conditional_probabilities(&x, 5.0).unwrap();
        for i in 0..x.rows {
            assert!((cond.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let h: f64 = cond.row(i).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
            assert!((h - 5f64.ln()).abs() < 1e-4, "entropy {h}");
        }
        let joint = joint_probabilities(&cond);
        assert!((joint.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tsne_errors() {
        let dup = Matrix::from_rows(&vec![vec![1.0, 1.0]; 6]);
        let cfg = TsneConfig { perplexity: 2.0, iterations: 10, ..TsneConfig::default() };
        assert!(matches!(tsne(&dup, &cfg), Err(Error::DegeneratePoint(0))));
        let (x, _) = blobs(2, 2, 2, 1.0, 0);
        assert!(tsne(&x, &TsneConfig { perplexity: 3.0, ..cfg.clone() }).is_err());
        assert!(tsne(&Matrix::zeros(3, 2), &cfg).is_err());
    }

    #[test]
    fn tsne_separates_blobs() {
        let (x, labels) = blobs(20, 2, 5, 20.0, 4);
        let cfg = TsneConfig { perplexity: 10.0, iterations: 500, seed: 1, ..TsneConfig::default() };
        let r = tsne(&x, &cfg).unwrap();
        assert!(r.kl_divergence >= 0.0);
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for i in 0..x.rows {
            for j in i + 1..x.rows {
                let d = squared_distance(r.embedding.row(i), r.embedding.row(j)).sqrt();
                if labels[i] == labels[j] {
                    within += d;
                    nw += 1;
                } else {
                    cross += d;
                    nc += 1;
                }
            }
        }
        assert!(within / (nw as f64) < cross / (nc as f64));
        let at300 = r.kl_history.iter().find(|h| h.0 == 300).unwrap().1;
        assert!(r.kl_divergence <= at300 + 1e-6);
        assert_eq!(r, tsne(&x, &cfg).unwrap());
    }

    #[test]
    fn exports() {
        let coords = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]);
        let mut buf = Vec::new();
        write_coordinates_csv(&mut buf, &["a".into(), "b".into()], &coords, &[0, 5]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,x,y,label\na,0,0,0\nb,1,2,5\n");
        let img = render_scatter(&coords, &[0, 5], 64).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
        assert!(img.data().chunks(3).any(|p| p == PALETTE[5]));
        assert!(img.data().chunks(3).any(|p| p == PALETTE[0]));
    }
}
