//! Gaussian-process pseudo ground truth over the encoder's latent space.
//!
//! Labeled latents `F` and their density targets `T` form the bank. For an
//! unlabeled latent `z` restricted to its nearest bank rows:
//!
//! ```text
//! k  = κ(z, F_n)                      cosine similarities
//! A  = κ(F_n, F_n) + σ²·I
//! μ  = kᵀ A⁻¹ T_n                     pseudo ground truth
//! Σ  = κ(z, z) − kᵀ A⁻¹ k + σ²        predictive variance
//! ```
//!
//! The prior mean is zero. One Cholesky factorization of `A` serves both the
//! mean and the variance.

use std::cmp::Ordering;

use crate::density::synthesize_density;
use crate::error::{Error, Result};
use crate::model::{self, LatentVector, ModelParams};
use crate::synth::AnnotatedImage;
use crate::tensor::{Array, Cholesky, Graph, NodeId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NeighborMetric {
    /// Highest cosine similarity first, matching the kernel.
    #[default]
    Cosine,
    /// Smallest Euclidean distance first.
    Euclidean,
}

impl std::str::FromStr for NeighborMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            _ => Err(Error::Config(format!("unknown neighbor metric {s:?}"))),
        }
    }
}

impl std::fmt::Display for NeighborMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Euclidean => "euclidean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpConfig {
    pub n_neighbors: usize,
    pub noise_variance: f64,
    pub metric: NeighborMetric,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 8,
            noise_variance: 1.0,
            metric: NeighborMetric::Cosine,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors == 0 {
            return Err(Error::Config("n_neighbors must be ≥ 1".into()));
        }
        if !(self.noise_variance > 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::Config(format!(
                "noise_variance must be positive, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }
}

/// Labeled latents paired with flattened density targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBank {
    ids: Vec<String>,
    features: Vec<Vec<f64>>,
    norms: Vec<f64>,
    targets: Vec<Vec<f64>>,
}

impl LatentBank {
    pub fn new() -> Self {
        Self {
            ids: Vec::new(),
            features: Vec::new(),
            norms: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, feature: Vec<f64>, target: Vec<f64>) -> Result<()> {
        if let (Some(f), Some(t)) = (self.features.first(), self.targets.first()) {
            if f.len() != feature.len() || t.len() != target.len() {
                return Err(Error::Shape(format!(
                    "bank rows are {}/{} long, got {}/{}",
                    f.len(),
                    t.len(),
                    feature.len(),
                    target.len()
                )));
            }
        }
        let norm = l2(&feature);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateLatent);
        }
        self.ids.push(id.into());
        self.features.push(feature);
        self.norms.push(norm);
        self.targets.push(target);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn target_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// N_l × M feature matrix.
    pub fn feature_matrix(&self) -> Result<Array> {
        Array::from_rows(&self.features)
    }

    /// N_l × D target matrix.
    pub fn target_matrix(&self) -> Result<Array> {
        Array::from_rows(&self.targets)
    }
}

impl Default for LatentBank {
    fn default() -> Self {
        Self::new()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// ⟨a, b⟩ / (|a|·|b|), clamped to [−1, 1].
pub fn cosine_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("kernel inputs differ in length: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (l2(a), l2(b));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::DegenerateLatent);
    }
    Ok(cosine_with_norms(a, na, b, nb))
}

/// Bank rows closest to a query, with their features and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    /// n × M
    pub features: Array,
    /// n × D
    pub targets: Array,
}

/// The `min(n, N_l)` bank rows nearest to `z`; ties go to the smaller id.
pub fn nearest(z: &[f64], bank: &LatentBank, n: usize, metric: NeighborMetric) -> Result<Neighbors> {
    if bank.is_empty() {
        return Err(Error::State("latent bank is empty".into()));
    }
    if z.len() != bank.feature_dim() {
        return Err(Error::Shape(format!(
            "query latent has length {}, bank rows have {}",
            z.len(),
            bank.feature_dim()
        )));
    }
    let nz = l2(z);
    if !(nz > 0.0) {
        return Err(Error::DegenerateLatent);
    }
    // score: larger is nearer
    let scores: Vec<f64> = (0..bank.len())
        .map(|i| match metric {
            NeighborMetric::Cosine => cosine_with_norms(z, nz, &bank.features[i], bank.norms[i]),
            NeighborMetric::Euclidean => -z
                .iter()
                .zip(&bank.features[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>(),
        })
        .collect();
    let mut order: Vec<usize> = (0..bank.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => bank.ids[a].cmp(&bank.ids[b]),
        o => o,
    });
    order.truncate(n.min(bank.len()));
    let features = Array::from_rows(&order.iter().map(|&i| bank.features[i].clone()).collect::<Vec<_>>())?;
    let targets = Array::from_rows(&order.iter().map(|&i| bank.targets[i].clone()).collect::<Vec<_>>())?;
    Ok(Neighbors {
        indices: order,
        features,
        targets,
    })
}

/// Shared solve for the mean, the variance and their gradients.
struct GpSolve {
    z_norm: f64,
    row_norms: Vec<f64>,
    /// κ(z, F_n)
    k_star: Vec<f64>,
    chol: Cholesky,
    /// A⁻¹ k
    weights: Vec<f64>,
    variance: f64,
}

fn gp_solve(z: &[f64], features: &Array, noise: f64) -> Result<GpSolve> {
    let n = features.rows();
    if features.cols() != z.len() {
        return Err(Error::Shape(format!(
            "neighbor features have {} columns, latent has {}",
            features.cols(),
            z.len()
        )));
    }
    let z_norm = l2(z);
    if !(z_norm > 0.0) || !z_norm.is_finite() {
        return Err(Error::DegenerateLatent);
    }
    let row_norms: Vec<f64> = (0..n).map(|i| l2(features.row(i))).collect();
    if row_norms.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateLatent);
    }
    let k_star: Vec<f64> = (0..n)
        .map(|i| cosine_with_norms(z, z_norm, features.row(i), row_norms[i]))
        .collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        gram[i * n + i] = 1.0 + noise;
        for j in 0..i {
            let v = cosine_with_norms(features.row(i), row_norms[i], features.row(j), row_norms[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let chol = Cholesky::factor(&Array::new(vec![n, n], gram)?)?;
    let weights = chol.solve_vec(&k_star);
    // κ(z, z) = 1 for the cosine kernel
    let variance = 1.0 - dot(&k_star, &weights) + noise;
    Ok(GpSolve {
        z_norm,
        row_norms,
        k_star,
        chol,
        weights,
        variance,
    })
}

/// Pull a gradient w.r.t. the similarities `k` back to the latent `z`:
/// ∂k_i/∂z = f_i/(|z||f_i|) − k_i·z/|z|².
fn chain_through_cosine(s: &GpSolve, z: &[f64], features: &Array, grad_k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    let zz = s.z_norm * s.z_norm;
    for (i, &gk) in grad_k.iter().enumerate() {
        if gk == 0.0 {
            continue;
        }
        let a = gk / (s.z_norm * s.row_norms[i]);
        let b = gk * s.k_star[i] / zz;
        for ((o, &f), &zv) in out.iter_mut().zip(features.row(i)).zip(z) {
            *o += a * f - b * zv;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpPosterior {
    /// Pseudo ground truth, length D.
    pub mean: Vec<f64>,
    pub variance: f64,
    pub neighbor_ids: Vec<String>,
}

fn check_variance(variance: f64, noise: f64) -> Result<()> {
    let slack = 1e-12 * (1.0 + noise);
    if !(variance >= noise - slack && variance <= 1.0 + noise + slack) {
        return Err(Error::Contract(format!(
            "predictive variance {variance} outside [{noise}, {}]",
            1.0 + noise
        )));
    }
    Ok(())
}

/// Posterior mean and variance at `z` over its nearest bank rows.
pub fn posterior(z: &[f64], bank: &LatentBank, cfg: &GpConfig) -> Result<GpPosterior> {
    cfg.validate()?;
    let nb = nearest(z, bank, cfg.n_neighbors, cfg.metric)?;
    posterior_with(z, &nb, bank, cfg.noise_variance)
}

/// Posterior over an already selected neighbor set.
pub fn posterior_with(z: &[f64], nb: &Neighbors, bank: &LatentBank, noise: f64) -> Result<GpPosterior> {
    let s = gp_solve(z, &nb.features, noise)?;
    check_variance(s.variance, noise)?;
    let d = nb.targets.cols();
    let mut mean = vec![0.0; d];
    for (i, &w) in s.weights.iter().enumerate() {
        for (m, &t) in mean.iter_mut().zip(nb.targets.row(i)) {
            *m += w * t;
        }
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("posterior mean is not finite".into()));
    }
    Ok(GpPosterior {
        mean,
        variance: s.variance,
        neighbor_ids: nb.indices.iter().map(|&i| bank.ids[i].clone()).collect(),
    })
}

/// Differentiable predictive variance w.r.t. the latent node (neighbors are
/// constants). The value is bitwise equal to `posterior(..).variance`.
pub fn variance_node(graph: &mut Graph, z_node: NodeId, neighbors: &Array, noise: f64) -> Result<NodeId> {
    let z = graph.value(z_node).data().to_vec();
    let s = gp_solve(&z, neighbors, noise)?;
    check_variance(s.variance, noise)?;
    // dΣ/dk = −2·A⁻¹k
    let grad_k: Vec<f64> = s.weights.iter().map(|w| -2.0 * w).collect();
    let dsigma_dz = chain_through_cosine(&s, &z, neighbors, &grad_k);
    let value = Array::scalar(s.variance);
    Ok(graph.custom(z_node, value, move |g| {
        Array::from_vec(dsigma_dz.iter().map(|d| d * g.item()).collect())
    }))
}

/// Differentiable posterior mean w.r.t. the latent node, for runs that let
/// gradients flow through the pseudo ground truth.
pub fn mean_node(
    graph: &mut Graph,
    z_node: NodeId,
    neighbors: &Neighbors,
    noise: f64,
) -> Result<NodeId> {
    let z = graph.value(z_node).data().to_vec();
    let s = gp_solve(&z, &neighbors.features, noise)?;
    let n = neighbors.targets.rows();
    let d = neighbors.targets.cols();
    let mut mean = vec![0.0; d];
    for (i, &w) in s.weights.iter().enumerate() {
        for (m, &t) in mean.iter_mut().zip(neighbors.targets.row(i)) {
            *m += w * t;
        }
    }
    let targets = neighbors.targets.clone();
    let features = neighbors.features.clone();
    let value = Array::from_vec(mean);
    Ok(graph.custom(z_node, value, move |g| {
        // μ = kᵀA⁻¹T  ⇒  ∂L/∂k = A⁻¹(T·g)
        let tg: Vec<f64> = (0..n).map(|i| dot(targets.row(i), g.data())).collect();
        let gk = s.chol.solve_vec(&tg);
        debug_assert_eq!(gk.len(), n);
        debug_assert_eq!(g.len(), d);
        Array::from_vec(chain_through_cosine(&s, &z, &features, &gk))
    }))
}

/// Encode every labeled sample with the current parameters and pair it with
/// its flattened ground-truth density. Returns the bank and the number of
/// samples skipped for a zero-norm latent.
pub fn rebuild_bank(
    labeled: &[AnnotatedImage],
    params: &ModelParams,
    sigma: f64,
) -> Result<(LatentBank, usize)> {
    if labeled.is_empty() {
        return Err(Error::State("cannot build a bank from an empty labeled set".into()));
    }
    let mut bank = LatentBank::new();
    let mut skipped = 0;
    for img in labeled {
        let z: LatentVector = model::latent(params, &img.pixels)?;
        let target = synthesize_density(&img.points, img.height, img.width, sigma)?;
        match bank.push(img.id.clone(), z.0, target.into_values()) {
            Ok(()) => {}
            Err(Error::DegenerateLatent) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((bank, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank_of(rows: &[(&str, Vec<f64>, Vec<f64>)]) -> LatentBank {
        let mut b = LatentBank::new();
        for (id, f, t) in rows {
            b.push(*id, f.clone(), t.clone()).unwrap();
        }
        b
    }

    #[test]
    fn self_similarity_is_one() {
        let z = [0.3, -1.2, 4.0, 0.01];
        assert!((cosine_kernel(&z, &z).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_is_zero() {
        assert_eq!(cosine_kernel(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_similarity() {
        let k = cosine_kernel(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((k - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(cosine_kernel(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateLatent)));
    }

    #[test]
    fn saturated_neighbor_count_returns_whole_bank() {
        let b = bank_of(&[
            ("a", vec![1.0, 0.0], vec![1.0]),
            ("b", vec![0.0, 1.0], vec![2.0]),
            ("c", vec![1.0, 1.0], vec![3.0]),
        ]);
        let nb = nearest(&[1.0, 0.2], &b, 10, NeighborMetric::Cosine).unwrap();
        let mut idx = nb.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn single_row_bank() {
        let b = bank_of(&[("only", vec![2.0, -1.0], vec![0.5, 0.5])]);
        let nb = nearest(&[0.0, 1.0], &b, 3, NeighborMetric::Cosine).unwrap();
        assert_eq!(nb.indices, vec![0]);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let b = bank_of(&[
            ("b", vec![1.0, 0.0], vec![1.0]),
            ("a", vec![2.0, 0.0], vec![2.0]),
        ]);
        let nb = nearest(&[1.0, 0.0], &b, 1, NeighborMetric::Cosine).unwrap();
        assert_eq!(nb.indices, vec![1]);
    }

    #[test]
    fn empty_bank_is_state_error() {
        assert!(matches!(
            nearest(&[1.0], &LatentBank::new(), 2, NeighborMetric::Cosine),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn identical_single_neighbor_halves_target() {
        let y = vec![0.2, 1.4, -0.6];
        let z = vec![0.7, -0.1, 2.0, 1.0];
        let b = bank_of(&[("a", z.clone(), y.clone())]);
        let post = posterior(&z, &b, &GpConfig::default()).unwrap();
        for (m, t) in post.mean.iter().zip(&y) {
            assert!((m - t / 2.0).abs() < 1e-12);
        }
        assert!((post.variance - 1.5).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_neighbor_gives_prior() {
        let b = bank_of(&[("a", vec![0.0, 3.0], vec![5.0, 6.0])]);
        let post = posterior(&[2.0, 0.0], &b, &GpConfig::default()).unwrap();
        assert_eq!(post.mean, vec![0.0, 0.0]);
        assert_eq!(post.variance, 2.0);
    }

    #[test]
    fn variance_node_value_matches_posterior_bitwise() {
        let b = bank_of(&[
            ("a", vec![1.0, 0.5, -0.2], vec![1.0]),
            ("b", vec![-0.3, 1.0, 0.4], vec![2.0]),
        ]);
        let z = vec![0.4, 0.9, 0.1];
        let post = posterior(&z, &b, &GpConfig::default()).unwrap();
        let nb = nearest(&z, &b, 8, NeighborMetric::Cosine).unwrap();
        let mut g = Graph::new();
        let zn = g.param(Array::from_vec(z));
        let v = variance_node(&mut g, zn, &nb.features, 1.0).unwrap();
        assert_eq!(g.value(v).item().to_bits(), post.variance.to_bits());
    }

    #[test]
    fn parallel_neighbor_has_no_radial_gradient() {
        let f = vec![1.0, 2.0, -0.5];
        let z: Vec<f64> = f.iter().map(|v| v * 3.0).collect();
        let feats = Array::from_rows(&[f]).unwrap();
        let mut g = Graph::new();
        let zn = g.param(Array::from_vec(z.clone()));
        let v = variance_node(&mut g, zn, &feats, 1.0).unwrap();
        g.backward(v).unwrap();
        let grad = g.grad(zn).unwrap();
        let radial: f64 = grad.data().iter().zip(&z).map(|(a, b)| a * b).sum();
        assert!(radial.abs() < 1e-12);
    }

    #[test]
    fn zero_norm_row_rejected() {
        let mut b = LatentBank::new();
        assert!(matches!(b.push("z", vec![0.0, 0.0], vec![1.0]), Err(Error::DegenerateLatent)));
    }
}
