//! Generative-model evaluation: FID, inception score, and Recall@k over
//! pluggable feature/prediction extractors.

use crate::error::{Result, StaError};
use crate::linalg::{mat_mul, sqrt_psd};

// ── feature statistics ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance, symmetrized.
    pub cov: Vec<f64>,
    pub n: usize,
}

/// Mean and unbiased covariance of an `n x d` feature matrix.
pub fn feature_stats(features: &[f64], n: usize, d: usize) -> Result<FeatureStats> {
    if n < 2 {
        return Err(StaError::invalid(
            "feature_stats",
            format!("need at least 2 samples, got {}", n),
        ));
    }
    if features.len() != n * d {
        return Err(StaError::shape(
            "feature_stats",
            format!("{} values for {}x{}", features.len(), n, d),
        ));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += features[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            let da = features[i * d + a] - mean[a];
            for b in a..d {
                let db = features[i * d + b] - mean[b];
                cov[a * d + b] += da * db;
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v; // symmetry enforced
        }
    }
    Ok(FeatureStats { mean, cov, n })
}

/// Fréchet distance between Gaussian fits:
/// ‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_aΣ_b)^{1/2}), with the matrix square
/// root taken through the symmetrized product √Σ_a Σ_b √Σ_a.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(StaError::shape(
            "fid",
            format!("dimensions differ: {} vs {}", d, b.mean.len()),
        ));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sqrt_a = sqrt_psd(&a.cov, d, 1e-10)?;
    let inner = mat_mul(&mat_mul(&sqrt_a, &b.cov, d), &sqrt_a, d);
    // numerical symmetrization before the eigen pass
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = crate::linalg::sym_eigen(&sym, d)?;
    let scale = vals.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
    let mut tr_sqrt = 0.0;
    for &lam in &vals {
        if lam < -1e-10 * scale {
            return Err(StaError::invalid(
                "fid",
                format!("product matrix not PSD: smallest eigenvalue {}", lam),
            ));
        }
        // eigenvalues within the noise floor are treated as exact zeros;
        // sqrt would otherwise amplify rank-deficiency noise
        if lam > 1e-10 * scale {
            tr_sqrt += lam.sqrt();
        }
    }
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    Ok(mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * tr_sqrt)
}

// ── inception score ─────────────────────────────────────────────────

/// `N x C` class-probability rows.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub classes: usize,
    pub rows: Vec<f64>,
}

impl PredictionSet {
    pub fn n(&self) -> usize {
        self.rows.len() / self.classes
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n() {
            let row = &self.rows[i * self.classes..(i + 1) * self.classes];
            if row.iter().any(|&p| p < 0.0) {
                return Err(StaError::invalid(
                    "PredictionSet",
                    format!("negative probability in row {}", i),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(StaError::invalid(
                    "PredictionSet",
                    format!("row {} sums to {}", i, s),
                ));
            }
        }
        Ok(())
    }
}

const LOG_GUARD: f64 = 1e-12;

/// exp(mean over samples of KL(p(y|x) ‖ p(y))) with the marginal taken as
/// the column mean; 0·log 0 follows the usual convention.
pub fn inception_score(p: &PredictionSet) -> Result<f64> {
    p.validate()?;
    let c = p.classes;
    let n = p.n();
    if n == 0 {
        return Err(StaError::invalid("inception_score", "no prediction rows"));
    }
    let mut marginal = vec![0.0; c];
    for i in 0..n {
        for j in 0..c {
            marginal[j] += p.rows[i * c + j];
        }
    }
    for m in marginal.iter_mut() {
        *m /= n as f64;
    }
    let mut mean_kl = 0.0;
    for i in 0..n {
        let row = &p.rows[i * c..(i + 1) * c];
        let mut kl = 0.0;
        for j in 0..c {
            if row[j] > 0.0 {
                kl += row[j] * (row[j].max(LOG_GUARD).ln() - marginal[j].max(LOG_GUARD).ln());
            }
        }
        mean_kl += kl;
    }
    mean_kl /= n as f64;
    Ok(mean_kl.exp())
}

/// Mean ± (unbiased) standard deviation of the score over contiguous
/// splits.
pub fn inception_score_splits(p: &PredictionSet, splits: usize) -> Result<(f64, f64)> {
    let n = p.n();
    if splits < 1 || n < splits {
        return Err(StaError::invalid(
            "inception_score",
            format!("{} rows cannot form {} splits", n, splits),
        ));
    }
    let c = p.classes;
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let lo = s * n / splits;
        let hi = (s + 1) * n / splits;
        let part = PredictionSet {
            classes: c,
            rows: p.rows[lo * c..hi * c].to_vec(),
        };
        scores.push(inception_score(&part)?);
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let std = if splits > 1 {
        (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (splits - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

// ── retrieval ───────────────────────────────────────────────────────

/// Candidate features plus the ground-truth correspondence map.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    pub d: usize,
    pub candidates: Vec<f64>,
    /// For each query, the candidate indices that count as matches.
    pub ground_truth: Vec<Vec<usize>>,
}

impl RetrievalIndex {
    pub fn n_candidates(&self) -> usize {
        self.candidates.len() / self.d
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_candidates();
        for (q, matches) in self.ground_truth.iter().enumerate() {
            if matches.is_empty() {
                return Err(StaError::invalid(
                    "RetrievalIndex",
                    format!("query {} has no ground-truth match", q),
                ));
            }
            if let Some(&bad) = matches.iter().find(|&&m| m >= n) {
                return Err(StaError::invalid(
                    "RetrievalIndex",
                    format!("query {} references candidate {} of {}", q, bad, n),
                ));
            }
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Percentage of queries whose cosine top-k (ties broken by candidate
/// index) contains at least one ground-truth match.
pub fn recall_at_k(index: &RetrievalIndex, queries: &[f64], k: usize) -> Result<f64> {
    index.validate()?;
    let d = index.d;
    let nq = queries.len() / d;
    if queries.len() != nq * d {
        return Err(StaError::shape(
            "recall_at_k",
            format!("{} query values not a multiple of d={}", queries.len(), d),
        ));
    }
    if nq != index.ground_truth.len() {
        return Err(StaError::shape(
            "recall_at_k",
            format!(
                "{} queries vs {} ground-truth entries",
                nq,
                index.ground_truth.len()
            ),
        ));
    }
    let nc = index.n_candidates();
    if k < 1 || k > nc {
        return Err(StaError::invalid(
            "recall_at_k",
            format!("k = {} outside [1, {}]", k, nc),
        ));
    }
    let mut hits = 0usize;
    for q in 0..nq {
        let qv = &queries[q * d..(q + 1) * d];
        let mut scored: Vec<(f64, usize)> = (0..nc)
            .map(|c| (cosine(qv, &index.candidates[c * d..(c + 1) * d]), c))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let top: Vec<usize> = scored[..k].iter().map(|&(_, c)| c).collect();
        if index.ground_truth[q].iter().any(|m| top.contains(m)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / nq as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_stats_hand_example() {
        let stats = feature_stats(&[0.0, 0.0, 2.0, 2.0], 2, 2).unwrap();
        assert_eq!(stats.mean, vec![1.0, 1.0]);
        assert_eq!(stats.cov, vec![2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn feature_stats_identical_rows_zero_cov() {
        let stats = feature_stats(&[0.3, -0.7, 0.3, -0.7, 0.3, -0.7], 3, 2).unwrap();
        assert!(stats.cov.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn feature_stats_rejects_single_sample() {
        assert!(feature_stats(&[1.0, 2.0], 1, 2).is_err());
    }

    #[test]
    fn feature_stats_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (1000, 4);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let stats = feature_stats(&data, n, d).unwrap();
        // textbook two-pass computation
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += data[i * d + j] / n as f64;
            }
        }
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += (data[i * d + a] - mean[a]) * (data[i * d + b] - mean[b]);
                }
                let oracle = acc / (n - 1) as f64;
                assert!(
                    (stats.cov[a * d + b] - oracle).abs() < 1e-10,
                    "cov[{},{}]",
                    a,
                    b
                );
            }
        }
    }

    #[test]
    fn fid_identical_stats_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..500 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stats = feature_stats(&data, 500, 6).unwrap();
        let v = fid(&stats, &stats).unwrap();
        assert!(v.abs() < 1e-8, "fid(a,a) = {}", v);
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        // N(0,1) vs N(1,1): (0-1)^2 + (1 + 1 - 2) = 1
        let a = FeatureStats {
            mean: vec![0.0],
            cov: vec![1.0],
            n: 100,
        };
        let b = FeatureStats {
            mean: vec![1.0],
            cov: vec![1.0],
            n: 100,
        };
        let v = fid(&a, &b).unwrap();
        assert!((v - 1.0).abs() < 1e-8, "fid = {}", v);
    }

    #[test]
    fn fid_diagonal_closed_form() {
        // Σ_a = 4I, Σ_b = I (2-D), equal means:
        // Tr(4I + I - 2*(4I·I)^{1/2}) = Tr(5I - 4I) = 2
        let a = FeatureStats {
            mean: vec![0.0, 0.0],
            cov: vec![4.0, 0.0, 0.0, 4.0],
            n: 10,
        };
        let b = FeatureStats {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            n: 10,
        };
        let v = fid(&a, &b).unwrap();
        assert!((v - 2.0).abs() < 1e-8, "fid = {}", v);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let d = 5;
            let da: Vec<f64> = (0..60 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let db: Vec<f64> = (0..80 * d).map(|_| rng.random_range(-1.5..0.5)).collect();
            let a = feature_stats(&da, 60, d).unwrap();
            let b = feature_stats(&db, 80, d).unwrap();
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
            assert!(ab >= -1e-8);
        }
    }

    #[test]
    fn fid_statistical_direction_check() {
        // Samples drawn from the reference distribution score lower than a
        // shifted set, at n = 2000.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let n = 2000;
        let gauss = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<f64> {
            (0..n * d)
                .map(|_| shift + crate::tensor::gaussian(rng))
                .collect()
        };
        let reference = feature_stats(&gauss(&mut rng, 0.0), n, d).unwrap();
        let same = feature_stats(&gauss(&mut rng, 0.0), n, d).unwrap();
        let shifted = feature_stats(&gauss(&mut rng, 1.0), n, d).unwrap();
        let fid_same = fid(&same, &reference).unwrap();
        let fid_shifted = fid(&shifted, &reference).unwrap();
        assert!(
            fid_same < fid_shifted,
            "in-distribution {} should beat shifted {}",
            fid_same,
            fid_shifted
        );
    }

    #[test]
    fn inception_score_uniform_rows_is_one() {
        let p = PredictionSet {
            classes: 10,
            rows: vec![0.1; 5 * 10],
        };
        let v = inception_score(&p).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inception_score_balanced_one_hot_is_c() {
        let c = 6;
        let n = 12;
        let mut rows = vec![0.0; n * c];
        for i in 0..n {
            rows[i * c + (i % c)] = 1.0;
        }
        let p = PredictionSet { classes: c, rows };
        let v = inception_score(&p).unwrap();
        assert!((v - c as f64).abs() < 1e-9, "IS = {}", v);
    }

    #[test]
    fn inception_score_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, c) = (100, 10);
        let mut rows = Vec::with_capacity(n * c);
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            rows.extend(raw.into_iter().map(|v| v / z));
        }
        let p = PredictionSet { classes: c, rows: rows.clone() };
        let ours = inception_score(&p).unwrap();
        // direct summation with independent loops
        let mut marginal = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                marginal[j] += rows[i * c + j] / n as f64;
            }
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..c {
                let pv = rows[i * c + j];
                acc += pv * (pv / marginal[j]).ln();
            }
        }
        let oracle = (acc / n as f64).exp();
        assert!((ours - oracle).abs() < 1e-10, "{} vs {}", ours, oracle);
    }

    #[test]
    fn inception_score_bounds_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (n, c) = (rng.random_range(5..40), rng.random_range(2..8));
            let mut rows = Vec::with_capacity(n * c);
            for _ in 0..n {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0) + 1e-6).collect();
                let z: f64 = raw.iter().sum();
                rows.extend(raw.into_iter().map(|v| v / z));
            }
            let p = PredictionSet { classes: c, rows };
            let v = inception_score(&p).unwrap();
            assert!(v >= 1.0 - 1e-9 && v <= c as f64 + 1e-9, "IS = {} for C = {}", v, c);
        }
    }

    #[test]
    fn recall_self_retrieval_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 8;
        let n = 20;
        let feats: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let index = RetrievalIndex {
            d,
            candidates: feats.clone(),
            ground_truth: (0..n).map(|i| vec![i]).collect(),
        };
        assert_eq!(recall_at_k(&index, &feats, 1).unwrap(), 100.0);
        // k = candidate count retrieves everything
        assert_eq!(recall_at_k(&index, &feats, n).unwrap(), 100.0);
    }

    #[test]
    fn recall_hand_constructed_two_of_three() {
        // candidates chosen so exactly queries 0 and 1 rank their match first
        let d = 2;
        let candidates = vec![
            1.0, 0.0, // c0
            0.0, 1.0, // c1
            -1.0, 0.0, // c2
        ];
        let queries = vec![
            1.0, 0.1, // q0 -> c0 (match c0) hit
            0.1, 1.0, // q1 -> c1 (match c1) hit
            0.9, 0.5, // q2 -> c0, but match is c2 -> miss at k=1
        ];
        let index = RetrievalIndex {
            d,
            candidates,
            ground_truth: vec![vec![0], vec![1], vec![2]],
        };
        let r = recall_at_k(&index, &queries, 1).unwrap();
        assert!((r - 200.0 / 3.0).abs() < 1e-9, "r = {}", r);
    }

    #[test]
    fn recall_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 6;
        let n = 15;
        let cand: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let quer: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let index = RetrievalIndex {
            d,
            candidates: cand,
            ground_truth: (0..n).map(|i| vec![i]).collect(),
        };
        let mut prev = 0.0;
        for k in 1..=n {
            let r = recall_at_k(&index, &quer, k).unwrap();
            assert!(r >= prev - 1e-12, "recall dropped at k={}", k);
            prev = r;
        }
        assert_eq!(prev, 100.0);
    }

    #[test]
    fn recall_rejects_oversized_k() {
        let index = RetrievalIndex {
            d: 2,
            candidates: vec![1.0, 0.0, 0.0, 1.0],
            ground_truth: vec![vec![0]],
        };
        assert!(recall_at_k(&index, &[1.0, 0.0], 3).is_err());
    }

    #[test]
    fn is_splits_mean_and_std() {
        let c = 4;
        let n = 40;
        let mut rows = vec![0.0; n * c];
        for i in 0..n {
            rows[i * c + (i % c)] = 1.0;
        }
        let p = PredictionSet { classes: c, rows };
        let (mean, std) = inception_score_splits(&p, 10).unwrap();
        assert!((mean - c as f64).abs() < 1e-9);
        assert!(std.abs() < 1e-9);
    }
}
