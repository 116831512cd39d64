//! χ² similarity, K-nearest-neighbour retrieval and the Gaussian model of
//! pairwise neighbour similarities.
//!
//! A query histogram is compared with the `K` training histograms closest to it.
//! The pairwise χ² distances among those neighbours define `N(mu, sigma^2)`;
//! the query's own distances to the neighbours are then scored by their tail
//! probability under that Gaussian and the log-probabilities are summed.
//!
//! All comparisons inside one retrieval are carried out in units of the greatest
//! common divisor of every count involved. Multiplying all histograms by an
//! integer therefore reduces to the same integers, so rankings, standardized
//! distances and log-probabilities are bit-identical under count scaling, while
//! the reported `mu` and `sigma^2` still carry the physical scale.

use crate::descriptor::ShapeHistogram;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_P_MIN: f64 = 1e-12;
pub const DEFAULT_SIGMA2_MIN: f64 = 1e-6;

/// Which tail of `N(mu, sigma^2)` turns a distance into a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailMode {
    /// `P[X >= s]` for `s > mu`, and 1 for `s <= mu`.
    #[default]
    Upper,
    /// `P[|X - mu| >= |s - mu|]`.
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringConfig {
    /// Probability floor keeping every log finite.
    pub p_min: f64,
    /// Variance floor, in reduced count units.
    pub sigma2_min: f64,
    pub tail: TailMode,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { p_min: DEFAULT_P_MIN, sigma2_min: DEFAULT_SIGMA2_MIN, tail: TailMode::Upper }
    }
}

/// χ² distance `1/2 * sum (p - q)^2 / (p + q)`, skipping bins empty in both.
#[inline]
pub fn chi2_counts(p: &[u32], q: &[u32]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0f64;
    for (&a, &b) in p.iter().zip(q) {
        let s = a as f64 + b as f64;
        if s > 0.0 {
            let d = a as f64 - b as f64;
            acc += d * d / s;
        }
    }
    0.5 * acc
}

/// χ² distance after dividing every count by `unit` (which must divide them all).
#[inline]
fn chi2_in_units(p: &[u32], q: &[u32], unit: u32) -> f64 {
    if unit == 1 {
        return chi2_counts(p, q);
    }
    let mut acc = 0.0f64;
    for (&a, &b) in p.iter().zip(q) {
        let s = (a / unit) as f64 + (b / unit) as f64;
        if s > 0.0 {
            let d = (a / unit) as f64 - (b / unit) as f64;
            acc += d * d / s;
        }
    }
    0.5 * acc
}

/// χ² distance between two histograms.
pub fn chi2(p: &ShapeHistogram, q: &ShapeHistogram) -> Result<f64> {
    let (a, b) = (p.counts(), q.counts());
    if a.len() != b.len() {
        return Err(Error::BinCountMismatch(a.len(), b.len()));
    }
    Ok(chi2_counts(a, b))
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Greatest common divisor of every count in `hists`, or 1 when all are zero.
pub fn common_unit<'a>(hists: impl IntoIterator<Item = &'a [u32]>) -> u32 {
    let mut g = 0u32;
    for h in hists {
        for &c in h {
            g = gcd(g, c);
            if g == 1 {
                return 1;
            }
        }
    }
    g.max(1)
}

fn check_bins<H: AsRef<[u32]>>(n: usize, hists: &[H]) -> Result<()> {
    match hists.iter().find(|h| h.as_ref().len() != n) {
        Some(h) => Err(Error::BinCountMismatch(n, h.as_ref().len())),
        None => Ok(()),
    }
}

/// Distances from `query` to each pool entry, in units of `unit`.
fn distances<H: AsRef<[u32]>>(query: &[u32], pool: &[H], unit: u32) -> Vec<f64> {
    pool.iter().map(|h| chi2_in_units(query, h.as_ref(), unit)).collect()
}

/// Indices of the `k` smallest distances, ordered by distance then index.
fn k_smallest(dist: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Indices of the `k` pool histograms closest to `query` under χ², in
/// ascending distance with ties broken by ascending index.
pub fn knn_retrieve<Q, H>(query: &Q, pool: &[H], k: usize) -> Result<Vec<usize>>
where
    Q: AsRef<[u32]> + ?Sized,
    H: AsRef<[u32]>,
{
    let query = query.as_ref();
    if pool.len() < k {
        return Err(Error::PoolTooSmall { pool: pool.len(), k });
    }
    check_bins(query.len(), pool)?;
    let unit = common_unit(std::iter::once(query).chain(pool.iter().map(|h| h.as_ref())));
    Ok(k_smallest(&distances(query, pool, unit), k))
}

/// `N(mu, sigma^2)` fitted to the pairwise χ² distances among `K` neighbours.
///
/// Moments are held in units of `unit` counts; [`mu`](Self::mu) and
/// [`sigma2`](Self::sigma2) report them on the original count scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnGaussian {
    mu: f64,
    sigma2: f64,
    k: usize,
    unit: u32,
}

impl KnnGaussian {
    pub fn mu(&self) -> f64 {
        self.mu * self.unit as f64
    }

    /// Variance after flooring.
    pub fn sigma2(&self) -> f64 {
        let u = self.unit as f64;
        self.sigma2 * u * u
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Divisor the moments were computed under.
    pub fn unit(&self) -> u32 {
        self.unit
    }

    /// `(s - mu) / sigma` for a distance `s` expressed in this model's units.
    #[inline]
    fn standardize(&self, s: f64) -> f64 {
        (s - self.mu) / self.sigma2.sqrt()
    }
}

fn fit_in_units<H: AsRef<[u32]>>(neighbors: &[H], unit: u32, sigma2_min: f64) -> Result<KnnGaussian> {
    let k = neighbors.len();
    if k < 2 {
        return Err(Error::DegenerateK(k));
    }
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k - 1 {
        for j in i + 1..k {
            pairs.push(chi2_in_units(neighbors[i].as_ref(), neighbors[j].as_ref(), unit));
        }
    }
    let n = pairs.len() as f64;
    let mu = pairs.iter().sum::<f64>() / n;
    let var = pairs.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    Ok(KnnGaussian { mu, sigma2: var.max(sigma2_min), k, unit })
}

/// Mean and variance of the `K(K-1)/2` pairwise distances among `neighbors`;
/// the variance is floored at `cfg.sigma2_min`.
pub fn fit_gaussian<H: AsRef<[u32]>>(neighbors: &[H], cfg: &ScoringConfig) -> Result<KnnGaussian> {
    if neighbors.len() < 2 {
        return Err(Error::DegenerateK(neighbors.len()));
    }
    check_bins(neighbors[0].as_ref().len(), neighbors)?;
    let unit = common_unit(neighbors.iter().map(|h| h.as_ref()));
    fit_in_units(neighbors, unit, cfg.sigma2_min)
}

/// Joint log-probability `L` of a query (always `<= 0`).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AnomalyScore(pub f64);

impl AnomalyScore {
    pub const NORMAL: AnomalyScore = AnomalyScore(0.0);

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Standard normal upper tail `P[Z >= z]`.
#[inline]
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

#[inline]
fn tail_probability(z: f64, above_mean: bool, tail: TailMode) -> f64 {
    match tail {
        TailMode::Upper if !above_mean => 1.0,
        TailMode::Upper => normal_sf(z),
        TailMode::TwoSided => libm::erfc(z.abs() / std::f64::consts::SQRT_2),
    }
}

/// Sums `ln p_k` over distances already expressed in the model's units.
fn log_joint(dist: impl Iterator<Item = f64>, g: &KnnGaussian, cfg: &ScoringConfig) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut z_scores = Vec::new();
    for s in dist {
        let z = g.standardize(s);
        let p = tail_probability(z, s > g.mu, cfg.tail).max(cfg.p_min);
        total += p.ln();
        z_scores.push(z);
    }
    (total.min(0.0), z_scores)
}

/// `L = sum_k ln p_k` where `p_k` is the tail probability of the query's
/// distance to neighbour `k` under `g`, floored at `cfg.p_min`.
pub fn joint_score<Q, H>(query: &Q, neighbors: &[H], g: &KnnGaussian, cfg: &ScoringConfig) -> Result<AnomalyScore>
where
    Q: AsRef<[u32]> + ?Sized,
    H: AsRef<[u32]>,
{
    let query = query.as_ref();
    check_bins(query.len(), neighbors)?;
    let unit = common_unit(std::iter::once(query).chain(neighbors.iter().map(|h| h.as_ref())));
    // distances are taken in `unit`; rescale them onto the model's unit
    let ratio = (unit != g.unit).then(|| unit as f64 / g.unit as f64);
    let dist = distances(query, neighbors, unit)
        .into_iter()
        .map(|s| ratio.map_or(s, |r| s * r));
    Ok(AnomalyScore(log_joint(dist, g, cfg).0))
}

/// Strict test `L < t_p`.
pub fn is_anomalous(score: AnomalyScore, t_p: f64) -> bool {
    score.0 < t_p
}

/// Everything produced by one retrieve-fit-score pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    /// Pool indices of the neighbours, closest first.
    pub neighbors: Vec<usize>,
    /// Query-to-neighbour distances on the original count scale.
    pub distances: Vec<f64>,
    /// `(s_k - mu) / sigma` per neighbour.
    pub standardized: Vec<f64>,
    pub gaussian: KnnGaussian,
    pub score: AnomalyScore,
}

/// Retrieves the `k` nearest neighbours of `query` in `pool`, fits the
/// pairwise-similarity Gaussian and scores the query in one pass, sharing a
/// single count unit across all three steps.
pub fn assess<Q, H>(query: &Q, pool: &[H], k: usize, cfg: &ScoringConfig) -> Result<Assessment>
where
    Q: AsRef<[u32]> + ?Sized,
    H: AsRef<[u32]>,
{
    let query = query.as_ref();
    if k < 2 {
        return Err(Error::DegenerateK(k));
    }
    if pool.len() < k {
        return Err(Error::PoolTooSmall { pool: pool.len(), k });
    }
    check_bins(query.len(), pool)?;
    let unit = common_unit(std::iter::once(query).chain(pool.iter().map(|h| h.as_ref())));
    let all = distances(query, pool, unit);
    let neighbors = k_smallest(&all, k);
    let chosen: Vec<&[u32]> = neighbors.iter().map(|&i| pool[i].as_ref()).collect();
    let gaussian = fit_in_units(&chosen, unit, cfg.sigma2_min)?;
    let (l, standardized) = log_joint(neighbors.iter().map(|&i| all[i]), &gaussian, cfg);
    let distances = neighbors.iter().map(|&i| all[i] * unit as f64).collect();
    Ok(Assessment { neighbors, distances, standardized, gaussian, score: AnomalyScore(l) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_hand_values() {
        assert_eq!(chi2_counts(&[4, 0, 0], &[0, 4, 0]), 4.0);
        assert_eq!(chi2_counts(&[1, 0], &[0, 0]), 0.5);
        assert_eq!(chi2_counts(&[3, 1, 0, 7], &[3, 1, 0, 7]), 0.0);
        assert_eq!(chi2_counts(&[0, 0], &[0, 0]), 0.0);
    }

    #[test]
    fn chi2_rejects_mismatched_layouts() {
        use crate::descriptor::BinLayout;
        let a = ShapeHistogram::zeros(BinLayout::new(2, 2, 1.0).unwrap());
        let b = ShapeHistogram::zeros(BinLayout::new(2, 3, 1.0).unwrap());
        assert!(matches!(chi2(&a, &b), Err(Error::BinCountMismatch(4, 6))));
    }

    #[test]
    fn gcd_units() {
        assert_eq!(common_unit([&[4u32, 8, 0][..], &[12, 0, 0][..]]), 4);
        assert_eq!(common_unit([&[0u32, 0][..]]), 1);
        assert_eq!(common_unit([&[3u32, 5][..]]), 1);
    }

    #[test]
    fn retrieval_self_match_and_ties() {
        let pool: Vec<Vec<u32>> = (0..10).map(|i| vec![i, 10 - i, 1]).collect();
        let nn = knn_retrieve(&pool[7], &pool, 3).unwrap();
        assert_eq!(nn[0], 7);

        // five histograms all at the same distance from the query
        let q = vec![2u32, 0, 0, 0, 0, 0];
        let pool: Vec<Vec<u32>> = (1..6).map(|b| {
            let mut h = vec![0u32; 6];
            h[b] = 2;
            h
        }).collect();
        assert_eq!(knn_retrieve(&q, &pool, 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(knn_retrieve(&q, &pool, 6), Err(Error::PoolTooSmall { pool: 5, k: 6 })));
    }

    #[test]
    fn gaussian_from_known_pairs() {
        // pairwise distances 1 (a,b), 2 (a,c), 3 (b,c) under chi2 with a single
        // bin pair: chi2([x,0],[0,y]) = (x + y) / 2.
        let a = vec![0u32, 0, 0, 0];
        let b = vec![2u32, 0, 0, 0];
        let c = vec![0u32, 4, 0, 0];
        assert_eq!(chi2_counts(&a, &b), 1.0);
        assert_eq!(chi2_counts(&a, &c), 2.0);
        assert_eq!(chi2_counts(&b, &c), 3.0);
        let g = fit_gaussian(&[a, b, c], &ScoringConfig::default()).unwrap();
        assert!((g.mu() - 2.0).abs() < 1e-15);
        assert!((g.sigma2() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_neighbours_hit_variance_floor() {
        let h = vec![5u32, 1, 0, 2];
        let cfg = ScoringConfig::default();
        let g = fit_gaussian(&vec![h.clone(); 6], &cfg).unwrap();
        assert_eq!(g.mu(), 0.0);
        // unit is gcd(5,1,2) = 1
        assert_eq!(g.sigma2(), cfg.sigma2_min);
        assert!(matches!(fit_gaussian(&[h], &cfg), Err(Error::DegenerateK(1))));
        let score = joint_score(&vec![5u32, 1, 0, 2], &vec![vec![5u32, 1, 0, 2]; 6], &g, &cfg).unwrap();
        assert_eq!(score, AnomalyScore(0.0));
    }

    #[test]
    fn far_query_hits_probability_floor() {
        let cfg = ScoringConfig::default();
        let neighbors = vec![vec![10u32, 0, 0, 1], vec![10, 0, 1, 0], vec![11, 0, 0, 0]];
        let g = fit_gaussian(&neighbors, &cfg).unwrap();
        let l = joint_score(&vec![0u32, 500, 0, 0], &neighbors, &g, &cfg).unwrap();
        assert!((l.0 - 3.0 * cfg.p_min.ln()).abs() < 1e-9);
        assert!(l.0.is_finite());
    }

    #[test]
    fn threshold_is_strict() {
        assert!(!is_anomalous(AnomalyScore(0.0), -5.0));
        assert!(is_anomalous(AnomalyScore(-100.0), -5.0));
        assert!(!is_anomalous(AnomalyScore(-5.0), -5.0));
    }

    #[test]
    fn assess_agrees_with_separate_steps() {
        let cfg = ScoringConfig::default();
        let pool: Vec<Vec<u32>> = (0..30u32).map(|i| vec![i % 7, (i * 3) % 11, 5, i % 4]).collect();
        let q = vec![3u32, 4, 6, 1];
        let a = assess(&q, &pool, 8, &cfg).unwrap();
        assert_eq!(a.neighbors, knn_retrieve(&q, &pool, 8).unwrap());
        let chosen: Vec<&Vec<u32>> = a.neighbors.iter().map(|&i| &pool[i]).collect();
        let g = fit_gaussian(&chosen, &cfg).unwrap();
        assert!((g.mu() - a.gaussian.mu()).abs() <= 1e-12 * g.mu().abs().max(1.0));
        let l = joint_score(&q, &chosen, &g, &cfg).unwrap();
        assert!((l.0 - a.score.0).abs() < 1e-9);
    }

    #[test]
    fn two_sided_penalises_both_directions() {
        let g = KnnGaussian { mu: 10.0, sigma2: 4.0, k: 2, unit: 1 };
        let cfg = ScoringConfig { tail: TailMode::TwoSided, ..Default::default() };
        let (below, _) = log_joint([6.0].into_iter(), &g, &cfg);
        let (above, _) = log_joint([14.0].into_iter(), &g, &cfg);
        assert!((below - above).abs() < 1e-15);
        assert!(below < 0.0);
        let (upper_below, _) = log_joint([6.0].into_iter(), &g, &ScoringConfig::default());
        assert_eq!(upper_below, 0.0);
    }
}
