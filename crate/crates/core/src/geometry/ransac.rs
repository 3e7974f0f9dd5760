use rand::seq::index;
use rand::Rng;

/// A minimal-sample model estimator usable inside [`ransac`].
pub trait Estimator {
    type Model: Clone;

    /// Size of a minimal sample.
    fn sample_size(&self) -> usize;

    /// Candidate models from a minimal sample of data indices.
    fn fit(&self, sample: &[usize]) -> Vec<Self::Model>;

    /// Error of datum `idx` under `model`, in the units of the threshold.
    fn residual(&self, model: &Self::Model, idx: usize) -> f64;

    /// Non-minimal refit on an inlier set.
    fn refit(&self, inliers: &[usize]) -> Option<Self::Model> {
        self.fit(inliers).into_iter().next()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
}

impl RansacConfig {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            confidence: 0.9999,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult<M> {
    pub model: M,
    /// Sorted inlier indices.
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

fn inliers_of<E: Estimator>(est: &E, model: &E::Model, n: usize, threshold: f64) -> Vec<usize> {
    (0..n).filter(|&i| est.residual(model, i) <= threshold).collect()
}

fn required_iterations(inlier_ratio: f64, sample: usize, confidence: f64) -> f64 {
    let good = inlier_ratio.powi(sample as i32);
    if good >= 1.0 - f64::EPSILON {
        return 1.0;
    }
    if good <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (-good).ln_1p()
}

/// Refits on the inlier set (and on a tighter core of it) while the support
/// does not shrink.
fn local_optimize<E: Estimator>(est: &E, model: E::Model, inliers: Vec<usize>, n: usize, threshold: f64) -> (E::Model, Vec<usize>) {
    let s = est.sample_size();
    let mut best = (model, inliers);
    for _ in 0..5 {
        let mut improved = false;
        for (tight, frac) in [(false, 1.0), (true, 0.5)] {
            let subset = inliers_of(est, &best.0, n, threshold * frac);
            if subset.len() < s {
                continue;
            }
            let Some(refined) = est.refit(&subset) else {
                continue;
            };
            let next = inliers_of(est, &refined, n, threshold);
            let better = if tight { next.len() > best.1.len() } else { next.len() >= best.1.len() };
            if better {
                improved |= next.len() > best.1.len();
                best = (refined, next);
            }
        }
        if !improved {
            break;
        }
    }
    best
}

/// RANSAC with an adaptive stopping rule; candidates with support close to
/// the best so far are locally optimized by refitting on their inliers.
pub fn ransac<E: Estimator, R: Rng + ?Sized>(est: &E, n: usize, config: &RansacConfig, rng: &mut R) -> Option<RansacResult<E::Model>> {
    let s = est.sample_size();
    if n < s {
        return None;
    }
    let mut best: Option<(E::Model, Vec<usize>)> = None;
    let mut iterations = 0;
    let mut needed = config.max_iterations as f64;
    while iterations < config.max_iterations && (iterations as f64) < needed {
        iterations += 1;
        let sample = index::sample(rng, n, s).into_vec();
        for model in est.fit(&sample) {
            let inliers = inliers_of(est, &model, n, config.threshold);
            let best_len = best.as_ref().map_or(0, |(_, b)| b.len());
            // noisy minimal samples land near, not on, the best basin
            if best.is_none() || 10 * inliers.len() >= 7 * best_len {
                let (model, inliers) = local_optimize(est, model, inliers, n, config.threshold);
                if best.is_none() || inliers.len() > best_len {
                    needed = required_iterations(inliers.len() as f64 / n as f64, s, config.confidence);
                    best = Some((model, inliers));
                }
            }
        }
    }
    let (model, inliers) = best?;
    Some(RansacResult {
        model,
        inliers,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Line `y = a x + b` through 2D points.
    struct LineFit<'a>(&'a [(f64, f64)]);

    impl Estimator for LineFit<'_> {
        type Model = (f64, f64);

        fn sample_size(&self) -> usize {
            2
        }

        fn fit(&self, sample: &[usize]) -> Vec<(f64, f64)> {
            let n = sample.len() as f64;
            let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
            for &i in sample {
                let (x, y) = self.0[i];
                sx += x;
                sy += y;
                sxx += x * x;
                sxy += x * y;
            }
            let det = n * sxx - sx * sx;
            if det.abs() < 1e-12 {
                return vec![];
            }
            let a = (n * sxy - sx * sy) / det;
            vec![(a, (sy - a * sx) / n)]
        }

        fn residual(&self, m: &(f64, f64), i: usize) -> f64 {
            let (x, y) = self.0[i];
            (m.0 * x + m.1 - y).abs()
        }
    }

    #[test]
    fn recovers_line_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<(f64, f64)> = (0..70).map(|i| (i as f64, 2.0 * i as f64 - 1.0)).collect();
        pts.extend((0..30).map(|_| (rng.random_range(0.0..70.0), rng.random_range(-50.0..50.0))));
        let res = ransac(&LineFit(&pts), pts.len(), &RansacConfig::new(1e-6), &mut rng).unwrap();
        assert!((res.model.0 - 2.0).abs() < 1e-9);
        assert!((0..70).all(|i| res.inliers.contains(&i)));
    }

    #[test]
    fn too_few_points() {
        let pts = [(0.0, 0.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ransac(&LineFit(&pts), 1, &RansacConfig::new(1.0), &mut rng).is_none());
    }
}
