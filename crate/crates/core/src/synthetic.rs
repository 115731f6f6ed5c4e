//! Synthetic observational data with known potential outcomes.
//!
//! Each ad has a context drawn from five feature groups generated from a
//! few latent factors (popularity, quality, shop size, category). The
//! expected all-channel outcome under treatment `T_i` (i.e. `i - 1`
//! advertising clicks) is
//!
//! ```text
//! m_i(x) = base(x) + lift(x) * g(i - 1),   g(k) = 1 - (1 - k/(n-1))^2
//! ```
//!
//! with `g` concave, nondecreasing and `g(0) = 0`. Treatments are assigned
//! through `softmax(b * u_i(x))`, where `u_i` favours high click levels for
//! contexts whose assignment score is high. The score is correlated with
//! `lift(x)`, so high-lift ads buy more clicks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureSchema, Sample, Sidecar};
use crate::error::{Error, Result};

const PILOT_SAMPLES: usize = 4096;
const WORLD_STREAM: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_samples: usize,
    pub n_treatments: usize,
    pub ids_dim: usize,
    pub pv_lastday_dim: usize,
    pub pv_lastweek_dim: usize,
    pub shop_dim: usize,
    pub competition_dim: usize,
    /// Selection-bias strength `b`; 0 means randomized assignment.
    pub selection_bias: f64,
    pub noise_std: f64,
    pub lift_min: f64,
    pub lift_max: f64,
    pub base_level: f64,
    /// Correlation between the assignment score and the lift score.
    pub confounding: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_samples: 20_000,
            n_treatments: 5,
            ids_dim: 10,
            pv_lastday_dim: 6,
            pv_lastweek_dim: 6,
            shop_dim: 5,
            competition_dim: 3,
            selection_bias: 5.0,
            noise_std: 1.0,
            lift_min: 1.0,
            lift_max: 6.0,
            base_level: 10.0,
            confounding: 0.8,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_treatments < 2 {
            return fail(format!("n_treatments must be >= 2, got {}", self.n_treatments));
        }
        if self.n_samples < 10 * self.n_treatments {
            return fail(format!(
                "n_samples must be >= 10 * n_treatments = {}, got {}",
                10 * self.n_treatments,
                self.n_samples
            ));
        }
        if self.ids_dim == 0
            || self.pv_lastday_dim == 0
            || self.pv_lastweek_dim == 0
            || self.shop_dim == 0
            || self.competition_dim == 0
        {
            return fail("every feature group needs at least one column".into());
        }
        if !(self.selection_bias >= 0.0 && self.selection_bias.is_finite()) {
            return fail(format!("selection_bias must be >= 0, got {}", self.selection_bias));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(0.0 <= self.lift_min && self.lift_min <= self.lift_max && self.lift_max.is_finite()) {
            return fail(format!(
                "need 0 <= lift_min <= lift_max, got [{}, {}]",
                self.lift_min, self.lift_max
            ));
        }
        if !(self.base_level > 0.0) {
            return fail("base_level must be positive".into());
        }
        if !(-1.0..=1.0).contains(&self.confounding) {
            return fail("confounding must lie in [-1, 1]".into());
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::advertising(
            self.ids_dim,
            self.pv_lastday_dim,
            self.pv_lastweek_dim,
            self.shop_dim,
            self.competition_dim,
        )
    }

    pub fn dim(&self) -> usize {
        self.schema().dim()
    }
}

/// A linear score over standardized raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScore {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearScore {
    fn eval(&self, z: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Closed-form potential outcomes of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n_treatments: usize,
    pub noise_std: f64,
    pub base_level: f64,
    pub lift_min: f64,
    pub lift_max: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub base_score: LinearScore,
    pub lift_score: LinearScore,
    pub assignment_score: LinearScore,
    pub selection_bias: f64,
    /// Numeric column most strongly tied to the assignment score.
    pub confounder_feature: usize,
}

impl GroundTruth {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_mean.len() {
            return Err(Error::ContextDim {
                expected: self.feature_mean.len(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn base(&self, x: &[f64]) -> f64 {
        let z = self.base_score.eval(&self.standardize(x));
        self.base_level * (1.0 + 0.4 * z.tanh())
    }

    pub fn lift(&self, x: &[f64]) -> f64 {
        let z = self.lift_score.eval(&self.standardize(x));
        self.lift_min + (self.lift_max - self.lift_min) * sigmoid(1.5 * z)
    }

    /// Saturation curve `g(k)` for `k = 0..n-1` advertising clicks.
    pub fn saturation(&self, clicks: usize) -> f64 {
        let top = (self.n_treatments - 1) as f64;
        let r = 1.0 - (clicks as f64).min(top) / top;
        1.0 - r * r
    }

    /// `m_i(x)` for the 1-based treatment `i`.
    pub fn outcome_mean(&self, x: &[f64], i: usize) -> Result<f64> {
        self.check(x)?;
        self.check_index(i)?;
        Ok(self.base(x) + self.lift(x) * self.saturation(i - 1))
    }

    /// All `n` potential-outcome means of one context.
    pub fn outcome_means(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let (b, l) = (self.base(x), self.lift(x));
        Ok((0..self.n_treatments).map(|k| b + l * self.saturation(k)).collect())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < 1 || i > self.n_treatments {
            return Err(Error::TreatmentOutOfRange {
                index: i,
                n: self.n_treatments,
            });
        }
        Ok(())
    }

    /// True effect `alpha_{i,j}(x) = m_j(x) - m_i(x)`.
    pub fn true_iae(&self, x: &[f64], i: usize, j: usize) -> Result<f64> {
        self.check_index(i)?;
        self.check_index(j)?;
        let l = self.lift(x);
        self.check(x)?;
        // base(x) cancels exactly
        Ok(l * (self.saturation(j - 1) - self.saturation(i - 1)))
    }

    pub fn true_iae_matrix(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(x)?;
        let l = self.lift(x);
        let g: Vec<f64> = (0..self.n_treatments).map(|k| self.saturation(k)).collect();
        Ok(g.iter().map(|gi| g.iter().map(|gj| l * (gj - gi)).collect()).collect())
    }

    /// Score in `(0, 1)` pushing assignment towards high click levels.
    pub fn assignment_score(&self, x: &[f64]) -> f64 {
        sigmoid(1.5 * self.assignment_score.eval(&self.standardize(x)))
    }

    /// Treatment assignment probabilities `softmax(b * u_i(x))`.
    pub fn propensities(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_treatments;
        let s = self.assignment_score(x);
        let logits: Vec<f64> = (0..n)
            .map(|k| {
                let level = k as f64 / (n - 1) as f64;
                self.selection_bias * (s * level + (1.0 - s) * (1.0 - level))
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws one raw context from the feature generator.
pub fn sample_context(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let popularity = normal(rng);
    let quality = normal(rng);
    let shop_size = normal(rng);
    let category = rng.random_range(0..cfg.ids_dim);

    let mut x = Vec::with_capacity(cfg.dim());
    x.extend((0..cfg.ids_dim).map(|c| if c == category { 1.0 } else { 0.0 }));

    // last-day page views per source, as log(1 + count)
    let mut lastday_rate = Vec::with_capacity(cfg.pv_lastday_dim);
    for k in 0..cfg.pv_lastday_dim {
        let tilt = 0.15 * (k as f64 - cfg.pv_lastday_dim as f64 / 2.0);
        let rate = (2.0 + 0.8 * popularity + (0.3 + tilt) * quality + 0.3 * normal(rng)).exp();
        lastday_rate.push(rate);
        x.push(rate.ln_1p());
    }
    // last week: exponentially decayed average of seven noisy days
    for k in 0..cfg.pv_lastweek_dim {
        let center = lastday_rate[k % lastday_rate.len()];
        let (mut acc, mut norm) = (0.0, 0.0);
        for day in 0..7 {
            let w = 0.7f64.powi(day);
            acc += w * center * (0.25 * normal(rng) + 0.1 * quality).exp();
            norm += w;
        }
        x.push((acc / norm).ln_1p());
    }
    // shop statistics
    for k in 0..cfg.shop_dim {
        let v = (3.0 + 1.0 * shop_size + 0.2 * k as f64 + 0.3 * popularity + 0.3 * normal(rng)).exp();
        x.push(v.ln_1p());
    }
    // competition: ad rank, then log ranks
    let ad_rank = (1.5 - 0.5 * popularity - 0.4 * quality + 0.3 * normal(rng)).exp();
    let shop_rank = (1.5 - 0.6 * shop_size + 0.3 * normal(rng)).exp();
    let comp = [ad_rank, ad_rank.ln_1p(), shop_rank.ln_1p()];
    for k in 0..cfg.competition_dim {
        x.push(if k < comp.len() {
            comp[k]
        } else {
            (shop_rank * (1.0 + 0.1 * normal(rng).abs())).ln_1p()
        });
    }
    x
}

fn random_score(rng: &mut ChaCha8Rng, dim: usize, density: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..dim)
        .map(|_| {
            if rng.random::<f64>() < density {
                normal(rng)
            } else {
                0.0
            }
        })
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        w.iter_mut().for_each(|v| *v /= norm);
    } else {
        w[0] = 1.0;
    }
    w
}

/// Ground truth of the world identified by `cfg` (the sample count does
/// not affect it).
pub fn ground_truth(cfg: &GenConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ WORLD_STREAM);
    let d = cfg.dim();

    let pilot: Vec<Vec<f64>> = (0..PILOT_SAMPLES).map(|_| sample_context(cfg, &mut rng)).collect();
    let mut mean = vec![0.0; d];
    for x in &pilot {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / PILOT_SAMPLES as f64);
    }
    let mut scale = vec![0.0; d];
    for x in &pilot {
        scale
            .iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2) / PILOT_SAMPLES as f64);
    }
    scale
        .iter_mut()
        .for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });

    let base = random_score(&mut rng, d, 0.5);
    let lift = random_score(&mut rng, d, 0.5);
    let other = random_score(&mut rng, d, 0.5);
    let rho = cfg.confounding;
    let assign: Vec<f64> = lift
        .iter()
        .zip(&other)
        .map(|(l, o)| rho * l + (1.0 - rho * rho).sqrt() * o)
        .collect();

    let one_hot = cfg.schema().one_hot_mask();
    let confounder_feature = (0..d)
        .filter(|&j| !one_hot[j])
        .max_by(|&a, &b| assign[a].abs().total_cmp(&assign[b].abs()))
        .unwrap_or(0);

    Ok(GroundTruth {
        n_treatments: cfg.n_treatments,
        noise_std: cfg.noise_std,
        base_level: cfg.base_level,
        lift_min: cfg.lift_min,
        lift_max: cfg.lift_max,
        feature_mean: mean,
        feature_scale: scale,
        base_score: LinearScore {
            weights: base,
            intercept: 0.0,
        },
        lift_score: LinearScore {
            weights: lift,
            intercept: 0.0,
        },
        assignment_score: LinearScore {
            weights: assign,
            intercept: 0.0,
        },
        selection_bias: cfg.selection_bias,
        confounder_feature,
    })
}

/// Draws `n_samples` observational samples from an existing world.
pub fn sample_dataset(cfg: &GenConfig, gt: &GroundTruth, n_samples: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = sample_context(cfg, &mut rng);
        let p = gt.propensities(&x);
        let u: f64 = rng.random();
        let mut t = p.len();
        let mut acc = 0.0;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                t = k + 1;
                break;
            }
        }
        let noise = if gt.noise_std > 0.0 {
            gt.noise_std * normal(&mut rng)
        } else {
            0.0
        };
        let y = (gt.outcome_mean(&x, t)? + noise).max(0.0);
        samples.push(Sample { x, t, y });
    }
    let mut sidecar = Sidecar::new(cfg.n_treatments, cfg.schema());
    sidecar.generator = Some(GenConfig {
        n_samples,
        seed,
        ..cfg.clone()
    });
    sidecar.ground_truth = Some(gt.clone());
    Dataset::new(sidecar, samples)
}

/// Generates the dataset and ground truth described by `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset, GroundTruth)> {
    let gt = ground_truth(cfg)?;
    let ds = sample_dataset(cfg, &gt, cfg.n_samples, cfg.seed)?;
    Ok((ds, gt))
}

/// Pearson chi-square statistic of the contingency table between the
/// quantile bin of `values` and the treatment.
pub fn chi_square_dependence(values: &[f64], treatments: &[usize], n_treatments: usize, bins: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..bins)
        .map(|b| sorted[(b * sorted.len() / bins).min(sorted.len() - 1)])
        .collect();
    let mut table = vec![vec![0.0; n_treatments]; bins];
    for (v, &t) in values.iter().zip(treatments) {
        let b = cuts.iter().filter(|&&c| *v >= c).count();
        table[b][t - 1] += 1.0;
    }
    let total = values.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..n_treatments).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let exp = rows[i] * cols[j] / total;
            if exp > 0.0 {
                chi += (obs - exp).powi(2) / exp;
            }
        }
    }
    chi
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(bias: f64, noise: f64, seed: u64) -> GenConfig {
        GenConfig {
            n_samples: 5000,
            selection_bias: bias,
            noise_std: noise,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn rejects_single_treatment() {
        let cfg = GenConfig {
            n_treatments: 1,
            ..GenConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn saturation_curve_is_concave_and_anchored() {
        let gt = ground_truth(&GenConfig::default()).unwrap();
        assert_eq!(gt.saturation(0), 0.0);
        assert_eq!(gt.saturation(4), 1.0);
        let g: Vec<f64> = (0..5).map(|k| gt.saturation(k)).collect();
        for k in 1..5 {
            assert!(g[k] >= g[k - 1]);
        }
        for k in 1..4 {
            assert!(g[k] - g[k - 1] >= g[k + 1] - g[k]);
        }
    }

    #[test]
    fn unbiased_assignment_is_uniform() {
        let cfg = small(0.0, 1.0, 11);
        let (ds, _) = generate(&cfg).unwrap();
        let n = cfg.n_treatments as f64;
        let total = ds.len() as f64;
        let p = 1.0 / n;
        let sd = (total * p * (1.0 - p)).sqrt();
        for &c in &ds.stats().counts {
            assert!((c as f64 - total * p).abs() < 3.0 * sd, "{:?}", ds.stats().counts);
        }
    }

    #[test]
    fn noiseless_outcomes_equal_potential_means() {
        let cfg = small(2.0, 0.0, 5);
        let (ds, gt) = generate(&cfg).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.outcome(i), gt.outcome_mean(ds.context(i), ds.treatment(i)).unwrap());
        }
    }

    #[test]
    fn selection_bias_shows_in_chi_square() {
        let chi = |bias: f64| {
            let (ds, gt) = generate(&small(bias, 1.0, 3)).unwrap();
            let col: Vec<f64> = (0..ds.len()).map(|i| ds.context(i)[gt.confounder_feature]).collect();
            chi_square_dependence(&col, ds.treatments(), ds.n_treatments(), 4)
        };
        let (unbiased, biased) = (chi(0.0), chi(5.0));
        assert!(biased > unbiased, "{biased} <= {unbiased}");
    }

    #[test]
    fn iae_by_hand() {
        // constant lift 2: alpha_{1,3} = 2 * (g(2) - g(0)) = 2 * 0.75
        let cfg = GenConfig {
            lift_min: 2.0,
            lift_max: 2.0,
            ..small(1.0, 1.0, 1)
        };
        let gt = ground_truth(&cfg).unwrap();
        let x = vec![0.3; gt.feature_mean.len()];
        assert_eq!(gt.true_iae(&x, 1, 3).unwrap(), 1.5);
        assert_eq!(gt.true_iae(&x, 2, 2).unwrap(), 0.0);
        let m = gt.true_iae_matrix(&x).unwrap();
        assert!((m[0][1] + m[1][2] - m[0][2]).abs() < 1e-12);
    }

    #[test]
    fn potential_outcomes_nonnegative_and_positivity_holds() {
        let cfg = small(5.0, 1.0, 9);
        let (ds, gt) = generate(&cfg).unwrap();
        let floor = (-cfg.selection_bias).exp() / cfg.n_treatments as f64;
        for i in 0..ds.len().min(2000) {
            let x = ds.context(i);
            for m in gt.outcome_means(x).unwrap() {
                assert!(m >= 0.0);
            }
            for p in gt.propensities(x) {
                assert!(p >= floor * (1.0 - 1e-12), "{p} < {floor}");
            }
        }
        let clipped = ds.outcomes().iter().filter(|&&y| y == 0.0).count();
        assert!((clipped as f64) < 0.01 * ds.len() as f64);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = small(5.0, 1.0, 21);
        let (a, ga) = generate(&cfg).unwrap();
        let (b, gb) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn true_iae_checks_indices() {
        let gt = ground_truth(&GenConfig::default()).unwrap();
        let x = vec![0.0; gt.feature_mean.len()];
        assert!(matches!(gt.true_iae(&x, 0, 2), Err(Error::TreatmentOutOfRange { .. })));
        assert!(matches!(gt.true_iae(&x, 1, 6), Err(Error::TreatmentOutOfRange { .. })));
    }
}
