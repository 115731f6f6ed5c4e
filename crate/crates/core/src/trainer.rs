//! Minibatch training of the endpoint-corrected, IPM-regularized objective
//!
//! ```text
//! (2/m) sum_i w_i L_i + lambda R(h)
//!   - (mu_1/m) sum_{t_i = T_1} L_i - (mu_n/m) sum_{t_i = T_n} L_i
//!   + beta sum_{i=1}^{n-1} IPM(phi | T_i, phi | T_{i+1})
//! ```
//!
//! with squared loss `L`, `w_i = mu_{t_i}` taken from the full training
//! split, and `R(h)` the squared Frobenius norm of the hypothesis weights.
//! One backward pass over the total gives `beta g1 + g3` for the
//! representation and `g2 + 2 lambda V` for the hypothesis; a single Adam
//! transform is then applied per tensor.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{split_indices, BatchSampler, Dataset, Standardizer, TreatmentStats};
use crate::error::{Error, Result};
use crate::ipm::{ipm_on_tape, IpmConfig};
use crate::model::{BoundModel, Model, ModelConfig};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

/// Mixed into the run seed for the validation split.
const SPLIT_STREAM: u64 = 0x5eed_0001;
/// Mixed into the run seed for minibatch order.
const BATCH_STREAM: u64 = 0x5eed_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Relative improvement in validation loss that resets patience.
    pub tolerance: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
    pub ipm: IpmConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-4,
            beta: 1.0,
            batch_size: 256,
            max_epochs: 100,
            tolerance: 1e-4,
            patience: 10,
            validation_fraction: 0.2,
            adam: AdamConfig::default(),
            ipm: IpmConfig::training(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.tolerance >= 0.0) {
            return bad(format!("tolerance must be >= 0, got {}", self.tolerance));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        self.adam.validate()?;
        self.ipm.validate()
    }
}

/// Values of the objective's components. `ipm_sum` is `None` when the
/// IPM term is not computed (`beta = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub weighted_factual: f64,
    pub endpoint_correction: f64,
    pub regularization: f64,
    pub ipm_sum: Option<f64>,
    pub total: f64,
}

impl ObjectiveTerms {
    /// `weighted_factual - endpoint_correction + regularization + beta ipm_sum`.
    pub fn recombine(&self, beta: f64) -> f64 {
        self.weighted_factual - self.endpoint_correction + self.regularization + beta * self.ipm_sum.unwrap_or(0.0)
    }

    pub fn factual(&self) -> f64 {
        self.weighted_factual - self.endpoint_correction
    }
}

/// Tape nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveGraph {
    pub total: Var,
    /// `m x 1` squared errors, one per batch sample.
    pub per_sample_loss: Var,
    pub weighted_factual: Var,
    pub endpoint_correction: Var,
    pub regularization: Var,
    pub ipm_sum: Option<Var>,
}

impl ObjectiveGraph {
    pub fn terms(&self, tape: &Tape) -> Result<ObjectiveTerms> {
        let item = |v: Var| tape.value(v).map(|t| t.item());
        Ok(ObjectiveTerms {
            weighted_factual: item(self.weighted_factual)?,
            endpoint_correction: item(self.endpoint_correction)?,
            regularization: item(self.regularization)?,
            ipm_sum: self.ipm_sum.map(item).transpose()?,
            total: item(self.total)?,
        })
    }
}

/// Closed-form factual coefficient of each sample,
/// `mu_{t_i} (2 - 1[t_i is an endpoint]) / m`.
pub fn sample_coefficients(treatments: &[usize], stats: &TreatmentStats) -> Vec<f64> {
    let n = stats.n_treatments();
    let m = treatments.len() as f64;
    treatments
        .iter()
        .map(|&t| {
            let endpoint = t == 1 || t == n;
            stats.weight(t) * if endpoint { 1.0 } else { 2.0 } / m
        })
        .collect()
}

/// Records the objective for one batch. `x` holds the standardized
/// contexts, one row per entry of `treatments` and `outcomes`.
pub fn build_objective(
    tape: &mut Tape,
    bound: &BoundModel,
    x: Var,
    treatments: &[usize],
    outcomes: &[f64],
    stats: &TreatmentStats,
    cfg: &TrainConfig,
) -> Result<ObjectiveGraph> {
    let m = treatments.len();
    if m == 0 || outcomes.len() != m {
        return Err(Error::EmptyDataset);
    }
    let n = stats.n_treatments();
    let r = bound.represent(tape, x)?;
    let y_hat = bound.hypothesis(tape, r, treatments)?;
    let y = tape.leaf(Tensor::column(outcomes.to_vec()));
    let resid = tape.sub(y_hat, y)?;
    let loss = tape.square(resid)?;
    if let Some(i) = tape.value(loss)?.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            term: "factual",
            sample: Some(i),
        });
    }

    let inv_m = 1.0 / m as f64;
    let w_fact = treatments.iter().map(|&t| 2.0 * stats.weight(t) * inv_m).collect();
    let w_end = treatments
        .iter()
        .map(|&t| if t == 1 || t == n { stats.weight(t) * inv_m } else { 0.0 })
        .collect();
    let w_fact = tape.leaf(Tensor::column(w_fact));
    let w_end = tape.leaf(Tensor::column(w_end));
    let wf = tape.mul(loss, w_fact)?;
    let weighted_factual = tape.sum(wf)?;
    let we = tape.mul(loss, w_end)?;
    let endpoint_correction = tape.sum(we)?;

    let mut reg = tape.scalar(0.0);
    for w in bound.hypothesis_weights() {
        let sq = tape.square(w)?;
        let s = tape.sum(sq)?;
        reg = tape.add(reg, s)?;
    }
    let regularization = tape.scale(reg, cfg.lambda)?;

    let ipm_sum = if cfg.beta > 0.0 {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (row, &t) in treatments.iter().enumerate() {
            groups[t - 1].push(row);
        }
        let mut sum = tape.scalar(0.0);
        for pair in groups.windows(2) {
            // a cloud of one sample says nothing about its distribution
            if pair[0].len() < 2 || pair[1].len() < 2 {
                continue;
            }
            let p = tape.gather_rows(r, &pair[0])?;
            let q = tape.gather_rows(r, &pair[1])?;
            let d = ipm_on_tape(tape, p, q, &cfg.ipm)?;
            sum = tape.add(sum, d)?;
        }
        if !tape.value(sum)?.item().is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "ipm",
                sample: None,
            });
        }
        Some(sum)
    } else {
        None
    };

    let total = tape.sub(weighted_factual, endpoint_correction)?;
    let mut total = tape.add(total, regularization)?;
    if let Some(ipm) = ipm_sum {
        let scaled = tape.scale(ipm, cfg.beta)?;
        total = tape.add(total, scaled)?;
    }
    Ok(ObjectiveGraph {
        total,
        per_sample_loss: loss,
        weighted_factual,
        endpoint_correction,
        regularization,
        ipm_sum,
    })
}

/// Objective of `model` on the dataset rows `batch`, with weights from `stats`.
pub fn objective(
    model: &Model,
    dataset: &Dataset,
    batch: &[usize],
    stats: &TreatmentStats,
    cfg: &TrainConfig,
) -> Result<ObjectiveTerms> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.leaf(model.standardize(&dataset.gather_contexts(batch))?);
    let t: Vec<usize> = batch.iter().map(|&i| dataset.treatment(i)).collect();
    let y: Vec<f64> = batch.iter().map(|&i| dataset.outcome(i)).collect();
    build_objective(&mut tape, &bound, x, &t, &y, stats, cfg)?.terms(&tape)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub weighted_factual: f64,
    pub endpoint_correction: f64,
    pub regularization: f64,
    pub ipm_sum: Option<f64>,
    pub objective: f64,
    pub val_factual: f64,
}

impl EpochRecord {
    pub fn factual(&self) -> f64 {
        self.weighted_factual - self.endpoint_correction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub train_size: usize,
    pub validation_size: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_factual: Option<f64>,
    pub stopped_early: bool,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// Per-epoch CSV: `epoch,factual,ipm_sum,objective,val_factual`, where
    /// `factual` is the endpoint-corrected weighted loss and an empty
    /// `ipm_sum` means the term was not computed.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Config(format!("writing CSV: {e}"));
        w.write_record(["epoch", "factual", "ipm_sum", "objective", "val_factual"])
            .map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.factual().to_string(),
                e.ipm_sum.map(|v| v.to_string()).unwrap_or_default(),
                e.objective.to_string(),
                e.val_factual.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing CSV: {e}")))
    }
}

/// Endpoint-corrected squared loss over `indices`, normalized by their count.
fn factual_loss(
    model: &Model,
    std_x: &[f64],
    dataset: &Dataset,
    indices: &[usize],
    stats: &TreatmentStats,
) -> Result<f64> {
    let d = dataset.dim();
    let mut x = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        x.extend_from_slice(&std_x[i * d..(i + 1) * d]);
    }
    let t: Vec<usize> = indices.iter().map(|&i| dataset.treatment(i)).collect();
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(Tensor::matrix(indices.len(), d, x)?);
    let r = bound.represent(&mut tape, xv)?;
    let y_hat = bound.hypothesis(&mut tape, r, &t)?;
    let coef = sample_coefficients(&t, stats);
    Ok(tape
        .value(y_hat)?
        .data()
        .iter()
        .zip(indices)
        .zip(&coef)
        .map(|((p, &i), c)| c * (p - dataset.outcome(i)).powi(2))
        .sum())
}

fn diverged(err: Error, epoch: usize, last_good: Option<usize>) -> Error {
    let term = match err {
        Error::NonFiniteLoss { term, .. } => term,
        Error::NonFiniteGradient { .. } => "gradient",
        other => return other,
    };
    Error::Diverged { epoch, term, last_good }
}

/// Trains a fresh model on `dataset`. A seeded fraction of the rows is held
/// out for early stopping; the parameters of the epoch with the best
/// validation loss are returned.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if model_cfg.input_dim != dataset.dim() || model_cfg.n_treatments != dataset.n_treatments() {
        return Err(Error::Config(format!(
            "model expects d={} n={}, dataset has d={} n={}",
            model_cfg.input_dim,
            model_cfg.n_treatments,
            dataset.dim(),
            dataset.n_treatments()
        )));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.validation_fraction, cfg.seed ^ SPLIT_STREAM);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "dataset of {} rows is too small to split",
            dataset.len()
        )));
    }
    let stats = dataset.stats_for(&train_idx);
    if let Some(j) = stats.counts.iter().position(|&c| c == 0) {
        return Err(Error::Positivity { treatment: j + 1 });
    }

    let mut model = Model::new(model_cfg.clone())?;
    model.set_standardizer(Standardizer::fit(dataset, &train_idx))?;
    let std_x = model.standardize(dataset.contexts())?.into_data();
    let d = dataset.dim();

    let mut adam = AdamState::new(cfg.adam, model.params().iter().map(|p| &p.value));
    let mut sampler = BatchSampler::new(train_idx.clone(), cfg.batch_size, cfg.seed ^ BATCH_STREAM)?;
    let mut report = TrainReport {
        config: cfg.clone(),
        model: model_cfg.clone(),
        train_size: train_idx.len(),
        validation_size: val_idx.len(),
        epochs: Vec::new(),
        best_epoch: None,
        best_val_factual: None,
        stopped_early: false,
        checkpoint: None,
    };
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let last_good = (epoch > 1).then(|| epoch - 1);
        let batches = sampler.epoch();
        let mut acc = [0.0f64; 5];
        for batch in &batches {
            let mut x = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                x.extend_from_slice(&std_x[i * d..(i + 1) * d]);
            }
            let t: Vec<usize> = batch.iter().map(|&i| dataset.treatment(i)).collect();
            let y: Vec<f64> = batch.iter().map(|&i| dataset.outcome(i)).collect();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.leaf(Tensor::matrix(batch.len(), d, x)?);
            let graph = build_objective(&mut tape, &bound, xv, &t, &y, &stats, cfg)
                .map_err(|e| diverged(e, epoch, last_good))?;
            let terms = graph.terms(&tape)?;
            if !terms.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    term: "objective",
                    last_good,
                });
            }
            tape.backward(graph.total)?;
            let grads = bound
                .vars()
                .iter()
                .map(|&v| tape.grad_or_zeros(v))
                .collect::<Result<Vec<_>>>()?;
            let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
            adam.update(&mut params, &grads)
                .map_err(|e| diverged(e, epoch, last_good))?;

            acc[0] += terms.weighted_factual;
            acc[1] += terms.endpoint_correction;
            acc[2] += terms.regularization;
            acc[3] += terms.ipm_sum.unwrap_or(0.0);
            acc[4] += terms.total;
        }
        let nb = batches.len() as f64;
        let val = factual_loss(&model, &std_x, dataset, &val_idx, &stats)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                term: "validation",
                last_good,
            });
        }
        report.epochs.push(EpochRecord {
            epoch,
            weighted_factual: acc[0] / nb,
            endpoint_correction: acc[1] / nb,
            regularization: acc[2] / nb,
            ipm_sum: (cfg.beta > 0.0).then_some(acc[3] / nb),
            objective: acc[4] / nb,
            val_factual: val,
        });
        log::debug!("epoch {epoch}: objective {:.6} val {val:.6}", acc[4] / nb);

        let improved = match report.best_val_factual {
            None => true,
            Some(best) => val < best - cfg.tolerance * best.abs(),
        };
        if improved {
            report.best_epoch = Some(epoch);
            report.best_val_factual = Some(val);
            best_params = Some(model.params().iter().map(|p| p.value.clone()).collect());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    if let Some(best) = best_params {
        for (p, v) in model.params_mut().iter_mut().zip(best) {
            p.value = v;
        }
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureSchema, Sample, Sidecar};
    use crate::model::OutcomeModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, samples: Vec<Sample>) -> Dataset {
        let d = samples[0].x.len();
        Dataset::new(Sidecar::new(n, FeatureSchema::numeric(d)), samples).unwrap()
    }

    fn random_dataset(n: usize, rows: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..rows)
            .map(|i| Sample {
                x: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                t: 1 + i % n,
                y: rng.random_range(0.0..5.0),
            })
            .collect();
        dataset(n, samples)
    }

    fn small_model(n: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            n_treatments: n,
            rep_width: 8,
            rep_depth: 2,
            hyp_width: 8,
            hyp_depth: 2,
            seed,
            ..ModelConfig::default()
        }
    }

    fn instrumented_coefficients(n: usize, beta: f64) -> (Vec<f64>, Vec<f64>) {
        let data = random_dataset(n, 12 * n + 1, n as u64);
        let model = Model::new(small_model(n, 1)).unwrap();
        let cfg = TrainConfig {
            beta,
            lambda: 0.3,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(model.standardize(data.contexts()).unwrap());
        let g = build_objective(
            &mut tape,
            &bound,
            x,
            data.treatments(),
            data.outcomes(),
            data.stats(),
            &cfg,
        )
        .unwrap();
        tape.backward(g.total).unwrap();
        let observed = tape.grad(g.per_sample_loss).unwrap().data().to_vec();
        (observed, sample_coefficients(data.treatments(), data.stats()))
    }

    #[test]
    fn per_sample_coefficients_match_closed_form() {
        for n in [2, 3, 5] {
            let (observed, expected) = instrumented_coefficients(n, 1.0);
            for (o, e) in observed.iter().zip(&expected) {
                assert!((o - e).abs() < 1e-12, "n={n}: {o} vs {e}");
            }
        }
    }

    #[test]
    fn coefficient_examples() {
        // n = 2 with equal counts: every sample carries 0.5 / m
        let stats = TreatmentStats::from_treatments([1, 1, 2, 2], 2);
        assert_eq!(sample_coefficients(&[1, 2, 1, 2], &stats), vec![0.125; 4]);
        // n = 3: the interior treatment is uncorrected
        let stats = TreatmentStats::from_treatments([1, 2, 2, 3], 3);
        let c = sample_coefficients(&[1, 2, 3, 2], &stats);
        assert_eq!(c, vec![0.25 / 4.0, 2.0 * 0.5 / 4.0, 0.25 / 4.0, 2.0 * 0.5 / 4.0]);
    }

    #[test]
    fn perfect_fit_has_zero_objective() {
        let model = Model::new(small_model(3, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Sample> = (0..9)
            .map(|i| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let t = 1 + i % 3;
                let y = model.predict(&x, t).unwrap();
                Sample { x, t, y }
            })
            .collect();
        let data = dataset(3, samples);
        let cfg = TrainConfig {
            beta: 0.0,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let batch: Vec<usize> = (0..9).collect();
        let terms = objective(&model, &data, &batch, data.stats(), &cfg).unwrap();
        assert_eq!(terms.total, 0.0);
        assert_eq!(terms.ipm_sum, None);
    }

    #[test]
    fn terms_recombine() {
        let data = random_dataset(4, 40, 9);
        let model = Model::new(small_model(4, 4)).unwrap();
        let cfg = TrainConfig::default();
        let batch: Vec<usize> = (0..40).collect();
        let terms = objective(&model, &data, &batch, data.stats(), &cfg).unwrap();
        assert!(terms.ipm_sum.unwrap() > 0.0);
        assert!((terms.recombine(cfg.beta) - terms.total).abs() < 1e-9);
    }

    #[test]
    fn beta_zero_ignores_representation_imbalance() {
        // With beta = 0, the representation gradient comes from the factual
        // loss alone, so it equals the gradient of an objective that never
        // builds the IPM term.
        let data = random_dataset(3, 30, 5);
        let model = Model::new(small_model(3, 6)).unwrap();
        let grads = |beta: f64, lambda: f64| {
            let cfg = TrainConfig {
                beta,
                lambda,
                ..TrainConfig::default()
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.leaf(model.standardize(data.contexts()).unwrap());
            let g = build_objective(
                &mut tape,
                &bound,
                x,
                data.treatments(),
                data.outcomes(),
                data.stats(),
                &cfg,
            )
            .unwrap();
            tape.backward(g.total).unwrap();
            bound
                .vars()
                .iter()
                .map(|&v| tape.grad_or_zeros(v).unwrap())
                .collect::<Vec<_>>()
        };
        let with_beta = grads(1.0, 0.0);
        let without = grads(0.0, 0.0);
        assert_ne!(with_beta[0], without[0]);
        // hypothesis gradients are untouched by the IPM path
        let last = with_beta.len() - 1;
        assert_eq!(with_beta[last], without[last]);
    }

    #[test]
    fn regularization_gradient_is_two_lambda_v() {
        let data = random_dataset(2, 10, 1);
        let model = Model::new(small_model(2, 3)).unwrap();
        let grad_for = |lambda: f64| {
            let cfg = TrainConfig {
                beta: 0.0,
                lambda,
                ..TrainConfig::default()
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.leaf(model.standardize(data.contexts()).unwrap());
            let g = build_objective(
                &mut tape,
                &bound,
                x,
                data.treatments(),
                data.outcomes(),
                data.stats(),
                &cfg,
            )
            .unwrap();
            tape.backward(g.total).unwrap();
            let w = bound.hypothesis_weights()[0];
            tape.grad(w).unwrap().clone()
        };
        let (g0, g1) = (grad_for(0.0), grad_for(0.5));
        let v = &model.param("hyp.0.weight").unwrap().value;
        for k in 0..v.len() {
            assert!((g1.data()[k] - g0.data()[k] - v.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = random_dataset(3, 60, 2);
        let mcfg = small_model(3, 11);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (model, report) = train(&data, &mcfg, &cfg).unwrap();
        let fresh = Model::new(mcfg).unwrap();
        assert_eq!(model.params(), fresh.params());
        assert!(report.epochs.is_empty());
        assert_eq!(report.best_epoch, None);
    }

    #[test]
    fn training_is_deterministic_and_returns_best_epoch() {
        let data = random_dataset(3, 120, 4);
        let mcfg = small_model(3, 5);
        let cfg = TrainConfig {
            max_epochs: 6,
            batch_size: 32,
            patience: 2,
            ..TrainConfig::default()
        };
        let (m1, r1) = train(&data, &mcfg, &cfg).unwrap();
        let (m2, r2) = train(&data, &mcfg, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        let best = r1.epochs.iter().map(|e| e.val_factual).fold(f64::INFINITY, f64::min);
        assert!(r1.best_val_factual.unwrap() <= best);
        for e in &r1.epochs {
            let parts = e.weighted_factual - e.endpoint_correction + e.regularization + cfg.beta * e.ipm_sum.unwrap();
            assert!((parts - e.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn refuses_to_train_without_positivity() {
        let samples = (0..20)
            .map(|i| Sample {
                x: vec![i as f64, 1.0, 0.0],
                t: 1 + i % 2,
                y: 1.0,
            })
            .collect();
        let data = dataset(3, samples);
        let err = train(&data, &small_model(3, 0), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Positivity { treatment: 3 }));
    }

    #[test]
    fn csv_has_documented_columns() {
        let data = random_dataset(2, 40, 8);
        let cfg = TrainConfig {
            max_epochs: 2,
            beta: 0.0,
            ..TrainConfig::default()
        };
        let (_, report) = train(&data, &small_model(2, 1), &cfg).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,factual,ipm_sum,objective,val_factual"));
        assert!(lines.next().unwrap().starts_with("1,"));
        assert!(text.lines().nth(1).unwrap().split(',').nth(2) == Some(""));
    }
}
