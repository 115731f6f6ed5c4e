//! Representation network `phi` and the shared hypothesis network `h`,
//! composed as `f(x, T) = h(phi(x), T)`.
//!
//! The treatment enters `h` as one scalar column `(i - 1) / (n - 1)`
//! appended to the representation, so all treatments share one network.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Standardizer;
use crate::error::{Error, Result};
use crate::synthetic::GroundTruth;
use crate::tensor::{Checkpoint, Tape, Tensor, Var};

pub const MODEL_FORMAT: &str = "iae-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Activation::Elu => tape.elu(v),
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub n_treatments: usize,
    pub rep_width: usize,
    pub rep_depth: usize,
    pub hyp_width: usize,
    pub hyp_depth: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 30,
            n_treatments: 5,
            rep_width: 64,
            rep_depth: 3,
            hyp_width: 64,
            hyp_depth: 3,
            activation: Activation::Elu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_treatments < 2 {
            return Err(Error::Config(format!(
                "n_treatments must be >= 2, got {}",
                self.n_treatments
            )));
        }
        if [
            self.input_dim,
            self.rep_width,
            self.rep_depth,
            self.hyp_width,
            self.hyp_depth,
        ]
        .contains(&0)
        {
            return Err(Error::Config("dimensions, widths and depths must be >= 1".into()));
        }
        Ok(())
    }

    /// Scalar treatment encoding fed to the hypothesis network.
    pub fn encode_treatment(&self, i: usize) -> f64 {
        (i - 1) as f64 / (self.n_treatments - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// `W`, the parameters of `phi`.
    Representation,
    /// `V`, the parameters of `h`.
    Hypothesis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub is_weight: bool,
    pub value: Tensor,
}

/// Anything that predicts all potential outcomes of a context.
pub trait OutcomeModel {
    fn n_treatments(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Predictions for every treatment of every row of `contexts`
    /// (row-major, `input_dim` values per row).
    fn predict_all(&self, contexts: &[f64]) -> Result<Vec<Vec<f64>>>;

    /// Representation vectors, for models that have one.
    fn represent_all(&self, _contexts: &[f64]) -> Option<Result<Tensor>> {
        None
    }

    fn predict(&self, x: &[f64], i: usize) -> Result<f64> {
        let n = self.n_treatments();
        if i < 1 || i > n {
            return Err(Error::TreatmentOutOfRange { index: i, n });
        }
        Ok(self.predict_all(x)?[0][i - 1])
    }

    /// Estimated effect matrix `a[i][j] = f(x, T_j) - f(x, T_i)` (0-based).
    fn iae_matrix(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let f = self.predict_all(x)?.swap_remove(0);
        Ok(f.iter().map(|fi| f.iter().map(|fj| fj - fi).collect()).collect())
    }

    /// `f(x, T_j) - f(x, T_i)` for 1-based indices.
    fn iae(&self, x: &[f64], i: usize, j: usize) -> Result<f64> {
        let n = self.n_treatments();
        for k in [i, j] {
            if k < 1 || k > n {
                return Err(Error::TreatmentOutOfRange { index: k, n });
            }
        }
        let f = self.predict_all(x)?.swap_remove(0);
        Ok(f[j - 1] - f[i - 1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    standardizer: Standardizer,
}

/// Parameters of a [`Model`] recorded as leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    vars: Vec<Var>,
    config: ModelConfig,
}

impl Model {
    /// Glorot-uniform weights and zero biases, seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut layer = |prefix: String, group, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            params.push(Param {
                name: format!("{prefix}.weight"),
                group,
                is_weight: true,
                value: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
            });
            params.push(Param {
                name: format!("{prefix}.bias"),
                group,
                is_weight: false,
                value: Tensor::zeros(&[1, fan_out]),
            });
        };
        let mut fan_in = config.input_dim;
        for l in 0..config.rep_depth {
            layer(
                format!("rep.{l}"),
                ParamGroup::Representation,
                fan_in,
                config.rep_width,
                &mut rng,
            );
            fan_in = config.rep_width;
        }
        fan_in = config.rep_width + 1;
        for l in 0..config.hyp_depth {
            layer(
                format!("hyp.{l}"),
                ParamGroup::Hypothesis,
                fan_in,
                config.hyp_width,
                &mut rng,
            );
            fan_in = config.hyp_width;
        }
        layer("hyp.out".to_string(), ParamGroup::Hypothesis, fan_in, 1, &mut rng);
        let standardizer = Standardizer::identity(config.input_dim);
        Ok(Model {
            config,
            params,
            standardizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, standardizer: Standardizer) -> Result<()> {
        if standardizer.dim() != self.config.input_dim {
            return Err(Error::ContextDim {
                expected: self.config.input_dim,
                actual: standardizer.dim(),
            });
        }
        self.standardizer = standardizer;
        Ok(())
    }

    /// Fixed multiplier on the last representation layer, keeping the
    /// representation at unit scale regardless of width.
    pub fn representation_scale(&self) -> f64 {
        1.0 / (self.config.rep_width as f64).sqrt()
    }

    /// `R(h)`: squared Frobenius norm of the hypothesis weight matrices.
    pub fn hypothesis_weight_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == ParamGroup::Hypothesis && p.is_weight)
            .map(|p| p.value.squared_norm())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Standardized copy of row-major raw contexts as an `rows x d` tensor.
    pub fn standardize(&self, contexts: &[f64]) -> Result<Tensor> {
        let d = self.config.input_dim;
        if contexts.is_empty() || contexts.len() % d != 0 {
            return Err(Error::ContextDim {
                expected: d,
                actual: contexts.len(),
            });
        }
        let mut out = Vec::with_capacity(contexts.len());
        for row in contexts.chunks(d) {
            self.standardizer.apply_row(row, &mut out);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("context contains non-finite values".into()));
        }
        Tensor::matrix(contexts.len() / d, d, out)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
            config: self.config.clone(),
        }
    }

    /// `phi(x)` for a single raw context.
    pub fn represent(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_single(x)?;
        Ok(self.represent_rows(x)?.into_data())
    }

    fn check_single(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::ContextDim {
                expected: self.config.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn represent_rows(&self, contexts: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(self.standardize(contexts)?);
        let r = bound.represent(&mut tape, x)?;
        Ok(tape.value(r)?.clone())
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        Checkpoint::new(self.params.iter().map(|p| (p.name.as_str(), &p.value))).save(checkpoint)?;
        ModelSidecar::network(self).save(&ModelSidecar::path_for(checkpoint))
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let sidecar = ModelSidecar::load(&ModelSidecar::path_for(checkpoint))?;
        match sidecar.kind {
            ModelKind::Network { config, standardizer } => Self::from_checkpoint(config, standardizer, checkpoint),
            ModelKind::Oracle { .. } => Err(Error::Config(format!(
                "{} holds an oracle, not a network",
                checkpoint.display()
            ))),
        }
    }

    fn from_checkpoint(config: ModelConfig, standardizer: Standardizer, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut model = Model::new(config)?;
        for p in &mut model.params {
            let t = ckpt
                .tensor(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", p.name)))??;
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        model.set_standardizer(standardizer)?;
        Ok(model)
    }
}

impl OutcomeModel for Model {
    fn n_treatments(&self) -> usize {
        self.config.n_treatments
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict_all(&self, contexts: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.config.n_treatments;
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(self.standardize(contexts)?);
        let r = bound.represent(&mut tape, x)?;
        let rows = tape.value(r)?.dims2().0;
        let mut out = vec![vec![0.0; n]; rows];
        for i in 1..=n {
            let y = bound.hypothesis(&mut tape, r, &vec![i; rows])?;
            for (k, v) in tape.value(y)?.data().iter().enumerate() {
                out[k][i - 1] = *v;
            }
        }
        Ok(out)
    }

    fn represent_all(&self, contexts: &[f64]) -> Option<Result<Tensor>> {
        Some(self.represent_rows(contexts))
    }
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Weight matrices of `h`, the arguments of `R(h)`.
    pub fn hypothesis_weights(&self) -> Vec<Var> {
        self.vars[2 * self.config.rep_depth..]
            .iter()
            .step_by(2)
            .copied()
            .collect()
    }

    fn layer(&self, tape: &mut Tape, h: Var, index: usize, activate: bool) -> Result<Var> {
        let z = tape.matmul(h, self.vars[2 * index])?;
        let z = tape.add(z, self.vars[2 * index + 1])?;
        if activate {
            self.config.activation.apply(tape, z)
        } else {
            Ok(z)
        }
    }

    /// `phi` on an `rows x d` standardized input.
    pub fn represent(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.config.rep_depth {
            h = self.layer(tape, h, l, true)?;
        }
        tape.scale(h, 1.0 / (self.config.rep_width as f64).sqrt())
    }

    /// `h(r, T)` for each row of `r` and its 1-based treatment, as a
    /// `rows x 1` column.
    pub fn hypothesis(&self, tape: &mut Tape, r: Var, treatments: &[usize]) -> Result<Var> {
        let n = self.config.n_treatments;
        if let Some(&bad) = treatments.iter().find(|&&t| t < 1 || t > n) {
            return Err(Error::TreatmentOutOfRange { index: bad, n });
        }
        let enc = treatments.iter().map(|&t| self.config.encode_treatment(t)).collect();
        let t = tape.leaf(Tensor::column(enc));
        let mut h = tape.concat_cols(r, t)?;
        let first = self.config.rep_depth;
        for l in 0..self.config.hyp_depth {
            h = self.layer(tape, h, first + l, true)?;
        }
        self.layer(tape, h, first + self.config.hyp_depth, false)
    }
}

/// Exact potential outcomes of a synthetic world behind the model interface.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub truth: GroundTruth,
}

impl OutcomeModel for Oracle {
    fn n_treatments(&self) -> usize {
        self.truth.n_treatments
    }

    fn input_dim(&self) -> usize {
        self.truth.feature_mean.len()
    }

    fn predict_all(&self, contexts: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.input_dim();
        if contexts.is_empty() || contexts.len() % d != 0 {
            return Err(Error::ContextDim {
                expected: d,
                actual: contexts.len(),
            });
        }
        contexts.chunks(d).map(|x| self.truth.outcome_means(x)).collect()
    }

    fn iae(&self, x: &[f64], i: usize, j: usize) -> Result<f64> {
        self.truth.true_iae(x, i, j)
    }

    fn iae_matrix(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.truth.true_iae_matrix(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Network {
        config: ModelConfig,
        standardizer: Standardizer,
    },
    Oracle {
        ground_truth: GroundTruth,
    },
}

/// JSON document describing how to interpret a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub kind: ModelKind,
}

impl ModelSidecar {
    fn network(model: &Model) -> Self {
        ModelSidecar {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            kind: ModelKind::Network {
                config: model.config.clone(),
                standardizer: model.standardizer.clone(),
            },
        }
    }

    /// `model.json` -> `model.config.json`.
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("config.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: ModelSidecar = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if sc.format != MODEL_FORMAT || sc.version != MODEL_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                expected: format!("{MODEL_FORMAT} v{MODEL_VERSION}"),
                found: format!("{} v{}", sc.format, sc.version),
            });
        }
        Ok(sc)
    }
}

/// Writes an oracle "checkpoint": an empty tensor file plus a sidecar
/// carrying the ground truth.
pub fn save_oracle(truth: &GroundTruth, checkpoint: &Path) -> Result<()> {
    Checkpoint::new(std::iter::empty()).save(checkpoint)?;
    ModelSidecar {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        kind: ModelKind::Oracle {
            ground_truth: truth.clone(),
        },
    }
    .save(&ModelSidecar::path_for(checkpoint))
}

/// Loads whichever model a checkpoint describes.
pub fn load_outcome_model(checkpoint: &Path) -> Result<Box<dyn OutcomeModel + Send + Sync>> {
    let sidecar = ModelSidecar::load(&ModelSidecar::path_for(checkpoint))?;
    Ok(match sidecar.kind {
        ModelKind::Network { config, standardizer } => {
            Box::new(Model::from_checkpoint(config, standardizer, checkpoint)?)
        }
        ModelKind::Oracle { ground_truth } => {
            Checkpoint::load(checkpoint)?;
            Box::new(Oracle { truth: ground_truth })
        }
    })
}
