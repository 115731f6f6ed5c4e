//! Observational samples `(x, t, y)`, treatment statistics, and minibatches.
//!
//! On disk a dataset is a CSV file with header `t,y,x_0,...,x_{d-1}` and a
//! JSON sidecar next to it (same stem, `.json` extension) carrying the
//! treatment count, context dimension, feature schema, and for synthetic
//! data the generator settings and ground truth. Treatments are 1-based
//! everywhere.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::{GenConfig, GroundTruth};

pub const DATASET_FORMAT: &str = "iae-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    /// 1-based treatment index.
    pub t: usize,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    OneHot,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub kind: FeatureKind,
    pub dim: usize,
}

/// Named groups of context columns, in column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub groups: Vec<FeatureGroup>,
}

impl FeatureSchema {
    /// Five groups describing an ad: identifiers, last-day page-view
    /// sources, last-week decayed page-view sources, shop statistics, and
    /// competition ranks (with log-transformed copies).
    pub fn advertising(ids: usize, pv_lastday: usize, pv_lastweek: usize, shop: usize, competition: usize) -> Self {
        let g = |name: &str, kind, dim| FeatureGroup {
            name: name.to_string(),
            kind,
            dim,
        };
        FeatureSchema {
            groups: vec![
                g("ids", FeatureKind::OneHot, ids),
                g("pv_sources_lastday", FeatureKind::Numeric, pv_lastday),
                g("pv_sources_lastweek", FeatureKind::Numeric, pv_lastweek),
                g("shop", FeatureKind::Numeric, shop),
                g("competition", FeatureKind::Numeric, competition),
            ],
        }
    }

    pub fn numeric(dim: usize) -> Self {
        FeatureSchema {
            groups: vec![FeatureGroup {
                name: "numeric".to_string(),
                kind: FeatureKind::Numeric,
                dim,
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.groups.iter().map(|g| g.dim).sum()
    }

    /// Column range of the named group.
    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for g in &self.groups {
            if g.name == name {
                return Some(start..start + g.dim);
            }
            start += g.dim;
        }
        None
    }

    pub fn one_hot_mask(&self) -> Vec<bool> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.kind == FeatureKind::OneHot, g.dim))
            .collect()
    }
}

/// Metadata stored next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub n_treatments: usize,
    pub dim: usize,
    pub schema: FeatureSchema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl Sidecar {
    pub fn new(n_treatments: usize, schema: FeatureSchema) -> Self {
        Sidecar {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            n_treatments,
            dim: schema.dim(),
            schema,
            generator: None,
            ground_truth: None,
        }
    }

    pub fn path_for(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if sc.format != DATASET_FORMAT || sc.version != DATASET_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                expected: format!("{DATASET_FORMAT} v{DATASET_VERSION}"),
                found: format!("{} v{}", sc.format, sc.version),
            });
        }
        if sc.schema.dim() != sc.dim {
            return Err(Error::Config(format!(
                "schema groups sum to {} but dim is {}",
                sc.schema.dim(),
                sc.dim
            )));
        }
        Ok(sc)
    }
}

/// Per-treatment counts `N_j` and proportions `mu_j = N_j / N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentStats {
    pub total: usize,
    pub counts: Vec<usize>,
    pub mu: Vec<f64>,
}

impl TreatmentStats {
    pub fn from_treatments(treatments: impl IntoIterator<Item = usize>, n: usize) -> Self {
        let mut counts = vec![0usize; n];
        for t in treatments {
            counts[t - 1] += 1;
        }
        let total = counts.iter().sum::<usize>();
        let mu = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        TreatmentStats { total, counts, mu }
    }

    pub fn n_treatments(&self) -> usize {
        self.counts.len()
    }

    /// Sample weight `w_i = mu_{t_i}`.
    pub fn weight(&self, t: usize) -> f64 {
        self.mu[t - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sidecar: Sidecar,
    contexts: Vec<f64>,
    treatments: Vec<usize>,
    outcomes: Vec<f64>,
    stats: TreatmentStats,
}

impl Dataset {
    pub fn new(sidecar: Sidecar, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (n, d) = (sidecar.n_treatments, sidecar.dim);
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 treatments, got {n}")));
        }
        let mut contexts = Vec::with_capacity(samples.len() * d);
        let mut treatments = Vec::with_capacity(samples.len());
        let mut outcomes = Vec::with_capacity(samples.len());
        for (i, s) in samples.into_iter().enumerate() {
            let row = i + 1;
            if s.x.len() != d {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("context has {} values, expected {d}", s.x.len()),
                });
            }
            if s.t < 1 || s.t > n {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("treatment {} outside 1..={n}", s.t),
                });
            }
            if !s.y.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::MalformedRow {
                    row,
                    message: "non-finite value".to_string(),
                });
            }
            contexts.extend_from_slice(&s.x);
            treatments.push(s.t);
            outcomes.push(s.y);
        }
        let stats = TreatmentStats::from_treatments(treatments.iter().copied(), n);
        Ok(Dataset {
            sidecar,
            contexts,
            treatments,
            outcomes,
            stats,
        })
    }

    /// Loads `path` (CSV) together with its sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = Sidecar::load(&Sidecar::path_for(path))?;
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, sidecar)
    }

    pub fn from_csv_reader<R: Read>(reader: R, sidecar: Sidecar) -> Result<Self> {
        let d = sidecar.dim;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::MalformedRow {
            row: 1,
            message: e.to_string(),
        })?;
        if header.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let expected: Vec<String> = ["t".to_string(), "y".to_string()]
            .into_iter()
            .chain((0..d).map(|j| format!("x_{j}")))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::MalformedRow {
                row: 1,
                message: format!("header must be t,y,x_0..x_{}", d.saturating_sub(1)),
            });
        }

        let mut samples = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            // line 1 is the header
            let row = i + 2;
            let record = record.map_err(|e| Error::MalformedRow {
                row,
                message: e.to_string(),
            })?;
            if record.len() != d + 2 {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("expected {} fields, found {}", d + 2, record.len()),
                });
            }
            let t: usize = record[0].trim().parse().map_err(|_| Error::MalformedRow {
                row,
                message: format!("bad treatment {:?}", &record[0]),
            })?;
            if t < 1 || t > sidecar.n_treatments {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("treatment {t} outside 1..={}", sidecar.n_treatments),
                });
            }
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::MalformedRow {
                        row,
                        message: format!("bad number {s:?}"),
                    })
            };
            let y = num(&record[1])?;
            let x = record.iter().skip(2).map(num).collect::<Result<Vec<_>>>()?;
            samples.push(Sample { x, t, y });
        }
        Self::new(sidecar, samples)
    }

    /// Writes the CSV and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.len() * (self.dim() + 2) * 12);
        out.push_str("t,y");
        for j in 0..self.dim() {
            out.push_str(&format!(",x_{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{},{}", self.treatments[i], self.outcomes[i]));
            for v in self.context(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let sc_path = Sidecar::path_for(path);
        let text = serde_json::to_string_pretty(&self.sidecar).map_err(|e| Error::json(&sc_path, e))?;
        fs::write(&sc_path, text).map_err(|e| Error::io(&sc_path, e))
    }

    pub fn len(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatments.is_empty()
    }

    pub fn n_treatments(&self) -> usize {
        self.sidecar.n_treatments
    }

    pub fn dim(&self) -> usize {
        self.sidecar.dim
    }

    pub fn sidecar(&self) -> &Sidecar {
        &self.sidecar
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.sidecar.schema
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.sidecar.ground_truth.as_ref()
    }

    pub fn stats(&self) -> &TreatmentStats {
        &self.stats
    }

    pub fn context(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.contexts[i * d..(i + 1) * d]
    }

    pub fn contexts(&self) -> &[f64] {
        &self.contexts
    }

    pub fn treatment(&self, i: usize) -> usize {
        self.treatments[i]
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatments
    }

    pub fn outcome(&self, i: usize) -> f64 {
        self.outcomes[i]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// `w_i = mu_{t_i}` over the whole dataset.
    pub fn weight(&self, i: usize) -> f64 {
        self.stats.weight(self.treatments[i])
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            x: self.context(i).to_vec(),
            t: self.treatments[i],
            y: self.outcomes[i],
        }
    }

    pub fn stats_for(&self, indices: &[usize]) -> TreatmentStats {
        TreatmentStats::from_treatments(indices.iter().map(|&i| self.treatments[i]), self.n_treatments())
    }

    /// Row-major contexts of the given rows.
    pub fn gather_contexts(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            out.extend_from_slice(self.context(i));
        }
        out
    }

    /// Subset of rows as a new dataset sharing the sidecar.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.sidecar.clone(), indices.iter().map(|&i| self.sample(i)).collect())
    }
}

/// Deterministic `(train, validation)` split of `0..len`.
pub fn split_indices(len: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((len as f64) * validation_fraction).round() as usize;
    let n_val = n_val.min(len.saturating_sub(1));
    let val = idx.split_off(len - n_val);
    (idx, val)
}

/// Per-feature affine standardization; one-hot columns pass through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits mean and standard deviation on the given rows.
    pub fn fit(dataset: &Dataset, indices: &[usize]) -> Self {
        let d = dataset.dim();
        let mask = dataset.schema().one_hot_mask();
        let mut out = Standardizer::identity(d);
        if indices.is_empty() {
            return out;
        }
        let count = indices.len() as f64;
        for j in 0..d {
            if mask.get(j).copied().unwrap_or(false) {
                continue;
            }
            let mean = indices.iter().map(|&i| dataset.context(i)[j]).sum::<f64>() / count;
            let var = indices
                .iter()
                .map(|&i| (dataset.context(i)[j] - mean).powi(2))
                .sum::<f64>()
                / count;
            out.mean[j] = mean;
            out.scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(
            x.iter()
                .zip(self.mean.iter().zip(&self.scale))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }
}

/// Epoch-wise shuffling without replacement.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    indices: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(indices: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let batch_size = if batch_size > indices.len() {
            warn!("batch size {batch_size} exceeds {} samples; clamping", indices.len());
            indices.len().max(1)
        } else {
            batch_size
        };
        Ok(BatchSampler {
            indices,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// A fresh permutation cut into batches; the last one may be short.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order = self.indices.clone();
        order.shuffle(&mut self.rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sidecar(n: usize, d: usize) -> Sidecar {
        Sidecar::new(n, FeatureSchema::numeric(d))
    }

    #[test]
    fn counts_and_weights_from_csv() {
        let csv = "t,y,x_0\n1,0.5,1\n1,1.5,2\n2,2,3\n2,3,4\n";
        let ds = Dataset::from_csv_reader(csv.as_bytes(), sidecar(2, 1)).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.stats().counts, vec![2, 2]);
        assert_eq!(ds.stats().mu[0], 0.5);
        assert_eq!(ds.weight(3), 0.5);
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let err = Dataset::from_csv_reader("".as_bytes(), sidecar(2, 1)).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset), "{err}");
        assert_eq!(err.to_string(), "empty dataset");
        let err = Dataset::from_csv_reader("t,y,x_0\n".as_bytes(), sidecar(2, 1)).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn zero_treatment_names_the_row() {
        let csv = "t,y,x_0\n1,0.5,1\n0,1.5,2\n";
        let err = Dataset::from_csv_reader(csv.as_bytes(), sidecar(2, 1)).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 3, .. }), "{err}");
        assert!(err.to_string().contains("row 3"));
    }

    #[test]
    fn malformed_number_names_the_row() {
        let csv = "t,y,x_0\n1,abc,1\n";
        let err = Dataset::from_csv_reader(csv.as_bytes(), sidecar(2, 1)).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }), "{err}");
    }

    #[test]
    fn wrong_header_rejected() {
        let csv = "y,t,x_0\n1,1,1\n";
        assert!(Dataset::from_csv_reader(csv.as_bytes(), sidecar(2, 1)).is_err());
    }

    #[test]
    fn save_then_load_reproduces_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let samples = (0..7)
            .map(|i| Sample {
                x: vec![i as f64 / 3.0, -0.1 * i as f64],
                t: 1 + i % 3,
                y: (i as f64).sqrt(),
            })
            .collect();
        let ds = Dataset::new(sidecar(3, 2), samples).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.stats(), ds.stats());
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let mut s = BatchSampler::new((0..10).collect(), 10, 7).unwrap();
        let batches = s.epoch();
        assert_eq!(batches.len(), 1);
        let mut b = batches[0].clone();
        b.sort();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_covers_each_index_once_and_is_seeded() {
        let mut a = BatchSampler::new((0..103).collect(), 16, 42).unwrap();
        let mut b = BatchSampler::new((0..103).collect(), 16, 42).unwrap();
        for _ in 0..3 {
            let ea = a.epoch();
            assert_eq!(ea, b.epoch());
            let mut all: Vec<usize> = ea.concat();
            all.sort();
            assert_eq!(all, (0..103).collect::<Vec<_>>());
        }
    }

    #[test]
    fn oversized_batch_is_clamped() {
        let s = BatchSampler::new((0..5).collect(), 64, 1).unwrap();
        assert_eq!(s.batch_size(), 5);
    }

    #[test]
    fn standardizer_skips_one_hot_columns() {
        let sc = Sidecar::new(
            2,
            FeatureSchema {
                groups: vec![
                    FeatureGroup {
                        name: "ids".into(),
                        kind: FeatureKind::OneHot,
                        dim: 1,
                    },
                    FeatureGroup {
                        name: "v".into(),
                        kind: FeatureKind::Numeric,
                        dim: 1,
                    },
                ],
            },
        );
        let samples = vec![
            Sample {
                x: vec![1.0, 2.0],
                t: 1,
                y: 0.0,
            },
            Sample {
                x: vec![0.0, 4.0],
                t: 2,
                y: 0.0,
            },
        ];
        let ds = Dataset::new(sc, samples).unwrap();
        let st = Standardizer::fit(&ds, &[0, 1]);
        assert_eq!(st.mean, vec![0.0, 3.0]);
        assert_eq!(st.scale, vec![1.0, 1.0]);
        let mut row = Vec::new();
        st.apply_row(&[1.0, 4.0], &mut row);
        assert_eq!(row, vec![1.0, 1.0]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(50, 0.2, 3);
        assert_eq!((a.len(), b.len()), (40, 10));
        assert_eq!(split_indices(50, 0.2, 3), (a.clone(), b.clone()));
        let mut all = [a, b].concat();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
