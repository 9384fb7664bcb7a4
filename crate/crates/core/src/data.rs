//! Datasets, train/validation splits and mini-batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Activation, GradientModel, LossKind, Mlp, MlpSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at data row {row}, column {col}: {message}")]
    Parse { row: usize, col: usize, message: String },
    #[error("file has no header or no data rows")]
    EmptyFile,
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Row-major inputs (`rows x features`) and targets (`rows x targets`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    n_features: usize,
    n_targets: usize,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        targets: Vec<f64>,
        n_features: usize,
        n_targets: usize,
    ) -> Result<Self, DataError> {
        if n_features == 0 || n_targets == 0 {
            return Err(DataError::Invalid("need at least one feature and one target".into()));
        }
        if !inputs.len().is_multiple_of(n_features) || !targets.len().is_multiple_of(n_targets) {
            return Err(DataError::Invalid("ragged rows".into()));
        }
        let rows = inputs.len() / n_features;
        if rows == 0 {
            return Err(DataError::EmptyFile);
        }
        if targets.len() / n_targets != rows {
            return Err(DataError::Invalid(format!(
                "{rows} input rows but {} target rows",
                targets.len() / n_targets
            )));
        }
        if !inputs.iter().chain(&targets).all(|x| x.is_finite()) {
            return Err(DataError::Invalid("non-finite entry".into()));
        }
        Ok(Self {
            inputs,
            targets,
            n_features,
            n_targets,
            feature_names: (0..n_features).map(|j| format!("x{j}")).collect(),
            target_names: (0..n_targets).map(|j| format!("y{j}")).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.inputs.len() / self.n_features
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        &self.targets[i * self.n_targets..(i + 1) * self.n_targets]
    }

    /// Copies the selected rows into contiguous batch buffers.
    pub fn gather(&self, indices: &[usize], inputs: &mut Vec<f64>, targets: &mut Vec<f64>) {
        inputs.clear();
        targets.clear();
        for &i in indices {
            inputs.extend_from_slice(self.input_row(i));
            targets.extend_from_slice(self.target_row(i));
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.n_features);
        let mut targets = Vec::with_capacity(indices.len() * self.n_targets);
        self.gather(indices, &mut inputs, &mut targets);
        Dataset {
            inputs,
            targets,
            n_features: self.n_features,
            n_targets: self.n_targets,
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }

    /// Removes feature columns by name.
    pub fn drop_features(&self, names: &[String]) -> Result<Dataset, DataError> {
        for n in names {
            if !self.feature_names.contains(n) {
                return Err(DataError::MissingColumn(n.clone()));
            }
        }
        let keep: Vec<usize> =
            (0..self.n_features).filter(|&j| !names.contains(&self.feature_names[j])).collect();
        if keep.is_empty() {
            return Err(DataError::Invalid("no feature columns left".into()));
        }
        let mut inputs = Vec::with_capacity(self.rows() * keep.len());
        for i in 0..self.rows() {
            let row = self.input_row(i);
            inputs.extend(keep.iter().map(|&j| row[j]));
        }
        Ok(Dataset {
            inputs,
            targets: self.targets.clone(),
            n_features: keep.len(),
            n_targets: self.n_targets,
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
            target_names: self.target_names.clone(),
        })
    }
}

/// Per-feature z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Normalizer {
    pub fn fit(data: &Dataset) -> Self {
        let c = data.n_features();
        let rows = data.rows() as f64;
        let mut mean = vec![0.0; c];
        for i in 0..data.rows() {
            for (m, x) in mean.iter_mut().zip(data.input_row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; c];
        for i in 0..data.rows() {
            for ((v, x), m) in var.iter_mut().zip(data.input_row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let sd = var.iter().map(|v| (v / rows).sqrt()).collect();
        Self { mean, sd }
    }

    /// Centers and scales every feature; constant features are only centered.
    pub fn apply(&self, data: &Dataset) -> Dataset {
        let c = data.n_features();
        let mut out = data.clone();
        for (k, x) in out.inputs.iter_mut().enumerate() {
            let j = k % c;
            let sd = if self.sd[j] > 0.0 { self.sd[j] } else { 1.0 };
            *x = (*x - self.mean[j]) / sd;
        }
        out
    }
}

/// Reads a comma-separated file with a header row. `target_columns` name the
/// target columns; every other column becomes a feature. With `normalize`,
/// features are z-scored using statistics of the whole file.
pub fn load_csv(
    path: impl AsRef<Path>,
    target_columns: &[String],
    normalize: bool,
) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let data = parse_csv(&text, target_columns)?;
    Ok(if normalize { Normalizer::fit(&data).apply(&data) } else { data })
}

pub fn parse_csv(text: &str, target_columns: &[String]) -> Result<Dataset, DataError> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Parse { row: 0, col: 0, message: e.to_string() })?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(DataError::EmptyFile);
    }
    if target_columns.is_empty() {
        return Err(DataError::Invalid("no target columns given".into()));
    }
    let target_idx: Vec<usize> = target_columns
        .iter()
        .map(|t| header.iter().position(|h| h == t.trim()).ok_or_else(|| DataError::MissingColumn(t.clone())))
        .collect::<Result<_, _>>()?;
    let feature_idx: Vec<usize> = (0..header.len()).filter(|j| !target_idx.contains(j)).collect();

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| DataError::Parse { row, col: 0, message: e.to_string() })?;
        if record.len() != header.len() {
            return Err(DataError::Parse {
                row,
                col: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let cell = |j: usize| -> Result<f64, DataError> {
            let s = &record[j];
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| DataError::Parse {
                row,
                col: j + 1,
                message: format!("not a number: {s:?}"),
            })
        };
        for &j in &feature_idx {
            inputs.push(cell(j)?);
        }
        for &j in &target_idx {
            targets.push(cell(j)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::EmptyFile);
    }
    if feature_idx.is_empty() {
        return Err(DataError::Invalid("no feature columns".into()));
    }
    let mut data = Dataset::new(inputs, targets, feature_idx.len(), target_idx.len())?;
    data.feature_names = feature_idx.iter().map(|&j| header[j].clone()).collect();
    data.target_names = target_idx.iter().map(|&j| header[j].clone()).collect();
    Ok(data)
}

/// Seeded shuffle split into `floor(fraction * rows)` training rows and the rest.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let rows = data.rows();
    let n_train = (train_fraction * rows as f64).floor() as usize;
    if n_train == 0 || n_train >= rows {
        return Err(DataError::Invalid(format!(
            "split of {rows} rows at {train_fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val) = idx.split_at(n_train);
    Ok((data.subset(train), data.subset(val)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    ShuffleEachEpoch,
    WithReplacement,
}

/// Draws the index sets of successive mini-batches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rows: usize,
    batch_size: usize,
    strategy: SamplingStrategy,
    order: Vec<usize>,
    cursor: usize,
    draws: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(rows: usize, batch_size: usize, strategy: SamplingStrategy) -> Result<Self, DataError> {
        if rows == 0 || batch_size == 0 || batch_size > rows {
            return Err(DataError::Invalid(format!("batch size {batch_size} must be in 1..={rows}")));
        }
        Ok(Self { rows, batch_size, strategy, order: (0..rows).collect(), cursor: 0, draws: 0, epoch: 0 })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Batches per epoch under the shuffle strategy.
    pub fn batches_per_epoch(&self) -> usize {
        self.rows.div_ceil(self.batch_size)
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        self.draws += 1;
        match self.strategy {
            SamplingStrategy::ShuffleEachEpoch => {
                if self.cursor == 0 {
                    self.order.shuffle(rng);
                }
                let end = (self.cursor + self.batch_size).min(self.rows);
                let batch = self.order[self.cursor..end].to_vec();
                self.cursor = end;
                if self.cursor == self.rows {
                    self.cursor = 0;
                    self.epoch += 1;
                }
                batch
            }
            SamplingStrategy::WithReplacement => {
                let batch = (0..self.batch_size).map(|_| rng.random_range(0..self.rows)).collect();
                self.epoch = self.draws * self.batch_size / self.rows;
                batch
            }
        }
    }
}

/// Random regression problem whose targets come from a fixed random teacher
/// network (`features -> 16 tanh -> 1`) plus Gaussian noise.
pub fn synthetic_regression(
    n_samples: usize,
    n_features: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_samples == 0 || n_features == 0 {
        return Err(DataError::Invalid("need at least one sample and one feature".into()));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(DataError::Invalid("noise sd must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<f64> = (0..n_samples * n_features).map(|_| StandardNormal.sample(&mut rng)).collect();
    let teacher = Mlp::new(
        MlpSpec {
            layer_sizes: vec![n_features, 16, 1],
            activation: Activation::Tanh,
            init_seed: rng.random(),
        },
        LossKind::Mse,
    )
    .expect("valid teacher");
    // Widen the teacher's weights so the target is visibly nonlinear.
    let w = teacher.init_params().scale(2.0).expect("finite");
    let mut targets = teacher.forward(&w, &inputs).expect("shapes match");
    if noise_sd > 0.0 {
        let noise = Normal::new(0.0, noise_sd).expect("valid sd");
        targets.iter_mut().for_each(|t| *t += noise.sample(&mut rng));
    }
    debug_assert_eq!(teacher.num_params(), (n_features + 1) * 16 + 17);
    Dataset::new(inputs, targets, n_features, 1)
}

/// Binary labels drawn as Bernoulli(sigmoid(x . theta + bias)) from a random
/// linear teacher with standard normal weights.
pub fn synthetic_classification(
    n_samples: usize,
    n_features: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_samples == 0 || n_features == 0 {
        return Err(DataError::Invalid("need at least one sample and one feature".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..=n_features).map(|_| StandardNormal.sample(&mut rng)).collect();
    let inputs: Vec<f64> = (0..n_samples * n_features).map(|_| StandardNormal.sample(&mut rng)).collect();
    let targets = inputs
        .chunks(n_features)
        .map(|x| {
            let z = theta[n_features] + x.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Dataset::new(inputs, targets, n_features, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_two_rows() {
        let d = parse_csv("a,b\n1,2\n3,4\n", &names(&["b"])).unwrap();
        assert_eq!(d.inputs(), &[1.0, 3.0]);
        assert_eq!(d.targets(), &[2.0, 4.0]);
        assert_eq!(d.feature_names, names(&["a"]));
    }

    #[test]
    fn two_point_zscore() {
        let d = parse_csv("a,b\n1,2\n3,4\n", &names(&["b"])).unwrap();
        let z = Normalizer::fit(&d).apply(&d);
        assert_eq!(z.inputs(), &[-1.0, 1.0]);
    }

    #[test]
    fn load_from_file_with_trailing_space_headers() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "Serial No.,GRE Score,CGPA,Chance of Admit ").unwrap();
        writeln!(f, "1,337,9.65,0.92").unwrap();
        writeln!(f, "2,324,8.87,0.76").unwrap();
        let d = load_csv(f.path(), &names(&["Chance of Admit"]), false).unwrap();
        assert_eq!(d.rows(), 2);
        assert_eq!(d.n_features(), 3);
        let d = d.drop_features(&names(&["Serial No."])).unwrap();
        assert_eq!(d.feature_names, names(&["GRE Score", "CGPA"]));
        assert_eq!(d.input_row(1), &[324.0, 8.87]);
    }

    #[test]
    fn parse_errors_carry_position() {
        match parse_csv("a,b\n1,2\n3,x\n", &names(&["b"])) {
            Err(DataError::Parse { row: 2, col: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_csv("", &names(&["b"])), Err(DataError::EmptyFile)));
        assert!(matches!(parse_csv("a,b\n", &names(&["b"])), Err(DataError::EmptyFile)));
        assert!(matches!(parse_csv("a,b\n1,2\n", &names(&["c"])), Err(DataError::MissingColumn(_))));
        assert!(matches!(
            load_csv("/nonexistent/file.csv", &names(&["b"]), false),
            Err(DataError::Io { .. })
        ));
    }

    fn toy(rows: usize) -> Dataset {
        let inputs = (0..rows).map(|i| i as f64).collect();
        let targets = (0..rows).map(|i| 2.0 * i as f64).collect();
        Dataset::new(inputs, targets, 1, 1).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = toy(500);
        let (tr, va) = split(&d, 0.8, 3).unwrap();
        assert_eq!((tr.rows(), va.rows()), (400, 100));
        let (tr2, va2) = split(&d, 0.8, 3).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        let mut all: Vec<f64> = tr.inputs().iter().chain(va.inputs()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, d.inputs());
        // rows stay paired with their targets
        for i in 0..tr.rows() {
            assert_eq!(tr.target_row(i)[0], 2.0 * tr.input_row(i)[0]);
        }
    }

    #[test]
    fn split_needs_both_sides() {
        assert!(split(&toy(10), 0.95, 0).is_ok());
        assert!(split(&toy(10), 0.05, 0).is_err());
        assert!(split(&toy(1), 0.5, 0).is_err());
        assert!(split(&toy(10), 1.0, 0).is_err());
    }

    #[test]
    fn full_batch_is_everything() {
        let mut s = BatchSampler::new(7, 7, SamplingStrategy::ShuffleEachEpoch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = s.next_batch(&mut rng);
        b.sort();
        assert_eq!(b, (0..7).collect::<Vec<_>>());
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn shuffle_epoch_partitions_indices() {
        let mut s = BatchSampler::new(103, 10, SamplingStrategy::ShuffleEachEpoch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for epoch in 0..3 {
            let mut seen = Vec::new();
            for _ in 0..s.batches_per_epoch() {
                seen.extend(s.next_batch(&mut rng));
            }
            seen.sort();
            assert_eq!(seen, (0..103).collect::<Vec<_>>());
            assert_eq!(s.epoch(), epoch + 1);
        }
    }

    #[test]
    fn with_replacement_frequencies() {
        let (rows, b, draws) = (20usize, 4usize, 100_000usize);
        let mut s = BatchSampler::new(rows, b, SamplingStrategy::WithReplacement).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = vec![0usize; rows];
        for _ in 0..draws {
            for i in s.next_batch(&mut rng) {
                counts[i] += 1;
            }
        }
        let p = 1.0 / rows as f64;
        let trials = (draws * b) as f64;
        let mean = trials * p;
        let sd = (trials * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd + 1.0, "{c} vs {mean}");
        }
        assert_eq!(s.epoch(), draws * b / rows);
    }

    #[test]
    fn sampler_rejects_bad_sizes() {
        assert!(BatchSampler::new(5, 0, SamplingStrategy::ShuffleEachEpoch).is_err());
        assert!(BatchSampler::new(5, 6, SamplingStrategy::ShuffleEachEpoch).is_err());
    }

    #[test]
    fn synthetic_is_reproducible_and_noise_adds_variance() {
        let a = synthetic_regression(200, 4, 0.1, 17).unwrap();
        let b = synthetic_regression(200, 4, 0.1, 17).unwrap();
        assert_eq!(a, b);
        let var = |d: &Dataset| {
            let t = d.targets();
            let m = t.iter().sum::<f64>() / t.len() as f64;
            t.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t.len() as f64
        };
        let v: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|&sd| var(&synthetic_regression(20_000, 4, sd, 17).unwrap()))
            .collect();
        let clean = v[0];
        for (sd, vi) in [0.5, 1.0, 2.0].iter().zip(&v[1..]) {
            assert!(((vi - clean) / (sd * sd) - 1.0).abs() < 0.1, "sd {sd}: {vi} vs {clean}");
        }
        assert!(v.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn classification_labels_are_binary_and_informative() {
        let d = synthetic_classification(5000, 3, 4).unwrap();
        assert!(d.targets().iter().all(|&y| y == 0.0 || y == 1.0));
        let ones = d.targets().iter().sum::<f64>() / 5000.0;
        assert!(ones > 0.05 && ones < 0.95);
        assert_eq!(d, synthetic_classification(5000, 3, 4).unwrap());
    }

    #[test]
    fn noiseless_targets_match_teacher_and_are_nonconstant() {
        let d = synthetic_regression(100, 3, 0.0, 1).unwrap();
        let t = d.targets();
        let spread = t.iter().cloned().fold(f64::MIN, f64::max) - t.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.1);
    }
}
