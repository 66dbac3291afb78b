//! Synthetic labeled datasets.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{Purpose, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::invalid("input_dim and num_classes must be positive"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::invalid(format!(
                "dataset has {} feature values for {} samples of dimension {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of each class's samples in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Copies the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range for dataset of {}", self.len())));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.input_dim)
    }

    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone(), self.input_dim)
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    /// Stratified split into `(train, holdout)`. Each class sends
    /// `round(fraction · n_k)` of its samples, chosen by a seeded shuffle, to
    /// the holdout set. Both halves keep the original sample order.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("holdout fraction must be in [0, 1), got {fraction}")));
        }
        let mut rng = RngStream::global(seed, Purpose::Holdout).rng();
        let mut is_holdout = vec![false; self.len()];
        for mut members in self.class_indices() {
            members.shuffle(&mut rng);
            let take = (fraction * members.len() as f64).round() as usize;
            for &i in &members[..take] {
                is_holdout[i] = true;
            }
        }
        let (hold, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| is_holdout[i]);
        Ok((self.subset(&train), self.subset(&hold)))
    }

    /// Writes `f0,…,f{d−1},label` rows with a header line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.input_dim).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            record.push(self.labels[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Dataset::write_csv`]. The class count is
    /// `max(label) + 1` unless `num_classes` is given.
    pub fn read_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let ncols = headers.len();
        if ncols < 2 || &headers[ncols - 1] != "label" {
            return Err(Error::invalid("dataset csv needs feature columns followed by a label column"));
        }
        for (j, h) in headers.iter().take(ncols - 1).enumerate() {
            if h != format!("f{j}") {
                return Err(Error::invalid(format!("unexpected csv column {h:?}, expected f{j}")));
            }
        }
        let input_dim = ncols - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            for field in record.iter().take(input_dim) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::invalid(format!("row {}: bad feature value {field:?}", line + 1)))?;
                features.push(v);
            }
            let y: usize = record[input_dim]
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: bad label {:?}", line + 1, &record[input_dim])))?;
            labels.push(y);
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(features, labels, input_dim, classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
}

/// Gaussian class clusters around orthonormal means.
///
/// Class `k` has mean `q_k`, the `k`-th vector of a random orthonormal frame
/// (Gram–Schmidt on Gaussian vectors), so all means lie at radius 1 and are
/// pairwise `√2` apart. Samples are `q_k + cluster_spread · z`, `z ~ N(0, I)`.
/// Samples are stored grouped by class.
pub fn generate_synthetic(spec: SyntheticSpec, seed: u64) -> Result<Dataset> {
    let SyntheticSpec {
        num_classes,
        input_dim,
        samples_per_class,
        cluster_spread,
    } = spec;
    if num_classes == 0 || input_dim == 0 || samples_per_class == 0 {
        return Err(Error::invalid("class count, input dimension and samples per class must be >= 1"));
    }
    if num_classes > input_dim {
        return Err(Error::invalid(format!(
            "{num_classes} orthonormal class means do not fit in {input_dim} dimensions"
        )));
    }
    if !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(Error::invalid("cluster_spread must be finite and nonnegative"));
    }
    let mut rng = RngStream::global(seed, Purpose::DataGen).rng();
    let means = orthonormal_frame(num_classes, input_dim, &mut rng);
    let n = num_classes * samples_per_class;
    let mut features = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + cluster_spread * z);
            }
            labels.push(k);
        }
    }
    Dataset::new(features, labels, input_dim, num_classes)
}

fn orthonormal_frame<R: rand::Rng>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for q in &frame {
                let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        frame.push(v);
    }
    frame
}
