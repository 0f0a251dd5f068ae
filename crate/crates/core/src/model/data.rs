//! Synthetic token datasets with missing-class client partitions.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::ToyEncoderConfig;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Number of object-bearing tokens per sample.
pub const FOREGROUND_TOKENS: usize = 4;
/// Prototype amplitude on the class's block of coordinates.
pub const PROTOTYPE_SCALE: f64 = 4.0;
pub const FOREGROUND_VARIANCE: f64 = 0.25;
pub const BACKGROUND_VARIANCE: f64 = 0.05;

pub const SKEWED_CLASSES: [&str; 8] = [
    "car",
    "van",
    "truck",
    "pedestrian",
    "person_sitting",
    "cyclist",
    "tram",
    "misc",
];

/// KITTI annotation counts per class (rows) and client C1..C5 (columns).
pub const SKEWED_COUNTS: [[usize; 5]; 8] = [
    [4125, 4709, 5036, 4557, 4698],
    [0, 470, 482, 481, 505],
    [164, 0, 200, 199, 169],
    [592, 704, 0, 648, 676],
    [18, 29, 3, 36, 21],
    [311, 265, 161, 0, 218],
    [120, 82, 88, 86, 0],
    [108, 154, 204, 178, 171],
];

#[derive(Clone, Debug)]
pub struct Sample {
    /// `N x d` token matrix.
    pub tokens: Array2<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(num_classes: usize) -> Self {
        Self {
            samples: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Concatenation of several datasets, in order.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a Dataset>, num_classes: usize) -> Self {
        let mut out = Self::new(num_classes);
        for p in parts {
            out.samples.extend(p.samples.iter().cloned());
        }
        out
    }
}

/// Per-client per-class sample counts plus the size of the balanced test set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub class_names: Vec<String>,
    /// `counts[client][class]`.
    pub counts: Vec<Vec<usize>>,
    pub test_per_class: usize,
}

impl PartitionSpec {
    /// The five-client KITTI pattern with every count divided by `divisor`,
    /// rounded up. Zeros stay zero.
    pub fn skewed(divisor: usize) -> Result<Self> {
        Self::skewed_cycled(5, divisor)
    }

    /// The skewed pattern extended to any client count: client `i` takes column `i mod 5`.
    pub fn skewed_cycled(num_clients: usize, divisor: usize) -> Result<Self> {
        if divisor == 0 || num_clients == 0 {
            return Err(Error::InvalidArgument(
                "skewed partition needs divisor >= 1 and clients >= 1".into(),
            ));
        }
        let counts = (0..num_clients)
            .map(|i| SKEWED_COUNTS.iter().map(|row| row[i % 5].div_ceil(divisor)).collect())
            .collect();
        Ok(Self {
            class_names: SKEWED_CLASSES.iter().map(|s| s.to_string()).collect(),
            counts,
            test_per_class: 50,
        })
    }

    /// Every client holds `per_class` samples of every class.
    pub fn uniform(num_clients: usize, num_classes: usize, per_class: usize) -> Self {
        Self {
            class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
            counts: vec![vec![per_class; num_classes]; num_clients],
            test_per_class: per_class,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.counts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Classes with zero samples at `client`.
    pub fn missing_classes(&self, client: usize) -> Vec<usize> {
        self.counts[client]
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.class_names.is_empty() {
            return Err(Error::InvalidScenario("partition has no clients or no classes".into()));
        }
        for (i, row) in self.counts.iter().enumerate() {
            if row.len() != self.class_names.len() {
                return Err(Error::InvalidScenario(format!(
                    "client {i} lists {} class counts, expected {}",
                    row.len(),
                    self.class_names.len()
                )));
            }
            if row[0] == 0 {
                return Err(Error::InvalidScenario(format!(
                    "client {i} has no samples of class 0 ({}), which every client must hold",
                    self.class_names[0]
                )));
            }
        }
        Ok(())
    }
}

/// Client datasets plus a held-out test set with `test_per_class` samples of every class.
#[derive(Clone, Debug)]
pub struct Partition {
    pub clients: Vec<Dataset>,
    pub test: Dataset,
}

/// Class prototype: `PROTOTYPE_SCALE` on the class's block of `d / C` coordinates.
pub fn prototype(cfg: &ToyEncoderConfig, class: usize) -> Vec<f64> {
    let block = (cfg.token_dim / cfg.num_classes).max(1);
    let mut mu = vec![0.0; cfg.token_dim];
    for (j, v) in mu.iter_mut().enumerate() {
        if j / block == class {
            *v = PROTOTYPE_SCALE;
        }
    }
    mu
}

/// One sample: `FOREGROUND_TOKENS` tokens near the class prototype at random
/// positions, low-magnitude noise elsewhere.
pub fn synth_sample<R: Rng + ?Sized>(cfg: &ToyEncoderConfig, class: usize, rng: &mut R) -> Sample {
    let (n, d) = (cfg.num_tokens, cfg.token_dim);
    let fg = Normal::new(0.0, FOREGROUND_VARIANCE.sqrt()).unwrap();
    let bg = Normal::new(0.0, BACKGROUND_VARIANCE.sqrt()).unwrap();
    let mu = prototype(cfg, class);
    let mut is_fg = vec![false; n];
    for i in sample_indices(rng, n, FOREGROUND_TOKENS.min(n)) {
        is_fg[i] = true;
    }
    let mut tokens = Array2::zeros((n, d));
    for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if is_fg[i] {
                mu[j] + fg.sample(rng)
            } else {
                bg.sample(rng)
            };
        }
    }
    Sample { tokens, label: class }
}

pub fn synth_partition(spec: &PartitionSpec, cfg: &ToyEncoderConfig, seed: u64) -> Result<Partition> {
    spec.validate()?;
    cfg.validate()?;
    if spec.num_classes() != cfg.num_classes {
        return Err(Error::InvalidScenario(format!(
            "partition has {} classes but the encoder predicts {}",
            spec.num_classes(),
            cfg.num_classes
        )));
    }
    if cfg.token_dim < cfg.num_classes {
        return Err(Error::InvalidScenario(
            "token_dim must be at least num_classes so class prototypes are distinct".into(),
        ));
    }
    let clients = spec
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut rng = rng_for(seed, "partition/client", &[i as u64]);
            let mut ds = Dataset::new(cfg.num_classes);
            for (class, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    ds.samples.push(synth_sample(cfg, class, &mut rng));
                }
            }
            ds
        })
        .collect();
    let mut rng = rng_for(seed, "partition/test", &[]);
    let mut test = Dataset::new(cfg.num_classes);
    for class in 0..cfg.num_classes {
        for _ in 0..spec.test_per_class {
            test.samples.push(synth_sample(cfg, class, &mut rng));
        }
    }
    Ok(Partition { clients, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skewed_scaled_counts() {
        let spec = PartitionSpec::skewed(50).unwrap();
        assert_eq!(spec.counts[0], vec![83, 0, 4, 12, 1, 7, 3, 3]);
        let missing: Vec<_> = (0..5).map(|i| spec.missing_classes(i)).collect();
        assert_eq!(missing, vec![vec![1], vec![2], vec![3], vec![5], vec![6]]);
        assert_eq!(spec.class_names[missing[0][0]], "van");
        assert_eq!(spec.class_names[missing[4][0]], "tram");
        // Unscaled gives the raw counts.
        let full = PartitionSpec::skewed(1).unwrap();
        let total_car: usize = full.counts.iter().map(|r| r[0]).sum();
        assert_eq!(total_car, 23125);
        let total_tram: usize = full.counts.iter().map(|r| r[6]).sum();
        assert_eq!(total_tram, 376);
    }

    #[test]
    fn partition_honours_counts_and_missing_classes() {
        let spec = PartitionSpec::skewed(50).unwrap();
        let cfg = ToyEncoderConfig::default();
        let p = synth_partition(&spec, &cfg, 42).unwrap();
        for (i, ds) in p.clients.iter().enumerate() {
            assert_eq!(ds.class_counts(), spec.counts[i]);
        }
        assert_eq!(p.clients[0].class_counts()[1], 0, "C1 has no van");
        assert_eq!(p.clients[4].class_counts()[6], 0, "C5 has no tram");
        assert_eq!(p.test.class_counts(), vec![50; 8]);
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let spec = PartitionSpec::skewed(100).unwrap();
        let cfg = ToyEncoderConfig::default();
        let a = synth_partition(&spec, &cfg, 3).unwrap();
        let b = synth_partition(&spec, &cfg, 3).unwrap();
        let c = synth_partition(&spec, &cfg, 4).unwrap();
        assert_eq!(a.clients[2].samples[5].tokens, b.clients[2].samples[5].tokens);
        assert_ne!(a.clients[2].samples[5].tokens, c.clients[2].samples[5].tokens);
    }

    #[test]
    fn uniform_spec_is_balanced() {
        let spec = PartitionSpec::uniform(3, 8, 6);
        let p = synth_partition(&spec, &ToyEncoderConfig::default(), 1).unwrap();
        for ds in &p.clients {
            assert_eq!(ds.class_counts(), vec![6; 8]);
        }
        assert!((0..3).all(|i| spec.missing_classes(i).is_empty()));
    }

    #[test]
    fn missing_class_zero_is_invalid() {
        let mut spec = PartitionSpec::skewed(50).unwrap();
        spec.counts[2][0] = 0;
        assert!(matches!(
            synth_partition(&spec, &ToyEncoderConfig::default(), 1),
            Err(Error::InvalidScenario(_))
        ));
    }

    #[test]
    fn foreground_tokens_dominate_norms() {
        let cfg = ToyEncoderConfig::default();
        let mut rng = rng_for(5, "t", &[]);
        let s = synth_sample(&cfg, 3, &mut rng);
        let mut norms: Vec<f64> = s.tokens.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        norms.sort_by(|a, b| b.total_cmp(a));
        assert!(norms[FOREGROUND_TOKENS - 1] > 3.0 * norms[FOREGROUND_TOKENS]);
    }
}
