//! Dataset preparation: CSV ingestion behind a column schema, class
//! rebalancing, min-max scaling, a stratified train/test split,
//! per-client sharding, and a seeded synthetic generator.
//!
//! Everything downstream assumes the six-class intrusion taxonomy in
//! [`CLASS_NAMES`] and features scaled into [0,1]. Scaling is plain
//! min-max, fitted on the training split only and clamped when applied
//! elsewhere:
//!
//!   x' = clamp((x − min) / (max − min), 0, 1)
//!
//! A feature constant on the training split maps to 0.5 everywhere
//! rather than dividing by zero. Stratified quotas (splits, shards,
//! offload fractions) use the largest-remainder rule: floor every
//! class's real-valued share, then hand the leftover units to the
//! classes with the largest fractional parts. That pins totals exactly
//! while keeping every class within one sample of its proportional
//! share.
//!
//! All randomness is ChaCha20 seeded by the caller; independent stages
//! derive their streams from tagged hashes of the base seed, so
//! reordering stages cannot silently change a run.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;
use thiserror::Error;

use crate::ckks::refresh::derive_seed;

pub const CLASS_COUNT: usize = 6;

/// Class order used everywhere: indices into count arrays, one-hot
/// targets, and confusion matrices.
pub const CLASS_NAMES: [&str; CLASS_COUNT] =
    ["Normal", "DDoS", "MitM", "Injection", "Malware", "Reconnaissance"];

/// Per-class sample counts of the reference workload, total 31,400.
pub const REFERENCE_COUNTS: [usize; CLASS_COUNT] = [5320, 5472, 4000, 5589, 5504, 5515];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

/// The reference class profile shrunk by an integer divisor,
/// rounding half away from zero.
pub fn scaled_reference_counts(divisor: usize) -> [usize; CLASS_COUNT] {
    let mut out = [0; CLASS_COUNT];
    for (o, &c) in out.iter_mut().zip(&REFERENCE_COUNTS) {
        *o = (c as f64 / divisor as f64).round() as usize;
    }
    out
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    t[label] = 1.0;
    t
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema: {0}")]
    Schema(String),
    #[error("column {0:?} not in the csv header")]
    MissingColumn(String),
    #[error("no parseable rows")]
    NoRows,
    #[error("class {0} absent from the input but targeted")]
    ClassMissing(&'static str),
    #[error("class {class} has {have} samples, need at least {need}")]
    TooFew { class: &'static str, have: usize, need: usize },
    #[error("{0}")]
    Invalid(String),
}

/// One labelled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

fn count_classes(samples: &[Sample]) -> [usize; CLASS_COUNT] {
    let mut counts = [0; CLASS_COUNT];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

fn by_class(samples: &[Sample]) -> [Vec<usize>; CLASS_COUNT] {
    let mut groups: [Vec<usize>; CLASS_COUNT] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        groups[s.label].push(i);
    }
    groups
}

fn class_rng(seed: u64, stage: &[u8], class: usize) -> ChaCha20Rng {
    let mut tag = stage.to_vec();
    tag.push(class as u8);
    ChaCha20Rng::seed_from_u64(derive_seed(seed, &tag))
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha20Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Maps CSV columns to features and source labels to the class set.
///
/// `label_map` keys are either exact source labels or prefix patterns
/// ending in `*`; exact entries win, then the longest matching prefix.
#[derive(Clone, Debug, Deserialize)]
pub struct SchemaConfig {
    pub label_column: String,
    pub feature_columns: Vec<String>,
    pub label_map: BTreeMap<String, String>,
}

impl SchemaConfig {
    pub fn from_toml(text: &str) -> Result<SchemaConfig, DataError> {
        let schema: SchemaConfig =
            toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<SchemaConfig, DataError> {
        SchemaConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.feature_columns.is_empty() {
            return Err(DataError::Schema("no feature columns".into()));
        }
        let mut seen = self.feature_columns.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.feature_columns.len() {
            return Err(DataError::Schema("duplicate feature columns".into()));
        }
        for (pat, class) in &self.label_map {
            if class_index(class).is_none() {
                return Err(DataError::Schema(format!(
                    "pattern {pat:?} maps to unknown class {class:?}"
                )));
            }
        }
        Ok(())
    }

    /// Class of a raw label value, or None when nothing matches.
    pub fn class_of(&self, raw: &str) -> Option<usize> {
        if let Some(class) = self.label_map.get(raw) {
            return class_index(class);
        }
        let mut best: Option<(&str, &str)> = None;
        for (pat, class) in &self.label_map {
            if let Some(prefix) = pat.strip_suffix('*') {
                if raw.starts_with(prefix)
                    && best.map_or(true, |(b, _)| prefix.len() > b.len())
                {
                    best = Some((prefix, class));
                }
            }
        }
        best.and_then(|(_, class)| class_index(class))
    }
}

/// What a CSV load kept and what it dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadSummary {
    pub rows: usize,
    pub parsed: usize,
    pub bad_numeric: usize,
    pub unknown_label: usize,
}

/// Parse a headered CSV through the schema. Rows with unparseable
/// numerics or unmapped labels are counted and skipped, not fatal.
pub fn load_csv(path: &Path, schema: &SchemaConfig) -> Result<(Vec<Sample>, LoadSummary), DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let label_idx = col(&schema.label_column)?;

    let mut samples = Vec::new();
    let mut summary = LoadSummary::default();
    for record in reader.records() {
        let record = record?;
        summary.rows += 1;
        let label = match record.get(label_idx).and_then(|v| schema.class_of(v)) {
            Some(l) => l,
            None => {
                summary.unknown_label += 1;
                continue;
            }
        };
        let mut features = Vec::with_capacity(feature_idx.len());
        let mut ok = true;
        for &i in &feature_idx {
            match record.get(i).and_then(|v| v.trim().parse::<f64>().ok()) {
                Some(v) if v.is_finite() => features.push(v),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            summary.bad_numeric += 1;
            continue;
        }
        samples.push(Sample { features, label });
        summary.parsed += 1;
    }
    if samples.is_empty() {
        return Err(DataError::NoRows);
    }
    Ok((samples, summary))
}

/// Force the per-class counts to `targets`: classes above their target
/// are downsampled without replacement, classes below keep everything
/// and draw the shortfall with replacement.
pub fn rebalance(
    samples: &[Sample],
    targets: &[usize; CLASS_COUNT],
    seed: u64,
) -> Result<Vec<Sample>, DataError> {
    if targets.iter().any(|&t| t == 0) {
        return Err(DataError::Invalid("rebalance targets must be positive".into()));
    }
    let groups = by_class(samples);
    let mut out = Vec::with_capacity(targets.iter().sum());
    for (c, group) in groups.iter().enumerate() {
        let target = targets[c];
        if group.is_empty() {
            return Err(DataError::ClassMissing(CLASS_NAMES[c]));
        }
        let mut rng = class_rng(seed, b"rebalance", c);
        let mut picks = group.clone();
        if group.len() >= target {
            shuffle(&mut picks, &mut rng);
            picks.truncate(target);
        } else {
            for _ in group.len()..target {
                picks.push(group[rng.gen_range(0..group.len())]);
            }
        }
        out.extend(picks.into_iter().map(|i| samples[i].clone()));
    }
    Ok(out)
}

/// Per-feature min-max parameters fitted on one set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    pub fn fit(samples: &[Sample]) -> Result<Scaling, DataError> {
        let width = samples
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| DataError::Invalid("cannot fit scaling on nothing".into()))?;
        if samples.iter().any(|s| s.features.len() != width) {
            return Err(DataError::Invalid("inconsistent feature widths".into()));
        }
        let mut min = vec![f64::INFINITY; width];
        let mut max = vec![f64::NEG_INFINITY; width];
        for s in samples {
            for (f, &v) in s.features.iter().enumerate() {
                min[f] = min[f].min(v);
                max[f] = max[f].max(v);
            }
        }
        Ok(Scaling { min, max })
    }

    /// Into [0,1], clamped; constant features map to 0.5.
    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                let span = self.max[f] - self.min[f];
                if span == 0.0 {
                    0.5
                } else {
                    ((v - self.min[f]) / span).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    /// Back to the original units. Exact for anything `apply` did not
    /// clamp; constant features return their single value.
    pub fn invert(&self, scaled: &[f64]) -> Vec<f64> {
        scaled
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                let span = self.max[f] - self.min[f];
                if span == 0.0 {
                    self.min[f]
                } else {
                    self.min[f] + v * span
                }
            })
            .collect()
    }
}

/// The train/test material every experiment starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub scaling: Scaling,
    pub train_counts: [usize; CLASS_COUNT],
    pub test_counts: [usize; CLASS_COUNT],
}

/// Stratified split, then min-max scaling fitted on the training side
/// and applied to both.
pub fn scale_and_split(
    samples: &[Sample],
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction {train_fraction} outside (0,1)"
        )));
    }
    let groups = by_class(samples);
    let mut train_raw = Vec::new();
    let mut test_raw = Vec::new();
    for (c, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        if group.len() < 2 {
            return Err(DataError::TooFew { class: CLASS_NAMES[c], have: group.len(), need: 2 });
        }
        let mut order = group.clone();
        shuffle(&mut order, &mut class_rng(seed, b"split", c));
        let k = ((group.len() as f64 * train_fraction).round() as usize)
            .clamp(1, group.len() - 1);
        train_raw.extend(order[..k].iter().map(|&i| samples[i].clone()));
        test_raw.extend(order[k..].iter().map(|&i| samples[i].clone()));
    }
    if train_raw.is_empty() {
        return Err(DataError::NoRows);
    }
    let scaling = Scaling::fit(&train_raw)?;
    let rescale = |mut s: Sample| {
        s.features = scaling.apply(&s.features);
        s
    };
    let train: Vec<Sample> = train_raw.into_iter().map(rescale).collect();
    let test: Vec<Sample> = test_raw.into_iter().map(rescale).collect();
    let train_counts = count_classes(&train);
    let test_counts = count_classes(&test);
    Ok(DatasetSplit { train, test, scaling, train_counts, test_counts })
}

/// One client's retained data and the slice it offloads.
#[derive(Clone, Debug, PartialEq)]
pub struct VuShard {
    pub retained: Vec<Sample>,
    pub offloaded: Vec<Sample>,
}

/// Largest-remainder quotas: per-class offload counts that sum to
/// round(p · total) with every class within one of proportional.
fn offload_quotas(class_sizes: &[usize], p: f64) -> Vec<usize> {
    let total: usize = class_sizes.iter().sum();
    let want = (p * total as f64).round() as usize;
    let mut floors: Vec<usize> = Vec::with_capacity(class_sizes.len());
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(class_sizes.len());
    for (c, &n) in class_sizes.iter().enumerate() {
        let q = p * n as f64;
        let fl = (q.floor() as usize).min(n);
        floors.push(fl);
        fracs.push((q - fl as f64, c));
    }
    let mut remaining = want.saturating_sub(floors.iter().sum::<usize>());
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, c) in &fracs {
        if remaining == 0 {
            break;
        }
        if floors[c] < class_sizes[c] {
            floors[c] += 1;
            remaining -= 1;
        }
    }
    floors
}

/// Partition the training set into per-client shards with matching
/// class distributions, each split into retained and offloaded parts
/// by that client's fraction.
pub fn shard_for_vus(
    train: &[Sample],
    p: &[f64],
    seed: u64,
) -> Result<Vec<VuShard>, DataError> {
    let n_vus = p.len();
    if n_vus == 0 {
        return Err(DataError::Invalid("need at least one client".into()));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DataError::Invalid(format!("offload fraction {bad} outside [0,1]")));
    }
    let groups = by_class(train);
    // Shard membership per class: shuffle, then contiguous blocks of
    // near-equal size.
    let mut shard_class_idx: Vec<[Vec<usize>; CLASS_COUNT]> = Vec::with_capacity(n_vus);
    shard_class_idx.resize_with(n_vus, Default::default);
    for (c, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        if group.len() < n_vus {
            return Err(DataError::TooFew { class: CLASS_NAMES[c], have: group.len(), need: n_vus });
        }
        let mut order = group.clone();
        shuffle(&mut order, &mut class_rng(seed, b"shard", c));
        for (i, shard) in shard_class_idx.iter_mut().enumerate() {
            let lo = i * order.len() / n_vus;
            let hi = (i + 1) * order.len() / n_vus;
            shard[c] = order[lo..hi].to_vec();
        }
    }

    let mut shards = Vec::with_capacity(n_vus);
    for (i, classes) in shard_class_idx.iter().enumerate() {
        let sizes: Vec<usize> = classes.iter().map(|v| v.len()).collect();
        let quotas = offload_quotas(&sizes, p[i]);
        let mut retained = Vec::new();
        let mut offloaded = Vec::new();
        for (c, idxs) in classes.iter().enumerate() {
            for (j, &idx) in idxs.iter().enumerate() {
                if j < quotas[c] {
                    offloaded.push(train[idx].clone());
                } else {
                    retained.push(train[idx].clone());
                }
            }
        }
        shards.push(VuShard { retained, offloaded });
    }
    Ok(shards)
}

/// Shape of the synthetic workload: Gaussian clusters, one per class.
#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub feature_count: usize,
    /// Half-width of the box cluster centers are drawn from. Zero
    /// collapses every class onto the same distribution.
    pub separation: f64,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec { feature_count: 32, separation: 2.0, noise: 1.0 }
    }
}

/// Seeded Gaussian-mixture samples with the requested class counts.
pub fn synth_generate(
    spec: &SynthSpec,
    counts: &[usize; CLASS_COUNT],
    seed: u64,
) -> Vec<Sample> {
    let mut crng = ChaCha20Rng::seed_from_u64(derive_seed(seed, b"centers"));
    let centers: Vec<Vec<f64>> = (0..CLASS_COUNT)
        .map(|_| {
            (0..spec.feature_count)
                .map(|_| spec.separation * crng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (c, &n) in counts.iter().enumerate() {
        let mut rng = class_rng(seed, b"synth", c);
        for _ in 0..n {
            let features = centers[c]
                .iter()
                .map(|&m| m + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push(Sample { features, label: c });
        }
    }
    out
}

pub const MAGIC_DATASET: &[u8; 4] = b"EFDS";
const DATASET_VERSION: u16 = 1;

/// Serialize a split to the versioned binary container.
pub fn save_dataset(split: &DatasetSplit, path: &Path) -> Result<(), DataError> {
    let width = split.scaling.min.len();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_DATASET);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(split.train.len() as u64).to_le_bytes());
    out.extend_from_slice(&(split.test.len() as u64).to_le_bytes());
    for v in split.scaling.min.iter().chain(&split.scaling.max) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in split.train.iter().chain(&split.test) {
        out.push(s.label as u8);
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplit, DataError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], DataError> {
        let end = *pos + n;
        let slice = bytes.get(*pos..end).ok_or(DataError::Invalid("truncated dataset".into()))?;
        *pos = end;
        Ok(slice)
    };
    if take(&mut pos, 4)? != MAGIC_DATASET {
        return Err(DataError::Invalid("not a dataset container".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(DataError::Invalid(format!("unsupported dataset version {version}")));
    }
    let width = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let n_train = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let n_test = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let read_f64s = |pos: &mut usize, n: usize| -> Result<Vec<f64>, DataError> {
        let raw = take(pos, n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let min = read_f64s(&mut pos, width)?;
    let max = read_f64s(&mut pos, width)?;
    let read_samples = |pos: &mut usize, n: usize| -> Result<Vec<Sample>, DataError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let label = take(pos, 1)?[0] as usize;
            if label >= CLASS_COUNT {
                return Err(DataError::Invalid(format!("label {label} out of range")));
            }
            let raw = take(pos, width * 8)?;
            let features =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            out.push(Sample { features, label });
        }
        Ok(out)
    };
    let train = read_samples(&mut pos, n_train)?;
    let test = read_samples(&mut pos, n_test)?;
    if pos != bytes.len() {
        return Err(DataError::Invalid("trailing bytes after dataset".into()));
    }
    let train_counts = count_classes(&train);
    let test_counts = count_classes(&test);
    Ok(DatasetSplit { train, test, scaling: Scaling { min, max }, train_counts, test_counts })
}

pub const MAGIC_SAMPLES: &[u8; 4] = b"EFPS";

/// A bare sample batch as bytes, the plaintext wire form of offloaded
/// data. Kept distinct from the dataset container so a message payload
/// identifies itself.
pub fn encode_samples(samples: &[Sample]) -> Vec<u8> {
    let width = samples.first().map(|s| s.features.len()).unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_SAMPLES);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for s in samples {
        out.push(s.label as u8);
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<Sample>, DataError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC_SAMPLES {
        return Err(DataError::Invalid("not a sample batch".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    let stride = 1 + 8 * width;
    if body.len() != count.checked_mul(stride).ok_or_else(|| {
        DataError::Invalid("sample batch header overflow".into())
    })? {
        return Err(DataError::Invalid("sample batch length mismatch".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for rec in body.chunks_exact(stride) {
        let label = rec[0] as usize;
        if label >= CLASS_COUNT {
            return Err(DataError::Invalid(format!("label {label} out of range")));
        }
        let features: Vec<f64> = rec[1..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(Sample { features, label });
    }
    Ok(samples)
}

/// Scaled samples as CSV for inspection: f0..f{n-1}, then the class
/// name.
pub fn write_csv(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let width = samples.first().map(|s| s.features.len()).unwrap_or(0);
    let mut header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
        rec.push(CLASS_NAMES[s.label].into());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
