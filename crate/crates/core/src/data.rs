//! Synthetic multi-domain data, CSV ingestion and leave-one-domain-out splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{stream, SimRng};

/// Radius of the circle the class prototypes sit on.
pub const PROTOTYPE_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

/// All examples of one domain. `examples` is the training portion (or the
/// whole domain when it is held out for testing); `val` is the stratified
/// validation portion.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: usize,
    pub examples: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.examples.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &LabeledExample> {
        self.examples.iter().chain(&self.val)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.all().next().map(|e| e.features.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Stacks the features of `idx` into a `(len, k)` tensor.
pub fn feature_batch(examples: &[LabeledExample], idx: &[usize]) -> Result<Tensor> {
    let k = examples.first().map(|e| e.features.len()).unwrap_or(0);
    let mut values = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        values.extend_from_slice(&examples[i].features);
    }
    Tensor::new(vec![idx.len(), k], values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub angle_deg: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub shift: [f64; 2],
}

fn one() -> f64 {
    1.0
}

impl DomainShift {
    pub fn rotation(angle_deg: f64) -> Self {
        Self {
            angle_deg,
            scale: 1.0,
            shift: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub domains: Vec<DomainShift>,
    pub noise_sigma: f64,
    pub samples_per_domain: usize,
    pub ambient_dim: usize,
    pub embed_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            domains: [0.0, 30.0, 60.0, 90.0].into_iter().map(DomainShift::rotation).collect(),
            noise_sigma: 0.5,
            samples_per_domain: 300,
            ambient_dim: 20,
            embed_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.domains.len() < 3 {
            return Err(Error::invalid("need at least 3 domains (2 clients + 1 unseen)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and non-negative"));
        }
        if self.ambient_dim < 2 {
            return Err(Error::invalid("ambient dimension must be at least 2"));
        }
        if self.samples_per_domain < self.classes {
            return Err(Error::invalid("every class needs at least one sample per domain"));
        }
        for d in &self.domains {
            let ok = d.angle_deg.is_finite() && d.scale.is_finite() && d.scale > 0.0 && d.shift.iter().all(|s| s.is_finite());
            if !ok {
                return Err(Error::invalid(format!("bad domain shift {d:?}")));
            }
        }
        Ok(())
    }
}

pub fn rotate(point: [f64; 2], angle_deg: f64) -> [f64; 2] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    [c * point[0] - s * point[1], s * point[0] + c * point[1]]
}

pub fn prototype(class: usize, classes: usize) -> [f64; 2] {
    let a = std::f64::consts::TAU * class as f64 / classes as f64;
    [PROTOTYPE_RADIUS * a.cos(), PROTOTYPE_RADIUS * a.sin()]
}

/// `k x 2` matrix with orthonormal columns, row-major.
pub fn orthonormal_embedding(k: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = stream(seed, "embedding", 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let mut a: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
        let mut b: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter_mut().for_each(|x| *x /= na);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= dot * x);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na > 1e-6 && nb > 1e-6 {
            b.iter_mut().for_each(|x| *x /= nb);
            return a.into_iter().zip(b).map(|(x, y)| [x, y]).collect();
        }
    }
}

/// Class prototypes on a circle, rotated, scaled and shifted per domain,
/// with isotropic noise, then lifted into `ambient_dim` dimensions.
pub fn generate_rotated_blobs(spec: &SyntheticSpec, seed: u64) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let embed = orthonormal_embedding(spec.ambient_dim, spec.embed_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(spec.domains.len());
    for (d, shift) in spec.domains.iter().enumerate() {
        let mut rng = stream(seed, "domain-data", d as u64);
        let mut examples = Vec::with_capacity(spec.samples_per_domain);
        for i in 0..spec.samples_per_domain {
            let label = i % spec.classes;
            let r = rotate(prototype(label, spec.classes), shift.angle_deg);
            let pt = [
                r[0] * shift.scale + shift.shift[0] + spec.noise_sigma * normal.sample(&mut rng),
                r[1] * shift.scale + shift.shift[1] + spec.noise_sigma * normal.sample(&mut rng),
            ];
            let features = embed.iter().map(|e| e[0] * pt[0] + e[1] * pt[1]).collect();
            examples.push(LabeledExample { features, label, domain: d });
        }
        out.push(DomainDataset {
            domain: d,
            examples,
            val: Vec::new(),
        });
    }
    Ok(out)
}

/// Reads `domain,label,f0..f{k-1}` rows, grouped by domain id.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<DomainDataset>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(Error::Parse("header must start with domain,label and have feature columns".into()));
    }
    let k = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse(format!("unknown column {name:?}, expected f{j}")));
        }
    }
    let mut groups: BTreeMap<usize, Vec<LabeledExample>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != k + 2 {
            return Err(Error::Parse(format!("row {} has {} fields, expected {}", line + 2, rec.len(), k + 2)));
        }
        let domain = rec[0].trim().parse::<usize>().map_err(|e| Error::Parse(format!("row {}: domain: {e}", line + 2)))?;
        let label = rec[1].trim().parse::<usize>().map_err(|e| Error::Parse(format!("row {}: label: {e}", line + 2)))?;
        let features = rec
            .iter()
            .skip(2)
            .map(|f| {
                let v = f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: feature {f:?}: {e}", line + 2)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("row {}", line + 2)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        groups.entry(domain).or_default().push(LabeledExample { features, label, domain });
    }
    Ok(groups
        .into_iter()
        .map(|(domain, examples)| DomainDataset {
            domain,
            examples,
            val: Vec::new(),
        })
        .collect())
}

pub fn write_csv(datasets: &[DomainDataset], path: impl AsRef<Path>) -> Result<()> {
    let k = datasets.iter().find_map(|d| d.feature_dim()).unwrap_or(0);
    let mut s = String::from("domain,label");
    for j in 0..k {
        s.push_str(&format!(",f{j}"));
    }
    s.push('\n');
    for ds in datasets {
        for e in ds.all() {
            s.push_str(&format!("{},{}", e.domain, e.label));
            for v in &e.features {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationSplit {
    pub clients: Vec<DomainDataset>,
    /// Held-out domain; every example sits in `examples`.
    pub unseen: DomainDataset,
    pub classes: usize,
}

impl FederationSplit {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }
}

pub fn class_count(datasets: &[DomainDataset]) -> usize {
    datasets.iter().flat_map(|d| d.all()).map(|e| e.label + 1).max().unwrap_or(0)
}

/// Holds out `unseen_id` entirely and splits every other domain into
/// train/validation, stratified by class.
pub fn leave_one_out_split(datasets: &[DomainDataset], unseen_id: usize, val_fraction: f64, seed: u64) -> Result<FederationSplit> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("val_fraction {val_fraction} outside [0,1)")));
    }
    let unseen = datasets
        .iter()
        .find(|d| d.domain == unseen_id)
        .ok_or_else(|| Error::invalid(format!("unseen domain {unseen_id} not present")))?;
    let others: Vec<&DomainDataset> = datasets.iter().filter(|d| d.domain != unseen_id).collect();
    if others.len() < 2 {
        return Err(Error::invalid("need at least 2 training domains"));
    }
    if val_fraction == 0.0 {
        log::warn!("val_fraction is 0: validation sets are empty and model selection falls back to the last round");
    }
    let classes = class_count(datasets);
    let mut clients = Vec::with_capacity(others.len());
    for ds in others {
        let mut rng = stream(seed, "split", ds.domain as u64);
        let pool: Vec<&LabeledExample> = ds.all().collect();
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in pool.iter().enumerate() {
            by_class.entry(e.label).or_default().push(i);
        }
        if let Some(missing) = (0..classes).find(|c| !by_class.contains_key(c)) {
            return Err(Error::invalid(format!("domain {} has no training example of class {missing}", ds.domain)));
        }
        let mut train_idx = Vec::new();
        let mut val_idx = Vec::new();
        for idx in by_class.values_mut() {
            idx.shuffle(&mut rng);
            let n_val = ((idx.len() as f64 * val_fraction).round() as usize).min(idx.len() - 1);
            val_idx.extend_from_slice(&idx[..n_val]);
            train_idx.extend_from_slice(&idx[n_val..]);
        }
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        clients.push(DomainDataset {
            domain: ds.domain,
            examples: train_idx.iter().map(|&i| pool[i].clone()).collect(),
            val: val_idx.iter().map(|&i| pool[i].clone()).collect(),
        });
    }
    Ok(FederationSplit {
        clients,
        unseen: DomainDataset {
            domain: unseen.domain,
            examples: unseen.all().cloned().collect(),
            val: Vec::new(),
        },
        classes,
    })
}

/// Shuffled minibatches over a fixed example set, one epoch at a time.
#[derive(Clone, Debug)]
pub struct Batcher {
    labels: Vec<usize>,
    batch: usize,
    same_class: bool,
    drop_incomplete: bool,
    rng: SimRng,
}

/// Batches of indices into `labels`. With `same_class`, every batch holds a
/// single class.
pub fn minibatch_iter(labels: &[usize], batch: usize, seed: u64, same_class: bool, drop_incomplete: bool) -> Result<Batcher> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if drop_incomplete && batch > labels.len() {
        return Err(Error::invalid(format!("batch {batch} larger than dataset of {}", labels.len())));
    }
    Ok(Batcher {
        labels: labels.to_vec(),
        batch,
        same_class,
        drop_incomplete,
        rng: stream(seed, "batches", 0),
    })
}

impl Batcher {
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let chunk = |idx: &[usize], out: &mut Vec<Vec<usize>>| {
            for c in idx.chunks(self.batch) {
                if c.len() == self.batch || !self.drop_incomplete {
                    out.push(c.to_vec());
                }
            }
        };
        let mut out = Vec::new();
        if self.same_class {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &y) in self.labels.iter().enumerate() {
                by_class.entry(y).or_default().push(i);
            }
            for idx in by_class.values_mut() {
                idx.shuffle(&mut self.rng);
                chunk(idx, &mut out);
            }
            out.shuffle(&mut self.rng);
        } else {
            let mut idx: Vec<usize> = (0..self.labels.len()).collect();
            idx.shuffle(&mut self.rng);
            chunk(&idx, &mut out);
        }
        out
    }
}
