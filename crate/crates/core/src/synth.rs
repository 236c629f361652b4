//! Seeded Gaussian-blob domains for disjoint-label (DDA) and open-set (ODA)
//! transfer scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LabeledDataset};
use crate::error::{Error, Result};

const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: u64,
    pub mean: Vec<f64>,
    pub stddev: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
}

/// Samples every class from an isotropic Gaussian, classes in spec order.
pub fn generate(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.dim == 0 || spec.classes.is_empty() {
        return Err(Error::InvalidInput("synthetic spec needs dim >= 1 and at least one class".into()));
    }
    for c in &spec.classes {
        if c.mean.len() != spec.dim {
            return Err(Error::DimensionMismatch(format!(
                "class {} mean has {} coordinates, dim is {}",
                c.id,
                c.mean.len(),
                spec.dim
            )));
        }
        if !(c.stddev > 0.0 && c.stddev.is_finite()) || c.count == 0 {
            return Err(Error::InvalidInput(format!(
                "class {} needs stddev > 0 and count >= 1",
                c.id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::new();
    let mut raw = Vec::new();
    for c in &spec.classes {
        let noise = Normal::new(0.0, c.stddev).expect("validated stddev");
        for _ in 0..c.count {
            values.extend(c.mean.iter().map(|m| m + rng.sample(noise)));
            raw.push(c.id);
        }
    }
    let features = FeatureMatrix::new(raw.len(), spec.dim, values)?;
    LabeledDataset::from_raw_labels(features, &raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Dda,
    Oda,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dda" => Ok(ScenarioKind::Dda),
            "oda" => Ok(ScenarioKind::Oda),
            other => Err(Error::Config(format!("unknown scenario kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub k_source: usize,
    pub k_target: usize,
    /// Target classes that reuse a source class (ODA only).
    pub overlap: usize,
    /// Minimum distance between independently placed class means.
    pub separation: f64,
    /// Fresh target classes planted at `separation / 4` from a distinct source class.
    pub near: usize,
    pub dim: usize,
    pub stddev: f64,
    pub per_class_source: usize,
    pub per_class_target_train: usize,
    pub per_class_target_test: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Dda,
            k_source: 10,
            k_target: 3,
            overlap: 0,
            separation: 4.0,
            near: 3,
            dim: 8,
            stddev: 1.0,
            per_class_source: 20,
            per_class_target_train: 20,
            per_class_target_test: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub source: LabeledDataset,
    pub target_train: LabeledDataset,
    pub target_test: LabeledDataset,
    pub source_means: Vec<Vec<f64>>,
    pub target_means: Vec<Vec<f64>>,
    /// Source ids reused by target classes.
    pub overlap_ids: Vec<u64>,
    /// `(target id, source id)` pairs placed close together.
    pub near_pairs: Vec<(u64, u64)>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `count` points on a sphere of radius `separation * max(1, count / 2)`
/// with pairwise distance at least `separation`. In one dimension the
/// sphere degenerates to two points, so the interval is used instead.
fn place_means(rng: &mut ChaCha8Rng, count: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let radius = separation * (count as f64 / 2.0).max(1.0);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut rejections = 0;
    while means.len() < count {
        let candidate: Vec<f64> = if dim == 1 {
            vec![rng.random_range(-radius..=radius)]
        } else {
            unit_vector(rng, dim).into_iter().map(|x| x * radius).collect()
        };
        if means.iter().all(|m| distance(m, &candidate) >= separation) {
            means.push(candidate);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(Error::DegenerateInput(format!(
                    "could not place {count} means {separation} apart in {dim} dimensions"
                )));
            }
        }
    }
    Ok(means)
}

fn sample_split(
    means: &[Vec<f64>],
    ids: &[u64],
    dim: usize,
    stddev: f64,
    count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    generate(&SynthSpec {
        dim,
        classes: means
            .iter()
            .zip(ids)
            .map(|(m, &id)| ClassSpec { id, mean: m.clone(), stddev, count })
            .collect(),
        seed,
    })
}

/// Source ids are `0..k_source`. DDA target ids are `k_source..k_source+k_target`.
/// In ODA the first `overlap` target classes reuse source ids 0.. and their
/// means exactly; the remaining target ids continue after `k_source`.
/// The first `near` fresh target classes sit at `separation / 4` from
/// distinct source classes, starting after the overlapping ones.
pub fn make_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    let kind_name = match spec.kind {
        ScenarioKind::Dda => "dda",
        ScenarioKind::Oda => "oda",
    };
    match spec.kind {
        ScenarioKind::Dda if spec.overlap != 0 => {
            return Err(Error::InvalidOverlap { kind: kind_name, overlap: spec.overlap })
        }
        ScenarioKind::Oda if spec.overlap == 0 || spec.overlap > spec.k_source.min(spec.k_target) => {
            return Err(Error::InvalidOverlap { kind: kind_name, overlap: spec.overlap })
        }
        _ => {}
    }
    if spec.k_source == 0 || spec.k_target == 0 || spec.dim == 0 {
        return Err(Error::Config("scenario needs k_source, k_target and dim >= 1".into()));
    }
    if !(spec.separation > 0.0) {
        return Err(Error::Config(format!("separation must be positive, got {}", spec.separation)));
    }
    if spec.per_class_source == 0 || spec.per_class_target_train == 0 || spec.per_class_target_test == 0 {
        return Err(Error::Config("per-class sample counts must be at least 1".into()));
    }
    let fresh = spec.k_target - spec.overlap;
    if spec.near > fresh || spec.overlap + spec.near > spec.k_source {
        return Err(Error::Config(format!(
            "cannot plant {} near classes with {fresh} fresh target classes and {} free source classes",
            spec.near,
            spec.k_source - spec.overlap
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let placed = place_means(&mut rng, spec.k_source + fresh - spec.near, spec.dim, spec.separation)?;
    let source_means: Vec<Vec<f64>> = placed[..spec.k_source].to_vec();
    let mut independent = placed[spec.k_source..].iter().cloned();

    let source_ids: Vec<u64> = (0..spec.k_source as u64).collect();
    let mut target_ids = Vec::with_capacity(spec.k_target);
    let mut target_means = Vec::with_capacity(spec.k_target);
    let mut near_pairs = Vec::new();
    for t in 0..spec.k_target {
        if t < spec.overlap {
            target_ids.push(t as u64);
            target_means.push(source_means[t].clone());
            continue;
        }
        let id = (spec.k_source + t - spec.overlap) as u64;
        let fresh_index = t - spec.overlap;
        let mean = if fresh_index < spec.near {
            let anchor = spec.overlap + fresh_index;
            near_pairs.push((id, anchor as u64));
            let dir = unit_vector(&mut rng, spec.dim);
            source_means[anchor]
                .iter()
                .zip(dir)
                .map(|(m, d)| m + d * spec.separation / 4.0)
                .collect()
        } else {
            independent.next().expect("enough means placed")
        };
        target_ids.push(id);
        target_means.push(mean);
    }

    let seeds: Vec<u64> = (0..3).map(|_| rng.random()).collect();
    let source = sample_split(&source_means, &source_ids, spec.dim, spec.stddev, spec.per_class_source, seeds[0])?;
    let target_train = sample_split(
        &target_means,
        &target_ids,
        spec.dim,
        spec.stddev,
        spec.per_class_target_train,
        seeds[1],
    )?;
    let target_test = sample_split(
        &target_means,
        &target_ids,
        spec.dim,
        spec.stddev,
        spec.per_class_target_test,
        seeds[2],
    )?;
    Ok(Scenario {
        source,
        target_train,
        target_test,
        source_means,
        target_means,
        overlap_ids: (0..spec.overlap as u64).collect(),
        near_pairs,
    })
}
