//! Synthetic instance generation with planted labels, long-tail predicate
//! frequencies, head/body/tail grouping and bi-level resampling.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{
    instance_from_json, instance_to_json, LabelAssignment, PredicateDef, SceneGraphInstance,
    VocabSizes,
};
use crate::scoring::{FeatureModel, ModelArch};

/// Settings for the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Inclusive range for the object count per instance.
    pub m_range: (usize, usize),
    /// Fraction of the m^2 - m ordered pairs instantiated as predicates.
    pub predicate_density: f64,
    pub v_o: usize,
    pub v_p: usize,
    pub v_g: usize,
    pub d: usize,
    /// Skew of the predicate label distribution; 0 is uniform.
    pub zipf_exponent: f64,
    /// Separation between class feature means; 0 carries no label signal.
    pub class_margin: f64,
    pub globals_per_instance: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            m_range: (3, 5),
            predicate_density: 0.5,
            v_o: 10,
            v_p: 8,
            v_g: 16,
            d: 16,
            zipf_exponent: 1.0,
            class_margin: 10.0,
            globals_per_instance: 1,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn vocab(&self) -> VocabSizes {
        VocabSizes::new(self.v_o, self.v_p, self.v_g)
    }

    fn validate(&self) -> Result<()> {
        if self.m_range.0 < 1 || self.m_range.0 > self.m_range.1 {
            return Err(Error::InvalidConfig(format!(
                "bad object count range {:?}",
                self.m_range
            )));
        }
        if !self.predicate_density.is_finite()
            || self.predicate_density <= 0.0
            || self.predicate_density > 1.0
        {
            return Err(Error::InvalidConfig("predicate_density must be in (0, 1]".into()));
        }
        if self.v_o < 2 || self.v_p < 2 || self.v_g < 1 {
            return Err(Error::InvalidConfig("vocabulary sizes below minimums".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("feature dimension must be positive".into()));
        }
        if self.class_margin < 0.0 || !self.class_margin.is_finite() {
            return Err(Error::InvalidConfig("class_margin must be non-negative".into()));
        }
        if self.zipf_exponent < 0.0 || !self.zipf_exponent.is_finite() {
            return Err(Error::InvalidConfig("zipf_exponent must be non-negative".into()));
        }
        Ok(())
    }
}

/// A labelled instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub instance: SceneGraphInstance,
    pub labels: LabelAssignment,
}

/// Deterministic RNG stream for generation and resampling.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// RNG positioned on one of a seed's independent streams, as used for
/// per-instance draws.
pub fn seeded_stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Normalized power-law probabilities over `v` categories,
/// `p_k proportional to (k + 1)^(-s)`.
pub fn zipf_probs(v: usize, exponent: f64) -> Vec<f64> {
    let mut probs: Vec<f64> = (0..v).map(|k| ((k + 1) as f64).powf(-exponent)).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

fn draw_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Per-class feature means used by the generator and the planted oracle.
#[derive(Clone, Debug)]
pub struct ClassMeans {
    pub objects: Vec<Vec<f64>>,
    pub predicates: Vec<Vec<f64>>,
}

/// Class means derived deterministically from the config seed: random unit
/// directions scaled by `class_margin / sqrt(2)`, so two orthogonal means sit
/// about `class_margin` apart against unit-variance noise.
pub fn class_means(config: &GeneratorConfig) -> ClassMeans {
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX); // reserved stream, instance draws use 0..count
    let scale = config.class_margin / 2.0_f64.sqrt();
    let mut draw = |count: usize| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let mut v: Vec<f64> = (0..config.d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                for x in &mut v {
                    *x *= scale / norm;
                }
                v
            })
            .collect()
    };
    ClassMeans { objects: draw(config.v_o), predicates: draw(config.v_p) }
}

/// Draws one labelled instance: uniform object labels, power-law predicate
/// labels, features at the class mean plus unit Gaussian noise. Object edges
/// link the endpoint pair of every predicate; global features are the mean of
/// all object and predicate features.
pub fn sample_instance(config: &GeneratorConfig, rng: &mut impl Rng) -> Result<Sample> {
    config.validate()?;
    let means = class_means(config);
    let m = rng.random_range(config.m_range.0..=config.m_range.1);
    let max_pairs = m * m - m;
    let n = ((config.predicate_density * max_pairs as f64).round() as usize).max(1);
    if n > max_pairs {
        return Err(Error::InvalidConfig(format!(
            "density {} asks for {n} predicates but m = {m} admits only {max_pairs}",
            config.predicate_density
        )));
    }

    let noise = |rng: &mut dyn rand::RngCore, mean: &[f64]| -> Vec<f64> {
        mean.iter().map(|&mu| mu + rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let mut object_labels = Vec::with_capacity(m);
    let mut object_features = Vec::with_capacity(m);
    for _ in 0..m {
        let z = rng.random_range(0..config.v_o);
        object_labels.push(z);
        object_features.push(noise(rng, &means.objects[z]));
    }

    let all_pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let mut chosen = rand::seq::index::sample(rng, all_pairs.len(), n).into_vec();
    chosen.sort_unstable();

    let zipf = zipf_probs(config.v_p, config.zipf_exponent);
    let mut predicate_labels = Vec::with_capacity(n);
    let mut predicates = Vec::with_capacity(n);
    let mut object_edges = BTreeSet::new();
    for &pair_index in &chosen {
        let (subject, object) = all_pairs[pair_index];
        let z = draw_categorical(&zipf, rng);
        predicate_labels.push(z);
        predicates.push(PredicateDef {
            subject,
            object,
            features: noise(rng, &means.predicates[z]),
        });
        object_edges.insert((subject.min(object), subject.max(object)));
    }

    let mut global_mean = vec![0.0; config.d];
    for features in object_features.iter().chain(predicates.iter().map(|p| &p.features)) {
        for (g, &x) in global_mean.iter_mut().zip(features) {
            *g += x;
        }
    }
    let node_count = (m + n) as f64;
    for g in &mut global_mean {
        *g /= node_count;
    }
    let global_features = vec![global_mean; config.globals_per_instance];

    let instance = SceneGraphInstance::build(
        config.d,
        config.vocab(),
        object_features,
        predicates,
        object_edges.into_iter().collect(),
        global_features,
    )?;
    Ok(Sample { instance, labels: LabelAssignment::new(object_labels, predicate_labels) })
}

/// Feature model that scores nodes by their planted linear discriminant:
/// unary blocks hold the negated class means and half squared norms, pair
/// blocks are zero. With a positive margin its marginal argmax recovers the
/// planted labels.
pub fn oracle_model(config: &GeneratorConfig) -> Result<FeatureModel> {
    config.validate()?;
    let means = class_means(config);
    let arch = ModelArch::new(config.d, config.vocab(), vec![]);
    let mut model = FeatureModel::zeros(arch)?;
    let fill = |mlp: &mut crate::scoring::Mlp, means: &[Vec<f64>]| {
        let layer = &mut mlp.layers[0];
        for (c, mean) in means.iter().enumerate() {
            for (k, &mu) in mean.iter().enumerate() {
                layer.weight[c * layer.in_dim + k] = -mu;
            }
            layer.bias[c] = 0.5 * mean.iter().map(|x| x * x).sum::<f64>();
        }
    };
    fill(&mut model.h_o, &means.objects);
    fill(&mut model.h_p, &means.predicates);
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Body,
    Tail,
}

/// Frequency-threshold partition of the predicate vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub head: BTreeSet<usize>,
    pub body: BTreeSet<usize>,
    pub tail: BTreeSet<usize>,
    pub hi: u64,
    pub lo: u64,
}

impl GroupSplit {
    pub fn group_of(&self, category: usize) -> Group {
        if self.head.contains(&category) {
            Group::Head
        } else if self.body.contains(&category) {
            Group::Body
        } else {
            Group::Tail
        }
    }
}

/// Splits categories by training count: above `hi` is head, `lo..=hi` is
/// body, below `lo` is tail.
pub fn group_split(category_counts: &[u64], hi: u64, lo: u64) -> Result<GroupSplit> {
    if hi <= lo {
        return Err(Error::InvalidConfig(format!("hi = {hi} must exceed lo = {lo}")));
    }
    let mut split = GroupSplit {
        head: BTreeSet::new(),
        body: BTreeSet::new(),
        tail: BTreeSet::new(),
        hi,
        lo,
    };
    for (category, &count) in category_counts.iter().enumerate() {
        if count > hi {
            split.head.insert(category);
        } else if count < lo {
            split.tail.insert(category);
        } else {
            split.body.insert(category);
        }
    }
    Ok(split)
}

/// Bi-level resampling constants: repeat factor `t` for instance-level
/// over-sampling and drop rate for predicate-level under-sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub repeat_factor: f64,
    pub instance_drop_rate: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig { repeat_factor: 0.07, instance_drop_rate: 0.7 }
    }
}

impl ResampleConfig {
    fn validate(&self) -> Result<()> {
        if !self.repeat_factor.is_finite() || self.repeat_factor <= 0.0 {
            return Err(Error::InvalidConfig("repeat_factor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.instance_drop_rate) {
            return Err(Error::InvalidConfig("instance_drop_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Predicate label counts across a sample collection.
pub fn category_counts(samples: &[Sample], v_p: usize) -> Vec<u64> {
    let mut counts = vec![0u64; v_p];
    for sample in samples {
        for &z in &sample.labels.predicate_labels {
            counts[z] += 1;
        }
    }
    counts
}

/// Real-valued per-category repeat factors `max(1, t * sqrt(1 / f_c))`.
/// Categories with no occurrences keep the baseline factor 1.
pub fn category_repeat_factors(counts: &[u64], repeat_factor: f64) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            if c == 0 || total == 0 {
                1.0
            } else {
                let freq = c as f64 / total as f64;
                (repeat_factor * (1.0 / freq).sqrt()).max(1.0)
            }
        })
        .collect()
}

/// Instance-level over-sampling plan: instance `i` appears
/// `max(1, ceil(max_c t * sqrt(1 / f_c)))` times, maximized over the
/// categories it contains. Returned as a flat multiset in id order.
pub fn oversample_plan(samples: &[Sample], config: &ResampleConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let v_p = samples
        .iter()
        .map(|s| s.instance.vocab().v_p)
        .max()
        .ok_or_else(|| Error::InvalidConfig("empty dataset".into()))?;
    let counts = category_counts(samples, v_p);
    let total: u64 = counts.iter().sum();
    let mut plan = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let mut factor = 1.0f64;
        for &z in &sample.labels.predicate_labels {
            if counts[z] > 0 {
                let freq = counts[z] as f64 / total as f64;
                factor = factor.max(config.repeat_factor * (1.0 / freq).sqrt());
            }
        }
        let repeats = (factor.ceil() as usize).max(1);
        plan.extend(std::iter::repeat_n(i, repeats));
    }
    Ok(plan)
}

/// Per-category drop probabilities: `rate * (1 - r_c / max_r)` clamped to
/// [0, 1], where `r_c` are the real-valued repeat factors. Categories at the
/// maximum repeat factor are never dropped.
pub fn drop_probabilities(repeat_factors: &[f64], config: &ResampleConfig) -> Vec<f64> {
    let max_r = repeat_factors.iter().copied().fold(1.0, f64::max);
    repeat_factors
        .iter()
        .map(|&r| (config.instance_drop_rate * (1.0 - r / max_r)).clamp(0.0, 1.0))
        .collect()
}

/// Predicate-level under-sampling: drops each predicate independently with
/// its category's drop probability and rebuilds the instance with the
/// survivors renumbered. Objects and object edges are kept.
pub fn drop_instances(
    sample: &Sample,
    repeat_factors: &[f64],
    config: &ResampleConfig,
    rng: &mut impl Rng,
) -> Result<Sample> {
    config.validate()?;
    if sample.instance.num_predicates() == 0 {
        return Err(Error::InvalidConfig("instance has no predicates to drop".into()));
    }
    if repeat_factors.len() != sample.instance.vocab().v_p {
        return Err(Error::ShapeMismatch(format!(
            "{} repeat factors for v_p = {}",
            repeat_factors.len(),
            sample.instance.vocab().v_p
        )));
    }
    let probs = drop_probabilities(repeat_factors, config);
    let mut predicates = Vec::new();
    let mut labels = Vec::new();
    for j in 0..sample.instance.num_predicates() {
        let z = sample.labels.predicate_labels[j];
        if rng.random::<f64>() < probs[z] {
            continue;
        }
        let (subject, object) = sample.instance.predicate_endpoints(j)?;
        predicates.push(PredicateDef {
            subject,
            object,
            features: sample
                .instance
                .features(crate::factor_graph::NodeId::predicate(j))?
                .to_vec(),
        });
        labels.push(z);
    }
    let m = sample.instance.num_objects();
    let instance = SceneGraphInstance::build(
        sample.instance.feature_dim(),
        sample.instance.vocab(),
        (0..m)
            .map(|i| {
                sample
                    .instance
                    .features(crate::factor_graph::NodeId::object(i))
                    .map(|f| f.to_vec())
            })
            .collect::<Result<Vec<_>>>()?,
        predicates,
        sample.instance.object_edges().to_vec(),
        (0..sample.instance.num_globals())
            .map(|k| {
                sample
                    .instance
                    .features(crate::factor_graph::NodeId::global(k))
                    .map(|f| f.to_vec())
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok(Sample {
        instance,
        labels: LabelAssignment::new(sample.labels.object_labels.clone(), labels),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Eval,
}

/// Dataset manifest: generator echo, split assignment and train-split
/// category counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub generator: GeneratorConfig,
    pub split: Vec<SplitTag>,
    pub train_category_counts: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn split_samples(&self, tag: SplitTag) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.manifest.split)
            .filter(|(_, &t)| t == tag)
            .map(|(s, _)| s)
            .collect()
    }
}

/// Generates `count` instances on per-instance RNG streams and assigns the
/// trailing `eval_fraction` to the eval split.
pub fn generate_dataset(config: &GeneratorConfig, count: usize, eval_fraction: f64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidConfig("dataset count must be positive".into()));
    }
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::InvalidConfig("eval_fraction must lie in [0, 1)".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seeded_stream_rng(config.seed, i as u64);
        samples.push(sample_instance(config, &mut rng)?);
    }
    let eval_count = (count as f64 * eval_fraction).round() as usize;
    let train_count = count - eval_count;
    let split: Vec<SplitTag> = (0..count)
        .map(|i| if i < train_count { SplitTag::Train } else { SplitTag::Eval })
        .collect();
    let train: Vec<Sample> = samples
        .iter()
        .zip(&split)
        .filter(|(_, &t)| t == SplitTag::Train)
        .map(|(s, _)| s.clone())
        .collect();
    let manifest = Manifest {
        seed: config.seed,
        count,
        generator: config.clone(),
        split,
        train_category_counts: category_counts(&train, config.v_p),
    };
    Ok(Dataset { samples, manifest })
}

/// Writes `manifest.json` plus `instances/NNNNN.json` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let instances = dir.join("instances");
    fs::create_dir_all(&instances)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&dataset.manifest)?)?;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let text = instance_to_json(&sample.instance, Some(&sample.labels))?;
        fs::write(instances.join(format!("{i:05}.json")), text)?;
    }
    Ok(())
}

/// Loads and validates a dataset directory written by `save_dataset`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let path = dir.join("instances").join(format!("{i:05}.json"));
        let (instance, ground_truth) = instance_from_json(&fs::read_to_string(&path)?)?;
        let labels = ground_truth.ok_or_else(|| {
            Error::InvalidInstance(format!("{} carries no ground truth", path.display()))
        })?;
        samples.push(Sample { instance, labels });
    }
    if manifest.split.len() != samples.len() {
        return Err(Error::InvalidInstance("manifest split length mismatch".into()));
    }
    Ok(Dataset { samples, manifest })
}
