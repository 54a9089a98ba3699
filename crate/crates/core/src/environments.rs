//! Environments, examples and the two synthetic generators.
//!
//! The translation generator builds environments that differ only by a shift of
//! the first coordinate. The descriptor generator builds structured
//! environments keyed by 16-bit codes, most of which own a single example.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CODE_BITS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Real(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Real(_) => None,
        }
    }
}

/// A structured environment id. Two descriptors are equal iff their codes are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Descriptor {
    pub code: u16,
}

impl Descriptor {
    pub fn new(code: u16) -> Self {
        Descriptor { code }
    }

    /// Integer key usable as a one-hot index.
    pub fn key(self) -> usize {
        self.code as usize
    }

    pub fn bits(self) -> [bool; CODE_BITS] {
        std::array::from_fn(|i| (self.code >> i) & 1 == 1)
    }

    /// The code as a `±1` row, bit 0 first.
    pub fn signs(self) -> [f64; CODE_BITS] {
        self.bits().map(|b| if b { 1.0 } else { -1.0 })
    }

    pub fn to_hex(self) -> String {
        format!("{:04x}", self.code)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        u16::from_str_radix(s, 16).map(Descriptor::new).map_err(|e| Error::Parse(format!("descriptor `{s}`: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Label,
    pub s: Option<Descriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub id: usize,
    pub examples: Vec<Example>,
}

impl Environment {
    pub fn new(id: usize, examples: Vec<Example>) -> Result<Self> {
        let first = examples.first().ok_or(Error::EmptyEnvironment(id))?;
        let dim = first.x.len();
        for ex in &examples {
            if ex.x.len() != dim {
                return Err(Error::Shape { op: "environment", shapes: format!("{} vs {dim}", ex.x.len()) });
            }
            if ex.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("non-finite feature in environment {id}")));
            }
        }
        Ok(Environment { id, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }

    pub fn has_descriptors(&self) -> bool {
        self.examples.iter().all(|e| e.s.is_some())
    }

    pub fn to_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        Batch::from_examples(&self.examples, &idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationConfig {
    pub n_train_envs: usize,
    /// One translation per train environment followed by the test translation.
    pub translations: Vec<f64>,
    pub n_per_env: usize,
    pub label_noise: f64,
    /// Correlation knob between X1 and the label, `0` leaves X1 independent of y.
    #[serde(default)]
    pub x1_label_shift: f64,
}

impl TranslationConfig {
    pub fn reference() -> Self {
        TranslationConfig { n_train_envs: 2, translations: vec![0.0, 3.0, 6.0], n_per_env: 2000, label_noise: 0.05, x1_label_shift: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub n_descriptors: usize,
    pub singleton_fraction: f64,
    pub spurious_strength: f64,
    pub dim_causal: usize,
    pub dim_spurious: usize,
    pub n_examples: usize,
    /// Mean separation of the causal block between the two classes.
    #[serde(default = "default_causal_strength")]
    pub causal_strength: f64,
    /// Permute descriptors among same-label training examples with this seed.
    #[serde(default)]
    pub permute_seed: Option<u64>,
}

fn default_causal_strength() -> f64 {
    1.0
}

impl DescriptorConfig {
    pub fn reference() -> Self {
        DescriptorConfig {
            n_descriptors: 800,
            singleton_fraction: 0.75,
            spurious_strength: 0.9,
            dim_causal: 8,
            dim_spurious: 16,
            n_examples: 2000,
            causal_strength: 1.0,
            permute_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Translation(TranslationConfig),
    Descriptor(DescriptorConfig),
    /// Loaded from a file or assembled by hand.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub seed: u64,
    pub config: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSet {
    pub train: Vec<Environment>,
    pub validation: Environment,
    pub test: Environment,
    pub task: Task,
    pub meta: GeneratorMeta,
}

impl EnvironmentSet {
    pub fn dim(&self) -> usize {
        self.validation.dim()
    }

    pub fn n_train_examples(&self) -> usize {
        self.train.iter().map(Environment::len).sum()
    }

    pub fn classes(&self) -> usize {
        match self.task {
            Task::Classification { classes } => classes,
            Task::Regression => 1,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Environments differing by a translation of the first coordinate.
///
/// Training environments share their base draws, so environment `k` is the
/// base sample shifted by `translations[k]`. Validation and test are fresh
/// samples; validation sits midway between the largest training shift and the
/// test shift.
pub fn gen_translation_envs(cfg: &TranslationConfig, seed: u64) -> Result<EnvironmentSet> {
    if cfg.n_train_envs < 2 {
        return Err(Error::Config("translation generator needs at least 2 train environments".into()));
    }
    if cfg.translations.len() != cfg.n_train_envs + 1 {
        return Err(Error::Config(format!(
            "expected {} translations (one per train env plus test), got {}",
            cfg.n_train_envs + 1,
            cfg.translations.len()
        )));
    }
    if !(0.0..0.5).contains(&cfg.label_noise) {
        return Err(Error::Config(format!("label_noise {} outside [0, 0.5)", cfg.label_noise)));
    }
    if !(0.0..=1.0).contains(&cfg.x1_label_shift.abs()) {
        return Err(Error::Config(format!("x1_label_shift {} outside [-1, 1]", cfg.x1_label_shift)));
    }
    if cfg.n_per_env == 0 {
        return Err(Error::Config("n_per_env must be positive".into()));
    }
    let (train_t, test_t) = cfg.translations.split_at(cfg.n_train_envs);
    let test_t = test_t[0];
    if train_t.iter().any(|&t| t == test_t) {
        return Err(Error::Config(format!("test translation {test_t} equals a train translation; no shift")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.x1_label_shift;
    let resid = (1.0 - s * s).sqrt();
    let base = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64, usize)> {
        (0..cfg.n_per_env)
            .map(|_| {
                let x2 = normal(rng);
                let mut y = usize::from(x2 > 0.0);
                if rng.random::<f64>() < cfg.label_noise {
                    y = 1 - y;
                }
                let x1 = s * (2.0 * y as f64 - 1.0) + resid * normal(rng);
                (x1, x2, y)
            })
            .collect()
    };
    let shifted = |draws: &[(f64, f64, usize)], t: f64| -> Vec<Example> {
        draws.iter().map(|&(x1, x2, y)| Example { x: vec![x1 + t, x2], y: Label::Class(y), s: None }).collect()
    };
    let shared = base(&mut rng);
    let mut train = Vec::with_capacity(cfg.n_train_envs);
    for (k, &t) in train_t.iter().enumerate() {
        train.push(Environment::new(k, shifted(&shared, t))?);
    }
    let max_train = train_t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let val_t = 0.5 * (max_train + test_t);
    let validation = Environment::new(cfg.n_train_envs, shifted(&base(&mut rng), val_t))?;
    let test = Environment::new(cfg.n_train_envs + 1, shifted(&base(&mut rng), test_t))?;
    Ok(EnvironmentSet {
        train,
        validation,
        test,
        task: Task::Classification { classes: 2 },
        meta: GeneratorMeta { seed, config: GeneratorConfig::Translation(cfg.clone()) },
    })
}

/// Sizes for `d` descriptors covering `n` examples with `round(frac·d)`
/// singletons; the rest follow a Zipf-like profile with at least two each.
fn descriptor_sizes(d: usize, n: usize, frac: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let singles = (frac * d as f64).round() as usize;
    let realized = singles as f64 / d as f64;
    if (realized - frac).abs() > 0.05 {
        return Err(Error::Config(format!("singleton fraction {frac} not reachable with {d} descriptors")));
    }
    let multi = d - singles;
    let rest = n - singles;
    if multi == 0 && rest > 0 {
        return Err(Error::Config(format!("{n} examples cannot all be singletons over {d} descriptors")));
    }
    if rest < 2 * multi {
        return Err(Error::Config(format!("{rest} examples too few for {multi} shared descriptors")));
    }
    let w: Vec<f64> = (1..=multi).map(|k| (k as f64).powf(-0.8)).collect();
    let total: f64 = w.iter().sum();
    let mut sizes: Vec<usize> = w.iter().map(|wk| ((wk / total * rest as f64).floor() as usize).max(2)).collect();
    let mut sum: usize = sizes.iter().sum();
    while sum < rest {
        sizes[rng.random_range(0..multi)] += 1;
        sum += 1;
    }
    while sum > rest {
        let i = rng.random_range(0..multi);
        if sizes[i] > 2 {
            sizes[i] -= 1;
            sum -= 1;
        }
    }
    sizes.extend(std::iter::repeat_n(1, singles));
    Ok(sizes)
}

/// Draw `count` distinct codes not in `used`.
fn fresh_codes(count: usize, used: &HashSet<u16>, rng: &mut ChaCha8Rng) -> Result<Vec<u16>> {
    if count + used.len() > 1 << CODE_BITS {
        return Err(Error::Config(format!("{count} fresh descriptor codes requested, code space exhausted")));
    }
    let mut out = Vec::with_capacity(count);
    let mut seen = used.clone();
    while out.len() < count {
        let c: u16 = rng.random();
        if seen.insert(c) {
            out.push(c);
        }
    }
    Ok(out)
}

struct DescriptorStreams {
    layout: ChaCha8Rng,
    labels: ChaCha8Rng,
    causal: ChaCha8Rng,
}

impl DescriptorStreams {
    fn new(seed: u64, part: u64) -> Self {
        let mk = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(part * 4 + stream);
            r
        };
        DescriptorStreams { layout: mk(0), labels: mk(1), causal: mk(2) }
    }
}

/// Fixed map from the `±1` code to the spurious block. With 16 spurious
/// dimensions it is the identity; otherwise a seeded random projection, which
/// stays injective on the code set with probability one.
fn spurious_map(dim: usize, seed: u64) -> Tensor {
    if dim == CODE_BITS {
        return Tensor::identity(CODE_BITS);
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 << 20);
    let data = (0..dim * CODE_BITS).map(|_| normal(&mut r) / (CODE_BITS as f64).sqrt()).collect();
    Tensor::from_vec(dim, CODE_BITS, data)
}

fn spurious_block(code: u16, map: &Tensor) -> Vec<f64> {
    let s = Descriptor::new(code).signs();
    (0..map.rows()).map(|r| crate::tensor::dot(map.row(r), &s)).collect()
}

/// The spurious attribute a descriptor carries: bit 0 of its code.
pub fn descriptor_affinity(s: Descriptor) -> usize {
    (s.code & 1) as usize
}

/// Examples for descriptors of the given sizes, in shuffled order.
fn descriptor_block(
    cfg: &DescriptorConfig,
    sizes: &[usize],
    codes: &[u16],
    rho: f64,
    streams: &mut DescriptorStreams,
    map: &Tensor,
) -> Vec<Example> {
    let mut owner = Vec::with_capacity(sizes.iter().sum());
    for (d, &n) in sizes.iter().enumerate() {
        owner.extend(std::iter::repeat_n(d, n));
    }
    owner.shuffle(&mut streams.layout);
    let agree_p = 0.5 * (1.0 + rho);
    let scale = cfg.causal_strength / (cfg.dim_causal.max(1) as f64).sqrt();
    let mut examples = Vec::with_capacity(owner.len());
    for &d in &owner {
        let aff = descriptor_affinity(Descriptor::new(codes[d]));
        let y = if streams.labels.random::<f64>() < agree_p { aff } else { 1 - aff };
        let sign = 2.0 * y as f64 - 1.0;
        let mut x: Vec<f64> = (0..cfg.dim_causal).map(|_| sign * scale + normal(&mut streams.causal)).collect();
        x.extend(spurious_block(codes[d], map));
        examples.push(Example { x, y: Label::Class(y), s: Some(Descriptor::new(codes[d])) });
    }
    examples
}

/// Structured environments: one training environment per descriptor.
///
/// Labels agree with the descriptor's spurious attribute with probability
/// `(1 + spurious_strength) / 2` in training and `1/2` in validation and test.
/// Validation and test use codes never seen in training, one example each.
/// Labels, causal features and layout come from separate random streams, so
/// permuting descriptors within a label class leaves the causal block intact.
pub fn gen_descriptor_envs(cfg: &DescriptorConfig, seed: u64) -> Result<EnvironmentSet> {
    if cfg.n_descriptors == 0 || cfg.n_descriptors > cfg.n_examples {
        return Err(Error::Config(format!("need 0 < n_descriptors ({}) <= n_examples ({})", cfg.n_descriptors, cfg.n_examples)));
    }
    if !(0.0..=1.0).contains(&cfg.singleton_fraction) || !(0.0..=1.0).contains(&cfg.spurious_strength) {
        return Err(Error::Config("singleton_fraction and spurious_strength must lie in [0, 1]".into()));
    }
    if cfg.dim_spurious == 0 {
        return Err(Error::Config("dim_spurious must be positive".into()));
    }
    let map = spurious_map(cfg.dim_spurious, seed);
    let mut streams = DescriptorStreams::new(seed, 0);
    let sizes = descriptor_sizes(cfg.n_descriptors, cfg.n_examples, cfg.singleton_fraction, &mut streams.layout)?;
    let codes = fresh_codes(cfg.n_descriptors, &HashSet::new(), &mut streams.layout)?;
    let mut examples = descriptor_block(cfg, &sizes, &codes, cfg.spurious_strength, &mut streams, &map);

    if let Some(pseed) = cfg.permute_seed {
        let mut prng = ChaCha8Rng::seed_from_u64(pseed);
        for class in 0..2 {
            let members: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].y == Label::Class(class)).collect();
            let mut shuffled: Vec<Option<Descriptor>> = members.iter().map(|&i| examples[i].s).collect();
            shuffled.shuffle(&mut prng);
            for (&i, s) in members.iter().zip(shuffled) {
                let s = s.expect("generated examples carry descriptors");
                let ex = &mut examples[i];
                ex.x.truncate(cfg.dim_causal);
                ex.x.extend(spurious_block(s.code, &map));
                ex.s = Some(s);
            }
        }
    }

    let mut by_desc: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_desc.entry(ex.s.map_or(0, |s| s.code)).or_default().push(i);
    }
    let mut train = Vec::with_capacity(cfg.n_descriptors);
    let mut order: Vec<usize> = (0..cfg.n_descriptors).collect();
    order.sort_by_key(|&d| codes[d]);
    for (id, d) in order.into_iter().enumerate() {
        let idx = by_desc.remove(&codes[d]).unwrap_or_default();
        let exs = idx.iter().map(|&i| examples[i].clone()).collect();
        train.push(Environment::new(id, exs)?);
    }

    let mut used: HashSet<u16> = codes.iter().copied().collect();
    let holdout = |part: u64, id: usize, used: &mut HashSet<u16>| -> Result<Environment> {
        let mut st = DescriptorStreams::new(seed, part);
        let fresh = fresh_codes(cfg.n_examples, used, &mut st.layout)?;
        used.extend(fresh.iter().copied());
        let ones = vec![1; cfg.n_examples];
        let exs = descriptor_block(cfg, &ones, &fresh, 0.0, &mut st, &map);
        Environment::new(id, exs)
    };
    let n = train.len();
    let validation = holdout(1, n, &mut used)?;
    let test = holdout(2, n + 1, &mut used)?;
    Ok(EnvironmentSet {
        train,
        validation,
        test,
        task: Task::Classification { classes: 2 },
        meta: GeneratorMeta { seed, config: GeneratorConfig::Descriptor(cfg.clone()) },
    })
}

/// Merge train environments into two: the larger half by size (ties by id)
/// becomes environment 0, the rest environment 1.
pub fn cluster_envs(envs: &EnvironmentSet) -> Result<EnvironmentSet> {
    if envs.train.len() < 2 {
        return Err(Error::Config("clustering needs at least 2 train environments".into()));
    }
    let mut order: Vec<&Environment> = envs.train.iter().collect();
    order.sort_by(|a, b| b.len().cmp(&a.len()).then(a.id.cmp(&b.id)));
    let cut = order.len().div_ceil(2);
    let merge = |id: usize, part: &[&Environment]| {
        let exs = part.iter().flat_map(|e| e.examples.iter().cloned()).collect();
        Environment::new(id, exs)
    };
    let mut out = envs.clone();
    out.train = vec![merge(0, &order[..cut])?, merge(1, &order[cut..])?];
    out.validation.id = 2;
    out.test.id = 3;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Class(Vec<usize>),
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Examples materialised as a feature matrix plus labels and descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Labels,
    pub descriptors: Option<Vec<Descriptor>>,
}

impl Batch {
    pub fn from_examples(examples: &[Example], idx: &[usize]) -> Batch {
        let dim = examples.first().map_or(0, |e| e.x.len());
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(&examples[i].x);
        }
        let labels = match examples.first().map(|e| e.y) {
            Some(Label::Real(_)) => Labels::Real(
                idx.iter()
                    .map(|&i| match examples[i].y {
                        Label::Real(v) => v,
                        Label::Class(c) => c as f64,
                    })
                    .collect(),
            ),
            _ => Labels::Class(idx.iter().map(|&i| examples[i].y.class().unwrap_or(0)).collect()),
        };
        let descriptors = idx.iter().map(|&i| examples[i].s).collect::<Option<Vec<_>>>();
        Batch { x: Tensor::from_vec(idx.len(), dim, data), labels, descriptors }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let labels = match &self.labels {
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
        };
        let descriptors = self.descriptors.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect());
        Batch { x: self.x.select_rows(idx), labels, descriptors }
    }

    /// Row-wise concatenation; descriptors survive only if every part has them.
    pub fn concat(parts: &[&Batch]) -> Batch {
        let xs: Vec<&Tensor> = parts.iter().map(|b| &b.x).collect();
        let labels = match parts.first().map(|b| &b.labels) {
            Some(Labels::Real(_)) => Labels::Real(
                parts
                    .iter()
                    .flat_map(|b| match &b.labels {
                        Labels::Real(v) => v.clone(),
                        Labels::Class(v) => v.iter().map(|&c| c as f64).collect(),
                    })
                    .collect(),
            ),
            _ => Labels::Class(
                parts
                    .iter()
                    .flat_map(|b| match &b.labels {
                        Labels::Class(v) => v.clone(),
                        Labels::Real(_) => Vec::new(),
                    })
                    .collect(),
            ),
        };
        let descriptors = parts.iter().map(|b| b.descriptors.clone()).collect::<Option<Vec<_>>>().map(|v| v.concat());
        Batch { x: Tensor::vstack(&xs), labels, descriptors }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    WithoutReplacement,
    WithReplacement,
}

/// Row indices drawn from each environment for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatches {
    pub per_env: Vec<Vec<usize>>,
}

impl Minibatches {
    /// `(environment, indices)` pairs making up `B_{-e}`.
    pub fn complement(&self, e: usize) -> Vec<(usize, &[usize])> {
        (0..self.per_env.len()).filter(|&k| k != e).map(|k| (k, self.per_env[k].as_slice())).collect()
    }

    pub fn complement_len(&self, e: usize) -> usize {
        self.complement(e).iter().map(|(_, v)| v.len()).sum()
    }
}

/// Draw one batch of `batch_size` rows per environment.
pub fn sample_minibatches<R: Rng>(env_sizes: &[usize], batch_size: usize, sampling: Sampling, rng: &mut R) -> Result<Minibatches> {
    let mut per_env = Vec::with_capacity(env_sizes.len());
    for (e, &n) in env_sizes.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyEnvironment(e));
        }
        let idx = match sampling {
            Sampling::WithReplacement => (0..batch_size).map(|_| rng.random_range(0..n)).collect(),
            Sampling::WithoutReplacement => {
                if batch_size > n {
                    return Err(Error::Config(format!(
                        "batch size {batch_size} exceeds environment {e} of size {n}; enable sampling with replacement"
                    )));
                }
                rand::seq::index::sample(rng, n, batch_size).into_vec()
            }
        };
        per_env.push(idx);
    }
    Ok(Minibatches { per_env })
}

const HEADER: &str = "#rgm-envs v1";

/// Write the line-delimited text format.
///
/// ```text
/// #rgm-envs v1 task=classification classes=2 dim=2 validation=2 test=3
/// #meta {"seed":7,"config":{...}}
/// <env_id> <label> <descriptor hex or -> <x_1> ... <x_dim>
/// ```
pub fn write_envs<W: Write>(envs: &EnvironmentSet, mut w: W) -> std::io::Result<()> {
    let task = match envs.task {
        Task::Classification { classes } => format!("task=classification classes={classes}"),
        Task::Regression => "task=regression".to_string(),
    };
    writeln!(w, "{HEADER} {task} dim={} validation={} test={}", envs.dim(), envs.validation.id, envs.test.id)?;
    writeln!(w, "#meta {}", serde_json::to_string(&envs.meta).map_err(std::io::Error::other)?)?;
    let mut line = String::new();
    for env in envs.train.iter().chain([&envs.validation, &envs.test]) {
        for ex in &env.examples {
            line.clear();
            let label = match ex.y {
                Label::Class(c) => c.to_string(),
                Label::Real(v) => format!("{v:?}"),
            };
            let desc = ex.s.map_or("-".to_string(), Descriptor::to_hex);
            write!(line, "{} {label} {desc}", env.id).unwrap();
            for v in &ex.x {
                write!(line, " {v:?}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    header
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Parse(format!("header missing `{key}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("bad {what} `{s}`")))
}

/// Read the format produced by [`write_envs`].
pub fn read_envs<R: BufRead>(r: R) -> Result<EnvironmentSet> {
    let mut lines = r.lines();
    let mut next = || lines.next().transpose().map_err(|e| Error::Parse(e.to_string()));
    let header = next()?.ok_or_else(|| Error::Parse("empty dataset".into()))?;
    if !header.starts_with(HEADER) {
        return Err(Error::Parse(format!("expected `{HEADER}` header")));
    }
    let task = match header_field(&header, "task")? {
        "classification" => Task::Classification { classes: parse_num(header_field(&header, "classes")?, "classes")? },
        "regression" => Task::Regression,
        other => return Err(Error::Parse(format!("unknown task `{other}`"))),
    };
    let dim: usize = parse_num(header_field(&header, "dim")?, "dim")?;
    let val_id: usize = parse_num(header_field(&header, "validation")?, "validation")?;
    let test_id: usize = parse_num(header_field(&header, "test")?, "test")?;
    let mut meta = GeneratorMeta { seed: 0, config: GeneratorConfig::External };
    let mut groups: BTreeMap<usize, Vec<Example>> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::new();
    let mut lineno = 1;
    while let Some(line) = next()? {
        lineno += 1;
        if let Some(m) = line.strip_prefix("#meta ") {
            meta = serde_json::from_str(m).map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 + dim {
            return Err(Error::Parse(format!("line {lineno}: expected {} fields, got {}", 3 + dim, f.len())));
        }
        let env: usize = parse_num(f[0], "env id")?;
        let y = match task {
            Task::Classification { .. } => Label::Class(parse_num(f[1], "label")?),
            Task::Regression => Label::Real(parse_num(f[1], "label")?),
        };
        let s = if f[2] == "-" { None } else { Some(Descriptor::from_hex(f[2])?) };
        let x = f[3..].iter().map(|v| parse_num(v, "feature")).collect::<Result<Vec<f64>>>()?;
        if !groups.contains_key(&env) {
            order.push(env);
        }
        groups.entry(env).or_default().push(Example { x, y, s });
    }
    let mut take = |id: usize| -> Result<Environment> {
        let exs = groups.remove(&id).ok_or_else(|| Error::Parse(format!("environment {id} has no examples")))?;
        Environment::new(id, exs)
    };
    let validation = take(val_id)?;
    let test = take(test_id)?;
    let train = order.into_iter().filter(|id| *id != val_id && *id != test_id).map(take).collect::<Result<Vec<_>>>()?;
    Ok(EnvironmentSet { train, validation, test, task, meta })
}
