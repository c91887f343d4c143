//! Seeded synthetic corpora with planted task relatedness, their text
//! serialization, and gradient clustering for data selection.
//!
//! Two generators are provided:
//!
//! * [`gen_multitask_gaussian`]: binary Gaussian classification. Helpful
//!   source tasks share the target's separating direction; harmful ones use
//!   a rotated direction plus random relabeling.
//! * [`gen_noisy_addition`]: digit-wise addition of two numbers. Clean groups
//!   carry the true sum digits, noisy groups uniformly random digits.
//!
//! Every task draws from its own ChaCha stream, so the target task's data
//! does not depend on how many source tasks are generated.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::digest::{self, Digest};
use crate::linearize::GradientCache;
use crate::model::{dot, Sample};
use crate::{GradexError, Result, TaskId, TARGET_TASK};

pub const CORPUS_HEADER: &str = "gradex-corpus v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: TaskId,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TaskDataset {
    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(GradexError::EmptyData("task training split"));
        }
        if self
            .train
            .iter()
            .chain(&self.val)
            .any(|s| s.task_id != self.task_id)
        {
            return Err(GradexError::InvalidConfig(format!(
                "task {} holds samples of another task",
                self.task_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub n: usize,
    pub samples_per_task: usize,
    pub dim: usize,
    pub frac_helpful: f64,
    pub rotation_deg: f64,
    pub label_noise: f64,
    pub seed: u64,
    pub val_per_task: usize,
    pub target_train: usize,
    pub target_val: usize,
    /// Standard deviation of Gaussian noise added to every task's score
    /// before thresholding; keeps the classes overlapping.
    pub logit_noise: f64,
}

impl GaussianSpec {
    pub fn new(
        n: usize,
        samples_per_task: usize,
        dim: usize,
        frac_helpful: f64,
        rotation_deg: f64,
        label_noise: f64,
        seed: u64,
    ) -> Self {
        GaussianSpec {
            n,
            samples_per_task,
            dim,
            frac_helpful,
            rotation_deg,
            label_noise,
            seed,
            val_per_task: samples_per_task.div_ceil(4),
            target_train: samples_per_task,
            target_val: samples_per_task,
            logit_noise: 0.0,
        }
    }

    /// The default planted corpus: 12 sources, half helpful, a small target
    /// training split and a large target validation split.
    pub fn planted(seed: u64) -> Self {
        GaussianSpec {
            n: 12,
            samples_per_task: 100,
            dim: 10,
            frac_helpful: 0.5,
            rotation_deg: 90.0,
            label_noise: 0.2,
            seed,
            val_per_task: 25,
            target_train: 30,
            target_val: 300,
            logit_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditionSpec {
    pub n_groups: usize,
    pub n_clean: usize,
    pub digits: usize,
    pub samples_per_group: usize,
    pub seed: u64,
    pub val_per_group: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl AdditionSpec {
    /// Default noisy-addition corpus: 20 groups, 10 clean, two-digit operands.
    pub fn standard(seed: u64) -> Self {
        AdditionSpec::new(20, 10, 2, 300, seed)
    }

    pub fn new(n_groups: usize, n_clean: usize, digits: usize, samples_per_group: usize, seed: u64) -> Self {
        AdditionSpec {
            n_groups,
            n_clean,
            digits,
            samples_per_group,
            seed,
            val_per_group: samples_per_group.div_ceil(4),
            target_train: samples_per_group,
            target_val: samples_per_group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    MultitaskGaussian(GaussianSpec),
    NoisyAddition(AdditionSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub generator: Generator,
    /// Helpful sources (Gaussian) or clean groups (addition).
    pub helpful_tasks: Vec<TaskId>,
    /// Target separating direction (Gaussian only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tasks: Vec<TaskDataset>,
    pub target: TaskDataset,
    pub meta: CorpusMeta,
}

/// Where a sample lives inside a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Corpus {
    pub fn new(tasks: Vec<TaskDataset>, target: TaskDataset, meta: CorpusMeta) -> Result<Self> {
        if target.task_id != TARGET_TASK {
            return Err(GradexError::InvalidConfig("target must carry task id 0".into()));
        }
        target.validate()?;
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id as usize != i + 1 {
                return Err(GradexError::InvalidConfig(format!(
                    "source task at position {i} has id {} (expected {})",
                    t.task_id,
                    i + 1
                )));
            }
            t.validate()?;
        }
        Ok(Corpus { tasks, target, meta })
    }

    /// Number of source tasks `n`.
    pub fn n(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskDataset> {
        if id == TARGET_TASK {
            Some(&self.target)
        } else {
            self.tasks.get(id as usize - 1)
        }
    }

    pub fn source_ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.tasks.iter().map(|t| t.task_id)
    }

    pub fn is_helpful(&self, id: TaskId) -> bool {
        self.meta.helpful_tasks.contains(&id)
    }

    /// Checks that every id names a source task.
    pub fn check_subset(&self, subset: &BTreeSet<TaskId>) -> Result<()> {
        match subset.iter().find(|&&id| id == TARGET_TASK || id as usize > self.n()) {
            Some(&bad) => Err(GradexError::UnknownTask(bad)),
            None => Ok(()),
        }
    }

    /// All samples in a fixed order (target first, then sources by id; train
    /// before val). Positions in this order are the corpus-wide sample refs.
    pub fn indexed_samples(&self) -> impl Iterator<Item = (usize, Split, &Sample)> {
        std::iter::once(&self.target)
            .chain(&self.tasks)
            .flat_map(|t| {
                t.train
                    .iter()
                    .map(|s| (Split::Train, s))
                    .chain(t.val.iter().map(|s| (Split::Val, s)))
            })
            .enumerate()
            .map(|(i, (split, s))| (i, split, s))
    }

    pub fn input_dim(&self) -> usize {
        self.target.train[0].features.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CORPUS_HEADER);
        out.push('\n');
        out.push_str("meta ");
        out.push_str(&serde_json::to_string(&self.meta).expect("meta serializes"));
        out.push('\n');
        for (_, split, s) in self.indexed_samples() {
            write_record(&mut out, split, s);
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    /// Parses the text format. Blank lines and lines starting with `#` after
    /// the meta line are ignored.
    pub fn read_from(r: impl BufRead) -> Result<Corpus> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| GradexError::format("corpus", "empty file"))?;
        if header != CORPUS_HEADER {
            return Err(GradexError::format("corpus", format!("unsupported header {header:?}")));
        }
        let meta_line = lines
            .next()
            .transpose()?
            .ok_or_else(|| GradexError::format("corpus", "missing meta line"))?;
        let meta: CorpusMeta = meta_line
            .strip_prefix("meta ")
            .ok_or_else(|| GradexError::format("corpus", "second line must start with 'meta '"))
            .and_then(|json| {
                serde_json::from_str(json).map_err(|e| GradexError::format("corpus", e.to_string()))
            })?;
        let mut datasets: Vec<TaskDataset> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (split, sample) = parse_record(&line)
                .map_err(|msg| GradexError::format("corpus", format!("record {}: {msg}", lineno + 1)))?;
            let id = sample.task_id as usize;
            while datasets.len() <= id {
                datasets.push(TaskDataset {
                    task_id: datasets.len() as TaskId,
                    train: Vec::new(),
                    val: Vec::new(),
                });
            }
            match split {
                Split::Train => datasets[id].train.push(sample),
                Split::Val => datasets[id].val.push(sample),
            }
        }
        if datasets.is_empty() {
            return Err(GradexError::format("corpus", "no records"));
        }
        let target = datasets.remove(0);
        Corpus::new(datasets, target, meta)
    }

    pub fn digest(&self) -> Digest {
        digest::of_bytes(self.to_text().as_bytes())
    }
}

fn write_record(out: &mut String, split: Split, s: &Sample) {
    let split = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let positions = match &s.position_labels {
        Some(p) => p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        None => "-".to_string(),
    };
    let _ = write!(out, "{} {split} {} {positions} ", s.task_id, s.label);
    let one_hot = s.features.iter().all(|&v| v == 0.0 || v == 1.0);
    if one_hot {
        let _ = write!(out, "onehot:{}", s.features.len());
        for (i, _) in s.features.iter().enumerate().filter(|(_, &v)| v == 1.0) {
            let _ = write!(out, " {i}");
        }
    } else {
        out.push_str("dense");
        for v in &s.features {
            let _ = write!(out, " {v}");
        }
    }
    out.push('\n');
}

fn parse_record(line: &str) -> std::result::Result<(Split, Sample), String> {
    let mut fields = line.split(' ');
    let mut next = |what: &str| fields.next().ok_or_else(|| format!("missing {what}"));
    let task_id: TaskId = next("task id")?.parse().map_err(|e| format!("task id: {e}"))?;
    let split = match next("split")? {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return Err(format!("unknown split {other:?}")),
    };
    let label: usize = next("label")?.parse().map_err(|e| format!("label: {e}"))?;
    let positions = match next("position labels")? {
        "-" => None,
        list => Some(
            list.split(',')
                .map(|v| v.parse::<usize>().map_err(|e| format!("position label: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        ),
    };
    let encoding = next("feature encoding")?;
    let rest: Vec<&str> = fields.collect();
    let features = if encoding == "dense" {
        rest.iter()
            .map(|v| v.parse::<f64>().map_err(|e| format!("feature: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else if let Some(dim) = encoding.strip_prefix("onehot:") {
        let dim: usize = dim.parse().map_err(|e| format!("one-hot width: {e}"))?;
        let mut f = vec![0.0; dim];
        for idx in rest {
            let i: usize = idx.parse().map_err(|e| format!("one-hot index: {e}"))?;
            *f.get_mut(i).ok_or_else(|| format!("one-hot index {i} out of range"))? = 1.0;
        }
        f
    } else {
        return Err(format!("unknown feature encoding {encoding:?}"));
    };
    Ok((
        split,
        Sample {
            features,
            label,
            task_id,
            position_labels: positions,
        },
    ))
}

fn task_rng(seed: u64, task: TaskId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64 + 1);
    rng
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let norm = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn pick_planted(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<TaskId> {
    let mut ids: Vec<TaskId> = (1..=n as TaskId).collect();
    ids.shuffle(rng);
    let mut chosen = ids[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

pub fn gen_multitask_gaussian(spec: &GaussianSpec) -> Result<Corpus> {
    if spec.n < 2 || spec.dim < 2 {
        return Err(GradexError::InvalidConfig("need n >= 2 and dim >= 2".into()));
    }
    if spec.n > TaskId::MAX as usize {
        return Err(GradexError::InvalidConfig("too many tasks".into()));
    }
    for (name, v) in [("frac_helpful", spec.frac_helpful), ("label_noise", spec.label_noise)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(GradexError::InvalidConfig(format!("{name} must lie in [0, 1]")));
        }
    }
    if !(spec.logit_noise >= 0.0 && spec.rotation_deg.is_finite()) {
        return Err(GradexError::InvalidConfig("logit_noise must be >= 0 and rotation finite".into()));
    }
    if spec.samples_per_task == 0 || spec.target_train == 0 {
        return Err(GradexError::InvalidConfig("training splits must be nonempty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w0 = unit_gaussian(&mut rng, spec.dim);
    let mut w1 = unit_gaussian(&mut rng, spec.dim);
    let overlap = dot(&w0, &w1);
    w1.iter_mut().zip(&w0).for_each(|(a, b)| *a -= overlap * b);
    let n1 = dot(&w1, &w1).sqrt();
    w1.iter_mut().for_each(|a| *a /= n1);
    let theta = spec.rotation_deg.to_radians();
    let w_harm: Vec<f64> = w0
        .iter()
        .zip(&w1)
        .map(|(a, b)| theta.cos() * a + theta.sin() * b)
        .collect();
    let helpful_count = (spec.frac_helpful * spec.n as f64).round() as usize;
    let helpful = pick_planted(&mut rng, spec.n, helpful_count);

    let make = |task: TaskId, n_train: usize, n_val: usize| {
        let harmful = task != TARGET_TASK && !helpful.contains(&task);
        let w = if harmful { &w_harm } else { &w0 };
        let mut rng = task_rng(spec.seed, task);
        let mut draw = || {
            let x: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps: f64 = StandardNormal.sample(&mut rng);
            let mut label = usize::from(dot(w, &x) + spec.logit_noise * eps > 0.0);
            let relabel = rng.random::<f64>();
            let coin = rng.random::<bool>();
            if harmful && relabel < spec.label_noise {
                label = usize::from(coin);
            }
            Sample::new(x, label, task)
        };
        let train = (0..n_train).map(|_| draw()).collect();
        let val = (0..n_val).map(|_| draw()).collect();
        TaskDataset {
            task_id: task,
            train,
            val,
        }
    };

    let target = make(TARGET_TASK, spec.target_train, spec.target_val);
    let tasks = (1..=spec.n as TaskId)
        .map(|t| make(t, spec.samples_per_task, spec.val_per_task))
        .collect();
    Corpus::new(
        tasks,
        target,
        CorpusMeta {
            generator: Generator::MultitaskGaussian(spec.clone()),
            helpful_tasks: helpful,
            target_direction: w0,
        },
    )
}

/// Digits of `(a + b) mod 10^digits`, most significant first.
pub fn addition_digits(a: u64, b: u64, digits: usize) -> Vec<usize> {
    let modulus = 10u128.pow(digits as u32);
    let mut sum = (a as u128 + b as u128) % modulus;
    let mut out = vec![0; digits];
    for slot in out.iter_mut().rev() {
        *slot = (sum % 10) as usize;
        sum /= 10;
    }
    out
}

/// One-hot encoding of two `digits`-long operands: `20 * digits` features,
/// operand `a` in the first half, most significant digit first.
pub fn encode_operands(a: u64, b: u64, digits: usize) -> Vec<f64> {
    let mut features = vec![0.0; 20 * digits];
    for (operand, value) in [a, b].into_iter().enumerate() {
        let mut v = value;
        for pos in (0..digits).rev() {
            let digit = (v % 10) as usize;
            v /= 10;
            features[(operand * digits + pos) * 10 + digit] = 1.0;
        }
    }
    features
}

/// Inverse of [`encode_operands`].
pub fn decode_operands(features: &[f64], digits: usize) -> Option<(u64, u64)> {
    if features.len() != 20 * digits {
        return None;
    }
    let mut values = [0u64; 2];
    for (operand, value) in values.iter_mut().enumerate() {
        for pos in 0..digits {
            let block = &features[(operand * digits + pos) * 10..(operand * digits + pos + 1) * 10];
            let digit = block.iter().position(|&v| v == 1.0)?;
            *value = *value * 10 + digit as u64;
        }
    }
    Some((values[0], values[1]))
}

pub fn gen_noisy_addition(spec: &AdditionSpec) -> Result<Corpus> {
    if spec.digits < 1 {
        return Err(GradexError::InvalidConfig("digits must be at least 1".into()));
    }
    if spec.digits > 18 {
        return Err(GradexError::InvalidConfig("at most 18 digits are supported".into()));
    }
    if spec.n_clean > spec.n_groups || spec.n_groups == 0 {
        return Err(GradexError::InvalidConfig("need 0 < n_groups and n_clean <= n_groups".into()));
    }
    if spec.samples_per_group == 0 || spec.target_train == 0 {
        return Err(GradexError::InvalidConfig("training splits must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clean = pick_planted(&mut rng, spec.n_groups, spec.n_clean);
    let bound = 10u64.pow(spec.digits as u32);

    let make = |task: TaskId, n_train: usize, n_val: usize| {
        let noisy = task != TARGET_TASK && !clean.contains(&task);
        let mut rng = task_rng(spec.seed, task);
        let mut draw = || {
            let a = rng.random_range(0..bound);
            let b = rng.random_range(0..bound);
            let labels = if noisy {
                (0..spec.digits).map(|_| rng.random_range(0..10)).collect()
            } else {
                addition_digits(a, b, spec.digits)
            };
            Sample::generative(encode_operands(a, b, spec.digits), labels, task)
        };
        let train = (0..n_train).map(|_| draw()).collect();
        let val = (0..n_val).map(|_| draw()).collect();
        TaskDataset {
            task_id: task,
            train,
            val,
        }
    };

    let target = make(TARGET_TASK, spec.target_train, spec.target_val);
    let tasks = (1..=spec.n_groups as TaskId)
        .map(|t| make(t, spec.samples_per_group, spec.val_per_group))
        .collect();
    Corpus::new(
        tasks,
        target,
        CorpusMeta {
            generator: Generator::NoisyAddition(spec.clone()),
            helpful_tasks: clean,
            target_direction: Vec::new(),
        },
    )
}

/// Partition of the source-task training entries of a cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    /// Corpus sample refs of the clustered entries.
    pub sample_refs: Vec<usize>,
    /// Group in `0..n_groups` of each entry, aligned with `sample_refs`.
    pub group_of: Vec<usize>,
    pub n_groups: usize,
}

impl GroupAssignment {
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(c, center)| (c, sq_dist(point, center)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means over unit-normalized projected gradients of the source-task
/// training entries (cosine geometry), k-means++ seeded.
pub fn cluster_into_groups(cache: &GradientCache, n_groups: usize, seed: u64) -> Result<GroupAssignment> {
    let entries: Vec<_> = cache
        .entries()
        .iter()
        .filter(|e| e.task_id != TARGET_TASK)
        .collect();
    if entries.is_empty() {
        return Err(GradexError::EmptyData("gradient cache"));
    }
    if n_groups == 0 || n_groups > entries.len() {
        return Err(GradexError::InvalidConfig(format!(
            "n_groups must lie in 1..={} (got {n_groups})",
            entries.len()
        )));
    }
    let points: Vec<Vec<f64>> = entries
        .iter()
        .map(|e| {
            let norm = dot(&e.g_proj, &e.g_proj).sqrt();
            if norm > 0.0 {
                e.g_proj.iter().map(|v| v / norm).collect()
            } else {
                e.g_proj.clone()
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let mut chosen = vec![first];
    let mut centers: Vec<Vec<f64>> = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < n_groups {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            // All points coincide with a center; take the first unused one.
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        centers.push(points[pick].clone());
        for (w, p) in d2.iter_mut().zip(&points) {
            *w = w.min(sq_dist(p, centers.last().expect("just pushed")));
        }
    }

    let mut group_of: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..200 {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; n_groups];
        let mut counts = vec![0usize; n_groups];
        for (p, &g) in points.iter().zip(&group_of) {
            counts[g] += 1;
            sums[g].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for g in 0..n_groups {
            if counts[g] > 0 {
                centers[g] = sums[g].iter().map(|s| s / counts[g] as f64).collect();
            }
        }
        // Re-seed empty groups with the point farthest from its center.
        for g in 0..n_groups {
            if counts[g] == 0 {
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| counts[group_of[*i]] > 1)
                    .map(|(i, p)| (i, sq_dist(p, &centers[group_of[i]])))
                    .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                if far != usize::MAX {
                    counts[group_of[far]] -= 1;
                    group_of[far] = g;
                    counts[g] = 1;
                    centers[g] = points[far].clone();
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        let mut next_counts = vec![0usize; n_groups];
        next.iter().for_each(|&g| next_counts[g] += 1);
        if next == group_of || next_counts.contains(&0) {
            break;
        }
        group_of = next;
    }
    if group_of.iter().collect::<BTreeSet<_>>().len() != n_groups {
        return Err(GradexError::InvalidConfig(format!(
            "cannot form {n_groups} nonempty groups from {} distinct gradient directions",
            points.len()
        )));
    }
    Ok(GroupAssignment {
        sample_refs: entries.iter().map(|e| e.sample_ref).collect(),
        group_of,
        n_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::CacheEntry;
    use crate::project::ProjectorId;

    fn small_gaussian() -> GaussianSpec {
        GaussianSpec::new(6, 40, 4, 0.5, 90.0, 0.1, 7)
    }

    #[test]
    fn zero_rotation_no_noise_sources_follow_target_rule() {
        let corpus = gen_multitask_gaussian(&GaussianSpec::new(5, 50, 3, 0.4, 0.0, 0.0, 1)).unwrap();
        let w = &corpus.meta.target_direction;
        for t in corpus.tasks.iter().chain(std::iter::once(&corpus.target)) {
            for s in t.train.iter().chain(&t.val) {
                assert_eq!(s.label, usize::from(dot(w, &s.features) > 0.0));
            }
        }
    }

    #[test]
    fn half_turn_inverts_harmful_labels() {
        let corpus = gen_multitask_gaussian(&GaussianSpec::new(8, 50, 5, 0.5, 180.0, 0.0, 2)).unwrap();
        let w = &corpus.meta.target_direction;
        for t in &corpus.tasks {
            let helpful = corpus.is_helpful(t.task_id);
            for s in &t.train {
                let rule = usize::from(dot(w, &s.features) > 0.0);
                if helpful {
                    assert_eq!(s.label, rule);
                } else {
                    assert_eq!(s.label, 1 - rule);
                }
            }
        }
    }

    #[test]
    fn helpful_bookkeeping() {
        let corpus = gen_multitask_gaussian(&GaussianSpec::new(20, 10, 3, 0.5, 90.0, 0.2, 3)).unwrap();
        assert_eq!(corpus.meta.helpful_tasks.len(), 10);
        assert!(corpus.meta.helpful_tasks.iter().all(|&t| (1..=20).contains(&t)));
        let unique: BTreeSet<_> = corpus.meta.helpful_tasks.iter().collect();
        assert_eq!(unique.len(), 10);
    }

    #[test]
    fn invalid_fractions_rejected() {
        let mut spec = small_gaussian();
        spec.frac_helpful = 1.5;
        assert!(gen_multitask_gaussian(&spec).is_err());
        let mut spec = small_gaussian();
        spec.label_noise = -0.1;
        assert!(gen_multitask_gaussian(&spec).is_err());
        let mut spec = small_gaussian();
        spec.n = 1;
        assert!(gen_multitask_gaussian(&spec).is_err());
    }

    #[test]
    fn target_does_not_depend_on_source_count() {
        let a = gen_multitask_gaussian(&GaussianSpec::new(4, 10, 3, 0.5, 90.0, 0.2, 9)).unwrap();
        let b = gen_multitask_gaussian(&GaussianSpec::new(9, 10, 3, 0.5, 90.0, 0.2, 9)).unwrap();
        assert_eq!(a.target, b.target);
    }

    #[test]
    fn worked_addition_example() {
        assert_eq!(addition_digits(67013, 23924, 5), vec![9, 0, 9, 3, 7]);
        assert_eq!(addition_digits(0, 0, 5), vec![0; 5]);
        assert_eq!(addition_digits(99999, 1, 5), vec![0; 5]);
        let f = encode_operands(67013, 23924, 5);
        assert_eq!(f.len(), 100);
        assert_eq!(f.iter().sum::<f64>(), 10.0);
        assert_eq!(decode_operands(&f, 5), Some((67013, 23924)));
    }

    #[test]
    fn digits_must_be_positive() {
        assert!(gen_noisy_addition(&AdditionSpec::new(4, 2, 0, 10, 1)).is_err());
        assert!(gen_noisy_addition(&AdditionSpec::new(4, 5, 3, 10, 1)).is_err());
    }

    #[test]
    fn clean_groups_match_integer_oracle_and_noisy_ones_do_not() {
        let spec = AdditionSpec::new(20, 10, 5, 100, 4);
        let corpus = gen_noisy_addition(&spec).unwrap();
        assert_eq!(corpus.meta.helpful_tasks.len(), 10);
        let mut agree = 0usize;
        let mut total = 0usize;
        for t in std::iter::once(&corpus.target).chain(&corpus.tasks) {
            let clean = t.task_id == TARGET_TASK || corpus.is_helpful(t.task_id);
            for s in t.train.iter().chain(&t.val) {
                let (a, b) = decode_operands(&s.features, 5).unwrap();
                // Independent oracle: integer addition and decimal formatting.
                let sum = format!("{:05}", (a + b) % 100_000);
                let expect: Vec<usize> = sum.bytes().map(|c| (c - b'0') as usize).collect();
                let got = s.position_labels.as_ref().unwrap();
                if clean {
                    assert_eq!(got, &expect);
                } else {
                    agree += got.iter().zip(&expect).filter(|(x, y)| x == y).count();
                    total += 5;
                }
            }
        }
        let rate = agree as f64 / total as f64;
        let sigma = (0.1 * 0.9 / total as f64).sqrt();
        assert!((rate - 0.1).abs() < 3.0 * sigma, "noisy agreement {rate}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_multitask_gaussian(&small_gaussian()).unwrap();
        let b = gen_multitask_gaussian(&small_gaussian()).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = gen_noisy_addition(&AdditionSpec::new(4, 2, 3, 8, 5)).unwrap();
        let d = gen_noisy_addition(&AdditionSpec::new(4, 2, 3, 8, 5)).unwrap();
        assert_eq!(c.digest(), d.digest());
    }

    #[test]
    fn text_round_trip() {
        for corpus in [
            gen_multitask_gaussian(&small_gaussian()).unwrap(),
            gen_noisy_addition(&AdditionSpec::new(4, 2, 3, 8, 5)).unwrap(),
        ] {
            let text = corpus.to_text();
            let back = Corpus::read_from(text.as_bytes()).unwrap();
            assert_eq!(back, corpus);
        }
    }

    #[test]
    fn text_round_trip_preserves_digest() {
        let corpus = gen_multitask_gaussian(&GaussianSpec::new(3, 10, 6, 0.5, 90.0, 0.2, 4)).unwrap();
        let back = Corpus::read_from(corpus.to_text().as_bytes()).unwrap();
        assert_eq!(back.digest(), corpus.digest());
    }

    #[test]
    fn comment_lines_are_skipped() {
        let corpus = gen_multitask_gaussian(&small_gaussian()).unwrap();
        let text = corpus.to_text();
        let (head, rest) = text.split_at(text.find("\n0 ").unwrap() + 1);
        let annotated = format!("{head}# provenance line\n{rest}");
        assert_eq!(Corpus::read_from(annotated.as_bytes()).unwrap(), corpus);
    }

    #[test]
    fn malformed_corpus_rejected() {
        assert!(Corpus::read_from("nonsense\n".as_bytes()).is_err());
        let bad = format!("{CORPUS_HEADER}\nmeta {{}}\n");
        assert!(Corpus::read_from(bad.as_bytes()).is_err());
    }

    fn cache_from_points(points: &[Vec<f64>]) -> GradientCache {
        let entries = points
            .iter()
            .enumerate()
            .map(|(i, g)| CacheEntry {
                sample_ref: i,
                task_id: 1 + (i % 3) as TaskId,
                y_sign: 1,
                b: 0.0,
                g_proj: g.clone(),
            })
            .collect();
        let d = points[0].len();
        GradientCache::from_parts(
            entries,
            Vec::new(),
            ProjectorId {
                seed: 0,
                p: d,
                d,
                generator_version: crate::project::GENERATOR_VERSION,
            },
            [0; 32],
        )
        .unwrap()
    }

    #[test]
    fn planted_clusters_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let mut v: Vec<f64> = (0..6).map(|_| 0.05 * rng.random::<f64>()).collect();
            v[c * 3] += 1.0;
            points.push(v);
            truth.push(c);
        }
        let assign = cluster_into_groups(&cache_from_points(&points), 2, 3).unwrap();
        let flip = assign.group_of[0] != truth[0];
        for (g, t) in assign.group_of.iter().zip(&truth) {
            assert_eq!(*g, if flip { 1 - t } else { *t });
        }
    }

    #[test]
    fn as_many_groups_as_points_gives_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<Vec<f64>> = (0..9).map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let assign = cluster_into_groups(&cache_from_points(&points), 9, 0).unwrap();
        assert_eq!(assign.group_sizes(), vec![1; 9]);
    }

    #[test]
    fn duplicates_are_co_assigned() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let mut points = base.clone();
        points.extend(base.iter().cloned());
        let assign = cluster_into_groups(&cache_from_points(&points), 4, 1).unwrap();
        for i in 0..10 {
            assert_eq!(assign.group_of[i], assign.group_of[i + 10]);
        }
    }

    #[test]
    fn clustering_rejects_bad_group_counts() {
        let points = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cache = cache_from_points(&points);
        assert!(cluster_into_groups(&cache, 0, 0).is_err());
        assert!(cluster_into_groups(&cache, 3, 0).is_err());
    }
}
