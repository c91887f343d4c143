//! Subset selection: greedy forward selection, random ensembles scored by
//! per-task mean loss, and the clustered variant that first regroups samples.
//!
//! Every driver talks to an [`Evaluator`], which is either the gradient
//! estimator, the fine-tuning oracle, or a caller-supplied scoring function.

use std::fmt::{self, Write as _};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimate::{format_subset, Estimator};
use crate::linearize::GradientCache;
use crate::model::{ModelConfig, ParamVector};
use crate::taskgen::{cluster_into_groups, Corpus, GroupAssignment};
use crate::trainer::{true_f, TrainConfig};
use crate::{GradexError, Result, TaskId, TaskSet, TARGET_TASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Gradex,
    Oracle,
}

impl fmt::Display for EvaluatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvaluatorKind::Gradex => "gradex",
            EvaluatorKind::Oracle => "oracle",
        })
    }
}

/// Snapshot of an evaluator's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Subsets scored.
    pub calls: u64,
    /// Oracle fine-tuning runs (always 0 for the estimator).
    pub fine_tune_runs: u64,
    /// Sum of `|S|` over oracle runs: the unit in which forward-selection
    /// cost is usually quoted.
    pub task_units: u64,
    /// Training forward passes reported by the trainer.
    pub train_forward_passes: u64,
    /// Forward passes spent scoring (validation losses).
    pub eval_forward_passes: u64,
    /// Convex solves performed by the estimator.
    pub solves: u64,
}

#[derive(Default)]
struct Counters {
    calls: AtomicU64,
    fine_tune_runs: AtomicU64,
    task_units: AtomicU64,
    train_forward_passes: AtomicU64,
    eval_forward_passes: AtomicU64,
    solves: AtomicU64,
}

impl Counters {
    fn add(counter: &AtomicU64, v: u64) {
        counter.fetch_add(v, Ordering::Relaxed);
    }
}

type ScoreFn<'a> = dyn Fn(&TaskSet) -> Result<f64> + Send + Sync + 'a;

enum Backend<'a> {
    Gradex(Estimator<'a>),
    Oracle {
        model: &'a ModelConfig,
        theta0: &'a ParamVector,
        corpus: &'a Corpus,
        cfg: &'a TrainConfig,
    },
    Fixed(Box<ScoreFn<'a>>),
}

/// Scores subsets with `f` or its estimate, counting the work done.
pub struct Evaluator<'a> {
    kind: EvaluatorKind,
    n: usize,
    backend: Backend<'a>,
    counters: Counters,
}

impl<'a> Evaluator<'a> {
    pub fn gradex(estimator: Estimator<'a>) -> Self {
        let n = estimator.cache().source_tasks().into_iter().max().unwrap_or(0) as usize;
        Evaluator {
            kind: EvaluatorKind::Gradex,
            n,
            backend: Backend::Gradex(estimator),
            counters: Counters::default(),
        }
    }

    pub fn oracle(model: &'a ModelConfig, theta0: &'a ParamVector, corpus: &'a Corpus, cfg: &'a TrainConfig) -> Self {
        Evaluator {
            kind: EvaluatorKind::Oracle,
            n: corpus.n(),
            backend: Backend::Oracle {
                model,
                theta0,
                corpus,
                cfg,
            },
            counters: Counters::default(),
        }
    }

    /// Wraps a plain scoring function, reporting itself as `kind`.
    pub fn from_fn(kind: EvaluatorKind, n: usize, score: impl Fn(&TaskSet) -> Result<f64> + Send + Sync + 'a) -> Self {
        Evaluator {
            kind,
            n,
            backend: Backend::Fixed(Box::new(score)),
            counters: Counters::default(),
        }
    }

    pub fn kind(&self) -> EvaluatorKind {
        self.kind
    }

    /// Number of source tasks; ids run `1..=n`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn budget(&self) -> Budget {
        let c = &self.counters;
        Budget {
            calls: c.calls.load(Ordering::Relaxed),
            fine_tune_runs: c.fine_tune_runs.load(Ordering::Relaxed),
            task_units: c.task_units.load(Ordering::Relaxed),
            train_forward_passes: c.train_forward_passes.load(Ordering::Relaxed),
            eval_forward_passes: c.eval_forward_passes.load(Ordering::Relaxed),
            solves: c.solves.load(Ordering::Relaxed),
        }
    }

    /// `f(S)` or `f_hat(S)`.
    pub fn score(&self, subset: &TaskSet) -> Result<f64> {
        if let Some(&bad) = subset.iter().find(|&&t| t == TARGET_TASK || t as usize > self.n) {
            return Err(GradexError::UnknownTask(bad));
        }
        let c = &self.counters;
        Counters::add(&c.calls, 1);
        let value = match &self.backend {
            Backend::Gradex(est) => {
                let r = est.estimate(subset)?;
                Counters::add(&c.solves, 1);
                Counters::add(&c.eval_forward_passes, (est.target_val_len() * r.val_evaluations) as u64);
                r.f_hat
            }
            Backend::Oracle {
                model,
                theta0,
                corpus,
                cfg,
            } => {
                let out = true_f(model, theta0, subset, corpus, cfg)?;
                Counters::add(&c.fine_tune_runs, 1);
                Counters::add(&c.task_units, subset.len() as u64);
                Counters::add(&c.train_forward_passes, out.fit.forward_passes);
                Counters::add(&c.eval_forward_passes, out.fit.eval_passes);
                out.loss
            }
            Backend::Fixed(f) => f(subset)?,
        };
        if !value.is_finite() {
            return Err(GradexError::NonFinite("subset score"));
        }
        Ok(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    ForwardSelection,
    RandomEnsemble,
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMethod::ForwardSelection => "forward_selection",
            SelectionMethod::RandomEnsemble => "random_ensemble",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSubset {
    pub subset: TaskSet,
    pub score: f64,
}

/// One forward-selection round: every candidate tried and the one kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsRound {
    pub candidates: Vec<(TaskId, f64)>,
    pub added: Option<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub method: SelectionMethod,
    pub evaluator: EvaluatorKind,
    pub n: usize,
    pub chosen: TaskSet,
    /// FS: the accepted path starting at the empty set. RE: every scored subset.
    pub trajectory: Vec<ScoredSubset>,
    /// FS only.
    pub rounds: Vec<FsRound>,
    /// RE only: per-task mean score.
    pub t_scores: Option<Vec<f64>>,
    pub budget: Budget,
    /// Present when samples were regrouped before selection.
    pub group_sizes: Option<Vec<usize>>,
}

impl SelectionReport {
    /// Number of rounds in which candidates were evaluated.
    pub fn depth(&self) -> usize {
        self.rounds.len()
    }

    /// Human-readable summary, one `key: value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ids = |set: &TaskSet| format!("{{{}}}", format_subset(set).replace(';', ","));
        writeln!(s, "method: {}", self.method).unwrap();
        writeln!(s, "evaluator: {}", self.evaluator).unwrap();
        writeln!(s, "tasks: {}", self.n).unwrap();
        writeln!(s, "chosen: {}", ids(&self.chosen)).unwrap();
        if let Some(sizes) = &self.group_sizes {
            writeln!(s, "group_sizes: {sizes:?}").unwrap();
        }
        for (i, r) in self.rounds.iter().enumerate() {
            let cands: Vec<String> = r.candidates.iter().map(|(t, v)| format!("{t}:{v:.6}")).collect();
            let added = r.added.map_or("none".to_string(), |t| t.to_string());
            writeln!(s, "round {}: added={} candidates=[{}]", i + 1, added, cands.join(" ")).unwrap();
        }
        writeln!(s, "trajectory:").unwrap();
        for step in &self.trajectory {
            writeln!(s, "  {} {:.6}", ids(&step.subset), step.score).unwrap();
        }
        if let Some(t) = &self.t_scores {
            let vals: Vec<String> = t.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(s, "T: {}", vals.join(" ")).unwrap();
        }
        let b = &self.budget;
        writeln!(
            s,
            "budget: calls={} fine_tune_runs={} task_units={} train_forward_passes={} eval_forward_passes={} solves={}",
            b.calls, b.fine_tune_runs, b.task_units, b.train_forward_passes, b.eval_forward_passes, b.solves
        )
        .unwrap();
        s
    }
}

/// A selection that stopped because an evaluation failed.
#[derive(Debug)]
pub struct SelectionError {
    /// Everything completed before the failure.
    pub partial: Box<SelectionReport>,
    pub subset: TaskSet,
    pub source: GradexError,
}

impl fmt::Display for SelectionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "selection aborted while scoring {:?}: {}", self.subset, self.source)
    }
}

impl std::error::Error for SelectionError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<SelectionError> for GradexError {
    fn from(e: SelectionError) -> Self {
        GradexError::Evaluation {
            subset: e.subset.into_iter().collect(),
            source: Box::new(e.source),
        }
    }
}

fn empty_report(method: SelectionMethod, eval: &Evaluator<'_>) -> SelectionReport {
    SelectionReport {
        method,
        evaluator: eval.kind(),
        n: eval.n(),
        chosen: TaskSet::new(),
        trajectory: Vec::new(),
        rounds: Vec::new(),
        t_scores: None,
        budget: Budget::default(),
        group_sizes: None,
    }
}

/// Greedy forward selection from the empty set, adding the candidate with
/// the lowest score while it improves on the current subset's score.
pub fn forward_select(eval: &Evaluator<'_>) -> std::result::Result<SelectionReport, SelectionError> {
    forward_select_to_depth(eval, usize::MAX)
}

/// [`forward_select`] that evaluates at most `max_rounds` rounds.
pub fn forward_select_to_depth(
    eval: &Evaluator<'_>,
    max_rounds: usize,
) -> std::result::Result<SelectionReport, SelectionError> {
    let n = eval.n();
    let mut report = empty_report(SelectionMethod::ForwardSelection, eval);
    let abort = |report: &mut SelectionReport, subset: TaskSet, source: GradexError| SelectionError {
        partial: Box::new(SelectionReport {
            budget: eval.budget(),
            ..report.clone()
        }),
        subset,
        source,
    };
    if n == 0 {
        let e = GradexError::InvalidConfig("forward selection needs at least one source task".into());
        return Err(abort(&mut report, TaskSet::new(), e));
    }
    let mut current = TaskSet::new();
    let mut current_score = match eval.score(&current) {
        Ok(v) => v,
        Err(e) => return Err(abort(&mut report, current, e)),
    };
    report.trajectory.push(ScoredSubset {
        subset: current.clone(),
        score: current_score,
    });
    while current.len() < n && report.rounds.len() < max_rounds {
        let candidates: Vec<TaskId> = (1..=n as TaskId).filter(|t| !current.contains(t)).collect();
        let scored: Vec<(TaskId, Result<f64>)> = candidates
            .par_iter()
            .map(|&t| {
                let mut s = current.clone();
                s.insert(t);
                (t, eval.score(&s))
            })
            .collect();
        let mut round = FsRound {
            candidates: Vec::with_capacity(scored.len()),
            added: None,
        };
        for (t, r) in scored {
            match r {
                Ok(v) => round.candidates.push((t, v)),
                Err(e) => {
                    report.rounds.push(round);
                    let mut s = current.clone();
                    s.insert(t);
                    return Err(abort(&mut report, s, e));
                }
            }
        }
        // Candidates are in id order, so the first minimum has the smallest id.
        let best = round
            .candidates
            .iter()
            .copied()
            .fold(None::<(TaskId, f64)>, |acc, c| match acc {
                Some(a) if a.1 <= c.1 => Some(a),
                _ => Some(c),
            })
            .expect("at least one candidate");
        if best.1 < current_score {
            round.added = Some(best.0);
            current.insert(best.0);
            current_score = best.1;
            report.trajectory.push(ScoredSubset {
                subset: current.clone(),
                score: current_score,
            });
            report.rounds.push(round);
        } else {
            report.rounds.push(round);
            break;
        }
    }
    report.chosen = current;
    report.budget = eval.budget();
    Ok(report)
}

/// Settings for the random ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Number of subsets.
    pub m: usize,
    /// Subset size as a fraction of `n`, rounded.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            m: 1000,
            alpha: 0.75,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn subset_size(&self, n: usize) -> usize {
        ((self.alpha * n as f64).round() as usize).clamp(1, n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(GradexError::InvalidConfig(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if self.m == 0 {
            return Err(GradexError::InvalidConfig("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// The `m` subsets drawn by [`random_ensemble`]: each of size
/// `round(alpha n)` without repeated tasks, drawn independently.
pub fn ensemble_subsets(n: usize, cfg: &EnsembleConfig) -> Result<Vec<TaskSet>> {
    cfg.validate()?;
    if n == 0 {
        return Err(GradexError::InvalidConfig("random ensemble needs at least one source task".into()));
    }
    let k = cfg.subset_size(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.m)
        .map(|_| sample_indices(&mut rng, n, k).iter().map(|i| (i + 1) as TaskId).collect())
        .collect())
}

/// Scores `m` random subsets in parallel.
pub fn random_ensemble(
    eval: &Evaluator<'_>,
    cfg: &EnsembleConfig,
) -> std::result::Result<Vec<ScoredSubset>, SelectionError> {
    let fail = |subset: TaskSet, source: GradexError, done: Vec<ScoredSubset>| SelectionError {
        partial: Box::new(SelectionReport {
            trajectory: done,
            budget: eval.budget(),
            ..empty_report(SelectionMethod::RandomEnsemble, eval)
        }),
        subset,
        source,
    };
    let subsets = ensemble_subsets(eval.n(), cfg).map_err(|e| fail(TaskSet::new(), e, Vec::new()))?;
    let results: Vec<Result<f64>> = subsets.par_iter().map(|s| eval.score(s)).collect();
    let mut done = Vec::with_capacity(subsets.len());
    for (subset, r) in subsets.into_iter().zip(results) {
        match r {
            Ok(score) => done.push(ScoredSubset { subset, score }),
            Err(e) => return Err(fail(subset, e, done)),
        }
    }
    Ok(done)
}

/// `T_i`: mean score over the subsets containing task `i`, for `i = 1..=n`.
pub fn compute_t(scores: &[ScoredSubset], n: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for s in scores {
        for &t in &s.subset {
            let i = (t as usize).checked_sub(1).filter(|&i| i < n).ok_or(GradexError::UnknownTask(t))?;
            sum[i] += s.score;
            count[i] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .enumerate()
        .map(|(i, (&s, &c))| {
            if c == 0 {
                Err(GradexError::UncoveredTask((i + 1) as TaskId))
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    /// Keep tasks with `T_i < gamma`.
    Gamma(f64),
    /// Keep the `ceil(q n)` lowest-scoring tasks, ties to the smaller id.
    Fraction(f64),
}

pub fn threshold_select(t: &[f64], mode: Threshold) -> Result<TaskSet> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(GradexError::NonFinite("task scores"));
    }
    let ids = |idx: &mut dyn Iterator<Item = usize>| idx.map(|i| (i + 1) as TaskId).collect();
    match mode {
        Threshold::Gamma(gamma) => Ok(ids(&mut (0..t.len()).filter(|&i| t[i] < gamma))),
        Threshold::Fraction(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(GradexError::InvalidConfig(format!("fraction must be in (0, 1], got {q}")));
            }
            // Guard against q * n landing a hair above an integer.
            let keep = ((q * t.len() as f64) - 1e-9).ceil().max(0.0) as usize;
            let mut order: Vec<usize> = (0..t.len()).collect();
            order.sort_by(|&a, &b| t[a].total_cmp(&t[b]).then(a.cmp(&b)));
            Ok(ids(&mut order.into_iter().take(keep)))
        }
    }
}

/// Picks the fraction whose selection scores lowest under `validate`
/// (ties to the smaller fraction).
pub fn cross_validate_fraction(
    t: &[f64],
    grid: &[f64],
    validate: impl Fn(&TaskSet) -> Result<f64>,
) -> Result<(f64, TaskSet, f64)> {
    let mut best: Option<(f64, TaskSet, f64)> = None;
    for &q in grid {
        let chosen = threshold_select(t, Threshold::Fraction(q))?;
        let score = validate(&chosen)?;
        if best.as_ref().is_none_or(|b| score < b.2) {
            best = Some((q, chosen, score));
        }
    }
    best.ok_or_else(|| GradexError::InvalidConfig("fraction grid is empty".into()))
}

/// Random ensemble followed by `T` scoring and thresholding.
pub fn select_re(
    eval: &Evaluator<'_>,
    cfg: &EnsembleConfig,
    threshold: Threshold,
) -> std::result::Result<SelectionReport, SelectionError> {
    let scores = random_ensemble(eval, cfg)?;
    let mut report = empty_report(SelectionMethod::RandomEnsemble, eval);
    let finish = |report: &mut SelectionReport| -> Result<()> {
        let t = compute_t(&scores, eval.n())?;
        report.chosen = threshold_select(&t, threshold)?;
        report.t_scores = Some(t);
        Ok(())
    };
    let outcome = finish(&mut report);
    report.trajectory = scores;
    report.budget = eval.budget();
    match outcome {
        Ok(()) => Ok(report),
        Err(source) => Err(SelectionError {
            partial: Box::new(report),
            subset: TaskSet::new(),
            source,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum Downstream {
    Fs,
    Re {
        m: usize,
        alpha: f64,
        seed: u64,
        threshold: Threshold,
    },
}

/// Clusters the cached source samples into `n_groups`, treats each group as
/// a task and runs the downstream selector with the estimator.
pub fn select_ds(
    estimator: &Estimator<'_>,
    n_groups: usize,
    cluster_seed: u64,
    downstream: Downstream,
) -> Result<(SelectionReport, GroupAssignment)> {
    let groups = cluster_into_groups(estimator.cache(), n_groups, cluster_seed)?;
    let regrouped = regroup_cache(estimator.cache(), &groups)?;
    let est = estimator.with_cache(&regrouped);
    let eval = Evaluator::gradex(est);
    let mut report = match downstream {
        Downstream::Fs => forward_select(&eval)?,
        Downstream::Re {
            m,
            alpha,
            seed,
            threshold,
        } => select_re(&eval, &EnsembleConfig { m, alpha, seed }, threshold)?,
    };
    report.n = n_groups;
    report.group_sizes = Some(groups.group_sizes());
    Ok((report, groups))
}

/// Source entries take task id `group + 1`; target entries keep id 0.
pub fn regroup_cache(cache: &GradientCache, groups: &GroupAssignment) -> Result<GradientCache> {
    let mut by_ref = std::collections::HashMap::with_capacity(groups.sample_refs.len());
    for (r, g) in groups.sample_refs.iter().zip(&groups.group_of) {
        by_ref.insert(*r, *g);
    }
    cache.relabeled(|e| {
        if e.task_id == TARGET_TASK {
            TARGET_TASK
        } else {
            by_ref.get(&e.sample_ref).map_or(e.task_id, |&g| (g + 1) as TaskId)
        }
    })
}
