//! One function per pipeline stage. Each reads its declared inputs from the
//! run directory, checks their provenance against the active config and
//! writes its outputs atomically.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use gradex::bench::{
    exp_addition, exp_relerr, exp_rrss, exp_speedup, exp_structure, random_subsets, AdditionSettings, ExperimentReport,
    RelErrSettings, RrssSettings, Workbench,
};
use gradex::digest::{of_bytes, to_hex, Digest};
use gradex::estimate::{write_estimates_csv, Estimator};
use gradex::linearize::{build_cache, GradientCache};
use gradex::model::{init_params, ParamVector};
use gradex::project::Projector;
use gradex::select::{
    cross_validate_fraction, forward_select, select_ds, select_re, Downstream, EnsembleConfig, Evaluator,
    SelectionReport, Threshold,
};
use gradex::taskgen::{Corpus, Generator};
use gradex::trainer::{meta_train, Checkpoint};
use gradex::{TaskId, TaskSet};

use crate::config::{generate, EvaluatorChoice, Method, RunConfig, ThresholdMode};
use crate::rundir::{
    Provenance, RunDir, BENCH_DIR, CACHE_FILE, CHECKPOINT_FILE, CONFIG_FILE, CORPUS_FILE, ESTIMATES_FILE,
    META_SUMMARY_FILE, REPORT_FILE,
};

const CORPUS_SECTIONS: &[&str] = &["corpus"];
const CHECKPOINT_SECTIONS: &[&str] = &["corpus", "model", "meta_train"];
const CACHE_SECTIONS: &[&str] = &["corpus", "model", "meta_train", "projector"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    Rrss,
    Relerr,
    Speedup,
    Addition,
    Structure,
    /// Every experiment that applies to the corpus.
    All,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Rrss => "rrss",
            Experiment::Relerr => "relerr",
            Experiment::Speedup => "speedup",
            Experiment::Addition => "addition",
            Experiment::Structure => "structure",
            Experiment::All => "all",
        }
    }
}

/// Inputs every downstream stage needs, loaded and cross-checked.
struct Loaded {
    corpus: Corpus,
    checkpoint: Checkpoint,
}

fn write_config(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    run.write_atomic(CONFIG_FILE, cfg.to_toml().as_bytes())
}

fn load_corpus(run: &RunDir, cfg: &RunConfig) -> Result<Corpus> {
    let path = run.require(CORPUS_FILE, "gen")?;
    let prov = Provenance::read(&path)?;
    if prov.get_digest("corpus_config") != Some(cfg.sections_digest(CORPUS_SECTIONS)) {
        bail!("{CORPUS_FILE} was generated from a different [corpus] config: run `gradex gen` first");
    }
    let f = std::fs::File::open(&path)?;
    Corpus::read_from(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(run: &RunDir, cfg: &RunConfig) -> Result<Loaded> {
    let corpus = load_corpus(run, cfg)?;
    let path = run.require(CHECKPOINT_FILE, "meta-train")?;
    let checkpoint = Checkpoint::read_from(std::fs::File::open(&path)?).context("reading checkpoint")?;
    if checkpoint.corpus_digest != corpus.digest() {
        bail!("digest mismatch: {CHECKPOINT_FILE} was trained on a different corpus; run `gradex meta-train` first");
    }
    if checkpoint.config_digest != cfg.sections_digest(CHECKPOINT_SECTIONS) {
        bail!("{CHECKPOINT_FILE} was trained under a different [model] or [meta_train] config: run `gradex meta-train` first");
    }
    Ok(Loaded { corpus, checkpoint })
}

fn load_cache(run: &RunDir, cfg: &RunConfig, theta_star: &ParamVector) -> Result<GradientCache> {
    let path = run.require(CACHE_FILE, "cache")?;
    let cache = GradientCache::read_from(std::fs::File::open(&path)?).context("reading cache")?;
    if cache.theta_star_digest() != theta_star.digest() {
        bail!("digest mismatch between {CACHE_FILE} and {CHECKPOINT_FILE}: refusing a stale cache; run `gradex cache` first");
    }
    if cache.config_digest() != cfg.sections_digest(CACHE_SECTIONS) {
        bail!("{CACHE_FILE} was built under a different [projector] config: run `gradex cache` first");
    }
    Ok(cache)
}

pub fn gen(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let corpus = generate(&cfg.corpus)?;
    let text = corpus.to_text();
    let prov = Provenance::new()
        .digest("config", &cfg.digest())
        .digest("corpus_config", &cfg.sections_digest(CORPUS_SECTIONS))
        .digest("corpus", &corpus.digest());
    // Comments go after the header and meta lines.
    let split = text.match_indices('\n').nth(1).map(|(i, _)| i + 1).expect("header and meta lines");
    let out = format!("{}{}{}", &text[..split], prov.render(), &text[split..]);
    run.write_atomic(CORPUS_FILE, out.as_bytes())?;
    write_config(run, cfg)?;
    eprintln!(
        "gen: {} source tasks, {} target train / {} target val samples -> {}",
        corpus.n(),
        corpus.target.train.len(),
        corpus.target.val.len(),
        run.path(CORPUS_FILE).display()
    );
    Ok(())
}

pub fn meta_train_stage(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(run, cfg)?;
    if cfg.model.input_dim != corpus.input_dim() {
        bail!("model.input_dim is {} but the corpus has {} features", cfg.model.input_dim, corpus.input_dim());
    }
    let init = init_params(&cfg.model)?;
    let fit = meta_train(&cfg.model, &init, &corpus, &cfg.meta_train)?;
    let checkpoint = Checkpoint {
        params: fit.params.clone(),
        config_digest: cfg.sections_digest(CHECKPOINT_SECTIONS),
        corpus_digest: corpus.digest(),
    };
    let mut bytes = Vec::new();
    checkpoint.write_to(&mut bytes)?;
    let target_val = gradex::trainer::eval_loss(&cfg.model, &fit.params, &corpus.target.val)?;

    let mut summary = Provenance::new()
        .digest("config", &cfg.digest())
        .digest("corpus", &corpus.digest())
        .digest("checkpoint", &of_bytes(&bytes))
        .render();
    writeln!(summary, "parameters: {}", fit.params.len())?;
    writeln!(summary, "epochs_run: {}", fit.epochs_run)?;
    writeln!(summary, "best_epoch: {}", fit.best_epoch)?;
    writeln!(summary, "train_loss: {}", fit.final_train_loss)?;
    writeln!(summary, "target_val_loss: {target_val}")?;
    writeln!(summary, "train_forward_passes: {}", fit.forward_passes)?;
    writeln!(summary, "eval_forward_passes: {}", fit.eval_passes)?;

    run.write_atomic(CHECKPOINT_FILE, &bytes)?;
    run.write_atomic(META_SUMMARY_FILE, summary.as_bytes())?;
    write_config(run, cfg)?;
    eprintln!(
        "meta-train: {} parameters, {} epochs (best {}), target val loss {target_val:.4}",
        fit.params.len(),
        fit.epochs_run,
        fit.best_epoch
    );
    Ok(())
}

pub fn cache(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let Loaded { corpus, checkpoint } = load_checkpoint(run, cfg)?;
    let projector = Projector::gaussian(cfg.model.param_count(), cfg.projector.d, cfg.projector.seed)?;
    let cache = build_cache(&cfg.model, &checkpoint.params, &corpus, &projector)?
        .with_config_digest(cfg.sections_digest(CACHE_SECTIONS));
    let mut bytes = Vec::new();
    cache.write_to(&mut bytes)?;
    run.write_atomic(CACHE_FILE, &bytes)?;
    write_config(run, cfg)?;
    eprintln!(
        "cache: {} training entries, d = {} (p = {})",
        cache.entries().len(),
        cache.d(),
        cache.p()
    );
    Ok(())
}

/// Parses `1,2,3` or `1;2;3`.
pub fn parse_subset(text: &str) -> Result<TaskSet> {
    text.split([',', ';'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<TaskId>().with_context(|| format!("invalid task id `{s}`")))
        .collect()
}

pub fn estimate(run: &RunDir, cfg: &RunConfig, subsets: &[String], random: Option<usize>) -> Result<()> {
    let Loaded { corpus, checkpoint } = load_checkpoint(run, cfg)?;
    let cache = load_cache(run, cfg, &checkpoint.params)?;
    let mut sets = subsets.iter().map(|s| parse_subset(s)).collect::<Result<Vec<_>>>()?;
    if let Some(m) = random {
        sets.extend(random_subsets(corpus.n(), m, cfg.selection.seed));
    }
    if sets.is_empty() {
        bail!("no subsets given: pass --subset IDS or --random N");
    }
    for s in &sets {
        if s.is_empty() {
            bail!("empty subset");
        }
        corpus.check_subset(s)?;
    }
    let projector = Projector::from_id(&cache.projector_id())?;
    let est = Estimator::new(&cfg.model, &checkpoint.params, &projector, &cache, &corpus.target.val, &cfg.estimator)?;
    let results = est.estimate_many(&sets)?;

    let mut out = Provenance::new()
        .digest("config", &cfg.digest())
        .digest("checkpoint", &checkpoint.params.digest())
        .digest("cache", &cache.digest())
        .render()
        .into_bytes();
    write_estimates_csv(&mut out, &results, true)?;
    run.write_atomic(ESTIMATES_FILE, &out)?;
    write_config(run, cfg)?;
    eprintln!("estimate: {} subsets -> {}", results.len(), run.path(ESTIMATES_FILE).display());
    Ok(())
}

fn ensemble(cfg: &RunConfig) -> EnsembleConfig {
    EnsembleConfig {
        m: cfg.selection.m,
        alpha: cfg.selection.alpha,
        seed: cfg.selection.seed,
    }
}

/// Runs the random ensemble and applies the configured threshold. Returns
/// the report and a description of the threshold used.
fn run_re(eval: &Evaluator<'_>, cfg: &RunConfig) -> Result<(SelectionReport, String)> {
    let s = &cfg.selection;
    match s.threshold {
        ThresholdMode::Fraction => Ok((select_re(eval, &ensemble(cfg), Threshold::Fraction(s.fraction))?, format!("fraction {}", s.fraction))),
        ThresholdMode::Gamma => Ok((select_re(eval, &ensemble(cfg), Threshold::Gamma(s.gamma))?, format!("gamma {}", s.gamma))),
        ThresholdMode::Cv => {
            let mut report = select_re(eval, &ensemble(cfg), Threshold::Fraction(s.fraction_grid[0]))?;
            let t = report.t_scores.clone().expect("ensemble reports carry T");
            let (q, chosen, score) = cross_validate_fraction(&t, &s.fraction_grid, |set| eval.score(set))?;
            report.chosen = chosen;
            report.budget = eval.budget();
            Ok((report, format!("cross-validated fraction {q} (estimated loss {score})")))
        }
    }
}

pub fn select(run: &RunDir, cfg: &RunConfig, method: Method) -> Result<()> {
    let Loaded { corpus, checkpoint } = load_checkpoint(run, cfg)?;
    let theta = &checkpoint.params;
    let cache = load_cache(run, cfg, theta)?;
    let projector = Projector::from_id(&cache.projector_id())?;
    let est = Estimator::new(&cfg.model, theta, &projector, &cache, &corpus.target.val, &cfg.estimator)?;
    let eval = match cfg.selection.evaluator {
        EvaluatorChoice::Gradex => Evaluator::gradex(est),
        EvaluatorChoice::Oracle => Evaluator::oracle(&cfg.model, theta, &corpus, &cfg.fine_tune),
    };

    let (report, threshold) = match method {
        Method::Fs => (forward_select(&eval)?, "none (stops when no candidate improves)".to_string()),
        Method::Re => run_re(&eval, cfg)?,
        Method::Ds => {
            if cfg.selection.evaluator == EvaluatorChoice::Oracle {
                bail!("selection.evaluator = \"oracle\" is not available for ds (groups exist only in the cache)");
            }
            let s = &cfg.selection;
            let (downstream, threshold) = match s.downstream {
                Method::Re => {
                    let (threshold, label) = match s.threshold {
                        ThresholdMode::Fraction => (Threshold::Fraction(s.fraction), format!("fraction {}", s.fraction)),
                        ThresholdMode::Gamma => (Threshold::Gamma(s.gamma), format!("gamma {}", s.gamma)),
                        ThresholdMode::Cv => bail!("ds with re downstream needs selection.threshold = \"fraction\" or \"gamma\""),
                    };
                    let e = ensemble(cfg);
                    (
                        Downstream::Re {
                            m: e.m,
                            alpha: e.alpha,
                            seed: e.seed,
                            threshold,
                        },
                        label,
                    )
                }
                _ => (Downstream::Fs, "none (stops when no candidate improves)".to_string()),
            };
            let (report, _) = select_ds(&est, s.groups, s.cluster_seed, downstream)?;
            (report, threshold)
        }
    };

    let name = match method {
        Method::Fs => "fs",
        Method::Re => "re",
        Method::Ds => "ds",
    };
    let mut text = Provenance::new()
        .digest("config", &cfg.digest())
        .digest("checkpoint", &theta.digest())
        .digest("cache", &cache.digest())
        .render();
    writeln!(text, "threshold: {threshold}")?;
    text.push_str(&report.to_text());
    let file = RunDir::selection_file(name);
    run.write_atomic(&file, text.as_bytes())?;
    write_config(run, cfg)?;
    eprintln!(
        "select {name}: chose {:?} with {} evaluator calls -> {}",
        report.chosen,
        report.budget.calls,
        run.path(&file).display()
    );
    Ok(())
}

fn write_experiment(run: &RunDir, cfg: &RunConfig, upstream: &[(&str, Digest)], report: &ExperimentReport) -> Result<()> {
    let mut prov = Provenance::new().digest("config", &cfg.digest());
    for (k, d) in upstream {
        prov = prov.digest(k, d);
    }
    let header = prov.render();
    let base = format!("{BENCH_DIR}/{}", report.name);
    run.write_atomic(&format!("{base}.txt"), format!("{header}{}", report.summary()).as_bytes())?;
    for table in &report.tables {
        run.write_atomic(&format!("{base}_{}.csv", table.name), format!("{header}{}", table.to_csv()).as_bytes())?;
    }
    run.write_atomic(&format!("{base}.timings.csv"), report.timings_csv().as_bytes())?;
    eprintln!("bench {}: wrote {base}.txt", report.name);
    Ok(())
}

pub fn bench(run: &RunDir, cfg: &RunConfig, experiment: Experiment) -> Result<()> {
    let Loaded { corpus, checkpoint } = load_checkpoint(run, cfg)?;
    let is_addition = matches!(corpus.meta.generator, Generator::NoisyAddition(_));
    let wanted: Vec<Experiment> = match experiment {
        Experiment::All => {
            let mut all = vec![Experiment::Rrss, Experiment::Relerr, Experiment::Speedup, Experiment::Structure];
            if is_addition {
                all.push(Experiment::Addition);
            }
            all
        }
        Experiment::Addition if !is_addition => bail!("the addition experiment needs a noisy-addition corpus (gen --preset addition)"),
        e => vec![e],
    };
    // Structure probes use the cached estimator, so check the cache before
    // spending time on the other experiments.
    let cache = if wanted.contains(&Experiment::Structure) {
        Some(load_cache(run, cfg, &checkpoint.params)?)
    } else {
        None
    };
    let upstream = [("corpus", corpus.digest()), ("checkpoint", checkpoint.params.digest())];
    let wb = Workbench::new(cfg.model.clone(), corpus, checkpoint.params, None);
    let b = &cfg.bench;
    for exp in wanted {
        let report = match exp {
            Experiment::Rrss => exp_rrss(
                &wb,
                &RrssSettings {
                    distances: b.rrss_distances.clone(),
                    n_directions: b.rrss_directions,
                    endpoint_subsets: b.rrss_endpoint_subsets,
                    seed: b.seed,
                },
                &cfg.fine_tune,
            )?,
            Experiment::Relerr => exp_relerr(
                &wb,
                &RelErrSettings {
                    subsets: b.relerr_subsets,
                    subset_seed: b.seed,
                    dims: b.relerr_dims.clone(),
                    projector_seed: cfg.projector.seed,
                    solve: cfg.estimator.clone(),
                },
                &cfg.fine_tune,
            )?,
            Experiment::Speedup => {
                exp_speedup(&wb, &cfg.fine_tune, cfg.projector.seed, &cfg.estimator, b.speedup_formula_n)?.0
            }
            Experiment::Addition => exp_addition(
                &wb,
                &AdditionSettings {
                    ensemble: EnsembleConfig {
                        m: b.addition_m,
                        ..ensemble(cfg)
                    },
                    projector_seed: cfg.projector.seed,
                    d: cfg.projector.d,
                    solve: cfg.estimator.clone(),
                },
            )?,
            Experiment::Structure => {
                let cache = cache.as_ref().expect("loaded above");
                let projector = Projector::from_id(&cache.projector_id())?;
                let est =
                    Estimator::new(&wb.model, &wb.theta_star, &projector, cache, &wb.corpus.target.val, &cfg.estimator)?;
                let eval = match cfg.selection.evaluator {
                    EvaluatorChoice::Gradex => Evaluator::gradex(est),
                    EvaluatorChoice::Oracle => Evaluator::oracle(&wb.model, &wb.theta_star, &wb.corpus, &cfg.fine_tune),
                };
                exp_structure(&eval, &wb.corpus)?
            }
            Experiment::All => unreachable!("expanded above"),
        };
        write_experiment(run, cfg, &upstream, &report)?;
    }
    write_config(run, cfg)?;
    eprintln!("bench {}: done", experiment.name());
    Ok(())
}

const REPORTED: &[&str] = &[CONFIG_FILE, CORPUS_FILE, CHECKPOINT_FILE, META_SUMMARY_FILE, CACHE_FILE, ESTIMATES_FILE];

/// True when the directory holds at least one pipeline artifact.
pub fn has_artifacts(run: &RunDir) -> bool {
    REPORTED.iter().any(|f| run.exists(f))
        || ["fs", "re", "ds"].iter().any(|m| run.exists(&RunDir::selection_file(m)))
        || run.path(BENCH_DIR).is_dir()
}

fn file_digest(run: &RunDir, name: &str) -> Result<String> {
    let bytes = std::fs::read(run.path(name)).with_context(|| format!("reading {name}"))?;
    Ok(to_hex(&of_bytes(&bytes)))
}

/// Digest-chain checks between stored artifacts, one line each.
fn chain_checks(run: &RunDir) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    let corpus = if run.exists(CORPUS_FILE) {
        let f = std::fs::File::open(run.path(CORPUS_FILE))?;
        Some(Corpus::read_from(std::io::BufReader::new(f))?)
    } else {
        None
    };
    let checkpoint = if run.exists(CHECKPOINT_FILE) {
        Some(Checkpoint::read_from(std::fs::File::open(run.path(CHECKPOINT_FILE))?)?)
    } else {
        None
    };
    if let (Some(c), Some(k)) = (&corpus, &checkpoint) {
        let ok = k.corpus_digest == c.digest();
        lines.push(format!("checkpoint trained on stored corpus: {}", if ok { "ok" } else { "MISMATCH" }));
    }
    if let (Some(k), true) = (&checkpoint, run.exists(CACHE_FILE)) {
        let cache = GradientCache::read_from(std::fs::File::open(run.path(CACHE_FILE))?)?;
        let ok = cache.theta_star_digest() == k.params.digest();
        lines.push(format!("cache built from stored checkpoint: {}", if ok { "ok" } else { "MISMATCH" }));
    }
    Ok(lines)
}

fn body_lines(run: &RunDir, name: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(run.path(name)).with_context(|| format!("reading {name}"))?;
    Ok(text.lines().filter(|l| !l.starts_with("# ")).map(str::to_string).collect())
}

pub fn report(run: &RunDir) -> Result<()> {
    let mut md = String::from("# gradex run report\n\n## Artifacts\n\n| file | sha256 |\n|---|---|\n");
    let mut listed: Vec<String> = REPORTED.iter().filter(|f| run.exists(f)).map(|f| f.to_string()).collect();
    let selections: Vec<String> = ["fs", "re", "ds"]
        .iter()
        .map(|m| RunDir::selection_file(m))
        .filter(|f| run.exists(f))
        .collect();
    listed.extend(selections.iter().cloned());
    let mut bench_files: Vec<String> = Vec::new();
    if run.path(BENCH_DIR).is_dir() {
        for entry in std::fs::read_dir(run.path(BENCH_DIR))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if !name.ends_with(".timings.csv") && !name.ends_with(".partial") {
                bench_files.push(format!("{BENCH_DIR}/{name}"));
            }
        }
    }
    bench_files.sort();
    listed.extend(bench_files.iter().cloned());
    for f in &listed {
        writeln!(md, "| {f} | {} |", file_digest(run, f)?)?;
    }

    let checks = chain_checks(run)?;
    if !checks.is_empty() {
        md.push_str("\n## Provenance\n\n");
        for c in checks {
            writeln!(md, "- {c}")?;
        }
    }
    if run.exists(META_SUMMARY_FILE) {
        md.push_str("\n## Meta-training\n\n");
        for l in body_lines(run, META_SUMMARY_FILE)? {
            writeln!(md, "- {l}")?;
        }
    }
    for f in &selections {
        writeln!(md, "\n## Selection ({f})\n")?;
        for l in body_lines(run, f)? {
            if ["method:", "evaluator:", "threshold:", "chosen:", "budget:", "group_sizes:"].iter().any(|p| l.starts_with(p)) {
                writeln!(md, "- {l}")?;
            }
        }
    }
    for f in bench_files.iter().filter(|f| f.ends_with(".txt")) {
        writeln!(md, "\n## Benchmark ({f})\n")?;
        for l in body_lines(run, f)? {
            writeln!(md, "- {l}")?;
        }
    }
    run.write_atomic(REPORT_FILE, md.as_bytes())?;
    eprintln!("report: {}", run.path(REPORT_FILE).display());
    Ok(())
}
