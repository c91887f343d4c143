//! Run configuration: one TOML document with a section per pipeline stage.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gradex::bench::{default_meta_config, default_model};
use gradex::digest::{self, Digest};
use gradex::estimate::SolveConfig;
use gradex::model::ModelConfig;
use gradex::project::DEFAULT_DIM;
use gradex::taskgen::{gen_multitask_gaussian, gen_noisy_addition, AdditionSpec, GaussianSpec, Generator};
use gradex::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Planted,
    Addition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Forward stepwise selection.
    Fs,
    /// Random ensemble with thresholded task scores.
    Re,
    /// Gradient clustering into groups, then `selection.downstream`.
    Ds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorChoice {
    Gradex,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Pick the fraction from `fraction_grid` with the lowest estimated loss.
    Cv,
    Fraction,
    Gamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSpec {
    pub d: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub method: Method,
    pub evaluator: EvaluatorChoice,
    pub m: usize,
    pub alpha: f64,
    pub seed: u64,
    pub threshold: ThresholdMode,
    pub fraction: f64,
    pub gamma: f64,
    pub fraction_grid: Vec<f64>,
    pub groups: usize,
    pub cluster_seed: u64,
    /// Selector applied to the groups when `method = "ds"`; `fs` or `re`.
    pub downstream: Method,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        SelectionSpec {
            method: Method::Fs,
            evaluator: EvaluatorChoice::Gradex,
            m: 1000,
            alpha: 0.75,
            seed: 0,
            threshold: ThresholdMode::Cv,
            fraction: 0.5,
            gamma: 0.0,
            fraction_grid: vec![0.05, 0.1, 0.15, 0.2],
            groups: 10,
            cluster_seed: 0,
            downstream: Method::Fs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub seed: u64,
    pub rrss_distances: Vec<f64>,
    pub rrss_directions: usize,
    pub rrss_endpoint_subsets: usize,
    pub relerr_subsets: usize,
    pub relerr_dims: Vec<usize>,
    pub addition_m: usize,
    pub speedup_formula_n: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            seed: 0,
            rrss_distances: vec![0.0025, 0.005, 0.01, 0.025],
            rrss_directions: 20,
            rrss_endpoint_subsets: 10,
            relerr_subsets: 30,
            relerr_dims: vec![DEFAULT_DIM],
            addition_m: 200,
            speedup_formula_n: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Used when neither `--out` nor `GRADEX_OUT` is given.
    pub output_dir: String,
    pub corpus: Generator,
    pub model: ModelConfig,
    pub meta_train: TrainConfig,
    pub fine_tune: TrainConfig,
    pub projector: ProjectorSpec,
    pub estimator: SolveConfig,
    pub selection: SelectionSpec,
    pub bench: BenchSpec,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Result<Self> {
        let generator = match preset {
            Preset::Planted => Generator::MultitaskGaussian(GaussianSpec::planted(0)),
            Preset::Addition => Generator::NoisyAddition(AdditionSpec::standard(0)),
        };
        // Model shape depends on the corpus, so build a throwaway copy.
        let corpus = generate(&generator)?;
        Ok(RunConfig {
            output_dir: "gradex-run".into(),
            corpus: generator,
            model: default_model(&corpus),
            meta_train: default_meta_config(&corpus),
            fine_tune: TrainConfig::fine_tune(),
            projector: ProjectorSpec {
                d: DEFAULT_DIM,
                seed: 0,
            },
            estimator: SolveConfig::default(),
            selection: SelectionSpec::default(),
            bench: BenchSpec::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets every named seed.
    pub fn set_all_seeds(&mut self, seed: u64) {
        match &mut self.corpus {
            Generator::MultitaskGaussian(g) => g.seed = seed,
            Generator::NoisyAddition(a) => a.seed = seed,
        }
        self.model.seed = seed;
        self.meta_train.seed = seed;
        self.fine_tune.seed = seed;
        self.projector.seed = seed;
        self.selection.seed = seed;
        self.selection.cluster_seed = seed;
        self.bench.seed = seed;
    }

    /// Applies `section.key = value` overrides. Keys must already exist;
    /// values are parsed as TOML and fall back to plain strings.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root: Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        for (key, raw) in overrides {
            let parts: Vec<&str> = key.split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields one part");
            let mut table = &mut root;
            for p in parents {
                table = match table.get_mut(*p) {
                    Some(Value::Table(t)) => t,
                    _ => bail!("unknown config key `{key}`"),
                };
            }
            if !table.contains_key(*last) {
                bail!("unknown config key `{key}`");
            }
            table.insert(last.to_string(), parse_value(raw));
        }
        *self = Table::try_into(root).context("applying overrides")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.meta_train.validate()?;
        self.fine_tune.validate()?;
        self.estimator.validate()?;
        if self.projector.d == 0 {
            bail!("projector.d must be positive");
        }
        let s = &self.selection;
        if s.downstream == Method::Ds {
            bail!("selection.downstream must be fs or re");
        }
        if s.fraction_grid.is_empty() {
            bail!("selection.fraction_grid must not be empty");
        }
        Ok(())
    }

    pub fn digest(&self) -> Digest {
        digest::of_bytes(self.to_toml().as_bytes())
    }

    /// Digest of the named sections only. Artifacts record the digest of
    /// the sections they depend on, so unrelated edits do not stale them.
    pub fn sections_digest(&self, sections: &[&str]) -> Digest {
        let root: Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        let mut picked = Table::new();
        for s in sections {
            if let Some(v) = root.get(*s) {
                picked.insert(s.to_string(), v.clone());
            }
        }
        digest::of_bytes(toml::to_string(&picked).expect("table serializes").as_bytes())
    }
}

pub fn generate(generator: &Generator) -> Result<gradex::taskgen::Corpus> {
    Ok(match generator {
        Generator::MultitaskGaussian(spec) => gen_multitask_gaussian(spec)?,
        Generator::NoisyAddition(spec) => gen_noisy_addition(spec)?,
    })
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
