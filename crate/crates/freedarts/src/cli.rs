//! Command implementations behind the `freedarts` binary.
//!
//! Every command reads one JSON [`RunConfig`] (flags override fields),
//! validates it before any compute, and writes deterministic JSON/CSV
//! artifacts stamped with the config digest. Volatile data (timestamps,
//! wall time) lives in `.meta.json` sidecars so reruns are byte-identical.
//! One environment variable is honored: `FREEDARTS_OUT` overrides the
//! output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ntk::{
    check_sensitivity_bound, check_supernet_decomposition, check_width_scaling, ntk_matrix,
    NtkError, NtkOptions, ParamSubset,
};
use crate::oracle::{
    bias_report, build_oracle, rank_report, run_jobs, seeded_batch, BiasMethod, OracleConfig,
    OracleError, OracleTable, SyntheticTask,
};
use crate::report::{config_digest, write_json, write_sidecar};
use crate::scoring::{ScoreInputs, ScoreVariant};
use crate::search::{
    run_search, track_pruning, SearchError, SearchMode, SearchOptions, SearchTrace,
};
use crate::spaces::{
    init_supernet, Activation, CellSpace, Genotype, SequentialSpace, Space, SpaceConfig,
    SpaceError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Ntk(#[from] NtkError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "FREEDARTS_OUT";

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_alpha_scale() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

fn default_batch_size() -> usize {
    16
}

fn default_workers() -> usize {
    1
}

fn default_out_dir() -> String {
    "runs".into()
}

fn default_random_draws() -> usize {
    50
}

/// Settings for the kernel verification battery. The defaults match the
/// documented checks: sqrt(rho) width scaling at 1024 base width, the
/// sensitivity bound on 50 random order-one-mixing chains, and the exact
/// linear decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkVerifySettings {
    pub base_width: usize,
    pub depth: usize,
    pub rhos: Vec<f64>,
    pub num_seeds: usize,
    pub n_inputs: usize,
    pub in_dim: usize,
    pub bound_nets: usize,
    pub bound_depth: usize,
    pub bound_branches: usize,
    pub bound_width: usize,
    pub bound_batch: usize,
    pub bound_alpha: f64,
    pub decomp_depth: usize,
    pub decomp_branches: usize,
    pub decomp_width: usize,
    pub decomp_inputs: usize,
}

impl Default for NtkVerifySettings {
    fn default() -> Self {
        NtkVerifySettings {
            base_width: 1024,
            depth: 2,
            // 0.640625 = 656/1024: the nearest width multiple to 0.64
            rhos: vec![0.25, 0.640625, 1.0],
            num_seeds: 10,
            n_inputs: 4,
            in_dim: 8,
            bound_nets: 50,
            bound_depth: 2,
            bound_branches: 3,
            bound_width: 16,
            bound_batch: 8,
            bound_alpha: 1.0,
            decomp_depth: 2,
            decomp_branches: 3,
            decomp_width: 8,
            decomp_inputs: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    pub epochs: usize,
    pub lr: f64,
    pub train_seeds: Vec<u64>,
    pub enum_cap: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            epochs: 50,
            lr: 0.05,
            train_seeds: vec![0, 1, 2],
            enum_cap: crate::oracle::DEFAULT_ENUM_CAP,
        }
    }
}

/// One experiment configuration; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SpaceConfig>,
    #[serde(default = "ScoreVariant::default_cli")]
    pub variant: ScoreVariant,
    #[serde(default = "SearchMode::default_cli")]
    pub mode: SearchMode,
    #[serde(default = "default_alpha_scale")]
    pub alpha_scale: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_true")]
    pub reinit_each_round: bool,
    #[serde(default)]
    pub fresh_init_each_round: bool,
    #[serde(default)]
    pub post_softmax: bool,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_random_draws")]
    pub random_draws: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<SyntheticTask>,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub ntk: NtkVerifySettings,
}

impl ScoreVariant {
    fn default_cli() -> Self {
        ScoreVariant::DataAgnostic
    }
}

impl SearchMode {
    fn default_cli() -> Self {
        SearchMode::Iterative
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&body)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(1e-6..=1e-1).contains(&self.alpha_scale) {
            return Err(CliError::Config(format!(
                "alpha_scale {} outside [1e-6, 1e-1]",
                self.alpha_scale
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be non-empty".into()));
        }
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be positive".into()));
        }
        if let Some(space) = &self.space {
            space.build()?;
        }
        Ok(())
    }

    /// Output directory after the env override.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var(OUT_DIR_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&self.out_dir),
        }
    }

    fn search_space(&self) -> Result<Space, CliError> {
        match &self.space {
            Some(cfg) => Ok(cfg.build()?),
            None => Ok(Space::Cell(CellSpace::default_cell())),
        }
    }

    /// Cell space for oracle-style commands; defaults to the 27-genotype
    /// mini space so the enumeration cap holds out of the box.
    fn oracle_space(&self) -> Result<CellSpace, CliError> {
        match &self.space {
            Some(cfg) => match cfg.build()? {
                Space::Cell(c) => Ok(c),
                Space::Sequential(_) => Err(CliError::Config(
                    "oracle commands need a cell space".into(),
                )),
            },
            None => Ok(CellSpace::mini_space(self.task_or_default().num_classes)),
        }
    }

    fn task_or_default(&self) -> SyntheticTask {
        self.task.clone().unwrap_or_else(SyntheticTask::default_mini)
    }

    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            variant: self.variant,
            mode: self.mode,
            alpha_scale: self.alpha_scale,
            reinit_each_round: self.reinit_each_round,
            fresh_init_each_round: self.fresh_init_each_round,
            post_softmax: self.post_softmax,
            batch_size: self.batch_size,
        }
    }
}

/// Map canonical genotype strings to a scalar quality, e.g. benchmark
/// accuracies. Malformed genotype keys and duplicate keys are rejected.
#[derive(Debug, Clone, Serialize)]
pub struct LookupFile {
    pub entries: BTreeMap<String, f64>,
}

impl LookupFile {
    pub fn get(&self, genotype: &Genotype) -> Option<f64> {
        self.entries.get(&genotype.canonical_string()).copied()
    }

    pub fn evaluator(&self) -> impl Fn(&Genotype) -> Result<f64, String> + '_ {
        move |g| {
            self.get(g)
                .ok_or_else(|| format!("genotype {g} missing from the lookup file"))
        }
    }
}

impl<'de> Deserialize<'de> for LookupFile {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = LookupFile;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a map of canonical genotype strings to numbers")
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(
                self,
                mut map: A,
            ) -> Result<Self::Value, A::Error> {
                let mut entries = BTreeMap::new();
                while let Some((key, value)) = map.next_entry::<String, f64>()? {
                    Genotype::parse(&key).map_err(|e| {
                        serde::de::Error::custom(format!("bad genotype key: {e}"))
                    })?;
                    if entries.insert(key.clone(), value).is_some() {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate genotype key {key:?}"
                        )));
                    }
                }
                Ok(LookupFile { entries })
            }
        }
        de.deserialize_map(V)
    }
}

/// Quality evaluator loaded from disk: either an oracle table or a plain
/// lookup file.
pub enum Evaluator {
    Oracle(OracleTable),
    Lookup(LookupFile),
}

impl Evaluator {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = fs::read_to_string(path)?;
        if let Ok(table) = serde_json::from_str::<OracleTable>(&body) {
            return Ok(Evaluator::Oracle(table));
        }
        let lookup: LookupFile = serde_json::from_str(&body)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Evaluator::Lookup(lookup))
    }

    pub fn eval(&self, g: &Genotype) -> Result<f64, String> {
        match self {
            Evaluator::Oracle(t) => t
                .get(g)
                .map(|e| e.acc_mean)
                .ok_or_else(|| format!("genotype {g} missing from the oracle table")),
            Evaluator::Lookup(l) => l.evaluator()(g),
        }
    }
}

#[derive(Debug, Serialize)]
struct SearchArtifact<'a> {
    config_digest: &'a str,
    trace: &'a SearchTrace,
}

/// `search`: one search per seed; prints the genotype and wall time, writes
/// one trace file per seed.
pub fn cmd_search(config: &RunConfig) -> Result<Vec<Genotype>, CliError> {
    config.validate()?;
    let space = config.search_space()?;
    let digest = config_digest(config);
    let out = config.out_dir();
    let opts = config.search_options();
    let jobs: Vec<u64> = config.seeds.clone();
    let results = run_jobs(config.workers, &jobs, |&seed| {
        run_search(&space, seed, &opts)
    })?;
    let mut genotypes = Vec::with_capacity(results.len());
    for (seed, outcome) in jobs.iter().zip(results) {
        let path = out.join(format!("search_seed{seed}.trace.json"));
        write_json(
            &path,
            &SearchArtifact {
                config_digest: &digest,
                trace: &outcome.trace,
            },
        )?;
        write_sidecar(
            &out.join(format!("search_seed{seed}.meta.json")),
            &digest,
            outcome.trace.wall_time_ms,
        )?;
        println!(
            "seed {seed}: {} ({} ms)",
            outcome.genotype, outcome.trace.wall_time_ms
        );
        genotypes.push(outcome.genotype);
    }
    Ok(genotypes)
}

/// `sweep-alpha`: search across alpha scales, emit a CSV of genotypes and
/// (when an evaluator is given) their qualities.
pub fn cmd_sweep_alpha(
    config: &RunConfig,
    alpha_values: &[f64],
    evaluator: Option<&Evaluator>,
) -> Result<PathBuf, CliError> {
    config.validate()?;
    for &a in alpha_values {
        if !(1e-6..=1e-1).contains(&a) {
            return Err(CliError::Config(format!(
                "alpha value {a} outside [1e-6, 1e-1]"
            )));
        }
    }
    let start = Instant::now();
    let space = config.search_space()?;
    let digest = config_digest(&(config, alpha_values));
    let mut csv = String::new();
    writeln!(csv, "# config_digest={digest}").expect("string write");
    writeln!(csv, "alpha_scale,seed,genotype,quality").expect("string write");
    for &a in alpha_values {
        let opts = SearchOptions {
            alpha_scale: a,
            ..config.search_options()
        };
        for &seed in &config.seeds {
            let outcome = run_search(&space, seed, &opts)?;
            let quality = evaluator
                .map(|e| e.eval(&outcome.genotype))
                .transpose()
                .map_err(CliError::Config)?;
            writeln!(
                csv,
                "{a},{seed},{},{}",
                outcome.genotype,
                quality.map(|q| q.to_string()).unwrap_or_default()
            )
            .expect("string write");
        }
    }
    let out = config.out_dir();
    fs::create_dir_all(&out)?;
    let path = out.join("sweep_alpha.csv");
    fs::write(&path, csv)?;
    write_sidecar(
        &out.join("sweep_alpha.meta.json"),
        &digest,
        start.elapsed().as_millis(),
    )?;
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct NtkVerifyArtifact {
    pub config_digest: String,
    pub width_scaling: Vec<crate::ntk::WidthScalingReport>,
    pub sensitivity_bound_nets: usize,
    pub sensitivity_bound_violations: usize,
    pub sensitivity_worst_slack: f64,
    pub decomposition: crate::ntk::DecompositionReport,
    pub block_additivity_rel_fro: f64,
}

/// `ntk-verify`: width-scaling ratios, the sensitivity bound sweep, the
/// linear decomposition residual, and block additivity on a nonlinear net.
pub fn cmd_ntk_verify(config: &RunConfig) -> Result<NtkVerifyArtifact, CliError> {
    config.validate()?;
    let start = Instant::now();
    let s = &config.ntk;
    let digest = config_digest(config);
    let seeds: Vec<u64> = (0..s.num_seeds as u64).collect();

    let mut width_scaling = Vec::new();
    for &rho in &s.rhos {
        let report =
            check_width_scaling(s.base_width, rho, s.depth, &seeds, s.n_inputs, s.in_dim)?;
        println!(
            "width scaling rho={rho}: mean ratio {:.4} (expect {:.4}, std {:.4})",
            report.mean_ratio, report.expected_sqrt_rho, report.std_ratio
        );
        width_scaling.push(report);
    }

    let bound_space = Space::Sequential(SequentialSpace::uniform(
        s.bound_depth,
        s.bound_branches,
        s.bound_width,
        Activation::Relu,
    ));
    let mut violations = 0usize;
    let mut worst: f64 = 0.0;
    for seed in 0..s.bound_nets as u64 {
        let net = init_supernet(&bound_space, seed, s.bound_alpha)?;
        let batch = seeded_batch(&bound_space, s.bound_batch, seed ^ 0xB04D)?;
        let report = check_sensitivity_bound(&net, &ScoreInputs::Vanilla { batch: &batch })?;
        violations += report.violations;
        for c in &report.per_op {
            worst = worst.max(c.slack_ratio);
        }
    }
    println!(
        "sensitivity bound: {} nets, {} violations, worst slack {:.4}",
        s.bound_nets, violations, worst
    );

    let decomp_space = Space::Sequential(SequentialSpace::uniform(
        s.decomp_depth,
        s.decomp_branches,
        s.decomp_width,
        Activation::Identity,
    ));
    let net = init_supernet(&decomp_space, 0, 1.0)?;
    let xs = {
        use rand::prelude::*;
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xDEC0);
        crate::tensor::Tensor::from_vec(
            vec![s.decomp_inputs, s.decomp_width],
            (0..s.decomp_inputs * s.decomp_width)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .map_err(SpaceError::from)?
    };
    let decomposition = check_supernet_decomposition(&net, &xs, &NtkOptions::default())?;
    println!(
        "decomposition residual: {:.3e}",
        decomposition.rel_frobenius_residual
    );

    let relu_space = Space::Sequential(SequentialSpace::uniform(
        s.decomp_depth,
        s.decomp_branches,
        s.decomp_width,
        Activation::Relu,
    ));
    let relu_net = init_supernet(&relu_space, 1, 1.0)?;
    let relu_report = ntk_matrix(&relu_net, &xs, ParamSubset::All, &NtkOptions::default())?;
    let block_additivity = relu_report.residuals["block_additivity_rel_fro"];
    println!("block additivity (relu): {block_additivity:.3e}");

    let artifact = NtkVerifyArtifact {
        config_digest: digest.clone(),
        width_scaling,
        sensitivity_bound_nets: s.bound_nets,
        sensitivity_bound_violations: violations,
        sensitivity_worst_slack: worst,
        decomposition,
        block_additivity_rel_fro: block_additivity,
    };
    let out = config.out_dir();
    write_json(&out.join("ntk_verify.json"), &artifact)?;
    write_sidecar(
        &out.join("ntk_verify.meta.json"),
        &digest,
        start.elapsed().as_millis(),
    )?;
    Ok(artifact)
}

/// `bias-report`: max-param selection fractions, op diversity, and
/// score-vs-params correlations for every method.
pub fn cmd_bias_report(config: &RunConfig) -> Result<crate::oracle::BiasReport, CliError> {
    config.validate()?;
    let start = Instant::now();
    let space = match &config.space {
        Some(cfg) => match cfg.build()? {
            Space::Cell(c) => c,
            Space::Sequential(_) => {
                return Err(CliError::Config("bias report needs a cell space".into()))
            }
        },
        None => CellSpace::default_cell(),
    };
    let methods = [
        BiasMethod::Freedarts,
        BiasMethod::SynflowSum,
        BiasMethod::SnipSum,
        BiasMethod::GradNormSum,
    ];
    let report = bias_report(&space, &config.seeds, &methods, config.alpha_scale)?;
    for m in &report.methods {
        println!(
            "{}: max-param fraction {:.3}, spearman {:?}",
            m.method, m.max_param_fraction_mean, m.spearman_score_vs_params
        );
    }
    let out = config.out_dir();
    write_json(&out.join("bias_report.json"), &report)?;
    write_sidecar(
        &out.join("bias_report.meta.json"),
        &report.config_digest,
        start.elapsed().as_millis(),
    )?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct OracleArtifact {
    pub table: OracleTable,
    pub rank: crate::oracle::RankReport,
}

/// `oracle`: enumerate + train the configured space, write the table, and
/// rank this config's searches against it.
pub fn cmd_oracle(config: &RunConfig) -> Result<OracleArtifact, CliError> {
    config.validate()?;
    let start = Instant::now();
    let space = config.oracle_space()?;
    let cfg = OracleConfig {
        space: space.clone(),
        task: config.task_or_default(),
        epochs: config.oracle.epochs,
        lr: config.oracle.lr,
        train_seeds: config.oracle.train_seeds.clone(),
        enum_cap: config.oracle.enum_cap,
    };
    let table = build_oracle(&cfg, config.workers)?;
    println!(
        "oracle: {} genotypes, accuracy in [{:.3}, {:.3}]",
        table.entries.len(),
        table
            .entries
            .iter()
            .map(|e| e.acc_mean)
            .fold(f64::INFINITY, f64::min),
        table
            .entries
            .iter()
            .map(|e| e.acc_mean)
            .fold(f64::NEG_INFINITY, f64::max),
    );

    let search_space = Space::Cell(space);
    let opts = config.search_options();
    let jobs: Vec<u64> = config.seeds.clone();
    let found = run_jobs(config.workers, &jobs, |&seed| {
        run_search(&search_space, seed, &opts).map(|o| o.genotype)
    })?;
    let rank = rank_report(&found, &table, config.random_draws, 0x5EED)?;
    println!(
        "rank: median percentile {:.1} vs random {:.1}",
        rank.median, rank.random_baseline_median
    );

    let out = config.out_dir();
    write_json(&out.join("oracle.json"), &table)?;
    write_json(&out.join("rank_report.json"), &rank)?;
    write_sidecar(
        &out.join("oracle.meta.json"),
        &table.config_digest,
        start.elapsed().as_millis(),
    )?;
    Ok(OracleArtifact { table, rank })
}

#[derive(Debug, Serialize)]
struct TrackArtifact<'a> {
    config_digest: &'a str,
    seed: u64,
    trace: &'a crate::search::TrackTrace,
}

/// `track`: record evaluator quality after every prune of an iterative
/// search, one file per seed.
pub fn cmd_track(
    config: &RunConfig,
    evaluator: &Evaluator,
) -> Result<Vec<crate::search::TrackTrace>, CliError> {
    config.validate()?;
    let start = Instant::now();
    let space = config.search_space()?;
    let digest = config_digest(config);
    let out = config.out_dir();
    let opts = config.search_options();
    let mut traces = Vec::new();
    for &seed in &config.seeds {
        let mut eval = |g: &Genotype| evaluator.eval(g);
        let trace = track_pruning(&space, seed, &opts, &mut eval)?;
        write_json(
            &out.join(format!("track_seed{seed}.json")),
            &TrackArtifact {
                config_digest: &digest,
                seed,
                trace: &trace,
            },
        )?;
        println!(
            "seed {seed}: {} points{}",
            trace.evaluations.len(),
            trace
                .error_note
                .as_ref()
                .map(|e| format!(" (truncated: {e})"))
                .unwrap_or_default()
        );
        traces.push(trace);
    }
    write_sidecar(&out.join("track.meta.json"), &digest, start.elapsed().as_millis())?;
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_bad_alpha() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"frobnicate": 1}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"alpha_scale": 0.5}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"alpha_scale": 1e-4}"#).unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn lookup_file_rejects_malformed_and_duplicate_keys() {
        let good = r#"{"|skip_connect~0|": 0.9}"#;
        let f: LookupFile = serde_json::from_str(good).unwrap();
        assert_eq!(f.entries.len(), 1);

        let bad_key = r#"{"not a genotype": 0.9}"#;
        assert!(serde_json::from_str::<LookupFile>(bad_key).is_err());

        let dup = r#"{"|skip_connect~0|": 0.9, "|skip_connect~0|": 0.8}"#;
        assert!(serde_json::from_str::<LookupFile>(dup).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.variant, ScoreVariant::DataAgnostic);
        assert_eq!(cfg.mode, SearchMode::Iterative);
        assert_eq!(cfg.alpha_scale, 1e-3);
    }
}
