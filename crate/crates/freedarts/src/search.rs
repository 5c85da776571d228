//! Training-free search: prune the supernet one operation at a time.
//!
//! Iterative mode loops (re)initialize -> score -> prune the globally
//! lowest-scoring candidate among edges that still hold more than one, until
//! every edge is a singleton. One-shot mode keeps each edge's top candidate
//! from a single score table. Both are deterministic in
//! (space, seed, variant, alpha_scale).

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{seeded_batch, OracleError};
use crate::report::config_digest;
use crate::scoring::{
    zeros_scores, zeros_scores_data_agnostic, zeros_scores_label_agnostic, Batch, ScoreError,
    ScoreOptions, ScoreTable, ScoreVariant,
};
use crate::spaces::{init_supernet, Genotype, Space, SpaceError, Supernet};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("scoring failed at iteration {iteration}: {source}")]
    Scoring {
        iteration: usize,
        source: ScoreError,
        /// Steps completed before the abort.
        partial: Vec<SearchStep>,
    },
    #[error("batch construction failed: {0}")]
    Batch(String),
}

impl From<OracleError> for SearchError {
    fn from(e: OracleError) -> Self {
        SearchError::Batch(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Iterative,
    Oneshot,
}

/// Search configuration knobs; the defaults follow the iterative,
/// data-agnostic setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOptions {
    pub variant: ScoreVariant,
    pub mode: SearchMode,
    pub alpha_scale: f64,
    /// Rebuild the supernet from the base seed before each scoring round.
    pub reinit_each_round: bool,
    /// Draw a fresh initialization per round instead of reusing the base
    /// seed.
    pub fresh_init_each_round: bool,
    /// Score post-softmax mixing weights instead of raw alpha.
    pub post_softmax: bool,
    /// Batch size for the variants that consume data.
    pub batch_size: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            variant: ScoreVariant::DataAgnostic,
            mode: SearchMode::Iterative,
            alpha_scale: 1e-3,
            reinit_each_round: true,
            fresh_init_each_round: false,
            post_softmax: false,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchStep {
    pub iteration: usize,
    pub pruned_edge: usize,
    pub pruned_op: usize,
    pub score_digest: String,
    pub argmax_genotype: Genotype,
}

/// Full record of one search run. Wall time is volatile and therefore kept
/// out of the serialized form; it belongs in the sidecar metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTrace {
    pub space: Space,
    pub seed: u64,
    pub options: SearchOptions,
    pub steps: Vec<SearchStep>,
    pub final_genotype: Genotype,
    #[serde(skip)]
    pub wall_time_ms: u128,
}

impl SearchTrace {
    /// Stable digest over the serialized (wall-time-free) trace.
    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub trace: SearchTrace,
}

fn derive_seed(base: u64, salt: u64) -> u64 {
    base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct RoundScorer {
    variant: ScoreVariant,
    base_seed: u64,
    batch: Option<Batch>,
    opts: ScoreOptions,
}

impl RoundScorer {
    fn new(space: &Space, seed: u64, options: &SearchOptions) -> Result<Self, SearchError> {
        let batch = match options.variant {
            ScoreVariant::DataAgnostic => None,
            _ => Some(seeded_batch(
                space,
                options.batch_size,
                derive_seed(seed, 0xDA7A),
            )?),
        };
        Ok(RoundScorer {
            variant: options.variant,
            base_seed: seed,
            batch,
            opts: ScoreOptions {
                post_softmax: options.post_softmax,
            },
        })
    }

    fn score(&self, net: &Supernet, round: usize) -> Result<ScoreTable, ScoreError> {
        match self.variant {
            ScoreVariant::Vanilla => {
                zeros_scores(net, self.batch.as_ref().expect("batch built"), &self.opts)
            }
            ScoreVariant::LabelAgnostic => {
                // labels resample each round from the round index and seed
                let label_seed = derive_seed(self.base_seed, round as u64 + 1);
                zeros_scores_label_agnostic(
                    net,
                    &self.batch.as_ref().expect("batch built").x,
                    label_seed,
                    &self.opts,
                )
            }
            ScoreVariant::DataAgnostic => zeros_scores_data_agnostic(net, &self.opts),
        }
    }
}

fn round_net(
    space: &Space,
    seed: u64,
    options: &SearchOptions,
    round: usize,
    current: Option<Supernet>,
) -> Result<Supernet, SearchError> {
    match current {
        Some(net) if !options.reinit_each_round => Ok(net),
        current => {
            let round_seed = if options.fresh_init_each_round {
                derive_seed(seed, round as u64 + 1)
            } else {
                seed
            };
            let mut net = init_supernet(space, round_seed, options.alpha_scale)?;
            if let Some(prev) = current {
                // carry the alive mask into the fresh initialization
                for e in 0..prev.num_edges() {
                    for o in 0..prev.space.ops_on_edge(e) {
                        if !prev.is_alive(e, o) {
                            let _ = net.prune(e, o);
                        }
                    }
                }
            }
            Ok(net)
        }
    }
}

/// Lowest-scoring alive candidate among edges with more than one candidate.
/// Ties resolve lexicographically by (edge, op) because the table is sorted
/// that way and only strict improvements replace the incumbent.
fn global_min(net: &Supernet, table: &ScoreTable) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for entry in &table.entries {
        if net.alive_count(entry.edge) < 2 {
            continue;
        }
        if best.map_or(true, |(_, _, s)| entry.score < s) {
            best = Some((entry.edge, entry.op, entry.score));
        }
    }
    best.map(|(e, o, _)| (e, o))
}

/// Iterative pruning: exactly `sum(ops_per_edge - 1)` rounds.
pub fn search_iterative(
    space: &Space,
    seed: u64,
    options: &SearchOptions,
) -> Result<SearchOutcome, SearchError> {
    let start = Instant::now();
    let scorer = RoundScorer::new(space, seed, options)?;
    let mut steps = Vec::new();
    let mut net: Option<Supernet> = None;
    let mut round = 0usize;
    loop {
        let current = round_net(space, seed, options, round, net.take())?;
        if current.all_singleton() {
            net = Some(current);
            break;
        }
        let table = scorer.score(&current, round).map_err(|source| {
            SearchError::Scoring {
                iteration: round + 1,
                source,
                partial: steps.clone(),
            }
        })?;
        let (e, o) = global_min(&current, &table).expect("non-singleton edge exists");
        let mut current = current;
        current.prune(e, o)?;
        steps.push(SearchStep {
            iteration: round + 1,
            pruned_edge: e,
            pruned_op: o,
            score_digest: table.digest(),
            argmax_genotype: current.argmax_genotype(),
        });
        net = Some(current);
        round += 1;
    }
    let net = net.expect("loop ran");
    let genotype = net.to_genotype()?;
    let trace = SearchTrace {
        space: space.clone(),
        seed,
        options: options.clone(),
        steps,
        final_genotype: genotype.clone(),
        wall_time_ms: start.elapsed().as_millis(),
    };
    Ok(SearchOutcome { genotype, trace })
}

/// One-shot pruning: single score table, keep each edge's argmax
/// (ties to the lowest op index).
pub fn search_oneshot(
    space: &Space,
    seed: u64,
    options: &SearchOptions,
) -> Result<SearchOutcome, SearchError> {
    let start = Instant::now();
    let scorer = RoundScorer::new(space, seed, options)?;
    let mut net = init_supernet(space, seed, options.alpha_scale)?;
    let table = scorer.score(&net, 0).map_err(|source| SearchError::Scoring {
        iteration: 1,
        source,
        partial: Vec::new(),
    })?;
    let digest = table.digest();
    let mut steps = Vec::new();
    for e in 0..net.num_edges() {
        let mut keep: Option<(usize, f64)> = None;
        for o in 0..net.space.ops_on_edge(e) {
            if !net.is_alive(e, o) {
                continue;
            }
            let s = table.get(e, o).unwrap_or(0.0);
            if keep.map_or(true, |(_, cur)| s > cur) {
                keep = Some((o, s));
            }
        }
        let (keep_op, _) = keep.expect("edge has alive ops");
        for o in 0..net.space.ops_on_edge(e) {
            if o != keep_op && net.is_alive(e, o) {
                net.prune(e, o)?;
                steps.push(SearchStep {
                    iteration: 1,
                    pruned_edge: e,
                    pruned_op: o,
                    score_digest: digest.clone(),
                    argmax_genotype: net.argmax_genotype(),
                });
            }
        }
    }
    let genotype = net.to_genotype()?;
    let trace = SearchTrace {
        space: space.clone(),
        seed,
        options: options.clone(),
        steps,
        final_genotype: genotype.clone(),
        wall_time_ms: start.elapsed().as_millis(),
    };
    Ok(SearchOutcome { genotype, trace })
}

/// Dispatch on the configured mode.
pub fn run_search(
    space: &Space,
    seed: u64,
    options: &SearchOptions,
) -> Result<SearchOutcome, SearchError> {
    match options.mode {
        SearchMode::Iterative => search_iterative(space, seed, options),
        SearchMode::Oneshot => search_oneshot(space, seed, options),
    }
}

/// Quality trajectory across an iterative pruning run: one evaluation made
/// before any prune and one after each prune (length = iterations + 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackTrace {
    pub evaluations: Vec<f64>,
    pub genotypes: Vec<Genotype>,
    /// Set when the evaluator failed; the trajectory is truncated there.
    pub error_note: Option<String>,
}

pub fn track_pruning(
    space: &Space,
    seed: u64,
    options: &SearchOptions,
    evaluator: &mut dyn FnMut(&Genotype) -> Result<f64, String>,
) -> Result<TrackTrace, SearchError> {
    let scorer = RoundScorer::new(space, seed, options)?;
    let mut evaluations = Vec::new();
    let mut genotypes = Vec::new();
    let mut net: Option<Supernet> = None;
    let mut round = 0usize;

    let mut eval = |g: Genotype, evs: &mut Vec<f64>, gts: &mut Vec<Genotype>| -> Option<String> {
        match evaluator(&g) {
            Ok(v) => {
                evs.push(v);
                gts.push(g);
                None
            }
            Err(e) => Some(e),
        }
    };

    loop {
        let current = round_net(space, seed, options, round, net.take())?;
        if round == 0 {
            if let Some(note) = eval(current.argmax_genotype(), &mut evaluations, &mut genotypes) {
                return Ok(TrackTrace {
                    evaluations,
                    genotypes,
                    error_note: Some(note),
                });
            }
        }
        if current.all_singleton() {
            break;
        }
        let table = scorer.score(&current, round).map_err(|source| {
            SearchError::Scoring {
                iteration: round + 1,
                source,
                partial: Vec::new(),
            }
        })?;
        let (e, o) = global_min(&current, &table).expect("non-singleton edge exists");
        let mut current = current;
        current.prune(e, o)?;
        if let Some(note) = eval(current.argmax_genotype(), &mut evaluations, &mut genotypes) {
            return Ok(TrackTrace {
                evaluations,
                genotypes,
                error_note: Some(note),
            });
        }
        net = Some(current);
        round += 1;
    }
    Ok(TrackTrace {
        evaluations,
        genotypes,
        error_note: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::{CellSpace, OpKind};

    fn default_space() -> Space {
        Space::Cell(CellSpace::default_cell())
    }

    #[test]
    fn iterative_runs_exactly_24_rounds_on_default_cell() {
        let out = search_iterative(&default_space(), 0, &SearchOptions::default()).unwrap();
        assert_eq!(out.trace.steps.len(), 24);
        assert_eq!(out.genotype.edge_ops.len(), 6);
        let iterations: Vec<usize> = out.trace.steps.iter().map(|s| s.iteration).collect();
        assert_eq!(iterations, (1..=24).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = search_iterative(&default_space(), 7, &SearchOptions::default()).unwrap();
        let b = search_iterative(&default_space(), 7, &SearchOptions::default()).unwrap();
        assert_eq!(a.genotype, b.genotype);
        assert_eq!(a.trace.digest(), b.trace.digest());
        let c = search_iterative(&default_space(), 8, &SearchOptions::default()).unwrap();
        assert!(c.genotype != a.genotype || c.trace.digest() != a.trace.digest());
    }

    #[test]
    fn none_ops_pruned_in_first_six_rounds_across_seeds() {
        for seed in 0..20 {
            let out = search_iterative(&default_space(), seed, &SearchOptions::default()).unwrap();
            for (i, step) in out.trace.steps.iter().take(6).enumerate() {
                assert_eq!(
                    step.pruned_op, 0,
                    "seed {seed}: round {} pruned ({}, {}) instead of a none op",
                    i + 1,
                    step.pruned_edge,
                    step.pruned_op
                );
            }
            assert!(out.genotype.edge_ops.iter().all(|o| *o != OpKind::None));
        }
    }

    #[test]
    fn single_edge_two_ops_takes_one_round_and_keeps_argmax() {
        let space = Space::Cell(CellSpace {
            num_nodes: 2,
            ops: vec![OpKind::SkipConnect, OpKind::Conv1x1],
            ..CellSpace::default_cell()
        });
        let out = search_iterative(&space, 3, &SearchOptions::default()).unwrap();
        assert_eq!(out.trace.steps.len(), 1);
        // survivor must be the higher-scoring of the two
        let one_shot = search_oneshot(&space, 3, &SearchOptions::default()).unwrap();
        assert_eq!(out.genotype, one_shot.genotype);
    }

    #[test]
    fn oneshot_records_single_scoring_pass() {
        let out = search_oneshot(&default_space(), 5, &SearchOptions::default()).unwrap();
        assert_eq!(out.trace.steps.len(), 24);
        let first = &out.trace.steps[0].score_digest;
        assert!(out.trace.steps.iter().all(|s| &s.score_digest == first));
        assert!(out.trace.steps.iter().all(|s| s.iteration == 1));
    }

    #[test]
    fn iterative_and_oneshot_disagree_for_some_seed() {
        let opts = SearchOptions::default();
        let mut found = false;
        for seed in 0..20 {
            let a = search_iterative(&default_space(), seed, &opts).unwrap();
            let b = search_oneshot(&default_space(), seed, &opts).unwrap();
            if a.genotype != b.genotype {
                found = true;
                break;
            }
        }
        assert!(found, "iterative and one-shot agreed on all 20 seeds");
    }

    #[test]
    fn vanilla_and_label_variants_run() {
        for variant in [ScoreVariant::Vanilla, ScoreVariant::LabelAgnostic] {
            let opts = SearchOptions {
                variant,
                ..SearchOptions::default()
            };
            let out = search_iterative(&default_space(), 2, &opts).unwrap();
            assert_eq!(out.trace.steps.len(), 24);
            let again = search_iterative(&default_space(), 2, &opts).unwrap();
            assert_eq!(out.trace.digest(), again.trace.digest());
        }
    }

    #[test]
    fn fresh_init_changes_the_outcome_digest() {
        let base = search_iterative(&default_space(), 4, &SearchOptions::default()).unwrap();
        let fresh = search_iterative(
            &default_space(),
            4,
            &SearchOptions {
                fresh_init_each_round: true,
                ..SearchOptions::default()
            },
        )
        .unwrap();
        assert_ne!(base.trace.digest(), fresh.trace.digest());
    }

    #[test]
    fn track_constant_evaluator_is_flat_with_right_length() {
        let mut evaluator = |_: &Genotype| -> Result<f64, String> { Ok(0.5) };
        let t = track_pruning(&default_space(), 1, &SearchOptions::default(), &mut evaluator)
            .unwrap();
        assert_eq!(t.evaluations.len(), 25); // 24 prunes + the initial state
        assert!(t.evaluations.iter().all(|v| *v == 0.5));
        assert!(t.error_note.is_none());
    }

    #[test]
    fn track_truncates_on_evaluator_failure() {
        let mut calls = 0;
        let mut evaluator = |_: &Genotype| -> Result<f64, String> {
            calls += 1;
            if calls > 3 {
                Err("lookup exhausted".into())
            } else {
                Ok(1.0)
            }
        };
        let t = track_pruning(&default_space(), 1, &SearchOptions::default(), &mut evaluator)
            .unwrap();
        assert_eq!(t.evaluations.len(), 3);
        assert!(t.error_note.is_some());
    }

    #[test]
    fn alive_mask_shrinks_monotonically() {
        let out = search_iterative(&default_space(), 9, &SearchOptions::default()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for step in &out.trace.steps {
            assert!(
                seen.insert((step.pruned_edge, step.pruned_op)),
                "op pruned twice"
            );
        }
    }
}
