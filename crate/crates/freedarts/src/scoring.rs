//! Operation sensitivity scores and summing-up proxy baselines.
//!
//! The per-candidate score is `F(alpha_k) = |dL/d alpha_k * alpha_k|`,
//! computed in one forward and one backward pass over the supernet. Three
//! variants differ only in the loss:
//!
//! - vanilla: cross-entropy on a labelled batch (squared loss on the summed
//!   output for sequential nets, which have no classifier head);
//! - label-agnostic: same mechanics with labels resampled from a seed;
//! - data-agnostic: all-ones input, absolute-valued weights, loss equal to
//!   the sum of the outputs. Needs no dataset at all.
//!
//! The proxy baselines score whole architectures by summing parameter-wise
//! saliencies over all weights; they exist to reproduce the
//! parameter-intensive bias the sensitivity score avoids.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spaces::{DiscreteNet, ParamId, Space, SpaceError, Supernet, WeightTransform};
use crate::tensor::{hvp_finite_difference, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("proxy {proxy} requires a labelled batch")]
    MissingBatch { proxy: String },
    #[error("bad batch: {0}")]
    BadBatch(String),
    #[error("non-finite loss in {variant} scoring")]
    NonFiniteLoss { variant: String },
}

/// Class labels for cell nets, real targets for sequential nets.
#[derive(Debug, Clone)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One scoring batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Targets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    Vanilla,
    LabelAgnostic,
    DataAgnostic,
}

impl ScoreVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreVariant::Vanilla => "vanilla",
            ScoreVariant::LabelAgnostic => "label_agnostic",
            ScoreVariant::DataAgnostic => "data_agnostic",
        }
    }
}

/// Scoring knobs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions {
    /// Score the post-softmax mixing weight instead of the raw architecture
    /// parameter. Raw is the default.
    pub post_softmax: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub edge: usize,
    /// Candidate index within the edge's operation list.
    pub op: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchMeta {
    pub seed: Option<u64>,
    pub batch_size: usize,
    pub loss: f64,
    pub forward_passes: usize,
    pub backward_passes: usize,
}

/// Per-(edge, op) sensitivity scores for every alive candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    pub variant: ScoreVariant,
    pub entries: Vec<ScoreEntry>,
    pub batch_meta: BatchMeta,
}

impl ScoreTable {
    pub fn get(&self, edge: usize, op: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.edge == edge && e.op == op)
            .map(|e| e.score)
    }

    /// Stable digest of the table contents.
    pub fn digest(&self) -> String {
        crate::report::config_digest(self)
    }
}

/// Inputs selecting a scoring variant.
pub enum ScoreInputs<'a> {
    Vanilla { batch: &'a Batch },
    LabelAgnostic { x: &'a Tensor, seed: u64 },
    DataAgnostic,
}

impl ScoreInputs<'_> {
    fn variant(&self) -> ScoreVariant {
        match self {
            ScoreInputs::Vanilla { .. } => ScoreVariant::Vanilla,
            ScoreInputs::LabelAgnostic { .. } => ScoreVariant::LabelAgnostic,
            ScoreInputs::DataAgnostic => ScoreVariant::DataAgnostic,
        }
    }
}

/// Vanilla scores on a labelled batch.
pub fn zeros_scores(
    net: &Supernet,
    batch: &Batch,
    opts: &ScoreOptions,
) -> Result<ScoreTable, ScoreError> {
    zeros_scores_with(net, &ScoreInputs::Vanilla { batch }, opts)
}

/// Label-agnostic scores: labels drawn from `seed`, inputs kept.
pub fn zeros_scores_label_agnostic(
    net: &Supernet,
    x: &Tensor,
    seed: u64,
    opts: &ScoreOptions,
) -> Result<ScoreTable, ScoreError> {
    zeros_scores_with(net, &ScoreInputs::LabelAgnostic { x, seed }, opts)
}

/// Data-agnostic scores: all-ones input, absolute weights, summed output.
pub fn zeros_scores_data_agnostic(
    net: &Supernet,
    opts: &ScoreOptions,
) -> Result<ScoreTable, ScoreError> {
    zeros_scores_with(net, &ScoreInputs::DataAgnostic, opts)
}

/// Targets for the label-agnostic variant: uniform classes for cell nets,
/// standard normal values for sequential nets.
pub fn agnostic_targets(net: &Supernet, n: usize, seed: u64) -> Targets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &net.space {
        Space::Cell(c) => {
            Targets::Classes((0..n).map(|_| rng.random_range(0..c.num_classes)).collect())
        }
        Space::Sequential(_) => {
            Targets::Values((0..n).map(|_| rng.sample(StandardNormal)).collect())
        }
    }
}

struct LossPass {
    fwd: crate::spaces::ForwardPass,
    loss: Var,
}

fn build_loss(net: &Supernet, inputs: &ScoreInputs<'_>) -> Result<LossPass, ScoreError> {
    let (x, targets, transform): (Tensor, Option<Targets>, WeightTransform) = match inputs {
        ScoreInputs::Vanilla { batch } => {
            if batch.targets.is_empty() {
                return Err(ScoreError::BadBatch("empty batch".into()));
            }
            (
                batch.x.clone(),
                Some(batch.targets.clone()),
                WeightTransform::Identity,
            )
        }
        ScoreInputs::LabelAgnostic { x, seed } => {
            let n = x.shape().first().copied().unwrap_or(0);
            if n == 0 {
                return Err(ScoreError::BadBatch("empty batch".into()));
            }
            (
                (*x).clone(),
                Some(agnostic_targets(net, n, *seed)),
                WeightTransform::Identity,
            )
        }
        ScoreInputs::DataAgnostic => (
            Tensor::ones(net.input_shape(1)),
            None,
            WeightTransform::Absolute,
        ),
    };

    let mut fwd = net.forward(&x, transform)?;
    let loss = match (&net.space, &targets) {
        (_, None) => fwd.tape.sum_reduce(fwd.output)?,
        (Space::Cell(_), Some(Targets::Classes(y))) => fwd.tape.cross_entropy(fwd.output, y)?,
        (Space::Sequential(_), Some(Targets::Values(y))) => {
            let n = y.len();
            let f = fwd.tape.row_sum(fwd.output)?;
            let targets = fwd.tape.leaf(Tensor::from_vec(vec![n], y.clone())?, false);
            let neg = fwd.tape.scale(targets, -1.0)?;
            let diff = fwd.tape.add(f, neg)?;
            let sq = fwd.tape.mul(diff, diff)?;
            let total = fwd.tape.sum_reduce(sq)?;
            fwd.tape.scale(total, 0.5 / n as f64)?
        }
        (Space::Cell(_), Some(Targets::Values(_))) => {
            return Err(ScoreError::BadBatch("cell spaces need class labels".into()))
        }
        (Space::Sequential(_), Some(Targets::Classes(_))) => {
            return Err(ScoreError::BadBatch(
                "sequential spaces need real-valued targets".into(),
            ))
        }
    };
    Ok(LossPass { fwd, loss })
}

/// Loss value only (used by finite-difference checks).
pub fn loss_value(net: &Supernet, inputs: &ScoreInputs<'_>) -> Result<f64, ScoreError> {
    let pass = build_loss(net, inputs)?;
    Ok(pass.fwd.tape.value(pass.loss).item())
}

/// One forward, one backward, one entry per alive candidate.
pub fn zeros_scores_with(
    net: &Supernet,
    inputs: &ScoreInputs<'_>,
    opts: &ScoreOptions,
) -> Result<ScoreTable, ScoreError> {
    let variant = inputs.variant();
    let (seed, batch_size) = match inputs {
        ScoreInputs::Vanilla { batch } => (None, batch.targets.len()),
        ScoreInputs::LabelAgnostic { x, seed } => {
            (Some(*seed), x.shape().first().copied().unwrap_or(0))
        }
        ScoreInputs::DataAgnostic => (None, 1),
    };

    let LossPass { mut fwd, loss } = build_loss(net, inputs)?;
    let loss_value = fwd.tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(ScoreError::NonFiniteLoss {
            variant: variant.name().into(),
        });
    }
    fwd.tape.backward(loss)?;

    let mut entries = Vec::new();
    for e in 0..net.num_edges() {
        for o in 0..net.space.ops_on_edge(e) {
            if !net.is_alive(e, o) {
                continue;
            }
            let score = if opts.post_softmax {
                match fwd.mix_vars[e][o] {
                    Some(v) => {
                        let g = fwd.tape.grad(v).map(|g| g[0]).unwrap_or(0.0);
                        (g * fwd.tape.value(v).item()).abs()
                    }
                    None => 0.0,
                }
            } else {
                match fwd.alpha_vars[e][o] {
                    Some(v) => {
                        let g = fwd.tape.grad(v).map(|g| g[0]).unwrap_or(0.0);
                        (g * net.alpha(e, o)).abs()
                    }
                    None => 0.0,
                }
            };
            debug_assert!(score.is_finite() && score >= 0.0);
            entries.push(ScoreEntry {
                edge: e,
                op: o,
                score,
            });
        }
    }

    Ok(ScoreTable {
        variant,
        entries,
        batch_meta: BatchMeta {
            seed,
            batch_size,
            loss: loss_value,
            forward_passes: 1,
            backward_passes: fwd.tape.backward_sweeps(),
        },
    })
}

// ---- summing-up proxies ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    GradNorm,
    Snip,
    Grasp,
    SynFlow,
}

impl ProxyKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProxyKind::GradNorm => "grad_norm",
            ProxyKind::Snip => "snip",
            ProxyKind::Grasp => "grasp",
            ProxyKind::SynFlow => "synflow",
        }
    }

    pub fn needs_batch(&self) -> bool {
        !matches!(self, ProxyKind::SynFlow)
    }
}

/// Architecture-level summing-up score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxyScore {
    pub proxy: ProxyKind,
    pub value: f64,
    pub param_count: usize,
}

/// Anything the proxies can run on: flat weights plus a loss-producing
/// forward pass.
pub enum ProxyTarget<'a> {
    Discrete(&'a DiscreteNet),
    Supernet(&'a Supernet),
    /// Supernet with one candidate masked out (leave-one-out emulation).
    SupernetExcluding(&'a Supernet, (usize, usize)),
}

/// Step for the finite-difference Hessian-vector product inside GraSP.
pub const GRASP_HVP_EPS: f64 = 1e-4;

impl ProxyTarget<'_> {
    fn exclude(&self) -> Option<(usize, usize)> {
        match self {
            ProxyTarget::SupernetExcluding(_, eo) => Some(*eo),
            _ => None,
        }
    }

    fn forward(
        &self,
        x: &Tensor,
        transform: WeightTransform,
    ) -> Result<(Tape, Var, Vec<(ParamId, Var)>), ScoreError> {
        match self {
            ProxyTarget::Discrete(n) => {
                let f = n.forward(x, transform)?;
                Ok((f.tape, f.logits, f.weight_vars))
            }
            ProxyTarget::Supernet(n) | ProxyTarget::SupernetExcluding(n, _) => {
                let f = n.forward_excluding(x, transform, self.exclude())?;
                Ok((f.tape, f.output, f.weight_vars))
            }
        }
    }

    fn input_shape(&self, n: usize) -> Vec<usize> {
        match self {
            ProxyTarget::Discrete(net) => vec![
                n,
                net.space.in_channels,
                net.space.input_hw,
                net.space.input_hw,
            ],
            ProxyTarget::Supernet(net) | ProxyTarget::SupernetExcluding(net, _) => {
                net.input_shape(n)
            }
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        match self {
            ProxyTarget::Discrete(n) => n.flat_params(),
            ProxyTarget::Supernet(n) | ProxyTarget::SupernetExcluding(n, _) => {
                supernet_flat_weights(n, self.exclude())
            }
        }
    }

    fn with_params<T>(
        &self,
        params: &[f64],
        f: impl FnOnce(&ProxyTarget<'_>) -> Result<T, ScoreError>,
    ) -> Result<T, ScoreError> {
        match self {
            ProxyTarget::Discrete(n) => {
                let mut clone = (*n).clone();
                clone.set_flat_params(params)?;
                f(&ProxyTarget::Discrete(&clone))
            }
            ProxyTarget::Supernet(n) => {
                let mut clone = (*n).clone();
                set_supernet_flat_weights(&mut clone, params, None)?;
                f(&ProxyTarget::Supernet(&clone))
            }
            ProxyTarget::SupernetExcluding(n, eo) => {
                let mut clone = (*n).clone();
                set_supernet_flat_weights(&mut clone, params, Some(*eo))?;
                f(&ProxyTarget::SupernetExcluding(&clone, *eo))
            }
        }
    }
}

fn supernet_weight_ids(net: &Supernet, exclude: Option<(usize, usize)>) -> Vec<ParamId> {
    // same order the forward pass loads leaves: stem, alive edge ops, head
    let mut ids = Vec::new();
    let is_cell = matches!(net.space, Space::Cell(_));
    if is_cell {
        ids.push(ParamId::Stem);
    }
    for e in 0..net.num_edges() {
        for o in 0..net.space.ops_on_edge(e) {
            if net.is_alive(e, o) && exclude != Some((e, o)) && net.weight(e, o).is_some() {
                ids.push(ParamId::EdgeOp { edge: e, op: o });
            }
        }
    }
    if is_cell {
        ids.push(ParamId::Head);
    }
    ids
}

fn supernet_flat_weights(net: &Supernet, exclude: Option<(usize, usize)>) -> Vec<f64> {
    let mut out = Vec::new();
    for id in supernet_weight_ids(net, exclude) {
        let t = match id {
            ParamId::Stem => net.stem().unwrap(),
            ParamId::Head => net.head().unwrap(),
            ParamId::EdgeOp { edge, op } => net.weight(edge, op).unwrap(),
        };
        out.extend_from_slice(t.data());
    }
    out
}

fn set_supernet_flat_weights(
    net: &mut Supernet,
    params: &[f64],
    exclude: Option<(usize, usize)>,
) -> Result<(), ScoreError> {
    let ids = supernet_weight_ids(net, exclude);
    let mut offset = 0;
    for id in ids {
        let numel = match id {
            ParamId::Stem => net.stem().unwrap().numel(),
            ParamId::Head => net.head().unwrap().numel(),
            ParamId::EdgeOp { edge, op } => net.weight(edge, op).unwrap().numel(),
        };
        if offset + numel > params.len() {
            return Err(ScoreError::BadBatch("parameter vector too short".into()));
        }
        let slice = &params[offset..offset + numel];
        match id {
            ParamId::Stem => net.set_stem_data(slice),
            ParamId::Head => net.set_head_data(slice),
            ParamId::EdgeOp { edge, op } => {
                net.weight_mut(edge, op)
                    .unwrap()
                    .data_mut()
                    .copy_from_slice(slice);
            }
        }
        offset += numel;
    }
    if offset != params.len() {
        return Err(ScoreError::BadBatch("parameter vector too long".into()));
    }
    Ok(())
}

/// Loss and flat weight gradient on a labelled batch.
fn batch_loss_grad(target: &ProxyTarget<'_>, batch: &Batch) -> Result<(f64, Vec<f64>), ScoreError> {
    let (mut tape, out, weight_vars) = target.forward(&batch.x, WeightTransform::Identity)?;
    let loss = match &batch.targets {
        Targets::Classes(y) => tape.cross_entropy(out, y)?,
        Targets::Values(y) => {
            let n = y.len();
            let f = tape.row_sum(out)?;
            let t = tape.leaf(Tensor::from_vec(vec![n], y.clone())?, false);
            let neg = tape.scale(t, -1.0)?;
            let diff = tape.add(f, neg)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum_reduce(sq)?;
            tape.scale(total, 0.5 / n as f64)?
        }
    };
    let lv = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grad = Vec::new();
    for (_, v) in &weight_vars {
        match tape.grad(*v) {
            Some(g) => grad.extend_from_slice(g),
            None => grad.extend(std::iter::repeat(0.0).take(tape.value(*v).numel())),
        }
    }
    Ok((lv, grad))
}

/// Flat weight gradient of the all-ones absolute-weight flow loss.
fn synflow_grad(target: &ProxyTarget<'_>) -> Result<Vec<f64>, ScoreError> {
    let x = Tensor::ones(target.input_shape(1));
    let (mut tape, out, weight_vars) = target.forward(&x, WeightTransform::Absolute)?;
    let loss = tape.sum_reduce(out)?;
    tape.backward(loss)?;
    let mut grad = Vec::new();
    for (_, v) in &weight_vars {
        match tape.grad(*v) {
            Some(g) => grad.extend_from_slice(g),
            None => grad.extend(std::iter::repeat(0.0).take(tape.value(*v).numel())),
        }
    }
    Ok(grad)
}

/// Architecture-level score by summing parameter-wise saliencies.
pub fn proxy_score(
    target: &ProxyTarget<'_>,
    proxy: ProxyKind,
    batch: Option<&Batch>,
) -> Result<ProxyScore, ScoreError> {
    if proxy.needs_batch() && batch.is_none() {
        return Err(ScoreError::MissingBatch {
            proxy: proxy.name().into(),
        });
    }
    let theta = target.flat_params();
    let value = match proxy {
        ProxyKind::GradNorm => {
            let (_, g) = batch_loss_grad(target, batch.unwrap())?;
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        }
        ProxyKind::Snip => {
            let (_, g) = batch_loss_grad(target, batch.unwrap())?;
            g.iter().zip(&theta).map(|(g, t)| (g * t).abs()).sum()
        }
        ProxyKind::Grasp => {
            let batch = batch.unwrap();
            let (_, g) = batch_loss_grad(target, batch)?;
            let grad_fn = |p: &[f64]| -> Result<Vec<f64>, TensorError> {
                target
                    .with_params(p, |t| batch_loss_grad(t, batch).map(|(_, g)| g))
                    .map_err(|e| TensorError::Unsupported {
                        op: "grasp",
                        detail: e.to_string(),
                    })
            };
            let hg = hvp_finite_difference(grad_fn, &theta, &g, GRASP_HVP_EPS)?;
            hg.iter().zip(&theta).map(|(h, t)| (h * t).abs()).sum()
        }
        ProxyKind::SynFlow => {
            let g = synflow_grad(target)?;
            g.iter().zip(&theta).map(|(g, t)| (g * t).abs()).sum()
        }
    };
    if !value.is_finite() {
        return Err(ScoreError::NonFiniteLoss {
            variant: proxy.name().into(),
        });
    }
    Ok(ProxyScore {
        proxy,
        value,
        param_count: theta.len(),
    })
}

// ---- bias correlation --------------------------------------------------------

/// One sampled architecture with a proxy value and its parameter count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxySample {
    pub proxy: String,
    pub value: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub proxy: String,
    pub n: usize,
    /// `None` when a score vector is constant (correlation undefined).
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub per_proxy: Vec<CorrelationEntry>,
}

/// Spearman correlation between proxy value and parameter count, grouped by
/// proxy name.
pub fn bias_correlation(samples: &[ProxySample]) -> CorrelationReport {
    let mut names: Vec<String> = samples.iter().map(|s| s.proxy.clone()).collect();
    names.sort();
    names.dedup();
    let per_proxy = names
        .into_iter()
        .map(|name| {
            let (values, params): (Vec<f64>, Vec<f64>) = samples
                .iter()
                .filter(|s| s.proxy == name)
                .map(|s| (s.value, s.param_count as f64))
                .unzip();
            CorrelationEntry {
                proxy: name,
                n: values.len(),
                spearman: crate::stats::spearman(&values, &params),
            }
        })
        .collect();
    CorrelationReport { per_proxy }
}

/// Fraction of edges whose selected operation carries the maximum parameter
/// count among the space's candidates.
pub fn max_param_fraction(
    genotype: &crate::spaces::Genotype,
    ops: &[crate::spaces::OpKind],
    channels: usize,
) -> f64 {
    let max_params = ops
        .iter()
        .map(|o| o.param_count(channels))
        .max()
        .unwrap_or(0);
    if genotype.edge_ops.is_empty() {
        return 0.0;
    }
    let hits = genotype
        .edge_ops
        .iter()
        .filter(|o| o.param_count(channels) == max_params)
        .count();
    hits as f64 / genotype.edge_ops.len() as f64
}
