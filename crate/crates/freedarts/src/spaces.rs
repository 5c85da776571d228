//! Search spaces, supernet construction, and genotype serialization.
//!
//! Two space families are supported. The cell space is a DAG over
//! `num_nodes` nodes with every forward edge `(i -> j)`, `i < j`, carrying
//! one candidate operation per [`OpKind`]; mixing coefficients come from a
//! softmax over the edge's architecture parameters. The sequential space is
//! a chain of layers, each holding `branches` parallel linear(+activation)
//! candidates mixed by their raw architecture parameters; this is the shape
//! the kernel-level theory checks operate on.
//!
//! A `none` candidate never enters the softmax and never touches the tape,
//! so its architecture parameter is exactly disconnected from every loss:
//! its sensitivity score and its finite-difference estimate are both
//! identically zero.

use std::fmt;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid space: {0}")]
    InvalidSpace(String),
    #[error("input shape {got:?} does not match the space input shape {want:?}")]
    InputShape { got: Vec<usize>, want: Vec<usize> },
    #[error("node {node} has no alive input signal")]
    StarvedNode { node: usize },
    #[error("operation ({edge}, {op}) is not alive")]
    NotAlive { edge: usize, op: usize },
    #[error("cannot prune the last alive operation of edge {edge}")]
    LastOp { edge: usize },
    #[error("edge {edge} still has {alive} alive operations")]
    NotSingleton { edge: usize, alive: usize },
    #[error("edge/op index ({edge}, {op}) out of range")]
    IndexOutOfRange { edge: usize, op: usize },
    #[error("cannot parse genotype: {0}")]
    GenotypeParse(String),
}

/// Candidate operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    None,
    SkipConnect,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
    LinearRelu,
}

impl OpKind {
    pub const CELL_DEFAULT: [OpKind; 5] = [
        OpKind::None,
        OpKind::SkipConnect,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
        OpKind::AvgPool3x3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Conv1x1 => "conv_1x1",
            OpKind::Conv3x3 => "conv_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::LinearRelu => "linear_relu",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        match s {
            "none" => Some(OpKind::None),
            "skip_connect" => Some(OpKind::SkipConnect),
            "conv_1x1" => Some(OpKind::Conv1x1),
            "conv_3x3" => Some(OpKind::Conv3x3),
            "avg_pool_3x3" => Some(OpKind::AvgPool3x3),
            "linear_relu" => Some(OpKind::LinearRelu),
            _ => None,
        }
    }

    /// Trainable parameter count for a C -> C cell operation.
    pub fn param_count(&self, channels: usize) -> usize {
        match self {
            OpKind::Conv1x1 => channels * channels,
            OpKind::Conv3x3 => 9 * channels * channels,
            _ => 0,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, OpKind::Conv1x1 | OpKind::Conv3x3 | OpKind::LinearRelu)
    }
}

/// All forward edges of a cell DAG in destination-major order:
/// (0,1), (0,2), (1,2), (0,3), (1,3), (2,3), ...
pub fn cell_edges(num_nodes: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for dst in 1..num_nodes {
        for src in 0..dst {
            edges.push((src, dst));
        }
    }
    edges
}

/// Cell search space over a complete forward DAG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpace {
    pub num_nodes: usize,
    pub ops: Vec<OpKind>,
    pub channels: usize,
    pub input_hw: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl CellSpace {
    /// Four nodes, five candidate operations, desk-scale tensor sizes.
    pub fn default_cell() -> Self {
        CellSpace {
            num_nodes: 4,
            ops: OpKind::CELL_DEFAULT.to_vec(),
            channels: 8,
            input_hw: 8,
            in_channels: 3,
            num_classes: 10,
        }
    }

    /// Three nodes, three parameterized-or-skip operations: 27 genotypes.
    pub fn mini_space(num_classes: usize) -> Self {
        CellSpace {
            num_nodes: 3,
            ops: vec![OpKind::SkipConnect, OpKind::Conv1x1, OpKind::Conv3x3],
            channels: 8,
            input_hw: 8,
            in_channels: 3,
            num_classes,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.num_nodes * (self.num_nodes - 1) / 2
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        cell_edges(self.num_nodes)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.num_nodes < 2 {
            return Err(SpaceError::InvalidSpace("num_nodes must be >= 2".into()));
        }
        if self.ops.is_empty() {
            return Err(SpaceError::InvalidSpace("ops must be non-empty".into()));
        }
        if self.ops.iter().any(|o| *o == OpKind::LinearRelu) {
            return Err(SpaceError::InvalidSpace(
                "linear_relu is a sequential-space operation".into(),
            ));
        }
        if self.channels == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(SpaceError::InvalidSpace(
                "channels, in_channels, num_classes must be positive".into(),
            ));
        }
        if self.input_hw == 0 || self.input_hw > 16 {
            return Err(SpaceError::InvalidSpace(format!(
                "input_hw {} out of the supported range 1..=16 (convolutions are direct)",
                self.input_hw
            )));
        }
        Ok(())
    }
}

/// Activation for sequential-space branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Chain of `depth` layers; each layer holds `branches` parallel candidates
/// `h_k = act(h_prev * theta_k)` mixed by raw architecture parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialSpace {
    pub depth: usize,
    pub branches: usize,
    /// `widths[0]` is the input dimension, `widths[l]` the width of layer l.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl SequentialSpace {
    pub fn uniform(depth: usize, branches: usize, width: usize, activation: Activation) -> Self {
        SequentialSpace {
            depth,
            branches,
            widths: vec![width; depth + 1],
            activation,
        }
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.depth == 0 || self.branches == 0 {
            return Err(SpaceError::InvalidSpace(
                "depth and branches must be positive".into(),
            ));
        }
        if self.widths.len() != self.depth + 1 || self.widths.iter().any(|&w| w == 0) {
            return Err(SpaceError::InvalidSpace(format!(
                "widths must hold {} positive entries",
                self.depth + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Space {
    Cell(CellSpace),
    Sequential(SequentialSpace),
}

impl Space {
    pub fn validate(&self) -> Result<(), SpaceError> {
        match self {
            Space::Cell(c) => c.validate(),
            Space::Sequential(s) => s.validate(),
        }
    }

    /// Number of prunable slots: edges for cells, layers for chains.
    pub fn num_edges(&self) -> usize {
        match self {
            Space::Cell(c) => c.num_edges(),
            Space::Sequential(s) => s.depth,
        }
    }

    /// Candidate count on a given edge.
    pub fn ops_on_edge(&self, _edge: usize) -> usize {
        match self {
            Space::Cell(c) => c.ops.len(),
            Space::Sequential(s) => s.branches,
        }
    }
}

/// How stored weights enter a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightTransform {
    Identity,
    /// Element-wise absolute value applied on the tape; stored weights are
    /// untouched.
    Absolute,
}

/// Identifies one weight tensor of a supernet or discrete network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamId {
    Stem,
    EdgeOp { edge: usize, op: usize },
    Head,
}

/// The searchable over-parameterized network: all candidate operations with
/// architecture parameters `alpha` and weight parameters, plus the alive
/// mask driven by pruning.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub space: Space,
    /// Per-(edge, op) weight tensors; `None` for parameter-free candidates.
    weights: Vec<Vec<Option<Tensor>>>,
    stem: Option<Tensor>,
    head: Option<Tensor>,
    alpha: Vec<Vec<f64>>,
    alive: Vec<Vec<bool>>,
    pub seed: u64,
    pub alpha_scale: f64,
}

/// Everything a scoring or kernel pass needs from one supernet forward.
pub struct ForwardPass {
    pub tape: Tape,
    /// Cell: logits (n, num_classes). Sequential: final hidden state (n, m_L).
    pub output: Var,
    /// Raw alpha leaves per (edge, op); `None` for pruned candidates.
    pub alpha_vars: Vec<Vec<Option<Var>>>,
    /// Post-softmax mixing weights per (edge, op) for cells (`None` for
    /// pruned or `none` candidates); raw alpha leaves for sequential nets.
    pub mix_vars: Vec<Vec<Option<Var>>>,
    /// Raw weight leaves in deterministic order: stem, edge ops, head.
    pub weight_vars: Vec<(ParamId, Var)>,
    /// Cell: per-node features. Sequential: mixed hidden state per layer.
    pub node_vars: Vec<Var>,
    /// Sequential only: per (layer, branch) pre-mixing branch outputs.
    pub branch_vars: Vec<Vec<Option<Var>>>,
}

/// Initialize a supernet: `alpha ~ alpha_scale * N(0, 1)` per candidate,
/// weights Kaiming-style `N(0, 2 / fan_in)`, everything alive.
/// Deterministic per seed.
pub fn init_supernet(space: &Space, seed: u64, alpha_scale: f64) -> Result<Supernet, SpaceError> {
    space.validate()?;
    if !(alpha_scale > 0.0) || !alpha_scale.is_finite() {
        return Err(SpaceError::InvalidSpace(format!(
            "alpha_scale must be positive and finite, got {alpha_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect()
    };

    let (weights, stem, head) = match space {
        Space::Cell(c) => {
            let stem_fan = c.in_channels * 9;
            let stem = Tensor::from_vec(
                vec![c.channels, c.in_channels, 3, 3],
                normal(c.channels * c.in_channels * 9, (2.0 / stem_fan as f64).sqrt()),
            )?;
            let mut weights = Vec::with_capacity(c.num_edges());
            for _ in 0..c.num_edges() {
                let mut per_op = Vec::with_capacity(c.ops.len());
                for op in &c.ops {
                    per_op.push(match op {
                        OpKind::Conv1x1 => Some(Tensor::from_vec(
                            vec![c.channels, c.channels, 1, 1],
                            normal(c.channels * c.channels, (2.0 / c.channels as f64).sqrt()),
                        )?),
                        OpKind::Conv3x3 => Some(Tensor::from_vec(
                            vec![c.channels, c.channels, 3, 3],
                            normal(
                                9 * c.channels * c.channels,
                                (2.0 / (9 * c.channels) as f64).sqrt(),
                            ),
                        )?),
                        _ => None,
                    });
                }
                weights.push(per_op);
            }
            let head = Tensor::from_vec(
                vec![c.channels, c.num_classes],
                normal(c.channels * c.num_classes, (2.0 / c.channels as f64).sqrt()),
            )?;
            (weights, Some(stem), Some(head))
        }
        Space::Sequential(s) => {
            let mut weights = Vec::with_capacity(s.depth);
            for l in 0..s.depth {
                let (fan_in, fan_out) = (s.widths[l], s.widths[l + 1]);
                let mut per_op = Vec::with_capacity(s.branches);
                for _ in 0..s.branches {
                    per_op.push(Some(Tensor::from_vec(
                        vec![fan_in, fan_out],
                        normal(fan_in * fan_out, (2.0 / fan_in as f64).sqrt()),
                    )?));
                }
                weights.push(per_op);
            }
            (weights, None, None)
        }
    };

    let num_edges = space.num_edges();
    let mut alpha = Vec::with_capacity(num_edges);
    let mut alive = Vec::with_capacity(num_edges);
    for e in 0..num_edges {
        let k = space.ops_on_edge(e);
        alpha.push(normal(k, alpha_scale));
        alive.push(vec![true; k]);
    }

    Ok(Supernet {
        space: space.clone(),
        weights,
        stem,
        head,
        alpha,
        alive,
        seed,
        alpha_scale,
    })
}

impl Supernet {
    pub fn num_edges(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, edge: usize, op: usize) -> f64 {
        self.alpha[edge][op]
    }

    pub fn alpha_table(&self) -> &[Vec<f64>] {
        &self.alpha
    }

    pub fn set_alpha(&mut self, edge: usize, op: usize, value: f64) {
        self.alpha[edge][op] = value;
    }

    pub fn is_alive(&self, edge: usize, op: usize) -> bool {
        self.alive[edge][op]
    }

    pub fn alive_count(&self, edge: usize) -> usize {
        self.alive[edge].iter().filter(|a| **a).count()
    }

    pub fn weight(&self, edge: usize, op: usize) -> Option<&Tensor> {
        self.weights[edge][op].as_ref()
    }

    pub fn weight_mut(&mut self, edge: usize, op: usize) -> Option<&mut Tensor> {
        self.weights[edge][op].as_mut()
    }

    pub fn stem(&self) -> Option<&Tensor> {
        self.stem.as_ref()
    }

    pub fn head(&self) -> Option<&Tensor> {
        self.head.as_ref()
    }

    pub fn set_stem_data(&mut self, data: &[f64]) {
        if let Some(t) = self.stem.as_mut() {
            t.data_mut().copy_from_slice(data);
        }
    }

    pub fn set_head_data(&mut self, data: &[f64]) {
        if let Some(t) = self.head.as_mut() {
            t.data_mut().copy_from_slice(data);
        }
    }

    /// Remaining prunes until every edge is a singleton.
    pub fn prunes_remaining(&self) -> usize {
        self.alive
            .iter()
            .map(|ops| ops.iter().filter(|a| **a).count() - 1)
            .sum()
    }

    pub fn all_singleton(&self) -> bool {
        self.alive
            .iter()
            .all(|ops| ops.iter().filter(|a| **a).count() == 1)
    }

    /// Mark a candidate dead. Refuses to empty an edge.
    pub fn prune(&mut self, edge: usize, op: usize) -> Result<(), SpaceError> {
        if edge >= self.alive.len() || op >= self.alive[edge].len() {
            return Err(SpaceError::IndexOutOfRange { edge, op });
        }
        if !self.alive[edge][op] {
            return Err(SpaceError::NotAlive { edge, op });
        }
        if self.alive_count(edge) < 2 {
            return Err(SpaceError::LastOp { edge });
        }
        self.alive[edge][op] = false;
        Ok(())
    }

    /// Expected input shape for a forward pass with batch size `n`.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        match &self.space {
            Space::Cell(c) => vec![n, c.in_channels, c.input_hw, c.input_hw],
            Space::Sequential(s) => vec![n, s.widths[0]],
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        transform: WeightTransform,
    ) -> Result<ForwardPass, SpaceError> {
        self.forward_excluding(x, transform, None)
    }

    /// Forward pass with an optional candidate masked out for this pass
    /// only (leave-one-out scoring).
    pub fn forward_excluding(
        &self,
        x: &Tensor,
        transform: WeightTransform,
        exclude: Option<(usize, usize)>,
    ) -> Result<ForwardPass, SpaceError> {
        match &self.space {
            Space::Cell(c) => self.forward_cell(c, x, transform, exclude),
            Space::Sequential(s) => self.forward_sequential(s, x, transform, exclude),
        }
    }

    fn live(&self, edge: usize, op: usize, exclude: Option<(usize, usize)>) -> bool {
        self.alive[edge][op] && exclude != Some((edge, op))
    }

    fn forward_cell(
        &self,
        c: &CellSpace,
        x: &Tensor,
        transform: WeightTransform,
        exclude: Option<(usize, usize)>,
    ) -> Result<ForwardPass, SpaceError> {
        let want = self.input_shape(x.shape().first().copied().unwrap_or(0));
        if x.shape() != want.as_slice() {
            return Err(SpaceError::InputShape {
                got: x.shape().to_vec(),
                want,
            });
        }

        // starved-node check: a node must receive signal from at least one
        // alive non-none candidate on some incoming edge
        let edges = c.edges();
        {
            let mut has_signal = vec![false; c.num_nodes];
            has_signal[0] = true;
            for (e, (src, dst)) in edges.iter().enumerate() {
                if !has_signal[*src] {
                    continue;
                }
                let feeds = c
                    .ops
                    .iter()
                    .enumerate()
                    .any(|(o, kind)| *kind != OpKind::None && self.live(e, o, exclude));
                if feeds {
                    has_signal[*dst] = true;
                }
            }
            if let Some(node) = (1..c.num_nodes).find(|&j| !has_signal[j]) {
                return Err(SpaceError::StarvedNode { node });
            }
        }

        let mut tape = Tape::new();
        let mut weight_vars = Vec::new();
        let load = |tape: &mut Tape,
                        weight_vars: &mut Vec<(ParamId, Var)>,
                        id: ParamId,
                        t: &Tensor|
         -> Result<Var, SpaceError> {
            let leaf = tape.leaf(t.clone(), true);
            weight_vars.push((id, leaf));
            let used = match transform {
                WeightTransform::Identity => leaf,
                WeightTransform::Absolute => tape.abs(leaf)?,
            };
            Ok(used)
        };

        let xin = tape.leaf(x.clone(), false);
        let stem_w = load(
            &mut tape,
            &mut weight_vars,
            ParamId::Stem,
            self.stem.as_ref().unwrap(),
        )?;
        let stem_out = tape.conv2d(xin, stem_w)?;

        let mut edge_weight_used: Vec<Vec<Option<Var>>> = Vec::with_capacity(edges.len());
        for (e, _) in edges.iter().enumerate() {
            let mut per_op = Vec::with_capacity(c.ops.len());
            for (o, _) in c.ops.iter().enumerate() {
                per_op.push(match &self.weights[e][o] {
                    Some(t) if self.live(e, o, exclude) => Some(load(
                        &mut tape,
                        &mut weight_vars,
                        ParamId::EdgeOp { edge: e, op: o },
                        t,
                    )?),
                    _ => None,
                });
            }
            edge_weight_used.push(per_op);
        }
        let head_w = load(
            &mut tape,
            &mut weight_vars,
            ParamId::Head,
            self.head.as_ref().unwrap(),
        )?;

        let num_edges = edges.len();
        let mut alpha_vars: Vec<Vec<Option<Var>>> = vec![vec![None; c.ops.len()]; num_edges];
        let mut mix_vars: Vec<Vec<Option<Var>>> = vec![vec![None; c.ops.len()]; num_edges];

        let mut node_feats: Vec<Option<Var>> = vec![None; c.num_nodes];
        node_feats[0] = Some(stem_out);

        for (e, (src, dst)) in edges.iter().enumerate() {
            // every alive candidate gets an alpha leaf; `none` stays
            // disconnected from the rest of the graph
            let mut mixed_ops: Vec<usize> = Vec::new();
            for (o, kind) in c.ops.iter().enumerate() {
                if !self.live(e, o, exclude) {
                    continue;
                }
                let leaf = tape.scalar_leaf(self.alpha[e][o], true);
                alpha_vars[e][o] = Some(leaf);
                if *kind != OpKind::None {
                    mixed_ops.push(o);
                }
            }
            let Some(input) = node_feats[*src] else {
                continue;
            };
            if mixed_ops.is_empty() {
                continue;
            }
            let alphas: Vec<Var> = mixed_ops
                .iter()
                .map(|&o| alpha_vars[e][o].unwrap())
                .collect();
            let stacked = tape.concat(&alphas)?;
            let soft = tape.softmax(stacked)?;
            let mut edge_out: Option<Var> = None;
            for (slot, &o) in mixed_ops.iter().enumerate() {
                let weight = tape.index(soft, slot)?;
                mix_vars[e][o] = Some(weight);
                let branch = match c.ops[o] {
                    OpKind::SkipConnect => tape.identity(input)?,
                    OpKind::AvgPool3x3 => tape.avg_pool3x3(input)?,
                    OpKind::Conv1x1 | OpKind::Conv3x3 => {
                        let pre = tape.relu(input)?;
                        tape.conv2d(pre, edge_weight_used[e][o].unwrap())?
                    }
                    OpKind::None | OpKind::LinearRelu => unreachable!(),
                };
                let scaled = tape.scale_by(branch, weight)?;
                edge_out = Some(match edge_out {
                    Some(acc) => tape.add(acc, scaled)?,
                    None => scaled,
                });
            }
            if let Some(eo) = edge_out {
                node_feats[*dst] = Some(match node_feats[*dst] {
                    Some(acc) => tape.add(acc, eo)?,
                    None => eo,
                });
            }
        }

        let last = node_feats[c.num_nodes - 1].expect("starved-node check passed");
        let pooled = tape.global_avg_pool(last)?;
        let logits = tape.matmul(pooled, head_w)?;

        let node_vars = node_feats.into_iter().map(|v| v.unwrap()).collect();
        Ok(ForwardPass {
            tape,
            output: logits,
            alpha_vars,
            mix_vars,
            weight_vars,
            node_vars,
            branch_vars: Vec::new(),
        })
    }

    fn forward_sequential(
        &self,
        s: &SequentialSpace,
        x: &Tensor,
        transform: WeightTransform,
        exclude: Option<(usize, usize)>,
    ) -> Result<ForwardPass, SpaceError> {
        let want = self.input_shape(x.shape().first().copied().unwrap_or(0));
        if x.shape() != want.as_slice() {
            return Err(SpaceError::InputShape {
                got: x.shape().to_vec(),
                want,
            });
        }
        for l in 0..s.depth {
            let any = (0..s.branches).any(|k| self.live(l, k, exclude));
            if !any {
                return Err(SpaceError::StarvedNode { node: l + 1 });
            }
        }

        let mut tape = Tape::new();
        let mut weight_vars = Vec::new();
        let mut alpha_vars: Vec<Vec<Option<Var>>> = vec![vec![None; s.branches]; s.depth];
        let mut branch_vars: Vec<Vec<Option<Var>>> = vec![vec![None; s.branches]; s.depth];
        let mut node_vars = Vec::with_capacity(s.depth);

        let mut h = tape.leaf(x.clone(), false);
        for l in 0..s.depth {
            let mut mixed: Option<Var> = None;
            for k in 0..s.branches {
                if !self.live(l, k, exclude) {
                    continue;
                }
                let theta = self.weights[l][k].as_ref().unwrap();
                let leaf = tape.leaf(theta.clone(), true);
                weight_vars.push((ParamId::EdgeOp { edge: l, op: k }, leaf));
                let used = match transform {
                    WeightTransform::Identity => leaf,
                    WeightTransform::Absolute => tape.abs(leaf)?,
                };
                let z = tape.matmul(h, used)?;
                let act = match s.activation {
                    Activation::Relu => tape.relu(z)?,
                    Activation::Identity => z,
                };
                branch_vars[l][k] = Some(act);
                let a = tape.scalar_leaf(self.alpha[l][k], true);
                alpha_vars[l][k] = Some(a);
                let scaled = tape.scale_by(act, a)?;
                mixed = Some(match mixed {
                    Some(acc) => tape.add(acc, scaled)?,
                    None => scaled,
                });
            }
            h = mixed.expect("starved-layer check passed");
            node_vars.push(h);
        }

        let mix_vars = alpha_vars.clone();
        Ok(ForwardPass {
            tape,
            output: h,
            alpha_vars,
            mix_vars,
            weight_vars,
            node_vars,
            branch_vars,
        })
    }

    /// Discrete architecture once every edge is a singleton.
    pub fn to_genotype(&self) -> Result<Genotype, SpaceError> {
        for (e, ops) in self.alive.iter().enumerate() {
            let alive = ops.iter().filter(|a| **a).count();
            if alive != 1 {
                return Err(SpaceError::NotSingleton { edge: e, alive });
            }
        }
        Ok(self.argmax_genotype())
    }

    /// Per-edge argmax of alpha over alive candidates; ties resolve to the
    /// lowest operation index.
    pub fn argmax_genotype(&self) -> Genotype {
        let mut edge_ops = Vec::with_capacity(self.num_edges());
        let mut edge_op_indices = Vec::with_capacity(self.num_edges());
        for e in 0..self.num_edges() {
            let mut best: Option<(usize, f64)> = None;
            for (o, &alive) in self.alive[e].iter().enumerate() {
                if !alive {
                    continue;
                }
                let a = self.alpha[e][o];
                if best.map_or(true, |(_, cur)| a > cur) {
                    best = Some((o, a));
                }
            }
            let (o, _) = best.expect("every edge keeps at least one alive op");
            edge_op_indices.push(o);
            edge_ops.push(self.op_kind(e, o));
        }
        Genotype {
            num_nodes: self.genotype_nodes(),
            edge_ops,
            edge_op_indices,
        }
    }

    fn op_kind(&self, _edge: usize, op: usize) -> OpKind {
        match &self.space {
            Space::Cell(c) => c.ops[op],
            Space::Sequential(_) => OpKind::LinearRelu,
        }
    }

    fn genotype_nodes(&self) -> usize {
        match &self.space {
            Space::Cell(c) => c.num_nodes,
            Space::Sequential(s) => s.depth + 1,
        }
    }
}

/// Discrete architecture: exactly one operation per edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub num_nodes: usize,
    pub edge_ops: Vec<OpKind>,
    /// Index of the chosen op within the space's candidate list; equals the
    /// position in `ops` for cells and the branch index for chains.
    pub edge_op_indices: Vec<usize>,
}

impl Genotype {
    pub fn new(num_nodes: usize, edge_ops: Vec<OpKind>, edge_op_indices: Vec<usize>) -> Self {
        Genotype {
            num_nodes,
            edge_ops,
            edge_op_indices,
        }
    }

    /// Canonical form: edges grouped by destination node,
    /// `|op~0|+|op~0|op~1|+...`.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        let mut idx = 0;
        let sequential = self.is_sequential();
        for dst in 1..self.num_nodes {
            if dst > 1 {
                out.push('+');
            }
            out.push('|');
            if sequential {
                out.push_str(&format!("{}~{}", self.edge_ops[idx].name(), dst - 1));
                out.push('|');
                idx += 1;
            } else {
                for src in 0..dst {
                    out.push_str(&format!("{}~{}", self.edge_ops[idx].name(), src));
                    out.push('|');
                    idx += 1;
                }
            }
        }
        out
    }

    fn is_sequential(&self) -> bool {
        self.edge_ops.iter().all(|o| *o == OpKind::LinearRelu)
    }

    /// Parse the canonical form, rejecting malformed strings.
    pub fn parse(s: &str) -> Result<Genotype, SpaceError> {
        let bad = |msg: &str| SpaceError::GenotypeParse(format!("{msg}: {s:?}"));
        if s.is_empty() {
            return Err(bad("empty string"));
        }
        let groups: Vec<&str> = s.split('+').collect();
        let mut edge_ops = Vec::new();
        let mut sequential = None;
        for (gi, group) in groups.iter().enumerate() {
            if !group.starts_with('|') || !group.ends_with('|') || group.len() < 2 {
                return Err(bad("group must be delimited by '|'"));
            }
            let tokens: Vec<&str> = group[1..group.len() - 1].split('|').collect();
            if tokens.is_empty() || tokens.iter().any(|t| t.is_empty()) {
                return Err(bad("empty token"));
            }
            for (ti, token) in tokens.iter().enumerate() {
                let (name, src) = token
                    .rsplit_once('~')
                    .ok_or_else(|| bad("token missing '~'"))?;
                let op = OpKind::parse(name).ok_or_else(|| bad("unknown operation"))?;
                let src: usize = src.parse().map_err(|_| bad("bad source index"))?;
                let is_seq = op == OpKind::LinearRelu;
                match sequential {
                    None => sequential = Some(is_seq),
                    Some(flag) if flag != is_seq => {
                        return Err(bad("mixed sequential and cell operations"))
                    }
                    _ => {}
                }
                if is_seq {
                    if tokens.len() != 1 || src != gi {
                        return Err(bad("sequential group must be |linear_relu~{layer-1}|"));
                    }
                } else if tokens.len() != gi + 1 || src != ti {
                    return Err(bad("cell group g must list sources 0..=g in order"));
                }
                edge_ops.push(op);
            }
        }
        let num_nodes = groups.len() + 1;
        // op indices are meaningful relative to a space; default to the
        // standard candidate list positions
        let edge_op_indices = edge_ops
            .iter()
            .map(|op| {
                OpKind::CELL_DEFAULT
                    .iter()
                    .position(|k| k == op)
                    .unwrap_or(0)
            })
            .collect();
        Ok(Genotype {
            num_nodes,
            edge_ops,
            edge_op_indices,
        })
    }

    /// Re-derive op indices against a specific candidate list.
    pub fn with_space_indices(mut self, ops: &[OpKind]) -> Result<Genotype, SpaceError> {
        let mut indices = Vec::with_capacity(self.edge_ops.len());
        for op in &self.edge_ops {
            let idx = ops.iter().position(|k| k == op).ok_or_else(|| {
                SpaceError::GenotypeParse(format!("operation {} not in space", op.name()))
            })?;
            indices.push(idx);
        }
        self.edge_op_indices = indices;
        Ok(self)
    }

    /// Total parameters of the chosen operations for a cell space.
    pub fn op_param_count(&self, channels: usize) -> usize {
        self.edge_ops.iter().map(|o| o.param_count(channels)).sum()
    }

    /// First node with no alive input signal under this genotype, if any.
    pub fn starved_node(&self) -> Option<usize> {
        if self.is_sequential() {
            return None;
        }
        let mut has_signal = vec![false; self.num_nodes];
        has_signal[0] = true;
        for (e, (src, dst)) in cell_edges(self.num_nodes).into_iter().enumerate() {
            if has_signal[src] && self.edge_ops[e] != OpKind::None {
                has_signal[dst] = true;
            }
        }
        (1..self.num_nodes).find(|&j| !has_signal[j])
    }

    pub fn distinct_op_kinds(&self) -> usize {
        let mut kinds: Vec<OpKind> = self.edge_ops.clone();
        kinds.sort();
        kinds.dedup();
        kinds.len()
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_string())
    }
}

impl FromStr for Genotype {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Genotype::parse(s)
    }
}

impl Serialize for Genotype {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.canonical_string())
    }
}

impl<'de> Deserialize<'de> for Genotype {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Genotype::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A standalone cell network built from a genotype: stem, one operation per
/// surviving edge, global average pool, linear head.
#[derive(Debug, Clone)]
pub struct DiscreteNet {
    pub space: CellSpace,
    pub genotype: Genotype,
    pub stem: Tensor,
    pub head: Tensor,
    /// Conv kernels per edge; `None` for parameter-free operations.
    pub edge_weights: Vec<Option<Tensor>>,
}

/// Forward artifacts of a discrete network.
pub struct DiscreteForward {
    pub tape: Tape,
    pub logits: Var,
    pub weight_vars: Vec<(ParamId, Var)>,
}

impl DiscreteNet {
    /// Fresh Kaiming initialization, deterministic per seed.
    pub fn init(space: &CellSpace, genotype: &Genotype, seed: u64) -> Result<Self, SpaceError> {
        space.validate()?;
        if genotype.edge_ops.len() != space.num_edges() || genotype.num_nodes != space.num_nodes {
            return Err(SpaceError::InvalidSpace(format!(
                "genotype {} does not fit a {}-node space",
                genotype, space.num_nodes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect()
        };
        let c = space.channels;
        let stem_fan = space.in_channels * 9;
        let stem = Tensor::from_vec(
            vec![c, space.in_channels, 3, 3],
            normal(c * space.in_channels * 9, (2.0 / stem_fan as f64).sqrt()),
        )?;
        let mut edge_weights = Vec::with_capacity(genotype.edge_ops.len());
        for op in &genotype.edge_ops {
            edge_weights.push(match op {
                OpKind::Conv1x1 => Some(Tensor::from_vec(
                    vec![c, c, 1, 1],
                    normal(c * c, (2.0 / c as f64).sqrt()),
                )?),
                OpKind::Conv3x3 => Some(Tensor::from_vec(
                    vec![c, c, 3, 3],
                    normal(9 * c * c, (2.0 / (9 * c) as f64).sqrt()),
                )?),
                _ => None,
            });
        }
        let head = Tensor::from_vec(
            vec![c, space.num_classes],
            normal(c * space.num_classes, (2.0 / c as f64).sqrt()),
        )?;
        Ok(DiscreteNet {
            space: space.clone(),
            genotype: genotype.clone(),
            stem,
            head,
            edge_weights,
        })
    }

    /// Copy the surviving weights out of a singleton supernet so both
    /// networks compute the same function.
    pub fn from_supernet(net: &Supernet) -> Result<Self, SpaceError> {
        let Space::Cell(space) = &net.space else {
            return Err(SpaceError::InvalidSpace(
                "discrete networks are built from cell spaces".into(),
            ));
        };
        let genotype = net.to_genotype()?;
        let mut edge_weights = Vec::with_capacity(genotype.edge_ops.len());
        for (e, &o) in genotype.edge_op_indices.iter().enumerate() {
            edge_weights.push(net.weights[e][o].clone());
        }
        Ok(DiscreteNet {
            space: space.clone(),
            genotype,
            stem: net.stem.clone().unwrap(),
            head: net.head.clone().unwrap(),
            edge_weights,
        })
    }

    /// Total trainable parameters (stem + chosen operations + head).
    pub fn param_count(&self) -> usize {
        self.stem.numel()
            + self.head.numel()
            + self
                .edge_weights
                .iter()
                .filter_map(|w| w.as_ref().map(Tensor::numel))
                .sum::<usize>()
    }

    pub fn forward(
        &self,
        x: &Tensor,
        transform: WeightTransform,
    ) -> Result<DiscreteForward, SpaceError> {
        let n = x.shape().first().copied().unwrap_or(0);
        let want = vec![
            n,
            self.space.in_channels,
            self.space.input_hw,
            self.space.input_hw,
        ];
        if x.shape() != want.as_slice() {
            return Err(SpaceError::InputShape {
                got: x.shape().to_vec(),
                want,
            });
        }
        let edges = self.space.edges();
        {
            let mut has_signal = vec![false; self.space.num_nodes];
            has_signal[0] = true;
            for (e, (src, dst)) in edges.iter().enumerate() {
                if has_signal[*src] && self.genotype.edge_ops[e] != OpKind::None {
                    has_signal[*dst] = true;
                }
            }
            if let Some(node) = (1..self.space.num_nodes).find(|&j| !has_signal[j]) {
                return Err(SpaceError::StarvedNode { node });
            }
        }

        let mut tape = Tape::new();
        let mut weight_vars = Vec::new();
        let load = |tape: &mut Tape,
                        weight_vars: &mut Vec<(ParamId, Var)>,
                        id: ParamId,
                        t: &Tensor|
         -> Result<Var, SpaceError> {
            let leaf = tape.leaf(t.clone(), true);
            weight_vars.push((id, leaf));
            Ok(match transform {
                WeightTransform::Identity => leaf,
                WeightTransform::Absolute => tape.abs(leaf)?,
            })
        };

        let xin = tape.leaf(x.clone(), false);
        let stem_w = load(&mut tape, &mut weight_vars, ParamId::Stem, &self.stem)?;
        let stem_out = tape.conv2d(xin, stem_w)?;

        let mut edge_w_used: Vec<Option<Var>> = Vec::with_capacity(edges.len());
        for (e, w) in self.edge_weights.iter().enumerate() {
            edge_w_used.push(match w {
                Some(t) => Some(load(
                    &mut tape,
                    &mut weight_vars,
                    ParamId::EdgeOp {
                        edge: e,
                        op: self.genotype.edge_op_indices[e],
                    },
                    t,
                )?),
                None => None,
            });
        }
        let head_w = load(&mut tape, &mut weight_vars, ParamId::Head, &self.head)?;

        let mut node_feats: Vec<Option<Var>> = vec![None; self.space.num_nodes];
        node_feats[0] = Some(stem_out);
        for (e, (src, dst)) in edges.iter().enumerate() {
            let Some(input) = node_feats[*src] else {
                continue;
            };
            let branch = match self.genotype.edge_ops[e] {
                OpKind::None => continue,
                OpKind::SkipConnect => tape.identity(input)?,
                OpKind::AvgPool3x3 => tape.avg_pool3x3(input)?,
                OpKind::Conv1x1 | OpKind::Conv3x3 => {
                    let pre = tape.relu(input)?;
                    tape.conv2d(pre, edge_w_used[e].unwrap())?
                }
                OpKind::LinearRelu => {
                    return Err(SpaceError::InvalidSpace(
                        "linear_relu inside a cell genotype".into(),
                    ))
                }
            };
            node_feats[*dst] = Some(match node_feats[*dst] {
                Some(acc) => tape.add(acc, branch)?,
                None => branch,
            });
        }
        let last = node_feats[self.space.num_nodes - 1].expect("starved-node check passed");
        let pooled = tape.global_avg_pool(last)?;
        let logits = tape.matmul(pooled, head_w)?;
        Ok(DiscreteForward {
            tape,
            logits,
            weight_vars,
        })
    }

    /// Concatenate all trainable parameters (stem, edge kernels, head).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.stem.data());
        for w in self.edge_weights.iter().flatten() {
            out.extend_from_slice(w.data());
        }
        out.extend_from_slice(self.head.data());
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), SpaceError> {
        if params.len() != self.param_count() {
            return Err(SpaceError::InvalidSpace(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        let mut take = |t: &mut Tensor| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&params[offset..offset + n]);
            offset += n;
        };
        take(&mut self.stem);
        for w in self.edge_weights.iter_mut().flatten() {
            take(w);
        }
        take(&mut self.head);
        Ok(())
    }
}

/// JSON space configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub space: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hw: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branches: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            space: "cell".into(),
            num_nodes: None,
            ops: None,
            channels: None,
            input_hw: None,
            num_classes: None,
            depth: None,
            branches: None,
            width: None,
        }
    }
}

impl SpaceConfig {
    pub fn build(&self) -> Result<Space, SpaceError> {
        let space = match self.space.as_str() {
            "cell" => {
                let defaults = CellSpace::default_cell();
                let ops = match &self.ops {
                    Some(names) => names
                        .iter()
                        .map(|n| {
                            OpKind::parse(n)
                                .ok_or_else(|| SpaceError::InvalidSpace(format!("unknown op {n:?}")))
                        })
                        .collect::<Result<Vec<_>, _>>()?,
                    None => defaults.ops.clone(),
                };
                Space::Cell(CellSpace {
                    num_nodes: self.num_nodes.unwrap_or(defaults.num_nodes),
                    ops,
                    channels: self.channels.unwrap_or(defaults.channels),
                    input_hw: self.input_hw.unwrap_or(defaults.input_hw),
                    in_channels: defaults.in_channels,
                    num_classes: self.num_classes.unwrap_or(defaults.num_classes),
                })
            }
            "sequential" => Space::Sequential(SequentialSpace::uniform(
                self.depth.unwrap_or(2),
                self.branches.unwrap_or(3),
                self.width.unwrap_or(16),
                Activation::Relu,
            )),
            other => {
                return Err(SpaceError::InvalidSpace(format!(
                    "space must be \"cell\" or \"sequential\", got {other:?}"
                )))
            }
        };
        space.validate()?;
        Ok(space)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_input(net: &Supernet, n: usize) -> Tensor {
        Tensor::ones(net.input_shape(n))
    }

    #[test]
    fn default_cell_has_thirty_alpha_scalars() {
        let space = Space::Cell(CellSpace::default_cell());
        let net = init_supernet(&space, 0, 1e-3).unwrap();
        assert_eq!(net.num_edges(), 6);
        let total: usize = net.alpha_table().iter().map(Vec::len).sum();
        assert_eq!(total, 30);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let space = Space::Cell(CellSpace::default_cell());
        let a = init_supernet(&space, 42, 1e-3).unwrap();
        let b = init_supernet(&space, 42, 1e-3).unwrap();
        assert_eq!(a.alpha_table(), b.alpha_table());
        assert_eq!(a.stem().unwrap(), b.stem().unwrap());
        let c = init_supernet(&space, 43, 1e-3).unwrap();
        assert_ne!(a.alpha_table(), c.alpha_table());
    }

    #[test]
    fn alpha_sample_std_tracks_scale() {
        // 400 layers x 3 branches = 1200 alpha entries
        let space = Space::Sequential(SequentialSpace::uniform(400, 3, 2, Activation::Relu));
        let net = init_supernet(&space, 7, 1e-3).unwrap();
        let all: Vec<f64> = net.alpha_table().iter().flatten().copied().collect();
        assert!(all.len() >= 1000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - 1e-3).abs() / 1e-3 < 0.2,
            "sample std {std} not within 20% of 1e-3"
        );
    }

    #[test]
    fn skip_only_forward_matches_hand_path() {
        // prune every edge down to skip_connect, feed ones
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 3, 1e-3).unwrap();
        let skip = 1; // position in CELL_DEFAULT
        for e in 0..net.num_edges() {
            for o in 0..5 {
                if o != skip {
                    net.prune(e, o).unwrap();
                }
            }
        }
        let x = ones_input(&net, 1);
        let fwd = net.forward(&x, WeightTransform::Identity).unwrap();
        let got = fwd.tape.value(fwd.output).data().to_vec();

        // hand-evaluated path: node0 = stem(x); node1 = node0;
        // node2 = node0 + node1; node3 = node0 + node1 + node2;
        // logits = GAP(node3) * head. Singleton softmax weights are 1.0,
        // multiplying by them is exact.
        let mut tape = Tape::new();
        let xin = tape.leaf(x.clone(), false);
        let stem_w = tape.leaf(net.stem().unwrap().clone(), false);
        let n0 = tape.conv2d(xin, stem_w).unwrap();
        let one = tape.scalar_leaf(1.0, false);
        let mk = |tape: &mut Tape, v: Var| {
            let i = tape.identity(v).unwrap();
            tape.scale_by(i, one).unwrap()
        };
        let n1 = mk(&mut tape, n0);
        let e02 = mk(&mut tape, n0);
        let e12 = mk(&mut tape, n1);
        let n2 = tape.add(e02, e12).unwrap();
        let e03 = mk(&mut tape, n0);
        let e13 = mk(&mut tape, n1);
        let e23 = mk(&mut tape, n2);
        let s01 = tape.add(e03, e13).unwrap();
        let n3 = tape.add(s01, e23).unwrap();
        let pooled = tape.global_avg_pool(n3).unwrap();
        let head_w = tape.leaf(net.head().unwrap().clone(), false);
        let logits = tape.matmul(pooled, head_w).unwrap();
        let want = tape.value(logits).data().to_vec();
        assert_eq!(got, want);
    }

    #[test]
    fn none_branch_contributes_zero() {
        // with `none` alive the forward equals the forward after pruning it
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 5, 1e-2).unwrap();
        let x = ones_input(&net, 2);
        let with_none = net.forward(&x, WeightTransform::Identity).unwrap();
        let a = with_none.tape.value(with_none.output).data().to_vec();
        net.prune(0, 0).unwrap(); // none on edge 0
        let without = net.forward(&x, WeightTransform::Identity).unwrap();
        let b = without.tape.value(without.output).data().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn absolute_transform_is_identity_on_nonnegative_weights() {
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 9, 1e-3).unwrap();
        // make every stored weight nonnegative
        let stem = net.stem.take().unwrap();
        let data: Vec<f64> = stem.data().iter().map(|v| v.abs()).collect();
        net.stem = Some(Tensor::from_vec(vec![8, 3, 3, 3], data).unwrap());
        let head = net.head.take().unwrap();
        let data: Vec<f64> = head.data().iter().map(|v| v.abs()).collect();
        net.head = Some(Tensor::from_vec(vec![8, 10], data).unwrap());
        for e in 0..net.num_edges() {
            for o in 0..5 {
                if let Some(w) = net.weights[e][o].take() {
                    let shape = w.shape().to_vec();
                    let data: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
                    net.weights[e][o] = Some(Tensor::from_vec(shape, data).unwrap());
                }
            }
        }
        let x = ones_input(&net, 1);
        let id = net.forward(&x, WeightTransform::Identity).unwrap();
        let ab = net.forward(&x, WeightTransform::Absolute).unwrap();
        assert_eq!(
            id.tape.value(id.output).data(),
            ab.tape.value(ab.output).data()
        );
    }

    #[test]
    fn mixing_weights_sum_to_one_after_prunes() {
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 11, 1e-3).unwrap();
        net.prune(2, 3).unwrap();
        let x = ones_input(&net, 1);
        let fwd = net.forward(&x, WeightTransform::Identity).unwrap();
        for e in 0..net.num_edges() {
            let sum: f64 = (0..5)
                .filter_map(|o| fwd.mix_vars[e][o])
                .map(|v| fwd.tape.value(v).item())
                .sum();
            assert!((sum - 1.0).abs() < 1e-12, "edge {e}: {sum}");
        }
        assert_eq!(net.alive_count(2), 4);
    }

    #[test]
    fn pruned_op_weight_is_not_on_the_tape() {
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 13, 1e-3).unwrap();
        net.prune(0, 3).unwrap(); // conv_3x3 on edge 0
        let x = ones_input(&net, 2);
        let mut fwd = net.forward(&x, WeightTransform::Identity).unwrap();
        let loss = fwd.tape.sum_reduce(fwd.output).unwrap();
        fwd.tape.backward(loss).unwrap();
        assert!(!fwd
            .weight_vars
            .iter()
            .any(|(id, _)| *id == ParamId::EdgeOp { edge: 0, op: 3 }));
    }

    #[test]
    fn prune_budget_is_24_for_default_cell() {
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 1, 1e-3).unwrap();
        assert_eq!(net.prunes_remaining(), 24);
        let mut count = 0;
        for e in 0..6 {
            for o in 0..4 {
                net.prune(e, o).unwrap();
                count += 1;
            }
            assert!(matches!(net.prune(e, 4), Err(SpaceError::LastOp { .. })));
        }
        assert_eq!(count, 24);
        assert!(net.all_singleton());
    }

    #[test]
    fn prune_guards() {
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 1, 1e-3).unwrap();
        net.prune(0, 0).unwrap();
        assert!(matches!(net.prune(0, 0), Err(SpaceError::NotAlive { .. })));
        assert!(matches!(
            net.prune(9, 0),
            Err(SpaceError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn to_genotype_requires_singletons() {
        let space = Space::Cell(CellSpace::default_cell());
        let net = init_supernet(&space, 1, 1e-3).unwrap();
        assert!(matches!(
            net.to_genotype(),
            Err(SpaceError::NotSingleton { .. })
        ));
    }

    #[test]
    fn skip_only_genotype_string() {
        let g = Genotype::new(4, vec![OpKind::SkipConnect; 6], vec![1; 6]);
        assert_eq!(
            g.canonical_string(),
            "|skip_connect~0|+|skip_connect~0|skip_connect~1|+|skip_connect~0|skip_connect~1|skip_connect~2|"
        );
    }

    #[test]
    fn genotype_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let num_nodes = rng.random_range(2..=5usize);
            let num_edges = num_nodes * (num_nodes - 1) / 2;
            let edge_ops: Vec<OpKind> = (0..num_edges)
                .map(|_| OpKind::CELL_DEFAULT[rng.random_range(0..5usize)])
                .collect();
            let idx: Vec<usize> = edge_ops
                .iter()
                .map(|o| OpKind::CELL_DEFAULT.iter().position(|k| k == o).unwrap())
                .collect();
            let g = Genotype::new(num_nodes, edge_ops, idx);
            let parsed = Genotype::parse(&g.canonical_string()).unwrap();
            assert_eq!(parsed, g);
        }
    }

    #[test]
    fn genotype_parse_rejects_malformed() {
        for bad in [
            "",
            "skip_connect~0",
            "|skip_connect|",
            "|skip_connect~1|",
            "|bogus_op~0|",
            "|skip_connect~0|+|skip_connect~0|",
            "|skip_connect~0|+|skip_connect~1|skip_connect~0|",
        ] {
            assert!(Genotype::parse(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn argmax_breaks_ties_by_lowest_index() {
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 19, 1e-3).unwrap();
        for o in 0..5 {
            net.set_alpha(0, o, 0.5);
        }
        let g1 = net.argmax_genotype();
        let g2 = net.argmax_genotype();
        assert_eq!(g1.edge_op_indices[0], 0);
        assert_eq!(g1, g2);
    }

    #[test]
    fn singleton_supernet_matches_discrete_net_bitwise() {
        let space = Space::Cell(CellSpace::default_cell());
        let mut net = init_supernet(&space, 23, 1e-2).unwrap();
        // keep a mixed genotype: index 1..=4 cycling over edges
        for e in 0..net.num_edges() {
            let keep = 1 + (e % 4);
            for o in 0..5 {
                if o != keep {
                    net.prune(e, o).unwrap();
                }
            }
        }
        let discrete = DiscreteNet::from_supernet(&net).unwrap();
        let x = {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let data: Vec<f64> = (0..2 * 3 * 8 * 8)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::from_vec(vec![2, 3, 8, 8], data).unwrap()
        };
        let sup = net.forward(&x, WeightTransform::Identity).unwrap();
        let dis = discrete.forward(&x, WeightTransform::Identity).unwrap();
        let a: Vec<u64> = sup
            .tape
            .value(sup.output)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u64> = dis
            .tape
            .value(dis.logits)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn data_agnostic_loss_is_strictly_positive() {
        let space = Space::Cell(CellSpace::default_cell());
        let net = init_supernet(&space, 37, 1e-3).unwrap();
        let x = ones_input(&net, 1);
        let mut fwd = net.forward(&x, WeightTransform::Absolute).unwrap();
        let loss = fwd.tape.sum_reduce(fwd.output).unwrap();
        assert!(fwd.tape.value(loss).item() > 0.0);
    }

    #[test]
    fn starved_node_is_reported() {
        let space = Space::Cell(CellSpace {
            num_nodes: 3,
            ops: vec![OpKind::None, OpKind::SkipConnect],
            ..CellSpace::default_cell()
        });
        let mut net = init_supernet(&space, 1, 1e-3).unwrap();
        // edges: (0,1), (0,2), (1,2); starve node 1 by dropping its skip
        net.prune(0, 1).unwrap();
        let x = ones_input(&net, 1);
        match net.forward(&x, WeightTransform::Identity) {
            Err(SpaceError::StarvedNode { node }) => assert_eq!(node, 1),
            other => panic!("expected starved node, got ok={:?}", other.is_ok()),
        }
    }

    #[test]
    fn space_config_roundtrip_and_unknown_keys() {
        let json = r#"{"space":"cell","num_nodes":3,"ops":["skip_connect","conv_1x1","conv_3x3"],"num_classes":4}"#;
        let cfg: SpaceConfig = serde_json::from_str(json).unwrap();
        let space = cfg.build().unwrap();
        assert_eq!(space.num_edges(), 3);
        let bad = r#"{"space":"cell","wat":1}"#;
        assert!(serde_json::from_str::<SpaceConfig>(bad).is_err());
        let seq = r#"{"space":"sequential","depth":2,"branches":3,"width":8}"#;
        let cfg: SpaceConfig = serde_json::from_str(seq).unwrap();
        assert!(matches!(cfg.build().unwrap(), Space::Sequential(_)));
    }

    #[test]
    fn input_hw_cap_enforced() {
        let mut space = CellSpace::default_cell();
        space.input_hw = 32;
        assert!(space.validate().is_err());
    }
}
