//! Exact finite-width neural tangent kernels and the checks connecting them
//! to the sensitivity scores.
//!
//! The kernel is the Gram matrix of per-sample gradients of a scalar network
//! output (the sum of logits) with respect to a parameter subset, assembled
//! from explicit Jacobians. On top of it sit four checks:
//!
//! - width scaling: widening one hidden layer by `rho` rescales the trace
//!   norm by `sqrt(rho)` as width grows;
//! - the sensitivity bound: every score obeys
//!   `F(alpha_k) <= beta * B * |alpha_k| * m_trace(theta_k)` with the
//!   Lipschitz constants measured on the same batch;
//! - the decomposition of a linear sequential supernet's kernel into
//!   `sum alpha_lk^2 Theta_lk`;
//! - rank correlation between summing-up proxies and the trace norm.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{loss_value, zeros_scores_with, ScoreError, ScoreInputs, ScoreOptions, Targets};
use crate::spaces::{
    Activation, ParamId, Space, SpaceError, Supernet, WeightTransform,
};
use crate::stats;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NtkError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("jacobian of {needed} elements exceeds the {budget}-element budget; use a smaller batch")]
    MemoryBudget { needed: usize, budget: usize },
    #[error("rho * base_width = {product} is not an integer")]
    NonIntegerWidth { product: f64 },
    #[error("rho must lie in (0, 1], got {rho}")]
    BadRho { rho: f64 },
    #[error("this check needs a sequential supernet")]
    NeedsSequential,
    #[error("the decomposition identity is exact only under the identity activation; use the block-additivity residual of ntk_matrix for nonlinear nets")]
    NeedsIdentityActivation,
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Kernel extraction knobs.
#[derive(Debug, Clone, Copy)]
pub struct NtkOptions {
    /// Budget on `n * |params|` Jacobian elements.
    pub max_elements: usize,
    /// Matrices larger than this are elided from the report.
    pub matrix_cutoff: usize,
}

impl Default for NtkOptions {
    fn default() -> Self {
        NtkOptions {
            max_elements: 1 << 26,
            matrix_cutoff: 64,
        }
    }
}

/// Parameter subset the kernel is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSubset {
    All,
    Block { edge: usize, op: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockTrace {
    pub edge: usize,
    pub op: usize,
    pub m_trace: f64,
}

/// Kernel, spectrum, trace norms, and consistency residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NtkReport {
    pub n: usize,
    pub scalar_output: String,
    /// Row-major kernel; elided above the configured cutoff.
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// sqrt(trace / n).
    pub trace_norm: f64,
    /// Per-parameter-block trace norms (full-subset runs only).
    pub per_block: Vec<BlockTrace>,
    /// Named residuals: symmetry, block additivity, minimum eigenvalue.
    pub residuals: std::collections::BTreeMap<String, f64>,
}

fn scalar_rows(tape: &mut Tape, output: Var) -> Result<Var, TensorError> {
    tape.row_sum(output)
}

/// Exact kernel of a supernet over the chosen parameter subset.
pub fn ntk_matrix(
    net: &Supernet,
    xs: &Tensor,
    subset: ParamSubset,
    opts: &NtkOptions,
) -> Result<NtkReport, NtkError> {
    let mut fwd = net.forward(xs, WeightTransform::Identity)?;
    let f = scalar_rows(&mut fwd.tape, fwd.output)?;
    let n = fwd.tape.value(f).numel();

    let leaves: Vec<(ParamId, Var)> = match subset {
        ParamSubset::All => fwd.weight_vars.clone(),
        ParamSubset::Block { edge, op } => fwd
            .weight_vars
            .iter()
            .copied()
            .filter(|(id, _)| matches!(id, ParamId::EdgeOp { edge: e, op: o } if *e == edge && *o == op))
            .collect(),
    };
    if leaves.is_empty() {
        return Err(NtkError::Degenerate(
            "no parameters in the requested subset".into(),
        ));
    }
    let cols: usize = leaves
        .iter()
        .map(|(_, v)| fwd.tape.value(*v).numel())
        .sum();
    if n * cols > opts.max_elements {
        return Err(NtkError::MemoryBudget {
            needed: n * cols,
            budget: opts.max_elements,
        });
    }

    let vars: Vec<Var> = leaves.iter().map(|(_, v)| *v).collect();
    let jac = fwd.tape.jacobian(f, &vars)?;
    let gram = jac.gram();

    // per-block trace norms straight from the same Jacobian columns
    let mut per_block = Vec::new();
    if subset == ParamSubset::All {
        let mut c0 = 0;
        for (id, v) in &leaves {
            let numel = fwd.tape.value(*v).numel();
            if let ParamId::EdgeOp { edge, op } = id {
                let mut tr = 0.0;
                for r in 0..jac.rows {
                    let row = jac.row(r);
                    tr += row[c0..c0 + numel].iter().map(|g| g * g).sum::<f64>();
                }
                per_block.push(BlockTrace {
                    edge: *edge,
                    op: *op,
                    m_trace: (tr / n as f64).sqrt(),
                });
            }
            c0 += numel;
        }
    }

    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    let mut residuals = std::collections::BTreeMap::new();

    // symmetry (definitional for a Gram matrix; recorded anyway)
    let mut sym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            sym = sym.max((gram[i * n + j] - gram[j * n + i]).abs());
        }
    }
    residuals.insert("symmetry_max_abs".into(), sym);

    // block additivity: the full kernel equals the sum of block-restricted
    // kernels because the Jacobian columns partition
    if subset == ParamSubset::All {
        let mut blocks_sum = vec![0.0; n * n];
        let mut c0 = 0;
        for (_, v) in &leaves {
            let numel = fwd.tape.value(*v).numel();
            for i in 0..n {
                let ri = &jac.row(i)[c0..c0 + numel];
                for j in i..n {
                    let rj = &jac.row(j)[c0..c0 + numel];
                    let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                    blocks_sum[i * n + j] += dot;
                    if i != j {
                        blocks_sum[j * n + i] += dot;
                    }
                }
            }
            c0 += numel;
        }
        let diff: f64 = gram
            .iter()
            .zip(&blocks_sum)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = gram.iter().map(|g| g * g).sum::<f64>().sqrt();
        residuals.insert(
            "block_additivity_rel_fro".into(),
            if norm > 0.0 { diff / norm } else { diff },
        );
    }

    let m = DMatrix::from_row_slice(n, n, &gram);
    let mut eigenvalues: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    residuals.insert(
        "min_eigenvalue".into(),
        eigenvalues.first().copied().unwrap_or(0.0),
    );

    let matrix = if n <= opts.matrix_cutoff {
        Some((0..n).map(|i| gram[i * n..(i + 1) * n].to_vec()).collect())
    } else {
        None
    };

    Ok(NtkReport {
        n,
        scalar_output: "sum_of_logits".into(),
        matrix,
        eigenvalues,
        trace_norm: (trace / n as f64).sqrt(),
        per_block,
        residuals,
    })
}

// ---- width scaling -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WidthScalingReport {
    pub base_width: usize,
    pub widened_width: usize,
    pub rho: f64,
    pub depth: usize,
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub expected_sqrt_rho: f64,
}

/// Plain ReLU multi-layer perceptron; f = sum of the last hidden layer.
/// Layer weights draw from per-layer seed streams so nets that share a
/// layer shape share its values.
fn mlp_trace_norm(
    widths: &[usize],
    seed: u64,
    xs: &Tensor,
) -> Result<f64, NtkError> {
    let mut tape = Tape::new();
    let n = xs.shape()[0];
    let mut h = tape.leaf(xs.clone(), false);
    let mut leaves = Vec::new();
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((l as u64 + 1) * 0x9E37_79B9));
        let std = (2.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        let w = tape.leaf(Tensor::from_vec(vec![fan_in, fan_out], data)?, true);
        leaves.push(w);
        h = tape.matmul(h, w)?;
        h = tape.relu(h)?;
    }
    let f = tape.row_sum(h)?;
    let jac = tape.jacobian(f, &leaves)?;
    let gram = jac.gram();
    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    Ok((trace / n as f64).sqrt())
}

/// Ratio of trace norms between a net with its first hidden layer widened
/// to `rho * base_width` and the base net, over seeds.
pub fn check_width_scaling(
    base_width: usize,
    rho: f64,
    depth: usize,
    seeds: &[u64],
    n_inputs: usize,
    in_dim: usize,
) -> Result<WidthScalingReport, NtkError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(NtkError::BadRho { rho });
    }
    let product = rho * base_width as f64;
    if (product - product.round()).abs() > 1e-9 || product.round() < 1.0 {
        return Err(NtkError::NonIntegerWidth { product });
    }
    let widened = product.round() as usize;
    if depth == 0 || seeds.is_empty() {
        return Err(NtkError::Degenerate("depth or seed list empty".into()));
    }
    const TAIL_WIDTH: usize = 16;

    let mut ratios = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0DD5_EED5);
        let xs = Tensor::from_vec(
            vec![n_inputs, in_dim],
            (0..n_inputs * in_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?;
        let mut base_widths = vec![in_dim, base_width];
        base_widths.extend(std::iter::repeat(TAIL_WIDTH).take(depth - 1));
        let mut hat_widths = base_widths.clone();
        hat_widths[1] = widened;
        let base = mlp_trace_norm(&base_widths, seed, &xs)?;
        let hat = mlp_trace_norm(&hat_widths, seed, &xs)?;
        if base == 0.0 {
            return Err(NtkError::Degenerate("zero base trace norm".into()));
        }
        ratios.push(hat / base);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ratios.len() as f64;
    Ok(WidthScalingReport {
        base_width,
        widened_width: widened,
        rho,
        depth,
        ratios,
        mean_ratio: mean,
        std_ratio: var.sqrt(),
        expected_sqrt_rho: rho.sqrt(),
    })
}

// ---- sensitivity bound ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpBoundCheck {
    pub layer: usize,
    pub op: usize,
    pub score: f64,
    pub alpha: f64,
    /// Trace norm of the per-op kernel with the op's own alpha factored out.
    pub m_trace: f64,
    pub beta: f64,
    pub b_layer: f64,
    pub bound: f64,
    /// score / bound; 0 when both vanish.
    pub slack_ratio: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityBoundReport {
    pub variant: String,
    pub n: usize,
    pub per_op: Vec<OpBoundCheck>,
    pub violations: usize,
}

/// Check `F(alpha_k) <= beta * B_l * |alpha_k| * m_trace(Theta_k)` on a
/// sequential supernet, with `beta = max_i |dloss_i/df_i|` and
/// `B_l = max_i ||df_i/dh^(l)_i||` measured on the batch. The per-op kernel
/// uses the convention that the op's own mixing coefficient is replaced by
/// one, i.e. its Jacobian block is divided by `alpha_k`.
pub fn check_sensitivity_bound(
    net: &Supernet,
    inputs: &ScoreInputs<'_>,
) -> Result<SensitivityBoundReport, NtkError> {
    let Space::Sequential(seq) = &net.space else {
        return Err(NtkError::NeedsSequential);
    };

    // scores via the standard one-pass path
    let table = zeros_scores_with(net, inputs, &ScoreOptions::default())?;

    // rebuild the same loss to measure the constants
    let (x, targets, transform, variant): (Tensor, Option<Vec<f64>>, WeightTransform, &str) =
        match inputs {
            ScoreInputs::Vanilla { batch } => {
                let Targets::Values(y) = &batch.targets else {
                    return Err(NtkError::Degenerate(
                        "sequential batches carry real-valued targets".into(),
                    ));
                };
                (
                    batch.x.clone(),
                    Some(y.clone()),
                    WeightTransform::Identity,
                    "vanilla",
                )
            }
            ScoreInputs::LabelAgnostic { x, seed } => {
                let n = x.shape()[0];
                let Targets::Values(y) = crate::scoring::agnostic_targets(net, n, *seed) else {
                    unreachable!("sequential targets are values")
                };
                (
                    (*x).clone(),
                    Some(y),
                    WeightTransform::Identity,
                    "label_agnostic",
                )
            }
            ScoreInputs::DataAgnostic => (
                Tensor::ones(net.input_shape(1)),
                None,
                WeightTransform::Absolute,
                "data_agnostic",
            ),
        };

    let mut fwd = net.forward(&x, transform)?;
    let f = scalar_rows(&mut fwd.tape, fwd.output)?;
    let n = fwd.tape.value(f).numel();

    // per-sample loss derivative dl_i/df_i -> beta
    let loss = match &targets {
        None => fwd.tape.sum_reduce(f)?,
        Some(y) => {
            let t = fwd.tape.leaf(Tensor::from_vec(vec![n], y.clone())?, false);
            let neg = fwd.tape.scale(t, -1.0)?;
            let diff = fwd.tape.add(f, neg)?;
            let sq = fwd.tape.mul(diff, diff)?;
            let total = fwd.tape.sum_reduce(sq)?;
            fwd.tape.scale(total, 0.5 / n as f64)?
        }
    };
    fwd.tape.backward(loss)?;
    let beta = match fwd.tape.grad(f) {
        // loss = (1/n) sum l_i, so dl_i/df_i = n * dL/df_i
        Some(g) => g.iter().map(|v| (v * n as f64).abs()).fold(0.0, f64::max),
        None => 0.0,
    };

    // per-sample output gradients: per-layer B and per-op kernel traces
    let mut b_layer = vec![0.0f64; seq.depth];
    let mut op_trace: Vec<Vec<f64>> = (0..seq.depth).map(|_| vec![0.0; seq.branches]).collect();
    for i in 0..n {
        fwd.tape.backward_seeded(f, i)?;
        for l in 0..seq.depth {
            let hv = fwd.node_vars[l];
            let width = fwd.tape.value(hv).shape()[1];
            if let Some(g) = fwd.tape.grad(hv) {
                let row = &g[i * width..(i + 1) * width];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                b_layer[l] = b_layer[l].max(norm);
            }
        }
        for (id, v) in &fwd.weight_vars {
            let ParamId::EdgeOp { edge: l, op: k } = id else {
                continue;
            };
            if let Some(g) = fwd.tape.grad(*v) {
                op_trace[*l][*k] += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }

    let mut per_op = Vec::new();
    let mut violations = 0;
    for l in 0..seq.depth {
        for k in 0..seq.branches {
            if !net.is_alive(l, k) {
                continue;
            }
            let alpha = net.alpha(l, k);
            let score = table.get(l, k).unwrap_or(0.0);
            let raw_trace = (op_trace[l][k] / n as f64).sqrt();
            let m_trace = if alpha.abs() > f64::MIN_POSITIVE {
                raw_trace / alpha.abs()
            } else {
                raw_trace
            };
            // the |alpha| in the bound cancels the normalization exactly
            let bound = beta * b_layer[l] * raw_trace;
            let violated = if bound == 0.0 {
                score > 0.0
            } else {
                score > bound * (1.0 + 1e-9)
            };
            if violated {
                violations += 1;
            }
            per_op.push(OpBoundCheck {
                layer: l,
                op: k,
                score,
                alpha,
                m_trace,
                beta,
                b_layer: b_layer[l],
                bound,
                slack_ratio: if bound > 0.0 { score / bound } else { 0.0 },
                violated,
            });
        }
    }

    Ok(SensitivityBoundReport {
        variant: variant.into(),
        n,
        per_op,
        violations,
    })
}

// ---- kernel decomposition -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub n: usize,
    pub rel_frobenius_residual: f64,
    pub full_trace_norm: f64,
}

/// For an identity-activation sequential supernet the full-parameter kernel
/// equals `sum_l sum_k alpha_lk^2 Theta_lk`, where `Theta_lk` is the kernel
/// over op (l, k)'s parameters with `alpha_lk` replaced by one in its own
/// layer's mixing. Exact at finite width; nonlinear activations are
/// rejected.
pub fn check_supernet_decomposition(
    net: &Supernet,
    xs: &Tensor,
    opts: &NtkOptions,
) -> Result<DecompositionReport, NtkError> {
    let Space::Sequential(seq) = &net.space else {
        return Err(NtkError::NeedsSequential);
    };
    if seq.activation != Activation::Identity {
        return Err(NtkError::NeedsIdentityActivation);
    }
    let full = ntk_matrix(net, xs, ParamSubset::All, opts)?;
    let n = full.n;
    let full_mat = full
        .matrix
        .as_ref()
        .ok_or_else(|| NtkError::Degenerate("kernel elided; raise the matrix cutoff".into()))?;

    let mut sum = vec![0.0; n * n];
    for l in 0..seq.depth {
        for k in 0..seq.branches {
            if !net.is_alive(l, k) {
                continue;
            }
            let alpha = net.alpha(l, k);
            let mut unit = net.clone();
            unit.set_alpha(l, k, 1.0);
            let block = ntk_matrix(&unit, xs, ParamSubset::Block { edge: l, op: k }, opts)?;
            let bm = block
                .matrix
                .as_ref()
                .ok_or_else(|| NtkError::Degenerate("kernel elided".into()))?;
            for i in 0..n {
                for j in 0..n {
                    sum[i * n + j] += alpha * alpha * bm[i][j];
                }
            }
        }
    }

    let mut diff = 0.0;
    let mut norm = 0.0;
    for i in 0..n {
        for j in 0..n {
            diff += (full_mat[i][j] - sum[i * n + j]).powi(2);
            norm += full_mat[i][j].powi(2);
        }
    }
    Ok(DecompositionReport {
        n,
        rel_frobenius_residual: if norm > 0.0 {
            (diff / norm).sqrt()
        } else {
            diff.sqrt()
        },
        full_trace_norm: full.trace_norm,
    })
}

// ---- proxy vs trace norm -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxyTraceEntry {
    pub proxy: String,
    pub n: usize,
    pub spearman: Option<f64>,
    /// max(value / trace norm): by construction every sample satisfies
    /// value <= fitted_c * trace_norm, recorded for completeness.
    pub fitted_c: f64,
    pub inequality_holds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxyTraceReport {
    pub per_proxy: Vec<ProxyTraceEntry>,
}

/// Rank correlation between architecture-level summing-up scores and the
/// trace norm over a sample of architectures.
pub fn check_proxy_trace_correlation(
    samples: &[(String, f64, f64)],
) -> Result<ProxyTraceReport, NtkError> {
    if samples.is_empty() {
        return Err(NtkError::Degenerate("no samples".into()));
    }
    let mut names: Vec<String> = samples.iter().map(|(p, _, _)| p.clone()).collect();
    names.sort();
    names.dedup();
    let mut per_proxy = Vec::new();
    for name in names {
        let rows: Vec<(f64, f64)> = samples
            .iter()
            .filter(|(p, _, _)| *p == name)
            .map(|(_, v, t)| (*v, *t))
            .collect();
        let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let traces: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let fitted_c = rows
            .iter()
            .map(|(v, t)| if *t > 0.0 { v / t } else { f64::INFINITY })
            .fold(0.0f64, f64::max);
        per_proxy.push(ProxyTraceEntry {
            proxy: name,
            n: rows.len(),
            spearman: stats::spearman(&values, &traces),
            fitted_c,
            inequality_holds: fitted_c.is_finite(),
        });
    }
    Ok(ProxyTraceReport { per_proxy })
}

/// Convenience: the loss value used by the bound check (exposed for tests).
pub fn bound_loss_value(net: &Supernet, inputs: &ScoreInputs<'_>) -> Result<f64, NtkError> {
    Ok(loss_value(net, inputs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Batch;
    use crate::spaces::{init_supernet, SequentialSpace};

    fn seq_space(depth: usize, branches: usize, width: usize, act: Activation) -> Space {
        Space::Sequential(SequentialSpace::uniform(depth, branches, width, act))
    }

    fn randn_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_model_kernel_is_input_gram() {
        // f_i = alpha * x_i . theta with alpha = 1: Theta = X X^T
        let space = Space::Sequential(SequentialSpace {
            depth: 1,
            branches: 1,
            widths: vec![3, 1],
            activation: Activation::Identity,
        });
        let mut net = init_supernet(&space, 0, 1.0).unwrap();
        net.set_alpha(0, 0, 1.0);
        let xs = Tensor::from_vec(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let report = ntk_matrix(&net, &xs, ParamSubset::All, &NtkOptions::default()).unwrap();
        let m = report.matrix.unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m[i][j] - want).abs() < 1e-12, "({i},{j}): {}", m[i][j]);
            }
        }
        assert!((report.trace_norm - 1.0).abs() < 1e-12);

        // single all-ones input of dimension d: Theta = [d], trace norm sqrt(d)
        let ones = Tensor::ones(vec![1, 3]);
        let r1 = ntk_matrix(&net, &ones, ParamSubset::All, &NtkOptions::default()).unwrap();
        assert!((r1.matrix.unwrap()[0][0] - 3.0).abs() < 1e-12);
        assert!((r1.trace_norm - 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_symmetric_psd_with_block_additivity() {
        let space = seq_space(2, 2, 6, Activation::Relu);
        let net = init_supernet(&space, 5, 1.0).unwrap();
        let xs = randn_tensor(vec![5, 6], 7);
        let report = ntk_matrix(&net, &xs, ParamSubset::All, &NtkOptions::default()).unwrap();
        assert!(report.residuals["symmetry_max_abs"] < 1e-12);
        assert!(report.residuals["block_additivity_rel_fro"] < 1e-10);
        let trace: f64 = report.n as f64 * report.trace_norm.powi(2);
        assert!(report.residuals["min_eigenvalue"] >= -1e-10 * trace.max(1.0));
        assert_eq!(report.per_block.len(), 4);
    }

    #[test]
    fn memory_budget_enforced() {
        let space = seq_space(1, 1, 8, Activation::Relu);
        let net = init_supernet(&space, 1, 1.0).unwrap();
        let xs = randn_tensor(vec![4, 8], 2);
        let opts = NtkOptions {
            max_elements: 10,
            ..NtkOptions::default()
        };
        assert!(matches!(
            ntk_matrix(&net, &xs, ParamSubset::All, &opts),
            Err(NtkError::MemoryBudget { .. })
        ));
    }

    #[test]
    fn width_scaling_rho_one_is_exactly_one() {
        let report = check_width_scaling(64, 1.0, 2, &[0, 1, 2], 4, 8).unwrap();
        for r in &report.ratios {
            assert_eq!(r.to_bits(), 1.0f64.to_bits());
        }
    }

    #[test]
    fn width_scaling_quarter_near_half() {
        let seeds: Vec<u64> = (0..6).collect();
        let report = check_width_scaling(256, 0.25, 2, &seeds, 4, 8).unwrap();
        assert!(
            (report.mean_ratio - 0.5).abs() <= 0.05,
            "mean ratio {}",
            report.mean_ratio
        );
    }

    #[test]
    fn width_scaling_rejects_non_integer_product() {
        assert!(matches!(
            check_width_scaling(1024, 0.64, 2, &[0], 4, 8),
            Err(NtkError::NonIntegerWidth { .. })
        ));
        assert!(matches!(
            check_width_scaling(100, 1.5, 2, &[0], 4, 8),
            Err(NtkError::BadRho { .. })
        ));
    }

    #[test]
    fn sensitivity_bound_single_layer_hand_check() {
        // identity activation, L = 1, M = 2: f_i = sum_k alpha_k 1^T(x_i theta_k),
        // v_i = ones(m) so B = sqrt(m); beta = max_i |f_i - y_i|;
        // dF_i/d theta_k = alpha_k x_i 1^T so ||.||_F = |alpha_k| ||x_i|| sqrt(m)
        let space = Space::Sequential(SequentialSpace {
            depth: 1,
            branches: 2,
            widths: vec![3, 4],
            activation: Activation::Identity,
        });
        let net = init_supernet(&space, 11, 0.5).unwrap();
        let xs = randn_tensor(vec![4, 3], 13);
        let ys = vec![0.1, -0.2, 0.3, 0.0];
        let batch = Batch {
            x: xs.clone(),
            targets: Targets::Values(ys.clone()),
        };
        let report =
            check_sensitivity_bound(&net, &ScoreInputs::Vanilla { batch: &batch }).unwrap();
        assert_eq!(report.violations, 0);
        let m = 4.0f64;

        // hand-computed constants
        let f_i: Vec<f64> = (0..4)
            .map(|i| {
                let x = &xs.data()[i * 3..(i + 1) * 3];
                (0..2)
                    .map(|k| {
                        let th = net.weight(0, k).unwrap().data();
                        let alpha = net.alpha(0, k);
                        let mut s = 0.0;
                        for a in 0..3 {
                            for b in 0..4 {
                                s += x[a] * th[a * 4 + b];
                            }
                        }
                        alpha * s
                    })
                    .sum()
            })
            .collect();
        let beta_hand = f_i
            .iter()
            .zip(&ys)
            .map(|(f, y)| (f - y).abs())
            .fold(0.0f64, f64::max);
        let b_hand = m.sqrt();
        for check in &report.per_op {
            assert!((check.beta - beta_hand).abs() < 1e-9, "beta");
            assert!((check.b_layer - b_hand).abs() < 1e-9, "B");
            let x_norms: f64 = (0..4)
                .map(|i| {
                    let x = &xs.data()[i * 3..(i + 1) * 3];
                    x.iter().map(|v| v * v).sum::<f64>() * m
                })
                .sum::<f64>()
                / 4.0;
            let m_trace_hand = x_norms.sqrt();
            assert!(
                (check.m_trace - m_trace_hand).abs() / m_trace_hand < 1e-9,
                "m_trace {} vs {}",
                check.m_trace,
                m_trace_hand
            );
            assert!(check.score <= check.bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn sensitivity_bound_no_violations_on_random_nets() {
        // order-one mixing coefficients: the regime the trace-norm bound
        // speaks about
        let mut total = 0;
        for seed in 0..10 {
            let space = seq_space(2, 3, 16, Activation::Relu);
            let net = init_supernet(&space, seed, 1.0).unwrap();
            let batch = Batch {
                x: randn_tensor(vec![8, 16], seed ^ 0xF00D),
                targets: Targets::Values(randn_tensor(vec![8, 1], seed ^ 0xBEEF).data().to_vec()),
            };
            let report =
                check_sensitivity_bound(&net, &ScoreInputs::Vanilla { batch: &batch }).unwrap();
            total += report.violations;
            assert!(report.per_op.iter().all(|c| c.slack_ratio < 1.0));
        }
        assert_eq!(total, 0);
    }

    #[test]
    fn sensitivity_bound_reports_slack_for_all_variants() {
        // the data-agnostic variant's all-positive forward can exceed the
        // kernel-based bound at finite width; the check still reports the
        // slack ratios faithfully
        let space = seq_space(2, 3, 16, Activation::Relu);
        let net = init_supernet(&space, 3, 1.0).unwrap();
        let da = check_sensitivity_bound(&net, &ScoreInputs::DataAgnostic).unwrap();
        assert_eq!(da.per_op.len(), 6);
        assert!(da.per_op.iter().all(|c| c.slack_ratio.is_finite()));
        let la_x = randn_tensor(vec![8, 16], 5);
        let la = check_sensitivity_bound(&net, &ScoreInputs::LabelAgnostic { x: &la_x, seed: 9 })
            .unwrap();
        assert_eq!(la.violations, 0);
    }

    #[test]
    fn decomposition_trivial_and_linear_cases() {
        // L = 1, M = 1, alpha = 1: residual exactly zero
        let space = Space::Sequential(SequentialSpace {
            depth: 1,
            branches: 1,
            widths: vec![4, 4],
            activation: Activation::Identity,
        });
        let mut net = init_supernet(&space, 3, 1.0).unwrap();
        net.set_alpha(0, 0, 1.0);
        let xs = randn_tensor(vec![4, 4], 17);
        let r = check_supernet_decomposition(&net, &xs, &NtkOptions::default()).unwrap();
        assert_eq!(r.rel_frobenius_residual, 0.0);

        // L = 2, M = 3 linear: residual below 1e-10
        let space = seq_space(2, 3, 5, Activation::Identity);
        let net = init_supernet(&space, 7, 1.0).unwrap();
        let xs = randn_tensor(vec![6, 5], 19);
        let r = check_supernet_decomposition(&net, &xs, &NtkOptions::default()).unwrap();
        assert!(r.rel_frobenius_residual < 1e-10, "{}", r.rel_frobenius_residual);
    }

    #[test]
    fn decomposition_alpha_scaling_is_quadratic() {
        // L = 1 net: scaling all alpha by 2 scales the kernel by 4
        let space = seq_space(1, 3, 4, Activation::Identity);
        let mut net = init_supernet(&space, 23, 1.0).unwrap();
        let xs = randn_tensor(vec![3, 4], 29);
        let before = ntk_matrix(&net, &xs, ParamSubset::All, &NtkOptions::default()).unwrap();
        for k in 0..3 {
            let a = net.alpha(0, k);
            net.set_alpha(0, k, 2.0 * a);
        }
        let after = ntk_matrix(&net, &xs, ParamSubset::All, &NtkOptions::default()).unwrap();
        let (b, a) = (before.matrix.unwrap(), after.matrix.unwrap());
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (a[i][j] - 4.0 * b[i][j]).abs() <= 1e-12 * b[i][j].abs().max(1.0),
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn decomposition_rejects_relu() {
        let space = seq_space(2, 2, 4, Activation::Relu);
        let net = init_supernet(&space, 1, 1.0).unwrap();
        let xs = randn_tensor(vec![2, 4], 1);
        assert!(matches!(
            check_supernet_decomposition(&net, &xs, &NtkOptions::default()),
            Err(NtkError::NeedsIdentityActivation)
        ));
    }

    #[test]
    fn proxy_trace_correlation_extremes() {
        let anti: Vec<(String, f64, f64)> = (0..20)
            .map(|i| ("synflow".to_string(), -(i as f64), i as f64 + 1.0))
            .collect();
        let r = check_proxy_trace_correlation(&anti).unwrap();
        assert!((r.per_proxy[0].spearman.unwrap() + 1.0).abs() < 1e-12);

        let constant: Vec<(String, f64, f64)> =
            (0..20).map(|_| ("snip".to_string(), 1.0, 1.0)).collect();
        let r = check_proxy_trace_correlation(&constant).unwrap();
        assert!(r.per_proxy[0].spearman.is_none());
        assert!(r.per_proxy[0].inequality_holds);
    }

    #[test]
    fn proxy_and_trace_norm_grow_with_width() {
        // width-swept one-layer nets: both the flow score and the trace norm
        // increase with width
        use crate::scoring::{proxy_score, ProxyKind, ProxyTarget};
        let mut samples = Vec::new();
        for (i, width) in [4usize, 8, 16, 32].iter().enumerate() {
            let space = Space::Sequential(SequentialSpace {
                depth: 1,
                branches: 1,
                widths: vec![6, *width],
                activation: Activation::Relu,
            });
            let mut net = init_supernet(&space, 31 + i as u64, 1.0).unwrap();
            net.set_alpha(0, 0, 1.0);
            let flow = proxy_score(&ProxyTarget::Supernet(&net), ProxyKind::SynFlow, None)
                .unwrap()
                .value;
            let xs = randn_tensor(vec![4, 6], 37);
            let tr = ntk_matrix(&net, &xs, ParamSubset::All, &NtkOptions::default())
                .unwrap()
                .trace_norm;
            samples.push(("synflow".to_string(), flow, tr));
        }
        let r = check_proxy_trace_correlation(&samples).unwrap();
        assert!(r.per_proxy[0].spearman.unwrap() > 0.9);
    }
}
