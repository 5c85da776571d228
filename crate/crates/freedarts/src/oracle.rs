//! Ground-truth machinery for miniature spaces: enumerate every genotype,
//! train each candidate with plain SGD on a synthetic task, and rank search
//! results against the resulting table.
//!
//! Everything here is a pure function of its config and seeds; rebuilding an
//! oracle table reproduces it bit-exactly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::config_digest;
use crate::scoring::{
    bias_correlation, proxy_score, zeros_scores_data_agnostic, Batch, ProxyKind, ProxySample,
    ProxyTarget, ScoreError, ScoreOptions, Targets,
};
use crate::search::{run_search, SearchError, SearchOptions};
use crate::spaces::{
    init_supernet, CellSpace, DiscreteNet, Genotype, OpKind, ParamId, Space, SpaceError,
    Supernet, WeightTransform,
};
use crate::stats;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("space holds {count} genotypes, above the cap of {cap}")]
    CapExceeded { count: usize, cap: usize },
    #[error("genotype {0} missing from the oracle table")]
    MissingGenotype(String),
    #[error("could not draw a label-balanced sample: {0}")]
    Unbalanceable(String),
    #[error("oracle table is empty")]
    EmptyTable,
}

/// Default enumeration cap.
pub const DEFAULT_ENUM_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGenerator {
    GaussianBlobs,
    RandomTeacher,
}

/// Synthetic classification task standing in for a real image dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub generator: TaskGenerator,
    pub n_train: usize,
    pub n_test: usize,
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    /// Within-class noise std for the blob generator.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTask {
    /// Desk-scale default: 4 classes, 512 train / 256 test, 3x8x8 inputs.
    /// Labels come from a random convolutional teacher so that architecture
    /// capacity actually moves test accuracy and the oracle ranking is
    /// non-trivial.
    pub fn default_mini() -> Self {
        SyntheticTask {
            generator: TaskGenerator::RandomTeacher,
            n_train: 512,
            n_test: 256,
            input: (3, 8, 8),
            num_classes: 4,
            noise: 1.0,
            seed: 0,
        }
    }

    pub fn blobs(num_classes: usize, noise: f64, seed: u64) -> Self {
        SyntheticTask {
            generator: TaskGenerator::GaussianBlobs,
            n_train: 512,
            n_test: 256,
            input: (3, 8, 8),
            num_classes,
            noise,
            seed,
        }
    }

    fn dim(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    /// Train and test splits, drawn from one seed stream (disjoint draws),
    /// labels balanced within 10%.
    pub fn generate(&self) -> Result<(DataSet, DataSet), OracleError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.generator {
            TaskGenerator::GaussianBlobs => {
                let means: Vec<Vec<f64>> = (0..self.num_classes)
                    .map(|_| {
                        (0..self.dim())
                            .map(|_| rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                let train = self.blob_split(&mut rng, &means, self.n_train)?;
                let test = self.blob_split(&mut rng, &means, self.n_test)?;
                Ok((train, test))
            }
            TaskGenerator::RandomTeacher => {
                let teacher = self.teacher_net(&mut rng)?;
                let train = self.teacher_split(&mut rng, &teacher, self.n_train)?;
                let test = self.teacher_split(&mut rng, &teacher, self.n_test)?;
                Ok((train, test))
            }
        }
    }

    fn blob_split(
        &self,
        rng: &mut ChaCha8Rng,
        means: &[Vec<f64>],
        n: usize,
    ) -> Result<DataSet, OracleError> {
        // cyclic labels keep classes exactly balanced, then shuffle
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        let (c, h, w) = self.input;
        let mut data = Vec::with_capacity(n * self.dim());
        for &y in &labels {
            for d in 0..self.dim() {
                data.push(means[y][d] + self.noise * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(DataSet {
            x: Tensor::from_vec(vec![n, c, h, w], data)?,
            y: labels,
        })
    }

    fn teacher_net(&self, rng: &mut ChaCha8Rng) -> Result<DiscreteNet, OracleError> {
        let (c, h, _) = self.input;
        let space = CellSpace {
            num_nodes: 3,
            ops: vec![OpKind::Conv3x3],
            channels: 8,
            input_hw: h,
            in_channels: c,
            num_classes: self.num_classes,
        };
        let genotype = Genotype::new(3, vec![OpKind::Conv3x3; 3], vec![0; 3]);
        Ok(DiscreteNet::init(&space, &genotype, rng.random())?)
    }

    fn teacher_split(
        &self,
        rng: &mut ChaCha8Rng,
        teacher: &DiscreteNet,
        n: usize,
    ) -> Result<DataSet, OracleError> {
        let k = self.num_classes;
        let quota = n.div_ceil(k);
        let (c, h, w) = self.input;
        const DRAW: usize = 64;

        // calibrate per-class logit means so the argmax does not collapse
        // onto whichever class the random head happens to favor
        let calib: Vec<f64> = (0..DRAW * self.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x = Tensor::from_vec(vec![DRAW, c, h, w], calib)?;
        let fwd = teacher.forward(&x, WeightTransform::Identity)?;
        let logits = fwd.tape.value(fwd.logits).data();
        let mut mu = vec![0.0; k];
        for row in logits.chunks(k) {
            for (m, l) in mu.iter_mut().zip(row) {
                *m += l / DRAW as f64;
            }
        }

        // rejection-fill per-class quotas so labels stay balanced
        let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
        let mut accepted = 0;
        let cap = 200 * n;
        let mut drawn = 0;
        while accepted < n && drawn < cap {
            let raw: Vec<f64> = (0..DRAW * self.dim())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            drawn += DRAW;
            let x = Tensor::from_vec(vec![DRAW, c, h, w], raw.clone())?;
            let fwd = teacher.forward(&x, WeightTransform::Identity)?;
            let logits = fwd.tape.value(fwd.logits).data();
            for i in 0..DRAW {
                if accepted == n {
                    break;
                }
                let centered: Vec<f64> = logits[i * k..(i + 1) * k]
                    .iter()
                    .zip(&mu)
                    .map(|(l, m)| l - m)
                    .collect();
                let label = argmax(&centered);
                if per_class[label].len() < quota {
                    per_class[label].push(raw[i * self.dim()..(i + 1) * self.dim()].to_vec());
                    accepted += 1;
                }
            }
        }
        if accepted < n {
            return Err(OracleError::Unbalanceable(format!(
                "drew {accepted}/{n} within the attempt cap"
            )));
        }
        // interleave classes, then shuffle
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
        'outer: for i in 0..quota {
            for (label, samples) in per_class.iter().enumerate() {
                if let Some(s) = samples.get(i) {
                    rows.push((label, s.clone()));
                    if rows.len() == n {
                        break 'outer;
                    }
                }
            }
        }
        for i in (1..rows.len()).rev() {
            let j = rng.random_range(0..=i);
            rows.swap(i, j);
        }
        let mut data = Vec::with_capacity(n * self.dim());
        let mut y = Vec::with_capacity(n);
        for (label, sample) in rows {
            y.push(label);
            data.extend(sample);
        }
        Ok(DataSet {
            x: Tensor::from_vec(vec![n, c, h, w], data)?,
            y,
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Labelled image set for cell networks.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Copy the given rows into a scoring batch.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let shape = self.x.shape();
        let row = shape[1..].iter().product::<usize>();
        let mut data = Vec::with_capacity(idx.len() * row);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * row..(i + 1) * row]);
            y.push(self.y[i]);
        }
        let mut bshape = shape.to_vec();
        bshape[0] = idx.len();
        Batch {
            x: Tensor::from_vec(bshape, data).expect("rows are well-formed"),
            targets: Targets::Classes(y),
        }
    }

    pub fn label_balance_ok(&self, num_classes: usize, tol: f64) -> bool {
        let mut counts = vec![0usize; num_classes];
        for &y in &self.y {
            counts[y] += 1;
        }
        let ideal = self.len() as f64 / num_classes as f64;
        counts
            .iter()
            .all(|&c| (c as f64 - ideal).abs() <= tol * self.len() as f64 / num_classes as f64)
    }
}

/// Deterministic scoring batch for searches that need data: gaussian-blob
/// images for cell spaces, standard-normal rows for sequential spaces.
pub fn seeded_batch(space: &Space, n: usize, seed: u64) -> Result<Batch, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match space {
        Space::Cell(c) => {
            let dim = c.in_channels * c.input_hw * c.input_hw;
            let means: Vec<Vec<f64>> = (0..c.num_classes)
                .map(|_| {
                    (0..dim)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let mut y = Vec::with_capacity(n);
            let mut data = Vec::with_capacity(n * dim);
            for i in 0..n {
                let label = i % c.num_classes;
                y.push(label);
                for d in 0..dim {
                    data.push(means[label][d] + 0.5 * rng.sample::<f64, _>(StandardNormal));
                }
            }
            Ok(Batch {
                x: Tensor::from_vec(vec![n, c.in_channels, c.input_hw, c.input_hw], data)?,
                targets: Targets::Classes(y),
            })
        }
        Space::Sequential(s) => {
            let d = s.widths[0];
            let data: Vec<f64> = (0..n * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let targets: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            Ok(Batch {
                x: Tensor::from_vec(vec![n, d], data)?,
                targets: Targets::Values(targets),
            })
        }
    }
}

/// All genotypes of a cell space in canonical (edge-major, op-index) order.
pub fn enumerate_space(space: &CellSpace, cap: usize) -> Result<Vec<Genotype>, OracleError> {
    space.validate()?;
    let edges = space.num_edges();
    let k = space.ops.len();
    let count = k.checked_pow(edges as u32).unwrap_or(usize::MAX);
    if count > cap {
        return Err(OracleError::CapExceeded { count, cap });
    }
    let mut out = Vec::with_capacity(count);
    let mut indices = vec![0usize; edges];
    loop {
        let edge_ops: Vec<OpKind> = indices.iter().map(|&i| space.ops[i]).collect();
        out.push(Genotype::new(space.num_nodes, edge_ops, indices.clone()));
        // odometer increment, last edge fastest
        let mut pos = edges;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            indices[pos] += 1;
            if indices[pos] < k {
                break;
            }
            indices[pos] = 0;
        }
    }
}

/// Result of one training run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub accuracy: f64,
    pub diverged: bool,
}

/// Plain minibatch SGD on cross-entropy; returns held-out accuracy.
/// Divergence (non-finite loss) is recorded as accuracy zero.
pub fn train_candidate(
    space: &CellSpace,
    genotype: &Genotype,
    task: &SyntheticTask,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainOutcome, OracleError> {
    let (train, test) = task.generate()?;
    train_on_data(space, genotype, &train, &test, epochs, lr, seed)
}

/// The training loop behind [`train_candidate`], reusable with bespoke data.
pub fn train_on_data(
    space: &CellSpace,
    genotype: &Genotype,
    train: &DataSet,
    test: &DataSet,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainOutcome, OracleError> {
    const BATCH: usize = 16;
    let mut net = DiscreteNet::init(space, genotype, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F5D);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(BATCH) {
            let batch = train.batch(chunk);
            let step = sgd_step(&mut net, &batch, lr);
            match step {
                Ok(()) => {}
                Err(OracleError::Tensor(TensorError::NonFinite { .. }))
                | Err(OracleError::Space(SpaceError::Tensor(TensorError::NonFinite { .. }))) => {
                    return Ok(TrainOutcome {
                        accuracy: 0.0,
                        diverged: true,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TrainOutcome {
        accuracy: accuracy(&net, test)?,
        diverged: false,
    })
}

fn sgd_step(net: &mut DiscreteNet, batch: &Batch, lr: f64) -> Result<(), OracleError> {
    let Targets::Classes(y) = &batch.targets else {
        return Err(OracleError::Unbalanceable("expected class labels".into()));
    };
    let mut fwd = net.forward(&batch.x, WeightTransform::Identity)?;
    let loss = fwd.tape.cross_entropy(fwd.logits, y)?;
    fwd.tape.backward(loss)?;
    for (id, var) in &fwd.weight_vars {
        let Some(grad) = fwd.tape.grad(*var) else {
            continue;
        };
        let grad = grad.to_vec();
        let tensor = match id {
            ParamId::Stem => &mut net.stem,
            ParamId::Head => &mut net.head,
            ParamId::EdgeOp { edge, .. } => net.edge_weights[*edge]
                .as_mut()
                .expect("parameterized edge"),
        };
        for (w, g) in tensor.data_mut().iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }
    Ok(())
}

/// Fraction of test rows whose argmax logit matches the label.
pub fn accuracy(net: &DiscreteNet, test: &DataSet) -> Result<f64, OracleError> {
    const CHUNK: usize = 64;
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = test.batch(chunk);
        let Targets::Classes(y) = &batch.targets else {
            unreachable!()
        };
        let fwd = net.forward(&batch.x, WeightTransform::Identity)?;
        let logits = fwd.tape.value(fwd.logits);
        let k = logits.shape()[1];
        for (i, label) in y.iter().enumerate() {
            if argmax(&logits.data()[i * k..(i + 1) * k]) == *label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Oracle build configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub space: CellSpace,
    pub task: SyntheticTask,
    pub epochs: usize,
    pub lr: f64,
    pub train_seeds: Vec<u64>,
    pub enum_cap: usize,
}

impl OracleConfig {
    /// 27-architecture mini space with the default synthetic task.
    pub fn default_mini() -> Self {
        let task = SyntheticTask::default_mini();
        OracleConfig {
            space: CellSpace::mini_space(task.num_classes),
            task,
            epochs: 50,
            lr: 0.05,
            train_seeds: vec![0, 1, 2],
            enum_cap: DEFAULT_ENUM_CAP,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleEntry {
    pub genotype: Genotype,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub params: usize,
    pub diverged_runs: usize,
}

/// Test accuracy for every genotype of an enumerated space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleTable {
    pub config_digest: String,
    pub entries: Vec<OracleEntry>,
}

impl OracleTable {
    pub fn get(&self, genotype: &Genotype) -> Option<&OracleEntry> {
        self.entries.iter().find(|e| &e.genotype == genotype)
    }

    /// Percentile of a genotype's accuracy within the table:
    /// 100 * (#entries with acc_mean <= this one's) / N. The best unique
    /// architecture sits at exactly 100.
    pub fn percentile(&self, genotype: &Genotype) -> Result<f64, OracleError> {
        let entry = self
            .get(genotype)
            .ok_or_else(|| OracleError::MissingGenotype(genotype.to_string()))?;
        if self.entries.is_empty() {
            return Err(OracleError::EmptyTable);
        }
        let at_or_below = self
            .entries
            .iter()
            .filter(|e| e.acc_mean <= entry.acc_mean)
            .count();
        Ok(100.0 * at_or_below as f64 / self.entries.len() as f64)
    }

    /// Evaluator closure for pruning-trajectory tracking.
    pub fn evaluator(&self) -> impl Fn(&Genotype) -> Result<f64, String> + '_ {
        move |g| {
            self.get(g)
                .map(|e| e.acc_mean)
                .ok_or_else(|| format!("genotype {g} missing from the oracle table"))
        }
    }
}

/// Train every genotype in the space with every train seed.
/// `workers > 1` trains candidates on that many threads.
pub fn build_oracle(cfg: &OracleConfig, workers: usize) -> Result<OracleTable, OracleError> {
    let genotypes = enumerate_space(&cfg.space, cfg.enum_cap)?;
    let digest = config_digest(cfg);
    let jobs: Vec<(usize, &Genotype)> = genotypes.iter().enumerate().collect();
    let results = run_jobs(workers, &jobs, |(_, g)| {
        let mut accs = Vec::with_capacity(cfg.train_seeds.len());
        let mut diverged = 0usize;
        for &seed in &cfg.train_seeds {
            let out = train_candidate(&cfg.space, g, &cfg.task, cfg.epochs, cfg.lr, seed)?;
            if out.diverged {
                diverged += 1;
            }
            accs.push(out.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
        Ok::<_, OracleError>((mean, var.sqrt(), diverged))
    })?;
    let mut entries = Vec::with_capacity(genotypes.len());
    for (g, (mean, std, diverged)) in genotypes.iter().zip(results) {
        let dn = DiscreteNet::init(&cfg.space, g, 0)?;
        entries.push(OracleEntry {
            genotype: g.clone(),
            acc_mean: mean,
            acc_std: std,
            params: dn.param_count(),
            diverged_runs: diverged,
        });
    }
    Ok(OracleTable {
        config_digest: digest,
        entries,
    })
}

/// Order-preserving parallel map over jobs.
pub(crate) fn run_jobs<J: Sync, T: Send, E: Send>(
    workers: usize,
    jobs: &[J],
    f: impl Fn(&J) -> Result<T, E> + Sync,
) -> Result<Vec<T>, E> {
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let mut out: Vec<Option<Result<T, E>>> = (0..jobs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("worker poisoned")[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("job completed")).collect()
}

/// Percentile statistics of search results against an oracle table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub config_digest: String,
    pub per_seed_percentiles: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub random_baseline_median: f64,
    pub random_draws: usize,
}

/// Per-seed oracle percentile of found genotypes, plus a random-selection
/// baseline computed from the same table.
pub fn rank_report(
    found: &[Genotype],
    oracle: &OracleTable,
    random_draws: usize,
    random_seed: u64,
) -> Result<RankReport, OracleError> {
    if oracle.entries.is_empty() {
        return Err(OracleError::EmptyTable);
    }
    let per_seed: Vec<f64> = found
        .iter()
        .map(|g| oracle.percentile(g))
        .collect::<Result<_, _>>()?;
    let (q1, median, q3) = stats::quartiles(&per_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(random_seed);
    let randoms: Vec<f64> = (0..random_draws)
        .map(|_| {
            let pick = rng.random_range(0..oracle.entries.len());
            oracle.percentile(&oracle.entries[pick].genotype)
        })
        .collect::<Result<_, _>>()?;
    Ok(RankReport {
        config_digest: oracle.config_digest.clone(),
        per_seed_percentiles: per_seed,
        median,
        q1,
        q3,
        random_baseline_median: stats::median(&randoms),
        random_draws,
    })
}

/// Selection methods compared by the bias report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMethod {
    Freedarts,
    SynflowSum,
    SnipSum,
    GradNormSum,
}

impl BiasMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BiasMethod::Freedarts => "freedarts",
            BiasMethod::SynflowSum => "synflow_sum",
            BiasMethod::SnipSum => "snip_sum",
            BiasMethod::GradNormSum => "grad_norm_sum",
        }
    }

    fn proxy(&self) -> Option<ProxyKind> {
        match self {
            BiasMethod::Freedarts => None,
            BiasMethod::SynflowSum => Some(ProxyKind::SynFlow),
            BiasMethod::SnipSum => Some(ProxyKind::Snip),
            BiasMethod::GradNormSum => Some(ProxyKind::GradNorm),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodBias {
    pub method: String,
    pub per_seed_max_param_fraction: Vec<f64>,
    pub max_param_fraction_mean: f64,
    pub per_seed_distinct_op_kinds: Vec<usize>,
    pub spearman_score_vs_params: Option<f64>,
    pub genotypes: Vec<Genotype>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub config_digest: String,
    /// True when every candidate op has the same parameter count, which
    /// makes the max-param fraction trivially 1.
    pub degenerate_equal_params: bool,
    pub methods: Vec<MethodBias>,
}

/// Per-edge selection by leave-one-out perturbation of an architecture-level
/// summing-up score: the op whose removal decreases the score the most wins.
pub fn summing_up_select(
    net: &Supernet,
    proxy: ProxyKind,
    batch: Option<&Batch>,
) -> Result<Genotype, OracleError> {
    let full = proxy_score(&ProxyTarget::Supernet(net), proxy, batch)?.value;
    let Space::Cell(space) = &net.space else {
        return Err(OracleError::Unbalanceable(
            "summing-up selection runs on cell spaces".into(),
        ));
    };
    let mut edge_ops = Vec::with_capacity(net.num_edges());
    let mut edge_idx = Vec::with_capacity(net.num_edges());
    for e in 0..net.num_edges() {
        let mut best: Option<(usize, f64)> = None;
        for o in 0..space.ops.len() {
            if !net.is_alive(e, o) {
                continue;
            }
            let without =
                proxy_score(&ProxyTarget::SupernetExcluding(net, (e, o)), proxy, batch)?.value;
            let importance = full - without;
            if best.map_or(true, |(_, cur)| importance > cur) {
                best = Some((o, importance));
            }
        }
        let (o, _) = best.expect("edge has alive ops");
        edge_idx.push(o);
        edge_ops.push(space.ops[o]);
    }
    Ok(Genotype::new(space.num_nodes, edge_ops, edge_idx))
}

/// Compare selection bias across methods on one space.
pub fn bias_report(
    space: &CellSpace,
    seeds: &[u64],
    methods: &[BiasMethod],
    alpha_scale: f64,
) -> Result<BiasReport, OracleError> {
    let space_enum = Space::Cell(space.clone());
    let max_params = space
        .ops
        .iter()
        .map(|o| o.param_count(space.channels))
        .max()
        .unwrap_or(0);
    let min_params = space
        .ops
        .iter()
        .map(|o| o.param_count(space.channels))
        .min()
        .unwrap_or(0);
    let degenerate = max_params == min_params;

    // shared sample of discrete architectures for the score-vs-params
    // correlation
    let sample_genotypes = sample_genotypes(space, 30, 0xB1A5);

    let mut out = Vec::new();
    for method in methods {
        let mut per_seed_fraction = Vec::with_capacity(seeds.len());
        let mut per_seed_distinct = Vec::with_capacity(seeds.len());
        let mut genotypes = Vec::with_capacity(seeds.len());
        let mut corr_samples: Vec<ProxySample> = Vec::new();

        for &seed in seeds {
            let genotype = match method {
                BiasMethod::Freedarts => {
                    let opts = SearchOptions {
                        alpha_scale,
                        ..SearchOptions::default()
                    };
                    run_search(&space_enum, seed, &opts)?.genotype
                }
                _ => {
                    let net = init_supernet(&space_enum, seed, alpha_scale)?;
                    let proxy = method.proxy().expect("summing-up method");
                    let batch = if proxy.needs_batch() {
                        Some(seeded_batch(&space_enum, 16, seed ^ 0xBA7C4)?)
                    } else {
                        None
                    };
                    summing_up_select(&net, proxy, batch.as_ref())?
                }
            };
            per_seed_fraction.push(crate::scoring::max_param_fraction(
                &genotype,
                &space.ops,
                space.channels,
            ));
            per_seed_distinct.push(genotype.distinct_op_kinds());
            genotypes.push(genotype);
        }

        // score-vs-params over the shared architecture sample, seed 0
        for g in &sample_genotypes {
            let value = match method {
                BiasMethod::Freedarts => {
                    let net = init_supernet(&space_enum, seeds.first().copied().unwrap_or(0), alpha_scale)?;
                    let table = zeros_scores_data_agnostic(&net, &ScoreOptions::default())?;
                    let g_idx = g.clone().with_space_indices(&space.ops)?;
                    g_idx
                        .edge_op_indices
                        .iter()
                        .enumerate()
                        .map(|(e, &o)| table.get(e, o).unwrap_or(0.0))
                        .sum::<f64>()
                }
                _ => {
                    let proxy = method.proxy().expect("summing-up method");
                    let dn = DiscreteNet::init(space, g, 0)?;
                    let batch = if proxy.needs_batch() {
                        Some(seeded_batch(&space_enum, 16, 0xBA7C4)?)
                    } else {
                        None
                    };
                    proxy_score(&ProxyTarget::Discrete(&dn), proxy, batch.as_ref())?.value
                }
            };
            corr_samples.push(ProxySample {
                proxy: method.name().into(),
                value,
                param_count: g.op_param_count(space.channels),
            });
        }
        let corr = bias_correlation(&corr_samples);
        let spearman = corr
            .per_proxy
            .first()
            .and_then(|e| e.spearman);

        let n = per_seed_fraction.len() as f64;
        out.push(MethodBias {
            method: method.name().into(),
            max_param_fraction_mean: per_seed_fraction.iter().sum::<f64>() / n,
            per_seed_max_param_fraction: per_seed_fraction,
            per_seed_distinct_op_kinds: per_seed_distinct,
            spearman_score_vs_params: spearman,
            genotypes,
        });
    }

    #[derive(Serialize)]
    struct BiasCfg<'a> {
        space: &'a CellSpace,
        seeds: &'a [u64],
        alpha_scale: f64,
    }
    Ok(BiasReport {
        config_digest: config_digest(&BiasCfg {
            space,
            seeds,
            alpha_scale,
        }),
        degenerate_equal_params: degenerate,
        methods: out,
    })
}

/// Deterministic sample of distinct, fully-connected genotypes (no starved
/// node) from a cell space.
pub fn sample_genotypes(space: &CellSpace, n: usize, seed: u64) -> Vec<Genotype> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    let total: usize = space.ops.len().pow(space.num_edges() as u32);
    let want = n.min(total);
    let mut attempts = 0usize;
    while out.len() < want && attempts < 1000 * want {
        attempts += 1;
        let idx: Vec<usize> = (0..space.num_edges())
            .map(|_| rng.random_range(0..space.ops.len()))
            .collect();
        if !seen.insert(idx.clone()) {
            continue;
        }
        let ops: Vec<OpKind> = idx.iter().map(|&i| space.ops[i]).collect();
        let g = Genotype::new(space.num_nodes, ops, idx);
        if g.starved_node().is_none() {
            out.push(g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_counts() {
        let two_ops = CellSpace {
            num_nodes: 2,
            ops: vec![OpKind::SkipConnect, OpKind::Conv1x1],
            ..CellSpace::default_cell()
        };
        assert_eq!(enumerate_space(&two_ops, 1000).unwrap().len(), 2);

        let mini = CellSpace::mini_space(4);
        let all = enumerate_space(&mini, 1000).unwrap();
        assert_eq!(all.len(), 27);
        // canonical order and uniqueness
        let strings: Vec<String> = all.iter().map(|g| g.to_string()).collect();
        let mut dedup = strings.clone();
        dedup.dedup();
        assert_eq!(strings.len(), dedup.len());

        let full = CellSpace::default_cell();
        match enumerate_space(&full, DEFAULT_ENUM_CAP) {
            Err(OracleError::CapExceeded { count, cap }) => {
                assert_eq!(count, 15625);
                assert_eq!(cap, 1000);
            }
            other => panic!("expected cap exceeded, got ok={:?}", other.is_ok()),
        }
    }

    #[test]
    fn task_generation_is_balanced_and_deterministic() {
        for task in [
            SyntheticTask::blobs(4, 1.0, 9),
            SyntheticTask {
                n_train: 64,
                n_test: 32,
                ..SyntheticTask::default_mini()
            },
        ] {
            let (tr1, te1) = task.generate().unwrap();
            let (tr2, _) = task.generate().unwrap();
            assert_eq!(tr1.x.data(), tr2.x.data());
            assert!(tr1.label_balance_ok(task.num_classes, 0.1));
            assert!(te1.label_balance_ok(task.num_classes, 0.1));
            // train/test draws differ
            assert_ne!(&tr1.x.data()[..10], &te1.x.data()[..10]);
        }
    }

    #[test]
    fn linearly_separable_task_reaches_high_accuracy() {
        // labels = sign of the first input coordinate; any net with a conv
        // path should exceed 0.9 after 50 epochs. 1x1 spatial inputs keep
        // the pooled features lossless.
        let space = CellSpace {
            num_nodes: 2,
            ops: vec![OpKind::Conv3x3],
            channels: 8,
            input_hw: 1,
            in_channels: 3,
            num_classes: 2,
        };
        let g = Genotype::new(2, vec![OpKind::Conv3x3], vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let mut data = Vec::with_capacity(n * 3);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let row: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                y.push(if row[0] > 0.0 { 1 } else { 0 });
                data.extend(row);
            }
            DataSet {
                x: Tensor::from_vec(vec![n, 3, 1, 1], data).unwrap(),
                y,
            }
        };
        let train = make(&mut rng, 256);
        let test = make(&mut rng, 128);
        let out = train_on_data(&space, &g, &train, &test, 50, 0.05, 0).unwrap();
        assert!(out.accuracy > 0.9, "accuracy {}", out.accuracy);
        assert!(!out.diverged);
    }

    #[test]
    fn skip_only_on_random_labels_sits_at_chance() {
        let space = CellSpace {
            num_nodes: 3,
            ops: vec![OpKind::SkipConnect, OpKind::Conv1x1],
            channels: 4,
            input_hw: 4,
            in_channels: 1,
            num_classes: 4,
        };
        let g = Genotype::new(3, vec![OpKind::SkipConnect; 3], vec![0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // inputs carry no label signal at all
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let data: Vec<f64> = (0..n * 16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let y: Vec<usize> = (0..n).map(|i| i % 4).collect();
            DataSet {
                x: Tensor::from_vec(vec![n, 1, 4, 4], data).unwrap(),
                y,
            }
        };
        let train = make(&mut rng, 256);
        let test = make(&mut rng, 256);
        let out = train_on_data(&space, &g, &train, &test, 20, 0.05, 0).unwrap();
        assert!(
            (out.accuracy - 0.25).abs() <= 0.1,
            "accuracy {} not within 0.1 of chance",
            out.accuracy
        );
    }

    #[test]
    fn training_is_deterministic() {
        let space = CellSpace::mini_space(4);
        let g = Genotype::new(
            3,
            vec![OpKind::Conv1x1, OpKind::SkipConnect, OpKind::Conv3x3],
            vec![1, 0, 2],
        );
        let task = SyntheticTask {
            n_train: 64,
            n_test: 32,
            ..SyntheticTask::default_mini()
        };
        let a = train_candidate(&space, &g, &task, 5, 0.05, 11).unwrap();
        let b = train_candidate(&space, &g, &task, 5, 0.05, 11).unwrap();
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    }

    #[test]
    fn percentile_of_best_is_100_and_random_median_near_50() {
        let mini = CellSpace::mini_space(4);
        let genotypes = enumerate_space(&mini, 1000).unwrap();
        let entries: Vec<OracleEntry> = genotypes
            .iter()
            .enumerate()
            .map(|(i, g)| OracleEntry {
                genotype: g.clone(),
                acc_mean: i as f64 / 27.0,
                acc_std: 0.0,
                params: 0,
                diverged_runs: 0,
            })
            .collect();
        let table = OracleTable {
            config_digest: "test".into(),
            entries,
        };
        let best = &genotypes[26];
        assert_eq!(table.percentile(best).unwrap(), 100.0);

        let report = rank_report(&[best.clone()], &table, 50, 0).unwrap();
        assert_eq!(report.per_seed_percentiles[0], 100.0);
        assert!(
            (report.random_baseline_median - 50.0).abs() <= 15.0,
            "random median {}",
            report.random_baseline_median
        );
        let missing = Genotype::new(3, vec![OpKind::AvgPool3x3; 3], vec![0; 3]);
        assert!(matches!(
            table.percentile(&missing),
            Err(OracleError::MissingGenotype(_))
        ));
    }

    #[test]
    fn sample_genotypes_distinct_and_capped() {
        let mini = CellSpace::mini_space(4);
        let sample = sample_genotypes(&mini, 50, 1);
        assert_eq!(sample.len(), 27); // capped at the space size
        let mut seen = std::collections::HashSet::new();
        for g in &sample {
            assert!(seen.insert(g.to_string()));
        }
    }
}
