//! Diagnostics over a finished or running search: rank correlation between
//! operation strength and architecture value, pairwise removal studies, and
//! hyperparameter sweeps on synthetic games.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Coalition, EvalError, ValueFunction};
use crate::mix_seed;
use crate::scalar::Scalar;
use crate::search::{run_search, SearchConfig};
use crate::space::{Genotype, SearchSpace};
use crate::synthetic::{make_game, GameSpec, InteractionGame};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two observations, got {0}")]
    TooShort(usize),
    #[error("value at position {0} is not comparable (NaN)")]
    NotComparable(usize),
    #[error("{0}")]
    Usage(String),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

/// Pair counts behind Kendall's tau-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TauCounts {
    /// Concordant minus discordant pairs.
    pub net: i64,
    pub pairs: u64,
    pub ties_x: u64,
    pub ties_y: u64,
}

impl TauCounts {
    /// `net / sqrt((pairs - ties_x) * (pairs - ties_y))`, zero when either
    /// side is constant.
    pub fn tau_b(&self) -> f64 {
        let denom = ((self.pairs - self.ties_x) as f64) * ((self.pairs - self.ties_y) as f64);
        if denom == 0.0 {
            0.0
        } else {
            self.net as f64 / denom.sqrt()
        }
    }
}

fn cmp_at<T: PartialOrd>(v: &[T], a: usize, b: usize) -> Ordering {
    v[a].partial_cmp(&v[b]).expect("NaN screened out")
}

fn tie_pairs<T: PartialOrd>(order: &[usize], same: impl Fn(usize, usize) -> bool) -> u64 {
    let _ = std::marker::PhantomData::<T>;
    let mut total = 0u64;
    let mut run = 1u64;
    for w in order.windows(2) {
        if same(w[0], w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Counts for tau-b in O(n log n): sort by (x, y), then count the swaps a
/// stable merge sort by y needs.
pub fn tau_counts<T: PartialOrd>(xs: &[T], ys: &[T]) -> Result<TauCounts, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(AnalysisError::TooShort(n));
    }
    for i in 0..n {
        if xs[i].partial_cmp(&xs[i]).is_none() || ys[i].partial_cmp(&ys[i]).is_none() {
            return Err(AnalysisError::NotComparable(i));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp_at(xs, a, b).then_with(|| cmp_at(ys, a, b)));

    let ties_x = tie_pairs::<T>(&order, |a, b| cmp_at(xs, a, b) == Ordering::Equal);
    let ties_xy = tie_pairs::<T>(&order, |a, b| {
        cmp_at(xs, a, b) == Ordering::Equal && cmp_at(ys, a, b) == Ordering::Equal
    });

    let mut buf = order.clone();
    let swaps = merge_count(&mut order, &mut buf, ys);
    let ties_y = tie_pairs::<T>(&order, |a, b| cmp_at(ys, a, b) == Ordering::Equal);

    let pairs = (n as u64) * (n as u64 - 1) / 2;
    let net = pairs as i64 - ties_x as i64 - ties_y as i64 + ties_xy as i64 - 2 * swaps as i64;
    Ok(TauCounts {
        net,
        pairs,
        ties_x,
        ties_y,
    })
}

/// Sorts `v` by `key` and returns the number of inversions removed.
fn merge_count<T: PartialOrd>(v: &mut [usize], buf: &mut [usize], key: &[T]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl, key) + merge_count(r, br, key)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if cmp_at(key, v[j], v[i]) == Ordering::Less {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b between two samples.
pub fn kendall_tau<T: PartialOrd>(xs: &[T], ys: &[T]) -> Result<f64, AnalysisError> {
    Ok(tau_counts(xs, ys)?.tau_b())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledArchitecture<T> {
    /// Op index per edge.
    pub choice: Vec<usize>,
    pub genotype: String,
    pub strength: T,
    pub true_value: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport<T> {
    pub samples: Vec<SampledArchitecture<T>>,
    pub kendall_tau: f64,
    pub sample_count: usize,
}

impl<T: Scalar> CorrelationReport<T> {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["genotype", "strength", "true_value"])?;
        for s in &self.samples {
            w.write_record([s.genotype.clone(), s.strength.to_string(), s.true_value.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn decode_choice(space: &SearchSpace, mut index: u128) -> Vec<usize> {
    space
        .edges()
        .iter()
        .map(|e| {
            let k = e.ops.len() as u128;
            let op = (index % k) as usize;
            index /= k;
            op
        })
        .collect()
}

fn choice_string(space: &SearchSpace, choice: &[usize]) -> String {
    let g = Genotype {
        chosen: space
            .edges()
            .iter()
            .enumerate()
            .map(|(i, e)| crate::space::ChosenOp {
                edge: i,
                from: e.from,
                to: e.to,
                op_index: choice[i],
                op: e.ops[choice[i]].clone(),
            })
            .collect(),
        discarded_edges: Vec::new(),
    };
    g.to_string()
}

/// Samples `n_samples` distinct one-op-per-edge architectures uniformly
/// (all of them when the space is smaller), scores each by the mean `alpha`
/// of its operations, evaluates it, and correlates the two.
pub fn correlation_analysis<T: Scalar, V: ValueFunction<T> + ?Sized>(
    space: &SearchSpace,
    vf: &V,
    alpha: &[T],
    n_samples: usize,
    seed: u64,
) -> Result<CorrelationReport<T>, AnalysisError> {
    if alpha.len() != space.players() {
        return Err(AnalysisError::LengthMismatch(alpha.len(), space.players()));
    }
    let total = space
        .architecture_count()
        .ok_or_else(|| AnalysisError::Usage("space too large to index".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<u128> = if (n_samples as u128) >= total {
        (0..total).collect()
    } else if total <= usize::MAX as u128 {
        rand::seq::index::sample(&mut rng, total as usize, n_samples)
            .into_iter()
            .map(|i| i as u128)
            .collect()
    } else {
        return Err(AnalysisError::Usage("space too large to index".into()));
    };

    let mut samples = Vec::with_capacity(indices.len());
    for idx in indices {
        let choice = decode_choice(space, idx);
        let coalition = space.architecture_coalition(&choice);
        let strength = coalition.iter().map(|p| alpha[p]).sum::<T>() / T::of(choice.len() as f64);
        let true_value = vf.evaluate(&coalition)?;
        samples.push(SampledArchitecture {
            genotype: choice_string(space, &choice),
            choice,
            strength,
            true_value,
        });
    }
    let xs: Vec<T> = samples.iter().map(|s| s.strength).collect();
    let ys: Vec<T> = samples.iter().map(|s| s.true_value).collect();
    let kendall_tau = kendall_tau(&xs, &ys)?;
    Ok(CorrelationReport {
        sample_count: samples.len(),
        samples,
        kendall_tau,
    })
}

/// Accuracy drops from removing one operation on each of two edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseStudy<T> {
    pub edges: (usize, usize),
    pub ops_a: Vec<String>,
    pub ops_b: Vec<String>,
    pub full_value: T,
    /// `V(N) - V(N \ {a})` per op of the first edge.
    pub single_a: Vec<T>,
    pub single_b: Vec<T>,
    /// `joint[i][j] = V(N) - V(N \ {a_i, b_j})`, row-major over the first edge.
    pub joint: Vec<Vec<T>>,
}

impl<T: Scalar> PairwiseStudy<T> {
    /// Joint drop minus the sum of the two single drops.
    pub fn excess(&self, i: usize, j: usize) -> T {
        self.joint[i][j] - self.single_a[i] - self.single_b[j]
    }

    /// Matrix with `ops_b` as the header row and `ops_a` as the first column,
    /// followed by the two single-removal rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::from("removed")];
        header.extend(self.ops_b.iter().cloned());
        w.write_record(&header)?;
        for (i, row) in self.joint.iter().enumerate() {
            let mut rec = vec![self.ops_a[i].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn pairwise_removal_study<T: Scalar, V: ValueFunction<T> + ?Sized>(
    space: &SearchSpace,
    vf: &V,
    edge_a: usize,
    edge_b: usize,
) -> Result<PairwiseStudy<T>, AnalysisError> {
    let edges = space.edges().len();
    if edge_a >= edges || edge_b >= edges || edge_a == edge_b {
        return Err(AnalysisError::Usage(format!(
            "need two distinct edges below {edges}, got {edge_a} and {edge_b}"
        )));
    }
    let full = Coalition::full(space.players());
    let full_value = vf.evaluate(&full)?;
    let drop = |c: &Coalition| -> Result<T, EvalError> { Ok(full_value - vf.evaluate(c)?) };
    let pa = space.edge_players(edge_a);
    let pb = space.edge_players(edge_b);
    let single_a = pa
        .clone()
        .map(|p| drop(&full.without(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let single_b = pb
        .clone()
        .map(|p| drop(&full.without(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let joint = pa
        .clone()
        .map(|a| pb.clone().map(|b| drop(&full.without(a).without(b))).collect())
        .collect::<Result<Vec<Vec<T>>, _>>()?;
    Ok(PairwiseStudy {
        edges: (edge_a, edge_b),
        ops_a: space.edges()[edge_a].ops.clone(),
        ops_b: space.edges()[edge_b].ops.clone(),
        full_value,
        single_a,
        single_b,
        joint,
    })
}

/// Hyperparameter grid; every combination becomes one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid<T> {
    pub permutations: Vec<usize>,
    pub truncation: Vec<Option<T>>,
    pub momentum: Vec<T>,
    pub step_size: Vec<T>,
}

impl<T: Scalar> SweepGrid<T> {
    /// Grid pinned to the base configuration's values.
    pub fn single(base: &SearchConfig<T>) -> Self {
        Self {
            permutations: vec![base.permutations],
            truncation: vec![base.truncation],
            momentum: vec![base.momentum],
            step_size: vec![base.step_size],
        }
    }

    pub fn cells(&self) -> Vec<SweepCell<T>> {
        let mut out = Vec::new();
        for &permutations in &self.permutations {
            for &truncation in &self.truncation {
                for &momentum in &self.momentum {
                    for &step_size in &self.step_size {
                        out.push(SweepCell {
                            permutations,
                            truncation,
                            momentum,
                            step_size,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell<T> {
    pub permutations: usize,
    pub truncation: Option<T>,
    pub momentum: T,
    pub step_size: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub cell: SweepCell<T>,
    pub runs: usize,
    /// Runs whose genotype matches the planted operation on every kept edge.
    pub recovered: usize,
    /// Mean share of kept edges carrying the planted operation.
    pub edge_accuracy: f64,
    /// Value-function evaluations over all runs.
    pub evals_spent: u64,
    pub failures: Vec<String>,
}

/// Whether each kept edge carries the planted operation, as (matches, kept).
pub fn planted_match(space: &SearchSpace, genotype: &Genotype, planted: &[usize]) -> (usize, usize) {
    let hits = genotype
        .chosen
        .iter()
        .filter(|c| planted.get(c.edge) == Some(&(space.edge_players(c.edge).start + c.op_index)))
        .count();
    (hits, genotype.chosen.len())
}

/// Outcome of one seeded search on a freshly generated game.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub genotype: Genotype,
    pub recovered: bool,
    pub edge_hits: usize,
    pub evals_spent: u64,
}

/// Generates the game for `seed`, runs the search and scores it against the
/// planted optimum.
pub fn seeded_run<T: Scalar>(
    space: &SearchSpace,
    spec: &GameSpec,
    cfg: &SearchConfig<T>,
    seed: u64,
) -> Result<RunSummary, String> {
    let mut game: InteractionGame<T> =
        make_game(space, &spec.clone().with_seed(mix_seed(spec.seed, seed))).map_err(|e| e.to_string())?;
    let cfg = SearchConfig { seed, ..cfg.clone() };
    let out = run_search(space, &mut game, &cfg).map_err(|e| e.to_string())?;
    let (hits, kept) = planted_match(space, &out.genotype, &game.planted);
    let evals_spent = out.state.history.iter().map(|r| r.evals_spent).sum::<u64>()
        + out.final_estimate.as_ref().map_or(0, |e| e.evals_spent);
    Ok(RunSummary {
        seed,
        recovered: !game.planted.is_empty() && hits == kept,
        edge_hits: hits,
        genotype: out.genotype,
        evals_spent,
    })
}

fn with_pool<R: Send>(jobs: usize, job: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(job),
        Err(_) => job(),
    }
}

/// Runs `seeds.len()` searches per grid cell, up to `jobs` at a time. Each
/// run owns its game instance. Failed runs are recorded on their row.
pub fn ablation_sweep<T: Scalar>(
    space: &SearchSpace,
    spec: &GameSpec,
    base: &SearchConfig<T>,
    grid: &SweepGrid<T>,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepRow<T>>, AnalysisError> {
    let cells = grid.cells();
    if cells.is_empty() || seeds.is_empty() {
        return Err(AnalysisError::Usage("sweep grid and seed list must be nonempty".into()));
    }
    let work: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Result<RunSummary, String>> = with_pool(jobs, || {
        work.par_iter()
            .map(|&(c, seed)| {
                let cell = &cells[c];
                let cfg = SearchConfig {
                    permutations: cell.permutations,
                    truncation: cell.truncation,
                    momentum: cell.momentum,
                    step_size: cell.step_size,
                    workers: 1,
                    ..base.clone()
                };
                seeded_run(space, spec, &cfg, seed)
            })
            .collect()
    });

    let mut rows: Vec<SweepRow<T>> = cells
        .iter()
        .map(|&cell| SweepRow {
            cell,
            runs: 0,
            recovered: 0,
            edge_accuracy: 0.0,
            evals_spent: 0,
            failures: Vec::new(),
        })
        .collect();
    for (&(c, seed), result) in work.iter().zip(results) {
        let row = &mut rows[c];
        match result {
            Ok(run) => {
                row.runs += 1;
                row.recovered += run.recovered as usize;
                let kept = run.genotype.chosen.len().max(1);
                row.edge_accuracy += run.edge_hits as f64 / kept as f64;
                row.evals_spent += run.evals_spent;
            }
            Err(e) => row.failures.push(format!("seed {seed}: {e}")),
        }
    }
    for row in &mut rows {
        if row.runs > 0 {
            row.edge_accuracy /= row.runs as f64;
        }
    }
    Ok(rows)
}

/// Sweep rows as CSV.
pub fn write_sweep_csv<T: Scalar, W: std::io::Write>(rows: &[SweepRow<T>], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "permutations",
        "truncation",
        "momentum",
        "step_size",
        "runs",
        "recovered",
        "edge_accuracy",
        "evals_spent",
        "failures",
    ])?;
    for r in rows {
        w.write_record([
            r.cell.permutations.to_string(),
            r.cell.truncation.map_or_else(|| "off".to_string(), |t| t.to_string()),
            r.cell.momentum.to_string(),
            r.cell.step_size.to_string(),
            r.runs.to_string(),
            r.recovered.to_string(),
            r.edge_accuracy.to_string(),
            r.evals_spent.to_string(),
            r.failures.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
