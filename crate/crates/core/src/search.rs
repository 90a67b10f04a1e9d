//! Architecture search driven by Shapley attributions.
//!
//! Each epoch trains the value function one unit. After warm-up, a
//! Monte-Carlo estimate `phi` feeds a momentum accumulator
//! `s = mu * s + (1 - mu) * phi / |phi|`, and the architecture parameters
//! move by `eps * s / |s|`.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{EvalCache, EvalError, GameError, ValueFunction};
use crate::mix_seed;
use crate::scalar::{l2_norm, Scalar};
use crate::shapley::{shapley_mc, McConfig, ScanDirection, ShapleyEstimate, TruncationPolicy};
use crate::space::{Genotype, SearchSpace, SpaceError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    #[default]
    Global,
    PerEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Shapley-driven updates of alpha every epoch after warm-up.
    #[default]
    Full,
    /// Alpha is left to the evaluator; operations are picked from one final
    /// Shapley estimate.
    DiscretizeOnly,
    /// Alpha stays at its initial value; operations are picked from one final
    /// Shapley estimate.
    FrozenAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar"))]
pub struct SearchConfig<T> {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub permutations: usize,
    pub truncation: Option<T>,
    pub scan: ScanDirection,
    pub policy: TruncationPolicy,
    pub step_size: T,
    pub momentum: T,
    pub norm_scope: NormScope,
    pub mode: SearchMode,
    pub seed: u64,
    /// Epochs between two alpha updates after warm-up.
    pub update_every: usize,
    pub workers: usize,
    pub use_cache: bool,
    /// Overrides the space's default null-op handling at discretization.
    pub exclude_null: Option<bool>,
}

impl<T: Scalar> Default for SearchConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 15,
            permutations: 10,
            truncation: Some(T::of(0.5)),
            scan: ScanDirection::FromFull,
            policy: TruncationPolicy::ZeroFill,
            step_size: T::of(0.1),
            momentum: T::of(0.8),
            norm_scope: NormScope::Global,
            mode: SearchMode::Full,
            seed: 0,
            update_every: 1,
            workers: 1,
            use_cache: true,
            exclude_null: None,
        }
    }
}

impl<T: Scalar> SearchConfig<T> {
    pub fn validate(&self) -> Result<(), SearchError<T>> {
        let bad = |m: String| Err(SearchError::Config(m));
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warm-up ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.step_size.is_nan() || self.step_size <= T::zero() {
            return bad(format!("step size {} must be positive", self.step_size));
        }
        if !(self.momentum >= T::zero() && self.momentum <= T::one()) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if self.update_every == 0 {
            return bad("update cadence must be at least 1".into());
        }
        self.mc_config(0)
            .validate()
            .map_err(|e| SearchError::Config(e.to_string()))
    }

    /// Estimator settings for one epoch; each epoch has its own seed.
    pub fn mc_config(&self, epoch: usize) -> McConfig<T> {
        McConfig {
            permutations: self.permutations,
            truncation: self.truncation,
            scan: self.scan,
            policy: self.policy,
            seed: mix_seed(self.seed, epoch as u64),
            workers: self.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord<T> {
    pub epoch: usize,
    pub alpha: Vec<T>,
    pub phi: Option<Vec<Option<T>>>,
    pub evals_spent: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState<T> {
    pub alpha: Vec<T>,
    pub momentum: Vec<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochRecord<T>>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> SearchState<T> {
    pub fn new(players: usize) -> Self {
        Self {
            alpha: vec![T::zero(); players],
            momentum: vec![T::zero(); players],
            epoch: 0,
            history: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Checkpoint<T> {
    pub version: u32,
    pub space_hash: String,
    pub config: SearchConfig<T>,
    pub state: SearchState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, Error)]
pub enum SearchError<T: Scalar> {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("space has {space} players, evaluator has {evaluator}")]
    PlayerMismatch { space: usize, evaluator: usize },
    #[error("checkpoint belongs to a different space (hash {found}, expected {expected})")]
    SpaceHash { expected: String, found: String },
    #[error("evaluator failed at epoch {epoch}: {source}")]
    Evaluator {
        epoch: usize,
        #[source]
        source: EvalFailure,
        checkpoint: Option<PathBuf>,
        state: Box<SearchState<T>>,
    },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("writing checkpoint: {0}")]
    Io(#[from] std::io::Error),
}

/// Failure inside an epoch, from training or from estimation.
#[derive(Debug, Error)]
pub enum EvalFailure {
    #[error("training: {0}")]
    Train(#[source] EvalError),
    #[error("estimation: {0}")]
    Estimate(#[source] GameError),
}

/// Result of one momentum step.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumStep<T> {
    pub next: Vec<T>,
    /// Groups whose attribution had zero norm and were left at `mu * s`.
    pub degenerate_groups: usize,
}

/// `s_next = mu * s_prev + (1 - mu) * phi / |phi|`, normalizing within each
/// player group. A group whose `phi` is all zero only decays.
pub fn momentum_update<T: Scalar>(s_prev: &[T], phi: &[T], mu: T, groups: &[Range<usize>]) -> MomentumStep<T> {
    assert_eq!(s_prev.len(), phi.len());
    let mut next: Vec<T> = s_prev.iter().map(|&s| mu * s).collect();
    let mut degenerate_groups = 0;
    for g in groups {
        let norm = l2_norm(&phi[g.clone()]);
        if norm == T::zero() {
            degenerate_groups += 1;
            continue;
        }
        for i in g.clone() {
            next[i] = next[i] + (T::one() - mu) * phi[i] / norm;
        }
    }
    MomentumStep {
        next,
        degenerate_groups,
    }
}

/// `alpha_next = alpha + eps * s / |s|` per group; zero-norm groups stay put.
/// Returns the new parameters and the number of untouched groups.
pub fn alpha_update<T: Scalar>(alpha: &[T], s: &[T], eps: T, groups: &[Range<usize>]) -> (Vec<T>, usize) {
    assert_eq!(alpha.len(), s.len());
    let mut next = alpha.to_vec();
    let mut untouched = 0;
    for g in groups {
        let norm = l2_norm(&s[g.clone()]);
        if norm == T::zero() {
            untouched += 1;
            continue;
        }
        for i in g.clone() {
            next[i] = next[i] + eps * s[i] / norm;
        }
    }
    (next, untouched)
}

fn norm_groups(space: &SearchSpace, scope: NormScope) -> Vec<Range<usize>> {
    match scope {
        NormScope::Global => std::iter::once(0..space.players()).collect(),
        NormScope::PerEdge => space.edge_groups(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome<T> {
    pub genotype: Genotype,
    pub state: SearchState<T>,
    /// One-shot estimate used for discretization in the Shapley-only modes.
    pub final_estimate: Option<ShapleyEstimate<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions<T> {
    /// Written after every epoch and on failure.
    pub checkpoint: Option<PathBuf>,
    /// Continue from a saved state instead of starting fresh.
    pub resume: Option<SearchState<T>>,
}

/// Runs the search with a fresh state and no checkpointing.
pub fn run_search<T: Scalar, V: ValueFunction<T> + ?Sized>(
    space: &SearchSpace,
    vf: &mut V,
    cfg: &SearchConfig<T>,
) -> Result<SearchOutcome<T>, SearchError<T>> {
    run_search_with(space, vf, cfg, SearchOptions::default())
}

pub fn run_search_with<T: Scalar, V: ValueFunction<T> + ?Sized>(
    space: &SearchSpace,
    vf: &mut V,
    cfg: &SearchConfig<T>,
    options: SearchOptions<T>,
) -> Result<SearchOutcome<T>, SearchError<T>> {
    cfg.validate()?;
    let n = space.players();
    if vf.players() != n {
        return Err(SearchError::PlayerMismatch {
            space: n,
            evaluator: vf.players(),
        });
    }
    let groups = norm_groups(space, cfg.norm_scope);
    let cache = EvalCache::new();
    let cache = cfg.use_cache.then_some(&cache);
    let space_hash = space.fingerprint();
    let mut state = options.resume.unwrap_or_else(|| SearchState::new(n));

    let save = |state: &SearchState<T>| -> std::io::Result<()> {
        if let Some(path) = &options.checkpoint {
            Checkpoint {
                version: CHECKPOINT_VERSION,
                space_hash: space_hash.clone(),
                config: cfg.clone(),
                state: state.clone(),
            }
            .write(path)?;
        }
        Ok(())
    };
    let fail = |epoch: usize, source: EvalFailure, state: &SearchState<T>| -> SearchError<T> {
        let written = save(state).is_ok().then(|| options.checkpoint.clone()).flatten();
        SearchError::Evaluator {
            epoch,
            source,
            checkpoint: written,
            state: Box::new(state.clone()),
        }
    };

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let trainable = cfg.mode == SearchMode::DiscretizeOnly;
        if let Err(e) = vf.set_architecture(&state.alpha, trainable).and_then(|_| vf.train(1)) {
            return Err(fail(epoch, EvalFailure::Train(e), &state));
        }

        let mut record = EpochRecord {
            epoch,
            alpha: Vec::new(),
            phi: None,
            evals_spent: 0,
        };
        let due = epoch >= cfg.warmup_epochs && (epoch - cfg.warmup_epochs).is_multiple_of(cfg.update_every);
        if cfg.mode == SearchMode::Full && due {
            let est = match shapley_mc(vf, cache, &cfg.mc_config(epoch)) {
                Ok(est) => est,
                Err(e) => return Err(fail(epoch, EvalFailure::Estimate(e), &state)),
            };
            let phi = est.dense(T::zero());
            if !est.unsampled().is_empty() {
                state.warnings.push(format!(
                    "epoch {epoch}: {} players unsampled, treated as zero",
                    est.unsampled().len()
                ));
            }
            let step = momentum_update(&state.momentum, &phi, cfg.momentum, &groups);
            if step.degenerate_groups > 0 {
                state.warnings.push(format!(
                    "epoch {epoch}: zero-norm attribution in {} group(s)",
                    step.degenerate_groups
                ));
            }
            state.momentum = step.next;
            let (alpha, untouched) = alpha_update(&state.alpha, &state.momentum, cfg.step_size, &groups);
            if untouched > 0 {
                state.warnings.push(format!(
                    "epoch {epoch}: zero accumulator in {untouched} group(s), alpha unchanged"
                ));
            }
            state.alpha = alpha;
            record.phi = Some(est.phi);
            record.evals_spent = est.evals_spent;
        }
        record.alpha = state.alpha.clone();
        state.history.push(record);
        state.epoch += 1;
        save(&state)?;
    }

    let exclude_null = cfg.exclude_null.unwrap_or_else(|| space.default_exclude_null());
    let (genotype, final_estimate) = match cfg.mode {
        SearchMode::Full => (space.derive_genotype(&state.alpha, exclude_null)?, None),
        SearchMode::DiscretizeOnly | SearchMode::FrozenAlpha => {
            let est = shapley_mc(vf, cache, &cfg.mc_config(cfg.epochs))
                .map_err(|e| fail(cfg.epochs, EvalFailure::Estimate(e), &state))?;
            let scores = est.dense(T::neg_infinity());
            (space.derive_genotype(&scores, exclude_null)?, Some(est))
        }
    };
    Ok(SearchOutcome {
        genotype,
        state,
        final_estimate,
    })
}

/// Checks that a checkpoint matches `space` and returns its state and config.
pub fn resume_from<T: Scalar>(
    space: &SearchSpace,
    checkpoint: Checkpoint<T>,
) -> Result<(SearchConfig<T>, SearchState<T>), SearchError<T>> {
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(SearchError::Config(format!(
            "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
            checkpoint.version
        )));
    }
    let expected = space.fingerprint();
    if checkpoint.space_hash != expected {
        return Err(SearchError::SpaceHash {
            expected,
            found: checkpoint.space_hash,
        });
    }
    Ok((checkpoint.config, checkpoint.state))
}

/// Writes one row per (epoch, player): epoch, player, edge, from, to, op,
/// alpha, phi (empty when not estimated that epoch).
pub fn write_history_csv<T: Scalar, W: std::io::Write>(
    space: &SearchSpace,
    state: &SearchState<T>,
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "player", "edge", "from", "to", "op", "alpha", "phi"])?;
    for rec in &state.history {
        for p in 0..space.players() {
            let id = space.unflatten(p).expect("player in range");
            let edge = &space.edges()[id.edge_index];
            let phi = rec
                .phi
                .as_ref()
                .and_then(|phi| phi[p])
                .map(|v| v.to_string())
                .unwrap_or_default();
            w.write_record([
                rec.epoch.to_string(),
                p.to_string(),
                id.edge_index.to_string(),
                edge.from.to_string(),
                edge.to.to_string(),
                edge.ops[id.op_index].clone(),
                rec.alpha[p].to_string(),
                phi,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
