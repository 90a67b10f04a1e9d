//! Exact and Monte-Carlo Shapley attribution.
//!
//! The exact estimator enumerates all `2^n` coalitions once and weights each
//! marginal contribution by `|S|! (n - |S| - 1)! / n!`. The Monte-Carlo
//! estimator samples permutations and averages the marginals seen along each
//! one, optionally stopping a scan early once the coalition has lost more
//! than `eta` accuracy relative to the full set.
//!
//! Permutation `i` draws from its own ChaCha stream, so permutations can be
//! scanned in any order or in parallel; marginals are merged in permutation
//! order, which keeps the estimate bit-identical across worker counts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::game::{Coalition, EvalCache, GameError, Valuation, ValueFunction};
use crate::scalar::Scalar;

/// Default player cap for exact enumeration.
pub const DEFAULT_EXACT_CAP: usize = 24;

/// Per-player attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate<T> {
    /// `None` marks a player that received no sample (skip-policy
    /// truncation); it is never reported as zero.
    pub phi: Vec<Option<T>>,
    pub samples_per_player: Vec<u64>,
    /// Underlying value-function calls made for this estimate.
    pub evals_spent: u64,
    /// Share of (permutation, player) slots cut off by truncation.
    pub truncated_fraction: f64,
}

impl<T: Scalar> ShapleyEstimate<T> {
    pub fn players(&self) -> usize {
        self.phi.len()
    }

    /// Players without any sample.
    pub fn unsampled(&self) -> Vec<usize> {
        self.phi
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.is_none().then_some(i))
            .collect()
    }

    /// Attribution with unsampled players replaced by `fill`.
    pub fn dense(&self, fill: T) -> Vec<T> {
        self.phi.iter().map(|p| p.unwrap_or(fill)).collect()
    }

    pub fn total(&self) -> T {
        self.phi.iter().flatten().copied().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanDirection {
    /// Start from the full coalition and remove operations back to front.
    #[default]
    FromFull,
    /// Start from the empty coalition and add operations front to back.
    FromEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationPolicy {
    /// Players cut off by truncation receive a zero marginal sample.
    #[default]
    ZeroFill,
    /// Players cut off by truncation receive no sample.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig<T> {
    pub permutations: usize,
    /// Accuracy-drop threshold `eta`; `None` disables truncation.
    pub truncation: Option<T>,
    pub scan: ScanDirection,
    pub policy: TruncationPolicy,
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
}

impl<T: Scalar> Default for McConfig<T> {
    fn default() -> Self {
        Self {
            permutations: 10,
            truncation: Some(T::of(0.5)),
            scan: ScanDirection::FromFull,
            policy: TruncationPolicy::ZeroFill,
            seed: 0,
            workers: 1,
        }
    }
}

impl<T: Scalar> McConfig<T> {
    pub fn validate(&self) -> Result<(), GameError> {
        if self.permutations == 0 {
            return Err(GameError::Config("at least one permutation is required".into()));
        }
        if let Some(eta) = self.truncation {
            if !(eta > T::zero() && eta <= T::one()) {
                return Err(GameError::Config(format!("truncation threshold {eta} outside (0, 1]")));
            }
        }
        if self.workers == 0 {
            return Err(GameError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Marginal samples collected along one permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome<T> {
    /// Indexed by player; `None` means no sample from this permutation.
    pub marginals: Vec<Option<T>>,
    /// Players whose slot was cut off (zero-filled or skipped).
    pub truncated: usize,
}

/// Walks one permutation and records each player's marginal contribution.
///
/// From the full side, `permutation` is consumed back to front: each step
/// removes one operation, credits it with `V(S + o) - V(S)`, and stops once
/// `V(N) - V(S) > eta`. From the empty side, operations are added front to
/// back and the scan stops once `V(N) - V(Pre) <= eta`. Either way, players
/// not reached get a zero sample under [`TruncationPolicy::ZeroFill`] and
/// none under [`TruncationPolicy::Skip`].
pub fn truncated_scan<T: Scalar, V: ValueFunction<T> + ?Sized>(
    valuation: &Valuation<'_, T, V>,
    permutation: &[usize],
    eta: Option<T>,
    direction: ScanDirection,
    policy: TruncationPolicy,
) -> Result<ScanOutcome<T>, GameError> {
    let n = valuation.players();
    debug_assert_eq!(permutation.len(), n);
    let mut marginals = vec![None; n];
    let mut cut: &[usize] = &[];

    match direction {
        ScanDirection::FromFull => {
            let mut coalition = Coalition::full(n);
            let full = valuation.value(&coalition)?;
            let mut prev = full;
            for k in (0..n).rev() {
                let op = permutation[k];
                coalition.remove(op);
                let v = valuation.value(&coalition)?;
                marginals[op] = Some(prev - v);
                prev = v;
                if eta.is_some_and(|eta| full - v > eta) {
                    cut = &permutation[..k];
                    break;
                }
            }
        }
        ScanDirection::FromEmpty => {
            let mut coalition = Coalition::empty(n);
            let mut prev = valuation.value(&coalition)?;
            let full = valuation.value(&Coalition::full(n))?;
            for k in 0..n {
                let op = permutation[k];
                coalition.insert(op);
                let v = if k + 1 == n { full } else { valuation.value(&coalition)? };
                marginals[op] = Some(v - prev);
                prev = v;
                if k + 1 < n && eta.is_some_and(|eta| full - v <= eta) {
                    cut = &permutation[k + 1..];
                    break;
                }
            }
        }
    }

    if policy == TruncationPolicy::ZeroFill {
        for &p in cut {
            marginals[p] = Some(T::zero());
        }
    }
    Ok(ScanOutcome {
        marginals,
        truncated: cut.len(),
    })
}

/// Uniform random permutation `index` for `seed`.
pub fn permutation(seed: u64, index: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

fn run_parallel<R: Send>(workers: usize, job: impl FnOnce() -> R + Send) -> R {
    if workers <= 1 {
        return job();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(job),
        Err(_) => job(),
    }
}

/// Monte-Carlo permutation estimate.
pub fn shapley_mc<T: Scalar, V: ValueFunction<T> + ?Sized>(
    vf: &V,
    cache: Option<&EvalCache<T>>,
    cfg: &McConfig<T>,
) -> Result<ShapleyEstimate<T>, GameError> {
    cfg.validate()?;
    let n = vf.players();
    let valuation = Valuation::new(vf, cache);

    if cache.is_some() {
        // shared by every permutation
        valuation.value(&Coalition::full(n))?;
        valuation.value(&Coalition::empty(n))?;
    }

    let scan = |i: usize| {
        let perm = permutation(cfg.seed, i as u64, n);
        truncated_scan(&valuation, &perm, cfg.truncation, cfg.scan, cfg.policy)
    };
    let outcomes: Vec<ScanOutcome<T>> = if cfg.workers > 1 && vf.concurrent() {
        run_parallel(cfg.workers, || {
            (0..cfg.permutations)
                .into_par_iter()
                .map(scan)
                .collect::<Result<_, _>>()
        })?
    } else {
        (0..cfg.permutations).map(scan).collect::<Result<_, _>>()?
    };

    let mut sums = vec![T::zero(); n];
    let mut counts = vec![0u64; n];
    let mut truncated = 0usize;
    for outcome in &outcomes {
        truncated += outcome.truncated;
        for (p, m) in outcome.marginals.iter().enumerate() {
            if let Some(m) = m {
                sums[p] = sums[p] + *m;
                counts[p] += 1;
            }
        }
    }
    let phi = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / T::of(c as f64)))
        .collect();
    Ok(ShapleyEstimate {
        phi,
        samples_per_player: counts,
        evals_spent: valuation.evals(),
        truncated_fraction: truncated as f64 / (cfg.permutations * n.max(1)) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactConfig {
    pub cap: usize,
    pub workers: usize,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_EXACT_CAP,
            workers: 1,
        }
    }
}

/// `1 / (n * C(n-1, s))` for `s` in `0..n`.
fn coalition_weights(n: usize) -> Vec<f64> {
    let mut weights = Vec::with_capacity(n);
    let mut binom = 1.0f64;
    for s in 0..n {
        weights.push(1.0 / (n as f64 * binom));
        binom = binom * (n - 1 - s) as f64 / (s + 1) as f64;
    }
    weights
}

/// Exact Shapley values by full coalition enumeration.
pub fn shapley_exact<T: Scalar, V: ValueFunction<T> + ?Sized>(
    vf: &V,
    cache: Option<&EvalCache<T>>,
    cfg: &ExactConfig,
) -> Result<ShapleyEstimate<T>, GameError> {
    let n = vf.players();
    let cap = cfg.cap.min(63);
    if n > cap {
        return Err(GameError::ExactCap { players: n, cap });
    }
    let valuation = Valuation::new(vf, cache);
    let total = 1usize << n;
    let value = |mask: usize| valuation.value(&Coalition::from_mask(n, mask as u64));
    let values: Vec<T> = if cfg.workers > 1 && vf.concurrent() {
        run_parallel(cfg.workers, || {
            (0..total).into_par_iter().map(value).collect::<Result<_, _>>()
        })?
    } else {
        (0..total).map(value).collect::<Result<_, _>>()?
    };

    let weights: Vec<T> = coalition_weights(n).into_iter().map(T::of).collect();
    let player_phi = |i: usize| -> T {
        let bit = 1usize << i;
        // group marginals by coalition size, then weight each group
        let mut by_size = vec![T::zero(); n];
        for mask in 0..total {
            if mask & bit == 0 {
                let size = mask.count_ones() as usize;
                by_size[size] = by_size[size] + (values[mask | bit] - values[mask]);
            }
        }
        by_size.iter().zip(&weights).map(|(&s, &w)| s * w).sum()
    };
    let phi: Vec<T> = if cfg.workers > 1 {
        run_parallel(cfg.workers, || (0..n).into_par_iter().map(player_phi).collect())
    } else {
        (0..n).map(player_phi).collect()
    };

    let samples = if n == 0 { 0 } else { 1u64 << (n - 1) };
    Ok(ShapleyEstimate {
        phi: phi.into_iter().map(Some).collect(),
        samples_per_player: vec![samples; n],
        evals_spent: valuation.evals(),
        truncated_fraction: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::EvalError;

    /// Closure-backed game for hand-built examples.
    struct FnGame<F> {
        n: usize,
        f: F,
    }

    impl<F: Fn(&Coalition) -> f64 + Send + Sync> ValueFunction<f64> for FnGame<F> {
        fn players(&self) -> usize {
            self.n
        }
        fn evaluate(&self, c: &Coalition) -> Result<f64, EvalError> {
            Ok((self.f)(c))
        }
        fn train(&mut self, _: u32) -> Result<(), EvalError> {
            Ok(())
        }
        fn generation(&self) -> u64 {
            0
        }
    }

    fn additive(w: Vec<f64>) -> FnGame<impl Fn(&Coalition) -> f64 + Send + Sync> {
        FnGame {
            n: w.len(),
            f: move |c: &Coalition| c.iter().map(|i| w[i]).sum(),
        }
    }

    /// Textbook permutation-average oracle: enumerate all n! orderings.
    fn permutation_oracle(n: usize, v: impl Fn(u64) -> f64) -> Vec<f64> {
        fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == 1 {
                out.push(a.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, a, out);
                let j = if k.is_multiple_of(2) { i } else { 0 };
                a.swap(j, k - 1);
            }
        }
        let mut perms = Vec::new();
        heap(n, &mut (0..n).collect(), &mut perms);
        let mut phi = vec![0.0; n];
        for p in &perms {
            let mut mask = 0u64;
            for &o in p {
                phi[o] += v(mask | 1 << o) - v(mask);
                mask |= 1 << o;
            }
        }
        phi.iter().map(|x| x / perms.len() as f64).collect()
    }

    #[test]
    fn exact_additive_returns_weights() {
        let w = vec![0.1, 0.25, 0.05, 0.3, 0.0];
        let est = shapley_exact(&additive(w.clone()), None, &ExactConfig::default()).unwrap();
        for (p, w) in est.phi.iter().zip(&w) {
            assert!((p.unwrap() - w).abs() < 1e-15);
        }
        assert_eq!(est.evals_spent, 32);
        assert_eq!(est.samples_per_player, vec![16; 5]);
        assert_eq!(est.truncated_fraction, 0.0);
    }

    #[test]
    fn exact_majority_is_thirds() {
        let g = FnGame {
            n: 3,
            f: |c: &Coalition| if c.cardinality() >= 2 { 1.0 } else { 0.0 },
        };
        let est = shapley_exact(&g, None, &ExactConfig::default()).unwrap();
        for p in est.phi {
            assert!((p.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_null_player_is_zero() {
        let g = FnGame {
            n: 5,
            f: |c: &Coalition| {
                let m = c.low_word() & !0b100;
                (m.count_ones() as f64).sqrt() / 3.0 + if m & 0b11 == 0b11 { 0.2 } else { 0.0 }
            },
        };
        let est = shapley_exact(&g, None, &ExactConfig::default()).unwrap();
        assert_eq!(est.phi[2], Some(0.0));
    }

    #[test]
    fn exact_matches_permutation_oracle() {
        let v = |m: u64| {
            let x = m as f64;
            ((x * 0.37).sin() + 1.0) / 2.0 * (m.count_ones() as f64 / 6.0)
        };
        let g = FnGame {
            n: 6,
            f: move |c: &Coalition| v(c.low_word()),
        };
        let est = shapley_exact(&g, None, &ExactConfig::default()).unwrap();
        let oracle = permutation_oracle(6, v);
        for (a, b) in est.phi.iter().zip(&oracle) {
            assert!((a.unwrap() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_refuses_over_cap() {
        let g = additive(vec![0.01; 30]);
        match shapley_exact(&g, None, &ExactConfig::default()).unwrap_err() {
            GameError::ExactCap { players, cap } => assert_eq!((players, cap), (30, 24)),
            e => panic!("{e}"),
        }
        let err = shapley_exact(&g, None, &ExactConfig { cap: 8, workers: 1 }).unwrap_err();
        assert!(err.to_string().contains("30") && err.to_string().contains('8'));
    }

    #[test]
    fn exact_parallel_matches_serial() {
        let g = FnGame {
            n: 10,
            f: |c: &Coalition| (c.low_word() % 13) as f64 / 13.0,
        };
        let a = shapley_exact(&g, None, &ExactConfig::default()).unwrap();
        let b = shapley_exact(&g, None, &ExactConfig { cap: 24, workers: 8 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_additive_single_permutation_is_exact() {
        let w: Vec<f64> = (0..10).map(|i| i as f64 / 64.0).collect();
        for seed in [0, 1, 99] {
            let cfg = McConfig {
                permutations: 1,
                truncation: None,
                seed,
                ..McConfig::default()
            };
            let est = shapley_mc(&additive(w.clone()), None, &cfg).unwrap();
            assert_eq!(est.dense(f64::NAN), w);
        }
    }

    #[test]
    fn mc_budget_without_cache() {
        let g = additive(vec![0.05; 7]);
        let cfg = McConfig {
            permutations: 13,
            truncation: None,
            ..McConfig::default()
        };
        assert_eq!(shapley_mc(&g, None, &cfg).unwrap().evals_spent, 13 * 8);
        let cfg = McConfig {
            scan: ScanDirection::FromEmpty,
            ..cfg
        };
        assert_eq!(shapley_mc(&g, None, &cfg).unwrap().evals_spent, 13 * 8);
    }

    #[test]
    fn mc_cache_shares_endpoints() {
        let g = FnGame {
            n: 12,
            f: |c: &Coalition| (c.low_word() % 1009) as f64 / 1009.0,
        };
        let cfg = McConfig {
            permutations: 5,
            truncation: None,
            ..McConfig::default()
        };
        let cache = EvalCache::new();
        let est = shapley_mc(&g, Some(&cache), &cfg).unwrap();
        assert!(est.evals_spent <= 5 * 11 + 2);
        assert_eq!(est, {
            let mut e = shapley_mc(&g, None, &cfg).unwrap();
            e.evals_spent = est.evals_spent;
            e
        });
    }

    /// Removing any two of ten operations costs 0.6; one removal costs 0.05.
    fn steep10() -> FnGame<impl Fn(&Coalition) -> f64 + Send + Sync> {
        FnGame {
            n: 10,
            f: |c: &Coalition| match 10 - c.cardinality() {
                0 => 0.9,
                1 => 0.85,
                _ => 0.3,
            },
        }
    }

    #[test]
    fn truncation_stops_after_second_removal() {
        let g = steep10();
        let valuation = Valuation::new(&g, None);
        for seed in 0..20 {
            let perm = permutation(seed, 0, 10);
            let before = valuation.evals();
            let out = truncated_scan(
                &valuation,
                &perm,
                Some(0.5),
                ScanDirection::FromFull,
                TruncationPolicy::ZeroFill,
            )
            .unwrap();
            assert!(valuation.evals() - before <= 3);
            assert_eq!(out.truncated, 8);
            assert_eq!(out.marginals[perm[9]], Some(0.9 - 0.85));
            assert!((out.marginals[perm[8]].unwrap() - 0.55).abs() < 1e-12);
            assert!(perm[..8].iter().all(|&p| out.marginals[p] == Some(0.0)));
        }
        let cfg = McConfig {
            permutations: 50,
            truncation: Some(0.5),
            ..McConfig::default()
        };
        let est = shapley_mc(&g, None, &cfg).unwrap();
        assert!(est.truncated_fraction >= 0.7);
        assert_eq!(est.evals_spent, 150);
    }

    #[test]
    fn skip_policy_marks_unsampled_players() {
        let g = steep10();
        let cfg = McConfig {
            permutations: 1,
            truncation: Some(0.5),
            policy: TruncationPolicy::Skip,
            ..McConfig::default()
        };
        let est = shapley_mc(&g, None, &cfg).unwrap();
        assert_eq!(est.unsampled().len(), 8);
        assert_eq!(est.samples_per_player.iter().sum::<u64>(), 2);
        assert!(est.phi.iter().flatten().all(|p| p.is_finite()));
    }

    #[test]
    fn unreachable_threshold_never_truncates() {
        let g = FnGame {
            n: 8,
            f: |c: &Coalition| 0.2 + 0.5 * c.cardinality() as f64 / 8.0,
        };
        let base = McConfig {
            permutations: 20,
            truncation: None,
            ..McConfig::default()
        };
        let off = shapley_mc(&g, None, &base).unwrap();
        let on = shapley_mc(
            &g,
            None,
            &McConfig {
                truncation: Some(1.0),
                ..base.clone()
            },
        )
        .unwrap();
        assert_eq!(on.truncated_fraction, 0.0);
        assert_eq!(on, off);
    }

    #[test]
    fn from_empty_truncates_near_full_value() {
        let g = FnGame {
            n: 6,
            f: |c: &Coalition| c.cardinality() as f64 / 6.0,
        };
        let valuation = Valuation::new(&g, None);
        let perm = vec![0, 1, 2, 3, 4, 5];
        let out = truncated_scan(
            &valuation,
            &perm,
            Some(0.5),
            ScanDirection::FromEmpty,
            TruncationPolicy::Skip,
        )
        .unwrap();
        // V(N) - V(Pre) <= 0.5 once three players are in
        assert_eq!(out.truncated, 3);
        assert!(out.marginals[..3].iter().all(|m| m.is_some()));
        assert!(out.marginals[3..].iter().all(|m| m.is_none()));
    }

    #[test]
    fn direction_irrelevant_without_truncation() {
        let g = FnGame {
            n: 9,
            f: |c: &Coalition| ((c.low_word() * 2654435761) % 1000) as f64 / 1000.0,
        };
        let cfg = McConfig {
            permutations: 30,
            truncation: None,
            seed: 5,
            ..McConfig::default()
        };
        let a = shapley_mc(&g, None, &cfg).unwrap();
        let b = shapley_mc(
            &g,
            None,
            &McConfig {
                scan: ScanDirection::FromEmpty,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(a.phi, b.phi);
    }

    #[test]
    fn invalid_configs_rejected() {
        let g = additive(vec![0.1; 3]);
        for cfg in [
            McConfig {
                permutations: 0,
                ..McConfig::default()
            },
            McConfig {
                truncation: Some(0.0),
                ..McConfig::default()
            },
            McConfig {
                truncation: Some(1.5),
                ..McConfig::default()
            },
        ] {
            assert!(matches!(shapley_mc(&g, None, &cfg), Err(GameError::Config(_))));
        }
    }

    #[test]
    fn permutations_are_seeded_streams() {
        assert_eq!(permutation(3, 7, 20), permutation(3, 7, 20));
        assert_ne!(permutation(3, 7, 20), permutation(3, 8, 20));
        assert_ne!(permutation(3, 7, 20), permutation(4, 7, 20));
        let mut p = permutation(1, 1, 50);
        p.sort();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn weights_sum_to_one_over_coalitions() {
        for n in 1..20 {
            let w = coalition_weights(n);
            let mut binom = 1.0;
            let mut total = 0.0;
            for (s, w) in w.iter().enumerate() {
                total += binom * w;
                binom = binom * (n - 1 - s) as f64 / (s + 1) as f64;
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
