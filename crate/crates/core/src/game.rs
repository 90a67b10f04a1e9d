//! Players, coalitions and the value-function abstraction.
//!
//! A player is one candidate operation on one edge of the cell. A
//! [`Coalition`] is the set of operations left unmasked in the supernet, and a
//! [`ValueFunction`] maps a coalition to a validation accuracy in `[0, 1]`.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::protocol::ProtocolError;
use crate::scalar::Scalar;

/// Flattened position of an operation in the player set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OperationId {
    pub edge_index: usize,
    pub op_index: usize,
    pub player_index: usize,
}

/// Failure reported by a value-function backend.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("accuracy {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("{0}")]
    Backend(String),
}

#[derive(Debug, Error)]
pub enum GameError {
    #[error("{dimension} index {index} out of range (limit {limit})")]
    Range {
        dimension: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("exact enumeration refused: {players} players exceeds the cap of {cap}")]
    ExactCap { players: usize, cap: usize },
    #[error("coalition over {got} players used with a game of {expected} players")]
    PlayerMismatch { expected: usize, got: usize },
    #[error("invalid estimator configuration: {0}")]
    Config(String),
    #[error("evaluation of coalition {coalition} failed: {source}")]
    Evaluation {
        coalition: Coalition,
        #[source]
        source: EvalError,
    },
}

type Words = SmallVec<[u64; 2]>;

/// Fixed-width bit vector over `len` players; bit `i` set means operation `i`
/// is active.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coalition {
    len: usize,
    words: Words,
}

fn word_count(len: usize) -> usize {
    len.div_ceil(64)
}

impl Coalition {
    pub fn empty(len: usize) -> Self {
        Self {
            len,
            words: smallvec::smallvec![0; word_count(len)],
        }
    }

    pub fn full(len: usize) -> Self {
        let mut c = Self {
            len,
            words: smallvec::smallvec![u64::MAX; word_count(len)],
        };
        c.trim();
        c
    }

    /// Coalition from the low `len` bits of `mask` (`len <= 64`).
    pub fn from_mask(len: usize, mask: u64) -> Self {
        assert!(len <= 64, "from_mask supports at most 64 players");
        let mut c = Self::empty(len);
        if len > 0 {
            c.words[0] = mask;
            c.trim();
        }
        c
    }

    pub fn from_players<I: IntoIterator<Item = usize>>(len: usize, players: I) -> Self {
        let mut c = Self::empty(len);
        for p in players {
            c.insert(p);
        }
        c
    }

    fn trim(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    /// Number of players in the underlying game.
    pub fn universe(&self) -> usize {
        self.len
    }

    pub fn cardinality(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn contains(&self, player: usize) -> bool {
        player < self.len && self.words[player / 64] & (1 << (player % 64)) != 0
    }

    pub fn insert(&mut self, player: usize) {
        assert!(player < self.len, "player {player} outside coalition of {}", self.len);
        self.words[player / 64] |= 1 << (player % 64);
    }

    pub fn remove(&mut self, player: usize) {
        assert!(player < self.len, "player {player} outside coalition of {}", self.len);
        self.words[player / 64] &= !(1 << (player % 64));
    }

    pub fn with(&self, player: usize) -> Self {
        let mut c = self.clone();
        c.insert(player);
        c
    }

    pub fn without(&self, player: usize) -> Self {
        let mut c = self.clone();
        c.remove(player);
        c
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a & b)
    }

    /// Complement within the player set.
    pub fn complement(&self) -> Self {
        let mut c = Self {
            len: self.len,
            words: self.words.iter().map(|w| !w).collect(),
        };
        c.trim();
        c
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        assert_eq!(self.len, other.len);
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    fn zip(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Self {
        assert_eq!(self.len, other.len, "coalitions over different player sets");
        Self {
            len: self.len,
            words: self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Active players in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&p| self.contains(p))
    }

    /// Low word of the bit vector; the whole coalition when `len <= 64`.
    pub fn low_word(&self) -> u64 {
        self.words.first().copied().unwrap_or(0)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Little-endian bytes, bit `i` = player `i`, `ceil(len / 8)` bytes long.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    /// Inverse of [`Coalition::to_le_bytes`]. Bits beyond `len` must be clear.
    pub fn from_le_bytes(len: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut c = Self::empty(len);
        for (i, &b) in bytes.iter().enumerate() {
            c.words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        let before = c.words.clone();
        c.trim();
        (before == c.words).then_some(c)
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coalition({self})")
    }
}

/// Renders as a bit string, player 0 first.
impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in 0..self.len {
            f.write_str(if self.contains(p) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Maps a coalition of unmasked operations to an accuracy in `[0, 1]`.
///
/// `evaluate` must return the same value for the same coalition between two
/// `train` calls; [`EvalCache`] relies on it.
pub trait ValueFunction<T: Scalar>: Send + Sync {
    fn players(&self) -> usize;

    fn evaluate(&self, coalition: &Coalition) -> Result<T, EvalError>;

    /// Runs `steps` units of weight optimization. `steps == 0` is a no-op and
    /// leaves the generation unchanged.
    fn train(&mut self, steps: u32) -> Result<(), EvalError>;

    /// Number of effective `train` calls so far.
    fn generation(&self) -> u64;

    /// Whether `evaluate` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }

    fn full_value(&self) -> Result<T, EvalError> {
        self.evaluate(&Coalition::full(self.players()))
    }

    /// Hands the current architecture parameters to the backend before a
    /// training step. `trainable` tells the backend whether it may optimize
    /// its own mixing weights. In-process games ignore it.
    fn set_architecture(&mut self, _alpha: &[T], _trainable: bool) -> Result<(), EvalError> {
        Ok(())
    }
}

impl<T: Scalar, V: ValueFunction<T> + ?Sized> ValueFunction<T> for Box<V> {
    fn players(&self) -> usize {
        (**self).players()
    }
    fn evaluate(&self, coalition: &Coalition) -> Result<T, EvalError> {
        (**self).evaluate(coalition)
    }
    fn train(&mut self, steps: u32) -> Result<(), EvalError> {
        (**self).train(steps)
    }
    fn generation(&self) -> u64 {
        (**self).generation()
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
    fn full_value(&self) -> Result<T, EvalError> {
        (**self).full_value()
    }
    fn set_architecture(&mut self, alpha: &[T], trainable: bool) -> Result<(), EvalError> {
        (**self).set_architecture(alpha, trainable)
    }
}

struct CacheInner<T> {
    generation: u64,
    map: HashMap<Coalition, Arc<OnceCell<T>>>,
}

/// Memo of coalition values for one training generation.
///
/// Concurrent lookups share a read lock; inserts are serialized. Each distinct
/// coalition is evaluated at most once per generation even when several
/// threads ask for it at the same time.
pub struct EvalCache<T> {
    inner: RwLock<CacheInner<T>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<T: Scalar> Default for EvalCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> EvalCache<T> {
    pub fn new() -> Self {
        Self {
            inner: RwLock::new(CacheInner {
                generation: 0,
                map: HashMap::new(),
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn generation(&self) -> u64 {
        self.inner.read().unwrap().generation
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every entry and moves to `generation`.
    pub fn reset(&self, generation: u64) {
        let mut inner = self.inner.write().unwrap();
        inner.generation = generation;
        inner.map.clear();
    }

    fn slot(&self, generation: u64, coalition: &Coalition) -> Arc<OnceCell<T>> {
        {
            let inner = self.inner.read().unwrap();
            if inner.generation == generation {
                if let Some(slot) = inner.map.get(coalition) {
                    return slot.clone();
                }
            }
        }
        let mut inner = self.inner.write().unwrap();
        if inner.generation != generation {
            inner.generation = generation;
            inner.map.clear();
        }
        inner.map.entry(coalition.clone()).or_default().clone()
    }

    /// Returns the stored value for `coalition`, computing it with `eval` on
    /// the first request of the generation. The second return value is true
    /// when `eval` ran.
    pub fn get_or_eval<E>(
        &self,
        generation: u64,
        coalition: &Coalition,
        eval: impl FnOnce() -> Result<T, E>,
    ) -> Result<(T, bool), E> {
        let slot = self.slot(generation, coalition);
        let mut ran = false;
        let v = *slot.get_or_try_init(|| {
            ran = true;
            eval()
        })?;
        if ran {
            self.misses.fetch_add(1, Ordering::Relaxed);
        } else {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        Ok((v, ran))
    }
}

/// Evaluates `coalition` through `cache`. The cache follows the value
/// function's training generation, so a `train` call between two lookups
/// forces a fresh evaluation.
pub fn cached_evaluate<T: Scalar, V: ValueFunction<T> + ?Sized>(
    vf: &V,
    cache: &EvalCache<T>,
    coalition: &Coalition,
) -> Result<T, GameError> {
    check_universe(vf.players(), coalition)?;
    cache
        .get_or_eval(vf.generation(), coalition, || vf.evaluate(coalition))
        .map(|(v, _)| v)
        .map_err(|source| GameError::Evaluation {
            coalition: coalition.clone(),
            source,
        })
}

fn check_universe(players: usize, coalition: &Coalition) -> Result<(), GameError> {
    if coalition.universe() != players {
        return Err(GameError::PlayerMismatch {
            expected: players,
            got: coalition.universe(),
        });
    }
    Ok(())
}

/// Value-function front end used by the estimators: optional caching plus a
/// count of underlying evaluations.
pub struct Valuation<'a, T: Scalar, V: ValueFunction<T> + ?Sized> {
    vf: &'a V,
    cache: Option<&'a EvalCache<T>>,
    evals: AtomicU64,
}

impl<'a, T: Scalar, V: ValueFunction<T> + ?Sized> Valuation<'a, T, V> {
    pub fn new(vf: &'a V, cache: Option<&'a EvalCache<T>>) -> Self {
        Self {
            vf,
            cache,
            evals: AtomicU64::new(0),
        }
    }

    pub fn players(&self) -> usize {
        self.vf.players()
    }

    pub fn concurrent(&self) -> bool {
        self.vf.concurrent()
    }

    /// Underlying evaluations performed through this front end.
    pub fn evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn value(&self, coalition: &Coalition) -> Result<T, GameError> {
        check_universe(self.vf.players(), coalition)?;
        let wrap = |source| GameError::Evaluation {
            coalition: coalition.clone(),
            source,
        };
        match self.cache {
            Some(cache) => {
                let (v, ran) = cache
                    .get_or_eval(self.vf.generation(), coalition, || self.vf.evaluate(coalition))
                    .map_err(wrap)?;
                if ran {
                    self.evals.fetch_add(1, Ordering::Relaxed);
                }
                Ok(v)
            }
            None => {
                self.evals.fetch_add(1, Ordering::Relaxed);
                self.vf.evaluate(coalition).map_err(wrap)
            }
        }
    }
}

/// `V(S) = |S| / n`, computed as an exact ratio. Used as the echo test double
/// on both sides of the evaluator protocol.
#[derive(Debug, Clone)]
pub struct PopcountGame {
    players: usize,
    generation: u64,
}

impl PopcountGame {
    pub fn new(players: usize) -> Self {
        Self { players, generation: 0 }
    }

    pub fn value(&self, coalition: &Coalition) -> f64 {
        coalition.cardinality() as f64 / self.players as f64
    }
}

impl<T: Scalar> ValueFunction<T> for PopcountGame {
    fn players(&self) -> usize {
        self.players
    }
    fn evaluate(&self, coalition: &Coalition) -> Result<T, EvalError> {
        Ok(T::of(self.value(coalition)))
    }
    fn train(&mut self, steps: u32) -> Result<(), EvalError> {
        if steps > 0 {
            self.generation += 1;
        }
        Ok(())
    }
    fn generation(&self) -> u64 {
        self.generation
    }
}
