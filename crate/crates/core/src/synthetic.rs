//! Closed-form cooperative games standing in for a trained supernet.
//!
//! An [`InteractionGame`] scores a coalition as
//! `clamp(floor + sum(unary) + sum(pairwise within S) - penalty * uncovered_edges, 0, 1)`,
//! optionally perturbed by seeded Gaussian noise. An edge is uncovered when
//! none of its covering (non-null) operations are active, which models the
//! broken-path collapse of a masked supernet.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Coalition, EvalError, ValueFunction};
use crate::mix_seed;
use crate::scalar::Scalar;
use crate::space::{Genotype, SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum GameSpecError {
    #[error("game spec invalid at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Dimension(String),
    #[error("unknown game preset `{0}`")]
    UnknownPreset(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Symmetric synergy between two players.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Synergy<T> {
    pub a: usize,
    pub b: usize,
    pub weight: T,
}

/// Linear schedule of unary weights: `start` at step 0, the game's target
/// weights from `steps` onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anneal<T> {
    pub start: Vec<T>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGame<T> {
    pub floor: T,
    /// Target unary weights (the current ones when not annealing).
    pub unary: Vec<T>,
    pub pairwise: Vec<Synergy<T>>,
    /// Edge of every player.
    pub edge_of: Vec<usize>,
    /// Whether a player keeps its edge connected.
    pub covers: Vec<bool>,
    pub edge_coverage_penalty: T,
    pub noise_sigma: T,
    pub noise_seed: u64,
    pub anneal: Option<Anneal<T>>,
    /// Planted best operation per edge, as player indices; empty if none.
    #[serde(default)]
    pub planted: Vec<usize>,
    #[serde(default)]
    steps_trained: u64,
    #[serde(default)]
    generation: u64,
}

impl<T: Scalar> InteractionGame<T> {
    /// Additive game with the given weights, one edge per player.
    pub fn additive(floor: T, unary: Vec<T>) -> Self {
        let n = unary.len();
        Self {
            floor,
            unary,
            pairwise: Vec::new(),
            edge_of: (0..n).collect(),
            covers: vec![true; n],
            edge_coverage_penalty: T::zero(),
            noise_sigma: T::zero(),
            noise_seed: 0,
            anneal: None,
            planted: Vec::new(),
            steps_trained: 0,
            generation: 0,
        }
    }

    pub fn players(&self) -> usize {
        self.unary.len()
    }

    /// Unary weights at the current training step.
    pub fn current_unary(&self) -> Vec<T> {
        match &self.anneal {
            Some(a) if self.steps_trained < a.steps => {
                let t = T::of(self.steps_trained as f64 / a.steps as f64);
                a.start
                    .iter()
                    .zip(&self.unary)
                    .map(|(&s, &e)| s + (e - s) * t)
                    .collect()
            }
            _ => self.unary.clone(),
        }
    }

    /// Value before clamping and noise.
    pub fn raw_value(&self, coalition: &Coalition) -> T {
        let unary = self.current_unary();
        self.raw_with(&unary, coalition)
    }

    fn raw_with(&self, unary: &[T], coalition: &Coalition) -> T {
        let mut v = self.floor;
        for p in coalition.iter() {
            v = v + unary[p];
        }
        for s in &self.pairwise {
            if coalition.contains(s.a) && coalition.contains(s.b) {
                v = v + s.weight;
            }
        }
        if self.edge_coverage_penalty != T::zero() {
            let edges = self.edge_of.iter().max().map_or(0, |m| m + 1);
            let mut has_cover = vec![false; edges];
            let mut covered = vec![false; edges];
            for p in 0..self.players() {
                if self.covers[p] {
                    has_cover[self.edge_of[p]] = true;
                    if coalition.contains(p) {
                        covered[self.edge_of[p]] = true;
                    }
                }
            }
            let broken = (0..edges).filter(|&e| has_cover[e] && !covered[e]).count();
            v = v - self.edge_coverage_penalty * T::of(broken as f64);
        }
        v
    }

    fn noise(&self, coalition: &Coalition) -> T {
        if self.noise_sigma <= T::zero() {
            return T::zero();
        }
        let key = coalition
            .words()
            .iter()
            .fold(mix_seed(self.noise_seed, self.generation), |acc, &w| mix_seed(acc, w));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let normal = Normal::new(0.0, self.noise_sigma.as_f64()).expect("finite sigma");
        T::of(normal.sample(&mut rng))
    }

    /// Game value of `coalition`, in `[0, 1]`.
    pub fn value(&self, coalition: &Coalition) -> T {
        let v = self.raw_value(coalition) + self.noise(coalition);
        v.max(T::zero()).min(T::one())
    }

    /// Shapley values in closed form: `unary_i + 0.5 * sum_j pairwise_ij`.
    /// Only valid when neither clamping nor the coverage penalty ever bites.
    pub fn closed_form_shapley(&self) -> Vec<T> {
        let mut phi = self.current_unary();
        let half = T::of(0.5);
        for s in &self.pairwise {
            phi[s.a] = phi[s.a] + half * s.weight;
            phi[s.b] = phi[s.b] + half * s.weight;
        }
        phi
    }

    pub fn steps_trained(&self) -> u64 {
        self.steps_trained
    }

    /// Genotype made of the planted operations, if the game has them.
    pub fn planted_genotype(&self, space: &SearchSpace) -> Option<Genotype> {
        if self.planted.is_empty() {
            return None;
        }
        let mut alpha = vec![T::zero(); space.players()];
        for &p in &self.planted {
            alpha[p] = T::one();
        }
        space.derive_genotype(&alpha, false).ok()
    }
}

impl<T: Scalar> ValueFunction<T> for InteractionGame<T> {
    fn players(&self) -> usize {
        self.unary.len()
    }

    fn evaluate(&self, coalition: &Coalition) -> Result<T, EvalError> {
        Ok(self.value(coalition))
    }

    fn train(&mut self, steps: u32) -> Result<(), EvalError> {
        if steps > 0 {
            self.steps_trained += steps as u64;
            self.generation += 1;
        }
        Ok(())
    }

    fn generation(&self) -> u64 {
        self.generation
    }
}

fn default_floor() -> f64 {
    0.1
}

fn default_unary() -> [f64; 2] {
    [0.005, 0.015]
}

/// Generator parameters for [`make_game`]. Every field has a default, so a
/// spec document only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameSpec {
    pub seed: u64,
    pub floor: f64,
    /// Uniform range of base unary weights.
    pub unary: [f64; 2],
    /// Added to one non-null operation per edge, which becomes the planted
    /// optimum. Zero disables planting.
    pub planted_bonus: f64,
    /// With annealing, a different operation per edge starts with this bonus
    /// and the planted one starts without its own.
    pub decoy_bonus: f64,
    /// Training steps over which weights move from the decoy layout to the
    /// planted layout. Zero disables annealing.
    pub anneal_steps: u64,
    /// Fraction of cross-edge player pairs that get a synergy term.
    pub pairwise_density: f64,
    pub pairwise: [f64; 2],
    /// Operations named as null in the space become null players.
    pub null_ops_inert: bool,
    /// Extra players forced to be null.
    pub null_players: Vec<usize>,
    /// `[source, copy]`: the copy mirrors the source's unary and synergies.
    pub clones: Vec<[usize; 2]>,
    /// Substrings of op names that keep an edge connected; an empty list
    /// means every non-null operation does.
    pub covering_ops: Vec<String>,
    pub coverage_penalty: f64,
    pub noise_sigma: f64,
}

impl Default for GameSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            floor: default_floor(),
            unary: default_unary(),
            planted_bonus: 0.0,
            decoy_bonus: 0.0,
            anneal_steps: 0,
            pairwise_density: 0.0,
            pairwise: [0.0, 0.0],
            null_ops_inert: false,
            null_players: Vec::new(),
            clones: Vec::new(),
            covering_ops: Vec::new(),
            coverage_penalty: 0.0,
            noise_sigma: 0.0,
        }
    }
}

impl GameSpec {
    /// No interactions, no penalty.
    pub fn additive() -> Self {
        Self {
            unary: [0.005, 0.025],
            ..Self::default()
        }
    }

    /// One clearly best operation per edge, weak cross-edge synergies, a mild
    /// broken-path penalty and a little evaluation noise.
    pub fn planted() -> Self {
        Self {
            unary: [0.004, 0.012],
            planted_bonus: 0.012,
            pairwise_density: 0.05,
            pairwise: [0.0, 0.006],
            null_ops_inert: true,
            coverage_penalty: 0.05,
            noise_sigma: 0.002,
            ..Self::default()
        }
    }

    /// Planted game whose operation strengths emerge during training: a decoy
    /// operation leads early on and the planted one takes over.
    pub fn annealed() -> Self {
        Self {
            decoy_bonus: 0.02,
            anneal_steps: 25,
            noise_sigma: 0.004,
            ..Self::planted()
        }
    }

    /// Large broken-path penalty: an edge left without a skip or convolution
    /// costs more than half the accuracy.
    pub fn steep() -> Self {
        Self {
            floor: 0.3,
            unary: [0.01, 0.03],
            planted_bonus: 0.01,
            null_ops_inert: true,
            covering_ops: vec!["skip".into(), "conv".into()],
            coverage_penalty: 0.6,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, GameSpecError> {
        match name {
            "additive" => Ok(Self::additive()),
            "planted" => Ok(Self::planted()),
            "annealed" => Ok(Self::annealed()),
            "steep" => Ok(Self::steep()),
            other => Err(GameSpecError::UnknownPreset(other.to_string())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GameSpecError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| GameSpecError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// Preset name (optionally `name:seed`) or path to a JSON document.
    pub fn load(source: &str) -> Result<Self, GameSpecError> {
        let (name, seed) = match source.rsplit_once(':') {
            Some((name, seed)) if seed.parse::<u64>().is_ok() => (name, seed.parse().ok()),
            _ => (source, None),
        };
        let mut spec = match Self::preset(name) {
            Ok(spec) => spec,
            Err(_) if Path::new(source).exists() => {
                let text = std::fs::read_to_string(source).map_err(|e| GameSpecError::Io {
                    path: source.to_string(),
                    source: e,
                })?;
                return Self::from_json(&text);
            }
            Err(e) => return Err(e),
        };
        if let Some(seed) = seed {
            spec.seed = seed;
        }
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Builds a reproducible game over `space` from `spec`.
pub fn make_game<T: Scalar>(space: &SearchSpace, spec: &GameSpec) -> Result<InteractionGame<T>, GameSpecError> {
    let n = space.players();
    let edge_of = space.edge_of_players();
    let edges = space.edges().len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for &p in spec.null_players.iter().chain(spec.clones.iter().flatten()) {
        if p >= n {
            return Err(GameSpecError::Dimension(format!(
                "player {p} outside a space of {n} players"
            )));
        }
    }
    let mut null: Vec<bool> = (0..n).map(|p| spec.null_ops_inert && space.is_null(p)).collect();
    for &p in &spec.null_players {
        null[p] = true;
    }

    let mut covers: Vec<bool> = (0..n)
        .map(|p| {
            !null[p]
                && (spec.covering_ops.is_empty()
                    || spec.covering_ops.iter().any(|c| space.op_name(p).contains(c.as_str())))
        })
        .collect();
    if spec.coverage_penalty != 0.0 {
        if let Some(e) = (0..edges).find(|&e| !space.edge_players(e).any(|p| covers[p])) {
            return Err(GameSpecError::Dimension(format!("edge {e} has no covering operation")));
        }
    }

    let mut unary: Vec<f64> = (0..n).map(|_| uniform(&mut rng, spec.unary)).collect();
    let mut start = unary.clone();

    let mut planted = Vec::new();
    if spec.planted_bonus > 0.0 {
        for e in 0..edges {
            let candidates: Vec<usize> = space.edge_players(e).filter(|&p| !null[p]).collect();
            if candidates.is_empty() {
                return Err(GameSpecError::Dimension(format!(
                    "edge {e} has no non-null operation to plant"
                )));
            }
            let best = candidates[rng.random_range(0..candidates.len())];
            unary[best] += spec.planted_bonus;
            planted.push(best);
            if spec.anneal_steps > 0 && candidates.len() > 1 {
                let others: Vec<usize> = candidates.iter().copied().filter(|&p| p != best).collect();
                let decoy = others[rng.random_range(0..others.len())];
                start[decoy] += spec.decoy_bonus;
            } else {
                start[best] += spec.planted_bonus;
            }
        }
    }

    let mut pairwise = Vec::new();
    if spec.pairwise_density > 0.0 {
        for a in 0..n {
            for b in a + 1..n {
                if edge_of[a] != edge_of[b] && rng.random::<f64>() < spec.pairwise_density {
                    pairwise.push(Synergy {
                        a,
                        b,
                        weight: uniform(&mut rng, spec.pairwise),
                    });
                }
            }
        }
    }

    for &[src, copy] in &spec.clones {
        if src == copy {
            return Err(GameSpecError::Dimension(format!("player {src} cloned onto itself")));
        }
        if spec.coverage_penalty != 0.0 && edge_of[src] != edge_of[copy] {
            return Err(GameSpecError::Dimension(format!(
                "clones {src} and {copy} sit on different edges while a coverage penalty is set"
            )));
        }
        unary[copy] = unary[src];
        start[copy] = start[src];
        null[copy] = null[src];
        covers[copy] = covers[src];
        pairwise.retain(|s| s.a != copy && s.b != copy);
        let mirrored: Vec<Synergy<f64>> = pairwise
            .iter()
            .filter_map(|s| {
                let other = if s.a == src {
                    s.b
                } else if s.b == src {
                    s.a
                } else {
                    return None;
                };
                Some(Synergy {
                    a: other.min(copy),
                    b: other.max(copy),
                    weight: s.weight,
                })
            })
            .collect();
        pairwise.extend(mirrored);
    }

    for p in (0..n).filter(|&p| null[p]) {
        unary[p] = 0.0;
        start[p] = 0.0;
        pairwise.retain(|s| s.a != p && s.b != p);
    }

    let to_t = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
    Ok(InteractionGame {
        floor: T::of(spec.floor),
        unary: to_t(&unary),
        pairwise: pairwise
            .into_iter()
            .map(|s| Synergy {
                a: s.a,
                b: s.b,
                weight: T::of(s.weight),
            })
            .collect(),
        edge_of,
        covers,
        edge_coverage_penalty: T::of(spec.coverage_penalty),
        noise_sigma: T::of(spec.noise_sigma),
        noise_seed: mix_seed(spec.seed, 0x006e_6f69_7365),
        anneal: (spec.anneal_steps > 0).then(|| Anneal {
            start: to_t(&start),
            steps: spec.anneal_steps,
        }),
        planted,
        steps_trained: 0,
        generation: 0,
    })
}
