//! Seeded generation of unichain MDP instances and policy families.
//!
//! Every transition probability is floored at `min_prob`, so every induced
//! chain is strictly positive and therefore irreducible: the instance is
//! unichain by construction. Generation is a pure function of the spec; the
//! RNG is SplitMix64, chosen because it is a named, exactly specified
//! 64-bit generator that other languages can reproduce from the seed alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{DeterministicPolicy, Mdp, PolicyFamily, Word};

/// Identity of the generator stream, recorded in generated files.
pub const RNG_ALGORITHM: &str = "splitmix64";

/// SplitMix64 (Steele, Lea & Flood); the de-facto reference stream for
/// seeding and small reproducible experiments.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, bound) without modulo bias, by rejection.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }
}

/// Parameters of a generated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_states: usize,
    pub num_diff_states: usize,
    pub seed: u64,
    #[serde(default = "GenSpec::default_min_prob")]
    pub min_prob: f64,
    /// Extra actions on the non-differing states; the family machinery
    /// ignores them.
    #[serde(default)]
    pub decoy_actions: usize,
    /// Mix the two action rows at each differing state toward each other so
    /// the combination weights nearly cancel.
    #[serde(default)]
    pub near_degenerate: bool,
}

impl GenSpec {
    fn default_min_prob() -> f64 {
        0.01
    }

    pub fn new(num_states: usize, num_diff_states: usize, seed: u64) -> Result<Self> {
        let spec = GenSpec {
            num_states,
            num_diff_states,
            seed,
            min_prob: Self::default_min_prob(),
            decoy_actions: 0,
            near_degenerate: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_min_prob(mut self, min_prob: f64) -> Result<Self> {
        self.min_prob = min_prob;
        self.validate()?;
        Ok(self)
    }

    pub fn with_decoy_actions(mut self, decoy_actions: usize) -> Self {
        self.decoy_actions = decoy_actions;
        self
    }

    pub fn with_near_degenerate(mut self, near_degenerate: bool) -> Self {
        self.near_degenerate = near_degenerate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 {
            return Err(Error::InvalidGenSpec("num_states must be positive".into()));
        }
        if self.num_diff_states >= self.num_states {
            return Err(Error::InvalidGenSpec(format!(
                "num_diff_states {} must be smaller than num_states {}",
                self.num_diff_states, self.num_states
            )));
        }
        if !self.min_prob.is_finite()
            || self.min_prob <= 0.0
            || self.min_prob >= 1.0 / self.num_states as f64
        {
            return Err(Error::InvalidGenSpec(format!(
                "min_prob {} must lie in (0, 1/{})",
                self.min_prob, self.num_states
            )));
        }
        Ok(())
    }
}

/// A strictly positive stochastic row: exponentials normalized, then mixed
/// with the uniform row to enforce the floor.
fn random_row(rng: &mut SplitMix64, n: usize, min_prob: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| -(-rng.next_f64()).ln_1p()).collect();
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        row.fill(1.0);
    }
    let sum: f64 = row.iter().sum();
    let alpha = min_prob * n as f64;
    let floor = alpha / n as f64;
    for x in &mut row {
        *x = (1.0 - alpha) * (*x / sum) + floor;
    }
    row
}

/// The differing-state indices, a partial Fisher-Yates draw kept in sampled
/// order.
fn sample_diff_states(rng: &mut SplitMix64, spec: &GenSpec) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..spec.num_states).collect();
    for i in 0..spec.num_diff_states {
        let j = i + rng.next_below((spec.num_states - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(spec.num_diff_states);
    pool
}

fn generate_mdp(rng: &mut SplitMix64, spec: &GenSpec) -> Result<(Mdp, Vec<usize>)> {
    spec.validate()?;
    let n_states = spec.num_states;
    let diff = sample_diff_states(rng, spec);
    let mut transitions = Vec::with_capacity(n_states);
    for state in 0..n_states {
        let num_actions = if diff.contains(&state) { 2 } else { 1 + spec.decoy_actions };
        let mut rows: Vec<Vec<f64>> = (0..num_actions)
            .map(|_| random_row(rng, n_states, spec.min_prob))
            .collect();
        if spec.near_degenerate && diff.contains(&state) {
            let beta = 0.49;
            let mixed0: Vec<f64> = rows[0]
                .iter()
                .zip(&rows[1])
                .map(|(&a, &b)| (1.0 - beta) * a + beta * b)
                .collect();
            let mixed1: Vec<f64> = rows[1]
                .iter()
                .zip(&rows[0])
                .map(|(&a, &b)| (1.0 - beta) * a + beta * b)
                .collect();
            rows[0] = mixed0;
            rows[1] = mixed1;
        }
        transitions.push(rows);
    }
    Ok((Mdp::new(transitions)?, diff))
}

/// A unichain MDP where the differing states carry two actions and every
/// transition probability is at least `min_prob`. Deterministic per spec.
pub fn random_unichain_mdp(spec: &GenSpec) -> Result<Mdp> {
    let mut rng = SplitMix64::new(spec.seed);
    Ok(generate_mdp(&mut rng, spec)?.0)
}

/// Up to this n the generator additionally verifies that every target word
/// admits at least one surviving permutation term.
const TARGET_COVERAGE_CHECK_MAX_N: usize = 12;

/// Augmenting-path step of the column matching: can `col` be assigned to a
/// base policy that disagrees with the target there, displacing earlier
/// assignments if needed?
fn assign_column(
    col: usize,
    words: &[Word],
    target: &[u8],
    visited: &mut [bool],
    col_of_row: &mut [usize],
) -> bool {
    for (row, word) in words.iter().enumerate() {
        if word.bit(col) == target[col] || visited[row] {
            continue;
        }
        visited[row] = true;
        if col_of_row[row] == usize::MAX
            || assign_column(col_of_row[row], words, target, visited, col_of_row)
        {
            col_of_row[row] = col;
            return true;
        }
    }
    false
}

/// True iff the formula has at least one surviving term for this target:
/// each differing state must be matchable to a distinct base policy that
/// disagrees with the target there (then the leftover policy plays the role
/// of the deleted row). A failed matching means every permutation set is
/// empty and the combination formula degenerates to 0/0.
fn target_is_covered(words: &[Word], target: &[u8]) -> bool {
    let mut col_of_row = vec![usize::MAX; words.len()];
    (0..target.len()).all(|col| {
        let mut visited = vec![false; words.len()];
        assign_column(col, words, target, &mut visited, &mut col_of_row)
    })
}

fn all_targets_covered(words: &[Word], n: usize) -> bool {
    let mut target = vec![0u8; n];
    for v in 0..(1u64 << n) {
        for (i, t) in target.iter_mut().enumerate() {
            *t = ((v >> (n - 1 - i)) & 1) as u8;
        }
        if !target_is_covered(words, &target) {
            return false;
        }
    }
    true
}

/// Samples n + 1 distinct words such that both actions occur in every
/// column (otherwise the policies would not actually differ at that state)
/// and, for moderate n, such that every target word keeps the combination
/// formula non-degenerate. Word sets failing either test are resampled, so
/// the draw stays uniform over the admissible sets.
fn sample_words(rng: &mut SplitMix64, n: usize) -> Result<Vec<Word>> {
    if n >= 1 && (n as u32 >= 64 || u128::from(n as u64 + 1) > (1u128 << n)) {
        return Err(Error::InvalidGenSpec(format!(
            "cannot draw {} distinct words of length {n}",
            n + 1
        )));
    }
    if n == 0 {
        return Ok(vec![Word::from_bits(vec![])?]);
    }
    loop {
        let mut values: Vec<u64> = Vec::with_capacity(n + 1);
        while values.len() < n + 1 {
            let v = rng.next_below(1u64 << n);
            if !values.contains(&v) {
                values.push(v);
            }
        }
        let words: Vec<Word> = values
            .iter()
            .map(|&v| {
                Word::from_bits((0..n).map(|i| ((v >> (n - 1 - i)) & 1) as u8).collect())
                    .expect("bits are 0/1")
            })
            .collect();
        let all_columns_vary = (0..n).all(|i| {
            let first = words[0].bit(i);
            words.iter().any(|w| w.bit(i) != first)
        });
        if !all_columns_vary {
            continue;
        }
        if n <= TARGET_COVERAGE_CHECK_MAX_N && !all_targets_covered(&words, n) {
            continue;
        }
        return Ok(words);
    }
}

/// A policy family over [`random_unichain_mdp`] with uniformly sampled
/// distinct base words and the base stationary distributions attached.
pub fn random_family(spec: &GenSpec) -> Result<PolicyFamily> {
    let mut rng = SplitMix64::new(spec.seed);
    let (mdp, diff_states) = generate_mdp(&mut rng, spec)?;
    let words = sample_words(&mut rng, spec.num_diff_states)?;
    let shared = DeterministicPolicy::new(vec![0; mdp.num_states()], &mdp)?;
    let family = PolicyFamily::new(mdp, diff_states, words, shared)?;
    family.base_distributions()?;
    Ok(family)
}
