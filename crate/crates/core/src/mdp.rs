//! Core data model: MDPs, deterministic policies, policy families over a set
//! of differing states, probability distributions and mixture vectors.
//!
//! All types are immutable after construction and validate their invariants
//! up front. The only interior state is the family's stationary-distribution
//! cache, a write-once cell.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::statdist::{residual, stationary_linear, StochasticMatrix};

/// Tolerance for row sums on load; rows within it are renormalized exactly,
/// anything further off is rejected.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Tolerance for the total mass of a probability distribution.
pub const DIST_SUM_TOL: f64 = 1e-10;

/// Residual allowed when a family is built with externally supplied
/// stationary distributions.
pub const SUPPLIED_DIST_RESIDUAL_TOL: f64 = 1e-8;

/// A single structural defect found while validating an MDP.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Declared state count does not match the transition tensor.
    StateCount { declared: usize, actual: usize },
    /// A state offers no actions at all.
    NoActions { state: usize },
    /// A transition row has the wrong number of entries.
    RowLength {
        state: usize,
        action: usize,
        expected: usize,
        got: usize,
    },
    /// A transition row does not sum to 1 within [`ROW_SUM_TOL`].
    RowSum { state: usize, action: usize, sum: f64 },
    /// A transition probability lies outside [0, 1] (or is not finite).
    Range {
        state: usize,
        action: usize,
        next_state: usize,
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StateCount { declared, actual } => {
                write!(f, "num_states is {declared} but there are {actual} transition rows")
            }
            Violation::NoActions { state } => write!(f, "state {state} has no actions"),
            Violation::RowLength { state, action, expected, got } => {
                write!(f, "row ({state}, {action}) has {got} entries, expected {expected}")
            }
            Violation::RowSum { state, action, sum } => {
                write!(f, "row sum {sum} at ({state}, {action})")
            }
            Violation::Range { state, action, next_state, value } => {
                write!(f, "probability {value} out of [0, 1] at ({state}, {action}, {next_state})")
            }
        }
    }
}

/// Outcome of structural MDP validation; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Checks the raw transition tensor `transitions[state][action][next_state]`
/// against the MDP invariants and reports every violation found.
pub fn validate_mdp(declared_states: usize, transitions: &[Vec<Vec<f64>>]) -> ValidationReport {
    let mut violations = Vec::new();
    let n = transitions.len();
    if declared_states != n {
        violations.push(Violation::StateCount { declared: declared_states, actual: n });
    }
    for (state, actions) in transitions.iter().enumerate() {
        if actions.is_empty() {
            violations.push(Violation::NoActions { state });
        }
        for (action, row) in actions.iter().enumerate() {
            if row.len() != n {
                violations.push(Violation::RowLength {
                    state,
                    action,
                    expected: n,
                    got: row.len(),
                });
                continue;
            }
            let mut sum = 0.0;
            let mut row_ok = true;
            for (next_state, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    violations.push(Violation::Range { state, action, next_state, value: p });
                    row_ok = false;
                }
                sum += p;
            }
            if row_ok && (sum - 1.0).abs() > ROW_SUM_TOL {
                violations.push(Violation::RowSum { state, action, sum });
            }
        }
    }
    ValidationReport { violations }
}

/// A finite MDP: per-state action sets and transition probabilities
/// `p_a(i, j)`, stored as `transitions[i][a][j]`.
///
/// The optional initial distribution is carried for completeness only; no
/// stationary computation reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    pub(crate) transitions: Vec<Vec<Vec<f64>>>,
    initial_distribution: Option<Vec<f64>>,
}

impl Mdp {
    /// Validates the tensor and renormalizes each row to sum exactly to 1.
    /// Rows off by more than [`ROW_SUM_TOL`] are rejected, not repaired.
    pub fn new(transitions: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let report = validate_mdp(transitions.len(), &transitions);
        if !report.is_valid() {
            return Err(Error::InvalidMdp(report));
        }
        let mut transitions = transitions;
        for actions in &mut transitions {
            for row in actions.iter_mut() {
                let sum: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
        }
        Ok(Mdp { transitions, initial_distribution: None })
    }

    /// Attaches an initial distribution over states. It is validated but
    /// otherwise inert.
    pub fn with_initial_distribution(mut self, initial: Vec<f64>) -> Result<Self> {
        if initial.len() != self.num_states() {
            return Err(Error::InvalidDistribution(format!(
                "initial distribution has {} entries, MDP has {} states",
                initial.len(),
                self.num_states()
            )));
        }
        if let Some(p) = initial.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidDistribution(format!(
                "initial distribution entry {p} out of [0, 1]"
            )));
        }
        let sum: f64 = initial.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "initial distribution sums to {sum}"
            )));
        }
        self.initial_distribution = Some(initial);
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn num_actions(&self, state: usize) -> usize {
        self.transitions[state].len()
    }

    pub fn action_row(&self, state: usize, action: usize) -> &[f64] {
        &self.transitions[state][action]
    }

    pub fn transitions(&self) -> &[Vec<Vec<f64>>] {
        &self.transitions
    }

    pub fn initial_distribution(&self) -> Option<&[f64]> {
        self.initial_distribution.as_deref()
    }

    /// Transition matrix of the chain induced by a deterministic policy:
    /// entry (i, j) is `p_{policy(i)}(i, j)`.
    pub fn induced_matrix(&self, policy: &DeterministicPolicy) -> Result<StochasticMatrix> {
        if policy.len() != self.num_states() {
            return Err(Error::Incompatible(format!(
                "policy covers {} states, MDP has {}",
                policy.len(),
                self.num_states()
            )));
        }
        let mut rows = Vec::with_capacity(self.num_states());
        for (state, &action) in policy.as_slice().iter().enumerate() {
            if action >= self.num_actions(state) {
                return Err(Error::ActionRange {
                    state,
                    action,
                    available: self.num_actions(state),
                });
            }
            rows.push(self.transitions[state][action].clone());
        }
        StochasticMatrix::new(rows)
    }
}

/// A stationary deterministic policy: one action per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    choice: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(choice: Vec<usize>, mdp: &Mdp) -> Result<Self> {
        if choice.len() != mdp.num_states() {
            return Err(Error::Incompatible(format!(
                "policy covers {} states, MDP has {}",
                choice.len(),
                mdp.num_states()
            )));
        }
        for (state, &action) in choice.iter().enumerate() {
            if action >= mdp.num_actions(state) {
                return Err(Error::ActionRange {
                    state,
                    action,
                    available: mdp.num_actions(state),
                });
            }
        }
        Ok(DeterministicPolicy { choice })
    }

    pub fn action(&self, state: usize) -> usize {
        self.choice[state]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.choice
    }

    pub fn len(&self) -> usize {
        self.choice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choice.is_empty()
    }
}

/// A strictly positive probability vector over states.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty distribution".into()));
        }
        for (state, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "entry {p} at state {state} is not strictly positive"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Distribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, state: usize) -> f64 {
        self.probs[state]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn max_abs_diff(&self, other: &Distribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A binary word over the differing states, most significant bit first:
/// `bit(0)` is the action taken at the first differing state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Word {
    bits: Vec<u8>,
}

impl Word {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidWord(format!("{bits:?}")));
        }
        Ok(Word { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, i: usize) -> u8 {
        self.bits[i]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// All 2^n words of length `n` in lexicographic order.
    pub fn all(n: usize) -> Vec<Word> {
        assert!(n < 26, "word enumeration capped at n < 26");
        (0..1u32 << n)
            .map(|v| Word {
                bits: (0..n).map(|i| ((v >> (n - 1 - i)) & 1) as u8).collect(),
            })
            .collect()
    }

    pub(crate) fn flipped_at(&self, positions: &[bool]) -> Word {
        let bits = self
            .bits
            .iter()
            .zip(positions)
            .map(|(&b, &flip)| if flip { 1 - b } else { b })
            .collect();
        Word { bits }
    }
}

impl FromStr for Word {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => bits.push(0),
                '1' => bits.push(1),
                _ => return Err(Error::InvalidWord(s.to_string())),
            }
        }
        Ok(Word { bits })
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Probability of playing action 0 at each differing state.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureVector {
    lambdas: Vec<f64>,
}

impl MixtureVector {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        for &l in &lambdas {
            if !l.is_finite() || !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidMixture(format!("lambda {l} out of [0, 1]")));
            }
        }
        Ok(MixtureVector { lambdas })
    }

    /// The mixture that plays word `w` deterministically: lambda_i = 1 - w_i.
    pub fn from_word(word: &Word) -> MixtureVector {
        MixtureVector {
            lambdas: word.bits().iter().map(|&b| 1.0 - f64::from(b)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.lambdas[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lambdas
    }
}

/// True iff every position of `w` is witnessed by some base word.
pub fn word_is_combination(words: &[Word], w: &Word) -> bool {
    debug_assert!(words.iter().all(|bw| bw.len() == w.len()));
    (0..w.len()).all(|i| words.iter().any(|bw| bw.bit(i) == w.bit(i)))
}

/// n + 1 base policies that coincide outside the `diff_states` and pick
/// action 0 or 1 inside them, together with their stationary distributions.
///
/// The distributions are computed lazily and cached; concurrent fills race
/// benignly to the same value.
#[derive(Debug, Clone)]
pub struct PolicyFamily {
    mdp: Mdp,
    diff_states: Vec<usize>,
    base_words: Vec<Word>,
    shared_policy: DeterministicPolicy,
    base_dists: OnceLock<Vec<Distribution>>,
}

impl PolicyFamily {
    pub fn new(
        mdp: Mdp,
        diff_states: Vec<usize>,
        base_words: Vec<Word>,
        shared_policy: DeterministicPolicy,
    ) -> Result<Self> {
        let n = diff_states.len();
        for (idx, &s) in diff_states.iter().enumerate() {
            if s >= mdp.num_states() {
                return Err(Error::InvalidFamily(format!(
                    "diff state {s} out of range for {} states",
                    mdp.num_states()
                )));
            }
            if diff_states[..idx].contains(&s) {
                return Err(Error::InvalidFamily(format!("diff state {s} repeated")));
            }
            if mdp.num_actions(s) < 2 {
                return Err(Error::InvalidFamily(format!(
                    "diff state {s} offers {} action(s), need at least 2",
                    mdp.num_actions(s)
                )));
            }
        }
        if base_words.len() != n + 1 {
            return Err(Error::InvalidFamily(format!(
                "{} base words for n = {n}, expected {}",
                base_words.len(),
                n + 1
            )));
        }
        for (idx, w) in base_words.iter().enumerate() {
            if w.len() != n {
                return Err(Error::WordLength { expected: n, got: w.len() });
            }
            if base_words[..idx].contains(w) {
                return Err(Error::InvalidFamily(format!("base word {w} repeated")));
            }
        }
        if shared_policy.len() != mdp.num_states() {
            return Err(Error::Incompatible(format!(
                "shared policy covers {} states, MDP has {}",
                shared_policy.len(),
                mdp.num_states()
            )));
        }
        for (state, &action) in shared_policy.as_slice().iter().enumerate() {
            if action >= mdp.num_actions(state) {
                return Err(Error::ActionRange {
                    state,
                    action,
                    available: mdp.num_actions(state),
                });
            }
        }
        Ok(PolicyFamily {
            mdp,
            diff_states,
            base_words,
            shared_policy,
            base_dists: OnceLock::new(),
        })
    }

    /// Builds the family with stationary distributions supplied by the
    /// caller; each is checked against its induced chain by residual.
    pub fn with_distributions(
        mdp: Mdp,
        diff_states: Vec<usize>,
        base_words: Vec<Word>,
        shared_policy: DeterministicPolicy,
        distributions: Vec<Distribution>,
    ) -> Result<Self> {
        let family = PolicyFamily::new(mdp, diff_states, base_words, shared_policy)?;
        if distributions.len() != family.base_words.len() {
            return Err(Error::InvalidFamily(format!(
                "{} distributions for {} base policies",
                distributions.len(),
                family.base_words.len()
            )));
        }
        for (k, (word, dist)) in family.base_words.iter().zip(&distributions).enumerate() {
            if dist.len() != family.mdp.num_states() {
                return Err(Error::InvalidFamily(format!(
                    "distribution {k} has {} entries, MDP has {} states",
                    dist.len(),
                    family.mdp.num_states()
                )));
            }
            let chain = family.mdp.induced_matrix(&family.word_to_policy(word)?)?;
            let r = residual(&chain, dist);
            if r > SUPPLIED_DIST_RESIDUAL_TOL {
                return Err(Error::InvalidFamily(format!(
                    "supplied distribution {k} has residual {r:.3e} against the chain of word {word}"
                )));
            }
        }
        family
            .base_dists
            .set(distributions)
            .expect("cache empty on a fresh family");
        Ok(family)
    }

    pub fn mdp(&self) -> &Mdp {
        &self.mdp
    }

    /// Number of differing states.
    pub fn n(&self) -> usize {
        self.diff_states.len()
    }

    pub fn num_states(&self) -> usize {
        self.mdp.num_states()
    }

    pub fn diff_states(&self) -> &[usize] {
        &self.diff_states
    }

    pub fn base_words(&self) -> &[Word] {
        &self.base_words
    }

    pub fn shared_policy(&self) -> &DeterministicPolicy {
        &self.shared_policy
    }

    /// The deterministic policy playing `word` on the differing states and
    /// the shared action everywhere else.
    pub fn word_to_policy(&self, word: &Word) -> Result<DeterministicPolicy> {
        if word.len() != self.n() {
            return Err(Error::WordLength { expected: self.n(), got: word.len() });
        }
        let mut choice = self.shared_policy.choice.clone();
        for (i, &s) in self.diff_states.iter().enumerate() {
            choice[s] = usize::from(word.bit(i));
        }
        Ok(DeterministicPolicy { choice })
    }

    /// True iff at every differing state some base policy plays the same
    /// action as `word`.
    pub fn is_combination(&self, word: &Word) -> bool {
        assert_eq!(word.len(), self.n(), "word length must equal n");
        word_is_combination(&self.base_words, word)
    }

    /// Transition matrix of the randomized policy that plays action 0 at
    /// diff state `s_i` with probability `lambda_i`.
    pub fn mixed_matrix(&self, lambdas: &MixtureVector) -> Result<StochasticMatrix> {
        if lambdas.len() != self.n() {
            return Err(Error::InvalidMixture(format!(
                "{} lambdas for n = {}",
                lambdas.len(),
                self.n()
            )));
        }
        let n_states = self.mdp.num_states();
        let mut rows = Vec::with_capacity(n_states);
        for state in 0..n_states {
            if let Some(i) = self.diff_states.iter().position(|&s| s == state) {
                let lam = lambdas.get(i);
                let p0 = self.mdp.action_row(state, 0);
                let p1 = self.mdp.action_row(state, 1);
                rows.push(
                    p0.iter()
                        .zip(p1)
                        .map(|(&a, &b)| lam * a + (1.0 - lam) * b)
                        .collect(),
                );
            } else {
                rows.push(self.mdp.action_row(state, self.shared_policy.action(state)).to_vec());
            }
        }
        StochasticMatrix::new(rows)
    }

    /// Stationary distributions of the n + 1 base policies, computed on
    /// first use and cached.
    pub fn base_distributions(&self) -> Result<&[Distribution]> {
        if let Some(dists) = self.base_dists.get() {
            return Ok(dists);
        }
        let computed = self
            .base_words
            .iter()
            .map(|w| {
                let chain = self.mdp.induced_matrix(&self.word_to_policy(w)?)?;
                stationary_linear(&chain)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.base_dists.get_or_init(|| computed))
    }

    /// The base distributions if they are already cached or were supplied;
    /// does not trigger computation.
    pub fn cached_distributions(&self) -> Option<&[Distribution]> {
        self.base_dists.get().map(Vec::as_slice)
    }

    /// Copy of the family with action names swapped at every differing state
    /// where `target` has bit 0, so that the target word becomes all ones.
    /// The induced chains, and hence the cached distributions, are unchanged.
    pub fn relabeled_to_all_ones(&self, target: &Word) -> Result<PolicyFamily> {
        if target.len() != self.n() {
            return Err(Error::WordLength { expected: self.n(), got: target.len() });
        }
        let flips: Vec<bool> = target.bits().iter().map(|&b| b == 0).collect();
        let mut mdp = self.mdp.clone();
        for (i, &s) in self.diff_states.iter().enumerate() {
            if flips[i] {
                mdp.transitions[s].swap(0, 1);
            }
        }
        let base_words = self.base_words.iter().map(|w| w.flipped_at(&flips)).collect();
        let family = PolicyFamily {
            mdp,
            diff_states: self.diff_states.clone(),
            base_words,
            shared_policy: self.shared_policy.clone(),
            base_dists: OnceLock::new(),
        };
        if let Some(dists) = self.base_dists.get() {
            let _ = family.base_dists.set(dists.clone());
        }
        Ok(family)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_state_mdp() -> Mdp {
        Mdp::new(vec![
            vec![vec![0.5, 0.5]],
            vec![vec![0.3, 0.7]],
        ])
        .unwrap()
    }

    /// 3 states; state 1 has two actions.
    fn three_state_mdp() -> Mdp {
        Mdp::new(vec![
            vec![vec![0.2, 0.3, 0.5]],
            vec![vec![0.1, 0.8, 0.1], vec![0.6, 0.2, 0.2]],
            vec![vec![0.4, 0.4, 0.2]],
        ])
        .unwrap()
    }

    #[test]
    fn validate_accepts_stochastic_rows() {
        let report = validate_mdp(2, &[vec![vec![0.5, 0.5]], vec![vec![0.3, 0.7]]]);
        assert!(report.is_valid());
    }

    #[test]
    fn validate_reports_row_sum() {
        let report = validate_mdp(2, &[vec![vec![0.5, 0.6]], vec![vec![0.3, 0.7]]]);
        assert_eq!(report.violations().len(), 1);
        match &report.violations()[0] {
            Violation::RowSum { state: 0, action: 0, sum } => {
                assert!((sum - 1.1).abs() < 1e-12)
            }
            v => panic!("unexpected violation {v:?}"),
        }
        assert!(report.to_string().contains("at (0, 0)"));
    }

    #[test]
    fn validate_reports_negative_entry() {
        let report = validate_mdp(2, &[vec![vec![-0.1, 1.1]], vec![vec![0.3, 0.7]]]);
        assert!(report
            .violations()
            .iter()
            .any(|v| matches!(v, Violation::Range { state: 0, action: 0, next_state: 0, .. })));
    }

    #[test]
    fn validate_reports_all_defects_at_once() {
        let report = validate_mdp(
            3,
            &[vec![vec![0.5, 0.6]], vec![], vec![vec![0.3, 0.7], vec![1.0]]],
        );
        assert!(report.violations().len() >= 4);
    }

    #[test]
    fn induced_matrix_single_action_equals_slice() {
        let mdp = two_state_mdp();
        let policy = DeterministicPolicy::new(vec![0, 0], &mdp).unwrap();
        let p = mdp.induced_matrix(&policy).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert_eq!(p.row(1), &[0.3, 0.7]);
    }

    #[test]
    fn induced_matrix_pulls_rows_from_slices() {
        let mdp = three_state_mdp();
        let policy = DeterministicPolicy::new(vec![0, 1, 0], &mdp).unwrap();
        let p = mdp.induced_matrix(&policy).unwrap();
        // assembled by hand from the tensor
        assert_eq!(p.row(0), &[0.2, 0.3, 0.5]);
        assert_eq!(p.row(1), &[0.6, 0.2, 0.2]);
        assert_eq!(p.row(2), &[0.4, 0.4, 0.2]);
        for i in 0..3 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn induced_matrix_rejects_out_of_range_action() {
        let mdp = three_state_mdp();
        let other = Mdp::new(vec![
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0]],
        ])
        .unwrap();
        let policy = DeterministicPolicy::new(vec![1, 0, 0], &other).unwrap();
        assert!(matches!(
            mdp.induced_matrix(&policy),
            Err(Error::ActionRange { state: 0, action: 1, .. })
        ));
    }

    fn small_family() -> PolicyFamily {
        let mdp = three_state_mdp();
        let shared = DeterministicPolicy::new(vec![0, 0, 0], &mdp).unwrap();
        PolicyFamily::new(
            mdp,
            vec![1],
            vec!["0".parse().unwrap(), "1".parse().unwrap()],
            shared,
        )
        .unwrap()
    }

    #[test]
    fn word_to_policy_matches_base_assembly() {
        let family = small_family();
        for word in family.base_words().to_vec() {
            let policy = family.word_to_policy(&word).unwrap();
            assert_eq!(policy.action(1), usize::from(word.bit(0)));
            assert_eq!(policy.action(0), 0);
            assert_eq!(policy.action(2), 0);
        }
    }

    #[test]
    fn word_to_policy_empty_word_returns_shared() {
        let mdp = two_state_mdp();
        let shared = DeterministicPolicy::new(vec![0, 0], &mdp).unwrap();
        let family =
            PolicyFamily::new(mdp, vec![], vec![Word::from_bits(vec![]).unwrap()], shared.clone())
                .unwrap();
        assert_eq!(family.word_to_policy(&"".parse().unwrap()).unwrap(), shared);
    }

    #[test]
    fn word_to_policy_rejects_length_mismatch() {
        let family = small_family();
        assert!(matches!(
            family.word_to_policy(&"01".parse().unwrap()),
            Err(Error::WordLength { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn is_combination_base_words_and_witnesses() {
        let words: Vec<Word> = ["000", "010", "101", "110"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        for w in &words {
            assert!(word_is_combination(&words, w));
        }
        // bits witnessed by rows 3, 2, 3
        assert!(word_is_combination(&words, &"111".parse().unwrap()));
    }

    #[test]
    fn is_combination_false_without_witness() {
        let words: Vec<Word> = ["00", "01", "10"].iter().map(|s| s.parse().unwrap()).collect();
        // column 0 never carries a 1 in {00, 01}; 10 has one, so use a set
        // whose first column is all zero:
        let words0: Vec<Word> = ["00", "01"].iter().map(|s| s.parse().unwrap()).collect();
        assert!(!word_is_combination(&words0, &"10".parse().unwrap()));
        assert!(word_is_combination(&words, &"11".parse().unwrap()));
    }

    #[test]
    fn family_rejects_duplicate_words() {
        let mdp = three_state_mdp();
        let shared = DeterministicPolicy::new(vec![0, 0, 0], &mdp).unwrap();
        let err = PolicyFamily::new(
            mdp,
            vec![1],
            vec!["0".parse().unwrap(), "0".parse().unwrap()],
            shared,
        );
        assert!(matches!(err, Err(Error::InvalidFamily(_))));
    }

    #[test]
    fn family_rejects_single_action_diff_state() {
        let mdp = three_state_mdp();
        let shared = DeterministicPolicy::new(vec![0, 0, 0], &mdp).unwrap();
        let err = PolicyFamily::new(
            mdp,
            vec![0],
            vec!["0".parse().unwrap(), "1".parse().unwrap()],
            shared,
        );
        assert!(matches!(err, Err(Error::InvalidFamily(_))));
    }

    #[test]
    fn family_rejects_wrong_word_count() {
        let mdp = three_state_mdp();
        let shared = DeterministicPolicy::new(vec![0, 0, 0], &mdp).unwrap();
        let err = PolicyFamily::new(mdp, vec![1], vec!["0".parse().unwrap()], shared);
        assert!(matches!(err, Err(Error::InvalidFamily(_))));
    }

    #[test]
    fn mixed_matrix_interpolates_action_rows() {
        let family = small_family();
        let half = MixtureVector::new(vec![0.5]).unwrap();
        let p = family.mixed_matrix(&half).unwrap();
        // row 1 = 0.5 * [0.1, 0.8, 0.1] + 0.5 * [0.6, 0.2, 0.2]
        let expect = [0.35, 0.5, 0.15];
        for (got, want) in p.row(1).iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        let zero = MixtureVector::new(vec![0.0]).unwrap();
        let row = family.mixed_matrix(&zero).unwrap();
        for (got, want) in row.row(1).iter().zip(family.mdp().action_row(1, 1)) {
            assert!((got - want).abs() < 1e-15);
        }
        let one = MixtureVector::new(vec![1.0]).unwrap();
        let row = family.mixed_matrix(&one).unwrap();
        for (got, want) in row.row(1).iter().zip(family.mdp().action_row(1, 0)) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mixed_matrix_with_word_mixture_equals_induced() {
        let family = small_family();
        for word in family.base_words().to_vec() {
            let via_mix = family.mixed_matrix(&MixtureVector::from_word(&word)).unwrap();
            let via_policy = family
                .mdp()
                .induced_matrix(&family.word_to_policy(&word).unwrap())
                .unwrap();
            for i in 0..3 {
                assert_eq!(via_mix.row(i), via_policy.row(i));
            }
        }
    }

    #[test]
    fn distribution_cache_fills_once_under_concurrency() {
        let family = small_family();
        let results: Vec<usize> = std::thread::scope(|scope| {
            (0..4)
                .map(|_| scope.spawn(|| family.base_distributions().unwrap().as_ptr() as usize))
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().unwrap())
                .collect()
        });
        // every thread sees the same cached slice
        assert!(results.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn base_distributions_satisfy_residual_bound() {
        let family = small_family();
        let dists = family.base_distributions().unwrap();
        assert_eq!(dists.len(), 2);
        for (word, dist) in family.base_words().iter().zip(dists) {
            let chain = family
                .mdp()
                .induced_matrix(&family.word_to_policy(word).unwrap())
                .unwrap();
            assert!(residual(&chain, dist) <= 1e-10);
        }
    }

    #[test]
    fn with_distributions_rejects_wrong_stationary() {
        let family = small_family();
        let bogus = Distribution::new(vec![0.4, 0.3, 0.3]).unwrap();
        let err = PolicyFamily::with_distributions(
            family.mdp().clone(),
            family.diff_states().to_vec(),
            family.base_words().to_vec(),
            family.shared_policy().clone(),
            vec![bogus.clone(), bogus],
        );
        assert!(matches!(err, Err(Error::InvalidFamily(_))));
    }

    #[test]
    fn with_distributions_accepts_true_stationary() {
        let family = small_family();
        let dists = family.base_distributions().unwrap().to_vec();
        let rebuilt = PolicyFamily::with_distributions(
            family.mdp().clone(),
            family.diff_states().to_vec(),
            family.base_words().to_vec(),
            family.shared_policy().clone(),
            dists.clone(),
        )
        .unwrap();
        assert_eq!(rebuilt.base_distributions().unwrap(), dists.as_slice());
    }

    #[test]
    fn relabel_flips_words_and_preserves_chains() {
        let family = small_family();
        let target: Word = "0".parse().unwrap();
        let relabeled = family.relabeled_to_all_ones(&target).unwrap();
        // original target 0 becomes all-ones in the relabeled family
        assert_eq!(relabeled.base_words()[0], "1".parse().unwrap());
        assert_eq!(relabeled.base_words()[1], "0".parse().unwrap());
        // word k in the relabeled family induces the same chain as word k originally
        for (orig, flipped) in family.base_words().iter().zip(relabeled.base_words()) {
            let a = family
                .mdp()
                .induced_matrix(&family.word_to_policy(orig).unwrap())
                .unwrap();
            let b = relabeled
                .mdp()
                .induced_matrix(&relabeled.word_to_policy(flipped).unwrap())
                .unwrap();
            for i in 0..3 {
                assert_eq!(a.row(i), b.row(i));
            }
        }
    }

    #[test]
    fn relabel_all_ones_target_is_identity() {
        let family = small_family();
        let relabeled = family.relabeled_to_all_ones(&"1".parse().unwrap()).unwrap();
        assert_eq!(relabeled.base_words(), family.base_words());
        assert_eq!(relabeled.mdp(), family.mdp());
    }

    #[test]
    fn initial_distribution_is_validated_and_inert() {
        let mdp = two_state_mdp().with_initial_distribution(vec![1.0, 0.0]).unwrap();
        assert_eq!(mdp.initial_distribution(), Some(&[1.0, 0.0][..]));
        assert!(two_state_mdp().with_initial_distribution(vec![0.9, 0.3]).is_err());
        assert!(two_state_mdp().with_initial_distribution(vec![1.0]).is_err());
    }

    #[test]
    fn distribution_rejects_non_positive_and_bad_sum() {
        assert!(Distribution::new(vec![0.5, 0.5]).is_ok());
        assert!(Distribution::new(vec![1.0, 0.0]).is_err());
        assert!(Distribution::new(vec![1.1, -0.1]).is_err());
        assert!(Distribution::new(vec![0.6, 0.6]).is_err());
    }

    #[test]
    fn word_parse_and_display_round_trip() {
        let w: Word = "0110".parse().unwrap();
        assert_eq!(w.to_string(), "0110");
        assert_eq!(w.bits(), &[0, 1, 1, 0]);
        let empty: Word = "".parse().unwrap();
        assert!(empty.is_empty());
        assert!("01a".parse::<Word>().is_err());
    }

    #[test]
    fn word_all_is_lexicographic_and_complete() {
        let all = Word::all(3);
        assert_eq!(all.len(), 8);
        assert_eq!(all[0].to_string(), "000");
        assert_eq!(all[5].to_string(), "101");
        assert_eq!(all[7].to_string(), "111");
    }

    #[test]
    fn mixture_rejects_out_of_range() {
        assert!(MixtureVector::new(vec![0.0, 1.0, 0.5]).is_ok());
        assert!(MixtureVector::new(vec![1.5]).is_err());
        assert!(MixtureVector::new(vec![-0.1]).is_err());
        assert!(MixtureVector::new(vec![f64::NAN]).is_err());
    }

    proptest! {
        /// Adding a base word never turns a combination into a non-combination.
        #[test]
        fn is_combination_monotone(
            n in 1usize..6,
            seed_words in proptest::collection::vec(proptest::collection::vec(0u8..2, 6), 1..6),
            extra in proptest::collection::vec(0u8..2, 6),
            target in proptest::collection::vec(0u8..2, 6),
        ) {
            let words: Vec<Word> = seed_words
                .into_iter()
                .map(|bits| Word::from_bits(bits[..n].to_vec()).unwrap())
                .collect();
            let extra = Word::from_bits(extra[..n].to_vec()).unwrap();
            let target = Word::from_bits(target[..n].to_vec()).unwrap();
            let before = word_is_combination(&words, &target);
            let mut bigger = words.clone();
            bigger.push(extra);
            let after = word_is_combination(&bigger, &target);
            prop_assert!(!before || after);
        }
    }
}
