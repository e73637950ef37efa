//! Closed-form stationary distributions for combined and randomized policies,
//! computed from the n + 1 base distributions alone.
//!
//! Three mutually verifying evaluators are provided: the literal permutation
//! sum, a cofactor/determinant reformulation of it, and (for deterministic
//! targets) the restricted permutation-set route on the relabeled family.
//! The determinant route is the production path; the other two exist to
//! audit it.

use crate::error::{Error, Result};
use crate::mdp::{Distribution, MixtureVector, PolicyFamily, Word};

/// Permutation enumeration is factorial; anything past this is refused.
pub const MAX_ENUM_N: usize = 10;

/// Reject the normalization when |sum of nu| falls below this times the
/// larger of max |nu_s| and the term scale. Relative, because nu's scale
/// shrinks rapidly with n.
pub const DEGENERATE_DENOMINATOR_REL: f64 = 1e-12;

/// A permutation of {1, ..., m} with its parity. Images are one-based: the
/// value m = n + 1 marks the slot whose factor is the distribution column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    image: Vec<usize>,
    sign: i8,
}

impl Permutation {
    /// Builds from a one-based image vector, computing the sign by
    /// inversion counting.
    pub fn from_image(image: Vec<usize>) -> Result<Self> {
        let m = image.len();
        let mut seen = vec![false; m];
        for &v in &image {
            if v == 0 || v > m || seen[v - 1] {
                return Err(Error::Incompatible(format!(
                    "{image:?} is not a bijection on 1..={m}"
                )));
            }
            seen[v - 1] = true;
        }
        let sign = sign_by_inversions(&image);
        Ok(Permutation { image, sign })
    }

    /// gamma(j) for one-based j.
    pub fn apply(&self, j: usize) -> usize {
        self.image[j - 1]
    }

    pub fn image(&self) -> &[usize] {
        &self.image
    }

    pub fn sign(&self) -> i8 {
        self.sign
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }
}

fn sign_by_inversions(image: &[usize]) -> i8 {
    let mut inversions = 0usize;
    for i in 0..image.len() {
        for j in i + 1..image.len() {
            if image[i] > image[j] {
                inversions += 1;
            }
        }
    }
    if inversions.is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// Visits every permutation of {1, ..., n+1} with gamma(k) = n+1, passing
/// the one-based image and its sign. Heap's algorithm permutes the values
/// 1..=n over the slots other than k; each emission after the first differs
/// from its predecessor by one transposition, so the sign just flips.
fn for_each_gamma_prime<F: FnMut(&[usize], i8)>(n: usize, k: usize, mut visit: F) -> Result<()> {
    if n > MAX_ENUM_N {
        return Err(Error::EnumerationGuard(n, MAX_ENUM_N));
    }
    let m = n + 1;
    if k == 0 || k > m {
        return Err(Error::Incompatible(format!("k = {k} out of 1..={m}")));
    }
    // slots other than k, in increasing order
    let slots: Vec<usize> = (1..=m).filter(|&j| j != k).collect();
    let mut values: Vec<usize> = (1..=n).collect();
    let mut image = vec![0usize; m];
    image[k - 1] = m;
    // placing the maximal value m at slot k adds m - k inversions
    let base_sign: i8 = if (m - k).is_multiple_of(2) { 1 } else { -1 };
    let mut sign = base_sign;

    let emit = |values: &[usize], sign: i8, image: &mut Vec<usize>, visit: &mut F| {
        for (slot, &v) in slots.iter().zip(values) {
            image[slot - 1] = v;
        }
        visit(image, sign);
    };

    emit(&values, sign, &mut image, &mut visit);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                values.swap(0, i);
            } else {
                values.swap(c[i], i);
            }
            sign = -sign;
            emit(&values, sign, &mut image, &mut visit);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(())
}

/// All n! permutations of {1, ..., n+1} with gamma(k) = n+1.
pub fn enumerate_gamma_prime(n: usize, k: usize) -> Result<Vec<Permutation>> {
    let mut out = Vec::new();
    for_each_gamma_prime(n, k, |image, sign| {
        out.push(Permutation { image: image.to_vec(), sign });
    })?;
    Ok(out)
}

/// The admissible subset of [`enumerate_gamma_prime`] for a family whose
/// target word has already been relabeled to all ones: gamma survives iff
/// base policy j plays action 0 at state s_{gamma(j)} for every j != k.
pub fn enumerate_gamma(family: &PolicyFamily, k: usize) -> Result<Vec<Permutation>> {
    let n = family.n();
    let words = family.base_words();
    let mut out = Vec::new();
    for_each_gamma_prime(n, k, |image, sign| {
        let admissible = (1..=n + 1)
            .filter(|&j| j != k)
            .all(|j| words[j - 1].bit(image[j - 1] - 1) == 0);
        if admissible {
            out.push(Permutation { image: image.to_vec(), sign });
        }
    })?;
    Ok(out)
}

/// The signed coupling weights of randomized mixtures: entry (j, i) is
/// f(i, j) = lambda_i mu_j(s_i) when policy j plays action 1 at s_i, and
/// (lambda_i - 1) mu_j(s_i) when it plays action 0.
#[derive(Debug, Clone)]
pub struct FKernel {
    /// values[j - 1][i - 1] = f(i, j); (n+1) rows of n entries.
    values: Vec<Vec<f64>>,
}

impl FKernel {
    pub fn new(family: &PolicyFamily, lambdas: &MixtureVector) -> Result<Self> {
        let n = family.n();
        if lambdas.len() != n {
            return Err(Error::InvalidMixture(format!(
                "{} lambdas for n = {n}",
                lambdas.len()
            )));
        }
        let dists = family.base_distributions()?;
        let values = family
            .base_words()
            .iter()
            .zip(dists)
            .map(|(word, mu)| {
                (0..n)
                    .map(|i0| {
                        let mu_ji = mu.get(family.diff_states()[i0]);
                        if word.bit(i0) == 1 {
                            lambdas.get(i0) * mu_ji
                        } else {
                            (lambdas.get(i0) - 1.0) * mu_ji
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(FKernel { values })
    }

    /// f(i, j), one-based in both arguments.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j - 1][i - 1]
    }

    /// Number of differing states n.
    pub fn num_states(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Number of base policies n + 1.
    pub fn num_policies(&self) -> usize {
        self.values.len()
    }

    /// The n x n matrix left after deleting policy row `k` (one-based).
    fn minor_without_row(&self, k: usize) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .enumerate()
            .filter(|(j0, _)| *j0 != k - 1)
            .map(|(_, row)| row.clone())
            .collect()
    }
}

/// Determinant by Gaussian elimination with partial pivoting.
fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                a[r][col].abs().partial_cmp(&a[s][col].abs()).expect("finite entries")
            })
            .unwrap();
        if a[pivot_row][col] == 0.0 {
            return 0.0;
        }
        if pivot_row != col {
            a.swap(pivot_row, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            let (pivot_part, rest) = a.split_at_mut(col + 1);
            let pivot_row_vals = &pivot_part[col];
            let target = &mut rest[row - col - 1];
            for (t, p) in target[col..].iter_mut().zip(&pivot_row_vals[col..]) {
                *t -= factor * p;
            }
        }
    }
    det
}

/// How to evaluate the permutation sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evaluator {
    /// The literal double sum over the Gamma'_k sets; factorial cost,
    /// kept as a correctness oracle.
    PermSum,
    /// Cofactor expansion: nu_s is the determinant of the f-kernel extended
    /// by the column mu_j(s), shared across states via the cofactors
    /// C_k = (-1)^(k+n+1) det(F without row k).
    Determinant,
}

/// Unnormalized stationary weights, their sum, and the magnitude of the
/// summed terms before cancellation.
#[derive(Debug, Clone)]
pub struct NuVector {
    pub nu: Vec<f64>,
    pub denominator: f64,
    /// Sum of absolute term values feeding the denominator; when the whole
    /// of nu cancels to rounding noise, this is the scale that exposes it.
    pub term_scale: f64,
}

impl NuVector {
    /// mu(s) = nu_s / sum, rejecting degenerate or sign-inconsistent
    /// results.
    pub fn normalize(&self) -> Result<Distribution> {
        let nu_scale = self.nu.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let scale = nu_scale.max(self.term_scale);
        if scale == 0.0 || self.denominator.abs() < DEGENERATE_DENOMINATOR_REL * scale {
            return Err(Error::DegenerateDenominator {
                denominator: self.denominator,
                scale,
            });
        }
        let probs: Vec<f64> = self.nu.iter().map(|&x| x / self.denominator).collect();
        if let Some((state, &value)) = probs.iter().enumerate().find(|(_, &v)| v <= 0.0) {
            return Err(Error::NonPositiveResult { state, value });
        }
        Distribution::new(probs)
    }
}

/// The unnormalized weight vector nu for the randomized policy given by
/// `lambdas`, by either evaluator.
pub fn nu_vector(
    family: &PolicyFamily,
    lambdas: &MixtureVector,
    evaluator: Evaluator,
) -> Result<NuVector> {
    let kernel = FKernel::new(family, lambdas)?;
    let dists = family.base_distributions()?;
    match evaluator {
        Evaluator::PermSum => nu_permsum(family, &kernel, dists),
        Evaluator::Determinant => Ok(nu_determinant(&kernel, dists)),
    }
}

fn nu_permsum(
    family: &PolicyFamily,
    kernel: &FKernel,
    dists: &[Distribution],
) -> Result<NuVector> {
    let n = family.n();
    let num_states = family.num_states();
    let mut nu = vec![0.0; num_states];
    let mut term_scale = 0.0;
    for k in 1..=n + 1 {
        let mut coefficient_sum = 0.0;
        for_each_gamma_prime(n, k, |image, sign| {
            let mut term = f64::from(sign);
            for j in 1..=n + 1 {
                if j != k {
                    term *= kernel.get(image[j - 1], j);
                }
            }
            coefficient_sum += term;
            term_scale += term.abs();
        })?;
        let mu_k = &dists[k - 1];
        for (s, slot) in nu.iter_mut().enumerate() {
            *slot += coefficient_sum * mu_k.get(s);
        }
    }
    let denominator = nu.iter().sum();
    Ok(NuVector { nu, denominator, term_scale })
}

fn nu_determinant(kernel: &FKernel, dists: &[Distribution]) -> NuVector {
    let m = kernel.num_policies();
    let n = kernel.num_states();
    let num_states = dists[0].len();
    let mut cofactors = Vec::with_capacity(m);
    for k in 1..=m {
        let det = determinant(kernel.minor_without_row(k));
        let sign = if (k + n + 1).is_multiple_of(2) { 1.0 } else { -1.0 };
        cofactors.push(sign * det);
    }
    let mut nu = vec![0.0; num_states];
    for (c, mu_k) in cofactors.iter().zip(dists) {
        for (s, slot) in nu.iter_mut().enumerate() {
            *slot += c * mu_k.get(s);
        }
    }
    // each mu_k sums to 1, so the sum over states collapses to sum of cofactors
    let denominator = cofactors.iter().sum();
    let term_scale = cofactors.iter().map(|c| c.abs()).sum();
    NuVector { nu, denominator, term_scale }
}

/// Stationary distribution of the randomized policy that plays action 0 at
/// diff state s_i with probability lambda_i, straight from the base
/// distributions.
pub fn combine_randomized(
    family: &PolicyFamily,
    lambdas: &MixtureVector,
    evaluator: Evaluator,
) -> Result<Distribution> {
    nu_vector(family, lambdas, evaluator)?.normalize()
}

/// Stationary distribution of the deterministic combined policy `word`, via
/// the restricted permutation sets on the family relabeled so the target
/// reads all ones. Agrees with [`combine_randomized`] at
/// lambda_i = 1 - word_i up to a global sign that cancels in normalization.
pub fn combine_deterministic_gamma(family: &PolicyFamily, word: &Word) -> Result<Distribution> {
    let n = family.n();
    if word.len() != n {
        return Err(Error::WordLength { expected: n, got: word.len() });
    }
    let relabeled = family.relabeled_to_all_ones(word)?;
    let dists = relabeled.base_distributions()?;
    let diff_states = relabeled.diff_states();
    let num_states = relabeled.num_states();

    let mut nu = vec![0.0; num_states];
    let mut term_scale = 0.0;
    let mut any_term = false;
    for k in 1..=n + 1 {
        let gammas = enumerate_gamma(&relabeled, k)?;
        if gammas.is_empty() {
            continue;
        }
        any_term = true;
        let mut coefficient_sum = 0.0;
        for gamma in &gammas {
            let mut term = f64::from(gamma.sign());
            for j in 1..=n + 1 {
                if j != k {
                    term *= dists[j - 1].get(diff_states[gamma.apply(j) - 1]);
                }
            }
            coefficient_sum += term;
            term_scale += term.abs();
        }
        let mu_k = &dists[k - 1];
        for (s, slot) in nu.iter_mut().enumerate() {
            *slot += coefficient_sum * mu_k.get(s);
        }
    }
    if !any_term {
        return Err(Error::EmptyNumerator);
    }
    let denominator = nu.iter().sum();
    NuVector { nu, denominator, term_scale }.normalize()
}

/// The key cancellation sum from the mixture proof: for any differing state
/// index i (one-based), sum over k and gamma in Gamma'_k of
/// sgn(gamma) f(i, k) prod_{j != k} f(gamma(j), j). Exactly zero in exact
/// arithmetic; equivalently, a determinant with a repeated column.
pub fn cancellation_check(
    family: &PolicyFamily,
    lambdas: &MixtureVector,
    i: usize,
) -> Result<f64> {
    Ok(cancellation_terms(family, lambdas, i)?.0)
}

/// The cancellation sum together with the sum of absolute term values, the
/// natural scale for judging how close to zero the sum is.
pub fn cancellation_terms(
    family: &PolicyFamily,
    lambdas: &MixtureVector,
    i: usize,
) -> Result<(f64, f64)> {
    let n = family.n();
    if i == 0 || i > n {
        return Err(Error::Incompatible(format!("i = {i} out of 1..={n}")));
    }
    let kernel = FKernel::new(family, lambdas)?;
    let mut sum = 0.0;
    let mut scale = 0.0;
    for k in 1..=n + 1 {
        for_each_gamma_prime(n, k, |image, sign| {
            let mut term = f64::from(sign) * kernel.get(i, k);
            for j in 1..=n + 1 {
                if j != k {
                    term *= kernel.get(image[j - 1], j);
                }
            }
            sum += term;
            scale += term.abs();
        })?;
    }
    Ok((sum, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{DeterministicPolicy, Mdp};
    use crate::randgen::{random_family, GenSpec};
    use crate::statdist::{residual, stationary_linear};
    use proptest::prelude::*;

    #[test]
    fn gamma_prime_n1_k1_is_the_swap() {
        let perms = enumerate_gamma_prime(1, 1).unwrap();
        assert_eq!(perms.len(), 1);
        assert_eq!(perms[0].image(), &[2, 1]);
        assert_eq!(perms[0].sign(), -1);
    }

    #[test]
    fn gamma_prime_n2_k3_is_s2_on_first_slots() {
        let mut perms = enumerate_gamma_prime(2, 3).unwrap();
        perms.sort_by(|a, b| a.image().cmp(b.image()));
        assert_eq!(perms.len(), 2);
        assert_eq!(perms[0].image(), &[1, 2, 3]);
        assert_eq!(perms[0].sign(), 1);
        assert_eq!(perms[1].image(), &[2, 1, 3]);
        assert_eq!(perms[1].sign(), -1);
    }

    #[test]
    fn gamma_prime_counts_and_sign_balance() {
        for k in 1..=4 {
            let perms = enumerate_gamma_prime(3, k).unwrap();
            assert_eq!(perms.len(), 6);
            let sign_sum: i32 = perms.iter().map(|p| i32::from(p.sign())).sum();
            assert_eq!(sign_sum, 0);
            // no duplicates
            let mut images: Vec<_> = perms.iter().map(|p| p.image().to_vec()).collect();
            images.sort();
            images.dedup();
            assert_eq!(images.len(), 6);
            for p in &perms {
                assert_eq!(p.apply(k), 4);
            }
        }
    }

    #[test]
    fn gamma_prime_guard_refuses_large_n() {
        assert!(matches!(
            enumerate_gamma_prime(MAX_ENUM_N + 1, 1),
            Err(Error::EnumerationGuard(..))
        ));
    }

    #[test]
    fn heap_sign_matches_inversion_count() {
        for n in 0..=4 {
            for k in 1..=n + 1 {
                for p in enumerate_gamma_prime(n, k).unwrap() {
                    let recomputed = Permutation::from_image(p.image().to_vec()).unwrap();
                    assert_eq!(p.sign(), recomputed.sign(), "image {:?}", p.image());
                }
            }
        }
    }

    #[test]
    fn permutation_rejects_non_bijections() {
        assert!(Permutation::from_image(vec![1, 1]).is_err());
        assert!(Permutation::from_image(vec![0, 1]).is_err());
        assert!(Permutation::from_image(vec![1, 3]).is_err());
    }

    /// The worked four-policy family on an arbitrary MDP shell: words
    /// {000, 010, 101, 110}, diff states with two actions each.
    fn worked_example_family(seed: u64) -> PolicyFamily {
        let spec = GenSpec::new(6, 3, seed).unwrap();
        let mdp = crate::randgen::random_unichain_mdp(&spec).unwrap();
        let diff_states: Vec<usize> =
            (0..mdp.num_states()).filter(|&s| mdp.num_actions(s) >= 2).collect();
        let shared =
            DeterministicPolicy::new(vec![0; mdp.num_states()], &mdp).unwrap();
        let words = ["000", "010", "101", "110"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        PolicyFamily::new(mdp, diff_states, words, shared).unwrap()
    }

    #[test]
    fn gamma_sets_of_the_worked_example() {
        let family = worked_example_family(11);
        // target 111 is already all ones; no relabeling needed
        let sizes: Vec<usize> = (1..=4)
            .map(|k| enumerate_gamma(&family, k).unwrap().len())
            .collect();
        assert_eq!(sizes, vec![1, 1, 1, 2]);
        let third = enumerate_gamma(&family, 3).unwrap();
        assert_eq!(third[0].image(), &[2, 1, 4, 3]);
        assert_eq!(third[0].sign(), 1);
    }

    #[test]
    fn gamma_empty_when_a_row_has_no_zero() {
        // n = 1, words {0, 1}: after targeting 1, policy 2's row is "1",
        // so Gamma_1 (which must pick a zero in row 2) is empty.
        let spec = GenSpec::new(4, 1, 3).unwrap();
        let mdp = crate::randgen::random_unichain_mdp(&spec).unwrap();
        let diff_states: Vec<usize> =
            (0..mdp.num_states()).filter(|&s| mdp.num_actions(s) >= 2).collect();
        let shared = DeterministicPolicy::new(vec![0; mdp.num_states()], &mdp).unwrap();
        let family = PolicyFamily::new(
            mdp,
            diff_states,
            vec!["0".parse().unwrap(), "1".parse().unwrap()],
            shared,
        )
        .unwrap();
        assert!(enumerate_gamma(&family, 1).unwrap().is_empty());
        let g2 = enumerate_gamma(&family, 2).unwrap();
        assert_eq!(g2.len(), 1);
        assert_eq!(g2[0].image(), &[1, 2]);
    }

    #[test]
    fn nu_vector_n0_is_the_single_distribution() {
        let mdp = Mdp::new(vec![vec![vec![0.7, 0.3]], vec![vec![0.6, 0.4]]]).unwrap();
        let shared = DeterministicPolicy::new(vec![0, 0], &mdp).unwrap();
        let family = PolicyFamily::new(
            mdp,
            vec![],
            vec![Word::from_bits(vec![]).unwrap()],
            shared,
        )
        .unwrap();
        let lambdas = MixtureVector::new(vec![]).unwrap();
        for evaluator in [Evaluator::PermSum, Evaluator::Determinant] {
            let nu = nu_vector(&family, &lambdas, evaluator).unwrap();
            assert!((nu.denominator - 1.0).abs() < 1e-14);
            let mu = family.base_distributions().unwrap()[0].clone();
            for s in 0..2 {
                assert!((nu.nu[s] - mu.get(s)).abs() < 1e-14);
            }
        }
        let empty_word = Word::from_bits(vec![]).unwrap();
        let via_gamma = combine_deterministic_gamma(&family, &empty_word).unwrap();
        assert!(via_gamma.max_abs_diff(&family.base_distributions().unwrap()[0]) < 1e-14);
    }

    #[test]
    fn evaluators_agree_on_seeded_families() {
        for seed in [1u64, 2, 3] {
            let family = random_family(&GenSpec::new(8, 4, seed).unwrap()).unwrap();
            let lambdas = MixtureVector::new(vec![0.3, 0.8, 0.5, 0.1]).unwrap();
            let a = nu_vector(&family, &lambdas, Evaluator::PermSum).unwrap();
            let b = nu_vector(&family, &lambdas, Evaluator::Determinant).unwrap();
            let scale = a.nu.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            for s in 0..family.num_states() {
                assert!((a.nu[s] - b.nu[s]).abs() <= 1e-10 * scale);
            }
            assert!((a.denominator - b.denominator).abs() <= 1e-10 * a.denominator.abs());
        }
    }

    #[test]
    fn determinant_denominator_matches_entrywise_sum() {
        let family = random_family(&GenSpec::new(7, 3, 9).unwrap()).unwrap();
        let lambdas = MixtureVector::new(vec![0.25, 0.5, 0.75]).unwrap();
        let nu = nu_vector(&family, &lambdas, Evaluator::Determinant).unwrap();
        let entrywise: f64 = nu.nu.iter().sum();
        assert!((nu.denominator - entrywise).abs() <= 1e-12 * nu.denominator.abs());
    }

    #[test]
    fn randomized_at_word_mixture_recovers_base_distribution() {
        let family = random_family(&GenSpec::new(6, 2, 5).unwrap()).unwrap();
        let dists = family.base_distributions().unwrap().to_vec();
        for (word, expected) in family.base_words().to_vec().iter().zip(&dists) {
            let lambdas = MixtureVector::from_word(word);
            let mu = combine_randomized(&family, &lambdas, Evaluator::Determinant).unwrap();
            assert!(mu.max_abs_diff(expected) < 1e-10);
        }
    }

    #[test]
    fn randomized_matches_direct_solve_of_mixed_chain() {
        let family = random_family(&GenSpec::new(5, 2, 42).unwrap()).unwrap();
        let lambdas = MixtureVector::new(vec![0.5, 0.25]).unwrap();
        let formula = combine_randomized(&family, &lambdas, Evaluator::Determinant).unwrap();
        let direct = stationary_linear(&family.mixed_matrix(&lambdas).unwrap()).unwrap();
        assert!(formula.max_abs_diff(&direct) < 1e-9);
        assert!(residual(&family.mixed_matrix(&lambdas).unwrap(), &formula) <= 1e-9);
    }

    #[test]
    fn zero_lambda_on_worked_example_family_hits_word_111() {
        let family = worked_example_family(29);
        let lambdas = MixtureVector::new(vec![0.0, 0.0, 0.0]).unwrap();
        let formula = combine_randomized(&family, &lambdas, Evaluator::Determinant).unwrap();
        let chain = family
            .mdp()
            .induced_matrix(&family.word_to_policy(&"111".parse().unwrap()).unwrap())
            .unwrap();
        let direct = stationary_linear(&chain).unwrap();
        assert!(formula.max_abs_diff(&direct) < 1e-9);
    }

    #[test]
    fn gamma_route_matches_lambda_route_and_oracle() {
        let family = random_family(&GenSpec::new(6, 3, 17).unwrap()).unwrap();
        for word in Word::all(3) {
            if !family.is_combination(&word) {
                continue;
            }
            let via_gamma = combine_deterministic_gamma(&family, &word).unwrap();
            let via_lambda = combine_randomized(
                &family,
                &MixtureVector::from_word(&word),
                Evaluator::PermSum,
            )
            .unwrap();
            assert!(via_gamma.max_abs_diff(&via_lambda) < 1e-12);
            let chain = family
                .mdp()
                .induced_matrix(&family.word_to_policy(&word).unwrap())
                .unwrap();
            let direct = stationary_linear(&chain).unwrap();
            assert!(via_gamma.max_abs_diff(&direct) < 1e-9);
        }
    }

    #[test]
    fn gamma_route_self_consistency_on_base_words() {
        let family = random_family(&GenSpec::new(7, 2, 23).unwrap()).unwrap();
        let dists = family.base_distributions().unwrap().to_vec();
        for (word, expected) in family.base_words().to_vec().iter().zip(&dists) {
            let mu = combine_deterministic_gamma(&family, word).unwrap();
            assert!(mu.max_abs_diff(expected) < 1e-10);
        }
    }

    /// Family whose base policies all agree at one differing state, so they
    /// do not actually differ there and nu collapses to zero.
    fn constant_column_family() -> PolicyFamily {
        let spec = GenSpec::new(6, 3, 2).unwrap();
        let mdp = crate::randgen::random_unichain_mdp(&spec).unwrap();
        let diff_states: Vec<usize> =
            (0..mdp.num_states()).filter(|&s| mdp.num_actions(s) >= 2).collect();
        let shared = DeterministicPolicy::new(vec![0; mdp.num_states()], &mdp).unwrap();
        let words = ["100", "101", "110", "111"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        PolicyFamily::new(mdp, diff_states, words, shared).unwrap()
    }

    #[test]
    fn hall_violation_family_is_degenerate_despite_varying_columns() {
        // Rows {0111, 1011, 0011} place their zeros in only two columns, so
        // no permutation can pick distinct zero columns for them: every
        // Gamma_k is empty for target 1111 although each column varies.
        let spec = GenSpec::new(7, 4, 1).unwrap();
        let mdp = crate::randgen::random_unichain_mdp(&spec).unwrap();
        let diff_states: Vec<usize> =
            (0..mdp.num_states()).filter(|&s| mdp.num_actions(s) >= 2).collect();
        let shared = DeterministicPolicy::new(vec![0; mdp.num_states()], &mdp).unwrap();
        let words: Vec<Word> = ["0111", "1011", "0011", "1100", "1111"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        for i in 0..4 {
            let first = words[0].bit(i);
            assert!(words.iter().any(|w| w.bit(i) != first), "column {i} must vary");
        }
        let family = PolicyFamily::new(mdp, diff_states, words, shared).unwrap();
        assert!(matches!(
            combine_deterministic_gamma(&family, &"1111".parse().unwrap()),
            Err(Error::EmptyNumerator)
        ));
    }

    #[test]
    fn constant_column_family_is_degenerate() {
        let family = constant_column_family();
        // deterministic route: column 1 of the relabeled matrix is all ones
        assert!(matches!(
            combine_deterministic_gamma(&family, &"111".parse().unwrap()),
            Err(Error::EmptyNumerator)
        ));
        // lambda route: every cofactor vanishes
        let lambdas = MixtureVector::new(vec![0.5, 0.2, 0.3]).unwrap();
        assert!(matches!(
            combine_randomized(&family, &lambdas, Evaluator::Determinant),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn normalize_rejects_bad_nu_vectors() {
        let degenerate =
            NuVector { nu: vec![1.0, -1.0 + 1e-15], denominator: 1e-15, term_scale: 2.0 };
        assert!(matches!(
            degenerate.normalize(),
            Err(Error::DegenerateDenominator { .. })
        ));
        let noise = NuVector { nu: vec![1e-18, -2e-18], denominator: -1e-18, term_scale: 0.1 };
        assert!(matches!(
            noise.normalize(),
            Err(Error::DegenerateDenominator { .. })
        ));
        let mixed_sign = NuVector { nu: vec![1.5, -0.5], denominator: 1.0, term_scale: 2.0 };
        assert!(matches!(
            mixed_sign.normalize(),
            Err(Error::NonPositiveResult { state: 1, .. })
        ));
        // a negatively scaled nu normalizes to the same distribution
        let pos = NuVector { nu: vec![0.6, 0.2], denominator: 0.8, term_scale: 0.8 };
        let neg = NuVector { nu: vec![-0.6, -0.2], denominator: -0.8, term_scale: 0.8 };
        assert!(pos.normalize().unwrap().max_abs_diff(&neg.normalize().unwrap()) < 1e-15);
    }

    #[test]
    fn cancellation_two_term_case_is_exactly_zero() {
        let family = random_family(&GenSpec::new(5, 1, 8).unwrap()).unwrap();
        let lambdas = MixtureVector::new(vec![0.37]).unwrap();
        // n = 1: the two surviving terms are f(1,1) f(1,2) with opposite signs
        let (sum, scale) = cancellation_terms(&family, &lambdas, 1).unwrap();
        assert_eq!(sum, 0.0);
        assert!(scale > 0.0);
    }

    #[test]
    fn cancellation_holds_at_lambda_extremes() {
        let family = random_family(&GenSpec::new(6, 3, 13).unwrap()).unwrap();
        for lambdas in [vec![0.0; 3], vec![1.0; 3]] {
            let lambdas = MixtureVector::new(lambdas).unwrap();
            for i in 1..=3 {
                let (sum, scale) = cancellation_terms(&family, &lambdas, i).unwrap();
                assert!(sum.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cancellation_sum_vanishes(
            seed in 0u64..1000,
            raw in proptest::collection::vec(0.0f64..1.0, 3),
        ) {
            let family = random_family(&GenSpec::new(6, 3, seed).unwrap()).unwrap();
            let lambdas = MixtureVector::new(raw).unwrap();
            for i in 1..=3 {
                let (sum, scale) = cancellation_terms(&family, &lambdas, i).unwrap();
                prop_assert!(sum.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn fkernel_bounds_and_signs(seed in 0u64..500) {
            let family = random_family(&GenSpec::new(6, 2, seed).unwrap()).unwrap();
            let lambdas = MixtureVector::new(vec![0.4, 0.9]).unwrap();
            let kernel = FKernel::new(&family, &lambdas).unwrap();
            let dists = family.base_distributions().unwrap();
            for i in 1..=2 {
                for j in 1..=3 {
                    let f = kernel.get(i, j);
                    let mu_ji = dists[j - 1].get(family.diff_states()[i - 1]);
                    prop_assert!(f.abs() <= mu_ji + 1e-15);
                    if family.base_words()[j - 1].bit(i - 1) == 1 {
                        prop_assert!(f >= 0.0);
                    } else {
                        prop_assert!(f <= 0.0);
                    }
                }
            }
        }
    }
}
