//! Command-line surface: validation, solving, combining, verification and
//! benchmarking of policy-combination instances.
//!
//! Exit codes: 0 success, 1 verification or validation failure, 2 usage or
//! input error, 3 numerical degeneracy. Stdout carries machine-readable
//! JSON only; diagnostics go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use unichain::combine::{combine_randomized, nu_vector, Evaluator};
use unichain::json::{save_family, save_mdp, DistributionOutput, FamilyFile, GenMeta, MdpFile};
use unichain::mdp::{validate_mdp, DeterministicPolicy, Mdp, MixtureVector, Word};
use unichain::randgen::{random_family, random_unichain_mdp, GenSpec, SplitMix64};
use unichain::statdist::{
    is_irreducible, residual, solve, stationary_linear, Method, SolveOptions, StochasticMatrix,
};

/// Environment variable overriding the default tolerance of any command
/// that accepts --tol.
const TOL_ENV: &str = "UNICHAIN_TOL";

#[derive(Parser)]
#[command(
    name = "unichain",
    version,
    about = "Stationary distributions of combined policies in unichain MDPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Structurally validate an MDP or family file and check irreducibility
    /// of the listed policies.
    Validate {
        /// MDP or family JSON file.
        file: PathBuf,
    },
    /// Solve a chain directly for its stationary distribution.
    Solve(SolveArgs),
    /// Evaluate the combination formula for a target word or mixture.
    Combine(CombineArgs),
    /// Compare the formula against direct solves across combination words.
    Verify(VerifyArgs),
    /// Time the evaluators on seeded instances after cross-checking them.
    Bench(BenchArgs),
    /// Generate a seeded unichain instance.
    Gen(GenArgs),
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("target").required(true).multiple(false))]
struct SolveArgs {
    /// MDP or family JSON file.
    file: PathBuf,
    /// Combination word selecting a deterministic policy (family file).
    #[arg(long, group = "target")]
    word: Option<String>,
    /// Comma-separated mixture probabilities of action 0 (family file).
    #[arg(long, group = "target")]
    lambda: Option<String>,
    /// Comma-separated action per state (MDP file).
    #[arg(long, group = "target")]
    policy: Option<String>,
    #[arg(long, value_enum, default_value_t = SolverKind::Linear)]
    method: SolverKind,
    /// Convergence tolerance; defaults to 1e-12 (or UNICHAIN_TOL).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    max_iters: usize,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("target").required(true).multiple(false))]
struct CombineArgs {
    /// Family JSON file.
    family: PathBuf,
    /// Deterministic target as a binary word.
    #[arg(long, group = "target")]
    word: Option<String>,
    /// Comma-separated mixture probabilities of action 0.
    #[arg(long, group = "target")]
    lambda: Option<String>,
    #[arg(long, value_enum, default_value_t = EvaluatorKind::Determinant)]
    method: EvaluatorKind,
    /// Also solve the chain directly and compare.
    #[arg(long)]
    check: bool,
    /// Comparison tolerance for --check; defaults to 1e-9 (or UNICHAIN_TOL).
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Family JSON file.
    family: PathBuf,
    /// Check every combination word instead of only the base words.
    #[arg(long)]
    all_words: bool,
    /// Acceptance tolerance; defaults to 1e-9 (or UNICHAIN_TOL).
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Inclusive range of differing-state counts, e.g. 1..7.
    #[arg(long, default_value = "1..5")]
    n_range: String,
    #[arg(long, default_value_t = 10)]
    states: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Repetitions per timing; the median is reported.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    states: usize,
    /// Number of differing states.
    #[arg(long)]
    diff: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    min_prob: f64,
    #[arg(long, default_value_t = 0)]
    decoy_actions: usize,
    /// Pull the two action rows at each differing state toward each other.
    #[arg(long)]
    near_degenerate: bool,
    /// Emit only the MDP, without a policy family around it.
    #[arg(long)]
    mdp_only: bool,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverKind {
    Linear,
    Cesaro,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvaluatorKind {
    Determinant,
    Permsum,
}

impl From<EvaluatorKind> for Evaluator {
    fn from(kind: EvaluatorKind) -> Evaluator {
        match kind {
            EvaluatorKind::Determinant => Evaluator::Determinant,
            EvaluatorKind::Permsum => Evaluator::PermSum,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Validate { file } => cmd_validate(&file),
        Command::Solve(args) => cmd_solve(args),
        Command::Combine(args) => cmd_combine(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Gen(args) => cmd_gen(args),
    }
}

/// Degenerate numerics exit with 3; anything else that errors out is an
/// input or usage problem.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<unichain::Error>() {
        Some(
            unichain::Error::SingularSystem
            | unichain::Error::NonPositiveResult { .. }
            | unichain::Error::NoConvergence(_)
            | unichain::Error::DegenerateDenominator { .. }
            | unichain::Error::EmptyNumerator,
        ) => 3,
        _ => 2,
    }
}

fn tol_or_default(explicit: Option<f64>, fallback: f64) -> anyhow::Result<f64> {
    if let Some(t) = explicit {
        return Ok(t);
    }
    match std::env::var(TOL_ENV) {
        Ok(raw) => {
            let t: f64 = raw
                .parse()
                .map_err(|_| anyhow!("{TOL_ENV}={raw} is not a number"))?;
            if !t.is_finite() || t <= 0.0 {
                bail!("{TOL_ENV}={raw} must be positive");
            }
            Ok(t)
        }
        Err(_) => Ok(fallback),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_word(raw: &str, n: usize) -> anyhow::Result<Word> {
    let word: Word = raw.parse::<Word>().map_err(anyhow::Error::from)?;
    if word.len() != n {
        return Err(unichain::Error::WordLength { expected: n, got: word.len() }.into());
    }
    Ok(word)
}

fn parse_lambdas(raw: &str, n: usize) -> anyhow::Result<MixtureVector> {
    let values = if raw.trim().is_empty() {
        Vec::new()
    } else {
        raw.split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad lambda {s:?}")))
            .collect::<anyhow::Result<Vec<f64>>>()?
    };
    if values.len() != n {
        bail!("{} lambdas given, family has n = {n}", values.len());
    }
    MixtureVector::new(values).map_err(anyhow::Error::from)
}

/// Distinguishes the two file schemas by their top-level keys.
enum InputFile {
    Mdp(MdpFile),
    Family(FamilyFile),
}

fn read_input(path: &Path) -> anyhow::Result<InputFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).context("malformed JSON")?;
    let obj = value
        .as_object()
        .ok_or_else(|| anyhow!("top level must be a JSON object"))?;
    if obj.contains_key("base_words") {
        Ok(InputFile::Family(serde_json::from_value(value).context("malformed family file")?))
    } else if obj.contains_key("transitions") {
        Ok(InputFile::Mdp(serde_json::from_value(value).context("malformed MDP file")?))
    } else {
        bail!("file is neither an MDP file (transitions) nor a family file (base_words)")
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf()
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ValidateReport {
    file: String,
    kind: &'static str,
    valid: bool,
    violations: Vec<String>,
    policies_checked: usize,
}

/// Upper bound on exhaustive policy enumeration for bare MDP files.
const POLICY_ENUM_CAP: usize = 4096;

fn cmd_validate(path: &Path) -> anyhow::Result<u8> {
    let report = match read_input(path)? {
        InputFile::Mdp(file) => validate_mdp_file(path, &file),
        InputFile::Family(file) => validate_family_file(path, &file),
    };
    print_json(&report)?;
    Ok(u8::from(!report.valid))
}

fn validate_mdp_file(path: &Path, file: &MdpFile) -> ValidateReport {
    let mut violations: Vec<String> = validate_mdp(file.num_states, &file.transitions)
        .violations()
        .iter()
        .map(ToString::to_string)
        .collect();
    let mut policies_checked = 0;
    if violations.is_empty() {
        match file.to_mdp() {
            Ok(mdp) => {
                let total: usize = (0..mdp.num_states())
                    .map(|s| mdp.num_actions(s))
                    .try_fold(1usize, |acc, a| acc.checked_mul(a))
                    .unwrap_or(usize::MAX);
                if total <= POLICY_ENUM_CAP {
                    for choice in enumerate_policies(&mdp) {
                        let policy = DeterministicPolicy::new(choice.clone(), &mdp)
                            .expect("enumerated in range");
                        let chain = mdp.induced_matrix(&policy).expect("valid policy");
                        if !is_irreducible(&chain) {
                            violations
                                .push(format!("policy {choice:?} induces a reducible chain"));
                        }
                        policies_checked += 1;
                    }
                } else {
                    eprintln!(
                        "note: {total} deterministic policies exceed the enumeration cap {POLICY_ENUM_CAP}; structural checks only"
                    );
                }
            }
            Err(err) => violations.push(err.to_string()),
        }
    }
    ValidateReport {
        file: path.display().to_string(),
        kind: "mdp",
        valid: violations.is_empty(),
        violations,
        policies_checked,
    }
}

fn validate_family_file(path: &Path, file: &FamilyFile) -> ValidateReport {
    let mut violations = Vec::new();
    let mut policies_checked = 0;
    match file.to_family(&base_dir(path)) {
        Ok(family) => {
            for word in family.base_words() {
                let chain = family
                    .word_to_policy(word)
                    .and_then(|p| family.mdp().induced_matrix(&p))
                    .expect("base words fit the family");
                if !is_irreducible(&chain) {
                    violations.push(format!("base word {word} induces a reducible chain"));
                }
                policies_checked += 1;
            }
        }
        Err(err) => violations.push(err.to_string()),
    }
    ValidateReport {
        file: path.display().to_string(),
        kind: "family",
        valid: violations.is_empty(),
        violations,
        policies_checked,
    }
}

/// Mixed-radix enumeration of every deterministic policy.
fn enumerate_policies(mdp: &Mdp) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; mdp.num_states()]];
    for state in 0..mdp.num_states() {
        let actions = mdp.num_actions(state);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..actions).map(move |a| {
                    let mut next = prefix.clone();
                    next[state] = a;
                    next
                })
            })
            .collect();
    }
    out
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn cmd_solve(args: SolveArgs) -> anyhow::Result<u8> {
    let tol = tol_or_default(args.tol, 1e-12)?;
    let method = match args.method {
        SolverKind::Linear => Method::Linear,
        SolverKind::Cesaro => Method::Cesaro,
    };
    let opts = SolveOptions::new(method, tol, args.max_iters)?;

    let chain: StochasticMatrix = match read_input(&args.file)? {
        InputFile::Family(file) => {
            let family = file.to_family(&base_dir(&args.file))?;
            if let Some(raw) = &args.word {
                let word = parse_word(raw, family.n())?;
                family.mdp().induced_matrix(&family.word_to_policy(&word)?)?
            } else if let Some(raw) = &args.lambda {
                family.mixed_matrix(&parse_lambdas(raw, family.n())?)?
            } else {
                bail!("a family file needs --word or --lambda");
            }
        }
        InputFile::Mdp(file) => {
            let mdp = file.to_mdp()?;
            let raw = args
                .policy
                .as_ref()
                .ok_or_else(|| anyhow!("an MDP file needs --policy"))?;
            let choice = raw
                .split(',')
                .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad action {s:?}")))
                .collect::<anyhow::Result<Vec<usize>>>()?;
            mdp.induced_matrix(&DeterministicPolicy::new(choice, &mdp)?)?
        }
    };

    let mu = solve(&chain, &opts)?;
    print_json(&DistributionOutput {
        probs: mu.probs().to_vec(),
        method: match method {
            Method::Linear => "linear".into(),
            Method::Cesaro => "cesaro".into(),
        },
        residual: residual(&chain, &mu),
    })?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// combine
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CheckReport {
    max_abs_diff: f64,
    oracle_residual: f64,
    tol: f64,
    pass: bool,
}

#[derive(Serialize)]
struct CombineOutput {
    #[serde(flatten)]
    distribution: DistributionOutput,
    #[serde(skip_serializing_if = "Option::is_none")]
    check: Option<CheckReport>,
}

fn cmd_combine(args: CombineArgs) -> anyhow::Result<u8> {
    let family = unichain::json::load_family(&args.family)?;
    let lambdas = if let Some(raw) = &args.word {
        MixtureVector::from_word(&parse_word(raw, family.n())?)
    } else if let Some(raw) = &args.lambda {
        parse_lambdas(raw, family.n())?
    } else {
        bail!("need --word or --lambda");
    };
    let evaluator: Evaluator = args.method.into();
    let mu = combine_randomized(&family, &lambdas, evaluator)?;
    let chain = family.mixed_matrix(&lambdas)?;

    let check = if args.check {
        let tol = tol_or_default(args.tol, 1e-9)?;
        let direct = stationary_linear(&chain)?;
        let max_abs_diff = mu.max_abs_diff(&direct);
        Some(CheckReport {
            max_abs_diff,
            oracle_residual: residual(&chain, &direct),
            tol,
            pass: max_abs_diff <= tol,
        })
    } else {
        None
    };

    let pass = check.as_ref().is_none_or(|c| c.pass);
    print_json(&CombineOutput {
        distribution: DistributionOutput {
            probs: mu.probs().to_vec(),
            method: match evaluator {
                Evaluator::Determinant => "determinant".into(),
                Evaluator::PermSum => "permsum".into(),
            },
            residual: residual(&chain, &mu),
        },
        check,
    })?;
    Ok(u8::from(!pass))
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

/// 2^n words are enumerated; past this the verification is refused.
const VERIFY_WORDS_MAX_N: usize = 20;

#[derive(Serialize)]
struct WordRecord {
    word: String,
    max_abs_error: f64,
    formula_residual: f64,
    direct_residual: f64,
    micros: u128,
}

#[derive(Serialize)]
struct VerifyReport {
    family: String,
    num_states: usize,
    n: usize,
    all_words: bool,
    tol: f64,
    words: Vec<WordRecord>,
    /// Words that are not combinations of the base words (possible only in
    /// hand-built families); the formula does not apply to them.
    skipped: Vec<String>,
    max_error: f64,
    pass: bool,
}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<u8> {
    let family = unichain::json::load_family(&args.family)?;
    let tol = tol_or_default(args.tol, 1e-9)?;
    let n = family.n();
    if args.all_words && n > VERIFY_WORDS_MAX_N {
        bail!("n = {n} exceeds the --all-words guard of {VERIFY_WORDS_MAX_N}");
    }
    family.base_distributions()?;
    let words = if args.all_words { Word::all(n) } else { family.base_words().to_vec() };

    let (combinations, skipped): (Vec<Word>, Vec<Word>) =
        words.into_iter().partition(|w| family.is_combination(w));
    let mut records = combinations
        .par_iter()
        .map(|word| -> unichain::Result<WordRecord> {
            let start = Instant::now();
            let formula =
                combine_randomized(&family, &MixtureVector::from_word(word), Evaluator::Determinant)?;
            let chain = family.mdp().induced_matrix(&family.word_to_policy(word)?)?;
            let direct = stationary_linear(&chain)?;
            Ok(WordRecord {
                word: word.to_string(),
                max_abs_error: formula.max_abs_diff(&direct),
                formula_residual: residual(&chain, &formula),
                direct_residual: residual(&chain, &direct),
                micros: start.elapsed().as_micros(),
            })
        })
        .collect::<unichain::Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.word.cmp(&b.word));

    let max_error = records.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    let report = VerifyReport {
        family: args.family.display().to_string(),
        num_states: family.num_states(),
        n,
        all_words: args.all_words,
        tol,
        max_error,
        pass: max_error <= tol && !records.is_empty(),
        words: records,
        skipped: skipped.iter().map(Word::to_string).collect(),
    };
    print_json(&report)?;
    Ok(u8::from(!report.pass))
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

/// The permutation-sum evaluator is factorial; cap the benchmark range.
const BENCH_MAX_N: usize = 8;

#[derive(Serialize)]
struct BenchRow {
    n: usize,
    permsum_ns: u128,
    determinant_ns: u128,
    linear_ns: u128,
    max_cross_diff: f64,
}

#[derive(Serialize)]
struct BenchReport {
    states: usize,
    seed: u64,
    reps: u64,
    rows: Vec<BenchRow>,
}

fn parse_n_range(raw: &str) -> anyhow::Result<(usize, usize)> {
    let (lo, hi) = match raw.split_once("..") {
        Some((a, b)) => (a.trim().parse::<usize>()?, b.trim().parse::<usize>()?),
        None => {
            let v = raw.trim().parse::<usize>()?;
            (v, v)
        }
    };
    if lo == 0 || hi < lo || hi > BENCH_MAX_N {
        bail!("--n-range must satisfy 1 <= lo <= hi <= {BENCH_MAX_N}, got {raw:?}");
    }
    Ok((lo, hi))
}

fn median_ns<F: FnMut()>(reps: u64, mut f: F) -> u128 {
    let mut samples: Vec<u128> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos()
        })
        .collect();
    samples.sort_unstable();
    samples[samples.len() / 2]
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<u8> {
    let (lo, hi) = parse_n_range(&args.n_range)?;
    if args.states <= hi {
        bail!("--states must exceed the largest n ({hi})");
    }
    let mut rng = SplitMix64::new(args.seed ^ 0xB1E55ED);
    let mut rows = Vec::new();
    for n in lo..=hi {
        let spec = GenSpec::new(args.states, n, args.seed.wrapping_add(n as u64))?;
        let family = random_family(&spec)?;
        let lambdas = MixtureVector::new(
            (0..n).map(|_| 0.01 + 0.98 * rng.next_f64()).collect(),
        )?;
        let mixed = family.mixed_matrix(&lambdas)?;

        // cross-check all three routes before timing anything
        let permsum = nu_vector(&family, &lambdas, Evaluator::PermSum)?.normalize()?;
        let det = nu_vector(&family, &lambdas, Evaluator::Determinant)?.normalize()?;
        let direct = stationary_linear(&mixed)?;
        let max_cross_diff = permsum
            .max_abs_diff(&det)
            .max(permsum.max_abs_diff(&direct));
        if max_cross_diff > 1e-9 {
            eprintln!("cross-check failed at n = {n}: max diff {max_cross_diff:.3e}");
            return Ok(1);
        }

        rows.push(BenchRow {
            n,
            permsum_ns: median_ns(args.reps, || {
                let _ = nu_vector(&family, &lambdas, Evaluator::PermSum);
            }),
            determinant_ns: median_ns(args.reps, || {
                let _ = nu_vector(&family, &lambdas, Evaluator::Determinant);
            }),
            linear_ns: median_ns(args.reps, || {
                let _ = stationary_linear(&mixed);
            }),
            max_cross_diff,
        });
    }
    print_json(&BenchReport { states: args.states, seed: args.seed, reps: args.reps, rows })?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(args: GenArgs) -> anyhow::Result<u8> {
    let spec = GenSpec::new(args.states, args.diff, args.seed)?
        .with_min_prob(args.min_prob)?
        .with_decoy_actions(args.decoy_actions)
        .with_near_degenerate(args.near_degenerate);
    let meta = GenMeta::new(spec.clone());
    if args.mdp_only {
        let mdp = random_unichain_mdp(&spec)?;
        match &args.out {
            Some(path) => save_mdp(path, &mdp, Some(meta))?,
            None => {
                let mut file = MdpFile::from_mdp(&mdp);
                file.gen_meta = Some(meta);
                print_json(&file)?;
            }
        }
    } else {
        let family = random_family(&spec)?;
        match &args.out {
            Some(path) => save_family(path, &family, Some(meta))?,
            None => print_json(&FamilyFile::from_family(&family, Some(meta)))?,
        }
    }
    Ok(0)
}
