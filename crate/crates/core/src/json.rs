//! On-disk JSON formats for MDPs, policy families and distribution output.
//!
//! An MDP file is `{"num_states": N, "transitions": [[[p, ...], ...], ...]}`
//! with `transitions[state][action][next_state]`. A family file references
//! its MDP by relative path or carries it inline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    validate_mdp, DeterministicPolicy, Distribution, Mdp, PolicyFamily, Word,
};
use crate::randgen::GenSpec;

/// Provenance block written into generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub rng: String,
    pub spec: GenSpec,
}

impl GenMeta {
    pub fn new(spec: GenSpec) -> Self {
        GenMeta { rng: crate::randgen::RNG_ALGORITHM.to_string(), spec }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub num_states: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_distribution: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_meta: Option<GenMeta>,
}

impl MdpFile {
    pub fn from_mdp(mdp: &Mdp) -> Self {
        MdpFile {
            num_states: mdp.num_states(),
            transitions: mdp.transitions().to_vec(),
            initial_distribution: mdp.initial_distribution().map(<[f64]>::to_vec),
            gen_meta: None,
        }
    }

    pub fn to_mdp(&self) -> Result<Mdp> {
        let report = validate_mdp(self.num_states, &self.transitions);
        if !report.is_valid() {
            return Err(Error::InvalidMdp(report));
        }
        let mdp = Mdp::new(self.transitions.clone())?;
        match &self.initial_distribution {
            Some(init) => mdp.with_initial_distribution(init.clone()),
            None => Ok(mdp),
        }
    }
}

/// Either a path to an MDP file (resolved against the family file's
/// directory) or the MDP inline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MdpRef {
    Path(String),
    Inline(MdpFile),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyFile {
    pub mdp: MdpRef,
    pub diff_states: Vec<usize>,
    pub base_words: Vec<String>,
    pub shared_policy: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_distributions: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_meta: Option<GenMeta>,
}

impl FamilyFile {
    /// Serializes a family, MDP inline; cached distributions are included
    /// so the file is self-contained.
    pub fn from_family(family: &PolicyFamily, gen_meta: Option<GenMeta>) -> Self {
        FamilyFile {
            mdp: MdpRef::Inline(MdpFile::from_mdp(family.mdp())),
            diff_states: family.diff_states().to_vec(),
            base_words: family.base_words().iter().map(Word::to_string).collect(),
            shared_policy: family.shared_policy().as_slice().to_vec(),
            base_distributions: family
                .cached_distributions()
                .map(|dists| dists.iter().map(|d| d.probs().to_vec()).collect()),
            gen_meta,
        }
    }

    /// Builds the validated family; `base_dir` anchors a relative MDP path.
    pub fn to_family(&self, base_dir: &Path) -> Result<PolicyFamily> {
        let mdp = match &self.mdp {
            MdpRef::Inline(file) => file.to_mdp()?,
            MdpRef::Path(path) => {
                let resolved = resolve(base_dir, path);
                load_mdp(&resolved)?
            }
        };
        let words = self
            .base_words
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Word>>>()?;
        let shared = DeterministicPolicy::new(self.shared_policy.clone(), &mdp)?;
        match &self.base_distributions {
            Some(raw) => {
                let dists = raw
                    .iter()
                    .map(|p| Distribution::new(p.clone()))
                    .collect::<Result<Vec<_>>>()?;
                PolicyFamily::with_distributions(
                    mdp,
                    self.diff_states.clone(),
                    words,
                    shared,
                    dists,
                )
            }
            None => PolicyFamily::new(mdp, self.diff_states.clone(), words, shared),
        }
    }
}

fn resolve(base_dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Distribution payload printed by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionOutput {
    pub probs: Vec<f64>,
    pub method: String,
    pub residual: f64,
}

pub fn load_mdp(path: &Path) -> Result<Mdp> {
    let text = fs::read_to_string(path)?;
    let file: MdpFile = serde_json::from_str(&text)?;
    file.to_mdp()
}

pub fn load_family(path: &Path) -> Result<PolicyFamily> {
    let text = fs::read_to_string(path)?;
    let file: FamilyFile = serde_json::from_str(&text)?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    file.to_family(base_dir)
}

pub fn save_mdp(path: &Path, mdp: &Mdp, gen_meta: Option<GenMeta>) -> Result<()> {
    let mut file = MdpFile::from_mdp(mdp);
    file.gen_meta = gen_meta;
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn save_family(path: &Path, family: &PolicyFamily, gen_meta: Option<GenMeta>) -> Result<()> {
    let file = FamilyFile::from_family(family, gen_meta);
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}
