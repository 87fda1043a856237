use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::rng;

/// Deterministic partition of a dataset into labelled and unlabelled ids.
///
/// The on-disk form is a header line `fraction=<f> seed=<s>` followed by
/// `S <id>` lines and then `U <id>` lines, each group sorted. `dataset_id` is a
/// digest of the sorted id set, so it survives the round trip without being
/// stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub dataset_id: String,
    pub fraction: f64,
    pub seed: u64,
    pub supervised_ids: Vec<String>,
    pub unsupervised_ids: Vec<String>,
}

fn dataset_digest<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut sorted: Vec<&str> = ids.collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn make_supervision_split(
    records: &[ImageRecord],
    fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    split_ids(&ids, fraction, seed)
}

pub fn split_ids(ids: &[&str], fraction: f64, seed: u64) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut sorted: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("duplicate image ids".into()));
    }
    let n_sup = (fraction * sorted.len() as f64).round() as usize;
    if n_sup == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} images selects no labelled image; burn-in needs at least one",
            sorted.len()
        )));
    }
    let mut shuffled = sorted.clone();
    shuffled.shuffle(&mut rng::stream(seed, "split", 0));
    let mut supervised_ids = shuffled[..n_sup].to_vec();
    let mut unsupervised_ids = shuffled[n_sup..].to_vec();
    supervised_ids.sort();
    unsupervised_ids.sort();
    Ok(SplitManifest {
        dataset_id: dataset_digest(sorted.iter().map(String::as_str)),
        fraction,
        seed,
        supervised_ids,
        unsupervised_ids,
    })
}

impl SplitManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("fraction={} seed={}\n", self.fraction, self.seed);
        for id in &self.supervised_ids {
            writeln!(out, "S {id}").unwrap();
        }
        for id in &self.unsupervised_ids {
            writeln!(out, "U {id}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("header", "empty file"))?;
        let mut fraction = None;
        let mut seed = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("fraction", v)) => {
                    fraction = Some(v.parse::<f64>().map_err(|e| Error::parse("fraction", e.to_string()))?)
                }
                Some(("seed", v)) => {
                    seed = Some(v.parse::<u64>().map_err(|e| Error::parse("seed", e.to_string()))?)
                }
                _ => return Err(Error::parse("header", format!("unexpected field `{field}`"))),
            }
        }
        let fraction = fraction.ok_or_else(|| Error::parse("fraction", "missing"))?;
        let seed = seed.ok_or_else(|| Error::parse("seed", "missing"))?;
        let mut supervised_ids = Vec::new();
        let mut unsupervised_ids = Vec::new();
        for (i, line) in lines.enumerate() {
            match line.split_once(' ') {
                Some(("S", id)) => supervised_ids.push(id.to_string()),
                Some(("U", id)) => unsupervised_ids.push(id.to_string()),
                _ if line.is_empty() => {}
                _ => {
                    return Err(Error::parse(
                        format!("line {}", i + 2),
                        "expected `S <id>` or `U <id>`",
                    ))
                }
            }
        }
        let manifest = SplitManifest {
            dataset_id: dataset_digest(
                supervised_ids
                    .iter()
                    .chain(&unsupervised_ids)
                    .map(String::as_str),
            ),
            fraction,
            seed,
            supervised_ids,
            unsupervised_ids,
        };
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        let sorted = |v: &[String]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.supervised_ids) || !sorted(&self.unsupervised_ids) {
            return Err(Error::Validation("split ids must be sorted and unique".into()));
        }
        let mut all: Vec<&String> = self.supervised_ids.iter().chain(&self.unsupervised_ids).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("an id is both supervised and unsupervised".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.supervised_ids.len() + self.unsupervised_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
