//! Database ranking and mean average precision under positive/ignore
//! groundtruth protocols.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::aggregation::Descriptor;
use crate::error::{AsdaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Database indices, most similar first.
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setup {
    /// easy positive; hard and unclear ignored.
    Easy,
    /// easy and hard positive; unclear ignored.
    Medium,
    /// hard positive; easy and unclear ignored.
    Hard,
    /// explicit positive and ignore lists.
    Custom,
}

impl FromStr for Setup {
    type Err = AsdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "E" | "EASY" => Ok(Setup::Easy),
            "M" | "MEDIUM" => Ok(Setup::Medium),
            "H" | "HARD" => Ok(Setup::Hard),
            "CUSTOM" | "C" => Ok(Setup::Custom),
            _ => Err(AsdaError::Invalid(format!("unknown evaluation setup `{s}`"))),
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Setup::Easy => "E",
            Setup::Medium => "M",
            Setup::Hard => "H",
            Setup::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalGroundTruth {
    pub query: String,
    pub positives: BTreeSet<usize>,
    pub ignore: BTreeSet<usize>,
    pub setup: Setup,
}

impl RetrievalGroundTruth {
    pub fn new(query: impl Into<String>, positives: BTreeSet<usize>, ignore: BTreeSet<usize>, setup: Setup) -> Result<Self> {
        if let Some(id) = positives.intersection(&ignore).next() {
            return Err(AsdaError::Invalid(format!("image {id} is both positive and ignored")));
        }
        Ok(RetrievalGroundTruth {
            query: query.into(),
            positives,
            ignore,
            setup,
        })
    }
}

/// Ranks the database by dot product with the query, ties broken by id.
pub fn rank_database(query: &Descriptor, db: &[Descriptor]) -> Result<Ranking> {
    if db.is_empty() {
        return Err(AsdaError::Invalid("empty database".into()));
    }
    if let Some(d) = db.iter().find(|d| d.dim() != query.dim()) {
        return Err(AsdaError::ShapeMismatch(format!(
            "database descriptor has {} dims, query has {}",
            d.dim(),
            query.dim()
        )));
    }
    let scores: Vec<f64> = db.iter().map(|d| query.dot(d)).collect();
    let mut ids: Vec<usize> = (0..db.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let scores = ids.iter().map(|&i| scores[i]).collect();
    Ok(Ranking { ids, scores })
}

/// Non-interpolated AP: ignored entries are dropped from the ranking, then
/// precision is averaged over the ranks of the positives.
pub fn average_precision(ranking: &Ranking, gt: &RetrievalGroundTruth) -> Result<f64> {
    if gt.positives.is_empty() {
        return Err(AsdaError::Invalid(format!("query `{}` has no positives", gt.query)));
    }
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for id in &ranking.ids {
        if gt.ignore.contains(id) {
            continue;
        }
        rank += 1;
        if gt.positives.contains(id) {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    Ok(sum / gt.positives.len() as f64)
}

pub fn mean_average_precision(rankings: &[Ranking], gts: &[RetrievalGroundTruth]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(AsdaError::Invalid("no queries to evaluate".into()));
    }
    if rankings.len() != gts.len() {
        return Err(AsdaError::ShapeMismatch(format!(
            "{} rankings for {} groundtruth records",
            rankings.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    for (r, g) in rankings.iter().zip(gts) {
        total += average_precision(r, g)?;
    }
    Ok(total / rankings.len() as f64)
}

/// Parses groundtruth text. Each non-comment line is a record of `|`-separated
/// fields, ids separated by whitespace:
///
/// ```text
/// # query | positives | ignore
/// q1 | img3 img7 | img9
/// # query | easy | hard | unclear     (for the E, M and H setups)
/// q2 | img1 | img4 img5 | img8
/// ```
///
/// Ids are resolved against `db_names`; `#` starts a comment.
pub fn load_groundtruth(source: &str, setup: Setup, db_names: &[String]) -> Result<Vec<RetrievalGroundTruth>> {
    let index: HashMap<&str, usize> = db_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut out = Vec::new();
    for (lineno, raw) in source.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        let parse_err = |message: String| AsdaError::Parse {
            line: line_no,
            message,
        };
        let query = fields[0];
        if query.is_empty() || query.split_whitespace().count() != 1 {
            return Err(parse_err(format!("expected a single query id, got `{query}`")));
        }
        let resolve = |field: &str| -> Result<BTreeSet<usize>> {
            field
                .split_whitespace()
                .map(|id| {
                    if id == query {
                        return Err(parse_err(format!("query `{query}` lists itself")));
                    }
                    index
                        .get(id)
                        .copied()
                        .ok_or_else(|| parse_err(format!("unknown database id `{id}`")))
                })
                .collect()
        };
        let expected = if setup == Setup::Custom { 3 } else { 4 };
        if fields.len() != expected {
            return Err(parse_err(format!(
                "setup {setup} expects {expected} `|`-separated fields, found {}",
                fields.len()
            )));
        }
        let (positives, ignore) = match setup {
            Setup::Custom => (resolve(fields[1])?, resolve(fields[2])?),
            _ => {
                let easy = resolve(fields[1])?;
                let hard = resolve(fields[2])?;
                let unclear = resolve(fields[3])?;
                match setup {
                    Setup::Easy => (easy, hard.union(&unclear).copied().collect()),
                    Setup::Medium => (easy.union(&hard).copied().collect(), unclear),
                    Setup::Hard => (hard, easy.union(&unclear).copied().collect()),
                    Setup::Custom => unreachable!(),
                }
            }
        };
        let gt = RetrievalGroundTruth::new(query, positives, ignore, setup).map_err(|e| parse_err(e.to_string()))?;
        out.push(gt);
    }
    Ok(out)
}
