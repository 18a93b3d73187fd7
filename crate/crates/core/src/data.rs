//! Grouped observational data: one record per group holding covariates,
//! treatments and outcomes of its members, plus long-format CSV I/O.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed data for a single group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub id: String,
    /// Row `j` holds the covariates of member `j`.
    pub covariates: Vec<Vec<f64>>,
    pub treatments: Vec<u8>,
    pub outcomes: Vec<f64>,
}

impl GroupRecord {
    pub fn new(
        id: impl Into<String>,
        covariates: Vec<Vec<f64>>,
        treatments: Vec<u8>,
        outcomes: Vec<f64>,
    ) -> Self {
        GroupRecord {
            id: id.into(),
            covariates,
            treatments,
            outcomes,
        }
    }

    pub fn size(&self) -> usize {
        self.treatments.len()
    }

    fn violations(&self, p: usize, out: &mut Vec<String>) {
        let n = self.treatments.len();
        if n == 0 {
            out.push(format!("group {}: no members", self.id));
        }
        if self.covariates.len() != n || self.outcomes.len() != n {
            out.push(format!(
                "group {}: row counts differ (covariates {}, treatments {}, outcomes {})",
                self.id,
                self.covariates.len(),
                n,
                self.outcomes.len()
            ));
        }
        if let Some(j) = self.treatments.iter().position(|&a| a > 1) {
            out.push(format!(
                "group {}: treatment of member {} is {}, expected 0 or 1",
                self.id, j, self.treatments[j]
            ));
        }
        if let Some(j) = self.covariates.iter().position(|row| row.len() != p) {
            out.push(format!(
                "group {}: member {} has {} covariates, expected {}",
                self.id,
                j,
                self.covariates[j].len(),
                p
            ));
        }
        if self
            .covariates
            .iter()
            .flatten()
            .chain(self.outcomes.iter())
            .any(|v| !v.is_finite())
        {
            out.push(format!(
                "group {}: non-finite covariate or outcome",
                self.id
            ));
        }
    }
}

/// A collection of groups sharing one covariate layout.
///
/// Groups are kept sorted by id so population sums have a fixed order no
/// matter how the input was arranged.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    groups: Vec<GroupRecord>,
    covariate_names: Vec<String>,
}

impl Study {
    pub fn new(mut groups: Vec<GroupRecord>, covariate_names: Vec<String>) -> Self {
        groups.sort_by(|a, b| a.id.cmp(&b.id));
        Study {
            groups,
            covariate_names,
        }
    }

    pub fn groups(&self) -> &[GroupRecord] {
        &self.groups
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_individuals(&self) -> usize {
        self.groups.iter().map(GroupRecord::size).sum()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }
}

/// Checks every group and study invariant, reporting all violations at once.
pub fn validate_study(study: &Study) -> Result<()> {
    let mut report = Vec::new();
    if study.groups.is_empty() {
        report.push("study has no groups".to_string());
    }
    let p = study.covariate_names.len();
    let mut seen = HashSet::new();
    for g in &study.groups {
        if !seen.insert(g.id.as_str()) {
            report.push(format!("duplicate group id {}", g.id));
        }
        g.violations(p, &mut report);
    }
    if report.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(report))
    }
}

/// Counterfactual allocation policy: everyone treated independently with
/// probability `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Policy(f64);

impl Policy {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Policy(alpha))
        } else {
            Err(Error::InvalidArgument(format!(
                "policy alpha must lie in (0, 1), got {alpha}"
            )))
        }
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Policy {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Policy::new(v)
    }
}

impl From<Policy> for f64 {
    fn from(p: Policy) -> f64 {
        p.0
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EffectKind {
    DE,
    IE,
    TE,
    OE,
}

impl EffectKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DE" => Ok(EffectKind::DE),
            "IE" => Ok(EffectKind::IE),
            "TE" => Ok(EffectKind::TE),
            "OE" => Ok(EffectKind::OE),
            other => Err(Error::Config(format!("unknown effect kind {other}"))),
        }
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EffectKind::DE => "DE",
            EffectKind::IE => "IE",
            EffectKind::TE => "TE",
            EffectKind::OE => "OE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectRequest {
    pub kind: EffectKind,
    pub alpha1: Policy,
    pub alpha0: Policy,
}

impl EffectRequest {
    pub fn direct(alpha: Policy) -> Self {
        EffectRequest {
            kind: EffectKind::DE,
            alpha1: alpha,
            alpha0: alpha,
        }
    }

    pub fn new(kind: EffectKind, alpha1: Policy, alpha0: Policy) -> Self {
        match kind {
            EffectKind::DE => Self::direct(alpha1),
            _ => EffectRequest {
                kind,
                alpha1,
                alpha0,
            },
        }
    }
}

/// Column names of the long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub group: String,
    pub treatment: String,
    pub outcome: String,
    /// `None` selects every remaining column as a covariate.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            group: "group".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            covariates: None,
        }
    }
}

/// Reads a long-format CSV (one row per individual) into a study.
///
/// Row indices in errors are 1-based data rows (the header is row 0).
/// Study-level invariants such as `k >= 1` are left to [`validate_study`].
pub fn load_study(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Study> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_study(file, schema)
}

pub fn read_study<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Study> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))
    };
    let gcol = find(&schema.group)?;
    let acol = find(&schema.treatment)?;
    let ycol = find(&schema.outcome)?;
    let (cov_names, cov_cols): (Vec<String>, Vec<usize>) = match &schema.covariates {
        Some(names) => {
            let mut cols = Vec::with_capacity(names.len());
            for n in names {
                cols.push(find(n)?);
            }
            (names.clone(), cols)
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != gcol && *i != acol && *i != ycol)
            .map(|(i, h)| (h.trim().to_string(), i))
            .unzip(),
    };

    let mut by_group: BTreeMap<String, GroupRecord> = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx + 1;
        let cell = |col: usize| rec.get(col).unwrap_or("").trim();
        let gid = cell(gcol).to_string();
        let a = match cell(acol) {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::Validation(vec![format!(
                    "row {row}: treatment value {other:?} is not 0 or 1"
                )]))
            }
        };
        let parse = |col: usize, name: &str| -> Result<f64> {
            let s = cell(col);
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    row,
                    column: name.to_string(),
                    message: format!("{s:?} is not a finite number"),
                }),
            }
        };
        let y = parse(ycol, &schema.outcome)?;
        let x = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, n)| parse(c, n))
            .collect::<Result<Vec<_>>>()?;
        let g = by_group
            .entry(gid.clone())
            .or_insert_with(|| GroupRecord::new(gid, Vec::new(), Vec::new(), Vec::new()));
        g.covariates.push(x);
        g.treatments.push(a);
        g.outcomes.push(y);
    }
    Ok(Study::new(by_group.into_values().collect(), cov_names))
}

/// Writes a study in the same long format accepted by [`load_study`].
pub fn save_study(study: &Study, path: impl AsRef<Path>, schema: &CsvSchema) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_study(study, file, schema)
}

pub fn write_study<W: std::io::Write>(study: &Study, writer: W, schema: &CsvSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let cov_names: Vec<String> = schema
        .covariates
        .clone()
        .unwrap_or_else(|| study.covariate_names.clone());
    let mut header = vec![
        schema.group.clone(),
        schema.treatment.clone(),
        schema.outcome.clone(),
    ];
    header.extend(cov_names.iter().cloned());
    w.write_record(&header)?;
    for g in &study.groups {
        for j in 0..g.size() {
            // `{}` on f64 is the shortest representation that round-trips.
            let mut rec = vec![
                g.id.clone(),
                g.treatments[j].to_string(),
                format!("{}", g.outcomes[j]),
            ];
            rec.extend(g.covariates[j].iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
