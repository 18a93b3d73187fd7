//! Declarative regressor maps shared by the propensity and outcome models.
//!
//! A map is a list of terms; each term is a product of factors. Grammar of a
//! single term string (factors joined by `*`):
//!
//! | token          | meaning                                               |
//! |----------------|-------------------------------------------------------|
//! | `1`            | intercept (the empty product)                         |
//! | `A`            | own treatment `A_ij`                                  |
//! | `prop`         | proportion treated in the group, member `j` included  |
//! | `nsum`         | number of treated neighbours                          |
//! | `nmean`        | proportion treated among neighbours (0 when alone)    |
//! | `nb(k)`        | treatment of the k-th neighbour (1-based, skipping j) |
//! | `name`         | covariate `name`                                      |
//! | `abs(name)`    | absolute value of covariate `name`                    |
//!
//! `neighbors(n)` is sugar for the `n` terms `nb(1)` .. `nb(n)`.

use std::fmt::Write as _;

use crate::data::GroupRecord;
use crate::error::{Error, Result};
use crate::policy::Slot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    Own,
    Prop,
    NeighborSum,
    NeighborMean,
    Neighbor(usize),
    AbsCovariate(usize),
    Covariate(usize),
}

impl Factor {
    fn depends_on_neighbors(self) -> bool {
        matches!(
            self,
            Factor::Prop | Factor::NeighborSum | Factor::NeighborMean | Factor::Neighbor(_)
        )
    }

    fn depends_on_treatment(self) -> bool {
        self == Factor::Own || self.depends_on_neighbors()
    }
}

/// Product of factors, kept sorted; the empty product is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term(Vec<Factor>);

impl Term {
    pub fn intercept() -> Self {
        Term(Vec::new())
    }

    pub fn new(mut factors: Vec<Factor>) -> Self {
        factors.sort();
        Term(factors)
    }

    pub fn factors(&self) -> &[Factor] {
        &self.0
    }

    pub fn is_intercept(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    terms: Vec<Term>,
    covariate_names: Vec<String>,
}

impl FeatureMap {
    pub fn new(terms: Vec<Term>, covariate_names: Vec<String>) -> Result<Self> {
        let n_intercepts = terms.iter().filter(|t| t.is_intercept()).count();
        if n_intercepts != 1 {
            return Err(Error::FeatureMap(format!(
                "a feature map needs exactly one intercept term, found {n_intercepts}"
            )));
        }
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].contains(t) {
                return Err(Error::FeatureMap(format!(
                    "duplicate term {}",
                    render(t, &covariate_names)
                )));
            }
            for f in &t.0 {
                if let Factor::Covariate(c) | Factor::AbsCovariate(c) = f {
                    if *c >= covariate_names.len() {
                        return Err(Error::FeatureMap(format!(
                            "covariate index {c} out of range"
                        )));
                    }
                }
            }
        }
        Ok(FeatureMap {
            terms,
            covariate_names,
        })
    }

    pub fn parse<S: AsRef<str>>(specs: &[S], covariate_names: &[String]) -> Result<Self> {
        let mut terms = Vec::new();
        for s in specs {
            terms.extend(parse_term(s.as_ref(), covariate_names)?);
        }
        FeatureMap::new(terms, covariate_names.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms
            .iter()
            .map(|t| render(t, &self.covariate_names))
            .collect()
    }

    pub fn intercept_index(&self) -> usize {
        self.terms.iter().position(Term::is_intercept).unwrap()
    }

    pub fn uses_treatment(&self) -> bool {
        self.terms
            .iter()
            .any(|t| t.0.iter().any(|f| f.depends_on_treatment()))
    }

    /// True when, with own treatment held fixed, every term is affine in the
    /// neighbours' treatments (at most one neighbour-dependent factor each).
    pub fn affine_in_neighbors(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.0.iter().filter(|f| f.depends_on_neighbors()).count() <= 1)
    }

    /// True when every term has at most one treatment-dependent factor, so a
    /// policy average over the full treatment vector has a closed form.
    pub fn affine_in_treatments(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.0.iter().filter(|f| f.depends_on_treatment()).count() <= 1)
    }

    pub fn affine_for(&self, slot: Slot) -> bool {
        match slot {
            Slot::Conditional(_) => self.affine_in_neighbors(),
            Slot::Marginal => self.affine_in_treatments(),
        }
    }

    /// Largest `k` among `nb(k)` factors.
    pub fn max_neighbor_position(&self) -> usize {
        self.terms
            .iter()
            .flat_map(|t| t.0.iter())
            .filter_map(|f| match f {
                Factor::Neighbor(k) => Some(k + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn check_group(&self, group: &GroupRecord) -> Result<()> {
        let need = self.max_neighbor_position();
        if need > 0 && group.size() < need + 1 {
            return Err(Error::FeatureMap(format!(
                "group {} has {} members but the map uses nb({need})",
                group.id,
                group.size()
            )));
        }
        Ok(())
    }

    /// Regressor row of member `j` under the treatment vector `t`.
    pub fn row_into(&self, group: &GroupRecord, j: usize, t: &[u8], out: &mut [f64]) {
        let n = t.len();
        let treated: u32 = t.iter().map(|&v| v as u32).sum();
        let own = t[j] as f64;
        let x = &group.covariates[j];
        for (o, term) in out.iter_mut().zip(&self.terms) {
            let mut v = 1.0;
            for f in &term.0 {
                v *= match *f {
                    Factor::Own => own,
                    Factor::Prop => treated as f64 / n as f64,
                    Factor::NeighborSum => treated as f64 - own,
                    Factor::NeighborMean => {
                        if n > 1 {
                            (treated as f64 - own) / (n - 1) as f64
                        } else {
                            0.0
                        }
                    }
                    Factor::Neighbor(k) => {
                        let pos = if k < j { k } else { k + 1 };
                        t[pos] as f64
                    }
                    Factor::Covariate(c) => x[c],
                    Factor::AbsCovariate(c) => x[c].abs(),
                };
            }
            *o = v;
        }
    }

    pub fn row(&self, group: &GroupRecord, j: usize, t: &[u8]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.row_into(group, j, t, &mut out);
        out
    }

    /// Expected regressor row when treatments follow the policy. Only exact
    /// when the map is affine for `slot`.
    pub fn expected_row_into(
        &self,
        group: &GroupRecord,
        j: usize,
        slot: Slot,
        alpha: f64,
        out: &mut [f64],
    ) {
        let n = group.size() as f64;
        let own = match slot {
            Slot::Conditional(a) => a as f64,
            Slot::Marginal => alpha,
        };
        let x = &group.covariates[j];
        for (o, term) in out.iter_mut().zip(&self.terms) {
            let mut v = 1.0;
            for f in &term.0 {
                v *= match *f {
                    Factor::Own => own,
                    Factor::Prop => (own + (n - 1.0) * alpha) / n,
                    Factor::NeighborSum => (n - 1.0) * alpha,
                    Factor::NeighborMean => {
                        if n > 1.0 {
                            alpha
                        } else {
                            0.0
                        }
                    }
                    Factor::Neighbor(_) => alpha,
                    Factor::Covariate(c) => x[c],
                    Factor::AbsCovariate(c) => x[c].abs(),
                };
            }
            *o = v;
        }
    }

    /// The map restricted to members whose own treatment equals `a`: the `A`
    /// factor is replaced by its value, vanishing terms are dropped and
    /// duplicates merged.
    pub fn specialize_own(&self, a: u8) -> FeatureMap {
        let mut terms: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let has_own = t.0.contains(&Factor::Own);
            if has_own && a == 0 {
                continue;
            }
            let reduced = Term(t.0.iter().copied().filter(|f| *f != Factor::Own).collect());
            if !terms.contains(&reduced) {
                terms.push(reduced);
            }
        }
        FeatureMap {
            terms,
            covariate_names: self.covariate_names.clone(),
        }
    }
}

fn render(t: &Term, names: &[String]) -> String {
    if t.is_intercept() {
        return "1".to_string();
    }
    let mut s = String::new();
    for (i, f) in t.0.iter().enumerate() {
        if i > 0 {
            s.push('*');
        }
        match f {
            Factor::Own => s.push('A'),
            Factor::Prop => s.push_str("prop"),
            Factor::NeighborSum => s.push_str("nsum"),
            Factor::NeighborMean => s.push_str("nmean"),
            Factor::Neighbor(k) => {
                let _ = write!(s, "nb({})", k + 1);
            }
            Factor::Covariate(c) => s.push_str(&names[*c]),
            Factor::AbsCovariate(c) => {
                let _ = write!(s, "abs({})", names[*c]);
            }
        }
    }
    s
}

fn parse_term(spec: &str, names: &[String]) -> Result<Vec<Term>> {
    let spec = spec.trim();
    if let Some(inner) = spec
        .strip_prefix("neighbors(")
        .and_then(|r| r.strip_suffix(')'))
    {
        let n: usize = inner
            .trim()
            .parse()
            .map_err(|_| Error::FeatureMap(format!("bad neighbour count in {spec:?}")))?;
        return Ok((0..n).map(|k| Term(vec![Factor::Neighbor(k)])).collect());
    }
    if spec == "1" || spec == "intercept" {
        return Ok(vec![Term::intercept()]);
    }
    let mut factors = Vec::new();
    for tok in spec.split('*') {
        factors.push(parse_factor(tok.trim(), names)?);
    }
    Ok(vec![Term::new(factors)])
}

fn covariate(name: &str, names: &[String]) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::FeatureMap(format!("unknown covariate {name:?}")))
}

fn parse_factor(tok: &str, names: &[String]) -> Result<Factor> {
    match tok {
        "A" | "treat" => return Ok(Factor::Own),
        "prop" => return Ok(Factor::Prop),
        "nsum" | "neighbor_sum" => return Ok(Factor::NeighborSum),
        "nmean" | "neighbor_mean" => return Ok(Factor::NeighborMean),
        "" => return Err(Error::FeatureMap("empty factor".into())),
        _ => {}
    }
    if let Some(inner) = tok.strip_prefix("abs(").and_then(|r| r.strip_suffix(')')) {
        return Ok(Factor::AbsCovariate(covariate(inner.trim(), names)?));
    }
    if let Some(inner) = tok.strip_prefix("nb(").and_then(|r| r.strip_suffix(')')) {
        let k: usize = inner
            .trim()
            .parse()
            .map_err(|_| Error::FeatureMap(format!("bad neighbour index in {tok:?}")))?;
        if k == 0 {
            return Err(Error::FeatureMap("nb(k) is 1-based".into()));
        }
        return Ok(Factor::Neighbor(k - 1));
    }
    Ok(Factor::Covariate(covariate(tok, names)?))
}
