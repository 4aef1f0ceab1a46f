//! Longitudinal panel storage, CSV ingestion and the individual-level split.
//!
//! A [`PanelDataset`] is a rectangular `N x T` grid of decision points. Every
//! cell carries a covariate vector, a binary action, an observed outcome and
//! the (known) propensity of the action. Synthetic panels additionally carry
//! both potential outcomes so that coverage of the true treatment effect can
//! be measured.
//!
//! Decision points are addressed 1-based (`1..=T`) throughout the public API.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::{fmt_f64, write_atomic};

/// Stream id reserved for the individual shuffle in [`split`].
const SPLIT_STREAM: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub control: Vec<f64>,
    pub treated: Vec<f64>,
}

/// Raw columns used to assemble a [`PanelDataset`]. All per-cell vectors are
/// stored individual-major: index `i * T + (j - 1)`; covariates add a
/// trailing `P` axis.
#[derive(Debug, Clone, Default)]
pub struct PanelParts {
    pub n_individuals: usize,
    pub n_points: usize,
    pub n_covariates: usize,
    pub labels: Option<Vec<String>>,
    pub covariates: Vec<f64>,
    pub actions: Vec<u8>,
    pub outcomes: Vec<f64>,
    pub propensities: Vec<f64>,
    pub potential: Option<PotentialOutcomes>,
}

/// Immutable longitudinal dataset; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    n_individuals: usize,
    n_points: usize,
    n_covariates: usize,
    labels: Vec<String>,
    covariates: Vec<f64>,
    actions: Vec<u8>,
    outcomes: Vec<f64>,
    propensities: Vec<f64>,
    potential: Option<PotentialOutcomes>,
    true_ite: Option<Vec<f64>>,
}

impl PanelDataset {
    pub fn new(parts: PanelParts) -> Result<Self> {
        let PanelParts {
            n_individuals,
            n_points,
            n_covariates,
            labels,
            covariates,
            actions,
            outcomes,
            propensities,
            potential,
        } = parts;
        if n_individuals == 0 || n_points == 0 {
            return Err(Error::Schema("panel must have at least one individual and one decision point".into()));
        }
        let cells = n_individuals * n_points;
        let labels = labels.unwrap_or_else(|| (0..n_individuals).map(|i| i.to_string()).collect());
        if labels.len() != n_individuals {
            return Err(Error::Schema(format!("expected {n_individuals} labels, got {}", labels.len())));
        }
        check_len("covariates", covariates.len(), cells * n_covariates)?;
        check_len("actions", actions.len(), cells)?;
        check_len("outcomes", outcomes.len(), cells)?;
        check_len("propensities", propensities.len(), cells)?;

        let cell_of = |k: usize| (labels[k / n_points].clone(), k % n_points + 1);
        for (k, &a) in actions.iter().enumerate() {
            if a > 1 {
                let (individual, point) = cell_of(k);
                return Err(Error::Schema(format!("action {a} at ({individual},{point}) is not binary")));
            }
        }
        for (k, &p) in propensities.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                let (individual, point) = cell_of(k);
                return Err(Error::Positivity { individual, point, value: p });
            }
        }
        if covariates.iter().chain(&outcomes).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates and outcomes must be finite".into()));
        }

        let true_ite = match &potential {
            Some(po) => {
                check_len("control potential outcomes", po.control.len(), cells)?;
                check_len("treated potential outcomes", po.treated.len(), cells)?;
                for k in 0..cells {
                    let selected = if actions[k] == 1 { po.treated[k] } else { po.control[k] };
                    if selected.to_bits() != outcomes[k].to_bits() {
                        let (individual, point) = cell_of(k);
                        return Err(Error::Schema(format!(
                            "consistency violated at ({individual},{point}): outcome {} but selected potential outcome {selected}",
                            outcomes[k]
                        )));
                    }
                }
                Some(po.treated.iter().zip(&po.control).map(|(y1, y0)| y1 - y0).collect())
            }
            None => None,
        };

        Ok(Self {
            n_individuals,
            n_points,
            n_covariates,
            labels,
            covariates,
            actions,
            outcomes,
            propensities,
            potential,
            true_ite,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    #[inline]
    fn cell(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n_individuals && j >= 1 && j <= self.n_points, "cell ({i},{j}) out of range");
        i * self.n_points + (j - 1)
    }

    /// Covariate vector `X_ij`.
    #[inline]
    pub fn covariates(&self, i: usize, j: usize) -> &[f64] {
        let start = self.cell(i, j) * self.n_covariates;
        &self.covariates[start..start + self.n_covariates]
    }

    #[inline]
    pub fn action(&self, i: usize, j: usize) -> u8 {
        self.actions[self.cell(i, j)]
    }

    /// `A_{i,j-1}`, with `A_{i,0} = 0`.
    #[inline]
    pub fn previous_action(&self, i: usize, j: usize) -> u8 {
        if j <= 1 {
            0
        } else {
            self.action(i, j - 1)
        }
    }

    #[inline]
    pub fn outcome(&self, i: usize, j: usize) -> f64 {
        self.outcomes[self.cell(i, j)]
    }

    #[inline]
    pub fn propensity(&self, i: usize, j: usize) -> f64 {
        self.propensities[self.cell(i, j)]
    }

    pub fn has_potential_outcomes(&self) -> bool {
        self.potential.is_some()
    }

    pub fn potential_outcome(&self, i: usize, j: usize, arm: u8) -> Option<f64> {
        let k = self.cell(i, j);
        self.potential
            .as_ref()
            .map(|po| if arm == 1 { po.treated[k] } else { po.control[k] })
    }

    /// `Y_ij(1) - Y_ij(0)` when potential outcomes are known.
    pub fn true_ite(&self, i: usize, j: usize) -> Option<f64> {
        let k = self.cell(i, j);
        self.true_ite.as_ref().map(|t| t[k])
    }

    /// Copy of the panel with replaced observed outcomes. Potential outcomes
    /// are dropped since they would no longer be consistent.
    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        Self::new(PanelParts {
            n_individuals: self.n_individuals,
            n_points: self.n_points,
            n_covariates: self.n_covariates,
            labels: Some(self.labels.clone()),
            covariates: self.covariates.clone(),
            actions: self.actions.clone(),
            outcomes,
            propensities: self.propensities.clone(),
            potential: None,
        })
    }

    /// Attaches potential outcomes, enforcing consistency with the observed outcomes.
    pub fn with_potential_outcomes(self, potential: PotentialOutcomes) -> Result<Self> {
        Self::new(PanelParts {
            n_individuals: self.n_individuals,
            n_points: self.n_points,
            n_covariates: self.n_covariates,
            labels: Some(self.labels),
            covariates: self.covariates,
            actions: self.actions,
            outcomes: self.outcomes,
            propensities: self.propensities,
            potential: Some(potential),
        })
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Writes the panel in the ingestion format (`individual_id, decision_point,
    /// action, outcome, propensity, x1..xP`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.n_individuals * self.n_points * (self.n_covariates + 5) * 20);
        buf.extend_from_slice(b"individual_id,decision_point,action,outcome,propensity");
        for p in 1..=self.n_covariates {
            write!(buf, ",x{p}").unwrap();
        }
        buf.push(b'\n');
        for i in 0..self.n_individuals {
            for j in 1..=self.n_points {
                write!(
                    buf,
                    "{},{},{},{},{}",
                    self.labels[i],
                    j,
                    self.action(i, j),
                    fmt_f64(self.outcome(i, j)),
                    fmt_f64(self.propensity(i, j))
                )
                .unwrap();
                for x in self.covariates(i, j) {
                    write!(buf, ",{}", fmt_f64(*x)).unwrap();
                }
                buf.push(b'\n');
            }
        }
        write_atomic(path, &buf)
    }

    /// Writes the potential-outcome sidecar (`individual_id, decision_point, y0, y1`).
    /// Does nothing useful for real data; returns a schema error there.
    pub fn write_potential_outcomes_csv(&self, path: &Path) -> Result<()> {
        let po = self
            .potential
            .as_ref()
            .ok_or_else(|| Error::Schema("panel has no potential outcomes".into()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(b"individual_id,decision_point,y0,y1\n");
        for i in 0..self.n_individuals {
            for j in 1..=self.n_points {
                let k = self.cell(i, j);
                writeln!(buf, "{},{},{},{}", self.labels[i], j, fmt_f64(po.control[k]), fmt_f64(po.treated[k])).unwrap();
            }
        }
        write_atomic(path, &buf)
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Schema(format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

/// Which covariate columns to expect when loading a panel.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColumnSchema {
    /// `Some(P)` requires exactly `x1..xP`; `None` detects the contiguous run.
    pub n_covariates: Option<usize>,
}

struct RawTable {
    header: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let header = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .enumerate()
        .map(|(k, name)| (name.trim().to_string(), k))
        .collect();
    let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>().map_err(csv_err)?;
    Ok(RawTable { header, rows })
}

impl RawTable {
    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }
}

fn parse_f64(field: &str, column: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Schema(format!("row {line}: column `{column}` value `{field}` is not a number")))
}

fn parse_point(field: &str, line: usize) -> Result<usize> {
    match field.trim().parse::<usize>() {
        Ok(j) if j >= 1 => Ok(j),
        _ => Err(Error::Schema(format!(
            "row {line}: decision_point `{field}` is not a positive integer"
        ))),
    }
}

/// Loads a complete rectangular panel from CSV.
///
/// Individuals are re-indexed densely in order of first appearance; the
/// original ids are kept as labels. Decision points must cover `1..=T`.
pub fn load_csv(path: &Path, schema: ColumnSchema) -> Result<PanelDataset> {
    let table = read_table(path)?;
    let id_col = table.column("individual_id")?;
    let point_col = table.column("decision_point")?;
    let action_col = table.column("action")?;
    let outcome_col = table.column("outcome")?;
    let prop_col = table.column("propensity")?;
    let n_covariates = match schema.n_covariates {
        Some(p) => p,
        None => (1..).take_while(|p| table.header.contains_key(&format!("x{p}"))).count(),
    };
    let x_cols = (1..=n_covariates)
        .map(|p| table.column(&format!("x{p}")))
        .collect::<Result<Vec<_>>>()?;

    let mut index_of: HashMap<String, usize> = HashMap::new();
    let mut labels: Vec<String> = Vec::new();
    let mut n_points = 0usize;
    let mut parsed = Vec::with_capacity(table.rows.len());
    for (r, row) in table.rows.iter().enumerate() {
        let line = r + 2;
        let label = row.get(id_col).unwrap_or("").trim().to_string();
        if label.is_empty() {
            return Err(Error::Schema(format!("row {line}: empty individual_id")));
        }
        let i = *index_of.entry(label.clone()).or_insert_with(|| {
            labels.push(label);
            labels.len() - 1
        });
        let j = parse_point(row.get(point_col).unwrap_or(""), line)?;
        n_points = n_points.max(j);
        parsed.push((i, j, line));
    }
    let n_individuals = labels.len();
    if n_individuals == 0 {
        return Err(Error::Schema("no data rows".into()));
    }

    let cells = n_individuals * n_points;
    let mut seen = vec![false; cells];
    let mut covariates = vec![0.0; cells * n_covariates];
    let mut actions = vec![0u8; cells];
    let mut outcomes = vec![0.0; cells];
    let mut propensities = vec![0.0; cells];
    for (row, &(i, j, line)) in table.rows.iter().zip(&parsed) {
        let k = i * n_points + (j - 1);
        if seen[k] {
            return Err(Error::Schema(format!("duplicate row for ({},{})", labels[i], j)));
        }
        seen[k] = true;
        actions[k] = match row.get(action_col).unwrap_or("").trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Schema(format!("row {line}: action `{other}` is not binary"))),
        };
        outcomes[k] = parse_f64(row.get(outcome_col).unwrap_or(""), "outcome", line)?;
        let p = parse_f64(row.get(prop_col).unwrap_or(""), "propensity", line)?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Positivity { individual: labels[i].clone(), point: j, value: p });
        }
        propensities[k] = p;
        for (p, &c) in x_cols.iter().enumerate() {
            covariates[k * n_covariates + p] = parse_f64(row.get(c).unwrap_or(""), &format!("x{}", p + 1), line)?;
        }
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::IncompletePanel {
            individual: labels[k / n_points].clone(),
            point: k % n_points + 1,
        });
    }

    PanelDataset::new(PanelParts {
        n_individuals,
        n_points,
        n_covariates,
        labels: Some(labels),
        covariates,
        actions,
        outcomes,
        propensities,
        potential: None,
    })
}

/// Loads a potential-outcome sidecar and attaches it to `data`.
pub fn load_potential_outcomes(path: &Path, data: PanelDataset) -> Result<PanelDataset> {
    let table = read_table(path)?;
    let id_col = table.column("individual_id")?;
    let point_col = table.column("decision_point")?;
    let y0_col = table.column("y0")?;
    let y1_col = table.column("y1")?;
    let index_of: HashMap<&str, usize> = data.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let cells = data.n_individuals * data.n_points;
    let mut control = vec![f64::NAN; cells];
    let mut treated = vec![f64::NAN; cells];
    for (r, row) in table.rows.iter().enumerate() {
        let line = r + 2;
        let label = row.get(id_col).unwrap_or("").trim();
        let i = *index_of
            .get(label)
            .ok_or_else(|| Error::Schema(format!("row {line}: unknown individual `{label}`")))?;
        let j = parse_point(row.get(point_col).unwrap_or(""), line)?;
        if j > data.n_points {
            return Err(Error::Schema(format!("row {line}: decision point {j} beyond T={}", data.n_points)));
        }
        let k = i * data.n_points + (j - 1);
        control[k] = parse_f64(row.get(y0_col).unwrap_or(""), "y0", line)?;
        treated[k] = parse_f64(row.get(y1_col).unwrap_or(""), "y1", line)?;
    }
    if let Some(k) = control.iter().position(|v| v.is_nan()) {
        return Err(Error::IncompletePanel {
            individual: data.labels[k / data.n_points].clone(),
            point: k % data.n_points + 1,
        });
    }
    data.with_potential_outcomes(PotentialOutcomes { control, treated })
}

/// How many individuals go to training (the rest form the test set).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainSize {
    Fraction(f64),
    Count(usize),
}

/// The four disjoint individual sets used by the interval construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSplit {
    pub nuisance_ids: Vec<usize>,
    pub model_ids: Vec<usize>,
    pub calibration_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    /// Last decision point usable for fitting.
    pub train_horizon: usize,
}

/// Shuffles individuals with a seeded RNG and cuts the training share into
/// three near-equal groups. Splits are always by individual.
pub fn split(data: &PanelDataset, train: TrainSize, seed: u64, horizon: Option<usize>) -> Result<TrainingSplit> {
    let n = data.n_individuals();
    let n_train = match train {
        TrainSize::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("train_frac", format!("{f} is not in (0,1]")));
            }
            (f * n as f64).round() as usize
        }
        TrainSize::Count(c) => c,
    };
    if n_train > n {
        return Err(Error::config("train_count", format!("{n_train} exceeds the {n} individuals available")));
    }
    if n_train < 3 {
        return Err(Error::config(
            "train_frac",
            format!("{n_train} training individuals leaves an empty nuisance/model/calibration set"),
        ));
    }
    let train_horizon = horizon.unwrap_or(data.n_points());
    if train_horizon == 0 || train_horizon > data.n_points() {
        return Err(Error::config(
            "train_horizon",
            format!("{train_horizon} is outside 1..={}", data.n_points()),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);

    let base = n_train / 3;
    let extra = n_train % 3;
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(4);
    let mut start = 0;
    for g in 0..3 {
        let size = base + usize::from(g < extra);
        let mut ids = order[start..start + size].to_vec();
        ids.sort_unstable();
        groups.push(ids);
        start += size;
    }
    let mut test_ids = order[n_train..].to_vec();
    test_ids.sort_unstable();
    let calibration_ids = groups.pop().unwrap();
    let model_ids = groups.pop().unwrap();
    let nuisance_ids = groups.pop().unwrap();
    Ok(TrainingSplit {
        nuisance_ids,
        model_ids,
        calibration_ids,
        test_ids,
        train_horizon,
    })
}
