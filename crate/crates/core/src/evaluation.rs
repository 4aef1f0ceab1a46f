//! Coverage and length summaries, and empirical dominance checks between
//! pseudo-outcome scores and oracle scores.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{IntervalBatch, IntervalRecord};
use crate::util::{fmt_f64, fmt_opt, parse_opt, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Overall,
    DecisionPoint,
}

/// Coverage (in percent) and average length for one group of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub group: String,
    /// `None` when no cell has a known true effect.
    pub cov_true: Option<f64>,
    pub cov_pseudo: f64,
    /// Mean length over bounded intervals; NaN when there are none.
    pub avg_length: f64,
    pub n_unbounded: usize,
    pub n_cells: usize,
    /// Intervals whose margins crossed; counted with length 0.
    pub n_collapsed: usize,
}

impl MetricsRow {
    fn from_records<'a>(group: String, records: impl Iterator<Item = &'a IntervalRecord>) -> Self {
        let mut n_cells = 0;
        let mut covered_pseudo = 0;
        let mut n_true = 0;
        let mut covered_true = 0;
        let mut n_unbounded = 0;
        let mut n_collapsed = 0;
        let mut length_sum = 0.0;
        for r in records {
            n_cells += 1;
            covered_pseudo += usize::from(r.covered_pseudo());
            if let Some(c) = r.covered_true() {
                n_true += 1;
                covered_true += usize::from(c);
            }
            if !r.interval.is_bounded() {
                n_unbounded += 1;
            } else if r.length() < 0.0 {
                n_collapsed += 1;
            } else {
                length_sum += r.length();
            }
        }
        let pct = |k: usize, n: usize| 100.0 * k as f64 / n as f64;
        let n_bounded = n_cells - n_unbounded;
        Self {
            group,
            cov_true: (n_true > 0).then(|| pct(covered_true, n_true)),
            cov_pseudo: if n_cells > 0 { pct(covered_pseudo, n_cells) } else { f64::NAN },
            avg_length: if n_bounded > 0 { length_sum / n_bounded as f64 } else { f64::NAN },
            n_unbounded,
            n_cells,
            n_collapsed,
        }
    }
}

/// Aggregates a batch overall or per decision point (ascending).
pub fn summarize(batch: &IntervalBatch, grouping: Grouping) -> Vec<MetricsRow> {
    match grouping {
        Grouping::Overall => vec![MetricsRow::from_records("overall".into(), batch.records.iter())],
        Grouping::DecisionPoint => {
            let mut points: Vec<usize> = batch.records.iter().map(|r| r.point).collect();
            points.sort_unstable();
            points.dedup();
            let mut by_point: Vec<Vec<&IntervalRecord>> = vec![Vec::new(); points.len()];
            for r in &batch.records {
                let k = points.binary_search(&r.point).expect("point collected above");
                by_point[k].push(r);
            }
            points
                .iter()
                .zip(by_point)
                .map(|(p, rs)| MetricsRow::from_records(p.to_string(), rs.into_iter()))
                .collect()
        }
    }
}

/// Cell-weighted pooled metrics over several rows (e.g. replicates).
pub fn pool_rows(group: &str, rows: &[MetricsRow]) -> MetricsRow {
    let n_cells: usize = rows.iter().map(|r| r.n_cells).sum();
    let n_unbounded: usize = rows.iter().map(|r| r.n_unbounded).sum();
    let weighted = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r) * r.n_cells as f64).sum::<f64>() / n_cells as f64;
    let bounded = |r: &MetricsRow| (r.n_cells - r.n_unbounded) as f64;
    let total_bounded: f64 = rows.iter().map(bounded).sum();
    let length_sum: f64 = rows.iter().filter(|r| !r.avg_length.is_nan()).map(|r| r.avg_length * bounded(r)).sum();
    MetricsRow {
        group: group.to_string(),
        cov_true: if rows.iter().all(|r| r.cov_true.is_some()) && !rows.is_empty() {
            Some(weighted(&|r| r.cov_true.unwrap()))
        } else {
            None
        },
        cov_pseudo: weighted(&|r| r.cov_pseudo),
        avg_length: if total_bounded > 0.0 { length_sum / total_bounded } else { f64::NAN },
        n_unbounded,
        n_cells,
        n_collapsed: rows.iter().map(|r| r.n_collapsed).sum(),
    }
}

pub const METRICS_HEADER: &str = "group,cov_true,cov_pseudo,avg_length,n_unbounded,n_cells";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.group,
            fmt_opt(r.cov_true),
            fmt_opt(Some(r.cov_pseudo)),
            fmt_opt(Some(r.avg_length)),
            r.n_unbounded,
            r.n_cells
        ));
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    write_atomic(path, metrics_csv(rows).as_bytes())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn field<'r>(record: &'r csv::StringRecord, k: usize, path: &Path) -> Result<&'r str> {
    record
        .get(k)
        .ok_or_else(|| Error::Schema(format!("{}: row has fewer than {} fields", path.display(), k + 1)))
}

fn parse_count(s: &str, path: &Path) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Schema(format!("{}: `{s}` is not a count", path.display())))
}

/// Reads a file written by [`write_metrics_csv`]. Collapsed counts are not
/// stored and come back as 0.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = reader.headers().map_err(csv_err(path))?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(Error::Schema(format!("{}: unexpected header `{header}`", path.display())));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        rows.push(MetricsRow {
            group: field(&record, 0, path)?.to_string(),
            cov_true: parse_opt(field(&record, 1, path)?),
            cov_pseudo: parse_opt(field(&record, 2, path)?).unwrap_or(f64::NAN),
            avg_length: parse_opt(field(&record, 3, path)?).unwrap_or(f64::NAN),
            n_unbounded: parse_count(field(&record, 4, path)?, path)?,
            n_cells: parse_count(field(&record, 5, path)?, path)?,
            n_collapsed: 0,
        });
    }
    Ok(rows)
}

/// One row of an intervals file.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub seed: u64,
    pub individual_id: String,
    pub decision_point: usize,
    pub lower: f64,
    pub upper: f64,
    pub pseudo_outcome: f64,
    pub true_ite: Option<f64>,
    pub covered_pseudo: bool,
    pub covered_true: Option<bool>,
}

pub const INTERVALS_HEADER: &str =
    "seed,individual_id,decision_point,lower,upper,pseudo_outcome,true_ite,covered_pseudo,covered_true";

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Appends one line per record; `label` maps individual indices to ids.
pub fn push_interval_lines(out: &mut String, seed: u64, batch: &IntervalBatch, label: &dyn Fn(usize) -> String) {
    for r in &batch.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            seed,
            label(r.individual),
            r.point,
            fmt_f64(r.interval.lower),
            fmt_f64(r.interval.upper),
            fmt_f64(r.pseudo_outcome),
            fmt_opt(r.true_ite),
            flag(r.covered_pseudo()),
            r.covered_true().map_or("NA", flag)
        ));
    }
}

pub fn read_intervals_csv(path: &Path) -> Result<Vec<IntervalRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = reader.headers().map_err(csv_err(path))?.iter().collect::<Vec<_>>().join(",");
    if header != INTERVALS_HEADER {
        return Err(Error::Schema(format!("{}: unexpected header `{header}`", path.display())));
    }
    let real = |s: &str| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|_| Error::Schema(format!("{}: `{s}` is not a number", path.display())))
    };
    let boolean = |s: &str| -> Result<Option<bool>> {
        match s.trim() {
            "1" => Ok(Some(true)),
            "0" => Ok(Some(false)),
            "NA" => Ok(None),
            other => Err(Error::Schema(format!("{}: `{other}` is not a 0/1 flag", path.display()))),
        }
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        rows.push(IntervalRow {
            seed: field(&record, 0, path)?
                .parse()
                .map_err(|_| Error::Schema(format!("{}: bad seed", path.display())))?,
            individual_id: field(&record, 1, path)?.to_string(),
            decision_point: parse_count(field(&record, 2, path)?, path)?,
            lower: real(field(&record, 3, path)?)?,
            upper: real(field(&record, 4, path)?)?,
            pseudo_outcome: real(field(&record, 5, path)?)?,
            true_ite: parse_opt(field(&record, 6, path)?),
            covered_pseudo: boolean(field(&record, 7, path)?)?
                .ok_or_else(|| Error::Schema(format!("{}: covered_pseudo is NA", path.display())))?,
            covered_true: boolean(field(&record, 8, path)?)?,
        });
    }
    Ok(rows)
}

/// Outcome of one ordering check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderCheck {
    pub holds: bool,
    /// First grid point where the defining inequality fails.
    pub witness: Option<f64>,
}

/// Empirical orderings of `V_phi` against `V*`:
/// FOSD `V_phi >=_1 V*`, SOSD `V_phi <=_2 V*`, MCX `V_phi >=_mcx V*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominanceReport {
    pub fosd: OrderCheck,
    pub sosd: OrderCheck,
    pub mcx: OrderCheck,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Checks every ordering on the grid of all pooled sample points.
///
/// Both ECDFs are step functions that only change on the grid, so the checks
/// there are exact: FOSD compares counts in integers, SOSD integrates the
/// ECDF difference piecewise, and MCX compares hinge expectations
/// `E(V - c)+`, which are linear between grid points.
pub fn check_dominance(v_phi: &[f64], v_star: &[f64]) -> Result<DominanceReport> {
    if v_phi.is_empty() || v_star.is_empty() {
        return Err(Error::Schema("dominance check needs two non-empty samples".into()));
    }
    if v_phi.iter().chain(v_star).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dominance samples must be finite".into()));
    }
    let a = sorted(v_phi);
    let b = sorted(v_star);
    let mut grid: Vec<f64> = a.iter().chain(&b).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let (na, nb) = (a.len() as u128, b.len() as u128);
    let scale = grid.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale;

    // counts at or below each grid point
    let mut ka = 0usize;
    let mut kb = 0usize;
    let mut cdf = Vec::with_capacity(grid.len());
    for &g in &grid {
        while ka < a.len() && a[ka] <= g {
            ka += 1;
        }
        while kb < b.len() && b[kb] <= g {
            kb += 1;
        }
        cdf.push((ka as u128, kb as u128));
    }

    let mut fosd = OrderCheck { holds: true, witness: None };
    let mut fosd_strict = false;
    for (&g, &(ca, cb)) in grid.iter().zip(&cdf) {
        let (lhs, rhs) = (ca * nb, cb * na);
        if lhs > rhs {
            fosd = OrderCheck { holds: false, witness: Some(g) };
            break;
        }
        fosd_strict |= lhs < rhs;
    }
    if fosd.holds && !fosd_strict {
        fosd.holds = false;
    }

    // integral of F_phi - F_star from -inf up to each grid point
    let mut sosd = OrderCheck { holds: true, witness: None };
    let mut sosd_strict = false;
    let mut integral = 0.0;
    for k in 0..grid.len() {
        if k > 0 {
            let (ca, cb) = cdf[k - 1];
            let diff = ca as f64 / na as f64 - cb as f64 / nb as f64;
            integral += diff * (grid[k] - grid[k - 1]);
        }
        if integral < -tol {
            sosd = OrderCheck { holds: false, witness: Some(grid[k]) };
            break;
        }
        sosd_strict |= integral > tol;
    }
    if sosd.holds && !sosd_strict {
        sosd.holds = false;
    }

    let suffix = |s: &[f64]| {
        let mut acc = vec![0.0; s.len() + 1];
        for k in (0..s.len()).rev() {
            acc[k] = acc[k + 1] + s[k];
        }
        acc
    };
    let (sa, sb) = (suffix(&a), suffix(&b));
    let mean_a = sa[0] / a.len() as f64;
    let mean_b = sb[0] / b.len() as f64;
    let mut mcx = OrderCheck { holds: true, witness: None };
    if mean_a < mean_b - tol {
        mcx.holds = false;
    } else {
        for (&c, &(ca, cb)) in grid.iter().zip(&cdf) {
            let (ca, cb) = (ca as usize, cb as usize);
            let ha = (sa[ca] - (a.len() - ca) as f64 * c) / a.len() as f64;
            let hb = (sb[cb] - (b.len() - cb) as f64 * c) / b.len() as f64;
            if ha < hb - tol {
                mcx = OrderCheck { holds: false, witness: Some(c) };
                break;
            }
        }
    }
    Ok(DominanceReport { fosd, sosd, mcx })
}

pub const DOMINANCE_HEADER: &str = "order,holds,witness";

pub fn dominance_csv(report: &DominanceReport) -> String {
    let mut out = format!("{DOMINANCE_HEADER}\n");
    for (name, check) in [("fosd", report.fosd), ("sosd", report.sosd), ("mcx", report.mcx)] {
        out.push_str(&format!("{name},{},{}\n", check.holds, fmt_opt(check.witness)));
    }
    out
}

pub fn read_dominance_csv(path: &Path) -> Result<DominanceReport> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(DOMINANCE_HEADER) {
        return Err(Error::Schema(format!("{}: unexpected header", path.display())));
    }
    let mut checks = std::collections::HashMap::new();
    for line in lines {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Schema(format!("{}: malformed row `{line}`", path.display())));
        }
        let holds = parts[1]
            .parse()
            .map_err(|_| Error::Schema(format!("{}: `{}` is not a boolean", path.display(), parts[1])))?;
        checks.insert(parts[0].to_string(), OrderCheck { holds, witness: parse_opt(parts[2]) });
    }
    let get = |k: &str| {
        checks
            .get(k)
            .copied()
            .ok_or_else(|| Error::Schema(format!("{}: missing `{k}` row", path.display())))
    };
    Ok(DominanceReport {
        fosd: get("fosd")?,
        sosd: get("sosd")?,
        mcx: get("mcx")?,
    })
}
