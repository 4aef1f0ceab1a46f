use std::path::Path;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Deserialize;

use ite_conformal::conformal::{WeightConfig, WeightScheme};
use ite_conformal::evaluation::{
    check_dominance, dominance_csv, metrics_csv, pool_rows, push_interval_lines, summarize, Grouping, MetricsRow,
    INTERVALS_HEADER,
};
use ite_conformal::pipeline::{self, load_data, ExperimentConfig, OutwardTargets, PredictionMode};
use ite_conformal::util::{fmt_f64, fmt_opt, write_atomic};

use crate::manifest::{digest, RunManifest, RunStatus};
use crate::CommonArgs;

/// Experiment file plus the optional `[compare]` table.
struct ConfigFile {
    experiment: ExperimentConfig,
    compare: CompareConfig,
    digest: String,
}

fn read_config(args: &CommonArgs) -> anyhow::Result<ConfigFile> {
    let bytes = std::fs::read(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let text = String::from_utf8(bytes.clone()).context("config is not UTF-8")?;
    let mut table: toml::Table = toml::from_str(&text).context("parsing config")?;
    let compare = match table.remove("compare") {
        Some(v) => v.try_into().context("invalid [compare] section")?,
        None => CompareConfig::default(),
    };
    let rest = toml::to_string(&table)?;
    let mut experiment = ExperimentConfig::from_toml(&rest)?;
    if let Some(seed) = args.seed {
        experiment.seed = seed;
    }
    Ok(ConfigFile {
        experiment,
        compare,
        digest: digest(&bytes),
    })
}

fn seeds(base: u64, replicates: u64) -> anyhow::Result<Vec<u64>> {
    if replicates == 0 {
        bail!("--replicates must be at least 1");
    }
    Ok((0..replicates).map(|k| base + k).collect())
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, text: &str, files: &mut Vec<String>) -> anyhow::Result<()> {
    write_atomic(&dir.join(name), text.as_bytes())?;
    files.push(name.to_string());
    Ok(())
}

fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, ..cfg.clone() }
}

pub fn simulate(args: &CommonArgs) -> anyhow::Result<bool> {
    let file = read_config(args)?;
    let cfg = &file.experiment;
    if cfg.data.path.is_some() {
        bail!("simulate needs a [simulation] section, not [data] path");
    }
    let seeds = seeds(cfg.seed, args.replicates)?;
    prepare_out(&args.out)?;
    let single = seeds.len() == 1;
    let results: Vec<(u64, anyhow::Result<Vec<String>>)> = seeds
        .par_iter()
        .map(|&seed| {
            let outcome = (|| {
                let data = load_data(&with_seed(cfg, seed))?;
                let suffix = if single { String::new() } else { format!("_seed{seed}") };
                let panel = format!("panel{suffix}.csv");
                let po = format!("potential_outcomes{suffix}.csv");
                data.write_csv(&args.out.join(&panel))?;
                data.write_potential_outcomes_csv(&args.out.join(&po))?;
                Ok(vec![panel, po])
            })();
            (seed, outcome)
        })
        .collect();
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for (seed, outcome) in results {
        match outcome {
            Ok(names) => {
                files.extend(names);
                runs.push(RunStatus::ok(format!("seed={seed}")));
            }
            Err(e) => runs.push(RunStatus::failed(format!("seed={seed}"), format!("{e:#}"))),
        }
    }
    finish("simulate", &file, seeds, &args.out, files, runs)
}

fn finish(
    command: &'static str,
    file: &ConfigFile,
    seeds: Vec<u64>,
    out: &Path,
    files: Vec<String>,
    runs: Vec<RunStatus>,
) -> anyhow::Result<bool> {
    let manifest = RunManifest {
        command,
        config_digest: file.digest.clone(),
        seeds,
        output_dir: out.display().to_string(),
        files,
        runs,
    };
    manifest.write(out)?;
    Ok(manifest.all_ok())
}

/// Everything one replicate contributes to the `run` outputs.
struct ReplicateResult {
    overall: MetricsRow,
    by_point: Vec<MetricsRow>,
    intervals: String,
    scores: Option<(Vec<f64>, Vec<f64>)>,
}

fn run_replicate(cfg: &ExperimentConfig) -> anyhow::Result<ReplicateResult> {
    let data = load_data(cfg)?;
    let output = pipeline::run(&data, cfg)?;
    let overall = summarize(&output.batch, Grouping::Overall).remove(0);
    let by_point = summarize(&output.batch, Grouping::DecisionPoint);
    let mut intervals = String::new();
    push_interval_lines(&mut intervals, cfg.seed, &output.batch, &|i| data.label(i).to_string());
    let scores = data.has_potential_outcomes().then(|| {
        let cells = output.fitted.calibration.cells.iter().chain(output.fitted.target_cells());
        cells.map(|c| (c.score, c.oracle_score.expect("potential outcomes present"))).unzip()
    });
    Ok(ReplicateResult {
        overall,
        by_point,
        intervals,
        scores,
    })
}

/// Pools per-point rows across replicates, keeping ascending point order.
fn pool_by_point(per_seed: &[&[MetricsRow]]) -> Vec<MetricsRow> {
    let mut groups: Vec<(usize, Vec<MetricsRow>)> = Vec::new();
    for rows in per_seed {
        for r in rows.iter() {
            let point: usize = r.group.parse().expect("decision point group");
            match groups.iter_mut().find(|(p, _)| *p == point) {
                Some((_, v)) => v.push(r.clone()),
                None => groups.push((point, vec![r.clone()])),
            }
        }
    }
    groups.sort_by_key(|(p, _)| *p);
    groups.iter().map(|(p, rows)| pool_rows(&p.to_string(), rows)).collect()
}

pub fn run(args: &CommonArgs) -> anyhow::Result<bool> {
    let file = read_config(args)?;
    let cfg = &file.experiment;
    let seeds = seeds(cfg.seed, args.replicates)?;
    prepare_out(&args.out)?;
    let results: Vec<(u64, anyhow::Result<ReplicateResult>)> = seeds
        .par_iter()
        .map(|&seed| (seed, run_replicate(&with_seed(cfg, seed))))
        .collect();

    let mut runs = Vec::new();
    let mut ok = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(res) => {
                runs.push(RunStatus::ok(format!("seed={seed}")));
                ok.push((seed, res));
            }
            Err(e) => runs.push(RunStatus::failed(format!("seed={seed}"), format!("{e:#}"))),
        }
    }

    let mut files = Vec::new();
    if !ok.is_empty() {
        let summary: Vec<MetricsRow> = if seeds.len() == 1 {
            vec![ok[0].1.overall.clone()]
        } else {
            let mut rows: Vec<MetricsRow> = ok
                .iter()
                .map(|(seed, r)| MetricsRow {
                    group: format!("seed={seed}"),
                    ..r.overall.clone()
                })
                .collect();
            let pooled = pool_rows("pooled", &rows);
            rows.push(pooled);
            rows
        };
        write(&args.out, "summary.csv", &metrics_csv(&summary), &mut files)?;

        let per_seed: Vec<&[MetricsRow]> = ok.iter().map(|(_, r)| r.by_point.as_slice()).collect();
        write(&args.out, "by_decision_point.csv", &metrics_csv(&pool_by_point(&per_seed)), &mut files)?;

        let mut intervals = format!("{INTERVALS_HEADER}\n");
        for (_, r) in &ok {
            intervals.push_str(&r.intervals);
        }
        write(&args.out, "intervals.csv", &intervals, &mut files)?;

        if ok.iter().all(|(_, r)| r.scores.is_some()) {
            let (mut phi, mut star) = (Vec::new(), Vec::new());
            for (_, r) in &ok {
                let (p, s) = r.scores.as_ref().unwrap();
                phi.extend_from_slice(p);
                star.extend_from_slice(s);
            }
            let report = check_dominance(&phi, &star)?;
            write(&args.out, "dominance.csv", &dominance_csv(&report), &mut files)?;
        }
    }
    finish("run", &file, seeds, &args.out, files, runs)
}

/// Changepoint designs used to compare weighting schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Experiment {
    /// The file's experiment unchanged.
    AsConfigured,
    /// New individuals, T = 520, changepoint after 500.
    DownwardChangepoint,
    /// Calibration individuals after a horizon of 30, T = 90, changepoint after 45.
    OutwardChangepoint,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::AsConfigured => "as_configured",
            Experiment::DownwardChangepoint => "downward_changepoint",
            Experiment::OutwardChangepoint => "outward_changepoint",
        }
    }

    fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Experiment::AsConfigured => {}
            Experiment::DownwardChangepoint => {
                cfg.simulation.n_points = 520;
                cfg.simulation.changepoint = Some(500);
                cfg.mode = PredictionMode::Downward;
                cfg.train_horizon = None;
            }
            Experiment::OutwardChangepoint => {
                cfg.simulation.n_points = 90;
                cfg.simulation.changepoint = Some(45);
                cfg.mode = PredictionMode::Outward;
                cfg.train_horizon = Some(30);
                cfg.outward_targets = OutwardTargets::Calibration;
                cfg.augment_cal_with_test_history = true;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareConfig {
    schemes: Vec<WeightScheme>,
    psi: Vec<f64>,
    experiments: Vec<Experiment>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            schemes: vec![WeightScheme::Equal, WeightScheme::Decay],
            psi: vec![0.7],
            experiments: vec![Experiment::DownwardChangepoint, Experiment::OutwardChangepoint],
        }
    }
}

impl CompareConfig {
    /// `(scheme, psi)` pairs; `equal` ignores psi and appears once.
    fn variants(&self, w_inf: f64) -> Vec<WeightConfig> {
        let mut out = Vec::new();
        for &scheme in &self.schemes {
            let psis: &[f64] = if scheme == WeightScheme::Equal { &[1.0] } else { &self.psi };
            for &psi in psis {
                out.push(WeightConfig { scheme, psi, w_inf });
            }
        }
        out
    }
}

struct VariantResult {
    overall: MetricsRow,
    by_point: Vec<MetricsRow>,
}

fn compare_replicate(cfg: &ExperimentConfig, variants: &[WeightConfig]) -> anyhow::Result<Vec<VariantResult>> {
    let data = load_data(cfg)?;
    let fitted = pipeline::fit(&data, cfg)?;
    drop(data);
    variants
        .iter()
        .map(|w| {
            let batch = fitted.calibrate(w)?;
            Ok(VariantResult {
                overall: summarize(&batch, Grouping::Overall).remove(0),
                by_point: summarize(&batch, Grouping::DecisionPoint),
            })
        })
        .collect()
}

fn metrics_fields(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{}",
        fmt_opt(r.cov_true),
        fmt_opt(Some(r.cov_pseudo)),
        fmt_opt(Some(r.avg_length)),
        r.n_unbounded,
        r.n_cells
    )
}

pub fn compare_weights(args: &CommonArgs) -> anyhow::Result<bool> {
    let file = read_config(args)?;
    let base = &file.experiment;
    let compare = &file.compare;
    if compare.schemes.is_empty() || compare.experiments.is_empty() {
        bail!("[compare] needs at least one scheme and one experiment");
    }
    let variants = compare.variants(base.weights.w_inf);
    for v in &variants {
        v.validate()?;
    }
    let seeds = seeds(base.seed, args.replicates)?;
    prepare_out(&args.out)?;

    let jobs: Vec<(Experiment, u64)> = compare
        .experiments
        .iter()
        .flat_map(|&e| seeds.iter().map(move |&s| (e, s)))
        .collect();
    let results: Vec<anyhow::Result<Vec<VariantResult>>> = jobs
        .par_iter()
        .map(|&(e, seed)| compare_replicate(&with_seed(&e.apply(base), seed), &variants))
        .collect();

    let mut runs = Vec::new();
    let mut traces = String::from("experiment,scheme,psi,decision_point,cov_true,cov_pseudo,avg_length,n_unbounded,n_cells\n");
    let comparing = variants.len() > 1;
    let mut comparison = String::from("experiment,scheme,psi,cov_true,cov_pseudo,avg_length,n_unbounded,n_cells");
    comparison.push_str(if comparing { ",cov_pseudo_gain\n" } else { "\n" });

    for &experiment in &compare.experiments {
        let mut per_variant: Vec<(Vec<MetricsRow>, Vec<&[MetricsRow]>)> = vec![(Vec::new(), Vec::new()); variants.len()];
        for ((e, seed), r) in jobs.iter().zip(&results) {
            if *e != experiment {
                continue;
            }
            let key = format!("{}/seed={seed}", e.name());
            match r {
                Ok(vs) => {
                    runs.push(RunStatus::ok(key));
                    for (slot, v) in per_variant.iter_mut().zip(vs) {
                        slot.0.push(v.overall.clone());
                        slot.1.push(&v.by_point);
                    }
                }
                Err(err) => runs.push(RunStatus::failed(key, format!("{err:#}"))),
            }
        }
        if per_variant[0].0.is_empty() {
            continue;
        }
        let pooled: Vec<MetricsRow> = per_variant.iter().map(|(rows, _)| pool_rows("pooled", rows)).collect();
        for ((w, (_, by_point)), overall) in variants.iter().zip(&per_variant).zip(&pooled) {
            for row in pool_by_point(by_point) {
                traces.push_str(&format!(
                    "{},{},{},{},{}\n",
                    experiment.name(),
                    w.scheme,
                    fmt_f64(w.psi),
                    row.group,
                    metrics_fields(&row)
                ));
            }
            comparison.push_str(&format!(
                "{},{},{},{}",
                experiment.name(),
                w.scheme,
                fmt_f64(w.psi),
                metrics_fields(overall)
            ));
            if comparing {
                comparison.push_str(&format!(",{}", fmt_f64(overall.cov_pseudo - pooled[0].cov_pseudo)));
            }
            comparison.push('\n');
        }
    }

    let mut files = Vec::new();
    write(&args.out, "traces.csv", &traces, &mut files)?;
    write(&args.out, "comparison.csv", &comparison, &mut files)?;
    finish("compare-weights", &file, seeds, &args.out, files, runs)
}
