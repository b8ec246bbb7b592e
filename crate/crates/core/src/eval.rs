//! Leave-one-domain-out evaluation, the ablation matrix and representation
//! export.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Label, SequenceSample};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{predict_batch, SequenceClassifier};
use crate::objective::Metric;
use crate::training::{train_ctsdg, train_erm, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ctsdg,
    Erm,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctsdg" => Ok(Method::Ctsdg),
            "erm" => Ok(Method::Erm),
            other => Err(Error::Config(format!("unknown method {other:?} (expected ctsdg or erm)"))),
        }
    }
}

/// Percentage of samples whose zero-noise prediction equals the label.
pub fn accuracy<M: SequenceClassifier>(model: &M, samples: &[SequenceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(256) {
        let refs: Vec<&SequenceSample> = chunk.iter().collect();
        correct += predict_batch(model, &refs)?
            .iter()
            .zip(chunk)
            .filter(|(p, s)| p.label == s.y)
            .count();
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoResult {
    pub method: Method,
    /// Variant label (e.g. an ablation name); equals the method name otherwise.
    pub variant: String,
    pub sources: Vec<String>,
    pub target: String,
    pub seeds: Vec<u64>,
    /// Per-run accuracies, percent, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl LodoResult {
    fn new(job: &FoldSpec, seeds: Vec<u64>, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            method: job.method,
            variant: job.variant.clone(),
            sources: job.sources.clone(),
            target: job.target.clone(),
            runs: accuracies.len(),
            seeds,
            accuracies,
            mean,
            std,
        }
    }

    /// Table cell `mean (std)`.
    pub fn cell(&self) -> String {
        format!("{:.2} ({:.2})", self.mean, self.std)
    }
}

/// One (variant, fold) unit of work.
#[derive(Clone, Debug)]
pub struct FoldSpec {
    pub method: Method,
    pub variant: String,
    pub config: TrainConfig,
    pub sources: Vec<String>,
    pub target: String,
}

/// Trains one model on `sources` and scores it on `target`.
pub fn train_and_score(method: Method, cfg: &TrainConfig, sources: &[DomainDataset], target: &DomainDataset) -> Result<f64> {
    for s in sources {
        if s.samples.iter().any(|x| target.samples.iter().any(|t| t.sample_id == x.sample_id)) {
            return Err(Error::Data(format!("source {} shares sample ids with target {}", s.domain_id, target.domain_id)));
        }
    }
    match method {
        Method::Ctsdg => {
            let (m, _) = train_ctsdg(cfg, sources)?;
            accuracy(&m, &target.samples)
        }
        Method::Erm => {
            let (m, _) = train_erm(cfg, sources)?;
            accuracy(&m, &target.samples)
        }
    }
}

fn find_domain<'a>(domains: &'a [DomainDataset], id: &str) -> Result<&'a DomainDataset> {
    domains
        .iter()
        .find(|d| d.domain_id == id)
        .ok_or_else(|| Error::Data(format!("domain {id:?} not found")))
}

/// Executes every fold `runs` times with seeds `seed + 0..runs` on a pool of
/// `workers` threads. Results keep the order of `folds`.
pub fn run_folds(domains: &[DomainDataset], folds: &[FoldSpec], runs: usize, workers: usize) -> Result<Vec<LodoResult>> {
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    for f in folds {
        if f.method == Method::Ctsdg && f.sources.len() < 2 {
            return Err(Error::Config(format!(
                "fold with target {} has {} source domains; CTSDG needs at least 2",
                f.target,
                f.sources.len()
            )));
        }
        if f.sources.is_empty() || f.sources.contains(&f.target) {
            return Err(Error::Config(format!("fold with target {} has invalid sources {:?}", f.target, f.sources)));
        }
    }
    let jobs: Vec<(usize, u64)> = (0..folds.len())
        .flat_map(|f| (0..runs as u64).map(move |r| (f, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let scores: Vec<Result<(usize, u64, f64)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(f, r)| {
                let fold = &folds[f];
                let cfg = TrainConfig {
                    seed: fold.config.seed + r,
                    ..fold.config.clone()
                };
                let sources = fold
                    .sources
                    .iter()
                    .map(|id| find_domain(domains, id).cloned())
                    .collect::<Result<Vec<_>>>()?;
                let target = find_domain(domains, &fold.target)?;
                let acc = train_and_score(fold.method, &cfg, &sources, target)?;
                log::info!("{} target {} seed {}: {acc:.2}%", fold.variant, fold.target, cfg.seed);
                Ok((f, cfg.seed, acc))
            })
            .collect()
    });
    let mut per_fold: Vec<(Vec<u64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); folds.len()];
    for s in scores {
        let (f, seed, acc) = s?;
        per_fold[f].0.push(seed);
        per_fold[f].1.push(acc);
    }
    Ok(folds
        .iter()
        .zip(per_fold)
        .map(|(f, (seeds, accs))| LodoResult::new(f, seeds, accs))
        .collect())
}

/// Leave-one-domain-out folds in domain order.
pub fn lodo_folds(domains: &[DomainDataset], cfg: &TrainConfig, method: Method, variant: &str) -> Vec<FoldSpec> {
    domains
        .iter()
        .map(|held| FoldSpec {
            method,
            variant: variant.to_string(),
            config: cfg.clone(),
            sources: domains
                .iter()
                .filter(|d| d.domain_id != held.domain_id)
                .map(|d| d.domain_id.clone())
                .collect(),
            target: held.domain_id.clone(),
        })
        .collect()
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Ctsdg => "CTSDG",
        Method::Erm => "ERM",
    }
}

pub fn run_lodo(
    domains: &[DomainDataset],
    cfg: &TrainConfig,
    runs: usize,
    method: Method,
    workers: usize,
) -> Result<Vec<LodoResult>> {
    let min = if method == Method::Ctsdg { 3 } else { 2 };
    if domains.len() < min {
        return Err(Error::Config(format!(
            "leave-one-domain-out with {} needs at least {min} domains, got {}",
            method_name(method),
            domains.len()
        )));
    }
    run_folds(domains, &lodo_folds(domains, cfg, method, method_name(method)), runs, workers)
}

/// Trains on the listed sources and tests on one designated target.
pub fn run_fixed_target(
    domains: &[DomainDataset],
    sources: &[String],
    target: &str,
    cfg: &TrainConfig,
    runs: usize,
    method: Method,
    workers: usize,
) -> Result<LodoResult> {
    let fold = FoldSpec {
        method,
        variant: method_name(method).to_string(),
        config: cfg.clone(),
        sources: sources.to_vec(),
        target: target.to_string(),
    };
    Ok(run_folds(domains, &[fold], runs, workers)?.remove(0))
}

/// The five ablation columns, in table order.
pub fn ablation_variants(cfg: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    vec![
        ("CTSDG".to_string(), cfg.clone()),
        ("CTSDG w/o L_v".to_string(), with(&|c| c.no_lv = true)),
        ("CTSDG w/o l_con".to_string(), with(&|c| c.no_contrast = true)),
        ("CTSDG w/ s_l1".to_string(), with(&|c| c.metric_override = Some(Metric::L1))),
        ("CTSDG w/ s_l2".to_string(), with(&|c| c.metric_override = Some(Metric::L2))),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub targets: Vec<String>,
    /// `cells[target][column]`.
    pub cells: Vec<Vec<LodoResult>>,
    /// Column means of the per-target means.
    pub average: Vec<f64>,
}

pub fn run_ablations(domains: &[DomainDataset], cfg: &TrainConfig, runs: usize, workers: usize) -> Result<AblationTable> {
    if domains.len() < 3 {
        return Err(Error::Config(format!("ablations need at least 3 domains, got {}", domains.len())));
    }
    let variants = ablation_variants(cfg);
    let folds: Vec<FoldSpec> = variants
        .iter()
        .flat_map(|(name, c)| lodo_folds(domains, c, Method::Ctsdg, name))
        .collect();
    let results = run_folds(domains, &folds, runs, workers)?;
    let n_targets = domains.len();
    let targets: Vec<String> = domains.iter().map(|d| d.domain_id.clone()).collect();
    let cells: Vec<Vec<LodoResult>> = (0..n_targets)
        .map(|t| (0..variants.len()).map(|v| results[v * n_targets + t].clone()).collect())
        .collect();
    let average = (0..variants.len())
        .map(|v| cells.iter().map(|row| row[v].mean).sum::<f64>() / n_targets as f64)
        .collect();
    Ok(AblationTable {
        columns: variants.into_iter().map(|(n, _)| n).collect(),
        targets,
        cells,
        average,
    })
}

/// Aligned text table of `mean (std)` cells with an Average row.
pub fn lodo_table(results: &[LodoResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:<8} {:>16}  runs", "target", "method", "acc mean (std)");
    for r in results {
        let _ = writeln!(out, "{:<10} {:<8} {:>16}  {}", r.target, r.variant, r.cell(), r.runs);
    }
    if !results.is_empty() {
        let avg = results.iter().map(|r| r.mean).sum::<f64>() / results.len() as f64;
        let _ = writeln!(out, "{:<10} {:<8} {:>16.2}", "Average", "", avg);
    }
    out
}

pub fn ablation_text(table: &AblationTable) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "target");
    for c in &table.columns {
        let _ = write!(out, " {:>17}", c);
    }
    out.push('\n');
    for (t, row) in table.targets.iter().zip(&table.cells) {
        let _ = write!(out, "{t:<10}");
        for r in row {
            let _ = write!(out, " {:>17}", r.cell());
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<10}", "Average");
    for a in &table.average {
        let _ = write!(out, " {:>17.2}", a);
    }
    out.push('\n');
    out
}

/// One row of a representation export.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprRow {
    pub sample_id: String,
    pub domain_id: String,
    pub y: Label,
    pub predicted: Label,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Zero-noise causal features and representations, sorted by sample id.
pub fn export_rows<M: SequenceClassifier>(model: &M, samples: &[SequenceSample]) -> Result<Vec<ReprRow>> {
    let mut sorted: Vec<&SequenceSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut rows = Vec::with_capacity(sorted.len());
    for chunk in sorted.chunks(256) {
        for (s, p) in chunk.iter().zip(predict_batch(model, chunk)?) {
            rows.push(ReprRow {
                sample_id: s.sample_id.clone(),
                domain_id: s.domain_id.clone(),
                y: s.y,
                predicted: p.label,
                c: p.logits,
                h: p.representation,
            });
        }
    }
    Ok(rows)
}

pub fn repr_csv(rows: &[ReprRow]) -> Result<String> {
    let c_dim = rows.first().map_or(2, |r| r.c.len());
    let h_dim = rows.first().map_or(0, |r| r.h.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "domain_id".into(), "y".into(), "pred".into()];
    header.extend((0..c_dim).map(|i| format!("c{i}")));
    header.extend((0..h_dim).map(|i| format!("h{i}")));
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.c.len() != c_dim || r.h.len() != h_dim {
            return Err(Error::Usage("representation rows differ in width".into()));
        }
        let mut rec = vec![
            r.sample_id.clone(),
            r.domain_id.clone(),
            r.y.index().to_string(),
            r.predicted.index().to_string(),
        ];
        rec.extend(r.c.iter().chain(&r.h).map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn export_representations<M: SequenceClassifier>(model: &M, samples: &[SequenceSample], out: &Path) -> Result<Vec<ReprRow>> {
    let rows = export_rows(model, samples)?;
    write_atomic(out, repr_csv(&rows)?.as_bytes())?;
    Ok(rows)
}

pub fn read_repr_csv(path: &Path) -> Result<Vec<ReprRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let c_dim = header.iter().filter(|h| h.starts_with('c')).count();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != header.len() || rec.len() < 4 {
            return Err(bad(format!("row has {} fields, header has {}", rec.len(), header.len())));
        }
        let label = |s: &str| -> Result<Label> {
            Label::from_index(s.parse::<usize>().map_err(|e| bad(e.to_string()))?)
        };
        let nums: Vec<f64> = rec
            .iter()
            .skip(4)
            .map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_>>()?;
        rows.push(ReprRow {
            sample_id: rec[0].to_string(),
            domain_id: rec[1].to_string(),
            y: label(&rec[2])?,
            predicted: label(&rec[3])?,
            c: nums[..c_dim].to_vec(),
            h: nums[c_dim..].to_vec(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_of_three() {
        let (m, s) = mean_std(&[80.0, 90.0, 100.0]);
        assert_eq!(m, 90.0);
        assert_eq!(format!("{s:.2}"), "8.16");
        assert_eq!(mean_std(&[71.5]), (71.5, 0.0));
    }

    #[test]
    fn five_ablation_columns() {
        let v = ablation_variants(&TrainConfig::default());
        assert_eq!(v.len(), 5);
        assert_eq!(v[0].1, TrainConfig::default());
        assert!(v[1].1.no_lv && v[2].1.no_contrast);
        assert_eq!(v[4].1.effective_metric(), Metric::L2);
    }

    #[test]
    fn too_few_domains_rejected() {
        let d = vec![DomainDataset::new("a", vec![]), DomainDataset::new("b", vec![])];
        assert!(matches!(
            run_lodo(&d, &TrainConfig::default(), 1, Method::Ctsdg, 1),
            Err(Error::Config(_))
        ));
    }
}
