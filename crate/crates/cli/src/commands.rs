use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use log::{info, warn};
use varphylo::metrics::{euclidean, kappa_ratio, pearson};
use varphylo::seq_io::{encode, parse_fasta, write_fasta};
use varphylo::simulator::{simulate, true_log_likelihood};
use varphylo::trainer::{train_with_observer, IterationRecord, PointEstimates};
use varphylo::{Alignment, Error, ModelFamily, SimulationSpec};

use crate::config::{format_list, parse_list, parse_pairs, RunConfig};

pub const LEAVES_FILE: &str = "leaves.fasta";
pub const ROOT_FILE: &str = "root.fasta";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const ESTIMATES_FILE: &str = "estimates.txt";
pub const METRICS_FILE: &str = "metrics.csv";

pub const TRAJECTORY_HEADER: &str = "iteration,split,elbo,loglik,kl_qp";
pub const METRICS_HEADER: &str = "group,dist,corr,pval,ratio";

fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    ensure!(dir.is_dir(), "output directory {} does not exist", dir.display());
    Ok(dir.join(name))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_alignment(path: &Path) -> Result<Alignment> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_fasta(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes leaves, root and manifest; returns the manifest path.
pub fn run_simulate(cfg: &RunConfig) -> Result<PathBuf> {
    let leaves_path = output_path(&cfg.output_dir, LEAVES_FILE)?;
    let spec = SimulationSpec {
        params: cfg.substitution_params(),
        branch_lengths: cfg.branches.clone(),
        n_sites: cfg.n_sites,
        seed: cfg.seed,
    };
    let data = simulate(&spec)?;
    let ll = true_log_likelihood(&data)?;
    let header = cfg.repro_header();

    write_file(&leaves_path, &format!(";{header}\n{}", write_fasta(&data.alignment)))?;
    let root = Alignment::new(vec!["root".into()], vec![data.root_sequence()])?;
    write_file(&cfg.output_dir.join(ROOT_FILE), &format!(";{header}\n{}", write_fasta(&root)))?;

    let manifest = cfg.output_dir.join(MANIFEST_FILE);
    let mut text = format!("# {header}\n{}", cfg.render());
    text.push_str(&format!("result.n_sequences={}\nresult.true_log_likelihood={ll}\n", spec.n_sequences()));
    write_file(&manifest, &text)?;
    info!("simulated {} x {} sites, true log likelihood {ll}", spec.n_sequences(), spec.n_sites);
    Ok(manifest)
}

/// Trains on `input`, streaming the trajectory so that an aborted run
/// still leaves every completed row on disk.
pub fn run_train(cfg: &RunConfig, input: &Path, valid: Option<&Path>) -> Result<PointEstimates> {
    let csv_path = output_path(&cfg.output_dir, TRAJECTORY_FILE)?;
    let x = encode(&read_alignment(input)?);
    let mut tc = cfg.train_config();
    if let Some(v) = valid {
        tc.validation = Some(encode(&read_alignment(v)?));
    }
    let header = cfg.repro_header();

    let file = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "# {header}\n{TRAJECTORY_HEADER}")?;
    let mut io_error = None;
    let result = train_with_observer(&x, &tc, |r: &IterationRecord| {
        if io_error.is_none() {
            if let Err(e) = writeln!(csv, "{},{},{},{},{}", r.iteration, r.split, r.elbo, r.loglik, r.kl_qp) {
                io_error = Some(e);
            }
        }
        if r.iteration.is_multiple_of(100) {
            info!("{} {:>6} elbo {:.3} loglik {:.3}", r.split, r.iteration, r.elbo, r.loglik);
        }
    });
    csv.flush().with_context(|| format!("writing {}", csv_path.display()))?;
    if let Some(e) = io_error {
        return Err(e).with_context(|| format!("writing {}", csv_path.display()));
    }
    let report = match result {
        Err(Error::NonFinite { iteration }) => {
            bail!(
                "non-finite ELBO or gradient at iteration {iteration}; partial trajectory kept in {}",
                csv_path.display()
            )
        }
        other => other?,
    };
    info!("trained {} iterations in {:.1?}", cfg.iterations, report.duration);

    let est = report.estimates;
    write_file(&cfg.output_dir.join(ESTIMATES_FILE), &format!("# {header}\n{}", render_estimates(cfg.model, &est)))?;
    Ok(est)
}

pub fn render_estimates(model: ModelFamily, e: &PointEstimates) -> String {
    let mut out = format!("model={model}\nbranches={}\n", format_list(&e.branches));
    if let Some(k) = e.kappa {
        out.push_str(&format!("kappa={k}\n"));
    }
    if let Some(rho) = &e.rho {
        out.push_str(&format!("rho={}\n", format_list(rho)));
    }
    if let Some(pi) = &e.pi {
        out.push_str(&format!("pi={}\n", format_list(pi)));
    }
    out
}

pub fn parse_estimates(text: &str) -> Result<(ModelFamily, PointEstimates)> {
    let mut model = None;
    let mut est = PointEstimates { branches: Vec::new(), kappa: None, rho: None, pi: None };
    for (k, v) in parse_pairs(text)? {
        match k.as_str() {
            "model" => model = Some(v.parse::<ModelFamily>().map_err(|e| anyhow!("model: {e}"))?),
            "branches" => est.branches = parse_list(&k, &v)?,
            "kappa" => est.kappa = Some(v.parse().map_err(|e| anyhow!("kappa: {e}"))?),
            "rho" => est.rho = Some(parse_list(&k, &v)?),
            "pi" => est.pi = Some(parse_list(&k, &v)?),
            _ => bail!("unknown estimates key {k:?}"),
        }
    }
    let model = model.ok_or_else(|| anyhow!("estimates file has no model"))?;
    Ok((model, est))
}

/// One metrics row. `corr`/`pval` are `None` when the correlation is
/// undefined or meaningless (a single κ value).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub group: &'static str,
    pub dist: f64,
    pub corr: Option<f64>,
    pub pval: Option<f64>,
    pub ratio: Option<f64>,
}

impl MetricsRow {
    fn csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.group, self.dist, cell(self.corr), cell(self.pval), cell(self.ratio))
    }
}

fn vector_row(group: &'static str, est: &[f64], truth: &[f64]) -> Result<MetricsRow> {
    let dist = euclidean(est, truth).with_context(|| format!("group {group}"))?;
    let (corr, pval) = match pearson(est, truth) {
        Ok((c, p)) => (Some(c), Some(p)),
        Err(e @ Error::UndefinedCorrelation(_)) => {
            warn!("{group}: correlation undefined ({e}); leaving the cell empty");
            (None, None)
        }
        Err(e) => return Err(e).with_context(|| format!("group {group}")),
    };
    Ok(MetricsRow { group, dist, corr, pval, ratio: None })
}

/// Compares estimates against the truth recorded in a simulation manifest.
pub fn evaluate(model: ModelFamily, est: &PointEstimates, truth: &RunConfig) -> Result<Vec<MetricsRow>> {
    ensure!(model == truth.model, "estimates are for {model} but the manifest simulated {}", truth.model);
    let mut rows = vec![vector_row("branches", &est.branches, &truth.branches)?];
    match model {
        ModelFamily::Jc69 => {}
        ModelFamily::K80 => {
            let k = est.kappa.ok_or_else(|| anyhow!("K80 estimates need kappa"))?;
            rows.push(MetricsRow {
                group: "kappa",
                dist: (k - truth.kappa).abs(),
                corr: None,
                pval: None,
                ratio: Some(kappa_ratio(k, truth.kappa)?),
            });
        }
        ModelFamily::Gtr => {
            let rho = est.rho.as_ref().ok_or_else(|| anyhow!("GTR estimates need rho"))?;
            let pi = est.pi.as_ref().ok_or_else(|| anyhow!("GTR estimates need pi"))?;
            rows.push(vector_row("rates", rho, &truth.rho)?);
            rows.push(vector_row("frequencies", pi, &truth.pi)?);
        }
    }
    Ok(rows)
}

pub fn run_evaluate(estimates: &Path, manifest: &Path, output_dir: &Path) -> Result<Vec<MetricsRow>> {
    let out = output_path(output_dir, METRICS_FILE)?;
    let text = std::fs::read_to_string(estimates).with_context(|| format!("reading {}", estimates.display()))?;
    let (model, est) = parse_estimates(&text).with_context(|| format!("in {}", estimates.display()))?;
    let truth = RunConfig::load(manifest)?;
    let rows = evaluate(model, &est, &truth)?;
    let mut csv = format!("# {}\n{METRICS_HEADER}\n", truth.repro_header());
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write_file(&out, &csv)?;
    Ok(rows)
}

/// `result.true_log_likelihood` from a manifest.
pub fn manifest_log_likelihood(manifest: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let (_, v) = parse_pairs(&text)?
        .into_iter()
        .find(|(k, _)| k == "result.true_log_likelihood")
        .ok_or_else(|| anyhow!("{} has no true log likelihood", manifest.display()))?;
    Ok(v.parse()?)
}
