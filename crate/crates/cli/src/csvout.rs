//! CSV tables. Every file starts with its header; absent values are empty
//! fields, never zeros.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use sigvae::metrics::{MetricsRecord, MiEstimate, SweepRow};
use sigvae::training::StepRecord;
use sigvae::{Error, Result};

pub const METRIC_COLUMNS: [&str; 15] = [
    "step",
    "epoch",
    "total",
    "distortion",
    "rate",
    "sigma",
    "beta_eff_text",
    "beta_eff_eq7",
    "neg_elbo_test",
    "neg_elbo_test_discretized",
    "mi",
    "marginal_kl",
    "sigma_stderr_inner_pct",
    "sigma_stderr_outer_pct",
    "wall_ms",
];

pub const SWEEP_COLUMNS: [&str; 19] = [
    "label",
    "objective",
    "beta",
    "sharing",
    "sigma_params",
    "seed",
    "status",
    "neg_elbo_test",
    "neg_elbo_test_discretized",
    "distortion",
    "rate",
    "mi",
    "marginal_kl",
    "sigma",
    "beta_eff_text",
    "beta_eff_eq7",
    "sigma_stderr_inner_pct",
    "sigma_stderr_outer_pct",
    "error",
];

pub const MI_COLUMNS: [&str; 8] = [
    "n",
    "rate",
    "mi",
    "marginal_kl",
    "rate_mc",
    "marginal_kl_mc",
    "mi_stderr",
    "mi_bias_bound",
];

/// Shortest text that parses back to the same float.
fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn int<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: Option<u64>,
    pub epoch: Option<u64>,
    pub total: Option<f64>,
    pub distortion: Option<f64>,
    pub rate: Option<f64>,
    pub sigma: Option<f64>,
    pub beta_eff_text: Option<f64>,
    pub beta_eff_eq7: Option<f64>,
    pub neg_elbo_test: Option<f64>,
    pub neg_elbo_test_discretized: Option<f64>,
    pub mi: Option<f64>,
    pub marginal_kl: Option<f64>,
    pub sigma_stderr_inner_pct: Option<f64>,
    pub sigma_stderr_outer_pct: Option<f64>,
    pub wall_ms: Option<u64>,
}

impl MetricsRow {
    /// Training columns of one step. A β-VAE reports its β as the Eq7
    /// weight and twice that under the text convention; σ-VAEs report the
    /// weights their σ implies.
    pub fn from_step(rec: &StepRecord, is_beta_vae: bool) -> Self {
        let l = &rec.loss;
        let (text, eq7) = match (is_beta_vae, l.sigma) {
            (true, _) => (Some(2.0 * l.beta_effective), Some(l.beta_effective)),
            (false, Some(s)) => (Some(2.0 * s * s), Some(s * s)),
            (false, None) => (None, None),
        };
        MetricsRow {
            step: Some(rec.step),
            epoch: Some(rec.epoch),
            total: Some(l.total),
            distortion: Some(l.distortion),
            rate: Some(l.rate),
            sigma: l.sigma,
            beta_eff_text: text,
            beta_eff_eq7: eq7,
            ..Default::default()
        }
    }

    /// Test-set columns; σ and β are the test-time values.
    pub fn from_eval(step: u64, epoch: u64, m: &MetricsRecord) -> Self {
        MetricsRow {
            step: Some(step),
            epoch: Some(epoch),
            sigma: m.sigma,
            beta_eff_text: m.beta_eff_text,
            beta_eff_eq7: m.beta_eff_eq7,
            neg_elbo_test: Some(m.neg_elbo),
            neg_elbo_test_discretized: m.neg_elbo_discretized,
            mi: Some(m.mi_estimate),
            marginal_kl: Some(m.marginal_kl_estimate),
            sigma_stderr_inner_pct: m.sigma_stderr_inner_pct,
            sigma_stderr_outer_pct: m.sigma_stderr_outer_pct,
            ..Default::default()
        }
    }

    fn fields(&self) -> Vec<String> {
        vec![
            int(self.step),
            int(self.epoch),
            num(self.total),
            num(self.distortion),
            num(self.rate),
            num(self.sigma),
            num(self.beta_eff_text),
            num(self.beta_eff_eq7),
            num(self.neg_elbo_test),
            num(self.neg_elbo_test_discretized),
            num(self.mi),
            num(self.marginal_kl),
            num(self.sigma_stderr_inner_pct),
            num(self.sigma_stderr_outer_pct),
            int(self.wall_ms),
        ]
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let kind = std::io::ErrorKind::Other;
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io {
            path: path.into(),
            source: io,
        },
        other => Error::Io {
            path: path.into(),
            source: std::io::Error::new(kind, format!("{other:?}")),
        },
    }
}

/// A CSV file written row by row and flushed after each row.
pub struct Table {
    path: std::path::PathBuf,
    w: csv::Writer<File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut t = Table {
            path: path.into(),
            w: csv::Writer::from_writer(file),
        };
        t.row(header.iter().map(|s| s.to_string()).collect())?;
        Ok(t)
    }

    fn row(&mut self, fields: Vec<String>) -> Result<()> {
        self.w.write_record(&fields).map_err(|e| csv_err(&self.path, e))?;
        self.w.flush().map_err(|e| Error::Io {
            path: self.path.clone(),
            source: e,
        })
    }

    pub fn metrics(&mut self, r: &MetricsRow) -> Result<()> {
        self.row(r.fields())
    }

    pub fn sweep(&mut self, r: &SweepRow) -> Result<()> {
        let m = r.record.as_ref();
        let f = |g: fn(&MetricsRecord) -> Option<f64>| num(m.and_then(g));
        self.row(vec![
            r.label.clone(),
            r.objective.clone(),
            num(r.beta),
            r.sharing.clone().unwrap_or_default(),
            int(r.sigma_params),
            r.seed.to_string(),
            if r.record.is_some() { "ok" } else { "FAILED" }.into(),
            f(|m| Some(m.neg_elbo)),
            f(|m| m.neg_elbo_discretized),
            f(|m| Some(m.distortion)),
            f(|m| Some(m.rate)),
            f(|m| Some(m.mi_estimate)),
            f(|m| Some(m.marginal_kl_estimate)),
            f(|m| m.sigma),
            f(|m| m.beta_eff_text),
            f(|m| m.beta_eff_eq7),
            f(|m| m.sigma_stderr_inner_pct),
            f(|m| m.sigma_stderr_outer_pct),
            r.error.clone().unwrap_or_default(),
        ])
    }

    pub fn mi(&mut self, e: &MiEstimate) -> Result<()> {
        self.row(vec![
            e.n.to_string(),
            num(Some(e.rate)),
            num(Some(e.mi)),
            num(Some(e.marginal_kl)),
            num(Some(e.rate_mc)),
            num(Some(e.marginal_kl_mc)),
            num(Some(e.mi_stderr)),
            num(Some(e.mi_bias_bound)),
        ])
    }
}

/// Writes bytes to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::Io {
        path: path.into(),
        source: e,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = File::create(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}
