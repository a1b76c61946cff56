//! Fixed-effects panel regression via the within estimator.
//!
//! Responses and covariates are demeaned within each individual, absorbing
//! all individual-level constants, then fitted by OLS. Inference is
//! classical: homoskedastic standard errors with the absorbed effects
//! counted against the degrees of freedom, two-sided t-tests, and an
//! adjusted within-R^2. Cluster-robust (by individual) covariance is
//! available as an option. Covariates with no within-individual variation
//! are dropped and reported, never silently included.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// One panel row: an individual, an occasion label, the response, and named
/// covariates.
#[derive(Debug, Clone)]
pub struct PanelObservation {
    pub individual_id: String,
    pub occasion: String,
    pub response: f64,
    pub covariates: Vec<(String, f64)>,
}

/// Column-ordered panel ready for fitting.
#[derive(Debug, Clone)]
pub struct Panel {
    pub covariate_names: Vec<String>,
    individuals: Vec<String>,
    responses: Vec<f64>,
    /// Row-major `n x k`.
    values: Vec<f64>,
}

impl Panel {
    pub fn from_observations(obs: &[PanelObservation]) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::EmptyInput("empty panel".into()));
        }
        let names: Vec<String> = obs[0].covariates.iter().map(|(n, _)| n.clone()).collect();
        let k = names.len();
        let mut individuals = Vec::with_capacity(obs.len());
        let mut responses = Vec::with_capacity(obs.len());
        let mut values = Vec::with_capacity(obs.len() * k);
        for (i, o) in obs.iter().enumerate() {
            if o.individual_id.is_empty() {
                return Err(Error::Dimension(format!("row {i}: empty individual id")));
            }
            if o.covariates.len() != k
                || o.covariates.iter().zip(&names).any(|((n, _), e)| n != e)
            {
                return Err(Error::Dimension(format!(
                    "row {i}: covariate names differ from first row"
                )));
            }
            if !o.response.is_finite() || o.covariates.iter().any(|(_, v)| !v.is_finite()) {
                return Err(Error::Dimension(format!("row {i}: non-finite value")));
            }
            individuals.push(o.individual_id.clone());
            responses.push(o.response);
            values.extend(o.covariates.iter().map(|(_, v)| *v));
        }
        Ok(Panel {
            covariate_names: names,
            individuals,
            responses,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.responses.len()
    }

    fn k(&self) -> usize {
        self.covariate_names.len()
    }

    fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.k() + col]
    }
}

/// Within-demeaned panel plus bookkeeping from the transform.
#[derive(Debug, Clone)]
pub struct WithinPanel {
    pub covariate_names: Vec<String>,
    /// Row indices kept from the source panel.
    pub kept_rows: Vec<usize>,
    pub individual_of_row: Vec<usize>,
    pub n_individuals: usize,
    pub dropped_singletons: usize,
    pub responses: Vec<f64>,
    /// Row-major `n x k` demeaned covariates.
    pub values: Vec<f64>,
    /// Per-individual response means (diagnostics).
    pub group_means: Vec<f64>,
}

/// Demean response and covariates within each individual. Individuals with
/// a single observation carry no within information and are dropped (their
/// count is reported).
pub fn within_transform(panel: &Panel) -> Result<WithinPanel> {
    let k = panel.k();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in panel.individuals.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let mut dropped_singletons = 0usize;
    let mut kept_rows = Vec::new();
    let mut individual_of_row = Vec::new();
    let mut responses = Vec::new();
    let mut values = Vec::new();
    let mut group_means = Vec::new();
    let mut g_idx = 0usize;
    for (_, rows) in groups {
        if rows.len() < 2 {
            dropped_singletons += 1;
            continue;
        }
        let n = rows.len() as f64;
        let y_mean: f64 = rows.iter().map(|&r| panel.responses[r]).sum::<f64>() / n;
        let mut x_means = vec![0.0f64; k];
        for &r in &rows {
            for (c, xm) in x_means.iter_mut().enumerate() {
                *xm += panel.value(r, c);
            }
        }
        for xm in &mut x_means {
            *xm /= n;
        }
        for &r in &rows {
            kept_rows.push(r);
            individual_of_row.push(g_idx);
            responses.push(panel.responses[r] - y_mean);
            for (c, xm) in x_means.iter().enumerate() {
                values.push(panel.value(r, c) - xm);
            }
        }
        group_means.push(y_mean);
        g_idx += 1;
    }
    if g_idx == 0 {
        return Err(Error::InsufficientData(
            "every individual has fewer than 2 observations".into(),
        ));
    }
    Ok(WithinPanel {
        covariate_names: panel.covariate_names.clone(),
        kept_rows,
        individual_of_row,
        n_individuals: g_idx,
        dropped_singletons,
        responses,
        values,
        group_means,
    })
}

/// One fitted covariate.
#[derive(Debug, Clone, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_err: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

/// Full fit report.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub coefficients: Vec<Coefficient>,
    /// Covariates excluded before fitting, with the reason.
    pub dropped: Vec<(String, String)>,
    pub r2_within: f64,
    pub adj_r2: f64,
    pub n_obs: usize,
    pub n_individuals: usize,
    pub dropped_singletons: usize,
    pub dof: usize,
    pub cluster_robust: bool,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

const ZERO_VARIANCE_EPS: f64 = 1e-12;

/// Fit the within estimator on the selected covariates (all, if the list is
/// empty). `cluster_robust` switches the covariance to a by-individual
/// sandwich with a `G/(G-1)` small-sample factor.
pub fn fit_fe(panel: &Panel, covariates: &[&str], cluster_robust: bool) -> Result<FitResult> {
    let selection: Vec<usize> = if covariates.is_empty() {
        (0..panel.k()).collect()
    } else {
        covariates
            .iter()
            .map(|name| {
                panel
                    .covariate_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Dimension(format!("unknown covariate `{name}`")))
            })
            .collect::<Result<_>>()?
    };

    let w = within_transform(panel)?;
    let n = w.responses.len();
    let k_all = w.covariate_names.len();

    // Drop covariates without within variation before looking at rank.
    let mut dropped = Vec::new();
    let mut live = Vec::new();
    for &c in &selection {
        let var: f64 = (0..n).map(|r| w.values[r * k_all + c].powi(2)).sum::<f64>() / n as f64;
        if var <= ZERO_VARIANCE_EPS {
            dropped.push((w.covariate_names[c].clone(), "zero within-variance".to_string()));
        } else {
            live.push(c);
        }
    }
    let k = live.len();
    if k == 0 {
        return Err(Error::InsufficientData(
            "no covariate retains within-individual variation".into(),
        ));
    }
    if n <= w.n_individuals + k {
        return Err(Error::InsufficientData(format!(
            "{n} observations cannot identify {k} covariates plus {} fixed effects",
            w.n_individuals
        )));
    }

    let x = DMatrix::from_fn(n, k, |r, c| w.values[r * k_all + live[c]]);
    let y = DVector::from_fn(n, |r, _| w.responses[r]);

    // Rank check by greedy orthogonalization: a column whose residual
    // against the accepted ones collapses is linearly dependent.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad: Vec<String> = Vec::new();
    for c in 0..k {
        let col = x.column(c).into_owned();
        let orig_norm = col.norm();
        let mut resid = col;
        for b in &basis {
            let proj = b.dot(&resid);
            resid -= b * proj;
        }
        if resid.norm() <= orig_norm * 1e-10 {
            bad.push(w.covariate_names[live[c]].clone());
        } else {
            let norm = resid.norm();
            basis.push(resid / norm);
        }
    }
    if !bad.is_empty() {
        bad.sort();
        return Err(Error::Collinear { columns: bad });
    }

    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let chol = xtx.clone().cholesky().ok_or_else(|| Error::Collinear {
        columns: live.iter().map(|&c| w.covariate_names[c].clone()).collect(),
    })?;
    let beta = chol.solve(&xty);
    let xtx_inv = chol.inverse();

    let resid = &y - &x * &beta;
    let rss: f64 = resid.iter().map(|v| v * v).sum();
    let tss: f64 = y.iter().map(|v| v * v).sum();
    let dof = n - w.n_individuals - k;
    let sigma2 = rss / dof as f64;

    let cov = if cluster_robust {
        // by-individual sandwich
        let mut meat = DMatrix::<f64>::zeros(k, k);
        let mut start = 0usize;
        while start < n {
            let g = w.individual_of_row[start];
            let mut end = start;
            while end < n && w.individual_of_row[end] == g {
                end += 1;
            }
            let mut score = DVector::<f64>::zeros(k);
            for r in start..end {
                for c in 0..k {
                    score[c] += x[(r, c)] * resid[r];
                }
            }
            meat += &score * score.transpose();
            start = end;
        }
        let g = w.n_individuals as f64;
        let factor = g / (g - 1.0);
        &xtx_inv * meat * &xtx_inv * factor
    } else {
        &xtx_inv * sigma2
    };

    let t_dist = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::Dimension(format!("bad dof {dof}: {e}")))?;
    let coefficients = (0..k)
        .map(|c| {
            let estimate = beta[c];
            let std_err = cov[(c, c)].max(0.0).sqrt();
            let t_stat = if std_err > 0.0 { estimate / std_err } else { 0.0 };
            let p_value = 2.0 * (1.0 - t_dist.cdf(t_stat.abs()));
            Coefficient {
                name: w.covariate_names[live[c]].clone(),
                estimate,
                std_err,
                t_stat,
                p_value,
            }
        })
        .collect();

    let r2_within = 1.0 - rss / tss;
    let adj_r2 = 1.0 - (1.0 - r2_within) * (n as f64 - 1.0) / dof as f64;
    Ok(FitResult {
        coefficients,
        dropped,
        r2_within,
        adj_r2,
        n_obs: n,
        n_individuals: w.n_individuals,
        dropped_singletons: w.dropped_singletons,
        dof,
        cluster_robust,
    })
}

/// Significance stars per the usual convention.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Multi-column text table: coefficients with stars over t-statistics in
/// parentheses, then observation counts, adjusted R^2 and the fixed-effect
/// marker row.
pub fn report_table(fits: &[(String, FitResult)]) -> String {
    let mut names: Vec<String> = Vec::new();
    for (_, fit) in fits {
        for c in &fit.coefficients {
            if !names.contains(&c.name) {
                names.push(c.name.clone());
            }
        }
        for (d, _) in &fit.dropped {
            if !names.contains(d) {
                names.push(d.clone());
            }
        }
    }
    let name_w = names.iter().map(|n| n.len()).max().unwrap_or(8).max(14);
    let col_w = 18usize;
    let mut out = String::new();
    out.push_str(&format!("{:name_w$}", ""));
    for (i, (label, _)) in fits.iter().enumerate() {
        let head = if label.is_empty() {
            format!("({})", i + 1)
        } else {
            format!("({}) {label}", i + 1)
        };
        out.push_str(&format!("{head:>col_w$}"));
    }
    out.push('\n');
    for name in &names {
        out.push_str(&format!("{name:name_w$}"));
        let mut t_row = format!("{:name_w$}", "");
        let mut any_t = false;
        for (_, fit) in fits {
            if let Some(c) = fit.coefficient(name) {
                out.push_str(&format!(
                    "{:>col_w$}",
                    format!("{:.4}{}", c.estimate, stars(c.p_value))
                ));
                t_row.push_str(&format!("{:>col_w$}", format!("({:.2})", c.t_stat)));
                any_t = true;
            } else if fit.dropped.iter().any(|(d, _)| d == name) {
                out.push_str(&format!("{:>col_w$}", "dropped"));
                t_row.push_str(&format!("{:>col_w$}", ""));
            } else {
                out.push_str(&format!("{:>col_w$}", ""));
                t_row.push_str(&format!("{:>col_w$}", ""));
            }
        }
        out.push('\n');
        if any_t {
            out.push_str(t_row.trim_end());
            out.push('\n');
        }
    }
    out.push_str(&format!(
        "{:-<width$}\n",
        "",
        width = name_w + col_w * fits.len()
    ));
    let mut push_row = |label: &str, f: &dyn Fn(&FitResult) -> String| {
        out.push_str(&format!("{label:name_w$}"));
        for (_, fit) in fits {
            out.push_str(&format!("{:>col_w$}", f(fit)));
        }
        out.push('\n');
    };
    push_row("Obs", &|f| f.n_obs.to_string());
    push_row("Individuals", &|f| f.n_individuals.to_string());
    push_row("Adjusted R2", &|f| format!("{:.4}", f.adj_r2));
    push_row("Individual FE", &|_| "YES".to_string());
    out.push_str("Note: * p<0.1; ** p<0.05; *** p<0.01\n");
    out
}

/// Write fit results as JSON (machine-readable companion to the table).
pub fn write_fits_json(fits: &[(String, FitResult)], path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct Entry<'a> {
        label: &'a str,
        #[serde(flatten)]
        fit: &'a FitResult,
    }
    let entries: Vec<Entry> = fits
        .iter()
        .map(|(label, fit)| Entry { label, fit })
        .collect();
    let file = File::create(path.as_ref())?;
    serde_json::to_writer_pretty(BufWriter::new(file), &entries)?;
    Ok(())
}

/// One parsed row of the similarity panel CSV.
#[derive(Debug, Clone)]
pub struct PanelCsvRow {
    pub pair_id: String,
    pub group: String,
    pub metric: String,
    pub alpha: f64,
    pub prefix_len: f64,
    pub token_len: f64,
    pub surprisal_mean_norm: f64,
    pub entropy_mean_norm: f64,
    pub delta_sim: f64,
}

/// Read the panel CSV emitted by the flocking experiment.
pub fn read_panel_csv(path: impl AsRef<Path>) -> Result<Vec<PanelCsvRow>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            let expect = "pair_id,group,metric,alpha,prefix_len,token_len,surprisal_mean_norm,entropy_mean_norm,delta_sim";
            if line.trim() != expect {
                return Err(Error::format("panel header", format!("expected `{expect}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::format(
                format!("panel line {}", i + 1),
                format!("expected 9 fields, got {}", parts.len()),
            ));
        }
        let num = |idx: usize| -> Result<f64> {
            parts[idx].parse().map_err(|_| {
                Error::format(
                    format!("panel line {}", i + 1),
                    format!("bad number `{}`", parts[idx]),
                )
            })
        };
        rows.push(PanelCsvRow {
            pair_id: parts[0].to_string(),
            group: parts[1].to_string(),
            metric: parts[2].to_string(),
            alpha: num(3)?,
            prefix_len: num(4)?,
            token_len: num(5)?,
            surprisal_mean_norm: num(6)?,
            entropy_mean_norm: num(7)?,
            delta_sim: num(8)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("panel CSV has no data rows".into()));
    }
    Ok(rows)
}
