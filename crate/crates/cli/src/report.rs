//! Report tables and charts assembled from the artifacts of earlier stages.
//! Missing inputs are skipped and listed in the report index.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rsgcir_core::panel::{build_spreads, Segment, SpreadKind};
use serde::Serialize;

use crate::artifacts::StageOutput;
use crate::pipeline::{load_panel, names, read_classification, RunContext, StageEstimates};
use crate::svg::{spans, LineChart, Series};
use crate::CliError;

/// Records of a CSV artifact keyed by header, or `None` if absent.
fn read_rows(path: &Path) -> Result<Option<Vec<BTreeMap<String, String>>>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(Some(rows))
}

fn field<'a>(row: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    row.get(key).map_or("", String::as_str)
}

/// A decimal string scaled by `factor` with fixed decimals; non-numeric
/// values pass through.
fn scaled(v: &str, factor: f64, decimals: usize) -> String {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => format!("{:.decimals$}", x * factor),
        _ => v.to_string(),
    }
}

#[derive(Debug, Default, Serialize)]
struct ReportIndex {
    tables: Vec<String>,
    charts: Vec<String>,
    skipped: Vec<String>,
}

struct Report<'a> {
    ctx: &'a RunContext,
    stage: &'a mut StageOutput,
    index: ReportIndex,
}

impl Report<'_> {
    fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = format!("report/{name}");
        let mut w = csv::Writer::from_path(self.stage.path(&path)?)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.index.tables.push(path);
        Ok(())
    }

    fn chart(&mut self, name: &str, chart: &LineChart) -> Result<(), CliError> {
        let path = format!("report/{name}");
        self.stage.write_text(&path, &chart.render())?;
        self.index.charts.push(path);
        Ok(())
    }

    fn skip(&mut self, what: &str, missing: &str) {
        self.index.skipped.push(format!("{what}: {missing} not found"));
    }

    fn input(&self, name: &str) -> std::path::PathBuf {
        self.ctx.out.join(name)
    }

    fn hmm_tables(&mut self) -> Result<(), CliError> {
        let Some(fits) = read_rows(&self.input(names::HMM_FIT))? else {
            self.skip("HMM tables", names::HMM_FIT);
            return Ok(());
        };
        let rows: Vec<Vec<String>> = fits
            .iter()
            .map(|r| {
                vec![
                    field(r, "group").to_string(),
                    field(r, "states").to_string(),
                    scaled(field(r, "loglik"), 1.0, 2),
                    scaled(field(r, "aic"), 1.0, 2),
                    scaled(field(r, "bic"), 1.0, 2),
                    field(r, "converged").to_string(),
                ]
            })
            .collect();
        self.table("hmm_selection.csv", &["group", "states", "loglik", "aic", "bic", "converged"], &rows)?;

        let moments = read_rows(&self.input(names::HMM_MOMENTS))?.unwrap_or_default();
        let durations = read_rows(&self.input(names::HMM_DURATIONS))?.unwrap_or_default();
        let rows: Vec<Vec<String>> = moments
            .iter()
            .map(|m| {
                let d = durations
                    .iter()
                    .find(|d| field(d, "group") == field(m, "group") && field(d, "state") == field(m, "state"));
                vec![
                    field(m, "group").to_string(),
                    field(m, "label").to_string(),
                    scaled(field(m, "mean_level_pct"), 1.0, 3),
                    scaled(field(m, "weight"), 1.0, 3),
                    d.map_or(String::new(), |d| scaled(field(d, "stay_probability"), 1.0, 4)),
                    d.map_or(String::new(), |d| scaled(field(d, "duration_years"), 1.0, 2)),
                ]
            })
            .collect();
        self.table(
            "hmm_regimes.csv",
            &["group", "regime", "mean_level_pct", "share_of_weeks", "stay_probability", "duration_years"],
            &rows,
        )
    }

    /// Parameters with a trailing regime label become one row with a column
    /// per regime; chain intensities and other names keep a row each.
    fn estimate_table(&mut self, name: &str, est: &StageEstimates, regimes: &[String]) -> Result<(), CliError> {
        let mut grouped: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (i, n) in est.names.iter().enumerate() {
            let se = est.robust_se.as_ref().or(est.bootstrap_se.as_ref()).map(|s| s[i]);
            let cell = match se {
                Some(se) => format!("{:.6} ({:.6})", est.estimates[i], se),
                None => format!("{:.6}", est.estimates[i]),
            };
            let (key, column) = match n.rsplit_once('.') {
                Some((head, label)) if regimes.iter().any(|r| r == label) && !n.starts_with("q") => {
                    (head.to_string(), label.to_string())
                }
                _ => (n.clone(), "value".to_string()),
            };
            grouped.entry(key).or_default().insert(column, cell);
        }
        let mut header: Vec<&str> = vec!["parameter"];
        header.extend(regimes.iter().map(String::as_str));
        header.push("value");
        let rows: Vec<Vec<String>> = grouped
            .iter()
            .map(|(k, cells)| {
                let mut row = vec![k.clone()];
                row.extend(regimes.iter().map(|r| cells.get(r).cloned().unwrap_or_default()));
                row.push(cells.get("value").cloned().unwrap_or_default());
                row
            })
            .collect();
        self.table(name, &header, &rows)
    }

    fn estimate_tables(&mut self) -> Result<(), CliError> {
        let model = self.ctx.loaded.config.model_state()?.model;
        let labels: Vec<String> = model.qr.labels().iter().chain(model.qc.labels()).cloned().collect();
        for (file, table, what) in [
            (names::RATE_ESTIMATES, "rate_parameters.csv", "rate parameter table"),
            (names::CREDIT_ESTIMATES, "credit_parameters.csv", "credit parameter table"),
        ] {
            let path = self.input(file);
            if path.exists() {
                let est = StageEstimates::read(&path)?;
                self.estimate_table(table, &est, &labels)?;
            } else {
                self.skip(what, file);
            }
        }
        Ok(())
    }

    fn pricing_error_table(&mut self) -> Result<(), CliError> {
        let Some(rows) = read_rows(&self.input(names::PRICING_ERRORS))? else {
            self.skip("pricing errors", names::PRICING_ERRORS);
            return Ok(());
        };
        let mut by_series: BTreeMap<(String, String), BTreeMap<String, &BTreeMap<String, String>>> = BTreeMap::new();
        for r in &rows {
            by_series
                .entry((field(r, "segment").to_string(), field(r, "maturity").to_string()))
                .or_default()
                .insert(field(r, "model").to_string(), r);
        }
        let mut out = Vec::new();
        for ((seg, mat), models) in &by_series {
            let mut row = vec![seg.clone(), mat.clone()];
            for m in ["switching", "single-regime"] {
                match models.get(m) {
                    Some(r) => row.extend([
                        scaled(field(r, "mean_bp"), 1.0, 2),
                        scaled(field(r, "sd_bp"), 1.0, 2),
                        scaled(field(r, "rrmse"), 1.0, 4),
                    ]),
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
            out.push(row);
        }
        self.table(
            "pricing_errors.csv",
            &[
                "segment",
                "maturity",
                "rs_mean_bp",
                "rs_sd_bp",
                "rs_rrmse",
                "single_mean_bp",
                "single_sd_bp",
                "single_rrmse",
            ],
            &out,
        )
    }

    fn decomposition_table(&mut self) -> Result<(), CliError> {
        let Some(rows) = read_rows(&self.input(names::DECOMPOSITION_SUMMARY))? else {
            self.skip("decomposition table", names::DECOMPOSITION_SUMMARY);
            return Ok(());
        };
        let out: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    field(r, "segment").to_string(),
                    field(r, "maturity").to_string(),
                    field(r, "regime").to_string(),
                    scaled(field(r, "sovereign"), 100.0, 3),
                    scaled(field(r, "policy_bank_spread"), 1e4, 1),
                    scaled(field(r, "corporate_spread"), 1e4, 1),
                ]
            })
            .collect();
        self.table(
            "decomposition.csv",
            &["segment", "maturity", "regime", "sovereign_pct", "policy_bank_spread_bp", "corporate_spread_bp"],
            &out,
        )
    }

    /// Date ranges the CGB HMM assigns to its highest-level state.
    fn high_rate_spans(&mut self) -> Result<(Vec<(NaiveDate, NaiveDate)>, Option<String>), CliError> {
        let path = self.input(names::HMM_CLASSIFICATION);
        if !path.exists() {
            self.skip("regime shading", names::HMM_CLASSIFICATION);
            return Ok((Vec::new(), None));
        }
        let (labels, probs) = read_classification(&path, "CGB")?;
        let Some(high) = labels.last() else { return Ok((Vec::new(), None)) };
        let dates: Vec<NaiveDate> = probs.keys().copied().collect();
        let flagged: Vec<bool> =
            probs.values().map(|p| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])) == Some(p.len() - 1)).collect();
        Ok((spans(&dates, &flagged), Some(format!("CGB HMM state {high}"))))
    }

    fn charts(&mut self) -> Result<(), CliError> {
        let panel = load_panel(self.ctx)?;
        let (shaded, shade_label) = self.high_rate_spans()?;
        let column = |j: usize, factor: f64| -> Vec<(NaiveDate, Option<f64>)> {
            panel.dates.iter().zip(&panel.values).map(|(d, row)| (*d, row[j].map(|v| v * factor))).collect()
        };
        let cgb: Vec<Series> = panel
            .maturities(Segment::Cgb)
            .into_iter()
            .filter_map(|m| {
                panel.column(Segment::Cgb, m).map(|j| Series { name: format!("{m}y"), points: column(j, 100.0) })
            })
            .collect();
        self.chart(
            "cgb_yields.svg",
            &LineChart {
                title: "Government bond yields".into(),
                y_label: "percent".into(),
                series: cgb,
                shaded: shaded.clone(),
                shade_label: shade_label.clone(),
            },
        )?;

        let spreads = build_spreads(&panel)?;
        let spread_series = |keep: &dyn Fn(&SpreadKind, f64) -> bool, label: &dyn Fn(&SpreadKind, f64) -> String| {
            spreads
                .series
                .iter()
                .enumerate()
                .filter(|(_, (k, m))| keep(k, *m))
                .map(|(j, (k, m))| Series {
                    name: label(k, *m),
                    points: spreads
                        .dates
                        .iter()
                        .zip(&spreads.values)
                        .map(|(d, row)| (*d, row[j].map(|v| v * 1e4)))
                        .collect(),
                })
                .collect::<Vec<_>>()
        };
        let policy = spread_series(&|k, _| *k == SpreadKind::PolicyBank, &|_, m| format!("{m}y"));
        self.chart(
            "cdb_spreads.svg",
            &LineChart {
                title: "Policy bank spread over government bonds".into(),
                y_label: "basis points".into(),
                series: policy,
                shaded: shaded.clone(),
                shade_label: shade_label.clone(),
            },
        )?;

        let corporate_mats: Vec<f64> =
            spreads.series.iter().filter(|(k, _)| matches!(k, SpreadKind::Corporate(_))).map(|(_, m)| *m).collect();
        let chart_mat = if corporate_mats.contains(&5.0) { Some(5.0) } else { corporate_mats.first().copied() };
        match chart_mat {
            Some(mat) => {
                let series =
                    spread_series(&|k, m| matches!(k, SpreadKind::Corporate(_)) && m == mat, &|k, _| k.to_string());
                self.chart(
                    "corporate_spreads.svg",
                    &LineChart {
                        title: format!("Corporate spreads over policy bank bonds, {mat}y"),
                        y_label: "basis points".into(),
                        series,
                        shaded: shaded.clone(),
                        shade_label: shade_label.clone(),
                    },
                )?;
            }
            None => self.index.skipped.push("corporate spreads: panel has no corporate yields".into()),
        }

        for (file, chart, title) in [
            (names::RATE_FILTERED, "rate_regimes.svg", "Filtered rate-regime probabilities"),
            (names::CREDIT_FILTERED, "credit_regimes.svg", "Filtered credit-regime probabilities"),
        ] {
            let Some(rows) = read_rows(&self.input(file))? else {
                self.skip(chart, file);
                continue;
            };
            let mut by_regime: BTreeMap<String, Vec<(NaiveDate, Option<f64>)>> = BTreeMap::new();
            let mut order: Vec<String> = Vec::new();
            for r in &rows {
                let date = NaiveDate::parse_from_str(field(r, "date"), "%Y-%m-%d")
                    .map_err(|e| CliError::Input(format!("{file}: {e}")))?;
                let regime = field(r, "regime").to_string();
                if !order.contains(&regime) {
                    order.push(regime.clone());
                }
                by_regime.entry(regime).or_default().push((date, field(r, "probability").parse().ok()));
            }
            let series = order
                .into_iter()
                .map(|name| {
                    let points = by_regime.remove(&name).unwrap_or_default();
                    Series { name, points }
                })
                .collect();
            self.chart(
                chart,
                &LineChart {
                    title: title.into(),
                    y_label: "probability".into(),
                    series,
                    shaded: shaded.clone(),
                    shade_label: shade_label.clone(),
                },
            )?;
        }
        Ok(())
    }
}

pub fn write_report(ctx: &RunContext, stage: &mut StageOutput) -> Result<(), CliError> {
    let mut report = Report { ctx, stage, index: ReportIndex::default() };
    report.hmm_tables()?;
    report.estimate_tables()?;
    report.pricing_error_table()?;
    report.decomposition_table()?;
    report.charts()?;
    for s in &report.index.skipped {
        log::info!("report: skipped {s}");
    }
    let index = std::mem::take(&mut report.index);
    stage.write_json("report/report.json", &index)
}
