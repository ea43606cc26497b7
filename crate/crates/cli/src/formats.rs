//! CSV and JSON file formats.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use persidskii::certify::IssCertificate;
use persidskii::koopman::{Dictionary, Identified, LiftedModel};
use persidskii::model::Trajectory;
use persidskii::pmsm::Table;
use serde_json::{json, Value};

use crate::config::{observable_descriptor, NonlinearitySpec};
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// 17 significant digits, enough to round-trip every `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| CliError::Format(format!("{}: not a number: {s:?}", path.display())))
}

const STATUS_LABELS: [&str; 4] = ["bounded", "beyond_range", "infeasible_at_zero", "inconclusive"];

/// Region tables carry the boundary status as a code; files use its label.
fn status_column(table: &Table) -> Option<usize> {
    table.columns.iter().position(|c| c == "status").filter(|_| table.columns.iter().any(|c| c == "tau_boundary_s"))
}

pub fn status_label(code: f64) -> &'static str {
    STATUS_LABELS.get(code as usize).copied().unwrap_or("inconclusive")
}

pub fn write_table_csv(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&table.columns).map_err(|e| csv_err(path, e))?;
    let status = status_column(table);
    for row in &table.rows {
        let rec = row.iter().enumerate().map(|(j, v)| if Some(j) == status { status_label(*v).to_string() } else { fmt_f64(*v) });
        w.write_record(rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_table_csv(path: &Path, name: &str) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let columns: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    let mut table = Table { name: name.into(), columns, rows: vec![] };
    let status = status_column(&table);
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != table.columns.len() {
            return Err(CliError::Format(format!("{}: ragged row", path.display())));
        }
        let row = rec.iter().enumerate().map(|(j, s)| match STATUS_LABELS.iter().position(|l| *l == s) {
            Some(code) if Some(j) == status => Ok(code as f64),
            _ => parse_f64(s, path),
        });
        table.rows.push(row.collect::<Result<_>>()?);
    }
    Ok(table)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Format(format!("{}: {e}", path.display()))
}

/// `t,x1..xn[,w1..wm]`.
pub fn trajectory_table(traj: &Trajectory, name: &str) -> Table {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.inputs.as_ref().and_then(|u| u.first()).map_or(0, |u| u.len());
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.extend((1..=m).map(|i| format!("w{i}")));
    let mut table = Table { name: name.into(), columns: cols, rows: vec![] };
    for (k, t) in traj.times.iter().enumerate() {
        let mut row = vec![*t];
        row.extend(traj.states[k].iter());
        if let Some(u) = &traj.inputs {
            row.extend(u[k].iter());
        }
        table.rows.push(row);
    }
    table
}

/// Uniformly sampled training data `t,x1..xn,u1..um`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

pub fn read_training_csv(path: &Path) -> Result<TrainingData> {
    let table = read_table_csv(path, "training")?;
    let bad = |m: &str| CliError::Format(format!("{}: {m}", path.display()));
    if table.columns.first().map(String::as_str) != Some("t") {
        return Err(bad("first column must be t"));
    }
    let xs: Vec<usize> = (0..table.columns.len()).filter(|&j| table.columns[j].starts_with('x')).collect();
    let us: Vec<usize> = (0..table.columns.len()).filter(|&j| table.columns[j].starts_with('u')).collect();
    if xs.is_empty() || xs.len() + us.len() + 1 != table.columns.len() {
        return Err(bad("header must be t,x1..xn,u1..um"));
    }
    if table.rows.len() < 3 {
        return Err(bad("need at least three samples"));
    }
    let t: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
    let dt = t[1] - t[0];
    if !(dt > 0.0) || t.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0)) {
        return Err(bad("samples must be uniform in t"));
    }
    let pick = |idx: &[usize]| table.rows.iter().map(|r| DVector::from_iterator(idx.len(), idx.iter().map(|&j| r[j]))).collect();
    Ok(TrainingData { dt, states: pick(&xs), inputs: pick(&us) })
}

pub fn matrix_json(m: &DMatrix<f64>) -> Value {
    let data: Vec<f64> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    json!({ "rows": m.nrows(), "cols": m.ncols(), "data": data })
}

pub fn matrix_from_json(v: &Value) -> Result<DMatrix<f64>> {
    let bad = || CliError::Format("matrix needs rows, cols and data".into());
    let rows = v["rows"].as_u64().ok_or_else(bad)? as usize;
    let cols = v["cols"].as_u64().ok_or_else(bad)? as usize;
    let data: Vec<f64> = v["data"].as_array().ok_or_else(bad)?.iter().map(|x| x.as_f64().ok_or_else(bad)).collect::<Result<_>>()?;
    if data.len() != rows * cols {
        return Err(bad());
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn vector_json(v: &DVector<f64>) -> Value {
    json!({ "rows": v.len(), "cols": 1, "data": v.as_slice() })
}

pub fn certificate_json(cert: &IssCertificate) -> Value {
    json!({
        "format_version": FORMAT_VERSION,
        "form": cert.form.as_str(),
        "gamma": cert.gamma,
        "tau": cert.tau,
        "margin": cert.margin,
        "overall_margin": cert.overall_margin,
        "eps_strict": cert.eps_strict,
        "matrices": {
            "p": matrix_json(&cert.p),
            "q": matrix_json(&cert.q),
            "s": matrix_json(&cert.s),
            "lambda": matrix_json(&cert.lambda),
            "t_delayed": vector_json(&cert.t_delayed),
            "t_current": vector_json(&cert.t_current),
        },
    })
}

pub fn model_json(model: &LiftedModel, dict: &Dictionary, id: Option<&Identified>) -> Value {
    let phi: Vec<Value> = model
        .phi
        .iter()
        .map(|nl| NonlinearitySpec::from_core(nl).map_or(Value::Null, |s| serde_json::to_value(s).unwrap_or(Value::Null)))
        .collect();
    let mut v = json!({
        "format_version": FORMAT_VERSION,
        "dt": model.dt,
        "dictionary": {
            "n": dict.n,
            "observables": dict.observables.iter().map(observable_descriptor).collect::<Vec<_>>(),
        },
        "a_k": matrix_json(&model.a_k),
        "b_k": matrix_json(&model.b_k),
        "c_k": matrix_json(&model.c_k),
        "d_k": matrix_json(&model.d_k),
        "sector_bounds": model.phi.iter().map(|nl| nl.sigma).collect::<Vec<_>>(),
        "nonlinearities": phi,
    });
    if let Some(id) = id {
        let r = &id.report;
        v["report"] = json!({
            "rmse_unconstrained": r.rmse_unconstrained,
            "rmse_constrained": r.rmse_constrained,
            "lmi_margin": r.lmi_margin,
            "eps_strict": r.eps_strict,
            "iterations": r.iterations,
            "converged": r.converged,
            "feasible": r.feasible,
            "regularized": r.regularized,
        });
        if let Some(c) = &id.certificate {
            v["certificate"] = certificate_json(c);
        }
    }
    v
}

pub fn write_json(value: &Value, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}
