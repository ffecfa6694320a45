use std::fmt::Write as _;

use anyhow::{bail, Result};
use clap::ValueEnum;
use doateleop_core::{Scenario, TrialReport, Vec2};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Total,
    Mean,
}

/// One header row and one value row, nested fields joined with `.`.
pub fn report_csv(r: &TrialReport) -> Result<String> {
    let mut cols = Vec::new();
    flatten("", &serde_json::to_value(r)?, &mut cols);
    let esc = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_owned()
        }
    };
    let header: Vec<_> = cols.iter().map(|(k, _)| esc(k)).collect();
    let values: Vec<_> = cols.iter().map(|(_, v)| esc(v)).collect();
    Ok(format!("{}\n{}\n", header.join(","), values.join(",")))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_owned() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, x)| flatten(&key(k), x, out)),
        Value::Array(a) => {
            let items: Vec<_> = a.iter().map(|x| x.to_string().trim_matches('"').to_owned()).collect();
            out.push((prefix.to_owned(), items.join(" ")));
        }
        Value::Null => out.push((prefix.to_owned(), String::new())),
        Value::String(s) => out.push((prefix.to_owned(), s.clone())),
        other => out.push((prefix.to_owned(), other.to_string())),
    }
}

/// RSS samples on a regular grid; `values[j][i]` is at `(x0 + i·step, y0 + j·step)`.
#[derive(Debug, Serialize)]
pub struct ProbeGrid {
    pub component: Component,
    pub x0: f64,
    pub y0: f64,
    pub step: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<Vec<f64>>,
}

pub fn probe(scenario: &Scenario, seed: u64, step: f64, time: f64, component: Component) -> Result<ProbeGrid> {
    if !(step.is_finite() && step > 0.0) {
        bail!("--step must be positive");
    }
    let field = scenario.map.build()?.with_fading_seed(seed);
    let b = field.bounds();
    let nx = ((b.max.x - b.min.x) / step).floor() as usize + 1;
    let ny = ((b.max.y - b.min.y) / step).floor() as usize + 1;
    if nx.saturating_mul(ny) > 4_000_000 {
        bail!("grid of {nx} x {ny} points is too large; raise --step");
    }
    let values = (0..ny)
        .map(|j| {
            (0..nx)
                .map(|i| {
                    let p = Vec2::new(b.min.x + i as f64 * step, b.min.y + j as f64 * step);
                    match component {
                        Component::Total => field.rss_at(p, time),
                        Component::Mean => field.path_loss_rss(p) - field.wall_loss(p),
                    }
                })
                .collect()
        })
        .collect();
    Ok(ProbeGrid {
        component,
        x0: b.min.x,
        y0: b.min.y,
        step,
        nx,
        ny,
        values,
    })
}

impl ProbeGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,rss_dbm\n");
        for (j, row) in self.values.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", self.x0 + i as f64 * self.step, self.y0 + j as f64 * self.step, v);
            }
        }
        out
    }

    /// Rounded dBm matrix with the top row at the largest y.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for row in self.values.iter().rev() {
            let cells: Vec<_> = row.iter().map(|v| format!("{:4.0}", v)).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }
}
