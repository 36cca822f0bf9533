use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::driver::RunManifest;
use crate::error::{Error, Result};
use crate::eval::{avg_f1, from_csv, MetricsRecord};

pub const AVG_F1_HEADER: &str = "method,t,avg_macro,avg_micro,n_seeds";
/// Curves are drawn for the first few tasks only.
const CURVE_TASKS: usize = 5;
const COMPARED_SECTIONS: [&str; 4] = ["data", "model", "train", "eval"];

#[derive(Clone, Debug, PartialEq)]
pub struct AvgRow {
    pub method: String,
    pub t: usize,
    pub avg_macro: f64,
    pub avg_micro: f64,
    pub n_seeds: usize,
}

impl AvgRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method, self.t, self.avg_macro, self.avg_micro, self.n_seeds
        )
    }
}

fn flatten_json(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

/// Dotted keys under the compared sections whose values differ between runs.
pub fn incompatible_keys(manifests: &[RunManifest]) -> Result<Vec<String>> {
    let mut flat = Vec::with_capacity(manifests.len());
    for m in manifests {
        let v = serde_json::to_value(&m.config)?;
        let mut keys = BTreeMap::new();
        for section in COMPARED_SECTIONS {
            if let Some(s) = v.get(section) {
                flatten_json(section, s, &mut keys);
            }
        }
        flat.push(keys);
    }
    let Some(first) = flat.first() else {
        return Ok(Vec::new());
    };
    let mut bad = Vec::new();
    let all_keys: std::collections::BTreeSet<&String> = flat.iter().flat_map(|m| m.keys()).collect();
    for key in all_keys {
        if flat.iter().any(|m| m.get(key) != first.get(key)) {
            bad.push(key.clone());
        }
    }
    Ok(bad)
}

/// Mean over seeds of the per-seed AvgF1 at every `t` all seeds evaluated.
pub fn average_rows(method: &str, records: &[MetricsRecord]) -> Vec<AvgRow> {
    let mut by_seed: BTreeMap<u64, Vec<MetricsRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == method) {
        by_seed.entry(r.seed).or_default().push(r.clone());
    }
    let max_t = records.iter().map(|r| r.t).max().unwrap_or(0);
    let mut rows = Vec::new();
    for t in 1..=max_t {
        let per_seed: Vec<(f64, f64)> = by_seed.values().filter_map(|rs| avg_f1(rs, t).ok()).collect();
        if per_seed.is_empty() || per_seed.len() != by_seed.len() {
            continue;
        }
        let n = per_seed.len() as f64;
        rows.push(AvgRow {
            method: method.to_string(),
            t,
            avg_macro: per_seed.iter().map(|p| p.0).sum::<f64>() / n,
            avg_micro: per_seed.iter().map(|p| p.1).sum::<f64>() / n,
            n_seeds: per_seed.len(),
        });
    }
    rows
}

const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Seed-averaged macro F1 of task `i` after each later checkpoint `t`.
pub fn task_curves_svg(method: &str, records: &[MetricsRecord]) -> String {
    let mine: Vec<&MetricsRecord> = records.iter().filter(|r| r.method == method).collect();
    let max_t = mine.iter().map(|r| r.t).max().unwrap_or(1).max(2);
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let x = |t: usize| pad + (t - 1) as f64 / (max_t - 1) as f64 * (w - 2.0 * pad);
    let y = |f: f64| h - pad - f * (h - 2.0 * pad);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<text x="{pad}" y="20" font-size="13">{method}: macro F1 per task</text>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {} L{pad} {} L{} {}" fill="none" stroke="black"/>"#,
        pad,
        h - pad,
        w - pad,
        h - pad
    );
    for i in 1..=CURVE_TASKS {
        let mut pts: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in mine.iter().filter(|r| r.i == i) {
            let e = pts.entry(r.t).or_insert((0.0, 0));
            e.0 += r.macro_f1;
            e.1 += 1;
        }
        if pts.is_empty() {
            continue;
        }
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(k, (&t, &(s, n)))| {
                format!("{}{:.1} {:.1}", if k == 0 { "M" } else { "L" }, x(t), y(s / n as f64))
            })
            .collect();
        let c = COLORS[(i - 1) % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{c}" stroke-width="2"><title>task {i}</title></path>"#,
            d.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub struct ReportOutput {
    pub avg_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Aggregates finished run directories into `out`.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    if runs.is_empty() {
        return Err(Error::Report(vec!["no run directories given".into()]));
    }
    let mut manifests = Vec::new();
    let mut records = Vec::new();
    for dir in runs {
        let m = RunManifest::load(dir)?;
        records.extend(from_csv(&std::fs::read_to_string(dir.join(&m.metrics_csv))?)?);
        manifests.push(m);
    }
    let bad = incompatible_keys(&manifests)?;
    if !bad.is_empty() {
        return Err(Error::Report(bad));
    }
    std::fs::create_dir_all(out)?;
    let mut methods: Vec<String> = manifests.iter().map(|m| m.method.as_str().to_string()).collect();
    methods.dedup();
    let mut csv = String::from(AVG_F1_HEADER);
    csv.push('\n');
    let mut plots = Vec::new();
    for method in &methods {
        for row in average_rows(method, &records) {
            csv.push_str(&row.csv_line());
            csv.push('\n');
        }
        let path = out.join(format!("{method}_tasks.svg"));
        std::fs::write(&path, task_curves_svg(method, &records))?;
        plots.push(path);
    }
    let avg_csv = out.join("avg_f1.csv");
    std::fs::write(&avg_csv, csv)?;
    Ok(ReportOutput { avg_csv, plots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, t: usize, i: usize, f: f64) -> MetricsRecord {
        MetricsRecord {
            method: "vrl-soinn".into(),
            seed,
            t,
            i,
            macro_f1: f,
            micro_f1: f,
        }
    }

    #[test]
    fn averages_over_seeds() {
        let rs = vec![
            rec(0, 1, 1, 0.8),
            rec(1, 1, 1, 0.6),
            rec(0, 2, 1, 0.4),
            rec(0, 2, 2, 0.6),
            rec(1, 2, 1, 0.2),
            rec(1, 2, 2, 0.4),
        ];
        let rows = average_rows("vrl-soinn", &rs);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].avg_macro - 0.7).abs() < 1e-12);
        assert!((rows[1].avg_macro - 0.4).abs() < 1e-12);
        assert_eq!(rows[1].n_seeds, 2);
    }

    #[test]
    fn incomplete_seed_drops_the_row() {
        let rs = vec![rec(0, 1, 1, 0.8), rec(1, 1, 1, 0.6), rec(0, 2, 1, 0.4), rec(0, 2, 2, 0.6)];
        assert_eq!(average_rows("vrl-soinn", &rs).len(), 1);
    }

    #[test]
    fn svg_has_one_path_per_task() {
        let rs = vec![rec(0, 1, 1, 0.8), rec(0, 2, 1, 0.4), rec(0, 2, 2, 0.6)];
        let svg = task_curves_svg("vrl-soinn", &rs);
        assert_eq!(svg.matches("<title>task").count(), 2);
        assert!(svg.starts_with("<svg"));
    }
}
