//! Metric files and reports: a flat CSV format for task metrics,
//! plain-text summary tables, and self-contained SVG line plots of
//! metric against overlap ratio.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Header of every metrics CSV.
pub const CSV_HEADER: &str = "task,method,data_mode,overlap_ratio,metric,value,n";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}:{line}: {what}")]
    Malformed { path: PathBuf, line: usize, what: String },
    #[error("{0}: no metric rows")]
    Empty(PathBuf),
    #[error("no rows carry metric {0:?}")]
    NoData(String),
    #[error("field {0:?} contains a comma or line break")]
    BadField(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Overlap bucket of a metric row: a numeric ratio or the simultaneous
/// condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bucket {
    Ratio(f64),
    Simultaneous,
}

impl std::fmt::Display for Bucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bucket::Ratio(r) => write!(f, "{r}"),
            Bucket::Simultaneous => f.write_str("simultaneous"),
        }
    }
}

/// Sort key placing ratios in numeric order and simultaneous last.
fn bucket_key(b: &Bucket) -> (u8, f64) {
    match b {
        Bucket::Ratio(r) => (0, *r),
        Bucket::Simultaneous => (1, 0.0),
    }
}

/// One metric observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub task: String,
    pub method: String,
    pub data_mode: String,
    pub bucket: Bucket,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

fn check_field(s: &str) -> Result<&str, ReportError> {
    if s.contains(',') || s.contains('\n') || s.contains('\r') {
        return Err(ReportError::BadField(s.to_string()));
    }
    Ok(s)
}

/// Serialises rows to CSV text with the fixed header. Values print in
/// shortest round-trip form, so equal inputs give identical bytes.
pub fn to_csv(rows: &[MetricRow]) -> Result<String, ReportError> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            check_field(&r.task)?,
            check_field(&r.method)?,
            check_field(&r.data_mode)?,
            r.bucket,
            check_field(&r.metric)?,
            r.value,
            r.n
        )
        .expect("string write");
    }
    Ok(out)
}

/// Writes rows as a CSV file.
pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<(), ReportError> {
    std::fs::write(path, to_csv(rows)?)?;
    Ok(())
}

/// Reads a metrics CSV back. Errors on a wrong header, malformed rows,
/// or a file with no data rows.
pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>, ReportError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, what: String| ReportError::Malformed {
        path: path.to_path_buf(),
        line: line + 1,
        what,
    };
    match lines.next() {
        Some((_, h)) if h.trim_end() == CSV_HEADER => {}
        Some((i, h)) => return Err(bad(i, format!("expected header {CSV_HEADER:?}, got {h:?}"))),
        None => return Err(ReportError::Empty(path.to_path_buf())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(bad(i, format!("{} fields, expected 7", parts.len())));
        }
        let bucket = if parts[3] == "simultaneous" {
            Bucket::Simultaneous
        } else {
            Bucket::Ratio(
                parts[3].parse().map_err(|e| bad(i, format!("overlap_ratio: {e}")))?,
            )
        };
        rows.push(MetricRow {
            task: parts[0].to_string(),
            method: parts[1].to_string(),
            data_mode: parts[2].to_string(),
            bucket,
            metric: parts[4].to_string(),
            value: parts[5].parse().map_err(|e| bad(i, format!("value: {e}")))?,
            n: parts[6].parse().map_err(|e| bad(i, format!("n: {e}")))?,
        });
    }
    if rows.is_empty() {
        return Err(ReportError::Empty(path.to_path_buf()));
    }
    Ok(rows)
}

/// Metric column order used by tables, most informative first.
const METRIC_ORDER: [&str; 9] = [
    "azimuth_mae",
    "elevation_mae",
    "angular_mae",
    "unparseable_rate",
    "sr",
    "swer",
    "fwer",
    "wer",
    "best_step",
];

fn metric_rank(name: &str) -> (usize, &str) {
    match METRIC_ORDER.iter().position(|m| *m == name) {
        Some(i) => (i, ""),
        None => (METRIC_ORDER.len(), name),
    }
}

fn fmt_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{v}")
    } else {
        format!("{v:.4}")
    }
}

/// Renders rows as one fixed-width text table per task, one line per
/// (method, data_mode, bucket) group and one column per metric.
pub fn summary(rows: &[MetricRow]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::NoData("summary".to_string()));
    }
    let mut tasks: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        tasks.entry(&r.task).or_default().push(r);
    }
    let mut out = String::new();
    for (task, task_rows) in tasks {
        let mut metrics: Vec<&str> = Vec::new();
        for r in &task_rows {
            if !metrics.contains(&r.metric.as_str()) {
                metrics.push(&r.metric);
            }
        }
        metrics.sort_by_key(|m| metric_rank(m));

        type GroupKey<'a> = (&'a str, &'a str, (u8, u64));
        let mut groups: BTreeMap<GroupKey, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
        let mut bucket_text: BTreeMap<(u8, u64), String> = BTreeMap::new();
        for r in &task_rows {
            let (ord, ratio) = bucket_key(&r.bucket);
            let key = (ord, ratio.to_bits());
            bucket_text.entry(key).or_insert_with(|| r.bucket.to_string());
            groups
                .entry((&r.method, &r.data_mode, key))
                .or_default()
                .insert(&r.metric, (r.value, r.n));
        }

        let mut header: Vec<String> =
            vec!["method".into(), "data".into(), "overlap".into(), "n".into()];
        header.extend(metrics.iter().map(|m| m.to_string()));
        let mut body: Vec<Vec<String>> = Vec::new();
        for ((method, data, bkey), cells) in &groups {
            let n = cells.values().map(|(_, n)| *n).max().unwrap_or(0);
            let mut line = vec![
                method.to_string(),
                data.to_string(),
                bucket_text[bkey].clone(),
                n.to_string(),
            ];
            for m in &metrics {
                line.push(cells.get(m).map_or_else(|| "-".to_string(), |(v, _)| fmt_value(*v)));
            }
            body.push(line);
        }

        let mut widths: Vec<usize> = header.iter().map(String::len).collect();
        for line in &body {
            for (w, cell) in widths.iter_mut().zip(line) {
                *w = (*w).max(cell.len());
            }
        }
        writeln!(out, "== {task} ==").expect("string write");
        for line in std::iter::once(&header).chain(&body) {
            let mut text = String::new();
            for (i, (cell, w)) in line.iter().zip(&widths).enumerate() {
                if i > 0 {
                    text.push_str("  ");
                }
                write!(text, "{cell:<w$}").expect("string write");
            }
            writeln!(out, "{}", text.trim_end()).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 22.0;
const MARGIN_B: f64 = 46.0;

const PALETTE: [&str; 6] = ["#1b6ca8", "#c0392b", "#27824a", "#8e44ad", "#b9770e", "#16747e"];

fn fmt_tick(v: f64) -> String {
    let r = (v * 1000.0).round() / 1000.0;
    format!("{r}")
}

/// Renders a line plot of one metric against overlap ratio as a
/// self-contained SVG: one series per (method, data_mode), a circle
/// per bucket, and a dotted horizontal line for each series'
/// simultaneous condition.
pub fn overlap_plot(rows: &[MetricRow], metric: &str, title: &str) -> Result<String, ReportError> {
    type Series = (Vec<(f64, f64)>, Option<f64>);
    let mut series: BTreeMap<(String, String), Series> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        let entry = series
            .entry((r.method.clone(), r.data_mode.clone()))
            .or_insert_with(|| (Vec::new(), None));
        match r.bucket {
            Bucket::Ratio(x) => entry.0.push((x, r.value)),
            Bucket::Simultaneous => entry.1 = Some(r.value),
        }
    }
    series.retain(|_, (pts, sim)| !pts.is_empty() || sim.is_some());
    if series.is_empty() {
        return Err(ReportError::NoData(metric.to_string()));
    }
    for (pts, _) in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    let xs: Vec<f64> = {
        let mut xs: Vec<f64> = series
            .values()
            .flat_map(|(pts, _)| pts.iter().map(|(x, _)| *x))
            .collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    };
    let (x_min, x_max) = match (xs.first(), xs.last()) {
        (Some(a), Some(b)) if a < b => (*a, *b),
        (Some(a), _) => (*a - 0.5, *a + 0.5),
        (None, _) => (0.0, 1.0),
    };
    let y_top = series
        .values()
        .flat_map(|(pts, sim)| pts.iter().map(|(_, y)| *y).chain(*sim))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.08;

    let x_at = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (PLOT_W - MARGIN_L - MARGIN_R);
    let y_at = |y: f64| PLOT_H - MARGIN_B - y / y_top * (PLOT_H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"15\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0
    )
    .expect("string write");

    let axis_y = PLOT_H - MARGIN_B;
    write!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{axis_y}\" x2=\"{}\" y2=\"{axis_y}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{axis_y}\" stroke=\"black\"/>\n",
        PLOT_W - MARGIN_R
    )
    .expect("string write");
    for x in &xs {
        let px = x_at(*x);
        write!(
            svg,
            "<line x1=\"{px}\" y1=\"{axis_y}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            axis_y + 5.0,
            axis_y + 19.0,
            fmt_tick(*x)
        )
        .expect("string write");
    }
    for i in 0..=4 {
        let v = y_top * i as f64 / 4.0;
        let py = y_at(v);
        write!(
            svg,
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{MARGIN_L}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            py + 4.0,
            fmt_tick(v)
        )
        .expect("string write");
    }
    write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">overlap ratio</text>\n",
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        PLOT_H - 8.0
    )
    .expect("string write");

    for (i, ((method, data), (pts, sim))) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(v) = sim {
            let py = y_at(*v);
            write!(
                svg,
                "<line x1=\"{MARGIN_L}\" y1=\"{py}\" x2=\"{}\" y2=\"{py}\" stroke=\"{color}\" \
                 stroke-dasharray=\"6 4\"/>\n",
                PLOT_W - MARGIN_R
            )
            .expect("string write");
        }
        if pts.len() > 1 {
            let path: Vec<String> =
                pts.iter().map(|(x, y)| format!("{},{}", x_at(*x), y_at(*y))).collect();
            write!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            )
            .expect("string write");
        }
        for (x, y) in pts {
            write!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{color}\"/>\n",
                x_at(*x),
                y_at(*y)
            )
            .expect("string write");
        }
        let ly = MARGIN_T + 14.0 * i as f64 + 8.0;
        write!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\">{method} {data}</text>\n",
            PLOT_W - MARGIN_R - 170.0,
            ly - 9.0,
            PLOT_W - MARGIN_R - 155.0,
            ly
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
