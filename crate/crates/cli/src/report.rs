//! Output files: metric tables, per-step score tables, summary grids and SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use left_core::metrics::MetricTable;
use left_core::training::EpochLog;
use left_core::{AnomalyMap, SeriesDataset};
use plotters::prelude::*;

use crate::error::{CliError, CliResult};

/// Metric columns of every summary table, in order.
pub const METRIC_COLUMNS: [&str; 8] =
    ["vus_roc", "vus_pr", "auc_roc", "auc_pr", "range_auc_roc", "range_auc_pr", "f1", "accuracy"];

/// Channels drawn per plot.
const PLOT_GROUP: usize = 4;

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn write_metrics(path: &Path, table: &MetricTable) -> CliResult<()> {
    write(path, &table.to_string())
}

pub fn write_scores(path: &Path, map: &AnomalyMap, labels: &[u8]) -> CliResult<()> {
    let mut out = String::from("t\tlabel\tscore\tcycle\tms\tcross_path\n");
    for t in 0..map.len() {
        writeln!(
            out,
            "{t}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            labels[t], map.total[t], map.cycle_part[t], map.ms_part[t], map.cross_path[t]
        )
        .unwrap();
    }
    write(path, &out)
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> CliResult<()> {
    let mut out = String::from("epoch\ttrain_total\ttrain_ms\ttrain_cyc\ttrain_cons\tval_total\tlambda\tseconds\n");
    for row in log {
        writeln!(
            out,
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4}\t{:.2}",
            row.epoch,
            row.train.total,
            row.train.ms,
            row.train.cyc,
            row.train.cons,
            row.validation.total,
            row.lambda,
            row.seconds
        )
        .unwrap();
    }
    write(path, &out)
}

/// Tab-separated summary: the given key columns followed by [`METRIC_COLUMNS`].
pub struct SummaryTable {
    keys: Vec<String>,
    rows: Vec<(Vec<String>, MetricTable)>,
}

impl SummaryTable {
    pub fn new(keys: &[&str]) -> Self {
        Self { keys: keys.iter().map(|k| k.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, key_values: Vec<String>, metrics: MetricTable) {
        assert_eq!(key_values.len(), self.keys.len());
        self.rows.push((key_values, metrics));
    }

    pub fn render(&self) -> String {
        let mut out = self.keys.join("\t");
        for m in METRIC_COLUMNS {
            out.push('\t');
            out.push_str(m);
        }
        out.push('\n');
        for (keys, metrics) in &self.rows {
            out.push_str(&keys.join("\t"));
            for m in METRIC_COLUMNS {
                let v = metrics.get(m).map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
                out.push('\t');
                out.push_str(&v);
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write(path, &self.render())
    }
}

/// One SVG per group of up to four channels: the test series on top, the
/// anomaly score below, ground-truth anomalies shaded in both.
pub fn plot_scores(dir: &Path, ds: &SeriesDataset, map: &AnomalyMap) -> CliResult<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let n = map.len();
    let ranges = label_ranges(&ds.test_labels);
    let mut written = Vec::new();
    for (g, start) in (0..ds.channels()).step_by(PLOT_GROUP).enumerate() {
        let channels: Vec<usize> = (start..(start + PLOT_GROUP).min(ds.channels())).collect();
        let path = dir.join(format!("scores-group{g}.svg"));
        draw_group(&path, ds, map, &channels, &ranges, n).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

fn label_ranges(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().chain(std::iter::once(&0)).enumerate() {
        match (l, start) {
            (1, None) => start = Some(i),
            (0, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || hi <= lo {
        (lo.min(0.0), lo.max(0.0) + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn draw_group(
    path: &Path,
    ds: &SeriesDataset,
    map: &AnomalyMap,
    channels: &[usize],
    ranges: &[(usize, usize)],
    n: usize,
) -> Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (1200, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let (top, bottom) = root.split_vertically(360);
    let shade = RGBColor(240, 80, 80).mix(0.2);

    let (lo, hi) = bounds(channels.iter().flat_map(|&c| ds.test.column(c).to_vec()));
    let mut chart = ChartBuilder::on(&top).margin(10).build_cartesian_2d(0..n, lo..hi)?;
    for &(s, e) in ranges {
        chart.draw_series(std::iter::once(Rectangle::new([(s, lo), (e, hi)], shade.filled())))?;
    }
    for (i, &c) in channels.iter().enumerate() {
        let color = Palette99::pick(i);
        chart.draw_series(LineSeries::new((0..n).map(|t| (t, ds.test[[t, c]])), &color))?;
    }

    let (lo, hi) = bounds(map.total.iter().copied());
    let mut chart = ChartBuilder::on(&bottom).margin(10).build_cartesian_2d(0..n, lo..hi)?;
    for &(s, e) in ranges {
        chart.draw_series(std::iter::once(Rectangle::new([(s, lo), (e, hi)], shade.filled())))?;
    }
    chart.draw_series(LineSeries::new((0..n).map(|t| (t, map.total[t])), &BLACK))?;
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_ranges_are_half_open() {
        assert_eq!(label_ranges(&[0, 1, 1, 0, 1]), vec![(1, 3), (4, 5)]);
        assert!(label_ranges(&[0, 0]).is_empty());
    }

    #[test]
    fn summary_table_has_every_metric_column() {
        let mut t = SummaryTable::new(&["variant"]);
        let mut m = MetricTable::default();
        m.insert("vus_roc", 0.5);
        t.push(vec!["full".into()], m);
        let text = t.render();
        let header: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
        assert_eq!(header.len(), 1 + METRIC_COLUMNS.len());
        assert!(text.lines().nth(1).unwrap().starts_with("full\t0.500000\tnan"));
    }
}
