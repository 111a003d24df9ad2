//! Plot-data emission: delimiter-separated files with a fixed column
//! schema per kind, consumable by any plotting tool. No rendering here.

use std::path::Path;

use anyhow::{bail, ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Columns: label, value.
    Bars,
    /// Columns: x, y, value; the (x, y) grid must be rectangular.
    Heatmap,
    /// Columns: x, y.
    Series,
}

impl PlotKind {
    fn columns(self) -> usize {
        match self {
            PlotKind::Bars | PlotKind::Series => 2,
            PlotKind::Heatmap => 3,
        }
    }

    fn header(self) -> &'static str {
        match self {
            PlotKind::Bars => "label\tvalue",
            PlotKind::Heatmap => "x\ty\tvalue",
            PlotKind::Series => "x\ty",
        }
    }
}

/// Renders plot data to a string; the file variant writes it out.
pub fn render_plot(kind: PlotKind, rows: &[Vec<String>]) -> Result<String> {
    if rows.is_empty() {
        bail!("plot table is empty");
    }
    for (i, row) in rows.iter().enumerate() {
        ensure!(
            row.len() == kind.columns(),
            "plot row {i} has {} columns, expected {}",
            row.len(),
            kind.columns()
        );
    }
    if kind == PlotKind::Heatmap {
        check_rectangular(rows)?;
    }
    let mut out = String::from(kind.header());
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

/// Every (x, y) combination must appear exactly once.
fn check_rectangular(rows: &[Vec<String>]) -> Result<()> {
    let mut xs: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    let mut ys: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    ensure!(
        xs.len() * ys.len() == rows.len(),
        "heatmap is not rectangular: {} x values, {} y values, {} rows",
        xs.len(),
        ys.len(),
        rows.len()
    );
    let mut cells: Vec<(&str, &str)> =
        rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    cells.sort_unstable();
    cells.dedup();
    ensure!(cells.len() == rows.len(), "heatmap has duplicate (x, y) cells");
    Ok(())
}

/// Writes plot data; nothing is written when validation fails.
pub fn emit_plot(kind: PlotKind, rows: &[Vec<String>], path: &Path) -> Result<()> {
    let rendered = render_plot(kind, rows)?;
    std::fs::write(path, rendered)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cells: &[&str]) -> Vec<String> {
        cells.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bars_have_label_and_value_columns() {
        let text = render_plot(PlotKind::Bars, &[row(&["mcsd", "2.1"])]).unwrap();
        assert_eq!(text, "label\tvalue\nmcsd\t2.1\n");
    }

    #[test]
    fn heatmap_requires_rectangular_completeness() {
        let ok = vec![
            row(&["1", "1", "0.5"]),
            row(&["1", "2", "0.6"]),
            row(&["2", "1", "0.7"]),
            row(&["2", "2", "0.8"]),
        ];
        render_plot(PlotKind::Heatmap, &ok).unwrap();
        let missing = &ok[..3];
        assert!(render_plot(PlotKind::Heatmap, missing).is_err());
        let mut duplicated = ok.clone();
        duplicated[3] = row(&["1", "1", "0.9"]);
        assert!(render_plot(PlotKind::Heatmap, &duplicated).is_err());
    }

    #[test]
    fn empty_table_is_an_error_and_writes_nothing() {
        let dir = std::env::temp_dir().join("mcsd-plot-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.tsv");
        let _ = std::fs::remove_file(&path);
        assert!(emit_plot(PlotKind::Series, &[], &path).is_err());
        assert!(!path.exists());
    }
}
