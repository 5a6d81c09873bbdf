//! CSV artifacts: a `#` comment header carrying the config hash, seed and
//! resolved config, followed by one fixed-schema table.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// One CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Empty,
    Text(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Empty => String::new(),
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_float(*v),
            Cell::Bool(b) => b.to_string(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Float(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Float)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }

    pub fn get(&self, row: usize, name: &str) -> Option<&Cell> {
        self.column(name).map(|c| &self.rows[row][c])
    }
}

/// Renders the full artifact text.
pub fn render_csv(command: &str, cfg: &ExperimentConfig, table: &Table) -> Result<String, CliError> {
    let mut out = String::new();
    out.push_str(&format!("# flowlab {command}\n"));
    out.push_str(&format!("# config_sha256 = {}\n", cfg.hash()));
    out.push_str(&format!("# seed = {}\n", cfg.run.seed));
    out.push_str("# resolved config:\n");
    for line in cfg.resolved_toml().lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            out.push_str(&format!("#   {line}\n"));
        }
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(&table.columns).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
    Ok(out)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

/// Parses an artifact written by [`render_csv`], skipping the comment header.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// What the gnuplot script draws for a command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotSpec {
    pub x: &'static str,
    pub y: &'static str,
    pub log_x: bool,
    pub log_y: bool,
}

pub fn gnuplot_script(csv_path: &Path, command: &str, table: &Table, spec: PlotSpec) -> String {
    let x = table.column(spec.x).map_or(1, |c| c + 1);
    let y = table.column(spec.y).map_or(2, |c| c + 1);
    let mut s = String::new();
    s.push_str(&format!("# flowlab {command}\n"));
    s.push_str("set datafile separator ','\n");
    s.push_str("set datafile commentschars '#'\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str(&format!("set xlabel '{}'\nset ylabel '{}'\n", spec.x, spec.y));
    if spec.log_x {
        s.push_str("set logscale x\n");
    }
    if spec.log_y {
        s.push_str("set logscale y\n");
    }
    s.push_str("set terminal pngcairo size 900,600\n");
    s.push_str(&format!("set output '{}'\n", csv_path.with_extension("png").display()));
    s.push_str(&format!(
        "plot '{}' using {x}:{y} with linespoints\n",
        csv_path.display()
    ));
    s
}
