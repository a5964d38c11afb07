//! Per-iteration loss traces, persisted as CSV.

use std::path::Path;

use crate::{Error, Result};

/// Loss components per iteration. Values are written with the shortest
/// representation that parses back to the same `f64`, so two identical runs
/// give byte-identical files.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTrace {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

impl LossTrace {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, iteration: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((iteration, values));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[k]).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("iteration").chain(self.columns.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(csv_err)?;
        for (it, values) in &self.rows {
            let row: Vec<String> =
                std::iter::once(it.to_string()).chain(values.iter().map(|v| v.to_string())).collect();
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("iteration") {
            return Err(Error::Format("trace must start with an iteration column".into()));
        }
        let mut trace = Self { columns: header.iter().skip(1).map(String::from).collect(), rows: Vec::new() };
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("bad value {s:?}: {e}")));
            let it = rec[0].parse::<usize>().map_err(|e| Error::Format(format!("bad iteration {:?}: {e}", &rec[0])))?;
            let values = rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
            if values.len() != trace.columns.len() {
                return Err(Error::Format(format!("iteration {it}: expected {} values", trace.columns.len())));
            }
            trace.rows.push((it, values));
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_csv(&text).map_err(|e| Error::file(path, e))
    }
}
