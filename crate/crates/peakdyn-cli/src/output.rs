//! Run directories: CSV tables, JSON records and gnuplot scripts.

use crate::error::CliError;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// One experiment's output directory and the files written to it.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub files: Vec<String>,
}

impl RunDir {
    pub fn create(base: &Path, name: &str) -> Result<Self, CliError> {
        let path = base.join(name);
        fs::create_dir_all(&path)?;
        Ok(Self { path, files: Vec::new() })
    }

    fn track(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.path.join(name)
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let path = self.track(name);
        let mut w = csv::Writer::from_path(path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.track(name);
        fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.track(name);
        fs::write(path, body)?;
        Ok(())
    }

    /// Writes `<stem>.gp`, plotting columns of `<stem>.csv` against the first
    /// one. `log_y` switches the y axis to log scale.
    pub fn gnuplot(&mut self, stem: &str, title: &str, x: &str, series: &[(&str, usize)], log_y: bool) -> Result<(), CliError> {
        let mut s = String::new();
        s.push_str("set datafile separator ','\n");
        s.push_str("set key autotitle columnhead\n");
        s.push_str(&format!("set terminal pngcairo size 900,600\nset output '{stem}.png'\n"));
        s.push_str(&format!("set title '{title}'\nset xlabel '{x}'\n"));
        if log_y {
            s.push_str("set logscale y\n");
        }
        let plots: Vec<String> =
            series.iter().map(|(label, col)| format!("'{stem}.csv' using 1:{col} with lines title '{label}'")).collect();
        s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
        self.text(&format!("{stem}.gp"), &s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        t: f64,
        v: f64,
    }

    #[test]
    fn writes_tracked_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunDir::create(dir.path(), "x").unwrap();
        r.csv("a.csv", &[Row { t: 0.0, v: 1.5 }]).unwrap();
        r.gnuplot("a", "A", "t", &[("v", 2)], true).unwrap();
        let text = fs::read_to_string(r.path.join("a.csv")).unwrap();
        assert_eq!(text, "t,v\n0.0,1.5\n");
        assert!(fs::read_to_string(r.path.join("a.gp")).unwrap().contains("using 1:2"));
        assert_eq!(r.files, vec!["a.csv", "a.gp"]);
    }
}
