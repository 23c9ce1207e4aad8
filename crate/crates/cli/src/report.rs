use std::fmt::Display;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// Final report of a command: a `section<TAB>name<TAB>value` table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    rows: Vec<(String, String, String)>,
}

impl Report {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut r = Self::default();
        r.add("run", "command", command);
        r.add("run", "seed", seed);
        r
    }

    pub fn add(&mut self, section: &str, name: &str, value: impl Display) {
        self.rows.push((section.to_string(), name.to_string(), value.to_string()));
    }

    pub fn get(&self, section: &str, name: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|(s, n, _)| s == section && n == name)
            .map(|(_, _, v)| v.as_str())
    }

    pub fn value(&self, section: &str, name: &str) -> Option<f64> {
        self.get(section, name).and_then(|v| v.parse().ok())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("section\tname\tvalue\n");
        for (a, b, c) in &self.rows {
            s.push_str(&format!("{a}\t{b}\t{c}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| CliError::io(path, e))
    }
}
