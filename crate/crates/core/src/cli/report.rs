//! Command results, rendered as aligned text or JSON.

use std::fmt;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub holds: bool,
    pub details: Vec<String>,
}

impl Verdict {
    pub fn new(name: &str, holds: bool) -> Self {
        Verdict {
            name: name.to_string(),
            holds,
            details: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Stat {
    pub name: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceBlock {
    pub title: String,
    pub lines: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub inputs: Vec<String>,
    pub verdicts: Vec<Verdict>,
    pub stats: Vec<Stat>,
    pub tables: Vec<Table>,
    pub traces: Vec<TraceBlock>,
    /// A rendered specification, for `parse` and `harden`.
    pub text: Option<String>,
    pub exit_code: i32,
}

impl RunReport {
    pub fn new(command: &str, inputs: Vec<String>) -> Self {
        RunReport {
            command: command.to_string(),
            inputs,
            verdicts: Vec::new(),
            stats: Vec::new(),
            tables: Vec::new(),
            traces: Vec::new(),
            text: None,
            exit_code: 0,
        }
    }

    /// Adds a verdict; a failing one makes the exit code 1.
    pub fn verdict(&mut self, v: Verdict) {
        if !v.holds {
            self.exit_code = 1;
        }
        self.verdicts.push(v);
    }

    pub fn stat(&mut self, name: &str, value: impl fmt::Display) {
        self.stats.push(Stat {
            name: name.to_string(),
            value: value.to_string(),
        });
    }

    pub fn verdict_named(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn stat_named(&self, name: &str) -> Option<&str> {
        self.stats.iter().find(|s| s.name == name).map(|s| s.value.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.columns.len().max(self.rows.iter().map(Vec::len).max().unwrap_or(0));
        let mut widths = vec![0; cols];
        for row in std::iter::once(&self.columns).chain(&self.rows) {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let line = |f: &mut fmt::Formatter<'_>, row: &[String]| {
            let cells: Vec<String> = (0..cols)
                .map(|i| {
                    let c = row.get(i).map(String::as_str).unwrap_or("");
                    format!("{c:<w$}", w = widths[i])
                })
                .collect();
            writeln!(f, "| {} |", cells.join(" | "))
        };
        writeln!(f, "{}", self.title)?;
        line(f, &self.columns)?;
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        writeln!(f, "|-{}-|", rule.join("-|-"))?;
        for row in &self.rows {
            line(f, row)?;
        }
        Ok(())
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.command, self.inputs.join(" "))?;
        for v in &self.verdicts {
            writeln!(f, "  {:<8} {}", if v.holds { "HOLDS" } else { "FAILS" }, v.name)?;
            for d in &v.details {
                writeln!(f, "           {d}")?;
            }
        }
        if !self.stats.is_empty() {
            let w = self.stats.iter().map(|s| s.name.len()).max().unwrap_or(0);
            for s in &self.stats {
                writeln!(f, "  {:<w$} : {}", s.name, s.value)?;
            }
        }
        for t in &self.tables {
            writeln!(f)?;
            write!(f, "{t}")?;
        }
        for t in &self.traces {
            writeln!(f)?;
            writeln!(f, "{}", t.title)?;
            for l in &t.lines {
                writeln!(f, "  {l}")?;
            }
        }
        if let Some(text) = &self.text {
            writeln!(f)?;
            write!(f, "{text}")?;
        }
        Ok(())
    }
}
