//! Post-hoc checking of a report directory from its CSV numbers alone.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::report::{
    AnticoncRow, KfwerRow, ANTICONC_FILE, ANTICONC_HEADER, DIAGNOSTICS_FILE, DIAGNOSTICS_HEADER, KFWER_FILE,
    KFWER_HEADER, SUMMARY_FILE,
};
use crate::{Error, Result};

/// A row whose recomputed verdict is "fail", or whose recorded `pass`
/// column disagrees with the recomputation.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub file: &'static str,
    /// 1-based data row (header excluded).
    pub row: usize,
    pub scenario_id: String,
    pub check: String,
    pub recomputed: bool,
    pub recorded: bool,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} row {} (scenario {}, {}): recomputed {}, recorded {}",
            self.file,
            self.row,
            self.scenario_id,
            self.check,
            verdict(self.recomputed),
            verdict(self.recorded)
        )
    }
}

fn verdict(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifySummary {
    pub rows_checked: usize,
    pub findings: Vec<Finding>,
}

impl VerifySummary {
    pub fn pass(&self) -> bool {
        self.findings.is_empty()
    }

    /// 0 on pass, 1 on any failing or inconsistent row.
    pub fn exit_code(&self) -> i32 {
        if self.pass() {
            0
        } else {
            1
        }
    }
}

struct Table {
    file: &'static str,
    rows: Vec<HashMap<String, String>>,
}

impl Table {
    fn read(dir: &Path, file: &'static str, header: &[&str]) -> Result<Table> {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::Report(format!("missing {}", path.display())));
        }
        let mut r = csv::Reader::from_path(&path)?;
        let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if got != header {
            return Err(Error::Report(format!("{file}: unexpected header {got:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push(got.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
        }
        Ok(Table { file, rows })
    }

    fn num(&self, i: usize, key: &str) -> Result<f64> {
        let s = &self.rows[i][key];
        s.parse::<f64>()
            .map_err(|_| Error::Report(format!("{} row {}: column {key} is not a number: {s:?}", self.file, i + 1)))
    }

    fn flag(&self, i: usize, key: &str) -> Result<bool> {
        match self.rows[i][key].as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            s => Err(Error::Report(format!("{} row {}: column {key} is not a boolean: {s:?}", self.file, i + 1))),
        }
    }

    fn check(&self, out: &mut VerifySummary, i: usize, check: &str, recomputed: bool) -> Result<()> {
        let recorded = self.flag(i, "pass")?;
        out.rows_checked += 1;
        if !recomputed || recomputed != recorded {
            out.findings.push(Finding {
                file: self.file,
                row: i + 1,
                scenario_id: self.rows[i]["scenario_id"].clone(),
                check: check.to_string(),
                recomputed,
                recorded,
            });
        }
        Ok(())
    }
}

/// Recomputes every pass flag in a report directory.
///
/// Errors when a report file is missing or unreadable; an empty directory is
/// an error, not a pass.
pub fn verify_reports(dir: &Path) -> Result<VerifySummary> {
    if !dir.join(SUMMARY_FILE).is_file() {
        return Err(Error::Report(format!("missing {}", dir.join(SUMMARY_FILE).display())));
    }
    let mut out = VerifySummary::default();

    let t = Table::read(dir, ANTICONC_FILE, &ANTICONC_HEADER)?;
    for i in 0..t.rows.len() {
        let ok = AnticoncRow::dominated(
            t.num(i, "sup_hat")?,
            t.num(i, "sup_se")?,
            t.num(i, "bound_theorem1")?,
            t.num(i, "epsilon")?,
            t.num(i, "k")?,
            t.num(i, "e_max_norm_se")?,
        );
        t.check(&mut out, i, "bound_domination", ok)?;
    }

    let t = Table::read(dir, KFWER_FILE, &KFWER_HEADER)?;
    for i in 0..t.rows.len() {
        let ok = KfwerRow::controlled(t.num(i, "kfwer_hat")?, t.num(i, "alpha")?, t.num(i, "n_sim")?);
        t.check(&mut out, i, "kfwer_level", ok)?;
    }

    let t = Table::read(dir, DIAGNOSTICS_FILE, &DIAGNOSTICS_HEADER)?;
    for i in 0..t.rows.len() {
        let ok = t.num(i, "statistic")? <= t.num(i, "threshold")?;
        let check = t.rows[i]["check"].clone();
        t.check(&mut out, i, &check, ok)?;
    }

    if out.rows_checked == 0 {
        return Err(Error::Report(format!("{}: no report rows", dir.display())));
    }
    Ok(out)
}
