use std::fmt::Write;

use oidca_core::delegation::{ChainValidationReport, DelegationChain, Rule, RuleOutcome};

fn outcome(o: RuleOutcome) -> &'static str {
    match o {
        RuleOutcome::Pass => "pass",
        RuleOutcome::Fail => "FAIL",
        RuleOutcome::NotApplicable => "n/a",
    }
}

/// Plain-text rendering of a chain and its report for terminals.
pub fn render(chain: &DelegationChain, report: &ChainValidationReport) -> String {
    let mut rows = vec![[
        "#".to_owned(),
        "delegated_at".to_owned(),
        "sub".to_owned(),
        "aud".to_owned(),
        "scope".to_owned(),
    ]];
    for (i, step) in chain.steps().iter().enumerate() {
        rows.push([
            i.to_string(),
            step.delegated_at.to_string(),
            step.sub.clone(),
            step.aud.clone(),
            step.scope.clone(),
        ]);
    }
    let mut widths = [0usize; 5];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }

    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
    out.push('\n');
    for rule in Rule::ALL {
        writeln!(out, "{rule} {:<16} {}", rule.name(), outcome(report.outcome(rule))).unwrap();
        for v in report.violations.iter().filter(|v| v.rule == rule) {
            match v.step_index {
                Some(i) => writeln!(out, "   step {i}: {}", v.detail).unwrap(),
                None => writeln!(out, "   {}", v.detail).unwrap(),
            }
        }
    }
    write!(out, "\nverdict: {}", if report.is_valid() { "valid" } else { "invalid" }).unwrap();
    out
}
