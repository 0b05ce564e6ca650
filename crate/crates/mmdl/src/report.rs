//! Comparison report: markdown and TSV renderings of evaluation results,
//! with deltas over the RGB baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mmdl_core::metrics::EvalResult;

use crate::error::{Error, Result};
use crate::wire;

pub const TSV_HEADER: &str = "method\tmodalities\tsplit\ttop1\ttop5\tdelta_top1\tdelta_top5\tseed\tconfig_hash";

/// Method name of the RGB baseline rows.
pub const RGB_BASELINE: &str = "rgb-baseline";

/// One evaluated run.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub result: EvalResult,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Baselines,
    Teachers,
    Students,
    Omnivore,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Baselines, Group::Teachers, Group::Students, Group::Omnivore];

    /// Group of a method name, by prefix.
    pub fn of(method: &str) -> Group {
        if method.starts_with("teacher") {
            Group::Teachers
        } else if method.starts_with("student") {
            Group::Students
        } else if method.starts_with("omnivore") {
            Group::Omnivore
        } else {
            Group::Baselines
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Group::Baselines => "Baselines",
            Group::Teachers => "Teachers",
            Group::Students => "Students",
            Group::Omnivore => "Omnivore",
        }
    }
}

/// Reference numbers printed next to the measured ones:
/// `(method, modalities, [standard top1, top5], [comp top1, top5])`.
pub const REFERENCE_ROWS: [(&str, &str, [f64; 2], [f64; 2]); 4] = [
    ("RGB baseline", "rgb", [59.6, 85.6], [51.7, 78.1]),
    ("teacher", "rgb+flow+boxes", [65.7, 90.2], [63.2, 87.3]),
    ("student", "rgb", [63.9, 89.2], [59.4, 85.4]),
    ("omnivore", "rgb", [62.5, 88.1], [56.8, 83.3]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub markdown: String,
    pub tsv: String,
}

impl Report {
    pub fn write(&self, dir: &Path) -> Result<()> {
        wire::write_file(&dir.join("report.md"), self.markdown.as_bytes())?;
        wire::write_file(&dir.join("report.tsv"), self.tsv.as_bytes())
    }
}

/// `+x.x` / `-x.x`.
pub fn signed(v: f64) -> String {
    // Keep -0.0 from rounding into "-0.0".
    let r = (v * 10.0).round() / 10.0;
    if r >= 0.0 {
        format!("+{:.1}", r.abs())
    } else {
        format!("{r:.1}")
    }
}

fn split_order(rows: &[Row]) -> Vec<String> {
    let mut splits: Vec<String> = Vec::new();
    for known in ["standard", "comp"] {
        if rows.iter().any(|r| r.result.split == known) {
            splits.push(known.into());
        }
    }
    for r in rows {
        if !splits.contains(&r.result.split) {
            splits.push(r.result.split.clone());
        }
    }
    splits
}

/// Renders `rows` as markdown and TSV. Every (split, seed) present needs a
/// `baseline_name` row; deltas are taken against it.
pub fn emit_table(rows: &[Row], baseline_name: &str) -> Result<Report> {
    let mut base: BTreeMap<(&str, u64), (f64, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.result.method == baseline_name) {
        base.insert((&r.result.split, r.result.seed), (r.result.top1, r.result.top5));
    }
    let delta = |r: &EvalResult| -> Result<(f64, f64)> {
        base.get(&(r.split.as_str(), r.seed))
            .map(|&(b1, b5)| (r.top1 - b1, r.top5 - b5))
            .ok_or_else(|| {
                Error::config(format!(
                    "baseline `{baseline_name}` missing for split {} seed {}",
                    r.split, r.seed
                ))
            })
    };

    let mut tsv = String::from(TSV_HEADER);
    tsv.push('\n');
    let mut ordered: Vec<&Row> = rows.iter().collect();
    ordered.sort_by_key(|r| Group::of(&r.result.method));
    for r in &ordered {
        let e = &r.result;
        let (d1, d5) = delta(e)?;
        writeln!(
            tsv,
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{}\t{}\t{}\t{}",
            e.method,
            e.modalities,
            e.split,
            e.top1,
            e.top5,
            signed(d1),
            signed(d5),
            e.seed,
            r.config_hash
        )
        .unwrap();
    }

    let splits = split_order(rows);
    let mut md = String::from("# Action recognition accuracy\n\n");
    md.push_str("Top-1 / Top-5 in percent; brackets give the change over the RGB baseline of the same split and seed.\n\n");
    let mut head = String::from("| Method | Modalities | Seed |");
    let mut rule = String::from("|---|---|---|");
    for s in &splits {
        write!(head, " {s} Top-1 | {s} Top-5 |").unwrap();
        rule.push_str("---|---|");
    }
    for g in Group::ALL {
        let members: Vec<&Row> = ordered.iter().copied().filter(|r| Group::of(&r.result.method) == g).collect();
        if members.is_empty() {
            continue;
        }
        // One line per (method, modalities, seed), in first-appearance order.
        let mut keys: Vec<(&str, &str, u64)> = Vec::new();
        for r in &members {
            let k = (r.result.method.as_str(), r.result.modalities.as_str(), r.result.seed);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        writeln!(md, "## {}\n\n{head}\n{rule}", g.title()).unwrap();
        for (method, modalities, seed) in keys {
            write!(md, "| {method} | {modalities} | {seed} |").unwrap();
            for s in &splits {
                let hit = members.iter().find(|r| {
                    let e = &r.result;
                    e.method == method && e.modalities == modalities && e.seed == seed && &e.split == s
                });
                match hit {
                    Some(r) => {
                        let e = &r.result;
                        let (d1, d5) = delta(e)?;
                        if e.method == baseline_name {
                            write!(md, " {:.1} | {:.1} |", e.top1, e.top5).unwrap();
                        } else {
                            write!(md, " {:.1} ({}) | {:.1} ({}) |", e.top1, signed(d1), e.top5, signed(d5)).unwrap();
                        }
                    }
                    None => md.push_str(" - | - |"),
                }
            }
            md.push('\n');
        }
        md.push('\n');
    }

    md.push_str("## Reference rows (paper, not reproduced)\n\n");
    md.push_str("| Method | Modalities | standard Top-1 | standard Top-5 | comp Top-1 | comp Top-5 |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for (method, modalities, std, comp) in REFERENCE_ROWS {
        writeln!(
            md,
            "| {method} | {modalities} | {:.1} | {:.1} | {:.1} | {:.1} |",
            std[0], std[1], comp[0], comp[1]
        )
        .unwrap();
    }
    Ok(Report { markdown: md, tsv })
}

/// Parses a `report.tsv` back into rows.
pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<Row>> {
    let mut lines = text.lines();
    if lines.next() != Some(TSV_HEADER) {
        return Err(Error::format(path, "missing report header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::format(path, format!("bad report line `{l}`"));
            if f.len() != 9 {
                return Err(bad());
            }
            Ok(Row {
                result: EvalResult {
                    method: f[0].into(),
                    modalities: f[1].into(),
                    split: f[2].into(),
                    top1: f[3].parse().map_err(|_| bad())?,
                    top5: f[4].parse().map_err(|_| bad())?,
                    n_samples: 0,
                    seed: f[7].parse().map_err(|_| bad())?,
                },
                config_hash: f[8].into(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, modalities: &str, split: &str, top1: f64) -> Row {
        Row {
            result: EvalResult {
                method: method.into(),
                modalities: modalities.into(),
                split: split.into(),
                top1,
                top5: top1 + 20.0,
                n_samples: 100,
                seed: 1,
            },
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(signed(7.7), "+7.7");
        assert_eq!(signed(-1.25), "-1.3");
        assert_eq!(signed(-0.01), "+0.0");
        assert_eq!(signed(0.0), "+0.0");
    }

    #[test]
    fn student_delta_and_empty_groups() {
        let rows = vec![row(RGB_BASELINE, "rgb", "comp", 40.0), row("student(rgb+flow+boxes)", "rgb", "comp", 47.5)];
        let r = emit_table(&rows, RGB_BASELINE).unwrap();
        assert!(r.tsv.contains("student(rgb+flow+boxes)\trgb\tcomp\t47.50\t67.50\t+7.5\t+7.5\t1\tabc"));
        assert!(r.markdown.contains("## Students"));
        assert!(!r.markdown.contains("## Teachers"));
        assert!(!r.markdown.contains("## Omnivore"));
        assert!(r.markdown.contains("| omnivore | rgb | 62.5 | 88.1 | 56.8 | 83.3 |"));
        assert!(r.markdown.contains("paper, not reproduced"));
    }

    #[test]
    fn missing_baseline_is_config_error() {
        let rows = vec![row("student", "rgb", "comp", 47.5)];
        assert!(matches!(emit_table(&rows, RGB_BASELINE), Err(Error::Core(mmdl_core::Error::Config(_)))));
    }

    #[test]
    fn tsv_round_trips() {
        let rows = vec![row(RGB_BASELINE, "rgb", "comp", 40.0), row("omnivore", "rgb", "comp", 45.0)];
        let r = emit_table(&rows, RGB_BASELINE).unwrap();
        let back = parse_tsv(&r.tsv, Path::new("x")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].result.top1, 45.0);
        assert_eq!(emit_table(&rows, RGB_BASELINE).unwrap().tsv, r.tsv);
    }
}
