//! Cross-case correlation of segmented structure volumes with an external
//! per-case measurement.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use photovol::eval::{pearson, Correlation};
use serde::{Deserialize, Serialize};

use crate::case::{to_json, Case, StageName};
use crate::error::{self, PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub structure: String,
    pub n: usize,
    pub hard: Option<Correlation>,
    pub soft: Option<Correlation>,
}

fn columns(header: &str, want: &[&str], path: &Path) -> Result<Vec<usize>> {
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    want.iter()
        .map(|w| {
            cols.iter()
                .position(|c| c == w)
                .ok_or_else(|| PipelineError::format(path, format!("no column named {w}")))
        })
        .collect()
}

fn parse_num(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// `(case, structure) -> value` from a TSV with columns `case`,
/// `structure` and `value`.
pub fn read_measurements(path: &Path) -> Result<BTreeMap<(String, String), f64>> {
    let text = String::from_utf8_lossy(&error::read(path)?).into_owned();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let idx = columns(
        lines.next().unwrap_or(""),
        &["case", "structure", "value"],
        path,
    )?;
    let mut out = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let get = |i: usize| f.get(idx[i]).copied().unwrap_or("");
        let v = parse_num(get(2)).ok_or_else(|| {
            PipelineError::format(path, format!("row {}: value is not a number", n + 1))
        })?;
        out.insert((get(0).trim().to_string(), get(1).trim().to_string()), v);
    }
    Ok(out)
}

/// `structure -> (hard, soft)` from a case's `reports/volumes.tsv`.
fn read_case_volumes(case: &Case) -> Result<BTreeMap<String, (f64, Option<f64>)>> {
    case.require(StageName::Evaluate)?;
    let path = case.stage_dir(StageName::Evaluate).join("volumes.tsv");
    let text = String::from_utf8_lossy(&error::read(&path)?).into_owned();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let idx = columns(
        lines.next().unwrap_or(""),
        &["name", "hard_mm3", "soft_mm3"],
        &path,
    )?;
    let mut out = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        let get = |i: usize| f.get(idx[i]).copied().unwrap_or("");
        let hard = parse_num(get(1))
            .ok_or_else(|| PipelineError::format(&path, "hard volume is not a number"))?;
        out.insert(get(0).trim().to_string(), (hard, parse_num(get(2))));
    }
    Ok(out)
}

fn correlate_pairs(pairs: &[(f64, f64)]) -> Option<Correlation> {
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    pearson(&a, &b).ok()
}

/// Pearson correlation per structure over the cases that have both a
/// measurement and a volume. Undefined correlations are `None`.
pub fn correlate(
    cases: &[Case],
    measurements: &BTreeMap<(String, String), f64>,
) -> Result<Vec<CorrelationRow>> {
    let mut hard: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut soft: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for case in cases {
        let id = case.id();
        for (structure, (h, s)) in read_case_volumes(case)? {
            if let Some(&m) = measurements.get(&(id.clone(), structure.clone())) {
                hard.entry(structure.clone()).or_default().push((h, m));
                if let Some(s) = s {
                    soft.entry(structure).or_default().push((s, m));
                }
            }
        }
    }
    Ok(hard
        .iter()
        .map(|(name, pairs)| CorrelationRow {
            structure: name.clone(),
            n: pairs.len(),
            hard: correlate_pairs(pairs),
            soft: soft.get(name).and_then(|p| correlate_pairs(p)),
        })
        .collect())
}

pub fn correlation_tsv(rows: &[CorrelationRow]) -> String {
    let f = |c: &Option<Correlation>, pick: fn(&Correlation) -> f64| {
        c.as_ref()
            .map_or_else(|| "NA".to_string(), |c| pick(c).to_string())
    };
    let mut s = String::from("structure\tn\tr_hard\tp_hard\tr_soft\tp_soft\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.structure,
            r.n,
            f(&r.hard, |c| c.r),
            f(&r.hard, |c| c.p),
            f(&r.soft, |c| c.r),
            f(&r.soft, |c| c.p)
        ));
    }
    s
}

/// Write `correlation.tsv` and `correlation.json` into `out_dir`.
pub fn write_correlation(out_dir: &Path, rows: &[CorrelationRow]) -> Result<Vec<PathBuf>> {
    let tsv = out_dir.join("correlation.tsv");
    let json = out_dir.join("correlation.json");
    error::write(&tsv, correlation_tsv(rows).as_bytes())?;
    error::write(&json, &to_json(&rows))?;
    Ok(vec![tsv, json])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurement_table_parses_by_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "structure\tcase\tvalue\nhippo\tA\t3.5\nhippo\tB\t4\n").unwrap();
        let m = read_measurements(&p).unwrap();
        assert_eq!(m[&("A".to_string(), "hippo".to_string())], 3.5);
        assert_eq!(m.len(), 2);
        std::fs::write(&p, "case\tstructure\tvalue\nA\thippo\tlots\n").unwrap();
        assert!(read_measurements(&p).is_err());
    }

    fn case_with_volumes(root: &Path, id: &str, hard: f64, soft: f64) -> Case {
        let dir = root.join(id);
        std::fs::create_dir_all(dir.join("photos")).unwrap();
        let case = Case::open(&dir).unwrap();
        let tsv = case.stage_dir(StageName::Evaluate).join("volumes.tsv");
        error::write(
            &tsv,
            format!(
                "label\tname\thard_mm3\tsoft_mm3\n1\tcortex\t{hard}\t{soft}\n2\tother\t1\tNA\n"
            )
            .as_bytes(),
        )
        .unwrap();
        case.write_provenance(StageName::Evaluate, serde_json::json!({}), &[], &[tsv])
            .unwrap();
        case
    }

    #[test]
    fn correlates_across_cases() {
        let dir = tempfile::tempdir().unwrap();
        let cases: Vec<Case> = [(1.0, 1.5), (2.0, 2.0), (3.0, 3.5), (4.0, 3.9)]
            .iter()
            .enumerate()
            .map(|(i, (h, s))| case_with_volumes(dir.path(), &format!("c{i}"), *h, *s))
            .collect();
        let mut m = BTreeMap::new();
        for (i, v) in [2.0, 4.0, 6.0, 8.0].iter().enumerate() {
            m.insert((format!("c{i}"), "cortex".to_string()), *v);
        }
        let rows = correlate(&cases, &m).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n, 4);
        assert!((rows[0].hard.unwrap().r - 1.0).abs() < 1e-12);
        assert!(rows[0].soft.unwrap().r > 0.9);
        let out = write_correlation(dir.path(), &rows).unwrap();
        assert!(std::fs::read_to_string(&out[0])
            .unwrap()
            .starts_with("structure\tn\tr_hard\tp_hard\tr_soft\tp_soft\n"));
    }

    #[test]
    fn tsv_marks_undefined_correlations() {
        let rows = vec![CorrelationRow {
            structure: "x".into(),
            n: 2,
            hard: None,
            soft: None,
        }];
        assert_eq!(
            correlation_tsv(&rows).lines().nth(1).unwrap(),
            "x\t2\tNA\tNA\tNA\tNA"
        );
    }
}
