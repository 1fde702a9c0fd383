//! CSV and Markdown reports.
//!
//! CSV files start with a `#` line carrying the configuration fingerprint and
//! seed, followed by a header row. Percentages are printed with two decimals;
//! parsing recomputes them from the stored counts, so a round trip is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{MetricsRow, TransferCell};
use crate::error::{Error, Result};

/// Provenance embedded in every report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportMeta {
    pub fingerprint: String,
    pub seed: u64,
}

impl ReportMeta {
    fn line(&self) -> String {
        format!("# config={} seed={}", self.fingerprint, self.seed)
    }

    fn parse_line(line: &str) -> Result<Self> {
        let perr = |m: &str| Error::Parse { offset: 0, message: m.to_string() };
        let rest = line.strip_prefix("# ").ok_or_else(|| perr("missing '# ' provenance line"))?;
        let mut fingerprint = None;
        let mut seed = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("config", v)) => fingerprint = Some(v.to_string()),
                Some(("seed", v)) => seed = Some(v.parse().map_err(|_| perr("bad seed"))?),
                _ => return Err(perr("unexpected provenance field")),
            }
        }
        Ok(Self {
            fingerprint: fingerprint.ok_or_else(|| perr("missing config fingerprint"))?,
            seed: seed.ok_or_else(|| perr("missing seed"))?,
        })
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<report>", e)
}

const METRICS_HEADER: [&str; 9] = ["task", "detector", "tn", "fp", "fn", "tp", "fpr", "tpr", "acc"];
const TRANSFER_HEADER: [&str; 7] = ["attack", "target", "evaluator", "task", "detected", "total", "tpr_under_attack"];

pub fn write_metrics_csv<W: Write>(mut out: W, meta: &ReportMeta, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{}", meta.line()).map_err(io_err)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.detector.clone(),
            r.tn.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            r.tp.to_string(),
            format!("{:.2}", r.fpr),
            format!("{:.2}", r.tpr),
            format!("{:.2}", r.acc),
        ])?;
    }
    w.flush().map_err(io_err)
}

pub fn write_transfer_csv<W: Write>(mut out: W, meta: &ReportMeta, cells: &[TransferCell]) -> Result<()> {
    writeln!(out, "{}", meta.line()).map_err(io_err)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRANSFER_HEADER)?;
    for c in cells {
        w.write_record([
            c.attack.clone(),
            c.target.clone(),
            c.evaluator.clone(),
            c.task.clone(),
            c.detected.to_string(),
            c.total.to_string(),
            format!("{:.2}", c.tpr_under_attack),
        ])?;
    }
    w.flush().map_err(io_err)
}

fn split_meta(text: &str) -> Result<(ReportMeta, &str)> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    Ok((ReportMeta::parse_line(first.trim_end())?, rest))
}

fn records(body: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_reader(body.as_bytes());
    if r.headers()?.iter().ne(header.iter().copied()) {
        return Err(Error::Parse { offset: 0, message: "unexpected CSV header".into() });
    }
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

fn count(rec: &csv::StringRecord, k: usize) -> Result<usize> {
    rec[k].parse().map_err(|_| Error::Parse { offset: 0, message: format!("bad count '{}'", &rec[k]) })
}

pub fn parse_metrics_csv(text: &str) -> Result<(ReportMeta, Vec<MetricsRow>)> {
    let (meta, body) = split_meta(text)?;
    let rows = records(body, &METRICS_HEADER)?
        .iter()
        .map(|r| MetricsRow::from_counts(&r[0], &r[1], count(r, 2)?, count(r, 3)?, count(r, 4)?, count(r, 5)?))
        .collect::<Result<_>>()?;
    Ok((meta, rows))
}

pub fn parse_transfer_csv(text: &str) -> Result<(ReportMeta, Vec<TransferCell>)> {
    let (meta, body) = split_meta(text)?;
    let cells = records(body, &TRANSFER_HEADER)?
        .iter()
        .map(|r| TransferCell::from_counts(&r[0], &r[1], &r[2], &r[3], count(r, 4)?, count(r, 5)?))
        .collect::<Result<_>>()?;
    Ok((meta, cells))
}

/// Keeps first-seen order.
fn ordered<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// One row per task and an FPR/TPR/ACC column triple per detector.
pub fn metrics_markdown(meta: &ReportMeta, rows: &[MetricsRow]) -> String {
    let tasks = ordered(rows.iter().map(|r| r.task.as_str()));
    let dets = ordered(rows.iter().map(|r| r.detector.as_str()));
    let cell: BTreeMap<(&str, &str), &MetricsRow> =
        rows.iter().map(|r| ((r.task.as_str(), r.detector.as_str()), r)).collect();
    let mut s = String::new();
    let _ = writeln!(s, "## Detection performance\n\nconfig `{}`, seed {}\n", meta.fingerprint, meta.seed);
    s.push_str("| Task |");
    for d in &dets {
        let _ = write!(s, " {d} FPR | {d} TPR | {d} ACC |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(3 * dets.len()));
    s.push('\n');
    for t in &tasks {
        let _ = write!(s, "| {t} |");
        for d in &dets {
            match cell.get(&(*t, *d)) {
                Some(r) => {
                    let _ = write!(s, " {:.2} | {:.2} | {:.2} |", r.fpr, r.tpr, r.acc);
                }
                None => s.push_str(" - | - | - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// One table per (attack, target): tasks by evaluators, TPR under attack.
pub fn transfer_markdown(meta: &ReportMeta, cells: &[TransferCell]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## Detection under attack (TPR %)\n\nconfig `{}`, seed {}\n", meta.fingerprint, meta.seed);
    let campaigns = ordered(cells.iter().map(|c| c.attack.as_str()))
        .into_iter()
        .flat_map(|a| {
            ordered(cells.iter().filter(|c| c.attack == a).map(|c| c.target.as_str()))
                .into_iter()
                .map(move |t| (a, t))
        })
        .collect::<Vec<_>>();
    for (attack, target) in campaigns {
        let sel: Vec<&TransferCell> = cells.iter().filter(|c| c.attack == attack && c.target == target).collect();
        let tasks = ordered(sel.iter().map(|c| c.task.as_str()));
        let evals = ordered(sel.iter().map(|c| c.evaluator.as_str()));
        let _ = writeln!(s, "### Target: {target} ({attack})\n");
        s.push_str("| Task |");
        for e in &evals {
            let _ = write!(s, " {e} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(evals.len()));
        s.push('\n');
        for t in &tasks {
            let _ = write!(s, "| {t} |");
            for e in &evals {
                match sel.iter().find(|c| c.task == *t && c.evaluator == *e) {
                    Some(c) => {
                        let _ = write!(s, " {:.2} |", c.tpr_under_attack);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub transfer_csv: PathBuf,
    pub markdown: PathBuf,
}

/// Writes `metrics.csv`, `transfer.csv` and `report.md` under `dir`.
pub fn emit_report(rows: &[MetricsRow], cells: &[TransferCell], meta: &ReportMeta, dir: &Path) -> Result<ReportFiles> {
    if rows.is_empty() && cells.is_empty() {
        return Err(Error::invalid("nothing to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        metrics_csv: dir.join("metrics.csv"),
        transfer_csv: dir.join("transfer.csv"),
        markdown: dir.join("report.md"),
    };
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, meta, rows)?;
    std::fs::write(&files.metrics_csv, &buf).map_err(|e| Error::io(&files.metrics_csv, e))?;
    buf.clear();
    write_transfer_csv(&mut buf, meta, cells)?;
    std::fs::write(&files.transfer_csv, &buf).map_err(|e| Error::io(&files.transfer_csv, e))?;
    let mut md = metrics_markdown(meta, rows);
    md.push('\n');
    md.push_str(&transfer_markdown(meta, cells));
    std::fs::write(&files.markdown, md).map_err(|e| Error::io(&files.markdown, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ReportMeta {
        ReportMeta { fingerprint: "0123abcd".into(), seed: 17 }
    }

    fn rows() -> Vec<MetricsRow> {
        vec![
            MetricsRow::from_counts("blur1.10", "spam_linear", 97, 3, 1, 99).unwrap(),
            MetricsRow::from_counts("blur1.10", "bayar_net", 100, 0, 0, 100).unwrap(),
            MetricsRow::from_counts("median7", "spam_linear", 33, 0, 2, 31).unwrap(),
        ]
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &meta(), &rows()).unwrap();
        let (m, back) = parse_metrics_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back, rows());
    }

    #[test]
    fn transfer_csv_roundtrip() {
        let cells = vec![
            TransferCell::from_counts("fgsm", "bayar_net", "bayar_net", "blur1.10", 0, 50).unwrap(),
            TransferCell::from_counts("fgsm", "bayar_net", "spam_linear", "blur1.10", 49, 50).unwrap(),
        ];
        let mut buf = Vec::new();
        write_transfer_csv(&mut buf, &meta(), &cells).unwrap();
        let (_, back) = parse_transfer_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, cells);
    }

    #[test]
    fn table_layout() {
        let md = metrics_markdown(&meta(), &rows());
        let body: Vec<&str> = md.lines().filter(|l| l.starts_with("| ")).collect();
        assert_eq!(body.len(), 3);
        assert!(body[0].contains("spam_linear FPR | spam_linear TPR | spam_linear ACC"));
        assert!(body[1].starts_with("| blur1.10 | 3.00 | 99.00 | 98.00 | 0.00 | 100.00 | 100.00 |"));
        assert!(body[2].starts_with("| median7 |") && body[2].ends_with("- | - | - |"));
        assert!(md.contains("0123abcd") && md.contains("seed 17"));
    }

    #[test]
    fn bad_provenance_rejected() {
        assert!(matches!(parse_metrics_csv("task,detector\n"), Err(Error::Parse { .. })));
    }
}
