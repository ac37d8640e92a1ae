use serde::{Deserialize, Serialize};

use super::evaluate::{RobustnessRow, StageReport};
use crate::error::{Error, Result};
use crate::segmenter::StageKind;

/// One line of a structured report stream: a per-class entry when `class`
/// is set, otherwise the aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub context: String,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tp: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub union: Option<u64>,
    /// IoU of the class, or mIoU for the aggregate; `None` when undefined.
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub flags: Vec<String>,
}

impl ReportRecord {
    pub fn from_stage(report: &StageReport, context: &str) -> Vec<ReportRecord> {
        let mut out: Vec<ReportRecord> = report
            .per_class
            .iter()
            .map(|c| ReportRecord {
                context: context.into(),
                label: report.label.clone(),
                class: Some(c.class),
                class_name: report.eval_class_names.get(c.class).cloned(),
                tp: Some(c.tp),
                union: Some(c.union),
                value: c.iou,
                flags: if c.iou.is_none() { vec!["absent".into()] } else { vec![] },
            })
            .collect();
        let mut flags = Vec::new();
        if report.ignored_predictions > 0 {
            flags.push(format!("ignored_predictions={}", report.ignored_predictions));
        }
        if !report.absent_classes.is_empty() {
            flags.push(format!("absent_classes={:?}", report.absent_classes));
        }
        out.push(ReportRecord {
            context: context.into(),
            label: report.label.clone(),
            class: None,
            class_name: None,
            tp: None,
            union: None,
            value: Some(report.miou),
            flags,
        });
        out
    }

    pub fn to_jsonl(records: &[ReportRecord]) -> Result<String> {
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::to_string(r).map_err(|e| Error::Serialization(e.to_string()))?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Aligned text table; the first column is left-aligned, the rest right.
pub fn render_grid(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, w) in widths.iter().enumerate() {
            let cell = cells.get(i).map(String::as_str).unwrap_or("");
            if i == 0 {
                s.push_str(&format!("{cell:<w$}"));
            } else {
                s.push_str(&format!("  {cell:>w$}"));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols.saturating_sub(1))));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn points(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into())
}

fn check(on: bool) -> String {
    if on { "x" } else { "" }.into()
}

/// Stage-contribution table: which stages produced each checkpoint, the
/// per-class IoU and the mIoU, in points.
pub fn contribution_grid(reports: &[(&str, &StageReport)]) -> String {
    let Some((_, first)) = reports.first() else {
        return String::new();
    };
    let mut header: Vec<String> = ["model", "SP", "UDA", "SA"].iter().map(|s| s.to_string()).collect();
    for &c in &first.selected_classes {
        header.push(first.eval_class_names.get(c).cloned().unwrap_or_else(|| c.to_string()));
    }
    header.push("mIoU".into());
    let rows = reports
        .iter()
        .map(|(name, r)| {
            let has = |k: StageKind| r.provenance.iter().any(|p| p.stage == k);
            let sp = r
                .provenance
                .iter()
                .any(|p| p.stage == StageKind::Sp && p.label != "none");
            let mut row = vec![name.to_string(), check(sp), check(has(StageKind::Uda)), check(has(StageKind::Sa))];
            row.extend(r.per_class.iter().map(|c| points(c.iou)));
            row.push(points(Some(r.miou)));
            row
        })
        .collect::<Vec<_>>();
    render_grid(&header, &rows)
}

/// Robustness table: one row per model, a clean column followed by one
/// column per corruption kind, mIoU in points.
pub fn robustness_grid(rows: &[(&str, &StageReport, &[RobustnessRow])]) -> String {
    let Some((_, _, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["model".to_string(), "clean".to_string()];
    header.extend(first.iter().map(|r| r.spec.kind.column_name().to_string()));
    let body = rows
        .iter()
        .map(|(name, clean, cells)| {
            let mut row = vec![name.to_string(), points(Some(clean.miou))];
            row.extend(cells.iter().map(|c| points(Some(c.report.miou))));
            row
        })
        .collect::<Vec<_>>();
    render_grid(&header, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ClassIou, ConfusionMatrix};
    use crate::segmenter::Provenance;

    fn report(label: &str, stages: &[(StageKind, &str)], ious: &[Option<f64>], miou: f64) -> StageReport {
        StageReport {
            label: label.into(),
            provenance: stages
                .iter()
                .map(|(s, l)| Provenance {
                    stage: *s,
                    label: l.to_string(),
                    config: serde_json::json!({}),
                    seed: 0,
                    note: None,
                })
                .collect(),
            eval_class_names: vec!["bg".into(), "disk".into(), "bar".into()],
            selected_classes: vec![0, 1, 2],
            per_class: ious
                .iter()
                .enumerate()
                .map(|(c, iou)| ClassIou { class: c, tp: 1, union: 2, iou: *iou })
                .collect(),
            miou,
            absent_classes: ious.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(c, _)| c).collect(),
            confusion: ConfusionMatrix::new(3),
            num_images: 1,
            ignored_predictions: 0,
        }
    }

    #[test]
    fn records_have_one_line_per_class_plus_aggregate() {
        let r = report("none", &[(StageKind::Sp, "none")], &[Some(0.5), None, Some(1.0)], 0.75);
        let recs = ReportRecord::from_stage(&r, "target_val");
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[1].flags, vec!["absent"]);
        assert_eq!(recs[3].class, None);
        assert_eq!(recs[3].value, Some(0.75));
        let text = ReportRecord::to_jsonl(&recs).unwrap();
        let back: Vec<ReportRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, recs);
    }

    #[test]
    fn contribution_grid_marks_stages() {
        let base = report("a", &[(StageKind::Sp, "none")], &[Some(0.9), Some(0.2), Some(0.1)], 0.4);
        let full = report(
            "b",
            &[(StageKind::Sp, "blur"), (StageKind::Uda, "uda"), (StageKind::Sa, "sa")],
            &[Some(0.95), Some(0.7), Some(0.6)],
            0.75,
        );
        let grid = contribution_grid(&[("baseline", &base), ("sp+uda+sa", &full)]);
        let lines: Vec<&str> = grid.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("model"));
        assert!(lines[0].ends_with("mIoU"));
        let base_cells: Vec<&str> = lines[2].split_whitespace().collect();
        assert_eq!(base_cells, ["baseline", "90.00", "20.00", "10.00", "40.00"]);
        let full_cells: Vec<&str> = lines[3].split_whitespace().collect();
        assert_eq!(full_cells, ["sp+uda+sa", "x", "x", "x", "95.00", "70.00", "60.00", "75.00"]);
    }

    #[test]
    fn grid_columns_align() {
        let header = vec!["m".to_string(), "long header".to_string()];
        let rows = vec![vec!["row".to_string(), "1".to_string()]];
        let g = render_grid(&header, &rows);
        let lines: Vec<&str> = g.lines().collect();
        assert_eq!(lines[0].len(), lines[2].len());
    }
}
