use std::path::Path;

use anyhow::Result;
use owod::experiment::{SweepRow, TaskRecord};

const METRIC_COLUMNS: [&str; 21] = [
    "task",
    "known_classes",
    "map_prev",
    "map_current",
    "map_both",
    "f1i",
    "u_recall",
    "wi",
    "a_ose",
    "unknown_precision",
    "unknown_ap50",
    "detections",
    "unknown_detections",
    "training_images",
    "exemplar_images",
    "harvest_images",
    "harvested",
    "harvest_unknown_detections",
    "full_images",
    "full_annotations",
    "final_loss",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.1}", 100.0 * x))
}

/// One row per task: known-class mAP splits, the unknown metrics and the
/// training-data accounting.
pub fn write_metrics(path: &Path, records: &[TaskRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRIC_COLUMNS)?;
    for r in records {
        let m = &r.report;
        let known: Vec<String> = r.known_classes.iter().map(|c| c.0.to_string()).collect();
        let h = r.harvest.as_ref();
        let count = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        w.write_record([
            m.task.to_string(),
            known.join(" "),
            opt(m.map_prev),
            opt(m.map_current),
            opt(m.map_both),
            opt(m.f1i),
            opt(m.u_recall),
            opt(m.wi),
            m.a_ose.to_string(),
            opt(m.unknown.as_ref().and_then(|u| u.precision)),
            opt(m.unknown.as_ref().and_then(|u| u.ap50)),
            m.detections.to_string(),
            m.unknown_detections.to_string(),
            r.training_images.to_string(),
            r.exemplar_images.to_string(),
            count(h.map(|h| h.stats.images)),
            count(h.map(|h| h.stats.harvested)),
            count(h.map(|h| h.stats.unknown_detections)),
            count(h.map(|h| h.full_images)),
            count(h.map(|h| h.full_annotations)),
            opt(r.final_loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn print_metrics(records: &[TaskRecord]) {
    println!(
        "{:>4} {:>9} {:>9} {:>9} {:>7} {:>9} {:>7} {:>6} {:>9}",
        "task", "mAP prev", "mAP cur", "mAP both", "F1i", "U-Recall", "WI", "A-OSE", "harvested"
    );
    for r in records {
        let m = &r.report;
        println!(
            "{:>4} {:>9} {:>9} {:>9} {:>7} {:>9} {:>7} {:>6} {:>9}",
            m.task,
            pct(m.map_prev),
            pct(m.map_current),
            pct(m.map_both),
            pct(m.f1i),
            pct(m.u_recall),
            m.wi.map_or("-".into(), |w| format!("{w:.4}")),
            m.a_ose,
            r.harvest
                .as_ref()
                .map_or("-".into(), |h| h.stats.harvested.to_string()),
        );
    }
}

pub fn print_sweep(name: &str, rows: &[SweepRow]) {
    println!(
        "{:>10} {:>10} {:>9} {:>6} {:>16} {:>8}",
        name, "unknown FP", "U-Recall", "A-OSE", "known-as-unknown", "d-error"
    );
    for r in rows {
        println!(
            "{:>10} {:>10} {:>9} {:>6} {:>16} {:>8}",
            r.value,
            r.unknown_fp,
            pct(r.u_recall),
            r.a_ose,
            r.known_as_unknown,
            r.delta_error.map_or("-".into(), |d| d.to_string()),
        );
    }
}
