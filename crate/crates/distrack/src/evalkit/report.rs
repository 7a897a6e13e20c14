//! Evaluation reports: CSV tables and success/precision plot images.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::plot::{line_plot, Series, SERIES_COLORS};
use super::{EvalResult, PRECISION_POINTS, SUCCESS_POINTS};

/// Write `results.csv` (one row per sequence plus a MEAN summary row),
/// the two curve tables and the two plots. Deterministic byte-for-byte.
pub fn write_report(result: &EvalResult, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut csv = String::from("seq_id,n_frames,auc,precision_20,failed\n");
    for s in &result.per_sequence {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            s.seq_id, s.n_frames, s.auc, s.precision_20, s.failed
        );
    }
    let total_frames: usize = result.per_sequence.iter().map(|s| s.n_frames).sum();
    let _ = writeln!(
        csv,
        "MEAN,{},{},{},{}",
        total_frames,
        result.mean_auc,
        result.mean_precision_20,
        result.per_sequence.iter().any(|s| s.failed)
    );
    let results_path = out_dir.join("results.csv");
    std::fs::write(&results_path, csv).map_err(|e| Error::io(&results_path, e))?;

    let mut success_csv = String::from("threshold,success\n");
    for (i, v) in result.success.iter().enumerate() {
        let _ = writeln!(success_csv, "{},{v}", i as f64 * 0.05);
    }
    let success_path = out_dir.join("success_curve.csv");
    std::fs::write(&success_path, success_csv).map_err(|e| Error::io(&success_path, e))?;

    let mut precision_csv = String::from("threshold_px,precision\n");
    for (i, v) in result.precision.iter().enumerate() {
        let _ = writeln!(precision_csv, "{i},{v}");
    }
    let precision_path = out_dir.join("precision_curve.csv");
    std::fs::write(&precision_path, precision_csv).map_err(|e| Error::io(&precision_path, e))?;

    let success_points: Vec<(f64, f64)> = result
        .success
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as f64 * 0.05, v))
        .collect();
    line_plot(
        &out_dir.join("success.png"),
        &[Series {
            points: success_points,
            color: SERIES_COLORS[0],
        }],
        (0.0, 1.0),
        (0.0, 1.0),
        &[0.0, 0.25, 0.5, 0.75, 1.0],
        &[0.0, 0.25, 0.5, 0.75, 1.0],
    )?;
    let precision_points: Vec<(f64, f64)> = result
        .precision
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as f64, v))
        .collect();
    line_plot(
        &out_dir.join("precision.png"),
        &[Series {
            points: precision_points,
            color: SERIES_COLORS[1],
        }],
        (0.0, (PRECISION_POINTS - 1) as f64),
        (0.0, 1.0),
        &[0.0, 10.0, 20.0, 30.0, 40.0, 50.0],
        &[0.0, 0.25, 0.5, 0.75, 1.0],
    )?;
    Ok(())
}

/// Side-by-side delta table between two evaluations of the same dataset.
pub fn write_delta_table(a: &EvalResult, b: &EvalResult, path: &Path) -> Result<()> {
    let mut csv = String::from("seq_id,auc_a,auc_b,delta_auc\n");
    for sa in &a.per_sequence {
        if let Some(sb) = b.per_sequence.iter().find(|s| s.seq_id == sa.seq_id) {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                sa.seq_id,
                sa.auc,
                sb.auc,
                sb.auc - sa.auc
            );
        }
    }
    let _ = writeln!(
        csv,
        "MEAN,{},{},{}",
        a.mean_auc,
        b.mean_auc,
        b.mean_auc - a.mean_auc
    );
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Parse the AUC column out of a written `results.csv` (consistency checks).
pub fn read_results_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 && fields[0] != "MEAN" {
            return Err(Error::parse(path, format!("line {}: short row", i + 1)));
        }
        let auc: f64 = fields[2]
            .parse()
            .map_err(|e| Error::parse(path, format!("line {}: bad auc: {e}", i + 1)))?;
        rows.push((fields[0].to_string(), auc));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{evaluate, run_ope, OracleTracker};
    use crate::seqgen::{
        crossing_suite_spec, render_sequence, BackgroundSource, GeneratorConfig,
    };

    fn small_result() -> EvalResult {
        let cfg = GeneratorConfig {
            width: 96,
            height: 72,
            alpha_override: None,
        };
        let dataset: Vec<_> = (0..3)
            .map(|i| {
                let spec = crossing_suite_spec(i, 222, 4);
                (
                    format!("seq_{i:06}"),
                    render_sequence(&spec, &BackgroundSource::Procedural, &cfg).unwrap(),
                )
            })
            .collect();
        let traces = run_ope(&dataset, |record| {
            Ok(Box::new(OracleTracker::new(record.target_boxes.clone())))
        });
        evaluate(&dataset, &traces)
    }

    #[test]
    fn report_row_count_and_consistency() {
        let result = small_result();
        let dir = tempfile::tempdir().unwrap();
        write_report(&result, dir.path()).unwrap();
        let rows = read_results_csv(&dir.path().join("results.csv")).unwrap();
        // One row per sequence plus the summary row.
        assert_eq!(rows.len(), result.per_sequence.len() + 1);
        for (row, s) in rows.iter().zip(&result.per_sequence) {
            assert_eq!(row.0, s.seq_id);
            assert!((row.1 - s.auc).abs() < 1e-9);
        }
        let mean_row = rows.last().unwrap();
        assert_eq!(mean_row.0, "MEAN");
        assert!((mean_row.1 - result.mean_auc).abs() < 1e-9);
    }

    #[test]
    fn report_is_byte_identical_across_runs() {
        let result = small_result();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_report(&result, dir_a.path()).unwrap();
        write_report(&result, dir_b.path()).unwrap();
        for name in [
            "results.csv",
            "success_curve.csv",
            "precision_curve.csv",
            "success.png",
            "precision.png",
        ] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn delta_table_lists_means() {
        let result = small_result();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("delta.csv");
        write_delta_table(&result, &result, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().last().unwrap().starts_with("MEAN,"));
        assert!(text.lines().count() == result.per_sequence.len() + 2);
    }

    #[test]
    fn success_curve_count_matches_grid() {
        assert_eq!(SUCCESS_POINTS, 21);
        assert_eq!(PRECISION_POINTS, 51);
    }
}
