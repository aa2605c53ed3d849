//! Report rendering. Text output rounds to one decimal; JSON and CSV
//! carry raw floats so downstream comparisons stay lossless.

use geoloc::geodesy::{AccuracyLevel, EvaluationReport};

/// Accuracy columns ordered coarse to fine, the order evaluation tables
/// are conventionally printed in.
const COLUMN_ORDER: [AccuracyLevel; 5] = [
    AccuracyLevel::Continent,
    AccuracyLevel::Country,
    AccuracyLevel::Region,
    AccuracyLevel::City,
    AccuracyLevel::Street,
];

fn accuracy(report: &EvaluationReport, level: AccuracyLevel) -> f64 {
    report.accuracy_pct.get(&level).copied().unwrap_or(0.0)
}

pub fn render_text(report: &EvaluationReport) -> String {
    let mut out = String::new();
    out.push_str("Continent  Country  Region   City  Street  Distance(km)    Score\n");
    let distance = match report.mean_distance_km {
        Some(d) => format!("{d:.1}"),
        None => "n/a".to_string(),
    };
    out.push_str(&format!(
        "{:>9.1}  {:>7.1}  {:>6.1}  {:>5.1}  {:>6.1}  {:>12}  {:>7.1}\n",
        accuracy(report, COLUMN_ORDER[0]),
        accuracy(report, COLUMN_ORDER[1]),
        accuracy(report, COLUMN_ORDER[2]),
        accuracy(report, COLUMN_ORDER[3]),
        accuracy(report, COLUMN_ORDER[4]),
        distance,
        report.mean_score,
    ));
    out.push_str(&format!("n={} failed={}\n", report.n, report.n_failed));
    out
}

pub fn render_csv(report: &EvaluationReport) -> String {
    let distance = match report.mean_distance_km {
        Some(d) => format!("{d}"),
        None => String::new(),
    };
    format!(
        "continent_pct,country_pct,region_pct,city_pct,street_pct,mean_distance_km,mean_score,n,n_failed\n{},{},{},{},{},{},{},{},{}\n",
        accuracy(report, COLUMN_ORDER[0]),
        accuracy(report, COLUMN_ORDER[1]),
        accuracy(report, COLUMN_ORDER[2]),
        accuracy(report, COLUMN_ORDER[3]),
        accuracy(report, COLUMN_ORDER[4]),
        distance,
        report.mean_score,
        report.n,
        report.n_failed,
    )
}
