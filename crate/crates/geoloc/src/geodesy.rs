//! Great-circle distance, game scoring, and multi-level accuracy reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spherical Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Score awarded for a perfect guess.
pub const SCORE_MAX: f64 = 5000.0;

/// Exponential decay constant of the score curve, in kilometers.
pub const SCORE_DECAY_KM: f64 = 1492.7;

#[derive(Debug, Error, PartialEq)]
pub enum GeodesyError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("coordinate is not a finite number: {0}")]
    NonFinite(f64),
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("cannot aggregate an empty record set")]
    EmptyAggregate,
}

/// A latitude/longitude pair in degrees.
///
/// Latitude is validated into [-90, 90]; longitude is normalized into
/// [-180, 180) on construction so antimeridian-straddling inputs compare
/// sanely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeodesyError> {
        if !lat.is_finite() {
            return Err(GeodesyError::NonFinite(lat));
        }
        if !lon.is_finite() {
            return Err(GeodesyError::NonFinite(lon));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeodesyError::LatitudeOutOfRange(lat));
        }
        let lon = normalize_lon(lon);
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        GeoPoint::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can return the modulus itself after rounding, e.g. for
    // inputs a hair below -180.
    if wrapped >= 180.0 {
        -180.0
    } else {
        wrapped
    }
}

/// Great-circle distance between two points on the 6371 km sphere.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat_a = a.lat.to_radians();
    let lat_b = b.lat.to_radians();
    let d_lat = (b.lat - a.lat).to_radians();
    let d_lon = (b.lon - a.lon).to_radians();

    let h = (d_lat / 2.0).sin().powi(2) + lat_a.cos() * lat_b.cos() * (d_lon / 2.0).sin().powi(2);
    // Floating-point drift near antipodes can push h a hair above 1.
    let delta = h.sqrt().clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * delta.asin()
}

/// Game score for a guess at distance `d_km` from the truth: 5000 at zero
/// error, decaying exponentially with distance.
pub fn geoguessr_score(d_km: f64) -> Result<f64, GeodesyError> {
    if !(d_km >= 0.0) {
        return Err(GeodesyError::NegativeDistance(d_km));
    }
    Ok(SCORE_MAX * (-d_km / SCORE_DECAY_KM).exp())
}

/// The five accuracy levels, ordered from finest to coarsest threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AccuracyLevel {
    Street,
    City,
    Region,
    Country,
    Continent,
}

impl AccuracyLevel {
    pub const ALL: [AccuracyLevel; 5] = [
        AccuracyLevel::Street,
        AccuracyLevel::City,
        AccuracyLevel::Region,
        AccuracyLevel::Country,
        AccuracyLevel::Continent,
    ];

    pub fn threshold_km(self) -> f64 {
        match self {
            AccuracyLevel::Street => 1.0,
            AccuracyLevel::City => 25.0,
            AccuracyLevel::Region => 200.0,
            AccuracyLevel::Country => 750.0,
            AccuracyLevel::Continent => 2500.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AccuracyLevel::Street => "Street",
            AccuracyLevel::City => "City",
            AccuracyLevel::Region => "Region",
            AccuracyLevel::Country => "Country",
            AccuracyLevel::Continent => "Continent",
        }
    }
}

/// Every level whose threshold the distance satisfies. The boundary case
/// `d == threshold` counts as a hit, so the result is upward-closed from
/// the finest level hit.
pub fn level_hits(d_km: f64) -> Vec<AccuracyLevel> {
    AccuracyLevel::ALL
        .into_iter()
        .filter(|level| d_km <= level.threshold_km())
        .collect()
}

/// One scored prediction, reduced to what the report needs. A failed guess
/// is represented by an infinite distance and a zero score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredGuess {
    pub distance_km: f64,
    pub score: f64,
}

impl ScoredGuess {
    pub fn failed() -> Self {
        ScoredGuess {
            distance_km: f64::INFINITY,
            score: 0.0,
        }
    }

    pub fn is_failed(&self) -> bool {
        !self.distance_km.is_finite()
    }
}

/// Aggregate accuracy, distance, and score over a record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy_pct: BTreeMap<AccuracyLevel, f64>,
    /// Mean over successful guesses; `None` when every guess failed.
    pub mean_distance_km: Option<f64>,
    pub mean_score: f64,
    pub n: usize,
    pub n_failed: usize,
}

/// Aggregate a nonempty record set. Failed guesses count as misses at
/// every level and drag the mean score down with their zero, but are left
/// out of the distance mean so it stays finite.
pub fn aggregate(records: &[ScoredGuess]) -> Result<EvaluationReport, GeodesyError> {
    if records.is_empty() {
        return Err(GeodesyError::EmptyAggregate);
    }
    let n = records.len();
    let n_failed = records.iter().filter(|r| r.is_failed()).count();

    let mut accuracy_pct = BTreeMap::new();
    for level in AccuracyLevel::ALL {
        let hits = records
            .iter()
            .filter(|r| r.distance_km <= level.threshold_km())
            .count();
        accuracy_pct.insert(level, 100.0 * hits as f64 / n as f64);
    }

    let n_ok = n - n_failed;
    let mean_distance_km = if n_ok == 0 {
        None
    } else {
        let sum: f64 = records
            .iter()
            .filter(|r| !r.is_failed())
            .map(|r| r.distance_km)
            .sum();
        Some(sum / n_ok as f64)
    };
    let mean_score = records.iter().map(|r| r.score).sum::<f64>() / n as f64;

    Ok(EvaluationReport {
        accuracy_pct,
        mean_distance_km,
        mean_score,
        n,
        n_failed,
    })
}

/// Distance and score for a prediction against a ground truth point.
pub fn score_pair(prediction: GeoPoint, truth: GeoPoint) -> ScoredGuess {
    let distance_km = haversine_km(prediction, truth);
    let score = geoguessr_score(distance_km).expect("haversine distance is non-negative");
    ScoredGuess { distance_km, score }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() <= tol,
            "expected {expected} +- {tol}, got {actual}"
        );
    }

    #[test]
    fn identical_points_are_zero_distance() {
        assert_eq!(haversine_km(pt(10.0, 20.0), pt(10.0, 20.0)), 0.0);
    }

    #[test]
    fn antipodal_distance_is_half_circumference() {
        let d = haversine_km(pt(0.0, 0.0), pt(0.0, 180.0));
        assert_close(d, std::f64::consts::PI * EARTH_RADIUS_KM, 0.01);
        assert_close(d, 20015.087, 0.01);
    }

    #[test]
    fn one_degree_equatorial_arc() {
        let d = haversine_km(pt(0.0, 0.0), pt(0.0, 1.0));
        assert_close(d, EARTH_RADIUS_KM * std::f64::consts::PI / 180.0, 0.001);
        assert_close(d, 111.195, 0.001);
    }

    #[test]
    fn longitude_wrap_matches_unwrapped_arc() {
        let wrapped = haversine_km(pt(0.0, 179.5), pt(0.0, -179.5));
        let plain = haversine_km(pt(0.0, 0.0), pt(0.0, 1.0));
        assert_close(wrapped, plain, 1e-6);
    }

    #[test]
    fn known_city_pair_is_plausible() {
        // Paris to Berlin, roughly 878 km by great circle.
        let d = haversine_km(pt(48.8566, 2.3522), pt(52.52, 13.405));
        assert_close(d, 878.0, 2.0);
    }

    #[test]
    fn perfect_score_is_exactly_5000() {
        assert_eq!(geoguessr_score(0.0).unwrap(), 5000.0);
    }

    #[test]
    fn score_at_575_km_lands_near_3400() {
        let s = geoguessr_score(575.0).unwrap();
        assert!((3390.0..=3410.0).contains(&s), "got {s}");
    }

    #[test]
    fn score_at_decay_constant_is_5000_over_e() {
        assert_close(
            geoguessr_score(SCORE_DECAY_KM).unwrap(),
            5000.0 / std::f64::consts::E,
            0.01,
        );
    }

    #[test]
    fn negative_distance_is_rejected() {
        assert_eq!(
            geoguessr_score(-1.0),
            Err(GeodesyError::NegativeDistance(-1.0))
        );
    }

    #[test]
    fn level_hits_below_all_thresholds() {
        assert_eq!(level_hits(0.5), AccuracyLevel::ALL.to_vec());
    }

    #[test]
    fn level_hits_mid_range() {
        assert_eq!(
            level_hits(100.0),
            vec![
                AccuracyLevel::Region,
                AccuracyLevel::Country,
                AccuracyLevel::Continent
            ]
        );
    }

    #[test]
    fn level_hits_beyond_all_thresholds() {
        assert!(level_hits(9000.0).is_empty());
    }

    #[test]
    fn level_boundary_counts_as_hit() {
        for level in AccuracyLevel::ALL {
            assert!(level_hits(level.threshold_km()).contains(&level));
        }
    }

    #[test]
    fn latitude_out_of_range_is_rejected() {
        assert!(matches!(
            GeoPoint::new(95.0, 0.0),
            Err(GeodesyError::LatitudeOutOfRange(_))
        ));
    }

    #[test]
    fn longitude_normalizes_into_range() {
        assert_eq!(pt(0.0, 200.0).lon(), -160.0);
        assert_eq!(pt(0.0, -540.0).lon(), -180.0);
        assert_eq!(pt(0.0, 180.0).lon(), -180.0);
    }

    #[test]
    fn aggregate_two_records_hand_checked() {
        let records = vec![
            ScoredGuess {
                distance_km: 0.0,
                score: geoguessr_score(0.0).unwrap(),
            },
            ScoredGuess {
                distance_km: 2000.0,
                score: geoguessr_score(2000.0).unwrap(),
            },
        ];
        let report = aggregate(&records).unwrap();
        assert_eq!(report.accuracy_pct[&AccuracyLevel::Street], 50.0);
        assert_eq!(report.accuracy_pct[&AccuracyLevel::Continent], 100.0);
        assert_close(report.mean_score, 3154.7098, 0.001);
        assert_eq!(report.mean_distance_km, Some(1000.0));
    }

    #[test]
    fn aggregate_single_perfect_record() {
        let report = aggregate(&[ScoredGuess {
            distance_km: 0.0,
            score: 5000.0,
        }])
        .unwrap();
        for level in AccuracyLevel::ALL {
            assert_eq!(report.accuracy_pct[&level], 100.0);
        }
        assert_eq!(report.mean_distance_km, Some(0.0));
        assert_eq!(report.mean_score, 5000.0);
    }

    #[test]
    fn aggregate_single_failure() {
        let report = aggregate(&[ScoredGuess::failed()]).unwrap();
        for level in AccuracyLevel::ALL {
            assert_eq!(report.accuracy_pct[&level], 0.0);
        }
        assert_eq!(report.mean_distance_km, None);
        assert_eq!(report.mean_score, 0.0);
        assert_eq!(report.n_failed, 1);
    }

    #[test]
    fn aggregate_rejects_empty_input() {
        assert_eq!(aggregate(&[]), Err(GeodesyError::EmptyAggregate));
    }

    #[test]
    fn six_distance_fixture_accuracies() {
        let records: Vec<ScoredGuess> = [0.5, 10.0, 100.0, 500.0, 1000.0, 3000.0]
            .iter()
            .map(|&d| ScoredGuess {
                distance_km: d,
                score: geoguessr_score(d).unwrap(),
            })
            .collect();
        let report = aggregate(&records).unwrap();
        let expect = [
            (AccuracyLevel::Street, 16.7),
            (AccuracyLevel::City, 33.3),
            (AccuracyLevel::Region, 50.0),
            (AccuracyLevel::Country, 66.7),
            (AccuracyLevel::Continent, 83.3),
        ];
        for (level, pct) in expect {
            assert_close(report.accuracy_pct[&level], pct, 0.1);
        }
    }
}
