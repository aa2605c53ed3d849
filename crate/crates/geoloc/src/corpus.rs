//! Dataset and guidebook ingestion, panorama composition, transcript
//! round filtering, and corpus statistics.
//!
//! Datasets and guidebooks are line-delimited JSON so ingestion errors can
//! name the offending line. Dataset schema:
//! `{"id", "image", "lat", "lon", "country"}` with image paths resolved
//! relative to the file. Guidebook schema: `{"image", "clue", "source"}`.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::GenericImageView;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeoPoint;

/// Rounds are dropped when the round clock ran under this limit.
pub const MIN_TIME_LIMIT_S: f64 = 30.0;
/// Rounds are dropped when the transcript runs under this word count.
pub const MIN_TRANSCRIPT_WORDS: usize = 100;
/// Rounds are dropped when the game score ran under this value, which
/// corresponds to roughly 575 km of error.
pub const MIN_SCORE: f64 = 3400.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("could not read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {detail}")]
    Schema {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path} line {line}: duplicate sample id {id}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path} line {line}: image file {image} does not exist")]
    MissingImage {
        path: PathBuf,
        line: usize,
        image: PathBuf,
    },
    #[error("panorama needs exactly 4 images, got {0}")]
    PanoramaCount(usize),
    #[error("panorama tile {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    PanoramaSize {
        index: usize,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("round score {0} outside [0, 5000]")]
    BadScore(f64),
    #[error("statistics need at least one distance value")]
    EmptyStats,
    #[error("histogram bucket edges must be strictly increasing")]
    BadEdges,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub country: String,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image_path: PathBuf,
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidebookSource {
    TopTips,
    Plonkit,
    Other,
}

impl GuidebookSource {
    fn parse(s: &str) -> GuidebookSource {
        match s {
            "toptips" => GuidebookSource::TopTips,
            "plonkit" => GuidebookSource::Plonkit,
            _ => GuidebookSource::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GuidebookSource::TopTips => "toptips",
            GuidebookSource::Plonkit => "plonkit",
            GuidebookSource::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidebookEntry {
    pub image_path: PathBuf,
    pub clue: String,
    pub source: GuidebookSource,
}

#[derive(Deserialize)]
struct RawSample {
    id: String,
    image: String,
    #[serde(default)]
    lat: Option<f64>,
    #[serde(default)]
    lon: Option<f64>,
    #[serde(default)]
    country: Option<String>,
}

#[derive(Deserialize)]
struct RawGuidebookEntry {
    image: String,
    clue: String,
    #[serde(default)]
    source: Option<String>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

/// Load and validate a dataset. Image paths are resolved against the
/// dataset file's directory and must exist; sample ids must be unique;
/// coordinates are bounds-checked. Ground truth is optional per sample
/// but must be all-or-nothing (country, lat, and lon together).
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, CorpusError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in read_lines(path)? {
        let raw: RawSample = serde_json::from_str(&text).map_err(|e| CorpusError::Schema {
            path: path.to_path_buf(),
            line,
            detail: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: raw.id,
            });
        }
        let image_path = base.join(&raw.image);
        if !image_path.is_file() {
            return Err(CorpusError::MissingImage {
                path: path.to_path_buf(),
                line,
                image: image_path,
            });
        }
        let truth = match (raw.lat, raw.lon, raw.country) {
            (Some(lat), Some(lon), Some(country)) => {
                let location = GeoPoint::new(lat, lon).map_err(|e| CorpusError::Schema {
                    path: path.to_path_buf(),
                    line,
                    detail: e.to_string(),
                })?;
                Some(Truth { country, location })
            }
            (None, None, None) => None,
            _ => {
                return Err(CorpusError::Schema {
                    path: path.to_path_buf(),
                    line,
                    detail: "lat, lon, and country must be given together".into(),
                });
            }
        };
        samples.push(Sample {
            id: raw.id,
            image_path,
            truth,
        });
    }
    Ok(samples)
}

/// Write samples back out in the dataset schema. Image paths are made
/// relative to the output file's directory when possible.
pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<(), CorpusError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for sample in samples {
        let image = sample
            .image_path
            .strip_prefix(base)
            .unwrap_or(&sample.image_path)
            .to_string_lossy()
            .into_owned();
        let mut record = serde_json::json!({"id": sample.id, "image": image});
        if let Some(truth) = &sample.truth {
            record["lat"] = truth.location.lat().into();
            record["lon"] = truth.location.lon().into();
            record["country"] = truth.country.clone().into();
        }
        writeln!(out, "{record}").expect("writing to a vec cannot fail");
    }
    std::fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a guidebook corpus of image and clue pairs ready for embedding.
pub fn load_guidebook(path: &Path) -> Result<Vec<GuidebookEntry>, CorpusError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (line, text) in read_lines(path)? {
        let raw: RawGuidebookEntry = serde_json::from_str(&text).map_err(|e| CorpusError::Schema {
            path: path.to_path_buf(),
            line,
            detail: e.to_string(),
        })?;
        if raw.clue.trim().is_empty() {
            return Err(CorpusError::Schema {
                path: path.to_path_buf(),
                line,
                detail: "clue text is empty".into(),
            });
        }
        entries.push(GuidebookEntry {
            image_path: base.join(&raw.image),
            clue: raw.clue,
            source: GuidebookSource::parse(raw.source.as_deref().unwrap_or("other")),
        });
    }
    Ok(entries)
}

/// Concatenate four equal-size view images horizontally, in heading
/// order 0, 90, 180, 270, into one panorama strip.
pub fn stitch_panorama(images: &[image::DynamicImage]) -> Result<image::DynamicImage, CorpusError> {
    if images.len() != 4 {
        return Err(CorpusError::PanoramaCount(images.len()));
    }
    let (w, h) = images[0].dimensions();
    for (index, img) in images.iter().enumerate().skip(1) {
        let (got_w, got_h) = img.dimensions();
        if (got_w, got_h) != (w, h) {
            return Err(CorpusError::PanoramaSize {
                index,
                want_w: w,
                want_h: h,
                got_w,
                got_h,
            });
        }
    }
    let mut out = image::RgbaImage::new(4 * w, h);
    for (index, img) in images.iter().enumerate() {
        let tile = img.to_rgba8();
        for (x, y, pixel) in tile.enumerate_pixels() {
            out.put_pixel(index as u32 * w + x, y, *pixel);
        }
    }
    Ok(image::DynamicImage::ImageRgba8(out))
}

/// Metadata of one transcribed game round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMeta {
    pub score: f64,
    pub transcript_words: usize,
    pub time_limit_s: f64,
}

impl RoundMeta {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(0.0..=5000.0).contains(&self.score) {
            return Err(CorpusError::BadScore(self.score));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TimeLimit,
    Transcript,
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Keep,
    Drop(DropReason),
}

/// Keep a round only when the time limit, transcript length, and score
/// all clear their thresholds. All three comparisons are strict
/// less-than, so a round at exactly the boundary survives. The drop
/// reason is the first failing rule in time, transcript, score order.
pub fn filter_round(meta: &RoundMeta) -> FilterVerdict {
    if meta.time_limit_s < MIN_TIME_LIMIT_S {
        FilterVerdict::Drop(DropReason::TimeLimit)
    } else if meta.transcript_words < MIN_TRANSCRIPT_WORDS {
        FilterVerdict::Drop(DropReason::Transcript)
    } else if meta.score < MIN_SCORE {
        FilterVerdict::Drop(DropReason::Score)
    } else {
        FilterVerdict::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBucket {
    /// Inclusive upper edge in km; the final bucket is unbounded.
    pub upper_km: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub histogram: Vec<HistogramBucket>,
    pub n_distances: usize,
    pub mean_reasoning_words: Option<f64>,
}

/// Sensible default histogram edges: the five accuracy thresholds.
pub const DEFAULT_BUCKET_EDGES_KM: [f64; 5] = [1.0, 25.0, 200.0, 750.0, 2500.0];

/// Histogram the distance values over the given (strictly increasing)
/// bucket edges, with a trailing overflow bucket, and average the word
/// counts of any reasoning texts provided.
pub fn dataset_stats(
    distances_km: &[f64],
    bucket_edges_km: &[f64],
    reasonings: Option<&[String]>,
) -> Result<DatasetStats, CorpusError> {
    if distances_km.is_empty() {
        return Err(CorpusError::EmptyStats);
    }
    if bucket_edges_km.windows(2).any(|w| w[0] >= w[1]) || bucket_edges_km.is_empty() {
        return Err(CorpusError::BadEdges);
    }

    let mut histogram: Vec<HistogramBucket> = bucket_edges_km
        .iter()
        .map(|&edge| HistogramBucket {
            upper_km: Some(edge),
            count: 0,
        })
        .collect();
    histogram.push(HistogramBucket {
        upper_km: None,
        count: 0,
    });
    for &d in distances_km {
        let slot = bucket_edges_km
            .iter()
            .position(|&edge| d <= edge)
            .unwrap_or(bucket_edges_km.len());
        histogram[slot].count += 1;
    }

    let mean_reasoning_words = reasonings.filter(|r| !r.is_empty()).map(|texts| {
        let total: usize = texts.iter().map(|t| t.split_whitespace().count()).sum();
        total as f64 / texts.len() as f64
    });

    Ok(DatasetStats {
        histogram,
        n_distances: distances_km.len(),
        mean_reasoning_words,
    })
}
