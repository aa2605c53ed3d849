//! Extraction of a structured location guess from a model completion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeoPoint;

#[derive(Debug, Error, PartialEq)]
pub enum GuessParseError {
    #[error("no balanced JSON object found in the completion")]
    NoJsonObject,
    #[error("candidate object is not valid JSON: {0}")]
    InvalidJson(String),
    #[error("missing key \"{0}\"")]
    MissingKey(&'static str),
    #[error("\"{0}\" must be a string")]
    NotAString(&'static str),
    #[error("\"{0}\" is not a number: {1}")]
    BadNumber(&'static str, String),
    #[error("\"{key}\" value {value} is out of range")]
    OutOfBounds { key: &'static str, value: f64 },
}

/// A fully validated guess.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedGuess {
    pub country: String,
    pub city: String,
    pub latitude: f64,
    pub longitude: f64,
}

impl ParsedGuess {
    pub fn location(&self) -> GeoPoint {
        GeoPoint::new(self.latitude, self.longitude).expect("coordinates validated during parsing")
    }
}

/// Country and city recovered from a completion whose coordinates were
/// missing or unusable. Lets a geocoding fallback still place the guess.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialGuess {
    pub country: String,
    pub city: String,
}

/// Parse a completion into a guess. The first balanced `{...}` substring
/// is taken as the candidate object (so prose or code fences around it
/// are fine), parsed as JSON, and validated: country and city must be
/// strings, latitude and longitude numbers (numeric strings are
/// coerced) within coordinate bounds. Extra keys are ignored.
pub fn parse_guess(text: &str) -> Result<ParsedGuess, GuessParseError> {
    parse_guess_with_partial(text).map_err(|(err, _)| err)
}

/// Like [`parse_guess`], but a failure also reports the country/city pair
/// when those two keys were themselves usable.
pub fn parse_guess_with_partial(
    text: &str,
) -> Result<ParsedGuess, (GuessParseError, Option<PartialGuess>)> {
    let candidate = first_balanced_object(text).ok_or((GuessParseError::NoJsonObject, None))?;
    let value: serde_json::Value = serde_json::from_str(candidate)
        .map_err(|e| (GuessParseError::InvalidJson(e.to_string()), None))?;

    let country = require_string(&value, "country");
    let city = require_string(&value, "city");
    let partial = match (&country, &city) {
        (Ok(country), Ok(city)) => Some(PartialGuess {
            country: country.clone(),
            city: city.clone(),
        }),
        _ => None,
    };

    let checked = (|| {
        let country = country?;
        let city = city?;
        let latitude = require_number(&value, "latitude")?;
        let longitude = require_number(&value, "longitude")?;
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(GuessParseError::OutOfBounds {
                key: "latitude",
                value: latitude,
            });
        }
        if !(-180.0..=180.0).contains(&longitude) {
            return Err(GuessParseError::OutOfBounds {
                key: "longitude",
                value: longitude,
            });
        }
        Ok(ParsedGuess {
            country,
            city,
            latitude,
            longitude,
        })
    })();
    checked.map_err(|err| (err, partial))
}

/// The first `{...}` span whose braces balance, tracking JSON string
/// boundaries so braces inside strings do not count.
fn first_balanced_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn require_string(value: &serde_json::Value, key: &'static str) -> Result<String, GuessParseError> {
    match value.get(key) {
        None => Err(GuessParseError::MissingKey(key)),
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(GuessParseError::NotAString(key)),
    }
}

fn require_number(value: &serde_json::Value, key: &'static str) -> Result<f64, GuessParseError> {
    let raw = value.get(key).ok_or(GuessParseError::MissingKey(key))?;
    let parsed = match raw {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match parsed {
        Some(n) if n.is_finite() => Ok(n),
        Some(n) => Err(GuessParseError::OutOfBounds { key, value: n }),
        None => Err(GuessParseError::BadNumber(key, raw.to_string())),
    }
}
