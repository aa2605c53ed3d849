//! Implementations behind the subcommands. Each returns `Outcome` on
//! success; any error maps to exit code 2 in main.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use geoloc::corpus;
use geoloc::embedindex::{Index, IndexEntry};
use geoloc::gateway::clock::{Clock, FakeClock, SystemClock};
use geoloc::gateway::transport::{canonical_json, HttpTransport, MockTransport, Transport};
use geoloc::gateway::{EndpointConfig, ServiceClient};
use geoloc::geodesy::{self, GeoPoint, ScoredGuess};
use geoloc::pipeline::config::{load_config, ResolvedConfig, TransportMode};
use geoloc::pipeline::{self, CounterSnapshot, Pipeline, PipelineConfig};
use geoloc::textmetrics;

use crate::render;
use crate::{Ablation, Outcome, ReportFormat};

/// Summary of one batch run, written alongside the records.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub dataset_digest: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub parallelism: usize,
    pub n_samples: usize,
    pub n_failed: usize,
    pub counters: CounterSnapshot,
    pub knowledge_counts: BTreeMap<String, usize>,
}

// ============================================================================
// build-index
// ============================================================================

pub fn build_index(
    config_path: &Path,
    guidebook_path: &Path,
    out_path: &Path,
    force: bool,
) -> Result<Outcome> {
    let resolved = load_config(config_path)?;
    refuse_overwrite(out_path, force)?;
    let entries = corpus::load_guidebook(guidebook_path)?;
    ensure!(!entries.is_empty(), "guidebook {} is empty", guidebook_path.display());

    let (transport, _) = build_transport(&resolved)?;
    let client = ServiceClient::new(resolved.pipeline.endpoints.embed.clone(), transport);

    let mut index_entries = Vec::with_capacity(entries.len());
    let mut expected_dim = None;
    for (i, entry) in entries.iter().enumerate() {
        let bytes = std::fs::read(&entry.image_path)
            .with_context(|| format!("cannot read {}", entry.image_path.display()))?;
        let vector = client.embed_image(&bytes, expected_dim)?;
        expected_dim = Some(vector.len());
        index_entries.push(IndexEntry {
            id: format!("{}:{}", entry.source.as_str(), i + 1),
            vector,
            payload: entry.clue.clone(),
        });
    }
    let index = Index::build(index_entries)?;
    index.save(out_path)?;
    println!("indexed {} entries, dim {}", index.len(), index.dim());
    println!("index: {}", out_path.display());
    Ok(Outcome::Clean)
}

// ============================================================================
// run
// ============================================================================

pub fn run(
    config_path: &Path,
    dataset_path: &Path,
    out_dir: &Path,
    parallelism: usize,
    ablate: &[Ablation],
    force: bool,
) -> Result<Outcome> {
    ensure!(parallelism >= 1, "--parallelism must be at least 1");
    let resolved = load_config(config_path)?;
    let mut cfg = resolved.pipeline.clone();
    apply_ablations(&mut cfg, ablate)?;

    let records_path = out_dir.join("records.jsonl");
    refuse_overwrite(&records_path, force)?;

    let samples = corpus::load_dataset(dataset_path)?;
    let dataset_bytes = std::fs::read(dataset_path)
        .with_context(|| format!("cannot read {}", dataset_path.display()))?;

    let (transport, clock) = build_transport(&resolved)?;
    let config_digest = config_digest(&cfg);
    let pipeline = Pipeline::new(cfg, transport, clock)?;

    let started_unix_ms = unix_ms();
    let batch = pipeline.run_batch(&samples, parallelism)?;
    let finished_unix_ms = unix_ms();

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    std::fs::write(&records_path, pipeline::records_to_jsonl(&batch.records))
        .with_context(|| format!("cannot write {}", records_path.display()))?;
    if let Some(report) = &batch.report {
        let report_path = out_dir.join("report.json");
        std::fs::write(&report_path, pretty_json(report)?)
            .with_context(|| format!("cannot write {}", report_path.display()))?;
    }

    let n_failed = batch.records.iter().filter(|r| r.failure.is_some()).count();
    let manifest = RunManifest {
        config_digest,
        dataset_digest: sha256_hex(&dataset_bytes),
        started_unix_ms,
        finished_unix_ms,
        parallelism,
        n_samples: batch.records.len(),
        n_failed,
        counters: pipeline.counters(),
        knowledge_counts: pipeline::knowledge_counts(&batch.records),
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, pretty_json(&manifest)?)
        .with_context(|| format!("cannot write {}", manifest_path.display()))?;

    if let Some(report) = &batch.report {
        print!("{}", render::render_text(report));
    }
    println!("records: {}", records_path.display());
    Ok(if n_failed > 0 { Outcome::Partial } else { Outcome::Clean })
}

fn apply_ablations(cfg: &mut PipelineConfig, ablate: &[Ablation]) -> Result<()> {
    for choice in ablate {
        match choice {
            Ablation::Reasoner => cfg.ablations.enable_reasoner = false,
            Ablation::Searcher => cfg.ablations.enable_searcher = false,
            Ablation::Training => {
                cfg.endpoints.reasoner = cfg
                    .endpoints
                    .reasoner_untrained
                    .clone()
                    .context("--ablate training requires an [endpoints.reasoner_untrained] section")?;
            }
        }
    }
    Ok(())
}

// ============================================================================
// score
// ============================================================================

#[derive(Deserialize)]
struct TruthRow {
    id: String,
    lat: f64,
    lon: f64,
    #[allow(dead_code)]
    country: String,
}

pub fn score(predictions_path: &Path, truth_path: &Path) -> Result<Outcome> {
    let records_text = std::fs::read_to_string(predictions_path)
        .with_context(|| format!("cannot read {}", predictions_path.display()))?;
    let records = pipeline::records_from_jsonl(&records_text)?;
    ensure!(!records.is_empty(), "{} holds no records", predictions_path.display());

    let truth = load_truth(truth_path)?;
    let mut seen = HashSet::new();
    let mut unknown = BTreeSet::new();
    for record in &records {
        ensure!(
            seen.insert(record.sample_id.clone()),
            "duplicate prediction id {:?}",
            record.sample_id
        );
        if !truth.contains_key(&record.sample_id) {
            unknown.insert(record.sample_id.clone());
        }
    }
    if !unknown.is_empty() {
        let listed: Vec<&str> = unknown.iter().map(String::as_str).collect();
        bail!(
            "predictions reference ids missing from {}: {}",
            truth_path.display(),
            listed.join(", ")
        );
    }

    let scored: Vec<ScoredGuess> = records
        .iter()
        .map(|record| match &record.guess {
            Some(guess) if record.failure.is_none() => {
                geodesy::score_pair(guess.location, truth[&record.sample_id])
            }
            _ => ScoredGuess::failed(),
        })
        .collect();
    let report = geodesy::aggregate(&scored)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.n_failed > 0 { Outcome::Partial } else { Outcome::Clean })
}

fn load_truth(path: &Path) -> Result<BTreeMap<String, GeoPoint>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut truth = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: TruthRow = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", path.display(), idx + 1))?;
        let point = GeoPoint::new(row.lat, row.lon)
            .with_context(|| format!("{} line {}", path.display(), idx + 1))?;
        ensure!(
            truth.insert(row.id.clone(), point).is_none(),
            "{} line {}: duplicate truth id {:?}",
            path.display(),
            idx + 1,
            row.id
        );
    }
    ensure!(!truth.is_empty(), "{} holds no truth rows", path.display());
    Ok(truth)
}

// ============================================================================
// score-reasoning
// ============================================================================

#[derive(Deserialize)]
struct ReasoningPair {
    #[allow(dead_code)]
    id: String,
    candidate: String,
    reference: String,
}

#[derive(Serialize)]
struct ReasoningReport {
    n: usize,
    rouge1_f1: f64,
    rouge2_f1: f64,
    rouge_l_f1: f64,
}

pub fn score_reasoning(input_path: &Path) -> Result<Outcome> {
    let text = std::fs::read_to_string(input_path)
        .with_context(|| format!("cannot read {}", input_path.display()))?;
    let mut sums = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: ReasoningPair = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", input_path.display(), idx + 1))?;
        let cand = textmetrics::tokenize(&pair.candidate);
        let refr = textmetrics::tokenize(&pair.reference);
        sums.0 += textmetrics::rouge_n(&cand, &refr, 1).f1;
        sums.1 += textmetrics::rouge_n(&cand, &refr, 2).f1;
        sums.2 += textmetrics::rouge_l(&cand, &refr).f1;
        n += 1;
    }
    ensure!(n > 0, "{} holds no scoring pairs", input_path.display());
    let report = ReasoningReport {
        n,
        rouge1_f1: sums.0 / n as f64,
        rouge2_f1: sums.1 / n as f64,
        rouge_l_f1: sums.2 / n as f64,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Outcome::Clean)
}

// ============================================================================
// report
// ============================================================================

pub fn report(records_path: &Path, format: ReportFormat) -> Result<Outcome> {
    let text = std::fs::read_to_string(records_path)
        .with_context(|| format!("cannot read {}", records_path.display()))?;
    let records = pipeline::records_from_jsonl(&text)?;
    ensure!(!records.is_empty(), "{} holds no records", records_path.display());

    let scored: Vec<ScoredGuess> = records
        .iter()
        .filter_map(|r| {
            if r.failure.is_some() {
                Some(ScoredGuess::failed())
            } else {
                match (r.distance_km, r.score) {
                    (Some(distance_km), Some(score)) => Some(ScoredGuess { distance_km, score }),
                    _ => None,
                }
            }
        })
        .collect();
    ensure!(
        !scored.is_empty(),
        "{} holds no scorable records (no distances and no failures)",
        records_path.display()
    );
    let report = geodesy::aggregate(&scored)?;
    match format {
        ReportFormat::Text => print!("{}", render::render_text(&report)),
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        ReportFormat::Csv => print!("{}", render::render_csv(&report)),
    }
    Ok(Outcome::Clean)
}

// ============================================================================
// ingest
// ============================================================================

pub fn ingest(csv_path: &Path, out_path: &Path, force: bool) -> Result<Outcome> {
    refuse_overwrite(out_path, force)?;
    let mut reader = csv::Reader::from_path(csv_path)
        .with_context(|| format!("cannot read {}", csv_path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("id").context("CSV is missing an 'id' column")?;
    let image_col = col("image").context("CSV is missing an 'image' column")?;
    let lat_col = col("lat");
    let lon_col = col("lon");
    let country_col = col("country");

    let mut seen = HashSet::new();
    let mut out = String::new();
    let mut n = 0usize;
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.with_context(|| format!("{} line {line}", csv_path.display()))?;
        let field = |col: Option<usize>| {
            col.and_then(|c| row.get(c))
                .map(str::trim)
                .filter(|v| !v.is_empty())
        };
        let id = field(Some(id_col))
            .with_context(|| format!("{} line {line}: empty id", csv_path.display()))?;
        let image = field(Some(image_col))
            .with_context(|| format!("{} line {line}: empty image path", csv_path.display()))?;
        ensure!(
            seen.insert(id.to_string()),
            "{} line {line}: duplicate id {id:?}",
            csv_path.display()
        );

        let mut record = serde_json::json!({"id": id, "image": image});
        match (field(lat_col), field(lon_col), field(country_col)) {
            (Some(lat), Some(lon), Some(country)) => {
                let lat: f64 = lat
                    .parse()
                    .with_context(|| format!("{} line {line}: bad lat {lat:?}", csv_path.display()))?;
                let lon: f64 = lon
                    .parse()
                    .with_context(|| format!("{} line {line}: bad lon {lon:?}", csv_path.display()))?;
                let point = GeoPoint::new(lat, lon)
                    .with_context(|| format!("{} line {line}", csv_path.display()))?;
                record["lat"] = point.lat().into();
                record["lon"] = point.lon().into();
                record["country"] = country.into();
            }
            (None, None, None) => {}
            _ => bail!(
                "{} line {line}: lat, lon, and country must be given together",
                csv_path.display()
            ),
        }
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
        n += 1;
    }
    ensure!(n > 0, "{} holds no data rows", csv_path.display());
    std::fs::write(out_path, out)
        .with_context(|| format!("cannot write {}", out_path.display()))?;
    println!("wrote {n} records to {}", out_path.display());
    Ok(Outcome::Clean)
}

// ============================================================================
// Shared helpers
// ============================================================================

fn build_transport(resolved: &ResolvedConfig) -> Result<(Arc<dyn Transport>, Arc<dyn Clock>)> {
    match resolved.transport_mode {
        TransportMode::Mock => {
            let dir = resolved
                .fixtures_dir
                .clone()
                .context("mock transport requires fixtures_dir")?;
            ensure!(
                dir.is_dir(),
                "fixtures directory {} does not exist",
                dir.display()
            );
            Ok((Arc::new(MockTransport::new(dir)), Arc::new(FakeClock::new())))
        }
        TransportMode::Http => Ok((
            Arc::new(HttpTransport::new()),
            Arc::new(SystemClock::new()),
        )),
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    ensure!(
        force || !path.exists(),
        "{} already exists; pass --force to overwrite",
        path.display()
    );
    Ok(())
}

/// Digest of the effective pipeline configuration with credentials
/// removed, stable across key order.
pub fn config_digest(cfg: &PipelineConfig) -> String {
    let mut redacted = cfg.clone();
    let scrub = |e: &mut EndpointConfig| e.bearer_token = None;
    scrub(&mut redacted.endpoints.reasoner);
    scrub(&mut redacted.endpoints.searcher);
    scrub(&mut redacted.endpoints.guesser);
    scrub(&mut redacted.endpoints.embed);
    scrub(&mut redacted.endpoints.ground);
    scrub(&mut redacted.endpoints.ocr);
    if let Some(e) = redacted.endpoints.reasoner_untrained.as_mut() {
        scrub(e);
    }
    let value = serde_json::to_value(&redacted).expect("config serializes");
    sha256_hex(canonical_json(&value).as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use geoloc::pipeline::config::test_support::minimal_config;

    #[test]
    fn config_digest_ignores_tokens_and_is_stable() {
        let cfg = minimal_config("http://svc.mock");
        let mut with_token = cfg.clone();
        with_token.endpoints.guesser.bearer_token = Some("secret".into());
        assert_eq!(config_digest(&cfg), config_digest(&with_token));

        let mut other = cfg.clone();
        other.endpoints.guesser.model = "different".into();
        assert_ne!(config_digest(&cfg), config_digest(&other));
    }

    #[test]
    fn ablation_training_requires_untrained_endpoint() {
        let mut cfg = minimal_config("http://svc.mock");
        assert!(apply_ablations(&mut cfg, &[Ablation::Training]).is_err());

        cfg.endpoints.reasoner_untrained =
            Some(EndpointConfig::new("http://svc.mock/base", "base-model"));
        apply_ablations(&mut cfg, &[Ablation::Training]).unwrap();
        assert_eq!(cfg.endpoints.reasoner.model, "base-model");
    }

    #[test]
    fn ablation_flags_toggle_stages() {
        let mut cfg = minimal_config("http://svc.mock");
        apply_ablations(&mut cfg, &[Ablation::Reasoner, Ablation::Searcher]).unwrap();
        assert!(!cfg.ablations.enable_reasoner);
        assert!(!cfg.ablations.enable_searcher);
    }
}
