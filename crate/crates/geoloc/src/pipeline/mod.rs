//! The three-stage orchestration: reason about the image, search for
//! external knowledge grounded in image elements, then guess a
//! structured location. Includes batch execution with bounded
//! parallelism and per-stage ablation switches.

pub mod config;
pub mod parse;
pub mod prompts;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::embedindex::Index;
use crate::gateway::clock::Clock;
use crate::gateway::transport::Transport;
use crate::gateway::{self, Detection, EndpointConfig, GatewayError, ServiceClient};
use crate::geodesy::{self, EvaluationReport, GeoPoint, ScoredGuess};
use crate::osm::{OsmClient, OsmConfig, OsmError, Place};
use parse::{parse_guess_with_partial, PartialGuess};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} stage: {source}")]
    Gateway {
        stage: &'static str,
        source: GatewayError,
    },
    #[error("{stage} stage: {source}")]
    Osm {
        stage: &'static str,
        source: OsmError,
    },
    #[error("guidebook index: {0}")]
    Index(#[from] crate::embedindex::IndexError),
    #[error("could not read sample image {path}: {detail}")]
    SampleImage { path: PathBuf, detail: String },
}

// ============================================================================
// Configuration types
// ============================================================================

/// The grounding vocabulary: which elements to detect, and which of them
/// carry readable text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementSet {
    pub elements: Vec<String>,
    pub sign_labels: Vec<String>,
}

impl Default for ElementSet {
    fn default() -> Self {
        ElementSet {
            elements: vec![
                "house".to_string(),
                "road sign".to_string(),
                "building sign".to_string(),
            ],
            sign_labels: vec!["road sign".to_string(), "building sign".to_string()],
        }
    }
}

impl ElementSet {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.elements.is_empty() {
            return Err(PipelineError::Config("element set is empty".into()));
        }
        for sign in &self.sign_labels {
            if !self.elements.contains(sign) {
                return Err(PipelineError::Config(format!(
                    "sign label {sign:?} is not in the element list"
                )));
            }
        }
        Ok(())
    }

    pub fn is_sign(&self, label: &str) -> bool {
        self.sign_labels.iter().any(|s| s == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub enable_reasoner: bool,
    pub enable_searcher: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            enable_reasoner: true,
            enable_searcher: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub reasoner: String,
    pub searcher: String,
    pub guesser: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            reasoner: prompts::REASONER_TEMPLATE.to_string(),
            searcher: prompts::SEARCHER_TEMPLATE.to_string(),
            guesser: prompts::GUESSER_TEMPLATE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSet {
    pub reasoner: EndpointConfig,
    pub searcher: EndpointConfig,
    pub guesser: EndpointConfig,
    pub embed: EndpointConfig,
    pub ground: EndpointConfig,
    pub ocr: EndpointConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoner_untrained: Option<EndpointConfig>,
    pub osm: OsmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub endpoints: EndpointSet,
    pub element_set: ElementSet,
    pub box_threshold: f64,
    pub text_threshold: f64,
    pub retrieval_k: usize,
    pub retrieval_d_t: f64,
    pub top_crops: usize,
    pub ablations: AblationConfig,
    pub prompts: PromptSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_path: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.element_set.validate()?;
        if self.top_crops == 0 {
            return Err(PipelineError::Config("top_crops must be at least 1".into()));
        }
        if self.retrieval_k == 0 {
            return Err(PipelineError::Config("retrieval k must be at least 1".into()));
        }
        if !(self.retrieval_d_t > 0.0) {
            return Err(PipelineError::Config(
                "retrieval distance threshold must be positive".into(),
            ));
        }
        for threshold in [self.box_threshold, self.text_threshold] {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(PipelineError::Config(format!(
                    "grounding threshold {threshold} outside [0, 1]"
                )));
            }
        }
        for endpoint in [
            &self.endpoints.reasoner,
            &self.endpoints.searcher,
            &self.endpoints.guesser,
            &self.endpoints.embed,
            &self.endpoints.ground,
            &self.endpoints.ocr,
        ] {
            endpoint
                .validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

// ============================================================================
// Knowledge and record types
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSource {
    Guidebook,
    Map,
    Vlm,
}

impl KnowledgeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeSource::Guidebook => "guidebook",
            KnowledgeSource::Map => "map",
            KnowledgeSource::Vlm => "vlm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub source: KnowledgeSource,
    /// The crop, text query, or element label this item answers.
    pub query_ref: String,
    pub content: String,
}

impl KnowledgeItem {
    /// Content must be nonempty; empty tool output produces no item.
    pub fn new(source: KnowledgeSource, query_ref: &str, content: &str) -> Option<Self> {
        let content = content.trim();
        if content.is_empty() {
            return None;
        }
        Some(KnowledgeItem {
            source,
            query_ref: query_ref.to_string(),
            content: content.to_string(),
        })
    }
}

/// One cropped detection, carrying its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CropQuery {
    pub label: String,
    /// Rank within its label after confidence ordering, zero-based.
    pub rank: usize,
    pub image: Vec<u8>,
    pub detection: Detection,
}

impl CropQuery {
    pub fn query_ref(&self) -> String {
        format!("{}#{}", self.label, self.rank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextQuery {
    pub text: String,
    /// The sign crop the text was read from.
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    pub crops: Vec<CropQuery>,
    pub texts: Vec<TextQuery>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordSource {
    /// Coordinates came straight from the model's JSON.
    Model,
    /// Coordinates were resolved from the predicted city and country.
    Geocoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guess {
    pub country: String,
    pub city: String,
    pub location: GeoPoint,
    pub coord_source: CoordSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLatencies {
    pub reasoner_ms: u64,
    pub searcher_ms: u64,
    pub guesser_ms: u64,
}

/// Everything one sample produced. Exactly one of `guess` and `failure`
/// is set; distance and score are present only for successful guesses
/// with known ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub schema: u32,
    pub sample_id: String,
    pub reasoning: String,
    pub knowledge: Vec<KnowledgeItem>,
    pub raw_guess: String,
    pub guess: Option<Guess>,
    pub failure: Option<RecordFailure>,
    pub distance_km: Option<f64>,
    pub score: Option<f64>,
    pub latencies: StageLatencies,
    /// Tools that failed and were skipped while assembling knowledge.
    pub degraded_tools: Vec<String>,
}

// ============================================================================
// Call counters
// ============================================================================

/// Per-service invocation counts for a run, mirrored into the run
/// manifest. With the mock transport these equal the transport call log.
#[derive(Debug, Default)]
pub struct CallCounters {
    chat_reasoner: AtomicU64,
    chat_searcher: AtomicU64,
    chat_guesser: AtomicU64,
    embed: AtomicU64,
    ground: AtomicU64,
    ocr: AtomicU64,
    osm_search: AtomicU64,
    osm_geocode: AtomicU64,
    guidebook_queries: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub chat_reasoner: u64,
    pub chat_searcher: u64,
    pub chat_guesser: u64,
    pub embed: u64,
    pub ground: u64,
    pub ocr: u64,
    pub osm_search: u64,
    pub osm_geocode: u64,
    pub guidebook_queries: u64,
}

impl CallCounters {
    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            chat_reasoner: self.chat_reasoner.load(Ordering::Relaxed),
            chat_searcher: self.chat_searcher.load(Ordering::Relaxed),
            chat_guesser: self.chat_guesser.load(Ordering::Relaxed),
            embed: self.embed.load(Ordering::Relaxed),
            ground: self.ground.load(Ordering::Relaxed),
            ocr: self.ocr.load(Ordering::Relaxed),
            osm_search: self.osm_search.load(Ordering::Relaxed),
            osm_geocode: self.osm_geocode.load(Ordering::Relaxed),
            guidebook_queries: self.guidebook_queries.load(Ordering::Relaxed),
        }
    }
}

// ============================================================================
// Pipeline
// ============================================================================

pub struct Pipeline {
    cfg: PipelineConfig,
    reasoner: ServiceClient,
    searcher: ServiceClient,
    guesser: ServiceClient,
    embed: ServiceClient,
    ground: ServiceClient,
    ocr: ServiceClient,
    osm: OsmClient,
    index: Option<Arc<Index>>,
    clock: Arc<dyn Clock>,
    counters: CallCounters,
}

pub struct BatchResult {
    pub records: Vec<PredictionRecord>,
    /// Absent when no record could be scored (no ground truth anywhere).
    pub report: Option<EvaluationReport>,
}

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let index = match &cfg.index_path {
            Some(path) => Some(Arc::new(Index::load(path)?)),
            None => None,
        };
        let osm = OsmClient::new(cfg.endpoints.osm.clone(), transport.clone(), clock.clone())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Pipeline {
            reasoner: ServiceClient::new(cfg.endpoints.reasoner.clone(), transport.clone()),
            searcher: ServiceClient::new(cfg.endpoints.searcher.clone(), transport.clone()),
            guesser: ServiceClient::new(cfg.endpoints.guesser.clone(), transport.clone()),
            embed: ServiceClient::new(cfg.endpoints.embed.clone(), transport.clone()),
            ground: ServiceClient::new(cfg.endpoints.ground.clone(), transport.clone()),
            ocr: ServiceClient::new(cfg.endpoints.ocr.clone(), transport),
            osm,
            index,
            clock,
            counters: CallCounters::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    pub fn index(&self) -> Option<&Arc<Index>> {
        self.index.as_ref()
    }

    /// Free-text reasoning over the image, returned verbatim.
    pub fn reason(&self, image: &[u8]) -> Result<String, PipelineError> {
        let prompt = prompts::strip_image_token(&self.cfg.prompts.reasoner);
        CallCounters::bump(&self.counters.chat_reasoner);
        self.reasoner
            .chat_vision(&prompt, std::slice::from_ref(&image.to_vec()))
            .map_err(|source| PipelineError::Gateway {
                stage: "reasoner",
                source,
            })
    }

    /// Ground the configured elements, keep the most confident crops per
    /// label, and read text off sign crops. Zero detections is a normal,
    /// empty result.
    pub fn build_queries(&self, image: &[u8]) -> Result<QuerySet, PipelineError> {
        let stage = "searcher";
        CallCounters::bump(&self.counters.ground);
        let detections = self
            .ground
            .ground(
                image,
                &self.cfg.element_set.elements,
                self.cfg.box_threshold,
                self.cfg.text_threshold,
            )
            .map_err(|source| PipelineError::Gateway { stage, source })?;

        let mut crops = Vec::new();
        for label in &self.cfg.element_set.elements {
            let kept = top_detections_for_label(&detections, label, self.cfg.top_crops);
            for (rank, detection) in kept.into_iter().enumerate() {
                let image = gateway::crop(image, &detection.box_)
                    .map_err(|source| PipelineError::Gateway { stage, source })?;
                crops.push(CropQuery {
                    label: label.clone(),
                    rank,
                    image,
                    detection,
                });
            }
        }

        let mut texts = Vec::new();
        for crop in &crops {
            if !self.cfg.element_set.is_sign(&crop.label) {
                continue;
            }
            CallCounters::bump(&self.counters.ocr);
            let text = self
                .ocr
                .ocr(&crop.image)
                .map_err(|source| PipelineError::Gateway { stage, source })?;
            if !text.is_empty() {
                texts.push(TextQuery {
                    text,
                    origin: crop.query_ref(),
                });
            }
        }
        Ok(QuerySet { crops, texts })
    }

    /// Run the three knowledge tools over the query set. A failing tool
    /// is logged and skipped; the returned list holds what succeeded, in
    /// guidebook, map, vlm order (query order within each source).
    pub fn dispatch_tools(&self, queries: &QuerySet) -> (Vec<KnowledgeItem>, Vec<String>) {
        let mut items = Vec::new();
        let mut degraded = Vec::new();

        if let Some(index) = &self.index {
            for crop in &queries.crops {
                CallCounters::bump(&self.counters.embed);
                let embedding = match self.embed.embed_image(&crop.image, Some(index.dim())) {
                    Ok(v) => v,
                    Err(e) => {
                        log::warn!("guidebook tool skipped for {}: {e}", crop.query_ref());
                        mark_degraded(&mut degraded, "guidebook");
                        continue;
                    }
                };
                CallCounters::bump(&self.counters.guidebook_queries);
                match index.query(&embedding, self.cfg.retrieval_k, self.cfg.retrieval_d_t) {
                    Ok(hits) => {
                        let query_ref = crop.query_ref();
                        items.extend(hits.iter().filter_map(|hit| {
                            KnowledgeItem::new(KnowledgeSource::Guidebook, &query_ref, &hit.payload)
                        }));
                    }
                    Err(e) => {
                        log::warn!("guidebook query failed for {}: {e}", crop.query_ref());
                        mark_degraded(&mut degraded, "guidebook");
                    }
                }
            }
        }

        for query in &queries.texts {
            CallCounters::bump(&self.counters.osm_search);
            match self.osm.search(&query.text, self.osm.config().limit) {
                Ok(places) => {
                    items.extend(places.iter().filter_map(|place| {
                        KnowledgeItem::new(KnowledgeSource::Map, &query.text, &render_place(place))
                    }));
                }
                Err(e) => {
                    log::warn!("map tool failed for {:?}: {e}", query.text);
                    mark_degraded(&mut degraded, "map");
                }
            }
        }

        for label in &self.cfg.element_set.elements {
            let batch: Vec<Vec<u8>> = queries
                .crops
                .iter()
                .filter(|c| &c.label == label)
                .map(|c| c.image.clone())
                .collect();
            if batch.is_empty() {
                continue;
            }
            let prompt = prompts::render_searcher(&self.cfg.prompts.searcher, label);
            CallCounters::bump(&self.counters.chat_searcher);
            match self.searcher.chat_vision(&prompt, &batch) {
                Ok(completion) => {
                    items.extend(KnowledgeItem::new(KnowledgeSource::Vlm, label, &completion));
                }
                Err(e) => {
                    log::warn!("vlm tool failed for label {label:?}: {e}");
                    mark_degraded(&mut degraded, "vlm");
                }
            }
        }

        (items, degraded)
    }

    /// Ask the guesser for a structured location, with a single
    /// format-reminder re-prompt on parse failure.
    pub fn guess(&self, image: &[u8], reasoning: &str, knowledge: &[KnowledgeItem]) -> Result<GuessStage, PipelineError> {
        let information = render_information(reasoning, knowledge);
        let prompt = prompts::render_guesser(&self.cfg.prompts.guesser, &information);
        let images = vec![image.to_vec()];

        CallCounters::bump(&self.counters.chat_guesser);
        let first = self
            .guesser
            .chat_vision(&prompt, &images)
            .map_err(|source| PipelineError::Gateway {
                stage: "guesser",
                source,
            })?;
        match parse_guess_with_partial(&first) {
            Ok(parsed) => {
                return Ok(GuessStage {
                    raw: first,
                    outcome: Ok(parsed),
                })
            }
            Err((first_err, first_partial)) => {
                let retry_prompt = format!("{prompt}\n\n{}", prompts::FORMAT_REMINDER);
                CallCounters::bump(&self.counters.chat_guesser);
                let second = self
                    .guesser
                    .chat_vision(&retry_prompt, &images)
                    .map_err(|source| PipelineError::Gateway {
                        stage: "guesser",
                        source,
                    })?;
                match parse_guess_with_partial(&second) {
                    Ok(parsed) => Ok(GuessStage {
                        raw: second,
                        outcome: Ok(parsed),
                    }),
                    Err((second_err, second_partial)) => Ok(GuessStage {
                        raw: second,
                        outcome: Err(GuessFailure {
                            reason: format!(
                                "first attempt: {first_err}; after format reminder: {second_err}"
                            ),
                            partial: second_partial.or(first_partial),
                        }),
                    }),
                }
            }
        }
    }

    /// Run all enabled stages for one sample. Stage errors produce a
    /// failed record rather than propagating, so batch runs continue.
    pub fn run_one(&self, sample: &Sample) -> PredictionRecord {
        let mut record = PredictionRecord {
            schema: RECORD_SCHEMA_VERSION,
            sample_id: sample.id.clone(),
            reasoning: String::new(),
            knowledge: Vec::new(),
            raw_guess: String::new(),
            guess: None,
            failure: None,
            distance_km: None,
            score: None,
            latencies: StageLatencies::default(),
            degraded_tools: Vec::new(),
        };

        let image = match std::fs::read(&sample.image_path) {
            Ok(bytes) => bytes,
            Err(e) => {
                record.failure = Some(RecordFailure {
                    stage: "input".into(),
                    reason: format!("cannot read {}: {e}", sample.image_path.display()),
                });
                return record;
            }
        };
        if let Err(e) = gateway::image_dimensions(&image) {
            record.failure = Some(RecordFailure {
                stage: "input".into(),
                reason: e.to_string(),
            });
            return record;
        }

        if self.cfg.ablations.enable_reasoner {
            let started = self.clock.now_ms();
            match self.reason(&image) {
                Ok(reasoning) => record.reasoning = reasoning,
                Err(e) => {
                    record.failure = Some(RecordFailure {
                        stage: "reasoner".into(),
                        reason: e.to_string(),
                    });
                    return record;
                }
            }
            record.latencies.reasoner_ms = self.clock.now_ms() - started;
        }

        if self.cfg.ablations.enable_searcher {
            let started = self.clock.now_ms();
            match self.build_queries(&image) {
                Ok(queries) => {
                    let (knowledge, degraded) = self.dispatch_tools(&queries);
                    record.knowledge = knowledge;
                    record.degraded_tools = degraded;
                }
                Err(e) => {
                    record.failure = Some(RecordFailure {
                        stage: "searcher".into(),
                        reason: e.to_string(),
                    });
                    return record;
                }
            }
            record.latencies.searcher_ms = self.clock.now_ms() - started;
        }

        let started = self.clock.now_ms();
        let stage = match self.guess(&image, &record.reasoning, &record.knowledge) {
            Ok(stage) => stage,
            Err(e) => {
                record.failure = Some(RecordFailure {
                    stage: "guesser".into(),
                    reason: e.to_string(),
                });
                return record;
            }
        };
        record.latencies.guesser_ms = self.clock.now_ms() - started;
        record.raw_guess = stage.raw;

        match stage.outcome {
            Ok(parsed) => {
                record.guess = Some(Guess {
                    country: parsed.country.clone(),
                    city: parsed.city.clone(),
                    location: parsed.location(),
                    coord_source: CoordSource::Model,
                });
            }
            Err(failure) => match self.geocode_rescue(&failure) {
                Some(guess) => record.guess = Some(guess),
                None => {
                    record.failure = Some(RecordFailure {
                        stage: "guesser".into(),
                        reason: failure.reason,
                    });
                }
            },
        }

        if let (Some(guess), Some(truth)) = (&record.guess, &sample.truth) {
            let scored = geodesy::score_pair(guess.location, truth.location);
            record.distance_km = Some(scored.distance_km);
            record.score = Some(scored.score);
        }
        record
    }

    /// A parse failure that still produced country and city gets one
    /// geocoding attempt before the record is declared failed.
    fn geocode_rescue(&self, failure: &GuessFailure) -> Option<Guess> {
        let partial = failure.partial.as_ref()?;
        if partial.country.trim().is_empty() {
            return None;
        }
        CallCounters::bump(&self.counters.osm_geocode);
        match self.osm.geocode_city(&partial.country, &partial.city) {
            Ok(Some(location)) => Some(Guess {
                country: partial.country.clone(),
                city: partial.city.clone(),
                location,
                coord_source: CoordSource::Geocoded,
            }),
            Ok(None) => None,
            Err(e) => {
                log::warn!(
                    "geocode fallback failed for {:?}, {:?}: {e}",
                    partial.city,
                    partial.country
                );
                None
            }
        }
    }

    /// Process the whole dataset with at most `parallelism` workers.
    /// Results come back in dataset order no matter how execution
    /// interleaves.
    pub fn run_batch(
        &self,
        samples: &[Sample],
        parallelism: usize,
    ) -> Result<BatchResult, PipelineError> {
        if samples.is_empty() {
            return Err(PipelineError::Config("dataset is empty".into()));
        }
        let workers = parallelism.max(1).min(samples.len());
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<PredictionRecord>>> =
            samples.iter().map(|_| Mutex::new(None)).collect();

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= samples.len() {
                        break;
                    }
                    let record = self.run_one(&samples[i]);
                    *slots[i].lock().unwrap() = Some(record);
                });
            }
        });

        let records: Vec<PredictionRecord> = slots
            .into_iter()
            .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
            .collect();

        let scored: Vec<ScoredGuess> = records
            .iter()
            .filter_map(|r| {
                if r.failure.is_some() {
                    Some(ScoredGuess::failed())
                } else {
                    match (r.distance_km, r.score) {
                        (Some(distance_km), Some(score)) => Some(ScoredGuess {
                            distance_km,
                            score,
                        }),
                        _ => None,
                    }
                }
            })
            .collect();
        let report = if scored.is_empty() {
            None
        } else {
            Some(geodesy::aggregate(&scored).expect("scored set is nonempty"))
        };
        Ok(BatchResult { records, report })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuessFailure {
    pub reason: String,
    pub partial: Option<PartialGuess>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuessStage {
    pub raw: String,
    pub outcome: Result<parse::ParsedGuess, GuessFailure>,
}

/// Per-label confidence ordering with detection order as the tie-break,
/// truncated to the crop budget.
fn top_detections_for_label(detections: &[Detection], label: &str, top_crops: usize) -> Vec<Detection> {
    let mut candidates: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.label == label)
        .collect();
    candidates.sort_by(|(ia, a), (ib, b)| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });
    candidates
        .into_iter()
        .take(top_crops)
        .map(|(_, d)| d.clone())
        .collect()
}

fn mark_degraded(degraded: &mut Vec<String>, tool: &str) {
    if !degraded.iter().any(|t| t == tool) {
        degraded.push(tool.to_string());
    }
}

fn render_place(place: &Place) -> String {
    format!(
        "{} | {} | lat {:.5}, lon {:.5}",
        place.name,
        place.address,
        place.location.lat(),
        place.location.lon()
    )
}

/// The `<information>` block: reasoning first, then each knowledge item
/// on its own line prefixed by its source tag.
pub fn render_information(reasoning: &str, knowledge: &[KnowledgeItem]) -> String {
    let mut parts = Vec::new();
    if !reasoning.trim().is_empty() {
        parts.push(reasoning.trim().to_string());
    }
    for item in knowledge {
        parts.push(format!("[{}] {}", item.source.as_str(), item.content));
    }
    parts.join("\n")
}

/// Serialize records as JSONL, one record per line.
pub fn records_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<PredictionRecord>, PipelineError> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| PipelineError::Config(format!("records line {}: {e}", idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Group knowledge counts by source, as reported in run summaries.
pub fn knowledge_counts(records: &[PredictionRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for record in records {
        for item in &record.knowledge {
            *counts.entry(item.source.as_str().to_string()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BoundingBox;

    fn det(label: &str, confidence: f64, x0: f64) -> Detection {
        Detection {
            label: label.to_string(),
            box_: BoundingBox {
                x0,
                y0: 0.0,
                x1: x0 + 1.0,
                y1: 1.0,
            },
            confidence,
        }
    }

    #[test]
    fn top_detections_sorted_by_confidence() {
        let detections = vec![
            det("house", 0.6, 0.0),
            det("house", 0.9, 1.0),
            det("road sign", 0.99, 2.0),
            det("house", 0.8, 3.0),
            det("house", 0.7, 4.0),
            det("house", 0.5, 5.0),
        ];
        let kept = top_detections_for_label(&detections, "house", 3);
        let confidences: Vec<f64> = kept.iter().map(|d| d.confidence).collect();
        assert_eq!(confidences, vec![0.9, 0.8, 0.7]);
    }

    #[test]
    fn top_detection_ties_keep_detection_order() {
        let detections = vec![
            det("house", 0.8, 0.0),
            det("house", 0.8, 1.0),
            det("house", 0.8, 2.0),
        ];
        let kept = top_detections_for_label(&detections, "house", 2);
        assert_eq!(kept[0].box_.x0, 0.0);
        assert_eq!(kept[1].box_.x0, 1.0);
    }

    #[test]
    fn element_set_default_and_validation() {
        let set = ElementSet::default();
        assert_eq!(set.elements, vec!["house", "road sign", "building sign"]);
        assert!(set.validate().is_ok());
        assert!(set.is_sign("road sign"));
        assert!(!set.is_sign("house"));

        let bad = ElementSet {
            elements: vec!["house".into()],
            sign_labels: vec!["banner".into()],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn information_block_orders_reasoning_then_items() {
        let knowledge = vec![
            KnowledgeItem::new(KnowledgeSource::Guidebook, "house#0", "white houses").unwrap(),
            KnowledgeItem::new(KnowledgeSource::Map, "Lower Mill", "a mill in Somerset").unwrap(),
            KnowledgeItem::new(KnowledgeSource::Vlm, "house", "looks European").unwrap(),
        ];
        let block = render_information("my reasoning", &knowledge);
        assert_eq!(
            block,
            "my reasoning\n[guidebook] white houses\n[map] a mill in Somerset\n[vlm] looks European"
        );
    }

    #[test]
    fn empty_tool_output_produces_no_item() {
        assert!(KnowledgeItem::new(KnowledgeSource::Vlm, "x", "   ").is_none());
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let record = PredictionRecord {
            schema: RECORD_SCHEMA_VERSION,
            sample_id: "s1".into(),
            reasoning: "r".into(),
            knowledge: vec![KnowledgeItem::new(KnowledgeSource::Map, "q", "c").unwrap()],
            raw_guess: "{}".into(),
            guess: Some(Guess {
                country: "France".into(),
                city: "Rennes".into(),
                location: GeoPoint::new(48.1, -1.68).unwrap(),
                coord_source: CoordSource::Model,
            }),
            failure: None,
            distance_km: Some(12.0),
            score: Some(4900.0),
            latencies: StageLatencies::default(),
            degraded_tools: vec![],
        };
        let text = records_to_jsonl(std::slice::from_ref(&record));
        let back = records_from_jsonl(&text).unwrap();
        assert_eq!(back, vec![record]);
    }

    #[test]
    fn config_validation_rejects_bad_numbers() {
        let mut cfg = config::test_support::minimal_config("http://svc.mock");
        assert!(cfg.validate().is_ok());
        cfg.top_crops = 0;
        assert!(cfg.validate().is_err());
        cfg.top_crops = 3;
        cfg.box_threshold = 1.5;
        assert!(cfg.validate().is_err());
    }
}
