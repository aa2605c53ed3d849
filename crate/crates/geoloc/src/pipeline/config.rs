//! Run configuration: a TOML file resolved against its own directory,
//! grounding presets, optional prompt overrides from files, and
//! environment overrides for endpoint URLs and tokens.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{AblationConfig, ElementSet, EndpointSet, PipelineConfig, PipelineError, PromptSet};
use crate::gateway::EndpointConfig;
use crate::osm::OsmConfig;

pub const ENV_PREFIX: &str = "GEOLOC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    Mock,
    Http,
}

/// Fully resolved run settings: the pipeline config plus how to reach
/// the services.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub pipeline: PipelineConfig,
    pub transport_mode: TransportMode,
    /// Required in mock mode; resolved against the config directory.
    pub fixtures_dir: Option<PathBuf>,
}

// ============================================================================
// File schema
// ============================================================================

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    transport: TransportSection,
    endpoints: EndpointsSection,
    #[serde(default)]
    searcher: SearcherSection,
    #[serde(default)]
    retrieval: RetrievalSection,
    #[serde(default)]
    ablations: AblationsSection,
    #[serde(default)]
    prompts: PromptsSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransportSection {
    mode: String,
    fixtures_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndpointsSection {
    reasoner: EndpointConfig,
    searcher: EndpointConfig,
    guesser: EndpointConfig,
    embed: EndpointConfig,
    ground: EndpointConfig,
    ocr: EndpointConfig,
    reasoner_untrained: Option<EndpointConfig>,
    osm: OsmConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearcherSection {
    preset: Option<String>,
    box_threshold: Option<f64>,
    text_threshold: Option<f64>,
    elements: Option<Vec<String>>,
    sign_labels: Option<Vec<String>>,
    top_crops: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrievalSection {
    k: Option<usize>,
    distance_threshold: Option<f64>,
    index_path: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblationsSection {
    enable_reasoner: Option<bool>,
    enable_searcher: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptsSection {
    reasoner_file: Option<PathBuf>,
    searcher_file: Option<PathBuf>,
    guesser_file: Option<PathBuf>,
}

// ============================================================================
// Presets
// ============================================================================

/// Named grounding presets: detection thresholds tuned per benchmark
/// family.
pub fn preset_thresholds(name: &str) -> Option<(f64, f64)> {
    match name {
        "gws" => Some((0.5, 0.5)),
        "im2gps" => Some((0.8, 0.6)),
        _ => None,
    }
}

// ============================================================================
// Loading
// ============================================================================

pub fn load_config(path: &Path) -> Result<ResolvedConfig, PipelineError> {
    let env: HashMap<String, String> = std::env::vars().collect();
    load_config_with_env(path, &env)
}

/// Same as [`load_config`] but with an explicit environment map, so
/// override behavior is testable without mutating the process.
pub fn load_config_with_env(
    path: &Path,
    env: &HashMap<String, String>,
) -> Result<ResolvedConfig, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
    let file: FileConfig = toml::from_str(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));

    let transport_mode = match file.transport.mode.as_str() {
        "mock" => TransportMode::Mock,
        "http" => TransportMode::Http,
        other => {
            return Err(PipelineError::Config(format!(
                "unknown transport mode {other:?}, expected \"mock\" or \"http\""
            )))
        }
    };
    let fixtures_dir = file
        .transport
        .fixtures_dir
        .as_ref()
        .map(|p| resolve_path(base_dir, p));
    if transport_mode == TransportMode::Mock && fixtures_dir.is_none() {
        return Err(PipelineError::Config(
            "transport mode \"mock\" requires fixtures_dir".into(),
        ));
    }

    let (box_threshold, text_threshold) = resolve_thresholds(&file.searcher)?;
    let defaults = ElementSet::default();
    let element_set = ElementSet {
        elements: file.searcher.elements.unwrap_or(defaults.elements),
        sign_labels: file.searcher.sign_labels.unwrap_or(defaults.sign_labels),
    };

    let mut endpoints = EndpointSet {
        reasoner: file.endpoints.reasoner,
        searcher: file.endpoints.searcher,
        guesser: file.endpoints.guesser,
        embed: file.endpoints.embed,
        ground: file.endpoints.ground,
        ocr: file.endpoints.ocr,
        reasoner_untrained: file.endpoints.reasoner_untrained,
        osm: file.endpoints.osm,
    };
    if let Some(cache) = endpoints.osm.cache_path.take() {
        endpoints.osm.cache_path = Some(resolve_path(base_dir, &cache));
    }
    apply_env_overrides(&mut endpoints, env);

    let prompts = resolve_prompts(&file.prompts, base_dir)?;

    let pipeline = PipelineConfig {
        endpoints,
        element_set,
        box_threshold,
        text_threshold,
        retrieval_k: file.retrieval.k.unwrap_or(crate::embedindex::DEFAULT_K),
        retrieval_d_t: file
            .retrieval
            .distance_threshold
            .unwrap_or(crate::embedindex::DEFAULT_DISTANCE_THRESHOLD),
        top_crops: file.searcher.top_crops.unwrap_or(3),
        ablations: AblationConfig {
            enable_reasoner: file.ablations.enable_reasoner.unwrap_or(true),
            enable_searcher: file.ablations.enable_searcher.unwrap_or(true),
        },
        prompts,
        index_path: file
            .retrieval
            .index_path
            .as_ref()
            .map(|p| resolve_path(base_dir, p)),
    };
    pipeline.validate()?;

    Ok(ResolvedConfig {
        pipeline,
        transport_mode,
        fixtures_dir,
    })
}

fn resolve_thresholds(section: &SearcherSection) -> Result<(f64, f64), PipelineError> {
    let from_preset = match &section.preset {
        Some(name) => Some(preset_thresholds(name).ok_or_else(|| {
            PipelineError::Config(format!(
                "unknown searcher preset {name:?}, expected \"gws\" or \"im2gps\""
            ))
        })?),
        None => None,
    };
    let (preset_box, preset_text) = from_preset.unwrap_or_else(|| {
        preset_thresholds("gws").expect("default preset exists")
    });
    Ok((
        section.box_threshold.unwrap_or(preset_box),
        section.text_threshold.unwrap_or(preset_text),
    ))
}

fn resolve_prompts(section: &PromptsSection, base_dir: &Path) -> Result<PromptSet, PipelineError> {
    let mut prompts = PromptSet::default();
    let overrides = [
        (&section.reasoner_file, &mut prompts.reasoner),
        (&section.searcher_file, &mut prompts.searcher),
        (&section.guesser_file, &mut prompts.guesser),
    ];
    for (path, slot) in overrides {
        if let Some(path) = path {
            let resolved = resolve_path(base_dir, path);
            let text = std::fs::read_to_string(&resolved).map_err(|e| {
                PipelineError::Config(format!(
                    "cannot read prompt file {}: {e}",
                    resolved.display()
                ))
            })?;
            if text.trim().is_empty() {
                return Err(PipelineError::Config(format!(
                    "prompt file {} is empty",
                    resolved.display()
                )));
            }
            *slot = text;
        }
    }
    Ok(prompts)
}

fn resolve_path(base_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

/// Apply `GEOLOC_<ROLE>_URL` and `GEOLOC_<ROLE>_TOKEN` overrides. Roles
/// are the endpoint names uppercased (REASONER, SEARCHER, GUESSER,
/// EMBED, GROUND, OCR, REASONER_UNTRAINED, OSM); OSM takes only a URL.
pub fn apply_env_overrides(endpoints: &mut EndpointSet, env: &HashMap<String, String>) {
    let apply = |role: &str, cfg: &mut EndpointConfig| {
        if let Some(url) = env.get(&format!("{ENV_PREFIX}_{role}_URL")) {
            cfg.base_url = url.clone();
        }
        if let Some(token) = env.get(&format!("{ENV_PREFIX}_{role}_TOKEN")) {
            cfg.bearer_token = Some(token.clone());
        }
    };
    apply("REASONER", &mut endpoints.reasoner);
    apply("SEARCHER", &mut endpoints.searcher);
    apply("GUESSER", &mut endpoints.guesser);
    apply("EMBED", &mut endpoints.embed);
    apply("GROUND", &mut endpoints.ground);
    apply("OCR", &mut endpoints.ocr);
    if let Some(cfg) = endpoints.reasoner_untrained.as_mut() {
        apply("REASONER_UNTRAINED", cfg);
    }
    if let Some(url) = env.get(&format!("{ENV_PREFIX}_OSM_URL")) {
        endpoints.osm.base_url = url.clone();
    }
}

// ============================================================================
// Test support
// ============================================================================

pub mod test_support {
    use super::*;

    /// A valid config with every endpoint pointed at `base_url`, for
    /// unit tests that never touch the network.
    pub fn minimal_config(base_url: &str) -> PipelineConfig {
        let endpoint = |model: &str| EndpointConfig::new(base_url, model);
        PipelineConfig {
            endpoints: EndpointSet {
                reasoner: endpoint("reasoner-model"),
                searcher: endpoint("searcher-model"),
                guesser: endpoint("guesser-model"),
                embed: endpoint("embed-model"),
                ground: endpoint("ground-model"),
                ocr: endpoint("ocr-model"),
                reasoner_untrained: None,
                osm: OsmConfig::new(base_url),
            },
            element_set: ElementSet::default(),
            box_threshold: 0.5,
            text_threshold: 0.5,
            retrieval_k: crate::embedindex::DEFAULT_K,
            retrieval_d_t: crate::embedindex::DEFAULT_DISTANCE_THRESHOLD,
            top_crops: 3,
            ablations: AblationConfig::default(),
            prompts: PromptSet::default(),
            index_path: None,
        }
    }
}
