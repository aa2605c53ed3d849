//! Shared scaffolding for binary-level tests: a disposable workspace
//! with a mock-mode config, a staged fixture corpus, and a process
//! runner for the compiled CLI.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use geoloc::embedindex::{Index, IndexEntry};
use geoloc::gateway::clock::FakeClock;
use geoloc::gateway::transport::MockTransport;
use geoloc::gateway::{
    chat_request, crop, embed_request, ground_request, ocr_request, BoundingBox, EndpointConfig,
};
use geoloc::osm::search_request;
use geoloc::pipeline::config::load_config;
use geoloc::pipeline::{prompts, render_information, KnowledgeItem, Pipeline, PipelineConfig};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_geoloc")
}

/// Run the CLI with the workspace root as working directory, stripping
/// any ambient endpoint overrides so tests are hermetic.
pub fn run_cli(workdir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(bin());
    for (key, _) in std::env::vars() {
        if key.starts_with("GEOLOC_") {
            cmd.env_remove(key);
        }
    }
    cmd.current_dir(workdir);
    cmd.args(args);
    cmd.output().expect("CLI binary should run")
}

pub fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

pub fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("CLI should exit, not die on a signal")
}

pub fn png(width: u32, height: u32, seed: u8) -> Vec<u8> {
    let img = image::RgbaImage::from_fn(width, height, |x, y| {
        image::Rgba([seed, (x % 251) as u8, (y % 241) as u8, 255])
    });
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgba8(img)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .unwrap();
    bytes
}

// ============================================================================
// Fixture staging
// ============================================================================

/// Stages fixtures into the same directory the CLI's mock transport
/// reads, using the resolved run configuration so request digests line
/// up exactly.
pub struct Station {
    pub transport: Arc<MockTransport>,
    pub cfg: PipelineConfig,
}

impl Station {
    pub fn pipeline(&self) -> Pipeline {
        Pipeline::new(self.cfg.clone(), self.transport.clone(), Arc::new(FakeClock::new()))
            .unwrap()
    }

    pub fn stage_chat(&self, endpoint: &EndpointConfig, prompt: &str, images: &[Vec<u8>], text: &str) {
        let req = chat_request(endpoint, prompt, images);
        self.transport
            .stage_json(
                &req,
                &serde_json::json!({
                    "choices": [{"message": {"role": "assistant", "content": text}}]
                }),
            )
            .unwrap();
    }

    pub fn stage_reasoner(&self, image: &[u8], text: &str) {
        let prompt = prompts::strip_image_token(&self.cfg.prompts.reasoner);
        self.stage_chat(&self.cfg.endpoints.reasoner, &prompt, &[image.to_vec()], text);
    }

    pub fn stage_untrained_reasoner(&self, image: &[u8], text: &str) {
        let endpoint = self
            .cfg
            .endpoints
            .reasoner_untrained
            .clone()
            .expect("config declares an untrained reasoner");
        let prompt = prompts::strip_image_token(&self.cfg.prompts.reasoner);
        self.stage_chat(&endpoint, &prompt, &[image.to_vec()], text);
    }

    pub fn stage_searcher(&self, label: &str, crops: &[Vec<u8>], text: &str) {
        let prompt = prompts::render_searcher(&self.cfg.prompts.searcher, label);
        self.stage_chat(&self.cfg.endpoints.searcher, &prompt, crops, text);
    }

    pub fn stage_guesser(&self, image: &[u8], information: &str, text: &str) {
        let prompt = prompts::render_guesser(&self.cfg.prompts.guesser, information);
        self.stage_chat(&self.cfg.endpoints.guesser, &prompt, &[image.to_vec()], text);
    }

    pub fn stage_ground(&self, image: &[u8], detections: serde_json::Value) {
        let req = ground_request(
            &self.cfg.endpoints.ground,
            image,
            &self.cfg.element_set.elements,
            self.cfg.box_threshold,
            self.cfg.text_threshold,
        );
        self.transport
            .stage_json(&req, &serde_json::json!({ "detections": detections }))
            .unwrap();
    }

    pub fn stage_ocr(&self, image: &[u8], text: &str) {
        let req = ocr_request(&self.cfg.endpoints.ocr, image);
        self.transport
            .stage_json(&req, &serde_json::json!({ "text": text }))
            .unwrap();
    }

    pub fn stage_embed(&self, image: &[u8], vector: &[f32]) {
        let req = embed_request(&self.cfg.endpoints.embed, image);
        self.transport
            .stage_json(&req, &serde_json::json!({ "data": [{ "embedding": vector }] }))
            .unwrap();
    }

    pub fn stage_osm(&self, query: &str, limit: usize, places: serde_json::Value) {
        let req = search_request(&self.cfg.endpoints.osm, query, limit);
        self.transport.stage_json(&req, &places).unwrap();
    }
}

pub fn osm_place(display_name: &str, lat: f64, lon: f64) -> serde_json::Value {
    serde_json::json!({
        "display_name": display_name,
        "lat": format!("{lat}"),
        "lon": format!("{lon}"),
        "importance": 0.5,
    })
}

// ============================================================================
// Workspace
// ============================================================================

/// The vector every staged house crop embeds to; the prebuilt index
/// holds one matching entry so the guidebook tool returns a hit.
pub const HOUSE_EMBEDDING: [f32; 4] = [1.0, 2.0, 3.0, 4.0];
/// Sign crops embed far outside the distance threshold.
pub const SIGN_EMBEDDING: [f32; 4] = [90.0, 90.0, 90.0, 90.0];
pub const GUIDEBOOK_CLUE: &str = "Stone boundary walls are common in Somerset";

/// One staged sample, with everything a test needs to stage additional
/// completion variants (ablations) for the same image.
pub struct SampleFixture {
    pub id: String,
    pub image: Vec<u8>,
    pub reasoning: String,
    pub knowledge: Vec<KnowledgeItem>,
    pub guess_json: String,
    pub dataset_line: String,
}

/// Temp directory holding config.toml, fixtures/, data/, and a prebuilt
/// retrieval index, ready for CLI invocations.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub station: Station,
}

impl Workspace {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("fixtures")).unwrap();
        std::fs::create_dir_all(root.join("data")).unwrap();

        let index = Index::build(vec![IndexEntry {
            id: "toptips:1".into(),
            vector: HOUSE_EMBEDDING.to_vec(),
            payload: GUIDEBOOK_CLUE.into(),
        }])
        .unwrap();
        index.save(&root.join("guidebook.idx")).unwrap();

        let config = root.join("config.toml");
        std::fs::write(
            &config,
            r#"
[transport]
mode = "mock"
fixtures_dir = "fixtures"

[endpoints]
reasoner = { base_url = "http://svc.mock", model = "reasoner-tuned" }
reasoner_untrained = { base_url = "http://svc.mock", model = "reasoner-base" }
searcher = { base_url = "http://svc.mock", model = "searcher-vlm" }
guesser = { base_url = "http://svc.mock", model = "guesser-vlm" }
embed = { base_url = "http://svc.mock", model = "img-embed" }
ground = { base_url = "http://svc.mock", model = "open-vocab-detector" }
ocr = { base_url = "http://svc.mock", model = "ocr-reader" }
osm = { base_url = "http://osm.mock" }

[retrieval]
index_path = "guidebook.idx"
"#,
        )
        .unwrap();

        let resolved = load_config(&config).unwrap();
        let transport = Arc::new(MockTransport::new(resolved.fixtures_dir.unwrap()));
        Workspace {
            dir,
            config,
            station: Station {
                transport,
                cfg: resolved.pipeline,
            },
        }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn run(&self, args: &[&str]) -> Output {
        run_cli(self.root(), args)
    }

    /// Stage the complete fixture chain for one sample: reasoner,
    /// grounding with a house and a road sign, OCR, embeddings, map
    /// search (when OCR text is nonempty), per-label vlm calls, and the
    /// final guess completion.
    pub fn stage_full_sample(
        &self,
        id: &str,
        seed: u8,
        ocr_text: &str,
        guess_json: &str,
        truth: Option<(f64, f64, &str)>,
    ) -> SampleFixture {
        let station = &self.station;
        let img = png(64, 48, seed);
        std::fs::write(self.root().join("data").join(format!("{id}.png")), &img).unwrap();

        let reasoning = format!("Reasoning for {id}: narrow streets and mild coastal light.");
        station.stage_reasoner(&img, &reasoning);

        let house_box = BoundingBox { x0: 2.0, y0: 2.0, x1: 20.0, y1: 20.0 };
        let sign_box = BoundingBox { x0: 30.0, y0: 10.0, x1: 50.0, y1: 26.0 };
        station.stage_ground(
            &img,
            serde_json::json!([
                {"label": "house", "box": [house_box.x0, house_box.y0, house_box.x1, house_box.y1], "score": 0.9},
                {"label": "road sign", "box": [sign_box.x0, sign_box.y0, sign_box.x1, sign_box.y1], "score": 0.8},
            ]),
        );
        let house_crop = crop(&img, &house_box).unwrap();
        let sign_crop = crop(&img, &sign_box).unwrap();
        station.stage_ocr(&sign_crop, ocr_text);
        station.stage_embed(&house_crop, &HOUSE_EMBEDDING);
        station.stage_embed(&sign_crop, &SIGN_EMBEDDING);
        if !ocr_text.trim().is_empty() {
            station.stage_osm(
                ocr_text,
                station.cfg.endpoints.osm.limit,
                serde_json::json!([osm_place(
                    &format!("{ocr_text}, Somerset, England"),
                    51.05,
                    -2.73
                )]),
            );
        }
        station.stage_searcher(
            "house",
            std::slice::from_ref(&house_crop),
            "Stone cottages in this style appear across rural England.",
        );
        station.stage_searcher(
            "road sign",
            std::slice::from_ref(&sign_crop),
            "The sign layout follows UK conventions.",
        );

        let staging = station.pipeline();
        let queries = staging.build_queries(&img).unwrap();
        let (knowledge, degraded) = staging.dispatch_tools(&queries);
        assert!(degraded.is_empty(), "staging degraded: {degraded:?}");
        let info = render_information(&reasoning, &knowledge);
        station.stage_guesser(&img, &info, guess_json);

        let mut line = serde_json::json!({"id": id, "image": format!("data/{id}.png")});
        if let Some((lat, lon, country)) = truth {
            line["lat"] = lat.into();
            line["lon"] = lon.into();
            line["country"] = country.into();
        }
        SampleFixture {
            id: id.to_string(),
            image: img,
            reasoning,
            knowledge,
            guess_json: guess_json.to_string(),
            dataset_line: line.to_string(),
        }
    }

    /// Additionally stage the guesser completions the ablated pipelines
    /// will ask for: no knowledge (searcher off) and no reasoning
    /// (reasoner off).
    pub fn stage_ablation_guessers(&self, fx: &SampleFixture) {
        self.station.stage_guesser(
            &fx.image,
            &render_information(&fx.reasoning, &[]),
            &fx.guess_json,
        );
        self.station.stage_guesser(
            &fx.image,
            &render_information("", &fx.knowledge),
            &fx.guess_json,
        );
    }

    /// Write dataset.jsonl from staged sample lines and return its path.
    pub fn write_dataset(&self, fixtures: &[&SampleFixture]) -> PathBuf {
        let path = self.root().join("dataset.jsonl");
        let mut text = String::new();
        for fx in fixtures {
            text.push_str(&fx.dataset_line);
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        path
    }

    /// The standard three-sample corpus used by the run-level tests:
    /// two full chains with map hits and one sample whose sign OCR comes
    /// back empty.
    pub fn stage_standard_corpus(&self) -> Vec<SampleFixture> {
        let s1 = self.stage_full_sample(
            "s1",
            50,
            "Lower Mill",
            r#"{"country":"United Kingdom","city":"Somerton","latitude":51.05,"longitude":-2.73}"#,
            Some((51.0, -2.7, "United Kingdom")),
        );
        let s2 = self.stage_full_sample(
            "s2",
            51,
            "Ponte Vecchio",
            r#"{"country":"Italy","city":"Florence","latitude":43.77,"longitude":11.25}"#,
            Some((44.5, 11.3, "Italy")),
        );
        let s3 = self.stage_full_sample(
            "s3",
            52,
            "",
            r#"{"country":"Chile","city":"Santiago","latitude":-33.45,"longitude":-70.66}"#,
            Some((-39.8, -73.2, "Chile")),
        );
        vec![s1, s2, s3]
    }
}
