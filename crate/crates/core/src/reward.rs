//! The artifact-classification reward over a pluggable classifier.
//!
//! The reward of an answer is the similarity to the no-artifacts phrase
//! minus an `alpha`-weighted sum of similarities to every artifact phrase,
//! plus an offset `beta` chosen so the reward stays positive over the
//! canonical answer set. The classifier behind it is either the exact scene
//! oracle or a remote endpoint speaking a small JSON protocol.

use std::path::PathBuf;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::{classify_scene, render, SceneConfig, SceneParams};
use crate::taxonomy::{LabelSet, Taxonomy, NO_ARTIFACTS_PHRASE};
use crate::textsim::{bertscore, EmbeddingModel};

/// What a classifier gets to look at: either the raw scene parameters or an
/// image file reference.
#[derive(Debug, Clone)]
pub enum Observation {
    Scene(SceneParams),
    ImagePath(PathBuf),
}

/// The answering interface of an artifact classifier.
pub trait Classifier: Send + Sync {
    fn answer(&self, question: &str, observation: &Observation) -> Result<String>;
}

/// Deterministic classifier backed by the scene oracle. Only understands
/// scene observations; it has no vision.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub scene_cfg: SceneConfig,
    pub taxonomy: Taxonomy,
}

impl OracleClassifier {
    pub fn new(scene_cfg: SceneConfig, taxonomy: Taxonomy) -> Self {
        Self { scene_cfg, taxonomy }
    }
}

impl Classifier for OracleClassifier {
    fn answer(&self, _question: &str, observation: &Observation) -> Result<String> {
        match observation {
            Observation::Scene(params) => oracle_answer(params, &self.scene_cfg, &self.taxonomy),
            Observation::ImagePath(path) => Err(Error::Domain(format!(
                "oracle classifier reads scene parameters, not images ({})",
                path.display()
            ))),
        }
    }
}

/// Canonical answer text for the oracle-predicted label set of a scene.
pub fn oracle_answer(
    params: &SceneParams,
    cfg: &SceneConfig,
    taxonomy: &Taxonomy,
) -> Result<String> {
    let labels = classify_scene(params, cfg);
    taxonomy.canonical_answer(&labels)
}

/// Default weight of the artifact-phrase penalty sum.
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Default reward offset.
pub const DEFAULT_BETA: f64 = 1.0;

/// Phrases, weight and offset of the artifact reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Artifact phrases penalized in the sum (defaults to the canonical
    /// names of the taxonomy categories).
    pub phrases: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    pub no_artifacts_phrase: String,
}

impl RewardConfig {
    pub fn new(
        phrases: Vec<String>,
        alpha: f64,
        beta: f64,
        no_artifacts_phrase: impl Into<String>,
    ) -> Result<Self> {
        if phrases.is_empty() {
            return Err(Error::Validation("reward needs at least one phrase".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Validation(format!("alpha must be >= 0, got {alpha}")));
        }
        if !beta.is_finite() {
            return Err(Error::Validation("beta must be finite".into()));
        }
        let no_artifacts_phrase = no_artifacts_phrase.into();
        if EmbeddingModel::tokenize(&no_artifacts_phrase).is_empty() {
            return Err(Error::Validation("no-artifacts phrase has no tokens".into()));
        }
        Ok(Self {
            phrases,
            alpha,
            beta,
            no_artifacts_phrase,
        })
    }

    /// Default config for a taxonomy: its category names as phrases, the
    /// default alpha/beta, validated to be positive on every canonical
    /// single-label answer.
    pub fn for_taxonomy(taxonomy: &Taxonomy, model: &EmbeddingModel) -> Result<Self> {
        Self::for_taxonomy_with(taxonomy, model, DEFAULT_ALPHA, DEFAULT_BETA)
    }

    /// As [`RewardConfig::for_taxonomy`] with explicit alpha/beta.
    pub fn for_taxonomy_with(
        taxonomy: &Taxonomy,
        model: &EmbeddingModel,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let phrases = taxonomy
            .categories()
            .iter()
            .map(|c| c.name.clone())
            .collect();
        let cfg = Self::new(phrases, alpha, beta, NO_ARTIFACTS_PHRASE)?;
        cfg.validate_positive(taxonomy, model)?;
        Ok(cfg)
    }

    /// Check r > 0 over the enumerable canonical answer set: the
    /// no-artifacts answer and every single-category answer.
    pub fn validate_positive(&self, taxonomy: &Taxonomy, model: &EmbeddingModel) -> Result<()> {
        for answer in canonical_single_label_answers(taxonomy)? {
            let r = artifact_reward(&answer, self, model)?;
            if r <= 0.0 {
                return Err(Error::Validation(format!(
                    "reward not positive: r({:?}) = {}",
                    answer, r
                )));
            }
        }
        Ok(())
    }
}

/// The no-artifacts answer plus one canonical answer per category.
pub fn canonical_single_label_answers(taxonomy: &Taxonomy) -> Result<Vec<String>> {
    let mut answers = vec![taxonomy.canonical_answer(&LabelSet::NoArtifacts)?];
    for cat in taxonomy.categories() {
        answers.push(taxonomy.canonical_answer(&LabelSet::from_ids([cat.id])?)?);
    }
    Ok(answers)
}

/// Score a classifier answer:
/// `F(no_artifacts_phrase, answer) - alpha * sum_k F(phrase_k, answer) + beta`.
pub fn artifact_reward(answer: &str, cfg: &RewardConfig, model: &EmbeddingModel) -> Result<f64> {
    if EmbeddingModel::tokenize(answer).is_empty() {
        return Err(Error::Domain("cannot score an empty answer".into()));
    }
    let keep = bertscore(answer, &cfg.no_artifacts_phrase, model)?.f;
    let mut penalty = 0.0;
    for phrase in &cfg.phrases {
        penalty += bertscore(answer, phrase, model)?.f;
    }
    Ok(keep - cfg.alpha * penalty + cfg.beta)
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    question: &'a str,
    /// Base64 of the encoded image bytes.
    image: String,
    /// Encoding of the image bytes: "pgm" or "png".
    format: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    answer: String,
}

/// HTTP classifier client: POSTs `{question, image, format}` as JSON and
/// expects `{"answer": "..."}` back. Transport failures and 5xx responses
/// are retried with exponential backoff; malformed bodies are protocol
/// errors and surface immediately.
pub struct RemoteClassifier {
    endpoint: String,
    client: reqwest::blocking::Client,
    max_attempts: u32,
    base_backoff: Duration,
    render_resolution: u32,
}

impl RemoteClassifier {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Validation(format!("http client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
            max_attempts: 3,
            base_backoff: Duration::from_millis(100),
            render_resolution: 336,
        })
    }

    pub fn with_attempts(mut self, max_attempts: u32, base_backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.base_backoff = base_backoff;
        self
    }

    pub fn with_render_resolution(mut self, resolution: u32) -> Self {
        self.render_resolution = resolution;
        self
    }

    fn encode_observation(&self, observation: &Observation) -> Result<(Vec<u8>, &'static str)> {
        match observation {
            Observation::Scene(params) => {
                let img = render(params, self.render_resolution)?;
                Ok((img.pgm_bytes(), "pgm"))
            }
            Observation::ImagePath(path) => {
                let bytes = std::fs::read(path)?;
                let format = match path.extension().and_then(|e| e.to_str()) {
                    Some("png") => "png",
                    _ => "pgm",
                };
                Ok((bytes, format))
            }
        }
    }

    fn post_once(&self, body: &RemoteRequest<'_>) -> std::result::Result<String, Error> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(body)
            .send()
            .map_err(|e| Error::Transport {
                message: e.to_string(),
                attempts: 1,
            })?;
        let status = response.status();
        if status.is_server_error() {
            return Err(Error::Transport {
                message: format!("server returned {status}"),
                attempts: 1,
            });
        }
        if !status.is_success() {
            return Err(Error::Protocol(format!("unexpected status {status}")));
        }
        let text = response.text().map_err(|e| Error::Transport {
            message: format!("reading response body: {e}"),
            attempts: 1,
        })?;
        let parsed: RemoteResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("invalid response body: {e}")))?;
        Ok(parsed.answer)
    }
}

impl Classifier for RemoteClassifier {
    fn answer(&self, question: &str, observation: &Observation) -> Result<String> {
        let (bytes, format) = self.encode_observation(observation)?;
        let request = RemoteRequest {
            question,
            image: BASE64.encode(&bytes),
            format,
        };
        let mut last_transport = String::new();
        for attempt in 1..=self.max_attempts {
            match self.post_once(&request) {
                Ok(answer) => return Ok(answer),
                Err(Error::Transport { message, .. }) => {
                    last_transport = message;
                    if attempt < self.max_attempts {
                        std::thread::sleep(self.base_backoff * 2u32.pow(attempt - 1));
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(Error::Transport {
            message: last_transport,
            attempts: self.max_attempts,
        })
    }
}

/// The classifier -> answer -> reward composition used to score denoised
/// scenes during reinforcement learning.
pub struct RewardPipeline {
    pub classifier: Box<dyn Classifier>,
    pub question: String,
    pub reward_cfg: RewardConfig,
    pub model: EmbeddingModel,
}

impl RewardPipeline {
    /// Oracle-backed pipeline with the default question and reward config.
    pub fn oracle(scene_cfg: SceneConfig, taxonomy: Taxonomy) -> Result<Self> {
        let model = EmbeddingModel::default();
        let reward_cfg = RewardConfig::for_taxonomy(&taxonomy, &model)?;
        let question = crate::instructions::build_classification_prompt(&taxonomy);
        Ok(Self {
            classifier: Box::new(OracleClassifier::new(scene_cfg, taxonomy)),
            question,
            reward_cfg,
            model,
        })
    }

    pub fn answer_for_scene(&self, params: &SceneParams) -> Result<String> {
        self.classifier
            .answer(&self.question, &Observation::Scene(*params))
    }

    pub fn reward_for_scene(&self, params: &SceneParams) -> Result<f64> {
        let answer = self.answer_for_scene(params)?;
        artifact_reward(&answer, &self.reward_cfg, &self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{sample_scene, ArtifactSpec};
    use crate::taxonomy::builtin_ids;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    #[test]
    fn reduced_config_scores_self_similarity() {
        let model = EmbeddingModel::default();
        let cfg = RewardConfig::new(vec!["Blur".into()], 0.0, 0.0, NO_ARTIFACTS_PHRASE).unwrap();
        let r = artifact_reward("No artifacts", &cfg, &model).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn default_config_prefers_no_artifacts() {
        let taxonomy = Taxonomy::builtin();
        let model = EmbeddingModel::default();
        let cfg = RewardConfig::for_taxonomy(&taxonomy, &model).unwrap();
        let answers = canonical_single_label_answers(&taxonomy).unwrap();
        let clean = artifact_reward(&answers[0], &cfg, &model).unwrap();
        for answer in &answers[1..] {
            let r = artifact_reward(answer, &cfg, &model).unwrap();
            assert!(r > 0.0, "r({answer:?}) = {r}");
            assert!(clean > r, "clean {clean} vs {answer:?} {r}");
        }
    }

    #[test]
    fn reward_is_deterministic() {
        let taxonomy = Taxonomy::builtin();
        let model = EmbeddingModel::default();
        let cfg = RewardConfig::for_taxonomy(&taxonomy, &model).unwrap();
        let a = artifact_reward("Blur, Out of frame.", &cfg, &model).unwrap();
        let b = artifact_reward("Blur, Out of frame.", &cfg, &model).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extra_penalty_phrase_never_raises_reward() {
        let model = EmbeddingModel::default();
        let answer = "Distorted components.";
        let base = RewardConfig::new(
            vec!["Distorted components".into()],
            0.1,
            1.0,
            NO_ARTIFACTS_PHRASE,
        )
        .unwrap();
        let mut phrases = base.phrases.clone();
        phrases.push("Duplicated components".into());
        let grown = RewardConfig::new(phrases, 0.1, 1.0, NO_ARTIFACTS_PHRASE).unwrap();
        let extra = bertscore(answer, "Duplicated components", &model).unwrap().f;
        assert!(extra >= 0.0, "fixture assumes a non-negative similarity");
        let r_base = artifact_reward(answer, &base, &model).unwrap();
        let r_grown = artifact_reward(answer, &grown, &model).unwrap();
        assert!(r_grown <= r_base);
    }

    #[test]
    fn empty_answer_is_domain_error() {
        let model = EmbeddingModel::default();
        let cfg = RewardConfig::new(vec!["Blur".into()], 0.1, 1.0, NO_ARTIFACTS_PHRASE).unwrap();
        assert!(artifact_reward("  . ", &cfg, &model).is_err());
    }

    #[test]
    fn oracle_answer_matches_scene_construction() {
        let scene_cfg = SceneConfig::default();
        let taxonomy = Taxonomy::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean = sample_scene(&mut rng, ArtifactSpec::Clean, &scene_cfg);
        assert_eq!(
            oracle_answer(&clean, &scene_cfg, &taxonomy).unwrap(),
            "No artifacts."
        );
        let omitted = sample_scene(&mut rng, ArtifactSpec::Omission, &scene_cfg);
        let answer = oracle_answer(&omitted, &scene_cfg, &taxonomy).unwrap();
        assert!(answer.contains(&taxonomy.category(builtin_ids::OMISSION).unwrap().name));
        // Determinism.
        assert_eq!(answer, oracle_answer(&omitted, &scene_cfg, &taxonomy).unwrap());
    }

    #[test]
    fn oracle_rejects_image_observations() {
        let oracle = OracleClassifier::new(SceneConfig::default(), Taxonomy::builtin());
        let err = oracle
            .answer("q", &Observation::ImagePath("x.png".into()))
            .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    /// Minimal single-threaded HTTP stub: serves `n` connections with the
    /// given canned (status, body) responses, then stops.
    fn stub_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let request = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = find_headers_end(&buf) {
                        let headers = String::from_utf8_lossy(&buf[..pos]).to_string();
                        let content_length = headers
                            .lines()
                            .find_map(|l| {
                                l.to_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        while buf.len() < pos + 4 + content_length {
                            let n = stream.read(&mut chunk).unwrap();
                            buf.extend_from_slice(&chunk[..n]);
                        }
                        break String::from_utf8_lossy(&buf[pos + 4..]).to_string();
                    }
                };
                bodies.push(request);
                let reason = if status == 200 { "OK" } else { "ERR" };
                let response = format!(
                    "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    status,
                    reason,
                    body.len(),
                    body
                );
                stream.write_all(response.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{}", addr), handle)
    }

    fn find_headers_end(buf: &[u8]) -> Option<usize> {
        buf.windows(4).position(|w| w == b"\r\n\r\n")
    }

    fn scene_observation() -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Observation::Scene(sample_scene(
            &mut rng,
            ArtifactSpec::Clean,
            &SceneConfig::default(),
        ))
    }

    #[test]
    fn remote_echoes_answer() {
        let (endpoint, handle) =
            stub_server(vec![(200, r#"{"answer":"No artifacts."}"#.to_string())]);
        let client = RemoteClassifier::new(endpoint, Duration::from_secs(2))
            .unwrap()
            .with_attempts(3, Duration::from_millis(1))
            .with_render_resolution(16);
        let answer = client.answer("which artifacts?", &scene_observation()).unwrap();
        assert_eq!(answer, "No artifacts.");
        let bodies = handle.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["question"], "which artifacts?");
        assert_eq!(sent["format"], "pgm");
        assert!(sent["image"].as_str().unwrap().len() > 16);
    }

    #[test]
    fn remote_retries_then_reports_transport_error() {
        let body = r#"{"answer":"x"}"#.to_string();
        let (endpoint, handle) = stub_server(vec![
            (500, body.clone()),
            (500, body.clone()),
            (500, body),
        ]);
        let client = RemoteClassifier::new(endpoint, Duration::from_secs(2))
            .unwrap()
            .with_attempts(3, Duration::from_millis(1))
            .with_render_resolution(16);
        let err = client.answer("q", &scene_observation()).unwrap_err();
        match err {
            Error::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error {other}"),
        }
        assert_eq!(handle.join().unwrap().len(), 3);
    }

    #[test]
    fn remote_malformed_body_is_protocol_error() {
        let (endpoint, handle) = stub_server(vec![(200, r#"{"reply":"hi"}"#.to_string())]);
        let client = RemoteClassifier::new(endpoint, Duration::from_secs(2))
            .unwrap()
            .with_attempts(3, Duration::from_millis(1))
            .with_render_resolution(16);
        let err = client.answer("q", &scene_observation()).unwrap_err();
        match err {
            Error::Protocol(message) => assert!(message.contains("answer"), "{message}"),
            other => panic!("unexpected error {other}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn oracle_pipeline_scores_scenes() {
        let pipeline = RewardPipeline::oracle(SceneConfig::default(), Taxonomy::builtin()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clean = sample_scene(&mut rng, ArtifactSpec::Clean, &SceneConfig::default());
        let broken = sample_scene(&mut rng, ArtifactSpec::Duplication, &SceneConfig::default());
        let r_clean = pipeline.reward_for_scene(&clean).unwrap();
        let r_broken = pipeline.reward_for_scene(&broken).unwrap();
        assert!(r_clean > r_broken);
        assert!(r_broken > 0.0);
    }
}
