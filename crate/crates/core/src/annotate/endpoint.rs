//! Chat-completion wire format and token log-probability extraction.
//!
//! Requests follow the widely deployed `/chat/completions` shape: a list of
//! messages whose user turn carries text and an `image_url` part, with
//! `logprobs` and `top_logprobs` asking for the candidate distribution of
//! each generated token. Only the first generated token is inspected.

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspects::sha256_hex;
use crate::numerics::log_sum_exp;

/// Appended to every aspect question.
pub const YES_NO_INSTRUCTION: &str = "Answer with exactly one word: yes or no.";
/// Gap below the smallest returned candidate assigned to a missing token.
pub const IMPUTE_GAP: f64 = 10.0;
/// Letters available for class multiple-choice queries.
const CLASS_LETTERS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response decode: {0}")]
    Decode(String),
    #[error("credential: {0}")]
    Credential(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("response has no first-token log-probabilities (response {digest})")]
    NoLogprobs { digest: String },
    #[error("neither yes nor no among candidates (response {digest})")]
    MissingYesNo { digest: String },
    #[error("no class letter among candidates (response {digest})")]
    MissingClass { digest: String },
    #[error("class list is empty")]
    NoClasses,
    #[error("{0} classes exceed the {max} single-letter labels", max = CLASS_LETTERS.len())]
    TooManyClasses(usize),
    #[error("image cannot be encoded: {0}")]
    Unencodable(String),
    #[error("question text is empty")]
    EmptyQuestion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageRef {
    File(PathBuf),
    Url(String),
    Inline { mime: String, bytes: Vec<u8> },
}

impl ImageRef {
    fn mime_for(path: &std::path::Path) -> Option<&'static str> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        Some(match ext.as_str() {
            "png" => "image/png",
            "jpg" | "jpeg" => "image/jpeg",
            "gif" => "image/gif",
            "webp" => "image/webp",
            "bmp" => "image/bmp",
            _ => return None,
        })
    }

    /// URL placed in the `image_url` part: remote URLs pass through, local
    /// files and inline bytes become base64 data URLs.
    pub fn to_url(&self) -> Result<String, ExtractError> {
        let encode = |mime: &str, bytes: &[u8]| {
            format!(
                "data:{mime};base64,{}",
                base64::engine::general_purpose::STANDARD.encode(bytes)
            )
        };
        match self {
            ImageRef::Url(u) if u.starts_with("http://") || u.starts_with("https://") || u.starts_with("data:") => {
                Ok(u.clone())
            }
            ImageRef::Url(u) => Err(ExtractError::Unencodable(format!("unsupported url {u}"))),
            ImageRef::File(p) => {
                let mime = Self::mime_for(p)
                    .ok_or_else(|| ExtractError::Unencodable(format!("unknown image type {}", p.display())))?;
                let bytes = std::fs::read(p).map_err(|e| ExtractError::Unencodable(format!("{}: {e}", p.display())))?;
                Ok(encode(mime, &bytes))
            }
            ImageRef::Inline { mime, bytes } => {
                if !mime.starts_with("image/") || bytes.is_empty() {
                    return Err(ExtractError::Unencodable(format!("inline {mime}")));
                }
                Ok(encode(mime, bytes))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: MessageContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

impl ChatRequest {
    /// The text parts of the user turn, joined by newlines.
    pub fn user_text(&self) -> String {
        let mut out = Vec::new();
        for m in self.messages.iter().filter(|m| m.role == "user") {
            match &m.content {
                MessageContent::Text(t) => out.push(t.clone()),
                MessageContent::Parts(parts) => {
                    for p in parts {
                        if let ContentPart::Text { text } = p {
                            out.push(text.clone());
                        }
                    }
                }
            }
        }
        out.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Choice {
    #[serde(default)]
    pub message: Option<ResponseMessage>,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub choices: Vec<Choice>,
}

impl ChatResponse {
    /// Builds a response whose first token has the given candidates, the
    /// first of which is the sampled token.
    pub fn from_candidates(candidates: &[(&str, f64)]) -> Self {
        let top: Vec<TopLogprob> = candidates
            .iter()
            .map(|(t, l)| TopLogprob {
                token: t.to_string(),
                logprob: *l,
            })
            .collect();
        let (token, logprob) = candidates.first().map_or(("", 0.0), |(t, l)| (*t, *l));
        ChatResponse {
            choices: vec![Choice {
                message: Some(ResponseMessage {
                    content: Some(token.to_string()),
                }),
                logprobs: Some(ChoiceLogprobs {
                    content: Some(vec![TokenLogprob {
                        token: token.to_string(),
                        logprob,
                        top_logprobs: top,
                    }]),
                }),
            }],
        }
    }

    pub fn text(&self) -> Option<&str> {
        self.choices.first()?.message.as_ref()?.content.as_deref()
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    /// Candidates for the first generated token, the sampled token included.
    pub fn first_token_candidates(&self) -> Option<Vec<(String, f64)>> {
        let first = self.choices.first()?.logprobs.as_ref()?.content.as_ref()?.first()?;
        let mut out: Vec<(String, f64)> = first
            .top_logprobs
            .iter()
            .map(|t| (t.token.clone(), t.logprob))
            .collect();
        if !out.iter().any(|(t, _)| *t == first.token) {
            out.push((first.token.clone(), first.logprob));
        }
        Some(out)
    }
}

/// Something that answers chat-completion requests.
pub trait ChatEndpoint: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, EndpointError>;
}

/// Blocking HTTP client for an OpenAI-compatible `/chat/completions` route.
pub struct HttpEndpoint {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpEndpoint")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpEndpoint {
    /// Reads the key from the environment variable named in `api_key_env`.
    pub fn new(base_url: &str, api_key_env: Option<&str>, timeout: Duration) -> Result<Self, EndpointError> {
        let api_key = match api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| EndpointError::Credential(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
        Ok(Self { agent, url, api_key })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ChatEndpoint for HttpEndpoint {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_value(request).map_err(|e| EndpointError::Decode(e.to_string()))?;
        match req.send_json(body) {
            Ok(resp) => resp
                .into_json::<ChatResponse>()
                .map_err(|e| EndpointError::Decode(e.to_string())),
            Err(ureq::Error::Status(status, resp)) => Err(EndpointError::Status {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(e) => Err(EndpointError::Transport(e.to_string())),
        }
    }
}

/// Yes/no question about one image, asking for first-token candidates.
pub fn build_aspect_query(
    model: &str,
    image: &ImageRef,
    question: &str,
    top_logprobs: u32,
) -> Result<ChatRequest, ExtractError> {
    if question.trim().is_empty() {
        return Err(ExtractError::EmptyQuestion);
    }
    let url = image.to_url()?;
    Ok(aspect_request(model, url, question, top_logprobs))
}

pub(crate) fn aspect_request(model: &str, url: String, question: &str, top_logprobs: u32) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: vec![ChatMessage {
            role: "user".into(),
            content: MessageContent::Parts(vec![
                ContentPart::ImageUrl {
                    image_url: ImageUrl { url },
                },
                ContentPart::Text {
                    text: format!("{question} {YES_NO_INSTRUCTION}"),
                },
            ]),
        }],
        max_tokens: 1,
        temperature: 0.0,
        logprobs: true,
        top_logprobs: Some(top_logprobs.max(5)),
    }
}

/// Plain text request used for question generation and selection.
pub fn build_text_request(model: &str, system: Option<&str>, user: &str) -> ChatRequest {
    let mut messages = Vec::new();
    if let Some(s) = system {
        messages.push(ChatMessage {
            role: "system".into(),
            content: MessageContent::Text(s.to_string()),
        });
    }
    messages.push(ChatMessage {
        role: "user".into(),
        content: MessageContent::Text(user.to_string()),
    });
    ChatRequest {
        model: model.to_string(),
        messages,
        max_tokens: 4096,
        temperature: 0.0,
        logprobs: false,
        top_logprobs: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YesNoLogits {
    pub z_yes: f64,
    pub z_no: f64,
    /// One of the two was missing and set below the smallest candidate.
    pub imputed: bool,
}

/// Log-sum-exp over all candidates whose trimmed, lowercased surface form
/// equals `word`.
fn match_logprob(candidates: &[(String, f64)], word: &str) -> Option<f64> {
    let hits: Vec<f64> = candidates
        .iter()
        .filter(|(t, _)| normalise_token(t) == word)
        .map(|(_, l)| *l)
        .collect();
    (!hits.is_empty()).then(|| log_sum_exp(&hits))
}

fn normalise_token(t: &str) -> String {
    t.trim().trim_end_matches(['.', ')', ',', ':']).trim().to_lowercase()
}

fn floor_logprob(candidates: &[(String, f64)]) -> f64 {
    candidates
        .iter()
        .map(|(_, l)| *l)
        .filter(|l| l.is_finite())
        .fold(f64::INFINITY, f64::min)
        - IMPUTE_GAP
}

pub fn extract_yes_no_logits(response: &ChatResponse) -> Result<YesNoLogits, ExtractError> {
    let candidates = response
        .first_token_candidates()
        .ok_or_else(|| ExtractError::NoLogprobs {
            digest: response.digest(),
        })?;
    let yes = match_logprob(&candidates, "yes");
    let no = match_logprob(&candidates, "no");
    let floor = floor_logprob(&candidates);
    match (yes, no) {
        (Some(z_yes), Some(z_no)) => Ok(YesNoLogits {
            z_yes,
            z_no,
            imputed: false,
        }),
        (Some(z_yes), None) => Ok(YesNoLogits {
            z_yes,
            z_no: floor,
            imputed: true,
        }),
        (None, Some(z_no)) => Ok(YesNoLogits {
            z_yes: floor,
            z_no,
            imputed: true,
        }),
        (None, None) => Err(ExtractError::MissingYesNo {
            digest: response.digest(),
        }),
    }
}

fn class_letters(n: usize) -> Result<Vec<String>, ExtractError> {
    if n == 0 {
        return Err(ExtractError::NoClasses);
    }
    if n > CLASS_LETTERS.len() {
        return Err(ExtractError::TooManyClasses(n));
    }
    Ok(CLASS_LETTERS.chars().take(n).map(String::from).collect())
}

/// Single-letter multiple-choice query over the class list.
pub fn build_class_query(
    model: &str,
    image: &ImageRef,
    classes: &[String],
    top_logprobs: u32,
) -> Result<ChatRequest, ExtractError> {
    let letters = class_letters(classes.len())?;
    let url = image.to_url()?;
    let mut text = String::from("Which class does the main object in the image belong to?\n");
    for (l, c) in letters.iter().zip(classes) {
        text.push_str(&format!("{l}. {c}\n"));
    }
    text.push_str("Answer with exactly one letter.");
    Ok(ChatRequest {
        model: model.to_string(),
        messages: vec![ChatMessage {
            role: "user".into(),
            content: MessageContent::Parts(vec![
                ContentPart::ImageUrl {
                    image_url: ImageUrl { url },
                },
                ContentPart::Text { text },
            ]),
        }],
        max_tokens: 1,
        temperature: 0.0,
        logprobs: true,
        top_logprobs: Some(top_logprobs.max(5).max(classes.len() as u32).min(20)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits {
    pub logits: Vec<f64>,
    pub imputed: Vec<bool>,
}

/// One logit per class from the letter candidates; letters absent from the
/// candidates are imputed below the smallest returned candidate.
pub fn extract_class_logits(response: &ChatResponse, num_classes: usize) -> Result<ClassLogits, ExtractError> {
    let letters = class_letters(num_classes)?;
    let candidates = response
        .first_token_candidates()
        .ok_or_else(|| ExtractError::NoLogprobs {
            digest: response.digest(),
        })?;
    let found: Vec<Option<f64>> = letters
        .iter()
        .map(|l| match_logprob(&candidates, &l.to_lowercase()))
        .collect();
    if found.iter().all(Option::is_none) {
        return Err(ExtractError::MissingClass {
            digest: response.digest(),
        });
    }
    let floor = floor_logprob(&candidates);
    Ok(ClassLogits {
        logits: found.iter().map(|f| f.unwrap_or(floor)).collect(),
        imputed: found.iter().map(Option::is_none).collect(),
    })
}
