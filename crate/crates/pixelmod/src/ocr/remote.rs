use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{OcrError, OcrProvider, OcrRequest, ProviderCapabilities, ProviderOutput, TextBox};

pub const ENDPOINT_ENV: &str = "PIXELMOD_OCR_ENDPOINT";
pub const KEY_ENV: &str = "PIXELMOD_OCR_KEY";

#[derive(Serialize)]
struct RecognizeRequest<'a> {
    /// Standard base64 of the encoded image.
    image: &'a str,
}

#[derive(Deserialize)]
struct RecognizeResponse {
    text: String,
    #[serde(default)]
    boxes: Option<Vec<TextBox>>,
}

/// Posts images to an HTTP OCR service.
///
/// Request body: `{"image": "<base64>"}`, with `Authorization: Bearer <key>`
/// when a key is configured. Expected response: `{"text": "...",
/// "boxes": [{"x":..,"y":..,"width":..,"height":..}]}` where `boxes` may be
/// omitted. Connection errors, timeouts, 429 and 5xx responses are retried
/// with exponential backoff; other 4xx responses fail immediately.
///
/// Uses a blocking client, so call it from a worker thread rather than
/// from inside an async runtime.
#[derive(Debug, Clone)]
pub struct RemoteHttpProvider {
    endpoint: String,
    key: Option<String>,
    client: reqwest::blocking::Client,
    max_retries: u32,
    backoff: Duration,
}

impl RemoteHttpProvider {
    pub fn new(endpoint: impl Into<String>, key: Option<String>) -> Result<Self, OcrError> {
        Self::with_timeout(endpoint, key, Duration::from_secs(10))
    }

    pub fn with_timeout(endpoint: impl Into<String>, key: Option<String>, timeout: Duration) -> Result<Self, OcrError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| OcrError::ProviderFailed(e.to_string()))?;
        Ok(RemoteHttpProvider {
            endpoint: endpoint.into(),
            key,
            client,
            max_retries: 2,
            backoff: Duration::from_millis(200),
        })
    }

    /// Reads the endpoint (required) and key (optional) from the environment.
    pub fn from_env() -> Result<Self, OcrError> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| OcrError::ProviderFailed(format!("{ENDPOINT_ENV} is not set")))?;
        Self::new(endpoint, std::env::var(KEY_ENV).ok())
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, body: &RecognizeRequest<'_>) -> Result<ProviderOutput, OcrError> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| OcrError::ProviderUnavailable(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(OcrError::ProviderUnavailable(format!("{} answered {status}", self.endpoint)));
        }
        if !status.is_success() {
            return Err(OcrError::ProviderFailed(format!("{} answered {status}", self.endpoint)));
        }
        let parsed: RecognizeResponse = resp
            .json()
            .map_err(|e| OcrError::ProviderFailed(format!("malformed OCR response: {e}")))?;
        Ok(ProviderOutput {
            text: parsed.text,
            boxes: parsed.boxes,
        })
    }
}

impl OcrProvider for RemoteHttpProvider {
    fn name(&self) -> &str {
        "remote-http"
    }

    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            reports_coverage: true,
            deterministic: false,
        }
    }

    fn recognize(&self, request: &OcrRequest<'_>) -> Result<ProviderOutput, OcrError> {
        let encoded = base64::engine::general_purpose::STANDARD.encode(request.bytes);
        let body = RecognizeRequest { image: &encoded };
        let mut delay = self.backoff;
        let mut tries = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && tries < self.max_retries => {
                    tracing::warn!(error = %e, attempt = tries + 1, "retrying OCR request");
                    std::thread::sleep(delay);
                    delay *= 2;
                    tries += 1;
                }
                other => return other,
            }
        }
    }
}
