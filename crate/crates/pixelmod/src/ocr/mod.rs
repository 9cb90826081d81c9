//! Overlay-text extraction behind a replaceable engine.
//!
//! An [`OcrProvider`] turns image bytes into raw text and, optionally, text
//! bounding boxes. [`extract_label`] wraps a provider call into an
//! [`OcrLabel`] with normalized text and box coverage, and [`LabelCache`]
//! memoizes labels by perceptual hash so each distinct image is read once.
//!
//! Built-in providers:
//!
//! * [`SidecarProvider`] reads `<image>.ocr.txt` next to the image file,
//! * [`ExternalProcessProvider`] runs a local engine binary,
//! * [`RemoteHttpProvider`] posts the image to an HTTP engine.

mod cache;
mod process;
mod remote;
mod sidecar;

use std::borrow::Cow;
use std::path::Path;

use icu_normalizer::ComposingNormalizerBorrowed;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::HashError;

pub use cache::{CacheStats, LabelCache, DEFAULT_MAX_IN_FLIGHT};
pub use process::ExternalProcessProvider;
pub use remote::{RemoteHttpProvider, ENDPOINT_ENV, KEY_ENV};
pub use sidecar::{sidecar_path, SidecarProvider, SIDECAR_SUFFIX};

#[derive(Debug, Error)]
pub enum OcrError {
    /// Transient failure; the same request may succeed later.
    #[error("OCR provider unavailable: {0}")]
    ProviderUnavailable(String),
    /// The provider answered but the answer is unusable.
    #[error("OCR provider failed: {0}")]
    ProviderFailed(String),
    #[error(transparent)]
    Decode(#[from] HashError),
}

impl OcrError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, OcrError::ProviderUnavailable(_))
    }
}

/// Axis-aligned text box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

/// What a provider returns for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProviderOutput {
    pub text: String,
    /// `None` when the engine does not report geometry.
    pub boxes: Option<Vec<TextBox>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCapabilities {
    pub reports_coverage: bool,
    pub deterministic: bool,
}

/// One image handed to a provider. `source` is the on-disk location when
/// known; file-based providers need it.
#[derive(Debug, Clone, Copy)]
pub struct OcrRequest<'a> {
    pub bytes: &'a [u8],
    pub source: Option<&'a Path>,
}

impl<'a> OcrRequest<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        OcrRequest { bytes, source: None }
    }

    pub fn with_source(bytes: &'a [u8], source: &'a Path) -> Self {
        OcrRequest {
            bytes,
            source: Some(source),
        }
    }
}

pub trait OcrProvider: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> ProviderCapabilities;
    fn recognize(&self, request: &OcrRequest<'_>) -> Result<ProviderOutput, OcrError>;
}

impl<P: OcrProvider + ?Sized> OcrProvider for std::sync::Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn capabilities(&self) -> ProviderCapabilities {
        (**self).capabilities()
    }
    fn recognize(&self, request: &OcrRequest<'_>) -> Result<ProviderOutput, OcrError> {
        (**self).recognize(request)
    }
}

/// Extracted overlay text. An empty `raw` means the image carries no text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrLabel {
    pub raw: String,
    pub normalized: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl OcrLabel {
    pub fn from_raw(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let normalized = normalize(&raw);
        OcrLabel {
            raw,
            normalized,
            coverage: None,
        }
    }

    pub fn empty() -> Self {
        Self::from_raw("")
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }
}

/// Canonical form used for comparison: NFC, lowercase, every whitespace run
/// collapsed to one space, trimmed. Nothing else is removed.
///
/// ```
/// use pixelmod::ocr::normalize;
/// assert_eq!(normalize("  Stop\nThe   Steal "), "stop the steal");
/// assert_eq!(normalize("Éléction"), "éléction");
/// ```
pub fn normalize(raw: &str) -> String {
    let nfc = ComposingNormalizerBorrowed::new_nfc();
    let lower = nfc.normalize(raw).to_lowercase();
    // Lowercasing can emit sequences that compose further.
    let lower: Cow<'_, str> = nfc.normalize(&lower);
    lower.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs `provider` on one image and builds its label.
///
/// The image header must parse as PNG or JPEG; its dimensions are used to
/// turn the provider's boxes into a coverage fraction.
pub fn extract_label(request: &OcrRequest<'_>, provider: &dyn OcrProvider) -> Result<OcrLabel, OcrError> {
    let (width, height) = image_dimensions(request.bytes)?;
    let out = provider.recognize(request)?;
    let mut label = OcrLabel::from_raw(out.text);
    label.coverage = out.boxes.map(|b| box_coverage(&b, width, height));
    Ok(label)
}

fn image_dimensions(bytes: &[u8]) -> Result<(u32, u32), HashError> {
    let reader = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| HashError::Decode(e.to_string()))?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Jpeg) => {}
        _ => return Err(HashError::Decode("not a PNG or JPEG image".into())),
    }
    reader.into_dimensions().map_err(|e| HashError::Decode(e.to_string()))
}

/// Fraction of the `width` x `height` image covered by the union of
/// `boxes`, after clipping each box to the image.
pub fn box_coverage(boxes: &[TextBox], width: u32, height: u32) -> f64 {
    let (w, h) = (width as f64, height as f64);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let clipped: Vec<(f64, f64, f64, f64)> = boxes
        .iter()
        .filter(|b| b.x.is_finite() && b.y.is_finite() && b.width.is_finite() && b.height.is_finite())
        .map(|b| {
            (
                b.x.clamp(0.0, w),
                b.y.clamp(0.0, h),
                (b.x + b.width).clamp(0.0, w),
                (b.y + b.height).clamp(0.0, h),
            )
        })
        .filter(|&(x0, y0, x1, y1)| x1 > x0 && y1 > y0)
        .collect();

    // Sweep over x slabs; in each slab merge the y intervals.
    let mut xs: Vec<f64> = clipped.iter().flat_map(|r| [r.0, r.2]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut area = 0.0;
    for pair in xs.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let mut spans: Vec<(f64, f64)> = clipped
            .iter()
            .filter(|r| r.0 <= a && r.2 >= b)
            .map(|r| (r.1, r.3))
            .collect();
        spans.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut covered = 0.0;
        let mut current: Option<(f64, f64)> = None;
        for (lo, hi) in spans {
            match current {
                Some((clo, chi)) if lo <= chi => current = Some((clo, chi.max(hi))),
                Some((clo, chi)) => {
                    covered += chi - clo;
                    current = Some((lo, hi));
                }
                None => current = Some((lo, hi)),
            }
        }
        if let Some((clo, chi)) = current {
            covered += chi - clo;
        }
        area += covered * (b - a);
    }
    (area / (w * h)).clamp(0.0, 1.0)
}

/// Where an image lives, for providers that need a path.
pub(crate) fn require_source<'a>(request: &OcrRequest<'a>, provider: &str) -> Result<&'a Path, OcrError> {
    request
        .source
        .ok_or_else(|| OcrError::ProviderFailed(format!("{provider} provider needs the image's file path")))
}
