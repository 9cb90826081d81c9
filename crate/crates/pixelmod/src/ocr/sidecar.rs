use std::ffi::OsString;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::{require_source, OcrError, OcrProvider, OcrRequest, ProviderCapabilities, ProviderOutput};

/// Appended to the full image file name: `poster.png` reads `poster.png.ocr.txt`.
pub const SIDECAR_SUFFIX: &str = ".ocr.txt";

pub fn sidecar_path(image: &Path) -> PathBuf {
    let mut name: OsString = image.as_os_str().to_owned();
    name.push(SIDECAR_SUFFIX);
    PathBuf::from(name)
}

/// Reads precomputed text from a UTF-8 file beside the image. A missing
/// file means the image has no overlay text.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidecarProvider;

impl OcrProvider for SidecarProvider {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            reports_coverage: false,
            deterministic: true,
        }
    }

    fn recognize(&self, request: &OcrRequest<'_>) -> Result<ProviderOutput, OcrError> {
        let path = sidecar_path(require_source(request, self.name())?);
        match std::fs::read(&path) {
            Ok(bytes) => {
                let text = String::from_utf8(bytes)
                    .map_err(|_| OcrError::ProviderFailed(format!("{} is not UTF-8", path.display())))?;
                Ok(ProviderOutput { text, boxes: None })
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(ProviderOutput::default()),
            Err(e) => Err(OcrError::ProviderUnavailable(format!("{}: {e}", path.display()))),
        }
    }
}
