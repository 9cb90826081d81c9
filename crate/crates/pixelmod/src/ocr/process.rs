use std::io::{ErrorKind, Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{OcrError, OcrProvider, OcrRequest, ProviderCapabilities, ProviderOutput};

/// Placeholder replaced by the image path in argument templates.
const INPUT_PLACEHOLDER: &str = "{input}";

/// Runs a locally installed engine once per image.
///
/// Each argument may contain `{input}`, which is replaced by the image
/// path (a temporary copy when the request has no path). The engine must
/// print the recognized text as UTF-8 on stdout and exit with status 0.
/// For example, tesseract is configured as `tesseract {input} stdout`.
#[derive(Debug, Clone)]
pub struct ExternalProcessProvider {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl ExternalProcessProvider {
    pub fn new(program: impl Into<String>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ExternalProcessProvider {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn run(&self, input: &Path) -> Result<ProviderOutput, OcrError> {
        let input = input.to_string_lossy();
        let args: Vec<String> = self.args.iter().map(|a| a.replace(INPUT_PLACEHOLDER, &input)).collect();
        let mut child = Command::new(&self.program)
            .args(&args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| match e.kind() {
                ErrorKind::NotFound => OcrError::ProviderFailed(format!("engine {:?} not found", self.program)),
                _ => OcrError::ProviderUnavailable(format!("spawning {:?}: {e}", self.program)),
            })?;

        let mut stdout = child.stdout.take().expect("piped");
        let mut stderr = child.stderr.take().expect("piped");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(OcrError::ProviderUnavailable(format!(
                        "engine {:?} timed out after {:?}",
                        self.program, self.timeout
                    )));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(OcrError::ProviderUnavailable(e.to_string())),
            }
        };
        let stdout = out_reader
            .join()
            .expect("reader thread")
            .map_err(|e| OcrError::ProviderUnavailable(e.to_string()))?;
        let stderr = err_reader.join().expect("reader thread");
        if !status.success() {
            return Err(OcrError::ProviderFailed(format!(
                "engine {:?} exited with {status}: {}",
                self.program,
                String::from_utf8_lossy(&stderr).trim()
            )));
        }
        let text = String::from_utf8(stdout)
            .map_err(|_| OcrError::ProviderFailed(format!("engine {:?} printed non-UTF-8 text", self.program)))?;
        Ok(ProviderOutput { text, boxes: None })
    }
}

impl OcrProvider for ExternalProcessProvider {
    fn name(&self) -> &str {
        "external-process"
    }

    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            reports_coverage: false,
            deterministic: true,
        }
    }

    fn recognize(&self, request: &OcrRequest<'_>) -> Result<ProviderOutput, OcrError> {
        match request.source {
            Some(path) => self.run(path),
            None => {
                let mut tmp = tempfile::Builder::new()
                    .prefix("pixelmod-ocr-")
                    .tempfile()
                    .map_err(|e| OcrError::ProviderUnavailable(e.to_string()))?;
                tmp.write_all(request.bytes)
                    .and_then(|_| tmp.flush())
                    .map_err(|e| OcrError::ProviderUnavailable(e.to_string()))?;
                self.run(tmp.path())
            }
        }
    }
}
