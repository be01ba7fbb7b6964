//! Scorer adapter speaking JSON lines over a byte stream.
//!
//! Each request is one JSON object on its own line, tagged by `op`:
//!
//! - `{"op":"info"}` returns `{"ok":true,"resolution":[w,h],"dim":K}`
//! - `{"op":"embed_text","text":"..."}` returns `{"ok":true,"embedding":[...]}`
//! - `{"op":"embed_image","width":w,"height":h,"pixels":[...]}` returns
//!   `{"ok":true,"embedding":[...]}`; `pixels` is row-major RGB in `[0, 1]`
//! - `{"op":"embed_image_vjp","width":w,"height":h,"pixels":[...],"cotangent":[...]}`
//!   returns `{"ok":true,"gradient":[...]}` in the pixel layout
//!
//! Failures return `{"ok":false,"error":"..."}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{GuidanceError, Scorer};
use crate::raster::{Image, Resolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScorerRequest {
    Info,
    EmbedText {
        text: String,
    },
    EmbedImage {
        width: usize,
        height: usize,
        pixels: Vec<f64>,
    },
    EmbedImageVjp {
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        cotangent: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScorerResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<Vec<f64>>,
}

impl ScorerResponse {
    fn failure(e: impl ToString) -> Self {
        Self {
            ok: false,
            error: Some(e.to_string()),
            ..Self::default()
        }
    }
}

fn image_from_wire(width: usize, height: usize, pixels: &[f64]) -> Result<Image, GuidanceError> {
    Image::from_flat(Resolution::new(width, height), pixels)
        .ok_or_else(|| GuidanceError::Protocol(format!("expected {} pixel values", 3 * width * height)))
}

/// Answers one request with `scorer`.
pub fn handle_request<S: Scorer + ?Sized>(scorer: &S, request: ScorerRequest) -> ScorerResponse {
    let result = match request {
        ScorerRequest::Info => {
            let r = scorer.resolution();
            return ScorerResponse {
                ok: true,
                resolution: Some([r.width, r.height]),
                dim: Some(scorer.dim()),
                ..Default::default()
            };
        }
        ScorerRequest::EmbedText { text } => scorer.embed_text(&text).map(|e| (Some(e), None)),
        ScorerRequest::EmbedImage { width, height, pixels } => {
            image_from_wire(width, height, &pixels).and_then(|img| scorer.embed_image(&img).map(|e| (Some(e), None)))
        }
        ScorerRequest::EmbedImageVjp {
            width,
            height,
            pixels,
            cotangent,
        } => image_from_wire(width, height, &pixels)
            .and_then(|img| scorer.embed_image_vjp(&img, &cotangent))
            .map(|g| (None, Some(g.to_flat()))),
    };
    match result {
        Ok((embedding, gradient)) => ScorerResponse {
            ok: true,
            embedding,
            gradient,
            ..Default::default()
        },
        Err(e) => ScorerResponse::failure(e),
    }
}

/// Serves requests line by line until `input` closes.
pub fn serve_protocol<S: Scorer + ?Sized>(
    scorer: &S,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<ScorerRequest>(&line) {
            Ok(req) => handle_request(scorer, req),
            Err(e) => ScorerResponse::failure(format!("bad request: {e}")),
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

struct Channel {
    writer: Box<dyn Write + Send>,
    reader: Box<dyn BufRead + Send>,
}

/// Client side of the protocol, over a child process or any stream pair.
pub struct ExternalScorer {
    channel: Mutex<Channel>,
    resolution: Resolution,
    dim: usize,
    child: Option<Child>,
}

impl std::fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScorer")
            .field("resolution", &self.resolution)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl ExternalScorer {
    /// Spawns `program` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, GuidanceError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
        let mut s = Self::from_streams(Box::new(stdin), Box::new(BufReader::new(stdout)))?;
        s.child = Some(child);
        Ok(s)
    }

    pub fn from_streams(writer: Box<dyn Write + Send>, reader: Box<dyn BufRead + Send>) -> Result<Self, GuidanceError> {
        let mut s = Self {
            channel: Mutex::new(Channel { writer, reader }),
            resolution: Resolution::new(0, 0),
            dim: 0,
            child: None,
        };
        let info = s.call(&ScorerRequest::Info)?;
        let [w, h] = info
            .resolution
            .ok_or_else(|| GuidanceError::Protocol("info without resolution".into()))?;
        s.resolution = Resolution::new(w, h);
        s.dim = info
            .dim
            .ok_or_else(|| GuidanceError::Protocol("info without dim".into()))?;
        Ok(s)
    }

    fn call(&self, request: &ScorerRequest) -> Result<ScorerResponse, GuidanceError> {
        let mut ch = self.channel.lock().map_err(|_| GuidanceError::Protocol("poisoned channel".into()))?;
        let mut line = serde_json::to_vec(request).map_err(|e| GuidanceError::Protocol(e.to_string()))?;
        line.push(b'\n');
        ch.writer.write_all(&line)?;
        ch.writer.flush()?;
        let mut reply = String::new();
        if ch.reader.read_line(&mut reply)? == 0 {
            return Err(GuidanceError::Protocol("scorer closed the stream".into()));
        }
        let resp: ScorerResponse =
            serde_json::from_str(&reply).map_err(|e| GuidanceError::Protocol(format!("bad response: {e}")))?;
        if !resp.ok {
            return Err(GuidanceError::Scorer(resp.error.unwrap_or_default()));
        }
        Ok(resp)
    }

    fn embedding(&self, request: &ScorerRequest) -> Result<Vec<f64>, GuidanceError> {
        let e = self
            .call(request)?
            .embedding
            .ok_or_else(|| GuidanceError::Protocol("response without embedding".into()))?;
        if e.len() != self.dim {
            return Err(GuidanceError::DimensionMismatch {
                image: self.dim,
                text: e.len(),
            });
        }
        Ok(e)
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Scorer for ExternalScorer {
    fn resolution(&self) -> Resolution {
        self.resolution
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>, GuidanceError> {
        self.embedding(&ScorerRequest::EmbedImage {
            width: image.width,
            height: image.height,
            pixels: image.to_flat(),
        })
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, GuidanceError> {
        self.embedding(&ScorerRequest::EmbedText { text: text.to_string() })
    }

    fn embed_image_vjp(&self, image: &Image, cotangent: &[f64]) -> Result<Image, GuidanceError> {
        let g = self
            .call(&ScorerRequest::EmbedImageVjp {
                width: image.width,
                height: image.height,
                pixels: image.to_flat(),
                cotangent: cotangent.to_vec(),
            })?
            .gradient
            .ok_or_else(|| GuidanceError::Protocol("response without gradient".into()))?;
        image_from_wire(image.width, image.height, &g)
    }
}
