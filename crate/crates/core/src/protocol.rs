//! Wire protocol client and reference server loop.
//!
//! Requests and responses are single JSON objects. Over stdio they travel as
//! newline-delimited JSON through a child process; over HTTP each op is a
//! `POST {base}/v1/{op}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::prompting::{
    decode_wire_masks, encode_wire_masks, ProviderCaps, RawMask, SeedPoint, SegmentRequest,
    SegmentationProvider, WireMask, MAX_MASKS_PER_POINT,
};

/// Moves one request object to the server and returns its response object.
pub trait Transport: Send + Sync {
    fn call(&self, op: &str, request: &Value) -> Result<Value>;

    /// True when only one request may be in flight.
    fn serialized(&self) -> bool;
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// NDJSON over a child process started with `sh -c <command>`. The child is
/// restarted after a transport failure.
pub struct StdioTransport {
    command: String,
    worker: Mutex<Option<Worker>>,
}

impl StdioTransport {
    pub fn spawn(command: &str) -> Result<Self> {
        let t = Self {
            command: command.to_string(),
            worker: Mutex::new(None),
        };
        *t.worker.lock().unwrap() = Some(t.start()?);
        Ok(t)
    }

    fn start(&self) -> Result<Worker> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start `{}`: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Worker {
            child,
            stdin,
            stdout,
        })
    }

    fn exchange(worker: &mut Worker, line: &str) -> Result<Value> {
        let io = |e: std::io::Error| Error::Transport(format!("worker pipe: {e}"));
        worker.stdin.write_all(line.as_bytes()).map_err(io)?;
        worker.stdin.write_all(b"\n").map_err(io)?;
        worker.stdin.flush().map_err(io)?;
        let mut reply = String::new();
        if worker.stdout.read_line(&mut reply).map_err(io)? == 0 {
            return Err(Error::Transport("worker closed its output".into()));
        }
        serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("response is not JSON: {e}")))
    }
}

impl Transport for StdioTransport {
    fn call(&self, _op: &str, request: &Value) -> Result<Value> {
        let line = serde_json::to_string(request)?;
        let mut slot = self.worker.lock().unwrap_or_else(|p| p.into_inner());
        if slot.is_none() {
            *slot = Some(self.start()?);
        }
        let result = Self::exchange(slot.as_mut().unwrap(), &line);
        if matches!(result, Err(Error::Transport(_))) {
            *slot = None;
        }
        result
    }

    fn serialized(&self) -> bool {
        true
    }
}

/// `POST {base}/v1/{op}` with a JSON body.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn call(&self, op: &str, request: &Value) -> Result<Value> {
        let url = format!("{}/v1/{op}", self.base);
        let body = serde_json::to_string(request)?;
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        if status >= 500 {
            return Err(Error::Transport(format!("{url}: HTTP {status}")));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("{url}: HTTP {status}, body is not JSON: {e}")))?;
        if status >= 400 && value.get("error").is_none() {
            return Err(Error::Protocol(format!("{url}: HTTP {status}")));
        }
        Ok(value)
    }

    fn serialized(&self) -> bool {
        false
    }
}

/// Capabilities announced in the `hello` handshake.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireCaps {
    #[serde(default)]
    pub segment: bool,
    #[serde(default)]
    pub embed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default)]
    pub deterministic: bool,
}

#[derive(Serialize, Deserialize)]
struct HelloResponse {
    caps: WireCaps,
}

#[derive(Deserialize)]
struct SegmentResponse {
    masks: Vec<WireMask>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f32>,
}

pub fn png_payload(img: &Image) -> Result<Value> {
    Ok(json!({ "png_b64": B64.encode(img.encode_png()?) }))
}

fn decode_png_payload(v: &Value) -> std::result::Result<Image, String> {
    let b64 = v
        .get("png_b64")
        .and_then(Value::as_str)
        .ok_or("missing png_b64")?;
    let bytes = B64.decode(b64).map_err(|e| format!("bad base64: {e}"))?;
    Image::decode_png(&bytes).map_err(|e| format!("bad png: {e}"))
}

/// Protocol client shared by [`WireProvider`] and [`WireEmbedder`].
pub struct WireClient {
    transport: Box<dyn Transport>,
    caps: WireCaps,
    next_id: AtomicU64,
    retries: u32,
}

impl std::fmt::Debug for WireClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WireClient").field("caps", &self.caps).finish()
    }
}

impl WireClient {
    /// Perform the handshake; fails with a provider error if it does not
    /// complete.
    pub fn connect(transport: Box<dyn Transport>, retries: u32) -> Result<Self> {
        let mut client = Self {
            transport,
            caps: WireCaps {
                segment: false,
                embed: false,
                embed_dim: None,
                deterministic: false,
            },
            next_id: AtomicU64::new(0),
            retries,
        };
        let reply = client.with_retries("hello", &json!({"op": "hello"}))?;
        let hello: HelloResponse = serde_json::from_value(reply)
            .map_err(|e| Error::Protocol(format!("bad hello response: {e}")))?;
        if hello.caps.embed && hello.caps.embed_dim.is_none_or(|d| d == 0) {
            return Err(Error::Protocol("server embeds but declares no embed_dim".into()));
        }
        client.caps = hello.caps;
        debug!("wire handshake: {:?}", client.caps);
        Ok(client)
    }

    /// `wire:<target>`: an `http(s)://` URL or a shell command.
    pub fn open(target: &str) -> Result<Self> {
        let transport: Box<dyn Transport> = if target.starts_with("http://") || target.starts_with("https://") {
            Box::new(HttpTransport::new(target, Duration::from_secs(300)))
        } else {
            Box::new(StdioTransport::spawn(target)?)
        };
        Self::connect(transport, 2)
    }

    pub fn caps(&self) -> WireCaps {
        self.caps
    }

    pub fn serialized(&self) -> bool {
        self.transport.serialized()
    }

    fn with_retries(&self, op: &str, request: &Value) -> Result<Value> {
        let mut attempt = 0;
        loop {
            match self.transport.call(op, request) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    attempt += 1;
                    warn!("{op}: {e}; retry {attempt}/{}", self.retries);
                }
                other => return other,
            }
        }
    }

    /// Send `op` with `fields`, check the echoed id and surface server errors.
    pub fn request(&self, op: &str, fields: Value) -> Result<Value> {
        let id = format!("r{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let mut req = json!({"id": id, "op": op});
        if let (Some(obj), Value::Object(extra)) = (req.as_object_mut(), fields) {
            obj.extend(extra);
        }
        let reply = self.with_retries(op, &req)?;
        match reply.get("id").and_then(Value::as_str) {
            Some(got) if got == id => {}
            got => {
                return Err(Error::Protocol(format!(
                    "{op}: response id {got:?} does not match request {id:?}"
                )))
            }
        }
        if let Some(err) = reply.get("error") {
            let msg = err.as_str().map_or_else(|| err.to_string(), str::to_string);
            return Err(Error::Protocol(format!("{op}: server error: {msg}")));
        }
        Ok(reply)
    }
}

/// Segmentation over the wire protocol.
#[derive(Clone, Debug)]
pub struct WireProvider {
    client: Arc<WireClient>,
}

impl WireProvider {
    pub fn new(client: Arc<WireClient>) -> Result<Self> {
        if !client.caps().segment {
            return Err(Error::Protocol("server does not offer segment".into()));
        }
        Ok(Self { client })
    }
}

impl SegmentationProvider for WireProvider {
    fn caps(&self) -> ProviderCaps {
        ProviderCaps {
            max_masks_per_point: MAX_MASKS_PER_POINT,
            batching: false,
            deterministic: self.client.caps().deterministic,
            serialized: self.client.serialized(),
        }
    }

    fn segment(&self, req: &SegmentRequest<'_>) -> Result<Vec<RawMask>> {
        let points: Vec<[u32; 2]> = req.points.iter().map(|p| [p.x, p.y]).collect();
        let reply = self.client.request(
            "segment",
            json!({"image": png_payload(req.image)?, "points": points}),
        )?;
        let resp: SegmentResponse = serde_json::from_value(reply)
            .map_err(|e| Error::Protocol(format!("bad segment response: {e}")))?;
        decode_wire_masks(&resp.masks)
    }
}

/// Embedding over the wire protocol.
#[derive(Clone, Debug)]
pub struct WireEmbedder {
    client: Arc<WireClient>,
    dim: usize,
}

impl WireEmbedder {
    pub fn new(client: Arc<WireClient>) -> Result<Self> {
        let caps = client.caps();
        match (caps.embed, caps.embed_dim) {
            (true, Some(dim)) => Ok(Self { client, dim }),
            _ => Err(Error::Protocol("server does not offer embed".into())),
        }
    }
}

impl Embedder for WireEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, crop: &Image) -> Result<Vec<f32>> {
        let reply = self
            .client
            .request("embed", json!({"patch": png_payload(crop)?}))?;
        let resp: EmbedResponse = serde_json::from_value(reply)
            .map_err(|e| Error::Protocol(format!("bad embed response: {e}")))?;
        Ok(resp.vector)
    }
}

/// Answer one request object.
pub fn handle_request(
    request: &Value,
    provider: Option<&dyn SegmentationProvider>,
    embedder: Option<&dyn Embedder>,
) -> Value {
    let id = request.get("id").cloned().unwrap_or(Value::Null);
    let fail = |msg: String| json!({"id": id, "error": msg});
    let op = request.get("op").and_then(Value::as_str).unwrap_or("");
    match op {
        "hello" => {
            let caps = WireCaps {
                segment: provider.is_some(),
                embed: embedder.is_some(),
                embed_dim: embedder.map(|e| e.dim()),
                deterministic: provider.is_none_or(|p| p.caps().deterministic),
            };
            json!({ "caps": caps })
        }
        "segment" => {
            let Some(provider) = provider else {
                return fail("segment is not supported".into());
            };
            let img = match request.get("image").map(decode_png_payload) {
                Some(Ok(img)) => img,
                Some(Err(e)) => return fail(e),
                None => return fail("missing image".into()),
            };
            let points: Vec<[u32; 2]> = match request.get("points").cloned().map(serde_json::from_value) {
                Some(Ok(p)) => p,
                _ => return fail("points must be [[x, y], ...] of non-negative integers".into()),
            };
            let points: Vec<SeedPoint> = points.into_iter().map(|[x, y]| SeedPoint { x, y }).collect();
            match crate::prompting::segment(provider, &img, &points, "wire") {
                Ok(set) => json!({"id": id, "masks": encode_wire_masks(&set.masks)}),
                Err(e) => fail(e.to_string()),
            }
        }
        "embed" => {
            let Some(embedder) = embedder else {
                return fail("embed is not supported".into());
            };
            let patch = match request.get("patch").map(decode_png_payload) {
                Some(Ok(img)) => img,
                Some(Err(e)) => return fail(e),
                None => return fail("missing patch".into()),
            };
            match crate::embedding::embed(embedder, &patch, 0) {
                Ok(fv) => json!({"id": id, "vector": fv.values}),
                Err(e) => fail(e.to_string()),
            }
        }
        other => fail(format!("unknown op {other:?}")),
    }
}

/// NDJSON server loop: one response line per request line until EOF.
pub fn serve<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    provider: Option<&dyn SegmentationProvider>,
    embedder: Option<&dyn Embedder>,
) -> Result<()> {
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Transport(format!("read request: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Ok(req) => handle_request(&req, provider, embedder),
            Err(e) => json!({"id": null, "error": format!("request is not JSON: {e}")}),
        };
        serde_json::to_writer(&mut writer, &reply)?;
        writer
            .write_all(b"\n")
            .and_then(|_| writer.flush())
            .map_err(|e| Error::Transport(format!("write response: {e}")))?;
    }
    Ok(())
}
