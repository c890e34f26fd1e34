//! Length-prefixed wire protocol for out-of-process score providers.
//!
//! A frame is a 4-byte little-endian header length, a UTF-8 JSON header and
//! a raw little-endian `f32` payload whose length follows from the header:
//!
//! - `score_request` `{id, role, tau, shape, nsm_shape, prompt}` carries
//!   `z_tau` followed by the state map grid.
//! - `score_response` `{id, role, shape}` carries the predicted noise.
//! - `error` `{id, role, message}` carries no payload; `id` is `null` when
//!   the offending header had no readable id.
//!
//! A header that fails validation is taken to have no payload. The server
//! answers every frame with exactly one response or error frame.

use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::TcpStream;
use std::os::unix::net::UnixStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::provider::{checked_predict, Capabilities, EchoProvider, ScoreProvider, ScoreRequest};
use crate::error::{Error, Result};

pub const ROLE_REQUEST: &str = "score_request";
pub const ROLE_RESPONSE: &str = "score_response";
pub const ROLE_ERROR: &str = "error";

/// Largest accepted header.
pub const MAX_HEADER_BYTES: usize = 1 << 20;
/// Largest accepted payload, in values.
pub const MAX_PAYLOAD_VALUES: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Request(ScoreRequest),
    Response { id: u64, shape: [usize; 3], eps: Vec<f64> },
    Error { id: Option<u64>, message: String },
}

impl Message {
    pub fn id(&self) -> Option<u64> {
        match self {
            Message::Request(r) => Some(r.id),
            Message::Response { id, .. } => Some(*id),
            Message::Error { id, .. } => *id,
        }
    }
}

/// A frame as read from the stream.
#[derive(Clone, Debug, PartialEq)]
pub enum Incoming {
    Message(Message),
    /// The header could not be understood; no payload was consumed.
    Malformed { id: Option<u64>, reason: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestHeader {
    id: u64,
    role: String,
    tau: usize,
    shape: [usize; 3],
    nsm_shape: [usize; 3],
    prompt: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseHeader {
    id: u64,
    role: String,
    shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ErrorHeader {
    id: Option<u64>,
    role: String,
    message: String,
}

fn write_frame(w: &mut impl Write, header: &Value, payload: &[&[f64]]) -> Result<()> {
    let bytes = serde_json::to_vec(header)?;
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Protocol("header too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&bytes)?;
    let mut buf = Vec::with_capacity(4 * payload.iter().map(|p| p.len()).sum::<usize>());
    for part in payload {
        for v in *part {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    match msg {
        Message::Request(r) => write_frame(
            w,
            &json!({
                "id": r.id,
                "role": ROLE_REQUEST,
                "tau": r.tau,
                "shape": r.shape,
                "nsm_shape": r.nsm_shape,
                "prompt": r.prompt,
            }),
            &[&r.z, &r.nsm],
        ),
        Message::Response { id, shape, eps } => {
            write_frame(w, &json!({"id": id, "role": ROLE_RESPONSE, "shape": shape}), &[eps])
        }
        Message::Error { id, message } => {
            write_frame(w, &json!({"id": id, "role": ROLE_ERROR, "message": message}), &[])
        }
    }
}

/// Writes raw header bytes with a correct length prefix and no payload.
pub fn write_raw_header(w: &mut impl Write, header: &[u8]) -> Result<()> {
    let len = u32::try_from(header.len()).map_err(|_| Error::Protocol("header too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(header)?;
    w.flush()?;
    Ok(())
}

/// Reads exactly `buf.len()` bytes; `Ok(false)` on end of stream before the
/// first byte.
fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Protocol("stream ended inside a frame".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn element_count(shape: &[usize; 3]) -> Option<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_PAYLOAD_VALUES)
}

fn read_payload(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    if !read_exact_or_eof(r, &mut buf)? && n > 0 {
        return Err(Error::Protocol("stream ended before the payload".into()));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream and an
/// error when the stream itself is broken.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Incoming>> {
    let mut len = [0u8; 4];
    if !read_exact_or_eof(r, &mut len)? {
        return Ok(None);
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_HEADER_BYTES {
        return Err(Error::Protocol(format!("header of {len} bytes exceeds the {MAX_HEADER_BYTES} byte limit")));
    }
    let mut header = vec![0u8; len];
    if !read_exact_or_eof(r, &mut header)? && len > 0 {
        return Err(Error::Protocol("stream ended before the header".into()));
    }
    let value: Value = match serde_json::from_slice(&header) {
        Ok(v) => v,
        Err(e) => {
            return Ok(Some(Incoming::Malformed {
                id: None,
                reason: format!("header is not valid JSON: {e}"),
            }))
        }
    };
    let id = value.get("id").and_then(Value::as_u64);
    let malformed = |reason: String| Ok(Some(Incoming::Malformed { id, reason }));
    let role = value.get("role").and_then(Value::as_str).unwrap_or_default().to_string();
    match role.as_str() {
        ROLE_REQUEST => {
            let h: RequestHeader = match serde_json::from_value(value) {
                Ok(h) => h,
                Err(e) => return malformed(format!("invalid request header: {e}")),
            };
            let (Some(n), Some(m)) = (element_count(&h.shape), element_count(&h.nsm_shape)) else {
                return malformed("request shape is too large".into());
            };
            let z = read_payload(r, n)?;
            let nsm = read_payload(r, m)?;
            Ok(Some(Incoming::Message(Message::Request(ScoreRequest {
                id: h.id,
                tau: h.tau,
                z,
                shape: h.shape,
                nsm,
                nsm_shape: h.nsm_shape,
                prompt: h.prompt,
            }))))
        }
        ROLE_RESPONSE => {
            let h: ResponseHeader = match serde_json::from_value(value) {
                Ok(h) => h,
                Err(e) => return malformed(format!("invalid response header: {e}")),
            };
            let Some(n) = element_count(&h.shape) else {
                return malformed("response shape is too large".into());
            };
            let eps = read_payload(r, n)?;
            Ok(Some(Incoming::Message(Message::Response {
                id: h.id,
                shape: h.shape,
                eps,
            })))
        }
        ROLE_ERROR => match serde_json::from_value::<ErrorHeader>(value) {
            Ok(h) => Ok(Some(Incoming::Message(Message::Error {
                id: h.id,
                message: h.message,
            }))),
            Err(e) => malformed(format!("invalid error header: {e}")),
        },
        other => malformed(format!("unknown role `{other}`")),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub frames: usize,
    pub responses: usize,
    pub errors: usize,
}

/// Answers frames from `reader` with `provider` until the peer closes the
/// stream. Only a broken stream ends the session with an error.
pub fn serve(reader: impl Read, writer: impl Write, provider: &mut dyn ScoreProvider) -> Result<ServeStats> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    let mut stats = ServeStats::default();
    loop {
        let incoming = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(stats),
            Err(e) => {
                let _ = write_message(
                    &mut writer,
                    &Message::Error {
                        id: None,
                        message: e.to_string(),
                    },
                );
                return Err(e);
            }
        };
        stats.frames += 1;
        let reply = match incoming {
            Incoming::Message(Message::Request(req)) => match checked_predict(provider, &req) {
                Ok(eps) => Message::Response {
                    id: req.id,
                    shape: req.shape,
                    eps,
                },
                Err(e) => Message::Error {
                    id: Some(req.id),
                    message: e.to_string(),
                },
            },
            Incoming::Message(other) => Message::Error {
                id: other.id(),
                message: "servers only accept score_request frames".into(),
            },
            Incoming::Malformed { id, reason } => Message::Error { id, message: reason },
        };
        if matches!(reply, Message::Error { .. }) {
            stats.errors += 1;
        } else {
            stats.responses += 1;
        }
        write_message(&mut writer, &reply)?;
    }
}

/// Starts `provider` on one end of an in-process socket pair and returns
/// the other end.
pub fn spawn_in_process<P>(mut provider: P) -> Result<(UnixStream, JoinHandle<Result<ServeStats>>)>
where
    P: ScoreProvider + Send + 'static,
{
    let (client, server) = UnixStream::pair()?;
    let handle = std::thread::spawn(move || {
        let writer = server.try_clone()?;
        serve(server, writer, &mut provider)
    });
    Ok((client, handle))
}

/// In-process echo server.
pub fn spawn_echo() -> Result<(UnixStream, JoinHandle<Result<ServeStats>>)> {
    spawn_in_process(EchoProvider)
}

/// Where an external provider lives: `tcp:HOST:PORT`, `unix:PATH` or
/// `spawn:PROGRAM [ARGS...]` (frames over the child's stdio).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProviderAddress {
    Tcp(String),
    Unix(String),
    Spawn(Vec<String>),
}

impl std::str::FromStr for ProviderAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (scheme, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("provider address `{s}` has no scheme")))?;
        if rest.is_empty() {
            return Err(Error::InvalidConfig(format!("provider address `{s}` is empty")));
        }
        match scheme {
            "tcp" => Ok(ProviderAddress::Tcp(rest.to_string())),
            "unix" => Ok(ProviderAddress::Unix(rest.to_string())),
            "spawn" => Ok(ProviderAddress::Spawn(rest.split_whitespace().map(String::from).collect())),
            _ => Err(Error::InvalidConfig(format!(
                "unknown provider scheme `{scheme}`; expected tcp, unix or spawn"
            ))),
        }
    }
}

impl std::fmt::Display for ProviderAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProviderAddress::Tcp(a) => write!(f, "tcp:{a}"),
            ProviderAddress::Unix(a) => write!(f, "unix:{a}"),
            ProviderAddress::Spawn(a) => write!(f, "spawn:{}", a.join(" ")),
        }
    }
}

/// Read and write halves of a connection to `address`, plus the child
/// process for `spawn:` addresses.
pub type Streams = (Box<dyn Read + Send>, Box<dyn Write + Send>, Option<Child>);

pub fn open_streams(address: &ProviderAddress) -> Result<Streams> {
    Ok(match address {
        ProviderAddress::Tcp(addr) => {
            let s = TcpStream::connect(addr)?;
            s.set_nodelay(true)?;
            (Box::new(s.try_clone()?), Box::new(s), None)
        }
        ProviderAddress::Unix(path) => {
            let s = UnixStream::connect(path)?;
            (Box::new(s.try_clone()?), Box::new(s), None)
        }
        ProviderAddress::Spawn(argv) => {
            let mut child = Command::new(&argv[0])
                .args(&argv[1..])
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            (Box::new(stdout), Box::new(stdin), Some(child))
        }
    })
}

/// Client side of the protocol. Replies are read on a background thread so
/// every request can wait with a deadline; late replies to abandoned
/// requests are discarded.
pub struct ExternalProvider {
    name: String,
    writer: Box<dyn Write + Send>,
    replies: Receiver<Result<Incoming>>,
    deadline: Duration,
    child: Option<Child>,
}

impl ExternalProvider {
    pub fn connect(address: &ProviderAddress, deadline: Duration) -> Result<Self> {
        let (reader, writer, child) = open_streams(address)?;
        Ok(Self::from_streams(address.to_string(), reader, writer, deadline, child))
    }

    pub fn from_streams(
        name: String,
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        deadline: Duration,
        child: Option<Child>,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let frame = read_frame(&mut reader);
                let stop = !matches!(frame, Ok(Some(_)));
                if tx.send(frame.and_then(|f| f.ok_or_else(|| Error::Protocol("provider closed the stream".into())))).is_err() || stop {
                    return;
                }
            }
        });
        ExternalProvider {
            name,
            writer,
            replies: rx,
            deadline,
            child,
        }
    }
}

impl Drop for ExternalProvider {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl ScoreProvider for ExternalProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            name: self.name.clone(),
            uses_state_map: true,
            remote: true,
        }
    }

    fn predict(&mut self, request: &ScoreRequest) -> Result<Vec<f64>> {
        write_message(&mut self.writer, &Message::Request(request.clone()))
            .map_err(|e| Error::Provider(format!("{}: {e}", self.name)))?;
        let until = Instant::now() + self.deadline;
        loop {
            let left = until.saturating_duration_since(Instant::now());
            let reply = match self.replies.recv_timeout(left) {
                Ok(r) => r.map_err(|e| Error::Provider(format!("{}: {e}", self.name)))?,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Provider(format!(
                        "{} missed the {:?} deadline for request {}",
                        self.name, self.deadline, request.id
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Provider(format!("{} disconnected", self.name)))
                }
            };
            match reply {
                Incoming::Message(Message::Response { id, shape, eps }) if id == request.id => {
                    if shape != request.shape {
                        return Err(Error::ShapeMismatch {
                            expected: request.shape.to_vec(),
                            actual: shape.to_vec(),
                        });
                    }
                    return Ok(eps);
                }
                Incoming::Message(Message::Error { id, message }) if id == Some(request.id) || id.is_none() => {
                    return Err(Error::Provider(format!("{}: {message}", self.name)));
                }
                other => log::debug!("{}: discarding stale frame {other:?}", self.name),
            }
        }
    }
}

/// Outcome of a conformance run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConformanceReport {
    pub valid_sent: usize,
    pub malformed_sent: usize,
    pub responses: usize,
    pub errors: usize,
    /// Replies whose id, role, shape or payload did not match the frame
    /// that caused them.
    pub violations: Vec<String>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.responses == self.valid_sent && self.errors == self.malformed_sent
    }
}

fn malformed_headers(rng: &mut ChaCha8Rng, id: u64) -> Vec<u8> {
    match rng.gen_range(0..10) {
        0 => (0..rng.gen_range(1..64)).map(|_| rng.gen()).collect(),
        1 => Vec::new(),
        2 => br#"[1, 2, 3]"#.to_vec(),
        3 => format!(r#"{{"id": {id}, "role": "score_request"}}"#).into_bytes(),
        4 => format!(r#"{{"id": {id}, "role": "bogus", "tau": 5}}"#).into_bytes(),
        5 => format!(
            r#"{{"id": {id}, "role": "score_request", "tau": 5, "shape": [-1, 2, 3], "nsm_shape": [1, 1, 1], "prompt": ""}}"#
        )
        .into_bytes(),
        6 => format!(
            r#"{{"id": {id}, "role": "score_request", "tau": 5, "shape": [65536, 65536, 65536], "nsm_shape": [1, 1, 1], "prompt": ""}}"#
        )
        .into_bytes(),
        7 => format!(r#"{{"id": {id}, "role": "score_request", "tau": "five""#).into_bytes(),
        8 => format!(r#"{{"id": {id}, "role": "score_response", "shape": [1, 1]}}"#).into_bytes(),
        _ => {
            let mut b = format!(r#"{{"id": {id}, "role": "score_request", "prompt": ""#).into_bytes();
            b.extend_from_slice(&[0xff, 0xfe, b'"', b'}']);
            b
        }
    }
}

/// Drives a provider session with `valid` well-formed requests interleaved
/// with `malformed` fuzzed headers and checks that every frame receives
/// exactly one correctly addressed reply. A closing request after the fuzz
/// confirms the session survived.
pub fn conformance_run(
    reader: impl Read,
    writer: impl Write,
    valid: usize,
    malformed: usize,
    shape: [usize; 3],
    nsm_shape: [usize; 3],
    seed: u64,
) -> Result<ConformanceReport> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ConformanceReport::default();
    let mut kinds: Vec<bool> = std::iter::repeat(true)
        .take(valid.saturating_sub(1))
        .chain(std::iter::repeat(false).take(malformed))
        .collect();
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, rng.gen_range(0..=i));
    }
    if valid > 0 {
        kinds.push(true);
    }
    let n = shape.iter().product::<usize>();
    let m = nsm_shape.iter().product::<usize>();
    let mut seen = std::collections::HashSet::new();
    for (k, is_valid) in kinds.into_iter().enumerate() {
        let id = 1000 + k as u64;
        let mut expected_payload = None;
        if is_valid {
            let req = ScoreRequest {
                id,
                tau: rng.gen_range(1..=1000),
                z: (0..n).map(|_| rng.gen_range(-4.0f32..4.0) as f64).collect(),
                shape,
                nsm: (0..m).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect(),
                nsm_shape,
                prompt: format!("prompt {k}"),
            };
            write_message(&mut writer, &Message::Request(req.clone()))?;
            report.valid_sent += 1;
            expected_payload = Some(req);
        } else {
            write_raw_header(&mut writer, &malformed_headers(&mut rng, id))?;
            report.malformed_sent += 1;
        }
        let reply = match read_frame(&mut reader)? {
            Some(Incoming::Message(msg)) => msg,
            Some(Incoming::Malformed { reason, .. }) => {
                report.violations.push(format!("frame {k}: unreadable reply: {reason}"));
                continue;
            }
            None => {
                report.violations.push(format!("frame {k}: provider closed the session"));
                return Ok(report);
            }
        };
        match (expected_payload, reply) {
            (Some(req), Message::Response { id: rid, shape: rshape, eps }) => {
                report.responses += 1;
                if rid != req.id || !seen.insert(rid) {
                    report.violations.push(format!("frame {k}: response id {rid} for request {}", req.id));
                }
                if rshape != req.shape || eps.len() != n || eps.iter().any(|v| !v.is_finite()) {
                    report.violations.push(format!("frame {k}: response shape or payload is invalid"));
                }
            }
            (Some(req), Message::Error { message, .. }) => {
                report.errors += 1;
                report
                    .violations
                    .push(format!("frame {k}: valid request {} was refused: {message}", req.id));
            }
            (None, Message::Error { id: rid, .. }) => {
                report.errors += 1;
                if let Some(rid) = rid {
                    if rid != id || !seen.insert(rid) {
                        report.violations.push(format!("frame {k}: error id {rid} for frame {id}"));
                    }
                }
            }
            (_, other) => report.violations.push(format!("frame {k}: unexpected reply {:?}", other.id())),
        }
    }
    Ok(report)
}
