//! Host side of the VDN1 plugin transport.

use std::io::{self, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use ndarray::Array3;

use super::protocol::{self, CubeDims, Message, ProtocolError};
use crate::error::{invalid, Error, Result};
use crate::forward::VideoCube;

/// Where a plugin lives and how long to wait for it.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginEndpoint {
    pub target: PluginTarget,
    pub version: u8,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PluginTarget {
    /// Program and arguments; the plugin speaks over its stdin/stdout.
    Command(Vec<String>),
    /// Echo server on a thread of this process, connected through OS pipes.
    InProcessEcho,
}

impl PluginEndpoint {
    pub fn command(argv: Vec<String>, timeout: Duration) -> Self {
        Self {
            target: PluginTarget::Command(argv),
            version: protocol::VERSION,
            timeout,
        }
    }

    pub fn in_process_echo(timeout: Duration) -> Self {
        Self {
            target: PluginTarget::InProcessEcho,
            version: protocol::VERSION,
            timeout,
        }
    }

    /// Splits a command line on whitespace.
    pub fn parse_command(line: &str, timeout: Duration) -> Result<Self> {
        let argv: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        if argv.is_empty() {
            return Err(invalid("empty plugin command"));
        }
        Ok(Self::command(argv, timeout))
    }
}

type Incoming = std::result::Result<Option<Message>, ProtocolError>;

struct SessionState {
    writer: Box<dyn Write + Send>,
    incoming: Receiver<Incoming>,
    /// Set once a response went missing or framing was lost; later
    /// responses can no longer be matched to requests.
    broken: Option<String>,
}

/// A live connection to one plugin. Requests are serialised through an
/// internal lock, so a session can be shared between threads.
pub struct PluginSession {
    state: Mutex<SessionState>,
    child: Mutex<Option<Child>>,
    timeout: Duration,
    label: String,
}

impl std::fmt::Debug for PluginSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginSession")
            .field("label", &self.label)
            .field("timeout", &self.timeout)
            .finish()
    }
}

fn spawn_reader<R: Read + Send + 'static>(mut reader: R) -> Receiver<Incoming> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || loop {
        let msg = protocol::read_message(&mut reader);
        let stop = !matches!(msg, Ok(Some(_)));
        if tx.send(msg).is_err() || stop {
            break;
        }
    });
    rx
}

impl PluginSession {
    pub fn connect(ep: &PluginEndpoint) -> Result<Self> {
        if ep.version != protocol::VERSION {
            return Err(invalid(format!(
                "unsupported plugin protocol version {}",
                ep.version
            )));
        }
        if ep.timeout.is_zero() {
            return Err(invalid("plugin timeout must be > 0"));
        }
        match &ep.target {
            PluginTarget::Command(argv) => {
                let (prog, args) = argv
                    .split_first()
                    .ok_or_else(|| invalid("empty plugin command"))?;
                let mut child = Command::new(prog)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|source| Error::PluginIo {
                        context: format!("spawning {prog}"),
                        source,
                    })?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut session = Self::from_streams(stdout, stdin, ep.timeout);
                session.label = argv.join(" ");
                session.child = Mutex::new(Some(child));
                Ok(session)
            }
            PluginTarget::InProcessEcho => {
                let (req_rx, req_tx) = io::pipe()?;
                let (resp_rx, resp_tx) = io::pipe()?;
                thread::spawn(move || protocol::serve_echo(req_rx, resp_tx));
                let mut session = Self::from_streams(resp_rx, req_tx, ep.timeout);
                session.label = "in-process-echo".into();
                Ok(session)
            }
        }
    }

    /// Session over an arbitrary stream pair: responses are read from
    /// `reader`, requests written to `writer`.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self {
            state: Mutex::new(SessionState {
                writer: Box::new(writer),
                incoming: spawn_reader(reader),
                broken: None,
            }),
            child: Mutex::new(None),
            timeout,
            label: "streams".into(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Sends `x` with noise level `sigma` (in `[0, 1]` units) and waits for
    /// a denoised cube of the same shape.
    pub fn denoise(&self, x: &VideoCube, sigma: f64) -> Result<VideoCube> {
        let (b, h, w) = x.data().dim();
        let dims = CubeDims {
            frames: u32::try_from(b).map_err(|_| invalid("too many frames for VDN1"))?,
            rows: u32::try_from(h).map_err(|_| invalid("frame too tall for VDN1"))?,
            cols: u32::try_from(w).map_err(|_| invalid("frame too wide for VDN1"))?,
        };
        let request = Message::Request {
            dims,
            sigma: sigma as f32,
            payload: x.data().iter().map(|&v| v as f32).collect(),
        };

        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(why) = &st.broken {
            return Err(Error::ProtocolViolation(format!("session unusable: {why}")));
        }
        if let Err(source) = protocol::write_message(&mut st.writer, &request) {
            st.broken = Some("write failed".into());
            return Err(Error::PluginIo {
                context: format!("sending request to {}", self.label),
                source,
            });
        }
        let reply = match st.incoming.recv_timeout(self.timeout) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) => {
                st.broken = Some("previous request timed out".into());
                return Err(Error::PluginTimeout(self.timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                st.broken = Some("plugin stream closed".into());
                return Err(Error::ProtocolViolation("plugin stream closed".into()));
            }
        };
        let result = validate_response(reply, dims);
        if matches!(result, Err(Error::ProtocolViolation(_))) {
            st.broken = Some("malformed response".into());
        }
        result
    }
}

fn validate_response(reply: Incoming, dims: CubeDims) -> Result<VideoCube> {
    match reply {
        Ok(Some(Message::Response {
            dims: got, payload, ..
        })) => {
            if got != dims {
                return Err(Error::ProtocolViolation(format!(
                    "response dims {}x{}x{} differ from request {}x{}x{}",
                    got.frames, got.rows, got.cols, dims.frames, dims.rows, dims.cols
                )));
            }
            if payload.iter().any(|v| !v.is_finite()) {
                return Err(Error::ProtocolViolation(
                    "response contains non-finite values".into(),
                ));
            }
            let data = Array3::from_shape_vec(
                (dims.frames as usize, dims.rows as usize, dims.cols as usize),
                payload.into_iter().map(f64::from).collect(),
            )
            .map_err(|e| Error::ProtocolViolation(e.to_string()))?;
            VideoCube::new(data)
        }
        Ok(Some(Message::Error(text))) => Err(Error::PluginError(text)),
        Ok(Some(Message::Request { .. })) => Err(Error::ProtocolViolation(
            "plugin sent a request message".into(),
        )),
        Ok(None) => Err(Error::ProtocolViolation(
            "plugin closed the stream without answering".into(),
        )),
        Err(ProtocolError::Io(source)) => Err(Error::PluginIo {
            context: "reading plugin response".into(),
            source,
        }),
        Err(e) => Err(Error::ProtocolViolation(e.to_string())),
    }
}

impl Drop for PluginSession {
    fn drop(&mut self) {
        // Closing stdin asks a well-behaved plugin to exit.
        if let Ok(st) = self.state.get_mut() {
            st.writer = Box::new(io::sink());
        }
        if let Ok(Some(mut child)) = self.child.get_mut().map(Option::take) {
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// One VDN1 round trip on `session`.
pub fn plugin_denoise(x: &VideoCube, sigma: f64, session: &PluginSession) -> Result<VideoCube> {
    session.denoise(x, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::protocol::encode_message;

    fn cube() -> VideoCube {
        // values exactly representable in f32
        VideoCube::new(Array3::from_shape_fn((2, 3, 4), |(k, r, c)| {
            (k * 12 + r * 4 + c) as f64 / 32.0
        }))
        .unwrap()
    }

    fn canned(reply: Vec<u8>) -> PluginSession {
        PluginSession::from_streams(io::Cursor::new(reply), io::sink(), Duration::from_secs(2))
    }

    #[test]
    fn in_process_echo_round_trip() {
        let s = PluginSession::connect(&PluginEndpoint::in_process_echo(Duration::from_secs(5)))
            .unwrap();
        let x = cube();
        for sigma in [0.0, 0.1, 0.5] {
            assert_eq!(s.denoise(&x, sigma).unwrap().data(), x.data());
        }
    }

    #[test]
    fn wrong_dims_is_protocol_violation() {
        let reply = encode_message(&Message::Response {
            dims: CubeDims {
                frames: 2,
                rows: 4,
                cols: 3,
            },
            sigma: 0.1,
            payload: vec![0.0; 24],
        });
        let s = canned(reply);
        assert!(matches!(s.denoise(&cube(), 0.1), Err(Error::ProtocolViolation(_))));
        // session is poisoned afterwards
        assert!(matches!(s.denoise(&cube(), 0.1), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn plugin_error_message_surfaces() {
        let s = canned(encode_message(&Message::Error("out of memory".into())));
        match s.denoise(&cube(), 0.1) {
            Err(Error::PluginError(text)) => assert_eq!(text, "out of memory"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn silent_plugin_times_out() {
        let (rx, _tx_kept_open) = io::pipe().unwrap();
        let s = PluginSession::from_streams(rx, io::sink(), Duration::from_millis(50));
        assert!(matches!(s.denoise(&cube(), 0.1), Err(Error::PluginTimeout(_))));
        assert!(s.denoise(&cube(), 0.1).is_err());
    }

    #[test]
    fn bad_endpoint_settings() {
        let mut ep = PluginEndpoint::in_process_echo(Duration::from_secs(1));
        ep.version = 2;
        assert!(PluginSession::connect(&ep).is_err());
        let ep = PluginEndpoint::in_process_echo(Duration::ZERO);
        assert!(PluginSession::connect(&ep).is_err());
        assert!(PluginEndpoint::parse_command("   ", Duration::from_secs(1)).is_err());
    }

    #[test]
    fn missing_program_is_transport_error() {
        let ep = PluginEndpoint::command(
            vec!["/nonexistent/vdn1-plugin".into()],
            Duration::from_secs(1),
        );
        assert!(matches!(PluginSession::connect(&ep), Err(Error::PluginIo { .. })));
    }
}
