//! VDN1: the byte protocol spoken with out-of-process video denoisers.
//!
//! Every message starts with an 8-byte preamble
//! `"VDN1" | u8 msg_type | u8 version | u16 reserved`. Requests (type 1) and
//! responses (type 2) continue with `u32 B | u32 H | u32 W | f32 sigma` and
//! `B*H*W` f32 values in frame-major, row-major order. Errors (type 3)
//! continue with `u32 len` and `len` bytes of UTF-8. All integers and floats
//! are little-endian.

use std::io::{self, Read, Write};

pub const MAGIC: [u8; 4] = *b"VDN1";
pub const VERSION: u8 = 1;
pub const MSG_REQUEST: u8 = 1;
pub const MSG_RESPONSE: u8 = 2;
pub const MSG_ERROR: u8 = 3;

/// Upper bound on payload elements accepted from the wire (1 GiB of f32).
pub const MAX_ELEMENTS: u64 = 1 << 28;
/// Upper bound on error-message length.
pub const MAX_ERROR_LEN: u32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubeDims {
    pub frames: u32,
    pub rows: u32,
    pub cols: u32,
}

impl CubeDims {
    pub fn len(&self) -> u64 {
        // saturates: three u32 factors can exceed u64
        u64::from(self.frames)
            .saturating_mul(u64::from(self.rows))
            .saturating_mul(u64::from(self.cols))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Request {
        dims: CubeDims,
        sigma: f32,
        payload: Vec<f32>,
    },
    Response {
        dims: CubeDims,
        sigma: f32,
        payload: Vec<f32>,
    },
    Error(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} elements exceeds limit")]
    Oversized(u64),
    #[error("error message is not UTF-8")]
    InvalidUtf8,
    #[error("stream ended inside a message")]
    Truncated,
    #[error(transparent)]
    Io(io::Error),
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ProtocolError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
        _ => ProtocolError::Io(e),
    })
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads one message. `Ok(None)` means the stream closed cleanly between
/// messages.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut pre = [0u8; 8];
    // distinguish a clean close from a truncated preamble
    let mut got = 0;
    while got < pre.len() {
        match r.read(&mut pre[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(ProtocolError::Io(e)),
        }
    }
    let magic = [pre[0], pre[1], pre[2], pre[3]];
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let (msg_type, version) = (pre[4], pre[5]);
    if version != VERSION {
        return Err(ProtocolError::BadVersion(version));
    }
    match msg_type {
        MSG_REQUEST | MSG_RESPONSE => {
            let mut head = [0u8; 16];
            read_exact_or_truncated(r, &mut head)?;
            let dims = CubeDims {
                frames: u32_at(&head, 0),
                rows: u32_at(&head, 4),
                cols: u32_at(&head, 8),
            };
            let sigma = f32::from_le_bytes([head[12], head[13], head[14], head[15]]);
            let n = dims.len();
            if n > MAX_ELEMENTS {
                return Err(ProtocolError::Oversized(n));
            }
            let mut raw = vec![0u8; n as usize * 4];
            read_exact_or_truncated(r, &mut raw)?;
            let payload = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Some(if msg_type == MSG_REQUEST {
                Message::Request {
                    dims,
                    sigma,
                    payload,
                }
            } else {
                Message::Response {
                    dims,
                    sigma,
                    payload,
                }
            }))
        }
        MSG_ERROR => {
            let mut len = [0u8; 4];
            read_exact_or_truncated(r, &mut len)?;
            let len = u32::from_le_bytes(len);
            if len > MAX_ERROR_LEN {
                return Err(ProtocolError::Oversized(u64::from(len)));
            }
            let mut text = vec![0u8; len as usize];
            read_exact_or_truncated(r, &mut text)?;
            String::from_utf8(text)
                .map(|s| Some(Message::Error(s)))
                .map_err(|_| ProtocolError::InvalidUtf8)
        }
        other => Err(ProtocolError::UnknownType(other)),
    }
}

fn preamble(msg_type: u8) -> [u8; 8] {
    [MAGIC[0], MAGIC[1], MAGIC[2], MAGIC[3], msg_type, VERSION, 0, 0]
}

/// Serialises `msg` into a byte vector.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    match msg {
        Message::Request {
            dims,
            sigma,
            payload,
        }
        | Message::Response {
            dims,
            sigma,
            payload,
        } => {
            let t = if matches!(msg, Message::Request { .. }) {
                MSG_REQUEST
            } else {
                MSG_RESPONSE
            };
            let mut out = Vec::with_capacity(24 + payload.len() * 4);
            out.extend_from_slice(&preamble(t));
            out.extend_from_slice(&dims.frames.to_le_bytes());
            out.extend_from_slice(&dims.rows.to_le_bytes());
            out.extend_from_slice(&dims.cols.to_le_bytes());
            out.extend_from_slice(&sigma.to_le_bytes());
            for v in payload {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        Message::Error(text) => {
            let mut out = Vec::with_capacity(12 + text.len());
            out.extend_from_slice(&preamble(MSG_ERROR));
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
            out
        }
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode_message(msg))?;
    w.flush()
}

/// Plugin-side request loop: answers every request with `handler`'s output
/// (or an error message) until the input stream closes. Malformed input is
/// answered with an error message; framing cannot be recovered after a bad
/// preamble, so the loop then stops.
pub fn serve<R, W, F>(mut input: R, mut output: W, mut handler: F) -> io::Result<()>
where
    R: Read,
    W: Write,
    F: FnMut(CubeDims, f32, Vec<f32>) -> Result<Vec<f32>, String>,
{
    loop {
        match read_message(&mut input) {
            Ok(None) => return Ok(()),
            Ok(Some(Message::Request {
                dims,
                sigma,
                payload,
            })) => {
                let reply = match handler(dims, sigma, payload) {
                    Ok(out) if out.len() as u64 == dims.len() => Message::Response {
                        dims,
                        sigma,
                        payload: out,
                    },
                    Ok(out) => Message::Error(format!(
                        "denoiser returned {} values for {} inputs",
                        out.len(),
                        dims.len()
                    )),
                    Err(e) => Message::Error(e),
                };
                write_message(&mut output, &reply)?;
            }
            Ok(Some(_)) => {
                write_message(
                    &mut output,
                    &Message::Error("expected a request message".into()),
                )?;
            }
            Err(ProtocolError::Io(e)) => return Err(e),
            Err(e) => {
                write_message(&mut output, &Message::Error(e.to_string()))?;
                if matches!(e, ProtocolError::Truncated | ProtocolError::BadMagic(_)) {
                    return Ok(());
                }
            }
        }
    }
}

/// Echo handler: returns the payload untouched.
pub fn serve_echo<R: Read, W: Write>(input: R, output: W) -> io::Result<()> {
    serve(input, output, |_, _, payload| Ok(payload))
}
