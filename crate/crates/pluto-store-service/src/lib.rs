//! Network service for the module store: length-prefixed framed TCP with
//! single-frame requests and responses.
//!
//! Frame layout (bit-exact): `length: u32 BE | opcode: u8 | body`, where
//! `length == 1 + body.len()`. Opcodes: 0x01 LIST, 0x02 GET, 0x03 PUT,
//! 0x04 OK, 0x05 ERR. GET streams the exact stored container bytes;
//! LIST returns a JSON array of `{id, domain_label, kind, digest}` sorted
//! by id; PUT uploads container bytes and is refused on duplicate ids.

use pluto_core::pet::{deserialize, sha256_hex, Container, ContainerKind, Store};
use pluto_core::PlutoError;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;
use thiserror::Error;

pub const OP_LIST: u8 = 0x01;
pub const OP_GET: u8 = 0x02;
pub const OP_PUT: u8 = 0x03;
pub const OP_OK: u8 = 0x04;
pub const OP_ERR: u8 = 0x05;

/// Frames above this length are refused with ERR "too_large".
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame exceeds 64 MiB")]
    TooLarge,
    #[error("server error: {0}")]
    Remote(String),
    #[error("id not found: {0}")]
    NotFound(String),
    #[error("duplicate id: {0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] PlutoError),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

/// One request or response on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub opcode: u8,
    pub body: Vec<u8>,
}

/// One row of the wire listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListingEntry {
    pub id: String,
    pub domain_label: String,
    pub kind: ContainerKind,
    pub digest: String,
}

/// Encode one frame.
pub fn write_frame(w: &mut impl Write, opcode: u8, body: &[u8]) -> std::io::Result<()> {
    let len = 1 + body.len() as u32;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&[opcode])?;
    w.write_all(body)?;
    w.flush()
}

/// Decode one frame; `Malformed` on truncation, `TooLarge` past the cap.
pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)
        .map_err(|e| ServiceError::Malformed(format!("length prefix: {e}")))?;
    let len = u32::from_be_bytes(len_buf);
    if len == 0 {
        return Err(ServiceError::Malformed("zero-length frame".to_string()));
    }
    if len > MAX_FRAME_LEN {
        return Err(ServiceError::TooLarge);
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| ServiceError::Malformed(format!("truncated frame body: {e}")))?;
    let body = payload.split_off(1);
    Ok(Frame {
        opcode: payload[0],
        body,
    })
}

// ── server ───────────────────────────────────────────────────────────

/// Running server; dropping without `shutdown()` leaves the thread detached.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting and join the accept loop.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

/// Serve `store_dir` on `bind` (e.g. "127.0.0.1:0"); accepts concurrent
/// connections, one frame per request.
pub fn serve(store_dir: &Path, bind: &str) -> Result<ServerHandle> {
    let store = Arc::new(Store::open(store_dir)?);
    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();

    let accept_thread = std::thread::spawn(move || loop {
        if stop_flag.load(Ordering::SeqCst) {
            break;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let store = store.clone();
                std::thread::spawn(move || {
                    let _ = handle_connection(stream, &store);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(_) => break,
        }
    });

    Ok(ServerHandle {
        addr,
        stop,
        accept_thread: Some(accept_thread),
    })
}

fn handle_connection(mut stream: TcpStream, store: &Store) -> Result<()> {
    // accepted sockets can inherit the listener's nonblocking flag on some
    // platforms
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(ServiceError::TooLarge) => {
                // the oversized body is unread, so the stream is out of
                // sync: answer and drop the connection
                let _ = write_frame(&mut stream, OP_ERR, b"too_large");
                return Ok(());
            }
            Err(_) => return Ok(()), // peer closed or sent a garbage length
        };
        let keep_going = match frame.opcode {
            OP_LIST => respond_list(&mut stream, store)?,
            OP_GET => respond_get(&mut stream, store, &frame.body)?,
            OP_PUT => respond_put(&mut stream, store, &frame.body)?,
            other => {
                let _ = write_frame(
                    &mut stream,
                    OP_ERR,
                    format!("bad_opcode:{other:#04x}").as_bytes(),
                );
                false
            }
        };
        if !keep_going {
            return Ok(());
        }
    }
}

fn respond_list(stream: &mut TcpStream, store: &Store) -> Result<bool> {
    match store.list() {
        Ok(entries) => {
            let listing: Vec<ListingEntry> = entries
                .into_iter()
                .map(|e| ListingEntry {
                    id: e.id,
                    domain_label: e.domain_label,
                    kind: e.kind,
                    digest: e.sha256,
                })
                .collect();
            let body =
                serde_json::to_vec(&listing).map_err(|e| ServiceError::Remote(e.to_string()))?;
            write_frame(stream, OP_OK, &body)?;
        }
        Err(e) => {
            write_frame(stream, OP_ERR, format!("store:{e}").as_bytes())?;
        }
    }
    Ok(true)
}

fn respond_get(stream: &mut TcpStream, store: &Store, body: &[u8]) -> Result<bool> {
    let id = match std::str::from_utf8(body) {
        Ok(s) => s,
        Err(_) => {
            write_frame(stream, OP_ERR, b"bad_id:not_utf8")?;
            return Ok(true);
        }
    };
    match store.get_bytes(id) {
        Ok(bytes) => write_frame(stream, OP_OK, &bytes)?,
        Err(PlutoError::NotFound(_)) => {
            write_frame(stream, OP_ERR, format!("not_found:{id}").as_bytes())?
        }
        Err(e) => write_frame(stream, OP_ERR, format!("store:{e}").as_bytes())?,
    }
    Ok(true)
}

fn respond_put(stream: &mut TcpStream, store: &Store, body: &[u8]) -> Result<bool> {
    // validate before touching the store
    if let Err(e) = deserialize(body) {
        write_frame(stream, OP_ERR, format!("bad_container:{e}").as_bytes())?;
        return Ok(true);
    }
    match store.put_bytes(body) {
        Ok(entry) => write_frame(stream, OP_OK, entry.sha256.as_bytes())?,
        Err(PlutoError::Conflict(id)) => {
            write_frame(stream, OP_ERR, format!("conflict:{id}").as_bytes())?
        }
        Err(e) => write_frame(stream, OP_ERR, format!("store:{e}").as_bytes())?,
    }
    Ok(true)
}

// ── client ───────────────────────────────────────────────────────────

fn connect(addr: impl ToSocketAddrs) -> Result<TcpStream> {
    let stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    Ok(stream)
}

fn expect_ok(frame: Frame) -> Result<Vec<u8>> {
    match frame.opcode {
        OP_OK => Ok(frame.body),
        OP_ERR => {
            let msg = String::from_utf8_lossy(&frame.body).to_string();
            if let Some(id) = msg.strip_prefix("not_found:") {
                Err(ServiceError::NotFound(id.to_string()))
            } else if let Some(id) = msg.strip_prefix("conflict:") {
                Err(ServiceError::Conflict(id.to_string()))
            } else {
                Err(ServiceError::Remote(msg))
            }
        }
        other => Err(ServiceError::Malformed(format!(
            "unexpected response opcode {other:#04x}"
        ))),
    }
}

/// Fetch the sorted listing.
pub fn client_list(addr: impl ToSocketAddrs) -> Result<Vec<ListingEntry>> {
    let mut stream = connect(addr)?;
    write_frame(&mut stream, OP_LIST, &[])?;
    let body = expect_ok(read_frame(&mut stream)?)?;
    serde_json::from_slice(&body).map_err(|e| ServiceError::Malformed(format!("listing: {e}")))
}

/// Fetch one container; returns the decoded record plus the exact bytes.
/// The container's trailing digest is verified during decoding.
pub fn client_get(addr: impl ToSocketAddrs, id: &str) -> Result<(Container, Vec<u8>)> {
    let mut stream = connect(addr)?;
    write_frame(&mut stream, OP_GET, id.as_bytes())?;
    let body = expect_ok(read_frame(&mut stream)?)?;
    let container = deserialize(&body)?;
    Ok((container, body))
}

/// Upload container bytes; returns the server-side digest, which is checked
/// against a locally computed one.
pub fn client_put(addr: impl ToSocketAddrs, bytes: &[u8]) -> Result<String> {
    let mut stream = connect(addr)?;
    write_frame(&mut stream, OP_PUT, bytes)?;
    let body = expect_ok(read_frame(&mut stream)?)?;
    let digest = String::from_utf8_lossy(&body).to_string();
    let local = sha256_hex(bytes);
    if digest != local {
        return Err(ServiceError::Remote(format!(
            "digest mismatch: server {digest} local {local}"
        )));
    }
    Ok(digest)
}
