//! Transports, the controller-side session and the device-side server loop.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use dnp_core::{Device, Report};
use thiserror::Error;

use crate::agent::handle;
use crate::msg::{decode, encode, Message, ERR_BAD_FRAME, ERR_UNSUPPORTED, HEADER_LEN};
use crate::CodecError;

/// Largest body a stream transport accepts.
const MAX_BODY: usize = 64 << 20;

/// Default request timeout for live sessions.
pub const LIVE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("session closed")]
    SessionClosed,
    #[error("no reply for xid {0}")]
    XidTimeout(u32),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("transport: {0}")]
    Io(String),
    #[error("device error {code}: {detail}")]
    Remote { code: u16, detail: String },
}

impl From<io::Error> for SessionError {
    fn from(e: io::Error) -> Self {
        SessionError::Io(e.to_string())
    }
}

/// Sends whole frames.
pub trait FrameTx: Send {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()>;
}

/// Receives whole frames; `Ok(None)` means the peer closed.
pub trait FrameRx: Send {
    fn recv_frame(&mut self) -> io::Result<Option<Vec<u8>>>;
}

struct MemTx(Sender<Vec<u8>>);
struct MemRx(Receiver<Vec<u8>>);

impl FrameTx for MemTx {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        self.0.send(frame.to_vec()).map_err(|_| io::ErrorKind::BrokenPipe.into())
    }
}

impl FrameRx for MemRx {
    fn recv_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.0.recv().ok())
    }
}

pub type Endpoint = (Box<dyn FrameTx>, Box<dyn FrameRx>);

/// An in-process link: two connected endpoints carrying encoded frames.
pub fn mem_link() -> (Endpoint, Endpoint) {
    let (atx, brx) = mpsc::channel();
    let (btx, arx) = mpsc::channel();
    (
        (Box::new(MemTx(atx)), Box::new(MemRx(arx))),
        (Box::new(MemTx(btx)), Box::new(MemRx(brx))),
    )
}

struct TcpTx(TcpStream);
struct TcpRx(TcpStream);

impl FrameTx for TcpTx {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        self.0.write_all(frame)
    }
}

impl FrameRx for TcpRx {
    fn recv_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        let mut frame = vec![0u8; HEADER_LEN];
        match self.0.read_exact(&mut frame) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let len = u32::from_le_bytes(frame[6..10].try_into().expect("4 bytes")) as usize;
        if len > MAX_BODY {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "frame body too large"));
        }
        frame.resize(HEADER_LEN + len, 0);
        match self.0.read_exact(&mut frame[HEADER_LEN..]) {
            Ok(()) => Ok(Some(frame)),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Splits a connected stream into frame endpoints.
pub fn tcp_link(stream: TcpStream) -> io::Result<Endpoint> {
    stream.set_nodelay(true)?;
    let rx = stream.try_clone()?;
    Ok((Box::new(TcpTx(stream)), Box::new(TcpRx(rx))))
}

/// Connects a live session to a device server.
pub fn tcp_connect(addr: impl ToSocketAddrs) -> Result<Session, SessionError> {
    let (tx, rx) = tcp_link(TcpStream::connect(addr)?)?;
    Ok(Session::new(tx, rx).with_timeout(Some(LIVE_TIMEOUT)))
}

type PendingMap = Arc<Mutex<HashMap<u32, Sender<Message>>>>;

/// A request awaiting its reply.
pub struct Pending {
    pub xid: u32,
    rx: Receiver<Message>,
    timeout: Option<Duration>,
    pending: PendingMap,
}

impl Pending {
    pub fn wait(self) -> Result<Message, SessionError> {
        let r = match self.timeout {
            None => self.rx.recv().map_err(|_| SessionError::SessionClosed),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => SessionError::XidTimeout(self.xid),
                RecvTimeoutError::Disconnected => SessionError::SessionClosed,
            }),
        };
        if r.is_err() {
            self.pending.lock().expect("pending map").remove(&self.xid);
        }
        r
    }
}

/// Controller-side session: replies are matched to requests by xid and
/// reports arrive on a separate ordered stream.
pub struct Session {
    tx: Mutex<Box<dyn FrameTx>>,
    pending: PendingMap,
    reports: Mutex<Receiver<Report>>,
    closed: Arc<AtomicBool>,
    next_xid: AtomicU32,
    timeout: Option<Duration>,
    reader: Option<JoinHandle<()>>,
}

impl Session {
    pub fn new(tx: Box<dyn FrameTx>, mut rx: Box<dyn FrameRx>) -> Self {
        let pending: PendingMap = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        let (rtx, rrx) = mpsc::channel();
        let reader = {
            let (pending, closed) = (pending.clone(), closed.clone());
            thread::spawn(move || {
                while let Ok(Some(frame)) = rx.recv_frame() {
                    let Ok(f) = decode(&frame) else { continue };
                    match f.msg {
                        Message::Report(r) => {
                            let _ = rtx.send(r);
                        }
                        msg => {
                            if let Some(s) = pending.lock().expect("pending map").remove(&f.xid) {
                                let _ = s.send(msg);
                            }
                        }
                    }
                }
                closed.store(true, Ordering::SeqCst);
                pending.lock().expect("pending map").clear();
            })
        };
        Session {
            tx: Mutex::new(tx),
            pending,
            reports: Mutex::new(rrx),
            closed,
            next_xid: AtomicU32::new(1),
            timeout: None,
            reader: Some(reader),
        }
    }

    /// Sets the per-request timeout; `None` waits indefinitely.
    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    /// Sends a request without waiting, so several may be in flight.
    pub fn send(&self, msg: &Message) -> Result<Pending, SessionError> {
        let xid = self.next_xid.fetch_add(1, Ordering::SeqCst);
        let (stx, srx) = mpsc::channel();
        self.pending.lock().expect("pending map").insert(xid, stx);
        let pending = Pending { xid, rx: srx, timeout: self.timeout, pending: self.pending.clone() };
        if self.is_closed() {
            self.pending.lock().expect("pending map").remove(&xid);
            return Err(SessionError::SessionClosed);
        }
        if self.tx.lock().expect("tx").send_frame(&encode(xid, msg)).is_err() {
            self.pending.lock().expect("pending map").remove(&xid);
            return Err(SessionError::SessionClosed);
        }
        Ok(pending)
    }

    pub fn request(&self, msg: &Message) -> Result<Message, SessionError> {
        self.send(msg)?.wait()
    }

    /// Reports received so far, in arrival order.
    pub fn drain_reports(&self) -> Vec<Report> {
        self.reports.lock().expect("reports").try_iter().collect()
    }

    /// Waits up to `timeout` for the next report.
    pub fn next_report(&self, timeout: Duration) -> Option<Report> {
        self.reports.lock().expect("reports").recv_timeout(timeout).ok()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        // The reader exits when the peer closes; never block on it here.
        drop(self.reader.take());
    }
}

/// The controller's view of one device connection.
pub trait Channel {
    fn request(&mut self, msg: Message) -> Result<Message, SessionError>;
    fn drain_reports(&mut self) -> Vec<Report>;

    /// Like `request`, but an `Error` reply becomes `SessionError::Remote`.
    fn call(&mut self, msg: Message) -> Result<Message, SessionError> {
        match self.request(msg)? {
            Message::Error { code, detail } => Err(SessionError::Remote { code, detail }),
            m => Ok(m),
        }
    }
}

impl Channel for Session {
    fn request(&mut self, msg: Message) -> Result<Message, SessionError> {
        Session::request(self, &msg)
    }

    fn drain_reports(&mut self) -> Vec<Report> {
        Session::drain_reports(self)
    }
}

/// Device-side handle for pushing reports onto a served connection.
#[derive(Clone)]
pub struct ReportPusher(Arc<Mutex<Box<dyn FrameTx>>>);

impl ReportPusher {
    pub fn push(&self, r: Report) -> io::Result<()> {
        self.0.lock().expect("tx").send_frame(&encode(0, &Message::Report(r)))
    }
}

/// The reply for a frame that failed to decode, if its xid is readable.
pub fn error_reply(frame: &[u8], err: &CodecError) -> Option<Vec<u8>> {
    if frame.len() < HEADER_LEN {
        return None;
    }
    let xid = u32::from_le_bytes(frame[2..6].try_into().expect("4 bytes"));
    let code = match err {
        CodecError::UnknownType { .. } | CodecError::BadVersion(_) => ERR_UNSUPPORTED,
        _ => ERR_BAD_FRAME,
    };
    Some(encode(xid, &Message::Error { code, detail: err.to_string() }))
}

/// Serves requests from `rx` against `dev` until the peer closes. Malformed
/// frames get an `Error` reply and the connection stays up.
pub fn serve(
    tx: Box<dyn FrameTx>,
    mut rx: Box<dyn FrameRx>,
    dev: Arc<Mutex<Device>>,
) -> (ReportPusher, JoinHandle<()>) {
    let tx = Arc::new(Mutex::new(tx));
    let pusher = ReportPusher(tx.clone());
    let h = thread::spawn(move || {
        while let Ok(Some(frame)) = rx.recv_frame() {
            let out = match decode(&frame) {
                Ok(f) => {
                    let reply = handle(&mut dev.lock().expect("device"), f.msg);
                    Some(encode(f.xid, &reply))
                }
                Err(e) => error_reply(&frame, &e),
            };
            if let Some(out) = out {
                if tx.lock().expect("tx").send_frame(&out).is_err() {
                    break;
                }
            }
        }
    });
    (pusher, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dnp_core::DeviceConfig;

    #[test]
    fn request_over_mem_link() {
        let (a, b) = mem_link();
        let dev = Arc::new(Mutex::new(Device::new(DeviceConfig::new(4, [1, 2]))));
        let (_push, _h) = serve(b.0, b.1, dev);
        let s = Session::new(a.0, a.1);
        match s.request(&Message::FeaturesReq).unwrap() {
            Message::FeaturesReply { device, ports, .. } => {
                assert_eq!(device, 4);
                assert_eq!(ports, vec![1, 2]);
            }
            m => panic!("{m:?}"),
        }
    }
}
