//! Line-framed JSON connections and a thread-per-connection listener.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use vigil_core::proto::Frame;

use crate::error::{NetError, Result};

/// Longest accepted frame line.
pub const MAX_FRAME: usize = 16 << 20;

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

/// One framed connection. Reads keep partial lines across timeouts, so a
/// read timeout never splits a frame.
pub struct FrameConn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    pending: Vec<u8>,
    peer: SocketAddr,
}

impl FrameConn {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            pending: Vec::new(),
            peer,
        })
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let mut last = None;
        for sa in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT) {
                Ok(stream) => return Ok(Self::new(stream)?),
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .map(NetError::Io)
            .unwrap_or_else(|| NetError::Unreachable(addr.to_string())))
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    /// A second handle on the socket, for writer threads and shutdown.
    pub fn stream(&self) -> io::Result<TcpStream> {
        self.writer.try_clone()
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.writer.set_read_timeout(timeout)
    }

    pub fn send(&mut self, frame: &Frame) -> Result<()> {
        write_frame(&mut self.writer, frame)
    }

    /// Next frame; `Closed` at end of stream. With a read timeout set, a
    /// timeout surfaces as `Io` with kind `WouldBlock` or `TimedOut`.
    pub fn recv(&mut self) -> Result<Frame> {
        loop {
            let limit = (MAX_FRAME + 1 - self.pending.len()) as u64;
            let n = (&mut self.reader).take(limit).read_until(b'\n', &mut self.pending)?;
            if n == 0 && !self.pending.ends_with(b"\n") {
                if self.pending.len() > MAX_FRAME {
                    return Err(NetError::Malformed("frame exceeds size limit".into()));
                }
                return Err(NetError::Closed);
            }
            if !self.pending.ends_with(b"\n") {
                if self.pending.len() > MAX_FRAME {
                    return Err(NetError::Malformed("frame exceeds size limit".into()));
                }
                continue;
            }
            let line = std::mem::take(&mut self.pending);
            let text = std::str::from_utf8(&line).map_err(|e| NetError::Malformed(e.to_string()))?;
            if text.trim().is_empty() {
                continue;
            }
            return Frame::decode(text).map_err(|e| NetError::Malformed(e.to_string()));
        }
    }

    /// `None` when no frame arrived within `timeout`.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Frame>> {
        self.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        let out = match self.recv() {
            Ok(f) => Ok(Some(f)),
            Err(NetError::Io(e)) if is_timeout(&e) => Ok(None),
            Err(e) => Err(e),
        };
        self.set_read_timeout(None)?;
        out
    }

    /// Sends `frame` and waits for one reply. ERROR replies become
    /// `NetError::Remote`.
    pub fn request(&mut self, frame: &Frame) -> Result<Frame> {
        self.send(frame)?;
        match self.recv()? {
            Frame::Error { code, msg } => Err(NetError::Remote { code, msg }),
            other => Ok(other),
        }
    }

    /// True once the peer closed its side (never blocks).
    pub fn peer_closed(&self) -> bool {
        if self.writer.set_nonblocking(true).is_err() {
            return true;
        }
        let mut probe = [0u8; 1];
        let closed = match self.writer.peek(&mut probe) {
            Ok(0) => true,
            Ok(_) => false,
            Err(e) => e.kind() != ErrorKind::WouldBlock,
        };
        let _ = self.writer.set_nonblocking(false);
        closed
    }

    pub fn close(&self) {
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

pub fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

/// Writes one frame as a single write call.
pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(frame.encode().as_bytes())?;
    Ok(())
}

/// Opens a connection, sends one request and returns the reply.
pub fn call(addr: &str, frame: &Frame, timeout: Duration) -> Result<Frame> {
    let mut conn = FrameConn::connect(addr)?;
    conn.set_read_timeout(Some(timeout))?;
    conn.request(frame)
}

type Handler = dyn Fn(FrameConn) + Send + Sync;

struct Live {
    stop: AtomicBool,
    next_id: AtomicU64,
    conns: Mutex<HashMap<u64, TcpStream>>,
}

/// Accepts connections and runs `handler` on a dedicated thread for each.
/// Shutdown closes every open connection.
pub struct Listener {
    addr: SocketAddr,
    live: Arc<Live>,
    accept: Option<JoinHandle<()>>,
}

impl Listener {
    pub fn spawn<F>(bind: &str, name: &str, handler: F) -> Result<Self>
    where
        F: Fn(FrameConn) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let live = Arc::new(Live {
            stop: AtomicBool::new(false),
            next_id: AtomicU64::new(1),
            conns: Mutex::new(HashMap::new()),
        });
        let handler: Arc<Handler> = Arc::new(handler);
        let accept_live = live.clone();
        let conn_name = format!("{name}-conn");
        let accept = thread::Builder::new()
            .name(format!("{name}-accept"))
            .spawn(move || accept_loop(listener, accept_live, handler, conn_name))?;
        Ok(Self {
            addr,
            live,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn connection_count(&self) -> usize {
        self.live.conns.lock().len()
    }

    pub fn shutdown(&mut self) {
        if self.live.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.live.conns.lock().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, live: Arc<Live>, handler: Arc<Handler>, name: String) {
    for stream in listener.incoming() {
        if live.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let Ok(conn) = FrameConn::new(stream) else { continue };
        let id = live.next_id.fetch_add(1, Ordering::Relaxed);
        if let Ok(s) = conn.stream() {
            live.conns.lock().insert(id, s);
        }
        let live = live.clone();
        let handler = handler.clone();
        let spawned = thread::Builder::new().name(name.clone()).spawn(move || {
            handler(conn);
            if let Some(s) = live.conns.lock().remove(&id) {
                let _ = s.shutdown(Shutdown::Both);
            }
        });
        if let Err(e) = spawned {
            tracing::warn!("cannot spawn connection thread: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_reply_over_listener() {
        let l = Listener::spawn("127.0.0.1:0", "echo", |mut c| {
            while let Ok(f) = c.recv() {
                if c.send(&f).is_err() {
                    break;
                }
            }
        })
        .unwrap();
        let mut c = FrameConn::connect(&l.addr().to_string()).unwrap();
        let reply = c.request(&Frame::ok("hi")).unwrap();
        assert_eq!(reply, Frame::ok("hi"));
        let err = c.request(&Frame::error("X", "boom")).unwrap_err();
        assert_eq!(err.code(), Some("X"));
    }

    #[test]
    fn timeout_keeps_partial_line() {
        let server = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = server.local_addr().unwrap().to_string();
        let mut c = FrameConn::connect(&addr).unwrap();
        let (mut s, _) = server.accept().unwrap();
        let line = Frame::ok("split").encode();
        let (a, b) = line.split_at(7);
        s.write_all(a.as_bytes()).unwrap();
        assert!(c.recv_timeout(Duration::from_millis(30)).unwrap().is_none());
        s.write_all(b.as_bytes()).unwrap();
        let f = c.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(f, Some(Frame::ok("split")));
    }

    #[test]
    fn garbage_and_eof() {
        let server = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = server.local_addr().unwrap().to_string();
        let mut c = FrameConn::connect(&addr).unwrap();
        let (mut s, _) = server.accept().unwrap();
        s.write_all(b"{\"no_type\":1}\n").unwrap();
        assert!(matches!(c.recv(), Err(NetError::Malformed(_))));
        drop(s);
        assert!(matches!(c.recv(), Err(NetError::Closed)));
        assert!(c.peer_closed());
    }

    #[test]
    fn shutdown_closes_open_connections() {
        let mut l = Listener::spawn("127.0.0.1:0", "hold", |mut c| while c.recv().is_ok() {}).unwrap();
        let mut c = FrameConn::connect(&l.addr().to_string()).unwrap();
        c.send(&Frame::ok("")).unwrap();
        thread::sleep(Duration::from_millis(50));
        assert_eq!(l.connection_count(), 1);
        l.shutdown();
        assert!(matches!(c.recv(), Err(NetError::Closed) | Err(NetError::Io(_))));
    }
}
