//! Transports carrying frames from a base to the webserver service: a
//! direct in-process channel for deterministic runs and a framed TCP
//! service (4-byte big-endian length prefix per message) for live mode.
//!
//! A response frame of length zero means "no message": the session is over
//! or the request was rejected. Rejections are indistinguishable from
//! silence on the wire by design; reasons stay on the server side.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::protocol::ServerNode;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("transport failure: {0}")]
    Io(String),
}

/// Anything a base can push a frame through and maybe get one back.
pub trait ServerChannel {
    fn request(&mut self, frame: &[u8]) -> Result<Option<Vec<u8>>, ChannelError>;
}

/// Direct call path into a server node, at a fixed simulation tick.
pub struct InProcChannel<'a> {
    pub node: &'a mut ServerNode,
    pub tick: u64,
}

impl ServerChannel for InProcChannel<'_> {
    fn request(&mut self, frame: &[u8]) -> Result<Option<Vec<u8>>, ChannelError> {
        // rejected frames get no reply, same as over the socket
        Ok(self.node.handle_frame(frame, self.tick).unwrap_or(None))
    }
}

/// A server that cannot be contacted; models an out-of-range or down link.
pub struct UnreachableChannel;

impl ServerChannel for UnreachableChannel {
    fn request(&mut self, _frame: &[u8]) -> Result<Option<Vec<u8>>, ChannelError> {
        Err(ChannelError::Unreachable("no route to server".into()))
    }
}

pub fn write_frame<W: Write>(writer: &mut W, payload: &[u8]) -> std::io::Result<()> {
    writer.write_all(&(payload.len() as u32).to_be_bytes())?;
    writer.write_all(payload)?;
    writer.flush()
}

pub fn read_frame<R: Read>(reader: &mut R) -> std::io::Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    reader.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes) as usize;
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload)?;
    Ok(payload)
}

/// TCP client side of the framed service. One connection per session.
pub struct TcpChannel {
    stream: TcpStream,
}

impl TcpChannel {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, ChannelError> {
        let stream = TcpStream::connect(addr).map_err(|e| ChannelError::Unreachable(e.to_string()))?;
        stream
            .set_read_timeout(Some(Duration::from_secs(10)))
            .map_err(|e| ChannelError::Io(e.to_string()))?;
        Ok(Self { stream })
    }
}

impl ServerChannel for TcpChannel {
    fn request(&mut self, frame: &[u8]) -> Result<Option<Vec<u8>>, ChannelError> {
        write_frame(&mut self.stream, frame).map_err(|e| ChannelError::Io(e.to_string()))?;
        let reply = read_frame(&mut self.stream).map_err(|e| ChannelError::Io(e.to_string()))?;
        Ok(if reply.is_empty() { None } else { Some(reply) })
    }
}

/// Background TCP service wrapping a server node.
pub struct TcpService {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    node: Arc<Mutex<ServerNode>>,
    tick: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl TcpService {
    pub fn start(node: ServerNode, listen: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let node = Arc::new(Mutex::new(node));
        let tick = Arc::new(AtomicU64::new(0));

        let accept_shutdown = Arc::clone(&shutdown);
        let accept_node = Arc::clone(&node);
        let accept_tick = Arc::clone(&tick);
        let handle = std::thread::spawn(move || {
            let mut workers: Vec<JoinHandle<()>> = Vec::new();
            while !accept_shutdown.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let node = Arc::clone(&accept_node);
                        let tick = Arc::clone(&accept_tick);
                        workers.push(std::thread::spawn(move || serve_connection(stream, node, tick)));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
            for worker in workers {
                let _ = worker.join();
            }
        });

        Ok(Self { addr, shutdown, node, tick, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Simulation tick stamped on fitness rows written by this service.
    pub fn set_tick(&self, tick: u64) {
        self.tick.store(tick, Ordering::SeqCst);
    }

    /// Stop accepting, join workers, hand the server state back.
    pub fn stop(mut self) -> ServerNode {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
        Arc::try_unwrap(self.node)
            .unwrap_or_else(|_| panic!("service workers still hold the server"))
            .into_inner()
            .expect("server mutex poisoned")
    }
}

fn serve_connection(mut stream: TcpStream, node: Arc<Mutex<ServerNode>>, tick: Arc<AtomicU64>) {
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(frame) => frame,
            Err(_) => return, // peer closed
        };
        let reply = {
            let mut node = node.lock().expect("server mutex poisoned");
            let t = tick.load(Ordering::SeqCst);
            node.handle_frame(&frame, t).unwrap_or(None)
        };
        if write_frame(&mut stream, reply.as_deref().unwrap_or(&[])).is_err() {
            return;
        }
    }
}
