//! Frame transports. Both ends of a session speak through [`Transport`]: one whole
//! frame per `send`/`recv`. The in-process channel and TCP paths carry identical bytes.

use crate::protocol::wire::{decode_header, WireError, HEADER_LEN};
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;
use thiserror::Error;

/// Largest payload accepted from a stream peer.
pub const MAX_PAYLOAD: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer closed the connection")]
    Closed,
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Malformed(#[from] WireError),
}

pub trait Transport: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;

    /// Blocks for the next complete frame; `None` waits indefinitely.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        (**self).send(frame)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        (**self).recv(timeout)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        (**self).send(frame)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        (**self).recv(timeout)
    }
}

/// One end of an in-process frame channel.
#[derive(Debug)]
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        ChannelTransport { tx: a_tx, rx: a_rx },
        ChannelTransport { tx: b_tx, rx: b_rx },
    )
}

impl Transport for ChannelTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx.send(frame.to_vec()).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        match timeout {
            None => self.rx.recv().map_err(|_| TransportError::Closed),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout,
                RecvTimeoutError::Disconnected => TransportError::Closed,
            }),
        }
    }
}

#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect(addr: &str) -> Result<Self, TransportError> {
        Self::new(TcpStream::connect(addr)?)
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

fn map_read(e: std::io::Error) -> TransportError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => TransportError::Timeout,
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted => {
            TransportError::Closed
        }
        _ => TransportError::Io(e),
    }
}

/// Reads one frame: the fixed header, then exactly `payload_len` bytes.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Vec<u8>, TransportError> {
    let mut frame = vec![0u8; HEADER_LEN];
    reader.read_exact(&mut frame).map_err(map_read)?;
    let header = decode_header(&frame)?;
    if header.payload_len > MAX_PAYLOAD {
        return Err(TransportError::Malformed(WireError::OversizePayload(
            header.payload_len as usize,
        )));
    }
    frame.resize(HEADER_LEN + header.payload_len as usize, 0);
    reader.read_exact(&mut frame[HEADER_LEN..]).map_err(map_read)?;
    Ok(frame)
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(frame).map_err(|e| match e.kind() {
            ErrorKind::BrokenPipe | ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted => {
                TransportError::Closed
            }
            _ => TransportError::Io(e),
        })
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        self.stream.set_read_timeout(timeout.filter(|t| !t.is_zero()))?;
        read_frame(&mut self.stream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Wraps a transport and keeps a copy of every frame that crosses it.
#[derive(Debug)]
pub struct RecordingTransport<T> {
    inner: T,
    transcript: Vec<(Direction, Vec<u8>)>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            transcript: Vec::new(),
        }
    }

    pub fn transcript(&self) -> &[(Direction, Vec<u8>)] {
        &self.transcript
    }

    pub fn into_parts(self) -> (T, Vec<(Direction, Vec<u8>)>) {
        (self.inner, self.transcript)
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.inner.send(frame)?;
        self.transcript.push((Direction::Sent, frame.to_vec()));
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        let frame = self.inner.recv(timeout)?;
        self.transcript.push((Direction::Received, frame.clone()));
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::wire::{encode, Message};
    use std::net::TcpListener;

    fn frame() -> Vec<u8> {
        encode(&Message::RoiRequest {
            session_id: 9,
            b1: 3,
            b2: 2,
        })
        .unwrap()
    }

    #[test]
    fn channel_roundtrip_and_close() {
        let (mut a, mut b) = channel_pair();
        a.send(&frame()).unwrap();
        assert_eq!(b.recv(None).unwrap(), frame());
        assert!(matches!(
            b.recv(Some(Duration::from_millis(5))),
            Err(TransportError::Timeout)
        ));
        drop(a);
        assert!(matches!(b.recv(None), Err(TransportError::Closed)));
    }

    #[test]
    fn tcp_roundtrip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let mut client = TcpTransport::connect(&addr).unwrap();
        let mut server = TcpTransport::new(listener.accept().unwrap().0).unwrap();
        client.send(&frame()).unwrap();
        client.send(&frame()).unwrap();
        assert_eq!(server.recv(None).unwrap(), frame());
        assert_eq!(server.recv(Some(Duration::from_secs(5))).unwrap(), frame());
        drop(client);
        assert!(matches!(server.recv(None), Err(TransportError::Closed)));
    }

    #[test]
    fn read_frame_rejects_bad_header_and_truncation() {
        let mut bad = frame();
        bad[0] = b'X';
        assert!(matches!(
            read_frame(&mut bad.as_slice()),
            Err(TransportError::Malformed(WireError::BadMagic(_)))
        ));
        let f = frame();
        assert!(matches!(
            read_frame(&mut &f[..f.len() - 1]),
            Err(TransportError::Closed)
        ));
    }

    #[test]
    fn recording_keeps_both_directions() {
        let (a, mut b) = channel_pair();
        let mut rec = RecordingTransport::new(a);
        rec.send(&frame()).unwrap();
        b.send(&[1, 2]).unwrap();
        rec.recv(None).unwrap();
        let dirs: Vec<_> = rec.transcript().iter().map(|(d, _)| *d).collect();
        assert_eq!(dirs, [Direction::Sent, Direction::Received]);
    }
}
