//! Ordered, reliable message transport between the edge and cloud roles.
//! Stream transports frame each message as `u32 LE length ‖ bytes`.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Error, Result};

/// Upper bound on a single frame, far above any packet this codec emits.
pub const MAX_FRAME: usize = 16 << 20;

pub trait Channel {
    fn send(&mut self, msg: &[u8]) -> Result<()>;

    /// Next message; [`Error::ChannelClosed`] once the peer has gone away.
    fn recv(&mut self) -> Result<Vec<u8>>;
}

/// One end of an in-process queue pair.
pub struct MemoryChannel {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn memory_pair() -> (MemoryChannel, MemoryChannel) {
    let (atx, brx) = channel();
    let (btx, arx) = channel();
    (
        MemoryChannel { tx: atx, rx: arx },
        MemoryChannel { tx: btx, rx: brx },
    )
}

impl Channel for MemoryChannel {
    fn send(&mut self, msg: &[u8]) -> Result<()> {
        self.tx.send(msg.to_vec()).map_err(|_| Error::ChannelClosed)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        self.rx.recv().map_err(|_| Error::ChannelClosed)
    }
}

pub fn write_frame(w: &mut impl Write, msg: &[u8]) -> Result<()> {
    if msg.len() > MAX_FRAME {
        return Err(Error::Format(format!("frame of {} bytes exceeds {MAX_FRAME}", msg.len())));
    }
    w.write_all(&(msg.len() as u32).to_le_bytes())?;
    w.write_all(msg)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean end of stream before the length prefix is
/// reported as [`Error::ChannelClosed`].
pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Err(Error::ChannelClosed),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(Error::Format(format!("frame of {n} bytes exceeds {MAX_FRAME}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Length { needed: n, have: 0 },
        _ => e.into(),
    })?;
    Ok(buf)
}

/// Framed messages over any byte stream (a TCP socket in practice).
pub struct StreamChannel<S> {
    stream: S,
}

impl<S: Read + Write> StreamChannel<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl StreamChannel<TcpStream> {
    pub fn connect(addr: &str) -> Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(Self::new(s))
    }
}

impl<S: Read + Write> Channel for StreamChannel<S> {
    fn send(&mut self, msg: &[u8]) -> Result<()> {
        write_frame(&mut self.stream, msg)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        read_frame(&mut self.stream)
    }
}
