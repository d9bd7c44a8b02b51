//! Link transports. The in-process transport hands frames over as values;
//! the socket transport encodes, encrypts and pushes every frame through a
//! loopback TCP connection and decodes it on the far side.

use std::collections::BTreeMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};

use aot_core::crypto::KeyPair;

use crate::frame::{link_key, Endpoint, Frame, LinkError, LinkReceiver, LinkSender};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("socket: {0}")]
    Io(#[from] std::io::Error),
    #[error("no key registered for {0:?}")]
    UnknownEndpoint(Endpoint),
}

pub trait Transport {
    /// Moves one frame from `from` to `to` and returns what `to` received.
    fn carry(
        &mut self,
        from: Endpoint,
        to: Endpoint,
        frame: Frame,
    ) -> Result<Frame, TransportError>;

    fn name(&self) -> &'static str;
}

#[derive(Default)]
pub struct InProcess;

impl Transport for InProcess {
    fn carry(
        &mut self,
        _from: Endpoint,
        _to: Endpoint,
        frame: Frame,
    ) -> Result<Frame, TransportError> {
        Ok(frame)
    }

    fn name(&self) -> &'static str {
        "in_process"
    }
}

struct Socket {
    tx: TcpStream,
    rx: TcpStream,
}

/// Loopback TCP with one connection per destination and an authenticated,
/// encrypted channel per directed link.
pub struct Tcp {
    keys: BTreeMap<Endpoint, KeyPair>,
    sockets: BTreeMap<Endpoint, Socket>,
    senders: BTreeMap<(Endpoint, Endpoint), LinkSender>,
    receivers: BTreeMap<(Endpoint, Endpoint), LinkReceiver>,
    pub bytes_carried: u64,
}

impl Tcp {
    pub fn new(keys: BTreeMap<Endpoint, KeyPair>) -> Self {
        Self {
            keys,
            sockets: BTreeMap::new(),
            senders: BTreeMap::new(),
            receivers: BTreeMap::new(),
            bytes_carried: 0,
        }
    }

    fn socket(&mut self, to: Endpoint) -> Result<&mut Socket, TransportError> {
        if let std::collections::btree_map::Entry::Vacant(e) = self.sockets.entry(to) {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let tx = TcpStream::connect(listener.local_addr()?)?;
            let (rx, _) = listener.accept()?;
            for s in [&tx, &rx] {
                s.set_nodelay(true)?;
                s.set_nonblocking(true)?;
            }
            e.insert(Socket { tx, rx });
        }
        Ok(self.sockets.get_mut(&to).expect("inserted"))
    }

    fn channel(&mut self, from: Endpoint, to: Endpoint) -> Result<(), TransportError> {
        if self.senders.contains_key(&(from, to)) {
            return Ok(());
        }
        let own = self
            .keys
            .get(&from)
            .ok_or(TransportError::UnknownEndpoint(from))?;
        let peer = self
            .keys
            .get(&to)
            .ok_or(TransportError::UnknownEndpoint(to))?;
        let key = link_key(own, &peer.public);
        // the receiving side derives the same key from its own secret
        debug_assert_eq!(key, link_key(peer, &own.public));
        self.senders
            .insert((from, to), LinkSender::new(&key, from, to));
        self.receivers
            .insert((from, to), LinkReceiver::new(&key, from, to));
        Ok(())
    }
}

/// Writes `out` and reads back exactly as many bytes, interleaving so large
/// frames don't deadlock on full socket buffers.
fn pump(sock: &mut Socket, out: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut written = 0;
    let mut input = vec![0u8; out.len()];
    let mut read = 0;
    while read < input.len() {
        if written < out.len() {
            match sock.tx.write(&out[written..]) {
                Ok(n) => written += n,
                Err(e) if e.kind() == ErrorKind::WouldBlock => {}
                Err(e) => return Err(e),
            }
        }
        match sock.rx.read(&mut input[read..]) {
            Ok(0) => return Err(ErrorKind::UnexpectedEof.into()),
            Ok(n) => read += n,
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::yield_now(),
            Err(e) => return Err(e),
        }
    }
    Ok(input)
}

impl Transport for Tcp {
    fn carry(
        &mut self,
        from: Endpoint,
        to: Endpoint,
        frame: Frame,
    ) -> Result<Frame, TransportError> {
        self.channel(from, to)?;
        let sealed = self
            .senders
            .get_mut(&(from, to))
            .expect("channel")
            .seal(&frame);
        let mut out = (sealed.len() as u32).to_be_bytes().to_vec();
        out.extend_from_slice(&sealed);
        let got = pump(self.socket(to)?, &out)?;
        self.bytes_carried += got.len() as u64;
        let len = u32::from_be_bytes(got[..4].try_into().expect("4 bytes")) as usize;
        if len != got.len() - 4 {
            return Err(LinkError::Auth.into());
        }
        let rx = self.receivers.get_mut(&(from, to)).expect("channel");
        Ok(rx.open(&got[4..])?)
    }

    fn name(&self) -> &'static str {
        "tcp"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aot_core::crypto::keygen;
    use aot_core::protocol::NodeId;

    #[test]
    fn tcp_carries_large_frames_intact() {
        let a = Endpoint::Client(0);
        let b = Endpoint::Node(NodeId(1));
        let keys = BTreeMap::from([(a, keygen(b"a")), (b, keygen(b"b"))]);
        let mut t = Tcp::new(keys);
        let rows: Vec<_> = (0..20_000)
            .map(|i| aot_core::protocol::BoardEntry {
                tag: aot_core::crypto::Tag([i as u8; 32]),
                ordinal: i,
                published_at_ms: i * 3,
            })
            .collect();
        let f = Frame::Board(rows);
        assert_eq!(t.carry(b, a, f.clone()).unwrap(), f);
        let g = Frame::OtOpen { ticket: 9 };
        assert_eq!(t.carry(a, b, g.clone()).unwrap(), g);
        assert!(t.bytes_carried > 20_000 * 48);
    }
}
