//! TCP transport between worker processes.
//!
//! The coordinator (rank 0) listens on an ephemeral port and spawns the
//! workers with their rank, world size and the coordinator's address. Each
//! worker opens a listener of its own before saying hello, so pairwise
//! neighbour links can be established without ordering hazards:
//!
//! 1. worker r connects to the coordinator and reports its listener port;
//! 2. the coordinator replies to every r >= 2 with the port of r - 1;
//! 3. worker r (r >= 2) connects to r - 1, whose listener accepts exactly
//!    one inbound link (its upper neighbour).
//!
//! The rank0-rank1 pair reuses the coordinator link. This yields exactly
//! the edges the slab topology needs: rank 0 to everyone (control,
//! scatter/gather, reductions) plus consecutive pairs (halos).

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::Duration;

use super::{CommError, Message, MsgHeader, Transport};

const TAG_HELLO: u32 = 90;
const TAG_PEER: u32 = 91;

/// TCP-backed [`Transport`]; one stream per connected peer rank.
pub struct SocketTransport {
    rank: usize,
    size: usize,
    timeout: Duration,
    streams: Vec<Option<TcpStream>>,
}

fn io_to_comm(e: std::io::Error, timeout: Duration, from: usize) -> CommError {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
            CommError::Timeout(timeout, from)
        }
        std::io::ErrorKind::UnexpectedEof => CommError::Disconnected(from),
        _ => CommError::Io(e),
    }
}

/// `write_all` that never abandons a message part-way: a timeout before the
/// first byte surfaces as `TimedOut`; after that the receiver is owed the
/// rest, so timeouts keep pushing until the kernel accepts it.
fn write_full(stream: &mut TcpStream, buf: &[u8], committed: bool) -> Result<(), std::io::Error> {
    let mut at = 0;
    while at < buf.len() {
        match stream.write(&buf[at..]) {
            Ok(0) => return Err(std::io::ErrorKind::WriteZero.into()),
            Ok(n) => at += n,
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                if at == 0 && !committed {
                    return Err(e);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn write_message(stream: &mut TcpStream, msg: &Message) -> Result<(), std::io::Error> {
    write_full(stream, &msg.header.to_bytes(), false)?;
    let mut bytes = Vec::with_capacity(msg.payload.len() * 8);
    for v in &msg.payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_full(stream, &bytes, true)
}

/// `read_exact` that keeps the stream consistent across read timeouts: a
/// timeout with no bytes consumed yet surfaces as `TimedOut` and leaves the
/// stream clean for a retry; once any byte of a message has arrived the
/// sender is committed, so timeouts mid-message keep reading.
fn read_full(
    stream: &mut TcpStream,
    buf: &mut [u8],
    committed: bool,
) -> Result<(), std::io::Error> {
    let mut at = 0;
    while at < buf.len() {
        match stream.read(&mut buf[at..]) {
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => at += n,
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                if at == 0 && !committed {
                    return Err(e);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn read_message(stream: &mut TcpStream) -> Result<Message, std::io::Error> {
    let mut hdr = [0u8; 16];
    read_full(stream, &mut hdr, false)?;
    let header = MsgHeader::from_bytes(&hdr);
    let count = header.count as usize;
    let mut bytes = vec![0u8; count * 8];
    read_full(stream, &mut bytes, true)?;
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Message { header, payload })
}

impl SocketTransport {
    fn with_streams(
        rank: usize,
        size: usize,
        timeout: Duration,
        streams: Vec<Option<TcpStream>>,
    ) -> Self {
        Self {
            rank,
            size,
            timeout,
            streams,
        }
    }

    fn stream(&mut self, peer: usize) -> Result<&mut TcpStream, CommError> {
        self.streams[peer]
            .as_mut()
            .ok_or_else(|| CommError::Protocol(format!("no link to rank {peer}")))
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> usize {
        self.rank
    }
    fn size(&self) -> usize {
        self.size
    }
    fn send(&mut self, to: usize, msg: Message) -> Result<(), CommError> {
        let timeout = self.timeout;
        let stream = self.stream(to)?;
        write_message(stream, &msg).map_err(|e| io_to_comm(e, timeout, to))
    }
    fn recv(&mut self, from: usize) -> Result<Message, CommError> {
        let timeout = self.timeout;
        let stream = self.stream(from)?;
        read_message(stream).map_err(|e| io_to_comm(e, timeout, from))
    }
}

fn configure(stream: &TcpStream, timeout: Duration) -> Result<(), CommError> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    Ok(())
}

/// Opens the coordinator's listener. Spawn the workers with the returned
/// address, then call [`coordinator_accept`].
pub fn coordinator_listen() -> Result<(TcpListener, SocketAddr), CommError> {
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}

/// Accepts the `p - 1` workers, collects their listener ports and tells
/// each worker where its lower neighbour listens.
pub fn coordinator_accept(
    listener: &TcpListener,
    p: usize,
    timeout: Duration,
) -> Result<SocketTransport, CommError> {
    let mut streams: Vec<Option<TcpStream>> = (0..p).map(|_| None).collect();
    let mut ports = vec![0u16; p];
    for _ in 1..p {
        let (mut stream, _) = listener.accept()?;
        configure(&stream, timeout)?;
        let hello = read_message(&mut stream).map_err(|e| io_to_comm(e, timeout, usize::MAX))?;
        if hello.header.species != TAG_HELLO {
            return Err(CommError::Protocol(format!(
                "expected hello, got tag {}",
                hello.header.species
            )));
        }
        let rank = hello.header.plane as usize;
        if rank == 0 || rank >= p || streams[rank].is_some() {
            return Err(CommError::Protocol(format!(
                "bad or duplicate hello from rank {rank}"
            )));
        }
        ports[rank] = hello.payload[0] as u16;
        streams[rank] = Some(stream);
    }
    for r in 2..p {
        let peer_port = ports[r - 1];
        let msg = Message::new(TAG_PEER, (r - 1) as u32, vec![f64::from(peer_port)]);
        let stream = streams[r].as_mut().unwrap();
        write_message(stream, &msg).map_err(|e| io_to_comm(e, timeout, r))?;
    }
    Ok(SocketTransport::with_streams(0, p, timeout, streams))
}

/// Worker-side handshake; blocks until all links this rank needs exist.
pub fn worker_connect(
    coordinator: SocketAddr,
    rank: usize,
    p: usize,
    timeout: Duration,
) -> Result<SocketTransport, CommError> {
    assert!(rank >= 1 && rank < p);
    // Listener for the upper neighbour, opened before hello so the
    // neighbour's connect can never race ahead of it.
    let expects_inbound = rank + 1 < p;
    let listener = if expects_inbound {
        Some(TcpListener::bind(("127.0.0.1", 0))?)
    } else {
        None
    };
    let my_port = listener
        .as_ref()
        .map(|l| l.local_addr())
        .transpose()?
        .map_or(0, |a| a.port());

    let mut coord = TcpStream::connect(coordinator)?;
    configure(&coord, timeout)?;
    write_message(
        &mut coord,
        &Message::new(TAG_HELLO, rank as u32, vec![f64::from(my_port)]),
    )
    .map_err(|e| io_to_comm(e, timeout, 0))?;

    let mut streams: Vec<Option<TcpStream>> = (0..p).map(|_| None).collect();

    // Link to the lower neighbour: rank 1 reuses the coordinator stream,
    // everyone else dials the port the coordinator relays.
    if rank >= 2 {
        let peer = read_message(&mut coord).map_err(|e| io_to_comm(e, timeout, 0))?;
        if peer.header.species != TAG_PEER {
            return Err(CommError::Protocol(format!(
                "expected peer info, got tag {}",
                peer.header.species
            )));
        }
        let port = peer.payload[0] as u16;
        let lower = TcpStream::connect(("127.0.0.1", port))?;
        configure(&lower, timeout)?;
        let mut lower = lower;
        write_message(&mut lower, &Message::new(TAG_HELLO, rank as u32, vec![]))
            .map_err(|e| io_to_comm(e, timeout, rank - 1))?;
        streams[rank - 1] = Some(lower);
    }
    streams[0] = Some(coord);

    if let Some(listener) = listener {
        let (mut upper, _) = listener.accept()?;
        configure(&upper, timeout)?;
        let hello = read_message(&mut upper).map_err(|e| io_to_comm(e, timeout, rank + 1))?;
        if hello.header.species != TAG_HELLO || hello.header.plane as usize != rank + 1 {
            return Err(CommError::Protocol(format!(
                "unexpected inbound link from rank {}",
                hello.header.plane
            )));
        }
        streams[rank + 1] = Some(upper);
    }

    Ok(SocketTransport::with_streams(rank, p, timeout, streams))
}
