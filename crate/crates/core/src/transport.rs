//! Wire format, channels and communication accounting.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! "FLSI" | version u8 = 1 | type u8 | payload length u64 | payload | crc32(payload) u32
//! ```
//!
//! A parameter payload is a [`ParamBlob`]:
//!
//! ```text
//! part u8 | client u32 | round u32 | count u64 | count x f32
//! ```

use std::io::{ErrorKind, Read, Write};
use std::os::unix::net::UnixStream;
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FLSI";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 14;
pub const CRC_LEN: usize = 4;
pub const FRAME_OVERHEAD: usize = HEADER_LEN + CRC_LEN;
pub const BLOB_HEADER_LEN: usize = 17;
/// Client id used for server-originated blobs.
pub const SERVER: u32 = u32::MAX;
/// Upper bound on a payload a receiver will allocate for.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MsgType {
    ParamUpload = 0x01,
    ParamBroadcast = 0x02,
    GeneratorDelivery = 0x03,
    Ack = 0x04,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => MsgType::ParamUpload,
            0x02 => MsgType::ParamBroadcast,
            0x03 => MsgType::GeneratorDelivery,
            0x04 => MsgType::Ack,
            other => return Err(Error::Protocol(format!("unknown message type {other:#04x}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartId {
    Encoder = 0,
    Head = 1,
    Generator = 2,
    /// Per-parameter aggregation weights; travels with the model but is not
    /// a model part.
    Importance = 3,
}

impl PartId {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => PartId::Encoder,
            1 => PartId::Head,
            2 => PartId::Generator,
            3 => PartId::Importance,
            other => return Err(Error::Protocol(format!("unknown model part {other}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PartId::Encoder => "encoder",
            PartId::Head => "head",
            PartId::Generator => "generator",
            PartId::Importance => "importance",
        }
    }

    pub fn is_model(self) -> bool {
        self != PartId::Importance
    }
}

/// Flattened parameters of one model part as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlob {
    pub part: PartId,
    pub client: u32,
    pub round: u32,
    pub values: Vec<f32>,
}

impl ParamBlob {
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + 4 * self.values.len());
        out.push(self.part as u8);
        out.extend_from_slice(&self.client.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < BLOB_HEADER_LEN {
            return Err(Error::Protocol("parameter payload shorter than its header".into()));
        }
        let part = PartId::from_byte(b[0])?;
        let client = u32::from_le_bytes(b[1..5].try_into().expect("4 bytes"));
        let round = u32::from_le_bytes(b[5..9].try_into().expect("4 bytes"));
        let count = u64::from_le_bytes(b[9..17].try_into().expect("8 bytes"));
        let body = &b[BLOB_HEADER_LEN..];
        if count.checked_mul(4) != Some(body.len() as u64) {
            return Err(Error::Protocol(format!("declared {count} parameters but {} payload bytes", body.len())));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self {
            part,
            client,
            round,
            values,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Packs parameters for the wire. Empty or non-finite input is rejected.
pub fn encode_params(part: PartId, client: u32, round: u32, values: &[f64]) -> Result<ParamBlob> {
    if values.is_empty() {
        return Err(Error::invalid("cannot encode an empty model"));
    }
    let mut out = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let f = v as f32;
        if !v.is_finite() || !f.is_finite() {
            return Err(Error::NonFinite(format!("{} parameter {i}", part.as_str())));
        }
        out.push(f);
    }
    Ok(ParamBlob {
        part,
        client,
        round,
        values: out,
    })
}

/// Rounds through `f32` the same way the wire does.
pub fn wire_round(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v as f32 as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn params(msg_type: MsgType, blob: &ParamBlob) -> Self {
        Self::new(msg_type, blob.to_bytes())
    }

    pub fn ack() -> Self {
        Self::new(MsgType::Ack, Vec::new())
    }

    pub fn blob(&self) -> Result<ParamBlob> {
        if self.msg_type == MsgType::Ack {
            return Err(Error::Protocol("ack frames carry no parameters".into()));
        }
        ParamBlob::from_bytes(&self.payload)
    }

    /// Checks that the payload fits the message type: acks are empty,
    /// uploads come from a client and never carry the generator, broadcasts
    /// come from the server with an encoder or head, and deliveries come
    /// from the server with the generator. The checksum only covers the
    /// payload, so this is what catches a corrupted type byte.
    pub fn check(&self) -> Result<()> {
        if self.msg_type == MsgType::Ack {
            if !self.payload.is_empty() {
                return Err(Error::Protocol("ack frame with a payload".into()));
            }
            return Ok(());
        }
        let b = ParamBlob::from_bytes(&self.payload)?;
        let ok = match self.msg_type {
            MsgType::ParamUpload => b.client != SERVER && b.part != PartId::Generator,
            MsgType::ParamBroadcast => b.client == SERVER && matches!(b.part, PartId::Encoder | PartId::Head),
            MsgType::GeneratorDelivery => b.client == SERVER && b.part == PartId::Generator,
            MsgType::Ack => unreachable!(),
        };
        if !ok {
            return Err(Error::Protocol(format!(
                "{:?} frame cannot carry {} from {}",
                self.msg_type,
                b.part.as_str(),
                if b.client == SERVER { "the server".to_string() } else { format!("client {}", b.client) }
            )));
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_le_bytes());
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        match read_frame(&mut cursor)? {
            Some(f) if cursor.is_empty() => Ok(f),
            Some(_) => Err(Error::Protocol(format!("{} trailing bytes after frame", cursor.len()))),
            None => Err(Error::Protocol("empty input".into())),
        }
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, u64)> {
    if h[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &h[..4])));
    }
    if h[4] != VERSION {
        return Err(Error::Protocol(format!("unsupported version {}", h[4])));
    }
    let t = MsgType::from_byte(h[5])?;
    let len = u64::from_le_bytes(h[6..14].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload length {len} exceeds limit")));
    }
    Ok((t, len))
}

/// Reads one frame. `Ok(None)` means the stream ended cleanly on a frame
/// boundary; ending anywhere else is an error.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream truncated inside frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (msg_type, len) = parse_header(&header)?;
    let mut payload = Vec::new();
    let read = r.take(len).read_to_end(&mut payload)?;
    if read as u64 != len {
        return Err(Error::Protocol(format!("stream truncated: payload {read} of {len} bytes")));
    }
    let mut crc = [0u8; CRC_LEN];
    r.read_exact(&mut crc)
        .map_err(|_| Error::Protocol("stream truncated before checksum".into()))?;
    let expected = u32::from_le_bytes(crc);
    let actual = crc32fast::hash(&payload);
    if expected != actual {
        return Err(Error::Crc { expected, actual });
    }
    let frame = Frame { msg_type, payload };
    frame.check()?;
    Ok(Some(frame))
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Memory,
    Socket,
}

impl FromStr for TransportKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "memory" => Ok(TransportKind::Memory),
            "socket" => Ok(TransportKind::Socket),
            other => Err(Error::Config(format!("unknown transport '{other}' (memory|socket)"))),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::Memory => "memory",
            TransportKind::Socket => "socket",
        })
    }
}

/// Sending end. Cloneable, so several producers may share one channel.
#[derive(Clone, Debug)]
pub enum FrameSender {
    Memory(mpsc::Sender<Vec<u8>>),
    Socket(Arc<Mutex<UnixStream>>),
}

/// Receiving end, owned by a single consumer.
#[derive(Debug)]
pub enum FrameReceiver {
    Memory(mpsc::Receiver<Vec<u8>>),
    Socket(UnixStream),
}

/// A one-way channel. Both kinds carry encoded bytes, so framing and
/// checksums are exercised either way.
pub fn channel(kind: TransportKind) -> Result<(FrameSender, FrameReceiver)> {
    match kind {
        TransportKind::Memory => {
            let (tx, rx) = mpsc::channel();
            Ok((FrameSender::Memory(tx), FrameReceiver::Memory(rx)))
        }
        TransportKind::Socket => {
            let (a, b) = UnixStream::pair()?;
            b.shutdown(std::net::Shutdown::Write)?;
            Ok((FrameSender::Socket(Arc::new(Mutex::new(a))), FrameReceiver::Socket(b)))
        }
    }
}

impl FrameSender {
    pub fn send_frame(&self, frame: &Frame) -> Result<()> {
        self.send_raw(frame.encode())
    }

    /// Sends bytes as-is; lets tests inject damaged frames.
    pub fn send_raw(&self, bytes: Vec<u8>) -> Result<()> {
        match self {
            FrameSender::Memory(tx) => tx.send(bytes).map_err(|_| Error::Protocol("channel closed by receiver".into())),
            FrameSender::Socket(s) => {
                let mut s = s.lock().map_err(|_| Error::Protocol("socket lock poisoned".into()))?;
                s.write_all(&bytes)?;
                Ok(())
            }
        }
    }
}

impl FrameReceiver {
    /// Blocks for the next frame; `Ok(None)` once every sender is gone.
    pub fn recv_frame(&mut self) -> Result<Option<Frame>> {
        match self {
            FrameReceiver::Memory(rx) => match rx.recv() {
                Ok(bytes) => Frame::decode(&bytes).map(Some),
                Err(_) => Ok(None),
            },
            FrameReceiver::Socket(s) => read_frame(s),
        }
    }

    /// Like [`recv_frame`](Self::recv_frame) but a closed channel is an error.
    pub fn expect_frame(&mut self) -> Result<Frame> {
        self.recv_frame()?.ok_or_else(|| Error::Protocol("channel closed unexpectedly".into()))
    }
}

/// Sends `frame` and receives it at the other end. The send runs on its own
/// thread so a socket buffer smaller than the frame cannot deadlock.
pub fn relay(tx: &FrameSender, rx: &mut FrameReceiver, frame: &Frame) -> Result<Frame> {
    std::thread::scope(|s| {
        let h = s.spawn(|| tx.send_frame(frame));
        let got = rx.expect_frame();
        h.join().map_err(|_| Error::Protocol("sender thread panicked".into()))??;
        got
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ClientToServer => "client_to_server",
            Direction::ServerToClient => "server_to_client",
        }
    }
}

/// One recorded message. Round 0 holds everything sent before the first
/// communication round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommsEntry {
    pub round: u32,
    pub direction: Direction,
    pub client: u32,
    pub part: PartId,
    pub params: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommsLedger {
    entries: Vec<CommsEntry>,
}

impl CommsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[CommsEntry] {
        &self.entries
    }

    /// `client` is the non-server endpoint of the transfer.
    pub fn record_transfer(&mut self, round: u32, direction: Direction, client: u32, blob: &ParamBlob) {
        let params = blob.count() as u64;
        self.entries.push(CommsEntry {
            round,
            direction,
            client,
            part: blob.part,
            params,
            bytes: (FRAME_OVERHEAD + BLOB_HEADER_LEN) as u64 + 4 * params,
        });
    }

    /// Model parameters moved; importance vectors are excluded.
    pub fn total_params(&self) -> u64 {
        self.model_entries().map(|e| e.params).sum()
    }

    pub fn params_in(&self, direction: Direction) -> u64 {
        self.model_entries().filter(|e| e.direction == direction).map(|e| e.params).sum()
    }

    pub fn params_for_client(&self, client: u32) -> u64 {
        self.model_entries().filter(|e| e.client == client).map(|e| e.params).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    /// Importance-vector scalars moved alongside the model.
    pub fn auxiliary_params(&self) -> u64 {
        self.entries.iter().filter(|e| !e.part.is_model()).map(|e| e.params).sum()
    }

    /// Cumulative model-parameter count at the end of each round `0..=last`.
    pub fn cumulative_by_round(&self) -> Vec<u64> {
        let last = self.entries.iter().map(|e| e.round).max().unwrap_or(0) as usize;
        let mut per = vec![0u64; last + 1];
        for e in self.model_entries() {
            per[e.round as usize] += e.params;
        }
        per.iter()
            .scan(0u64, |acc, x| {
                *acc += x;
                Some(*acc)
            })
            .collect()
    }

    fn model_entries(&self) -> impl Iterator<Item = &CommsEntry> {
        self.entries.iter().filter(|e| e.part.is_model())
    }

    /// Rows of `round,direction,client,part,params,bytes`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,direction,client,part,params,bytes\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.round,
                e.direction.as_str(),
                e.client,
                e.part.as_str(),
                e.params,
                e.bytes
            ));
        }
        s
    }
}

/// Per-client parameter count of the full protocol over `rounds` rounds.
pub fn closed_form_per_client(head: u64, generator: u64, encoder: u64, rounds: u64) -> u64 {
    head + generator + rounds * 2 * (encoder + head)
}
