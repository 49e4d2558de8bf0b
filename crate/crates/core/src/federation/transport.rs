//! Byte transports between parties.
//!
//! Both transports carry the same self-delimiting frames. The in-process one
//! uses one ordered queue per directed pair; the socket one uses a TCP
//! connection from every passive party to the label party.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{decode_message, encode_message, read_frame, Header, Message, MsgType, Phase, Precision, WireError};
use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("socket: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection from unknown party {0} rejected")]
    UnknownParty(u16),
    #[error("party {0} connected twice")]
    DuplicateParty(u16),
    #[error("expected a hello frame, got {0:?}")]
    NotHello(MsgType),
    #[error("no route from party {from} to party {to}")]
    NoRoute { from: u16, to: u16 },
    #[error("party ids must be unique and differ from the label party")]
    BadIds,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    #[default]
    InProcess,
    Socket,
}

fn hello(id: u16) -> Message {
    Message::new(
        Header {
            precision: Precision::F32,
            msg_type: MsgType::Ctrl,
            phase: Phase::WUpdate,
            sender: id,
            round: 0,
        },
        &Tensor::vector(Vec::new()),
    )
}

/// Label-party side of the socket transport: a loopback listener that
/// admits each expected passive party once.
pub struct SocketHub {
    listener: TcpListener,
    expected: BTreeSet<u16>,
    conns: BTreeMap<u16, TcpStream>,
}

impl SocketHub {
    pub fn bind(expected: &[u16]) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        Ok(Self {
            listener,
            expected: expected.iter().copied().collect(),
            conns: BTreeMap::new(),
        })
    }

    pub fn addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts one connection and reads its hello. Unknown or repeated ids
    /// are refused and the connection closed.
    pub fn accept_one(&mut self) -> Result<u16, TransportError> {
        let (mut stream, _) = self.listener.accept()?;
        stream.set_nodelay(true)?;
        let m = decode_message(&read_frame(&mut stream)?)?;
        if m.header.msg_type != MsgType::Ctrl {
            return Err(TransportError::NotHello(m.header.msg_type));
        }
        let id = m.header.sender;
        if !self.expected.contains(&id) {
            return Err(TransportError::UnknownParty(id));
        }
        if self.conns.contains_key(&id) {
            return Err(TransportError::DuplicateParty(id));
        }
        self.conns.insert(id, stream);
        Ok(id)
    }

    pub fn connected(&self) -> impl Iterator<Item = u16> + '_ {
        self.conns.keys().copied()
    }
}

/// Connects a passive party to the hub and announces its id.
pub fn dial(addr: SocketAddr, id: u16) -> Result<TcpStream, TransportError> {
    let mut s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    s.write_all(&encode_message(&hello(id))?)?;
    Ok(s)
}

pub enum Transport {
    InProcess(BTreeMap<(u16, u16), VecDeque<Vec<u8>>>),
    Socket {
        label: u16,
        /// Label-party ends, keyed by passive party.
        hub: BTreeMap<u16, TcpStream>,
        /// Passive-party ends.
        parties: BTreeMap<u16, TcpStream>,
    },
}

impl Transport {
    pub fn connect(mode: TransportMode, label: u16, passive: &[u16]) -> Result<Self, TransportError> {
        let ids: BTreeSet<u16> = passive.iter().copied().collect();
        if ids.len() != passive.len() || ids.contains(&label) {
            return Err(TransportError::BadIds);
        }
        match mode {
            TransportMode::InProcess => {
                let mut queues = BTreeMap::new();
                for &p in passive {
                    queues.insert((p, label), VecDeque::new());
                    queues.insert((label, p), VecDeque::new());
                }
                Ok(Transport::InProcess(queues))
            }
            TransportMode::Socket => {
                let mut hub = SocketHub::bind(passive)?;
                let addr = hub.addr()?;
                let mut parties = BTreeMap::new();
                for &p in passive {
                    parties.insert(p, dial(addr, p)?);
                    hub.accept_one()?;
                }
                Ok(Transport::Socket {
                    label,
                    hub: hub.conns,
                    parties,
                })
            }
        }
    }

    /// Sends one frame from `from` to `to` and returns the bytes as read by
    /// the receiver.
    pub fn deliver(&mut self, from: u16, to: u16, bytes: &[u8]) -> Result<Vec<u8>, TransportError> {
        match self {
            Transport::InProcess(queues) => {
                let q = queues
                    .get_mut(&(from, to))
                    .ok_or(TransportError::NoRoute { from, to })?;
                q.push_back(bytes.to_vec());
                Ok(q.pop_front().expect("just pushed"))
            }
            Transport::Socket { label, hub, parties } => {
                let (writer, reader) = if to == *label {
                    (parties.get(&from), hub.get(&from))
                } else if from == *label {
                    (hub.get(&to), parties.get(&to))
                } else {
                    (None, None)
                };
                let (Some(mut writer), Some(mut reader)) = (writer, reader) else {
                    return Err(TransportError::NoRoute { from, to });
                };
                std::thread::scope(|s| {
                    let w = s.spawn(move || writer.write_all(bytes).and_then(|_| writer.flush()));
                    let frame = read_frame(&mut reader);
                    w.join().expect("writer thread")?;
                    Ok(frame?)
                })
            }
        }
    }
}
