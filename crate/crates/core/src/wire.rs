//! Peer protocol messages and framing.
//!
//! Every message travels as `len:u32 ‖ payload`. A request payload is
//! `tag:u8 ‖ sender contact ‖ body`; a response payload is `tag:u8 ‖ body`.
//! Contacts are `node_id:32 ‖ addr_len:u16 ‖ addr`. Lists carry a `u32`
//! count, byte strings a `u32` length, CIDs their 34-byte binary form.
//! The same bytes cross real TCP and the simulator.

use bytes::Bytes;
use thiserror::Error;

use crate::cid::Cid;
use crate::codec::{DecodeError, Reader, Writer};
use crate::dht::{Contact, NodeId, ProviderRecord};
use crate::ledger::{LedgerBlock, MetadataEntry};

pub const MAX_FRAME_LEN: usize = 64 << 20;

mod tag {
    pub const PING: u8 = 0x01;
    pub const FIND_NODE: u8 = 0x02;
    pub const FIND_PROVIDERS: u8 = 0x03;
    pub const ADD_PROVIDER: u8 = 0x04;
    pub const STORE: u8 = 0x05;
    pub const GET: u8 = 0x06;
    pub const WANT: u8 = 0x10;
    pub const SUBMIT_ENTRY: u8 = 0x20;
    pub const GET_BLOCKS: u8 = 0x21;

    pub const PONG: u8 = 0x81;
    pub const NODES: u8 = 0x82;
    pub const PROVIDERS: u8 = 0x83;
    pub const ACK: u8 = 0x84;
    pub const VALUE: u8 = 0x85;
    pub const BLOCKS: u8 = 0x90;
    pub const SUBMITTED: u8 = 0xA0;
    pub const LEDGER_BLOCKS: u8 = 0xA1;
    pub const ERROR: u8 = 0xFF;

    pub const ITEM_BLOCK: u8 = 0x00;
    pub const ITEM_DONT_HAVE: u8 = 0x01;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Ping,
    FindNode { target: NodeId },
    FindProviders { key: NodeId },
    /// The provider is the request's sender.
    AddProvider { key: NodeId, ttl_ms: u64 },
    Store { key: NodeId, value: Bytes },
    Get { key: NodeId },
    Want { cids: Vec<Cid> },
    SubmitEntry { entry: MetadataEntry },
    GetBlocks { from_height: u64 },
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::Ping => "PING",
            Request::FindNode { .. } => "FIND_NODE",
            Request::FindProviders { .. } => "FIND_PROVIDERS",
            Request::AddProvider { .. } => "ADD_PROVIDER",
            Request::Store { .. } => "STORE",
            Request::Get { .. } => "GET",
            Request::Want { .. } => "WANT",
            Request::SubmitEntry { .. } => "SUBMIT_ENTRY",
            Request::GetBlocks { .. } => "GET_BLOCKS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub sender: Contact,
    pub request: Request,
}

/// One answer inside a BLOCKS response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WantReply {
    Block { cid: Cid, data: Bytes },
    DontHave { cid: Cid },
}

impl WantReply {
    pub fn cid(&self) -> &Cid {
        match self {
            WantReply::Block { cid, .. } | WantReply::DontHave { cid } => cid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Rejected = 1,
    NotRegistrar = 2,
    Ledger = 3,
    Internal = 4,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => ErrorCode::Rejected,
            2 => ErrorCode::NotRegistrar,
            3 => ErrorCode::Ledger,
            _ => ErrorCode::Internal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    /// Carries the responder's id so a peer known only by address can be
    /// added to the routing table.
    Pong { node_id: NodeId },
    Nodes { closer: Vec<Contact> },
    Providers { providers: Vec<ProviderRecord>, closer: Vec<Contact> },
    Ack,
    Value { value: Option<Bytes>, closer: Vec<Contact> },
    Blocks { items: Vec<WantReply> },
    Submitted { height: u64 },
    LedgerBlocks { blocks: Vec<LedgerBlock> },
    Error { code: ErrorCode, message: String },
}

impl Response {
    pub fn name(&self) -> &'static str {
        match self {
            Response::Pong { .. } => "PONG",
            Response::Nodes { .. } => "NODES",
            Response::Providers { .. } => "PROVIDERS",
            Response::Ack => "ACK",
            Response::Value { .. } => "VALUE",
            Response::Blocks { .. } => "BLOCKS",
            Response::Submitted { .. } => "SUBMITTED",
            Response::LedgerBlocks { .. } => "LEDGER_BLOCKS",
            Response::Error { .. } => "ERROR",
        }
    }
}

fn put_contact(w: &mut Writer, c: &Contact) {
    w.bytes(c.id.as_bytes());
    w.short_str(&c.addr);
}

fn get_contact(r: &mut Reader<'_>) -> Result<Contact, DecodeError> {
    Ok(Contact {
        id: NodeId(r.array()?),
        addr: r.short_str()?,
    })
}

fn put_contacts(w: &mut Writer, cs: &[Contact]) {
    w.u32(cs.len() as u32);
    for c in cs {
        put_contact(w, c);
    }
}

fn get_contacts(r: &mut Reader<'_>) -> Result<Vec<Contact>, DecodeError> {
    let n = r.count(34)?;
    (0..n).map(|_| get_contact(r)).collect()
}

fn ledger_err(e: crate::ledger::LedgerError) -> DecodeError {
    DecodeError::Invalid(e.to_string())
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let t = match &self.request {
            Request::Ping => tag::PING,
            Request::FindNode { .. } => tag::FIND_NODE,
            Request::FindProviders { .. } => tag::FIND_PROVIDERS,
            Request::AddProvider { .. } => tag::ADD_PROVIDER,
            Request::Store { .. } => tag::STORE,
            Request::Get { .. } => tag::GET,
            Request::Want { .. } => tag::WANT,
            Request::SubmitEntry { .. } => tag::SUBMIT_ENTRY,
            Request::GetBlocks { .. } => tag::GET_BLOCKS,
        };
        w.u8(t);
        put_contact(&mut w, &self.sender);
        match &self.request {
            Request::Ping => {}
            Request::FindNode { target: key }
            | Request::FindProviders { key }
            | Request::Get { key } => w.bytes(key.as_bytes()),
            Request::AddProvider { key, ttl_ms } => {
                w.bytes(key.as_bytes());
                w.u64(*ttl_ms);
            }
            Request::Store { key, value } => {
                w.bytes(key.as_bytes());
                w.blob(value);
            }
            Request::Want { cids } => {
                w.u32(cids.len() as u32);
                for c in cids {
                    w.cid(c);
                }
            }
            Request::SubmitEntry { entry } => w.blob(&entry.encode()),
            Request::GetBlocks { from_height } => w.u64(*from_height),
        }
        w.into_inner()
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(payload);
        let t = r.u8()?;
        let sender = get_contact(&mut r)?;
        let request = match t {
            tag::PING => Request::Ping,
            tag::FIND_NODE => Request::FindNode { target: NodeId(r.array()?) },
            tag::FIND_PROVIDERS => Request::FindProviders { key: NodeId(r.array()?) },
            tag::ADD_PROVIDER => Request::AddProvider {
                key: NodeId(r.array()?),
                ttl_ms: r.u64()?,
            },
            tag::STORE => Request::Store {
                key: NodeId(r.array()?),
                value: Bytes::copy_from_slice(r.blob()?),
            },
            tag::GET => Request::Get { key: NodeId(r.array()?) },
            tag::WANT => {
                let n = r.count(34)?;
                Request::Want {
                    cids: (0..n).map(|_| r.cid()).collect::<Result<_, _>>()?,
                }
            }
            tag::SUBMIT_ENTRY => Request::SubmitEntry {
                entry: MetadataEntry::decode(r.blob()?).map_err(ledger_err)?,
            },
            tag::GET_BLOCKS => Request::GetBlocks { from_height: r.u64()? },
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(Self { sender, request })
    }
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        match self {
            Response::Pong { node_id } => {
                w.u8(tag::PONG);
                w.bytes(node_id.as_bytes());
            }
            Response::Nodes { closer } => {
                w.u8(tag::NODES);
                put_contacts(&mut w, closer);
            }
            Response::Providers { providers, closer } => {
                w.u8(tag::PROVIDERS);
                w.u32(providers.len() as u32);
                for p in providers {
                    w.bytes(p.key.as_bytes());
                    put_contact(&mut w, &p.provider);
                    w.u64(p.expires_at);
                }
                put_contacts(&mut w, closer);
            }
            Response::Ack => w.u8(tag::ACK),
            Response::Value { value, closer } => {
                w.u8(tag::VALUE);
                match value {
                    Some(v) => {
                        w.u8(1);
                        w.blob(v);
                    }
                    None => w.u8(0),
                }
                put_contacts(&mut w, closer);
            }
            Response::Blocks { items } => {
                w.u8(tag::BLOCKS);
                w.u32(items.len() as u32);
                for item in items {
                    match item {
                        WantReply::Block { cid, data } => {
                            w.u8(tag::ITEM_BLOCK);
                            w.cid(cid);
                            w.blob(data);
                        }
                        WantReply::DontHave { cid } => {
                            w.u8(tag::ITEM_DONT_HAVE);
                            w.cid(cid);
                        }
                    }
                }
            }
            Response::Submitted { height } => {
                w.u8(tag::SUBMITTED);
                w.u64(*height);
            }
            Response::LedgerBlocks { blocks } => {
                w.u8(tag::LEDGER_BLOCKS);
                w.u32(blocks.len() as u32);
                for b in blocks {
                    w.blob(&b.encode());
                }
            }
            Response::Error { code, message } => {
                w.u8(tag::ERROR);
                w.u8(*code as u8);
                let mut msg = message.as_str();
                while msg.len() > u16::MAX as usize {
                    msg = &msg[..msg.floor_char_boundary(u16::MAX as usize)];
                }
                w.short_str(msg);
            }
        }
        w.into_inner()
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(payload);
        let resp = match r.u8()? {
            tag::PONG => Response::Pong { node_id: NodeId(r.array()?) },
            tag::NODES => Response::Nodes { closer: get_contacts(&mut r)? },
            tag::PROVIDERS => {
                let n = r.count(32 + 34 + 8)?;
                let providers = (0..n)
                    .map(|_| {
                        Ok(ProviderRecord {
                            key: NodeId(r.array()?),
                            provider: get_contact(&mut r)?,
                            expires_at: r.u64()?,
                        })
                    })
                    .collect::<Result<_, DecodeError>>()?;
                Response::Providers {
                    providers,
                    closer: get_contacts(&mut r)?,
                }
            }
            tag::ACK => Response::Ack,
            tag::VALUE => {
                let value = match r.u8()? {
                    0 => None,
                    1 => Some(Bytes::copy_from_slice(r.blob()?)),
                    f => return Err(DecodeError::Invalid(format!("value flag {f}")).into()),
                };
                Response::Value {
                    value,
                    closer: get_contacts(&mut r)?,
                }
            }
            tag::BLOCKS => {
                let n = r.count(35)?;
                let items = (0..n)
                    .map(|_| match r.u8()? {
                        tag::ITEM_BLOCK => Ok(WantReply::Block {
                            cid: r.cid()?,
                            data: Bytes::copy_from_slice(r.blob()?),
                        }),
                        tag::ITEM_DONT_HAVE => Ok(WantReply::DontHave { cid: r.cid()? }),
                        f => Err(DecodeError::Invalid(format!("block item tag {f}"))),
                    })
                    .collect::<Result<_, _>>()?;
                Response::Blocks { items }
            }
            tag::SUBMITTED => Response::Submitted { height: r.u64()? },
            tag::LEDGER_BLOCKS => {
                let n = r.count(4)?;
                let blocks = (0..n)
                    .map(|_| LedgerBlock::decode(r.blob()?).map_err(ledger_err))
                    .collect::<Result<_, _>>()?;
                Response::LedgerBlocks { blocks }
            }
            tag::ERROR => Response::Error {
                code: ErrorCode::from_u8(r.u8()?),
                message: r.short_str()?,
            },
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(resp)
    }
}

/// Prefixes `payload` with its `u32` length.
pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits one frame off the front of `buf`. `Ok(None)` if incomplete.
pub fn unframe(buf: &[u8]) -> Result<Option<(&[u8], usize)>, WireError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    Ok(Some((&buf[4..4 + len], 4 + len)))
}
