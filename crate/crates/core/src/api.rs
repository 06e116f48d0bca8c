//! Local client API: one JSON object per line in each direction.
//!
//! Requests carry an `op` field, responses a `result` field. Binary payloads
//! travel base64-encoded.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::cid::Cid;
use crate::ledger::{ExportRow, Violation};
use crate::node::{NodeError, Role, VerifyReport};

pub const DEFAULT_API_PORT: u16 = 5101;
pub const DEFAULT_PEER_PORT: u16 = 4001;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ApiRequest {
    Add {
        /// Base64 file content.
        data: String,
        /// Original file name, used for type detection only.
        #[serde(default)]
        name: Option<String>,
    },
    Get {
        cid: Cid,
    },
    Verify {
        cid: Cid,
    },
    Publish {
        cid: Cid,
    },
    Resolve {
        /// Hex name key.
        key: String,
    },
    LedgerExport,
    LedgerValidate,
    Info,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    BadRequest,
    NoPeers,
    Unretrievable,
    NotFound,
    Expired,
    BadSignature,
    LedgerInvalid,
    Registrar,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ApiResponse {
    Added {
        cid: Cid,
        size_bytes: u64,
        height: u64,
    },
    Got {
        /// Base64 file content.
        data: String,
        report: VerifyReport,
    },
    Verified {
        report: VerifyReport,
    },
    Published {
        name_key: String,
        cid: Cid,
        sequence: u64,
        validity: u64,
    },
    Resolved {
        name_key: String,
        cid: Cid,
        sequence: u64,
    },
    LedgerRows {
        rows: Vec<ExportRow>,
    },
    LedgerValidity {
        valid: bool,
        blocks: u64,
        violation: Option<Violation>,
        detail: String,
    },
    Info {
        node_id: String,
        fingerprint: String,
        peer_addr: String,
        role: Role,
        chain_len: u64,
        routing_contacts: usize,
    },
    Error {
        kind: ErrorKind,
        message: String,
    },
}

impl ApiResponse {
    pub fn error(kind: ErrorKind, message: impl Into<String>) -> Self {
        ApiResponse::Error {
            kind,
            message: message.into(),
        }
    }

    pub fn from_node_error(e: &NodeError) -> Self {
        use crate::dht::DhtError;
        use crate::naming::NameError;
        let kind = match e {
            NodeError::Unretrievable(_) => ErrorKind::Unretrievable,
            NodeError::Dht(DhtError::NoPeers) => ErrorKind::NoPeers,
            NodeError::Dht(DhtError::NotFound) | NodeError::Name(NameError::NotFound) => ErrorKind::NotFound,
            NodeError::Name(NameError::Expired(_)) => ErrorKind::Expired,
            NodeError::Name(NameError::BadSignature) => ErrorKind::BadSignature,
            NodeError::LedgerValidationFailed(_) => ErrorKind::LedgerInvalid,
            NodeError::NoRegistrar | NodeError::Registrar(_) | NodeError::RegistrarUnreachable(_) => {
                ErrorKind::Registrar
            }
            NodeError::SameContent(_) | NodeError::UnknownRoot(_) => ErrorKind::BadRequest,
            _ => ErrorKind::Internal,
        };
        Self::error(kind, e.to_string())
    }
}

pub fn encode_data(data: &[u8]) -> String {
    STANDARD.encode(data)
}

pub fn decode_data(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    STANDARD.decode(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_shape() {
        let cid = Cid::of_bytes(b"");
        let json = serde_json::to_string(&ApiRequest::Get { cid }).unwrap();
        assert_eq!(json, r#"{"op":"get","cid":"QmdfTbBqBPQ7VNxZEYEj14VmRuZBkqFbiwReogJgS1zR1n"}"#);
        let parsed: ApiRequest = serde_json::from_str(r#"{"op":"ledger_validate"}"#).unwrap();
        assert_eq!(parsed, ApiRequest::LedgerValidate);
        let add: ApiRequest = serde_json::from_str(r#"{"op":"add","data":"aGk="}"#).unwrap();
        assert_eq!(add, ApiRequest::Add { data: "aGk=".into(), name: None });
    }

    #[test]
    fn error_shape() {
        let json = serde_json::to_string(&ApiResponse::error(ErrorKind::NoPeers, "x")).unwrap();
        assert_eq!(json, r#"{"result":"error","kind":"no_peers","message":"x"}"#);
    }

    #[test]
    fn data_round_trip() {
        assert_eq!(decode_data(&encode_data(b"\x00\xffabc")).unwrap(), b"\x00\xffabc");
    }
}
