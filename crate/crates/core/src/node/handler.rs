//! Serving peer requests.

use crate::dht::{Contact, NodeId, ProviderRecord};
use crate::exchange::serve_wants;
use crate::naming::NameRecordValidator;
use crate::runtime::{LocalBoxFuture, RequestHandler};
use crate::wire::{Envelope, ErrorCode, Request, Response};

use super::{LedgerState, Node};

impl RequestHandler for Node {
    fn handle(&self, payload: Vec<u8>) -> LocalBoxFuture<Vec<u8>> {
        let node = self.rc();
        Box::pin(async move { node.handle_request(&payload).await.encode() })
    }
}

impl Node {
    pub async fn handle_request(&self, payload: &[u8]) -> Response {
        let envelope = match Envelope::decode(payload) {
            Ok(e) => e,
            Err(e) => {
                return Response::Error {
                    code: ErrorCode::Rejected,
                    message: e.to_string(),
                }
            }
        };
        self.metrics.borrow_mut().requests_served += 1;
        self.observe(envelope.sender.clone());
        self.respond(envelope.sender, envelope.request).await
    }

    fn closer(&self, target: &NodeId) -> Vec<Contact> {
        self.routing.borrow().find_closest(target, self.config.dht.k)
    }

    async fn respond(&self, sender: Contact, request: Request) -> Response {
        let now = self.now_ms();
        match request {
            Request::Ping => Response::Pong { node_id: self.id() },
            Request::FindNode { target } => Response::Nodes {
                closer: self.closer(&target),
            },
            Request::FindProviders { key } => Response::Providers {
                providers: self.providers.borrow().get(&key, now),
                closer: self.closer(&key),
            },
            Request::AddProvider { key, ttl_ms } => {
                // A peer may only announce itself.
                self.providers.borrow_mut().add(ProviderRecord {
                    key,
                    provider: sender,
                    expires_at: now.saturating_add(ttl_ms.min(self.config.dht.record_ttl_ms)),
                });
                Response::Ack
            }
            Request::Store { key, value } => {
                match self.records.borrow_mut().put(key, value, &NameRecordValidator, now) {
                    Ok(()) => Response::Ack,
                    Err(e) => Response::Error {
                        code: ErrorCode::Rejected,
                        message: e.to_string(),
                    },
                }
            }
            Request::Get { key } => Response::Value {
                value: self.records.borrow().get(&key).map(|(v, _)| v),
                closer: self.closer(&key),
            },
            Request::Want { cids } => Response::Blocks {
                items: serve_wants(&sender.id, &cids, &*self.store, &self.peer_ledgers, self.byzantine.get()),
            },
            Request::SubmitEntry { entry } => {
                if !matches!(&*self.ledger.borrow(), LedgerState::Writer(_)) {
                    return Response::Error {
                        code: ErrorCode::NotRegistrar,
                        message: "this node does not mine".into(),
                    };
                }
                match self.append_local(entry).await {
                    Ok(height) => Response::Submitted { height },
                    Err(e) => Response::Error {
                        code: ErrorCode::Ledger,
                        message: e.to_string(),
                    },
                }
            }
            Request::GetBlocks { from_height } => Response::LedgerBlocks {
                blocks: self.serve_ledger_blocks(from_height),
            },
        }
    }
}
