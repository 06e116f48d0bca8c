use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;

use cafs::api::{ApiRequest, ApiResponse};

#[derive(Debug)]
pub enum ClientError {
    /// Could not connect, or the connection broke.
    Unreachable(io::Error),
    /// The daemon answered with something that is not a response.
    Protocol(String),
}

/// Blocking client for the daemon's line-delimited JSON API.
pub struct Client {
    addr: String,
}

impl Client {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into() }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn call(&self, request: &ApiRequest) -> Result<ApiResponse, ClientError> {
        let mut stream = TcpStream::connect(&self.addr).map_err(ClientError::Unreachable)?;
        let mut line = serde_json::to_string(request).map_err(|e| ClientError::Protocol(e.to_string()))?;
        line.push('\n');
        stream.write_all(line.as_bytes()).map_err(ClientError::Unreachable)?;
        let mut reply = String::new();
        BufReader::new(stream)
            .read_line(&mut reply)
            .map_err(ClientError::Unreachable)?;
        if reply.is_empty() {
            return Err(ClientError::Unreachable(io::ErrorKind::UnexpectedEof.into()));
        }
        serde_json::from_str(&reply).map_err(|e| ClientError::Protocol(format!("{e}: {}", reply.trim_end())))
    }
}
