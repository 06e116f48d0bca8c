//! MIME type guessing for ledger entries: extension first, then magic bytes.

use std::path::Path;

pub const DEFAULT_TYPE: &str = "application/octet-stream";

fn by_extension(ext: &str) -> Option<&'static str> {
    Some(match ext.to_ascii_lowercase().as_str() {
        "txt" | "text" | "log" => "text/plain",
        "md" => "text/markdown",
        "csv" => "text/csv",
        "htm" | "html" => "text/html",
        "json" => "application/json",
        "xml" => "application/xml",
        "pdf" => "application/pdf",
        "zip" => "application/zip",
        "gz" => "application/gzip",
        "tar" => "application/x-tar",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "svg" => "image/svg+xml",
        "mp3" => "audio/mpeg",
        "mp4" => "video/mp4",
        "doc" => "application/msword",
        "docx" => "application/vnd.openxmlformats-officedocument.wordprocessingml.document",
        _ => return None,
    })
}

const MAGIC: &[(&[u8], &str)] = &[
    (b"\x89PNG\r\n\x1a\n", "image/png"),
    (b"\xff\xd8\xff", "image/jpeg"),
    (b"GIF87a", "image/gif"),
    (b"GIF89a", "image/gif"),
    (b"%PDF-", "application/pdf"),
    (b"PK\x03\x04", "application/zip"),
    (b"\x1f\x8b", "application/gzip"),
    (b"ID3", "audio/mpeg"),
];

fn by_magic(data: &[u8]) -> Option<&'static str> {
    if let Some((_, mime)) = MAGIC.iter().find(|(m, _)| data.starts_with(m)) {
        return Some(mime);
    }
    let head = &data[..data.len().min(512)];
    let text = match std::str::from_utf8(head) {
        Ok(t) => t,
        // A multi-byte character may straddle the cut.
        Err(e) if e.error_len().is_none() => std::str::from_utf8(&head[..e.valid_up_to()]).ok()?,
        Err(_) => return None,
    };
    if text.is_empty() || text.chars().any(|c| c.is_control() && !c.is_whitespace()) {
        return None;
    }
    let trimmed = text.trim_start().to_ascii_lowercase();
    if trimmed.starts_with("<!doctype html") || trimmed.starts_with("<html") {
        Some("text/html")
    } else {
        Some("text/plain")
    }
}

/// Guesses a MIME type from an optional file name and the content.
pub fn sniff(name: Option<&str>, data: &[u8]) -> String {
    name.and_then(|n| Path::new(n).extension())
        .and_then(|e| e.to_str())
        .and_then(by_extension)
        .or_else(|| by_magic(data))
        .unwrap_or(DEFAULT_TYPE)
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extension_wins() {
        assert_eq!(sniff(Some("a/report.PDF"), b"plain"), "application/pdf");
        assert_eq!(sniff(Some("notes.txt"), b"\x89PNG\r\n\x1a\n"), "text/plain");
    }

    #[test]
    fn magic_fallback() {
        assert_eq!(sniff(Some("blob.bin"), b"\x89PNG\r\n\x1a\nxxxx"), "image/png");
        assert_eq!(sniff(None, b"%PDF-1.7"), "application/pdf");
        assert_eq!(sniff(None, b"hello world\n"), "text/plain");
        assert_eq!(sniff(None, b"  <!DOCTYPE html><p>"), "text/html");
    }

    #[test]
    fn default_type() {
        assert_eq!(sniff(None, b""), DEFAULT_TYPE);
        assert_eq!(sniff(None, &[0, 1, 2, 0xff]), DEFAULT_TYPE);
        assert_eq!(sniff(Some("noext"), &[0xfe; 10]), DEFAULT_TYPE);
    }
}
