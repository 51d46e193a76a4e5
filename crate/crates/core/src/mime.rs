//! RFC 5322 / MIME parsing.
//!
//! Everything here is total: malformed input degrades to a best-effort
//! [`ParsedMessage`] with the problems listed in `parse_warnings`.

use std::fmt;
use std::sync::OnceLock;

use base64::engine::general_purpose::{GeneralPurpose, GeneralPurposeConfig};
use base64::engine::DecodePaddingMode;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Nesting limit for multipart bodies.
const MAX_PART_DEPTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Imap,
    Pop3,
    Mbox,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Imap => "imap",
            SourceKind::Pop3 => "pop3",
            SourceKind::Mbox => "mbox",
        })
    }
}

/// Where a message lives on its server.
///
/// For POP3 sources `uid` holds a hash of the UIDL string; for mbox it is
/// the 0-based ordinal of the message in the file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageLocation {
    pub account_id: String,
    pub mailbox: String,
    pub uid: u64,
    pub uidvalidity: u64,
    pub source_kind: SourceKind,
}

impl MessageLocation {
    /// Ordering key used by the ingestion pipeline.
    pub fn sort_key(&self) -> (&str, &str, u64) {
        (&self.account_id, &self.mailbox, self.uid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMessage {
    pub bytes: Vec<u8>,
    pub location: MessageLocation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub filename: String,
    pub media_type: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedMessage {
    pub message_id: String,
    /// `synth-` id derived from the raw bytes. Equals `message_id` when the
    /// message carries no Message-ID header.
    pub content_id: String,
    pub from: String,
    pub to: Vec<String>,
    pub cc: Vec<String>,
    pub subject: String,
    pub date: Option<DateTime<Utc>>,
    pub body_text: String,
    pub attachments: Vec<Attachment>,
    pub parse_warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferEncoding {
    SevenBit,
    EightBit,
    Binary,
    QuotedPrintable,
    Base64,
}

impl TransferEncoding {
    /// Parses a Content-Transfer-Encoding value. Unknown values yield `None`.
    pub fn from_header(value: &str) -> Option<Self> {
        match value.trim().to_ascii_lowercase().as_str() {
            "7bit" | "" => Some(Self::SevenBit),
            "8bit" => Some(Self::EightBit),
            "binary" => Some(Self::Binary),
            "quoted-printable" => Some(Self::QuotedPrintable),
            "base64" => Some(Self::Base64),
            _ => None,
        }
    }
}

/// Result of decoding a transfer-encoded body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedText {
    pub text: String,
    pub warning: Option<String>,
}

/// One node of the MIME tree.
#[derive(Debug, Clone, PartialEq)]
pub enum MimePart {
    Leaf(LeafPart),
    Multipart { subtype: String, parts: Vec<MimePart> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafPart {
    /// Lowercased `type/subtype`.
    pub media_type: String,
    pub charset: Option<String>,
    pub encoding: TransferEncoding,
    pub is_attachment: bool,
    pub filename: Option<String>,
    /// Raw (still transfer-encoded) body octets.
    pub body: Vec<u8>,
}

impl LeafPart {
    fn is_text_body(&self) -> bool {
        !self.is_attachment && (self.media_type == "text/plain" || self.media_type == "text/html")
    }
}

/// Synthesized id for a message: `synth-` + hex SHA-256 of the raw bytes.
pub fn synthesize_id(bytes: &[u8]) -> String {
    format!("synth-{}", hex::encode(Sha256::digest(bytes)))
}

pub fn parse_message(raw: &RawMessage) -> ParsedMessage {
    parse_bytes(&raw.bytes)
}

/// Parses raw message octets. Never fails.
pub fn parse_bytes(bytes: &[u8]) -> ParsedMessage {
    let mut warnings = Vec::new();
    let content_id = synthesize_id(bytes);

    if bytes.is_empty() {
        warnings.push("empty message".to_string());
    }

    let (header_bytes, body_bytes) = match split_header_body(bytes) {
        Some((h, b)) => (h, b),
        None => {
            warnings.push("missing body separator".to_string());
            (bytes, &[][..])
        }
    };
    if header_bytes.iter().all(|b| b.is_ascii_whitespace()) {
        warnings.push("empty header section".to_string());
    }

    let headers = parse_headers(header_bytes, &mut warnings);

    let message_id = headers
        .get("message-id")
        .map(|v| v.trim().trim_start_matches('<').trim_end_matches('>').trim().to_string())
        .filter(|v| !v.is_empty())
        .unwrap_or_else(|| content_id.clone());

    let from = headers.get("from").map(|v| decode_encoded_words(v.trim())).unwrap_or_default();
    let to = headers.get("to").map(|v| split_addresses(&decode_encoded_words(v))).unwrap_or_default();
    let cc = headers.get("cc").map(|v| split_addresses(&decode_encoded_words(v))).unwrap_or_default();
    let subject = headers
        .get("subject")
        .map(|v| collapse_whitespace(&decode_encoded_words(v)))
        .unwrap_or_default();

    let date = match headers.get("date") {
        Some(v) => match DateTime::parse_from_rfc2822(v.trim()) {
            Ok(d) => Some(d.with_timezone(&Utc)),
            Err(_) => {
                warnings.push(format!("unparseable date: {}", v.trim()));
                None
            }
        },
        None => None,
    };

    let root = build_part(&headers, body_bytes, 0, &mut warnings);
    let mut attachments = Vec::new();
    collect_attachments(&root, &mut attachments, &mut warnings);
    let body_text = extract_text_inner(&root, &mut warnings);

    ParsedMessage {
        message_id,
        content_id,
        from,
        to,
        cc,
        subject,
        date,
        body_text,
        attachments,
        parse_warnings: warnings,
    }
}

/// Parses the MIME tree of a message. Exposed for [`extract_text`] callers.
pub fn parse_part_tree(bytes: &[u8]) -> MimePart {
    let mut warnings = Vec::new();
    let (h, b) = split_header_body(bytes).unwrap_or((bytes, &[][..]));
    let headers = parse_headers(h, &mut warnings);
    build_part(&headers, b, 0, &mut warnings)
}

/// Returns `(headers, body)` split at the first empty line, accepting CRLF
/// or bare LF.
fn split_header_body(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    // A message starting with a blank line has an empty header section.
    if bytes.starts_with(b"\r\n") {
        return Some((&[], &bytes[2..]));
    }
    if bytes.starts_with(b"\n") {
        return Some((&[], &bytes[1..]));
    }
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\n' {
            let rest = &bytes[i + 1..];
            if rest.starts_with(b"\r\n") {
                return Some((&bytes[..i + 1], &rest[2..]));
            }
            if rest.starts_with(b"\n") {
                return Some((&bytes[..i + 1], &rest[1..]));
            }
        }
        i += 1;
    }
    None
}

/// Header map keeping the first occurrence of each (lowercased) name.
#[derive(Debug, Default)]
struct Headers(Vec<(String, String)>);

impl Headers {
    fn get(&self, name: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

fn bytes_to_string(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => latin1(bytes),
    }
}

fn latin1(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}

fn parse_headers(bytes: &[u8], warnings: &mut Vec<String>) -> Headers {
    let text = bytes_to_string(bytes);
    let mut out: Vec<(String, String)> = Vec::new();
    let mut bad_lines = 0usize;
    for line in text.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        if line.starts_with(' ') || line.starts_with('\t') {
            match out.last_mut() {
                Some((_, value)) => {
                    value.push(' ');
                    value.push_str(line.trim_start());
                }
                None => bad_lines += 1,
            }
            continue;
        }
        match line.split_once(':') {
            Some((name, value))
                if !name.is_empty() && name.bytes().all(|b| b.is_ascii_graphic() && b != b':') =>
            {
                out.push((name.to_ascii_lowercase(), value.trim_start().to_string()));
            }
            _ => bad_lines += 1,
        }
    }
    if bad_lines > 0 {
        warnings.push(format!("{bad_lines} malformed header line(s) skipped"));
    }
    // First occurrence wins.
    let mut seen = std::collections::HashSet::new();
    out.retain(|(k, _)| seen.insert(k.clone()));
    Headers(out)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn split_addresses(value: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut in_quotes = false;
    let mut angle = 0usize;
    for c in value.chars() {
        match c {
            '"' => in_quotes = !in_quotes,
            '<' if !in_quotes => angle += 1,
            '>' if !in_quotes => angle = angle.saturating_sub(1),
            ',' if !in_quotes && angle == 0 => {
                let t = collapse_whitespace(&current);
                if !t.is_empty() {
                    out.push(t);
                }
                current.clear();
                continue;
            }
            _ => {}
        }
        current.push(c);
    }
    let t = collapse_whitespace(&current);
    if !t.is_empty() {
        out.push(t);
    }
    out
}

/// A parsed structured header such as Content-Type: the main value plus
/// lowercased parameter names.
struct HeaderParams {
    value: String,
    params: Vec<(String, String)>,
}

impl HeaderParams {
    fn param(&self, name: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

fn parse_params(header: &str) -> HeaderParams {
    let mut segments = Vec::new();
    let mut current = String::new();
    let mut in_quotes = false;
    let mut escaped = false;
    for c in header.chars() {
        if escaped {
            current.push(c);
            escaped = false;
            continue;
        }
        match c {
            '\\' if in_quotes => escaped = true,
            '"' => in_quotes = !in_quotes,
            ';' if !in_quotes => {
                segments.push(std::mem::take(&mut current));
                continue;
            }
            _ => current.push(c),
        }
    }
    segments.push(current);

    let mut iter = segments.into_iter();
    let value = iter.next().unwrap_or_default().trim().to_ascii_lowercase();
    let mut params = Vec::new();
    for seg in iter {
        if let Some((k, v)) = seg.split_once('=') {
            let key = k.trim().to_ascii_lowercase();
            let mut val = v.trim().to_string();
            // RFC 2231 single-segment form: charset'lang'percent-encoded
            if let Some(base) = key.strip_suffix('*') {
                if let Some(decoded) = decode_rfc2231(&val) {
                    val = decoded;
                }
                params.push((base.to_string(), val));
            } else {
                params.push((key, val));
            }
        }
    }
    HeaderParams { value, params }
}

fn decode_rfc2231(value: &str) -> Option<String> {
    let mut pieces = value.splitn(3, '\'');
    let charset = pieces.next()?;
    let _lang = pieces.next()?;
    let encoded = pieces.next()?;
    let mut bytes = Vec::with_capacity(encoded.len());
    let raw = encoded.as_bytes();
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'%' && i + 2 < raw.len() {
            if let (Some(h), Some(l)) = (hex_val(raw[i + 1]), hex_val(raw[i + 2])) {
                bytes.push(h << 4 | l);
                i += 3;
                continue;
            }
        }
        bytes.push(raw[i]);
        i += 1;
    }
    Some(decode_charset(&bytes, charset).0)
}

fn build_part(headers: &Headers, body: &[u8], depth: usize, warnings: &mut Vec<String>) -> MimePart {
    let ctype = headers
        .get("content-type")
        .map(parse_params)
        .unwrap_or(HeaderParams { value: "text/plain".into(), params: vec![] });
    let disposition = headers.get("content-disposition").map(parse_params);

    let media_type = if ctype.value.contains('/') { ctype.value.clone() } else {
        if headers.get("content-type").is_some() {
            warnings.push(format!("malformed content-type '{}', assuming text/plain", ctype.value));
        }
        "text/plain".to_string()
    };

    if let Some(subtype) = media_type.strip_prefix("multipart/") {
        match ctype.param("boundary").filter(|b| !b.is_empty()) {
            Some(boundary) if depth < MAX_PART_DEPTH => {
                let parts = split_multipart(body, boundary, warnings)
                    .into_iter()
                    .map(|chunk| {
                        let (h, b) = match split_header_body(chunk) {
                            Some(x) => x,
                            None => {
                                // A part with no blank line is all headers or all body; treat
                                // it as body with default headers when it lacks a colon line.
                                if looks_like_headers(chunk) {
                                    (chunk, &[][..])
                                } else {
                                    (&[][..], chunk)
                                }
                            }
                        };
                        let part_headers = parse_headers(h, warnings);
                        build_part(&part_headers, b, depth + 1, warnings)
                    })
                    .collect();
                return MimePart::Multipart { subtype: subtype.to_string(), parts };
            }
            Some(_) => {
                warnings.push("multipart nesting too deep, part skipped".to_string());
                return MimePart::Multipart { subtype: subtype.to_string(), parts: vec![] };
            }
            None => {
                warnings.push("multipart without boundary treated as text/plain".to_string());
                return leaf("text/plain".into(), &ctype, disposition.as_ref(), headers, body, warnings);
            }
        }
    }

    leaf(media_type, &ctype, disposition.as_ref(), headers, body, warnings)
}

fn looks_like_headers(chunk: &[u8]) -> bool {
    let text = bytes_to_string(chunk);
    let first = text.lines().next().unwrap_or("");
    matches!(first.split_once(':'), Some((name, _)) if !name.is_empty() && !name.contains(' '))
}

fn leaf(
    media_type: String,
    ctype: &HeaderParams,
    disposition: Option<&HeaderParams>,
    headers: &Headers,
    body: &[u8],
    warnings: &mut Vec<String>,
) -> MimePart {
    let encoding = match headers.get("content-transfer-encoding") {
        None => TransferEncoding::SevenBit,
        Some(v) => TransferEncoding::from_header(v).unwrap_or_else(|| {
            warnings.push(format!("unknown transfer encoding '{}', treated as 7bit", v.trim()));
            TransferEncoding::SevenBit
        }),
    };
    let filename = disposition
        .and_then(|d| d.param("filename"))
        .or_else(|| ctype.param("name"))
        .map(decode_encoded_words);
    let is_attachment =
        disposition.map(|d| d.value == "attachment").unwrap_or(false) || !media_type.starts_with("text/");
    MimePart::Leaf(LeafPart {
        media_type,
        charset: ctype.param("charset").map(|s| s.to_string()),
        encoding,
        is_attachment,
        filename,
        body: body.to_vec(),
    })
}

/// Splits a multipart body into its raw parts (headers + body of each).
fn split_multipart<'a>(body: &'a [u8], boundary: &str, warnings: &mut Vec<String>) -> Vec<&'a [u8]> {
    let delimiter = format!("--{boundary}");
    let delim = delimiter.as_bytes();

    // Line start offsets of every delimiter line.
    let mut marks: Vec<(usize, usize, bool)> = Vec::new(); // (line_start, content_start, is_close)
    let mut line_start = 0;
    while line_start <= body.len() {
        let line_end = body[line_start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| line_start + p)
            .unwrap_or(body.len());
        let line = &body[line_start..line_end];
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.starts_with(delim) {
            let rest = &line[delim.len()..];
            let is_close = rest.starts_with(b"--");
            if is_close || rest.iter().all(|b| b.is_ascii_whitespace()) {
                marks.push((line_start, (line_end + 1).min(body.len()), is_close));
            }
        }
        if line_end >= body.len() {
            break;
        }
        line_start = line_end + 1;
    }

    if marks.is_empty() {
        warnings.push("multipart boundary never found".to_string());
        return vec![];
    }

    let mut parts = Vec::new();
    let mut closed = false;
    for (i, &(_, content_start, is_close)) in marks.iter().enumerate() {
        if is_close {
            closed = true;
            break;
        }
        let end = match marks.get(i + 1) {
            Some(&(next_line_start, _, _)) => next_line_start,
            None => body.len(),
        };
        let mut chunk = &body[content_start.min(end)..end];
        // The line break before a delimiter belongs to the delimiter.
        if marks.get(i + 1).is_some() {
            chunk = chunk.strip_suffix(b"\n").unwrap_or(chunk);
            chunk = chunk.strip_suffix(b"\r").unwrap_or(chunk);
        }
        parts.push(chunk);
    }
    if !closed {
        warnings.push("multipart closing boundary missing".to_string());
    }
    parts
}

fn collect_attachments(part: &MimePart, out: &mut Vec<Attachment>, warnings: &mut Vec<String>) {
    match part {
        MimePart::Multipart { parts, .. } => {
            for p in parts {
                collect_attachments(p, out, warnings);
            }
        }
        MimePart::Leaf(leaf) if !leaf.is_text_body() => {
            let size = match leaf.encoding {
                TransferEncoding::Base64 => {
                    let (bytes, clean) = decode_base64_prefix(&leaf.body);
                    if !clean {
                        warnings.push("invalid base64 in attachment".to_string());
                    }
                    bytes.len()
                }
                TransferEncoding::QuotedPrintable => decode_quoted_printable(&leaf.body).len(),
                _ => leaf.body.len(),
            };
            out.push(Attachment {
                filename: leaf.filename.clone().unwrap_or_default(),
                media_type: leaf.media_type.clone(),
                size_bytes: size as u64,
            });
        }
        MimePart::Leaf(_) => {}
    }
}

/// Extracts the plain-text body from a part tree.
///
/// `multipart/alternative` prefers text/plain, then text/html; other
/// multiparts concatenate their text parts in order separated by a blank line.
pub fn extract_text(part: &MimePart) -> String {
    let mut warnings = Vec::new();
    extract_text_inner(part, &mut warnings)
}

fn extract_text_inner(part: &MimePart, warnings: &mut Vec<String>) -> String {
    match part {
        MimePart::Leaf(leaf) if leaf.is_text_body() => {
            let decoded = decode_body_transfer(&leaf.body, leaf.encoding, leaf.charset.as_deref().unwrap_or(""));
            if let Some(w) = decoded.warning {
                warnings.push(w);
            }
            let text = if leaf.media_type == "text/html" {
                strip_html(&decoded.text)
            } else {
                decoded.text.replace("\r\n", "\n")
            };
            text.trim().to_string()
        }
        MimePart::Leaf(_) => String::new(),
        MimePart::Multipart { subtype, parts } if subtype == "alternative" => {
            let pick = |mt: &str| {
                parts.iter().find(|p| matches!(p, MimePart::Leaf(l) if l.media_type == mt && !l.is_attachment))
            };
            if let Some(p) = pick("text/plain").or_else(|| pick("text/html")) {
                return extract_text_inner(p, warnings);
            }
            parts
                .iter()
                .map(|p| extract_text_inner(p, warnings))
                .find(|t| !t.is_empty())
                .unwrap_or_default()
        }
        MimePart::Multipart { parts, .. } => parts
            .iter()
            .map(|p| extract_text_inner(p, warnings))
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join("\n\n"),
    }
}

fn encoded_word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"=\?([^?\s]+)\?([BbQq])\?([^?\s]*)\?=").unwrap())
}

/// Decodes RFC 2047 encoded-words. Whitespace between two adjacent
/// encoded-words is dropped. Spans that fail to decode stay verbatim;
/// unknown charsets fall back to Latin-1.
pub fn decode_encoded_words(value: &str) -> String {
    let re = encoded_word_re();
    let mut out = String::with_capacity(value.len());
    let mut last_end = 0;
    let mut prev_was_word = false;
    for caps in re.captures_iter(value) {
        let m = caps.get(0).unwrap();
        let gap = &value[last_end..m.start()];
        let decoded = decode_one_word(&caps[1], &caps[2], &caps[3]);
        if !(prev_was_word && decoded.is_some() && gap.chars().all(char::is_whitespace)) {
            out.push_str(gap);
        }
        match decoded {
            Some(text) => {
                out.push_str(&text);
                prev_was_word = true;
            }
            None => {
                out.push_str(m.as_str());
                prev_was_word = false;
            }
        }
        last_end = m.end();
    }
    out.push_str(&value[last_end..]);
    out
}

fn decode_one_word(charset: &str, encoding: &str, payload: &str) -> Option<String> {
    // Strip an RFC 2231 language suffix ("UTF-8*ro").
    let charset = charset.split('*').next().unwrap_or(charset);
    let bytes = match encoding {
        "B" | "b" => {
            let (bytes, clean) = decode_base64_prefix(payload.as_bytes());
            if !clean {
                return None;
            }
            bytes
        }
        _ => {
            let raw = payload.as_bytes();
            let mut out = Vec::with_capacity(raw.len());
            let mut i = 0;
            while i < raw.len() {
                match raw[i] {
                    b'_' => out.push(b' '),
                    b'=' => {
                        let h = raw.get(i + 1).copied().and_then(hex_val);
                        let l = raw.get(i + 2).copied().and_then(hex_val);
                        match (h, l) {
                            (Some(h), Some(l)) => {
                                out.push(h << 4 | l);
                                i += 3;
                                continue;
                            }
                            _ => return None,
                        }
                    }
                    b => out.push(b),
                }
                i += 1;
            }
            out
        }
    };
    Some(decode_charset(&bytes, charset).0)
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        b'A'..=b'F' => Some(b - b'A' + 10),
        _ => None,
    }
}

/// Decodes a transfer-encoded body into UTF-8 text.
pub fn decode_body_transfer(bytes: &[u8], encoding: TransferEncoding, charset: &str) -> DecodedText {
    let raw = match encoding {
        TransferEncoding::SevenBit | TransferEncoding::EightBit | TransferEncoding::Binary => bytes.to_vec(),
        TransferEncoding::QuotedPrintable => decode_quoted_printable(bytes),
        TransferEncoding::Base64 => decode_base64_prefix(bytes).0,
    };
    let (text, warning) = decode_charset(&raw, charset);
    DecodedText { text, warning }
}

/// Decodes bytes in `charset`. Missing or ASCII/UTF-8 labels try UTF-8 first;
/// unknown labels map bytes as Latin-1 and return a warning.
pub fn decode_charset(bytes: &[u8], charset: &str) -> (String, Option<String>) {
    let label = charset.trim().trim_matches('"').to_ascii_lowercase();
    match label.as_str() {
        "" | "us-ascii" | "ascii" | "utf-8" | "utf8" => match std::str::from_utf8(bytes) {
            Ok(s) => (s.to_string(), None),
            Err(_) => {
                let (text, _, _) = encoding_rs::WINDOWS_1252.decode(bytes);
                (text.into_owned(), Some(format!("invalid {} bytes decoded as windows-1252", if label.is_empty() { "utf-8" } else { &label })))
            }
        },
        _ => match encoding_rs::Encoding::for_label(label.as_bytes()) {
            Some(enc) => (enc.decode_without_bom_handling(bytes).0.into_owned(), None),
            None => (latin1(bytes), Some(format!("unknown charset '{label}', decoded as latin-1"))),
        },
    }
}

pub(crate) fn decode_quoted_printable(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'=' {
            // soft line break, possibly with trailing whitespace before it
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j] == b' ' || bytes[j] == b'\t') {
                j += 1;
            }
            if bytes.get(j) == Some(&b'\n') {
                i = j + 1;
                continue;
            }
            if bytes.get(j) == Some(&b'\r') && bytes.get(j + 1) == Some(&b'\n') {
                i = j + 2;
                continue;
            }
            if let (Some(h), Some(l)) = (
                bytes.get(i + 1).copied().and_then(hex_val),
                bytes.get(i + 2).copied().and_then(hex_val),
            ) {
                out.push(h << 4 | l);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    out
}

/// Decodes the longest valid base64 prefix, ignoring whitespace.
/// The flag reports whether the whole input was valid.
pub(crate) fn decode_base64_prefix(bytes: &[u8]) -> (Vec<u8>, bool) {
    const ENGINE: GeneralPurpose = GeneralPurpose::new(
        &base64::alphabet::STANDARD,
        GeneralPurposeConfig::new()
            .with_decode_padding_mode(DecodePaddingMode::Indifferent)
            .with_decode_allow_trailing_bits(true),
    );
    let mut clean = true;
    let mut symbols = Vec::with_capacity(bytes.len());
    let mut iter = bytes.iter().copied().filter(|b| !b.is_ascii_whitespace());
    for b in iter.by_ref() {
        if b.is_ascii_alphanumeric() || b == b'+' || b == b'/' {
            symbols.push(b);
        } else {
            if b != b'=' {
                clean = false;
            }
            break;
        }
    }
    // Anything but padding after the first non-alphabet byte is garbage.
    if iter.any(|b| b != b'=') {
        clean = false;
    }
    if symbols.len() % 4 == 1 {
        symbols.pop();
        clean = false;
    }
    match ENGINE.decode(&symbols) {
        Ok(v) => (v, clean),
        Err(_) => (Vec::new(), false),
    }
}

fn is_inline_tag(name: &str) -> bool {
    matches!(
        name,
        "a" | "b" | "i" | "u" | "em" | "strong" | "span" | "font" | "small" | "big" | "sub" | "sup" | "code" | "s" | "abbr"
    )
}

/// Removes tags, decodes the five XML entities plus numeric references,
/// and collapses whitespace. Script and style contents are dropped.
pub fn strip_html(html: &str) -> String {
    let mut text = String::with_capacity(html.len());
    let mut rest = html;
    let mut skip_until: Option<&'static str> = None;
    while let Some(lt) = rest.find('<') {
        if skip_until.is_none() {
            text.push_str(&rest[..lt]);
        }
        let after = &rest[lt + 1..];
        if let Some(stripped) = after.strip_prefix("!--") {
            rest = match stripped.find("-->") {
                Some(end) => &stripped[end + 3..],
                None => "",
            };
            continue;
        }
        let gt = match after.find('>') {
            Some(gt) => gt,
            None => {
                // Unterminated tag: drop the remainder.
                rest = "";
                break;
            }
        };
        let tag = &after[..gt];
        let closing = tag.starts_with('/');
        let name: String = tag
            .trim_start_matches('/')
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match (skip_until, closing, name.as_str()) {
            (Some(end), true, n) if n == end => skip_until = None,
            (None, false, "script") => skip_until = Some("script"),
            (None, false, "style") => skip_until = Some("style"),
            _ => {}
        }
        if skip_until.is_none() && !is_inline_tag(&name) {
            text.push(' ');
        }
        rest = &after[gt + 1..];
    }
    if skip_until.is_none() {
        text.push_str(rest);
    }
    collapse_whitespace(&decode_entities(&text))
}

fn decode_entities(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let after = &rest[amp + 1..];
        let semi = after.find(';').filter(|&p| p <= 10);
        let decoded = semi.and_then(|p| {
            let name = &after[..p];
            let c = match name {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                _ => {
                    if let Some(hexs) = name.strip_prefix("#x").or_else(|| name.strip_prefix("#X")) {
                        u32::from_str_radix(hexs, 16).ok().and_then(char::from_u32)
                    } else if let Some(dec) = name.strip_prefix('#') {
                        dec.parse::<u32>().ok().and_then(char::from_u32)
                    } else {
                        None
                    }
                }
            };
            c.map(|c| (c, p))
        });
        match decoded {
            Some((c, p)) => {
                out.push(c);
                rest = &after[p + 1..];
            }
            None => {
                out.push('&');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> ParsedMessage {
        parse_bytes(s.as_bytes())
    }

    #[test]
    fn simple_message() {
        let m = parse("From: a@b\r\nSubject: Hi\r\n\r\nBody");
        assert_eq!(m.from, "a@b");
        assert_eq!(m.subject, "Hi");
        assert_eq!(m.body_text, "Body");
        assert!(m.parse_warnings.is_empty(), "{:?}", m.parse_warnings);
        assert!(m.message_id.starts_with("synth-"));
        assert_eq!(m.message_id, m.content_id);
    }

    #[test]
    fn missing_separator() {
        let m = parse("From: a@b\r\nSubject: Hi\r\n");
        assert_eq!(m.from, "a@b");
        assert_eq!(m.subject, "Hi");
        assert_eq!(m.body_text, "");
        assert_eq!(m.parse_warnings, vec!["missing body separator".to_string()]);
    }

    #[test]
    fn empty_header_section() {
        let m = parse("\r\nJust a body");
        assert_eq!(m.from, "");
        assert_eq!(m.body_text, "Just a body");
        assert!(m.parse_warnings.iter().any(|w| w == "empty header section"));
    }

    #[test]
    fn multipart_mixed_with_attachment() {
        let raw = "From: a@b\r\nSubject: report\r\nMIME-Version: 1.0\r\n\
Content-Type: multipart/mixed; boundary=\"XYZ\"\r\n\r\n\
preamble\r\n--XYZ\r\nContent-Type: text/plain; charset=utf-8\r\n\r\nSee attached.\r\n\
--XYZ\r\nContent-Type: application/pdf; name=\"a.pdf\"\r\n\
Content-Disposition: attachment; filename=\"a.pdf\"\r\nContent-Transfer-Encoding: base64\r\n\r\n\
JVBERi0xLjQK\r\n--XYZ--\r\n";
        let m = parse(raw);
        assert_eq!(m.body_text, "See attached.");
        // "JVBERi0xLjQK" decodes to "%PDF-1.4\n" (9 bytes)
        assert_eq!(
            m.attachments,
            vec![Attachment { filename: "a.pdf".into(), media_type: "application/pdf".into(), size_bytes: 9 }]
        );
        assert!(m.parse_warnings.is_empty(), "{:?}", m.parse_warnings);
    }

    #[test]
    fn message_id_and_addresses() {
        let m = parse(
            "Message-ID: <abc@host>\nFrom: \"Pop, Florin\" <f@x.ro>\nTo: a@b, \"C, D\" <c@d>\nCc: e@f\n\
Date: Tue, 1 Jul 2003 10:52:37 +0200\n\nhi\n",
        );
        assert_eq!(m.message_id, "abc@host");
        assert_ne!(m.content_id, m.message_id);
        assert_eq!(m.to, vec!["a@b".to_string(), "\"C, D\" <c@d>".to_string()]);
        assert_eq!(m.cc, vec!["e@f".to_string()]);
        assert_eq!(m.date.unwrap().to_rfc3339(), "2003-07-01T08:52:37+00:00");
        assert_eq!(m.body_text, "hi");
    }

    #[test]
    fn folded_encoded_subject() {
        let m = parse("Subject: =?UTF-8?B?U2FsdXQ=?=\r\n =?UTF-8?Q?_lume?=\r\n\r\nx");
        assert_eq!(m.subject, "Salut lume");
    }

    #[test]
    fn encoded_word_examples() {
        assert_eq!(decode_encoded_words("=?UTF-8?B?U2FsdXQ=?="), "Salut");
        assert_eq!(decode_encoded_words("plain subject"), "plain subject");
        assert_eq!(decode_encoded_words("=?UTF-8?Q?=C8=99edin=C8=9B=C4=83?="), "ședință");
    }

    #[test]
    fn encoded_word_fallbacks() {
        // Unknown charset maps bytes as Latin-1.
        assert_eq!(decode_encoded_words("=?x-unknown?Q?caf=E9?="), "café");
        // Broken quoted-printable escape stays verbatim.
        assert_eq!(decode_encoded_words("=?UTF-8?Q?a=ZZ?="), "=?UTF-8?Q?a=ZZ?=");
        // Text around encoded words keeps its spacing.
        assert_eq!(decode_encoded_words("Re: =?UTF-8?B?U2FsdXQ=?= all"), "Re: Salut all");
        assert_eq!(decode_encoded_words("=?iso-8859-2?Q?=BAcoal=E3?="), "şcoală");
    }

    #[test]
    fn transfer_examples() {
        let d = decode_body_transfer(b"=C8=99", TransferEncoding::QuotedPrintable, "utf-8");
        assert_eq!(d.text, "ș");
        assert_eq!(decode_body_transfer(b"abc", TransferEncoding::SevenBit, "us-ascii").text, "abc");
        assert_eq!(decode_body_transfer(b"U2FsdXQ=", TransferEncoding::Base64, "utf-8").text, "Salut");
    }

    #[test]
    fn base64_valid_prefix() {
        let d = decode_body_transfer(b"U2Fs\r\ndXQ=!!garbage", TransferEncoding::Base64, "utf-8");
        assert_eq!(d.text, "Salut");
        let d = decode_body_transfer(b"U2Fsd#XQ=", TransferEncoding::Base64, "utf-8");
        assert_eq!(d.text, "Sal");
    }

    #[test]
    fn unknown_charset_warns() {
        let d = decode_body_transfer(&[0x63, 0x61, 0x66, 0xe9], TransferEncoding::EightBit, "x-klingon");
        assert_eq!(d.text, "café");
        assert!(d.warning.unwrap().contains("x-klingon"));
    }

    #[test]
    fn qp_soft_breaks() {
        assert_eq!(decode_quoted_printable(b"long =\r\nline=3D1"), b"long line=1");
        assert_eq!(decode_quoted_printable(b"a=\nb"), b"ab");
        assert_eq!(decode_quoted_printable(b"x=4"), b"x=4");
    }

    #[test]
    fn alternative_prefers_plain() {
        let tree = MimePart::Multipart {
            subtype: "alternative".into(),
            parts: vec![
                text_leaf("text/plain", "P"),
                text_leaf("text/html", "<b>H</b>"),
            ],
        };
        assert_eq!(extract_text(&tree), "P");
        let html_only = MimePart::Multipart { subtype: "alternative".into(), parts: vec![text_leaf("text/html", "<b>H</b>")] };
        assert_eq!(extract_text(&html_only), "H");
    }

    #[test]
    fn html_strip_and_entities() {
        assert_eq!(extract_text(&text_leaf("text/html", "<p>Hello&amp;bye</p>")), "Hello&bye");
        assert_eq!(
            strip_html("<html><style>p{x}</style><p>a &lt;b&gt; &#x219;i &#259;</p><br>c<script>var x;</script></html>"),
            "a <b> și ă c"
        );
        assert_eq!(strip_html("x &nbsp; y"), "x &nbsp; y");
        assert_eq!(strip_html("<b>bold</b>face"), "boldface");
    }

    #[test]
    fn mixed_concatenates() {
        let tree = MimePart::Multipart {
            subtype: "mixed".into(),
            parts: vec![text_leaf("text/plain", "A"), text_leaf("text/plain", "B")],
        };
        assert_eq!(extract_text(&tree), "A\n\nB");
        let none = MimePart::Multipart { subtype: "mixed".into(), parts: vec![] };
        assert_eq!(extract_text(&none), "");
    }

    #[test]
    fn nested_alternative_inside_mixed() {
        let raw = "Content-Type: multipart/mixed; boundary=outer\n\n--outer\n\
Content-Type: multipart/alternative; boundary=inner\n\n--inner\nContent-Type: text/plain\n\nplain body\n\
--inner\nContent-Type: text/html\n\n<p>html body</p>\n--inner--\n--outer\n\
Content-Type: text/plain\nContent-Disposition: attachment; filename=notes.txt\n\nsecret\n--outer--\n";
        let m = parse(raw);
        assert_eq!(m.body_text, "plain body");
        assert_eq!(m.attachments.len(), 1);
        assert_eq!(m.attachments[0].filename, "notes.txt");
        assert_eq!(m.attachments[0].size_bytes, 6);
    }

    #[test]
    fn multipart_missing_close_warns() {
        let m = parse("Content-Type: multipart/mixed; boundary=b\n\n--b\nContent-Type: text/plain\n\nonly part\n");
        assert_eq!(m.body_text, "only part");
        assert!(m.parse_warnings.iter().any(|w| w.contains("closing boundary")));
    }

    #[test]
    fn rfc2231_filename() {
        let raw = "Content-Type: multipart/mixed; boundary=b\n\n--b\nContent-Type: application/octet-stream\n\
Content-Disposition: attachment; filename*=utf-8''%C8%99edin%C8%9B%C4%83.bin\n\nxyz\n--b--\n";
        let m = parse(raw);
        assert_eq!(m.attachments[0].filename, "ședință.bin");
    }

    #[test]
    fn deterministic() {
        let raw = b"Subject: x\n\n\xff\xfe garbage =?utf-8?q?x?=";
        assert_eq!(parse_bytes(raw), parse_bytes(raw));
    }

    fn text_leaf(media_type: &str, body: &str) -> MimePart {
        MimePart::Leaf(LeafPart {
            media_type: media_type.into(),
            charset: Some("utf-8".into()),
            encoding: TransferEncoding::SevenBit,
            is_attachment: false,
            filename: None,
            body: body.as_bytes().to_vec(),
        })
    }
}
