//! Wire formats shared by the live server, the origin nodes and the
//! simulator.
//!
//! Origin protocol (one request per line, responses line + raw bytes):
//!
//! ```text
//! GET <video_id> RANGE <start>-<end>   ->  206 <len>\n<len bytes> | 404 | 416
//! SIZE <video_id>                      ->  200 <total_bytes>      | 404
//! ```
//!
//! Client protocol:
//!
//! ```text
//! PLAY <video_id> PROFILE <profile_id> ->  STREAM <video_id> <variant> <total_bytes> <segment_size>
//!                                          then length-prefixed segment frames
//!                                          (4-byte big-endian length + bytes),
//!                                          terminated by a zero-length frame;
//!                                          or 404 NOT_AVAILABLE / 500 FETCH_FAILED /
//!                                          501 FORMAT_UNSUPPORTED
//! STATS                                ->  one JSON object line
//! ```
//!
//! Telemetry is one JSON object per line (see [`crate::registry::TelemetryMsg`]).

use crate::ids::{is_valid_token, ProfileId, VideoId};
use crate::media::FormatVariantKey;
use std::io::{self, Read, Write};
use thiserror::Error;

pub const STATUS_NOT_AVAILABLE: &str = "404 NOT_AVAILABLE";
pub const STATUS_FETCH_FAILED: &str = "500 FETCH_FAILED";
pub const STATUS_FORMAT_UNSUPPORTED: &str = "501 FORMAT_UNSUPPORTED";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed request line: {0}")]
    Malformed(String),
    #[error("bad identifier in request: {0}")]
    BadIdentifier(String),
}

/// A request as seen by an origin node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OriginRequest {
    Size(VideoId),
    Range {
        video: VideoId,
        start: u64,
        end: u64,
    },
}

impl OriginRequest {
    pub fn parse(line: &str) -> Result<Self, ProtocolError> {
        let line = line.trim_end_matches(['\r', '\n']);
        let mut parts = line.split(' ');
        match parts.next() {
            Some("SIZE") => {
                let id = parts
                    .next()
                    .ok_or_else(|| ProtocolError::Malformed(line.into()))?;
                if parts.next().is_some() || !is_valid_token(id) {
                    return Err(ProtocolError::Malformed(line.into()));
                }
                Ok(OriginRequest::Size(VideoId::new(id)))
            }
            Some("GET") => {
                let id = parts
                    .next()
                    .ok_or_else(|| ProtocolError::Malformed(line.into()))?;
                if parts.next() != Some("RANGE") {
                    return Err(ProtocolError::Malformed(line.into()));
                }
                let range = parts
                    .next()
                    .ok_or_else(|| ProtocolError::Malformed(line.into()))?;
                if parts.next().is_some() || !is_valid_token(id) {
                    return Err(ProtocolError::Malformed(line.into()));
                }
                let (start, end) = range
                    .split_once('-')
                    .ok_or_else(|| ProtocolError::Malformed(line.into()))?;
                let start: u64 = start
                    .parse()
                    .map_err(|_| ProtocolError::Malformed(line.into()))?;
                let end: u64 = end
                    .parse()
                    .map_err(|_| ProtocolError::Malformed(line.into()))?;
                Ok(OriginRequest::Range {
                    video: VideoId::new(id),
                    start,
                    end,
                })
            }
            _ => Err(ProtocolError::Malformed(line.into())),
        }
    }

    pub fn to_line(&self) -> String {
        match self {
            OriginRequest::Size(v) => format!("SIZE {v}\n"),
            OriginRequest::Range { video, start, end } => {
                format!("GET {video} RANGE {start}-{end}\n")
            }
        }
    }
}

/// A request as seen by the gateway's client listener.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientRequest {
    Play { video: VideoId, profile: ProfileId },
    Stats,
}

impl ClientRequest {
    pub fn parse(line: &str) -> Result<Self, ProtocolError> {
        let line = line.trim_end_matches(['\r', '\n']);
        if line == "STATS" {
            return Ok(ClientRequest::Stats);
        }
        let mut parts = line.split(' ');
        if parts.next() != Some("PLAY") {
            return Err(ProtocolError::Malformed(line.into()));
        }
        let video = parts
            .next()
            .ok_or_else(|| ProtocolError::Malformed(line.into()))?;
        if parts.next() != Some("PROFILE") {
            return Err(ProtocolError::Malformed(line.into()));
        }
        let profile = parts
            .next()
            .ok_or_else(|| ProtocolError::Malformed(line.into()))?;
        if parts.next().is_some() {
            return Err(ProtocolError::Malformed(line.into()));
        }
        if !is_valid_token(video) || !is_valid_token(profile) {
            return Err(ProtocolError::BadIdentifier(line.into()));
        }
        Ok(ClientRequest::Play {
            video: VideoId::new(video),
            profile: ProfileId::new(profile),
        })
    }
}

/// Header line that precedes the framed segments of a stream.
pub fn stream_header_line(
    video: &VideoId,
    variant: &FormatVariantKey,
    total_bytes: u64,
    segment_size: u32,
) -> String {
    format!("STREAM {video} {variant} {total_bytes} {segment_size}\n")
}

/// Writes one length-prefixed segment frame.
pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(bytes)
}

/// Writes the zero-length terminator frame.
pub fn write_end_frame(w: &mut impl Write) -> io::Result<()> {
    w.write_all(&0u32.to_be_bytes())
}

/// Reads one frame; `Ok(None)` is the zero-length terminator.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len == 0 {
        return Ok(None);
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_request_lines_round_trip() {
        for req in [
            OriginRequest::Size(VideoId::new("v1")),
            OriginRequest::Range {
                video: VideoId::new("v1"),
                start: 0,
                end: 262_143,
            },
        ] {
            let line = req.to_line();
            assert_eq!(OriginRequest::parse(&line).unwrap(), req);
        }
    }

    #[test]
    fn origin_request_rejects_garbage() {
        assert!(OriginRequest::parse("FETCH v1").is_err());
        assert!(OriginRequest::parse("GET v1 RANGE").is_err());
        assert!(OriginRequest::parse("GET v1 RANGE 5").is_err());
        assert!(OriginRequest::parse("GET v1 RANGE a-b").is_err());
        assert!(OriginRequest::parse("SIZE").is_err());
    }

    #[test]
    fn client_request_parses() {
        assert_eq!(
            ClientRequest::parse("PLAY v1 PROFILE qcif\n").unwrap(),
            ClientRequest::Play {
                video: VideoId::new("v1"),
                profile: ProfileId::new("qcif"),
            }
        );
        assert_eq!(ClientRequest::parse("STATS").unwrap(), ClientRequest::Stats);
        assert!(ClientRequest::parse("PLAY v1").is_err());
        assert!(ClientRequest::parse("PLAY v1 PROFILE qcif extra").is_err());
    }

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        write_frame(&mut buf, b"").unwrap(); // zero-length == terminator
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"hello");
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }
}
