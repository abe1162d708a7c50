//! Synthetic video container and deterministic transcoder.
//!
//! Real codecs would make every byte downstream nondeterministic, so videos
//! are modelled as a tiny fixed-layout container ("BBMV"): a 15-byte header
//! followed by `frame_count` fixed-size frames under a planar 4:2:0 byte
//! model (`floor(w*h*3/2)` bytes per frame). Transcoding only ever reduces:
//! frames are dropped by a floor-counting decimation rule and each kept
//! frame is shrunk by truncation plus a trailing additive checksum of the
//! full source frame, so a downscale is verifiable byte by byte.

use crate::ids::{ProfileId, VideoId};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `b"BBMV"`.
pub const CONTAINER_MAGIC: [u8; 4] = [0x42, 0x42, 0x4D, 0x56];
pub const CONTAINER_VERSION: u8 = 1;
/// magic(4) + version(1) + codec(1) + width(2) + height(2) + fps(1) + frame_count(4)
pub const CONTAINER_HEADER_LEN: usize = 15;

pub const CIF_WIDTH: u16 = 352;
pub const CIF_HEIGHT: u16 = 288;
pub const QCIF_WIDTH: u16 = 176;
pub const QCIF_HEIGHT: u16 = 144;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MediaError {
    #[error("bad container magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u8),
    #[error("container shorter than its 15-byte header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("invalid container header: {0}")]
    InvalidHeader(&'static str),
    #[error("payload truncated: header declares {expected} bytes, {available} present")]
    TruncatedPayload { expected: u64, available: u64 },
    #[error("{0} trailing bytes after declared payload")]
    TrailingBytes(u64),
    #[error("invalid asset: {0}")]
    InvalidAsset(String),
    #[error("invalid device profile: {0}")]
    InvalidProfile(String),
    #[error(
        "upscale requested: asset is {asset_w}x{asset_h}, profile targets {target_w}x{target_h}"
    )]
    UpscaleRequested {
        asset_w: u16,
        asset_h: u16,
        target_w: u16,
        target_h: u16,
    },
}

/// Bytes of one frame at the given dimensions under the 4:2:0 byte model.
pub fn frame_size_bytes(width: u16, height: u16) -> u64 {
    u64::from(width) * u64::from(height) * 3 / 2
}

/// A decoded synthetic video: header fields plus `frame_count` fixed-size
/// frames. The container byte layout does not carry the id; identity follows
/// the cache/catalog key it is stored under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoAsset {
    pub video_id: VideoId,
    pub codec_id: u8,
    pub width: u16,
    pub height: u16,
    pub fps: u8,
    pub frame_count: u32,
    pub payload: Vec<u8>,
}

impl VideoAsset {
    pub fn new(
        video_id: VideoId,
        codec_id: u8,
        width: u16,
        height: u16,
        fps: u8,
        frame_count: u32,
        payload: Vec<u8>,
    ) -> Result<Self, MediaError> {
        if width == 0 || height == 0 {
            return Err(MediaError::InvalidAsset("zero dimension".into()));
        }
        if fps == 0 {
            return Err(MediaError::InvalidAsset("fps must be >= 1".into()));
        }
        let expected = frame_size_bytes(width, height) * u64::from(frame_count);
        if payload.len() as u64 != expected {
            return Err(MediaError::InvalidAsset(format!(
                "payload is {} bytes, {} frames of {} need {}",
                payload.len(),
                frame_count,
                frame_size_bytes(width, height),
                expected
            )));
        }
        Ok(Self {
            video_id,
            codec_id,
            width,
            height,
            fps,
            frame_count,
            payload,
        })
    }

    pub fn frame_size(&self) -> u64 {
        frame_size_bytes(self.width, self.height)
    }

    /// Encoded container size, header included.
    pub fn container_len(&self) -> u64 {
        CONTAINER_HEADER_LEN as u64 + self.payload.len() as u64
    }

    pub fn variant(&self) -> FormatVariantKey {
        FormatVariantKey {
            codec_id: self.codec_id,
            width: self.width,
            height: self.height,
            fps: self.fps,
        }
    }
}

/// The format a given mobile device can play. Targets are capped at CIF;
/// this gateway models the CIF/QCIF device class and only reduces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub profile_id: ProfileId,
    pub codec_id: u8,
    pub target_width: u16,
    pub target_height: u16,
    pub max_fps: u8,
}

impl DeviceProfile {
    pub fn new(
        profile_id: ProfileId,
        codec_id: u8,
        target_width: u16,
        target_height: u16,
        max_fps: u8,
    ) -> Result<Self, MediaError> {
        if target_width == 0 || target_height == 0 {
            return Err(MediaError::InvalidProfile("zero target dimension".into()));
        }
        if target_width > CIF_WIDTH || target_height > CIF_HEIGHT {
            return Err(MediaError::InvalidProfile(format!(
                "target {}x{} exceeds CIF ({}x{})",
                target_width, target_height, CIF_WIDTH, CIF_HEIGHT
            )));
        }
        if max_fps == 0 {
            return Err(MediaError::InvalidProfile("max_fps must be >= 1".into()));
        }
        Ok(Self {
            profile_id,
            codec_id,
            target_width,
            target_height,
            max_fps,
        })
    }
}

/// Built-in CIF preset: 352x288 @ up to 30 fps, codec 1.
pub fn cif_profile() -> DeviceProfile {
    DeviceProfile::new(ProfileId::new("cif"), 1, CIF_WIDTH, CIF_HEIGHT, 30).unwrap()
}

/// Built-in QCIF preset: 176x144 @ up to 15 fps, codec 1.
pub fn qcif_profile() -> DeviceProfile {
    DeviceProfile::new(ProfileId::new("qcif"), 1, QCIF_WIDTH, QCIF_HEIGHT, 15).unwrap()
}

pub fn builtin_profiles() -> Vec<DeviceProfile> {
    vec![cif_profile(), qcif_profile()]
}

/// Cache discriminator for a rendition: originals and transcoded copies of
/// one video are distinct entries keyed by this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FormatVariantKey {
    pub codec_id: u8,
    pub width: u16,
    pub height: u16,
    pub fps: u8,
}

impl fmt::Display for FormatVariantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}x{}@{}",
            self.codec_id, self.width, self.height, self.fps
        )
    }
}

impl From<FormatVariantKey> for String {
    fn from(v: FormatVariantKey) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for FormatVariantKey {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl FromStr for FormatVariantKey {
    type Err = String;

    /// Parses the `codec:WxH@fps` form used in manifests and stream headers.
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("bad variant `{s}`, expected codec:WxH@fps");
        let (codec, rest) = s.split_once(':').ok_or_else(bad)?;
        let (dims, fps) = rest.split_once('@').ok_or_else(bad)?;
        let (w, h) = dims.split_once('x').ok_or_else(bad)?;
        Ok(FormatVariantKey {
            codec_id: codec.parse().map_err(|_| bad())?,
            width: w.parse().map_err(|_| bad())?,
            height: h.parse().map_err(|_| bad())?,
            fps: fps.parse().map_err(|_| bad())?,
        })
    }
}

/// Header fields of a container, decodable from its first 15 bytes. Used to
/// inspect a rendition while its fill is still in flight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerInfo {
    pub codec_id: u8,
    pub width: u16,
    pub height: u16,
    pub fps: u8,
    pub frame_count: u32,
}

impl ContainerInfo {
    pub fn variant(&self) -> FormatVariantKey {
        FormatVariantKey {
            codec_id: self.codec_id,
            width: self.width,
            height: self.height,
            fps: self.fps,
        }
    }

    pub fn frame_size(&self) -> u64 {
        frame_size_bytes(self.width, self.height)
    }

    pub fn payload_len(&self) -> u64 {
        self.frame_size() * u64::from(self.frame_count)
    }

    pub fn container_len(&self) -> u64 {
        CONTAINER_HEADER_LEN as u64 + self.payload_len()
    }

    /// Average playback bitrate in bits per second. Zero-duration assets
    /// report zero.
    pub fn playback_bitrate_bps(&self) -> u64 {
        if self.frame_count == 0 {
            return 0;
        }
        let bits = self.container_len() as u128 * 8 * u128::from(self.fps);
        (bits / u128::from(self.frame_count)).min(u128::from(u64::MAX)) as u64
    }
}

/// Serializes an asset into the frozen little-endian container layout.
pub fn encode_container(asset: &VideoAsset) -> Vec<u8> {
    let mut out = Vec::with_capacity(CONTAINER_HEADER_LEN + asset.payload.len());
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.push(CONTAINER_VERSION);
    out.push(asset.codec_id);
    out.extend_from_slice(&asset.width.to_le_bytes());
    out.extend_from_slice(&asset.height.to_le_bytes());
    out.push(asset.fps);
    out.extend_from_slice(&asset.frame_count.to_le_bytes());
    out.extend_from_slice(&asset.payload);
    out
}

/// Decodes and validates the 15-byte header without touching the payload.
pub fn peek_header(bytes: &[u8]) -> Result<ContainerInfo, MediaError> {
    if bytes.len() < 4 {
        return Err(MediaError::TruncatedHeader(bytes.len()));
    }
    if bytes[..4] != CONTAINER_MAGIC {
        return Err(MediaError::BadMagic);
    }
    if bytes.len() < CONTAINER_HEADER_LEN {
        return Err(MediaError::TruncatedHeader(bytes.len()));
    }
    if bytes[4] != CONTAINER_VERSION {
        return Err(MediaError::BadVersion(bytes[4]));
    }
    let info = ContainerInfo {
        codec_id: bytes[5],
        width: u16::from_le_bytes([bytes[6], bytes[7]]),
        height: u16::from_le_bytes([bytes[8], bytes[9]]),
        fps: bytes[10],
        frame_count: u32::from_le_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]),
    };
    if info.width == 0 || info.height == 0 {
        return Err(MediaError::InvalidHeader("zero dimension"));
    }
    if info.fps == 0 {
        return Err(MediaError::InvalidHeader("zero fps"));
    }
    Ok(info)
}

/// Inverse of [`encode_container`]. The id is supplied by the caller since
/// the layout does not carry it.
pub fn decode_container(video_id: VideoId, bytes: &[u8]) -> Result<VideoAsset, MediaError> {
    let info = peek_header(bytes)?;
    let available = (bytes.len() - CONTAINER_HEADER_LEN) as u64;
    let expected = u128::from(info.frame_size()) * u128::from(info.frame_count);
    if expected > u128::from(available) {
        return Err(MediaError::TruncatedPayload {
            expected: expected.min(u128::from(u64::MAX)) as u64,
            available,
        });
    }
    let expected = expected as u64;
    if available > expected {
        return Err(MediaError::TrailingBytes(available - expected));
    }
    VideoAsset::new(
        video_id,
        info.codec_id,
        info.width,
        info.height,
        info.fps,
        info.frame_count,
        bytes[CONTAINER_HEADER_LEN..].to_vec(),
    )
}

/// True when the asset plays on the profile as-is: codec and dimensions
/// equal the targets and the frame rate does not exceed the cap.
pub fn matches_profile(asset: &VideoAsset, profile: &DeviceProfile) -> bool {
    header_matches_profile(&asset_info(asset), profile)
}

/// Same rule applied to bare header fields.
pub fn header_matches_profile(info: &ContainerInfo, profile: &DeviceProfile) -> bool {
    info.codec_id == profile.codec_id
        && info.width == profile.target_width
        && info.height == profile.target_height
        && info.fps <= profile.max_fps
}

/// Variant-key form of the same rule, for cache index scans.
pub fn key_matches_profile(key: &FormatVariantKey, profile: &DeviceProfile) -> bool {
    key.codec_id == profile.codec_id
        && key.width == profile.target_width
        && key.height == profile.target_height
        && key.fps <= profile.max_fps
}

fn asset_info(asset: &VideoAsset) -> ContainerInfo {
    ContainerInfo {
        codec_id: asset.codec_id,
        width: asset.width,
        height: asset.height,
        fps: asset.fps,
        frame_count: asset.frame_count,
    }
}

/// Wrapping byte sum of a frame; appended to shrunken frames so a downscale
/// can be verified against its source.
pub fn additive_checksum(bytes: &[u8]) -> u32 {
    bytes
        .iter()
        .fold(0u32, |acc, &b| acc.wrapping_add(u32::from(b)))
}

/// 1-based input ordinals kept when decimating `in_fps` to `out_fps`:
/// ordinal `i` survives iff `floor(i*out/in) > floor((i-1)*out/in)`.
pub fn kept_frame_ordinals(frame_count: u32, in_fps: u8, out_fps: u8) -> Vec<u32> {
    let (inf, outf) = (u64::from(in_fps), u64::from(out_fps.min(in_fps)));
    (1..=u64::from(frame_count))
        .filter(|&i| (i * outf) / inf > ((i - 1) * outf) / inf)
        .map(|i| i as u32)
        .collect()
}

/// Closed form of `kept_frame_ordinals(..).len()`.
pub fn kept_frame_count(frame_count: u32, in_fps: u8, out_fps: u8) -> u32 {
    let outf = u64::from(out_fps.min(in_fps));
    ((u64::from(frame_count) * outf) / u64::from(in_fps)) as u32
}

fn shrink_frame(src: &[u8], out_size: usize, out: &mut Vec<u8>) {
    let prefix = out_size.saturating_sub(4);
    out.extend_from_slice(&src[..prefix]);
    let sum = additive_checksum(src).to_le_bytes();
    out.extend_from_slice(&sum[..out_size - prefix]);
}

/// Converts an asset to the profile's format. Output codec and dimensions
/// are the profile targets, output fps is `min(asset.fps, max_fps)`, frames
/// are decimated by the floor-counting rule, and each kept frame becomes the
/// first `out_size - 4` source bytes followed by a 4-byte additive checksum
/// of the whole source frame. Assets already matching the profile are
/// returned unchanged, bit for bit.
pub fn transcode(asset: &VideoAsset, profile: &DeviceProfile) -> Result<VideoAsset, MediaError> {
    if matches_profile(asset, profile) {
        return Ok(asset.clone());
    }
    if profile.target_width > asset.width || profile.target_height > asset.height {
        return Err(MediaError::UpscaleRequested {
            asset_w: asset.width,
            asset_h: asset.height,
            target_w: profile.target_width,
            target_h: profile.target_height,
        });
    }

    let out_fps = asset.fps.min(profile.max_fps);
    let in_size = asset.frame_size() as usize;
    let out_size = frame_size_bytes(profile.target_width, profile.target_height) as usize;
    let kept = kept_frame_ordinals(asset.frame_count, asset.fps, out_fps);

    let shrink_one = |ordinal: &u32| -> Vec<u8> {
        let start = (*ordinal as usize - 1) * in_size;
        let mut frame = Vec::with_capacity(out_size);
        shrink_frame(&asset.payload[start..start + in_size], out_size, &mut frame);
        frame
    };

    #[cfg(feature = "parallel")]
    let frames: Vec<Vec<u8>> = kept.par_iter().map(shrink_one).collect();
    #[cfg(not(feature = "parallel"))]
    let frames: Vec<Vec<u8>> = kept.iter().map(shrink_one).collect();

    let mut payload = Vec::with_capacity(out_size * frames.len());
    for f in &frames {
        payload.extend_from_slice(f);
    }

    VideoAsset::new(
        asset.video_id.clone(),
        profile.codec_id,
        profile.target_width,
        profile.target_height,
        out_fps,
        kept.len() as u32,
        payload,
    )
}
