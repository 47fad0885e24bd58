//! The `.mcuc` progressive frame format and the length-prefixed video
//! container.
//!
//! A frame is a 16-byte header followed by one segment per transmitted
//! channel, in significance order:
//!
//! ```text
//! header:  "MCUC" | version u8 | flags u8 | width u16le | height u16le
//!          | channels u8 | present u8 | 4 zero bytes
//! segment: index u8 | scale f32le | zero_point u8 | packed 5-bit codes
//! ```
//!
//! Codes are packed LSB-first in raster order; the last payload byte is
//! zero-padded. Cutting a stream after any segment and patching `present`
//! yields a valid frame.

use crate::error::{contract, Error, Result};
use crate::model::DOWNSAMPLE;
use crate::quant::{ChannelQuantParams, QuantizedChannel, QuantizedLatent, LATENT_BITS};

pub const MAGIC: [u8; 4] = *b"MCUC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Bytes of per-channel side information in front of each payload.
pub const SEGMENT_OVERHEAD: usize = 6;

const PRESENT_OFFSET: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u8,
    pub flags: u8,
    pub width: u16,
    pub height: u16,
    pub channels: u8,
    pub present: u8,
}

impl FrameHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        out[4] = self.version;
        out[5] = self.flags;
        out[6..8].copy_from_slice(&self.width.to_le_bytes());
        out[8..10].copy_from_slice(&self.height.to_le_bytes());
        out[10] = self.channels;
        out[PRESENT_OFFSET] = self.present;
        out
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let seen = &bytes[..bytes.len().min(4)];
        if !MAGIC.starts_with(seen) {
            return Err(Error::Format("bad magic, expected \"MCUC\"".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                offset: bytes.len(),
                detail: format!("header needs {HEADER_LEN} bytes"),
            });
        }
        let header = FrameHeader {
            version: bytes[4],
            flags: bytes[5],
            width: u16::from_le_bytes([bytes[6], bytes[7]]),
            height: u16::from_le_bytes([bytes[8], bytes[9]]),
            channels: bytes[10],
            present: bytes[PRESENT_OFFSET],
        };
        if header.version != VERSION {
            return Err(Error::Format(format!("unsupported version {}", header.version)));
        }
        if header.flags != 0 || bytes[12..16] != [0; 4] {
            return Err(Error::Format("nonzero flags or reserved bytes".into()));
        }
        let (w, h) = (header.width as usize, header.height as usize);
        if w == 0 || h == 0 || w % DOWNSAMPLE != 0 || h % DOWNSAMPLE != 0 {
            return Err(Error::Corrupt(format!("frame size {w}x{h} not a positive multiple of 8")));
        }
        if header.present == 0 || header.present > header.channels {
            return Err(Error::Corrupt(format!(
                "{} channels present out of {}",
                header.present, header.channels
            )));
        }
        Ok(header)
    }

    /// Latent (height, width).
    pub fn latent_dims(&self) -> (usize, usize) {
        (self.height as usize / DOWNSAMPLE, self.width as usize / DOWNSAMPLE)
    }
}

/// Packed payload bytes for one channel of a `width × height` frame.
pub fn payload_len(width: usize, height: usize) -> usize {
    ((width / DOWNSAMPLE) * (height / DOWNSAMPLE) * LATENT_BITS as usize).div_ceil(8)
}

/// Serialized size of a frame carrying `c` channels.
pub fn frame_size(width: usize, height: usize, c: usize) -> usize {
    HEADER_LEN + c * (SEGMENT_OVERHEAD + payload_len(width, height))
}

fn pack_codes(codes: &[u8], out: &mut Vec<u8>) {
    let bits = LATENT_BITS as usize;
    let start = out.len();
    out.resize(start + (codes.len() * bits).div_ceil(8), 0);
    for (i, &code) in codes.iter().enumerate() {
        let pos = i * bits;
        let word = (code as u16) << (pos % 8);
        out[start + pos / 8] |= word as u8;
        if pos % 8 + bits > 8 {
            out[start + pos / 8 + 1] |= (word >> 8) as u8;
        }
    }
}

fn unpack_codes(payload: &[u8], count: usize) -> Vec<u8> {
    let bits = LATENT_BITS as usize;
    let mask = (1u16 << bits) - 1;
    (0..count)
        .map(|i| {
            let pos = i * bits;
            let lo = payload[pos / 8] as u16;
            let hi = payload.get(pos / 8 + 1).copied().unwrap_or(0) as u16;
            (((lo | (hi << 8)) >> (pos % 8)) & mask) as u8
        })
        .collect()
}

/// Serializes the channels present in `q`.
pub fn serialize_frame(q: &QuantizedLatent) -> Result<Vec<u8>> {
    let c = q.present();
    if c == 0 {
        return Err(Error::EmptyPrefix);
    }
    let (width, height) = (q.width * DOWNSAMPLE, q.height * DOWNSAMPLE);
    if width > u16::MAX as usize || height > u16::MAX as usize || q.total_channels > 255 || c > q.total_channels {
        return Err(contract(format!(
            "{width}x{height} frame with {c}/{} channels does not fit the header",
            q.total_channels
        )));
    }
    let header = FrameHeader {
        version: VERSION,
        flags: 0,
        width: width as u16,
        height: height as u16,
        channels: q.total_channels as u8,
        present: c as u8,
    };
    let mut out = Vec::with_capacity(frame_size(width, height, c));
    out.extend_from_slice(&header.encode());
    let count = q.width * q.height;
    for (i, ch) in q.channels.iter().enumerate() {
        if ch.codes.len() != count || ch.params.bits != LATENT_BITS {
            return Err(contract(format!("channel {i} is not a {count}-code {LATENT_BITS}-bit channel")));
        }
        out.push(i as u8);
        out.extend_from_slice(&ch.params.scale.to_le_bytes());
        out.push(ch.params.zero_point);
        pack_codes(&ch.codes, &mut out);
    }
    debug_assert_eq!(out.len(), frame_size(width, height, c));
    Ok(out)
}

/// Parses a frame. Streams with fewer channels present than the latent
/// holds are valid; `header.present` reports how many arrived.
pub fn deserialize_frame(bytes: &[u8]) -> Result<(QuantizedLatent, FrameHeader)> {
    let header = FrameHeader::parse(bytes)?;
    let (lh, lw) = header.latent_dims();
    let payload = payload_len(header.width as usize, header.height as usize);
    let qmax = (1u8 << LATENT_BITS) - 1;
    let mut pos = HEADER_LEN;
    let mut channels = Vec::with_capacity(header.present as usize);
    for i in 0..header.present as usize {
        let end = pos + SEGMENT_OVERHEAD + payload;
        if bytes.len() < end {
            return Err(Error::Truncated {
                offset: bytes.len(),
                detail: format!("segment {i} starting at byte {pos} needs {} bytes", end - pos),
            });
        }
        let index = bytes[pos];
        if index as usize != i {
            return Err(Error::Corrupt(format!(
                "channel index {index} at byte {pos}, expected {i} (indices must increase from 0)"
            )));
        }
        let scale = f32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().expect("4-byte slice"));
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Corrupt(format!("channel {i} has invalid scale {scale}")));
        }
        let zero_point = bytes[pos + 5];
        if zero_point > qmax {
            return Err(Error::Corrupt(format!("channel {i} zero point {zero_point} exceeds {qmax}")));
        }
        let codes = unpack_codes(&bytes[pos + SEGMENT_OVERHEAD..end], lh * lw);
        channels.push(QuantizedChannel {
            codes,
            params: ChannelQuantParams {
                scale,
                zero_point,
                bits: LATENT_BITS,
            },
        });
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after byte {pos}", bytes.len() - pos)));
    }
    Ok((
        QuantizedLatent {
            height: lh,
            width: lw,
            total_channels: header.channels as usize,
            channels,
        },
        header,
    ))
}

/// Keeps the header and the first `c` segments of a valid frame.
pub fn truncate_to_channels(bytes: &[u8], c: usize) -> Result<Vec<u8>> {
    let (_, header) = deserialize_frame(bytes)?;
    if c == 0 || c > header.present as usize {
        return Err(contract(format!("cannot keep {c} of {} channels", header.present)));
    }
    let mut out = bytes[..frame_size(header.width as usize, header.height as usize, c)].to_vec();
    out[PRESENT_OFFSET] = c as u8;
    Ok(out)
}

/// Repairs a frame that was cut exactly after a segment: keeps the complete
/// segments and patches `present` to match. A cut inside a segment (or inside
/// the header) is reported as a truncated stream.
pub fn recover_prefix(bytes: &[u8]) -> Result<Vec<u8>> {
    match deserialize_frame(bytes) {
        Ok(_) => return Ok(bytes.to_vec()),
        Err(Error::Truncated { .. }) => {}
        Err(e) => return Err(e),
    }
    let header = FrameHeader::parse(bytes)?;
    let (w, h) = (header.width as usize, header.height as usize);
    let segment = SEGMENT_OVERHEAD + payload_len(w, h);
    let body = bytes.len() - HEADER_LEN;
    let complete = body / segment;
    if complete == 0 || !body.is_multiple_of(segment) {
        return Err(Error::Truncated {
            offset: bytes.len(),
            detail: format!(
                "stream ends inside segment {complete} (segments are {segment} bytes after the {HEADER_LEN}-byte header)"
            ),
        });
    }
    let mut out = bytes.to_vec();
    out[PRESENT_OFFSET] = complete as u8;
    deserialize_frame(&out)?;
    Ok(out)
}

/// Concatenates frames, each prefixed by its u32 little-endian byte count.
pub fn write_video(frames: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(frames.iter().map(|f| f.len() + 4).sum());
    for f in frames {
        out.extend_from_slice(&(f.len() as u32).to_le_bytes());
        out.extend_from_slice(f);
    }
    out
}

/// Splits a length-prefixed frame sequence without parsing the frames.
pub fn read_video(bytes: &[u8]) -> Result<Vec<&[u8]>> {
    let mut frames = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Err(Error::Truncated {
                offset: bytes.len(),
                detail: format!("length prefix of frame {} at byte {pos}", frames.len()),
            });
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4-byte slice")) as usize;
        let start = pos + 4;
        if bytes.len() - start < len {
            return Err(Error::Truncated {
                offset: bytes.len(),
                detail: format!("frame {} at byte {start} declares {len} bytes", frames.len()),
            });
        }
        frames.push(&bytes[start..start + len]);
        pos = start + len;
    }
    Ok(frames)
}

/// Like [`read_video`], but a final frame shorter than its length prefix is
/// returned as-is instead of failing; the flag reports whether that happened.
pub fn read_video_partial(bytes: &[u8]) -> Result<(Vec<&[u8]>, bool)> {
    let mut frames = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Err(Error::Truncated {
                offset: bytes.len(),
                detail: format!("length prefix of frame {} at byte {pos}", frames.len()),
            });
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4-byte slice")) as usize;
        let start = pos + 4;
        if bytes.len() - start < len {
            frames.push(&bytes[start..]);
            return Ok((frames, true));
        }
        frames.push(&bytes[start..start + len]);
        pos = start + len;
    }
    Ok((frames, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Latent;
    use crate::quant::quantize_latent;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, h: usize, w: usize, seed: u64) -> QuantizedLatent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Latent::new(Tensor::uniform(Shape::new(1, n, h / 8, w / 8), -3.0, 2.0, &mut rng)).unwrap();
        quantize_latent(&z, LATENT_BITS)
    }

    #[test]
    fn size_formula_examples() {
        assert_eq!(payload_len(224, 224), 490);
        assert_eq!(frame_size(224, 224, 12), 5_968);
        assert_eq!(frame_size(224, 224, 1), 512);
        let q = sample(12, 224, 224, 1);
        assert_eq!(serialize_frame(&q).unwrap().len(), 5_968);
        assert_eq!(serialize_frame(&q.truncated(1).unwrap()).unwrap().len(), 512);
    }

    #[test]
    fn packing_is_lsb_first() {
        let mut out = Vec::new();
        pack_codes(&[1, 31, 0, 2], &mut out);
        assert_eq!(out, vec![0b1110_0001, 0b0000_0011, 0b0000_0001]);
        assert_eq!(unpack_codes(&out, 4), vec![1, 31, 0, 2]);
    }

    #[test]
    fn round_trip_and_truncation() {
        let q = sample(12, 48, 64, 2);
        let bytes = serialize_frame(&q).unwrap();
        let (back, header) = deserialize_frame(&bytes).unwrap();
        assert_eq!(back, q);
        assert_eq!((header.width, header.height, header.present), (64, 48, 12));
        for c in 1..=12 {
            let cut = truncate_to_channels(&bytes, c).unwrap();
            assert_eq!(cut, serialize_frame(&q.truncated(c).unwrap()).unwrap());
        }
        let same = truncate_to_channels(&bytes, 12).unwrap();
        assert_eq!(same, bytes);
        assert!(truncate_to_channels(&bytes, 0).is_err());
        assert!(truncate_to_channels(&bytes, 13).is_err());
    }

    #[test]
    fn malformed_streams() {
        let q = sample(4, 16, 16, 3);
        let bytes = serialize_frame(&q).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_frame(&bad), Err(Error::Format(_))));
        let cut = &bytes[..bytes.len() - 3];
        match deserialize_frame(cut) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("{other:?}"),
        }
        let mut swapped = bytes.clone();
        swapped[HEADER_LEN + SEGMENT_OVERHEAD + payload_len(16, 16)] = 5;
        assert!(matches!(deserialize_frame(&swapped), Err(Error::Corrupt(_))));
        assert!(matches!(deserialize_frame(&bytes[..7]), Err(Error::Truncated { offset: 7, .. })));
        // A cut exactly on a segment boundary is a valid frame once `present` agrees.
        let mut patched = bytes[..frame_size(16, 16, 2)].to_vec();
        patched[PRESENT_OFFSET] = 2;
        assert_eq!(deserialize_frame(&patched).unwrap().0, q.truncated(2).unwrap());
    }

    #[test]
    fn video_container() {
        let frames = vec![vec![1u8, 2, 3], vec![], vec![9u8; 300]];
        let bytes = write_video(&frames);
        let back = read_video(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2], &frames[2][..]);
        assert!(matches!(read_video(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let (partial, cut) = read_video_partial(&bytes[..bytes.len() - 1]).unwrap();
        assert!(cut);
        assert_eq!(partial[2].len(), 299);
    }

    #[test]
    fn prefix_recovery() {
        let q = sample(6, 32, 32, 4);
        let bytes = serialize_frame(&q).unwrap();
        assert_eq!(recover_prefix(&bytes).unwrap(), bytes);
        let at_boundary = &bytes[..frame_size(32, 32, 2)];
        assert_eq!(recover_prefix(at_boundary).unwrap(), truncate_to_channels(&bytes, 2).unwrap());
        let inside = &bytes[..frame_size(32, 32, 2) + 3];
        assert!(matches!(recover_prefix(inside), Err(Error::Truncated { .. })));
        assert!(matches!(recover_prefix(&bytes[..HEADER_LEN]), Err(Error::Truncated { .. })));
    }
}
