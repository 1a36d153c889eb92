use crate::error::{Error, Result};

use super::ImageSet;

/// Magic number of a 3-D unsigned-byte IDX tensor.
pub const IDX_IMAGES: u32 = 0x0000_0803;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Length {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file; intensities are scaled to [0, 1] by `/255`.
pub fn parse_idx(bytes: &[u8]) -> Result<ImageSet> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "magic {magic:#010x} is not an image file ({IDX_IMAGES:#010x})"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let height = be_u32(bytes, 8)? as usize;
    let width = be_u32(bytes, 12)? as usize;
    let n = count * height * width;
    let payload = &bytes[16..];
    if payload.len() < n {
        return Err(Error::Length {
            expected: 16 + n,
            found: bytes.len(),
        });
    }
    let pixels = payload[..n].iter().map(|&b| b as f32 / 255.0).collect();
    ImageSet::new(count, height, width, pixels)
}

/// Writes an IDX image file, quantizing intensities to bytes.
pub fn serialize_idx(set: &ImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.pixels().len());
    for v in [IDX_IMAGES, set.count() as u32, set.height() as u32, set.width() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(set.pixels().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(magic: u32, dims: [u32; 3]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b
    }

    #[test]
    fn parses_tiny_file() {
        let mut bytes = header(IDX_IMAGES, [1, 2, 2]);
        bytes.extend_from_slice(&[0, 255, 128, 0]);
        let set = parse_idx(&bytes).unwrap();
        assert_eq!(set.count(), 1);
        let px = set.pixels();
        assert_eq!((px[0], px[1], px[3]), (0.0, 1.0, 0.0));
        assert!((px[2] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn label_magic_is_rejected() {
        let mut bytes = header(0x0000_0801, [1, 2, 2]);
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(parse_idx(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let mut bytes = header(IDX_IMAGES, [2, 28, 28]);
        bytes.extend(std::iter::repeat_n(7u8, 1567));
        assert!(matches!(parse_idx(&bytes), Err(Error::Length { .. })));
        bytes.push(7);
        assert_eq!(parse_idx(&bytes).unwrap().count(), 2);
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(
            count in 1usize..4,
            h in 1usize..6,
            w in 1usize..6,
            seed in any::<u64>(),
        ) {
            let bytes: Vec<u8> = (0..count * h * w)
                .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 56) as u8)
                .collect();
            let mut file = header(IDX_IMAGES, [count as u32, h as u32, w as u32]);
            file.extend_from_slice(&bytes);
            let set = parse_idx(&file).unwrap();
            prop_assert_eq!(parse_idx(&serialize_idx(&set)).unwrap(), set.clone());
            prop_assert_eq!(serialize_idx(&set), file);
        }
    }
}
