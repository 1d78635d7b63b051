//! Binary netpbm codecs: P5 (graymap) in and out, P6 (pixmap) out.

use crate::error::{Error, Result};
use crate::graph_builder::Image;

/// Decoded header plus the offset of the first raster byte.
struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("not a netpbm file".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("malformed header at byte {pos}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "header value out of range".to_string())?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let [width, height, maxval] = fields;
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes a binary PGM. Samples are divided by the file's maxval (255 for 8-bit files).
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(format!(
            "expected binary graymap P5, found {}",
            String::from_utf8_lossy(&h.magic)
        ));
    }
    if h.maxval == 0 || h.maxval > 255 {
        return Err(format!("only 8-bit graymaps are supported (maxval {})", h.maxval));
    }
    let n = h.width.checked_mul(h.height).ok_or("image too large")?;
    let raster = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| format!("raster truncated: need {n} bytes"))?;
    let scale = h.maxval as f64;
    let values = raster.iter().map(|&b| (f64::from(b) / scale).min(1.0)).collect();
    Image::new(h.height, h.width, values).map_err(|e| e.to_string())
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_u8());
    out
}

/// Encodes interleaved RGB bytes as P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidInput(format!(
            "{width}x{height} RGB image needs {} bytes, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Decodes a binary P6 into `(width, height, rgb)`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" || h.maxval != 255 {
        return Err("expected 8-bit P6".into());
    }
    let n = h.width * h.height * 3;
    let raster = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or("raster truncated")?;
    Ok((h.width, h.height, raster.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = Image::from_u8(2, 3, &[0, 51, 102, 153, 204, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_and_maxval() {
        let mut bytes = b"P5 # made by hand\n2 1\n# another\n15\n".to_vec();
        bytes.extend([0, 15]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.values(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n65535\n").is_err());
        assert!(decode_pgm(b"GIF89a").is_err());
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let rgb = [255, 0, 0, 10, 20, 30];
        let bytes = encode_ppm(2, 1, &rgb).unwrap();
        assert_eq!(decode_ppm(&bytes).unwrap(), (2, 1, rgb.to_vec()));
        assert!(encode_ppm(2, 2, &rgb).is_err());
    }
}
