//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "GRIDSAGE"
//! version      u32
//! input dims   u32 height, u32 width, u32 channels
//! layers       u32 count, then (u32 channels, u32 pool) per layer
//! reduction    u32
//! update rule  u8 (0 = product, 1 = sum)
//! attention    u8 (0 / 1)
//! head         u32 count, then u32 width per hidden layer
//! classes      u32 count, then (u32 byte length, UTF-8 bytes) per name
//! weights      f64 per value, tensors in declaration order
//! checksum     u32 CRC-32 of every preceding byte
//! ```

use super::{param_layout, Architecture, LayerSpec, ModelParams, UpdateRule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRIDSAGE";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_model(model: &ModelParams) -> Vec<u8> {
    let arch = &model.arch;
    let mut out = Vec::with_capacity(64 + model.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, arch.input_height);
    put_u32(&mut out, arch.input_width);
    put_u32(&mut out, arch.in_channels);
    put_u32(&mut out, arch.layers.len());
    for layer in &arch.layers {
        put_u32(&mut out, layer.channels);
        put_u32(&mut out, layer.pool);
    }
    put_u32(&mut out, arch.reduction);
    out.push(match arch.update_rule {
        UpdateRule::Product => 0,
        UpdateRule::Sum => 1,
    });
    out.push(u8::from(arch.attention));
    put_u32(&mut out, arch.head_hidden.len());
    for &w in &arch.head_hidden {
        put_u32(&mut out, w);
    }
    put_u32(&mut out, arch.class_names.len());
    for name in &arch.class_names {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
    }
    for p in model.tensors() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corruption(format!("unexpected end of data at byte {}", self.pos))
        })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Length prefix that must fit in the remaining bytes at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u32()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Corruption(format!("implausible count {n}")));
        }
        Ok(n)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corruption("missing GRIDSAGE header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Corruption("file truncated before checksum".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corruption(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }

    let mut r = Reader { buf: body, pos: 12 };
    let input_height = r.u32()?;
    let input_width = r.u32()?;
    let in_channels = r.u32()?;
    let n_layers = r.count(8)?;
    let layers = (0..n_layers)
        .map(|_| {
            Ok(LayerSpec {
                channels: r.u32()?,
                pool: r.u32()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reduction = r.u32()?;
    let update_rule = match r.u8()? {
        0 => UpdateRule::Product,
        1 => UpdateRule::Sum,
        other => return Err(Error::Corruption(format!("unknown update rule tag {other}"))),
    };
    let attention = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Corruption(format!("bad attention flag {other}"))),
    };
    let n_hidden = r.count(4)?;
    let head_hidden = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_classes = r.count(4)?;
    let class_names = (0..n_classes)
        .map(|_| {
            let len = r.count(1)?;
            String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Corruption("class name is not UTF-8".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        input_height,
        input_width,
        in_channels,
        layers,
        reduction,
        update_rule,
        attention,
        head_hidden,
        class_names,
    };
    arch.validate()
        .map_err(|e| Error::Corruption(format!("invalid architecture: {e}")))?;

    let layout = param_layout(&arch);
    let total: usize = layout.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
    if total.saturating_mul(8) != body.len() - r.pos {
        return Err(Error::Corruption(format!(
            "expected {} weight bytes, found {}",
            total.saturating_mul(8),
            body.len() - r.pos
        )));
    }
    let tensors = layout
        .into_iter()
        .map(|(_, _, shape)| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(arch, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn model() -> ModelParams {
        let mut arch = Architecture::default_for(8, 8, vec!["2S1".into(), "BTR70".into(), "T72".into()]);
        arch.layers.truncate(2);
        ModelParams::init(arch, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode_model(&model());
        for cut in [bytes.len() - 1, bytes.len() / 2, 20, 13] {
            assert!(matches!(decode_model(&bytes[..cut]), Err(Error::Corruption(_))), "cut {cut}");
        }
        assert!(matches!(decode_model(b"nope"), Err(Error::Corruption(_))));
    }

    #[test]
    fn flipped_weight_bit_is_corruption() {
        let mut bytes = encode_model(&model());
        let i = bytes.len() - 40;
        bytes[i] ^= 0x10;
        assert!(matches!(decode_model(&bytes), Err(Error::Corruption(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = encode_model(&model());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        match decode_model(&bytes) {
            Err(Error::UnsupportedVersion { found, supported }) => {
                assert_eq!((found, supported), (2, FORMAT_VERSION));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
