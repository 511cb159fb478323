//! Binary checkpoint: `SGDM` magic, u32 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and the
//! f32 payload. Everything little-endian.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGDM";
pub const VERSION: u32 = 1;

/// Holds the model configuration inside the tensor list.
pub const CONFIG_TENSOR: &str = "__config__";

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("{name} has rank {}", t.rank())))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("{name} dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn config_tensor(c: &DenoiserConfig) -> Tensor<f32> {
    let fields = [
        c.image_size,
        c.channels,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.token_budget,
        c.vocab_size,
        c.t_train,
        c.mlp_ratio,
        c.pool_middle as usize,
    ];
    Tensor::new(&[fields.len()], fields.iter().map(|&v| v as f32).collect()).expect("nonempty")
}

fn config_from_tensor(t: &Tensor<f32>) -> Result<DenoiserConfig> {
    let v: Vec<usize> = t
        .data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::Format(format!("bad config entry {x}")))
            }
        })
        .collect::<Result<_>>()?;
    let &[image_size, channels, d_model, n_layers, n_heads, token_budget, vocab_size, t_train, mlp_ratio, pool] = v.as_slice() else {
        return Err(Error::Format(format!("config tensor has {} entries", v.len())));
    };
    Ok(DenoiserConfig {
        image_size,
        channels,
        d_model,
        n_layers,
        n_heads,
        token_budget,
        vocab_size,
        t_train,
        mlp_ratio,
        pool_middle: pool != 0,
    })
}

pub fn encode_model(model: &Denoiser<f32>) -> Result<Vec<u8>> {
    let config = config_tensor(model.config());
    let tensors = std::iter::once((CONFIG_TENSOR, &config))
        .chain(model.params().iter().map(|(k, v)| (k.as_str(), v)));
    encode_tensors(tensors)
}

pub fn decode_model(bytes: &[u8]) -> Result<Denoiser<f32>> {
    let mut tensors = decode_tensors(bytes)?.into_iter();
    let config = match tensors.next() {
        Some((name, t)) if name == CONFIG_TENSOR => config_from_tensor(&t)?,
        _ => return Err(Error::Format(format!("checkpoint does not start with {CONFIG_TENSOR}"))),
    };
    let params: IndexMap<String, Tensor<f32>> = tensors.collect();
    Denoiser::from_params(config, params)
}

pub fn save_model(model: &Denoiser<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Denoiser<f32>> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Denoiser<f32> {
        let config = DenoiserConfig {
            image_size: 8,
            d_model: 8,
            n_layers: 2,
            pool_middle: true,
            ..Default::default()
        };
        Denoiser::new(config, 5).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = small();
        let a = encode_model(&m).unwrap();
        let back = decode_model(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), a);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap();
        let b = encode_tensors([("w", &t)]).unwrap();
        let mut want = b"SGDM".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, b'w', 1, 2, 0, 0, 0]);
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_corruption() {
        let b = encode_model(&small()).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_model(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(Error::Format(_))));
    }
}
