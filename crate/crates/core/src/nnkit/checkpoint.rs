//! TPNN checkpoint files.
//!
//! ```text
//! "TPNN" | version u32 (=1) | tensor_count u32 | tensors...
//! has_optimizer u32 (0 or 1) | [step u64 | tensor_count u32 | tensors...]
//! tensor: name_len u32 | name (UTF-8) | ndim u32 | dims u32 * ndim | f32 * prod(dims)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::tensor::{Scalar, Tensor};
use crate::error::bail;
use crate::pcseq::Reader;
use crate::Result;

pub const MAGIC: &[u8; 4] = b"TPNN";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_scalars<F: Scalar>(name: String, shape: &[usize], data: &[F]) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
            data: data.iter().map(|x| x.to_f32().unwrap()).collect(),
        }
    }

    pub fn from_tensor<F: Scalar>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        Self::from_scalars(name.into(), t.shape(), t.data())
    }

    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&x| F::lit(x as f64)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

fn put_tensors(buf: &mut Vec<u8>, tensors: &[NamedTensor]) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn get_tensors(r: &mut Reader<'_>) -> Result<Vec<NamedTensor>> {
    let count = r.u32()? as usize;
    // name_len + ndim words at minimum
    r.ensure(count.saturating_mul(8))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| crate::Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim > MAX_NDIM {
            bail!(Format, "tensor {name} has {ndim} dimensions");
        }
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n else {
            bail!(Format, "tensor {name} shape {shape:?} overflows");
        };
        r.ensure(n.saturating_mul(4))?;
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_tensors(&mut buf, &self.tensors);
        match &self.optimizer {
            None => buf.extend_from_slice(&0u32.to_le_bytes()),
            Some(o) => {
                buf.extend_from_slice(&1u32.to_le_bytes());
                buf.extend_from_slice(&o.step.to_le_bytes());
                put_tensors(&mut buf, &o.tensors);
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            bail!(Format, "bad magic, expected TPNN");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let tensors = get_tensors(&mut r)?;
        let optimizer = match r.u32()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                Some(OptimizerState {
                    step,
                    tensors: get_tensors(&mut r)?,
                })
            }
            other => bail!(Format, "bad optimizer flag {other}"),
        };
        if r.remaining() != 0 {
            bail!(Format, "{} trailing bytes after checkpoint", r.remaining());
        }
        Ok(Self { tensors, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                NamedTensor {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25],
                },
                NamedTensor {
                    name: "scalar".into(),
                    shape: vec![],
                    data: vec![0.5],
                },
            ],
            optimizer: Some(OptimizerState {
                step: 17,
                tensors: vec![NamedTensor {
                    name: "adam.m.a.weight".into(),
                    shape: vec![1],
                    data: vec![0.25],
                }],
            }),
        }
    }

    #[test]
    fn round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tpnn");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.encode(), ck.encode());
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(Checkpoint::decode(&bad), Err(crate::Error::Format(_))));
        for cut in [2, 9, 20, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            tensors in prop::collection::vec(
                ("[a-z.]{0,12}", prop::collection::vec(1usize..4, 0..3), any::<u32>()),
                0..4,
            ),
            step in prop::option::of(any::<u64>()),
        ) {
            let tensors: Vec<NamedTensor> = tensors
                .into_iter()
                .map(|(name, shape, bits)| {
                    let n = shape.iter().product();
                    let data = (0..n).map(|i| f32::from_bits(bits.wrapping_add(i as u32 * 7919))).collect();
                    NamedTensor { name, shape, data }
                })
                .collect();
            let ck = Checkpoint {
                optimizer: step.map(|step| OptimizerState { step, tensors: tensors.clone() }),
                tensors,
            };
            let bytes = ck.encode();
            prop_assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
        }
    }
}
