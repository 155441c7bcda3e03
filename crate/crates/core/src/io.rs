//! Binary tensor ("EMOT") and weight checkpoint ("EMOW") files.
//!
//! Both are little-endian. A tensor file is the magic, a u32 version, a u32
//! rank, u64 dims, a dtype byte and the row-major payload. A checkpoint is the
//! magic, a u32 version, a u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, dtype byte, u32 rank, u64 dims and payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"EMOT";
pub const WEIGHTS_MAGIC: [u8; 4] = *b"EMOW";
pub const VERSION: u32 = 1;

/// Upper bound on a single tensor's element count, to reject corrupt headers
/// before allocating.
const MAX_ELEMENTS: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(Error::Format(format!("unknown dtype byte {code}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    }
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated(what))?;
    Ok(b)
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    Ok(u16::from_le_bytes(read_array(r, what)?))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r, what)?))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, what)?))
}

fn check_header(r: &mut impl Read, magic: [u8; 4]) -> Result<()> {
    let got: [u8; 4] = read_array(r, "magic")?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    Ok(())
}

fn write_shape(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn write_payload(w: &mut impl Write, t: &Tensor, dtype: DType) -> Result<()> {
    let data = t.data();
    let mut buf = Vec::with_capacity(data.len() * dtype.width());
    for &v in data.iter() {
        match dtype {
            DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_shape(r: &mut impl Read, what: &str) -> Result<Vec<usize>> {
    let rank = read_u32(r, what)?;
    if rank > 16 {
        return Err(Error::Format(format!("{what}: implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r, what)?;
        total = total.saturating_mul(d);
        shape.push(d as usize);
    }
    if total > MAX_ELEMENTS {
        return Err(Error::Format(format!("{what}: {total} elements exceeds the format limit")));
    }
    Ok(shape)
}

fn read_payload(r: &mut impl Read, shape: &[usize], dtype: DType, what: &str) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * dtype.width()];
    r.read_exact(&mut bytes).map_err(truncated(what))?;
    let data = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Tensor::from_vec(data, shape)
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_shape(w, t)?;
    w.write_all(&[dtype.code()])?;
    write_payload(w, t, dtype)
}

/// Reads one tensor and its stored dtype; the payload is widened to f64.
pub fn read_tensor(r: &mut impl Read) -> Result<(Tensor, DType)> {
    check_header(r, TENSOR_MAGIC)?;
    let shape = read_shape(r, "tensor header")?;
    let dtype = DType::from_code(read_array::<1>(r, "dtype")?[0])?;
    let t = read_payload(r, &shape, dtype, "tensor payload")?;
    expect_eof(r)?;
    Ok((t, dtype))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(read_tensor(&mut BufReader::new(File::open(path)?))?.0)
}

pub fn write_weights(w: &mut impl Write, tensors: &[(String, Tensor)], dtype: DType) -> Result<()> {
    w.write_all(&WEIGHTS_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype.code()])?;
        write_shape(w, t)?;
        write_payload(w, t, dtype)?;
    }
    Ok(())
}

/// All named tensors of a checkpoint, in file order.
pub fn read_weights(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    check_header(r, WEIGHTS_MAGIC)?;
    let count = read_u32(r, "tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = read_u16(r, "name length")? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated("tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?;
        let dtype = DType::from_code(read_array::<1>(r, "dtype")?[0])?;
        let shape = read_shape(r, &name)?;
        let t = read_payload(r, &shape, dtype, &name)?;
        out.push((name, t));
    }
    expect_eof(r)?;
    Ok(out)
}

/// Writes every tensor of `model`, buffers included, at full precision.
pub fn save_weights(path: impl AsRef<Path>, model: &dyn Module) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = crate::nn::named_tensors(model)
        .into_iter()
        .map(|(n, t, _)| (n, t))
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, &tensors, DType::F64)?;
    w.flush()?;
    Ok(())
}

/// Assigns checkpoint tensors to `model` by name. Every model tensor must be
/// present with a matching shape, and every stored tensor must be used.
pub fn assign_weights(model: &mut dyn Module, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in tensors {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let mut first_err: Option<Error> = None;
    model.visit_mut("", &mut |name, slot, _| {
        if first_err.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => first_err = Some(Error::MissingTensor(name.to_string())),
            Some(t) if t.shape() != slot.shape() => {
                first_err = Some(Error::Format(format!(
                    "shape mismatch for `{name}`: file {:?}, model {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            Some(t) => *slot = t.requires_grad(slot.requires_grad_flag()),
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    if let Some(name) = by_name.into_keys().next() {
        return Err(Error::UnexpectedTensor(name));
    }
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>, model: &mut dyn Module) -> Result<()> {
    let tensors = read_weights(&mut BufReader::new(File::open(path)?))?;
    assign_weights(model, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random;

    fn tensor_bytes(t: &Tensor, dtype: DType) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor(&mut buf, t, dtype).unwrap();
        buf
    }

    #[test]
    fn tensor_layout() {
        let t = Tensor::from_vec(vec![1.0, -2.0], &[2, 1]).unwrap();
        let b = tensor_bytes(&t, DType::F32);
        assert_eq!(&b[..4], b"EMOT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 1);
        assert_eq!(b[28], 0);
        assert_eq!(&b[29..33], &1.0f32.to_le_bytes());
        assert_eq!(&b[33..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn tensor_round_trip_bit_exact() {
        let t = random(&[2, 3, 4], 5, 3.0);
        let (back, dtype) = read_tensor(&mut tensor_bytes(&t, DType::F64).as_slice()).unwrap();
        assert_eq!(dtype, DType::F64);
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let s = Tensor::scalar(1.5);
        assert_eq!(read_tensor(&mut tensor_bytes(&s, DType::F32).as_slice()).unwrap().0.item().unwrap(), 1.5);
    }

    #[test]
    fn tensor_errors() {
        let b = tensor_bytes(&random(&[3, 3], 0, 1.0), DType::F64);
        for cut in [0, 3, 10, 20, b.len() - 1] {
            let err = read_tensor(&mut &b[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "{cut}: {err}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(read_tensor(&mut bad.as_slice()).unwrap_err().to_string().contains("magic"));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(read_tensor(&mut bad.as_slice()).unwrap_err().to_string().contains("version"));
        let mut bad = b.clone();
        bad.push(0);
        assert!(read_tensor(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn weights_layout() {
        let t = Tensor::from_vec(vec![0.5; 3], &[3]).unwrap();
        let mut b = Vec::new();
        write_weights(&mut b, &[("a.b".into(), t)], DType::F64).unwrap();
        assert_eq!(&b[..4], b"EMOW");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 3);
        assert_eq!(&b[14..17], b"a.b");
        assert_eq!(b[17], 1);
        assert_eq!(u32::from_le_bytes(b[18..22].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[22..30].try_into().unwrap()), 3);
        assert_eq!(b.len(), 30 + 24);
        let back = read_weights(&mut b.as_slice()).unwrap();
        assert_eq!(back[0].0, "a.b");
        assert_eq!(back[0].1.to_vec(), vec![0.5; 3]);
        assert!(matches!(read_weights(&mut &b[..40]), Err(Error::Format(_))));
    }
}
