//! Binary interchange formats.
//!
//! Blob record (all integers little-endian):
//!
//! ```text
//! "NLRB" | version u8 = 1 | dtype u8 (0 f32, 1 f64) | reserved u16 = 0
//! ndim u32 | ndim x u64 dims | row-major payload
//! ```
//!
//! Params file: `"NLRP" | version u8 = 1 | count u32`, then per entry a u16
//! name length, the UTF-8 name and a complete blob record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::block::{BlockDims, NlRoiParams, PARAM_NAMES};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{DType, Real, Tensor};

pub const BLOB_MAGIC: &[u8; 4] = b"NLRB";
pub const PARAMS_MAGIC: &[u8; 4] = b"NLRP";
pub const FORMAT_VERSION: u8 = 1;

/// A tensor whose precision is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (AnyTensor::F32(a), AnyTensor::F32(b)) => a.bit_eq(b),
            (AnyTensor::F64(a), AnyTensor::F64(b)) => a.bit_eq(b),
            _ => false,
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Appends the blob record for `t` to `out`.
pub fn encode_blob_into<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(BLOB_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_blob<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_blob_into(t, &mut out);
    out
}

/// Decodes a buffer holding exactly one blob record.
pub fn decode_blob(bytes: &[u8]) -> Result<AnyTensor, FormatError> {
    let mut reader = Reader::new(bytes);
    let t = reader.blob()?;
    reader.finish()?;
    Ok(t)
}

/// Decodes a single-precision blob, rejecting other dtypes.
pub fn decode_blob_as<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    into_precision(decode_blob(bytes)?, "blob")
}

fn into_precision<T: Real>(t: AnyTensor, name: &str) -> Result<Tensor<T>> {
    let found = t.dtype();
    let cast: Option<Tensor<T>> = match t {
        AnyTensor::F32(t) if T::DTYPE == DType::F32 => Some(t.cast()),
        AnyTensor::F64(t) if T::DTYPE == DType::F64 => Some(t.cast()),
        _ => None,
    };
    cast.ok_or_else(|| {
        FormatError::MixedDtype {
            name: name.to_string(),
            expected: T::DTYPE.name(),
            found: found.name(),
        }
        .into()
    })
}

pub fn save_blob<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_blob(t)).map_err(|e| Error::io(path, e))
}

pub fn load_blob(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_blob(&bytes)?)
}

pub fn encode_params<T: Real>(params: &NlRoiParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(PARAM_NAMES.len() as u32).to_le_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_blob_into(t, &mut out);
    }
    out
}

/// Block parameters whose precision is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyParams {
    F32(NlRoiParams<f32>),
    F64(NlRoiParams<f64>),
}

impl AnyParams {
    pub fn dtype(&self) -> DType {
        match self {
            AnyParams::F32(_) => DType::F32,
            AnyParams::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> BlockDims {
        match self {
            AnyParams::F32(p) => p.dims(),
            AnyParams::F64(p) => p.dims(),
        }
    }
}

/// Decodes a params file. Entries may appear in any order but must be
/// exactly the six block tensors, all of one precision, with consistent
/// shapes.
pub fn decode_params(bytes: &[u8]) -> Result<AnyParams> {
    let mut reader = Reader::new(bytes);
    reader.magic(PARAMS_MAGIC)?;
    reader.version()?;
    let count = reader.u32("count")? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let len = reader.u16("name length")? as usize;
        let name = std::str::from_utf8(reader.take("name", len)?)
            .map_err(|_| FormatError::NameEncoding)?
            .to_string();
        if !PARAM_NAMES.contains(&name.as_str()) {
            return Err(FormatError::UnknownEntry(name).into());
        }
        let blob = reader.blob()?;
        if entries.insert(name.clone(), blob).is_some() {
            return Err(FormatError::DuplicateEntry(name).into());
        }
    }
    reader.finish()?;
    if let Some(missing) = PARAM_NAMES.iter().find(|n| !entries.contains_key(**n)) {
        return Err(FormatError::MissingEntry(missing.to_string()).into());
    }
    let dtype = entries["w_phi"].dtype();
    match dtype {
        DType::F32 => Ok(AnyParams::F32(assemble(&mut entries)?)),
        DType::F64 => Ok(AnyParams::F64(assemble(&mut entries)?)),
    }
}

fn assemble<T: Real>(entries: &mut BTreeMap<String, AnyTensor>) -> Result<NlRoiParams<T>> {
    let mut tensors = Vec::with_capacity(6);
    for name in PARAM_NAMES {
        let t = entries.remove(name).expect("presence checked");
        tensors.push(into_precision::<T>(t, name)?);
    }
    let [w_phi, w_psi, g1_w, g1_b, g2_w, g2_b]: [Tensor<T>; 6] =
        tensors.try_into().expect("six parameters");
    NlRoiParams::new(w_phi, w_psi, g1_w, g1_b, g2_w, g2_b)
}

pub fn save_params<T: Real>(params: &NlRoiParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<AnyParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

/// Bounds-checked cursor; never reads past the end of its buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, field: &'static str, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                field,
                needed: n,
                available,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(field, 1)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(field, 2)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take("magic", 4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        match self.u8("version")? {
            FORMAT_VERSION => Ok(()),
            v => Err(FormatError::UnsupportedVersion(v)),
        }
    }

    fn blob(&mut self) -> Result<AnyTensor, FormatError> {
        self.magic(BLOB_MAGIC)?;
        self.version()?;
        let code = self.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or(FormatError::UnsupportedDtype(code))?;
        let reserved = self.u16("reserved")?;
        if reserved != 0 {
            return Err(FormatError::Reserved(reserved));
        }
        let ndim = self.u32("ndim")? as usize;
        if ndim == 0 {
            return Err(FormatError::ZeroRank);
        }
        // Each dim costs 8 bytes; check before allocating for a hostile ndim.
        let dims_bytes = ndim.checked_mul(8).ok_or(FormatError::DimsOverflow(vec![]))?;
        if dims_bytes > self.bytes.len() - self.pos {
            return Err(FormatError::Truncated {
                field: "dims",
                needed: dims_bytes,
                available: self.bytes.len() - self.pos,
            });
        }
        let dims: Vec<u64> = (0..ndim).map(|_| self.u64("dims")).collect::<Result<_, _>>()?;
        let payload_len = dims
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| FormatError::DimsOverflow(dims.clone()))?;
        let payload = self.take("payload", payload_len)?;
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(decode_payload(shape, payload)),
            DType::F64 => AnyTensor::F64(decode_payload(shape, payload)),
        })
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::TrailingBytes(extra)),
        }
    }
}

fn decode_payload<T: Real>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data).expect("payload length matches dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_encoded_scalar_blob() {
        let t = Tensor::<f32>::new([1], vec![1.0]).unwrap();
        let expected: &[u8] = &[
            0x4E, 0x4C, 0x52, 0x42, 0x01, 0x00, 0x00, 0x00, //
            0x01, 0x00, 0x00, 0x00, //
            0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, //
            0x00, 0x00, 0x80, 0x3F,
        ];
        assert_eq!(encode_blob(&t), expected);
        assert!(decode_blob(expected).unwrap().bit_eq(&t.into()));
    }

    #[test]
    fn header_validation_errors_are_distinct() {
        let good = encode_blob(&Tensor::<f64>::new([2], vec![1.0, -2.0]).unwrap());

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_blob(&bad), Err(FormatError::BadMagic { found, .. }) if found == "XXXX"));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode_blob(&bad), Err(FormatError::UnsupportedVersion(2)));

        let mut bad = good.clone();
        bad[5] = 7;
        assert_eq!(decode_blob(&bad), Err(FormatError::UnsupportedDtype(7)));

        let mut bad = good.clone();
        bad[6] = 1;
        assert_eq!(decode_blob(&bad), Err(FormatError::Reserved(1)));

        let bad = &good[..good.len() - 1];
        assert!(matches!(decode_blob(bad), Err(FormatError::Truncated { field: "payload", .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(decode_blob(&bad), Err(FormatError::TrailingBytes(1)));

        assert!(matches!(decode_blob(&good[..3]), Err(FormatError::Truncated { field: "magic", .. })));
    }

    #[test]
    fn hostile_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(BLOB_MAGIC);
        bytes.extend_from_slice(&[1, 0, 0, 0]);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_blob(&bytes), Err(FormatError::Truncated { field: "dims", .. })));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(BLOB_MAGIC);
        bytes.extend_from_slice(&[1, 1, 0, 0]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_blob(&bytes), Err(FormatError::DimsOverflow(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(BLOB_MAGIC);
        bytes.extend_from_slice(&[1, 0, 0, 0]);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode_blob(&bytes), Err(FormatError::ZeroRank));
    }

    #[test]
    fn seeded_blob_roundtrip_is_bit_exact() {
        let t = Tensor::<f32>::uniform([2, 3, 2, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(decode_blob(&encode_blob(&t)).unwrap().bit_eq(&t.clone().into()));
        assert!(decode_blob_as::<f32>(&encode_blob(&t)).unwrap().bit_eq(&t));
        assert!(decode_blob_as::<f64>(&encode_blob(&t)).is_err());
    }

    #[test]
    fn params_roundtrip_and_layout() {
        let p = init_params::<f64>(BlockDims::new(4, 2, 3).unwrap(), 5);
        let bytes = encode_params(&p);
        assert_eq!(&bytes[..4], b"NLRP");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &6u32.to_le_bytes());
        assert_eq!(&bytes[9..11], &5u16.to_le_bytes());
        assert_eq!(&bytes[11..16], b"w_phi");
        assert_eq!(&bytes[16..20], b"NLRB");
        assert_eq!(decode_params(&bytes).unwrap(), AnyParams::F64(p));
    }

    fn params_file(entries: &[(&str, AnyTensor)]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.push(1);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match t {
                AnyTensor::F32(t) => encode_blob_into(t, &mut out),
                AnyTensor::F64(t) => encode_blob_into(t, &mut out),
            }
        }
        out
    }

    #[test]
    fn params_entry_validation() {
        let p = init_params::<f32>(BlockDims::new(2, 1, 1).unwrap(), 1);
        let mut entries: Vec<(&str, AnyTensor)> = p.named().map(|(n, t)| (n, t.clone().into())).collect();

        // Order does not matter.
        entries.reverse();
        assert_eq!(decode_params(&params_file(&entries)).unwrap(), AnyParams::F32(p.clone()));

        let mut dup = entries.clone();
        dup.push(("w_phi", p.w_phi().clone().into()));
        assert!(matches!(
            decode_params(&params_file(&dup)),
            Err(Error::Format(FormatError::DuplicateEntry(n))) if n == "w_phi"
        ));

        let missing = &entries[1..];
        assert!(matches!(
            decode_params(&params_file(missing)),
            Err(Error::Format(FormatError::MissingEntry(_)))
        ));

        let mut unknown = entries.clone();
        unknown.push(("bias", p.g1_b().clone().into()));
        assert!(matches!(
            decode_params(&params_file(&unknown)),
            Err(Error::Format(FormatError::UnknownEntry(n))) if n == "bias"
        ));

        let mut mixed = entries.clone();
        mixed[0].1 = AnyTensor::F64(p.g2_b().cast());
        assert!(matches!(
            decode_params(&params_file(&mixed)),
            Err(Error::Format(FormatError::MixedDtype { .. }))
        ));

        let mut wrong_shape = entries.clone();
        let idx = wrong_shape.iter().position(|(n, _)| *n == "g2_w").unwrap();
        wrong_shape[idx].1 = Tensor::<f32>::zeros([1, 1, 1, 1]).into();
        assert!(matches!(
            decode_params(&params_file(&wrong_shape)),
            Err(Error::InvalidArgument { .. })
        ));

        let mut trailing = params_file(&entries);
        trailing.extend_from_slice(b"junk");
        assert!(matches!(
            decode_params(&trailing),
            Err(Error::Format(FormatError::TrailingBytes(4)))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::uniform([3, 2], -5.0, 5.0, &mut ChaCha8Rng::seed_from_u64(3));
        let path = dir.path().join("t.blob");
        save_blob(&t, &path).unwrap();
        assert!(load_blob(&path).unwrap().bit_eq(&t.into()));
        let err = load_blob(dir.path().join("absent.blob")).unwrap_err().to_string();
        assert!(err.contains("absent.blob"), "{err}");
    }
}
