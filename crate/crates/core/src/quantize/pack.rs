//! Bit-packed container for quantized matrices.
//!
//! Layout (little-endian):
//!
//! ```text
//! "QPKT" | u8 version | u8 method | u8 code width | u8 flags
//! u32 rows | u32 cols | f32 scale | i8 e_min | i8 e_max | codes...
//! ```
//!
//! Codes are written LSB-first and the final byte is zero padded.
//!
//! * binary: 1 bit, `0 -> -1`, `1 -> +1`
//! * ternary / clamped pow2ternary: 2 bits, `00 -> 0`, `01 -> +s`, `10 -> -s`,
//!   `11` reserved (`s = 1` or `2^-f`)
//! * unclamped pow2ternary: two's-complement integer `k` of `m + f + 2` bits,
//!   value `k * 2^-f`
//! * expquant: exponent code in the low bits (`0` is exact zero, `c` is
//!   `2^(e_min + c - 1)`), sign in the top bit

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{Method, QuantizerSpec};

const MAGIC: &[u8; 4] = b"QPKT";
const VERSION: u8 = 1;
const FLAG_TERNARY_CLAMP: u8 = 1;

/// Size in bytes of the fixed header preceding the codes.
pub const PACK_HEADER_LEN: usize = 22;

#[derive(Clone, Debug, PartialEq)]
pub struct PackedTensor {
    method: Method,
    rows: usize,
    cols: usize,
    code_width: u8,
    flags: u8,
    scale: f32,
    e_min: i8,
    e_max: i8,
    payload: Vec<u8>,
}

fn method_tag(m: Method) -> Result<u8> {
    Ok(match m {
        Method::Binary => 0,
        Method::Ternary => 1,
        Method::Pow2Ternary => 2,
        Method::ExpQuant => 3,
        Method::Identity => {
            return Err(Error::InvalidQuantizer(
                "identity groups have no packed form".into(),
            ))
        }
    })
}

fn method_from_tag(tag: u8) -> Result<Method> {
    Ok(match tag {
        0 => Method::Binary,
        1 => Method::Ternary,
        2 => Method::Pow2Ternary,
        3 => Method::ExpQuant,
        t => return Err(Error::format("packed tensor", format!("unknown method tag {t}"))),
    })
}

/// Number of exponent bits for an expquant range, including the zero code.
fn exponent_bits(e_min: i32, e_max: i32) -> u8 {
    let codes = (e_max - e_min + 2) as u32;
    (u32::BITS - (codes - 1).leading_zeros()) as u8
}

struct BitWriter {
    buf: Vec<u8>,
    pos: usize,
}

impl BitWriter {
    fn with_capacity(bits: usize) -> Self {
        Self {
            buf: vec![0; bits.div_ceil(8)],
            pos: 0,
        }
    }

    fn push(&mut self, code: u32, width: u8) {
        for b in 0..width {
            if code >> b & 1 == 1 {
                self.buf[self.pos / 8] |= 1 << (self.pos % 8);
            }
            self.pos += 1;
        }
    }
}

fn read_code(buf: &[u8], index: usize, width: u8) -> u32 {
    let start = index * width as usize;
    let mut code = 0u32;
    for b in 0..width as usize {
        let p = start + b;
        if buf[p / 8] >> (p % 8) & 1 == 1 {
            code |= 1 << b;
        }
    }
    code
}

impl PackedTensor {
    /// Encodes `q`, whose entries must all belong to `spec`'s value set.
    pub fn pack(q: &Matrix, spec: &QuantizerSpec) -> Result<Self> {
        spec.validate()?;
        let method = spec.method;
        method_tag(method)?;
        let f = spec.f as i32;
        let (code_width, scale, flags) = match method {
            Method::Binary => (1u8, 1.0f32, 0u8),
            Method::Ternary => (2, 1.0, 0),
            Method::Pow2Ternary if spec.ternary_clamp => {
                (2, (2.0f32).powi(-f), FLAG_TERNARY_CLAMP)
            }
            Method::Pow2Ternary => ((spec.m + spec.f + 2) as u8, (2.0f32).powi(-f), 0),
            Method::ExpQuant => (1 + exponent_bits(spec.e_min, spec.e_max), 1.0, 0),
            Method::Identity => unreachable!(),
        };
        let (e_min, e_max) = match method {
            Method::ExpQuant => (spec.e_min as i8, spec.e_max as i8),
            _ => (0, 0),
        };
        if code_width > 32 {
            return Err(Error::InvalidQuantizer(format!(
                "code width {code_width} exceeds 32 bits"
            )));
        }
        let ebits = code_width - 1;
        let mut w = BitWriter::with_capacity(q.len() * code_width as usize);
        for (index, &value) in q.data().iter().enumerate() {
            if !spec.contains(value) {
                return Err(Error::OutOfValueSet {
                    index,
                    value,
                    method: method.name(),
                });
            }
            let code = match method {
                Method::Binary => u32::from(value > 0.0),
                Method::Ternary | Method::Pow2Ternary if code_width == 2 => {
                    if value > 0.0 {
                        0b01
                    } else if value < 0.0 {
                        0b10
                    } else {
                        0b00
                    }
                }
                Method::Pow2Ternary => {
                    let k = (value * (2.0f64).powi(f)) as i64;
                    (k as u64 & ((1u64 << code_width) - 1)) as u32
                }
                Method::ExpQuant => {
                    if value == 0.0 {
                        0
                    } else {
                        let e = ((value.abs().to_bits() >> 52) & 0x7ff) as i32 - 1023;
                        let c = (e - spec.e_min + 1) as u32;
                        c | (u32::from(value < 0.0) << ebits)
                    }
                }
                _ => unreachable!(),
            };
            w.push(code, code_width);
        }
        Ok(Self {
            method,
            rows: q.rows(),
            cols: q.cols(),
            code_width,
            flags,
            scale,
            e_min,
            e_max,
            payload: w.buf,
        })
    }

    pub fn unpack(&self) -> Result<Matrix> {
        let n = self.rows * self.cols;
        let width = self.code_width;
        let scale = f64::from(self.scale);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let code = read_code(&self.payload, i, width);
            let v = match self.method {
                Method::Binary => {
                    if code == 1 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                Method::Ternary => self.decode_ternary(i, code, 1.0)?,
                Method::Pow2Ternary if width == 2 => self.decode_ternary(i, code, scale)?,
                Method::Pow2Ternary => {
                    // sign-extend
                    let shift = 64 - u32::from(width);
                    let k = ((u64::from(code) << shift) as i64) >> shift;
                    if k == 0 {
                        0.0
                    } else {
                        k as f64 * scale
                    }
                }
                Method::ExpQuant => {
                    let ebits = width - 1;
                    let c = code & ((1 << ebits) - 1);
                    let negative = code >> ebits & 1 == 1;
                    if c == 0 {
                        if negative {
                            return Err(self.bad_code(i, code));
                        }
                        0.0
                    } else {
                        let e = i32::from(self.e_min) + c as i32 - 1;
                        if e > i32::from(self.e_max) {
                            return Err(self.bad_code(i, code));
                        }
                        let mag = (2.0f64).powi(e);
                        if negative {
                            -mag
                        } else {
                            mag
                        }
                    }
                }
                Method::Identity => unreachable!(),
            };
            data.push(v);
        }
        Matrix::from_vec(self.rows, self.cols, data)
    }

    fn decode_ternary(&self, index: usize, code: u32, scale: f64) -> Result<f64> {
        match code {
            0b00 => Ok(0.0),
            0b01 => Ok(scale),
            0b10 => Ok(-scale),
            _ => Err(self.bad_code(index, code)),
        }
    }

    fn bad_code(&self, index: usize, code: u32) -> Error {
        Error::format(
            "packed tensor",
            format!("reserved code {code:#b} at entry {index}"),
        )
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn code_width(&self) -> u8 {
        self.code_width
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Header plus payload size in bytes.
    pub fn encoded_len(&self) -> usize {
        PACK_HEADER_LEN + self.payload.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u8(VERSION)?;
        w.write_u8(method_tag(self.method)?)?;
        w.write_u8(self.code_width)?;
        w.write_u8(self.flags)?;
        w.write_u32::<LittleEndian>(self.rows as u32)?;
        w.write_u32::<LittleEndian>(self.cols as u32)?;
        w.write_f32::<LittleEndian>(self.scale)?;
        w.write_i8(self.e_min)?;
        w.write_i8(self.e_max)?;
        w.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("packed tensor", "bad magic"));
        }
        let version = r.read_u8()?;
        if version != VERSION {
            return Err(Error::format(
                "packed tensor",
                format!("unsupported version {version}"),
            ));
        }
        let method = method_from_tag(r.read_u8()?)?;
        let code_width = r.read_u8()?;
        let flags = r.read_u8()?;
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let scale = r.read_f32::<LittleEndian>()?;
        let e_min = r.read_i8()?;
        let e_max = r.read_i8()?;
        let expected_width_ok = match method {
            Method::Binary => code_width == 1,
            Method::Ternary => code_width == 2,
            Method::Pow2Ternary => (2..=32).contains(&code_width),
            Method::ExpQuant => {
                e_min <= e_max
                    && code_width == 1 + exponent_bits(i32::from(e_min), i32::from(e_max))
            }
            Method::Identity => false,
        };
        if !expected_width_ok || !scale.is_finite() || scale <= 0.0 {
            return Err(Error::format(
                "packed tensor",
                format!("inconsistent header for {}", method.name()),
            ));
        }
        let bytes = (rows * cols * code_width as usize).div_ceil(8);
        let mut payload = vec![0u8; bytes];
        r.read_exact(&mut payload)?;
        Ok(Self {
            method,
            rows,
            cols,
            code_width,
            flags,
            scale,
            e_min,
            e_max,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::quantize::Variant;
    use proptest::prelude::*;

    #[test]
    fn binary_round_trip_fits_one_byte() {
        let q = Matrix::row_vector(&[-1.0, 1.0, 1.0, -1.0]);
        let p = PackedTensor::pack(&q, &QuantizerSpec::binary(Variant::Deterministic)).unwrap();
        assert_eq!(p.payload().len(), 1);
        assert_eq!(p.unpack().unwrap(), q);
    }

    #[test]
    fn value_set_violation_names_index() {
        let q = Matrix::row_vector(&[1.0, 0.3]);
        let err = PackedTensor::pack(&q, &QuantizerSpec::binary(Variant::Stochastic)).unwrap_err();
        match err {
            Error::OutOfValueSet { index, value, .. } => {
                assert_eq!(index, 1);
                assert_eq!(value, 0.3);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn ternary_thousand_values_in_250_bytes() {
        let mut rng = Rng::new(8);
        let q = Matrix::from_fn(1, 1000, |_, _| rng.below(3) as f64 - 1.0);
        let spec = QuantizerSpec::ternary(Variant::Stochastic);
        let p = PackedTensor::pack(&q, &spec).unwrap();
        assert_eq!(p.payload().len(), 250);
        let back = PackedTensor::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back.unpack().unwrap(), q);
    }

    #[test]
    fn header_is_fixed_size() {
        let q = Matrix::row_vector(&[1.0; 9]);
        let p = PackedTensor::pack(&q, &QuantizerSpec::binary(Variant::Deterministic)).unwrap();
        assert_eq!(p.to_bytes().len(), PACK_HEADER_LEN + 2);
        assert_eq!(&p.to_bytes()[..4], b"QPKT");
    }

    #[test]
    fn expquant_width_and_reserved_codes() {
        let spec = QuantizerSpec::expquant(Variant::Deterministic, -8, 0);
        let q = Matrix::row_vector(&[0.0, 1.0, -1.0, (2.0f64).powi(-8), -0.125]);
        let p = PackedTensor::pack(&q, &spec).unwrap();
        // 9 exponents + zero code -> 4 exponent bits, plus sign
        assert_eq!(p.code_width(), 5);
        assert_eq!(p.unpack().unwrap(), q);

        let mut bytes = p.to_bytes();
        // entry 0 becomes "negative zero", which is reserved
        bytes[PACK_HEADER_LEN] |= 1 << 4;
        assert!(PackedTensor::from_bytes(&bytes).unwrap().unpack().is_err());
    }

    #[test]
    fn rejects_corrupt_headers() {
        let q = Matrix::row_vector(&[1.0, -1.0]);
        let mut bytes = PackedTensor::pack(&q, &QuantizerSpec::binary(Variant::Deterministic))
            .unwrap()
            .to_bytes();
        bytes[0] = b'X';
        assert!(PackedTensor::from_bytes(&bytes).is_err());
        assert!(PackedTensor::from_bytes(&[]).is_err());
    }

    #[test]
    fn identity_is_not_packable() {
        let q = Matrix::row_vector(&[0.1]);
        assert!(PackedTensor::pack(&q, &QuantizerSpec::identity()).is_err());
    }

    proptest! {
        #[test]
        fn quantized_tensors_round_trip(
            values in prop::collection::vec(-4.0f64..4.0, 1..300),
            seed in any::<u64>(),
            which in 0usize..7,
        ) {
            let spec = [
                QuantizerSpec::binary(Variant::Stochastic),
                QuantizerSpec::ternary(Variant::Stochastic),
                QuantizerSpec::pow2ternary(1, 1, true),
                QuantizerSpec::pow2ternary(1, 2, false),
                QuantizerSpec::pow2ternary(3, 4, false),
                QuantizerSpec::expquant(Variant::Stochastic, -8, 0),
                QuantizerSpec::expquant(Variant::Deterministic, -20, 3),
            ][which];
            let mut rng = Rng::new(seed);
            let q = spec.apply(&Matrix::row_vector(&values), &mut rng);
            let p = PackedTensor::pack(&q, &spec).unwrap();
            let back = PackedTensor::from_bytes(&p.to_bytes()).unwrap().unpack().unwrap();
            prop_assert_eq!(back.data().len(), q.data().len());
            for (a, b) in back.data().iter().zip(q.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
