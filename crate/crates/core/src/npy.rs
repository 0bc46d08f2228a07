//! Minimal reader/writer for 2-D arrays in the `.npy` container.
//!
//! Writing always produces version 1.0 headers, C order, little-endian. Reading
//! accepts versions 1.0 and 2.0, either memory order, and 1-D arrays (returned
//! as a single row).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::FormatError;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, FormatError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(FormatError::Shape(format!(
                "{} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<T>], cols: usize) -> Result<Self, FormatError> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(FormatError::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = T> + '_ {
        (0..self.rows).map(move |r| self.data[r * self.cols + c])
    }
}

/// Element types that can be stored in an `.npy` file.
pub trait NpyElement: Copy {
    /// Canonical descriptor written to headers.
    const DESCR: &'static str;
    const SIZE: usize;
    /// Whether `descr` names this type (byte-order aware).
    fn accepts(descr: &str) -> bool;
    fn read_le(bytes: &[u8]) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
}

impl NpyElement for u8 {
    const DESCR: &'static str = "|u1";
    const SIZE: usize = 1;
    fn accepts(descr: &str) -> bool {
        matches!(descr, "|u1" | "<u1" | "u1" | "|b1" | "<b1")
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

impl NpyElement for f32 {
    const DESCR: &'static str = "<f4";
    const SIZE: usize = 4;
    fn accepts(descr: &str) -> bool {
        descr == "<f4"
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl NpyElement for u32 {
    const DESCR: &'static str = "<u4";
    const SIZE: usize = 4;
    fn accepts(descr: &str) -> bool {
        descr == "<u4"
    }
    fn read_le(bytes: &[u8]) -> Self {
        u32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

pub fn write_npy<T: NpyElement>(path: &Path, m: &Matrix<T>) -> Result<(), FormatError> {
    let mut out = Vec::with_capacity(128 + m.data.len() * T::SIZE);
    encode(m, &mut out);
    let mut w = BufWriter::new(File::create(path).map_err(|e| FormatError::io(path, e))?);
    w.write_all(&out).map_err(|e| FormatError::io(path, e))?;
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn encode<T: NpyElement>(m: &Matrix<T>, out: &mut Vec<u8>) {
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}), }}",
        T::DESCR,
        m.rows,
        m.cols
    );
    // magic(6) + version(2) + header_len(2) + dict + padding + '\n' must be a multiple of 64
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let header_len = dict.len() + pad + 1;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    for &v in &m.data {
        v.write_le(out);
    }
}

pub fn read_npy<T: NpyElement>(path: &Path) -> Result<Matrix<T>, FormatError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| FormatError::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| FormatError::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

pub fn decode<T: NpyElement>(bytes: &[u8]) -> Result<Matrix<T>, FormatError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(FormatError::Header("missing NUMPY magic".into()));
    }
    let major = bytes[6];
    let (header_len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(FormatError::Truncated);
            }
            (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12)
        }
        v => return Err(FormatError::Header(format!("unsupported version {v}"))),
    };
    let end = start + header_len;
    if bytes.len() < end {
        return Err(FormatError::Truncated);
    }
    let text = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| FormatError::Header("header is not valid text".into()))?;
    let header = parse_header(text)?;
    if !T::accepts(&header.descr) {
        return Err(FormatError::Header(format!(
            "dtype {} does not match expected {}",
            header.descr,
            T::DESCR
        )));
    }
    let (rows, cols) = match header.shape.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => return Err(FormatError::Shape(format!("expected 1-D or 2-D array, got shape {s:?}"))),
    };
    let count = rows * cols;
    let payload = &bytes[end..];
    if payload.len() < count * T::SIZE {
        return Err(FormatError::Truncated);
    }
    let flat: Vec<T> = payload[..count * T::SIZE].chunks_exact(T::SIZE).map(T::read_le).collect();
    let data = if header.fortran_order && header.shape.len() == 2 {
        let mut d = Vec::with_capacity(count);
        for r in 0..rows {
            for c in 0..cols {
                d.push(flat[c * rows + r]);
            }
        }
        d
    } else {
        flat
    };
    Matrix::new(rows, cols, data)
}

fn parse_header(text: &str) -> Result<Header, FormatError> {
    let bad = |what: &str| FormatError::Header(format!("malformed header ({what}): {}", text.trim()));
    let descr = {
        let i = text.find("'descr'").ok_or_else(|| bad("descr"))?;
        let rest = &text[i + 7..];
        let q1 = rest.find('\'').ok_or_else(|| bad("descr"))?;
        let q2 = rest[q1 + 1..].find('\'').ok_or_else(|| bad("descr"))?;
        rest[q1 + 1..q1 + 1 + q2].to_string()
    };
    let fortran_order = {
        let i = text.find("'fortran_order'").ok_or_else(|| bad("fortran_order"))?;
        let rest = text[i + 15..].trim_start_matches([':', ' ']);
        if rest.starts_with("True") {
            true
        } else if rest.starts_with("False") {
            false
        } else {
            return Err(bad("fortran_order"));
        }
    };
    let shape = {
        let i = text.find("'shape'").ok_or_else(|| bad("shape"))?;
        let rest = &text[i + 7..];
        let open = rest.find('(').ok_or_else(|| bad("shape"))?;
        let close = rest.find(')').ok_or_else(|| bad("shape"))?;
        rest[open + 1..close]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.trim_end_matches('L').parse::<usize>().map_err(|_| bad("shape")))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(Header { descr, fortran_order, shape })
}
