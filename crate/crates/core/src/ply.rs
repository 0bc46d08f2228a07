//! PLY point cloud I/O.
//!
//! Reads ASCII and binary (either endianness) files, extracting the `vertex`
//! element's `x`/`y`/`z` and optional `red`/`green`/`blue`. Other elements and
//! properties (faces, normals, labels) are parsed and skipped. Writes ASCII or
//! binary little-endian with float32 positions and uint8 colors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::FormatError;
use crate::scene::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header, FormatError> {
    let mut line = String::new();
    let next = |r: &mut R, line: &mut String| -> Result<(), FormatError> {
        line.clear();
        let n = r.read_line(line).map_err(|e| FormatError::Parse(e.to_string()))?;
        if n == 0 {
            return Err(FormatError::Truncated);
        }
        Ok(())
    };
    next(r, &mut line)?;
    if line.trim() != "ply" {
        return Err(FormatError::Header("missing 'ply' magic".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next(r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    "binary_big_endian" => PlyEncoding::BinaryBigEndian,
                    other => return Err(FormatError::Header(format!("unknown format {other}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| FormatError::Header(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| FormatError::Header("property before element".into()))?;
                let count = Scalar::parse(count)
                    .ok_or_else(|| FormatError::Header(format!("bad list count type {count}")))?;
                let item = Scalar::parse(item)
                    .ok_or_else(|| FormatError::Header(format!("bad list item type {item}")))?;
                el.props.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| FormatError::Header("property before element".into()))?;
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| FormatError::Header(format!("bad property type {ty}")))?;
                el.props.push(Property::Scalar { name: name.to_string(), ty });
            }
            other => return Err(FormatError::Header(format!("unrecognized header line {other:?}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| FormatError::Header("missing format line".into()))?;
    Ok(Header { encoding, elements })
}

/// Pulls scalars out of the body in whichever encoding the header declared.
struct BodyReader<R> {
    inner: R,
    encoding: PlyEncoding,
    tokens: std::vec::IntoIter<String>,
}

impl<R: BufRead> BodyReader<R> {
    fn token(&mut self) -> Result<String, FormatError> {
        loop {
            if let Some(t) = self.tokens.next() {
                return Ok(t);
            }
            let mut line = String::new();
            let n = self.inner.read_line(&mut line).map_err(|e| FormatError::Parse(e.to_string()))?;
            if n == 0 {
                return Err(FormatError::Truncated);
            }
            self.tokens = line.split_whitespace().map(str::to_string).collect::<Vec<_>>().into_iter();
        }
    }

    fn read(&mut self, ty: Scalar) -> Result<f64, FormatError> {
        if self.encoding == PlyEncoding::Ascii {
            let t = self.token()?;
            let bad = |_| FormatError::Parse(format!("bad number {t:?}"));
            // parse float32 directly; going through f64 can double-round
            return match ty {
                Scalar::F32 => t.parse::<f32>().map(f64::from).map_err(bad),
                _ => t.parse::<f64>().map_err(bad),
            };
        }
        let mut buf = [0u8; 8];
        let b = &mut buf[..ty.size()];
        self.inner.read_exact(b).map_err(|_| FormatError::Truncated)?;
        let le = self.encoding == PlyEncoding::BinaryLittleEndian;
        macro_rules! conv {
            ($t:ty) => {{
                let a = b.try_into().unwrap();
                (if le { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => conv!(i16),
            Scalar::U16 => conv!(u16),
            Scalar::I32 => conv!(i32),
            Scalar::U32 => conv!(u32),
            Scalar::F32 => conv!(f32),
            Scalar::F64 => conv!(f64),
        })
    }
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    parse_point_cloud(BufReader::new(file)).map_err(|e| e.in_file(path))
}

pub fn parse_point_cloud<R: BufRead>(mut r: R) -> Result<PointCloud, FormatError> {
    let header = read_header(&mut r)?;
    let mut body = BodyReader { inner: r, encoding: header.encoding, tokens: Vec::new().into_iter() };
    for el in &header.elements {
        if el.name != "vertex" {
            skip_element(&mut body, el)?;
            continue;
        }
        let find = |want: &str| {
            el.props
                .iter()
                .position(|p| matches!(p, Property::Scalar { name, .. } if name == want))
        };
        let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(FormatError::Header("vertex element lacks x/y/z".into())),
        };
        let rgb = match (find("red"), find("green"), find("blue")) {
            (Some(r), Some(g), Some(b)) => Some((r, g, b)),
            _ => None,
        };
        let mut points = Vec::with_capacity(el.count);
        let mut colors = rgb.map(|_| Vec::with_capacity(el.count));
        let mut values = vec![0.0f64; el.props.len()];
        for _ in 0..el.count {
            for (k, p) in el.props.iter().enumerate() {
                values[k] = match p {
                    Property::Scalar { ty, .. } => body.read(*ty)?,
                    Property::List { count, item } => {
                        let n = body.read(*count)? as usize;
                        for _ in 0..n {
                            body.read(*item)?;
                        }
                        0.0
                    }
                };
            }
            points.push([values[ix] as f32, values[iy] as f32, values[iz] as f32]);
            if let (Some(c), Some((r, g, b))) = (colors.as_mut(), rgb) {
                c.push([values[r] as u8, values[g] as u8, values[b] as u8]);
            }
        }
        return PointCloud::new(points, colors).map_err(|e| FormatError::Parse(e.to_string()));
    }
    Err(FormatError::Header("no vertex element".into()))
}

fn skip_element<R: BufRead>(body: &mut BodyReader<R>, el: &Element) -> Result<(), FormatError> {
    for _ in 0..el.count {
        for p in &el.props {
            match p {
                Property::Scalar { ty, .. } => {
                    body.read(*ty)?;
                }
                Property::List { count, item } => {
                    let n = body.read(*count)? as usize;
                    for _ in 0..n {
                        body.read(*item)?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud, encoding: PlyEncoding) -> Result<(), FormatError> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_point_cloud(&mut w, cloud, encoding).map_err(|e| FormatError::io(path, e))?;
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn encode_point_cloud<W: Write>(w: &mut W, cloud: &PointCloud, encoding: PlyEncoding) -> std::io::Result<()> {
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
        PlyEncoding::BinaryBigEndian => "binary_big_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    let colors = cloud.colors();
    if colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        let c = colors.map(|c| c[i]);
        match encoding {
            PlyEncoding::Ascii => {
                // `{}` on f32 prints the shortest string that parses back to the same bits
                write!(w, "{} {} {}", p[0], p[1], p[2])?;
                if let Some(c) = c {
                    write!(w, " {} {} {}", c[0], c[1], c[2])?;
                }
                writeln!(w)?;
            }
            PlyEncoding::BinaryLittleEndian | PlyEncoding::BinaryBigEndian => {
                let le = encoding == PlyEncoding::BinaryLittleEndian;
                for v in p {
                    w.write_all(&if le { v.to_le_bytes() } else { v.to_be_bytes() })?;
                }
                if let Some(c) = c {
                    w.write_all(&c)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(points: Vec<[f32; 3]>, colors: Option<Vec<[u8; 3]>>) -> PointCloud {
        PointCloud::new(points, colors).unwrap()
    }

    #[test]
    fn ascii_with_faces_and_extra_props() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\n\
            property float x\nproperty float y\nproperty float z\nproperty float nx\n\
            property uchar red\nproperty uchar green\nproperty uchar blue\n\
            element face 1\nproperty list uchar int vertex_indices\nend_header\n\
            0 0 0 1 255 0 0\n1 0 0 1 0 255 0\n0 1 0.5 1 0 0 255\n3 0 1 2\n";
        let c = parse_point_cloud(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.points()[2], [0.0, 1.0, 0.5]);
        assert_eq!(c.colors().unwrap()[1], [0, 255, 0]);
    }

    #[test]
    fn faces_before_vertices_are_skipped() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement face 1\n\
            property list uchar int vertex_indices\nelement vertex 1\nproperty double x\n\
            property double y\nproperty double z\nend_header\n"
            .to_vec();
        bytes.push(2);
        bytes.extend_from_slice(&7i32.to_le_bytes());
        bytes.extend_from_slice(&9i32.to_le_bytes());
        for v in [1.5f64, -2.0, 3.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = parse_point_cloud(&bytes[..]).unwrap();
        assert_eq!(c.points(), &[[1.5, -2.0, 3.25]]);
        assert!(c.colors().is_none());
    }

    #[test]
    fn missing_coordinates_are_rejected() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n";
        assert!(matches!(parse_point_cloud(text.as_bytes()), Err(FormatError::Header(_))));
    }

    #[test]
    fn truncated_binary_body() {
        let c = cloud(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], None);
        let mut out = Vec::new();
        encode_point_cloud(&mut out, &c, PlyEncoding::BinaryLittleEndian).unwrap();
        out.truncate(out.len() - 1);
        assert!(matches!(parse_point_cloud(&out[..]), Err(FormatError::Truncated)));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(
            pts in prop::collection::vec(prop::array::uniform3(-1e4f32..1e4f32), 1..40),
            with_color in any::<bool>(),
            ascii in any::<bool>(),
        ) {
            let colors = with_color.then(|| pts.iter().enumerate().map(|(i, _)| [i as u8, (i * 3) as u8, 7]).collect());
            let c = cloud(pts, colors);
            let enc = if ascii { PlyEncoding::Ascii } else { PlyEncoding::BinaryLittleEndian };
            let mut out = Vec::new();
            encode_point_cloud(&mut out, &c, enc).unwrap();
            let back = parse_point_cloud(&out[..]).unwrap();
            prop_assert_eq!(back.colors(), c.colors());
            for (a, b) in back.points().iter().zip(c.points()) {
                for k in 0..3 {
                    prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
        }
    }
}
