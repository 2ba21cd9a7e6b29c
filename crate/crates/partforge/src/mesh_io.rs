//! Wavefront OBJ and binary little-endian PLY.
//!
//! Writers emit full `f64` precision (OBJ via shortest round-trip decimal,
//! PLY via `double` properties) so a write/read cycle is lossless.

use std::io::{self, BufRead, Read, Write};

use partforge_core::geometry::Point3;
use partforge_core::TriMesh;

#[derive(Debug, thiserror::Error)]
pub enum MeshIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Obj { line: usize, message: String },
    #[error("PLY: {0}")]
    Ply(String),
    #[error(transparent)]
    Mesh(#[from] partforge_core::Error),
}

pub fn write_obj<W: Write>(mesh: &TriMesh, mut w: W) -> io::Result<()> {
    for v in mesh.vertices() {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Reads `v` and `f` records; polygons are fan-triangulated, texture and
/// normal references (`v/vt/vn`) and negative indices are accepted, other
/// records ignored.
pub fn read_obj<R: BufRead>(r: R) -> Result<TriMesh, MeshIoError> {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let err = |message: String| MeshIoError::Obj { line: n + 1, message };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad coordinate {t:?}: {e}"))))
                    .collect::<Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(err("vertex needs three coordinates".into()));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|e| err(format!("bad index {t:?}: {e}")))?;
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        if resolved < 0 || resolved >= vertices.len() as i64 {
                            return Err(err(format!("index {i} out of range")));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(err("face needs at least three vertices".into()));
                }
                faces.extend((2..idx.len()).map(|i| [idx[0], idx[i - 1], idx[i]]));
            }
            _ => {}
        }
    }
    Ok(TriMesh::new(vertices, faces)?)
}

/// Vertices and faces from a PLY file; point clouds have no faces.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn into_mesh(self) -> Result<TriMesh, MeshIoError> {
        Ok(TriMesh::new(self.vertices, self.faces)?)
    }
}

fn write_ply_header<W: Write>(w: &mut W, vertices: usize, faces: Option<usize>) -> io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {vertices}")?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property double {axis}")?;
    }
    if let Some(f) = faces {
        writeln!(w, "element face {f}")?;
        writeln!(w, "property list uchar uint vertex_indices")?;
    }
    writeln!(w, "end_header")
}

pub fn write_ply<W: Write>(mesh: &TriMesh, mut w: W) -> io::Result<()> {
    write_ply_header(&mut w, mesh.vertices().len(), Some(mesh.faces().len()))?;
    for v in mesh.vertices() {
        for c in v {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    for f in mesh.faces() {
        w.write_all(&[3])?;
        for i in f {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Vertex-only PLY.
pub fn write_ply_points<W: Write>(points: &[Point3], mut w: W) -> io::Result<()> {
    write_ply_header(&mut w, points.len(), None)?;
    for p in points {
        for c in p {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Result<Self, MeshIoError> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => return Err(MeshIoError::Ply(format!("unknown scalar type {other:?}"))),
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

fn take<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, MeshIoError> {
    let mut buf = vec![0; n];
    r.read_exact(&mut buf).map_err(|e| MeshIoError::Ply(format!("truncated body: {e}")))?;
    Ok(buf)
}

/// Binary little-endian PLY with `x y z` vertex properties of any numeric
/// type and an optional `vertex_indices` (or `vertex_index`) face list.
/// Other properties and elements are skipped; polygons are fan-triangulated.
pub fn read_ply<R: BufRead>(mut r: R) -> Result<PlyData, MeshIoError> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String, MeshIoError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(MeshIoError::Ply("header ended early".into()));
        }
        Ok(line.trim_end().to_owned())
    };
    if next_line(&mut r)? != "ply" {
        return Err(MeshIoError::Ply("missing ply magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let t: Vec<&str> = l.split_whitespace().collect();
        match t.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(MeshIoError::Ply(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: (*name).to_owned(),
                count: count.parse().map_err(|_| MeshIoError::Ply(format!("bad count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", n, item, name] => elements
                .last_mut()
                .ok_or_else(|| MeshIoError::Ply("property before element".into()))?
                .properties
                .push(Property::List((*name).to_owned(), Scalar::parse(n)?, Scalar::parse(item)?)),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| MeshIoError::Ply("property before element".into()))?
                .properties
                .push(Property::Scalar((*name).to_owned(), Scalar::parse(ty)?)),
            ["end_header"] => break,
            _ => return Err(MeshIoError::Ply(format!("unexpected header line {l:?}"))),
        }
    }
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [f64::NAN; 3];
            for p in &el.properties {
                match p {
                    Property::Scalar(name, ty) => {
                        let v = ty.read(&take(&mut r, ty.size())?);
                        if el.name == "vertex" {
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                    }
                    Property::List(name, nty, ity) => {
                        let n = nty.read(&take(&mut r, nty.size())?) as usize;
                        let raw = take(&mut r, n * ity.size())?;
                        let idx: Vec<u32> = raw.chunks_exact(ity.size()).map(|c| ity.read(c) as u32).collect();
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if n < 3 {
                                return Err(MeshIoError::Ply(format!("face with {n} vertices")));
                            }
                            faces.extend((2..n).map(|i| [idx[0], idx[i - 1], idx[i]]));
                        }
                    }
                }
            }
            if el.name == "vertex" {
                if xyz.iter().any(|c| c.is_nan()) {
                    return Err(MeshIoError::Ply("vertex lacks x, y or z".into()));
                }
                vertices.push(xyz);
            }
        }
    }
    Ok(PlyData { vertices, faces })
}
