//! OBJ / OFF / PLY readers and writers.
//!
//! ASCII is supported for all three formats; binary PLY is read-only.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{MeshError, Rgb, TriMesh};
use crate::scalar::{Real, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Off,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self, MeshError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("obj") => Ok(Self::Obj),
            Some("off") => Ok(Self::Off),
            Some("ply") => Ok(Self::Ply),
            _ => Err(MeshError::UnknownFormat(path.to_path_buf())),
        }
    }
}

/// Loads a mesh, picking the format from the file extension.
pub fn load_mesh<T: Real>(path: impl AsRef<Path>) -> Result<TriMesh<T>, MeshError> {
    let path = path.as_ref();
    load_mesh_as(path, MeshFormat::from_path(path)?)
}

pub fn load_mesh_as<T: Real>(path: impl AsRef<Path>, format: MeshFormat) -> Result<TriMesh<T>, MeshError> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let raw = match format {
        MeshFormat::Obj => parse_obj(path, &bytes)?,
        MeshFormat::Off => parse_off(path, &bytes)?,
        MeshFormat::Ply => parse_ply(path, &bytes)?,
    };
    raw.into_mesh()
}

/// Loads a PLY file together with its per-vertex colors, if present.
pub fn load_colored_ply<T: Real>(
    path: impl AsRef<Path>,
) -> Result<(TriMesh<T>, Option<Vec<Rgb>>), MeshError> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut raw = parse_ply(path, &bytes)?;
    let colors = raw.colors.take();
    Ok((raw.into_mesh()?, colors))
}

/// Writes ASCII OBJ, OFF or PLY depending on the extension.
pub fn save_mesh<T: Real>(mesh: &TriMesh<T>, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let format = MeshFormat::from_path(path)?;
    write_with(path, |w| match format {
        MeshFormat::Obj => write_obj(w, mesh),
        MeshFormat::Off => write_off(w, mesh),
        MeshFormat::Ply => write_ply(w, mesh, None),
    })
}

/// Writes an ASCII PLY with `red`/`green`/`blue` uchar vertex properties.
pub fn save_colored_mesh<T: Real>(
    mesh: &TriMesh<T>,
    colors: &[Rgb],
    path: impl AsRef<Path>,
) -> Result<(), MeshError> {
    if colors.len() != mesh.num_vertices() {
        return Err(MeshError::ColorCount {
            expected: mesh.num_vertices(),
            got: colors.len(),
        });
    }
    write_with(path.as_ref(), |w| write_ply(w, mesh, Some(colors)))
}

fn read(path: &Path) -> Result<Vec<u8>, MeshError> {
    fs::read(path).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<(), MeshError> {
    let io_err = |source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn fmt<T: Real>(x: T) -> f64 {
    x.to_f64_lossy()
}

fn write_obj<T: Real>(w: &mut impl Write, mesh: &TriMesh<T>) -> std::io::Result<()> {
    for p in mesh.vertices() {
        writeln!(w, "v {} {} {}", fmt(p[0]), fmt(p[1]), fmt(p[2]))?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

fn write_off<T: Real>(w: &mut impl Write, mesh: &TriMesh<T>) -> std::io::Result<()> {
    writeln!(w, "OFF")?;
    writeln!(w, "{} {} 0", mesh.num_vertices(), mesh.faces().len())?;
    for p in mesh.vertices() {
        writeln!(w, "{} {} {}", fmt(p[0]), fmt(p[1]), fmt(p[2]))?;
    }
    for f in mesh.faces() {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

fn write_ply<T: Real>(w: &mut impl Write, mesh: &TriMesh<T>, colors: Option<&[Rgb]>) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.num_vertices())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if colors.is_some() {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "element face {}", mesh.faces().len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for (v, p) in mesh.vertices().iter().enumerate() {
        write!(w, "{} {} {}", fmt(p[0]), fmt(p[1]), fmt(p[2]))?;
        if let Some(c) = colors {
            let [r, g, b] = c[v];
            write!(w, " {r} {g} {b}")?;
        }
        writeln!(w)?;
    }
    for f in mesh.faces() {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

struct RawMesh<T> {
    vertices: Vec<Vec3<T>>,
    faces: Vec<[usize; 3]>,
    colors: Option<Vec<Rgb>>,
}

impl<T: Real> RawMesh<T> {
    fn into_mesh(self) -> Result<TriMesh<T>, MeshError> {
        TriMesh::new(self.vertices, self.faces)
    }
}

struct Ctx<'a> {
    path: &'a Path,
}

impl Ctx<'_> {
    fn err(&self, line: usize, message: impl Into<String>) -> MeshError {
        MeshError::Parse {
            path: PathBuf::from(self.path),
            line,
            message: message.into(),
        }
    }

    fn float<T: Real>(&self, line: usize, tok: Option<&str>) -> Result<T, MeshError> {
        let tok = tok.ok_or_else(|| self.err(line, "missing coordinate"))?;
        let x: f64 = tok
            .parse()
            .map_err(|_| self.err(line, format!("invalid number '{tok}'")))?;
        Ok(T::lit(x))
    }

    fn index(&self, line: usize, tok: Option<&str>, count: usize) -> Result<usize, MeshError> {
        let tok = tok.ok_or_else(|| self.err(line, "missing vertex index"))?;
        let i: usize = tok
            .parse()
            .map_err(|_| self.err(line, format!("invalid index '{tok}'")))?;
        if i >= count {
            return Err(self.err(
                line,
                format!("vertex index {i} out of range (vertex count {count})"),
            ));
        }
        Ok(i)
    }
}

/// Fan-triangulates a polygon.
fn push_polygon(faces: &mut Vec<[usize; 3]>, poly: &[usize]) {
    for k in 1..poly.len().saturating_sub(1) {
        faces.push([poly[0], poly[k], poly[k + 1]]);
    }
}

fn text<'a>(ctx: &Ctx, bytes: &'a [u8]) -> Result<&'a str, MeshError> {
    std::str::from_utf8(bytes).map_err(|e| ctx.err(0, format!("not valid UTF-8 text: {e}")))
}

fn parse_obj<T: Real>(path: &Path, bytes: &[u8]) -> Result<RawMesh<T>, MeshError> {
    let ctx = Ctx { path };
    let src = text(&ctx, bytes)?;
    let mut vertices = Vec::new();
    let mut polys: Vec<(usize, Vec<i64>)> = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let lineno = i + 1;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = ctx.float(lineno, toks.next())?;
                let y = ctx.float(lineno, toks.next())?;
                let z = ctx.float(lineno, toks.next())?;
                vertices.push([x, y, z]);
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in toks {
                    let head = tok.split('/').next().unwrap_or("");
                    let idx: i64 = head
                        .parse()
                        .map_err(|_| ctx.err(lineno, format!("invalid face index '{tok}'")))?;
                    poly.push(idx);
                }
                if poly.len() < 3 {
                    return Err(ctx.err(lineno, "face with fewer than 3 vertices"));
                }
                // Negative indices are relative to the vertices seen so far.
                let seen = vertices.len() as i64;
                let resolved = poly
                    .into_iter()
                    .map(|k| if k < 0 { seen + k + 1 } else { k })
                    .collect();
                polys.push((lineno, resolved));
            }
            _ => {}
        }
    }
    let n = vertices.len();
    let mut faces = Vec::new();
    for (lineno, poly) in polys {
        let mut idx = Vec::with_capacity(poly.len());
        for k in poly {
            if k < 1 || k as usize > n {
                return Err(ctx.err(
                    lineno,
                    format!("vertex index {k} out of range (vertex count {n})"),
                ));
            }
            idx.push(k as usize - 1);
        }
        push_polygon(&mut faces, &idx);
    }
    Ok(RawMesh {
        vertices,
        faces,
        colors: None,
    })
}

fn parse_off<T: Real>(path: &Path, bytes: &[u8]) -> Result<RawMesh<T>, MeshError> {
    let ctx = Ctx { path };
    let src = text(&ctx, bytes)?;
    // Meaningful lines with comments stripped.
    let mut lines = src
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (lineno, first) = lines.next().ok_or_else(|| ctx.err(1, "empty file"))?;
    let mut header_rest = match first.split_whitespace().next() {
        Some(kw) if kw.ends_with("OFF") => first[kw.len()..].trim().to_string(),
        _ => return Err(ctx.err(lineno, "missing OFF header")),
    };
    let mut count_line = lineno;
    if header_rest.is_empty() {
        let (l, s) = lines
            .next()
            .ok_or_else(|| ctx.err(lineno, "missing element counts"))?;
        header_rest = s.to_string();
        count_line = l;
    }
    let mut counts = header_rest.split_whitespace();
    let nv = ctx.index(count_line, counts.next(), usize::MAX)?;
    let nf = ctx.index(count_line, counts.next(), usize::MAX)?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines
            .next()
            .ok_or_else(|| ctx.err(count_line, "unexpected end of file in vertex list"))?;
        let mut t = s.split_whitespace();
        let x = ctx.float(l, t.next())?;
        let y = ctx.float(l, t.next())?;
        let z = ctx.float(l, t.next())?;
        vertices.push([x, y, z]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, s) = lines
            .next()
            .ok_or_else(|| ctx.err(count_line, "unexpected end of file in face list"))?;
        let mut t = s.split_whitespace();
        let k = ctx.index(l, t.next(), usize::MAX)?;
        if k < 3 {
            return Err(ctx.err(l, "face with fewer than 3 vertices"));
        }
        let poly = (0..k)
            .map(|_| ctx.index(l, t.next(), nv))
            .collect::<Result<Vec<_>, _>>()?;
        push_polygon(&mut faces, &poly);
    }
    Ok(RawMesh {
        vertices,
        faces,
        colors: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

#[derive(Debug)]
enum PlyProperty {
    Scalar(String, PlyType),
    List(String, PlyType, PlyType),
}

impl PlyProperty {
    fn name(&self) -> &str {
        match self {
            Self::Scalar(n, _) | Self::List(n, _, _) => n,
        }
    }
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyEncoding {
    Ascii,
    Little,
    Big,
}

/// Value source over either ASCII tokens or a binary cursor.
enum PlyBody<'a> {
    Ascii {
        lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
        tokens: Vec<&'a str>,
        pos: usize,
        // File line of the `end_header` marker.
        base: usize,
        line: usize,
    },
    Binary {
        data: &'a [u8],
        offset: usize,
        big: bool,
    },
}

impl<'a> PlyBody<'a> {
    /// Starts a new record (ASCII: next non-empty line).
    fn begin_record(&mut self, ctx: &Ctx) -> Result<(), MeshError> {
        if let PlyBody::Ascii {
            lines,
            tokens,
            pos,
            base,
            line,
        } = self
        {
            loop {
                let (i, l) = lines
                    .next()
                    .ok_or_else(|| ctx.err(*line, "unexpected end of file in element data"))?;
                let t: Vec<&'a str> = l.split_whitespace().collect();
                if !t.is_empty() {
                    *tokens = t;
                    *pos = 0;
                    *line = *base + i + 1;
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    fn line(&self) -> usize {
        match self {
            PlyBody::Ascii { line, .. } => *line,
            PlyBody::Binary { .. } => 0,
        }
    }

    fn value(&mut self, ctx: &Ctx, ty: PlyType) -> Result<f64, MeshError> {
        match self {
            PlyBody::Ascii {
                tokens, pos, line, ..
            } => {
                let tok = tokens
                    .get(*pos)
                    .ok_or_else(|| ctx.err(*line, "too few values in element record"))?;
                *pos += 1;
                tok.parse::<f64>()
                    .map_err(|_| ctx.err(*line, format!("invalid number '{tok}'")))
            }
            PlyBody::Binary { data, offset, big } => {
                let n = ty.size();
                let end = *offset + n;
                if end > data.len() {
                    return Err(ctx.err(0, format!("binary body truncated at byte {offset}")));
                }
                let mut buf = [0u8; 8];
                buf[..n].copy_from_slice(&data[*offset..end]);
                if *big {
                    buf[..n].reverse();
                }
                *offset = end;
                Ok(match ty {
                    PlyType::I8 => buf[0] as i8 as f64,
                    PlyType::U8 => buf[0] as f64,
                    PlyType::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
                    PlyType::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
                    PlyType::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
                    PlyType::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
                    PlyType::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
                    PlyType::F64 => f64::from_le_bytes(buf),
                })
            }
        }
    }
}

fn parse_ply<T: Real>(path: &Path, bytes: &[u8]) -> Result<RawMesh<T>, MeshError> {
    let ctx = Ctx { path };
    let marker = b"end_header";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| ctx.err(1, "missing end_header"))?;
    let mut body_start = header_end + marker.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = text(&ctx, &bytes[..header_end])?;

    let mut encoding = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_lines = 0;
    for (i, line) in header.lines().enumerate() {
        let lineno = i + 1;
        header_lines = lineno;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            [] => {}
            ["ply"] if lineno == 1 => {}
            _ if lineno == 1 => return Err(ctx.err(1, "missing 'ply' magic")),
            ["format", enc, _] => {
                encoding = Some(match *enc {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::Little,
                    "binary_big_endian" => PlyEncoding::Big,
                    other => return Err(ctx.err(lineno, format!("unknown format '{other}'"))),
                });
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: ctx.index(lineno, Some(count), usize::MAX)?,
                properties: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| ctx.err(lineno, "property before element"))?;
                let (ct, it) = PlyType::parse(ct)
                    .zip(PlyType::parse(it))
                    .ok_or_else(|| ctx.err(lineno, "unknown list property type"))?;
                el.properties.push(PlyProperty::List(name.to_string(), ct, it));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| ctx.err(lineno, "property before element"))?;
                let ty = PlyType::parse(ty)
                    .ok_or_else(|| ctx.err(lineno, format!("unknown property type '{ty}'")))?;
                el.properties.push(PlyProperty::Scalar(name.to_string(), ty));
            }
            _ => return Err(ctx.err(lineno, format!("unrecognized header line '{line}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| ctx.err(2, "missing format line"))?;

    let mut body = match encoding {
        PlyEncoding::Ascii => {
            let src = text(&ctx, &bytes[body_start..])?;
            PlyBody::Ascii {
                lines: src.lines().enumerate().peekable(),
                tokens: Vec::new(),
                pos: 0,
                base: header_lines + 1,
                line: header_lines + 1,
            }
        }
        PlyEncoding::Little | PlyEncoding::Big => PlyBody::Binary {
            data: &bytes[body_start..],
            offset: 0,
            big: encoding == PlyEncoding::Big,
        },
    };

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut colors = None;
    let mut vertex_count = 0;
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let find = |n: &str| el.properties.iter().position(|p| p.name() == n);
        let (xi, yi, zi) = (find("x"), find("y"), find("z"));
        let rgb = [find("red"), find("green"), find("blue")];
        let has_rgb = rgb.iter().all(Option::is_some);
        let face_prop = find("vertex_indices").or_else(|| find("vertex_index"));
        if is_vertex {
            vertex_count = el.count;
            if xi.is_none() || yi.is_none() || zi.is_none() {
                return Err(ctx.err(header_lines, "vertex element lacks x/y/z"));
            }
            if has_rgb {
                colors = Some(Vec::with_capacity(el.count));
            }
        }
        for _ in 0..el.count {
            body.begin_record(&ctx)?;
            let mut scalars = vec![0.0f64; el.properties.len()];
            let mut list: Vec<f64> = Vec::new();
            for (k, prop) in el.properties.iter().enumerate() {
                match prop {
                    PlyProperty::Scalar(_, ty) => scalars[k] = body.value(&ctx, *ty)?,
                    PlyProperty::List(_, ct, it) => {
                        let n = body.value(&ctx, *ct)?;
                        let items = (0..n as usize)
                            .map(|_| body.value(&ctx, *it))
                            .collect::<Result<Vec<_>, _>>()?;
                        if Some(k) == face_prop {
                            list = items;
                        }
                    }
                }
            }
            let line = body.line();
            if is_vertex {
                let (x, y, z) = (xi.unwrap(), yi.unwrap(), zi.unwrap());
                vertices.push([T::lit(scalars[x]), T::lit(scalars[y]), T::lit(scalars[z])]);
                if let Some(c) = colors.as_mut() {
                    let ch = |i: Option<usize>| scalars[i.unwrap()].clamp(0.0, 255.0) as u8;
                    c.push([ch(rgb[0]), ch(rgb[1]), ch(rgb[2])]);
                }
            } else if is_face {
                if face_prop.is_none() {
                    return Err(ctx.err(line, "face element lacks vertex_indices"));
                }
                if list.len() < 3 {
                    return Err(ctx.err(line, "face with fewer than 3 vertices"));
                }
                let mut poly = Vec::with_capacity(list.len());
                for &x in &list {
                    if x < 0.0 || x as usize >= vertex_count {
                        return Err(ctx.err(
                            line,
                            format!("vertex index {x} out of range (vertex count {vertex_count})"),
                        ));
                    }
                    poly.push(x as usize);
                }
                push_polygon(&mut faces, &poly);
            }
        }
    }
    Ok(RawMesh {
        vertices,
        faces,
        colors,
    })
}
