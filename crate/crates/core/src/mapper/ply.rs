use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::render::{Gaussian3D, GaussianCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    BinaryLittleEndian,
    Ascii,
}

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "red", "green", "blue", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3",
];

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn row(g: &Gaussian3D) -> [f64; 14] {
    [
        g.mean.x,
        g.mean.y,
        g.mean.z,
        g.color.x,
        g.color.y,
        g.color.z,
        g.opacity,
        g.scale.x,
        g.scale.y,
        g.scale.z,
        g.rotation[0],
        g.rotation[1],
        g.rotation[2],
        g.rotation[3],
    ]
}

/// Writes float32 properties; colours stay in [0, 1].
pub fn write_ply(cloud: &GaussianCloud, format: PlyFormat, mut out: impl Write) -> Result<()> {
    let name = match format {
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::Ascii => "ascii",
    };
    writeln!(out, "ply\nformat {name} 1.0\nelement vertex {}", cloud.len())?;
    for p in PROPERTIES {
        writeln!(out, "property float {p}")?;
    }
    writeln!(out, "end_header")?;
    for g in &cloud.gaussians {
        let r = row(g);
        match format {
            PlyFormat::BinaryLittleEndian => {
                for v in r {
                    out.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            PlyFormat::Ascii => {
                let line: Vec<String> = r.iter().map(|&v| (v as f32).to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_ply_file(cloud: &GaussianCloud, format: PlyFormat, path: &Path) -> Result<()> {
    write_ply(cloud, format, BufWriter::new(File::create(path)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

/// Reads a vertex-only PLY with the Gaussian properties in any order. Extra
/// scalar properties are ignored; 8-bit integer colours are scaled to [0, 1].
pub fn read_ply(input: impl Read) -> Result<GaussianCloud> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let next_line = |reader: &mut BufReader<_>, line: &mut String| -> Result<()> {
        line.clear();
        if reader.read_line(line)? == 0 {
            return Err(format_err("unexpected end of PLY header"));
        }
        Ok(())
    };
    next_line(&mut reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(format_err("missing PLY magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        next_line(&mut reader, &mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(format_err(format!("unsupported PLY format {other}"))),
                })
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| format_err("bad vertex count"))?);
            }
            ["element", other, _] => return Err(format_err(format!("unsupported PLY element {other}"))),
            ["property", "list", ..] => return Err(format_err("list properties are not supported")),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| format_err(format!("unknown property type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            _ => return Err(format_err(format!("bad PLY header line: {}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| format_err("PLY format line missing"))?;
    let count = count.ok_or_else(|| format_err("PLY vertex element missing"))?;
    let index: Vec<usize> = PROPERTIES
        .iter()
        .map(|p| {
            props.iter().position(|(n, _)| n == p).ok_or_else(|| format_err(format!("PLY property {p} missing")))
        })
        .collect::<Result<_>>()?;
    let color_scale: Vec<f64> = index[3..6]
        .iter()
        .map(|&i| match props[i].1 {
            Scalar::U8 => 1.0 / 255.0,
            Scalar::U16 => 1.0 / 65535.0,
            _ => 1.0,
        })
        .collect();

    let mut values = vec![0.0; props.len()];
    let mut cloud = GaussianCloud::new();
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let mut buf = vec![0u8; stride];
    for k in 0..count {
        match format {
            PlyFormat::BinaryLittleEndian => {
                reader.read_exact(&mut buf).map_err(|_| format_err(format!("PLY truncated at vertex {k}")))?;
                let mut off = 0;
                for (v, (_, t)) in values.iter_mut().zip(&props) {
                    *v = t.decode(&buf[off..]);
                    off += t.size();
                }
            }
            PlyFormat::Ascii => {
                next_line(&mut reader, &mut line).map_err(|_| format_err(format!("PLY truncated at vertex {k}")))?;
                let mut tokens = line.split_whitespace();
                for (v, (_, t)) in values.iter_mut().zip(&props) {
                    let tok = tokens.next().ok_or_else(|| format_err(format!("short PLY row {k}")))?;
                    *v = if t.is_integer() {
                        tok.parse::<i64>().map(|x| x as f64).map_err(|_| format_err(format!("bad integer {tok}")))?
                    } else {
                        tok.parse::<f64>().map_err(|_| format_err(format!("bad number {tok}")))?
                    };
                }
            }
        }
        let p = |j: usize| values[index[j]];
        cloud.push(
            Gaussian3D {
                mean: Vector3::new(p(0), p(1), p(2)),
                color: Vector3::new(p(3) * color_scale[0], p(4) * color_scale[1], p(5) * color_scale[2]),
                opacity: p(6),
                scale: Vector3::new(p(7), p(8), p(9)),
                rotation: [p(10), p(11), p(12), p(13)],
            },
            None,
        );
    }
    Ok(cloud)
}

pub fn read_ply_file(path: &Path) -> Result<GaussianCloud> {
    read_ply(File::open(path)?)
}
