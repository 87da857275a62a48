//! Binary little-endian PLY in the common 3DGS layout: opacity stored as a
//! logit, scales as logarithms, `f_rest_*` channel-major.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::GaussianScene;
use crate::error::{Error, Result};
use crate::geometry::quat_normalize;

const CLASS_COMMENT: &str = "landmark_classes";

#[derive(Clone, Copy, Debug)]
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

    fn read(self, b: &[u8]) -> f64 {
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
}

struct Header {
    vertex_count: usize,
    properties: Vec<(String, Scalar)>,
    class_names: Vec<String>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Option<String> {
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|b| *b == b'\n')?;
        *pos += end + 1;
        Some(
            String::from_utf8_lossy(&rest[..end])
                .trim_end_matches('\r')
                .to_string(),
        )
    };
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut class_names = Vec::new();
    let mut in_vertex = false;
    let mut seen_other = false;
    let mut line = 0;
    loop {
        let Some(text) = next_line(&mut pos) else {
            return Err(err(line + 1, "unexpected end of header".into()));
        };
        line += 1;
        let tok: Vec<&str> = text.split_whitespace().collect();
        match tok.as_slice() {
            ["ply"] if line == 1 => {}
            _ if line == 1 => return Err(err(1, "missing 'ply' magic".into())),
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => {
                return Err(err(line, format!("unsupported format '{other}'")));
            }
            ["comment", CLASS_COMMENT, names] => {
                class_names = names.split(',').map(str::to_string).collect();
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if seen_other {
                    return Err(err(line, "vertex must be the first element".into()));
                }
                let n = n
                    .parse()
                    .map_err(|_| err(line, format!("bad vertex count '{n}'")))?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            ["element", ..] => {
                in_vertex = false;
                seen_other = true;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err(
                    line,
                    "list properties on vertices are not supported".into(),
                ));
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty)
                    .ok_or_else(|| err(line, format!("unknown property type '{ty}'")))?;
                properties.push((name.to_string(), s));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(err(line, format!("unrecognized header line '{text}'"))),
        }
    }
    let vertex_count = vertex_count.ok_or_else(|| err(line, "no vertex element".into()))?;
    Ok(Header {
        vertex_count,
        properties,
        class_names,
        body_offset: pos,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn load_ply(path: &Path) -> Result<GaussianScene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
    let n = header.vertex_count;
    let body = bytes
        .get(header.body_offset..header.body_offset + n * stride)
        .ok_or_else(|| Error::data(format!("{}: truncated vertex data", path.display())))?;
    let mut column: HashMap<&str, (usize, Scalar)> = HashMap::new();
    let mut off = 0;
    for (name, s) in &header.properties {
        column.insert(name.as_str(), (off, *s));
        off += s.size();
    }
    let find = |name: &str| {
        column.get(name).copied().ok_or_else(|| {
            Error::data(format!(
                "{}: missing required property '{name}'",
                path.display()
            ))
        })
    };
    let get = |row: usize, (o, s): (usize, Scalar)| s.read(&body[row * stride + o..]);

    let xyz = [find("x")?, find("y")?, find("z")?];
    let opacity = find("opacity")?;
    let scale = [find("scale_0")?, find("scale_1")?, find("scale_2")?];
    let rot = [
        find("rot_0")?,
        find("rot_1")?,
        find("rot_2")?,
        find("rot_3")?,
    ];
    let dc = [find("f_dc_0")?, find("f_dc_1")?, find("f_dc_2")?];
    let mut rest_cols = Vec::new();
    while let Some(c) = column.get(format!("f_rest_{}", rest_cols.len()).as_str()) {
        rest_cols.push(*c);
    }
    if !matches!(rest_cols.len(), 0 | 9 | 24 | 45) {
        return Err(Error::data(format!(
            "{}: {} f_rest properties do not form a full SH degree",
            path.display(),
            rest_cols.len()
        )));
    }
    let per_channel = rest_cols.len() / 3;
    let class_col = column.get("landmark_class").copied();

    let mut scene = GaussianScene {
        class_names: header.class_names,
        landmark_class: class_col.map(|_| Vec::with_capacity(n)),
        ..Default::default()
    };
    for i in 0..n {
        scene.centroids.push(xyz.map(|c| get(i, c)));
        scene.opacities.push(sigmoid(get(i, opacity)));
        scene.scales.push(scale.map(|c| get(i, c).exp()));
        let q = quat_normalize(rot.map(|c| get(i, c))).map_err(|_| {
            Error::data(format!(
                "{}: vertex {i} has a zero rotation",
                path.display()
            ))
        })?;
        scene.rotations.push(q);
        scene.sh_dc.push(dc.map(|c| get(i, c)));
        if per_channel > 0 {
            let coeffs = (0..per_channel)
                .map(|k| std::array::from_fn(|ch| get(i, rest_cols[ch * per_channel + k])))
                .collect();
            scene.sh_rest.push(coeffs);
        }
        if let (Some(c), Some(tags)) = (class_col, scene.landmark_class.as_mut()) {
            let v = get(i, c);
            if !(v >= 0.0 && v.fract() == 0.0) {
                return Err(Error::data(format!(
                    "{}: vertex {i} has invalid landmark_class {v}",
                    path.display()
                )));
            }
            tags.push(v as u32);
        }
    }
    scene.validate()?;
    Ok(scene)
}

pub fn save_ply(path: &Path, scene: &GaussianScene) -> Result<()> {
    scene.validate()?;
    let per_channel = scene.sh_rest.first().map_or(0, |r| r.len());
    let mut out = Vec::new();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    if !scene.class_names.is_empty() {
        header += &format!("comment {CLASS_COMMENT} {}\n", scene.class_names.join(","));
    }
    header += &format!("element vertex {}\n", scene.len());
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        .map(String::from)
        .to_vec();
    names.extend((0..3 * per_channel).map(|k| format!("f_rest_{k}")));
    names.extend(
        [
            "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        ]
        .map(String::from),
    );
    for n in &names {
        header += &format!("property float {n}\n");
    }
    if scene.landmark_class.is_some() {
        header += "property int landmark_class\n";
    }
    header += "end_header\n";
    out.extend_from_slice(header.as_bytes());
    for i in 0..scene.len() {
        let mut row: Vec<f64> = scene.centroids[i].to_vec();
        row.extend(scene.sh_dc[i]);
        for ch in 0..3 {
            row.extend((0..per_channel).map(|k| scene.sh_rest[i][k][ch]));
        }
        row.push(logit(scene.opacities[i]));
        row.extend(scene.scales[i].map(f64::ln));
        row.extend(scene.rotations[i].to_array());
        for v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(c) = &scene.landmark_class {
            out.extend_from_slice(&(c[i] as i32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, props: &[&str], rows: &[Vec<f32>]) {
        let mut s = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
            rows.len()
        );
        for p in props {
            s += &format!("property float {p}\n");
        }
        s += "end_header\n";
        let mut bytes = s.into_bytes();
        for r in rows {
            for v in r {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes).unwrap();
    }

    const REQUIRED: [&str; 14] = [
        "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
        "rot_3", "f_dc_0", "f_dc_1", "f_dc_2",
    ];

    #[test]
    fn activations_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.ply");
        let row = vec![
            1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3,
        ];
        write_raw(&p, &REQUIRED, &[row]);
        let s = load_ply(&p).unwrap();
        assert_eq!(s.opacities, vec![0.5]);
        assert_eq!(s.scales, vec![[1.0; 3]]);
        assert_eq!(s.rotations[0].to_array(), [1.0, 0.0, 0.0, 0.0]);
        assert!(s.landmark_class.is_none());
    }

    #[test]
    fn missing_property_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        write_raw(&p, &REQUIRED[..13], &[vec![0.0; 13]]);
        let e = load_ply(&p).unwrap_err().to_string();
        assert!(e.contains("f_dc_2"), "{e}");
    }

    #[test]
    fn malformed_header_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        std::fs::write(
            &p,
            b"ply\nformat binary_little_endian 1.0\nelement vertex x\nend_header\n",
        )
        .unwrap();
        match load_ply(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        std::fs::write(&p, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
        assert!(matches!(
            load_ply(&p).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn higher_order_sh_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sh.ply");
        let mut scene = GaussianScene {
            centroids: vec![[0.5, -1.0, 2.0]],
            opacities: vec![0.75],
            scales: vec![[0.1, 0.2, 0.3]],
            rotations: vec![crate::geometry::Quaternion::IDENTITY],
            sh_dc: vec![[0.1, 0.2, 0.3]],
            sh_rest: vec![(0..3)
                .map(|k| [k as f64, 10.0 + k as f64, 20.0 + k as f64])
                .collect()],
            landmark_class: None,
            class_names: vec![],
        };
        save_ply(&p, &scene).unwrap();
        let back = load_ply(&p).unwrap();
        assert_eq!(back.sh_rest, scene.sh_rest);
        assert_eq!(back.sh_degree(), 1);
        scene.sh_rest.clear();
        save_ply(&p, &scene).unwrap();
        assert_eq!(load_ply(&p).unwrap().sh_degree(), 0);
    }
}
