//! Text formats: `.xyz` and ascii `.ply` clouds, 12-number transform files
//! and `NTW 1` weight files.
//!
//! Parsers reject malformed input with the offending line number instead of
//! skipping it. Every writer emits ASCII with a trailing newline.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dense::Matrix;
use crate::error::Result;
use crate::geometry::{Metrics, Point3, PointCloud, RigidTransform};
use crate::network::{CascadeWeights, LinearLayer, Mlp, MlpLayer, Qmlp};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported cloud format `{0}` (expected .xyz or .ply)")]
    UnsupportedFormat(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("ply header: {0}")]
    PlyHeader(String),
    #[error("ply element `{0}` is not supported")]
    PlyElement(String),
    #[error("weight file version `{0}` is not supported (expected `NTW 1`)")]
    WeightsVersion(String),
    #[error("tensor `{0}` is missing")]
    MissingTensor(String),
    #[error("tensor `{0}` appears twice")]
    DuplicateTensor(String),
    #[error("tensor `{name}` is {rows}x{cols}, expected {want_rows}x{want_cols}")]
    TensorShape {
        name: String,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("transform file holds {0} numbers, expected 12")]
    TransformLength(usize),
}

fn parse_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        IoError::File {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| {
        IoError::File {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

fn parse_f64(token: &str, line: usize) -> std::result::Result<f64, IoError> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(parse_err(line, format!("non-finite value `{token}`"))),
        Err(_) => Err(parse_err(line, format!("`{token}` is not a number"))),
    }
}

/// Normals in files are renormalized; a zero normal is an error.
fn build_cloud(points: Vec<Point3>, normals: Option<Vec<(usize, Point3)>>) -> Result<PointCloud> {
    match normals {
        None => Ok(PointCloud::new(points)?),
        Some(normals) => {
            let mut unit = Vec::with_capacity(normals.len());
            for (line, n) in normals {
                let len = n.norm();
                if len.is_nan() || len <= 1e-12 {
                    return Err(parse_err(line, "zero-length normal").into());
                }
                unit.push(n / len);
            }
            Ok(PointCloud::with_normals(points, unit)?)
        }
    }
}

/// Reads `x y z [nx ny nz]` lines; `#` starts a comment.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let values = content
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if values.len() != 3 && values.len() != 6 {
            return Err(parse_err(line, format!("expected 3 or 6 values, found {}", values.len())).into());
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(line, format!("expected {w} values like earlier lines, found {}", values.len())).into())
            }
            _ => {}
        }
        points.push(Point3::new(values[0], values[1], values[2]));
        if values.len() == 6 {
            normals.push((line, Point3::new(values[3], values[4], values[5])));
        }
    }
    build_cloud(points, (width == Some(6)).then_some(normals))
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        write!(out, "{} {} {}", p.x, p.y, p.z).unwrap();
        if let Some(n) = cloud.normals() {
            write!(out, " {} {} {}", n[i].x, n[i].y, n[i].z).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Reads an ascii PLY with a single `vertex` element. Properties other than
/// `x y z nx ny nz` are accepted and ignored.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(IoError::PlyHeader("first line must be `ply`".into()).into()),
    }
    let mut vertex_count = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut saw_format = false;
    loop {
        let (line, content) = lines
            .next()
            .ok_or_else(|| IoError::PlyHeader("missing `end_header`".into()))?;
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => {
                return Err(IoError::PlyHeader(format!("format `{other}` is not supported, only ascii")).into())
            }
            ["element", "vertex", n] => {
                if vertex_count.is_some() {
                    return Err(IoError::PlyHeader("duplicate vertex element".into()).into());
                }
                let n = n
                    .parse::<usize>()
                    .map_err(|_| parse_err(line, format!("bad vertex count `{n}`")))?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            ["element", name, ..] => return Err(IoError::PlyElement((*name).to_string()).into()),
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(line, "list properties on vertices are not supported").into())
            }
            ["property", _, name] if in_vertex => properties.push((*name).to_string()),
            _ => return Err(parse_err(line, format!("unexpected header line `{content}`")).into()),
        }
    }
    if !saw_format {
        return Err(IoError::PlyHeader("missing `format` line".into()).into());
    }
    let count = vertex_count.ok_or_else(|| IoError::PlyHeader("no vertex element".into()))?;
    let slot = |name: &str| properties.iter().position(|p| p == name);
    let (Some(ix), Some(iy), Some(iz)) = (slot("x"), slot("y"), slot("z")) else {
        return Err(IoError::PlyHeader("vertex element needs x, y and z".into()).into());
    };
    let normal_slots = match (slot("nx"), slot("ny"), slot("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        (None, None, None) => None,
        _ => return Err(IoError::PlyHeader("normals need all of nx, ny and nz".into()).into()),
    };

    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(if normal_slots.is_some() { count } else { 0 });
    let mut last_line = 0;
    for (line, content) in lines.by_ref() {
        last_line = line;
        if points.len() == count {
            if content.is_empty() {
                continue;
            }
            return Err(parse_err(line, "data after the declared vertices").into());
        }
        let values = content
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if values.len() != properties.len() {
            return Err(parse_err(
                line,
                format!("expected {} values, found {}", properties.len(), values.len()),
            )
            .into());
        }
        points.push(Point3::new(values[ix], values[iy], values[iz]));
        if let Some([a, b, c]) = normal_slots {
            normals.push((line, Point3::new(values[a], values[b], values[c])));
        }
    }
    if points.len() != count {
        return Err(parse_err(
            last_line,
            format!("file ends after {} of {count} vertices", points.len()),
        )
        .into());
    }
    build_cloud(points, normal_slots.map(|_| normals))
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.has_normals() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    out.push_str(&format_xyz(cloud));
    out
}

enum CloudFormat {
    Xyz,
    Ply,
}

fn cloud_format(path: &Path) -> std::result::Result<CloudFormat, IoError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "xyz" => Ok(CloudFormat::Xyz),
        "ply" => Ok(CloudFormat::Ply),
        _ => Err(IoError::UnsupportedFormat(ext)),
    }
}

/// Reads a cloud, choosing the parser from the file extension.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let format = cloud_format(path)?;
    let text = read_text(path)?;
    match format {
        CloudFormat::Xyz => parse_xyz(&text),
        CloudFormat::Ply => parse_ply(&text),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match cloud_format(path)? {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::Ply => format_ply(cloud),
    };
    write_text(path, &text)
}

/// One line with the 12 numbers, then an optional `# re_deg=.. te=.. cd=..` line.
pub fn format_transform(t: &RigidTransform, metrics: Option<&Metrics>) -> String {
    let values: Vec<String> = t.to_row_major().iter().map(|v| format!("{v:.17e}")).collect();
    let mut out = values.join(" ");
    out.push('\n');
    if let Some(m) = metrics {
        writeln!(out, "# re_deg={:.9e} te={:.9e} cd={:.9e}", m.re_deg, m.te, m.cd).unwrap();
    }
    out
}

/// Reads 12 whitespace-separated numbers; `#` starts a comment.
pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let mut values = Vec::with_capacity(12);
    for (idx, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        for token in content.split_whitespace() {
            values.push(parse_f64(token, idx + 1)?);
        }
    }
    let array: [f64; 12] = values
        .as_slice()
        .try_into()
        .map_err(|_| IoError::TransformLength(values.len()))?;
    Ok(RigidTransform::from_row_major(&array)?)
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<RigidTransform> {
    parse_transform(&read_text(path.as_ref())?)
}

pub fn write_transform(t: &RigidTransform, metrics: Option<&Metrics>, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_transform(t, metrics))
}

const WEIGHTS_HEADER: &str = "NTW 1";

fn write_tensor(out: &mut String, name: &str, m: &Matrix) {
    writeln!(out, "tensor {name} {} {}", m.rows(), m.cols()).unwrap();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
}

fn column(v: &[f64]) -> Matrix {
    Matrix::from_vec(v.len(), 1, v.to_vec())
}

/// Serializes with 17 significant digits, which round-trips every `f64`.
pub fn format_weights(w: &CascadeWeights) -> String {
    let mut out = format!("{WEIGHTS_HEADER}\n");
    for (k, layer) in w.iter0.layers().iter().enumerate() {
        write_tensor(&mut out, &format!("iter0.layer{k}.weight"), layer.linear.weight());
        write_tensor(&mut out, &format!("iter0.layer{k}.bias"), &column(layer.linear.bias()));
    }
    for (i, q) in w.qmlps.iter().enumerate() {
        let i = i + 1;
        write_tensor(&mut out, &format!("qmlp{i}.A"), q.a_prime());
        write_tensor(&mut out, &format!("qmlp{i}.B"), q.b());
        write_tensor(&mut out, &format!("qmlp{i}.bias"), &column(q.bias()));
    }
    out
}

fn parse_tensors(text: &str) -> Result<Vec<(String, Matrix)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != WEIGHTS_HEADER {
        return Err(IoError::WeightsVersion(header.to_string()).into());
    }
    let mut tensors: Vec<(String, Matrix)> = Vec::new();
    let mut seen = HashMap::new();
    while let Some((line, content)) = lines.next() {
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let ["tensor", name, rows, cols] = tokens.as_slice() else {
            return Err(parse_err(line, format!("expected `tensor <name> <rows> <cols>`, found `{content}`")).into());
        };
        let dim = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| parse_err(line, format!("bad dimension `{t}`")))
        };
        let (rows, cols) = (dim(rows)?, dim(cols)?);
        if seen.insert(name.to_string(), ()).is_some() {
            return Err(IoError::DuplicateTensor(name.to_string()).into());
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (line, content) = lines.next().ok_or_else(|| {
                IoError::TensorShape {
                    name: name.to_string(),
                    rows: r,
                    cols,
                    want_rows: rows,
                    want_cols: cols,
                }
            })?;
            let values = content
                .split_whitespace()
                .map(|t| parse_f64(t, line))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if values.len() != cols {
                return Err(IoError::TensorShape {
                    name: name.to_string(),
                    rows,
                    cols: values.len(),
                    want_rows: rows,
                    want_cols: cols,
                }
                .into());
            }
            data.extend(values);
        }
        tensors.push((name.to_string(), Matrix::from_vec(rows, cols, data)));
    }
    Ok(tensors)
}

struct TensorTable(HashMap<String, Matrix>);

impl TensorTable {
    fn take(&mut self, name: &str) -> std::result::Result<Matrix, IoError> {
        self.0.remove(name).ok_or_else(|| IoError::MissingTensor(name.to_string()))
    }

    fn take_bias(&mut self, name: &str, len: usize) -> std::result::Result<Vec<f64>, IoError> {
        let m = self.take(name)?;
        if m.shape() != (len, 1) {
            return Err(IoError::TensorShape {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                want_rows: len,
                want_cols: 1,
            });
        }
        Ok(m.into_vec())
    }
}

/// Inverse of [`format_weights`]. The first-iteration encoder is assumed to
/// be a ReLU chain, which is what [`CascadeWeights::init_random`] produces.
pub fn parse_weights(text: &str) -> Result<CascadeWeights> {
    let mut table = TensorTable(HashMap::new());
    for (name, m) in parse_tensors(text)? {
        table.0.insert(name, m);
    }
    let mut layers = Vec::new();
    for k in 0.. {
        let name = format!("iter0.layer{k}.weight");
        if !table.0.contains_key(&name) {
            break;
        }
        let weight = table.take(&name)?;
        let bias = table.take_bias(&format!("iter0.layer{k}.bias"), weight.rows())?;
        layers.push(MlpLayer::new(LinearLayer::new(weight, bias)?, true));
    }
    if layers.is_empty() {
        return Err(IoError::MissingTensor("iter0.layer0.weight".into()).into());
    }
    let iter0 = Mlp::new(layers)?;
    let mut qmlps = Vec::new();
    for i in 1.. {
        let a = format!("qmlp{i}.A");
        if !table.0.contains_key(&a) {
            // Leftover QMLP tensors mean a gap in the numbering.
            if table.0.keys().any(|n| n.starts_with("qmlp")) {
                return Err(IoError::MissingTensor(a).into());
            }
            break;
        }
        let a_prime = table.take(&a)?;
        let b = table.take(&format!("qmlp{i}.B"))?;
        let bias = table.take_bias(&format!("qmlp{i}.bias"), a_prime.rows())?;
        qmlps.push(Qmlp::new(a_prime, b, bias)?);
    }
    if let Some(name) = table.0.keys().min() {
        return Err(parse_err(0, format!("unexpected tensor `{name}`")).into());
    }
    Ok(CascadeWeights::new(iter0, qmlps)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<CascadeWeights> {
    parse_weights(&read_text(path.as_ref())?)
}

pub fn save_weights(w: &CascadeWeights, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_weights(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn three_point_xyz() {
        let c = parse_xyz("# header\n0 0 0\n1 0 0 # trailing\n\n0 1 0\n").unwrap();
        assert_eq!(c.len(), 3);
        assert!(!c.has_normals());
        assert_eq!(c.points()[1], Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn xyz_letter_names_line() {
        let err = parse_xyz("0 0 0\n1 a 0\n").unwrap_err();
        assert!(matches!(err, Error::Io(IoError::Parse { line: 2, .. })), "{err}");
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn xyz_mixed_widths_rejected() {
        assert!(parse_xyz("0 0 0 0 0 1\n1 0 0\n").is_err());
        assert!(parse_xyz("0 0\n").is_err());
    }

    #[test]
    fn ply_with_normals_and_extras() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nproperty uchar red\nproperty float nx\nproperty float ny\nproperty float nz\n\
                    end_header\n0 0 0 255 0 0 2\n1 2 3 0 1 0 0\n";
        let c = parse_ply(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.normals().unwrap()[0], Point3::new(0.0, 0.0, 1.0));
        assert_eq!(c.points()[1], Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn ply_face_element_is_named() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
                    element face 0\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n";
        let err = parse_ply(text).unwrap_err();
        assert!(err.to_string().contains("`face`"), "{err}");
    }

    #[test]
    fn ply_truncated_and_binary_rejected() {
        let head = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(parse_ply(&format!("{head}0 0 0\n")).is_err());
        assert!(parse_ply(&format!("{head}0 0 0\n1 1 1\n2 2 2\n3 3 3\n")).is_err());
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }

    #[test]
    fn transform_text_round_trip() {
        let t = RigidTransform::from_euler_zyx(0.3, -0.2, 0.1).with_translation(Point3::new(0.1, -0.25, 0.5));
        let m = Metrics {
            re_deg: 0.5,
            te: 0.01,
            cd: 1e-4,
        };
        let text = format_transform(&t, Some(&m));
        assert_eq!(text.lines().count(), 2);
        let back = parse_transform(&text).unwrap();
        assert_eq!(back.to_row_major(), t.to_row_major());
        assert!(matches!(
            parse_transform("1 0 0 0 1 0 0 0 1 0 0").unwrap_err(),
            Error::Io(IoError::TransformLength(11))
        ));
    }

    #[test]
    fn weights_round_trip_exactly() {
        let w = CascadeWeights::init_random_with_dim(3, 3, 8).unwrap();
        let back = parse_weights(&format_weights(&w)).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn weights_errors_are_distinct() {
        let w = CascadeWeights::init_random_with_dim(1, 3, 4).unwrap();
        let text = format_weights(&w);
        let bad_version = text.replacen("NTW 1", "NTW 2", 1);
        assert!(matches!(parse_weights(&bad_version).unwrap_err(), Error::Io(IoError::WeightsVersion(_))));

        let missing = drop_tensor(&text, "qmlp2.B");
        match parse_weights(&missing).unwrap_err() {
            Error::Io(IoError::MissingTensor(name)) => assert_eq!(name, "qmlp2.B"),
            other => panic!("{other}"),
        }

        let dup = format!("{text}{}", tensor_block(&text, "qmlp1.bias"));
        assert!(matches!(parse_weights(&dup).unwrap_err(), Error::Io(IoError::DuplicateTensor(_))));

        let shape = text.replacen("tensor qmlp1.A 4 4", "tensor qmlp1.A 4 5", 1);
        assert!(matches!(parse_weights(&shape).unwrap_err(), Error::Io(IoError::TensorShape { .. })));
    }

    fn tensor_block(text: &str, name: &str) -> String {
        let lines: Vec<&str> = text.lines().collect();
        let start = lines.iter().position(|l| l.starts_with(&format!("tensor {name} "))).unwrap();
        let rows: usize = lines[start].split_whitespace().nth(2).unwrap().parse().unwrap();
        lines[start..=start + rows].iter().map(|l| format!("{l}\n")).collect()
    }

    fn drop_tensor(text: &str, name: &str) -> String {
        text.replacen(&tensor_block(text, name), "", 1)
    }
}
