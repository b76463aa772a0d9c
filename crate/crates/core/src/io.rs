//! ASCII XYZ and PLY point cloud files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    /// Guess the format from the file extension, defaulting to XYZ.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => CloudFormat::Ply,
            _ => CloudFormat::Xyz,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            other => Err(Error::InvalidArgument(format!("unknown cloud format '{other}'"))),
        }
    }
}

/// Read a point cloud. `format` of `None` picks by extension.
pub fn load_point_cloud(path: impl AsRef<Path>, format: Option<CloudFormat>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let format = format.unwrap_or_else(|| CloudFormat::from_path(path));
    let points = match format {
        CloudFormat::Xyz => parse_xyz(&text, path)?,
        CloudFormat::Ply => parse_ply(&text, path)?,
    };
    if points.is_empty() {
        return Err(parse_error(path, 0, "file contains no points"));
    }
    Ok(PointCloud::new(points)?.with_frame(path.display().to_string()))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_triple<'a>(mut fields: impl Iterator<Item = &'a str>, path: &Path, line: usize) -> Result<Vector3<f64>> {
    let mut v = Vector3::zeros();
    for k in 0..3 {
        let field = fields.next().ok_or_else(|| parse_error(path, line, "expected three coordinates"))?;
        v[k] = field
            .parse::<f64>()
            .ok()
            .filter(|c| c.is_finite())
            .ok_or_else(|| parse_error(path, line, format!("invalid coordinate '{field}'")))?;
    }
    Ok(v)
}

/// Parse XYZ text: one `x y z` triple per line, `#` starts a comment.
/// Commas are accepted as separators.
pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<Vector3<f64>>> {
    let mut points = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty());
        let p = parse_triple(&mut fields, path, index + 1)?;
        if fields.next().is_some() {
            return Err(parse_error(path, index + 1, "expected exactly three coordinates"));
        }
        points.push(p);
    }
    Ok(points)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<(String, bool)>,
}

/// Parse ASCII PLY. The `vertex` element must carry scalar `x`, `y` and `z`
/// properties; other scalar properties and other elements are skipped.
pub fn parse_ply(text: &str, path: &Path) -> Result<Vec<Vector3<f64>>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_error(path, 1, "missing 'ply' magic line")),
    }

    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let Some((n, line)) = lines.next() else {
            return Err(parse_error(path, 0, "header has no 'end_header'"));
        };
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                match words.next() {
                    Some("ascii") => {}
                    Some(other) => {
                        return Err(Error::Unsupported {
                            path: path.to_path_buf(),
                            message: format!("only ASCII PLY is supported, found '{other}'"),
                        })
                    }
                    None => return Err(parse_error(path, n, "format line without a format")),
                }
                saw_format = true;
            }
            Some("element") => {
                let name = words.next().ok_or_else(|| parse_error(path, n, "element without a name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_error(path, n, "element without a valid count"))?;
                elements.push(PlyElement { name: name.to_string(), count, properties: Vec::new() });
            }
            Some("property") => {
                let element = elements.last_mut().ok_or_else(|| parse_error(path, n, "property before any element"))?;
                let rest: Vec<&str> = words.collect();
                match rest.as_slice() {
                    ["list", _, _, name] => element.properties.push((name.to_string(), true)),
                    [ty, name] if is_scalar_type(ty) => element.properties.push((name.to_string(), false)),
                    _ => return Err(parse_error(path, n, format!("malformed property line '{line}'"))),
                }
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(parse_error(path, n, format!("unknown header keyword '{other}'"))),
        }
    }
    if !saw_format {
        return Err(parse_error(path, 0, "header has no format line"));
    }

    let mut points = Vec::new();
    for element in &elements {
        let layout = if element.name == "vertex" { Some(vertex_layout(element, path)?) } else { None };
        for _ in 0..element.count {
            let (n, line) = lines
                .by_ref()
                .find(|(_, l)| !l.is_empty())
                .ok_or_else(|| parse_error(path, 0, format!("file ends before all '{}' rows", element.name)))?;
            let Some(layout) = &layout else { continue };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != element.properties.len() {
                return Err(parse_error(
                    path,
                    n,
                    format!("expected {} values, found {}", element.properties.len(), fields.len()),
                ));
            }
            points.push(parse_triple(layout.iter().map(|&k| fields[k]), path, n)?);
        }
    }
    if let Some((n, _)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(parse_error(path, n, "data after the last declared element"));
    }
    if !elements.iter().any(|e| e.name == "vertex") {
        return Err(Error::Unsupported { path: path.to_path_buf(), message: "no 'vertex' element".into() });
    }
    Ok(points)
}

fn is_scalar_type(ty: &str) -> bool {
    matches!(
        ty,
        "char"
            | "uchar"
            | "short"
            | "ushort"
            | "int"
            | "uint"
            | "float"
            | "double"
            | "int8"
            | "uint8"
            | "int16"
            | "uint16"
            | "int32"
            | "uint32"
            | "float32"
            | "float64"
    )
}

fn vertex_layout(element: &PlyElement, path: &Path) -> Result<[usize; 3]> {
    if element.properties.iter().any(|(_, list)| *list) {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            message: "list properties on 'vertex' are not supported".into(),
        });
    }
    let find = |axis: &str| {
        element.properties.iter().position(|(name, _)| name == axis).ok_or_else(|| Error::Unsupported {
            path: path.to_path_buf(),
            message: format!("'vertex' has no '{axis}' property"),
        })
    };
    Ok([find("x")?, find("y")?, find("z")?])
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: PathBuf::from(path), source }
}

/// Write XYZ text. Coordinates use Rust's shortest round-trip formatting.
pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, xyz_string(cloud)).map_err(io_error(path))
}

pub fn xyz_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    out.push_str(&xyz_string(cloud));
    fs::write(path, out).map_err(io_error(path))
}

/// Write in the format implied by the extension.
pub fn save_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    match CloudFormat::from_path(path) {
        CloudFormat::Xyz => write_xyz(path, cloud),
        CloudFormat::Ply => write_ply(path, cloud),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn xyz_two_points() {
        let pts = parse_xyz("0 0 0\n1 2 3\n", p()).unwrap();
        assert_eq!(pts, vec![Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)]);
    }

    #[test]
    fn xyz_comments_skipped() {
        let pts = parse_xyz("# header\n1 2 3 # trailing\n\n  # indented\n4,5,6\n", p()).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1], Vector3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn xyz_error_names_line() {
        match parse_xyz("1 2 3\n# c\n1 2 x\n", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_xyz("1 2\n", p()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("1 2 3 4\n", p()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("1 2 nan\n", p()), Err(Error::Parse { line: 1, .. })));
    }

    const PLY: &str = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float y\nproperty float x\nproperty uchar red\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 2 255 3\n4 5 0 6\n3 0 1 1\n";

    #[test]
    fn ply_reorders_properties() {
        let pts = parse_ply(PLY, p()).unwrap();
        assert_eq!(pts, vec![Vector3::new(2.0, 1.0, 3.0), Vector3::new(5.0, 4.0, 6.0)]);
    }

    #[test]
    fn ply_rejects_bad_layouts() {
        let binary = PLY.replace("ascii", "binary_little_endian");
        assert!(matches!(parse_ply(&binary, p()), Err(Error::Unsupported { .. })));
        let no_z = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n";
        assert!(matches!(parse_ply(no_z, p()), Err(Error::Unsupported { .. })));
        let short = PLY.replace("4 5 0 6", "4 5 0");
        assert!(matches!(parse_ply(&short, p()), Err(Error::Parse { line: 13, .. })));
        let truncated = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        assert!(matches!(parse_ply(truncated, p()), Err(Error::Parse { .. })));
        let extra = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n4 5 6\n";
        assert!(matches!(parse_ply(extra, p()), Err(Error::Parse { line: 9, .. })));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.xyz");
        fs::write(&path, "# nothing\n").unwrap();
        assert!(load_point_cloud(&path, None).is_err());
        assert!(matches!(load_point_cloud(dir.path().join("missing.xyz"), None), Err(Error::Io { .. })));
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![
            Vector3::new(0.1, -2.5e-7, 3.0),
            Vector3::new(1.0 / 3.0, std::f64::consts::PI, -1e300),
        ])
        .unwrap();
        for name in ["c.xyz", "c.ply"] {
            let path = dir.path().join(name);
            save_point_cloud(&path, &cloud).unwrap();
            let back = load_point_cloud(&path, None).unwrap();
            assert_eq!(back.points(), cloud.points());
        }
    }
}
