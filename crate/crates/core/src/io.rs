//! Point-cloud files (XYZ, ASCII PLY) and JSON model files.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! `f64` reads back bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hgmm::{Gaussian, HgmmTree, Point3, PointCloud};
use crate::nn::ParamStore;

/// Version written into every model file.
pub const FORMAT_VERSION: u32 = 1;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_coords<'a>(fields: impl Iterator<Item = &'a str>, line: usize) -> Result<Point3> {
    let vals = fields
        .map(|f| f.parse::<f64>().map_err(|e| parse_err(line, format!("`{f}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != 3 {
        return Err(parse_err(line, format!("expected 3 coordinates, found {}", vals.len())));
    }
    Ok(Point3::new(vals[0], vals[1], vals[2]))
}

/// Parses whitespace-separated `x y z` lines; blank lines and `#` comments
/// are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        points.push(parse_coords(line.split_whitespace(), i + 1)?);
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).expect("string write");
    }
    out
}

/// Parses ASCII PLY whose vertex element starts with `x`, `y`, `z` in that
/// order. Extra vertex properties and other elements are ignored.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing `ply` magic")),
    }
    let mut vertices = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut before = 0usize;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(n, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| parse_err(n, format!("bad element count `{count}`")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertices = Some(count);
                } else if vertices.is_none() {
                    before += count;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(n, "list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "float32" | "double" | "float64") && props.len() < 3 {
                    return Err(parse_err(n, format!("coordinate property `{name}` has type `{ty}`")));
                }
                props.push((*name).to_string());
            }
            ["property", ..] => {}
            ["end_header"] => {
                header_end = Some(n);
                break;
            }
            _ => return Err(parse_err(n, format!("unrecognized header line `{line}`"))),
        }
    }
    let header_end = header_end.ok_or_else(|| parse_err(0, "missing `end_header`"))?;
    let count = vertices.ok_or_else(|| parse_err(header_end, "no vertex element"))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(parse_err(
            header_end,
            format!("vertex properties must begin with x, y, z; found {props:?}"),
        ));
    }
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for _ in 0..before {
        body.next();
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = body.next().ok_or_else(|| parse_err(0, format!("expected {count} vertices")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != props.len() {
            return Err(parse_err(n, format!("expected {} values, found {}", props.len(), f.len())));
        }
        points.push(parse_coords(f[..3].iter().copied(), n)?);
    }
    PointCloud::new(points)
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    out.push_str(&format_xyz(cloud));
    out
}

fn is_ply(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Reads `.ply` as PLY and anything else as XYZ.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if is_ply(path) { parse_ply(&text) } else { parse_xyz(&text) }
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let text = if is_ply(path) { format_ply(cloud) } else { format_xyz(cloud) };
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GaussianDoc {
    weight: f64,
    mean: [f64; 3],
    cov: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    #[serde(default = "default_version")]
    format_version: u32,
    branching: Vec<usize>,
    levels: Vec<Vec<GaussianDoc>>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

/// Named tensors plus the configuration that built them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Model family, e.g. `"vae"` or `"registration"`.
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: Value, store: &ParamStore) -> Self {
        let tensors = store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(n, t)| NamedTensor { name: n.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Self { format_version: FORMAT_VERSION, kind: kind.to_string(), config, tensors }
    }

    pub fn store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            store.add(t.name.clone(), Tensor::new(t.shape.clone(), t.data.clone())?);
        }
        Ok(store)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }
}

/// Contents of a model file.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Tree(HgmmTree),
    Checkpoint(Checkpoint),
}

pub fn tree_to_json(tree: &HgmmTree) -> String {
    let doc = TreeDoc {
        format_version: FORMAT_VERSION,
        branching: tree.branching().to_vec(),
        levels: tree
            .levels()
            .iter()
            .map(|level| {
                level
                    .iter()
                    .map(|g| {
                        let c = g.cov();
                        GaussianDoc {
                            weight: g.weight(),
                            mean: [g.mean().x, g.mean().y, g.mean().z],
                            cov: [0, 1, 2].map(|r| [c[(r, 0)], c[(r, 1)], c[(r, 2)]]),
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("tree serializes")
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Version { found, expected: FORMAT_VERSION });
    }
    Ok(())
}

/// Parses a tree or checkpoint document.
pub fn model_from_json(text: &str) -> Result<Model> {
    let value: Value = serde_json::from_str(text)?;
    let version = match value.get("format_version") {
        None => FORMAT_VERSION,
        Some(v) => v
            .as_u64()
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| Error::invalid("format_version must be a non-negative integer"))?,
    };
    check_version(version)?;
    if value.get("kind").is_some() {
        return Ok(Model::Checkpoint(serde_json::from_value(value)?));
    }
    let doc: TreeDoc = serde_json::from_value(value)?;
    let levels = doc
        .levels
        .into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|g| {
                    let cov = Matrix3::from_fn(|r, c| g.cov[r][c]);
                    Gaussian::new(g.weight, Point3::from(g.mean), cov)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model::Tree(HgmmTree::new(doc.branching, levels)?))
}

pub fn checkpoint_to_json(ckpt: &Checkpoint) -> String {
    serde_json::to_string(ckpt).expect("checkpoint serializes")
}

pub fn read_model(path: impl AsRef<Path>) -> Result<Model> {
    model_from_json(&fs::read_to_string(path)?)
}

pub fn read_tree(path: impl AsRef<Path>) -> Result<HgmmTree> {
    match read_model(path)? {
        Model::Tree(t) => Ok(t),
        Model::Checkpoint(_) => Err(Error::invalid("expected a tree, found a checkpoint")),
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    match read_model(path)? {
        Model::Checkpoint(c) => Ok(c),
        Model::Tree(_) => Err(Error::invalid("expected a checkpoint, found a tree")),
    }
}

pub fn write_tree(path: impl AsRef<Path>, tree: &HgmmTree) -> Result<()> {
    fs::write(path, tree_to_json(tree))?;
    Ok(())
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_to_json(ckpt))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_reports_line_numbers() {
        let err = parse_xyz("0 0 0\n\n1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_xyz("0 0 zz\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn ply_property_order_enforced() {
        let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float y\nproperty float x\nproperty float z\nend_header\n1 2 3\n";
        let err = parse_ply(bad).unwrap_err().to_string();
        assert!(err.contains("x, y, z"), "{err}");
        let good = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 2 3 9\n4 5 6 9\n";
        let cloud = parse_ply(good).unwrap();
        assert_eq!(cloud.points()[1], Point3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn ply_binary_and_truncation_rejected() {
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        assert!(parse_ply(short).is_err());
    }

    #[test]
    fn unknown_version_rejected() {
        let err = model_from_json(r#"{"format_version": 7, "branching": [1], "levels": []}"#).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, expected: FORMAT_VERSION }));
    }
}
