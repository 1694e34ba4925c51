//! Training corpora: a directory of cloud files or a procedural spec
//! `procedural:<family>[,<family>...]:<count>[:<seed>]`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pointgmm::io::read_cloud;
use pointgmm::shapes::{Family, ProceduralShape, corpus, sample_shape};
use pointgmm::{Error, PointCloud};

pub enum Corpus {
    Procedural(Vec<ProceduralShape>),
    Files(Vec<PathBuf>),
}

impl Corpus {
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("procedural:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if !(2..=3).contains(&parts.len()) {
                return Err(usage(format!("bad procedural corpus `{spec}`")));
            }
            let families = parts[0].split(',').map(Family::parse).collect::<pointgmm::Result<Vec<_>>>()?;
            let count: usize = parts[1].parse().map_err(|_| usage(format!("bad shape count `{}`", parts[1])))?;
            let seed: u64 = match parts.get(2) {
                Some(s) => s.parse().map_err(|_| usage(format!("bad corpus seed `{s}`")))?,
                None => 0,
            };
            if count == 0 {
                return Err(usage("procedural corpus needs at least one shape"));
            }
            return Ok(Corpus::Procedural(corpus(&families, count, seed)));
        }
        let dir = Path::new(spec);
        if !dir.is_dir() {
            return Err(usage(format!("corpus `{spec}` is neither a directory nor a procedural spec")));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("xyz" | "ply")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Domain(format!("no .xyz or .ply files in {}", dir.display())).into());
        }
        Ok(Corpus::Files(files))
    }

    /// Point clouds; procedural shapes are sampled with `points` each.
    pub fn clouds(&self, points: usize) -> Result<Vec<PointCloud>> {
        match self {
            Corpus::Procedural(shapes) => shapes
                .iter()
                .enumerate()
                .map(|(i, s)| Ok(sample_shape(s, points, i as u64)?))
                .collect(),
            Corpus::Files(files) => files
                .iter()
                .map(|f| read_cloud(f).with_context(|| format!("reading {}", f.display())))
                .collect(),
        }
    }

    pub fn shapes(&self) -> Result<&[ProceduralShape]> {
        match self {
            Corpus::Procedural(shapes) => Ok(shapes),
            Corpus::Files(_) => Err(usage("registration needs a procedural corpus to synthesize pairs")),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}
