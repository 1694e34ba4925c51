//! Procedural shape families built from axis-aligned boxes.
//!
//! Surfaces are sampled over the union of all box faces with per-face point
//! counts proportional to area (largest-remainder rounding), then uniformly
//! within each face.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgmm::{Point3, PointCloud};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Table,
    Chair,
    Airplane,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Table, Family::Chair, Family::Airplane];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "table" => Ok(Family::Table),
            "chair" => Ok(Family::Chair),
            "airplane" => Ok(Family::Airplane),
            other => Err(Error::Usage(format!("unknown shape family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    fn centered(center: [f64; 3], size: [f64; 3]) -> Self {
        Self {
            min: [0, 1, 2].map(|i| center[i] - 0.5 * size[i]),
            max: [0, 1, 2].map(|i| center[i] + 0.5 * size[i]),
        }
    }

    fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }
}

/// One face of a box: the fixed axis and its coordinate.
#[derive(Clone, Copy, Debug)]
struct Face {
    b: Box3,
    axis: usize,
    at: f64,
}

impl Face {
    fn area(&self) -> f64 {
        let (u, v) = ((self.axis + 1) % 3, (self.axis + 2) % 3);
        self.b.extent(u) * self.b.extent(v)
    }

    fn sample(&self, rng: &mut impl Rng) -> Point3 {
        let mut p = [0.0; 3];
        for (i, c) in p.iter_mut().enumerate() {
            *c = if i == self.axis { self.at } else { self.b.min[i] + rng.random::<f64>() * self.b.extent(i) };
        }
        Point3::from(p)
    }
}

/// A shape as a union of boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralShape {
    pub family: Option<Family>,
    pub boxes: Vec<Box3>,
}

impl ProceduralShape {
    pub fn cuboid(size: [f64; 3]) -> Self {
        Self { family: None, boxes: vec![Box3::centered([0.0; 3], size)] }
    }

    /// Four-legged table.
    pub fn table(top: [f64; 2], top_t: f64, leg_h: f64, leg_w: f64) -> Self {
        let mut boxes = vec![Box3::centered([0.0, 0.0, leg_h + 0.5 * top_t], [top[0], top[1], top_t])];
        boxes.extend(legs(top, leg_h, leg_w));
        Self { family: Some(Family::Table), boxes }.recentered()
    }

    /// Seat on four legs with a backrest along the `+y` edge.
    pub fn chair(seat: [f64; 2], seat_t: f64, leg_h: f64, leg_w: f64, back_h: f64, back_t: f64) -> Self {
        let top = leg_h + seat_t;
        let mut boxes = vec![Box3::centered([0.0, 0.0, leg_h + 0.5 * seat_t], [seat[0], seat[1], seat_t])];
        boxes.extend(legs(seat, leg_h, leg_w));
        boxes.push(Box3::centered(
            [0.0, 0.5 * seat[1] - 0.5 * back_t, top + 0.5 * back_h],
            [seat[0], back_t, back_h],
        ));
        Self { family: Some(Family::Chair), boxes }.recentered()
    }

    /// Fuselage along `x` with main wings and a tail fin at the rear.
    pub fn airplane(length: f64, body: f64, span: f64, chord: f64, fin_h: f64) -> Self {
        let boxes = vec![
            Box3::centered([0.0, 0.0, 0.0], [length, body, body]),
            Box3::centered([0.1 * length, 0.0, 0.0], [chord, span, 0.2 * body]),
            Box3::centered([-0.45 * length + 0.5 * chord * 0.5, 0.0, 0.0], [0.5 * chord, 0.4 * span, 0.2 * body]),
            Box3::centered([-0.45 * length + 0.25 * chord, 0.0, 0.5 * body + 0.5 * fin_h], [0.5 * chord, 0.2 * body, fin_h]),
        ];
        Self { family: Some(Family::Airplane), boxes }.recentered()
    }

    /// Random member of `family`.
    pub fn random(family: Family, rng: &mut impl Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        match family {
            Family::Table => Self::table([u(0.8, 1.2), u(0.5, 0.9)], u(0.04, 0.08), u(0.4, 0.7), u(0.05, 0.1)),
            Family::Chair => {
                Self::chair([u(0.45, 0.6), u(0.45, 0.6)], u(0.04, 0.08), u(0.35, 0.5), u(0.04, 0.07), u(0.4, 0.6), u(0.04, 0.08))
            }
            Family::Airplane => Self::airplane(u(1.0, 1.4), u(0.12, 0.2), u(0.9, 1.4), u(0.2, 0.3), u(0.15, 0.3)),
        }
    }

    /// Shifts the shape so its bounding box is centered on the origin.
    fn recentered(mut self) -> Self {
        let lo = [0, 1, 2].map(|i| self.boxes.iter().map(|b| b.min[i]).fold(f64::INFINITY, f64::min));
        let hi = [0, 1, 2].map(|i| self.boxes.iter().map(|b| b.max[i]).fold(f64::NEG_INFINITY, f64::max));
        for b in &mut self.boxes {
            for i in 0..3 {
                let c = 0.5 * (lo[i] + hi[i]);
                b.min[i] -= c;
                b.max[i] -= c;
            }
        }
        self
    }

    fn faces(&self) -> Vec<Face> {
        self.boxes
            .iter()
            .flat_map(|&b| (0..3).flat_map(move |axis| [b.min[axis], b.max[axis]].map(|at| Face { b, axis, at })))
            .collect()
    }

    pub fn area(&self) -> f64 {
        self.faces().iter().map(Face::area).sum()
    }
}

fn legs(top: [f64; 2], leg_h: f64, leg_w: f64) -> Vec<Box3> {
    let (x, y) = (0.5 * top[0] - 0.5 * leg_w, 0.5 * top[1] - 0.5 * leg_w);
    [(-x, -y), (x, -y), (-x, y), (x, y)]
        .into_iter()
        .map(|(cx, cy)| Box3::centered([cx, cy, 0.5 * leg_h], [leg_w, leg_w, leg_h]))
        .collect()
}

/// `n` area-weighted surface samples, shuffled.
pub fn sample_shape(shape: &ProceduralShape, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    let faces: Vec<Face> = shape.faces().into_iter().filter(|f| f.area() > 0.0).collect();
    let total: f64 = faces.iter().map(Face::area).sum();
    if faces.is_empty() || !total.is_finite() {
        return Err(Error::Domain("shape has no surface".into()));
    }
    let quotas: Vec<f64> = faces.iter().map(|f| f.area() / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..faces.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Point3> = Vec::with_capacity(n);
    for (f, &c) in faces.iter().zip(&counts) {
        points.extend((0..c).map(|_| f.sample(&mut rng)));
    }
    points.shuffle(&mut rng);
    PointCloud::new(points)
}

/// `count` random shapes cycling through `families`.
pub fn corpus(families: &[Family], count: usize, seed: u64) -> Vec<ProceduralShape> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            ProceduralShape::random(families[i % families.len()], &mut rng)
        })
        .collect()
}
