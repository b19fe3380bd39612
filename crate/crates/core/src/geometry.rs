//! Domains, collocation sampling, evaluation grids, and error norms.
//!
//! Collocation points come from either a tensor grid over a box (boundary
//! membership decided by grid indices, so face points are classified exactly)
//! or seeded rejection sampling for non-box shapes, with boundary points drawn
//! directly on the shape's boundary weighted by face measure. A box face can
//! be marked open, meaning the PDE still holds there — the terminal-time face
//! of a space-time cylinder is the canonical case — and grid points on it are
//! classified as interior.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec;
use crate::factor::{collocation_weights, eval_batch, DerivativeMultiIndex, FactorModel, ModelError};
use crate::problems::PdeProblem;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("tensor grids are only defined over box domains")]
    GridRequiresBox,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("value lists of unequal length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error(
        "rejection sampling accepted {accepted} of {proposals} proposals (under 1%); \
         the domain is too thin relative to its bounding box"
    )]
    RejectionBudgetExceeded { proposals: u64, accepted: u64 },
    #[error("empty collocation set: {0}")]
    EmptySet(String),
    #[error("reference values have zero norm; relative error is undefined")]
    ZeroReferenceNorm,
    #[error("problem `{0}` has no reference solution")]
    MissingReference(String),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("CSV I/O failed: {0}")]
    Csv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A flat, row-major list of points sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "points must have at least one coordinate");
        PointSet {
            dim,
            coords: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        assert!(dim > 0, "points must have at least one coordinate");
        PointSet {
            dim,
            coords: Vec::with_capacity(dim * n),
        }
    }

    pub fn push(&mut self, point: &[f64]) {
        assert_eq!(point.len(), self.dim, "point arity mismatch");
        self.coords.extend_from_slice(point);
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Copies the half-open index range into a new set.
    pub fn slice(&self, start: usize, end: usize) -> PointSet {
        PointSet {
            dim: self.dim,
            coords: self.coords[start * self.dim..end * self.dim].to_vec(),
        }
    }
}

/// A box face, identified by the axis it is orthogonal to and which end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub dim: usize,
    pub upper: bool,
}

#[derive(Clone, Debug)]
pub enum DomainShape {
    /// Axis-aligned product of intervals. Faces listed in `open_faces` carry
    /// the PDE rather than boundary data.
    Box {
        intervals: Vec<(f64, f64)>,
        open_faces: Vec<Face>,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    Triangle {
        vertices: [[f64; 2]; 3],
    },
}

impl DomainShape {
    pub fn unit_box(d: usize) -> Self {
        DomainShape::Box {
            intervals: vec![(0.0, 1.0); d],
            open_faces: Vec::new(),
        }
    }

    pub fn axis_box(intervals: Vec<(f64, f64)>) -> Result<Self, GeometryError> {
        if intervals.is_empty() {
            return Err(GeometryError::InvalidDomain("box with no axes".into()));
        }
        for &(lo, hi) in &intervals {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(GeometryError::InvalidDomain(format!(
                    "interval [{lo}, {hi}] is not a proper interval"
                )));
            }
        }
        Ok(DomainShape::Box {
            intervals,
            open_faces: Vec::new(),
        })
    }

    /// Marks one face as open (PDE holds there; no boundary data).
    pub fn with_open_face(self, dim: usize, upper: bool) -> Result<Self, GeometryError> {
        match self {
            DomainShape::Box {
                intervals,
                mut open_faces,
            } => {
                if dim >= intervals.len() {
                    return Err(GeometryError::InvalidDomain(format!(
                        "open face on axis {dim} of a {}-dimensional box",
                        intervals.len()
                    )));
                }
                let face = Face { dim, upper };
                if !open_faces.contains(&face) {
                    open_faces.push(face);
                }
                Ok(DomainShape::Box {
                    intervals,
                    open_faces,
                })
            }
            _ => Err(GeometryError::InvalidDomain(
                "open faces only apply to boxes".into(),
            )),
        }
    }

    pub fn circle(center: [f64; 2], radius: f64) -> Result<Self, GeometryError> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(GeometryError::InvalidDomain(format!(
                "circle radius must be positive, got {radius}"
            )));
        }
        Ok(DomainShape::Circle { center, radius })
    }

    pub fn triangle(vertices: [[f64; 2]; 3]) -> Result<Self, GeometryError> {
        let [a, b, c] = vertices;
        let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if cross.abs() == 0.0 {
            return Err(GeometryError::InvalidDomain(
                "triangle vertices are collinear".into(),
            ));
        }
        Ok(DomainShape::Triangle { vertices })
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainShape::Box { intervals, .. } => intervals.len(),
            DomainShape::Circle { .. } | DomainShape::Triangle { .. } => 2,
        }
    }

    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        match self {
            DomainShape::Box { intervals, .. } => intervals.clone(),
            DomainShape::Circle { center, radius } => vec![
                (center[0] - radius, center[0] + radius),
                (center[1] - radius, center[1] + radius),
            ],
            DomainShape::Triangle { vertices } => {
                let xs = vertices.iter().map(|v| v[0]);
                let ys = vertices.iter().map(|v| v[1]);
                vec![
                    (
                        xs.clone().fold(f64::INFINITY, f64::min),
                        xs.fold(f64::NEG_INFINITY, f64::max),
                    ),
                    (
                        ys.clone().fold(f64::INFINITY, f64::min),
                        ys.fold(f64::NEG_INFINITY, f64::max),
                    ),
                ]
            }
        }
    }

    /// Membership in the domain closure (interior or boundary).
    pub fn contains(&self, p: &[f64]) -> bool {
        match self {
            DomainShape::Box { intervals, .. } => intervals
                .iter()
                .zip(p)
                .all(|(&(lo, hi), &x)| x >= lo && x <= hi),
            DomainShape::Circle { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                dx * dx + dy * dy <= radius * radius * (1.0 + 1e-12)
            }
            DomainShape::Triangle { vertices } => {
                barycentric(vertices, p).iter().all(|&b| b >= -1e-12)
            }
        }
    }

    /// Strict-interior test used by rejection sampling. Open faces are not
    /// special-cased here: they have measure zero under uniform proposals.
    pub fn contains_interior(&self, p: &[f64]) -> bool {
        match self {
            DomainShape::Box { intervals, .. } => intervals
                .iter()
                .zip(p)
                .all(|(&(lo, hi), &x)| x > lo && x < hi),
            DomainShape::Circle { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                dx * dx + dy * dy < radius * radius
            }
            DomainShape::Triangle { vertices } => {
                barycentric(vertices, p).iter().all(|&b| b > 1e-12)
            }
        }
    }
}

fn barycentric(vertices: &[[f64; 2]; 3], p: &[f64]) -> [f64; 3] {
    let [a, b, c] = vertices;
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    let l0 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l1 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    [l0, l1, 1.0 - l0 - l1]
}

/// How a collocation set was produced, kept for reporting.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Grid { counts: Vec<usize> },
    Random { seed: u64 },
    Imported,
}

/// Interior and boundary collocation points. Both parts are nonempty.
#[derive(Clone, Debug)]
pub struct CollocationSet {
    pub interior: PointSet,
    pub boundary: PointSet,
    pub provenance: Provenance,
}

impl CollocationSet {
    pub fn dim(&self) -> usize {
        self.interior.dim()
    }

    pub fn total_len(&self) -> usize {
        self.interior.len() + self.boundary.len()
    }
}

/// Tensor-product grid over a box, classified by grid indices: a point is
/// boundary exactly when it lies on at least one closed face.
pub fn grid_sample(domain: &DomainShape, counts: &[usize]) -> Result<CollocationSet, GeometryError> {
    let DomainShape::Box {
        intervals,
        open_faces,
    } = domain
    else {
        return Err(GeometryError::GridRequiresBox);
    };
    let d = intervals.len();
    if counts.len() != d {
        return Err(GeometryError::DimensionMismatch {
            expected: d,
            got: counts.len(),
        });
    }
    if let Some(&bad) = counts.iter().find(|&&c| c < 2) {
        return Err(GeometryError::DegenerateGrid(format!(
            "every axis needs at least 2 grid points, got {bad}"
        )));
    }
    let total: usize = counts.iter().product();
    let is_open = |dim: usize, upper: bool| open_faces.contains(&Face { dim, upper });
    let mut interior = PointSet::new(d);
    let mut boundary = PointSet::new(d);
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0f64; d];
    for _ in 0..total {
        let mut on_boundary = false;
        for i in 0..d {
            let (lo, hi) = intervals[i];
            let n = counts[i];
            point[i] = if idx[i] == n - 1 {
                hi
            } else {
                lo + (hi - lo) * idx[i] as f64 / (n - 1) as f64
            };
            if (idx[i] == 0 && !is_open(i, false)) || (idx[i] == n - 1 && !is_open(i, true)) {
                on_boundary = true;
            }
        }
        if on_boundary {
            boundary.push(&point);
        } else {
            interior.push(&point);
        }
        // Mixed-radix increment, last axis fastest.
        for i in (0..d).rev() {
            idx[i] += 1;
            if idx[i] < counts[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    if interior.is_empty() {
        return Err(GeometryError::EmptySet(
            "grid has no interior points; use at least 3 points on some axis".into(),
        ));
    }
    if boundary.is_empty() {
        return Err(GeometryError::EmptySet(
            "grid has no boundary points; all faces are open".into(),
        ));
    }
    Ok(CollocationSet {
        interior,
        boundary,
        provenance: Provenance::Grid {
            counts: counts.to_vec(),
        },
    })
}

/// Seeded random collocation: interior points by rejection against the
/// bounding box, boundary points drawn directly on the boundary with
/// probability proportional to face measure. The same seed reproduces the
/// same set bit-for-bit.
pub fn random_sample(
    domain: &DomainShape,
    n_interior: usize,
    n_boundary: usize,
    seed: u64,
) -> Result<CollocationSet, GeometryError> {
    if n_interior == 0 || n_boundary == 0 {
        return Err(GeometryError::EmptySet(
            "both interior and boundary counts must be positive".into(),
        ));
    }
    let d = domain.dim();
    let bbox = domain.bounding_box();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut interior = PointSet::with_capacity(d, n_interior);
    let mut proposal = vec![0.0f64; d];
    let mut proposals: u64 = 0;
    let mut accepted: u64 = 0;
    const BUDGET: u64 = 10_000_000;
    while (accepted as usize) < n_interior {
        for (x, &(lo, hi)) in proposal.iter_mut().zip(&bbox) {
            *x = rng.random_range(lo..hi);
        }
        proposals += 1;
        if domain.contains_interior(&proposal) {
            interior.push(&proposal);
            accepted += 1;
        }
        if proposals >= BUDGET && (accepted as f64) < 0.01 * proposals as f64 {
            return Err(GeometryError::RejectionBudgetExceeded {
                proposals,
                accepted,
            });
        }
    }
    let boundary = sample_boundary(domain, n_boundary, &mut rng)?;
    Ok(CollocationSet {
        interior,
        boundary,
        provenance: Provenance::Random { seed },
    })
}

fn sample_boundary(
    domain: &DomainShape,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PointSet, GeometryError> {
    let d = domain.dim();
    let mut out = PointSet::with_capacity(d, n);
    match domain {
        DomainShape::Box {
            intervals,
            open_faces,
        } => {
            // Closed faces weighted by their (d−1)-dimensional measure.
            let mut faces = Vec::new();
            for dim in 0..d {
                for upper in [false, true] {
                    if open_faces.contains(&Face { dim, upper }) {
                        continue;
                    }
                    let measure: f64 = intervals
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != dim)
                        .map(|(_, &(lo, hi))| hi - lo)
                        .product();
                    faces.push((Face { dim, upper }, measure));
                }
            }
            let total: f64 = faces.iter().map(|&(_, m)| m).sum();
            if faces.is_empty() || total <= 0.0 {
                return Err(GeometryError::EmptySet(
                    "box has no closed faces to sample".into(),
                ));
            }
            let mut point = vec![0.0f64; d];
            for _ in 0..n {
                let mut u = rng.random_range(0.0..total);
                let mut chosen = faces[faces.len() - 1].0;
                for &(face, m) in &faces {
                    if u < m {
                        chosen = face;
                        break;
                    }
                    u -= m;
                }
                for (j, &(lo, hi)) in intervals.iter().enumerate() {
                    point[j] = if j == chosen.dim {
                        if chosen.upper {
                            hi
                        } else {
                            lo
                        }
                    } else {
                        rng.random_range(lo..hi)
                    };
                }
                out.push(&point);
            }
        }
        DomainShape::Circle { center, radius } => {
            for _ in 0..n {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                out.push(&[
                    center[0] + radius * theta.cos(),
                    center[1] + radius * theta.sin(),
                ]);
            }
        }
        DomainShape::Triangle { vertices } => {
            let edges = [
                (vertices[0], vertices[1]),
                (vertices[1], vertices[2]),
                (vertices[2], vertices[0]),
            ];
            let lengths: Vec<f64> = edges
                .iter()
                .map(|(a, b)| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt())
                .collect();
            let total: f64 = lengths.iter().sum();
            for _ in 0..n {
                let mut u = rng.random_range(0.0..total);
                let mut k = edges.len() - 1;
                for (j, &len) in lengths.iter().enumerate() {
                    if u < len {
                        k = j;
                        break;
                    }
                    u -= len;
                }
                let (a, b) = edges[k];
                let s = rng.random_range(0.0..1.0);
                out.push(&[a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]);
            }
        }
    }
    Ok(out)
}

/// Fresh uniform evaluation grid over the domain closure, independent of any
/// training set. `resolution` is points per axis; the default scales down
/// with dimension (100 / 20 / 10 for d ≤ 2 / ≤ 4 / > 4).
pub fn eval_grid(
    domain: &DomainShape,
    resolution: Option<usize>,
) -> Result<PointSet, GeometryError> {
    let d = domain.dim();
    let res = resolution.unwrap_or(match d {
        0..=2 => 100,
        3..=4 => 20,
        _ => 10,
    });
    if res < 2 {
        return Err(GeometryError::DegenerateGrid(format!(
            "evaluation grid needs at least 2 points per axis, got {res}"
        )));
    }
    let bbox = domain.bounding_box();
    let total = res.checked_pow(d as u32).ok_or_else(|| {
        GeometryError::DegenerateGrid(format!("evaluation grid of {res}^{d} points overflows"))
    })?;
    let mut out = PointSet::new(d);
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0f64; d];
    for _ in 0..total {
        for i in 0..d {
            let (lo, hi) = bbox[i];
            point[i] = if idx[i] == res - 1 {
                hi
            } else {
                lo + (hi - lo) * idx[i] as f64 / (res - 1) as f64
            };
        }
        if domain.contains(&point) {
            out.push(&point);
        }
        for i in (0..d).rev() {
            idx[i] += 1;
            if idx[i] < res {
                break;
            }
            idx[i] = 0;
        }
    }
    if out.is_empty() {
        return Err(GeometryError::EmptySet(
            "evaluation grid contains no points of the domain".into(),
        ));
    }
    Ok(out)
}

/// Evaluates the model at every point, in fixed-size blocks so the cached
/// weight tables stay small even on million-point grids.
pub fn eval_model_on_points(
    model: &FactorModel,
    points: &PointSet,
) -> Result<Vec<f64>, GeometryError> {
    const BLOCK: usize = 16_384;
    let d = model.dim();
    let zero = DerivativeMultiIndex::zero(d);
    let orders = vec![std::collections::BTreeSet::from([0usize]); d];
    let mut values = Vec::with_capacity(points.len());
    let mut start = 0;
    while start < points.len() {
        let end = (start + BLOCK).min(points.len());
        let block = points.slice(start, end);
        let table = collocation_weights(model, &block, &orders)?;
        values.extend(eval_batch(model, &table, &zero)?);
        start = end;
    }
    Ok(values)
}

/// Relative L² error of `values` against `reference` over the same points.
pub fn relative_l2_values(values: &[f64], reference: &[f64]) -> Result<f64, GeometryError> {
    if values.len() != reference.len() {
        return Err(GeometryError::LengthMismatch {
            left: values.len(),
            right: reference.len(),
        });
    }
    let den: f64 = reference.iter().map(|r| r * r).sum();
    if den == 0.0 {
        return Err(GeometryError::ZeroReferenceNorm);
    }
    let num: f64 = values
        .iter()
        .zip(reference)
        .map(|(v, r)| (v - r) * (v - r))
        .sum();
    Ok((num / den).sqrt())
}

/// Relative L² error of the model against the problem's reference solution.
pub fn relative_l2(
    model: &FactorModel,
    problem: &PdeProblem,
    points: &PointSet,
) -> Result<f64, GeometryError> {
    let reference = problem
        .reference
        .as_ref()
        .ok_or_else(|| GeometryError::MissingReference(problem.key.clone()))?;
    let refs: Vec<f64> = exec::map_collect(points.len(), |m| reference(points.point(m)));
    let values = eval_model_on_points(model, points)?;
    relative_l2_values(&values, &refs)
}

/// Writes interior and boundary points to CSV with a `role` column.
pub fn export_collocation_csv(set: &CollocationSet, path: &Path) -> Result<(), GeometryError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| GeometryError::Csv(e.to_string()))?;
    let d = set.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("role".into());
    writer
        .write_record(&header)
        .map_err(|e| GeometryError::Csv(e.to_string()))?;
    for (points, role) in [(&set.interior, "interior"), (&set.boundary, "boundary")] {
        for p in points.iter() {
            let mut record: Vec<String> = p.iter().map(|x| format!("{x:?}")).collect();
            record.push(role.into());
            writer
                .write_record(&record)
                .map_err(|e| GeometryError::Csv(e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| GeometryError::Csv(e.to_string()))?;
    Ok(())
}

/// Reads a collocation CSV written by [`export_collocation_csv`]. Float
/// formatting uses the shortest round-trip representation, so the points come
/// back bit-identical.
pub fn import_collocation_csv(path: &Path) -> Result<CollocationSet, GeometryError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| GeometryError::Csv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| GeometryError::Csv(e.to_string()))?
        .clone();
    if headers.len() < 2 || headers.iter().next_back() != Some("role") {
        return Err(GeometryError::Csv(
            "expected coordinate columns followed by a `role` column".into(),
        ));
    }
    let d = headers.len() - 1;
    let mut interior = PointSet::new(d);
    let mut boundary = PointSet::new(d);
    let mut point = vec![0.0f64; d];
    for record in reader.records() {
        let record = record.map_err(|e| GeometryError::Csv(e.to_string()))?;
        if record.len() != d + 1 {
            return Err(GeometryError::Csv(format!(
                "row has {} fields, expected {}",
                record.len(),
                d + 1
            )));
        }
        for (i, slot) in point.iter_mut().enumerate() {
            *slot = record[i]
                .parse()
                .map_err(|e| GeometryError::Csv(format!("bad float `{}`: {e}", &record[i])))?;
        }
        match &record[d] {
            "interior" => interior.push(&point),
            "boundary" => boundary.push(&point),
            other => {
                return Err(GeometryError::Csv(format!(
                    "unknown role `{other}`; expected interior or boundary"
                )))
            }
        }
    }
    if interior.is_empty() || boundary.is_empty() {
        return Err(GeometryError::EmptySet(
            "imported CSV must contain both interior and boundary points".into(),
        ));
    }
    Ok(CollocationSet {
        interior,
        boundary,
        provenance: Provenance::Imported,
    })
}
