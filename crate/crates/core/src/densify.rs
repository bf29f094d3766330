//! Dense ground-truth templates: cross-frame aggregation per track, lateral
//! mirroring, best-match completion of sparse objects, and the template store.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::class::{class_name, is_laterally_symmetric, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::geometry::{canonical_transform, inverse_canonical_transform, Box3D};
use crate::pointcloud::{directed_chamfer, points_in_box};

/// One labeled sighting of a tracked object with its in-box LiDAR points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedObservation {
    pub frame: String,
    pub object_id: u64,
    pub class: usize,
    pub boxed: Box3D<f64>,
    pub points: Vec<[f64; 3]>,
}

impl TrackedObservation {
    /// Keeps only the points inside `boxed`.
    pub fn new(frame: String, object_id: u64, class: usize, boxed: Box3D<f64>, points: &[[f64; 3]]) -> Self {
        let inside = points_in_box(&boxed, points);
        let points = points.iter().zip(inside).filter(|(_, i)| *i).map(|(p, _)| *p).collect();
        Self {
            frame,
            object_id,
            class,
            boxed,
            points,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub aggregated: bool,
    pub mirrored: bool,
    pub matched: bool,
}

/// Completed object shape in its own box frame (centered, yaw 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseObjectTemplate {
    pub id: u64,
    pub class: usize,
    /// `(l, w, h)`.
    pub dims: [f64; 3],
    pub points: Vec<[f64; 3]>,
    pub source_frames: usize,
    pub provenance: Provenance,
}

impl DenseObjectTemplate {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether every point lies in the canonical box `|p_k| <= dims_k / 2 + tol`.
    pub fn within_box(&self, tol: f64) -> bool {
        self.points
            .iter()
            .all(|p| (0..3).all(|k| p[k].abs() <= 0.5 * self.dims[k] + tol))
    }

    /// Points scaled to `target`'s dimensions and placed in its frame.
    pub fn place_in(&self, target: &Box3D<f64>) -> Vec<[f64; 3]> {
        let s = [
            target.size[0] / self.dims[0],
            target.size[1] / self.dims[1],
            target.size[2] / self.dims[2],
        ];
        let scaled: Vec<[f64; 3]> = self.points.iter().map(|p| [p[0] * s[0], p[1] * s[1], p[2] * s[2]]).collect();
        inverse_canonical_transform(target, &scaled)
    }
}

pub const DEDUP_CELL: f64 = 0.02;

/// Keeps the first point of every `cell`-sized voxel, preserving order.
pub fn dedup(points: &[[f64; 3]], cell: f64) -> Vec<[f64; 3]> {
    let mut seen = HashSet::with_capacity(points.len());
    points
        .iter()
        .filter(|p| seen.insert(p.map(|v| (v / cell).floor() as i64)))
        .copied()
        .collect()
}

fn clamp_into(points: &mut [[f64; 3]], dims: [f64; 3]) {
    for p in points {
        for k in 0..3 {
            p[k] = p[k].clamp(-0.5 * dims[k], 0.5 * dims[k]);
        }
    }
}

/// Union of every frame's canonical points, frames in ascending id order.
/// `None` when no observation carries a point.
pub fn aggregate_by_id(observations: &[TrackedObservation], cell: f64) -> Option<DenseObjectTemplate> {
    let first = observations.first()?;
    let mut obs: Vec<&TrackedObservation> = observations.iter().collect();
    obs.sort_by(|a, b| a.frame.cmp(&b.frame));
    let mut dims = [0.0f64; 3];
    let mut all = Vec::new();
    for o in &obs {
        for k in 0..3 {
            dims[k] = dims[k].max(o.boxed.size[k]);
        }
        all.extend(canonical_transform(&o.boxed, &o.points));
    }
    clamp_into(&mut all, dims);
    let points = dedup(&all, cell);
    if points.is_empty() {
        return None;
    }
    Some(DenseObjectTemplate {
        id: first.object_id,
        class: first.class,
        dims,
        points,
        source_frames: obs.len(),
        provenance: Provenance {
            aggregated: obs.len() > 1,
            ..Provenance::default()
        },
    })
}

/// Appends the `y -> -y` reflection for laterally symmetric classes.
/// Returns whether the mirror was applied.
pub fn mirror_symmetric(t: &DenseObjectTemplate, cell: f64) -> (DenseObjectTemplate, bool) {
    if !is_laterally_symmetric(t.class) {
        return (t.clone(), false);
    }
    let mut all = t.points.clone();
    all.extend(t.points.iter().map(|p| [p[0], -p[1], p[2]]));
    let mut out = t.clone();
    out.points = dedup(&all, cell);
    out.provenance.mirrored = true;
    (out, true)
}

fn normalized(points: &[[f64; 3]], dims: [f64; 3]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p[0] / dims[0], p[1] / dims[1], p[2] / dims[2]]).collect()
}

pub fn size_compatible(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    (0..3).all(|k| (a[k] - b[k]).abs() <= tol * a[k])
}

/// Merges the `k` library templates of the same class whose dimensions agree within 10%
/// and whose size-normalized shape is closest (directed Chamfer from the sparse template).
/// Returns whether any candidate was merged.
pub fn best_match_complete(
    sparse: &DenseObjectTemplate,
    library: &[DenseObjectTemplate],
    k: usize,
    cell: f64,
) -> (DenseObjectTemplate, bool) {
    let query = normalized(&sparse.points, sparse.dims);
    let mut scored: Vec<(f64, usize)> = library
        .iter()
        .enumerate()
        .filter(|(_, c)| c.class == sparse.class && !c.is_empty() && size_compatible(sparse.dims, c.dims, 0.1))
        .filter_map(|(i, c)| {
            directed_chamfer(&query, &normalized(&c.points, c.dims))
                .ok()
                .map(|d| (d, i))
        })
        .collect();
    if scored.is_empty() || k == 0 {
        return (sparse.clone(), false);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut all = sparse.points.clone();
    for &(_, i) in scored.iter().take(k) {
        let c = &library[i];
        all.extend(c.points.iter().map(|p| {
            [
                p[0] * sparse.dims[0] / c.dims[0],
                p[1] * sparse.dims[1] / c.dims[1],
                p[2] * sparse.dims[2] / c.dims[2],
            ]
        }));
    }
    clamp_into(&mut all, sparse.dims);
    let mut out = sparse.clone();
    out.points = dedup(&all, cell);
    out.provenance.matched = true;
    (out, true)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub dedup_cell: f64,
    /// Templates with fewer points are completed from the library.
    pub density_threshold: usize,
    pub match_k: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            dedup_cell: DEDUP_CELL,
            density_threshold: 64,
            match_k: 1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub templates: Vec<DenseObjectTemplate>,
    /// Ids that produced no template, with the reason.
    pub failures: Vec<(u64, String)>,
    pub match_calls: usize,
}

/// Per object id: aggregate, mirror when eligible, then complete sparse results.
pub fn build_gt_database(observations: &[TrackedObservation], cfg: &DensifyConfig) -> BuildReport {
    let mut by_id: BTreeMap<u64, Vec<TrackedObservation>> = BTreeMap::new();
    for o in observations {
        by_id.entry(o.object_id).or_default().push(o.clone());
    }
    let built: Vec<(u64, Option<DenseObjectTemplate>)> = by_id
        .par_iter()
        .map(|(&id, obs)| {
            let t = aggregate_by_id(obs, cfg.dedup_cell).map(|t| mirror_symmetric(&t, cfg.dedup_cell).0);
            (id, t)
        })
        .collect();
    let mut report = BuildReport::default();
    let mut staged = Vec::new();
    for (id, t) in built {
        match t {
            Some(t) => staged.push(t),
            None => report.failures.push((id, "no in-box points".into())),
        }
    }
    let library: Vec<DenseObjectTemplate> = staged
        .iter()
        .filter(|t| t.len() >= cfg.density_threshold)
        .cloned()
        .collect();
    for t in staged {
        if t.len() < cfg.density_threshold {
            report.match_calls += 1;
            report.templates.push(best_match_complete(&t, &library, cfg.match_k, cfg.dedup_cell).0);
        } else {
            report.templates.push(t);
        }
    }
    report
}

const STORE_MAGIC: &[u8; 4] = b"DGTB";
const STORE_VERSION: u32 = 1;

/// Writes one store file. Values are narrowed to `f32`.
pub fn write_dgtb<W: Write>(templates: &[DenseObjectTemplate], mut w: W) -> std::io::Result<()> {
    w.write_all(STORE_MAGIC)?;
    w.write_all(&STORE_VERSION.to_le_bytes())?;
    w.write_all(&(templates.len() as u32).to_le_bytes())?;
    for t in templates {
        w.write_all(&t.id.to_le_bytes())?;
        w.write_all(&[t.class as u8])?;
        for d in t.dims {
            w.write_all(&(d as f32).to_le_bytes())?;
        }
        w.write_all(&(t.points.len() as u32).to_le_bytes())?;
        for p in &t.points {
            for v in p {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn take<const N: usize>(cur: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    cur.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated template store".into()))?;
    Ok(b)
}

/// Reads one store file; provenance and frame counts are not stored and come back empty.
pub fn read_dgtb<R: Read>(mut r: R) -> Result<Vec<DenseObjectTemplate>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    if &take::<4>(&mut cur)? != STORE_MAGIC {
        return Err(Error::Format("bad template store magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cur)?);
    if version != STORE_VERSION {
        return Err(Error::Format(format!("unsupported template store version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut cur)?) as usize;
    let f = |b: [u8; 4]| f32::from_le_bytes(b) as f64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = u64::from_le_bytes(take(&mut cur)?);
        let class = take::<1>(&mut cur)?[0] as usize;
        let dims = [f(take(&mut cur)?), f(take(&mut cur)?), f(take(&mut cur)?)];
        let m = u32::from_le_bytes(take(&mut cur)?) as usize;
        if cur.len() < m * 12 {
            return Err(Error::Format("truncated template store".into()));
        }
        let mut points = Vec::with_capacity(m);
        for _ in 0..m {
            points.push([f(take(&mut cur)?), f(take(&mut cur)?), f(take(&mut cur)?)]);
        }
        out.push(DenseObjectTemplate {
            id,
            class,
            dims,
            points,
            source_frames: 0,
            provenance: Provenance::default(),
        });
    }
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes in template store".into()));
    }
    Ok(out)
}

/// One `<Class>.dgtb` file per class present, templates sorted by id.
pub fn write_store(dir: &Path, templates: &[DenseObjectTemplate]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (c, _) in CLASS_NAMES.iter().enumerate() {
        let mut of: Vec<DenseObjectTemplate> = templates.iter().filter(|t| t.class == c).cloned().collect();
        if of.is_empty() {
            continue;
        }
        of.sort_by_key(|t| t.id);
        let path = dir.join(format!("{}.dgtb", class_name(c)));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(f);
        write_dgtb(&of, &mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_store(dir: &Path) -> Result<Vec<DenseObjectTemplate>> {
    let mut out = Vec::new();
    for name in CLASS_NAMES {
        let path = dir.join(format!("{name}.dgtb"));
        if !path.exists() {
            continue;
        }
        let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        out.extend(read_dgtb(std::io::BufReader::new(f))?);
    }
    Ok(out)
}
