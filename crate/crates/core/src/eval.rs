//! Detection metrics: greedy IoU matching, AP over 40 recall positions,
//! heading-weighted AP, range-binned AP, difficulty levels, reports and PR curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::class::{class_id, class_name};
use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev, Box3D};
use crate::head::{parse_box, parse_fields, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSpace {
    #[serde(rename = "3d")]
    ThreeD,
    Bev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyMode {
    Kitti,
    Wod,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU threshold per class id.
    pub iou_thresholds: Vec<f64>,
    pub space: MetricSpace,
    pub recall_positions: usize,
    /// Lower bin edges in meters; the last bin is open-ended.
    pub range_bins: Vec<f64>,
    pub mode: DifficultyMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.7, 0.5, 0.5],
            space: MetricSpace::ThreeD,
            recall_positions: 40,
            range_bins: vec![0.0, 20.0, 40.0],
            mode: DifficultyMode::Kitti,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config(format!("IoU thresholds must lie in (0, 1]: {:?}", self.iou_thresholds)));
        }
        if self.range_bins.first() != Some(&0.0) || self.range_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("range bins must start at 0 and increase: {:?}", self.range_bins)));
        }
        if self.recall_positions == 0 {
            return Err(Error::Config("recall positions must be positive".into()));
        }
        Ok(())
    }

    pub fn threshold(&self, class: usize) -> f64 {
        self.iou_thresholds.get(class).copied().unwrap_or(0.5)
    }
}

pub fn overlap(a: &Box3D<f64>, b: &Box3D<f64>, space: MetricSpace) -> f64 {
    match space {
        MetricSpace::ThreeD => iou_3d(a, b),
        MetricSpace::Bev => iou_bev(a, b),
    }
}

/// Smallest angle between two headings, in `[0, pi]`.
pub fn heading_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
    d.min(2.0 * std::f64::consts::PI - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Tp,
    Fp,
    /// Matched a ground truth that does not count at this level.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indexed like the input detections.
    pub outcome: Vec<Outcome>,
    pub matched_gt: Vec<Option<usize>>,
    pub iou: Vec<f64>,
    pub heading_error: Vec<f64>,
}

/// Detection order used everywhere: confidence descending, then index.
pub fn confidence_order(conf: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching within one frame and class. Each detection, in confidence order,
/// takes the highest-IoU unmatched counted GT at or above `thresh`; failing that, an
/// ignored GT above threshold makes it `Ignored`, otherwise it is a false positive.
pub fn match_frame(
    dets: &[(Box3D<f64>, f64)],
    gts: &[Box3D<f64>],
    ignore: &[bool],
    thresh: f64,
    space: MetricSpace,
) -> MatchResult {
    let n = dets.len();
    let mut res = MatchResult {
        outcome: vec![Outcome::Fp; n],
        matched_gt: vec![None; n],
        iou: vec![0.0; n],
        heading_error: vec![0.0; n],
    };
    let mut taken = vec![false; gts.len()];
    let conf: Vec<f64> = dets.iter().map(|d| d.1).collect();
    for i in confidence_order(&conf) {
        let mut best = None;
        let mut best_iou = thresh;
        let mut ignored_hit = false;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = overlap(&dets[i].0, g, space);
            if v < thresh {
                continue;
            }
            if ignore[j] {
                ignored_hit = true;
                continue;
            }
            if v > best_iou || (best.is_none() && v >= best_iou) {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            taken[j] = true;
            res.outcome[i] = Outcome::Tp;
            res.matched_gt[i] = Some(j);
            res.iou[i] = best_iou;
            res.heading_error[i] = heading_error(dets[i].0.yaw, gts[j].yaw);
        } else if ignored_hit {
            res.outcome[i] = Outcome::Ignored;
        }
    }
    res
}

/// One scored detection after matching: `weight` is 1 for a TP (or its heading
/// weight), `None` for a false positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub confidence: f64,
    pub tp_weight: Option<f64>,
}

/// Precision/recall after each detection in confidence order.
pub fn pr_curve(scored: &[Scored], gt_count: usize) -> Vec<(f64, f64)> {
    let conf: Vec<f64> = scored.iter().map(|s| s.confidence).collect();
    let mut tp = 0.0;
    let mut out = Vec::with_capacity(scored.len());
    for (k, i) in confidence_order(&conf).into_iter().enumerate() {
        if let Some(w) = scored[i].tp_weight {
            tp += w;
        }
        out.push((tp / gt_count as f64, tp / (k + 1) as f64));
    }
    out
}

/// Interpolated AP on the recall grid `{1/n, ..., 1}`; `None` without ground truth.
pub fn ap_interpolated(scored: &[Scored], gt_count: usize, positions: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let curve = pr_curve(scored, gt_count);
    let mut best_from = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best_from[i] = best_from[i + 1].max(curve[i].1);
    }
    let mut sum = 0.0;
    let mut i = 0;
    for k in 1..=positions {
        let r = k as f64 / positions as f64;
        while i < curve.len() && curve[i].0 < r - 1e-12 {
            i += 1;
        }
        sum += best_from[i];
    }
    Some(sum / positions as f64)
}

pub fn ap_r40(scored: &[Scored], gt_count: usize) -> Option<f64> {
    ap_interpolated(scored, gt_count, 40)
}

/// Same sweep with each true positive weighted by `1 - dtheta / pi`.
pub fn ap_heading_r40(matches: &[(f64, Option<f64>)], gt_count: usize) -> Option<f64> {
    let scored: Vec<Scored> = matches
        .iter()
        .map(|&(c, h)| Scored {
            confidence: c,
            tp_weight: h.map(|e| 1.0 - e / std::f64::consts::PI),
        })
        .collect();
    ap_r40(&scored, gt_count)
}

/// Range bin of a planar distance given lower edges (half-open bins).
pub fn range_bin(bins: &[f64], d: f64) -> usize {
    bins.iter().rposition(|&lo| d >= lo).unwrap_or(0)
}

pub fn planar_distance(b: &Box3D<f64>) -> f64 {
    b.center[0].hypot(b.center[1])
}

/// KITTI difficulty from label fields: 0 easy, 1 moderate, 2 hard, -1 none.
pub fn kitti_difficulty(box_height_px: f64, occlusion: i32, truncation: f64) -> i8 {
    let rules = [(40.0, 0, 0.15), (25.0, 1, 0.30), (25.0, 2, 0.50)];
    for (lvl, &(h, o, t)) in rules.iter().enumerate() {
        if box_height_px >= h && occlusion <= o && truncation <= t {
            return lvl as i8;
        }
    }
    -1
}

/// Waymo-style level: 0 (L1) above five in-box points, else 1 (L2).
pub fn wod_difficulty(num_points: usize) -> i8 {
    if num_points > 5 {
        0
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtRecord {
    pub frame: String,
    pub class: usize,
    pub boxed: Box3D<f64>,
    pub num_points: usize,
    /// Level under the dataset's rule; `-1` never counts.
    pub difficulty: i8,
}

/// Level recomputed for `mode`; KITTI keeps the stored label-derived level.
pub fn difficulty_split(gts: &[GtRecord], mode: DifficultyMode) -> Vec<i8> {
    gts.iter()
        .map(|g| match mode {
            DifficultyMode::Kitti => g.difficulty,
            DifficultyMode::Wod => wod_difficulty(g.num_points),
        })
        .collect()
}

pub const GT_HEADER: &str = "# frame class x y z l w h yaw points difficulty";

pub fn write_gt<W: Write>(gts: &[GtRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{GT_HEADER}")?;
    for g in gts {
        let b = &g.boxed;
        writeln!(
            w,
            "{} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {} {}",
            g.frame,
            class_name(g.class),
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw,
            g.num_points,
            g.difficulty
        )?;
    }
    Ok(())
}

pub fn read_gt<R: BufRead>(r: R) -> Result<Vec<GtRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 11 {
            return Err(Error::Format(format!("line {}: expected 11 fields, got {}", i + 1, f.len())));
        }
        let class = class_id(f[1]).ok_or_else(|| Error::Format(format!("line {}: unknown class {}", i + 1, f[1])))?;
        let v = parse_fields(&f[2..9], i + 1)?;
        let num_points = f[9]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad point count", i + 1)))?;
        let difficulty = f[10]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad difficulty", i + 1)))?;
        out.push(GtRecord {
            frame: f[0].to_string(),
            class,
            boxed: parse_box(&v, i + 1)?,
            num_points,
            difficulty,
        });
    }
    Ok(out)
}

/// Metrics for one class under one difficulty level or range bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub ap: Option<f64>,
    pub aph: Option<f64>,
    pub gt_count: usize,
    pub det_count: usize,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    /// Indexed by difficulty level.
    pub levels: Vec<Metric>,
    /// Indexed by range bin, all counted difficulty levels pooled.
    pub ranges: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub classes: Vec<ClassReport>,
}

fn metric(scored: &[Scored], heading: &[(f64, Option<f64>)], gt_count: usize, positions: usize) -> Metric {
    Metric {
        ap: ap_interpolated(scored, gt_count, positions),
        aph: if positions == 40 {
            ap_heading_r40(heading, gt_count)
        } else {
            None
        },
        gt_count,
        det_count: scored.len(),
        curve: if gt_count > 0 { pr_curve(scored, gt_count) } else { Vec::new() },
    }
}

type FrameGroups<'a> = BTreeMap<&'a str, (Vec<&'a Detection>, Vec<(usize, &'a GtRecord)>)>;

fn group<'a>(dets: &'a [(String, Detection)], gts: &'a [GtRecord], class: usize) -> FrameGroups<'a> {
    let mut frames: FrameGroups<'a> = BTreeMap::new();
    for (f, d) in dets.iter().filter(|(_, d)| d.class == class) {
        frames.entry(f.as_str()).or_default().0.push(d);
    }
    for (i, g) in gts.iter().enumerate().filter(|(_, g)| g.class == class) {
        frames.entry(g.frame.as_str()).or_default().1.push((i, g));
    }
    frames
}

/// Matches at one difficulty level: GTs at or below `level` count, others are ignored.
fn level_metric(frames: &FrameGroups<'_>, level: i8, levels: &[i8], cfg: &EvalConfig, class: usize) -> Metric {
    let mut scored = Vec::new();
    let mut heading = Vec::new();
    let mut gt_count = 0;
    for (dets, gts) in frames.values() {
        let boxes: Vec<Box3D<f64>> = gts.iter().map(|(_, g)| g.boxed).collect();
        let ignore: Vec<bool> = gts.iter().map(|(i, _)| levels[*i] < 0 || levels[*i] > level).collect();
        gt_count += ignore.iter().filter(|&&x| !x).count();
        let d: Vec<(Box3D<f64>, f64)> = dets.iter().map(|d| (d.boxed, d.confidence)).collect();
        let m = match_frame(&d, &boxes, &ignore, cfg.threshold(class), cfg.space);
        for (k, o) in m.outcome.iter().enumerate() {
            match o {
                Outcome::Ignored => {}
                Outcome::Tp => {
                    scored.push(Scored { confidence: d[k].1, tp_weight: Some(1.0) });
                    heading.push((d[k].1, Some(m.heading_error[k])));
                }
                Outcome::Fp => {
                    scored.push(Scored { confidence: d[k].1, tp_weight: None });
                    heading.push((d[k].1, None));
                }
            }
        }
    }
    metric(&scored, &heading, gt_count, cfg.recall_positions)
}

/// Per range bin, every GT counts; matches are global and attributed to the
/// matched GT's bin, false positives to their own bin.
pub fn map_by_range(frames: &FrameGroups<'_>, cfg: &EvalConfig, class: usize) -> Vec<Metric> {
    let nb = cfg.range_bins.len();
    let mut scored = vec![Vec::new(); nb];
    let mut heading = vec![Vec::new(); nb];
    let mut gt_count = vec![0; nb];
    for (dets, gts) in frames.values() {
        let boxes: Vec<Box3D<f64>> = gts.iter().map(|(_, g)| g.boxed).collect();
        let gt_bin: Vec<usize> = boxes.iter().map(|b| range_bin(&cfg.range_bins, planar_distance(b))).collect();
        for &b in &gt_bin {
            gt_count[b] += 1;
        }
        let d: Vec<(Box3D<f64>, f64)> = dets.iter().map(|d| (d.boxed, d.confidence)).collect();
        let m = match_frame(&d, &boxes, &vec![false; boxes.len()], cfg.threshold(class), cfg.space);
        for k in 0..d.len() {
            match m.matched_gt[k] {
                Some(j) => {
                    scored[gt_bin[j]].push(Scored { confidence: d[k].1, tp_weight: Some(1.0) });
                    heading[gt_bin[j]].push((d[k].1, Some(m.heading_error[k])));
                }
                None => {
                    let b = range_bin(&cfg.range_bins, planar_distance(&d[k].0));
                    scored[b].push(Scored { confidence: d[k].1, tp_weight: None });
                    heading[b].push((d[k].1, None));
                }
            }
        }
    }
    (0..nb)
        .map(|b| metric(&scored[b], &heading[b], gt_count[b], cfg.recall_positions))
        .collect()
}

/// Range-binned metrics for one class directly from detection and GT lists.
pub fn range_metrics(dets: &[(String, Detection)], gts: &[GtRecord], cfg: &EvalConfig, class: usize) -> Vec<Metric> {
    map_by_range(&group(dets, gts, class), cfg, class)
}

pub fn evaluate(dets: &[(String, Detection)], gts: &[GtRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let levels = difficulty_split(gts, cfg.mode);
    let n_levels: i8 = match cfg.mode {
        DifficultyMode::Kitti => 3,
        DifficultyMode::Wod => 2,
    };
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).chain(dets.iter().map(|d| d.1.class)).collect();
    classes.sort_unstable();
    classes.dedup();
    let classes = classes
        .into_iter()
        .map(|c| {
            let frames = group(dets, gts, c);
            ClassReport {
                class: c,
                levels: (0..n_levels).map(|l| level_metric(&frames, l, &levels, cfg, c)).collect(),
                ranges: map_by_range(&frames, cfg, c),
            }
        })
        .collect();
    Ok(EvalReport {
        config: cfg.clone(),
        classes,
    })
}

impl EvalReport {
    /// Mean over classes with ground truth at the given level.
    pub fn mean_ap(&self, level: usize) -> Option<f64> {
        let v: Vec<f64> = self.classes.iter().filter_map(|c| c.levels.get(level).and_then(|m| m.ap)).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn level_names(&self) -> &'static [&'static str] {
        match self.config.mode {
            DifficultyMode::Kitti => &["easy", "moderate", "hard"],
            DifficultyMode::Wod => &["L1", "L2"],
        }
    }

    pub fn bin_name(&self, b: usize) -> String {
        let bins = &self.config.range_bins;
        match bins.get(b + 1) {
            Some(hi) => format!("[{},{})", bins[b], hi),
            None => format!("[{},inf)", bins[b]),
        }
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
        let space = match self.config.space {
            MetricSpace::ThreeD => "3D",
            MetricSpace::Bev => "BEV",
        };
        let mut s = String::new();
        let _ = writeln!(s, "{:<11} {:<5} {:<12} {:>8} {:>8} {:>6} {:>6}", "class", "space", "split", "AP", "APH", "gts", "dets");
        for c in &self.classes {
            let rows = c
                .levels
                .iter()
                .enumerate()
                .map(|(i, m)| (self.level_names()[i].to_string(), m))
                .chain(c.ranges.iter().enumerate().map(|(b, m)| (self.bin_name(b), m)));
            for (name, m) in rows {
                let _ = writeln!(
                    s,
                    "{:<11} {:<5} {:<12} {:>8} {:>8} {:>6} {:>6}",
                    class_name(c.class),
                    space,
                    name,
                    fmt(m.ap),
                    fmt(m.aph),
                    m.gt_count,
                    m.det_count
                );
            }
        }
        for (i, name) in self.level_names().iter().enumerate() {
            let _ = writeln!(s, "mAP {name}: {}", fmt(self.mean_ap(i)));
        }
        s
    }

    /// `(file stem, csv)` pairs: one curve per class and range bin.
    pub fn pr_csvs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for c in &self.classes {
            for (b, m) in c.ranges.iter().enumerate() {
                let mut csv = String::from("recall,precision\n");
                for (r, p) in &m.curve {
                    let _ = writeln!(csv, "{r:.6},{p:.6}");
                }
                let bins = &self.config.range_bins;
                let hi = bins.get(b + 1).map_or("inf".to_string(), |h| format!("{h}"));
                out.push((format!("pr_{}_{}-{}", class_name(c.class), bins[b], hi), csv));
            }
        }
        out
    }
}
