//! Scene samples, dataset directories, KITTI formats, synthetic scenes and augmentation.

pub mod augment;
pub mod kitti;
pub mod synthetic;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::class::class_name;
use crate::densify::TrackedObservation;
use crate::error::{Error, Result};
use crate::eval::{kitti_difficulty, GtRecord};
use crate::geometry::{corners_to_box2d, read_fmap, write_fmap, Box3D, CameraCalibration, FeatureMap};
use crate::pointcloud::{points_in_box, PointCloud};

pub use augment::{augment, apply_params, gt_sample, AugmentConfig, AugmentParams};
pub use kitti::{read_calib, read_labels, read_velodyne, write_calib, write_velodyne, KittiLabel, LabeledObject};
pub use synthetic::{gen_synthetic, SyntheticSceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub boxed: Box3D<f64>,
    pub track_id: u64,
    pub num_points: usize,
    pub truncated: f64,
    pub occluded: i32,
    /// Projected 2D box height in pixels, clipped to the image.
    pub bbox_height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub frame: String,
    /// One feature column: intensity.
    pub cloud: PointCloud<f64>,
    pub calib: CameraCalibration<f64>,
    pub image: FeatureMap<f64>,
    pub objects: Vec<SceneObject>,
    /// `(width, height)` pixels.
    pub image_size: (usize, usize),
}

pub fn count_in_box(b: &Box3D<f64>, coords: &[[f64; 3]]) -> usize {
    points_in_box(b, coords).into_iter().filter(|&x| x).count()
}

pub fn projected_height(calib: &CameraCalibration<f64>, b: &Box3D<f64>, image_h: f64) -> f64 {
    let (b2, visible) = corners_to_box2d(calib, b);
    if !visible {
        return 0.0;
    }
    (b2.v_max.min(image_h) - b2.v_min.max(0.0)).max(0.0)
}

impl SceneSample {
    pub fn gt_boxes(&self) -> Vec<(Box3D<f64>, usize)> {
        self.objects.iter().map(|o| (o.boxed, o.class)).collect()
    }

    pub fn gt_records(&self) -> Vec<GtRecord> {
        self.objects
            .iter()
            .map(|o| GtRecord {
                frame: self.frame.clone(),
                class: o.class,
                boxed: o.boxed,
                num_points: o.num_points,
                difficulty: kitti_difficulty(o.bbox_height, o.occluded, o.truncated),
            })
            .collect()
    }

    pub fn observations(&self) -> Vec<TrackedObservation> {
        self.objects
            .iter()
            .map(|o| TrackedObservation::new(self.frame.clone(), o.track_id, o.class, o.boxed, &self.cloud.coords))
            .collect()
    }

    /// Recounts in-box points after the cloud changed.
    pub fn refresh_counts(&mut self) {
        for o in &mut self.objects {
            o.num_points = count_in_box(&o.boxed, &self.cloud.coords);
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

const SUBDIRS: [&str; 5] = ["velodyne", "calib", "label_2", "image_2", "track"];

/// Writes a KITTI-style tree: `velodyne/*.bin`, `calib/*.txt`, `label_2/*.txt`,
/// feature maps as `image_2/*.fmap`, and per-label track ids in `track/*.txt`.
pub fn write_dataset(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    for sub in SUBDIRS {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        let f = &s.frame;
        let pc = PointCloud::new(
            s.cloud.coords.iter().map(|p| p.map(|v| v as f32)).collect(),
            s.cloud.features.iter().map(|&v| v as f32).collect(),
            1,
        )?;
        let mut w = create(&dir.join(format!("velodyne/{f}.bin")))?;
        write_velodyne(&pc, &mut w)?;
        w.flush()?;
        let mut w = create(&dir.join(format!("calib/{f}.txt")))?;
        write_calib(&s.calib, &mut w)?;
        w.flush()?;
        let labels: Vec<KittiLabel> = s
            .objects
            .iter()
            .map(|o| {
                let mut l = kitti::box_to_label(&o.boxed, &s.calib, class_name(o.class));
                let (b2, _) = corners_to_box2d(&s.calib, &o.boxed);
                let (iw, ih) = (s.image_size.0 as f64, s.image_size.1 as f64);
                l.bbox = [b2.u_min.clamp(0.0, iw), b2.v_min.clamp(0.0, ih), b2.u_max.clamp(0.0, iw), b2.v_max.clamp(0.0, ih)];
                l.truncated = o.truncated;
                l.occluded = o.occluded;
                l
            })
            .collect();
        let mut w = create(&dir.join(format!("label_2/{f}.txt")))?;
        kitti::write_label_rows(&labels, &mut w)?;
        w.flush()?;
        let mut w = create(&dir.join(format!("image_2/{f}.fmap")))?;
        write_fmap(&s.image, &mut w)?;
        w.flush()?;
        let mut w = create(&dir.join(format!("track/{f}.txt")))?;
        for o in &s.objects {
            writeln!(w, "{}", o.track_id)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Frame ids present under `velodyne/`, sorted.
pub fn list_frames(dir: &Path) -> Result<Vec<String>> {
    let v = dir.join("velodyne");
    let mut out = Vec::new();
    for e in fs::read_dir(&v).map_err(|e| Error::io(&v, e))? {
        let p = e.map_err(|e| Error::io(&v, e))?.path();
        if p.extension().is_some_and(|x| x == "bin") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads one frame. Track ids default to the label row index when `track/` is absent.
pub fn load_frame(dir: &Path, frame: &str) -> Result<SceneSample> {
    let pc = read_velodyne(open(&dir.join(format!("velodyne/{frame}.bin")))?)?;
    let cloud = PointCloud::new(
        pc.coords.iter().map(|p| p.map(f64::from)).collect(),
        pc.features.iter().map(|&v| f64::from(v)).collect(),
        1,
    )?;
    let calib = read_calib(open(&dir.join(format!("calib/{frame}.txt")))?)?;
    let fmap_path = dir.join(format!("image_2/{frame}.fmap"));
    let image: FeatureMap<f64> = read_fmap(open(&fmap_path)?)?;
    let label_path = dir.join(format!("label_2/{frame}.txt"));
    let labels = if label_path.exists() {
        read_labels(open(&label_path)?, &calib)?
    } else {
        Vec::new()
    };
    let track_path = dir.join(format!("track/{frame}.txt"));
    let tracks: Vec<u64> = if track_path.exists() {
        let text = fs::read_to_string(&track_path).map_err(|e| Error::io(&track_path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("{}: line {}: bad track id", track_path.display(), i + 1)))
            })
            .collect::<Result<_>>()?
    } else {
        (0..labels.len() as u64).collect()
    };
    if tracks.len() != labels.len() {
        return Err(Error::Format(format!(
            "{}: {} track ids for {} labels",
            track_path.display(),
            tracks.len(),
            labels.len()
        )));
    }
    let (iw, ih) = image.image_size();
    let objects = labels
        .into_iter()
        .zip(tracks)
        .map(|(l, track_id)| SceneObject {
            class: l.class,
            num_points: count_in_box(&l.boxed, &cloud.coords),
            boxed: l.boxed,
            track_id,
            truncated: l.truncated,
            occluded: l.occluded,
            bbox_height: l.bbox_height,
        })
        .collect();
    Ok(SceneSample {
        frame: frame.to_string(),
        cloud,
        calib,
        image,
        objects,
        image_size: (iw as usize, ih as usize),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    list_frames(dir)?.iter().map(|f| load_frame(dir, f)).collect()
}
