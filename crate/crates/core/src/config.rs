//! Run configuration loaded from TOML. Every section and field has a default,
//! so a config file only needs the values it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::class::{CAR, CYCLIST, PEDESTRIAN};
use crate::data::augment::AugmentConfig;
use crate::data::synthetic::SyntheticSceneSpec;
use crate::densify::DensifyConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pointcloud::RangeSpec;
use crate::rpn::AnchorSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub densify: DensifyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// KITTI-style dataset directory.
    pub root: PathBuf,
    /// Scenes written by `gen-synthetic`.
    pub scenes: usize,
    /// Template store directory; built from the training scenes when absent.
    pub templates: Option<PathBuf>,
    /// Checkpoint read by `infer`; defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Detections read by `eval` and `plot-pr`; defaults to `<out>/detections.txt`.
    pub detections: Option<PathBuf>,
    pub synthetic: SyntheticSceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            scenes: 64,
            templates: None,
            checkpoint: None,
            detections: None,
            synthetic: SyntheticSceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub range: RangeSpec<f64>,
    pub voxel_size: [f64; 3],
    pub bev_cell: f64,
    pub anchors: Vec<AnchorSpec>,
    /// Decorated point width `Fd`.
    pub point_width: usize,
    pub bev_width: usize,
    pub rpn_hidden: usize,
    /// BEV neighborhood radius in cells feeding each anchor head.
    pub rpn_context: usize,
    /// Prior foreground probability for the anchor classifier bias.
    pub rpn_prior: f64,
    pub grid_size: usize,
    pub neighbors: usize,
    /// `Cv`.
    pub voxel_width: usize,
    /// `Cb`.
    pub roi_width: usize,
    /// `Cf`.
    pub fused_width: usize,
    /// `Cs`.
    pub semantic_width: usize,
    /// `Ci`, image features of generated points.
    pub image_width: usize,
    pub canonical_width: usize,
    pub head_width: usize,
    pub enlarge: f64,
    pub roi_bins: usize,
    pub roi_samples: usize,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    pub ff_width: usize,
    /// False replaces every feature map with zeros (LiDAR-only variant).
    pub use_image: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            range: RangeSpec {
                min: [0.0, -40.0, -3.0],
                max: [70.4, 40.0, 1.0],
            },
            voxel_size: [0.4, 0.4, 0.5],
            bev_cell: 0.8,
            anchors: vec![
                AnchorSpec {
                    class: CAR,
                    size: [3.9, 1.6, 1.56],
                    z_center: -0.82,
                    matching: None,
                },
                AnchorSpec {
                    class: PEDESTRIAN,
                    size: [0.8, 0.6, 1.73],
                    z_center: -0.735,
                    matching: Some([0.5, 0.35]),
                },
                AnchorSpec {
                    class: CYCLIST,
                    size: [1.76, 0.6, 1.73],
                    z_center: -0.735,
                    matching: Some([0.5, 0.35]),
                },
            ],
            point_width: 16,
            bev_width: 32,
            rpn_hidden: 64,
            rpn_context: 1,
            rpn_prior: 0.01,
            grid_size: 6,
            neighbors: 16,
            voxel_width: 16,
            roi_width: 32,
            fused_width: 32,
            semantic_width: 16,
            image_width: 16,
            canonical_width: 16,
            head_width: 64,
            enlarge: 1.2,
            roi_bins: 7,
            roi_samples: 2,
            transformer_layers: 2,
            attention_heads: 4,
            ff_width: 64,
            use_image: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub smooth_l1_beta: f64,
    pub score_samples: usize,
    pub rpn_weight: f64,
    pub rcnn_weight: f64,
    /// Applied to both the offset and the score term.
    pub rpg_weight: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    /// BEV IoU at which an RoI counts as matched for point generation.
    pub rpg_pos_iou: f64,
    /// 3D IoU at which an RoI receives a refinement target.
    pub reg_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            score_samples: 128,
            rpn_weight: 1.0,
            rcnn_weight: 1.0,
            rpg_weight: 1.0,
            rpn_pos_iou: 0.6,
            rpn_neg_iou: 0.45,
            rpg_pos_iou: 0.55,
            reg_iou: 0.55,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    /// RoIs trained per scene.
    pub rois: usize,
    pub positive_fraction: f64,
    /// Jittered copies of each GT box added to the RoI pool.
    pub gt_jitter_copies: usize,
    /// `(center meters, relative size, yaw radians)` jitter scale.
    pub gt_jitter: [f64; 3],
    pub pre_nms: usize,
    pub nms_iou: f64,
    pub keep: usize,
    /// Global gradient norm cap; 0 disables.
    pub clip_norm: f64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 1e-3,
            rois: 16,
            positive_fraction: 0.5,
            gt_jitter_copies: 4,
            gt_jitter: [0.3, 0.08, 0.15],
            pre_nms: 512,
            nms_iou: 0.7,
            keep: 128,
            clip_norm: 10.0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub pre_nms: usize,
    pub nms_iou: f64,
    pub keep: usize,
    /// Proposals scoring below this are dropped before refinement.
    pub proposal_threshold: f64,
    /// Detections below this confidence are dropped.
    pub score_threshold: f64,
    pub final_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            pre_nms: 512,
            nms_iou: 0.7,
            keep: 100,
            proposal_threshold: 0.0,
            score_threshold: 0.05,
            final_nms_iou: 0.1,
            max_detections: 100,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            densify: DensifyConfig::default(),
        }
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates; relative data paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            if cfg.data.root.is_relative() {
                cfg.data.root = base.join(&cfg.data.root);
            }
            let d = &mut cfg.data;
            for p in [&mut d.templates, &mut d.checkpoint, &mut d.detections].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if (0..3).any(|k| m.range.min[k] >= m.range.max[k]) {
            return bad(format!("detection range is empty: {:?}", m.range));
        }
        if m.voxel_size.iter().any(|&v| !(v > 0.0)) || !(m.bev_cell > 0.0) {
            return bad("voxel and BEV cell sizes must be positive".into());
        }
        if m.anchors.is_empty() || m.anchors.iter().any(|a| a.size.iter().any(|&s| !(s > 0.0))) {
            return bad("anchors need positive sizes".into());
        }
        if m.anchors.iter().filter_map(|a| a.matching).any(|[p, n]| !(unit(p) && unit(n) && n < p)) {
            return bad("anchor matching thresholds need 0 <= negative < positive <= 1".into());
        }
        let widths = [
            m.point_width,
            m.bev_width,
            m.rpn_hidden,
            m.grid_size,
            m.neighbors,
            m.voxel_width,
            m.roi_width,
            m.fused_width,
            m.semantic_width,
            m.image_width,
            m.canonical_width,
            m.head_width,
            m.roi_bins,
            m.roi_samples,
            m.attention_heads,
            m.ff_width,
        ];
        if widths.contains(&0) {
            return bad("model widths and counts must be positive".into());
        }
        if m.fused_width % m.attention_heads != 0 {
            return bad(format!(
                "fused width {} is not divisible by {} attention heads",
                m.fused_width, m.attention_heads
            ));
        }
        if !(m.enlarge >= 1.0) || !(m.rpn_prior > 0.0 && m.rpn_prior < 1.0) {
            return bad("enlarge factor must be >= 1 and the prior in (0, 1)".into());
        }
        let l = &self.train.loss;
        if !(l.gamma >= 0.0) || !(l.smooth_l1_beta > 0.0) || l.score_samples == 0 {
            return bad("focal gamma, smooth-L1 beta and score samples out of range".into());
        }
        if ![l.rpn_pos_iou, l.rpn_neg_iou, l.rpg_pos_iou, l.reg_iou].iter().all(|&x| unit(x)) || l.rpn_neg_iou > l.rpn_pos_iou {
            return bad("IoU thresholds must lie in [0, 1] with negative <= positive".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.rois == 0 || !unit(t.positive_fraction) || t.clip_norm < 0.0 {
            return bad("training: lr > 0, rois >= 1, positive fraction in [0, 1], clip >= 0".into());
        }
        let i = &self.infer;
        if ![i.nms_iou, i.final_nms_iou, i.score_threshold, i.proposal_threshold, t.nms_iou].iter().all(|&x| unit(x)) {
            return bad("NMS and score thresholds must lie in [0, 1]".into());
        }
        self.eval.validate()?;
        self.data.synthetic.validate()
    }
}
