//! The assembled two-stage detector, its training step and inference.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Mlp, MlpSpec, OptimizerState, ParamStore, Tape, Tensor, TransformerLayer, TransformerLayerSpec, Var};
use crate::cmff::{fuse, grid_image_features, make_grid_points, pool_voxel_features, roi_image_feature, subvoxel_radius};
use crate::config::{InferConfig, ModelConfig, TrainConfig};
use crate::data::augment::augment;
use crate::data::SceneSample;
use crate::densify::DenseObjectTemplate;
use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev, Box3D, FeatureMap};
use crate::head::{
    canonical_features, detection_from, encode_roi, rcnn_loss, refine_and_score, total_loss, Detection, RcnnHeads, RoiTarget,
};
use crate::pointcloud::{points_in_box, voxelize, VoxelGrid};
use crate::rpg::{generate, loss_offset, loss_score, positional_encoding, refine, GeneratedPoints, GptsRecord, RpgHeads, ScoreItem};
use crate::rpn::{
    anchors_per_cell, assign_targets, encode_bev, encode_target, generate_proposals, nms_indices, rpn_forward, rpn_loss,
    Anchor, Assignment, BevLayout, Proposal, RpnHeads, RpnOutput,
};
use crate::spe::{decorate, decorate_generated, ImageInput};

pub struct Network {
    pub config: ModelConfig,
    pub image_channels: usize,
    pub store: ParamStore<f64>,
    pub layout: BevLayout,
    pub anchors: Vec<Anchor>,
    spe_pre: Mlp,
    bev: Mlp,
    rpn: RpnHeads,
    pool: Mlp,
    roi_image: Mlp,
    fuse: Mlp,
    position: Mlp,
    layers: Vec<TransformerLayer>,
    rpg: RpgHeads,
    spe_post: Mlp,
    canonical: Mlp,
    rcnn: RcnnHeads,
}

/// Stage-one results on a tape.
pub struct Backbone {
    pub grid: VoxelGrid<f64>,
    /// `V x Fd` voxel means of the decorated point features.
    pub voxel_features: Var,
    pub rpn: RpnOutput,
}

pub struct RoiOutput {
    pub points: GeneratedPoints,
    /// `1 x 7`.
    pub residual: Var,
    /// `1 x 1`.
    pub confidence: Var,
}

/// Per-iteration loss values; `total` is the weighted sum of the components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub rpn: f64,
    pub rcnn: f64,
    pub offset: f64,
    pub score: f64,
}

impl LossRecord {
    pub fn rpg(&self) -> f64 {
        self.offset + self.score
    }
}

pub struct InferOutput {
    pub proposals: Vec<Proposal>,
    pub detections: Vec<Detection>,
    pub points: Vec<GptsRecord>,
}

impl Network {
    pub fn new(config: &ModelConfig, image_channels: usize, seed: u64) -> Result<Self> {
        let m = config;
        let mut store = ParamStore::new();
        let mut k = 0u64;
        let mut next = || {
            k += 1;
            seed.wrapping_mul(1_000_003).wrapping_add(k)
        };
        let layout = BevLayout::new(&m.range, m.bev_cell)?;
        let anchors = crate::rpn::generate_anchors(&layout, &m.anchors)?;
        let per_cell = anchors_per_cell(&m.anchors);
        let neighborhood = (2 * m.rpn_context + 1).pow(2);
        let spe_pre = Mlp::new(&mut store, "spe_pre", MlpSpec::relu_all(vec![1 + image_channels, m.point_width], next())?);
        let bev = Mlp::new(&mut store, "bev", MlpSpec::relu_all(vec![3 + m.point_width, m.bev_width], next())?);
        let rpn = RpnHeads {
            trunk: Mlp::new(&mut store, "rpn.trunk", MlpSpec::relu_all(vec![neighborhood * m.bev_width, m.rpn_hidden], next())?),
            cls: Mlp::new(&mut store, "rpn.cls", MlpSpec::relu_hidden(vec![m.rpn_hidden, per_cell], next())?),
            reg: Mlp::new(&mut store, "rpn.reg", MlpSpec::relu_hidden(vec![m.rpn_hidden, 7 * per_cell], next())?),
            context: m.rpn_context,
            per_cell,
        };
        let prior = -((1.0 - m.rpn_prior) / m.rpn_prior).ln();
        store.value_mut(rpn.cls.layers[0].bias).data_mut().fill(prior);
        let pool = Mlp::new(&mut store, "pool", MlpSpec::relu_all(vec![3 + m.point_width, m.voxel_width], next())?);
        let roi_in = m.roi_bins * m.roi_bins * image_channels;
        let roi_image = Mlp::new(&mut store, "roi_image", MlpSpec::relu_all(vec![roi_in, m.roi_width], next())?);
        let fuse = Mlp::new(
            &mut store,
            "fuse",
            MlpSpec::relu_all(vec![m.voxel_width + image_channels + m.roi_width, m.fused_width], next())?,
        );
        let position = Mlp::new(&mut store, "position", MlpSpec::relu_hidden(vec![27, m.fused_width, m.fused_width], next())?);
        let mut layers = Vec::new();
        for i in 0..m.transformer_layers {
            let spec = TransformerLayerSpec::new(m.fused_width, m.attention_heads, m.ff_width, next())?;
            layers.push(TransformerLayer::new(&mut store, &format!("transformer.{i}"), spec));
        }
        let rpg = RpgHeads {
            offset: Mlp::new(
                &mut store,
                "rpg.offset",
                MlpSpec::relu_hidden(vec![m.fused_width, m.fused_width, 3 + m.semantic_width], next())?,
            ),
            score: Mlp::new(&mut store, "rpg.score", MlpSpec::relu_hidden(vec![m.semantic_width, 16, 1], next())?),
        };
        // Offsets start at zero so generated points begin on the grid.
        let last = rpg.offset.layers.last().expect("offset head has layers");
        let out_w = 3 + m.semantic_width;
        let w = store.value_mut(last.weight);
        let cols = w.cols();
        for r in 0..w.rows() {
            for c in 0..3.min(cols) {
                w.data_mut()[r * out_w + c] = 0.0;
            }
        }
        store.value_mut(last.bias).data_mut()[..3].fill(0.0);
        let spe_post = Mlp::new(
            &mut store,
            "spe_post",
            MlpSpec::relu_all(vec![m.semantic_width + image_channels, m.image_width], next())?,
        );
        let canonical = Mlp::new(&mut store, "canonical", MlpSpec::relu_all(vec![5, m.canonical_width], next())?);
        let point_in = 3 + m.canonical_width + m.semantic_width + m.image_width;
        let rcnn = RcnnHeads {
            point: Mlp::new(&mut store, "rcnn.point", MlpSpec::relu_all(vec![point_in, m.head_width], next())?),
            outer: Mlp::new(&mut store, "rcnn.outer", MlpSpec::relu_all(vec![m.head_width, m.head_width], next())?),
            reg: Mlp::new(&mut store, "rcnn.reg", MlpSpec::relu_hidden(vec![m.head_width, m.head_width, 7], next())?),
            cls: Mlp::new(&mut store, "rcnn.cls", MlpSpec::relu_hidden(vec![m.head_width, m.head_width, 1], next())?),
        };
        let reg_last = rcnn.reg.layers.last().expect("reg head has layers");
        store.value_mut(reg_last.weight).data_mut().fill(0.0);
        store.value_mut(reg_last.bias).data_mut().fill(0.0);
        Ok(Self {
            config: m.clone(),
            image_channels,
            store,
            layout,
            anchors,
            spe_pre,
            bev,
            rpn,
            pool,
            roi_image,
            fuse,
            position,
            layers,
            rpg,
            spe_post,
            canonical,
            rcnn,
        })
    }

    /// The scene's feature map, or zeros of the same shape for the LiDAR-only variant.
    pub fn image_for(&self, scene: &SceneSample) -> Result<FeatureMap<f64>> {
        if scene.image.channels != self.image_channels {
            return Err(Error::Config(format!(
                "network expects {} feature-map channels, frame {} has {}",
                self.image_channels, scene.frame, scene.image.channels
            )));
        }
        Ok(if self.config.use_image {
            scene.image.clone()
        } else {
            scene.image.scaled(0.0)
        })
    }

    pub fn backbone(&self, tape: &mut Tape<f64>, scene: &SceneSample, img: ImageInput<'_>) -> Result<Backbone> {
        let dec = decorate(tape, &self.store, &scene.cloud, img, &scene.calib, &self.spe_pre)?;
        let grid = voxelize(&scene.cloud, &self.config.range, self.config.voxel_size)?;
        let mut offsets = vec![0];
        let mut idx = Vec::new();
        let mut w = Vec::new();
        for v in &grid.voxels {
            let inv = 1.0 / v.members.len() as f64;
            for &m in &v.members {
                idx.push(m);
                w.push(inv);
            }
            offsets.push(idx.len());
        }
        let voxel_features = tape.weighted_gather(dec.features, offsets, idx, w)?;
        let bev = encode_bev(tape, &self.store, &grid, voxel_features, self.layout, &self.bev)?;
        let rpn = rpn_forward(tape, &self.store, &bev, &self.rpn)?;
        Ok(Backbone {
            grid,
            voxel_features,
            rpn,
        })
    }

    /// Grid fusion, point generation and refinement for one RoI.
    pub fn roi_forward(
        &self,
        tape: &mut Tape<f64>,
        scene: &SceneSample,
        img: ImageInput<'_>,
        grid: &VoxelGrid<f64>,
        voxel_features: Var,
        b: &Box3D<f64>,
    ) -> Result<RoiOutput> {
        let m = &self.config;
        let st = &self.store;
        let calib = &scene.calib;
        let g = make_grid_points(b, m.grid_size);
        let radius = subvoxel_radius(b, m.grid_size);
        let fv = pool_voxel_features(tape, st, grid, voxel_features, &g, radius, m.neighbors, &self.pool)?;
        let fi = grid_image_features(tape, &g, img, calib)?;
        let fb = roi_image_feature(tape, st, b, img, calib, m.enlarge, m.roi_bins, m.roi_samples, &self.roi_image)?;
        let fused = fuse(tape, st, fv, fi, fb, &self.fuse)?;
        let delta = positional_encoding(tape, st, b, &g, &self.position)?;
        let refined = refine(tape, st, fused, delta, &self.layers)?;
        let points = generate(tape, st, refined, &g, &self.rpg)?;
        let coords = points.coord_values(tape);
        let (fimg, _) = decorate_generated(tape, st, &coords, points.semantic, img, calib, &self.spe_post)?;
        let canon = canonical_features(tape, st, b, points.coords, points.scores, &self.canonical)?;
        // Positions enter the set encoder relative to the RoI center.
        let neg_c = tape.constant(Tensor::new(vec![3], b.center.map(|v| -v).to_vec())?);
        let local = tape.add_row(points.coords, neg_c)?;
        let roi = encode_roi(tape, st, local, canon, points.semantic, fimg, &self.rcnn.point, &self.rcnn.outer)?;
        let (residual, confidence) = refine_and_score(tape, st, roi, &self.rcnn)?;
        Ok(RoiOutput {
            points,
            residual,
            confidence,
        })
    }

    pub fn infer(&self, scene: &SceneSample, cfg: &InferConfig) -> Result<InferOutput> {
        let image = self.image_for(scene)?;
        let mut tape = Tape::new();
        let img = ImageInput::new(&mut tape, &image, false)?;
        let bb = self.backbone(&mut tape, scene, img)?;
        let proposals: Vec<Proposal> = generate_proposals(&tape, &bb.rpn, &self.anchors, cfg.pre_nms, cfg.nms_iou, cfg.keep)?
            .into_iter()
            .filter(|p| p.score >= cfg.proposal_threshold)
            .collect();
        let vf = tape.value(bb.voxel_features).clone();
        let grid = &bb.grid;
        let refined: Vec<Result<(Detection, GptsRecord)>> = proposals
            .par_iter()
            .map(|p| {
                let mut t = Tape::new();
                let img = ImageInput::new(&mut t, &image, false)?;
                let v = t.constant(vf.clone());
                let out = self.roi_forward(&mut t, scene, img, grid, v, &p.boxed)?;
                let residual = t.value(out.residual).data().to_vec();
                let conf = t.value(out.confidence).item();
                let det = detection_from(&p.boxed, p.class, &residual, conf)?;
                let rec = GptsRecord::new(&p.boxed, &out.points.coord_values(&t), &out.points.score_values(&t));
                Ok((det, rec))
            })
            .collect();
        let mut dets = Vec::with_capacity(refined.len());
        let mut points = Vec::with_capacity(refined.len());
        for r in refined {
            let (d, g) = r?;
            dets.push(d);
            points.push(g);
        }
        let kept: Vec<Detection> = dets.into_iter().filter(|d| d.confidence >= cfg.score_threshold).collect();
        let as_props: Vec<Proposal> = kept
            .iter()
            .map(|d| Proposal {
                boxed: d.boxed,
                class: d.class,
                score: d.confidence,
            })
            .collect();
        let detections = nms_indices(&as_props, cfg.final_nms_iou, cfg.max_detections)
            .into_iter()
            .map(|i| kept[i].clone())
            .collect();
        Ok(InferOutput {
            proposals,
            detections,
            points,
        })
    }
}

/// Index of the GT with the highest 3D IoU, and that IoU.
fn best_match(b: &Box3D<f64>, gts: &[(Box3D<f64>, usize)]) -> (Option<usize>, f64) {
    let mut best = (None, 0.0);
    for (j, (g, _)) in gts.iter().enumerate() {
        let v = iou_3d(b, g);
        if v > best.1 {
            best = (Some(j), v);
        }
    }
    best
}

fn jitter(rng: &mut ChaCha8Rng, g: &Box3D<f64>, s: [f64; 3]) -> Result<Box3D<f64>> {
    let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let c = [g.center[0] + u(s[0]), g.center[1] + u(s[0]), g.center[2] + u(0.5 * s[0])];
    let size = [g.size[0] * (1.0 + u(s[1])), g.size[1] * (1.0 + u(s[1])), g.size[2] * (1.0 + u(s[1]))];
    Ok(Box3D::new(c, size, g.yaw + u(s[2]))?)
}

/// Network plus optimizer state, GT templates and cached anchor assignments.
pub struct Trainer {
    pub net: Network,
    pub opt: OptimizerState<f64>,
    pub cfg: TrainConfig,
    templates: HashMap<u64, DenseObjectTemplate>,
    library: Vec<DenseObjectTemplate>,
    assignments: HashMap<String, Assignment>,
}

impl Trainer {
    pub fn new(net: Network, cfg: &TrainConfig, templates: Vec<DenseObjectTemplate>) -> Self {
        let map = templates.iter().map(|t| (t.id, t.clone())).collect();
        Self {
            net,
            opt: OptimizerState::new(cfg.lr),
            cfg: cfg.clone(),
            templates: map,
            library: templates,
            assignments: HashMap::new(),
        }
    }

    fn assignment(&mut self, scene: &SceneSample, gts: &[(Box3D<f64>, usize)], cacheable: bool) -> Result<Assignment> {
        let l = &self.cfg.loss;
        if cacheable {
            if let Some(a) = self.assignments.get(&scene.frame) {
                return Ok(a.clone());
            }
        }
        let a = assign_targets(&self.net.anchors, gts, l.rpn_pos_iou, l.rpn_neg_iou)?;
        if cacheable {
            self.assignments.insert(scene.frame.clone(), a.clone());
        }
        Ok(a)
    }

    fn sample_rois(&self, rng: &mut ChaCha8Rng, proposals: &[Proposal], gts: &[(Box3D<f64>, usize)]) -> Result<Vec<(Box3D<f64>, usize)>> {
        let mut pool: Vec<(Box3D<f64>, usize)> = proposals.iter().map(|p| (p.boxed, p.class)).collect();
        for (g, c) in gts {
            for _ in 0..self.cfg.gt_jitter_copies {
                pool.push((jitter(rng, g, self.cfg.gt_jitter)?, *c));
            }
        }
        let reg_iou = self.cfg.loss.reg_iou;
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..pool.len()).partition(|&i| best_match(&pool[i].0, gts).1 >= reg_iou);
        let want_pos = ((self.cfg.rois as f64 * self.cfg.positive_fraction).round() as usize).min(pos.len());
        let mut pick = |v: &mut Vec<usize>, n: usize, out: &mut Vec<usize>| {
            for _ in 0..n.min(v.len()) {
                let k = rng.gen_range(0..v.len());
                out.push(v.swap_remove(k));
            }
        };
        let mut chosen = Vec::new();
        pick(&mut pos, want_pos, &mut chosen);
        pick(&mut neg, self.cfg.rois - chosen.len(), &mut chosen);
        pick(&mut pos, self.cfg.rois - chosen.len(), &mut chosen);
        Ok(chosen.into_iter().map(|i| pool[i]).collect())
    }

    /// Forward, backward and one optimizer update on `scene`.
    pub fn step(&mut self, scene: &SceneSample, seed: u64) -> Result<LossRecord> {
        let aug = &self.cfg.augment;
        let (scene, cacheable) = if aug.enabled {
            (augment(scene, aug, &self.library, seed)?.0, false)
        } else {
            (scene.clone(), true)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let gts = scene.gt_boxes();
        let assign = self.assignment(&scene, &gts, cacheable)?;
        let net = &self.net;
        let l = self.cfg.loss.clone();
        let image = net.image_for(&scene)?;
        let mut tape = Tape::new();
        let img = ImageInput::new(&mut tape, &image, false)?;
        let bb = net.backbone(&mut tape, &scene, img)?;

        let cared: Vec<usize> = (0..net.anchors.len()).filter(|&i| assign.labels[i] >= 0).collect();
        let labels: Vec<i8> = cared.iter().map(|&i| assign.labels[i]).collect();
        let targets: Vec<[f64; 7]> = cared
            .iter()
            .map(|&i| match assign.matched[i] {
                Some(j) if assign.labels[i] == 1 => encode_target(&gts[j].0, &net.anchors[i].boxed),
                _ => [0.0; 7],
            })
            .collect();
        let (s, r) = bb.rpn.gather(&mut tape, &cared)?;
        let rpn = rpn_loss(&mut tape, s, r, &labels, &targets, l.gamma, l.smooth_l1_beta)?;

        let proposals = generate_proposals(&tape, &bb.rpn, &net.anchors, self.cfg.pre_nms, self.cfg.nms_iou, self.cfg.keep)?;
        let rois = self.sample_rois(&mut rng, &proposals, &gts)?;
        let observed: Vec<Vec<[f64; 3]>> = gts
            .iter()
            .map(|(g, _)| {
                let inside = points_in_box(g, &scene.cloud.coords);
                scene.cloud.coords.iter().zip(inside).filter(|(_, i)| *i).map(|(p, _)| *p).collect()
            })
            .collect();
        let mut outs = Vec::with_capacity(rois.len());
        let mut roi_targets = Vec::with_capacity(rois.len());
        let mut dense: Vec<Option<Vec<[f64; 3]>>> = Vec::with_capacity(rois.len());
        let mut rpg_gt: Vec<Option<Box3D<f64>>> = Vec::with_capacity(rois.len());
        for (b, _) in &rois {
            let out = net.roi_forward(&mut tape, &scene, img, &bb.grid, bb.voxel_features, b)?;
            let (j, iou) = best_match(b, &gts);
            roi_targets.push(RoiTarget {
                gt: j.map(|j| gts[j].0),
                iou3d: iou,
                positive: iou >= l.reg_iou,
            });
            let matched = j.filter(|&j| iou_bev(b, &gts[j].0) >= l.rpg_pos_iou);
            rpg_gt.push(matched.map(|j| gts[j].0));
            dense.push(matched.map(|j| {
                let o = &scene.objects[j];
                match self.templates.get(&o.track_id) {
                    Some(t) if !t.is_empty() => t.place_in(&o.boxed),
                    _ => observed[j].clone(),
                }
            }));
            outs.push(out);
        }
        let items: Vec<(Var, &[[f64; 3]])> = outs
            .iter()
            .zip(&dense)
            .filter_map(|(o, d)| d.as_ref().map(|d| (o.points.coords, d.as_slice())))
            .collect();
        let offset = loss_offset(&mut tape, &items)?;
        let coords: Vec<Vec<[f64; 3]>> = outs.iter().map(|o| o.points.coord_values(&tape)).collect();
        let score_items: Vec<ScoreItem<'_>> = outs
            .iter()
            .zip(&coords)
            .zip(&rpg_gt)
            .map(|((o, c), g)| ScoreItem {
                scores: o.points.scores,
                coords: c,
                gt: *g,
            })
            .collect();
        let score = loss_score(&mut tape, &score_items, l.gamma, l.score_samples, Some(seed))?;
        let conf_rows: Vec<Var> = outs.iter().map(|o| o.confidence).collect();
        let res_rows: Vec<Var> = outs.iter().map(|o| o.residual).collect();
        let conf = tape.concat_rows(&conf_rows)?;
        let res = tape.concat_rows(&res_rows)?;
        let boxes: Vec<Box3D<f64>> = rois.iter().map(|r| r.0).collect();
        let rcnn = rcnn_loss(&mut tape, conf, res, &boxes, &roi_targets, l.smooth_l1_beta)?;
        let total = total_loss(
            &mut tape,
            &[
                (rpn.total, l.rpn_weight),
                (rcnn.total, l.rcnn_weight),
                (offset.value, l.rpg_weight),
                (score, l.rpg_weight),
            ],
        )?;
        let record = LossRecord {
            total: tape.value(total).item(),
            rpn: tape.value(rpn.total).item(),
            rcnn: tape.value(rcnn.total).item(),
            offset: tape.value(offset.value).item(),
            score: tape.value(score).item(),
        };
        self.net.store.zero_grads();
        tape.backward(total, &mut self.net.store)?;
        if self.cfg.clip_norm > 0.0 {
            clip_gradients(&mut self.net.store, self.cfg.clip_norm);
        }
        self.opt.adam_step(&mut self.net.store)?;
        Ok(record)
    }

    /// `iterations` steps cycling through `scenes` in a seeded order, reshuffled per pass.
    pub fn train(&mut self, scenes: &[SceneSample], seed: u64, mut log: impl FnMut(usize, &LossRecord)) -> Result<Vec<LossRecord>> {
        if scenes.is_empty() {
            return Err(Error::Config("no training scenes".into()));
        }
        let mut records = Vec::with_capacity(self.cfg.iterations);
        let mut order = Vec::new();
        for it in 0..self.cfg.iterations {
            if it % scenes.len() == 0 {
                order = crate::data::synthetic::shuffled(scenes.len(), seed.wrapping_add((it / scenes.len()) as u64));
            }
            let scene = &scenes[order[it % scenes.len()]];
            let rec = self.step(scene, seed.wrapping_mul(31).wrapping_add(it as u64))?;
            log(it, &rec);
            records.push(rec);
        }
        Ok(records)
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(store: &mut ParamStore<f64>, max_norm: f64) {
    let sq: f64 = store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}
