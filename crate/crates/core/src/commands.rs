//! The command-line subcommands. Each takes a loaded config and an output
//! directory and writes its results there.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::autodiff::{load_into, read_checkpoint, write_checkpoint};
use crate::config::RunConfig;
use crate::data::{gen_synthetic, load_dataset, write_dataset, SceneSample};
use crate::densify::{build_gt_database, read_store, write_store, DenseObjectTemplate};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_gt, EvalReport, GtRecord};
use crate::head::{read_detections, write_detections};
use crate::model::{LossRecord, Network, Trainer};
use crate::rpg::write_gpts;

pub const LOSS_HEADER: &str = "iteration,total,rpn,rcnn,offset,score";
pub const CHECKPOINT: &str = "model.ckpt";
pub const DETECTIONS: &str = "detections.txt";

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn scenes(cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    let s = load_dataset(&cfg.data.root)?;
    if s.is_empty() {
        return Err(Error::Config(format!("no frames under {}", cfg.data.root.display())));
    }
    Ok(s)
}

fn gt_records(scenes: &[SceneSample]) -> Vec<GtRecord> {
    scenes.iter().flat_map(|s| s.gt_records()).collect()
}

/// Writes `cfg.data.scenes` synthetic frames as a dataset tree plus `gt.txt`.
pub fn cmd_gen_synthetic(cfg: &RunConfig, out: &Path) -> Result<()> {
    let samples = gen_synthetic(&cfg.data.synthetic, cfg.seed, cfg.data.scenes)?;
    write_dataset(out, &samples)?;
    write_file(&out.join("gt.txt"), |w| write_gt(&gt_records(&samples), w))?;
    info!("wrote {} frames to {}", samples.len(), out.display());
    Ok(())
}

pub fn build_templates(scenes: &[SceneSample], cfg: &RunConfig) -> Vec<DenseObjectTemplate> {
    let obs: Vec<_> = scenes.iter().flat_map(|s| s.observations()).collect();
    let report = build_gt_database(&obs, &cfg.densify);
    for (id, why) in &report.failures {
        warn!("object {id}: {why}");
    }
    info!("{} templates, {} completed from the library", report.templates.len(), report.match_calls);
    report.templates
}

/// Builds the dense template store from the dataset's tracked objects.
pub fn cmd_densify(cfg: &RunConfig, out: &Path) -> Result<()> {
    let templates = build_templates(&scenes(cfg)?, cfg);
    write_store(out, &templates)
}

pub fn write_losses(path: &Path, records: &[LossRecord]) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "{LOSS_HEADER}")?;
        for (i, r) in records.iter().enumerate() {
            writeln!(w, "{},{:?},{:?},{:?},{:?},{:?}", i + 1, r.total, r.rpn, r.rcnn, r.offset, r.score)?;
        }
        Ok(())
    })
}

/// Trains on the dataset and writes `losses.csv` and the checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scenes = scenes(cfg)?;
    let templates = match &cfg.data.templates {
        Some(dir) => read_store(dir)?,
        None => build_templates(&scenes, cfg),
    };
    let net = Network::new(&cfg.model, scenes[0].image.channels, cfg.seed)?;
    let mut trainer = Trainer::new(net, &cfg.train, templates);
    let records = trainer.train(&scenes, cfg.seed, |i, r| {
        info!("iter {} total {:.4} rpn {:.4} rcnn {:.4} offset {:.4} score {:.4}", i + 1, r.total, r.rpn, r.rcnn, r.offset, r.score);
    })?;
    write_losses(&out.join("losses.csv"), &records)?;
    let path = out.join(CHECKPOINT);
    write_file(&path, |w| write_checkpoint(&trainer.net.store, w))
}

pub fn load_network(cfg: &RunConfig, path: &Path, image_channels: usize) -> Result<Network> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let stored = read_checkpoint(BufReader::new(f))?;
    let mut net = Network::new(&cfg.model, image_channels, cfg.seed)?;
    load_into(&mut net.store, &stored)?;
    Ok(net)
}

/// Writes `detections.txt`, `gt.txt` and one `.gpts` dump per frame under `gpts/`.
pub fn cmd_infer(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scenes = scenes(cfg)?;
    let ckpt = cfg.data.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT));
    let net = load_network(cfg, &ckpt, scenes[0].image.channels)?;
    let mut dets = Vec::new();
    for s in &scenes {
        let r = net.infer(s, &cfg.infer)?;
        info!("{}: {} proposals, {} detections", s.frame, r.proposals.len(), r.detections.len());
        write_file(&out.join(format!("gpts/{}.gpts", s.frame)), |w| write_gpts(&r.points, w))?;
        dets.extend(r.detections.into_iter().map(|d| (s.frame.clone(), d)));
    }
    write_file(&out.join(DETECTIONS), |w| write_detections(&dets, w))?;
    write_file(&out.join("gt.txt"), |w| write_gt(&gt_records(&scenes), w))
}

fn detections_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.data.detections.clone().unwrap_or_else(|| out.join(DETECTIONS))
}

pub fn run_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let path = detections_path(cfg, out);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let dets = read_detections(BufReader::new(f))?;
    evaluate(&dets, &gt_records(&scenes(cfg)?), &cfg.eval)
}

/// Writes `metrics.txt` and prints it.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = run_eval(cfg, out)?.to_text();
    write_file(&out.join("metrics.txt"), |w| w.write_all(text.as_bytes()))?;
    print!("{text}");
    Ok(())
}

/// One `recall,precision` CSV per class and range bin under `pr/`.
pub fn cmd_plot_pr(cfg: &RunConfig, out: &Path) -> Result<()> {
    for (stem, csv) in run_eval(cfg, out)?.pr_csvs() {
        write_file(&out.join(format!("pr/{stem}.csv")), |w| w.write_all(csv.as_bytes()))?;
    }
    Ok(())
}
