//! Aggregated and mirrored templates against single-frame templates on held-out frames.

use pointforge::data::synthetic::{gen_synthetic, SyntheticSceneSpec};
use pointforge::densify::{aggregate_by_id, mirror_symmetric, DenseObjectTemplate, DEDUP_CELL};
use pointforge::geometry::canonical_transform;
use pointforge::pointcloud::chamfer_distance;

pub const TRACKS: usize = 100;
pub const REQUIRED_FRACTION: f64 = 0.95;

fn held_out_distance(t: &DenseObjectTemplate, held: &[[f64; 3]]) -> f64 {
    chamfer_distance(&t.points, held).unwrap()
}

pub fn run() -> (Vec<(String, bool)>, String) {
    let spec = SyntheticSceneSpec {
        objects: [1, 1],
        distractors: [0, 0],
        frames_per_sequence: 3,
        ..SyntheticSceneSpec::default()
    };
    // Extra sequences cover tracks that drop every point in some frame.
    let scenes = gen_synthetic(&spec, 31, 3 * (TRACKS + 40)).unwrap();
    let (mut evaluated, mut better, mut skipped) = (0usize, 0usize, 0usize);
    for seq in scenes.chunks(3) {
        if evaluated == TRACKS {
            break;
        }
        let obs: Vec<_> = seq.iter().flat_map(|s| s.observations()).collect();
        if obs.len() != 3 || obs.iter().any(|o| o.points.is_empty()) || obs.iter().any(|o| o.object_id != obs[0].object_id) {
            skipped += 1;
            continue;
        }
        let held = canonical_transform(&obs[2].boxed, &obs[2].points);
        let single = aggregate_by_id(&obs[..1], DEDUP_CELL).unwrap();
        let merged = aggregate_by_id(&obs[..2], DEDUP_CELL).unwrap();
        let (merged, _) = mirror_symmetric(&merged, DEDUP_CELL);
        evaluated += 1;
        if held_out_distance(&merged, &held) <= held_out_distance(&single, &held) {
            better += 1;
        }
    }
    let fraction = better as f64 / evaluated.max(1) as f64;
    let checks = vec![
        (format!("{evaluated} tracks evaluated == {TRACKS}"), evaluated == TRACKS),
        (
            format!("aggregated+mirrored no worse in {better}/{evaluated} ({:.1}%) >= {:.0}%", 100.0 * fraction, 100.0 * REQUIRED_FRACTION),
            fraction >= REQUIRED_FRACTION,
        ),
    ];
    (checks, format!(", {better}/{evaluated} tracks, {skipped} sequences skipped for empty frames"))
}
