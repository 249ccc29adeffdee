#![allow(dead_code)]

use cropweed::mask::{InstanceMap, LabelMap, CROP, SOIL, WEED};
use cropweed::PanopticSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Paints up to `max_segments` random rectangles (later ones on top) and
/// returns the instance map.
pub fn random_instances(r: &mut ChaCha8Rng, w: usize, h: usize, max_segments: u16) -> InstanceMap {
    let mut data = vec![0u16; w * h];
    let n = r.random_range(0..=max_segments);
    for id in 1..=n {
        let x0 = r.random_range(0..w);
        let y0 = r.random_range(0..h);
        let x1 = r.random_range(x0 + 1..=w);
        let y1 = r.random_range(y0 + 1..=h);
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] = id;
            }
        }
    }
    InstanceMap::new(w, h, data).unwrap()
}

/// Copy of `base` with each instance shifted by a small random offset, some
/// dropped, and an optional extra rectangle.
pub fn perturbed(r: &mut ChaCha8Rng, base: &InstanceMap, max_segments: u16) -> InstanceMap {
    let (w, h) = base.dims();
    let mut data = vec![0u16; w * h];
    let mut next = 0u16;
    for id in 1..=base.data().iter().copied().max().unwrap_or(0) {
        if r.random_bool(0.2) {
            continue;
        }
        if next == max_segments {
            break;
        }
        next += 1;
        let (dx, dy) = (r.random_range(-3i64..=3), r.random_range(-3i64..=3));
        for y in 0..h {
            for x in 0..w {
                if base.get(x, y) != id {
                    continue;
                }
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    data[ny as usize * w + nx as usize] = next;
                }
            }
        }
    }
    if next < max_segments && r.random_bool(0.5) {
        let extra = random_instances(r, w, h, 1);
        next += 1;
        for (d, &e) in data.iter_mut().zip(extra.data()) {
            if e != 0 {
                *d = next;
            }
        }
    }
    InstanceMap::new(w, h, data).unwrap()
}

/// Hierarchical sample: crop plants from `plants` with each plant's pixels
/// also used as one leaf, plus some weed pixels.
pub fn sample_from(r: &mut ChaCha8Rng, plants: InstanceMap) -> PanopticSample {
    let (w, h) = plants.dims();
    let sem: Vec<u8> = plants
        .data()
        .iter()
        .map(|&p| {
            if p != 0 {
                CROP
            } else if r.random_bool(0.1) {
                WEED
            } else {
                SOIL
            }
        })
        .collect();
    let leaves = plants.clone();
    PanopticSample::new(LabelMap::new(w, h, sem).unwrap(), plants, leaves).unwrap()
}

pub fn random_pair(
    seed: u64,
    w: usize,
    h: usize,
    max_segments: u16,
) -> (PanopticSample, PanopticSample) {
    let mut r = rng(seed);
    let gt_inst = random_instances(&mut r, w, h, max_segments);
    let pred_inst = perturbed(&mut r, &gt_inst, max_segments);
    let gt = sample_from(&mut r, gt_inst);
    let pred = sample_from(&mut r, pred_inst);
    (pred, gt)
}
