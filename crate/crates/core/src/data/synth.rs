//! Synthetic person-activity scenes.
//!
//! A class is a (verb, object) pair. The verb is a white mark whose position
//! inside the person box (upper or lower part) is meaningful only relative
//! to the box. The object is a colored glyph, painted either inside every
//! person box or, for context-dependent scenes, somewhere outside all boxes.
//! Box-only models see the verb but lose the object once it moves to the
//! context; full-image models see the object but cannot tell which box a
//! mark belongs to.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{or_labels, Corpus, DetectorMeta, Sample, Split, Supervision};
use crate::error::{Error, Result};
use crate::layers::Roi;
use crate::tensor::Tensor;

const VERBS: [&str; 2] = ["ride", "hold"];
const OBJECTS: [&str; 8] = [
    "horse", "bicycle", "kite", "umbrella", "dog", "boat", "book", "cup",
];
const MARK: usize = 3;
const GLYPH: usize = 4;
/// Minimum gap between a context glyph and any person box.
const CONTEXT_MARGIN: f64 = 4.0;
const BACKGROUND_MAX: f32 = 0.2;
const SCENE_ATTEMPTS: usize = 256;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Training images.
    pub n_images: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub max_people: usize,
    pub image_size: usize,
    pub context_dependence: f64,
    /// Negative-to-positive image ratio wanted for the rarest class.
    pub skew: Option<f64>,
    pub supervision: Supervision,
    pub seed: u64,
    /// Train-split images whose person boxes carry no label; they become
    /// images with zero detected people.
    pub empty_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 300,
            n_test: 100,
            num_classes: 8,
            max_people: 2,
            image_size: 32,
            context_dependence: 1.0,
            skew: None,
            supervision: Supervision::ImageLevel,
            seed: 0,
            empty_fraction: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn num_verbs(&self) -> usize {
        if self.num_classes.is_multiple_of(2) {
            2
        } else {
            1
        }
    }

    pub fn num_objects(&self) -> usize {
        self.num_classes / self.num_verbs()
    }

    pub fn class_names(&self) -> Vec<String> {
        let v = self.num_verbs();
        (0..self.num_classes)
            .map(|c| format!("{}_{}", VERBS[c % v], object_name(c / v)))
            .collect()
    }

    /// Verb and object of a class index.
    pub fn decompose(&self, class: usize) -> (usize, usize) {
        (class % self.num_verbs(), class / self.num_verbs())
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synth needs at least 2 classes".into()));
        }
        if self.max_people == 0 {
            return Err(Error::Config("max_people must be at least 1".into()));
        }
        if self.n_images == 0 || self.n_test == 0 {
            return Err(Error::Config("both splits need at least one image".into()));
        }
        if !(0.0..=1.0).contains(&self.context_dependence) {
            return Err(Error::Config(
                "context_dependence must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.empty_fraction) {
            return Err(Error::Config("empty_fraction must lie in [0, 1)".into()));
        }
        if let Some(s) = self.skew {
            let floor = (self.num_classes - 1) as f64;
            if s.is_nan() || s < floor {
                return Err(Error::Config(format!(
                    "skew {s} is below the balanced ratio {floor}"
                )));
            }
        }
        Ok(())
    }
}

pub fn object_name(o: usize) -> String {
    match OBJECTS.get(o) {
        Some(n) => n.to_string(),
        None => format!("object{o}"),
    }
}

/// Split-separated scene seed; train and test never share one.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x5452_4149_4e00_0000u64,
        Split::Val => 0x5641_4c00_0000_0000,
        Split::Test => 0x5445_5354_0000_0000,
    };
    splitmix(seed ^ splitmix(tag ^ index as u64))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Geometric class prior whose rarest class has `1 / (1 + skew)` mass.
pub fn skewed_prior(c: usize, skew: f64) -> Vec<f64> {
    let p_min = 1.0 / (1.0 + skew);
    let total = |r: f64| (0..c).map(|k| r.powi(k as i32)).sum::<f64>() * p_min;
    let (mut lo, mut hi) = (1.0, 2.0);
    while total(hi) < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    let mut p: Vec<f64> = (0..c).map(|k| p_min * r.powi((c - 1 - k) as i32)).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Per-class image counts: rounded shares, at least one each, the remainder
/// absorbed by the most frequent class.
fn quotas(prior: &[f64], n: usize) -> Vec<usize> {
    let mut q: Vec<usize> = prior
        .iter()
        .map(|&p| ((p * n as f64).round() as usize).max(1))
        .collect();
    let head = (0..q.len())
        .max_by(|&a, &b| prior[a].total_cmp(&prior[b]))
        .unwrap_or(0);
    let rest: usize = q
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != head)
        .map(|(_, v)| v)
        .sum();
    q[head] = n.saturating_sub(rest).max(1);
    q
}

fn primary_classes(spec: &SynthSpec, split: Split, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(scene_seed(spec.seed, split, usize::MAX)));
    match spec.skew {
        Some(skew) => {
            let q = quotas(&skewed_prior(spec.num_classes, skew), n);
            let mut out: Vec<usize> = q
                .iter()
                .enumerate()
                .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
                .collect();
            out.truncate(n);
            out.shuffle(&mut rng);
            out
        }
        None => (0..n)
            .map(|_| rng.random_range(0..spec.num_classes))
            .collect(),
    }
}

/// Generates a `(train, test)` corpus pair.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Corpus, Corpus)> {
    spec.validate()?;
    if spec.image_size < 4 * GLYPH {
        return Err(Error::Config(format!(
            "image too small for requested people: {} px",
            spec.image_size
        )));
    }
    let build = |split: Split, n: usize| -> Result<Corpus> {
        let primaries = primary_classes(spec, split, n);
        let samples = primaries
            .iter()
            .enumerate()
            .map(|(i, &primary)| scene(spec, split, i, primary))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            classes: spec.class_names(),
            supervision: spec.supervision,
            split,
            samples,
        })
    };
    let train = build(Split::Train, spec.n_images)?;
    let test = build(Split::Test, spec.n_test)?;
    Ok((train, test))
}

struct Painter {
    size: usize,
    data: Vec<f64>,
}

impl Painter {
    fn new(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..3 * size * size)
            .map(|_| f64::from(rng.random::<f32>() * BACKGROUND_MAX))
            .collect();
        Self { size, data }
    }

    fn fill(&mut self, x: usize, y: usize, w: usize, h: usize, rgb: [f32; 3]) {
        let plane = self.size * self.size;
        for yy in y..(y + h).min(self.size) {
            for xx in x..(x + w).min(self.size) {
                for (ch, &v) in rgb.iter().enumerate() {
                    self.data[ch * plane + yy * self.size + xx] = f64::from(v);
                }
            }
        }
    }
}

fn object_color(o: usize, objects: usize) -> [f32; 3] {
    // evenly spaced hues at full saturation, value 0.9
    let h = 6.0 * o as f32 / objects.max(1) as f32;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.9 * r, 0.9 * g, 0.9 * b]
}

fn overlaps(a: &Roi, b: &Roi, gap: f64) -> bool {
    a.x0 < b.x1 + gap && b.x0 < a.x1 + gap && a.y0 < b.y1 + gap && b.y0 < a.y1 + gap
}

/// Boxes whose verb mark lands at a height drawn independently of the verb,
/// so only the box tells whether the mark is in its upper or lower part.
fn place_people(size: usize, verbs: &[usize], rng: &mut ChaCha8Rng) -> Option<Vec<Roi>> {
    let s = size as f64;
    let (h_lo, h_hi) = ((0.375 * s).round() as usize, (0.5 * s).round() as usize);
    let (w_lo, w_hi) = ((0.25 * s).round() as usize, (0.34 * s).round() as usize);
    let mut boxes: Vec<Roi> = Vec::with_capacity(verbs.len());
    for &verb in verbs {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let h = rng.random_range(h_lo..=h_hi);
            let w = rng.random_range(w_lo..=w_hi);
            let my = rng.random_range(h - 1 - MARK..=size - h + 1);
            let y = if verb == 0 { my - 1 } else { my + 1 + MARK - h };
            let x = rng.random_range(0..=size - w);
            let b = Roi::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            if boxes.iter().all(|o| !overlaps(o, &b, 1.0)) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(boxes)
}

/// A glyph spot horizontally clear of every box, so its height says
/// nothing about where the boxes extend. Crowded scenes fall back to any
/// spot at least the margin away from every box.
fn place_context_glyph(size: usize, boxes: &[Roi], rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let g = GLYPH as f64;
    let columns: Vec<usize> = (0..=size - GLYPH)
        .filter(|&x| {
            let (x0, x1) = (x as f64, x as f64 + g);
            boxes
                .iter()
                .all(|b| x1 + CONTEXT_MARGIN <= b.x0 || b.x1 + CONTEXT_MARGIN <= x0)
        })
        .collect();
    if !columns.is_empty() {
        let x = columns[rng.random_range(0..columns.len())];
        return Some((x, rng.random_range(0..=size - GLYPH)));
    }
    let spots: Vec<(usize, usize)> = (0..=size - GLYPH)
        .flat_map(|y| (0..=size - GLYPH).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            let r = Roi::new(x as f64, y as f64, x as f64 + g, y as f64 + g);
            boxes.iter().all(|b| !overlaps(b, &r, CONTEXT_MARGIN))
        })
        .collect();
    (!spots.is_empty()).then(|| spots[rng.random_range(0..spots.len())])
}

fn scene(spec: &SynthSpec, split: Split, index: usize, primary: usize) -> Result<Sample> {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, split, index));
    let (v_count, c) = (spec.num_verbs(), spec.num_classes);
    let (primary_verb, object) = spec.decompose(primary);
    let people = rng.random_range(1..=spec.max_people);
    let verbs: Vec<usize> = (0..people)
        .map(|p| {
            if p == 0 {
                primary_verb
            } else {
                rng.random_range(0..v_count)
            }
        })
        .collect();
    let in_context: Vec<bool> = (0..people)
        .map(|_| rng.random::<f64>() < spec.context_dependence)
        .collect();
    let unlabeled = split == Split::Train && rng.random::<f64>() < spec.empty_fraction;

    for _ in 0..SCENE_ATTEMPTS {
        let Some(boxes) = place_people(size, &verbs, &mut rng) else {
            continue;
        };
        let context_spot = if in_context.iter().any(|&b| b) {
            match place_context_glyph(size, &boxes, &mut rng) {
                Some(spot) => Some(spot),
                None => continue,
            }
        } else {
            None
        };

        let mut painter = Painter::new(size, &mut rng);
        let color = object_color(object, spec.num_objects());
        for (p, b) in boxes.iter().enumerate() {
            let (x0, y0) = (b.x0 as usize, b.y0 as usize);
            let (w, h) = (b.width() as usize, b.height() as usize);
            if !in_context[p] {
                painter.fill(
                    x0 + (w - GLYPH) / 2,
                    y0 + h / 2 - GLYPH / 2,
                    GLYPH,
                    GLYPH,
                    color,
                );
            }
            let my = if verbs[p] == 0 {
                y0 + 1
            } else {
                y0 + h - 1 - MARK
            };
            painter.fill(x0 + (w - MARK) / 2, my, MARK, MARK, [1.0; 3]);
        }
        if let Some((gx, gy)) = context_spot {
            painter.fill(gx, gy, GLYPH, GLYPH, color);
        }

        let truth: Vec<Vec<u8>> = verbs
            .iter()
            .map(|&v| {
                let mut row = vec![0u8; c];
                row[object * v_count + v] = 1;
                row
            })
            .collect();
        let (boxes, truth) = if unlabeled {
            (Vec::new(), Vec::new())
        } else {
            (boxes, truth)
        };
        let image_labels = or_labels(&truth, c);
        let (per_box_labels, instance_truth) = match spec.supervision {
            Supervision::PerInstance => (Some(truth), None),
            Supervision::ImageLevel => (None, Some(truth)),
        };
        let split_name = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        return Ok(Sample {
            id: format!("{split_name}-{index:05}"),
            image: Tensor::new(vec![3, size, size], painter.data)?,
            boxes,
            image_labels,
            per_box_labels,
            instance_truth,
            detector_meta: Some(DetectorMeta {
                source: "synthetic".into(),
                threshold: 0.8,
            }),
        });
    }
    Err(Error::Config(format!(
        "image too small for requested people: {people} in {size}x{size}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::class_stats;
    use std::collections::HashSet;

    fn small() -> SynthSpec {
        SynthSpec {
            n_images: 40,
            n_test: 20,
            seed: 7,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_byte_identical() {
        let (a, b) = synth_generate(&small()).unwrap();
        let (c, d) = synth_generate(&small()).unwrap();
        assert_eq!(a.to_json().unwrap(), c.to_json().unwrap());
        assert_eq!(b.to_json().unwrap(), d.to_json().unwrap());
        let other = synth_generate(&SynthSpec { seed: 8, ..small() }).unwrap().0;
        assert_ne!(a.to_json().unwrap(), other.to_json().unwrap());
    }

    #[test]
    fn loads_cleanly_and_or_consistent() {
        let (train, test) = synth_generate(&small()).unwrap();
        for corpus in [&train, &test] {
            let back = crate::data::Corpus::from_json(&corpus.to_json().unwrap()).unwrap();
            assert_eq!(&back, corpus);
            for s in &corpus.samples {
                let truth = s.instance_truth.as_ref().unwrap();
                assert_eq!(or_labels(truth, 8), s.image_labels);
                assert!(!s.boxes.is_empty() && s.boxes.len() <= 2);
            }
        }
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let train: HashSet<u64> = (0..2000).map(|i| scene_seed(3, Split::Train, i)).collect();
        let test: HashSet<u64> = (0..2000).map(|i| scene_seed(3, Split::Test, i)).collect();
        assert_eq!(train.len(), 2000);
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn context_glyph_leaves_boxes() {
        let spec = SynthSpec {
            context_dependence: 1.0,
            ..small()
        };
        let (train, _) = synth_generate(&spec).unwrap();
        // inside every box only background and the white mark remain
        for s in &train.samples {
            let plane = 32 * 32;
            for b in &s.boxes {
                for y in b.y0 as usize..b.y1 as usize {
                    for x in b.x0 as usize..b.x1 as usize {
                        let px: Vec<f64> = (0..3)
                            .map(|ch| s.image.data()[ch * plane + y * 32 + x])
                            .collect();
                        let white = px.iter().all(|&v| v == 1.0);
                        let dark = px.iter().all(|&v| v <= f64::from(BACKGROUND_MAX));
                        assert!(white || dark, "{} at ({x},{y}): {px:?}", s.id);
                    }
                }
            }
        }
    }

    #[test]
    fn per_instance_supervision_carries_box_labels() {
        let spec = SynthSpec {
            supervision: Supervision::PerInstance,
            ..small()
        };
        let (train, _) = synth_generate(&spec).unwrap();
        assert!(train
            .samples
            .iter()
            .all(|s| s.per_box_labels.is_some() && s.instance_truth.is_none()));
        train.validate().unwrap();
    }

    #[test]
    fn skew_matches_request() {
        for skew in [20.0, 100.0] {
            let spec = SynthSpec {
                n_images: 1000,
                n_test: 10,
                max_people: 1,
                skew: Some(skew),
                ..small()
            };
            let (train, _) = synth_generate(&spec).unwrap();
            let ratio = class_stats(&train).max_ratio.unwrap();
            assert!(
                (ratio - skew).abs() <= 0.1 * skew,
                "requested {skew}, got {ratio}"
            );
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(synth_generate(&SynthSpec {
            num_classes: 1,
            ..small()
        })
        .is_err());
        assert!(synth_generate(&SynthSpec {
            max_people: 0,
            ..small()
        })
        .is_err());
        assert!(synth_generate(&SynthSpec {
            skew: Some(2.0),
            ..small()
        })
        .is_err());
        let crowded = SynthSpec {
            max_people: 12,
            image_size: 16,
            ..small()
        };
        let err = synth_generate(&crowded).unwrap_err().to_string();
        assert!(err.contains("image too small"), "{err}");
    }

    #[test]
    fn empty_images_only_in_train() {
        let spec = SynthSpec {
            empty_fraction: 0.3,
            ..small()
        };
        let (train, test) = synth_generate(&spec).unwrap();
        assert!(train.samples.iter().any(|s| s.boxes.is_empty()));
        assert!(test.samples.iter().all(|s| !s.boxes.is_empty()));
    }

    #[test]
    fn names_and_decomposition() {
        let spec = small();
        let names = spec.class_names();
        assert_eq!(names[0], "ride_horse");
        assert_eq!(names[1], "hold_horse");
        assert_eq!(names[7], "hold_umbrella");
        assert_eq!(spec.decompose(5), (1, 2));
    }
}
