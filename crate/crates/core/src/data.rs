//! Corpora: JSON storage, validation, class statistics and the synthetic
//! scene generator.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Roi;
use crate::tensor::Tensor;

pub mod synth;

pub use synth::{synth_generate, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Labels describe the image; person assignment is unknown.
    ImageLevel,
    /// Every box carries its own label vector.
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub source: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    /// Person boxes in image coordinates.
    pub boxes: Vec<Roi>,
    pub image_labels: Vec<u8>,
    /// Per-box labels of per-instance corpora.
    pub per_box_labels: Option<Vec<Vec<u8>>>,
    /// Hidden per-person truth kept by the generator for diagnostics.
    pub instance_truth: Option<Vec<Vec<u8>>>,
    pub detector_meta: Option<DetectorMeta>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }

    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn labels_tensor(&self) -> Tensor {
        labels_to_tensor(&self.image_labels)
    }

    /// Per-person labels when any are known, training labels first.
    pub fn person_labels(&self) -> Option<&[Vec<u8>]> {
        self.per_box_labels
            .as_deref()
            .or(self.instance_truth.as_deref())
    }
}

pub fn labels_to_tensor(labels: &[u8]) -> Tensor {
    Tensor::new(
        vec![labels.len()],
        labels.iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("labels are finite and non-empty")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub supervision: Supervision,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Checks every structural invariant, naming the offending sample.
    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        if c == 0 {
            return Err(Error::Validation("corpus has no classes".into()));
        }
        for s in &self.samples {
            let bad = |msg: String| Error::Validation(format!("sample {}: {msg}", s.id));
            if s.image.rank() != 3 || s.image.dims()[0] != 3 {
                return Err(bad(format!("image dims {:?}", s.image.dims())));
            }
            if s.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(bad("pixel values outside [0, 1]".into()));
            }
            check_label_vec(&s.image_labels, c).map_err(|m| bad(format!("image_labels {m}")))?;
            for b in &s.boxes {
                b.validate(s.width(), s.height())
                    .map_err(|_| bad(format!("box {b:?} out of bounds")))?;
            }
            let per_person = [
                ("per_box_labels", &s.per_box_labels),
                ("instance_truth", &s.instance_truth),
            ];
            for (what, labels) in per_person {
                if let Some(rows) = labels {
                    if rows.len() != s.boxes.len() {
                        return Err(bad(format!(
                            "{} {what} rows for {} boxes",
                            rows.len(),
                            s.boxes.len()
                        )));
                    }
                    for r in rows {
                        check_label_vec(r, c).map_err(|m| bad(format!("{what} {m}")))?;
                    }
                    let or = or_labels(rows, c);
                    if or != s.image_labels {
                        return Err(bad(format!("image_labels disagree with the OR of {what}")));
                    }
                }
            }
            if self.supervision == Supervision::PerInstance && s.per_box_labels.is_none() {
                return Err(bad("per-instance corpus without per_box_labels".into()));
            }
        }
        Ok(())
    }
}

fn check_label_vec(v: &[u8], c: usize) -> std::result::Result<(), String> {
    if v.len() != c {
        return Err(format!("has length {} but there are {c} classes", v.len()));
    }
    if v.iter().any(|&x| x > 1) {
        return Err("must be 0 or 1".into());
    }
    Ok(())
}

pub fn or_labels(rows: &[Vec<u8>], c: usize) -> Vec<u8> {
    let mut out = vec![0u8; c];
    for r in rows {
        for (o, &v) in out.iter_mut().zip(r) {
            *o |= v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Debug, Serialize, Deserialize)]
struct CorpusFile {
    classes: Vec<String>,
    supervision: Supervision,
    #[serde(default = "default_split")]
    split: Split,
    samples: Vec<SampleFile>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleFile {
    id: String,
    width: usize,
    height: usize,
    /// Base64 of little-endian f32 values, interleaved RGB in row-major pixel order.
    pixels: String,
    boxes: Vec<[f64; 4]>,
    image_labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_box_labels: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instance_truth: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detector_meta: Option<DetectorMeta>,
}

fn encode_pixels(t: &Tensor) -> String {
    let plane = t.dims()[1] * t.dims()[2];
    let d = t.data();
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.extend_from_slice(&(d[ch * plane + p] as f32).to_le_bytes());
        }
    }
    B64.encode(bytes)
}

fn decode_pixels(id: &str, s: &str, width: usize, height: usize) -> Result<Tensor> {
    let bad = |m: &str| Error::Validation(format!("sample {id}: {m}"));
    let bytes = B64
        .decode(s)
        .map_err(|_| bad("pixels are not valid base64"))?;
    if width == 0 || height == 0 || bytes.len() != 3 * width * height * 4 {
        return Err(bad("pixel payload does not match width x height x 3"));
    }
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        data[(i % 3) * plane + i / 3] = v;
    }
    Tensor::new(vec![3, height, width], data).map_err(|e| bad(&e.to_string()))
}

impl Corpus {
    pub fn to_json(&self) -> Result<String> {
        let file = CorpusFile {
            classes: self.classes.clone(),
            supervision: self.supervision,
            split: self.split,
            samples: self
                .samples
                .iter()
                .map(|s| SampleFile {
                    id: s.id.clone(),
                    width: s.width(),
                    height: s.height(),
                    pixels: encode_pixels(&s.image),
                    boxes: s.boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
                    image_labels: s.image_labels.clone(),
                    per_box_labels: s.per_box_labels.clone(),
                    instance_truth: s.instance_truth.clone(),
                    detector_meta: s.detector_meta.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CorpusFile = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("corpus schema: {e}")))?;
        let samples = file
            .samples
            .into_iter()
            .map(|s| {
                Ok(Sample {
                    image: decode_pixels(&s.id, &s.pixels, s.width, s.height)?,
                    boxes: s
                        .boxes
                        .iter()
                        .map(|b| Roi::new(b[0], b[1], b[2], b[3]))
                        .collect(),
                    image_labels: s.image_labels,
                    per_box_labels: s.per_box_labels,
                    instance_truth: s.instance_truth,
                    detector_meta: s.detector_meta,
                    id: s.id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let corpus = Corpus {
            classes: file.classes,
            supervision: file.supervision,
            split: file.split,
            samples,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::from_json(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub name: String,
    pub positives: usize,
    pub negatives: usize,
    /// Negatives per positive; `None` for classes with no positives.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub images: usize,
    pub per_class: Vec<ClassCount>,
    pub max_ratio: Option<f64>,
    pub mean_ratio: Option<f64>,
    /// Classes with no positive image.
    pub empty_classes: Vec<String>,
    /// Classes with exactly one positive image.
    pub single_positive_classes: Vec<String>,
}

pub fn class_stats(corpus: &Corpus) -> ClassStats {
    let n = corpus.samples.len();
    let per_class: Vec<ClassCount> = corpus
        .classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let positives = corpus
                .samples
                .iter()
                .filter(|s| s.image_labels.get(c) == Some(&1))
                .count();
            let negatives = n - positives;
            ClassCount {
                name: name.clone(),
                positives,
                negatives,
                ratio: (positives > 0).then(|| negatives as f64 / positives as f64),
            }
        })
        .collect();
    let ratios: Vec<f64> = per_class.iter().filter_map(|c| c.ratio).collect();
    let names_where = |f: &dyn Fn(&ClassCount) -> bool| {
        per_class
            .iter()
            .filter(|c| f(c))
            .map(|c| c.name.clone())
            .collect()
    };
    ClassStats {
        images: n,
        max_ratio: ratios.iter().cloned().reduce(f64::max),
        mean_ratio: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        empty_classes: names_where(&|c| c.positives == 0),
        single_positive_classes: names_where(&|c| c.positives == 1),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, labels: Vec<u8>) -> Sample {
        Sample {
            id: id.into(),
            image: Tensor::new(vec![3, 4, 4], vec![0.25; 48]).unwrap(),
            boxes: vec![Roi::new(0.0, 0.0, 2.0, 3.0)],
            image_labels: labels.clone(),
            per_box_labels: None,
            instance_truth: Some(vec![labels]),
            detector_meta: Some(DetectorMeta {
                source: "test".into(),
                threshold: 0.8,
            }),
        }
    }

    fn corpus(samples: Vec<Sample>) -> Corpus {
        Corpus {
            classes: vec!["a".into(), "b".into()],
            supervision: Supervision::ImageLevel,
            split: Split::Train,
            samples,
        }
    }

    #[test]
    fn json_round_trip() {
        let c = corpus(vec![sample("s0", vec![1, 0]), sample("s1", vec![0, 1])]);
        let text = c.to_json().unwrap();
        let back = Corpus::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn rejects_wrong_label_length() {
        let mut c = corpus(vec![
            sample("ok", vec![1, 0]),
            sample("bad-one", vec![1, 0]),
        ]);
        c.samples[1].image_labels = vec![1, 0, 0];
        c.samples[1].instance_truth = None;
        let err = Corpus::from_json(&c.to_json().unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("bad-one"), "{err}");
    }

    #[test]
    fn rejects_label_longer_than_class_list() {
        let classes: Vec<String> = (0..600).map(|i| format!("c{i}")).collect();
        let mut s = sample("img-0042", vec![0; 601]);
        s.instance_truth = None;
        let c = Corpus {
            classes,
            supervision: Supervision::ImageLevel,
            split: Split::Test,
            samples: vec![s],
        };
        let err = Corpus::from_json(&c.to_json().unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("img-0042") && err.contains("601"), "{err}");
    }

    #[test]
    fn pixels_are_interleaved() {
        let mut s = sample("px", vec![1, 0]);
        s.image.data_mut()[16] = 0.5; // green channel of pixel 0
        let text = corpus(vec![s.clone()]).to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let bytes = B64
            .decode(v["samples"][0]["pixels"].as_str().unwrap())
            .unwrap();
        assert_eq!(f32::from_le_bytes(bytes[4..8].try_into().unwrap()), 0.5);
        assert_eq!(Corpus::from_json(&text).unwrap().samples[0].image, s.image);
    }

    #[test]
    fn rejects_out_of_bounds_box() {
        let mut c = corpus(vec![sample("wide", vec![1, 0])]);
        c.samples[0].boxes[0] = Roi::new(0.0, 0.0, 9.0, 2.0);
        let err = Corpus::from_json(&c.to_json().unwrap())
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("wide") && err.contains("out of bounds"),
            "{err}"
        );
    }

    #[test]
    fn rejects_or_violation_and_bad_schema() {
        let mut c = corpus(vec![sample("or", vec![1, 0])]);
        c.samples[0].image_labels = vec![1, 1];
        assert!(c.validate().is_err());
        assert!(Corpus::from_json("{\"classes\": []}").is_err());
        let mut p = corpus(vec![sample("p", vec![1, 0])]);
        p.supervision = Supervision::PerInstance;
        assert!(p.validate().is_err());
    }

    #[test]
    fn balanced_stats() {
        let c = corpus(vec![sample("s0", vec![1, 0]), sample("s1", vec![0, 1])]);
        let st = class_stats(&c);
        assert_eq!(st.max_ratio, Some(1.0));
        assert!(st.empty_classes.is_empty());
        assert_eq!(st.single_positive_classes.len(), 2);
    }

    #[test]
    fn empty_class_flagged() {
        let c = corpus(vec![sample("s0", vec![1, 0]), sample("s1", vec![1, 0])]);
        let st = class_stats(&c);
        assert_eq!(st.empty_classes, vec!["b".to_string()]);
        assert_eq!(st.per_class[1].ratio, None);
        assert_eq!(st.max_ratio, Some(0.0));
    }
}
