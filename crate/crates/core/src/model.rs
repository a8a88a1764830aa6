//! Backbone, ROI pooling, fusion and classifier head assembled into the
//! four network variants.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    conv2d, fully_connected, fusion_combine, fusion_param_dims, relu, roi_max_pool, sigmoid,
    Conv2dCtx, FcCtx, FusionCtx, FusionKind, FusionParams, ReluCtx, Roi, RoiPoolCtx,
};
use crate::loss::{mil_max_aggregate, InstanceScores};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
pub const KERNEL: usize = 3;
pub const STAGE_STRIDE: usize = 2;
/// Probability above which an attributed label is displayed.
pub const DISPLAY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    BboxOnly,
    FullImageOnly,
    Fusion1,
    Fusion2,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BboxOnly,
        Variant::FullImageOnly,
        Variant::Fusion1,
        Variant::Fusion2,
    ];

    fn code(self) -> f64 {
        match self {
            Variant::BboxOnly => 0.0,
            Variant::FullImageOnly => 1.0,
            Variant::Fusion1 => 2.0,
            Variant::Fusion2 => 3.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code() == c)
            .ok_or_else(|| Error::Format(format!("unknown variant code {c}")))
    }

    pub fn fusion(self) -> Option<FusionKind> {
        match self {
            Variant::Fusion1 => Some(FusionKind::Fusion1),
            Variant::Fusion2 => Some(FusionKind::Fusion2),
            _ => None,
        }
    }

    /// Whether the network scores one instance per person box.
    pub fn uses_boxes(self) -> bool {
        self != Variant::FullImageOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    /// Output channels of each stride-2 3x3 conv stage.
    pub backbone_widths: Vec<usize>,
    /// Side of the square ROI pooling grid.
    pub roi_out: usize,
    /// Hidden fc widths between the pooled feature and the classifier.
    pub head_widths: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Fusion2,
            num_classes: 8,
            backbone_widths: vec![8, 32],
            roi_out: 3,
            head_widths: vec![64],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            num_classes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::Config(
                "backbone widths must be non-empty and positive".into(),
            ));
        }
        if self.roi_out == 0 || self.head_widths.contains(&0) {
            return Err(Error::Config(
                "roi_out and head widths must be positive".into(),
            ));
        }
        if let Some(kind) = self.variant.fusion() {
            fusion_param_dims(kind, self.channels())?;
        }
        Ok(())
    }

    /// Channel count of the final backbone stage.
    pub fn channels(&self) -> usize {
        *self.backbone_widths.last().expect("validated non-empty")
    }

    pub fn total_stride(&self) -> usize {
        STAGE_STRIDE.pow(self.backbone_widths.len() as u32)
    }

    pub fn hidden_width(&self) -> usize {
        self.head_widths
            .last()
            .copied()
            .unwrap_or(self.channels() * self.roi_out * self.roi_out)
    }

    /// Layers in forward order. Layers with equal depth (the two Fusion2
    /// reductions) are adjacent.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.backbone_widths.len())
            .map(|i| format!("backbone_conv{i}"))
            .collect();
        match self.variant.fusion() {
            Some(FusionKind::Fusion1) => names.push("fuse".into()),
            Some(FusionKind::Fusion2) => {
                names.push("fuse_box".into());
                names.push("fuse_img".into());
            }
            None => {}
        }
        names.extend((0..self.head_widths.len()).map(|i| format!("fc{}", 6 + i)));
        names.push("cls_score".into());
        names
    }

    fn meta(&self) -> Tensor {
        let mut v = vec![
            self.variant.code(),
            self.num_classes as f64,
            self.roi_out as f64,
            (self.seed & 0xffff_ffff) as f64,
            (self.seed >> 32) as f64,
            self.backbone_widths.len() as f64,
        ];
        v.extend(self.backbone_widths.iter().map(|&w| w as f64));
        v.push(self.head_widths.len() as f64);
        v.extend(self.head_widths.iter().map(|&w| w as f64));
        Tensor::from_vec(v).expect("finite metadata")
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        let bad = || Error::Format("malformed model metadata".into());
        let get = |i: usize| d.get(i).copied().ok_or_else(bad);
        let nb = get(5)? as usize;
        let backbone_widths = (0..nb)
            .map(|i| get(6 + i).map(|v| v as usize))
            .collect::<Result<_>>()?;
        let nh = get(6 + nb)? as usize;
        let head_widths = (0..nh)
            .map(|i| get(7 + nb + i).map(|v| v as usize))
            .collect::<Result<_>>()?;
        if d.len() != 7 + nb + nh {
            return Err(bad());
        }
        Ok(ModelConfig {
            variant: Variant::from_code(get(0)?)?,
            num_classes: get(1)? as usize,
            roi_out: get(2)? as usize,
            seed: get(3)? as u64 | ((get(4)? as u64) << 32),
            backbone_widths,
            head_widths,
        })
    }
}

/// Gradients (or any per-parameter tensors) keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn accumulate(&mut self, name: &str, g: Tensor) -> Result<()> {
        match self.0.get_mut(name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.0.insert(name.to_string(), g);
                Ok(())
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) -> Result<()> {
        for (k, v) in other.0 {
            self.accumulate(&k, v)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

struct InstanceCache {
    box_pool: Option<RoiPoolCtx>,
    fusion: Option<FusionCtx>,
    head: Vec<(FcCtx, ReluCtx)>,
    cls: FcCtx,
}

/// Saved state of a forward pass over one image.
pub struct ForwardCache {
    backbone: Vec<(Conv2dCtx, ReluCtx)>,
    fmap_dims: Vec<usize>,
    img_pool: Option<RoiPoolCtx>,
    instances: Vec<InstanceCache>,
}

/// Output of a forward pass over one image.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub scores: InstanceScores,
    /// Hidden fc activation per instance (the classifier's input).
    pub hidden: Vec<Tensor>,
}

/// Image-level prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    /// Instance that produced each class score.
    pub winners: Vec<usize>,
}

impl Prediction {
    /// `(class, winning instance)` pairs whose probability clears `threshold`.
    pub fn attributed(&self, threshold: f64) -> Vec<(usize, usize)> {
        self.probs
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(c, _)| (c, self.winners[c]))
            .collect()
    }
}

fn he_uniform(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(dims.to_vec(), data).expect("finite init")
}

impl Network {
    /// Fresh network with seeded He-uniform weights and zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let mut add = |name: &str, wdims: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bias = Tensor::zeros(&[wdims[0]]);
            params.insert(format!("{name}.weight"), he_uniform(&wdims, fan_in, rng));
            params.insert(format!("{name}.bias"), bias);
        };
        let mut cin = INPUT_CHANNELS;
        for (i, &w) in config.backbone_widths.iter().enumerate() {
            add(
                &format!("backbone_conv{}", i + 1),
                vec![w, cin, KERNEL, KERNEL],
                cin * KERNEL * KERNEL,
                &mut rng,
            );
            cin = w;
        }
        let c = config.channels();
        if let Some(kind) = config.variant.fusion() {
            let dims = fusion_param_dims(kind, c)?;
            match kind {
                FusionKind::Fusion1 => add("fuse", dims[0].clone(), 2 * c, &mut rng),
                FusionKind::Fusion2 => {
                    add("fuse_box", dims[0].clone(), c, &mut rng);
                    add("fuse_img", dims[2].clone(), c, &mut rng);
                }
            }
        }
        let mut fan_in = c * config.roi_out * config.roi_out;
        for (i, &w) in config.head_widths.iter().enumerate() {
            add(&format!("fc{}", 6 + i), vec![w, fan_in], fan_in, &mut rng);
            fan_in = w;
        }
        add(
            "cls_score",
            vec![config.num_classes, fan_in],
            fan_in,
            &mut rng,
        );
        Ok(Network {
            config,
            params,
            frozen: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Marks `layer` and every layer before it as frozen.
    pub fn freeze_below(mut self, layer: &str) -> Result<Self> {
        let names = self.config.layer_names();
        let pos = names
            .iter()
            .position(|n| n == layer)
            .ok_or_else(|| Error::Config(format!("unknown layer {layer}")))?;
        // Both Fusion2 reductions sit at the same depth.
        let pos = if layer == "fuse_box" { pos + 1 } else { pos };
        self.frozen.extend(names[..=pos].iter().cloned());
        Ok(self)
    }

    pub fn is_frozen(&self, param: &str) -> bool {
        let layer = param.split('.').next().unwrap_or(param);
        self.frozen.contains(layer)
    }

    pub fn frozen_layers(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        match *image.dims() {
            [INPUT_CHANNELS, h, w] => Ok((h, w)),
            ref d => shape_err(format!("image must be 3 x H x W, got {d:?}")),
        }
    }

    /// Clamps image-space boxes to the image; rejects boxes left empty.
    fn clamp_boxes(boxes: &[Roi], w: usize, h: usize) -> Result<Vec<Roi>> {
        boxes
            .iter()
            .map(|b| {
                let r = Roi::new(
                    b.x0.clamp(0.0, w as f64),
                    b.y0.clamp(0.0, h as f64),
                    b.x1.clamp(0.0, w as f64),
                    b.y1.clamp(0.0, h as f64),
                );
                r.validate(w, h).map(|_| r)
            })
            .collect()
    }

    pub fn forward_instances(&self, image: &Tensor, boxes: &[Roi]) -> Result<InstanceScores> {
        Ok(self.forward_cached(image, boxes)?.0.scores)
    }

    pub fn forward(&self, image: &Tensor, boxes: &[Roi]) -> Result<ForwardOutput> {
        Ok(self.forward_cached(image, boxes)?.0)
    }

    /// Forward pass that keeps what [`Network::backward`] needs.
    pub fn forward_cached(
        &self,
        image: &Tensor,
        boxes: &[Roi],
    ) -> Result<(ForwardOutput, ForwardCache)> {
        let (h, w) = self.check_image(image)?;
        let cfg = &self.config;
        let inst_boxes = if cfg.variant.uses_boxes() {
            if boxes.is_empty() {
                return Err(Error::Validation(format!(
                    "{:?} needs at least one person box",
                    cfg.variant
                )));
            }
            Self::clamp_boxes(boxes, w, h)?
        } else {
            vec![Roi::full(w, h)]
        };

        let mut x = image.clone();
        let mut backbone = Vec::with_capacity(cfg.backbone_widths.len());
        for i in 1..=cfg.backbone_widths.len() {
            let name = format!("backbone_conv{i}");
            let (z, cctx) = conv2d(
                &x,
                self.param(&format!("{name}.weight"))?,
                self.param(&format!("{name}.bias"))?,
                STAGE_STRIDE,
            )?;
            let (a, rctx) = relu(&z);
            backbone.push((cctx, rctx));
            x = a;
        }
        let fmap = x;
        let (fh, fw) = (fmap.dims()[1], fmap.dims()[2]);
        let stride = cfg.total_stride();
        let s = cfg.roi_out;

        let needs_img = cfg.variant != Variant::BboxOnly;
        let (img_feat, img_pool) = if needs_img {
            let (f, ctx) = roi_max_pool(&fmap, &Roi::full(fw, fh), s, s)?;
            (Some(f), Some(ctx))
        } else {
            (None, None)
        };

        let fusion_params = self.fusion_params()?;
        let n = inst_boxes.len();
        let mut scores = Vec::with_capacity(n * cfg.num_classes);
        let mut hidden = Vec::with_capacity(n);
        let mut instances = Vec::with_capacity(n);
        for b in &inst_boxes {
            let (feat, box_pool, fusion) = match cfg.variant {
                Variant::FullImageOnly => (img_feat.clone().expect("image roi"), None, None),
                Variant::BboxOnly => {
                    let (f, ctx) = roi_max_pool(&fmap, &b.to_feature(stride, fw, fh), s, s)?;
                    (f, Some(ctx), None)
                }
                Variant::Fusion1 | Variant::Fusion2 => {
                    let (bf, ctx) = roi_max_pool(&fmap, &b.to_feature(stride, fw, fh), s, s)?;
                    let params = fusion_params.as_ref().expect("fusion variant");
                    let (f, fctx) =
                        fusion_combine(&bf, img_feat.as_ref().expect("image roi"), params)?;
                    (f, Some(ctx), Some(fctx))
                }
            };
            let mut a = feat.reshape(&[feat.len()])?;
            let mut head = Vec::with_capacity(cfg.head_widths.len());
            for i in 0..cfg.head_widths.len() {
                let name = format!("fc{}", 6 + i);
                let (z, fctx) = fully_connected(
                    &a,
                    self.param(&format!("{name}.weight"))?,
                    self.param(&format!("{name}.bias"))?,
                )?;
                let (r, rctx) = relu(&z);
                head.push((fctx, rctx));
                a = r;
            }
            let (logits, cls) = fully_connected(
                &a,
                self.param("cls_score.weight")?,
                self.param("cls_score.bias")?,
            )?;
            scores.extend_from_slice(logits.data());
            hidden.push(a);
            instances.push(InstanceCache {
                box_pool,
                fusion,
                head,
                cls,
            });
        }
        let out = ForwardOutput {
            scores: InstanceScores {
                scores: Tensor::new(vec![n, cfg.num_classes], scores)?,
                boxes: inst_boxes,
            },
            hidden,
        };
        let cache = ForwardCache {
            backbone,
            fmap_dims: fmap.dims().to_vec(),
            img_pool,
            instances,
        };
        Ok((out, cache))
    }

    fn fusion_params(&self) -> Result<Option<FusionParams<'_>>> {
        Ok(match self.config.variant.fusion() {
            Some(FusionKind::Fusion1) => Some(FusionParams::Fusion1 {
                weight: self.param("fuse.weight")?,
                bias: self.param("fuse.bias")?,
            }),
            Some(FusionKind::Fusion2) => Some(FusionParams::Fusion2 {
                box_weight: self.param("fuse_box.weight")?,
                box_bias: self.param("fuse_box.bias")?,
                img_weight: self.param("fuse_img.weight")?,
                img_bias: self.param("fuse_img.bias")?,
            }),
            None => None,
        })
    }

    /// Parameter gradients given the loss gradient w.r.t. the `N x C`
    /// instance logits. Rows that are entirely zero are skipped.
    pub fn backward(&self, cache: ForwardCache, grad_scores: &Tensor) -> Result<Gradients> {
        let cfg = &self.config;
        let n = cache.instances.len();
        let c = cfg.num_classes;
        if grad_scores.dims() != [n, c] {
            return shape_err(format!(
                "score grad {:?} vs {:?}",
                grad_scores.dims(),
                [n, c]
            ));
        }
        let mut grads = Gradients::default();
        let mut g_fmap = Tensor::zeros(&cache.fmap_dims);
        let s = cfg.roi_out;
        let pooled = [cfg.channels(), s, s];
        let mut g_img = Tensor::zeros(&pooled);
        let mut img_used = false;
        let fusion_params = self.fusion_params()?;

        for (i, inst) in cache.instances.into_iter().enumerate() {
            let row = &grad_scores.data()[i * c..(i + 1) * c];
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            let g = Tensor::new(vec![c], row.to_vec())?;
            let cls_w = self.param("cls_score.weight")?;
            let fg = inst.cls.backward(cls_w, &g)?;
            grads.accumulate("cls_score.weight", fg.weight)?;
            grads.accumulate("cls_score.bias", fg.bias)?;
            let mut ga = fg.input;
            for (j, (fctx, rctx)) in inst.head.into_iter().enumerate().rev() {
                let name = format!("fc{}", 6 + j);
                let gz = rctx.backward(&ga)?;
                let fg = fctx.backward(self.param(&format!("{name}.weight"))?, &gz)?;
                grads.accumulate(&format!("{name}.weight"), fg.weight)?;
                grads.accumulate(&format!("{name}.bias"), fg.bias)?;
                ga = fg.input;
            }
            let g_feat = ga.reshape(&pooled)?;
            match cfg.variant {
                Variant::FullImageOnly => {
                    g_img.add_assign(&g_feat)?;
                    img_used = true;
                }
                Variant::BboxOnly => {
                    inst.box_pool
                        .expect("box pooling saved")
                        .backward_into(&g_feat, &mut g_fmap)?;
                }
                Variant::Fusion1 | Variant::Fusion2 => {
                    let params = fusion_params.as_ref().expect("fusion variant");
                    let fg = inst
                        .fusion
                        .expect("fusion saved")
                        .backward(params, &g_feat)?;
                    let names: &[&str] = match params {
                        FusionParams::Fusion1 { .. } => &["fuse.weight", "fuse.bias"],
                        FusionParams::Fusion2 { .. } => &[
                            "fuse_box.weight",
                            "fuse_box.bias",
                            "fuse_img.weight",
                            "fuse_img.bias",
                        ],
                    };
                    for (name, t) in names.iter().zip(fg.params) {
                        grads.accumulate(name, t)?;
                    }
                    inst.box_pool
                        .expect("box pooling saved")
                        .backward_into(&fg.box_feat, &mut g_fmap)?;
                    g_img.add_assign(&fg.img_feat)?;
                    img_used = true;
                }
            }
        }
        if img_used {
            cache
                .img_pool
                .expect("image pooling saved")
                .backward_into(&g_img, &mut g_fmap)?;
        }
        let mut g = g_fmap;
        for (i, (cctx, rctx)) in cache.backbone.into_iter().enumerate().rev() {
            let name = format!("backbone_conv{}", i + 1);
            let gz = rctx.backward(&g)?;
            let cg = cctx.backward(self.param(&format!("{name}.weight"))?, &gz)?;
            grads.accumulate(&format!("{name}.weight"), cg.weight)?;
            grads.accumulate(&format!("{name}.bias"), cg.bias)?;
            g = cg.input;
        }
        // Parameters untouched by this image still get an explicit zero.
        for (name, p) in &self.params {
            if !grads.0.contains_key(name) {
                grads.0.insert(name.clone(), Tensor::zeros_like(p));
            }
        }
        Ok(grads)
    }

    /// Sigmoid of the max-aggregated instance logits.
    pub fn predict_image(&self, image: &Tensor, boxes: &[Roi]) -> Result<Prediction> {
        let inst = self.forward_instances(image, boxes)?;
        let agg = mil_max_aggregate(&inst)?;
        let (probs, _) = sigmoid(&agg.image_scores);
        Ok(Prediction {
            probs,
            winners: agg.winners,
        })
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut e = vec![("meta.config".to_string(), self.config.meta())];
        e.extend(self.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        e
    }

    pub fn from_entries(mut entries: Vec<(String, Tensor)>) -> Result<Self> {
        let meta = checkpoint::take_entry(&mut entries, "meta.config")?;
        let config = ModelConfig::from_meta(&meta)?;
        let template = Network::build(config.clone())?;
        let mut params = BTreeMap::new();
        for (name, t) in entries {
            match template.params.get(&name) {
                Some(p) if p.dims() == t.dims() => {
                    params.insert(name, t);
                }
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has dims {:?}, expected {:?}",
                        t.dims(),
                        p.dims()
                    )))
                }
                None => return Err(Error::Format(format!("unexpected parameter {name}"))),
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Format("checkpoint is missing parameters".into()));
        }
        Ok(Network {
            config,
            params,
            frozen: BTreeSet::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Network::from_entries(checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn boxes() -> Vec<Roi> {
        vec![
            Roi::new(2.0, 3.0, 12.0, 15.0),
            Roi::new(8.0, 1.0, 16.0, 14.0),
        ]
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::new(Variant::Fusion2, 5);
        let a = Network::build(cfg.clone()).unwrap();
        let b = Network::build(cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            checkpoint::encode(&a.to_entries()).unwrap(),
            checkpoint::encode(&b.to_entries()).unwrap()
        );
    }

    #[test]
    fn fusion1_kernel_dims() {
        let net = Network::build(ModelConfig {
            backbone_widths: vec![8, 16],
            ..ModelConfig::new(Variant::Fusion1, 4)
        })
        .unwrap();
        assert_eq!(net.param("fuse.weight").unwrap().dims(), &[16, 32, 1, 1]);
    }

    #[test]
    fn fusion2_rejects_odd_channels() {
        let cfg = ModelConfig {
            backbone_widths: vec![8, 15],
            ..ModelConfig::new(Variant::Fusion2, 4)
        };
        assert!(matches!(Network::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn every_variant_emits_class_logits() {
        let img = image(1, 16, 16);
        for v in Variant::ALL {
            let net = Network::build(ModelConfig::new(v, 6)).unwrap();
            let s = net.forward_instances(&img, &boxes()).unwrap();
            let expect_n = if v == Variant::FullImageOnly { 1 } else { 2 };
            assert_eq!(s.scores.dims(), &[expect_n, 6], "{v:?}");
        }
    }

    #[test]
    fn full_image_ignores_boxes() {
        let img = image(2, 16, 16);
        let net = Network::build(ModelConfig::new(Variant::FullImageOnly, 3)).unwrap();
        let a = net.forward_instances(&img, &boxes()).unwrap();
        let b = net.forward_instances(&img, &[]).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn identical_boxes_identical_rows() {
        let img = image(3, 16, 16);
        let net = Network::build(ModelConfig::new(Variant::Fusion1, 3)).unwrap();
        let b = Roi::new(1.0, 1.0, 9.0, 9.0);
        let s = net.forward_instances(&img, &[b, b]).unwrap();
        assert_eq!(s.row(0), s.row(1));
    }

    #[test]
    fn fusion1_full_box_matches_composition() {
        let img = image(4, 16, 16);
        let net = Network::build(ModelConfig::new(Variant::Fusion1, 3)).unwrap();
        let s = net.forward_instances(&img, &[Roi::full(16, 16)]).unwrap();

        let mut x = img.clone();
        for i in 1..=2 {
            let (z, _) = conv2d(
                &x,
                net.param(&format!("backbone_conv{i}.weight")).unwrap(),
                net.param(&format!("backbone_conv{i}.bias")).unwrap(),
                2,
            )
            .unwrap();
            x = relu(&z).0;
        }
        let (f, _) = roi_max_pool(&x, &Roi::full(4, 4), 3, 3).unwrap();
        let stacked = crate::layers::concat_channels(&f, &f).unwrap();
        let (z, _) = conv2d(
            &stacked,
            net.param("fuse.weight").unwrap(),
            net.param("fuse.bias").unwrap(),
            1,
        )
        .unwrap();
        let fused = relu(&z).0;
        let (h, _) = fully_connected(
            &fused.reshape(&[fused.len()]).unwrap(),
            net.param("fc6.weight").unwrap(),
            net.param("fc6.bias").unwrap(),
        )
        .unwrap();
        let (logits, _) = fully_connected(
            &relu(&h).0,
            net.param("cls_score.weight").unwrap(),
            net.param("cls_score.bias").unwrap(),
        )
        .unwrap();
        assert_eq!(s.row(0), logits.data());
    }

    #[test]
    fn box_variants_need_boxes() {
        let img = image(5, 16, 16);
        let net = Network::build(ModelConfig::new(Variant::BboxOnly, 3)).unwrap();
        assert!(net.forward_instances(&img, &[]).is_err());
        assert!(net
            .forward_instances(&img, &[Roi::new(20.0, 20.0, 30.0, 30.0)])
            .is_err());
    }

    #[test]
    fn prediction_properties() {
        let img = image(6, 16, 16);
        let net = Network::build(ModelConfig::new(Variant::Fusion2, 4)).unwrap();
        let one = [boxes()[0]];
        let p = net.predict_image(&img, &one).unwrap();
        let s = net.forward_instances(&img, &one).unwrap();
        for (i, &pr) in p.probs.data().iter().enumerate() {
            assert_eq!(pr, crate::layers::sigmoid_scalar(s.row(0)[i]));
            assert!(pr > 0.0 && pr < 1.0);
        }
        let mut rev = boxes();
        let fwd = net.predict_image(&img, &rev).unwrap();
        rev.reverse();
        let bwd = net.predict_image(&img, &rev).unwrap();
        assert_eq!(fwd.probs, bwd.probs);
        assert_eq!(DISPLAY_THRESHOLD, 0.5);
    }

    #[test]
    fn freeze_semantics() {
        let net = Network::build(ModelConfig::new(Variant::Fusion2, 4))
            .unwrap()
            .freeze_below("backbone_conv1")
            .unwrap();
        assert!(net.is_frozen("backbone_conv1.weight"));
        assert!(!net.is_frozen("backbone_conv2.weight"));
        let net = net.freeze_below("fuse_box").unwrap();
        assert!(net.is_frozen("fuse_img.bias"));
        assert!(!net.is_frozen("fc6.weight"));
        assert!(Network::build(ModelConfig::default())
            .unwrap()
            .freeze_below("conv9")
            .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = Network::build(ModelConfig {
            seed: u64::MAX - 7,
            ..ModelConfig::new(Variant::Fusion1, 7)
        })
        .unwrap();
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back, net);
        let path2 = dir.path().join("again.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
