//! Central finite-difference checks of every analytic backward pass.
//!
//! Each check builds a scalar probe `L(x) = <layer(x), g>` for a random
//! upstream gradient `g` and compares the backward pass against
//! `(L(x + h e_i) - L(x - h e_i)) / 2h` coordinate by coordinate. Only
//! forward functions are used on the numeric side.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    conv2d, fully_connected, fusion_combine, relu, roi_max_pool, sigmoid, FusionParams, Roi,
};
use crate::loss::{
    mil_max_aggregate, softmax_ce, weighted_bce, weighted_bce_with_logits, InstanceScores,
    LossWeights,
};
use crate::model::{ModelConfig, Network, Variant};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
/// Coordinates probed per tensor; larger tensors are subsampled.
const MAX_COORDS: usize = 160;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("finite")
}

/// Max relative error over (a sample of) the coordinates of `x`.
fn probe(
    x: &Tensor,
    analytic: &Tensor,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&Tensor) -> f64,
) -> (f64, usize) {
    let n = x.len();
    let coords: Vec<usize> = if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        sample(rng, n, MAX_COORDS).into_vec()
    };
    let mut worst = 0.0f64;
    for &i in &coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    (worst, coords.len())
}

struct Acc {
    name: String,
    worst: f64,
    coords: usize,
}

impl Acc {
    fn new(name: &str) -> Self {
        Acc {
            name: name.into(),
            worst: 0.0,
            coords: 0,
        }
    }

    fn add(&mut self, r: (f64, usize)) {
        self.worst = self.worst.max(r.0);
        self.coords += r.1;
    }

    fn done(self) -> CheckResult {
        CheckResult {
            name: self.name,
            max_rel_error: self.worst,
            coords: self.coords,
        }
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b).expect("matching dims")
}

pub fn check_conv2d(seeds: &[u64]) -> Result<CheckResult> {
    let mut acc = Acc::new("conv2d");
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stride = 1 + (seed % 2) as usize;
        let x = random(&[3, 6, 5], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let (y, ctx) = conv2d(&x, &w, &b, stride)?;
        let g = random(y.dims(), &mut rng);
        let grads = ctx.backward(&w, &g)?;
        let l = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv2d(x, w, b, stride).unwrap().0, &g);
        acc.add(probe(&x, &grads.input, &mut rng, |v| l(v, &w, &b)));
        acc.add(probe(&w, &grads.weight, &mut rng, |v| l(&x, v, &b)));
        acc.add(probe(&b, &grads.bias, &mut rng, |v| l(&x, &w, v)));
    }
    Ok(acc.done())
}

pub fn check_fully_connected(seeds: &[u64]) -> Result<CheckResult> {
    let mut acc = Acc::new("fully_connected");
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[7], &mut rng);
        let w = random(&[5, 7], &mut rng);
        let b = random(&[5], &mut rng);
        let (y, ctx) = fully_connected(&x, &w, &b)?;
        let g = random(y.dims(), &mut rng);
        let grads = ctx.backward(&w, &g)?;
        let l = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&fully_connected(x, w, b).unwrap().0, &g);
        acc.add(probe(&x, &grads.input, &mut rng, |v| l(v, &w, &b)));
        acc.add(probe(&w, &grads.weight, &mut rng, |v| l(&x, v, &b)));
        acc.add(probe(&b, &grads.bias, &mut rng, |v| l(&x, &w, v)));
    }
    Ok(acc.done())
}

pub fn check_relu(seeds: &[u64]) -> Result<CheckResult> {
    let mut acc = Acc::new("relu");
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep inputs away from the kink
        let x = random(&[20], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })?;
        let (y, ctx) = relu(&x);
        let g = random(y.dims(), &mut rng);
        let gx = ctx.backward(&g)?;
        acc.add(probe(&x, &gx, &mut rng, |v| dot(&relu(v).0, &g)));
    }
    Ok(acc.done())
}

pub fn check_sigmoid(seeds: &[u64]) -> Result<CheckResult> {
    let mut acc = Acc::new("sigmoid");
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[20], &mut rng).scale(4.0)?;
        let (y, ctx) = sigmoid(&x);
        let g = random(y.dims(), &mut rng);
        let gx = ctx.backward(&g)?;
        acc.add(probe(&x, &gx, &mut rng, |v| dot(&sigmoid(v).0, &g)));
    }
    Ok(acc.done())
}

pub fn check_roi_max_pool(seeds: &[u64]) -> Result<CheckResult> {
    let mut acc = Acc::new("roi_max_pool");
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 7, 8], &mut rng);
        let roi = Roi::new(
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
            rng.random_range(5.0..8.0),
            rng.random_range(5.0..7.0),
        );
        let (y, ctx) = roi_max_pool(&x, &roi, 3, 3)?;
        let g = random(y.dims(), &mut rng);
        let gx = ctx.backward(&g)?;
        acc.add(probe(&x, &gx, &mut rng, |v| {
            dot(&roi_max_pool(v, &roi, 3, 3).unwrap().0, &g)
        }));
    }
    Ok(acc.done())
}

fn fusion_params_of(variant: Variant, p: &[Tensor]) -> FusionParams<'_> {
    match variant {
        Variant::Fusion1 => FusionParams::Fusion1 {
            weight: &p[0],
            bias: &p[1],
        },
        _ => FusionParams::Fusion2 {
            box_weight: &p[0],
            box_bias: &p[1],
            img_weight: &p[2],
            img_bias: &p[3],
        },
    }
}

pub fn check_fusion(seeds: &[u64], variant: Variant) -> Result<CheckResult> {
    let name = format!("fusion_combine/{variant:?}");
    let mut acc = Acc::new(&name);
    let c = 6;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = random(&[c, 3, 3], &mut rng);
        let im = random(&[c, 3, 3], &mut rng);
        let ptensors: Vec<Tensor> = match variant {
            Variant::Fusion1 => vec![random(&[c, 2 * c, 1, 1], &mut rng), random(&[c], &mut rng)],
            _ => vec![
                random(&[c / 2, c, 1, 1], &mut rng),
                random(&[c / 2], &mut rng),
                random(&[c / 2, c, 1, 1], &mut rng),
                random(&[c / 2], &mut rng),
            ],
        };
        let (y, ctx) = fusion_combine(&bx, &im, &fusion_params_of(variant, &ptensors))?;
        let g = random(y.dims(), &mut rng);
        let grads = ctx.backward(&fusion_params_of(variant, &ptensors), &g)?;
        let l = |b: &Tensor, i: &Tensor, p: &[Tensor]| {
            dot(
                &fusion_combine(b, i, &fusion_params_of(variant, p))
                    .unwrap()
                    .0,
                &g,
            )
        };
        acc.add(probe(&bx, &grads.box_feat, &mut rng, |v| {
            l(v, &im, &ptensors)
        }));
        acc.add(probe(&im, &grads.img_feat, &mut rng, |v| {
            l(&bx, v, &ptensors)
        }));
        for k in 0..ptensors.len() {
            acc.add(probe(&ptensors[k], &grads.params[k], &mut rng, |v| {
                let mut p = ptensors.clone();
                p[k] = v.clone();
                l(&bx, &im, &p)
            }));
        }
    }
    Ok(acc.done())
}

pub fn check_weighted_bce(seeds: &[u64]) -> Result<CheckResult> {
    let mut acc = Acc::new("weighted_bce");
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 6;
        let w = LossWeights::new(
            (0..c).map(|_| rng.random_range(0.5..10.0)).collect(),
            (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        )?;
        let y = Tensor::from_vec((0..c).map(|_| rng.random_range(0..2) as f64).collect())?;
        let p = Tensor::from_vec((0..c).map(|_| rng.random_range(0.05..0.95)).collect())?;
        let z = random(&[c], &mut rng).scale(3.0)?;
        let gp = weighted_bce(&p, &y, &w)?.grad;
        acc.add(probe(&p, &gp, &mut rng, |v| {
            weighted_bce(v, &y, &w).unwrap().loss
        }));
        let gz = weighted_bce_with_logits(&z, &y, &w)?.grad;
        acc.add(probe(&z, &gz, &mut rng, |v| {
            weighted_bce_with_logits(v, &y, &w).unwrap().loss
        }));
    }
    Ok(acc.done())
}

pub fn check_softmax_ce(seeds: &[u64]) -> Result<CheckResult> {
    let mut acc = Acc::new("softmax_ce");
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random(&[5], &mut rng).scale(3.0)?;
        let label = rng.random_range(0..5);
        let g = softmax_ce(&z, label)?.grad;
        acc.add(probe(&z, &g, &mut rng, |v| {
            softmax_ce(v, label).unwrap().loss
        }));
    }
    Ok(acc.done())
}

pub fn check_mil_loss(seeds: &[u64]) -> Result<CheckResult> {
    let mut acc = Acc::new("mil_max+weighted_bce");
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (3, 4);
        let scores = random(&[n, c], &mut rng).scale(2.0)?;
        let y = Tensor::from_vec((0..c).map(|_| rng.random_range(0..2) as f64).collect())?;
        let w = LossWeights::default_for(c);
        let boxes = vec![Roi::full(1, 1); n];
        let loss = |s: &Tensor| {
            let inst = InstanceScores {
                scores: s.clone(),
                boxes: boxes.clone(),
            };
            let agg = mil_max_aggregate(&inst).unwrap();
            weighted_bce_with_logits(&agg.image_scores, &y, &w).unwrap()
        };
        let inst = InstanceScores {
            scores: scores.clone(),
            boxes: boxes.clone(),
        };
        let agg = mil_max_aggregate(&inst)?;
        let g = agg.backward(&loss(&scores).grad)?;
        acc.add(probe(&scores, &g, &mut rng, |v| loss(v).loss));
    }
    Ok(acc.done())
}

/// Small two-person image for the end-to-end check.
fn toy_scene(rng: &mut ChaCha8Rng) -> (Tensor, Vec<Roi>) {
    let img = Tensor::new(
        vec![3, 16, 16],
        (0..3 * 256).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .expect("finite");
    (
        img,
        vec![
            Roi::new(1.0, 2.0, 9.0, 14.0),
            Roi::new(7.0, 0.0, 16.0, 11.0),
        ],
    )
}

/// Total MIL weighted loss of `net` against every parameter.
pub fn check_network(seeds: &[u64], variant: Variant) -> Result<CheckResult> {
    let mut acc = Acc::new(&format!("network/{variant:?}"));
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            seed,
            head_widths: vec![16],
            ..ModelConfig::new(variant, 4)
        };
        let mut net = Network::build(cfg)?;
        // nonzero biases so relus are not sitting at exactly zero
        let names: Vec<String> = net.params().keys().cloned().collect();
        for name in names.iter().filter(|n| n.ends_with(".bias")) {
            let p = net.param_mut(name)?;
            for v in p.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let (img, boxes) = toy_scene(&mut rng);
        let y = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0])?;
        let w = LossWeights::default_for(4);
        let total = |net: &Network| -> f64 {
            let inst = net.forward_instances(&img, &boxes).unwrap();
            let agg = mil_max_aggregate(&inst).unwrap();
            weighted_bce_with_logits(&agg.image_scores, &y, &w)
                .unwrap()
                .loss
        };
        let (out, cache) = net.forward_cached(&img, &boxes)?;
        let agg = mil_max_aggregate(&out.scores)?;
        let lg = weighted_bce_with_logits(&agg.image_scores, &y, &w)?;
        let grads = net.backward(cache, &agg.backward(&lg.grad)?)?;
        for name in &names {
            let p = net.param(name)?.clone();
            let g = grads
                .get(name)
                .expect("gradient for every parameter")
                .clone();
            let mut probe_net = net.clone();
            acc.add(probe(&p, &g, &mut rng, |v| {
                *probe_net.param_mut(name).unwrap() = v.clone();
                total(&probe_net)
            }));
        }
    }
    Ok(acc.done())
}

/// Runs every check on the given seeds.
pub fn run_all(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_conv2d(seeds)?,
        check_fully_connected(seeds)?,
        check_relu(seeds)?,
        check_sigmoid(seeds)?,
        check_roi_max_pool(seeds)?,
        check_fusion(seeds, Variant::Fusion1)?,
        check_fusion(seeds, Variant::Fusion2)?,
        check_weighted_bce(seeds)?,
        check_softmax_ce(seeds)?,
        check_mil_loss(seeds)?,
        check_network(seeds, Variant::Fusion2)?,
    ])
}
