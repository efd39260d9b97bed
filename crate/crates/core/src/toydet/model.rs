//! A small two-level anchor-free detector.
//!
//! Backbone: four 3x3 conv stages (strides 2, 4, 4, 8) with ReLU. 1x1
//! laterals project the stride-4 and stride-8 maps to a common width; a head
//! shared across levels runs one 3x3 conv tower followed by a class-logit conv
//! and a box conv. Boxes are regressed in center/size form relative to the
//! location: `cx = px + tx * s`, `w = exp(tw) * s`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{add_into, relu, relu_backward, Conv2d, ConvCache, Real, Tensor};
use crate::annotations::BoundingBox;
use crate::tls::SampleKey;

/// Focal-loss prior: initial foreground probability of every class logit.
pub const PRIOR_PROB: f64 = 0.01;
/// `tw`, `th` are clamped to this magnitude before exponentiation.
pub const MAX_LOG_SCALE: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub num_classes: usize,
    /// Output widths of the four backbone stages.
    pub widths: [usize; 4],
    pub head_channels: usize,
}

impl Architecture {
    /// Strides of the two feature levels.
    pub const STRIDES: [u32; 2] = [4, 8];
}

/// Grid geometry of one feature level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLevel {
    pub stride: u32,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GridLevel {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image-space center of grid cell `(gy, gx)`.
    pub fn center(&self, gy: usize, gx: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((gx as f64 + 0.5) * s, (gy as f64 + 0.5) * s)
    }
}

/// Feature-level grids for an input of the given size.
pub fn grid_levels(height: usize, width: usize) -> Vec<GridLevel> {
    // Every stride-2 stage maps n -> (n - 1) / 2 + 1 with padding 1.
    let down = |n: usize| (n - 1) / 2 + 1;
    let (h4, w4) = (down(down(height)), down(down(width)));
    let (h8, w8) = (down(h4), down(w4));
    vec![
        GridLevel {
            stride: Architecture::STRIDES[0],
            grid_h: h4,
            grid_w: w4,
        },
        GridLevel {
            stride: Architecture::STRIDES[1],
            grid_h: h8,
            grid_w: w8,
        },
    ]
}

/// Decodes raw box outputs at a location into an image-space box.
pub fn decode_box(level: &GridLevel, gy: usize, gx: usize, t: [f64; 4]) -> BoundingBox {
    let (px, py) = level.center(gy, gx);
    let s = level.stride as f64;
    BoundingBox::new(
        px + t[0] * s,
        py + t[1] * s,
        t[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp() * s,
        t[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp() * s,
    )
}

/// Raw head outputs of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput<T> {
    pub grid: GridLevel,
    /// `C x H x W` class logits.
    pub cls: Tensor<T>,
    /// `4 x H x W` box parameters `(tx, ty, tw, th)`.
    pub reg: Tensor<T>,
}

impl<T: Real> LevelOutput<T> {
    pub fn logit(&self, class: usize, idx: usize) -> f64 {
        self.cls.data[class * self.grid.len() + idx].to_f64()
    }

    pub fn box_params(&self, idx: usize) -> [f64; 4] {
        let n = self.grid.len();
        std::array::from_fn(|d| self.reg.data[d * n + idx].to_f64())
    }

    pub fn decoded(&self, idx: usize) -> BoundingBox {
        let (gy, gx) = (idx / self.grid.grid_w, idx % self.grid.grid_w);
        decode_box(&self.grid, gy, gx, self.box_params(idx))
    }

    pub fn key(&self, level: usize, idx: usize) -> SampleKey {
        SampleKey::new(
            level as u32,
            (idx / self.grid.grid_w) as u32,
            (idx % self.grid.grid_w) as u32,
        )
    }
}

/// Gradients with respect to every level's head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads<T> {
    pub cls: Vec<Tensor<T>>,
    pub reg: Vec<Tensor<T>>,
}

struct LevelCache<T> {
    lateral: ConvCache<T>,
    tower: ConvCache<T>,
    hidden: Tensor<T>,
    cls: ConvCache<T>,
    reg: ConvCache<T>,
}

/// Everything the backward pass needs from one forward call.
pub struct ForwardCache<T> {
    stages: Vec<(ConvCache<T>, Tensor<T>)>,
    levels: Vec<LevelCache<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector<T> {
    pub arch: Architecture,
    stages: Vec<Conv2d<T>>,
    laterals: Vec<Conv2d<T>>,
    tower: Conv2d<T>,
    cls_out: Conv2d<T>,
    reg_out: Conv2d<T>,
}

const STAGE_STRIDES: [usize; 4] = [2, 2, 1, 2];

impl<T: Real> Detector<T> {
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let mut in_c = 1;
        let mut stages = Vec::with_capacity(4);
        for (&w, &s) in arch.widths.iter().zip(&STAGE_STRIDES) {
            stages.push(Conv2d::new(in_c, w, 3, s, rng));
            in_c = w;
        }
        let hc = arch.head_channels;
        let laterals = vec![
            Conv2d::new(arch.widths[2], hc, 1, 1, rng),
            Conv2d::new(arch.widths[3], hc, 1, 1, rng),
        ];
        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        Self {
            arch,
            stages,
            laterals,
            tower: Conv2d::new(hc, hc, 3, 1, rng),
            cls_out: Conv2d::new_output(hc, arch.num_classes, 3, 0.01, prior_bias, rng),
            reg_out: Conv2d::new_output(hc, 4, 3, 0.01, 0.0, rng),
        }
    }

    /// All layers in a fixed order.
    pub fn layers(&self) -> Vec<&Conv2d<T>> {
        let mut v: Vec<&Conv2d<T>> = self.stages.iter().chain(&self.laterals).collect();
        v.extend([&self.tower, &self.cls_out, &self.reg_out]);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v: Vec<&mut Conv2d<T>> = self.stages.iter_mut().chain(self.laterals.iter_mut()).collect();
        v.extend([&mut self.tower, &mut self.cls_out, &mut self.reg_out]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    /// A detector-shaped gradient buffer filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            stages: self.stages.iter().map(Conv2d::zeros_like).collect(),
            laterals: self.laterals.iter().map(Conv2d::zeros_like).collect(),
            tower: self.tower.zeros_like(),
            cls_out: self.cls_out.zeros_like(),
            reg_out: self.reg_out.zeros_like(),
        }
    }

    /// Copies the weights into another precision.
    pub fn cast<U: Real>(&self) -> Detector<U> {
        let cast = |c: &Conv2d<T>| Conv2d {
            in_c: c.in_c,
            out_c: c.out_c,
            kernel: c.kernel,
            stride: c.stride,
            weight: c.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            bias: c.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        };
        Detector {
            arch: self.arch,
            stages: self.stages.iter().map(cast).collect(),
            laterals: self.laterals.iter().map(cast).collect(),
            tower: cast(&self.tower),
            cls_out: cast(&self.cls_out),
            reg_out: cast(&self.reg_out),
        }
    }

    /// Runs the network on a `1 x H x W` input.
    pub fn forward(&self, input: &Tensor<T>) -> (Vec<LevelOutput<T>>, ForwardCache<T>) {
        let mut stages = Vec::with_capacity(4);
        let mut x = input.clone();
        for conv in &self.stages {
            let (mut y, cache) = conv.forward(&x);
            relu(&mut y);
            stages.push((cache, y.clone()));
            x = y;
        }
        let grids = grid_levels(input.h, input.w);
        let mut outputs = Vec::with_capacity(2);
        let mut levels = Vec::with_capacity(2);
        for (l, lateral) in self.laterals.iter().enumerate() {
            let feat = &stages[2 + l].1;
            let (f, lateral_cache) = lateral.forward(feat);
            let (mut hidden, tower_cache) = self.tower.forward(&f);
            relu(&mut hidden);
            let (cls, cls_cache) = self.cls_out.forward(&hidden);
            let (reg, reg_cache) = self.reg_out.forward(&hidden);
            debug_assert_eq!((cls.h, cls.w), (grids[l].grid_h, grids[l].grid_w));
            outputs.push(LevelOutput {
                grid: grids[l],
                cls,
                reg,
            });
            levels.push(LevelCache {
                lateral: lateral_cache,
                tower: tower_cache,
                hidden,
                cls: cls_cache,
                reg: reg_cache,
            });
        }
        (outputs, ForwardCache { stages, levels })
    }

    /// Accumulates parameter gradients into `grad`.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: &HeadGrads<T>, grad: &mut Detector<T>) {
        let mut dfeat: Vec<Tensor<T>> = Vec::with_capacity(2);
        for (l, lc) in cache.levels.iter().enumerate() {
            let mut dh = self.cls_out.backward(&lc.cls, &dout.cls[l], &mut grad.cls_out);
            add_into(
                &mut dh,
                &self.reg_out.backward(&lc.reg, &dout.reg[l], &mut grad.reg_out),
            );
            relu_backward(&lc.hidden, &mut dh);
            let df = self.tower.backward(&lc.tower, &dh, &mut grad.tower);
            dfeat.push(self.laterals[l].backward(&lc.lateral, &df, &mut grad.laterals[l]));
        }
        let mut d4 = dfeat.pop().expect("two levels");
        let mut d3 = dfeat.pop().expect("two levels");
        relu_backward(&cache.stages[3].1, &mut d4);
        add_into(
            &mut d3,
            &self.stages[3].backward(&cache.stages[3].0, &d4, &mut grad.stages[3]),
        );
        let mut d = d3;
        for i in (0..3).rev() {
            relu_backward(&cache.stages[i].1, &mut d);
            d = self.stages[i].backward(&cache.stages[i].0, &d, &mut grad.stages[i]);
        }
    }
}

/// Normalizes a grayscale image into a network input.
pub fn image_tensor<T: Real>(pixels: &[f32], height: usize, width: usize) -> Tensor<T> {
    Tensor::from_vec(
        1,
        height,
        width,
        pixels.iter().map(|&p| T::from_f64((p as f64 - 0.5) * 4.0)).collect(),
    )
}
