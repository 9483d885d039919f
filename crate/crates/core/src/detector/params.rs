/// Dense affine map stored row-major as `out x (inp + 1)`, bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    out: usize,
    inp: usize,
    weights: Vec<f64>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            out,
            inp,
            weights: vec![0.0; out * (inp + 1)],
        }
    }

    pub fn from_weights(out: usize, inp: usize, weights: Vec<f64>) -> Option<Self> {
        (weights.len() == out * (inp + 1)).then_some(Self { out, inp, weights })
    }

    pub fn out_dim(&self) -> usize {
        self.out
    }

    pub fn in_dim(&self) -> usize {
        self.inp
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * (self.inp + 1)..(o + 1) * (self.inp + 1)]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        (0..self.out)
            .map(|o| {
                let row = self.row(o);
                row[..self.inp]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + row[self.inp]
            })
            .collect()
    }

    /// Accumulates `d_out x [x; 1]^T` into this block (used for gradients).
    pub fn accumulate_outer(&mut self, x: &[f64], d_out: &[f64]) {
        let stride = self.inp + 1;
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut self.weights[o * stride..(o + 1) * stride];
            for (w, v) in row[..self.inp].iter_mut().zip(x) {
                *w += g * v;
            }
            row[self.inp] += g;
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Linear) {
        debug_assert_eq!(self.weights.len(), other.weights.len());
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            *w += alpha * g;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }
}

/// Parameters of the two-stage model.
///
/// `rpn_obj` and `head_obj` emit `(object, background)` logits; the two
/// regression blocks emit `(tx, ty, tw, th)`; `head_cls` emits one score per
/// leaf category of the bound taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub rpn_obj: Linear,
    pub rpn_reg: Linear,
    pub head_obj: Linear,
    pub head_reg: Linear,
    pub head_cls: Linear,
}

pub const BLOCK_NAMES: [&str; 5] = ["rpn_obj", "rpn_reg", "head_obj", "head_reg", "head_cls"];

impl ModelParams {
    pub fn zeros(feature_dim: usize, num_leaves: usize) -> Self {
        Self {
            rpn_obj: Linear::zeros(2, feature_dim),
            rpn_reg: Linear::zeros(4, feature_dim),
            head_obj: Linear::zeros(2, feature_dim),
            head_reg: Linear::zeros(4, feature_dim),
            head_cls: Linear::zeros(num_leaves, feature_dim),
        }
    }

    /// Same shapes, all zero.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim(), self.num_classes())
    }

    pub fn feature_dim(&self) -> usize {
        self.rpn_obj.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head_cls.out_dim()
    }

    pub fn blocks(&self) -> [&Linear; 5] {
        [
            &self.rpn_obj,
            &self.rpn_reg,
            &self.head_obj,
            &self.head_reg,
            &self.head_cls,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Linear; 5] {
        [
            &mut self.rpn_obj,
            &mut self.rpn_reg,
            &mut self.head_obj,
            &mut self.head_reg,
            &mut self.head_cls,
        ]
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_scaled(alpha, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.weights().iter().all(|w| w.is_finite()))
    }
}
