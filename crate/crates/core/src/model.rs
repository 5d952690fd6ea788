//! Boundary-locating crop regressor.
//!
//! The network has three stages:
//!
//! 1. a stack of stride-2 3×3 convolutions producing a `C×H×W` feature map,
//! 2. a boundary feature encoder with two multi-head spatial attention paths.
//!    Each head is a 1×1 convolution to a single-channel map, normalized by a
//!    softmax along Y (horizontal path) or X (vertical path), which reweights
//!    the feature map. The `m` reweighted maps are concatenated, reduced back to
//!    `C` channels by a 1×1 convolution and summed along the normalized axis,
//!    giving `h ∈ C×W` and `v ∈ C×H`. Their halves are the left/right and
//!    top/bottom boundary features,
//! 3. four regression heads: mean-pool over the spatial extent, then a
//!    three-layer perceptron with a sigmoid output in `(0, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// The four crop boundaries, in prediction column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Left,
    Right,
    Top,
    Bottom,
}

impl Boundary {
    pub const ALL: [Boundary; 4] = [Boundary::Left, Boundary::Right, Boundary::Top, Boundary::Bottom];

    pub fn tag(self) -> &'static str {
        match self {
            Boundary::Left => "l",
            Boundary::Right => "r",
            Boundary::Top => "t",
            Boundary::Bottom => "b",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Boundary::Left => "left",
            Boundary::Right => "right",
            Boundary::Top => "top",
            Boundary::Bottom => "bottom",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input image side length `S`.
    pub image_size: usize,
    pub in_channels: usize,
    /// Widths of the backbone stages before the last; the last stage emits `channels`.
    pub backbone_widths: Vec<usize>,
    /// Channel count `C` of the fused feature map.
    pub channels: usize,
    /// Feature map height `H`.
    pub height: usize,
    /// Feature map width `W`.
    pub width: usize,
    /// Attention heads `m` per path.
    pub heads: usize,
    /// Hidden widths of the regression heads; empty means `[C/2, C/4]`.
    pub head_hidden: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            backbone_widths: vec![8, 16],
            channels: 32,
            height: 8,
            width: 8,
            heads: 6,
            head_hidden: Vec::new(),
        }
    }
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.backbone_widths.len() + 1
    }

    pub fn hidden_widths(&self) -> [usize; 2] {
        match self.head_hidden.as_slice() {
            [a, b] => [*a, *b],
            _ => [(self.channels / 2).max(1), (self.channels / 4).max(1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.heads == 0 || self.in_channels == 0 {
            return err(format!("C, H, W, m and input channels must be positive: {self:?}"));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return err(format!("H ({}) and W ({}) must be even", self.height, self.width));
        }
        if self.backbone_widths.contains(&0) {
            return err("backbone widths must be positive".into());
        }
        if !matches!(self.head_hidden.len(), 0 | 2) || self.head_hidden.contains(&0) {
            return err(format!("head_hidden must hold two positive widths, got {:?}", self.head_hidden));
        }
        let stride = 1usize << self.stages();
        if self.image_size != stride * self.height || self.image_size != stride * self.width {
            return err(format!(
                "image size {} must equal {} stride-2 stages × feature size {}×{}",
                self.image_size,
                self.stages(),
                self.height,
                self.width
            ));
        }
        Ok(())
    }
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Record every entry on the tape; entries for which `trainable` is false
    /// become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(n, t)| tape.leaf(t.clone(), trainable(n)))
            .collect()
    }
}

/// True for regression head parameters (the only ones re-trained in the
/// second stage of decoupled re-training).
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

#[derive(Clone, Debug)]
struct Layout {
    backbone: Vec<(usize, usize)>,
    h_attention: usize,
    h_reduce: usize,
    v_attention: usize,
    v_reduce: usize,
    heads: [[(usize, usize); 3]; 4],
}

/// Boundary features on a tape: `x_l, x_r` are `B×C×(W/2)`, `x_t, x_b` are `B×C×(H/2)`.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryFeatures {
    pub left: Var,
    pub right: Var,
    pub top: Var,
    pub bottom: Var,
}

impl BoundaryFeatures {
    pub fn get(&self, d: Boundary) -> Var {
        match d {
            Boundary::Left => self.left,
            Boundary::Right => self.right,
            Boundary::Top => self.top,
            Boundary::Bottom => self.bottom,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `B×4` predictions ordered left, right, top, bottom.
    pub pred: Var,
    /// Head-pooled `B×C` composition features per boundary.
    pub pooled: [Var; 4],
    pub features: BoundaryFeatures,
}

#[derive(Clone, Debug)]
pub struct Cblnet {
    config: EncoderConfig,
    layout: Layout,
    shapes: Vec<(String, Vec<usize>)>,
}

impl Cblnet {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            shapes.push((name, shape));
            shapes.len() - 1
        };
        let c = config.channels;
        let mut backbone = Vec::new();
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.backbone_widths.iter().chain(std::iter::once(&c)).enumerate() {
            let w = add(format!("backbone.{i}.weight"), vec![c_out, c_in, 3, 3]);
            let b = add(format!("backbone.{i}.bias"), vec![1, c_out, 1, 1]);
            backbone.push((w, b));
            c_in = c_out;
        }
        let m = config.heads;
        let h_attention = add("encoder.horizontal.attention".into(), vec![m, c, 1, 1]);
        let h_reduce = add("encoder.horizontal.reduce".into(), vec![c, m * c, 1, 1]);
        let v_attention = add("encoder.vertical.attention".into(), vec![m, c, 1, 1]);
        let v_reduce = add("encoder.vertical.reduce".into(), vec![c, m * c, 1, 1]);
        let [h1, h2] = config.hidden_widths();
        let widths = [c, h1, h2, 1];
        let mut heads = [[(0, 0); 3]; 4];
        for d in Boundary::ALL {
            for layer in 0..3 {
                let w = add(format!("head.{}.fc{layer}.weight", d.name()), vec![widths[layer], widths[layer + 1]]);
                let b = add(format!("head.{}.fc{layer}.bias", d.name()), vec![1, widths[layer + 1]]);
                heads[d.index()][layer] = (w, b);
            }
        }
        let layout = Layout {
            backbone,
            h_attention,
            h_reduce,
            v_attention,
            v_reduce,
            heads,
        };
        Ok(Self { config, layout, shapes })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    /// Seeded uniform fan-in initialization; biases start at zero.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relu_fed = |name: &str| name.starts_with("backbone.") || name.contains(".fc0.") || name.contains(".fc1.");
        let entries = self
            .shapes
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                    let gain = if relu_fed(name) { 6.0 } else { 3.0 };
                    let bound = (gain / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                (name.clone(), Tensor::new(shape.clone(), data).expect("layout shape"))
            })
            .collect();
        ModelParams { entries }
    }

    /// Check that `params` carries exactly this model's names and shapes.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in self.shapes.iter().zip(&params.entries) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::Config(format!(
                    "parameter {pn} {:?} does not match expected {name} {shape:?}",
                    pt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Stack images (each `in_channels×S×S`) into a `B×in_channels×S×S` constant.
    pub fn batch_images(&self, tape: &mut Tape, images: &[&Tensor]) -> Result<Var> {
        let s = self.config.image_size;
        let expect = [self.config.in_channels, s, s];
        let mut data = Vec::with_capacity(images.len() * expect.iter().product::<usize>());
        for img in images {
            if img.shape() != expect {
                return Err(Error::Config(format!("image shape {:?}, expected {expect:?}", img.shape())));
            }
            data.extend_from_slice(img.data());
        }
        let t = Tensor::new(vec![images.len(), expect[0], s, s], data)?;
        Ok(tape.constant(t))
    }

    /// `B×in×S×S → B×C×H×W` through stride-2 3×3 conv + bias + relu stages.
    pub fn backbone_forward(&self, tape: &mut Tape, params: &[Var], images: Var) -> Result<Var> {
        let mut x = images;
        for &(w, b) in &self.layout.backbone {
            let y = tape.conv2d(x, params[w], 2, 1)?;
            let y = tape.add(y, params[b])?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    fn attention_path(&self, tape: &mut Tape, params: &[Var], fmap: Var, attention: usize, reduce: usize, axis: usize) -> Result<(Var, Var)> {
        let m = self.config.heads;
        let logits = tape.conv2d(fmap, params[attention], 1, 0)?;
        let weights = tape.softmax_axis(logits, axis)?;
        let maps = if m == 1 { vec![weights] } else { tape.split(weights, 1, &vec![1; m])? };
        let mut weighted = Vec::with_capacity(m);
        for a in maps {
            weighted.push(tape.mul(a, fmap)?);
        }
        let stacked = if m == 1 { weighted[0] } else { tape.concat(&weighted, 1)? };
        let reduced = tape.conv2d(stacked, params[reduce], 1, 0)?;
        let summed = tape.sum_axis(reduced, axis)?;
        let half = tape.shape(summed)[2] / 2;
        let halves = tape.split(summed, 2, &[half, half])?;
        Ok((halves[0], halves[1]))
    }

    /// `B×C×H×W` feature map to the four boundary features.
    pub fn boundary_encode(&self, tape: &mut Tape, params: &[Var], fmap: Var) -> Result<BoundaryFeatures> {
        let l = &self.layout;
        // horizontal path: normalize and sum along Y (axis 2), leaving C×W
        let (left, right) = self.attention_path(tape, params, fmap, l.h_attention, l.h_reduce, 2)?;
        // vertical path: along X (axis 3), leaving C×H
        let (top, bottom) = self.attention_path(tape, params, fmap, l.v_attention, l.v_reduce, 3)?;
        Ok(BoundaryFeatures { left, right, top, bottom })
    }

    /// Mean-pool a `B×C×L` boundary feature to `B×C`.
    pub fn pool(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        Ok(tape.mean_axis(feature, 2)?)
    }

    /// Three-layer head on pooled `B×C` features, giving `B×1` in `(0, 1)`.
    pub fn head_forward(&self, tape: &mut Tape, params: &[Var], d: Boundary, pooled: Var) -> Result<Var> {
        let mut x = pooled;
        for (layer, &(w, b)) in self.layout.heads[d.index()].iter().enumerate() {
            let y = tape.matmul(x, params[w])?;
            let y = tape.add(y, params[b])?;
            x = if layer < 2 { tape.relu(y) } else { tape.sigmoid(y) };
        }
        Ok(x)
    }

    /// Pool a boundary feature and regress its normalized location.
    pub fn regress_boundary(&self, tape: &mut Tape, params: &[Var], d: Boundary, feature: Var) -> Result<Var> {
        let pooled = self.pool(tape, feature)?;
        self.head_forward(tape, params, d, pooled)
    }

    /// Run all four heads on pooled features and stack into `B×4`.
    pub fn heads_forward(&self, tape: &mut Tape, params: &[Var], pooled: &[Var; 4]) -> Result<Var> {
        let mut cols = Vec::with_capacity(4);
        for d in Boundary::ALL {
            cols.push(self.head_forward(tape, params, d, pooled[d.index()])?);
        }
        Ok(tape.concat(&cols, 1)?)
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], images: Var) -> Result<ModelOutput> {
        let fmap = self.backbone_forward(tape, params, images)?;
        let features = self.boundary_encode(tape, params, fmap)?;
        let mut pooled = [features.left; 4];
        for d in Boundary::ALL {
            pooled[d.index()] = self.pool(tape, features.get(d))?;
        }
        let pred = self.heads_forward(tape, params, &pooled)?;
        Ok(ModelOutput { pred, pooled, features })
    }

    /// Predictions for a set of images without recording gradients.
    pub fn predict(&self, params: &ModelParams, images: &[&Tensor]) -> Result<Vec<[f64; 4]>> {
        Ok(self.predict_with_features(params, images)?.0)
    }

    /// Predictions plus the pooled per-boundary features (`B` rows of `C` each).
    #[allow(clippy::type_complexity)]
    pub fn predict_with_features(&self, params: &ModelParams, images: &[&Tensor]) -> Result<(Vec<[f64; 4]>, [Vec<Vec<f64>>; 4])> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, |_| false);
        let x = self.batch_images(&mut tape, images)?;
        let out = self.forward(&mut tape, &vars, x)?;
        let preds = tape
            .value(out.pred)
            .data()
            .chunks(4)
            .map(|r| [r[0], r[1], r[2], r[3]])
            .collect();
        let c = self.config.channels;
        let feats = out
            .pooled
            .map(|p| tape.value(p).data().chunks(c).map(<[f64]>::to_vec).collect::<Vec<_>>());
        Ok((preds, feats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, DEFAULT_EPS};

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            in_channels: 1,
            backbone_widths: vec![3],
            channels: 4,
            height: 2,
            width: 2,
            heads: 2,
            head_hidden: vec![3, 2],
        }
    }

    fn random_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let odd = EncoderConfig { height: 3, width: 3, image_size: 24, ..EncoderConfig::default() };
        assert!(odd.validate().is_err());
        let bad_size = EncoderConfig { image_size: 60, ..EncoderConfig::default() };
        assert!(Cblnet::new(bad_size).is_err());
    }

    #[test]
    fn backbone_output_shape_and_zero_image() {
        let net = Cblnet::new(EncoderConfig::default()).unwrap();
        let params = net.init_params(1);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, |_| false);
        let img = Tensor::zeros(&[3, 64, 64]);
        let x = net.batch_images(&mut tape, &[&img]).unwrap();
        let f = net.backbone_forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.shape(f), &[1, 32, 8, 8]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_contract_and_feature_shapes() {
        let cfg = EncoderConfig { channels: 8, heads: 2, ..EncoderConfig::default() };
        let net = Cblnet::new(cfg).unwrap();
        let params = net.init_params(2);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, |_| false);
        let img = random_image(&[3, 64, 64], 3);
        let x = net.batch_images(&mut tape, &[&img, &img, &img]).unwrap();
        let f = net.backbone_forward(&mut tape, &vars, x).unwrap();
        let feats = net.boundary_encode(&mut tape, &vars, f).unwrap();
        assert_eq!(tape.shape(feats.left), &[3, 8, 4]);
        assert_eq!(tape.shape(feats.bottom), &[3, 8, 4]);

        // x_l is columns 0..4 of h, x_r columns 4..8
        let l = &net.layout;
        let logits = tape.conv2d(f, vars[l.h_attention], 1, 0).unwrap();
        let w = tape.softmax_axis(logits, 2).unwrap();
        let maps = tape.split(w, 1, &[1, 1]).unwrap();
        let a0 = tape.mul(maps[0], f).unwrap();
        let a1 = tape.mul(maps[1], f).unwrap();
        let cat = tape.concat(&[a0, a1], 1).unwrap();
        let red = tape.conv2d(cat, vars[l.h_reduce], 1, 0).unwrap();
        let h = tape.sum_axis(red, 2).unwrap();
        let hv = tape.value(h);
        let xl = tape.value(feats.left);
        let xr = tape.value(feats.right);
        for b in 0..3 {
            for c in 0..8 {
                for col in 0..4 {
                    assert_eq!(xl.at(&[b, c, col]), hv.at(&[b, c, col]));
                    assert_eq!(xr.at(&[b, c, col]), hv.at(&[b, c, col + 4]));
                }
            }
        }
    }

    #[test]
    fn zero_attention_gives_mean_over_rows() {
        // C=2, H=W=2, m=1; F given directly
        let cfg = EncoderConfig {
            image_size: 4,
            in_channels: 1,
            backbone_widths: vec![],
            channels: 2,
            height: 2,
            width: 2,
            heads: 1,
            head_hidden: vec![1, 1],
        };
        let net = Cblnet::new(cfg).unwrap();
        let mut params = net.init_params(5);
        for (name, t) in params.entries.iter_mut() {
            if name.ends_with("attention") {
                t.data_mut().fill(0.0);
            }
        }
        let reduce_h = params.get("encoder.horizontal.reduce").unwrap().data().to_vec();
        let f_data = [1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, -3.0];
        let f_t = Tensor::new(vec![1, 2, 2, 2], f_data.to_vec()).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, |_| false);
        let f = tape.constant(f_t.clone());
        let feats = net.boundary_encode(&mut tape, &vars, f).unwrap();
        // h[c, x] = (1/H) Σ_y Σ_c' R[c, c'] F[c', y, x]
        for c in 0..2 {
            for x in 0..2 {
                let mut expect = 0.0;
                for y in 0..2 {
                    for cp in 0..2 {
                        expect += reduce_h[c * 2 + cp] * f_t.at(&[0, cp, y, x]);
                    }
                }
                expect /= 2.0;
                let got = if x == 0 {
                    tape.value(feats.left).at(&[0, c, 0])
                } else {
                    tape.value(feats.right).at(&[0, c, 0])
                };
                assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let net = Cblnet::new(toy_config()).unwrap();
        let mut params = net.init_params(1);
        for (name, t) in params.entries.iter_mut() {
            if is_head_param(name) {
                t.data_mut().fill(0.0);
            }
        }
        let img = random_image(&[1, 8, 8], 1);
        let preds = net.predict(&params, &[&img]).unwrap();
        assert_eq!(preds[0], [0.5; 4]);
    }

    #[test]
    fn predictions_in_unit_interval_for_random_params() {
        let net = Cblnet::new(toy_config()).unwrap();
        let img = random_image(&[1, 8, 8], 9);
        for draw in 0..1000 {
            let params = jittered(&net, draw);
            let p = net.predict(&params, &[&img]).unwrap();
            assert!(p[0].iter().all(|&v| v > 0.0 && v < 1.0), "{p:?}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_permutation_equivariant() {
        let net = Cblnet::new(toy_config()).unwrap();
        let params = net.init_params(4);
        let imgs: Vec<Tensor> = (0..3).map(|i| random_image(&[1, 8, 8], 20 + i)).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let a = net.predict(&params, &refs).unwrap();
        let b = net.predict(&params, &refs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let perm = [2, 0, 1];
        let permuted: Vec<&Tensor> = perm.iter().map(|&i| &imgs[i]).collect();
        let c = net.predict(&params, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((c[k][j] - a[i][j]).abs() < 1e-15);
            }
        }
    }

    /// Initialized parameters with every entry (biases included) shifted by
    /// uniform noise, so no pre-activation sits exactly on a relu kink.
    fn jittered(net: &Cblnet, seed: u64) -> ModelParams {
        let mut params = net.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        for (_, t) in params.entries.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        params
    }

    fn params_as_tensors(p: &ModelParams) -> Vec<Tensor> {
        p.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let net = Cblnet::new(toy_config()).unwrap();
        let params = jittered(&net, 6);
        let img = random_image(&[1, 1, 8, 8], 7);
        let res = grad_check::<_, Error>(
            |t, v| {
                let x = t.constant(img.clone());
                let f = net.backbone_forward(t, v, x)?;
                let r = t.constant(random_image(t.shape(f), 8));
                let p = t.mul(f, r)?;
                Ok(t.sum(p))
            },
            &params_as_tensors(&params),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(res.max_rel_error < 1e-6, "{res:?}");
    }

    #[test]
    fn encoder_and_head_gradients_match_finite_differences() {
        let net = Cblnet::new(toy_config()).unwrap();
        let params = jittered(&net, 12);
        let fmap = random_image(&[2, 4, 2, 2], 13);
        let res = grad_check::<_, Error>(
            |t, v| {
                let f = t.constant(fmap.clone());
                let feats = net.boundary_encode(t, v, f)?;
                let mut total = None;
                for d in Boundary::ALL {
                    let r = t.constant(random_image(t.shape(feats.get(d)), 14 + d.index() as u64));
                    let p = t.mul(feats.get(d), r)?;
                    let s = t.sum(p);
                    let y = net.regress_boundary(t, v, d, feats.get(d))?;
                    let ys = t.sum(y);
                    let s = t.add(s, ys)?;
                    total = Some(match total {
                        None => s,
                        Some(acc) => t.add(acc, s)?,
                    });
                }
                Ok(total.unwrap())
            },
            &params_as_tensors(&params),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(res.max_rel_error < 1e-6, "{res:?}");
    }
}
