//! Training objectives: ℓ1 box regression, the contrastive composition
//! clustering terms (alignment and uniformity over dynamically mined pairs),
//! and the imbalanced-regression baselines (focal-R, inverse-frequency and
//! label-distribution-smoothing reweighting, SMOGN-style oversampling).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{shot_group, ShotGroup};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Positive-pair threshold on boundary distance.
    pub z_p: f64,
    /// Negative-pair threshold on boundary distance.
    pub z_n: f64,
    /// Exponent on the positive-pair feature distance.
    pub alpha: f64,
    /// Alignment margin.
    pub epsilon: f64,
    /// Uniformity temperature.
    pub t: f64,
    /// Weight of the alignment term.
    pub beta: f64,
    /// Weight of the uniformity term.
    pub gamma: f64,
    /// Focal-R error scale.
    pub mu: f64,
    /// Focal-R exponent.
    pub psi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            z_p: 0.05,
            z_n: 0.7,
            alpha: 1.0,
            epsilon: 0.5,
            t: 1.0,
            beta: 0.025,
            gamma: 0.025,
            mu: 2.0,
            psi: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.z_p
            && self.z_p < self.z_n
            && self.z_n <= 1.0
            && self.alpha > 0.0
            && self.epsilon >= 0.0
            && self.t > 0.0
            && self.beta >= 0.0
            && self.gamma >= 0.0
            && self.mu.is_finite()
            && self.psi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights violate 0 ≤ z_p < z_n ≤ 1, α, t > 0, ε, β, γ ≥ 0: {self:?}")))
        }
    }
}

/// Positive and negative pair masks for one boundary over a batch,
/// defined on unordered pairs `i < j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairMatrices {
    size: usize,
    positive: Vec<bool>,
    negative: Vec<bool>,
}

impl PairMatrices {
    pub fn size(&self) -> usize {
        self.size
    }

    /// `P[i][j]`; symmetric, false on the diagonal.
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        i != j && self.positive[i.min(j) * self.size + i.max(j)]
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        i != j && self.negative[i.min(j) * self.size + i.max(j)]
    }

    /// Positive pairs `(i, j)` with `i < j`, in row-major order.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        self.collect(&self.positive)
    }

    pub fn negative_pairs(&self) -> Vec<(usize, usize)> {
        self.collect(&self.negative)
    }

    fn collect(&self, mask: &[bool]) -> Vec<(usize, usize)> {
        let n = self.size;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| mask[i * n + j])
            .collect()
    }
}

/// Pairs whose normalized boundary locations differ by less than `z_p`
/// (positive) or more than `z_n` (negative).
pub fn pair_matrices(y: &[f64], weights: &LossWeights) -> PairMatrices {
    let n = y.len();
    let mut positive = vec![false; n * n];
    let mut negative = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let gap = (y[i] - y[j]).abs();
            positive[i * n + j] = gap < weights.z_p;
            negative[i * n + j] = gap > weights.z_n;
        }
    }
    PairMatrices { size: n, positive, negative }
}

/// Masks for all four boundaries from `B` target rows.
pub fn boundary_pairs(targets: &[[f64; 4]], weights: &LossWeights) -> [PairMatrices; 4] {
    std::array::from_fn(|d| {
        let y: Vec<f64> = targets.iter().map(|t| t[d]).collect();
        pair_matrices(&y, weights)
    })
}

/// Squared chord distances between the ℓ2-normalized rows of each pair.
fn pair_sq_distances(tape: &mut Tape, normalized: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (left, right): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let a = tape.index_rows(normalized, &left)?;
    let b = tape.index_rows(normalized, &right)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum_axis(sq, 1)?)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        None => term,
        Some(a) => tape.add(a, term)?,
    }))
}

/// `Σ_d mean_{P_ij = 1} max(‖x̄_i − x̄_j‖^α − ε, 0)` over `B×D` feature rows;
/// boundaries without positive pairs contribute 0.
pub fn alignment_loss(tape: &mut Tape, features: &[Var; 4], pairs: &[PairMatrices; 4], weights: &LossWeights) -> Result<Var> {
    let mut total = None;
    for (&x, p) in features.iter().zip(pairs) {
        let selected = p.positive_pairs();
        if selected.is_empty() {
            continue;
        }
        let normalized = tape.l2_normalize_rows(x)?;
        let sq = pair_sq_distances(tape, normalized, &selected)?;
        let dist = tape.pow(sq, weights.alpha / 2.0);
        let shifted = tape.add_scalar(dist, -weights.epsilon);
        let hinge = tape.relu(shifted);
        let term = tape.mean(hinge);
        total = accumulate(tape, total, term)?;
    }
    Ok(total.unwrap_or_else(|| zero(tape)))
}

/// `Σ_d mean_{N_ij = 1} exp(−t‖x̄_i − x̄_j‖²)`; boundaries without negative
/// pairs contribute 0.
pub fn uniformity_loss(tape: &mut Tape, features: &[Var; 4], pairs: &[PairMatrices; 4], weights: &LossWeights) -> Result<Var> {
    let mut total = None;
    for (&x, p) in features.iter().zip(pairs) {
        let selected = p.negative_pairs();
        if selected.is_empty() {
            continue;
        }
        let normalized = tape.l2_normalize_rows(x)?;
        let sq = pair_sq_distances(tape, normalized, &selected)?;
        let scaled = tape.scale(sq, -weights.t);
        let kernel = tape.exp(scaled);
        let term = tape.mean(kernel);
        total = accumulate(tape, total, term)?;
    }
    Ok(total.unwrap_or_else(|| zero(tape)))
}

/// Mean absolute error over all entries.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Mean of `w ⊙ |pred − target|` with constant per-entry weights.
pub fn weighted_l1_loss(tape: &mut Tape, pred: Var, target: Var, weights: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let weighted = tape.mul(abs, weights)?;
    Ok(tape.mean(weighted))
}

/// `mean(sigmoid(|μ·e|)^ψ · e)` over per-entry ℓ1 errors `e`.
pub fn focal_r_loss(tape: &mut Tape, errors: Var, weights: &LossWeights) -> Var {
    let abs = tape.abs(errors);
    let scaled = tape.scale(abs, weights.mu);
    let gate = tape.sigmoid(scaled);
    let gate = tape.pow(gate, weights.psi);
    let weighted = tape
        .mul(gate, errors)
        .expect("gate and errors share a shape");
    tape.mean(weighted)
}

/// Scalar loss components. `total = l1 + β·align + γ·uniform`.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l1: Var,
    pub align: Var,
    pub uniform: Var,
    pub total: Var,
}

impl LossBreakdown {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            l1: tape.value(self.l1).item(),
            align: tape.value(self.align).item(),
            uniform: tape.value(self.uniform).item(),
            total: tape.value(self.total).item(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l1: f64,
    pub align: f64,
    pub uniform: f64,
    pub total: f64,
}

/// Combine a regression term with the two clustering terms.
pub fn combine(tape: &mut Tape, l1: Var, align: Var, uniform: Var, weights: &LossWeights) -> Result<LossBreakdown> {
    let a = tape.scale(align, weights.beta);
    let u = tape.scale(uniform, weights.gamma);
    let partial = tape.add(l1, a)?;
    let total = tape.add(partial, u)?;
    Ok(LossBreakdown { l1, align, uniform, total })
}

/// ℓ1 regression plus weighted alignment and uniformity terms. Pair masks
/// come from the supervised targets of the batch.
pub fn total_loss(tape: &mut Tape, pred: Var, targets: &[[f64; 4]], features: &[Var; 4], weights: &LossWeights) -> Result<LossBreakdown> {
    let target = tape.constant(targets_tensor(targets)?);
    let l1 = l1_loss(tape, pred, target)?;
    let pairs = boundary_pairs(targets, weights);
    let (align, uniform) = if weights.beta == 0.0 && weights.gamma == 0.0 {
        (zero(tape), zero(tape))
    } else {
        (
            alignment_loss(tape, features, &pairs, weights)?,
            uniformity_loss(tape, features, &pairs, weights)?,
        )
    };
    combine(tape, l1, align, uniform, weights)
}

pub fn targets_tensor(targets: &[[f64; 4]]) -> Result<Tensor> {
    Ok(Tensor::new(vec![targets.len(), 4], targets.iter().flatten().copied().collect())?)
}

// ---- reweighting -------------------------------------------------------

/// Equal-width bin of a normalized target.
pub fn bin_index(y: f64, bins: usize) -> usize {
    ((y * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn histogram(y: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    for &v in y {
        counts[bin_index(v, bins)] += 1.0;
    }
    counts
}

/// Inverse counts normalized to mean 1 over occupied bins; empty bins take
/// the largest occupied weight.
fn weights_from_counts(counts: &[f64]) -> Vec<f64> {
    let inverse: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0.0).then(|| 1.0 / c)).collect();
    let occupied: Vec<f64> = inverse.iter().flatten().copied().collect();
    if occupied.is_empty() {
        return vec![1.0; counts.len()];
    }
    let mean = occupied.iter().sum::<f64>() / occupied.len() as f64;
    let max = occupied.iter().copied().fold(f64::MIN, f64::max) / mean;
    inverse.iter().map(|w| w.map_or(max, |w| w / mean)).collect()
}

/// Per-bin weights from a target histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct BinWeights {
    pub weights: Vec<f64>,
}

impl BinWeights {
    pub fn weight(&self, y: f64) -> f64 {
        self.weights[bin_index(y, self.weights.len())]
    }
}

/// Inverse-frequency weights over `bins` equal-width bins on `[0, 1]`.
pub fn inverse_frequency_weights(y_train: &[f64], bins: usize) -> BinWeights {
    BinWeights {
        weights: weights_from_counts(&histogram(y_train, bins)),
    }
}

/// Peak-normalized Gaussian window truncated at `floor(2σ)` bins.
pub fn lds_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).floor().max(0.0) as isize;
    (-radius..=radius)
        .map(|k| {
            if sigma > 0.0 {
                (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()
            } else {
                1.0
            }
        })
        .collect()
}

/// Histogram convolved with [`lds_kernel`], zero-padded at the ends.
pub fn lds_smoothed_counts(y_train: &[f64], bins: usize, sigma: f64) -> Vec<f64> {
    let counts = histogram(y_train, bins);
    let kernel = lds_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    (0..bins as isize)
        .map(|b| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(k, w)| {
                    let src = b + k as isize - radius;
                    (0..bins as isize).contains(&src).then(|| w * counts[src as usize])
                })
                .sum()
        })
        .collect()
}

/// Label-distribution-smoothed inverse weights.
pub fn lds_weights(y_train: &[f64], bins: usize, sigma: f64) -> BinWeights {
    BinWeights {
        weights: weights_from_counts(&lds_smoothed_counts(y_train, bins, sigma)),
    }
}

// ---- SMOGN ---------------------------------------------------------------

/// Standard deviation of the target noise added to synthetic samples.
pub const SMOGN_NOISE_STD: f64 = 0.05;
/// Absolute bound on that noise.
pub const SMOGN_NOISE_CLIP: f64 = 0.10;

pub fn smogn_noise(rng: &mut impl Rng) -> f64 {
    let normal = Normal::new(0.0, SMOGN_NOISE_STD).expect("valid std");
    normal.sample(rng).clamp(-SMOGN_NOISE_CLIP, SMOGN_NOISE_CLIP)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub anchor: usize,
    pub neighbor: usize,
    pub lambda: f64,
    /// Interpolated target before noise.
    pub interpolated: [f64; 4],
    /// Final target, noise added and clamped to `[0, 1]`.
    pub target: [f64; 4],
}

/// Interpolate one target row toward another.
pub fn interpolate(a: &[f64; 4], b: &[f64; 4], lambda: f64) -> [f64; 4] {
    std::array::from_fn(|d| a[d] + lambda * (b[d] - a[d]))
}

/// One synthetic sample per few-shot member of the batch, interpolated
/// toward its nearest few-shot neighbor in target space. Batches with fewer
/// than two few-shot samples yield no synthetic samples.
pub fn smogn_plan(targets: &[[f64; 4]], size_ratios: &[f64], rng: &mut impl Rng) -> Vec<SyntheticSample> {
    let rare: Vec<usize> = (0..targets.len())
        .filter(|&i| shot_group(size_ratios[i]) == ShotGroup::Few)
        .collect();
    if rare.len() < 2 {
        return Vec::new();
    }
    let dist2 = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    rare.iter()
        .map(|&anchor| {
            let neighbor = rare
                .iter()
                .copied()
                .filter(|&j| j != anchor)
                .min_by(|&a, &b| {
                    dist2(&targets[anchor], &targets[a])
                        .total_cmp(&dist2(&targets[anchor], &targets[b]))
                        .then(a.cmp(&b))
                })
                .expect("at least two rare samples");
            let lambda = rng.random_range(0.0..=1.0);
            let interpolated = interpolate(&targets[anchor], &targets[neighbor], lambda);
            let target = interpolated.map(|v| (v + smogn_noise(rng)).clamp(0.0, 1.0));
            SyntheticSample {
                anchor,
                neighbor,
                lambda,
                interpolated,
                target,
            }
        })
        .collect()
}

/// A batch extended with synthetic pooled features and targets.
pub struct AugmentedBatch {
    pub pooled: [Var; 4],
    pub targets: Vec<[f64; 4]>,
    pub synthetic: usize,
}

/// Append synthetic rows `x_a + λ(x_n − x_a)` to each pooled `B×C` feature.
pub fn smogn_augment(tape: &mut Tape, pooled: &[Var; 4], targets: &[[f64; 4]], size_ratios: &[f64], rng: &mut impl Rng) -> Result<AugmentedBatch> {
    let plan = smogn_plan(targets, size_ratios, rng);
    if plan.is_empty() {
        return Ok(AugmentedBatch {
            pooled: *pooled,
            targets: targets.to_vec(),
            synthetic: 0,
        });
    }
    let anchors: Vec<usize> = plan.iter().map(|s| s.anchor).collect();
    let neighbors: Vec<usize> = plan.iter().map(|s| s.neighbor).collect();
    let lambdas = Tensor::new(vec![plan.len(), 1], plan.iter().map(|s| s.lambda).collect())?;
    let lam = tape.constant(lambdas);
    let mut out = *pooled;
    for (slot, &x) in out.iter_mut().zip(pooled) {
        let xa = tape.index_rows(x, &anchors)?;
        let xn = tape.index_rows(x, &neighbors)?;
        let diff = tape.sub(xn, xa)?;
        let step = tape.mul(diff, lam)?;
        let synth = tape.add(xa, step)?;
        *slot = tape.concat(&[x, synth], 0)?;
    }
    let mut all = targets.to_vec();
    all.extend(plan.iter().map(|s| s.target));
    Ok(AugmentedBatch {
        pooled: out,
        targets: all,
        synthetic: plan.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(tape: &mut Tape, r: &[Vec<f64>]) -> Var {
        tape.param(Tensor::from_rows(r).unwrap())
    }

    fn single(p: PairMatrices) -> [PairMatrices; 4] {
        let empty = pair_matrices(&[], &LossWeights::default());
        [p, empty.clone(), empty.clone(), empty]
    }

    #[test]
    fn pair_matrices_worked_example() {
        let p = pair_matrices(&[0.10, 0.12, 0.90], &LossWeights::default());
        assert_eq!(p.positive_pairs(), vec![(0, 1)]);
        assert_eq!(p.negative_pairs(), vec![(0, 2), (1, 2)]);
        assert!(p.is_positive(1, 0) && !p.is_positive(0, 0));
    }

    #[test]
    fn equal_targets_are_all_positive() {
        let p = pair_matrices(&[0.3; 5], &LossWeights::default());
        assert_eq!(p.positive_pairs().len(), 10);
        assert!(p.negative_pairs().is_empty());
        let tiny = pair_matrices(&[0.3], &LossWeights::default());
        assert!(tiny.positive_pairs().is_empty() && tiny.negative_pairs().is_empty());
    }

    #[test]
    fn alignment_identical_and_orthogonal() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let x = rows(&mut tape, &[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let p = single(pair_matrices(&[0.5, 0.5], &w));
        let a = alignment_loss(&mut tape, &[x, x, x, x], &p, &w).unwrap();
        assert_eq!(tape.value(a).item(), 0.0);

        let mut tape = Tape::new();
        let x = rows(&mut tape, &[vec![3.0, 0.0], vec![0.0, 0.5]]);
        let a = alignment_loss(&mut tape, &[x, x, x, x], &p, &w).unwrap();
        assert!((tape.value(a).item() - (2f64.sqrt() - 0.5)).abs() < 1e-12);
        tape.backward(a).unwrap();
        assert!(tape.all_finite());
    }

    #[test]
    fn empty_masks_give_zero() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let x = rows(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = single(pair_matrices(&[0.2, 0.5], &w));
        let a = alignment_loss(&mut tape, &[x; 4], &p, &w).unwrap();
        let u = uniformity_loss(&mut tape, &[x; 4], &p, &w).unwrap();
        assert_eq!(tape.value(a).item(), 0.0);
        assert_eq!(tape.value(u).item(), 0.0);
    }

    #[test]
    fn uniformity_identical_and_antipodal() {
        let w = LossWeights::default();
        let p = single(pair_matrices(&[0.0, 0.9], &w));
        let mut tape = Tape::new();
        let x = rows(&mut tape, &[vec![0.3, 0.4], vec![0.6, 0.8]]);
        let u = uniformity_loss(&mut tape, &[x; 4], &p, &w).unwrap();
        assert!((tape.value(u).item() - 1.0).abs() < 1e-15);

        let mut tape = Tape::new();
        let x = rows(&mut tape, &[vec![2.0, 0.0], vec![-0.1, 0.0]]);
        let u = uniformity_loss(&mut tape, &[x; 4], &p, &w).unwrap();
        assert!((tape.value(u).item() - (-4f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn l1_values_and_gradient() {
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap());
        let copy = tape.value(pred).clone();
        let same = tape.constant(copy);
        let l = l1_loss(&mut tape, pred, same).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let shifted: Vec<f64> = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v + 0.1 } else { v - 0.1 })
            .collect();
        let target = tape.constant(Tensor::new(vec![2, 4], shifted).unwrap());
        let l = l1_loss(&mut tape, pred, target).unwrap();
        assert!((tape.value(l).item() - 0.1).abs() < 1e-15);
        tape.backward(l).unwrap();
        let g = tape.grad(pred).unwrap();
        for (i, gi) in g.iter().enumerate() {
            // pred below target on even entries
            let expect = if i % 2 == 0 { -1.0 / 8.0 } else { 1.0 / 8.0 };
            assert_eq!(*gi, expect);
        }
    }

    #[test]
    fn l1_tie_has_zero_subgradient() {
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap());
        let target = tape.constant(Tensor::new(vec![1, 4], vec![0.5, 0.4, 0.5, 0.6]).unwrap());
        let l = l1_loss(&mut tape, pred, target).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(pred).unwrap(), &[0.0, 0.25, 0.0, -0.25]);
    }

    #[test]
    fn combine_arithmetic() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let l1 = tape.constant(Tensor::scalar(0.1));
        let a = tape.constant(Tensor::scalar(2.0));
        let u = tape.constant(Tensor::scalar(4.0));
        let b = combine(&mut tape, l1, a, u, &w).unwrap();
        assert!((tape.value(b.total).item() - 0.25).abs() < 1e-15);

        let zero = LossWeights { beta: 0.0, gamma: 0.0, ..w };
        let b = combine(&mut tape, l1, a, u, &zero).unwrap();
        assert_eq!(tape.value(b.total).item(), 0.1);
    }

    #[test]
    fn focal_r_values() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_slice(&[0.0]));
        let f = focal_r_loss(&mut tape, e, &w);
        assert_eq!(tape.value(f).item(), 0.0);
        let e = tape.constant(Tensor::from_slice(&[1.0]));
        let f = focal_r_loss(&mut tape, e, &w);
        let s = 1.0 / (1.0 + (-2f64).exp());
        assert!((tape.value(f).item() - s * s).abs() < 1e-15);

        let mut last = -1.0;
        for k in 0..=200 {
            let mut tape = Tape::new();
            let e = tape.constant(Tensor::from_slice(&[k as f64 * 0.01]));
            let f = focal_r_loss(&mut tape, e, &w);
            let v = tape.value(f).item();
            assert!(v > last || k == 0, "not increasing at e={}", k as f64 * 0.01);
            last = v;
        }
    }

    #[test]
    fn inverse_frequency_examples() {
        let uniform: Vec<f64> = (0..40).map(|i| (i as f64 + 0.5) / 40.0).collect();
        assert_eq!(inverse_frequency_weights(&uniform, 4).weights, vec![1.0; 4]);

        let mut y = vec![0.2; 30];
        y.extend(vec![0.7; 10]);
        let w = inverse_frequency_weights(&y, 2).weights;
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 1.5).abs() < 1e-12, "{w:?}");
    }

    #[test]
    fn empty_bins_take_max_weight() {
        let mut y = vec![0.05; 3];
        y.push(0.95);
        let w = inverse_frequency_weights(&y, 4).weights;
        let max = w[0].max(w[3]);
        assert_eq!(w[1], max);
        assert_eq!(w[2], max);
    }

    #[test]
    fn lds_degenerate_kernel_matches_inverse_frequency() {
        let y: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 150.0).collect();
        assert_eq!(lds_weights(&y, 20, 0.0), inverse_frequency_weights(&y, 20));
        assert_eq!(lds_weights(&y, 20, 0.4), inverse_frequency_weights(&y, 20));
    }

    #[test]
    fn lds_single_bin_follows_kernel() {
        let y = vec![0.51; 10]; // bin 10 of 20
        let smoothed = lds_smoothed_counts(&y, 20, 1.0);
        // direct convolution oracle
        for (b, &s) in smoothed.iter().enumerate() {
            let k = b as f64 - 10.0;
            let expect = if k.abs() <= 2.0 { 10.0 * (-k * k / 2.0).exp() } else { 0.0 };
            assert!((s - expect).abs() < 1e-12, "bin {b}: {s} vs {expect}");
        }
        let w = lds_weights(&y, 20, 1.0).weights;
        assert!(w.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn smogn_interpolation_and_noise_bound() {
        assert_eq!(interpolate(&[0.2; 4], &[0.4; 4], 0.0), [0.2; 4]);
        let mid = interpolate(&[0.2; 4], &[0.4; 4], 0.5);
        assert!(mid.iter().all(|v| (v - 0.3).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut max: f64 = 0.0;
        for _ in 0..100_000 {
            max = max.max(smogn_noise(&mut rng).abs());
        }
        assert!(max <= SMOGN_NOISE_CLIP);
        assert!(max > 0.09, "clip never approached: {max}");
    }

    #[test]
    fn smogn_without_rare_samples_is_identity() {
        let mut tape = Tape::new();
        let x = rows(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let targets = [[0.1, 0.9, 0.1, 0.9], [0.05, 0.95, 0.05, 0.95]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = smogn_augment(&mut tape, &[x; 4], &targets, &[0.8, 0.9], &mut rng).unwrap();
        assert_eq!(out.synthetic, 0);
        assert_eq!(out.pooled[0], x);
        assert_eq!(out.targets, targets.to_vec());
    }

    #[test]
    fn smogn_appends_interpolated_rows() {
        let mut tape = Tape::new();
        let x = rows(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0], vec![2.0, 2.0]]);
        let targets = [[0.3, 0.6, 0.3, 0.6], [0.1, 0.9, 0.1, 0.9], [0.35, 0.65, 0.3, 0.6], [0.32, 0.6, 0.3, 0.6]];
        let ratios = [0.1, 0.9, 0.2, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = smogn_augment(&mut tape, &[x; 4], &targets, &ratios, &mut rng).unwrap();
        assert_eq!(out.synthetic, 3);
        assert_eq!(tape.shape(out.pooled[0]), &[7, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = smogn_plan(&targets, &ratios, &mut rng);
        assert_eq!(plan.iter().map(|s| (s.anchor, s.neighbor)).collect::<Vec<_>>(), vec![(0, 3), (2, 3), (3, 0)]);
        let feats = tape.value(out.pooled[0]);
        for (k, s) in plan.iter().enumerate() {
            for c in 0..2 {
                let xa = feats.at(&[s.anchor, c]);
                let xn = feats.at(&[s.neighbor, c]);
                assert!((feats.at(&[4 + k, c]) - (xa + s.lambda * (xn - xa))).abs() < 1e-12);
            }
            for d in 0..4 {
                assert!((s.target[d] - s.interpolated[d]).abs() <= SMOGN_NOISE_CLIP + 1e-15);
            }
        }
    }
}
