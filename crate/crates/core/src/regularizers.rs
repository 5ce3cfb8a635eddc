//! Entropy-maximising sparsity penalty and filter-decorrelation penalty.
//!
//! * Sparsity: `L_s = -Σ_i λ_i Σ_k H_k^i`, the RFAV entropies of layer `i`
//!   summed over its receptive fields and averaged over the batch. Larger
//!   entropies lower the loss, pushing filters towards dense responses.
//! * Decorrelation: `L_c = Σ_i κ_i Σ_d Σ_{e>d} c_{d,e}` with `c` the
//!   correlation between flattened filters of layer `i`.
//!
//! The correlation centres every filter on the componentwise mean over all
//! filters of the layer (`w̄[m] = mean_d w_d[m]`), not on each filter's own
//! mean as textbook Pearson correlation would. One consequence: with only two
//! filters both centred vectors are mirror images, so `c` is always `-1` (or
//! undefined when the filters coincide).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Centred squared norms at or below this are treated as zero.
const DEGENERATE_SQ_NORM: f64 = 1e-24;

/// Per-layer regularization weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub kappa: f64,
}

/// Sparsity (`λ`) and decorrelation (`κ`) weight per layer id. Layers that
/// are not listed carry zero weight.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegProfile {
    layers: BTreeMap<String, LayerWeights>,
}

impl RegProfile {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_lambda(mut self, layer: &str, lambda: f64) -> Result<Self> {
        check_weight("lambda", layer, lambda)?;
        self.layers.entry(layer.to_string()).or_default().lambda = lambda;
        Ok(self)
    }

    pub fn with_kappa(mut self, layer: &str, kappa: f64) -> Result<Self> {
        check_weight("kappa", layer, kappa)?;
        self.layers.entry(layer.to_string()).or_default().kappa = kappa;
        Ok(self)
    }

    pub fn lambda(&self, layer: &str) -> f64 {
        self.layers.get(layer).map_or(0.0, |w| w.lambda)
    }

    pub fn kappa(&self, layer: &str) -> f64 {
        self.layers.get(layer).map_or(0.0, |w| w.kappa)
    }

    pub fn is_inactive(&self) -> bool {
        self.layers
            .values()
            .all(|w| w.lambda == 0.0 && w.kappa == 0.0)
    }

    pub fn sparsity_layers(&self) -> impl Iterator<Item = &str> {
        self.layers
            .iter()
            .filter(|(_, w)| w.lambda > 0.0)
            .map(|(k, _)| k.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        for (layer, w) in &self.layers {
            check_weight("lambda", layer, w.lambda)?;
            check_weight("kappa", layer, w.kappa)?;
        }
        Ok(())
    }
}

fn check_weight(kind: &str, layer: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{kind} for layer `{layer}` must be finite and >= 0, got {v}"
        )))
    }
}

/// How `L_c` aggregates the lower-triangle coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecorrelationMode {
    /// Sum of signed coefficients.
    #[default]
    Signed,
    /// Sum of absolute coefficients, penalising anti-correlation as well.
    Absolute,
}

/// Graph handles of one regularizable layer.
#[derive(Clone, Debug)]
pub struct LayerTap {
    pub id: String,
    /// Linear (pre-nonlinearity) activation, `N×D×A×B` or `N×D`.
    pub activation: NodeId,
    /// Weight parameter with filters along the leading axis.
    pub weights: NodeId,
    pub channels: usize,
}

/// `D×D` filter correlation matrix plus the filters whose centred norm was
/// zero (their rows and columns are 0).
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub size: usize,
    pub matrix: Vec<f64>,
    pub degenerate: Vec<usize>,
    pub(crate) centered: Vec<f64>,
    pub(crate) sq_norms: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, d: usize, e: usize) -> f64 {
        self.matrix[d * self.size + e]
    }

    /// Strict lower-triangle entries, row by row.
    pub fn lower_triangle(&self) -> impl Iterator<Item = f64> + '_ {
        (1..self.size).flat_map(move |d| (0..d).map(move |e| self.get(d, e)))
    }

    pub fn mean_abs_lower(&self) -> f64 {
        let pairs = self.size * (self.size - 1) / 2;
        self.lower_triangle().map(f64::abs).sum::<f64>() / pairs as f64
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new([self.size, self.size], self.matrix.clone()).expect("square matrix")
    }
}

/// Correlation between `d` filters of length `m` stored row-wise in `w`.
pub(crate) fn centered_correlation(w: &[f64], d: usize, m: usize) -> CorrelationMatrix {
    let mut mean = vec![0.0; m];
    for row in w.chunks(m) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= d as f64;
    }
    let mut centered = vec![0.0; d * m];
    for (dst, src) in centered.chunks_mut(m).zip(w.chunks(m)) {
        for ((c, v), mu) in dst.iter_mut().zip(src).zip(&mean) {
            *c = v - mu;
        }
    }
    let rows: Vec<&[f64]> = centered.chunks(m).collect();
    let sq_norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let degenerate: Vec<usize> = (0..d)
        .filter(|&i| sq_norms[i] <= DEGENERATE_SQ_NORM)
        .collect();
    let valid = |i: usize| sq_norms[i] > DEGENERATE_SQ_NORM;
    let mut matrix = vec![0.0; d * d];
    for i in 0..d {
        if !valid(i) {
            continue;
        }
        matrix[i * d + i] = 1.0;
        for j in i + 1..d {
            if !valid(j) {
                continue;
            }
            let num: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            let c = num / (sq_norms[i] * sq_norms[j]).sqrt();
            matrix[i * d + j] = c;
            matrix[j * d + i] = c;
        }
    }
    CorrelationMatrix {
        size: d,
        matrix,
        degenerate,
        centered,
        sq_norms,
    }
}

/// Correlation matrix of a layer's filters; `weights` has filters along the
/// leading axis (`D×D'×kh×kw` for conv, `out×in` for dense).
pub fn pearson_filter_correlation(weights: &Tensor) -> Result<CorrelationMatrix> {
    if weights.rank() < 2 || weights.shape()[0] < 2 {
        return Err(Error::invalid(format!(
            "correlation needs at least two filters, got shape {:?}",
            weights.shape()
        )));
    }
    let d = weights.shape()[0];
    let corr = centered_correlation(weights.data(), d, weights.len() / d);
    if !corr.degenerate.is_empty() {
        log::warn!(
            "filters {:?} have zero centred norm; their correlations are set to 0",
            corr.degenerate
        );
    }
    Ok(corr)
}

fn sum_nodes(graph: &mut Graph, terms: Vec<NodeId>) -> Result<NodeId> {
    let mut iter = terms.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    };
    for t in iter {
        acc = graph.add(Op::Add, &[acc, t])?;
    }
    Ok(acc)
}

/// Adds `L_s` to the graph and returns its scalar node. Layers with `λ = 0`
/// contribute no nodes; if none remain the result is the constant 0.
pub fn sparsity_penalty(
    graph: &mut Graph,
    taps: &[LayerTap],
    profile: &RegProfile,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    for tap in taps {
        let lambda = profile.lambda(&tap.id);
        if lambda == 0.0 {
            continue;
        }
        if tap.channels < 2 {
            return Err(Error::invalid(format!(
                "layer `{}` has {} channel(s); sparsity regularization needs at least 2",
                tap.id, tap.channels
            )));
        }
        let h = graph.add(Op::RfavEntropy, &[tap.activation])?;
        graph.set_name(h, format!("{}.entropy", tap.id));
        let per_sample = graph.add(Op::BatchMeanSum, &[h])?;
        terms.push(graph.add(Op::Scale(-lambda), &[per_sample])?);
    }
    let node = sum_nodes(graph, terms)?;
    graph.set_name(node, "sparsity_penalty");
    Ok(node)
}

/// Adds `L_c` to the graph and returns its scalar node.
pub fn decorrelation_penalty(
    graph: &mut Graph,
    taps: &[LayerTap],
    profile: &RegProfile,
    mode: DecorrelationMode,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    for tap in taps {
        let kappa = profile.kappa(&tap.id);
        if kappa == 0.0 {
            continue;
        }
        if tap.channels < 2 {
            return Err(Error::invalid(format!(
                "layer `{}` has {} filter(s); decorrelation needs at least 2",
                tap.id, tap.channels
            )));
        }
        let c = graph.add(Op::FilterCorrelation, &[tap.weights])?;
        graph.set_name(c, format!("{}.correlation", tap.id));
        let absolute = mode == DecorrelationMode::Absolute;
        let s = graph.add(Op::LowerTriangleSum { absolute }, &[c])?;
        terms.push(graph.add(Op::Scale(kappa), &[s])?);
    }
    let node = sum_nodes(graph, terms)?;
    graph.set_name(node, "decorrelation_penalty");
    Ok(node)
}

/// `L = L* + L_s + L_c`.
pub fn total_loss(
    graph: &mut Graph,
    base: NodeId,
    sparsity: NodeId,
    decorrelation: NodeId,
) -> Result<NodeId> {
    let partial = graph.add(Op::Add, &[base, sparsity])?;
    let total = graph.add(Op::Add, &[partial, decorrelation])?;
    graph.set_name(total, "total_loss");
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_gradient, relative_error, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the correlation formula, one pair at a time.
    fn scalar_correlation(filters: &[Vec<f64>], d: usize, e: usize) -> f64 {
        let m = filters[0].len();
        let mean: Vec<f64> = (0..m)
            .map(|j| filters.iter().map(|f| f[j]).sum::<f64>() / filters.len() as f64)
            .collect();
        let (mut num, mut nd, mut ne) = (0.0, 0.0, 0.0);
        for j in 0..m {
            let a = filters[d][j] - mean[j];
            let b = filters[e][j] - mean[j];
            num += a * b;
            nd += a * a;
            ne += b * b;
        }
        num / (nd * ne).sqrt()
    }

    fn filters_tensor(filters: &[Vec<f64>]) -> Tensor {
        let m = filters[0].len();
        Tensor::new([filters.len(), m], filters.concat()).unwrap()
    }

    #[test]
    fn profile_defaults_to_zero() {
        let p = RegProfile::none().with_lambda("conv3", 0.001).unwrap();
        assert_eq!(p.lambda("conv3"), 0.001);
        assert_eq!(p.lambda("conv1"), 0.0);
        assert_eq!(p.kappa("conv3"), 0.0);
        assert!(RegProfile::none().with_kappa("x", -1.0).is_err());
        assert!(RegProfile::none().is_inactive());
    }

    #[test]
    fn opposite_filters_anticorrelate() {
        let w = vec![0.5, -1.0, 2.0, 0.25];
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let c = pearson_filter_correlation(&filters_tensor(&[w, neg])).unwrap();
        assert!((c.get(0, 1) + 1.0).abs() < 1e-15);
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn duplicated_filter_correlates_fully_among_three() {
        let a = vec![0.3, -0.2, 0.9, 1.1];
        let b = vec![-0.5, 0.4, 0.1, 0.0];
        let c = pearson_filter_correlation(&filters_tensor(&[a.clone(), a, b])).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_identical_filters_are_degenerate() {
        let a = vec![0.3, -0.2, 0.9];
        let c = pearson_filter_correlation(&filters_tensor(&[a.clone(), a])).unwrap();
        assert_eq!(c.degenerate, vec![0, 1]);
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(0, 0), 0.0);
    }

    #[test]
    fn random_filters_match_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let filters: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let c = pearson_filter_correlation(&filters_tensor(&filters)).unwrap();
            for d in 0..3 {
                for e in 0..3 {
                    let expected = if d == e {
                        1.0
                    } else {
                        scalar_correlation(&filters, d, e)
                    };
                    assert!((c.get(d, e) - expected).abs() < 1e-12);
                    assert!((c.get(d, e) - c.get(e, d)).abs() < 1e-12);
                }
            }
        }
    }

    fn penalty_graph(d: usize, lambda: f64) -> (Graph, NodeId, LayerTap) {
        let mut g = Graph::new();
        let act = g.input("act");
        let w = g.param("w", Tensor::zeros([d, 2]));
        let tap = LayerTap {
            id: "conv3".into(),
            activation: act,
            weights: w,
            channels: d,
        };
        let profile = RegProfile::none().with_lambda("conv3", lambda).unwrap();
        let ls = sparsity_penalty(&mut g, std::slice::from_ref(&tap), &profile).unwrap();
        (g, ls, tap)
    }

    #[test]
    fn zero_lambda_gives_zero_penalty() {
        let (mut g, ls, _) = penalty_graph(4, 0.0);
        let x = Tensor::full([1, 4, 2, 1], 0.3);
        let ev = g.evaluate(&[("act", &x)], Mode::Inference).unwrap();
        assert_eq!(ev.scalar(ls), 0.0);
    }

    #[test]
    fn uniform_fields_give_closed_form_penalty() {
        let (mut g, ls, _) = penalty_graph(4, 0.001);
        let x = Tensor::full([3, 4, 2, 1], -0.8);
        let ev = g.evaluate(&[("act", &x)], Mode::Inference).unwrap();
        let expected = -0.001 * 2.0 * 4f64.ln();
        assert!((ev.scalar(ls) - expected).abs() < 1e-15);
        assert!((ev.scalar(ls) + 0.0027726).abs() < 1e-7);
    }

    #[test]
    fn single_channel_layer_cannot_be_sparsity_regularized() {
        let mut g = Graph::new();
        let act = g.input("act");
        let w = g.param("w", Tensor::zeros([1, 2]));
        let tap = LayerTap {
            id: "fc".into(),
            activation: act,
            weights: w,
            channels: 1,
        };
        let profile = RegProfile::none().with_lambda("fc", 0.5).unwrap();
        assert!(sparsity_penalty(&mut g, std::slice::from_ref(&tap), &profile).is_err());
        let profile = RegProfile::none().with_kappa("fc", 1.0).unwrap();
        assert!(
            decorrelation_penalty(&mut g, &[tap], &profile, DecorrelationMode::Signed).is_err()
        );
    }

    #[test]
    fn decorrelation_penalty_sums_lower_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let filters: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut g = Graph::new();
        let act = g.input("act");
        let w = g.param("w", filters_tensor(&filters));
        let tap = LayerTap {
            id: "conv1".into(),
            activation: act,
            weights: w,
            channels: 4,
        };
        let off = decorrelation_penalty(
            &mut g,
            std::slice::from_ref(&tap),
            &RegProfile::none(),
            DecorrelationMode::Signed,
        )
        .unwrap();
        let profile = RegProfile::none().with_kappa("conv1", 2.0).unwrap();
        let signed = decorrelation_penalty(
            &mut g,
            std::slice::from_ref(&tap),
            &profile,
            DecorrelationMode::Signed,
        )
        .unwrap();
        let abs =
            decorrelation_penalty(&mut g, &[tap], &profile, DecorrelationMode::Absolute).unwrap();
        let x = Tensor::zeros([1, 4]);
        let ev = g.evaluate(&[("act", &x)], Mode::Inference).unwrap();
        let mut s = 0.0;
        let mut sa = 0.0;
        for d in 0..4 {
            for e in d + 1..4 {
                let c = scalar_correlation(&filters, d, e);
                s += c;
                sa += c.abs();
            }
        }
        assert_eq!(ev.scalar(off), 0.0);
        assert!((ev.scalar(signed) - 2.0 * s).abs() < 1e-12);
        assert!((ev.scalar(abs) - 2.0 * sa).abs() < 1e-12);
    }

    #[test]
    fn decorrelation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mode in [DecorrelationMode::Signed, DecorrelationMode::Absolute] {
            let w0 = Tensor::new(
                [5, 2, 2, 2],
                (0..40).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let mut g = Graph::new();
            let act = g.input("act");
            let w = g.param("w", w0.clone());
            let tap = LayerTap {
                id: "conv1".into(),
                activation: act,
                weights: w,
                channels: 5,
            };
            let profile = RegProfile::none().with_kappa("conv1", 1.0).unwrap();
            let lc = decorrelation_penalty(&mut g, &[tap], &profile, mode).unwrap();
            let x = Tensor::zeros([1, 5]);
            let ev = g.evaluate(&[("act", &x)], Mode::Inference).unwrap();
            let analytic = g.gradients(&ev, lc).unwrap();
            let numeric = finite_diff_gradient(
                |ps| {
                    g.params_mut()[0]
                        .value
                        .data_mut()
                        .copy_from_slice(ps[0].data());
                    let ev = g.evaluate(&[("act", &x)], Mode::Inference)?;
                    Ok(ev.scalar(lc))
                },
                &[w0],
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic[0].1.data().iter().zip(numeric[0].data()) {
                assert!(relative_error(*a, *n) < 1e-4, "{mode:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v0 = Tensor::new(
            [1, 8],
            (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let v = g.param("v", v0.clone());
        let h = g.add(Op::RfavEntropy, &[v]).unwrap();
        let loss = g.add(Op::Sum, &[h]).unwrap();
        let ev = g.evaluate(&[], Mode::Inference).unwrap();
        let analytic = g.gradients(&ev, loss).unwrap();
        let numeric = finite_diff_gradient(
            |ps| {
                g.params_mut()[0]
                    .value
                    .data_mut()
                    .copy_from_slice(ps[0].data());
                Ok(g.evaluate(&[], Mode::Inference)?.scalar(loss))
            },
            &[v0],
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic[0].1.data().iter().zip(numeric[0].data()) {
            assert!(relative_error(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn total_loss_adds_terms() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(-0.002));
        let c = g.constant(Tensor::scalar(0.5));
        let z = g.constant(Tensor::scalar(0.0));
        let t1 = total_loss(&mut g, a, z, z).unwrap();
        let t2 = total_loss(&mut g, a, b, c).unwrap();
        let ev = g.evaluate(&[], Mode::Inference).unwrap();
        assert_eq!(ev.scalar(t1), 1.0);
        assert!((ev.scalar(t2) - 1.498).abs() < 1e-15);
    }
}
