//! Class activation maps and their top-k pixel sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Dense, LayerSpec};
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    /// `[s_h, s_w]`
    pub values: Tensor,
    pub class_index: usize,
    /// Whether `class_index` is the network's argmax prediction.
    pub predicted: bool,
}

impl CamMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn side(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }
}

/// The `k` largest CAM pixels, by flat index, largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKSet {
    pub k: usize,
    pub positions: Vec<usize>,
    /// `I(x)_[k]`
    pub kth_value: f64,
    /// `I(x)_[k+1]`
    pub k_plus_1_value: f64,
}

impl TopKSet {
    pub fn gap(&self) -> f64 {
        self.kth_value - self.k_plus_1_value
    }

    /// Membership mask over `n` pixels.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &p in &self.positions {
            mask[p] = true;
        }
        mask
    }

    /// How many of `self`'s positions also appear in `other`.
    pub fn common_with(&self, other: &[usize]) -> usize {
        self.positions.iter().filter(|p| other.contains(p)).count()
    }
}

fn dense_of(net: &NetworkSpec, dense_index: usize) -> &Dense {
    match &net.layers()[dense_index] {
        LayerSpec::Dense(d) => d,
        _ => unreachable!("cam_layout guarantees a dense tail"),
    }
}

/// `w^c_k` for every filter `k`.
pub fn class_weights(net: &NetworkSpec, class_index: usize) -> Result<Vec<f64>> {
    let layout = net.cam_layout()?;
    if class_index >= layout.class_count {
        return Err(Error::precondition(format!(
            "class index {class_index} out of range [0, {})",
            layout.class_count
        )));
    }
    let dense = dense_of(net, layout.dense_index);
    Ok((0..dense.inputs())
        .map(|k| dense.weight(k, class_index))
        .collect())
}

/// `sum_k w_k f^k` per pixel of an `[s_h, s_w, f]` feature map.
pub fn weighted_map(features: &Tensor, weights: &[f64]) -> Tensor {
    let (h, w, f) = features.hwc().expect("feature map is rank 3");
    debug_assert_eq!(f, weights.len());
    let data = features
        .data()
        .chunks_exact(f)
        .map(|px| px.iter().zip(weights).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new(vec![h, w], data).expect("cam shape")
}

/// CAM of `x` for `class_index`, or for the predicted class when `None`.
pub fn compute_cam(net: &NetworkSpec, x: &Tensor, class_index: Option<usize>) -> Result<CamMap> {
    let layout = net.cam_layout()?;
    let acts = net.forward_network(x)?;
    let logits = &acts[layout.dense_index + 1];
    let predicted_class = logits.argmax();
    let class_index = class_index.unwrap_or(predicted_class);
    let weights = class_weights(net, class_index)?;
    let values = weighted_map(&acts[layout.gap_index], &weights);
    Ok(CamMap {
        values,
        class_index,
        predicted: class_index == predicted_class,
    })
}

/// CAM for a fixed class computed only up to the feature map (skips the logits).
pub fn cam_for_class(net: &NetworkSpec, x: &Tensor, class_index: usize) -> Result<Tensor> {
    let layout = net.cam_layout()?;
    let weights = class_weights(net, class_index)?;
    let acts = net.forward_prefix(x, layout.gap_index)?;
    Ok(weighted_map(&acts[layout.gap_index], &weights))
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::precondition(format!(
            "k must satisfy 1 <= k < {n}, got {k}"
        )));
    }
    Ok(())
}

/// Pixel indices sorted by descending value, ties by ascending index.
pub fn sorted_positions(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Top-k positions of a raw value map.
pub fn top_k_of(values: &[f64], k: usize) -> Result<TopKSet> {
    check_k(values.len(), k)?;
    let order = sorted_positions(values);
    Ok(TopKSet {
        k,
        positions: order[..k].to_vec(),
        kth_value: values[order[k - 1]],
        k_plus_1_value: values[order[k]],
    })
}

pub fn top_k(cam: &CamMap, k: usize) -> Result<TopKSet> {
    top_k_of(cam.values.data(), k)
}

/// `I(x)_[k] - I(x)_[k+1]`.
pub fn cam_gap(cam: &CamMap, k: usize) -> Result<f64> {
    Ok(top_k(cam, k)?.gap())
}

/// Whether the unordered top-k position sets of two maps agree.
pub fn same_top_k(reference: &TopKSet, values: &[f64]) -> bool {
    let other = top_k_of(values, reference.k).expect("same map size");
    reference.common_with(&other.positions) == reference.k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Conv2d;
    use proptest::prelude::*;

    fn cam_of(side: usize, values: &[f64]) -> CamMap {
        CamMap {
            values: Tensor::new(vec![side, side], values.to_vec()).unwrap(),
            class_index: 0,
            predicted: true,
        }
    }

    #[test]
    fn top_k_small_example() {
        let cam = cam_of(2, &[3.0, 1.0, 2.0, 0.0]);
        let t = top_k(&cam, 2).unwrap();
        assert_eq!(t.positions, vec![0, 2]);
        assert_eq!(t.kth_value, 2.0);
        assert_eq!(t.k_plus_1_value, 1.0);
        assert_eq!(cam_gap(&cam, 2).unwrap(), 1.0);
    }

    #[test]
    fn ties_break_by_lowest_index() {
        let cam = cam_of(2, &[1.0; 4]);
        assert_eq!(top_k(&cam, 3).unwrap().positions, vec![0, 1, 2]);
        for k in 1..4 {
            assert_eq!(cam_gap(&cam, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn k_out_of_range() {
        let cam = cam_of(2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(top_k(&cam, 0).is_err());
        assert!(top_k(&cam, 4).is_err());
        assert!(cam_gap(&cam, 4).is_err());
    }

    fn two_filter_net(w: [f64; 2]) -> NetworkSpec {
        // identity 1x1 conv over a 2-channel input, so the features are the input itself
        let id = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let dense = Dense::new(Tensor::new(vec![2, 1], w.to_vec()).unwrap(), None).unwrap();
        NetworkSpec::cam(
            vec![2, 2, 2],
            vec![
                LayerSpec::Conv2d(Conv2d::new(id, None, 1, 0).unwrap()),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense(dense),
            ],
        )
        .unwrap()
    }

    #[test]
    fn cam_is_weighted_filter_sum() {
        let f1 = [1.0, 2.0, 3.0, 4.0];
        let f2 = [0.0, 1.0, 1.0, 0.0];
        let x: Vec<f64> = f1.iter().zip(&f2).flat_map(|(&a, &b)| [a, b]).collect();
        let x = Tensor::new(vec![2, 2, 2], x).unwrap();
        let net = two_filter_net([1.0, -1.0]);
        let cam = compute_cam(&net, &x, Some(0)).unwrap();
        let oracle: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
        assert_eq!(cam.values.data(), oracle.as_slice());
        assert_eq!(cam.values.data(), &[1.0, 1.0, 2.0, 4.0]);
        assert!(cam.predicted);
    }

    #[test]
    fn zero_class_weights_give_zero_cam() {
        let net = two_filter_net([0.0, 0.0]);
        let x = Tensor::full(vec![2, 2, 2], 0.3);
        let cam = compute_cam(&net, &x, None).unwrap();
        assert!(cam.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_index_out_of_range() {
        let net = two_filter_net([1.0, 1.0]);
        let x = Tensor::full(vec![2, 2, 2], 0.3);
        assert!(compute_cam(&net, &x, Some(1)).is_err());
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(values in prop::collection::vec(-5.0f64..5.0, 576), k in 1usize..575) {
            let cam = cam_of(24, &values);
            let t = top_k(&cam, k).unwrap();
            let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let oracle: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            prop_assert_eq!(&t.positions, &oracle);
            prop_assert_eq!(t.kth_value, pairs[k - 1].0);
            prop_assert_eq!(t.k_plus_1_value, pairs[k].0);
            let gap = cam_gap(&cam, k).unwrap();
            prop_assert!(gap >= 0.0);
            prop_assert_eq!(gap, pairs[k - 1].0 - pairs[k].0);
            prop_assert!(t.positions.windows(2).all(|w| values[w[0]] >= values[w[1]]));
        }

        #[test]
        fn top_k_invariant_under_positive_affine(
            values in prop::collection::vec(-5.0f64..5.0, 16),
            a in 0.25f64..4.0,
            b in -3.0f64..3.0,
            k in 1usize..15,
        ) {
            // quantize so the rescaling cannot create or break exact ties
            let values: Vec<f64> = values.iter().map(|v| (v * 8.0).round() / 8.0).collect();
            let scaled: Vec<f64> = values.iter().map(|v| a * v + b).collect();
            let before = top_k_of(&values, k).unwrap();
            let after = top_k_of(&scaled, k).unwrap();
            let mut p1 = before.positions.clone();
            let mut p2 = after.positions.clone();
            p1.sort_unstable();
            p2.sort_unstable();
            // exact ties may re-order only if the affine map rounds them apart
            if before.gap() > 1e-9 {
                prop_assert_eq!(p1, p2);
            }
        }

        #[test]
        fn cam_linear_in_dense_weights(
            feats in prop::collection::vec(0.0f64..2.0, 18),
            w1 in prop::collection::vec(-2.0f64..2.0, 2),
            w2 in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let f = Tensor::new(vec![3, 3, 2], feats).unwrap();
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let lhs = weighted_map(&f, &sum);
            let r1 = weighted_map(&f, &w1);
            let r2 = weighted_map(&f, &w2);
            for i in 0..9 {
                prop_assert!((lhs.data()[i] - (r1.data()[i] + r2.data()[i])).abs() < 1e-12);
            }
        }
    }
}
