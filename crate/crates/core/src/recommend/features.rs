//! Input encoding for imitation scorers: `w ++ v ++ [W, Σw, Σv]`, i.e. `2n + 3` features.

use serde::{Deserialize, Serialize};

use crate::knapsack::KnapsackInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Present items to the scorer in descending value/weight order.
    pub density_sort: bool,
    /// Joint min-max scaling of weights and values to `[0, 1]`.
    pub normalize: bool,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            density_sort: true,
            normalize: true,
        }
    }
}

pub fn feature_len(items: usize) -> usize {
    2 * items + 3
}

/// Scorer input for one instance plus the item permutation used to build it.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Vec<f32>,
    /// `order[p]` is the original index of the item shown at position `p`.
    pub order: Vec<usize>,
}

impl Encoded {
    /// Maps per-position outputs back to original item indices.
    pub fn unpermute<T: Copy + Default>(&self, by_position: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); by_position.len()];
        for (p, &i) in self.order.iter().enumerate() {
            out[i] = by_position[p];
        }
        out
    }

    /// Reorders per-item values into scorer positions.
    pub fn permute<T: Copy>(&self, by_item: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| by_item[i]).collect()
    }
}

/// Item indices by descending value/weight density, ties by lower index.
pub fn density_order(instance: &KnapsackInstance) -> Vec<usize> {
    let (w, v) = (instance.weights(), instance.values());
    let mut order: Vec<usize> = (0..instance.item_count()).collect();
    // v_a / w_a > v_b / w_b  <=>  v_a * w_b > v_b * w_a
    order.sort_by(|&a, &b| {
        (u64::from(v[b]) * u64::from(w[a])).cmp(&(u64::from(v[a]) * u64::from(w[b])))
    });
    order
}

pub fn encode(instance: &KnapsackInstance, prep: Preprocessing) -> Encoded {
    let n = instance.item_count();
    let order = if prep.density_sort {
        density_order(instance)
    } else {
        (0..n).collect()
    };
    let w: Vec<f64> = order.iter().map(|&i| f64::from(instance.weights()[i])).collect();
    let v: Vec<f64> = order.iter().map(|&i| f64::from(instance.values()[i])).collect();
    let capacity = f64::from(instance.capacity());
    let sum_w: f64 = w.iter().sum();
    let sum_v: f64 = v.iter().sum();

    let mut features = Vec::with_capacity(feature_len(n));
    if prep.normalize {
        let lo = w.iter().chain(&v).copied().fold(f64::INFINITY, f64::min);
        let hi = w.iter().chain(&v).copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let scale = |x: f64| if span > 0.0 { (x - lo) / span } else { 1.0 };
        let max_w = w.iter().copied().fold(0.0, f64::max);
        let max_v = v.iter().copied().fold(0.0, f64::max);
        features.extend(w.iter().map(|&x| scale(x) as f32));
        features.extend(v.iter().map(|&x| scale(x) as f32));
        features.push((capacity / max_w) as f32);
        features.push((sum_w / (n as f64 * max_w)) as f32);
        features.push((sum_v / (n as f64 * max_v)) as f32);
    } else {
        features.extend(w.iter().map(|&x| x as f32));
        features.extend(v.iter().map(|&x| x as f32));
        features.push(capacity as f32);
        features.push(sum_w as f32);
        features.push(sum_v as f32);
    }
    Encoded { features, order }
}
