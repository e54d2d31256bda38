//! Top-k sparsification of layer output gradients.
//!
//! A [`MePropPolicy`] keeps an exponentially decayed average of gradient
//! magnitudes (`run_grad`) with the per-sample shape of the layer output.
//! Every backward step the accumulator is updated from the incoming
//! gradient, then for each feature map only the `k` positions with the
//! largest accumulated magnitude are let through; everything else is set to
//! exactly zero before the layer computes its weight and input gradients.
//!
//! The accumulator has no batch axis: it is fed the batch mean of `|dy|` and
//! yields one mask per feature map that is shared by all samples of the batch.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{topk_indices, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct MePropPolicy<T> {
    ratio: f64,
    decay: f64,
    run_grad: Tensor<T>,
    enabled: bool,
    updates: u64,
}

/// How the per-sample shape splits into independently selected slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceLayout {
    /// Number of feature maps (slices).
    pub maps: usize,
    /// Elements per map.
    pub map_size: usize,
}

impl SliceLayout {
    /// `[h, w, c]` (or any rank >= 2) splits along the last axis; a rank-1
    /// shape `[n]` is a single slice.
    pub fn of(sample_shape: &[usize]) -> Self {
        let total: usize = sample_shape.iter().product();
        match sample_shape {
            [] => Self {
                maps: 1,
                map_size: 1,
            },
            [n] => Self {
                maps: 1,
                map_size: *n,
            },
            [.., c] => Self {
                maps: *c,
                map_size: if *c == 0 { 0 } else { total / c },
            },
        }
    }

    /// Per-sample flat offset of element `pos` of map `map`.
    #[inline]
    pub fn offset(&self, map: usize, pos: usize) -> usize {
        pos * self.maps + map
    }
}

/// Number of entries kept per slice: `max(1, ceil(ratio * slice_size))`.
pub fn keep_count(ratio: f64, slice_size: usize) -> usize {
    // The small slack keeps products like 0.05 * 100 from rounding up to 6.
    let raw = (ratio * slice_size as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(slice_size)
}

impl<T: Scalar> MePropPolicy<T> {
    pub fn new(ratio: f64, decay: f64, sample_shape: &[usize]) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Argument(format!(
                "top-k ratio must lie in (0, 1], got {ratio}"
            )));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Argument(format!(
                "decay must lie in [0, 1), got {decay}"
            )));
        }
        if sample_shape.iter().product::<usize>() == 0 {
            return Err(Error::Argument(format!(
                "policy shape {sample_shape:?} is empty"
            )));
        }
        Ok(Self {
            ratio,
            decay,
            run_grad: Tensor::zeros(sample_shape),
            enabled: true,
            updates: 0,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    /// Accumulated magnitudes, shaped like one sample of the layer output.
    pub fn run_grad(&self) -> &Tensor<T> {
        &self.run_grad
    }

    /// Number of accumulator updates so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Restores a previously exported accumulator (checkpoint load).
    pub fn restore(&mut self, run_grad: Tensor<T>, updates: u64) -> Result<()> {
        if run_grad.shape() != self.run_grad.shape() {
            return Err(Error::Dimension(format!(
                "run_grad {:?} does not match policy shape {:?}",
                run_grad.shape(),
                self.run_grad.shape()
            )));
        }
        if run_grad.data().iter().any(|v| *v < T::zero() || !v.is_finite()) {
            return Err(Error::Argument(
                "run_grad must be finite and non-negative".into(),
            ));
        }
        self.run_grad = run_grad;
        self.updates = updates;
        Ok(())
    }

    pub fn layout(&self) -> SliceLayout {
        SliceLayout::of(self.run_grad.shape())
    }

    /// Entries kept in each feature map.
    pub fn k_per_map(&self) -> usize {
        keep_count(self.ratio, self.layout().map_size)
    }

    fn check_batch_shape(&self, dy: &Tensor<T>) -> Result<usize> {
        match dy.shape().split_first() {
            Some((&m, rest)) if rest == self.run_grad.shape() => Ok(m),
            _ => Err(Error::Dimension(format!(
                "gradient {:?} does not match policy sample shape {:?}",
                dy.shape(),
                self.run_grad.shape()
            ))),
        }
    }

    /// `run_grad <- decay * run_grad + (1 - decay) * mean_batch |dy|`.
    pub fn update_accumulator(&mut self, dy: &Tensor<T>) -> Result<()> {
        let m = self.check_batch_shape(dy)?;
        if m == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        let n = self.run_grad.len();
        let mut mean = vec![T::zero(); n];
        for sample in dy.data().chunks_exact(n) {
            for (acc, &g) in mean.iter_mut().zip(sample) {
                *acc += g.abs();
            }
        }
        let inv_m = T::one() / T::of(m as f64);
        let keep = T::of(self.decay);
        let fresh = T::one() - keep;
        for (r, acc) in self.run_grad.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + fresh * (acc * inv_m);
        }
        self.updates += 1;
        Ok(())
    }

    /// Selected per-sample offsets for every map, each list ascending.
    pub fn selection(&self) -> Result<Vec<Vec<usize>>> {
        if self.updates == 0 {
            return Err(Error::State(
                "sparsify called before any accumulator update".into(),
            ));
        }
        let layout = self.layout();
        let k = keep_count(self.ratio, layout.map_size);
        let rg = self.run_grad.data();
        let mut slice = Vec::with_capacity(layout.map_size);
        let mut out = Vec::with_capacity(layout.maps);
        for map in 0..layout.maps {
            slice.clear();
            slice.extend((0..layout.map_size).map(|p| rg[layout.offset(map, p)]));
            let picked = topk_indices(&slice, k)?;
            out.push(picked.into_iter().map(|p| layout.offset(map, p)).collect());
        }
        Ok(out)
    }

    /// Per-sample keep mask derived from the current accumulator.
    pub fn mask(&self) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.run_grad.len()];
        for map in self.selection()? {
            for o in map {
                mask[o] = true;
            }
        }
        Ok(mask)
    }

    /// Applies the shared per-map top-k mask to every sample of `dy`.
    pub fn sparsify(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch_shape(dy)?;
        if self.k_per_map() == self.layout().map_size && self.updates > 0 {
            return Ok(dy.clone());
        }
        let mask = self.mask()?;
        let mut out = dy.clone();
        for sample in out.data_mut().chunks_exact_mut(mask.len()) {
            for (v, &keep) in sample.iter_mut().zip(&mask) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
        Ok(out)
    }
}

/// Counters from the most recent gradient that passed through a gate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GateStats {
    /// Elements of the incoming gradient.
    pub len: usize,
    /// Nonzero elements of the incoming gradient (before masking).
    pub nnz_in: usize,
    /// Elements the mask let through (mask ones times batch size); equals
    /// `len` when no policy is active.
    pub selected: usize,
}

/// The interception point between a layer's output gradient and its
/// backward pass. Holds at most one policy.
#[derive(Debug, Clone, Default)]
pub struct GradientGate<T> {
    policy: Option<MePropPolicy<T>>,
    stats: GateStats,
}

impl<T: Scalar> GradientGate<T> {
    pub fn new() -> Self {
        Self {
            policy: None,
            stats: GateStats::default(),
        }
    }

    pub fn attach(&mut self, policy: MePropPolicy<T>) -> Result<()> {
        if self.policy.is_some() {
            return Err(Error::State("a meProp policy is already attached".into()));
        }
        self.policy = Some(policy);
        Ok(())
    }

    pub fn detach(&mut self) -> Option<MePropPolicy<T>> {
        self.policy.take()
    }

    pub fn policy(&self) -> Option<&MePropPolicy<T>> {
        self.policy.as_ref()
    }

    pub fn policy_mut(&mut self) -> Option<&mut MePropPolicy<T>> {
        self.policy.as_mut()
    }

    pub fn stats(&self) -> GateStats {
        self.stats
    }

    /// Updates the accumulator and sparsifies `dy` when an enabled policy is
    /// attached; otherwise passes `dy` through untouched.
    pub fn apply<'a>(&mut self, dy: &'a Tensor<T>) -> Result<Cow<'a, Tensor<T>>> {
        let nnz_in = dy.nnz();
        let out = match self.policy.as_mut() {
            Some(p) if p.enabled() => {
                p.update_accumulator(dy)?;
                Cow::Owned(p.sparsify(dy)?)
            }
            _ => Cow::Borrowed(dy),
        };
        let selected = match self.policy.as_ref() {
            Some(p) if p.enabled() => {
                let layout = p.layout();
                let batch = dy.shape()[0];
                batch * layout.maps * p.k_per_map()
            }
            _ => dy.len(),
        };
        self.stats = GateStats {
            len: dy.len(),
            nnz_in,
            selected,
        };
        Ok(out)
    }
}

/// Layers whose output gradient can be routed through a meProp policy.
pub trait Sparsifiable<T: Scalar> {
    fn gate(&self) -> &GradientGate<T>;
    fn gate_mut(&mut self) -> &mut GradientGate<T>;

    /// After attaching, the layer's backward receives `sparsify(dy)` for both
    /// its weight and input gradients. Attaching twice is a state error.
    fn attach(&mut self, policy: MePropPolicy<T>) -> Result<()> {
        self.gate_mut().attach(policy)
    }

    fn detach(&mut self) -> Option<MePropPolicy<T>> {
        self.gate_mut().detach()
    }
}
