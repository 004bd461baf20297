//! Differentiable keypoint pooling.
//!
//! Heatmap logits become per-keypoint pixel weights that sum to one; positions
//! and features are the weight-averaged grid coordinates and pixel features,
//! so no argmax ever interrupts the gradient. Pixels are flattened row-major.
//!
//! ```text
//! W   = normalize(sigmoid(H))        (N, k, P)
//! K_C = W · Cᵀ                       (N, k, 3)
//! K_F = W · Fᵀ                       (N, k, f)
//! K_C' = K_C · A + a                 (N, k, f)   learned 3→f projection
//! out = [K_C' | K_F]                 (N, k, 2f)
//! ```

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::encoder::{FeatureGrid, HeatmapStack, PositionalGrid};
use crate::error::{dim_err, Result};
use crate::layers::Linear;
use crate::opcount::LayerDesc;
use crate::params::{Bound, Initializer, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// How heatmap logits become pooling weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeatmapNorm {
    /// `sigmoid(h) / Σ sigmoid(h)` per keypoint.
    #[default]
    Sigmoid,
    /// Plain softmax per keypoint, for comparison.
    Softmax,
}

/// Fused keypoint descriptors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet<T> {
    /// `(k, 3)` pooled homogeneous coordinates.
    pub positions: Tensor<T>,
    /// `(k, f)` pooled features.
    pub features: Tensor<T>,
    /// `(k, 2f)` projected positions followed by features.
    pub descriptors: Tensor<T>,
}

impl<T: Scalar> KeypointSet<T> {
    pub fn k(&self) -> usize {
        self.positions.shape()[0]
    }
}

/// Tape handles produced by [`Fuser::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FuserVars {
    pub weights: Var,
    pub positions: Var,
    pub features: Var,
    pub descriptors: Var,
}

#[derive(Clone, Debug)]
pub struct Fuser {
    pub k: usize,
    pub f: usize,
    pub norm: HeatmapNorm,
    projection: Linear,
}

/// `sigmoid(logits) / Σ sigmoid(logits)` for each row of a `(k, P)` slice.
pub fn normalize_heatmap<T: Scalar>(h: &HeatmapStack<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let x = tape.constant(h.scores.clone());
    let w = pooling_weights(&mut tape, x, HeatmapNorm::Sigmoid).expect("heatmap is 3-D");
    tape.value(w).clone()
}

fn pooling_weights<T: Scalar>(tape: &mut Tape<T>, heat: Var, norm: HeatmapNorm) -> Result<Var> {
    let s = tape.shape(heat).to_vec();
    let (lead, p) = match s.len() {
        3 => (s[..1].to_vec(), s[1] * s[2]),
        4 => (s[..2].to_vec(), s[2] * s[3]),
        _ => return dim_err("fuse", format!("heatmap {s:?}")),
    };
    let mut flat = lead;
    flat.push(p);
    let logits = tape.reshape(heat, &flat)?;
    let last = flat.len() - 1;
    Ok(match norm {
        HeatmapNorm::Sigmoid => {
            let s = tape.sigmoid(logits);
            tape.normalize_last(s)
        }
        HeatmapNorm::Softmax => tape.softmax(logits, last)?,
    })
}

impl Fuser {
    pub fn new<T: Scalar>(
        k: usize,
        f: usize,
        norm: HeatmapNorm,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
    ) -> Self {
        let projection = Linear::new(store, init, "fuser.proj", 3, f);
        Fuser { k, f, norm, projection }
    }

    /// `heat` is `(N, k, h, w)`, `feats` is `(N, f, h, w)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        heat: Var,
        feats: Var,
        grid: &PositionalGrid<T>,
    ) -> Result<FuserVars> {
        let hs = tape.shape(heat).to_vec();
        let fs = tape.shape(feats).to_vec();
        let (gh, gw) = (grid.height(), grid.width());
        if hs.len() != 4 || fs.len() != 4 || hs[0] != fs[0] || hs[2..] != fs[2..] || hs[2..] != [gh, gw] {
            return dim_err("fuse", format!("heatmap {hs:?}, features {fs:?}, grid {gh}x{gw}"));
        }
        if hs[1] != self.k || fs[1] != self.f {
            return dim_err("fuse", format!("expected k={} f={}, got heatmap {hs:?} features {fs:?}", self.k, self.f));
        }
        let (n, pix) = (hs[0], gh * gw);
        let weights = pooling_weights(tape, heat, self.norm)?;

        // Cᵀ replicated over the batch: (N, P, 3)
        let mut ct = Vec::with_capacity(n * pix * 3);
        let cd = grid.coords.data();
        for _ in 0..n {
            for px in 0..pix {
                ct.extend((0..3).map(|c| cd[c * pix + px]));
            }
        }
        let ct = tape.constant(Tensor::new(&[n, pix, 3], ct)?);
        let positions = tape.matmul(weights, ct)?;

        let f_flat = tape.reshape(feats, &[n, self.f, pix])?;
        let f_t = tape.transpose_last2(f_flat)?;
        let features = tape.matmul(weights, f_t)?;

        let pos_rows = tape.reshape(positions, &[n * self.k, 3])?;
        let projected = self.projection.forward(tape, p, pos_rows)?;
        let projected = tape.reshape(projected, &[n, self.k, self.f])?;
        let descriptors = tape.concat(projected, features, 2)?;
        Ok(FuserVars { weights, positions, features, descriptors })
    }

    /// Single-sample convenience wrapper around [`Fuser::forward`].
    pub fn fuse<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &HeatmapStack<T>,
        c: &PositionalGrid<T>,
        f: &FeatureGrid<T>,
    ) -> Result<KeypointSet<T>> {
        let (hs, fs) = (h.scores.shape(), f.features.shape());
        if hs.len() != 3 || fs.len() != 3 {
            return dim_err("fuse", format!("heatmap {hs:?}, features {fs:?}"));
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let heat = tape.constant(h.scores.clone().reshape(&[1, hs[0], hs[1], hs[2]])?);
        let feats = tape.constant(f.features.clone().reshape(&[1, fs[0], fs[1], fs[2]])?);
        let v = self.forward(&mut tape, &bound, heat, feats, c)?;
        Ok(KeypointSet {
            positions: tape.value(v.positions).clone().reshape(&[self.k, 3])?,
            features: tape.value(v.features).clone().reshape(&[self.k, self.f])?,
            descriptors: tape.value(v.descriptors).clone().reshape(&[self.k, 2 * self.f])?,
        })
    }

    pub fn describe(&self) -> Vec<LayerDesc> {
        alloc::vec![self.projection.describe(self.k)]
    }
}
