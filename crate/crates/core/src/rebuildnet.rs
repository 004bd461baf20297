//! RebuildNet decoder: keypoint descriptors → reconstructed pressure map.
//!
//! Layout for base resolution `R` (64 by default):
//!
//! ```text
//! stem      FC (k·2f → c0·(R/2)²), reshape to (c0, R/2, R/2)
//! block0    expansion   c0 → w0, ×2 upsample          → R
//! block1    route split (strided convs) + exchange     → routes at R, R/2, R/4, R/8
//! block2    expansion   w0 → w0 on route 0, no resize  → R
//! block3    exchange, fused into route 0 only          → R
//! [block4, block5: expansions ×2 when the output resolution is 4R]
//! head      conv3×3 w0→w0, relu, conv3×3 w0→{2|1}, channel softmax when classifying
//! ```
//!
//! Expansion branches (dilations 1, 3, 5) are summed, not concatenated.
//! Exchange contributions: same route 1×1 conv, finer→coarser `s×s` conv with
//! stride `s`, coarser→finer 1×1 conv followed by bilinear ×`s`.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels::Conv2dGeom;
use crate::layers::{Conv2d, Linear};
use crate::opcount::LayerDesc;
use crate::params::{Bound, Initializer, ParamStore};
use crate::tensor::Scalar;

pub const DILATIONS: [usize; 3] = [1, 3, 5];
pub const ROUTE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
/// Parameter namespace replaced when the task head is swapped.
pub const HEAD_PREFIX: &str = "decoder.head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// Two channels: pressure absent (0) / present (1), softmaxed.
    Classification,
    /// One channel: reconstructed pressure.
    Regression,
}

impl HeadMode {
    pub fn channels(self) -> usize {
        match self {
            HeadMode::Classification => 2,
            HeadMode::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub stem_channels: usize,
    pub route_widths: [usize; 4],
    pub dilations: [usize; 3],
    pub width_mult: f64,
    pub head: HeadMode,
    /// Resolution of the backbone's finest route (64 by default).
    pub base_resolution: usize,
    /// Either `base_resolution` or `4 · base_resolution`.
    pub output_resolution: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            stem_channels: 16,
            route_widths: ROUTE_WIDTHS,
            dilations: DILATIONS,
            width_mult: 1.0,
            head: HeadMode::Classification,
            base_resolution: 64,
            output_resolution: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult <= 1.0) {
            return Err(Error::Structure(format!("width_mult {} outside (0, 1]", self.width_mult)));
        }
        if self.dilations != DILATIONS {
            return Err(Error::Structure(format!("expansion dilations must be {DILATIONS:?}")));
        }
        if !self.base_resolution.is_multiple_of(16) || self.base_resolution == 0 {
            return Err(Error::Structure(format!(
                "base resolution {} must be a positive multiple of 16",
                self.base_resolution
            )));
        }
        if self.output_resolution != self.base_resolution && self.output_resolution != 4 * self.base_resolution {
            return Err(Error::Structure(format!(
                "output resolution {} must be {} or {}",
                self.output_resolution,
                self.base_resolution,
                4 * self.base_resolution
            )));
        }
        if self.stem_channels == 0 || self.route_widths.contains(&0) {
            return Err(Error::Structure("decoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Route widths after applying the width multiplier (at least 1).
    pub fn scaled_widths(&self) -> [usize; 4] {
        self.route_widths.map(|w| libm::round(w as f64 * self.width_mult).max(1.0) as usize)
    }

    pub fn stem_resolution(&self) -> usize {
        self.base_resolution / 2
    }
}

/// Three parallel dilated 3×3 convolutions, summed, relu, bilinear upsample.
#[derive(Clone, Debug)]
pub struct ExpansionLayer {
    pub branches: [Conv2d; 3],
    pub scale: usize,
}

impl ExpansionLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        scale: usize,
    ) -> Self {
        let gain = 1.0 / libm::sqrt(DILATIONS.len() as f64);
        let branches = DILATIONS.map(|d| {
            Conv2d::with_gain(store, init, &format!("{name}.dil{d}"), cin, cout, 3, Conv2dGeom::new(1, d, d), gain)
        });
        ExpansionLayer { branches, scale }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let max_d = DILATIONS[2];
        if s.len() != 4 || s[2] <= max_d || s[3] <= max_d {
            return dim_err("expansion_layer", format!("input {s:?} too small for the dilation-{max_d} footprint"));
        }
        let mut acc = self.branches[0].forward(tape, p, x)?;
        for b in &self.branches[1..] {
            let y = b.forward(tape, p, x)?;
            acc = tape.add(acc, y)?;
        }
        let acc = tape.relu(acc);
        tape.upsample_bilinear(acc, self.scale)
    }

    pub fn describe(&self, in_hw: usize) -> Vec<LayerDesc> {
        let mut out: Vec<LayerDesc> = self.branches.iter().map(|b| b.describe(in_hw)).collect();
        if self.scale > 1 {
            out.push(LayerDesc::Free { name: format!("{}.upsample", self.branches[0].name) });
        }
        out
    }
}

/// Contribution of one input route to one output route.
#[derive(Clone, Debug)]
enum Path {
    Same(Conv2d),
    Down(Conv2d),
    Up { project: Conv2d, scale: usize },
}

/// Four-route feature exchange. Output route `i` sums the resampled,
/// projected contributions of all input routes.
#[derive(Clone, Debug)]
pub struct ExchangeLayer {
    pub widths: [usize; 4],
    /// `paths[out][in]`; only the first `outputs` rows exist.
    paths: Vec<[Path; 4]>,
}

impl ExchangeLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        widths: [usize; 4],
        outputs: usize,
    ) -> Self {
        // four summed contributions, no nonlinearity after: variance-preserving
        let gain = libm::sqrt(0.5 / 4.0);
        let paths = (0..outputs)
            .map(|o| {
                core::array::from_fn(|i| {
                    let pname = format!("{name}.to{o}.from{i}");
                    match i.cmp(&o) {
                        core::cmp::Ordering::Equal => Path::Same(Conv2d::with_gain(
                            store,
                            init,
                            &pname,
                            widths[i],
                            widths[o],
                            1,
                            Conv2dGeom::default(),
                            gain,
                        )),
                        core::cmp::Ordering::Less => {
                            let s = 1 << (o - i);
                            Path::Down(Conv2d::with_gain(
                                store,
                                init,
                                &pname,
                                widths[i],
                                widths[o],
                                s,
                                Conv2dGeom::new(s, 0, 1),
                                gain,
                            ))
                        }
                        core::cmp::Ordering::Greater => Path::Up {
                            project: Conv2d::with_gain(
                                store,
                                init,
                                &pname,
                                widths[i],
                                widths[o],
                                1,
                                Conv2dGeom::default(),
                                gain,
                            ),
                            scale: 1 << (i - o),
                        },
                    }
                })
            })
            .collect();
        ExchangeLayer { widths, paths }
    }

    pub fn outputs(&self) -> usize {
        self.paths.len()
    }

    fn path_conv(p: &Path) -> &Conv2d {
        match p {
            Path::Same(c) | Path::Down(c) | Path::Up { project: c, .. } => c,
        }
    }

    /// Same-route convolution feeding output route `route`.
    pub fn self_path(&self, route: usize) -> &Conv2d {
        Self::path_conv(&self.paths[route][route])
    }

    /// All convolutions feeding output `route` from other routes.
    pub fn cross_paths(&self, route: usize) -> impl Iterator<Item = &Conv2d> {
        self.paths[route].iter().enumerate().filter(move |(i, _)| *i != route).map(|(_, p)| Self::path_conv(p))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, routes: &[Var]) -> Result<Vec<Var>> {
        if routes.len() != 4 {
            return Err(Error::Structure(format!("exchange layer needs 4 routes, got {}", routes.len())));
        }
        let base = tape.shape(routes[0]).to_vec();
        for (i, &r) in routes.iter().enumerate() {
            let s = tape.shape(r);
            let want = [base[0], self.widths[i], base[2] >> i, base[3] >> i];
            if s != want {
                return dim_err("exchange_layer", format!("route {i} is {s:?}, expected {want:?}"));
            }
        }
        let mut outs = Vec::with_capacity(self.paths.len());
        for row in &self.paths {
            let mut acc: Option<Var> = None;
            for (i, path) in row.iter().enumerate() {
                let y = match path {
                    Path::Same(c) | Path::Down(c) => c.forward(tape, p, routes[i])?,
                    Path::Up { project, scale } => {
                        let y = project.forward(tape, p, routes[i])?;
                        tape.upsample_bilinear(y, *scale)?
                    }
                };
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
            }
            outs.push(acc.expect("four paths"));
        }
        Ok(outs)
    }

    pub fn describe(&self, base: usize) -> Vec<LayerDesc> {
        let mut out = Vec::new();
        for row in &self.paths {
            for (i, path) in row.iter().enumerate() {
                out.push(Self::path_conv(path).describe(base >> i));
            }
        }
        out
    }
}

/// Strided convolutions deriving routes 1–3 from route 0.
#[derive(Clone, Debug)]
struct RouteSplit {
    downs: [Conv2d; 3],
}

impl RouteSplit {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, widths: [usize; 4]) -> Self {
        let downs = core::array::from_fn(|j| {
            let i = j + 1;
            let s = 1 << i;
            Conv2d::new(store, init, &format!("{name}.split{i}"), widths[0], widths[i], s, Conv2dGeom::new(s, 0, 1))
        });
        RouteSplit { downs }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut routes = vec![x];
        for d in &self.downs {
            let y = d.forward(tape, p, x)?;
            routes.push(tape.relu(y));
        }
        Ok(routes)
    }
}

/// Two 3×3 convolutions; the unit swapped between training phases.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv0: Conv2d,
    pub conv1: Conv2d,
    pub mode: HeadMode,
}

impl Head {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, width: usize, mode: HeadMode) -> Self {
        let g = Conv2dGeom::new(1, 1, 1);
        Head {
            conv0: Conv2d::new(store, init, "decoder.head.conv0", width, width, 3, g),
            // small logits at init keep the softmax away from saturation
            conv1: Conv2d::with_gain(store, init, "decoder.head.conv1", width, mode.channels(), 3, g, 0.1),
            mode,
        }
    }

    pub fn layer_count(&self) -> usize {
        2
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub k: usize,
    pub f: usize,
    pub stem: Linear,
    pub block0: ExpansionLayer,
    split: RouteSplit,
    pub block1: ExchangeLayer,
    pub block2: ExpansionLayer,
    pub block3: ExchangeLayer,
    pub extra: Vec<ExpansionLayer>,
    pub head: Head,
}

impl Decoder {
    pub fn new<T: Scalar>(
        cfg: &DecoderConfig,
        k: usize,
        f: usize,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.scaled_widths();
        let s = cfg.stem_resolution();
        let stem = Linear::new(store, init, "decoder.stem", k * 2 * f, cfg.stem_channels * s * s);
        let block0 = ExpansionLayer::new(store, init, "decoder.block0", cfg.stem_channels, w[0], 2);
        let split = RouteSplit::new(store, init, "decoder.block1", w);
        let block1 = ExchangeLayer::new(store, init, "decoder.block1.exchange", w, 4);
        let block2 = ExpansionLayer::new(store, init, "decoder.block2", w[0], w[0], 1);
        let block3 = ExchangeLayer::new(store, init, "decoder.block3.exchange", w, 1);
        let extra = if cfg.output_resolution == cfg.base_resolution {
            Vec::new()
        } else {
            (4..6).map(|b| ExpansionLayer::new(store, init, &format!("decoder.block{b}"), w[0], w[0], 2)).collect()
        };
        let head = Head::new(store, init, w[0], cfg.head);
        Ok(Decoder { config: cfg.clone(), k, f, stem, block0, split, block1, block2, block3, extra, head })
    }

    pub fn mode(&self) -> HeadMode {
        self.head.mode
    }

    /// Descriptors `(N, k, 2f)` → stem feature map `(N, c0, R/2, R/2)`.
    pub fn stem_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, desc: Var) -> Result<Var> {
        let s = tape.shape(desc).to_vec();
        if s.len() != 3 || s[1] != self.k || s[2] != 2 * self.f {
            return dim_err("stem", format!("descriptors {s:?}, expected (N, {}, {})", self.k, 2 * self.f));
        }
        let flat = tape.reshape(desc, &[s[0], self.k * 2 * self.f])?;
        let y = self.stem.forward(tape, p, flat)?;
        let r = self.config.stem_resolution();
        tape.reshape(y, &[s[0], self.config.stem_channels, r, r])
    }

    /// Backbone output (route 0 after the last exchange), before the head.
    pub fn backbone<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, desc: Var) -> Result<Var> {
        let x = self.stem_forward(tape, p, desc)?;
        let x = self.block0.forward(tape, p, x)?;
        let routes = self.split.forward(tape, p, x)?;
        let routes = self.block1.forward(tape, p, &routes)?;
        let r0 = self.block2.forward(tape, p, routes[0])?;
        let mut x = self.block3.forward(tape, p, &[r0, routes[1], routes[2], routes[3]])?[0];
        for e in &self.extra {
            x = e.forward(tape, p, x)?;
        }
        Ok(x)
    }

    /// Full decode: `(N, k, 2f)` → `(N, C, out, out)` with C set by the head mode.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, desc: Var) -> Result<Var> {
        let x = self.backbone(tape, p, desc)?;
        let y = self.head.conv0.forward(tape, p, x)?;
        let y = tape.relu(y);
        let y = self.head.conv1.forward(tape, p, y)?;
        match self.head.mode {
            HeadMode::Classification => tape.softmax(y, 1),
            HeadMode::Regression => Ok(y),
        }
    }

    /// Replaces the head with freshly initialised layers for `mode`. Every
    /// parameter outside [`HEAD_PREFIX`] is left untouched.
    pub fn swap_head<T: Scalar>(&mut self, store: &mut ParamStore<T>, init: &mut Initializer, mode: HeadMode) {
        self.head.conv0.reinit(store, init);
        self.head.conv1.cout = mode.channels();
        self.head.conv1.reinit(store, init);
        self.head.mode = mode;
        self.config.head = mode;
    }

    pub fn describe(&self) -> Vec<LayerDesc> {
        let cfg = &self.config;
        let base = cfg.base_resolution;
        let mut out = vec![self.stem.describe(1)];
        out.extend(self.block0.describe(cfg.stem_resolution()));
        out.extend(self.split.downs.iter().map(|d| d.describe(base)));
        out.extend(self.block1.describe(base));
        out.extend(self.block2.describe(base));
        out.extend(self.block3.describe(base));
        let mut hw = base;
        for e in &self.extra {
            out.extend(e.describe(hw));
            hw *= 2;
        }
        out.push(self.head.conv0.describe(hw));
        out.push(self.head.conv1.describe(hw));
        out.push(LayerDesc::Free { name: "decoder.head.activation".to_string() });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opcount::count_ops;
    use crate::tensor::Tensor;

    fn small_cfg(head: HeadMode) -> DecoderConfig {
        DecoderConfig { width_mult: 0.125, head, ..Default::default() }
    }

    fn build(cfg: &DecoderConfig) -> (ParamStore<f32>, Decoder) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(5);
        let dec = Decoder::new(cfg, 14, 8, &mut store, &mut init).unwrap();
        (store, dec)
    }

    fn run(store: &ParamStore<f32>, dec: &Decoder, desc: Tensor<f32>) -> Tensor<f32> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let d = tape.constant(desc);
        let y = dec.forward(&mut tape, &p, d).unwrap();
        tape.value(y).clone()
    }

    fn descriptors() -> Tensor<f32> {
        Tensor::from_fn(&[1, 14, 16], |i| ((i * 37 % 23) as f32 / 23.0) - 0.4)
    }

    #[test]
    fn classification_output_is_a_distribution() {
        let (store, dec) = build(&small_cfg(HeadMode::Classification));
        let y = run(&store, &dec, descriptors());
        assert_eq!(y.shape(), &[1, 2, 64, 64]);
        for p in 0..4096 {
            let s = y.data()[p] + y.data()[4096 + p];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn regression_output_shape_and_determinism() {
        let (store, dec) = build(&small_cfg(HeadMode::Regression));
        let a = run(&store, &dec, descriptors());
        let b = run(&store, &dec, descriptors());
        assert_eq!(a.shape(), &[1, 1, 64, 64]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn stem_weight_count_and_zero_input() {
        let (mut store, dec) = build(&small_cfg(HeadMode::Regression));
        assert_eq!(store.value(dec.stem.weight).len(), (14 * 16) * (16 * 32 * 32));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let d = tape.constant(Tensor::zeros(&[1, 14, 16]));
        let y = dec.stem_forward(&mut tape, &p, d).unwrap();
        assert_eq!(tape.shape(y), &[1, 16, 32, 32]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        // wrong descriptor width
        let bad = tape.constant(Tensor::zeros(&[1, 14, 15]));
        assert!(dec.stem_forward(&mut tape, &p, bad).is_err());
        store.zero_grads();
    }

    #[test]
    fn swap_head_keeps_backbone_bits() {
        let (mut store, mut dec) = build(&small_cfg(HeadMode::Classification));
        let before: Vec<(alloc::string::String, Tensor<f32>)> =
            store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let mut init = Initializer::new(99);
        dec.swap_head(&mut store, &mut init, HeadMode::Regression);
        dec.swap_head(&mut store, &mut init, HeadMode::Classification);
        dec.swap_head(&mut store, &mut init, HeadMode::Regression);
        assert_eq!(dec.head.layer_count(), 2);
        for (name, old) in &before {
            let new = store.value(store.id(name).unwrap());
            if name.starts_with(HEAD_PREFIX) {
                if name.ends_with("weight") {
                    assert!(!new.bit_eq(old), "{name} not reinitialised");
                }
            } else {
                assert!(new.bit_eq(old), "{name} changed");
            }
        }
        let y = run(&store, &dec, descriptors());
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
    }

    #[test]
    fn exchange_rejects_wrong_route_count() {
        let (store, dec) = build(&small_cfg(HeadMode::Regression));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 8, 64, 64]));
        assert!(matches!(dec.block1.forward(&mut tape, &p, &[x, x, x]), Err(Error::Structure(_))));
    }

    #[test]
    fn described_params_match_store() {
        for out in [64, 256] {
            let cfg = DecoderConfig { output_resolution: out, ..small_cfg(HeadMode::Regression) };
            let (store, dec) = build(&cfg);
            let counted = count_ops(&dec.describe()).unwrap();
            assert_eq!(counted.params as usize, store.numel());
            let y = if out == 64 { Some(run(&store, &dec, descriptors())) } else { None };
            if let Some(y) = y {
                assert_eq!(y.shape(), &[1, 1, 64, 64]);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(DecoderConfig { width_mult: 0.0, ..Default::default() }.validate().is_err());
        assert!(DecoderConfig { dilations: [1, 2, 3], ..Default::default() }.validate().is_err());
        assert!(DecoderConfig { output_resolution: 128, ..Default::default() }.validate().is_err());
    }
}
