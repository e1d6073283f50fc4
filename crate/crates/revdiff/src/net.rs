//! The two trainable networks and their persistence.
//!
//! A controllable Unet predicts noise from a 2-channel spectrogram input
//! (latent + source) conditioned on a timestep embedding and a 256-dim scene
//! embedding; a small convolutional encoder produces that embedding from a
//! 64×64 room rendering and is pretrained contrastively, then frozen.
//!
//! Cross-attention here uses a single scene token as its context. Softmax
//! over one key is identically 1, so the query/key projections cancel out of
//! both the value and the gradient; the layer is therefore implemented in its
//! exact reduced form: a broadcast value projection of the scene embedding.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{c, Grads, Idx, Scalar, Tape};
use crate::diffusion::{Grid, NoisePredictor};
use crate::error::{Result, RevdiffError};
use crate::acoustics::RT60_RANGE;
use crate::scenes::{SceneImage, IMG_SIZE};

const IMG: usize = IMG_SIZE as usize;

pub const SCENE_DIM: usize = 256;
pub const RT60_BINS: usize = 8;

/// Architecture hyperparameters shared by both converters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base: usize,
    pub resolution: usize,
    /// Stride ladder: stem, encoder down 1, encoder down 2.
    pub strides: [usize; 3],
    pub heads: usize,
    pub groups: usize,
    pub temb_dim: usize,
    pub scene_dim: usize,
}

impl NetConfig {
    /// Desk-scale geometry: 128² → 32² → 8² → 4² and back.
    pub fn desk(base: usize) -> Self {
        Self {
            base,
            resolution: 128,
            strides: [4, 4, 2],
            heads: 4,
            groups: 8,
            temb_dim: 64,
            scene_dim: SCENE_DIM,
        }
    }

    /// Miniature geometry for finite-difference gradient verification.
    pub fn mini() -> Self {
        Self {
            base: 4,
            resolution: 16,
            strides: [4, 2, 2],
            heads: 4,
            groups: 4,
            temb_dim: 8,
            scene_dim: 16,
        }
    }

    /// Spatial sizes at the three encoder levels.
    pub fn levels(&self) -> [usize; 3] {
        let l0 = self.resolution / self.strides[0];
        let l1 = l0 / self.strides[1];
        let l2 = l1 / self.strides[2];
        [l0, l1, l2]
    }

    fn attn_dim(&self, ch: usize, spatial: usize) -> usize {
        if spatial >= 16 { ch * 16 } else { ch }
    }

    pub fn validate(&self) -> Result<()> {
        let [s0, s1, s2] = self.strides;
        if self.resolution % s0 != 0
            || (self.resolution / s0) % s1 != 0
            || (self.resolution / s0 / s1) % s2 != 0
            || self.resolution / s0 / s1 / s2 == 0
        {
            return Err(RevdiffError::InvalidArgument(format!(
                "resolution {} not divisible by stride ladder {:?}",
                self.resolution, self.strides
            )));
        }
        let [l0, _, _] = self.levels();
        if l0 >= 16 && l0 % 4 != 0 {
            return Err(RevdiffError::InvalidArgument(
                "level-0 spatial size must allow the stride-4 reduction".into(),
            ));
        }
        for (ch, spatial) in
            [(self.base, l0), (2 * self.base, self.levels()[1]), (4 * self.base, self.levels()[2])]
        {
            if self.attn_dim(ch, spatial) % self.heads != 0 {
                return Err(RevdiffError::InvalidArgument(format!(
                    "attention dim {} not divisible by {} heads",
                    self.attn_dim(ch, spatial),
                    self.heads
                )));
            }
            if ch % gn_groups(self.groups, ch) != 0 {
                return Err(RevdiffError::InvalidArgument("bad group-norm split".into()));
            }
        }
        Ok(())
    }
}

fn gn_groups(groups: usize, ch: usize) -> usize {
    groups.min(ch)
}

/// Sinusoidal timestep embedding, `[1, dim]`.
pub fn time_embedding<F: Scalar>(t: usize, dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut e = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        e[[0, i]] = c(arg.sin());
        e[[0, half + i]] = c(arg.cos());
    }
    e
}

/// Named parameter collection with deterministic ordering.
#[derive(Clone)]
pub struct ParamSet<F: Scalar> {
    pub names: Vec<String>,
    pub arrays: Vec<ArrayD<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }
}

struct ParamBuilder<F: Scalar> {
    rng: ChaCha8Rng,
    set: ParamSet<F>,
}

impl<F: Scalar> ParamBuilder<F> {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            set: ParamSet { names: Vec::new(), arrays: Vec::new() },
        }
    }

    fn push(&mut self, name: &str, a: ArrayD<F>) -> usize {
        self.set.names.push(name.to_string());
        self.set.arrays.push(a);
        self.set.arrays.len() - 1
    }

    fn randn(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            c::<F>(self.rng.sample::<f64, _>(StandardNormal) * std)
        })
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> (usize, usize) {
        let std = (1.0 / (cin * k * k) as f64).sqrt();
        let w = self.randn(&[cout, cin, k, k], std);
        let wi = self.push(&format!("{name}.w"), w);
        let bi = self.push(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        (wi, bi)
    }

    fn zero_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> (usize, usize) {
        let wi = self.push(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[cout, cin, k, k])));
        let bi = self.push(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        (wi, bi)
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> (usize, usize) {
        let std = (1.0 / inp as f64).sqrt();
        let w = self.randn(&[out, inp], std);
        let wi = self.push(&format!("{name}.w"), w);
        let bi = self.push(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
        (wi, bi)
    }

    fn gn(&mut self, name: &str, ch: usize) -> (usize, usize) {
        let gi = self.push(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[ch]), F::one()));
        let bi = self.push(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[ch])));
        (gi, bi)
    }
}

/// Parameter leaves of one model bound to a tape.
pub struct Bound {
    pub leaves: Vec<Idx>,
}

/// The controllable Unet.
pub struct UNet<F: Scalar> {
    pub cfg: NetConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> UNet<F> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base;
        let mut pb = ParamBuilder::new(seed);
        pb.conv("stem", b, 2, cfg.strides[0]);
        Self::block_params(&mut pb, &cfg, "e1", b, b, false);
        pb.conv("down1", 2 * b, b, cfg.strides[1]);
        Self::block_params(&mut pb, &cfg, "e2", 2 * b, 2 * b, false);
        pb.conv("down2", 4 * b, 2 * b, cfg.strides[2]);
        Self::block_params(&mut pb, &cfg, "e3", 4 * b, 4 * b, true);
        Self::block_params(&mut pb, &cfg, "d1", 4 * b, 4 * b, true);
        // Upsampling is pixel-shuffle (conv to f²·out channels, then
        // depth-to-space), mirroring the strided stem so per-pixel detail at
        // the finer level stays representable.
        pb.conv("up1", 2 * b * cfg.strides[2] * cfg.strides[2], 4 * b, 3);
        Self::block_params(&mut pb, &cfg, "d2", 4 * b, 2 * b, false);
        pb.conv("up2", b * cfg.strides[1] * cfg.strides[1], 2 * b, 3);
        Self::block_params(&mut pb, &cfg, "d3", 2 * b, b, false);
        pb.gn("head.gn", b);
        pb.conv("head.conv", b, b, 3);
        pb.zero_conv("head.out", cfg.strides[0] * cfg.strides[0], b, 3);
        // Time-gated full-resolution input skip. At narrow widths the strided
        // ladder cannot carry per-pixel detail end to end, so the prediction
        // may also include a learned, step-dependent multiple of the raw
        // input channels. Zero-init projection keeps the initial output ≡ 0.
        pb.linear("skip.temb1", cfg.temb_dim / 2, cfg.temb_dim);
        pb.linear("skip.temb2", 1, cfg.temb_dim / 2);
        pb.zero_conv("skip.proj", 1, 2, 1);
        Ok(Self { cfg, params: pb.set })
    }

    /// Residual block + self-attention (+ optional scene conditioning).
    fn block_params(
        pb: &mut ParamBuilder<F>,
        cfg: &NetConfig,
        name: &str,
        cin: usize,
        cout: usize,
        cross: bool,
    ) {
        pb.gn(&format!("{name}.gn1"), cin);
        pb.conv(&format!("{name}.conv1"), cout, cin, 3);
        pb.linear(&format!("{name}.temb"), cout, cfg.temb_dim);
        pb.gn(&format!("{name}.gn2"), cout);
        pb.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            pb.conv(&format!("{name}.skip"), cout, cin, 1);
        }
        pb.gn(&format!("{name}.attn_gn"), cout);
        // Attention dim depends on placement; sized at forward time from the
        // spatial extent, so store at the widest (space-to-depth) dim only
        // when the block's level uses it.
        let spatial = Self::block_spatial(cfg, name);
        let d = cfg.attn_dim(cout, spatial);
        pb.linear(&format!("{name}.attn_qkv"), 3 * d, d);
        pb.linear(&format!("{name}.attn_out"), d, d);
        if cross {
            pb.linear(&format!("{name}.cross_val"), cout, cfg.scene_dim);
            pb.linear(&format!("{name}.cross_out"), cout, cout);
        }
    }

    fn block_spatial(cfg: &NetConfig, name: &str) -> usize {
        let [l0, l1, l2] = cfg.levels();
        match name {
            "e1" | "d3" => l0,
            "e2" | "d2" => l1,
            _ => l2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound { leaves: self.params.arrays.iter().map(|a| tape.leaf(a.clone())).collect() }
    }

    fn pidx(&self, name: &str) -> usize {
        self.params
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("missing param {name}"))
    }

    fn p(&self, bound: &Bound, name: &str) -> Idx {
        bound.leaves[self.pidx(name)]
    }

    fn conv_op(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        name: &str,
        x: Idx,
        stride: usize,
        pad: usize,
    ) -> Idx {
        let w = self.p(bound, &format!("{name}.w"));
        let b = self.p(bound, &format!("{name}.b"));
        tape.conv2d(x, w, b, stride, pad)
    }

    fn gn_op(&self, tape: &mut Tape<F>, bound: &Bound, name: &str, x: Idx, ch: usize) -> Idx {
        let g = self.p(bound, &format!("{name}.gamma"));
        let b = self.p(bound, &format!("{name}.beta"));
        tape.group_norm(x, g, b, gn_groups(self.cfg.groups, ch))
    }

    fn self_attn(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        name: &str,
        x: Idx,
        ch: usize,
        spatial: usize,
    ) -> Idx {
        let h = self.gn_op(tape, bound, &format!("{name}.attn_gn"), x, ch);
        let reduce = spatial >= 16;
        let (work, d, s) = if reduce {
            (tape.space_to_depth(h, 4), ch * 16, spatial / 4)
        } else {
            (h, ch, spatial)
        };
        let n = s * s;
        let flat = tape.reshape(work, &[d, n]);
        let tokens = tape.transpose(flat); // [n, d]
        let wq = self.p(bound, &format!("{name}.attn_qkv.w"));
        let bq = self.p(bound, &format!("{name}.attn_qkv.b"));
        let qkv = tape.linear(tokens, wq, bq); // [n, 3d]
        let dh = d / self.cfg.heads;
        let scale = c::<F>(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh);
            let k = tape.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh);
            let v = tape.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
            let kt = tape.transpose(k);
            let logits = tape.matmul(q, kt);
            let scaled = tape.scale(logits, scale);
            let attn = tape.softmax_rows(scaled);
            heads.push(tape.matmul(attn, v));
        }
        let merged = tape.concat_cols(&heads); // [n, d]
        let wo = self.p(bound, &format!("{name}.attn_out.w"));
        let bo = self.p(bound, &format!("{name}.attn_out.b"));
        let out = tape.linear(merged, wo, bo);
        let back = tape.transpose(out);
        let grid = tape.reshape(back, &[d, s, s]);
        let restored = if reduce { tape.depth_to_space(grid, 4) } else { grid };
        tape.add(x, restored)
    }

    fn cross_attn(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        name: &str,
        x: Idx,
        scene: Idx,
    ) -> Idx {
        let wv = self.p(bound, &format!("{name}.cross_val.w"));
        let bv = self.p(bound, &format!("{name}.cross_val.b"));
        let val = tape.linear(scene, wv, bv); // [1, ch]
        let wo = self.p(bound, &format!("{name}.cross_out.w"));
        let bo = self.p(bound, &format!("{name}.cross_out.b"));
        let out = tape.linear(val, wo, bo);
        let ch = self.params.arrays[self.pidx(&format!("{name}.cross_out.b"))].len();
        let bias = tape.reshape(out, &[ch]);
        tape.add_channel_bias(x, bias)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        name: &str,
        x: Idx,
        cin: usize,
        cout: usize,
        temb: Idx,
        scene: Option<Idx>,
    ) -> Idx {
        let h = self.gn_op(tape, bound, &format!("{name}.gn1"), x, cin);
        let h = tape.silu(h);
        let h = self.conv_op(tape, bound, &format!("{name}.conv1"), h, 1, 1);
        let tw = self.p(bound, &format!("{name}.temb.w"));
        let tb = self.p(bound, &format!("{name}.temb.b"));
        let tproj = tape.linear(temb, tw, tb); // [1, cout]
        let tbias = tape.reshape(tproj, &[cout]);
        let h = tape.add_channel_bias(h, tbias);
        let h = self.gn_op(tape, bound, &format!("{name}.gn2"), h, cout);
        let h = tape.silu(h);
        let h = self.conv_op(tape, bound, &format!("{name}.conv2"), h, 1, 1);
        let skip = if cin == cout {
            x
        } else {
            self.conv_op(tape, bound, &format!("{name}.skip"), x, 1, 0)
        };
        let mut h = tape.add(h, skip);
        let spatial = Self::block_spatial(&self.cfg, name);
        h = self.self_attn(tape, bound, name, h, cout, spatial);
        if let Some(s) = scene {
            h = self.cross_attn(tape, bound, name, h, s);
        }
        h
    }

    /// Full forward pass. `latent` and `source` are `[1, res, res]` nodes;
    /// returns the `[1, res, res]` noise-prediction node.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        latent: Idx,
        source: Idx,
        t: usize,
        scene: &[F],
    ) -> Idx {
        assert_eq!(scene.len(), self.cfg.scene_dim, "scene embedding dim");
        let b = self.cfg.base;
        let [s0, s1, s2] = self.cfg.strides;
        let temb = tape.leaf2(time_embedding::<F>(t, self.cfg.temb_dim));
        let scene_node =
            tape.leaf2(Array2::from_shape_vec((1, scene.len()), scene.to_vec()).unwrap());

        let x = tape.concat_channels(latent, source);
        let h = self.conv_op(tape, bound, "stem", x, s0, 0);
        let e1 = self.block(tape, bound, "e1", h, b, b, temb, None);
        let h = self.conv_op(tape, bound, "down1", e1, s1, 0);
        let e2 = self.block(tape, bound, "e2", h, 2 * b, 2 * b, temb, None);
        let h = self.conv_op(tape, bound, "down2", e2, s2, 0);
        let e3 = self.block(tape, bound, "e3", h, 4 * b, 4 * b, temb, Some(scene_node));

        let d1 = self.block(tape, bound, "d1", e3, 4 * b, 4 * b, temb, Some(scene_node));
        let h = self.conv_op(tape, bound, "up1", d1, 1, 1);
        let h = tape.depth_to_space(h, s2);
        let h = tape.concat_channels(h, e2);
        let d2 = self.block(tape, bound, "d2", h, 4 * b, 2 * b, temb, None);
        let h = self.conv_op(tape, bound, "up2", d2, 1, 1);
        let h = tape.depth_to_space(h, s1);
        let h = tape.concat_channels(h, e1);
        let d3 = self.block(tape, bound, "d3", h, 2 * b, b, temb, None);

        let h = self.gn_op(tape, bound, "head.gn", d3, b);
        let h = tape.silu(h);
        let h = self.conv_op(tape, bound, "head.conv", h, 1, 1);
        let h = self.conv_op(tape, bound, "head.out", h, 1, 1);
        let out = tape.depth_to_space(h, s0);

        let gw1 = self.p(bound, "skip.temb1.w");
        let gb1 = self.p(bound, "skip.temb1.b");
        let gh = tape.linear(temb, gw1, gb1);
        let gh = tape.silu(gh);
        let gw2 = self.p(bound, "skip.temb2.w");
        let gb2 = self.p(bound, "skip.temb2.b");
        let gate = tape.linear(gh, gw2, gb2); // [1, 1]
        let proj = self.conv_op(tape, bound, "skip.proj", x, 1, 0);
        let gated = tape.scale_by(proj, gate);
        tape.add(out, gated)
    }

    /// Forward on a throwaway tape, f64 grids in and out.
    pub fn infer(&self, x_t: &Grid, source: &Grid, t: usize, scene: &[f64]) -> Result<Grid> {
        let res = self.cfg.resolution;
        if x_t.dim() != (res, res) || source.dim() != (res, res) {
            return Err(RevdiffError::ShapeMismatch {
                expected: format!("({res}, {res})"),
                got: format!("{:?} / {:?}", x_t.dim(), source.dim()),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let latent = tape.leaf3(Array3::from_shape_fn((1, res, res), |(_, i, j)| {
            c::<F>(x_t[[i, j]])
        }));
        let src = tape.leaf3(Array3::from_shape_fn((1, res, res), |(_, i, j)| {
            c::<F>(source[[i, j]])
        }));
        let sc: Vec<F> = scene.iter().map(|&v| c(v)).collect();
        let out = self.forward(&mut tape, &bound, latent, src, t, &sc);
        let o = tape.value(out);
        Ok(Grid::from_shape_fn((res, res), |(i, j)| {
            o[[0, i, j]].to_f64().expect("finite activation")
        }))
    }
}

impl<F: Scalar> NoisePredictor for UNet<F> {
    fn predict_noise(&self, x_t: &Grid, source: &Grid, t: usize, scene: &[f64]) -> Result<Grid> {
        self.infer(x_t, source, t, scene)
    }
}

/// Visual scene encoder: 4 stride-2 conv stages, pooled and projected to a
/// unit 256-dim embedding.
pub struct SceneEncoder<F: Scalar> {
    pub params: ParamSet<F>,
    pub tau: f64,
    channels: [usize; 4],
}

impl<F: Scalar> SceneEncoder<F> {
    pub fn new(seed: u64, tau: f64) -> Self {
        let channels = [16, 32, 64, 128];
        let mut pb = ParamBuilder::new(seed ^ 0x5cee);
        let mut cin = 3;
        for (i, &ch) in channels.iter().enumerate() {
            pb.conv(&format!("s{i}.conv"), ch, cin, 4);
            pb.gn(&format!("s{i}.gn"), ch);
            cin = ch;
        }
        pb.linear("proj", SCENE_DIM, channels[3]);
        Self { params: pb.set, tau, channels }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound { leaves: self.params.arrays.iter().map(|a| tape.leaf(a.clone())).collect() }
    }

    fn p(&self, bound: &Bound, name: &str) -> Idx {
        let i = self
            .params
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("missing param {name}"));
        bound.leaves[i]
    }

    /// Embedding node `[1, 256]`, L2-normalized.
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, img: Idx) -> Idx {
        let mut h = img;
        for (i, &ch) in self.channels.iter().enumerate() {
            let w = self.p(bound, &format!("s{i}.conv.w"));
            let b = self.p(bound, &format!("s{i}.conv.b"));
            h = tape.conv2d(h, w, b, 2, 1);
            let g = self.p(bound, &format!("s{i}.gn.gamma"));
            let bb = self.p(bound, &format!("s{i}.gn.beta"));
            h = tape.group_norm(h, g, bb, gn_groups(8, ch));
            h = tape.silu(h);
        }
        let pooled = tape.gap(h); // [128]
        let row = tape.reshape(pooled, &[1, self.channels[3]]);
        let w = self.p(bound, "proj.w");
        let b = self.p(bound, "proj.b");
        let proj = tape.linear(row, w, b);
        tape.l2_normalize_rows(proj)
    }

    /// Deterministic unit embedding of a rendered scene.
    pub fn encode(&self, img: &SceneImage) -> Result<Vec<f64>> {
        self.encode_pixels(&img.pixels)
    }

    /// Same embedding from raw pixels, for scenes loaded from disk.
    pub fn encode_pixels(&self, pixels: &image::RgbImage) -> Result<Vec<f64>> {
        let arr = pixels_to_array::<F>(pixels)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let inp = tape.leaf3(arr);
        let emb = self.forward(&mut tape, &bound, inp);
        Ok(tape.value(emb).iter().map(|v| v.to_f64().unwrap()).collect())
    }
}

/// `[3, 64, 64]` array with channels scaled to `[0, 1]`.
pub fn image_to_array<F: Scalar>(img: &SceneImage) -> Result<Array3<F>> {
    pixels_to_array(&img.pixels)
}

/// `image_to_array` for raw pixels.
pub fn pixels_to_array<F: Scalar>(pixels: &image::RgbImage) -> Result<Array3<F>> {
    let (w, h) = pixels.dimensions();
    if (w, h) != (IMG_SIZE, IMG_SIZE) {
        return Err(RevdiffError::ShapeMismatch {
            expected: format!("{IMG_SIZE}x{IMG_SIZE}"),
            got: format!("{w}x{h}"),
        });
    }
    Ok(Array3::from_shape_fn((3, IMG, IMG), |(ch, y, x)| {
        c::<F>(pixels.get_pixel(x as u32, y as u32)[ch] as f64 / 255.0)
    }))
}

/// RT60 class label: 8 log-spaced bins over the generator's range.
pub fn rt60_bin(rt60: f64) -> usize {
    let (lo, hi) = (RT60_RANGE.0.ln(), RT60_RANGE.1.ln());
    let t = ((rt60.ln() - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((t * RT60_BINS as f64) as usize).min(RT60_BINS - 1)
}

/// Adam with standard moment defaults.
pub struct Adam<F: Scalar> {
    pub lr: f64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: usize,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, params: &ParamSet<F>) -> Self {
        Self {
            lr,
            m: params.arrays.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
            v: params.arrays.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[ArrayD<F>]) {
        self.t += 1;
        let b1 = c::<F>(0.9);
        let b2 = c::<F>(0.999);
        let eps = c::<F>(1e-8);
        let bc1 = c::<F>(1.0 - 0.9f64.powi(self.t as i32));
        let bc2 = c::<F>(1.0 - 0.999f64.powi(self.t as i32));
        let lr = c::<F>(self.lr);
        for i in 0..params.arrays.len() {
            let g = &grads[i];
            self.m[i] = self.m[i].mapv(|v| v * b1) + g.mapv(|v| v * (F::one() - b1));
            self.v[i] = self.v[i].mapv(|v| v * b2) + g.mapv(|v| v * v * (F::one() - b2));
            let upd = ndarray::Zip::from(&self.m[i]).and(&self.v[i]).map_collect(|&m, &v| {
                lr * (m / bc1) / ((v / bc2).sqrt() + eps)
            });
            params.arrays[i] = &params.arrays[i] - &upd;
        }
    }
}

/// Plain γ-scaled gradient descent.
pub fn sgd_step<F: Scalar>(params: &mut ParamSet<F>, grads: &[ArrayD<F>], lr: f64) {
    let lr = c::<F>(lr);
    for i in 0..params.arrays.len() {
        params.arrays[i] = &params.arrays[i] - &grads[i].mapv(|v| v * lr);
    }
}

/// Contrastive pretraining of the scene encoder on rt60-binned renderings.
/// Returns the per-epoch mean loss curve; the encoder is frozen afterwards by
/// convention (converter training never touches its parameters).
pub fn pretrain_encoder<F: Scalar>(
    enc: &mut SceneEncoder<F>,
    scenes: &[(SceneImage, usize)],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if scenes.len() < 4 {
        return Err(RevdiffError::InsufficientSamples { needed: 4, got: scenes.len() });
    }
    let imgs: Vec<Array3<F>> =
        scenes.iter().map(|(s, _)| image_to_array::<F>(s)).collect::<Result<_>>()?;
    let labels: Vec<usize> = scenes.iter().map(|&(_, l)| l).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(lr, &enc.params);
    let batch = 16.min(scenes.len());
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        // Shuffle then chunk; chunks keep ≥2 shared-class samples with high
        // probability at 8 bins, and singleton anchors are skipped anyway.
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let bound = enc.bind(&mut tape);
            let mut cols = Vec::with_capacity(chunk.len());
            let mut chunk_labels = Vec::with_capacity(chunk.len());
            for &ix in chunk {
                let inp = tape.leaf3(imgs[ix].clone());
                let emb = enc.forward(&mut tape, &bound, inp); // [1, 256]
                cols.push(tape.transpose(emb)); // [256, 1]
                chunk_labels.push(labels[ix]);
            }
            let zt = tape.concat_cols(&cols); // [256, n]
            let z = tape.transpose(zt); // [n, 256]
            let z2 = tape.transpose(z);
            let sims = tape.matmul(z, z2);
            let logits = tape.scale(sims, c::<F>(1.0 / enc.tau));
            let loss = match tape.supcon_from_logits(logits, &chunk_labels) {
                Ok(l) => l,
                // All-singleton chunk: skip it, other chunks still train.
                Err(_) => continue,
            };
            let lval = tape.scalar(loss).to_f64().unwrap();
            if !lval.is_finite() {
                return Err(RevdiffError::Training("non-finite contrastive loss".into()));
            }
            let grads = tape.backward(loss);
            let g: Vec<ArrayD<F>> =
                bound.leaves.iter().map(|&l| grads.get(l).clone()).collect();
            opt.step(&mut enc.params, &g);
            epoch_loss += lval;
            batches += 1;
        }
        if batches == 0 {
            return Err(RevdiffError::InvalidArgument(
                "no usable contrastive batch (all singleton classes)".into(),
            ));
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok(curve)
}

// --- checkpoint container ---------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"RVDF";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    kind: String,
    config: serde_json::Value,
    arrays: Vec<(String, Vec<usize>)>,
}

/// Atomically write a named-array checkpoint (f32 payload, little endian).
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    params: &ParamSet<F>,
) -> Result<()> {
    let header = CkptHeader {
        kind: kind.to_string(),
        config: config.clone(),
        arrays: params
            .names
            .iter()
            .zip(params.arrays.iter())
            .map(|(n, a)| (n.clone(), a.shape().to_vec()))
            .collect(),
    };
    let hbytes = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&CKPT_VERSION.to_le_bytes())?;
        f.write_all(&(hbytes.len() as u64).to_le_bytes())?;
        f.write_all(&hbytes)?;
        for a in &params.arrays {
            for v in a.iter() {
                f.write_all(&(v.to_f64().unwrap() as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint; the stored kind must match.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    kind: &str,
) -> Result<(serde_json::Value, ParamSet<F>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(RevdiffError::Checkpoint("bad magic".into()));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != CKPT_VERSION {
        return Err(RevdiffError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8)?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbytes = vec![0u8; hlen];
    f.read_exact(&mut hbytes)?;
    let header: CkptHeader = serde_json::from_slice(&hbytes)?;
    if header.kind != kind {
        return Err(RevdiffError::Checkpoint(format!(
            "checkpoint kind {} where {kind} expected",
            header.kind
        )));
    }
    let mut names = Vec::new();
    let mut arrays = Vec::new();
    for (name, shape) in header.arrays {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf)?;
        let vals: Vec<F> = buf
            .chunks_exact(4)
            .map(|b| c::<F>(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        names.push(name);
        arrays.push(
            ArrayD::from_shape_vec(IxDyn(&shape), vals)
                .map_err(|e| RevdiffError::Checkpoint(e.to_string()))?,
        );
    }
    Ok((header.config, ParamSet { names, arrays }))
}

/// Restore a Unet from a checkpoint written by [`save_unet`].
pub fn load_unet<F: Scalar>(path: &Path) -> Result<UNet<F>> {
    let (cfg_json, params) = load_checkpoint::<F>(path, "unet")?;
    let cfg: NetConfig = serde_json::from_value(cfg_json)?;
    let fresh = UNet::<F>::new(cfg, 0)?;
    if fresh.params.names != params.names {
        return Err(RevdiffError::Checkpoint("parameter names mismatch".into()));
    }
    Ok(UNet { cfg, params })
}

pub fn save_unet<F: Scalar>(path: &Path, net: &UNet<F>) -> Result<()> {
    save_checkpoint(path, "unet", &serde_json::to_value(net.cfg)?, &net.params)
}

pub fn save_encoder<F: Scalar>(path: &Path, enc: &SceneEncoder<F>) -> Result<()> {
    save_checkpoint(path, "scene-encoder", &serde_json::json!({ "tau": enc.tau }), &enc.params)
}

pub fn load_encoder<F: Scalar>(path: &Path) -> Result<SceneEncoder<F>> {
    let (cfg, params) = load_checkpoint::<F>(path, "scene-encoder")?;
    let tau = cfg["tau"].as_f64().unwrap_or(0.1);
    let fresh = SceneEncoder::<F>::new(0, tau);
    if fresh.params.names != params.names {
        return Err(RevdiffError::Checkpoint("parameter names mismatch".into()));
    }
    Ok(SceneEncoder { params, tau, channels: fresh.channels })
}

/// Collect per-parameter gradients for a bound model.
pub fn bound_grads<F: Scalar>(grads: &Grads<F>, bound: &Bound) -> Vec<ArrayD<F>> {
    bound.leaves.iter().map(|&l| grads.get(l).clone()).collect()
}
