//! Short-term memory backbone: 3D patch embedding, (shifted) window
//! attention stages, patch merging and the global average reducer.
//!
//! Token tensors flow through the network as `[N * L, C]` rows, where `L` is
//! the number of tokens of one clip laid out in `(t, h, w)` row-major order.
//! Windowing, cyclic shifts, padding and merging are all expressed as row
//! gathers with precomputed indices, so their gradients are scatter-adds.

use std::sync::Arc;

use movad_tensor::{Tape, Tensor, Var};

use crate::config::{StmmConfig, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};

/// Additive attention logit for masked pairs.
pub const MASK_VALUE: f64 = -1e9;

/// Pixel values per 3D patch.
pub const PATCH_VOLUME: usize = PATCH_SIZE[0] * PATCH_SIZE[1] * PATCH_SIZE[2] * 3;

/// `NF` consecutive frames, oldest first, as `[NF, H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    data: Tensor,
}

impl FrameClip {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Dimension(format!("clip must be [NF, H, W, 3], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::Dimension("clip holds no frames".into()));
        }
        if s[1] == 0 || s[2] == 0 || !s[1].is_multiple_of(PATCH_SIZE[1]) || !s[2].is_multiple_of(PATCH_SIZE[2]) {
            return Err(Error::Dimension(format!(
                "frame size {}x{} is not a positive multiple of {}",
                s[1], s[2], PATCH_SIZE[1]
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("clip pixels".into()));
        }
        Ok(Self { data })
    }

    /// Stacks `[H, W, 3]` frames, oldest first.
    pub fn from_frames(frames: &[&Tensor]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Dimension("clip holds no frames".into()))?;
        let shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(first.numel() * frames.len());
        for f in frames {
            if f.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!("frame {:?} differs from {shape:?}", f.shape())));
            }
            data.extend_from_slice(f.data());
        }
        let mut clip_shape = vec![frames.len()];
        clip_shape.extend(shape);
        Self::new(Tensor::new(clip_shape, data).map_err(|e| Error::Dimension(e.to_string()))?)
    }

    pub fn nf(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Patch tokens of one clip, `[T', H', W', C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
}

impl TokenGrid {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::Dimension(format!("token grid must be non-empty [T, H, W, C], got {s:?}")));
        }
        Ok(Self { tokens })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.tokens.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[3]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Global mean over every spatio-temporal position of a `[.., D]` map.
pub fn reduce(map: &Tensor) -> Result<Tensor> {
    let d = map.last_dim();
    if map.numel() == 0 || d == 0 {
        return Err(Error::Dimension("cannot reduce an empty feature map".into()));
    }
    let positions = map.numel() / d;
    let mut out = vec![0.0; d];
    for row in map.data().chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= positions as f64;
    }
    Ok(Tensor::new([d], out).expect("length matches"))
}

/// Linear projection of non-overlapping `2 x 4 x 4 x 3` patches.
///
/// An odd number of frames is front padded by repeating the earliest frame,
/// which leaves the most recent frames in their own patches.
#[derive(Debug, Clone)]
pub struct PatchEmbed3d {
    pub proj: Linear,
    pub norm: Option<LayerNorm>,
    pub embed_dim: usize,
}

impl PatchEmbed3d {
    pub fn new(store: &mut ParamStore, name: &str, embed_dim: usize, patch_norm: bool) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), PATCH_VOLUME, embed_dim, true),
            norm: patch_norm.then(|| LayerNorm::new(store, &format!("{name}.norm"), embed_dim)),
            embed_dim,
        }
    }

    /// Token grid of an `nf x h x w` clip.
    pub fn grid(nf: usize, h: usize, w: usize) -> [usize; 3] {
        [nf.div_ceil(PATCH_SIZE[0]), h / PATCH_SIZE[1], w / PATCH_SIZE[2]]
    }

    fn index(n: usize, nf: usize, h: usize, w: usize) -> Arc<[Option<usize>]> {
        let [pt, ph, pw] = PATCH_SIZE;
        let [gt, gh, gw] = Self::grid(nf, h, w);
        let pad = gt * pt - nf;
        let mut idx = Vec::with_capacity(n * gt * gh * gw * pt * ph * pw);
        for clip in 0..n {
            for t in 0..gt {
                for y in 0..gh {
                    for x in 0..gw {
                        for dt in 0..pt {
                            let frame = (t * pt + dt).saturating_sub(pad);
                            for dy in 0..ph {
                                for dx in 0..pw {
                                    let row = ((clip * nf + frame) * h + y * ph + dy) * w + x * pw + dx;
                                    idx.push(Some(row));
                                }
                            }
                        }
                    }
                }
            }
        }
        idx.into()
    }

    /// `[N, NF, H, W, 3]` clips to `[N * L, C]` tokens.
    pub fn forward<'t>(&self, clips: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        let s = clips.shape();
        assert!(s.len() == 5 && s[4] == 3, "patch embed expects [N, NF, H, W, 3], got {s:?}");
        let (n, nf, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = n * Self::grid(nf, h, w).iter().product::<usize>();
        let patches = clips
            .gather_rows(3, Self::index(n, nf, h, w))
            .reshape([tokens, PATCH_VOLUME]);
        let x = self.proj.forward(patches, p);
        match &self.norm {
            Some(norm) => norm.forward(x, p),
            None => x,
        }
    }

    /// Embeds a single clip into its token grid.
    pub fn embed(&self, clip: &FrameClip, store: &ParamStore) -> TokenGrid {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mut shape = vec![1];
        shape.extend_from_slice(clip.tensor().shape());
        let input = tape.constant(clip.tensor().reshape(shape).expect("same size"));
        let [t, h, w] = Self::grid(clip.nf(), clip.height(), clip.width());
        let tokens = self.forward(input, &p).value().reshape([t, h, w, self.embed_dim]).expect("grid size");
        TokenGrid { tokens }
    }
}

/// Index plan for window attention over a fixed token grid.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    padded: [usize; 3],
    /// Per clip: window row -> token, `None` for padding.
    partition: Vec<Option<usize>>,
    /// Per clip: token -> window row.
    reverse: Vec<usize>,
    /// `[windows, Wn, Wn]` additive mask when shifting or padding is active.
    mask: Option<Vec<f64>>,
}

impl WindowPlan {
    /// Clamps the window (and disables the shift) along any axis where the
    /// grid is no larger than the window.
    pub fn effective(grid: [usize; 3], window: [usize; 3], shifted: bool) -> ([usize; 3], [usize; 3]) {
        let mut win = window;
        let mut shift = [0; 3];
        for d in 0..3 {
            if grid[d] <= window[d] {
                win[d] = grid[d];
            } else if shifted {
                shift[d] = window[d] / 2;
            }
        }
        (win, shift)
    }

    pub fn new(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Self {
        for d in 0..3 {
            assert!(grid[d] > 0 && window[d] > 0 && shift[d] < window[d], "invalid window plan");
        }
        let padded: [usize; 3] = std::array::from_fn(|d| grid[d].div_ceil(window[d]) * window[d]);
        let counts: [usize; 3] = std::array::from_fn(|d| padded[d] / window[d]);
        let tokens = grid.iter().product::<usize>();
        let win_len = window.iter().product::<usize>();
        let n_windows = counts.iter().product::<usize>();

        let mut partition = Vec::with_capacity(n_windows * win_len);
        let mut reverse = vec![usize::MAX; tokens];
        let mut region = Vec::with_capacity(n_windows * win_len);
        let mut is_pad = Vec::with_capacity(n_windows * win_len);
        for wt in 0..counts[0] {
            for wh in 0..counts[1] {
                for ww in 0..counts[2] {
                    for it in 0..window[0] {
                        for ih in 0..window[1] {
                            for iw in 0..window[2] {
                                let pos = [wt * window[0] + it, wh * window[1] + ih, ww * window[2] + iw];
                                let orig: [usize; 3] = std::array::from_fn(|d| (pos[d] + shift[d]) % padded[d]);
                                let wrapped: [bool; 3] =
                                    std::array::from_fn(|d| shift[d] > 0 && pos[d] >= padded[d] - shift[d]);
                                region.push(wrapped);
                                let valid = (0..3).all(|d| orig[d] < grid[d]);
                                is_pad.push(!valid);
                                if valid {
                                    let tok = (orig[0] * grid[1] + orig[1]) * grid[2] + orig[2];
                                    reverse[tok] = partition.len();
                                    partition.push(Some(tok));
                                } else {
                                    partition.push(None);
                                }
                            }
                        }
                    }
                }
            }
        }
        debug_assert!(reverse.iter().all(|&r| r != usize::MAX));

        let needs_mask = shift.iter().any(|&s| s > 0) || padded != grid;
        let mask = needs_mask.then(|| {
            let mut m = vec![0.0; n_windows * win_len * win_len];
            for w in 0..n_windows {
                for i in 0..win_len {
                    for j in 0..win_len {
                        let (a, b) = (w * win_len + i, w * win_len + j);
                        if region[a] != region[b] || is_pad[b] {
                            m[(w * win_len + i) * win_len + j] = MASK_VALUE;
                        }
                    }
                }
            }
            m
        });

        Self {
            grid,
            window,
            shift,
            padded,
            partition,
            reverse,
            mask,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn win_len(&self) -> usize {
        self.window.iter().product()
    }

    pub fn n_windows(&self) -> usize {
        self.partition.len() / self.win_len()
    }

    pub fn padded(&self) -> [usize; 3] {
        self.padded
    }

    /// Window row of every token, with padding rows marked `None`, for `n` clips.
    pub fn partition_index(&self, n: usize) -> Arc<[Option<usize>]> {
        let l = self.tokens();
        (0..n)
            .flat_map(|c| self.partition.iter().map(move |t| t.map(|t| c * l + t)))
            .collect()
    }

    pub fn reverse_index(&self, n: usize) -> Arc<[Option<usize>]> {
        let rows = self.partition.len();
        (0..n)
            .flat_map(|c| self.reverse.iter().map(move |&r| Some(c * rows + r)))
            .collect()
    }

    /// Mask expanded over `heads`: `[windows, heads, Wn, Wn]`.
    pub fn mask_tensor(&self, heads: usize) -> Option<Tensor> {
        let m = self.mask.as_ref()?;
        let wn = self.win_len();
        let block = wn * wn;
        let mut out = Vec::with_capacity(m.len() * heads);
        for win in m.chunks_exact(block) {
            for _ in 0..heads {
                out.extend_from_slice(win);
            }
        }
        Some(Tensor::new([self.n_windows(), heads, wn, wn], out).expect("mask size"))
    }
}

/// Relative offset index for every `(query, key)` pair of a window.
fn relative_position_index(window: [usize; 3]) -> Arc<[Option<usize>]> {
    let [wt, wh, ww] = window;
    let coords: Vec<[usize; 3]> = (0..wt)
        .flat_map(|t| (0..wh).flat_map(move |h| (0..ww).map(move |w| [t, h, w])))
        .collect();
    let mut idx = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            let dt = a[0] + wt - 1 - b[0];
            let dh = a[1] + wh - 1 - b[1];
            let dw = a[2] + ww - 1 - b[2];
            idx.push(Some((dt * (2 * wh - 1) + dh) * (2 * ww - 1) + dw));
        }
    }
    idx.into()
}

/// Multi-head self-attention restricted to 3D windows.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: Option<ParamId>,
    pub dim: usize,
    pub heads: usize,
    pub window: [usize; 3],
    rel_index: Arc<[Option<usize>]>,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: [usize; 3],
        relative_position_bias: bool,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "heads must divide width");
        let table_len: usize = window.iter().map(|w| 2 * w - 1).product();
        let bias_table = relative_position_bias.then(|| {
            store.add(
                format!("{name}.relative_position_bias_table"),
                &[table_len, heads],
                ParamKind::Bias,
            )
        });
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true),
            bias_table,
            dim,
            heads,
            window,
            rel_index: relative_position_index(window),
        }
    }

    /// `[n * L, C]` tokens to `[n * L, C]`, attending within the windows of `plan`.
    pub fn forward<'t>(&self, x: Var<'t>, n: usize, plan: &WindowPlan, p: &Bound<'t>) -> Var<'t> {
        assert_eq!(plan.window, self.window, "plan window differs from attention window");
        let tape = x.tape();
        let (c, heads) = (self.dim, self.heads);
        let hd = c / heads;
        let wn = plan.win_len();
        let bw = n * plan.n_windows();
        let groups = bw * heads;

        let windows = x.gather_rows(c, plan.partition_index(n));
        let qkv = self
            .qkv
            .forward(windows, p)
            .reshape([bw, wn, 3, heads, hd])
            .permute(&[2, 0, 3, 1, 4]);
        let q = qkv.narrow(0, 0, 1).reshape([groups, wn, hd]).scale(1.0 / (hd as f64).sqrt());
        let k = qkv.narrow(0, 1, 1).reshape([groups, wn, hd]);
        let v = qkv.narrow(0, 2, 1).reshape([groups, wn, hd]);

        let mut attn = q.bmm(k, false, true);
        if let Some(table) = self.bias_table {
            let bias = p
                .var(table)
                .gather_rows(heads, self.rel_index.clone())
                .permute(&[1, 0]);
            attn = attn.add_broadcast(bias);
        }
        if let Some(mask) = plan.mask_tensor(heads) {
            attn = attn.add_broadcast(tape.constant(mask));
        }
        let out = attn
            .softmax()
            .bmm(v, false, false)
            .reshape([bw, heads, wn, hd])
            .permute(&[0, 2, 1, 3])
            .reshape([bw * wn, c]);
        self.proj.forward(out, p).gather_rows(c, plan.reverse_index(n))
    }
}

/// Applies `attn` to a single token grid. With `shift`, windows are cyclically
/// displaced by half their size along every axis larger than the window.
pub fn shifted_window_attention(
    attn: &WindowAttention,
    tokens: &TokenGrid,
    shift: bool,
    store: &ParamStore,
) -> Result<TokenGrid> {
    if tokens.channels() != attn.dim {
        return Err(Error::Dimension(format!(
            "token width {} does not match attention width {}",
            tokens.channels(),
            attn.dim
        )));
    }
    let (window, shift) = WindowPlan::effective(tokens.dims(), attn.window, shift);
    if window != attn.window {
        return Err(Error::Dimension(format!(
            "grid {:?} is smaller than the attention window {:?}",
            tokens.dims(),
            attn.window
        )));
    }
    let plan = WindowPlan::new(tokens.dims(), window, shift);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(tokens.tokens.reshape([tokens.len(), attn.dim]).expect("size"));
    let out = attn.forward(x, 1, &plan, &p).value();
    TokenGrid::new(out.reshape(tokens.tokens.shape().to_vec()).expect("size"))
}

#[derive(Debug, Clone)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    plan: WindowPlan,
}

impl SwinBlock {
    fn forward<'t>(&self, x: Var<'t>, n: usize, p: &Bound<'t>) -> Var<'t> {
        let x = x.add(self.attn.forward(self.norm1.forward(x, p), n, &self.plan, p));
        let hidden = self.fc1.forward(self.norm2.forward(x, p), p).gelu();
        x.add(self.fc2.forward(hidden, p))
    }
}

/// Halves the spatial resolution by concatenating 2x2 neighbours and
/// projecting `4C -> 2C`.
#[derive(Debug, Clone)]
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
    grid: [usize; 3],
    dim: usize,
}

impl PatchMerging {
    fn out_grid(grid: [usize; 3]) -> [usize; 3] {
        [grid[0], grid[1].div_ceil(2), grid[2].div_ceil(2)]
    }

    fn forward<'t>(&self, x: Var<'t>, n: usize, p: &Bound<'t>) -> Var<'t> {
        let [t, h, w] = self.grid;
        let [_, oh, ow] = Self::out_grid(self.grid);
        let mut idx = Vec::with_capacity(n * t * oh * ow * 4);
        for clip in 0..n {
            for ti in 0..t {
                for y in 0..oh {
                    for xx in 0..ow {
                        for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            let (yy, xs) = (2 * y + dy, 2 * xx + dx);
                            idx.push((yy < h && xs < w).then(|| ((clip * t + ti) * h + yy) * w + xs));
                        }
                    }
                }
            }
        }
        let merged = x
            .gather_rows(self.dim, idx.into())
            .reshape([n * t * oh * ow, 4 * self.dim]);
        self.reduction.forward(self.norm.forward(merged, p), p)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<SwinBlock>,
    merge: Option<PatchMerging>,
}

/// The full backbone for one fixed input geometry.
#[derive(Debug, Clone)]
pub struct Stmm {
    cfg: StmmConfig,
    pub embed: PatchEmbed3d,
    stages: Vec<Stage>,
    pub norm: LayerNorm,
    out_grid: [usize; 3],
}

impl Stmm {
    pub fn new(cfg: &StmmConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed3d::new(store, "stmm.patch_embed", cfg.embed_dim, cfg.patch_norm);
        let mut grid = cfg.token_grid();
        let mut dim = cfg.embed_dim;
        let mut stages = Vec::with_capacity(cfg.depths.len());
        for (s, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.num_heads).enumerate() {
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let name = format!("stmm.layers.{s}.blocks.{b}");
                let (window, shift) = WindowPlan::effective(grid, cfg.window, b % 2 == 1);
                blocks.push(SwinBlock {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
                    attn: WindowAttention::new(
                        store,
                        &format!("{name}.attn"),
                        dim,
                        heads,
                        window,
                        cfg.relative_position_bias,
                    ),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
                    fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, cfg.mlp_ratio * dim, true),
                    fc2: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_ratio * dim, dim, true),
                    plan: WindowPlan::new(grid, window, shift),
                });
            }
            let merge = (s + 1 < cfg.depths.len()).then(|| {
                let name = format!("stmm.layers.{s}.downsample");
                let m = PatchMerging {
                    norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
                    reduction: Linear::new(store, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
                    grid,
                    dim,
                };
                grid = PatchMerging::out_grid(grid);
                dim *= 2;
                m
            });
            stages.push(Stage { blocks, merge });
        }
        let norm = LayerNorm::new(store, "stmm.norm", dim);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            stages,
            norm,
            out_grid: grid,
        })
    }

    pub fn config(&self) -> &StmmConfig {
        &self.cfg
    }

    /// Grid `(T', H'', W'')` of the final feature map.
    pub fn output_grid(&self) -> [usize; 3] {
        self.out_grid
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// `[N, NF, H, W, 3]` clips to `[N, T' * H'' * W'', D]` features.
    pub fn forward_map<'t>(&self, clips: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        let s = clips.shape();
        assert_eq!(
            &s[1..],
            &[self.cfg.nf, self.cfg.input_h, self.cfg.input_w, 3],
            "clip geometry differs from the configured backbone"
        );
        let n = s[0];
        let mut x = self.embed.forward(clips, p);
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(x, n, p);
            }
            if let Some(m) = &stage.merge {
                x = m.forward(x, n, p);
            }
        }
        let positions = self.out_grid.iter().product::<usize>();
        self.norm.forward(x, p).reshape([n, positions, self.feature_dim()])
    }

    /// Reduced `[N, D]` features.
    pub fn forward_pooled<'t>(&self, clips: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        self.forward_map(clips, p).mean_dim(1)
    }

    fn check_clip(&self, clip: &FrameClip) -> Result<()> {
        let want = [self.cfg.nf, self.cfg.input_h, self.cfg.input_w];
        let got = [clip.nf(), clip.height(), clip.width()];
        if want != got {
            return Err(Error::Dimension(format!(
                "clip (nf, h, w) = {got:?}, backbone expects {want:?}"
            )));
        }
        Ok(())
    }

    pub fn batch_tensor(&self, clips: &[&FrameClip]) -> Result<Tensor> {
        if clips.is_empty() {
            return Err(Error::Dimension("no clips".into()));
        }
        let mut data = Vec::with_capacity(clips.len() * clips[0].tensor().numel());
        for c in clips {
            self.check_clip(c)?;
            data.extend_from_slice(c.tensor().data());
        }
        Ok(Tensor::new(
            [clips.len(), self.cfg.nf, self.cfg.input_h, self.cfg.input_w, 3],
            data,
        )
        .expect("clip sizes checked"))
    }

    /// Feature map `[T', H'', W'', D]` of one clip.
    pub fn stmm_forward(&self, clip: &FrameClip, store: &ParamStore) -> Result<Tensor> {
        let input = self.batch_tensor(&[clip])?;
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let map = self.forward_map(tape.constant(input), &p).value();
        let [t, h, w] = self.out_grid;
        Ok(map.reshape([t, h, w, self.feature_dim()]).expect("grid size"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn effective_window_clamps_small_axes() {
        let (w, s) = WindowPlan::effective([1, 4, 8], [2, 2, 2], true);
        assert_eq!(w, [1, 2, 2]);
        assert_eq!(s, [0, 1, 1]);
        let (w, s) = WindowPlan::effective([2, 2, 2], [2, 7, 7], true);
        assert_eq!((w, s), ([2, 2, 2], [0, 0, 0]));
    }

    #[test]
    fn partition_and_reverse_are_inverse() {
        for (grid, window, shift) in [
            ([2, 4, 4], [2, 2, 2], [0, 0, 0]),
            ([2, 4, 4], [2, 2, 2], [1, 1, 1]),
            ([3, 5, 6], [2, 2, 4], [1, 1, 2]),
        ] {
            let plan = WindowPlan::new(grid, window, shift);
            let part = plan.partition_index(2);
            let rev = plan.reverse_index(2);
            for (tok, row) in rev.iter().enumerate() {
                assert_eq!(part[row.unwrap()], Some(tok));
            }
            let valid = part.iter().filter(|p| p.is_some()).count();
            assert_eq!(valid, 2 * plan.tokens());
        }
    }

    #[test]
    fn shift_mask_matches_two_dimensional_reference() {
        // 4x4 grid, window 2, shift 1: the reference Swin mask for the last
        // window blocks every pair that is not in the same wrapped region.
        let plan = WindowPlan::new([1, 4, 4], [1, 2, 2], [0, 1, 1]);
        let m = plan.mask_tensor(1).unwrap();
        let blocked = |w: usize, i: usize, j: usize| m.data()[(w * 4 + i) * 4 + j] != 0.0;
        // window 0 is interior: nothing blocked
        assert!((0..4).all(|i| (0..4).all(|j| !blocked(0, i, j))));
        // window 3 (bottom-right): each token is in its own region
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(blocked(3, i, j), i != j);
            }
        }
        // window 1 (top-right): columns split
        assert!(!blocked(1, 0, 2) && blocked(1, 0, 1));
    }

    #[test]
    fn patch_embed_rows_follow_patch_layout() {
        // With identity-like weights each token's channels are its patch pixels.
        let mut store = ParamStore::new();
        let embed = PatchEmbed3d::new(&mut store, "pe", PATCH_VOLUME, false);
        let eye = Tensor::from_fn([PATCH_VOLUME, PATCH_VOLUME], |i| {
            if i / PATCH_VOLUME == i % PATCH_VOLUME { 1.0 } else { 0.0 }
        });
        store.set(embed.proj.weight, eye).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = FrameClip::new(Tensor::from_fn([3, 8, 8, 3], |_| rng.gen())).unwrap();
        let grid = embed.embed(&clip, &store);
        assert_eq!(grid.dims(), [2, 2, 2]);
        // token (1, 1, 0), offset (dt=1, dy=2, dx=3, c=1) -> frame 2+1-1 = 2, y 6, x 3
        let tok = grid.tokens.data();
        let base = ((2 + 1) * 2) * PATCH_VOLUME;
        let inner = ((4 + 2) * 4 + 3) * 3 + 1;
        let px = clip.tensor().data()[((2 * 8 + 6) * 8 + 3) * 3 + 1];
        assert_eq!(tok[base + inner], px);
        // the padded first slot of token (0, *, *) repeats frame 0
        let first = clip.tensor().data()[0];
        assert_eq!(tok[0], first);
        assert_eq!(tok[16 * 3], first);
    }

    #[test]
    fn reduce_rejects_empty_maps() {
        assert!(reduce(&Tensor::zeros([0, 4])).is_err());
        let m = Tensor::full([2, 2, 2, 3], 2.5);
        assert_eq!(reduce(&m).unwrap().data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn clip_validation() {
        assert!(FrameClip::new(Tensor::zeros([2, 8, 6, 3])).is_err());
        assert!(FrameClip::new(Tensor::zeros([0, 8, 8, 3])).is_err());
        assert!(FrameClip::new(Tensor::zeros([2, 8, 8, 1])).is_err());
        let mut t = Tensor::zeros([1, 4, 4, 3]);
        t.data_mut()[5] = f64::NAN;
        assert!(matches!(FrameClip::new(t), Err(Error::NonFinite(_))));
    }
}
