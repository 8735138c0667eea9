//! Shifted-window attention with domain-adaptive extensions: per-domain
//! query projections and per-domain diagonal rescaling of the attention and
//! MLP branches, selectable per block variant.
//!
//! Blocks operate on `[N, H, W, C]` token maps. Window size is clamped to the
//! token grid, non-divisible grids are padded for the window pass and cropped
//! back, and alternating blocks use a cyclic shift with the standard masked
//! attention so shifted windows never mix tokens across the wrap seam.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init;
use super::layers::{LayerNorm, Linear};
use super::{Ctx, ParamSet, ParamTag, SharedParam};
use crate::domain::DomainId;
use crate::tensor::Var;

/// Which domain-adaptive pieces a transformer block carries.
///
/// * `Base` — plain shifted-window block, everything shared.
/// * `D` — adds per-domain diagonal scales `D1`/`D2`.
/// * `Q` — adds per-domain query projections.
/// * `Full` — both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    Base,
    D,
    Q,
    Full,
}

impl BlockVariant {
    pub fn has_domain_query(self) -> bool {
        matches!(self, BlockVariant::Q | BlockVariant::Full)
    }

    pub fn has_domain_scales(self) -> bool {
        matches!(self, BlockVariant::D | BlockVariant::Full)
    }
}

/// Relative-position index for an `me x me` window against a bias table
/// sized for a maximum window `m`: entry `(a, b)` is
/// `(ai - bi + m - 1) * (2m - 1) + (aj - bj + m - 1)`.
pub fn rpb_index(m: usize, me: usize) -> Vec<usize> {
    assert!(me <= m, "effective window exceeds table window");
    let t = me * me;
    let span = 2 * m - 1;
    let mut index = Vec::with_capacity(t * t);
    for ai in 0..me {
        for aj in 0..me {
            for bi in 0..me {
                for bj in 0..me {
                    let di = ai as isize - bi as isize + m as isize - 1;
                    let dj = aj as isize - bj as isize + m as isize - 1;
                    index.push(di as usize * span + dj as usize);
                }
            }
        }
    }
    index
}

/// Attention mask for a cyclically shifted `[hp, wp]` token grid with window
/// `m` and shift `s`: `[nw, T, T]` with `0` where both tokens come from the
/// same pre-shift region and `-1e9` where they do not.
pub fn shift_mask(hp: usize, wp: usize, m: usize, s: usize) -> ArrayD<f64> {
    assert!(hp % m == 0 && wp % m == 0, "grid must be window-divisible");
    assert!(s > 0 && s < m, "mask only applies to genuine shifts");
    let region = |len: usize, i: usize| -> usize {
        if i < len - m {
            0
        } else if i < len - s {
            1
        } else {
            2
        }
    };
    let labels: Vec<usize> = (0..hp * wp)
        .map(|p| region(hp, p / wp) * 3 + region(wp, p % wp))
        .collect();
    let (nwh, nww) = (hp / m, wp / m);
    let t = m * m;
    let mut mask = ArrayD::zeros(IxDyn(&[nwh * nww, t, t]));
    let ms = mask.as_slice_mut().unwrap();
    for wi in 0..nwh {
        for wj in 0..nww {
            let base = (wi * nww + wj) * t * t;
            let lab = |a: usize| labels[(wi * m + a / m) * wp + wj * m + a % m];
            for a in 0..t {
                for b in 0..t {
                    if lab(a) != lab(b) {
                        ms[base + a * t + b] = -1e9;
                    }
                }
            }
        }
    }
    mask
}

enum QueryProj {
    Shared(Linear),
    PerDomain(Vec<Linear>),
}

/// Multi-head self-attention over windows of tokens, with a learned relative
/// position bias and (by variant) per-domain query projections. All domains'
/// query projections start equal, so variants only diverge through training.
pub struct WindowAttention {
    q: QueryProj,
    k: Linear,
    v: Linear,
    proj: Linear,
    rpb: SharedParam,
    num_heads: usize,
    window: usize,
    index_cache: RefCell<HashMap<usize, Rc<Vec<usize>>>>,
}

impl WindowAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        num_heads: usize,
        window: usize,
        variant: BlockVariant,
        num_domains: usize,
    ) -> Self {
        assert_eq!(dim % num_heads, 0, "heads must divide dim");
        let q = if variant.has_domain_query() {
            let weight = init::trunc_normal(rng, &[dim, dim], 0.02);
            let projections = (0..num_domains)
                .map(|d| Linear {
                    weight: set.param(
                        format!("{name}.q.d{d}.weight"),
                        ParamTag::Domain(d),
                        weight.clone(),
                    ),
                    bias: Some(set.param(
                        format!("{name}.q.d{d}.bias"),
                        ParamTag::Domain(d),
                        init::zeros(&[dim]),
                    )),
                })
                .collect();
            QueryProj::PerDomain(projections)
        } else {
            QueryProj::Shared(Linear::new(set, rng, &format!("{name}.q"), dim, dim, true))
        };
        let k = Linear::new(set, rng, &format!("{name}.k"), dim, dim, true);
        let v = Linear::new(set, rng, &format!("{name}.v"), dim, dim, true);
        let proj = Linear::new(set, rng, &format!("{name}.proj"), dim, dim, true);
        let span = 2 * window - 1;
        let rpb = set.param(
            format!("{name}.rpb"),
            ParamTag::Shared,
            init::trunc_normal(rng, &[span * span, num_heads], 0.02),
        );
        WindowAttention {
            q,
            k,
            v,
            proj,
            rpb,
            num_heads,
            window,
            index_cache: RefCell::new(HashMap::new()),
        }
    }

    fn index_for(&self, me: usize) -> Rc<Vec<usize>> {
        self.index_cache
            .borrow_mut()
            .entry(me)
            .or_insert_with(|| Rc::new(rpb_index(self.window, me)))
            .clone()
    }

    /// Attend within windows. `x` is `[B, T, C]` with `T = me * me`; `mask`
    /// (if any) is `[nw, T, T]`. Returns the projected output `[B, T, C]` and
    /// the attention probabilities `[B * nh, T, T]`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        d: DomainId,
        me: usize,
        mask: Option<Rc<ArrayD<f64>>>,
    ) -> (Var<'t>, Var<'t>) {
        let shape = x.shape();
        let (t, c) = (shape[1], shape[2]);
        assert_eq!(t, me * me, "token count must match window");
        let nh = self.num_heads;
        let dk = c / nh;
        let q_lin = match &self.q {
            QueryProj::Shared(l) => l,
            QueryProj::PerDomain(v) => {
                assert!(d < v.len(), "unregistered domain {d}");
                &v[d]
            }
        };
        let q = q_lin.forward(ctx, x).split_heads(nh).scale(1.0 / (dk as f64).sqrt());
        let k = self.k.forward(ctx, x).split_heads(nh);
        let v = self.v.forward(ctx, x).split_heads(nh);
        let mut scores = q.bmm_nt(k);
        let rpb = ctx.var(&self.rpb).gather_rpb(self.index_for(me), t);
        scores = scores.add_rpb(rpb);
        if let Some(mask) = mask {
            scores = scores.add_const_mask(mask, nh);
        }
        let probs = scores.softmax_lastdim();
        let out = probs.bmm(v).merge_heads(nh);
        (self.proj.forward(ctx, out), probs)
    }
}

/// Two-layer MLP with GELU, shared across domains.
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(set, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(set, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        self.fc2.forward(ctx, self.fc1.forward(ctx, x).gelu())
    }
}

/// One (shifted-)window transformer block over `[N, H, W, C]` token maps.
///
/// The domain-adaptive form computes
/// `y_hat = D1[d] * MSA_{Q_d}(LN(x)) + x` and
/// `y = D2[d] * (MLP(LN(y_hat)) + y_hat)`, where `D1`/`D2` are per-domain
/// diagonal scales (ones at init) and `Q_d` is the per-domain query. The
/// plain variant drops both adaptions and reduces to a standard block.
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    d1: Option<Vec<SharedParam>>,
    d2: Option<Vec<SharedParam>>,
    window: usize,
    shifted: bool,
    mask_cache: RefCell<HashMap<(usize, usize), Rc<ArrayD<f64>>>>,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        num_heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
        variant: BlockVariant,
        num_domains: usize,
    ) -> Self {
        let norm1 = LayerNorm::new(set, &format!("{name}.norm1"), dim);
        let attn = WindowAttention::new(
            set,
            rng,
            &format!("{name}.attn"),
            dim,
            num_heads,
            window,
            variant,
            num_domains,
        );
        let norm2 = LayerNorm::new(set, &format!("{name}.norm2"), dim);
        let mlp = Mlp::new(set, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio);
        let make_scales = |set: &mut ParamSet, which: &str| {
            (0..num_domains)
                .map(|d| {
                    set.param(
                        format!("{name}.{which}.d{d}"),
                        ParamTag::Domain(d),
                        init::ones(&[dim]),
                    )
                })
                .collect::<Vec<_>>()
        };
        let (d1, d2) = if variant.has_domain_scales() {
            (Some(make_scales(set, "diag1")), Some(make_scales(set, "diag2")))
        } else {
            (None, None)
        };
        TransformerBlock {
            norm1,
            attn,
            norm2,
            mlp,
            d1,
            d2,
            window,
            shifted,
            mask_cache: RefCell::new(HashMap::new()),
        }
    }

    fn mask_for(&self, hp: usize, wp: usize, me: usize, shift: usize) -> Rc<ArrayD<f64>> {
        self.mask_cache
            .borrow_mut()
            .entry((hp, wp))
            .or_insert_with(|| Rc::new(shift_mask(hp, wp, me, shift)))
            .clone()
    }

    /// Apply the block to `[N, H, W, C]`, returning the new token map and the
    /// window-attention probabilities `[N * nw * nh, T, T]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, d: DomainId) -> (Var<'t>, Var<'t>) {
        let shape = x.shape();
        let (h, w, c) = (shape[1], shape[2], shape[3]);
        let me = self.window.min(h).min(w);
        let single_window = h <= self.window && w <= self.window;
        let shift = if self.shifted && !single_window { me / 2 } else { 0 };
        let (hp, wp) = (h.div_ceil(me) * me, w.div_ceil(me) * me);

        let shortcut = x;
        let mut t = self.norm1.forward(ctx, x);
        if (hp, wp) != (h, w) {
            t = t.pad_hw_tokens(hp - h, wp - w);
        }
        if shift > 0 {
            t = t.roll_tokens(-(shift as isize), -(shift as isize));
        }
        let windows = t.window_partition(me);
        let mask = (shift > 0).then(|| self.mask_for(hp, wp, me, shift));
        let (attended, probs) = self.attn.forward(ctx, windows, d, me, mask);
        let mut msa = attended.window_reverse(me, hp, wp);
        if shift > 0 {
            msa = msa.roll_tokens(shift as isize, shift as isize);
        }
        if (hp, wp) != (h, w) {
            msa = msa.crop_hw_tokens(h, w);
        }
        if let Some(d1) = &self.d1 {
            assert!(d < d1.len(), "unregistered domain {d}");
            msa = msa.scale_channels(ctx.var(&d1[d]));
        }
        let y_hat = msa.add(shortcut);

        let mut y = self.mlp.forward(ctx, self.norm2.forward(ctx, y_hat)).add(y_hat);
        if let Some(d2) = &self.d2 {
            y = y.scale_channels(ctx.var(&d2[d]));
        }
        let _ = c;
        (y, probs)
    }
}

/// Non-overlapping patch embedding: `[N, C, H, W]` images to
/// `[N, H/p, W/p, dim]` tokens via a linear projection and layer norm.
pub struct PatchEmbed {
    proj: Linear,
    norm: LayerNorm,
    patch: usize,
}

impl PatchEmbed {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        patch: usize,
        dim: usize,
    ) -> Self {
        PatchEmbed {
            proj: Linear::new(set, rng, &format!("{name}.proj"), in_ch * patch * patch, dim, true),
            norm: LayerNorm::new(set, &format!("{name}.norm"), dim),
            patch,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        self.norm.forward(ctx, self.proj.forward(ctx, x.extract_patches(self.patch)))
    }
}

/// Patch merging: gather 2x2 token neighborhoods, layer-norm the concatenated
/// features, and reduce `4C -> 2C` with a bias-free linear map.
pub struct PatchMerge {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerge {
    pub fn new(set: &mut ParamSet, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(set, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(set, rng, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut t = x;
        if h % 2 == 1 || w % 2 == 1 {
            t = t.pad_hw_tokens(h % 2, w % 2);
        }
        self.reduction.forward(ctx, self.norm.forward(ctx, t.patch_merge_gather()))
    }
}
