//! Token responses to the anchor and the spatial prior built from them.

use rand::Rng;

use crate::config::Dims;
use crate::error::{contract, shape_err, Result};
use crate::imaging::{long_side_extents, resize_long_side_pad_var, NORM_EPS};
use crate::tensor::{ParamId, ParamStore, Real, Tensor, Var};

/// Channel path of the prior head for `channels` output channels.
pub fn head_path(channels: usize) -> [usize; 4] {
    [1, 4, 16, channels]
}

/// Three 3×3 convolutions `1 → 4 → 16 → C` with relu between.
#[derive(Clone, Debug)]
pub struct ConvHeadParams {
    pub kernels: [ParamId; 3],
    pub biases: [ParamId; 3],
    pub strides: [usize; 3],
}

impl ConvHeadParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, dims: &Dims, rng: &mut impl Rng) -> Self {
        let path = head_path(dims.channels);
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for i in 0..3 {
            let (cin, cout) = (path[i], path[i + 1]);
            let fan_in = (cin * 9) as f64;
            let gain = if i < 2 { 2.0 } else { 1.0 };
            kernels.push(store.add(
                format!("prior_head.conv{}.kernel", i + 1),
                Tensor::randn([cout, cin, 3, 3], (gain / fan_in).sqrt(), rng),
            ));
            biases.push(store.add(format!("prior_head.conv{}.bias", i + 1), Tensor::zeros([cout])));
        }
        Self {
            kernels: kernels.try_into().expect("three layers"),
            biases: biases.try_into().expect("three layers"),
            strides: dims.head_strides,
        }
    }
}

/// 1×1 convolution from `T·C` stacked prior channels to `C`.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl FusionParams {
    /// Starts as the channel-wise mean over anchors.
    pub fn init<T: Real>(store: &mut ParamStore<T>, channels: usize, anchors: usize) -> Self {
        let share = T::one() / T::lit(anchors as f64);
        let kernel = Tensor::from_fn([channels, anchors * channels, 1, 1], |i| {
            let (out, inp) = (i / (anchors * channels), i % (anchors * channels));
            if inp % channels == out {
                share
            } else {
                T::zero()
            }
        });
        Self {
            kernel: store.add("fusion.kernel", kernel),
            bias: store.add("fusion.bias", Tensor::zeros([channels])),
        }
    }
}

/// `s_i = ⟨tokens_i, anchor⟩` for `tokens: [N, k]` and an anchor of `k` values.
pub fn spatial_responses<'t, T: Real>(tokens: Var<'t, T>, anchor: Var<'t, T>) -> Result<Var<'t, T>> {
    let ts = tokens.shape();
    let k = anchor.value().numel();
    if ts.len() != 2 || ts[1] != k {
        return Err(contract(
            "spatial_responses",
            format!("tokens {ts:?} do not match an anchor of {k} values"),
        ));
    }
    tokens.matmul_t(anchor.reshape([1, k])?)?.reshape([ts[0]])
}

/// Side of the square token grid, if `n` is a perfect square.
pub fn grid_side(n: usize) -> Option<usize> {
    let g = (n as f64).sqrt().round() as usize;
    (g * g == n && g > 0).then_some(g)
}

/// Normalized responses and their image-resolution map.
#[derive(Clone, Debug)]
pub struct SimilarityMaps<'t, T: Real> {
    /// Min-max normalized responses, `[N]`.
    pub normalized: Var<'t, T>,
    /// The same values on the `G × G` grid.
    pub grid: Var<'t, T>,
    /// Upsampled, cropped and restored to `[h, w]`.
    pub upsampled: Var<'t, T>,
    /// Crop extents inside the `l_vl × l_vl` upsampled grid.
    pub crop: (usize, usize),
}

/// Named intermediate shapes, in pipeline order.
pub type ShapeTrace = Vec<(&'static str, Vec<usize>)>;

fn expect_shape<T: Real>(trace: &mut ShapeTrace, stage: &'static str, v: Var<'_, T>, want: &[usize]) -> Result<()> {
    let got = v.shape();
    if got != want {
        return Err(shape_err(stage, &got, want));
    }
    trace.push((stage, got));
    Ok(())
}

fn similarity_traced<'t, T: Real>(
    raw: Var<'t, T>,
    h: usize,
    w: usize,
    l_vl: usize,
    trace: &mut ShapeTrace,
) -> Result<SimilarityMaps<'t, T>> {
    let n = raw.value().numel();
    let g = grid_side(n).ok_or_else(|| contract("similarity_map", format!("{n} responses do not form a square grid")))?;
    if h == 0 || w == 0 {
        return Err(contract("similarity_map", "image extents must be positive"));
    }
    let normalized = raw.reshape([n])?.minmax_normalize(T::lit(NORM_EPS));
    expect_shape(trace, "normalize", normalized, &[n])?;
    let grid = normalized.reshape([g, g])?;
    expect_shape(trace, "grid", grid, &[g, g])?;
    let up = grid.bilinear(l_vl, l_vl, true)?;
    expect_shape(trace, "upsample", up, &[l_vl, l_vl])?;
    let (hc, wc) = long_side_extents(h, w, l_vl);
    let cropped = up.crop_top_left(hc, wc)?;
    expect_shape(trace, "crop", cropped, &[hc, wc])?;
    let upsampled = cropped.bilinear(h, w, true)?;
    expect_shape(trace, "restore", upsampled, &[h, w])?;
    Ok(SimilarityMaps {
        normalized,
        grid,
        upsampled,
        crop: (hc, wc),
    })
}

/// Normalizes `raw: [N]` (`N = G²`), lays it on the grid, upsamples to
/// `l_vl × l_vl`, crops the region covered by an `h × w` image scaled to that
/// long side, and resizes the crop back to `h × w`.
pub fn similarity_map<'t, T: Real>(raw: Var<'t, T>, h: usize, w: usize, l_vl: usize) -> Result<SimilarityMaps<'t, T>> {
    similarity_traced(raw, h, w, l_vl, &mut Vec::new())
}

/// Output of [`build_spatial_prior`].
#[derive(Clone, Debug)]
pub struct PriorTrace<'t, T: Real> {
    pub similarity: SimilarityMaps<'t, T>,
    /// Input of the conv head, `[1, l_sam, l_sam]`.
    pub padded: Var<'t, T>,
    /// Scaled extents before padding.
    pub scaled: (usize, usize),
    /// `[C, H, W]`.
    pub prior: Var<'t, T>,
    pub shapes: ShapeTrace,
}

/// Runs the conv head over an `[h, w]` similarity map.
pub fn prior_from_similarity<'t, T: Real>(
    similarity: Var<'t, T>,
    dims: &Dims,
    head: &ConvHeadParams,
    v: &[Var<'t, T>],
    trace: &mut ShapeTrace,
) -> Result<(Var<'t, T>, Var<'t, T>, (usize, usize))> {
    let l = dims.l_sam;
    let (padded, hs, ws) = resize_long_side_pad_var(similarity, l)?;
    let padded = padded.reshape([1, l, l])?;
    expect_shape(trace, "long_side_pad", padded, &[1, l, l])?;
    let mut x = padded;
    let mut side = l;
    let path = head_path(dims.channels);
    for i in 0..3 {
        x = x.conv2d(head.kernels[i].of(v), head.biases[i].of(v), head.strides[i])?;
        if i < 2 {
            x = x.relu();
        }
        side = side.div_ceil(head.strides[i]);
        expect_shape(trace, ["head.conv1", "head.conv2", "head.conv3"][i], x, &[path[i + 1], side, side])?;
    }
    expect_shape(trace, "prior", x, &[dims.channels, dims.feat_h, dims.feat_w])?;
    Ok((x, padded, (hs, ws)))
}

/// Turns raw responses into the `C × H × W` spatial prior, checking the shape
/// after every stage.
pub fn build_spatial_prior<'t, T: Real>(
    raw: Var<'t, T>,
    dims: &Dims,
    head: &ConvHeadParams,
    v: &[Var<'t, T>],
) -> Result<PriorTrace<'t, T>> {
    let mut shapes = Vec::new();
    let similarity = similarity_traced(raw, dims.h, dims.w, dims.l_vl, &mut shapes)?;
    let (prior, padded, scaled) = prior_from_similarity(similarity.upsampled, dims, head, v, &mut shapes)?;
    Ok(PriorTrace {
        similarity,
        padded,
        scaled,
        prior,
        shapes,
    })
}

/// `f ⊕ P`.
pub fn inject_prior<'t, T: Real>(f: Var<'t, T>, prior: Var<'t, T>) -> Result<Var<'t, T>> {
    if f.shape() != prior.shape() {
        return Err(contract(
            "inject_prior",
            format!("features {:?} and prior {:?} differ", f.shape(), prior.shape()),
        ));
    }
    f.add(prior)
}

/// Stacks `T` priors along channels and mixes them with a 1×1 convolution.
pub fn fuse_multi_anchor<'t, T: Real>(
    priors: &[Var<'t, T>],
    fusion: &FusionParams,
    v: &[Var<'t, T>],
) -> Result<Var<'t, T>> {
    let first = priors
        .first()
        .ok_or_else(|| contract("fuse_multi_anchor", "no priors"))?;
    let shape = first.shape();
    if let Some(bad) = priors.iter().find(|p| p.shape() != shape) {
        return Err(contract(
            "fuse_multi_anchor",
            format!("priors {shape:?} and {:?} differ", bad.shape()),
        ));
    }
    let stacked = first.tape().concat_rows(priors)?;
    stacked.conv2d(fusion.kernel.of(v), fusion.bias.of(v), 1)
}
