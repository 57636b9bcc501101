//! A small two-way attention mask decoder conditioned on a query matrix.

use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tensor, Var};

/// Single-head attention projections.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttentionParams {
    fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        Self {
            wq: store.add(format!("{prefix}.wq"), Tensor::randn([c, c], std, rng)),
            wk: store.add(format!("{prefix}.wk"), Tensor::randn([c, c], std, rng)),
            wv: store.add(format!("{prefix}.wv"), Tensor::randn([c, c], std, rng)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    /// Queries attending to pixels.
    pub to_pixels: AttentionParams,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    /// Pixels attending to queries.
    pub to_queries: AttentionParams,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub blocks: Vec<BlockParams>,
    /// Output transform of the anchor slot, zero at initialization.
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl DecoderParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, d: usize, c: usize, blocks: usize, rng: &mut impl Rng) -> Self {
        let proj_w = store.add("decoder.proj.w", Tensor::randn([d, c], 1.0 / (d as f64).sqrt(), rng));
        let proj_b = store.add("decoder.proj.b", Tensor::zeros([1, c]));
        let blocks = (0..blocks)
            .map(|i| {
                let prefix = format!("decoder.block{i}");
                BlockParams {
                    to_pixels: AttentionParams::init(store, &format!("{prefix}.q2p"), c, rng),
                    ffn_w1: store.add(
                        format!("{prefix}.ffn.w1"),
                        Tensor::randn([c, 2 * c], (2.0 / c as f64).sqrt(), rng),
                    ),
                    ffn_b1: store.add(format!("{prefix}.ffn.b1"), Tensor::zeros([1, 2 * c])),
                    ffn_w2: store.add(
                        format!("{prefix}.ffn.w2"),
                        Tensor::randn([2 * c, c], 1.0 / (2.0 * c as f64).sqrt(), rng),
                    ),
                    ffn_b2: store.add(format!("{prefix}.ffn.b2"), Tensor::zeros([1, c])),
                    to_queries: AttentionParams::init(store, &format!("{prefix}.p2q"), c, rng),
                }
            })
            .collect();
        Self {
            proj_w,
            proj_b,
            blocks,
            head_w: store.add("decoder.head.w", Tensor::zeros([c, c])),
            head_b: store.add("decoder.head.b", Tensor::zeros([1, c])),
        }
    }
}

/// Fixed 2-D sinusoidal code, `[H·W, C]`. The first half of the channels
/// encodes the row, the second half the column; an odd last channel is zero.
pub fn pixel_encoding<T: Real>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let half = c / 2;
    Tensor::from_fn([h * w, c], |i| {
        let (pix, ch) = (i / c, i % c);
        let (pos, k) = if ch < half {
            (pix / w, ch)
        } else if ch < 2 * half {
            (pix % w, ch - half)
        } else {
            return T::zero();
        };
        let freq = 1.0 / 10000f64.powf((k / 2 * 2) as f64 / half.max(1) as f64);
        let angle = pos as f64 * freq;
        T::lit(if k % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Decoder result.
#[derive(Clone, Debug)]
pub struct DecoderOutput<'t, T: Real> {
    /// Upsampled logits, `[h, w]`.
    pub logits: Var<'t, T>,
    /// Logits at feature resolution, `[H, W]`.
    pub lowres: Var<'t, T>,
    /// Every attention matrix, in evaluation order.
    pub attention: Vec<Var<'t, T>>,
}

fn attend<'t, T: Real>(
    p: &AttentionParams,
    v: &[Var<'t, T>],
    from: Var<'t, T>,
    to: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let c = from.shape()[1];
    let q = from.matmul(p.wq.of(v))?;
    let k = to.matmul(p.wk.of(v))?;
    let val = to.matmul(p.wv.of(v))?;
    let weights = q.matmul_t(k)?.scale(T::one() / T::lit(c as f64).sqrt()).softmax_rows()?;
    Ok((weights.matmul(val)?, weights))
}

/// Decodes features `f: [C, H, W]` with `queries: [R, d]` whose last row is
/// the anchor, and upsamples the anchor-slot logits to `out_h × out_w`.
pub fn decode_conditioned<'t, T: Real>(
    p: &DecoderParams,
    v: &[Var<'t, T>],
    f: Var<'t, T>,
    queries: Var<'t, T>,
    out_h: usize,
    out_w: usize,
) -> Result<DecoderOutput<'t, T>> {
    let qs = queries.shape();
    if qs.len() != 2 || qs[0] == 0 {
        return Err(contract("decode", format!("query matrix {qs:?} has no anchor row")));
    }
    let fs = f.shape();
    let [c, h, w] = fs[..] else {
        return Err(contract("decode", format!("features must be [C,H,W], got {fs:?}")));
    };
    let tape = f.tape();
    let mut q = queries.matmul(p.proj_w.of(v))?.add_row_bias(p.proj_b.of(v))?;
    let pe = tape.constant(pixel_encoding(h, w, c));
    let mut pix = f.reshape([c, h * w])?.transpose()?.add(pe)?;

    let mut attention = Vec::with_capacity(2 * p.blocks.len());
    for b in &p.blocks {
        let (update, weights) = attend(&b.to_pixels, v, q, pix)?;
        attention.push(weights);
        q = q.add(update)?;
        let hidden = q.matmul(b.ffn_w1.of(v))?.add_row_bias(b.ffn_b1.of(v))?.relu();
        q = q.add(hidden.matmul(b.ffn_w2.of(v))?.add_row_bias(b.ffn_b2.of(v))?)?;
        let (update, weights) = attend(&b.to_queries, v, pix, q)?;
        attention.push(weights);
        pix = pix.add(update)?;
    }

    let anchor = q
        .slice_rows(qs[0] - 1, 1)?
        .matmul(p.head_w.of(v))?
        .add_row_bias(p.head_b.of(v))?;
    let lowres = pix.matmul_t(anchor)?.reshape([h, w])?;
    let logits = lowres.bilinear(out_h, out_w, true)?;
    Ok(DecoderOutput {
        logits,
        lowres,
        attention,
    })
}

/// The same decoder driven by a single segmentation query.
pub fn decode_vanilla<'t, T: Real>(
    p: &DecoderParams,
    v: &[Var<'t, T>],
    f: Var<'t, T>,
    q_seg: Var<'t, T>,
    out_h: usize,
    out_w: usize,
) -> Result<DecoderOutput<'t, T>> {
    let d = q_seg.value().numel();
    decode_conditioned(p, v, f, q_seg.reshape([1, d])?, out_h, out_w)
}
