//! Frozen encoders: image tokens for the query bank and pixel features for
//! the decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use anchorseg_core::config::Dims;
use anchorseg_core::decoder::pixel_encoding;
use anchorseg_core::tensor::Tensor;
use anchorseg_core::Error;

use crate::error::Result;

fn patch_side(extent: usize, cells: usize, what: &str) -> Result<usize> {
    if cells == 0 || extent % cells != 0 {
        return Err(Error::Config(format!("{what}: extent {extent} is not divisible by {cells}")).into());
    }
    Ok(extent / cells)
}

/// Every `ph × pw` patch flattened in (y, x, channel) order.
fn patches(image: &[f32], dims: &Dims, rows: usize, cols: usize, ph: usize, pw: usize) -> Vec<Vec<f32>> {
    let c = dims.c;
    let mut out = Vec::with_capacity(rows * cols);
    for gy in 0..rows {
        for gx in 0..cols {
            let mut flat = Vec::with_capacity(ph * pw * c);
            for y in gy * ph..(gy + 1) * ph {
                let start = (y * dims.w + gx * pw) * c;
                flat.extend_from_slice(&image[start..start + pw * c]);
            }
            out.push(flat);
        }
    }
    out
}

/// Random projection of a flattened `ph × pw × c` patch. Most of the weight is
/// shared across in-patch positions so the patch colour stays linearly
/// readable; the rest is drawn independently per position.
fn patch_projection(rng: &mut ChaCha8Rng, out_dim: usize, ph: usize, pw: usize, c: usize) -> Vec<f32> {
    let positions = ph * pw;
    let shared = Tensor::<f32>::randn([out_dim, c], 2.0, rng).into_data();
    let own = Tensor::<f32>::randn([out_dim, positions * c], 2.0 * UNTIED, rng).into_data();
    let mut w = vec![0f32; out_dim * positions * c];
    for o in 0..out_dim {
        for j in 0..positions * c {
            w[o * positions * c + j] = (shared[o * c + j % c] + own[o * positions * c + j]) / positions as f32;
        }
    }
    w
}

const UNTIED: f64 = 0.25;

fn project(w: &[f32], b: Option<&[f32]>, x: &[f32], out_dim: usize) -> Vec<f32> {
    (0..out_dim)
        .map(|o| {
            let row = &w[o * x.len()..(o + 1) * x.len()];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>() + b.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Patch tokens: `G × G` patches, a fixed random projection to `d_lm`, plus a
/// 2-D sinusoidal position code.
#[derive(Clone, Debug)]
pub struct SceneEncoder {
    dims: Dims,
    patch: (usize, usize),
    projection: Vec<f32>,
    position: Tensor<f32>,
}

impl SceneEncoder {
    pub fn new(dims: &Dims, seed: u64) -> Result<Self> {
        let ph = patch_side(dims.h, dims.grid, "scene encoder height")?;
        let pw = patch_side(dims.w, dims.grid, "scene encoder width")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = patch_projection(&mut rng, dims.d_lm, ph, pw, dims.c);
        Ok(Self {
            dims: dims.clone(),
            patch: (ph, pw),
            projection,
            position: pixel_encoding(dims.grid, dims.grid, dims.d_lm),
        })
    }

    /// `image` is `h × w × c` row-major; returns `[N, d_lm]`.
    pub fn encode(&self, image: &[f32]) -> Result<Tensor<f32>> {
        let d = &self.dims;
        check_image(image, d)?;
        let (ph, pw) = self.patch;
        let mut data = Vec::with_capacity(d.n_tokens() * d.d_lm);
        for (i, p) in patches(image, d, d.grid, d.grid, ph, pw).iter().enumerate() {
            let row = project(&self.projection, None, p, d.d_lm);
            data.extend(row.iter().zip(self.position.row(i)).map(|(a, b)| a + b));
        }
        Ok(Tensor::new([d.n_tokens(), d.d_lm], data)?)
    }
}

/// Stand-in for a pretrained image encoder: each `h/H × w/W` patch goes
/// through a fixed random affine map and a ReLU, giving `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    dims: Dims,
    patch: (usize, usize),
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl FeatureEncoder {
    pub fn new(dims: &Dims, seed: u64) -> Result<Self> {
        let ph = patch_side(dims.h, dims.feat_h, "feature encoder height")?;
        let pw = patch_side(dims.w, dims.feat_w, "feature encoder width")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7);
        let weight = patch_projection(&mut rng, dims.channels, ph, pw, dims.c);
        let bias = (0..dims.channels).map(|_| rng.gen_range(-0.2..0.2)).collect();
        Ok(Self {
            dims: dims.clone(),
            patch: (ph, pw),
            weight,
            bias,
        })
    }

    pub fn encode(&self, image: &[f32]) -> Result<Tensor<f32>> {
        let d = &self.dims;
        check_image(image, d)?;
        let (ph, pw) = self.patch;
        let hw = d.feat_h * d.feat_w;
        let mut data = vec![0f32; d.channels * hw];
        for (i, p) in patches(image, d, d.feat_h, d.feat_w, ph, pw).iter().enumerate() {
            let centred: Vec<f32> = p.iter().map(|x| x - 0.5).collect();
            for (ch, v) in project(&self.weight, Some(&self.bias), &centred, d.channels).into_iter().enumerate() {
                data[ch * hw + i] = v.max(0.0);
            }
        }
        Ok(Tensor::new([d.channels, d.feat_h, d.feat_w], data)?)
    }
}

fn check_image(image: &[f32], d: &Dims) -> Result<()> {
    let want = d.h * d.w * d.c;
    if image.len() != want {
        return Err(anchorseg_core::Error::Shape {
            op: "encode",
            lhs: vec![image.len()],
            rhs: vec![want],
        }
        .into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_gives_position_code() {
        let dims = Dims::toy();
        let enc = SceneEncoder::new(&dims, 3).unwrap();
        let tokens = enc.encode(&vec![0.0; dims.h * dims.w * dims.c]).unwrap();
        assert_eq!(tokens.data(), pixel_encoding::<f32>(dims.grid, dims.grid, dims.d_lm).data());
    }

    #[test]
    fn one_patch_changes_one_row() {
        let dims = Dims::toy();
        let enc = SceneEncoder::new(&dims, 3).unwrap();
        let base: Vec<f32> = (0..dims.h * dims.w * dims.c).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut other = base.clone();
        // pixel (13, 40) sits in patch (1, 3) with 12 × 12 patches
        other[(13 * dims.w + 40) * dims.c + 1] += 0.5;
        let (a, b) = (enc.encode(&base).unwrap(), enc.encode(&other).unwrap());
        let changed: Vec<usize> = (0..dims.n_tokens()).filter(|&i| a.row(i) != b.row(i)).collect();
        assert_eq!(changed, vec![dims.grid + 3]);
    }

    #[test]
    fn seeded_and_bit_identical() {
        let dims = Dims::toy();
        let img: Vec<f32> = (0..dims.h * dims.w * dims.c).map(|i| (i % 11) as f32 / 11.0).collect();
        let a = SceneEncoder::new(&dims, 9).unwrap().encode(&img).unwrap();
        let b = SceneEncoder::new(&dims, 9).unwrap().encode(&img).unwrap();
        let c = SceneEncoder::new(&dims, 10).unwrap().encode(&img).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let f = FeatureEncoder::new(&dims, 9).unwrap().encode(&img).unwrap();
        assert_eq!(f.shape(), &[dims.channels, dims.feat_h, dims.feat_w]);
        assert!(f.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn indivisible_extent_is_a_config_error() {
        let mut dims = Dims::toy();
        dims.grid = 7;
        assert!(matches!(
            SceneEncoder::new(&dims, 0),
            Err(crate::error::BenchError::Core(Error::Config(_)))
        ));
        assert!(SceneEncoder::new(&Dims::toy(), 0)
            .unwrap()
            .encode(&[0.0; 3])
            .is_err());
    }
}
