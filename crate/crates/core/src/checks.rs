//! Finite-difference checks of every differentiable stage, in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Dims, LossWeights, Toggles};
use crate::decoder::{decode_conditioned, DecoderParams};
use crate::error::{contract, Result};
use crate::grounding::{build_spatial_prior, spatial_responses, ConvHeadParams};
use crate::imaging::{resize_long_side_pad_var, GaussianSpec, GridMap, NORM_EPS};
use crate::model::{Model, SampleInputs, SampleTargets};
use crate::objectives::{loss_m2t, loss_t2m, loss_total, token_map_upsampled};
use crate::querybank::{add_positional, generate_query_bank, project_phi, QueryBankParams};
use crate::tensor::{grad_check_with_fault, OpKind, ParamStore, Tape, Tensor, Var};

/// Finite-difference step.
pub const EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Smallest error a corrupted backward rule must produce.
pub const CONTROL_FLOOR: f64 = 1e-1;

pub const MODULES: [&str; 7] = ["tensor", "imaging", "querybank", "grounding", "decoder", "objectives", "full"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    /// A deliberately corrupted backward rule; passes when the error is large.
    pub negative_control: bool,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        if self.negative_control {
            self.max_rel_error > CONTROL_FLOOR
        } else {
            self.max_rel_error < TOLERANCE
        }
    }
}

type Loss<'t> = Var<'t, f64>;

/// `Σ x ⊙ r` for a fixed pseudo-random `r`, so that no gradient is uniform.
fn probe<'t>(x: Var<'t, f64>, seed: u64) -> Result<Loss<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = x.tape().constant(Tensor::randn(x.shape(), 1.0, &mut rng));
    Ok(x.mul(r)?.sum())
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Adds noise to every parameter so no weight sits at an exact zero.
fn jitter(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = (0..store.len()).collect();
    for i in ids {
        let id = store.find(&store.iter().nth(i).expect("in range").name.clone()).expect("present");
        let v = store.value_mut(id);
        let noise = Tensor::<f64>::randn(v.shape().to_vec(), std, &mut rng);
        v.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
}

fn store_values(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|p| p.value.clone()).collect()
}

struct Runner {
    only: Option<String>,
    out: Vec<CheckOutcome>,
}

impl Runner {
    fn wants(&self, module: &str) -> bool {
        self.only.as_deref().is_none_or(|m| m == module)
    }

    fn check<F>(&mut self, module: &'static str, name: &str, params: &[Tensor<f64>], fault: Option<OpKind>, f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let report = grad_check_with_fault(f, params, EPS, fault)?;
        self.out.push(CheckOutcome {
            module,
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            entries: report.entries,
            negative_control: fault.is_some(),
        });
        Ok(())
    }
}

/// Runs the checks of one module, or all of them.
pub fn grad_suite(module: Option<&str>) -> Result<Vec<CheckOutcome>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(contract("grad_suite", format!("unknown module {m}; expected one of {MODULES:?}")));
        }
    }
    let mut r = Runner {
        only: module.map(str::to_string),
        out: Vec::new(),
    };
    if r.wants("tensor") {
        tensor_checks(&mut r)?;
    }
    if r.wants("imaging") {
        imaging_checks(&mut r)?;
    }
    if r.wants("querybank") {
        querybank_checks(&mut r)?;
    }
    if r.wants("grounding") {
        grounding_checks(&mut r)?;
    }
    if r.wants("decoder") {
        decoder_checks(&mut r)?;
    }
    if r.wants("objectives") {
        objective_checks(&mut r)?;
    }
    if r.wants("full") {
        full_checks(&mut r)?;
    }
    Ok(r.out)
}

/// Values bounded away from zero, for kinked functions.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, seed).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

fn tensor_checks(r: &mut Runner) -> Result<()> {
    let m = "tensor";
    let (a, b) = (randn(&[3, 4], 1), randn(&[4, 2], 2));
    r.check(m, "matmul", &[a.clone(), b.clone()], None, |_, v| probe(v[0].matmul(v[1])?, 10))?;
    r.check(m, "matmul_t", &[a.clone(), randn(&[5, 4], 3)], None, |_, v| {
        probe(v[0].matmul_t(v[1])?, 11)
    })?;
    let c = randn(&[3, 4], 4);
    r.check(m, "add_sub_mul", &[a.clone(), c], None, |_, v| {
        probe(v[0].add(v[1])?.mul(v[0])?.sub(v[1])?, 12)
    })?;
    r.check(m, "scale_add_scalar", &[a.clone()], None, |_, v| {
        probe(v[0].scale(-1.7).add_scalar(0.3), 13)
    })?;
    r.check(m, "add_row_bias", &[a.clone(), randn(&[4], 5)], None, |_, v| {
        probe(v[0].add_row_bias(v[1])?, 14)
    })?;
    r.check(m, "sigmoid", &[a.clone()], None, |_, v| probe(v[0].sigmoid(), 15))?;
    r.check(m, "relu", &[away_from_zero(&[3, 4], 6)], None, |_, v| probe(v[0].relu(), 16))?;
    r.check(m, "tanh", &[a.clone()], None, |_, v| probe(v[0].tanh(), 17))?;
    r.check(m, "sum_mean", &[a.clone()], None, |_, v| {
        Ok(v[0].sum().mul(v[0].mean())?)
    })?;
    r.check(m, "transpose_reshape", &[a.clone()], None, |_, v| {
        probe(v[0].transpose()?.reshape([2, 6])?, 18)
    })?;
    r.check(m, "softmax_rows", &[a.clone()], None, |_, v| probe(v[0].softmax_rows()?, 19))?;
    r.check(m, "concat_slice_rows", &[a.clone(), randn(&[2, 4], 7)], None, |t, v| {
        probe(t.concat_rows(&[v[0], v[1]])?.slice_rows(1, 3)?, 20)
    })?;
    r.check(m, "mean_rows", &[a.clone()], None, |_, v| probe(v[0].mean_rows()?, 21))?;
    for stride in [1, 2] {
        r.check(
            m,
            &format!("conv2d_stride{stride}"),
            &[randn(&[2, 5, 6], 8), randn(&[3, 2, 3, 3], 9), randn(&[3], 10)],
            None,
            move |_, v| probe(v[0].conv2d(v[1], v[2], stride)?, 22),
        )?;
    }
    r.check(m, "sigmoid_corrupted", &[a], Some(OpKind::Sigmoid), |_, v| probe(v[0].sigmoid(), 15))?;
    Ok(())
}

fn imaging_checks(r: &mut Runner) -> Result<()> {
    let m = "imaging";
    let x = randn(&[2, 5, 7], 30);
    r.check(m, "bilinear_upscale", &[x.clone()], None, |_, v| probe(v[0].bilinear(9, 13, false)?, 31))?;
    r.check(m, "bilinear_antialias_downscale", &[x.clone()], None, |_, v| {
        probe(v[0].bilinear(2, 3, true)?, 32)
    })?;
    r.check(m, "crop_top_left", &[x.clone()], None, |_, v| probe(v[0].crop_top_left(3, 4)?, 33))?;
    r.check(m, "pad_bottom_right", &[x.clone()], None, |_, v| {
        probe(v[0].pad_bottom_right(6, 9)?, 34)
    })?;
    r.check(m, "resize_long_side_pad", &[randn(&[6, 10], 35)], None, |_, v| {
        probe(resize_long_side_pad_var(v[0], 8)?.0, 36)
    })?;
    r.check(m, "minmax_normalize", &[randn(&[12], 37)], None, |_, v| {
        probe(v[0].minmax_normalize(NORM_EPS), 38)
    })?;
    r.check(m, "bilinear_corrupted", &[x], Some(OpKind::Resize), |_, v| {
        probe(v[0].bilinear(9, 13, false)?, 31)
    })?;
    Ok(())
}

fn querybank_checks(r: &mut Runner) -> Result<()> {
    let dims = Dims::tiny();
    let mut store = ParamStore::<f64>::new();
    let p = QueryBankParams::init(&mut store, &dims, &mut ChaCha8Rng::seed_from_u64(40));
    jitter(&mut store, 41, 0.1);
    let mut params = store_values(&store);
    params.push(randn(&[dims.n_tokens(), dims.d_lm], 42));
    r.check("querybank", "bank_phi_positional", &params, None, |t, v| {
        let tokens = *v.last().expect("tokens");
        let hidden = generate_query_bank(&p.reasoner, v, tokens, &[0, 3, 3, 5])?;
        let bank = project_phi(&p.phi, v, hidden.stacked(t)?)?;
        probe(add_positional(bank, p.positional.of(v))?, 43)
    })
}

fn grounding_checks(r: &mut Runner) -> Result<()> {
    let mut dims = Dims::tiny();
    dims.h = 12;
    dims.w = 16;
    let mut store = ParamStore::<f64>::new();
    let head = ConvHeadParams::init(&mut store, &dims, &mut ChaCha8Rng::seed_from_u64(50));
    jitter(&mut store, 51, 0.1);
    let mut params = store_values(&store);
    params.push(randn(&[dims.n_tokens(), dims.d_lm], 52));
    params.push(randn(&[dims.d_lm], 53));
    r.check("grounding", "responses_to_prior", &params, None, |_, v| {
        let n = v.len();
        let raw = spatial_responses(v[n - 2], v[n - 1])?;
        probe(build_spatial_prior(raw, &dims, &head, v)?.prior, 54)
    })
}

fn decoder_checks(r: &mut Runner) -> Result<()> {
    let dims = Dims::tiny();
    let mut store = ParamStore::<f64>::new();
    let p = DecoderParams::init(&mut store, dims.d, dims.channels, 2, &mut ChaCha8Rng::seed_from_u64(60));
    jitter(&mut store, 61, 0.2);
    let mut params = store_values(&store);
    params.push(randn(&[dims.channels, dims.feat_h, dims.feat_w], 62));
    params.push(randn(&[dims.n_bank, dims.d], 63));
    r.check("decoder", "decode_conditioned", &params, None, |_, v| {
        let n = v.len();
        probe(decode_conditioned(&p, v, v[n - 2], v[n - 1], 9, 7)?.logits, 64)
    })
}

fn objective_checks(r: &mut Runner) -> Result<()> {
    let m = "objectives";
    let dims = Dims::tiny();
    let spec = GaussianSpec::default();
    let mask = GridMap::plane(
        dims.h,
        dims.w,
        (0..dims.h * dims.w)
            .map(|i| if (3..9).contains(&(i % dims.w)) && (2..11).contains(&(i / dims.w)) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let targets = SampleTargets::<f64>::from_mask(&mask, &dims, &spec)?;
    let w = LossWeights::default();
    let (soft, down) = (targets.softened.clone(), targets.token_target.clone());
    r.check(m, "tmcc_wrt_responses", &[randn(&[dims.n_tokens()], 70)], None, |t, v| {
        let s_up = token_map_upsampled(v[0], dims.h, dims.w, dims.l_vl)?;
        let t2m = loss_t2m(s_up, t.constant(soft.clone()), &w)?;
        let m2t = loss_m2t(v[0].minmax_normalize(NORM_EPS), t.constant(down.clone()), &w)?;
        t2m.add(m2t)
    })?;
    let (soft, down) = (targets.softened.clone(), targets.token_target.clone());
    r.check(
        m,
        "tmcc_wrt_anchor",
        &[randn(&[dims.n_tokens(), dims.d_lm], 71), randn(&[dims.d_lm], 72)],
        None,
        |t, v| {
            let raw = spatial_responses(v[0], v[1])?;
            let s_up = token_map_upsampled(raw, dims.h, dims.w, dims.l_vl)?;
            let t2m = loss_t2m(s_up, t.constant(soft.clone()), &w)?;
            let m2t = loss_m2t(raw.minmax_normalize(NORM_EPS), t.constant(down.clone()), &w)?;
            t2m.add(m2t)
        },
    )?;
    let mask_t = targets.mask.clone();
    r.check(m, "mask_loss_wrt_logits", &[randn(&[dims.h, dims.w], 73)], None, |t, v| {
        Ok(loss_total(v[0], t.constant(mask_t.clone()), None, None, &w)?.total)
    })?;
    let mask_t = targets.mask.clone();
    r.check(m, "dice_corrupted", &[randn(&[dims.h, dims.w], 73)], Some(OpKind::Dice), |t, v| {
        Ok(loss_total(v[0], t.constant(mask_t.clone()), None, None, &w)?.total)
    })?;
    Ok(())
}

fn full_checks(r: &mut Runner) -> Result<()> {
    let dims = Dims::tiny();
    let spec = GaussianSpec::default();
    let mut model = Model::<f64>::new(&dims, 80)?;
    jitter(&mut model.store, 81, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let inputs = SampleInputs {
        tokens: Tensor::randn([dims.n_tokens(), dims.d_lm], 1.0, &mut rng),
        features: Tensor::randn([dims.channels, dims.feat_h, dims.feat_w], 1.0, &mut rng),
        symbols: vec![2, 5, 1],
    };
    let mask = GridMap::plane(
        dims.h,
        dims.w,
        (0..dims.h * dims.w)
            .map(|i| if i % dims.w >= 9 && i / dims.w >= 5 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let targets = SampleTargets::from_mask(&mask, &dims, &spec)?;
    let params = store_values(&model.store);
    let toggles = Toggles::default();
    let w = LossWeights::default();
    r.check("full", "total_loss", &params, None, |t, v| {
        let fwd = model.forward(t, v, &inputs, &toggles)?;
        Ok(model.loss(t, &fwd, &targets, &w, &toggles)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_rejected() {
        assert!(grad_suite(Some("nope")).is_err());
    }

    #[test]
    fn tensor_module_passes() {
        let out = grad_suite(Some("tensor")).unwrap();
        assert!(out.iter().any(|o| o.negative_control));
        for o in &out {
            assert!(o.passed(), "{o:?}");
        }
    }
}
