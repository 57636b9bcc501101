//! Parameters and the per-sample forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Dims, LossWeights, Toggles};
use crate::decoder::{decode_conditioned, DecoderParams};
use crate::error::{contract, shape_err, Result};
use crate::grounding::{
    fuse_multi_anchor, inject_prior, prior_from_similarity, similarity_map, spatial_responses, ConvHeadParams,
    FusionParams, SimilarityMaps,
};
use crate::imaging::{GaussianSpec, GridMap};
use crate::objectives::{downsample_target, loss_m2t, loss_t2m, loss_total, soften_mask, LossTerms};
use crate::querybank::{add_positional, generate_query_bank, project_phi, HiddenStates, QueryBankParams};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub bank: QueryBankParams,
    pub head: ConvHeadParams,
    /// Present when more than one anchor is configured.
    pub fusion: Option<FusionParams>,
    pub decoder: DecoderParams,
}

/// Trainable state plus the dimensions it was built for.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub dims: Dims,
    pub store: ParamStore<T>,
    pub params: ModelParams,
}

/// Encoded inputs of one sample.
#[derive(Clone, Debug)]
pub struct SampleInputs<T> {
    /// `[N, d_lm]`.
    pub tokens: Tensor<T>,
    /// Frozen decoder features, `[C, H, W]`.
    pub features: Tensor<T>,
    pub symbols: Vec<u16>,
}

/// Supervision of one sample; none of it receives gradients.
#[derive(Clone, Debug)]
pub struct SampleTargets<T> {
    /// Binary mask, `[h, w]`.
    pub mask: Tensor<T>,
    /// Softened mask, `[h, w]`.
    pub softened: Tensor<T>,
    /// Softened token-grid target, `[N]`.
    pub token_target: Tensor<T>,
}

impl<T: Real> SampleTargets<T> {
    pub fn from_mask(mask: &GridMap<T>, dims: &Dims, spec: &GaussianSpec) -> Result<Self> {
        if (mask.channels, mask.height, mask.width) != (1, dims.h, dims.w) {
            return Err(shape_err("targets", &[mask.channels, mask.height, mask.width], &[1, dims.h, dims.w]));
        }
        let softened = soften_mask(mask, spec)?;
        let down = downsample_target(mask, dims.grid, dims.l_vl, spec)?;
        Ok(Self {
            mask: Tensor::new([dims.h, dims.w], mask.data.clone())?,
            softened: Tensor::new([dims.h, dims.w], softened.data)?,
            token_target: Tensor::new([dims.n_tokens()], down)?,
        })
    }

    pub fn cast<U: Real>(&self) -> SampleTargets<U> {
        SampleTargets {
            mask: self.mask.cast(),
            softened: self.softened.cast(),
            token_target: self.token_target.cast(),
        }
    }
}

impl<T: Real> SampleInputs<T> {
    pub fn cast<U: Real>(&self) -> SampleInputs<U> {
        SampleInputs {
            tokens: self.tokens.cast(),
            features: self.features.cast(),
            symbols: self.symbols.clone(),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<'t, T: Real> {
    pub hidden: HiddenStates<'t, T>,
    /// Raw responses per anchor, `[N]`.
    pub raw: Vec<Var<'t, T>>,
    pub similarity: Vec<SimilarityMaps<'t, T>>,
    pub prior: Option<Var<'t, T>>,
    /// Position-augmented queries fed to the decoder.
    pub queries: Var<'t, T>,
    /// `[h, w]`.
    pub logits: Var<'t, T>,
}

impl<T: Real> Model<T> {
    /// Seeded initialization.
    pub fn new(dims: &Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bank = QueryBankParams::init(&mut store, dims, &mut rng);
        let head = ConvHeadParams::init(&mut store, dims, &mut rng);
        let fusion = (dims.anchors > 1).then(|| FusionParams::init(&mut store, dims.channels, dims.anchors));
        let decoder = DecoderParams::init(&mut store, dims.d, dims.channels, dims.decoder_blocks, &mut rng);
        Ok(Self {
            dims: dims.clone(),
            store,
            params: ModelParams {
                bank,
                head,
                fusion,
                decoder,
            },
        })
    }

    /// Same values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            dims: self.dims.clone(),
            store: self.store.cast(),
            params: self.params.clone(),
        }
    }

    /// Replaces every parameter by name. All parameters must be present.
    pub fn load(&mut self, named: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, value) in named {
            let id = self
                .store
                .find(&name)
                .ok_or_else(|| contract("load", format!("unknown parameter {name}")))?;
            self.store.set(&name, value)?;
            seen[id.index()] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            let name = &self.store.iter().nth(missing).expect("index in range").name;
            return Err(contract("load", format!("parameter {name} missing")));
        }
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        v: &[Var<'t, T>],
        inputs: &SampleInputs<T>,
        toggles: &Toggles,
    ) -> Result<Forward<'t, T>> {
        let dims = &self.dims;
        let p = &self.params;
        let tokens = tape.constant(inputs.tokens.clone());
        let hidden = generate_query_bank(&p.bank.reasoner, v, tokens, &inputs.symbols)?;
        let bank = project_phi(&p.bank.phi, v, hidden.stacked(tape)?)?;

        let raw = hidden
            .anchors
            .iter()
            .map(|&a| spatial_responses(tokens, a))
            .collect::<Result<Vec<_>>>()?;
        let similarity = raw
            .iter()
            .map(|&r| similarity_map(r, dims.h, dims.w, dims.l_vl))
            .collect::<Result<Vec<_>>>()?;

        let mut features = tape.constant(inputs.features.clone());
        let mut prior = None;
        if toggles.use_prior {
            let priors = similarity
                .iter()
                .map(|s| Ok(prior_from_similarity(s.upsampled, dims, &p.head, v, &mut Vec::new())?.0))
                .collect::<Result<Vec<_>>>()?;
            let fused = match &p.fusion {
                Some(fusion) => fuse_multi_anchor(&priors, fusion, v)?,
                None => priors[0],
            };
            features = inject_prior(features, fused)?;
            prior = Some(fused);
        }

        let mut queries = add_positional(bank, p.bank.positional.of(v))?;
        if !toggles.use_contextual {
            queries = queries.slice_rows(dims.k(), 1)?;
        }
        let out = decode_conditioned(&p.decoder, v, features, queries, dims.h, dims.w)?;
        Ok(Forward {
            hidden,
            raw,
            similarity,
            prior,
            queries,
            logits: out.logits,
        })
    }

    /// Total objective of one forward pass; cycle terms are averaged over
    /// anchors and left out when the target mask is empty.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape<T>,
        fwd: &Forward<'t, T>,
        targets: &SampleTargets<T>,
        weights: &LossWeights,
        toggles: &Toggles,
    ) -> Result<LossTerms<'t, T>> {
        let mask = tape.constant(targets.mask.clone());
        let has_target = targets.mask.data().iter().any(|&m| m > T::zero());
        let tmcc = if has_target && toggles.use_tmcc && (toggles.use_t2m || toggles.use_m2t) {
            let softened = tape.constant(targets.softened.clone());
            let token_target = tape.constant(targets.token_target.clone());
            let mut sum: Option<Var<'t, T>> = None;
            for s in &fwd.similarity {
                let mut term = None;
                if toggles.use_t2m {
                    term = Some(loss_t2m(s.upsampled, softened, weights)?);
                }
                if toggles.use_m2t {
                    let m2t = loss_m2t(s.normalized, token_target, weights)?;
                    term = Some(match term {
                        Some(t) => t.add(m2t)?,
                        None => m2t,
                    });
                }
                let term = term.expect("at least one direction enabled");
                sum = Some(match sum {
                    Some(acc) => acc.add(term)?,
                    None => term,
                });
            }
            sum.map(|s| s.scale(T::one() / T::lit(fwd.similarity.len() as f64)))
        } else {
            None
        };
        loss_total(fwd.logits, mask, tmcc, None, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(dims: &Dims, seed: u64) -> (SampleInputs<f64>, SampleTargets<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = SampleInputs {
            tokens: Tensor::randn([dims.n_tokens(), dims.d_lm], 1.0, &mut rng),
            features: Tensor::randn([dims.channels, dims.feat_h, dims.feat_w], 1.0, &mut rng),
            symbols: vec![1, 3],
        };
        let mask = GridMap::plane(
            dims.h,
            dims.w,
            (0..dims.h * dims.w)
                .map(|i| if i % dims.w < dims.w / 2 && i / dims.w < dims.h / 3 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let targets = SampleTargets::from_mask(&mask, dims, &GaussianSpec::default()).unwrap();
        (inputs, targets)
    }

    #[test]
    fn forward_shapes_and_finite_loss() {
        let dims = Dims::tiny();
        let model = Model::<f64>::new(&dims, 0).unwrap();
        let (inputs, targets) = sample(&dims, 1);
        let tape = Tape::new();
        let v = model.store.bind(&tape);
        let fwd = model.forward(&tape, &v, &inputs, &Toggles::default()).unwrap();
        assert_eq!(fwd.logits.shape(), vec![dims.h, dims.w]);
        assert_eq!(fwd.queries.shape(), vec![dims.n_bank, dims.d]);
        assert_eq!(fwd.prior.unwrap().shape(), vec![dims.channels, dims.feat_h, dims.feat_w]);
        let loss = model.loss(&tape, &fwd, &targets, &LossWeights::default(), &Toggles::default()).unwrap();
        assert!(loss.total.value().item().unwrap().is_finite());
        assert!(loss.tmcc.is_some());
    }

    #[test]
    fn toggles_shape_the_graph() {
        let dims = Dims::tiny();
        let model = Model::<f64>::new(&dims, 0).unwrap();
        let (inputs, targets) = sample(&dims, 1);
        let toggles = Toggles {
            use_prior: false,
            use_tmcc: false,
            use_contextual: false,
            ..Toggles::default()
        };
        let tape = Tape::new();
        let v = model.store.bind(&tape);
        let fwd = model.forward(&tape, &v, &inputs, &toggles).unwrap();
        assert!(fwd.prior.is_none());
        assert_eq!(fwd.queries.shape(), vec![1, dims.d]);
        let loss = model.loss(&tape, &fwd, &targets, &LossWeights::default(), &toggles).unwrap();
        assert!(loss.tmcc.is_none());
    }

    #[test]
    fn empty_target_has_no_cycle_term() {
        let dims = Dims::tiny();
        let model = Model::<f64>::new(&dims, 0).unwrap();
        let (inputs, _) = sample(&dims, 1);
        let empty = GridMap::plane(dims.h, dims.w, vec![0.0; dims.h * dims.w]).unwrap();
        let targets = SampleTargets::from_mask(&empty, &dims, &GaussianSpec::default()).unwrap();
        let tape = Tape::new();
        let v = model.store.bind(&tape);
        let fwd = model.forward(&tape, &v, &inputs, &Toggles::default()).unwrap();
        let loss = model.loss(&tape, &fwd, &targets, &LossWeights::default(), &Toggles::default()).unwrap();
        assert!(loss.tmcc.is_none());
    }

    #[test]
    fn initialization_is_seeded() {
        let dims = Dims::tiny();
        let a = Model::<f32>::new(&dims, 5).unwrap();
        let b = Model::<f32>::new(&dims, 5).unwrap();
        let c = Model::<f32>::new(&dims, 6).unwrap();
        let values = |m: &Model<f32>| m.store.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn load_requires_every_parameter() {
        let dims = Dims::tiny();
        let src = Model::<f32>::new(&dims, 1).unwrap();
        let mut dst = Model::<f32>::new(&dims, 2).unwrap();
        let named: Vec<_> = src.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        dst.load(named.clone()).unwrap();
        assert_eq!(
            dst.store.iter().map(|p| &p.value).collect::<Vec<_>>(),
            src.store.iter().map(|p| &p.value).collect::<Vec<_>>()
        );
        assert!(dst.load(named[1..].to_vec()).is_err());
        let mut bad = named.clone();
        bad[0].0 = "nope".into();
        assert!(dst.load(bad).is_err());
    }

    #[test]
    fn multi_anchor_uses_fusion() {
        let mut dims = Dims::tiny();
        dims.anchors = 2;
        let model = Model::<f64>::new(&dims, 0).unwrap();
        assert!(model.params.fusion.is_some());
        let (inputs, targets) = sample(&dims, 2);
        let tape = Tape::new();
        let v = model.store.bind(&tape);
        let fwd = model.forward(&tape, &v, &inputs, &Toggles::default()).unwrap();
        assert_eq!(fwd.raw.len(), 2);
        let loss = model.loss(&tape, &fwd, &targets, &LossWeights::default(), &Toggles::default()).unwrap();
        assert!(loss.total.value().item().unwrap().is_finite());
    }
}
