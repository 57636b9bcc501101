//! The ordered query bank `(q_1, …, q_K, q_anc)`.
//!
//! A recurrent toy reasoner reads the query symbols and the pooled image
//! tokens and unrolls `K` hidden states; anchor heads read the last state.
//! Every hidden state goes through the same projection `φ`, and a learnable
//! positional table is added row by row.

use rand::Rng;

use crate::config::Dims;
use crate::error::{contract, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// `h · wh + pooled · wp + b`, the affine map over `(h ∥ pooled)`.
#[derive(Clone, Debug)]
pub struct StepParams {
    pub wh: ParamId,
    pub wp: ParamId,
    pub b: ParamId,
}

impl StepParams {
    fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_lm: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (2.0 * d_lm as f64).sqrt();
        Self {
            wh: store.add(format!("{prefix}.wh"), Tensor::randn([d_lm, d_lm], std, rng)),
            wp: store.add(format!("{prefix}.wp"), Tensor::randn([d_lm, d_lm], std, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros([1, d_lm])),
        }
    }

    fn apply<'t, T: Real>(&self, v: &[Var<'t, T>], h: Var<'t, T>, pooled: Var<'t, T>) -> Result<Var<'t, T>> {
        h.matmul(self.wh.of(v))?
            .add(pooled.matmul(self.wp.of(v))?)?
            .add_row_bias(self.b.of(v))
    }
}

#[derive(Clone, Debug)]
pub struct ReasonerParams {
    pub embed: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    /// One transition per contextual step.
    pub steps: Vec<StepParams>,
    /// One head per anchor.
    pub anchors: Vec<StepParams>,
}

/// Two affine layers with a relu between, `d_lm → d_lm → d`.
#[derive(Clone, Debug)]
pub struct PhiParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct QueryBankParams {
    pub reasoner: ReasonerParams,
    pub phi: PhiParams,
    /// `[K+1, d]`, zero at initialization.
    pub positional: ParamId,
}

impl QueryBankParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, dims: &Dims, rng: &mut impl Rng) -> Self {
        let (d_lm, d, k) = (dims.d_lm, dims.d, dims.k());
        let lm_std = 1.0 / (d_lm as f64).sqrt();
        let reasoner = ReasonerParams {
            embed: store.add("reasoner.embed", Tensor::randn([dims.vocab, d_lm], 1.0, rng)),
            init_w: store.add("reasoner.init.w", Tensor::randn([d_lm, d_lm], lm_std, rng)),
            init_b: store.add("reasoner.init.b", Tensor::zeros([1, d_lm])),
            steps: (0..k)
                .map(|i| StepParams::init(store, &format!("reasoner.step{}", i + 1), d_lm, rng))
                .collect(),
            anchors: (0..dims.anchors)
                .map(|t| StepParams::init(store, &format!("reasoner.anchor{t}"), d_lm, rng))
                .collect(),
        };
        let phi = PhiParams {
            w1: store.add("phi.w1", Tensor::randn([d_lm, d_lm], (2.0 / d_lm as f64).sqrt(), rng)),
            b1: store.add("phi.b1", Tensor::zeros([1, d_lm])),
            w2: store.add("phi.w2", Tensor::randn([d_lm, d], lm_std, rng)),
            b2: store.add("phi.b2", Tensor::zeros([1, d])),
        };
        let positional = store.add("bank.positional", Tensor::zeros([k + 1, d]));
        Self {
            reasoner,
            phi,
            positional,
        }
    }
}

/// Pre-projection reasoner states, each `[1, d_lm]`.
#[derive(Clone, Debug)]
pub struct HiddenStates<'t, T: Real> {
    pub contextual: Vec<Var<'t, T>>,
    pub anchors: Vec<Var<'t, T>>,
}

impl<'t, T: Real> HiddenStates<'t, T> {
    /// The anchor that the query bank carries.
    pub fn anchor(&self) -> Var<'t, T> {
        self.anchors[0]
    }

    /// `h_1, …, h_K, h_anc` stacked as `[K+1, d_lm]`.
    pub fn stacked(&self, tape: &'t Tape<T>) -> Result<Var<'t, T>> {
        let mut rows = self.contextual.clone();
        rows.push(self.anchor());
        tape.concat_rows(&rows)
    }
}

/// Unrolls the reasoner over `symbols`, conditioned on mean-pooled `tokens: [N, d_lm]`.
pub fn generate_query_bank<'t, T: Real>(
    p: &ReasonerParams,
    v: &[Var<'t, T>],
    tokens: Var<'t, T>,
    symbols: &[u16],
) -> Result<HiddenStates<'t, T>> {
    if symbols.is_empty() {
        return Err(contract("generate_query_bank", "empty symbol sequence"));
    }
    let embed = p.embed.of(v);
    let vocab = embed.shape()[0];
    let mut hist = vec![T::zero(); vocab];
    let share = T::one() / T::lit(symbols.len() as f64);
    for &s in symbols {
        let slot = hist
            .get_mut(s as usize)
            .ok_or_else(|| contract("generate_query_bank", format!("symbol {s} outside vocabulary of {vocab}")))?;
        *slot += share;
    }
    let tape = tokens.tape();
    let mean_embed = tape.constant(Tensor::new([1, vocab], hist)?).matmul(embed)?;
    let pooled = tokens.mean_rows()?;

    let mut h = mean_embed.matmul(p.init_w.of(v))?.add_row_bias(p.init_b.of(v))?;
    let mut contextual = Vec::with_capacity(p.steps.len());
    for step in &p.steps {
        h = step.apply(v, h, pooled)?.tanh();
        contextual.push(h);
    }
    let anchors = p
        .anchors
        .iter()
        .map(|head| head.apply(v, h, pooled))
        .collect::<Result<_>>()?;
    Ok(HiddenStates { contextual, anchors })
}

/// Applies `φ` to every row of `hidden: [R, d_lm]`.
pub fn project_phi<'t, T: Real>(p: &PhiParams, v: &[Var<'t, T>], hidden: Var<'t, T>) -> Result<Var<'t, T>> {
    hidden
        .matmul(p.w1.of(v))?
        .add_row_bias(p.b1.of(v))?
        .relu()
        .matmul(p.w2.of(v))?
        .add_row_bias(p.b2.of(v))
}

/// `bank[k] + table[k]` row by row.
pub fn add_positional<'t, T: Real>(bank: Var<'t, T>, table: Var<'t, T>) -> Result<Var<'t, T>> {
    if bank.shape() != table.shape() {
        return Err(contract(
            "add_positional",
            format!("bank {:?} and positional table {:?} differ", bank.shape(), table.shape()),
        ));
    }
    bank.add(table)
}
