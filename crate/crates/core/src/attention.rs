//! Router-based two-stage self-attention.
//!
//! Each granularity attends over its own tokens plus one router token; the
//! routers of a branch then attend over each other. Only routers ever carry
//! information between granularities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Branch, GranularitySpec, TokenSet};
use crate::error::{Error, Result};
use crate::model::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::numerics::{Tensor, Var};
use crate::scalar::Scalar;

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier_uniform(fan_in, fan_out, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn apply<'t, T: Scalar>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(bound[self.weight])?.add_row(bound[self.bias])
    }
}

/// Layer-norm gain and shift, initialised to one and zero.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[1, d], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn apply<'t, T: Scalar>(&self, bound: &Bound<'t, T>, x: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        x.layer_norm(bound[self.gamma], bound[self.beta], eps)
    }
}

/// Query, key, value and output projections of one multi-head attention.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::init(store, &format!("{name}.query"), d, d, rng),
            key: Linear::init(store, &format!("{name}.key"), d, d, rng),
            value: Linear::init(store, &format!("{name}.value"), d, d, rng),
            output: Linear::init(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }

    /// Attention of `queries` over `context`, both `· × D`.
    pub fn attend<'t, T: Scalar>(
        &self,
        bound: &Bound<'t, T>,
        queries: Var<'t, T>,
        context: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let q = self.query.apply(bound, queries)?;
        let k = self.key.apply(bound, context)?;
        let v = self.value.apply(bound, context)?;
        let heads = q.attention(k, v, self.heads)?;
        self.output.apply(bound, heads)
    }
}

/// Router self-attention with its add & norm.
#[derive(Debug, Clone)]
pub struct RouterStage {
    pub attention: MultiHeadParams,
    pub norm: Norm,
}

/// One post-norm encoder layer of one branch. Intra-attention projections
/// are shared across the granularities of the branch; the router stage has
/// its own projections and is absent in layers built without one.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub intra: MultiHeadParams,
    pub intra_norm: Norm,
    pub inter: Option<RouterStage>,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: Norm,
    pub d_model: usize,
}

impl EncoderLayerParams {
    /// `inter_rng` draws the router-stage parameters; `None` builds a layer
    /// without that stage. Keeping its draws on a separate generator leaves
    /// every other parameter identical with and without it.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
        inter_rng: Option<&mut R>,
    ) -> Self {
        let intra = MultiHeadParams::init(store, &format!("{name}.intra"), d, heads, rng);
        let intra_norm = Norm::init(store, &format!("{name}.intra_norm"), d);
        let inter = inter_rng.map(|r| RouterStage {
            attention: MultiHeadParams::init(store, &format!("{name}.inter"), d, heads, r),
            norm: Norm::init(store, &format!("{name}.inter_norm"), d),
        });
        Self {
            intra,
            intra_norm,
            inter,
            ffn_in: Linear::init(store, &format!("{name}.ffn_in"), d, d_ff, rng),
            ffn_out: Linear::init(store, &format!("{name}.ffn_out"), d_ff, d, rng),
            ffn_norm: Norm::init(store, &format!("{name}.ffn_norm"), d),
            d_model: d,
        }
    }
}

/// Self-attention over `z = [tokens ‖ router]`; every row of `z` (router
/// included) is a query. Returns the raw attention output split back into
/// tokens and router, without residual or norm.
pub fn intra_attention<'t, T: Scalar>(
    bound: &Bound<'t, T>,
    params: &MultiHeadParams,
    ts: &TokenSet<'t, T>,
) -> Result<TokenSet<'t, T>> {
    let d = ts.router.shape()[1];
    let td = ts.tokens.shape();
    if td.len() != 2 || td[1] != d {
        return Err(Error::dim("intra_attention", &td, &ts.router.shape()));
    }
    let n = td[0];
    let z = Var::concat_rows(&[ts.tokens, ts.router])?;
    let out = params.attend(bound, z, z)?;
    Ok(TokenSet {
        tokens: out.slice_rows(0, n)?,
        router: out.slice_rows(n, n + 1)?,
        granularity: ts.granularity,
        branch: ts.branch,
    })
}

/// Self-attention among the routers `U` (`n × D`) alone.
pub fn inter_attention<'t, T: Scalar>(
    bound: &Bound<'t, T>,
    params: &MultiHeadParams,
    routers: Var<'t, T>,
) -> Result<Var<'t, T>> {
    params.attend(bound, routers, routers)
}

/// Runs one layer over all granularities of one branch.
pub fn encoder_layer<'t, T: Scalar>(
    bound: &Bound<'t, T>,
    params: &EncoderLayerParams,
    sets: &[TokenSet<'t, T>],
    branch: Branch,
    inter: bool,
    eps: T,
) -> Result<Vec<TokenSet<'t, T>>> {
    let order: Vec<usize> = (0..sets.len()).collect();
    encoder_layer_in_order(bound, params, sets, branch, inter, eps, &order)
}

/// [`encoder_layer`] with the per-granularity stages visited in `order`
/// (a permutation of `0..sets.len()`). Outputs and the router sequence
/// seen by the inter stage keep the input order.
pub fn encoder_layer_in_order<'t, T: Scalar>(
    bound: &Bound<'t, T>,
    params: &EncoderLayerParams,
    sets: &[TokenSet<'t, T>],
    branch: Branch,
    inter: bool,
    eps: T,
    order: &[usize],
) -> Result<Vec<TokenSet<'t, T>>> {
    if let Some(bad) = sets.iter().find(|s| s.branch != branch) {
        return Err(Error::Usage(format!(
            "granularity {} of the {:?} branch passed to a {:?} layer",
            bad.granularity, bad.branch, branch
        )));
    }
    let mut seen = vec![false; sets.len()];
    if order.len() != sets.len() || order.iter().any(|&i| i >= sets.len() || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Usage(format!("{order:?} is not a permutation of 0..{}", sets.len())));
    }
    let mut slots: Vec<Option<TokenSet<'t, T>>> = vec![None; sets.len()];
    for &i in order {
        let ts = &sets[i];
        let a = intra_attention(bound, &params.intra, ts)?;
        slots[i] = Some(TokenSet {
            tokens: params.intra_norm.apply(bound, ts.tokens.add(a.tokens)?, eps)?,
            router: params.intra_norm.apply(bound, ts.router.add(a.router)?, eps)?,
            ..*ts
        });
    }
    let mut stage: Vec<TokenSet<'t, T>> = slots.into_iter().map(|s| s.expect("every slot filled")).collect();
    let router_stage = match (&params.inter, inter) {
        (Some(r), true) => Some(r),
        (None, true) => return Err(Error::Usage("layer was built without a router stage".into())),
        (_, false) => None,
    };
    if let (Some(rs), false) = (router_stage, stage.is_empty()) {
        let routers: Vec<Var<'t, T>> = stage.iter().map(|s| s.router).collect();
        let u = Var::concat_rows(&routers)?;
        let mixed = inter_attention(bound, &rs.attention, u)?;
        let u = rs.norm.apply(bound, u.add(mixed)?, eps)?;
        for (i, s) in stage.iter_mut().enumerate() {
            s.router = u.slice_rows(i, i + 1)?;
        }
    }
    let ffn = |x: Var<'t, T>| -> Result<Var<'t, T>> {
        let h = params.ffn_out.apply(bound, params.ffn_in.apply(bound, x)?.gelu())?;
        params.ffn_norm.apply(bound, x.add(h)?, eps)
    };
    stage
        .into_iter()
        .map(|s| {
            Ok(TokenSet {
                tokens: ffn(s.tokens)?,
                router: ffn(s.router)?,
                ..s
            })
        })
        .collect()
}

/// Attention score-matrix sizes for full-sequence versus router attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// `(ΣN_i + n)²`: one attention over every token and router.
    pub naive_entries: u64,
    /// `Σ(N_i + 1)² + n²`.
    pub router_entries: u64,
    pub per_granularity: Vec<u64>,
    pub inter_entries: u64,
}

impl CostReport {
    pub fn from_counts(counts: &[usize]) -> Self {
        let n = counts.len() as u64;
        let total: u64 = counts.iter().map(|&c| c as u64).sum::<u64>() + n;
        let per_granularity: Vec<u64> = counts.iter().map(|&c| (c as u64 + 1).pow(2)).collect();
        let inter_entries = n * n;
        Self {
            naive_entries: total * total,
            router_entries: per_granularity.iter().sum::<u64>() + inter_entries,
            per_granularity,
            inter_entries,
        }
    }

    /// `naive / router`.
    pub fn reduction(&self) -> f64 {
        self.naive_entries as f64 / self.router_entries.max(1) as f64
    }
}

/// Per-layer, per-branch cost of the temporal granularities of `spec` for
/// windows of `seq_len` timestamps.
pub fn attention_cost(spec: &GranularitySpec, seq_len: usize) -> CostReport {
    let counts: Vec<usize> = (0..spec.patch_lengths.len())
        .map(|i| spec.patch_count(seq_len, i))
        .collect();
    CostReport::from_counts(&counts)
}

/// Cost of the spatial granularities (token counts are the lifted channel
/// counts).
pub fn spatial_attention_cost(spec: &GranularitySpec) -> CostReport {
    CostReport::from_counts(&spec.scaled_channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn layer(d: usize, heads: usize) -> (ParamStore<f64>, EncoderLayerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inter_rng = ChaCha8Rng::seed_from_u64(10);
        let p = EncoderLayerParams::init(&mut store, "l0", d, heads, 2 * d, &mut rng, Some(&mut inter_rng));
        (store, p)
    }

    fn set<'t>(tape: &'t Tape<f64>, tokens: Tensor<f64>, router: Tensor<f64>, g: usize) -> TokenSet<'t, f64> {
        TokenSet {
            tokens: tape.constant(tokens),
            router: tape.constant(router),
            granularity: g,
            branch: Branch::Temporal,
        }
    }

    #[test]
    fn cost_examples() {
        let r = CostReport::from_counts(&[64, 32, 16]);
        assert_eq!(r.naive_entries, 13225);
        assert_eq!(r.router_entries, 5612);
        assert_eq!(r.per_granularity, vec![4225, 1089, 289]);
        assert_eq!(r.inter_entries, 9);
        let spec = GranularitySpec::new(vec![2, 4, 8], vec![], 8, 128);
        assert_eq!(attention_cost(&spec, 128), r);
    }

    #[test]
    fn single_granularity_has_no_saving() {
        for n1 in 1..200usize {
            let r = CostReport::from_counts(&[n1]);
            assert!(r.router_entries + 2 * n1 as u64 >= r.naive_entries);
        }
    }

    #[test]
    fn router_cheaper_for_two_or_more_equal_granularities() {
        for n in 2..12 {
            for c in 1..60 {
                let r = CostReport::from_counts(&vec![c; n]);
                assert!(r.router_entries < r.naive_entries, "n={n} N={c}");
            }
        }
    }

    #[test]
    fn router_only_granularity_returns_its_value_projection() {
        let (store, p) = layer(8, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ts = set(&tape, Tensor::zeros(&[0, 8]), random(1, 8, &mut rng), 0);
        let out = intra_attention(&bound, &p.intra, &ts).unwrap();
        let v = p.intra.value.apply(&bound, ts.router).unwrap();
        let want = p.intra.output.apply(&bound, v).unwrap().value();
        assert!(out.router.value().max_abs_diff(&want) < 1e-14);
        assert_eq!(out.tokens.shape(), vec![0, 8]);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let (store, p) = layer(8, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let row = random(1, 8, &mut ChaCha8Rng::seed_from_u64(2));
        let tokens = Tensor::from_rows(&vec![row.data().to_vec(); 5]).unwrap();
        let out = intra_attention(&bound, &p.intra, &set(&tape, tokens, row, 0)).unwrap();
        let t = out.tokens.value();
        let r = out.router.value();
        for i in 0..5 {
            for c in 0..8 {
                assert!((t.at(i, c) - r.at(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inter_attention_is_permutation_equivariant() {
        let (store, p) = layer(8, 4);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let u = random(4, 8, &mut ChaCha8Rng::seed_from_u64(3));
        let perm = [2usize, 0, 3, 1];
        let pu = Tensor::from_rows(&perm.iter().map(|&i| u.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = inter_attention(&bound, &p.inter.as_ref().unwrap().attention, tape.constant(u)).unwrap().value();
        let b = inter_attention(&bound, &p.inter.as_ref().unwrap().attention, tape.constant(pu)).unwrap().value();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((b.at(k, c) - a.at(i, c)).abs() < 1e-13);
            }
        }
        let one = random(1, 8, &mut ChaCha8Rng::seed_from_u64(4));
        let r = inter_attention(&bound, &p.inter.as_ref().unwrap().attention, tape.constant(one.clone())).unwrap().value();
        let v = p.inter.as_ref().unwrap().attention.value.apply(&bound, tape.constant(one)).unwrap();
        assert!(r.max_abs_diff(&p.inter.as_ref().unwrap().attention.output.apply(&bound, v).unwrap().value()) < 1e-14);
    }

    #[test]
    fn layer_preserves_shapes_and_rejects_mixed_branches() {
        let (store, p) = layer(8, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sets: Vec<_> = [7usize, 3, 0]
            .iter()
            .enumerate()
            .map(|(g, &n)| set(&tape, random(n, 8, &mut rng), random(1, 8, &mut rng), g))
            .collect();
        let out = encoder_layer(&bound, &p, &sets, Branch::Temporal, true, 1e-5).unwrap();
        for (a, b) in sets.iter().zip(&out) {
            assert_eq!(a.tokens.shape(), b.tokens.shape());
            assert_eq!(b.router.shape(), vec![1, 8]);
        }
        assert!(matches!(
            encoder_layer(&bound, &p, &sets, Branch::Spatial, true, 1e-5),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_weights_reduce_layer_to_nested_norms() {
        // with every projection zero the attention and FFN outputs are the
        // bias (zero), so each sub-block is just layer norm of its input
        let (mut store, p) = layer(8, 2);
        for id in store.ids().collect::<Vec<_>>() {
            let par = store.get_mut(id);
            if !par.name.ends_with(".gamma") {
                par.value = Tensor::zeros(par.value.shape());
            }
        }
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(4, 8, &mut rng);
        let u = random(1, 8, &mut rng);
        let out = encoder_layer(&bound, &p, &[set(&tape, x.clone(), u.clone(), 0)], Branch::Temporal, true, 1e-5).unwrap();
        let ln = |t: &Tensor<f64>| {
            let mut r = t.clone();
            for i in 0..r.rows() {
                let row = r.row_mut(i);
                let m = row.iter().sum::<f64>() / 8.0;
                let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
                for a in row.iter_mut() {
                    *a = (*a - m) / (v + 1e-5).sqrt();
                }
            }
            r
        };
        let want_x = ln(&ln(&x));
        let want_u = ln(&ln(&ln(&u)));
        assert!(out[0].tokens.value().max_abs_diff(&want_x) < 1e-12);
        assert!(out[0].router.value().max_abs_diff(&want_u) < 1e-12);
    }

    #[test]
    fn inter_stage_leaves_tokens_alone_and_is_skippable() {
        let (store, p) = layer(8, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sets: Vec<_> = (0..3)
            .map(|g| set(&tape, random(4, 8, &mut rng), random(1, 8, &mut rng), g))
            .collect();
        let with = encoder_layer(&bound, &p, &sets, Branch::Temporal, true, 1e-5).unwrap();
        let without = encoder_layer(&bound, &p, &sets, Branch::Temporal, false, 1e-5).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(a.tokens.value(), b.tokens.value());
            assert_ne!(a.router.value(), b.router.value());
        }
    }

    #[test]
    fn score_entries_match_cost_report() {
        let (store, p) = layer(8, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let counts = [8usize, 4, 2];
        let sets: Vec<_> = counts
            .iter()
            .enumerate()
            .map(|(g, &n)| set(&tape, random(n, 8, &mut rng), random(1, 8, &mut rng), g))
            .collect();
        encoder_layer(&bound, &p, &sets, Branch::Temporal, true, 1e-5).unwrap();
        assert_eq!(tape.score_entries(), CostReport::from_counts(&counts).router_entries);
    }
}
