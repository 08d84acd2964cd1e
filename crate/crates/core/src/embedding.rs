//! Token construction for both branches.
//!
//! The temporal branch cuts each window into cross-channel patches of every
//! configured length and projects them to `D`; the spatial branch embeds each
//! channel's whole series after lifting the channel count to every configured
//! width. Each granularity also gets one router token.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::model::{normal_init, xavier_uniform, Bound, ParamId, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Granularity lists for both branches plus the model width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub patch_lengths: Vec<usize>,
    pub scaled_channels: Vec<usize>,
    pub d_model: usize,
    /// Rows of the fixed positional table; must exceed the largest patch count.
    pub pos_table_size: usize,
}

impl GranularitySpec {
    /// Spec with the smallest valid positional table for windows of `seq_len`.
    pub fn new(patch_lengths: Vec<usize>, scaled_channels: Vec<usize>, d_model: usize, seq_len: usize) -> Self {
        let g = patch_lengths
            .iter()
            .map(|&l| seq_len.div_ceil(l.max(1)))
            .max()
            .unwrap_or(0)
            + 1;
        Self {
            patch_lengths,
            scaled_channels,
            d_model,
            pos_table_size: g,
        }
    }

    pub fn patch_count(&self, seq_len: usize, i: usize) -> usize {
        seq_len.div_ceil(self.patch_lengths[i])
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        if self.patch_lengths.iter().any(|&l| l == 0) {
            return Err(Error::Config("patch lengths must be positive".into()));
        }
        if self.scaled_channels.iter().any(|&f| f == 0) {
            return Err(Error::Config("scaled channel counts must be positive".into()));
        }
        let need = (0..self.patch_lengths.len())
            .map(|i| self.patch_count(seq_len, i) + 1)
            .max()
            .unwrap_or(0);
        if self.pos_table_size < need {
            return Err(Error::Config(format!(
                "pos_table_size {} < {need} needed for window length {seq_len}",
                self.pos_table_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Temporal,
    Spatial,
}

/// Tokens of one granularity with their router, as nodes on a tape.
#[derive(Clone, Copy)]
pub struct TokenSet<'t, T> {
    /// `N × D`.
    pub tokens: Var<'t, T>,
    /// `1 × D`.
    pub router: Var<'t, T>,
    pub granularity: usize,
    pub branch: Branch,
}

impl<'t, T: Scalar> TokenSet<'t, T> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed sinusoidal table: even columns `sin(p / 10000^{2i/width})`, odd
/// columns the matching cosine.
pub fn sinusoidal_table<T: Scalar>(rows: usize, width: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows, width]);
    for p in 0..rows {
        for c in 0..width {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / width as f64);
            t.set(p, c, T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    t
}

/// Splits a `T × C` window into `⌈T/L⌉` non-overlapping patches, zero-padding
/// the time axis. Each patch row holds `L` timestamps with channels
/// interleaved per timestamp: `[x(t,0), x(t,1), …, x(t+1,0), …]`.
pub fn patch_partition<T: Scalar>(seg: &Tensor<T>, patch_len: usize) -> Result<Tensor<T>> {
    if patch_len == 0 {
        return Err(Error::Parameter("patch length must be positive".into()));
    }
    let (t, c) = (seg.rows(), seg.cols());
    let n = t.div_ceil(patch_len);
    let mut data = vec![T::zero(); n * patch_len * c];
    // row-major T×C is already time-then-channel; padding lands at the end
    data[..t * c].copy_from_slice(seg.data());
    Tensor::new(vec![n, patch_len * c], data)
}

#[derive(Debug, Clone)]
pub struct TemporalEmbedding {
    pub patch_len: usize,
    /// `(L·C) × D`.
    pub projection: ParamId,
    /// `1 × D`.
    pub granularity: ParamId,
}

#[derive(Debug, Clone)]
pub struct SpatialEmbedding {
    pub channels: usize,
    /// `F × C` channel lift.
    pub channel_scale: ParamId,
    /// `T × D` series projection.
    pub series_projection: ParamId,
    /// `1 × D`.
    pub granularity: ParamId,
}

/// Embedding parameters of both branches plus the fixed positional tables.
#[derive(Debug, Clone)]
pub struct EmbeddingParams<T> {
    pub temporal: Vec<TemporalEmbedding>,
    pub spatial: Vec<SpatialEmbedding>,
    /// `G × D`, shared by every temporal granularity.
    pub pos_table: Tensor<T>,
    /// `C × T` channel-wise table for the spatial branch.
    pub channel_pos: Tensor<T>,
}

impl<T: Scalar> EmbeddingParams<T> {
    /// Allocates parameters for the enabled branches in `store`.
    pub fn init<R: Rng + ?Sized>(
        spec: &GranularitySpec,
        in_channels: usize,
        seq_len: usize,
        temporal: bool,
        spatial: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let d = spec.d_model;
        let mut out = Self {
            temporal: Vec::new(),
            spatial: Vec::new(),
            pos_table: sinusoidal_table(spec.pos_table_size, d),
            channel_pos: sinusoidal_table(in_channels, seq_len),
        };
        if temporal {
            for (i, &l) in spec.patch_lengths.iter().enumerate() {
                out.temporal.push(TemporalEmbedding {
                    patch_len: l,
                    projection: store.add(
                        format!("temporal.embed.{i}.projection"),
                        xavier_uniform(l * in_channels, d, rng),
                    ),
                    granularity: store.add(format!("temporal.embed.{i}.granularity"), normal_init(&[1, d], 0.02, rng)),
                });
            }
        }
        if spatial {
            for (j, &f) in spec.scaled_channels.iter().enumerate() {
                out.spatial.push(SpatialEmbedding {
                    channels: f,
                    channel_scale: store.add(
                        format!("spatial.embed.{j}.channel_scale"),
                        xavier_uniform::<T, _>(in_channels, f, rng).transpose(),
                    ),
                    series_projection: store.add(
                        format!("spatial.embed.{j}.series_projection"),
                        xavier_uniform(seq_len, d, rng),
                    ),
                    granularity: store.add(format!("spatial.embed.{j}.granularity"), normal_init(&[1, d], 0.02, rng)),
                });
            }
        }
        out
    }

    fn pos_rows(&self, start: usize, end: usize) -> Tensor<T> {
        let d = self.pos_table.cols();
        Tensor::new(vec![end - start, d], self.pos_table.data()[start * d..end * d].to_vec())
            .expect("positional rows")
    }
}

/// Patch embedding of one temporal granularity from an (already augmented)
/// window: `patches · W + W_pos[0..N] + W_gr`, router `W_pos[N] + W_gr`.
pub fn embed_temporal<'t, T: Scalar>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    params: &EmbeddingParams<T>,
    i: usize,
    seg: &Tensor<T>,
) -> Result<TokenSet<'t, T>> {
    let g = &params.temporal[i];
    let patches = patch_partition(seg, g.patch_len)?;
    let n = patches.rows();
    if n + 1 > params.pos_table.rows() {
        return Err(Error::Config(format!(
            "positional table has {} rows, granularity {i} needs {}",
            params.pos_table.rows(),
            n + 1
        )));
    }
    let gr = bound[g.granularity];
    let tokens = tape
        .constant(patches)
        .matmul(bound[g.projection])?
        .add(tape.constant(params.pos_rows(0, n)))?
        .add_row(gr)?;
    let router = tape.constant(params.pos_rows(n, n + 1)).add_row(gr)?;
    Ok(TokenSet {
        tokens,
        router,
        granularity: i,
        branch: Branch::Temporal,
    })
}

/// Channel embedding of one spatial granularity:
/// `(W₁ (xᵀ + P_c)) W₂ + W_gr`, router `W_gr`.
pub fn embed_spatial<'t, T: Scalar>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    params: &EmbeddingParams<T>,
    j: usize,
    seg: &Tensor<T>,
) -> Result<TokenSet<'t, T>> {
    let g = &params.spatial[j];
    let mut x_trans = seg.transpose();
    if x_trans.shape() != params.channel_pos.shape() {
        return Err(Error::dim("embed_spatial", x_trans.shape(), params.channel_pos.shape()));
    }
    for (v, p) in x_trans.data_mut().iter_mut().zip(params.channel_pos.data()) {
        *v += *p;
    }
    let gr = bound[g.granularity];
    let tokens = bound[g.channel_scale]
        .matmul(tape.constant(x_trans))?
        .matmul(bound[g.series_projection])?
        .add_row(gr)?;
    Ok(TokenSet {
        tokens,
        router: gr,
        granularity: j,
        branch: Branch::Spatial,
    })
}

/// Augmentation source for training-mode forward passes.
pub struct Augmenter<'a> {
    pub config: &'a AugmentationConfig,
    pub rng: &'a mut dyn RngCore,
}

/// Builds every enabled token set, temporal granularities first. In training
/// mode each granularity sees its own augmentation draw unless the config
/// asks for a shared one.
pub fn build_all<'t, T: Scalar>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    params: &EmbeddingParams<T>,
    seg: &Tensor<T>,
    mut augment: Option<Augmenter<'_>>,
) -> Result<Vec<TokenSet<'t, T>>> {
    let shared = match augment.as_mut() {
        Some(a) if a.config.shared_draw => Some(a.config.apply(seg, &mut *a.rng)),
        _ => None,
    };
    let view = |augment: &mut Option<Augmenter<'_>>| -> Tensor<T> {
        if let Some(s) = &shared {
            return s.clone();
        }
        match augment.as_mut() {
            Some(a) if a.config.is_enabled() => a.config.apply(seg, &mut *a.rng),
            _ => seg.clone(),
        }
    };
    let mut sets = Vec::with_capacity(params.temporal.len() + params.spatial.len());
    for i in 0..params.temporal.len() {
        let x = view(&mut augment);
        sets.push(embed_temporal(tape, bound, params, i, &x)?);
    }
    for j in 0..params.spatial.len() {
        let x = view(&mut augment);
        sets.push(embed_spatial(tape, bound, params, j, &x)?);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(t: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, c], (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(spec: &GranularitySpec, c: usize, t: usize) -> (ParamStore<f64>, EmbeddingParams<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EmbeddingParams::init(spec, c, t, true, true, &mut store, &mut rng);
        (store, params)
    }

    #[test]
    fn patch_counts_and_padding() {
        let x = seg(128, 3, 1);
        let p = patch_partition(&x, 4).unwrap();
        assert_eq!(p.shape(), &[32, 12]);
        let x = seg(130, 3, 2);
        let p = patch_partition(&x, 4).unwrap();
        assert_eq!(p.shape(), &[33, 12]);
        // last patch: timestamps 128, 129, then two zero timestamps
        assert_eq!(&p.row(32)[..6], &x.data()[128 * 3..]);
        assert!(p.row(32)[6..].iter().all(|&v| v == 0.0));
        let p = patch_partition(&x, 130).unwrap();
        assert_eq!(p.shape(), &[1, 390]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn patch_rows_interleave_channels_per_timestamp() {
        let x = Tensor::<f64>::from_f64(vec![4, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let p = patch_partition(&x, 2).unwrap();
        assert_eq!(p.row(1), &[3.0, 30.0, 4.0, 40.0]);
    }

    #[test]
    fn temporal_token_counts() {
        let spec = GranularitySpec::new(vec![2, 4, 8], vec![3], 8, 128);
        let (store, params) = setup(&spec, 3, 128);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let x = seg(128, 3, 3);
        let counts: Vec<usize> = (0..3)
            .map(|i| embed_temporal(&tape, &bound, &params, i, &x).unwrap().len())
            .collect();
        assert_eq!(counts, vec![64, 32, 16]);
    }

    #[test]
    fn zero_input_and_projection_gives_positional_plus_granularity() {
        let spec = GranularitySpec::new(vec![4], vec![], 6, 16);
        let (mut store, params) = setup(&spec, 2, 16);
        let proj = params.temporal[0].projection;
        let shape = store.get(proj).value.shape().to_vec();
        store.get_mut(proj).value = Tensor::zeros(&shape);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let ts = embed_temporal(&tape, &bound, &params, 0, &Tensor::zeros(&[16, 2])).unwrap();
        let gr = store.get(params.temporal[0].granularity).value.clone();
        let tokens = ts.tokens.value();
        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(tokens.at(r, c), params.pos_table.at(r, c) + gr.at(0, c));
            }
        }
        let router = ts.router.value();
        for c in 0..6 {
            assert_eq!(router.at(0, c), params.pos_table.at(4, c) + gr.at(0, c));
        }
    }

    #[test]
    fn equal_patch_lengths_differ_by_granularity_embedding() {
        let spec = GranularitySpec::new(vec![4, 4], vec![], 6, 16);
        let (store, params) = setup(&spec, 2, 16);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let zero = Tensor::zeros(&[16, 2]);
        let a = embed_temporal(&tape, &bound, &params, 0, &zero).unwrap();
        let b = embed_temporal(&tape, &bound, &params, 1, &zero).unwrap();
        let ga = store.get(params.temporal[0].granularity).value.clone();
        let gb = store.get(params.temporal[1].granularity).value.clone();
        let (ta, tb) = (a.tokens.value(), b.tokens.value());
        for r in 0..4 {
            for c in 0..6 {
                let diff = ta.at(r, c) - tb.at(r, c);
                assert!((diff - (ga.at(0, c) - gb.at(0, c))).abs() < 1e-15);
            }
        }
        assert_ne!(a.router.value(), b.router.value());
    }

    #[test]
    fn spatial_shapes_and_router() {
        let spec = GranularitySpec::new(vec![], vec![76], 8, 32);
        let (store, params) = setup(&spec, 19, 32);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let ts = embed_spatial(&tape, &bound, &params, 0, &seg(32, 19, 4)).unwrap();
        assert_eq!(ts.tokens.shape(), vec![76, 8]);
        assert_eq!(ts.router.value(), store.get(params.spatial[0].granularity).value);
    }

    #[test]
    fn spatial_identity_lift_is_series_projection() {
        let (c, t, d) = (3, 8, 4);
        let spec = GranularitySpec::new(vec![], vec![c], d, t);
        let (mut store, mut params) = setup(&spec, c, t);
        let g = params.spatial[0].clone();
        store.get_mut(g.channel_scale).value = Tensor::identity(c);
        store.get_mut(g.granularity).value = Tensor::zeros(&[1, d]);
        params.channel_pos = Tensor::zeros(&[c, t]);
        let x = seg(t, c, 5);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let ts = embed_spatial(&tape, &bound, &params, 0, &x).unwrap();
        let want = crate::numerics::matmul(&x.transpose(), &store.get(g.series_projection).value).unwrap();
        assert!(ts.tokens.value().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn build_all_orders_branches_and_eval_is_deterministic() {
        let spec = GranularitySpec::new(vec![2, 4, 8], vec![3, 6], 8, 32);
        let (store, params) = setup(&spec, 3, 32);
        let x = seg(32, 3, 6);
        let run = || {
            let tape = Tape::new();
            let bound = store.bind(&tape, false);
            let sets = build_all(&tape, &bound, &params, &x, None).unwrap();
            sets.iter()
                .map(|s| (s.branch, s.tokens.value(), s.router.value()))
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a.len(), 5);
        assert!(a[..3].iter().all(|s| s.0 == Branch::Temporal));
        assert!(a[3..].iter().all(|s| s.0 == Branch::Spatial));
        let b = run();
        assert!(a.iter().zip(&b).all(|(p, q)| p.1 == q.1 && p.2 == q.2));
    }

    #[test]
    fn positional_table_is_shared_and_undersized_table_rejected() {
        let mut spec = GranularitySpec::new(vec![2, 4], vec![], 8, 16);
        assert_eq!(spec.pos_table_size, 9);
        assert!(spec.validate(16).is_ok());
        spec.pos_table_size = 8;
        assert!(spec.validate(16).is_err());
    }
}
