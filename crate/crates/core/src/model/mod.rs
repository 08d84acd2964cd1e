//! Full classifier: both branches, routers, linear head.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, read_tensors, save_checkpoint, write_tensors, CONFIG_SUFFIX};
pub use params::*;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encoder_layer_in_order, EncoderLayerParams, Linear};
use crate::augment::AugmentationConfig;
use crate::embedding::{build_all, Augmenter, Branch, EmbeddingParams, GranularitySpec, TokenSet};
use crate::error::{Error, Result};
use crate::numerics::{check_gradients_sampled, GradCheck, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoInter,
    NoTemporal,
    NoSpatial,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::Full, Self::NoInter, Self::NoTemporal, Self::NoSpatial];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoInter => "no_inter",
            Self::NoTemporal => "no_temporal",
            Self::NoSpatial => "no_spatial",
        }
    }

    pub fn temporal(self) -> bool {
        self != Self::NoTemporal
    }

    pub fn spatial(self) -> bool {
        self != Self::NoSpatial
    }

    pub fn inter(self) -> bool {
        self != Self::NoInter
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// How final routers are reduced before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Concatenate all routers into one `(n+m)·D` vector.
    #[default]
    Flatten,
    /// Average the routers into one `D` vector.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spec: GranularitySpec,
    pub in_channels: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub classes: usize,
    pub ablation: Ablation,
    pub pooling: Pooling,
    pub augmentation: AugmentationConfig,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Small model for synthetic data and tests: `M=4, D=64, H=8, d_ff=128`,
    /// patch lengths `[2,4,8]`, lifted channels `[C,2C,4C]`.
    pub fn desk(in_channels: usize, seq_len: usize, classes: usize) -> Self {
        Self::preset(in_channels, seq_len, classes, 4, 64, 128)
    }

    /// Larger preset: `M=12, D=128, H=8, d_ff=256`.
    pub fn large(in_channels: usize, seq_len: usize, classes: usize) -> Self {
        Self::preset(in_channels, seq_len, classes, 12, 128, 256)
    }

    fn preset(c: usize, t: usize, k: usize, layers: usize, d: usize, d_ff: usize) -> Self {
        Self {
            spec: GranularitySpec::new(vec![2, 4, 8], vec![c, 2 * c, 4 * c], d, t),
            in_channels: c,
            seq_len: t,
            layers,
            heads: 8,
            d_ff,
            classes: k,
            ablation: Ablation::Full,
            pooling: Pooling::Flatten,
            augmentation: AugmentationConfig::default(),
            norm_eps: 1e-5,
        }
    }

    pub fn d_model(&self) -> usize {
        self.spec.d_model
    }

    /// Granularities that survive the ablation: `(n, m)`.
    pub fn branch_sizes(&self) -> (usize, usize) {
        let n = if self.ablation.temporal() { self.spec.patch_lengths.len() } else { 0 };
        let m = if self.ablation.spatial() { self.spec.scaled_channels.len() } else { 0 };
        (n, m)
    }

    /// Rows of the final representation.
    pub fn router_count(&self) -> usize {
        let (n, m) = self.branch_sizes();
        n + m
    }

    pub fn classifier_inputs(&self) -> usize {
        match self.pooling {
            Pooling::Flatten => self.router_count() * self.d_model(),
            Pooling::Mean => self.d_model(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.in_channels == 0 || self.seq_len == 0 {
            return Err(Error::Config("input channels and window length must be positive".into()));
        }
        if self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("layers, heads and d_ff must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if d % self.heads != 0 {
            return Err(Error::Config(format!("d_model {d} is not divisible by {} heads", self.heads)));
        }
        self.spec.validate(self.seq_len)?;
        match self.ablation {
            Ablation::NoTemporal if self.spec.scaled_channels.is_empty() => {
                return Err(Error::Config("no_temporal needs at least one spatial granularity".into()))
            }
            Ablation::NoSpatial if self.spec.patch_lengths.is_empty() => {
                return Err(Error::Config("no_spatial needs at least one temporal granularity".into()))
            }
            _ => {}
        }
        if self.router_count() == 0 {
            return Err(Error::Config("model has no granularities".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        self.augmentation.validate()
    }
}

/// Output of one forward pass.
pub struct Forward<'t, T> {
    /// `1 × K`.
    pub logits: Var<'t, T>,
    /// `(n+m) × D` final routers, temporal first.
    pub representation: Var<'t, T>,
}

#[derive(Debug, Clone)]
pub struct AdFormer<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embedding: EmbeddingParams<T>,
    pub temporal_layers: Vec<EncoderLayerParams>,
    pub spatial_layers: Vec<EncoderLayerParams>,
    pub classifier: Linear,
}

impl<T: Scalar> AdFormer<T> {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, ff) = (config.d_model(), config.heads, config.d_ff);
        let (temporal, spatial) = (config.ablation.temporal(), config.ablation.spatial());
        let embedding = EmbeddingParams::init(
            &config.spec,
            config.in_channels,
            config.seq_len,
            temporal,
            spatial,
            &mut store,
            &mut rng,
        );
        let mut inter_rng = ChaCha8Rng::seed_from_u64(seed);
        inter_rng.set_stream(1);
        let with_inter = config.ablation.inter();
        let mut layers = |on: bool, prefix: &str, store: &mut ParamStore<T>| -> Vec<EncoderLayerParams> {
            if !on {
                return Vec::new();
            }
            (0..config.layers)
                .map(|l| {
                    let name = format!("{prefix}.layer{l}");
                    let ir = with_inter.then_some(&mut inter_rng);
                    EncoderLayerParams::init(store, &name, d, h, ff, &mut rng, ir)
                })
                .collect()
        };
        let temporal_layers = layers(temporal, "temporal", &mut store);
        let spatial_layers = layers(spatial, "spatial", &mut store);
        let classifier = Linear::init(&mut store, "classifier", config.classifier_inputs(), config.classes, &mut rng);
        Ok(Self {
            config,
            store,
            embedding,
            temporal_layers,
            spatial_layers,
            classifier,
        })
    }

    fn check_input(&self, seg: &Tensor<T>) -> Result<()> {
        let want = [self.config.seq_len, self.config.in_channels];
        if seg.shape() != want {
            return Err(Error::Config(format!(
                "segment shape {:?} does not match model input {:?}",
                seg.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Forward pass. Passing `rng` selects training mode, which applies the
    /// configured augmentation; `None` is deterministic evaluation.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        seg: &Tensor<T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward<'t, T>> {
        self.forward_ordered(tape, bound, seg, rng, false)
    }

    /// As [`Self::forward`]; `reversed` processes granularities within each
    /// stage in reverse order, which must not change any value.
    pub fn forward_ordered<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        seg: &Tensor<T>,
        rng: Option<&mut dyn RngCore>,
        reversed: bool,
    ) -> Result<Forward<'t, T>> {
        self.check_input(seg)?;
        let augment = rng.map(|rng| Augmenter {
            config: &self.config.augmentation,
            rng,
        });
        let sets = build_all(tape, bound, &self.embedding, seg, augment)?;
        let encoded = self.encode(bound, &sets, reversed)?;
        let routers: Vec<Var<'t, T>> = encoded.iter().map(|s| s.router).collect();
        let h = Var::concat_rows(&routers)?;
        let pooled = match self.config.pooling {
            Pooling::Flatten => h.reshape(vec![1, self.config.classifier_inputs()])?,
            Pooling::Mean => {
                let r = T::from_usize_lossy(routers.len());
                let ones = tape.constant(Tensor::filled(&[1, routers.len()], T::one() / r));
                ones.matmul(h)?
            }
        };
        let logits = self.classifier.apply(bound, pooled)?;
        Ok(Forward {
            logits,
            representation: h,
        })
    }

    /// Runs every encoder layer over embedded token sets (temporal sets
    /// first, as produced by [`build_all`]). Branches never exchange
    /// information here. `reversed` visits granularities within each stage
    /// in reverse order, which must not change any value.
    pub fn encode<'t>(
        &self,
        bound: &Bound<'t, T>,
        sets: &[TokenSet<'t, T>],
        reversed: bool,
    ) -> Result<Vec<TokenSet<'t, T>>> {
        let n = self.embedding.temporal.len();
        if sets.len() != n + self.embedding.spatial.len() {
            return Err(Error::Config(format!(
                "expected {} token sets, got {}",
                n + self.embedding.spatial.len(),
                sets.len()
            )));
        }
        let eps = T::lit(self.config.norm_eps);
        let inter = self.config.ablation.inter();
        let run = |layers: &[EncoderLayerParams], sets: &[TokenSet<'t, T>], branch| -> Result<Vec<TokenSet<'t, T>>> {
            let mut order: Vec<usize> = (0..sets.len()).collect();
            if reversed {
                order.reverse();
            }
            let mut cur = sets.to_vec();
            for layer in layers {
                cur = encoder_layer_in_order(bound, layer, &cur, branch, inter, eps, &order)?;
            }
            Ok(cur)
        };
        let (temporal, spatial) = sets.split_at(n);
        let mut out = run(&self.temporal_layers, temporal, Branch::Temporal)?;
        out.extend(run(&self.spatial_layers, spatial, Branch::Spatial)?);
        Ok(out)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict_proba(&self, seg: &Tensor<T>) -> Result<Vec<T>> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape, false);
        let out = self.forward(&tape, &bound, seg, None)?;
        Ok(crate::numerics::softmax(&out.logits.value())?.into_data())
    }

    /// Logits in evaluation mode.
    pub fn logits(&self, seg: &Tensor<T>) -> Result<Vec<T>> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape, false);
        Ok(self.forward(&tape, &bound, seg, None)?.logits.value().into_data())
    }

    /// Scalar parameter count per group. Weight/bias and gain/shift pairs
    /// fold into their owner, so `classifier` counts both its matrix and
    /// bias.
    pub fn parameter_census(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.store.iter() {
            let group = match p.name.rsplit_once('.') {
                Some((head, "weight" | "bias" | "gamma" | "beta")) => head.to_string(),
                _ => p.name.clone(),
            };
            *out.entry(group).or_insert(0) += p.value.len();
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Compares tape gradients of the evaluation-mode loss on one labelled
    /// window against central differences at `samples` random coordinates.
    pub fn gradient_check(
        &self,
        seg: &Tensor<T>,
        label: usize,
        samples: usize,
        eps: T,
        seed: u64,
    ) -> Result<GradCheck> {
        let theta = self.store.snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check_gradients_sampled(
            |tape, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                loss(self.forward(tape, &bound, seg, None)?.logits, label)
            },
            &theta,
            eps,
            samples,
            &mut rng,
        )
    }
}

/// `−log softmax(logits)[label]`.
pub fn loss<'t, T: Scalar>(logits: Var<'t, T>, label: usize) -> Result<Var<'t, T>> {
    logits.cross_entropy(label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(ablation: Ablation) -> ModelConfig {
        let mut c = ModelConfig::desk(4, 16, 2);
        c.spec = GranularitySpec::new(vec![4, 8], vec![4, 8], 8, 16);
        c.layers = 1;
        c.heads = 2;
        c.d_ff = 16;
        c.ablation = ablation;
        c.augmentation = AugmentationConfig::disabled();
        c
    }

    fn input(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![16, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn logits_are_finite_and_deterministic() {
        let m = AdFormer::<f64>::new(tiny(Ablation::Full), 1).unwrap();
        let x = input(2);
        let a = m.logits(&x).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.logits(&x).unwrap());
        let p = m.predict_proba(&x).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn representation_rows_follow_ablation() {
        for (ab, rows) in [
            (Ablation::Full, 4),
            (Ablation::NoInter, 4),
            (Ablation::NoTemporal, 2),
            (Ablation::NoSpatial, 2),
        ] {
            let m = AdFormer::<f64>::new(tiny(ab), 1).unwrap();
            let tape = Tape::new();
            let bound = m.store.bind(&tape, false);
            let out = m.forward(&tape, &bound, &input(3), None).unwrap();
            assert_eq!(out.representation.shape(), vec![rows, 8], "{ab}");
        }
    }

    #[test]
    fn census_groups() {
        let m = AdFormer::<f64>::new(tiny(Ablation::Full), 1).unwrap();
        let census = m.parameter_census();
        assert_eq!(census["classifier"], 4 * 8 * 2 + 2);
        assert_eq!(census["temporal.embed.0.projection"], 4 * 4 * 8);
        assert_eq!(census["temporal.embed.1.projection"], 8 * 4 * 8);
        assert_eq!(census.values().sum::<usize>(), m.parameter_count());
        let m = AdFormer::<f64>::new(tiny(Ablation::NoSpatial), 1).unwrap();
        assert!(m.parameter_census().keys().all(|k| !k.starts_with("spatial")));
        assert_eq!(m.parameter_census()["classifier"], 2 * 8 * 2 + 2);
    }

    #[test]
    fn mean_pooling_shrinks_classifier() {
        let mut c = tiny(Ablation::Full);
        c.pooling = Pooling::Mean;
        let m = AdFormer::<f64>::new(c, 1).unwrap();
        assert_eq!(m.parameter_census()["classifier"], 8 * 2 + 2);
        assert_eq!(m.logits(&input(4)).unwrap().len(), 2);
    }

    #[test]
    fn wrong_input_shape_is_config_error() {
        let m = AdFormer::<f64>::new(tiny(Ablation::Full), 1).unwrap();
        assert!(matches!(m.logits(&Tensor::zeros(&[15, 4])), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(Ablation::NoTemporal);
        c.spec.scaled_channels.clear();
        assert!(AdFormer::<f64>::new(c, 0).is_err());
        let mut c = tiny(Ablation::Full);
        c.heads = 3;
        assert!(AdFormer::<f64>::new(c, 0).is_err());
    }

    #[test]
    fn loss_examples() {
        let tape = Tape::<f64>::new();
        let l = loss(tape.constant(Tensor::zeros(&[1, 2])), 0).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = loss(tape.constant(Tensor::from_f64(vec![1, 2], &[20.0, -20.0]).unwrap()), 0).unwrap();
        assert!(l.item() < 1e-8);
        assert!(loss(tape.constant(Tensor::zeros(&[1, 2])), 2).is_err());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("no-inter".parse::<Ablation>().unwrap(), Ablation::NoInter);
    }
}
