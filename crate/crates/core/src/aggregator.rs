//! Reduction of a set of attribute embeddings to a single class token.
//!
//! The hierarchical aggregator runs `L` stages. Each stage fuses visual,
//! attribute and learnable cluster tokens with transformer encoder layers,
//! then clusters the attribute tokens onto the stage's cluster tokens:
//!
//! ```text
//! G  = G + xattn(G, V)            vision context
//! G~ = G + xattn(G, A)            attribute context
//! A~ = slot_attn(slots = G~, A)   assign attributes to clusters
//! A' = mixer(A~ + G~)             N^g_l tokens
//! ```
//!
//! The last stage has a single cluster token, which becomes the class
//! token. Three single-step baselines (`direct`, `pre`, `post`) share the
//! fusion machinery so the strategies can be compared on equal footing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{AttributeTokens, TextEncoder};
use crate::error::{shape_err, Error, Result};
use crate::ops::{
    cross_attention, mixer_block, slot_attention, transformer_encoder_layer, AttnParams,
    EncoderLayerParams, LayerNorm, MixerParams, SlotParams, DEFAULT_HEADS,
};
use crate::params::{init, Bound, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Standard deviation of the cluster-token and type-embedding initializer.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub stage_cluster_counts: Vec<usize>,
    pub fusion_layers_per_stage: usize,
    pub d: usize,
    pub heads: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            stage_cluster_counts: vec![15, 10, 5, 1],
            fusion_layers_per_stage: 1,
            d: 32,
            heads: DEFAULT_HEADS,
        }
    }
}

impl AggregatorConfig {
    pub fn with_schedule(schedule: &[usize]) -> Self {
        Self {
            stage_cluster_counts: schedule.to_vec(),
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_cluster_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = &self.stage_cluster_counts;
        if counts.is_empty() {
            return Err(Error::Config("cluster schedule is empty".into()));
        }
        if counts.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "cluster schedule {counts:?} is not strictly decreasing"
            )));
        }
        if counts.last() != Some(&1) {
            return Err(Error::Config(format!(
                "cluster schedule {counts:?} must end at 1"
            )));
        }
        if self.fusion_layers_per_stage == 0 {
            return Err(Error::Config("fusion_layers_per_stage must be >= 1".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Direct,
    Pre,
    Post,
    Hrchy,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Direct,
        Strategy::Pre,
        Strategy::Post,
        Strategy::Hrchy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::Pre => "pre",
            Strategy::Post => "post",
            Strategy::Hrchy => "hrchy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Strategy::Direct),
            "pre" => Ok(Strategy::Pre),
            "post" => Ok(Strategy::Post),
            "hrchy" | "hierarchy" => Ok(Strategy::Hrchy),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected direct, pre, post or hrchy)"
            ))),
        }
    }
}

/// One modality-type vector each for visual, attribute and cluster tokens.
#[derive(Clone, Debug)]
pub struct TypeEmbeddings {
    pub visual: ParamId,
    pub attribute: ParamId,
    pub cluster: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionStack {
    pub layers: Vec<EncoderLayerParams>,
}

impl FusionStack {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        depth: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayerParams::new(store, rng, &format!("{name}.layer{i}"), d, heads))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.layers.iter().for_each(|l| l.zero_outputs(store));
    }
}

/// Pre-normed cross-attention wrapped in a residual on the queries.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: AttnParams,
}

impl CrossBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), d),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), d),
            attn: AttnParams::new(store, rng, &format!("{name}.attn"), d, heads)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, queries: Var, context: Var) -> Result<Var> {
        let q = self.norm_q.forward(t, p, queries);
        let kv = self.norm_kv.forward(t, p, context);
        let h = cross_attention(t, p, q, kv, kv, &self.attn)?;
        Ok(t.add(queries, h))
    }
}

#[derive(Clone, Debug)]
pub struct ClusterModule {
    pub vision: CrossBlock,
    pub attribute: CrossBlock,
    pub norm_slots: LayerNorm,
    pub norm_inputs: LayerNorm,
    pub slot: SlotParams,
    pub mixer: MixerParams,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub clusters: ParamId,
    pub count: usize,
    pub fusion: FusionStack,
    pub cluster: ClusterModule,
}

#[derive(Clone, Debug)]
enum Layout {
    Hierarchical { stages: Vec<Stage> },
    Direct { fusion: FusionStack },
    Pre { query: ParamId, pool: AttnParams, fusion: FusionStack },
    Post { fusion: FusionStack },
}

/// Text-side input of one forward pass.
#[derive(Clone, Debug)]
pub struct TextInput {
    pub tokens: AttributeTokens,
    /// Sentence embedding of the comma-joined attributes, `1 × d`.
    pub sentence: Mat,
}

impl TextInput {
    pub fn encode<E: TextEncoder + ?Sized>(encoder: &E, attributes: &[String]) -> Result<Self> {
        Ok(Self {
            tokens: encoder.encode_attributes(attributes)?,
            sentence: aggregate_direct(attributes, encoder)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub struct AggregateOutput {
    /// Class token, `1 × d`.
    pub token: Var,
    /// Visual tokens after the last fusion, `N_v × d`.
    pub visual: Var,
    /// Attribute tokens after every stage (hierarchical only).
    pub stage_tokens: Vec<Var>,
}

/// A strategy, its configuration, the parameter layout and the values.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub strategy: Strategy,
    pub config: AggregatorConfig,
    pub types: TypeEmbeddings,
    pub params: ParamStore,
    layout: Layout,
}

impl Aggregator {
    pub fn new(strategy: Strategy, config: AggregatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let heads = config.heads;
        let type_vec = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            store.register(name, init::trunc_normal(rng, 1, d, TOKEN_INIT_STD))
        };
        let types = TypeEmbeddings {
            visual: type_vec(&mut store, &mut rng, "types.visual"),
            attribute: type_vec(&mut store, &mut rng, "types.attribute"),
            cluster: type_vec(&mut store, &mut rng, "types.cluster"),
        };
        // Baselines get the same total fusion depth as the hierarchy.
        let total_depth = config.fusion_layers_per_stage * config.num_stages();
        let layout = match strategy {
            Strategy::Hrchy => {
                let mut stages = Vec::with_capacity(config.num_stages());
                for (l, &count) in config.stage_cluster_counts.iter().enumerate() {
                    let name = format!("stage{l}");
                    let clusters = store.register(
                        format!("{name}.clusters"),
                        init::trunc_normal(&mut rng, count, d, TOKEN_INIT_STD),
                    );
                    let fusion = FusionStack::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.fusion"),
                        config.fusion_layers_per_stage,
                        d,
                        heads,
                    )?;
                    let cluster = ClusterModule {
                        vision: CrossBlock::new(&mut store, &mut rng, &format!("{name}.vision_xattn"), d, heads)?,
                        attribute: CrossBlock::new(&mut store, &mut rng, &format!("{name}.attr_xattn"), d, heads)?,
                        norm_slots: LayerNorm::new(&mut store, &format!("{name}.slot.norm_slots"), d),
                        norm_inputs: LayerNorm::new(&mut store, &format!("{name}.slot.norm_inputs"), d),
                        slot: SlotParams::new(&mut store, &mut rng, &format!("{name}.slot"), d),
                        mixer: MixerParams::new(&mut store, &mut rng, &format!("{name}.mixer"), count, d),
                    };
                    stages.push(Stage {
                        clusters,
                        count,
                        fusion,
                        cluster,
                    });
                }
                Layout::Hierarchical { stages }
            }
            Strategy::Direct => Layout::Direct {
                fusion: FusionStack::new(&mut store, &mut rng, "fusion", total_depth, d, heads)?,
            },
            Strategy::Pre => {
                let query = store.register("pool.query", init::trunc_normal(&mut rng, 1, d, TOKEN_INIT_STD));
                let pool = AttnParams::new(&mut store, &mut rng, "pool.attn", d, heads)?;
                let fusion = FusionStack::new(&mut store, &mut rng, "fusion", total_depth, d, heads)?;
                Layout::Pre { query, pool, fusion }
            }
            Strategy::Post => Layout::Post {
                fusion: FusionStack::new(&mut store, &mut rng, "fusion", total_depth, d, heads)?,
            },
        };
        Ok(Self {
            strategy,
            config,
            types,
            params: store,
            layout,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        match &self.layout {
            Layout::Hierarchical { stages } => stages,
            _ => &[],
        }
    }

    /// Fusion stacks in evaluation order.
    pub fn fusion_stacks(&self) -> Vec<&FusionStack> {
        match &self.layout {
            Layout::Hierarchical { stages } => stages.iter().map(|s| &s.fusion).collect(),
            Layout::Direct { fusion } | Layout::Post { fusion } | Layout::Pre { fusion, .. } => {
                vec![fusion]
            }
        }
    }

    pub fn pre_pooling(&self) -> Option<(ParamId, &AttnParams)> {
        match &self.layout {
            Layout::Pre { query, pool, .. } => Some((*query, pool)),
            _ => None,
        }
    }

    /// Zeroes every fusion layer's residual-branch output projections.
    pub fn zero_fusion_outputs(&mut self) {
        let stacks: Vec<FusionStack> = self.fusion_stacks().into_iter().cloned().collect();
        for s in &stacks {
            s.zero_outputs(&mut self.params);
        }
    }

    pub fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "strategy": self.strategy,
            "aggregator": self.config,
        })
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let mut echo = self.config_echo();
        if let (Some(obj), serde_json::Value::Object(more)) = (echo.as_object_mut(), extra) {
            obj.extend(more);
        }
        self.params.save(dir, &echo)
    }

    /// Rebuilds the layout from the manifest's config echo and fills it with
    /// the stored values.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (stored, echo) = ParamStore::load(dir)?;
        let strategy: Strategy = serde_json::from_value(
            echo.get("strategy")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("manifest lacks `strategy`".into()))?,
        )?;
        let config: AggregatorConfig = serde_json::from_value(
            echo.get("aggregator")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("manifest lacks `aggregator`".into()))?,
        )?;
        let mut model = Aggregator::new(strategy, config, 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for (_, name, value) in stored.iter() {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: shape {:?}, expected {:?}",
                    value.dim(),
                    slot.dim()
                )));
            }
            slot.assign(value);
        }
        Ok((model, echo))
    }

    /// Runs the configured strategy. `visual` is `N_v × d`.
    pub fn forward(&self, t: &mut Tape, p: &Bound, visual: Var, text: &TextInput) -> Result<AggregateOutput> {
        let d = self.config.d;
        if t.shape(visual).1 != d {
            return Err(shape_err(format!("visual width {}, expected {d}", t.shape(visual).1)));
        }
        if text.tokens.data.ncols() != d || text.sentence.ncols() != d {
            return Err(shape_err(format!("attribute width differs from {d}")));
        }
        if text.is_empty() {
            return Err(Error::Invalid("no attribute tokens".into()));
        }
        match &self.layout {
            Layout::Hierarchical { .. } => {
                let attrs = t.constant(text.tokens.data.clone());
                aggregate_hierarchical(t, p, self, visual, attrs)
            }
            Layout::Direct { fusion } => {
                let token = t.constant(text.sentence.clone());
                fuse_single_token(t, p, &self.types, fusion, visual, token)
            }
            Layout::Pre { fusion, .. } => {
                let attrs = t.constant(text.tokens.data.clone());
                let token = aggregate_pre(t, p, self, attrs)?;
                fuse_single_token(t, p, &self.types, fusion, visual, token)
            }
            Layout::Post { .. } => {
                let attrs = t.constant(text.tokens.data.clone());
                aggregate_post(t, p, self, visual, attrs)
            }
        }
    }
}

/// Runs a fusion stack over `[V; A; G]` with modality-type embeddings added
/// and splits the result back by position.
pub fn fuse_tokens(
    t: &mut Tape,
    p: &Bound,
    types: &TypeEmbeddings,
    fusion: &FusionStack,
    visual: Var,
    attributes: Var,
    clusters: Option<Var>,
) -> Result<(Var, Var, Option<Var>)> {
    let (nv, d) = t.shape(visual);
    let (na, da) = t.shape(attributes);
    if da != d {
        return Err(shape_err(format!("attribute width {da}, visual width {d}")));
    }
    let v = t.add_row(visual, p[types.visual]);
    let a = t.add_row(attributes, p[types.attribute]);
    let mut parts = vec![v, a];
    let mut ng = 0;
    if let Some(g) = clusters {
        let (n, dg) = t.shape(g);
        if dg != d {
            return Err(shape_err(format!("cluster width {dg}, visual width {d}")));
        }
        ng = n;
        parts.push(t.add_row(g, p[types.cluster]));
    }
    let mut x = t.concat_rows(&parts);
    for layer in &fusion.layers {
        x = transformer_encoder_layer(t, p, x, layer)?;
    }
    let v = t.slice_rows(x, 0, nv);
    let a = t.slice_rows(x, nv, na);
    let g = clusters.map(|_| t.slice_rows(x, nv + na, ng));
    Ok((v, a, g))
}

/// Fusion step of hierarchical stage `stage`.
pub fn fuse_stage(
    t: &mut Tape,
    p: &Bound,
    model: &Aggregator,
    stage: usize,
    visual: Var,
    attributes: Var,
    clusters: Var,
) -> Result<(Var, Var, Var)> {
    let st = model
        .stages()
        .get(stage)
        .ok_or_else(|| Error::Config(format!("no stage {stage}")))?;
    let (v, a, g) = fuse_tokens(t, p, &model.types, &st.fusion, visual, attributes, Some(clusters))?;
    Ok((v, a, g.expect("clusters were fused")))
}

/// Clustering step of hierarchical stage `stage`; returns `N^g_l × d`.
pub fn cluster_stage(
    t: &mut Tape,
    p: &Bound,
    model: &Aggregator,
    stage: usize,
    visual: Var,
    attributes: Var,
    clusters: Var,
) -> Result<Var> {
    let st = model
        .stages()
        .get(stage)
        .ok_or_else(|| Error::Config(format!("no stage {stage}")))?;
    if t.shape(clusters).0 != st.count {
        return Err(shape_err(format!(
            "stage {stage}: {} cluster tokens, expected {}",
            t.shape(clusters).0,
            st.count
        )));
    }
    let m = &st.cluster;
    let g = m.vision.forward(t, p, clusters, visual)?;
    let g = m.attribute.forward(t, p, g, attributes)?;
    let slots = m.norm_slots.forward(t, p, g);
    let inputs = m.norm_inputs.forward(t, p, attributes);
    let grouped = slot_attention(t, p, slots, inputs, &m.slot)?.output;
    let merged = t.add(grouped, g);
    mixer_block(t, p, merged, &m.mixer)
}

/// All stages of fusion then clustering; the final stage leaves one token.
pub fn aggregate_hierarchical(
    t: &mut Tape,
    p: &Bound,
    model: &Aggregator,
    visual: Var,
    attributes: Var,
) -> Result<AggregateOutput> {
    let stages = model.stages();
    if stages.is_empty() {
        return Err(Error::Config(format!(
            "strategy {} has no hierarchical stages",
            model.strategy
        )));
    }
    let (mut v, mut a) = (visual, attributes);
    let mut stage_tokens = Vec::with_capacity(stages.len());
    for (l, st) in stages.iter().enumerate() {
        let g = p[st.clusters];
        let (fv, fa, fg) = fuse_stage(t, p, model, l, v, a, g)?;
        a = cluster_stage(t, p, model, l, fv, fa, fg)?;
        v = fv;
        stage_tokens.push(a);
    }
    Ok(AggregateOutput {
        token: a,
        visual: v,
        stage_tokens,
    })
}

/// Joins the attributes into one comma-separated sentence and embeds it
/// once.
pub fn aggregate_direct<E: TextEncoder + ?Sized>(attributes: &[String], encoder: &E) -> Result<Mat> {
    if attributes.is_empty() {
        return Err(Error::Invalid("no attributes to aggregate".into()));
    }
    encoder.encode_sentence(&attributes.join(", "))
}

/// Learned-query attention pooling of the attribute tokens.
pub fn aggregate_pre(t: &mut Tape, p: &Bound, model: &Aggregator, attributes: Var) -> Result<Var> {
    let (query, pool) = model
        .pre_pooling()
        .ok_or_else(|| Error::Config(format!("strategy {} has no pooling query", model.strategy)))?;
    cross_attention(t, p, p[query], attributes, attributes, pool)
}

/// Joint fusion of visual and attribute tokens, then the mean of the fused
/// attribute tokens.
pub fn aggregate_post(
    t: &mut Tape,
    p: &Bound,
    model: &Aggregator,
    visual: Var,
    attributes: Var,
) -> Result<AggregateOutput> {
    let fusion = match &model.layout {
        Layout::Post { fusion } => fusion,
        _ => {
            return Err(Error::Config(format!(
                "strategy {} is not post-aggregation",
                model.strategy
            )))
        }
    };
    let (v, a, _) = fuse_tokens(t, p, &model.types, fusion, visual, attributes, None)?;
    let token = t.mean_rows(a);
    Ok(AggregateOutput {
        token,
        visual: v,
        stage_tokens: Vec::new(),
    })
}

fn fuse_single_token(
    t: &mut Tape,
    p: &Bound,
    types: &TypeEmbeddings,
    fusion: &FusionStack,
    visual: Var,
    token: Var,
) -> Result<AggregateOutput> {
    let (v, a, _) = fuse_tokens(t, p, types, fusion, visual, token, None)?;
    Ok(AggregateOutput {
        token: a,
        visual: v,
        stage_tokens: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, ToyEncoder};
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn small_config(schedule: &[usize]) -> AggregatorConfig {
        AggregatorConfig {
            stage_cluster_counts: schedule.to_vec(),
            fusion_layers_per_stage: 1,
            d: 8,
            heads: 2,
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(AggregatorConfig::default().validate().is_ok());
        assert!(small_config(&[]).validate().is_err());
        assert!(small_config(&[5, 5, 1]).validate().is_err());
        assert!(small_config(&[5, 2]).validate().is_err());
        let mut c = small_config(&[3, 1]);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("mean".parse::<Strategy>().is_err());
    }

    #[test]
    fn fusion_preserves_token_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Aggregator::new(Strategy::Hrchy, AggregatorConfig::default(), 1).unwrap();
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let v = t.constant(rand_mat(&mut rng, 196, 32));
        let a = t.constant(rand_mat(&mut rng, 15, 32));
        let g = p[model.stages()[0].clusters];
        let (v2, a2, g2) = fuse_stage(&mut t, &p, &model, 0, v, a, g).unwrap();
        assert_eq!(t.shape(v2), (196, 32));
        assert_eq!(t.shape(a2), (15, 32));
        assert_eq!(t.shape(g2), (15, 32));
    }

    #[test]
    fn zeroed_fusion_only_adds_type_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Aggregator::new(Strategy::Hrchy, small_config(&[3, 1]), 2).unwrap();
        model.zero_fusion_outputs();
        let (v0, a0) = (rand_mat(&mut rng, 4, 8), rand_mat(&mut rng, 5, 8));
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let v = t.constant(v0.clone());
        let a = t.constant(a0.clone());
        let g = p[model.stages()[0].clusters];
        let (v2, a2, g2) = fuse_stage(&mut t, &p, &model, 0, v, a, g).unwrap();
        let ty = |id| model.params.get(id).clone();
        let close = |x: &Mat, y: &Mat| x.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-12);
        assert!(close(t.value(v2), &(&v0 + &ty(model.types.visual))));
        assert!(close(t.value(a2), &(&a0 + &ty(model.types.attribute))));
        let g0 = model.params.get(model.stages()[0].clusters);
        assert!(close(t.value(g2), &(g0 + &ty(model.types.cluster))));
    }

    #[test]
    fn single_stage_schedule_collapses_to_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Aggregator::new(Strategy::Hrchy, small_config(&[1]), 3).unwrap();
        for n in [1, 4, 9] {
            let mut t = Tape::new();
            let p = model.params.bind(&mut t, false);
            let v = t.constant(rand_mat(&mut rng, 4, 8));
            let a = t.constant(rand_mat(&mut rng, n, 8));
            let out = aggregate_hierarchical(&mut t, &p, &model, v, a).unwrap();
            assert_eq!(t.shape(out.token), (1, 8));
            assert_eq!(t.shape(out.visual), (4, 8));
        }
    }

    #[test]
    fn direct_aggregate_matches_sentence_encoding() {
        let enc = ToyEncoder::new(EncoderConfig::default()).unwrap();
        let attrs = vec!["pink feathers".to_string(), "long neck".to_string()];
        let direct = aggregate_direct(&attrs, &enc).unwrap();
        assert_eq!(direct, enc.encode_sentence("pink feathers, long neck").unwrap());
        let single = aggregate_direct(&attrs[..1], &enc).unwrap();
        assert_eq!(single.row(0), enc.encode_attributes(&attrs[..1]).unwrap().data.row(0));
        let reversed: Vec<String> = attrs.iter().rev().cloned().collect();
        let r = aggregate_direct(&reversed, &enc).unwrap();
        assert!(direct.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn pre_pooling_of_one_attribute_is_its_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Aggregator::new(Strategy::Pre, small_config(&[3, 1]), 5).unwrap();
        let (_, pool) = model.pre_pooling().unwrap();
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let a = t.constant(rand_mat(&mut rng, 1, 8));
        let pooled = aggregate_pre(&mut t, &p, &model, a).unwrap();
        let v = pool.v.forward(&mut t, &p, a);
        let expected = pool.o.forward(&mut t, &p, v);
        assert!(t.value(pooled).iter().zip(t.value(expected)).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn post_single_attribute_with_zeroed_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = Aggregator::new(Strategy::Post, small_config(&[3, 1]), 7).unwrap();
        model.zero_fusion_outputs();
        let a0 = rand_mat(&mut rng, 1, 8);
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let v = t.constant(rand_mat(&mut rng, 4, 8));
        let a = t.constant(a0.clone());
        let out = aggregate_post(&mut t, &p, &model, v, a).unwrap();
        let expected = &a0 + model.params.get(model.types.attribute);
        assert!(t.value(out.token).iter().zip(&expected).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn strategy_specific_entry_points_reject_other_layouts() {
        let model = Aggregator::new(Strategy::Direct, small_config(&[3, 1]), 0).unwrap();
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let v = t.constant(Mat::zeros((4, 8)));
        let a = t.constant(Mat::ones((2, 8)));
        assert!(aggregate_hierarchical(&mut t, &p, &model, v, a).is_err());
        assert!(aggregate_pre(&mut t, &p, &model, a).is_err());
        assert!(aggregate_post(&mut t, &p, &model, v, a).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_every_value() {
        let model = Aggregator::new(Strategy::Hrchy, small_config(&[3, 1]), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), serde_json::json!({"seed": 9})).unwrap();
        let (loaded, echo) = Aggregator::load(dir.path()).unwrap();
        assert_eq!(echo["seed"], 9);
        assert_eq!(loaded.strategy, Strategy::Hrchy);
        assert_eq!(loaded.params, model.params);
    }
}
