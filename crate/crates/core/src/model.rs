//! Trip-aware transformer.
//!
//! Every point of every trip becomes one token. An encoder fuses all trips
//! into a shared memory; hierarchical instance/point queries decode fused
//! elements from it, and a parallel branch of per-cell queries predicts a
//! foreground mask.
//!
//! Only real tokens are ever computed. The padded [`TokenBatch`] layout
//! exists for callers that want fixed shapes; its masked rows are zero.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    denormalize, normalize_element, rasterize, resample_uniform, BinaryGrid, ElementCategory,
    MapElement, NormalizationFrame, Point2D, Scene,
};
use crate::matcher::prepare_targets;
use crate::nn::{Graph, Matrix, ParamId, ParamStore, Var};

/// Keeps squashed coordinates strictly inside (0, 1).
const SQUASH_EPS: f64 = 1e-6;
const TABLE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_instance_queries: usize,
    /// Point queries per instance; equals the points per element.
    pub n_point_queries: usize,
    pub n_categories: usize,
    pub max_trips: usize,
    pub max_elements: usize,
    pub seg_rows: usize,
    pub seg_cols: usize,
    pub ffn_dim: usize,
    /// Octaves of the sinusoidal coordinate encoding.
    pub n_frequencies: usize,
    /// Learned trip-index and element-index embeddings.
    pub position_embedding: bool,
    pub segmentation_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 4,
            n_instance_queries: 15,
            n_point_queries: 10,
            n_categories: ElementCategory::COUNT,
            max_trips: 10,
            max_elements: 16,
            seg_rows: 50,
            seg_cols: 50,
            ffn_dim: 128,
            n_frequencies: 10,
            position_embedding: true,
            segmentation_branch: true,
        }
    }
}

impl ModelConfig {
    /// Query counts and depth of the full-size model.
    pub fn full_scale() -> Self {
        Self {
            d_model: 256,
            n_heads: 8,
            n_encoder_layers: 2,
            n_decoder_layers: 6,
            n_instance_queries: 30,
            n_point_queries: 30,
            ffn_dim: 512,
            max_elements: 30,
            ..Self::default()
        }
    }

    pub fn points_per_element(&self) -> usize {
        self.n_point_queries
    }

    /// Padded tokens per item.
    pub fn token_capacity(&self) -> usize {
        self.max_trips * self.max_elements * self.n_point_queries
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_decoder_layers", self.n_decoder_layers),
            ("n_instance_queries", self.n_instance_queries),
            ("n_point_queries", self.n_point_queries),
            ("max_trips", self.max_trips),
            ("max_elements", self.max_elements),
            ("seg_rows", self.seg_rows),
            ("seg_cols", self.seg_cols),
            ("ffn_dim", self.ffn_dim),
            ("n_frequencies", self.n_frequencies),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_categories != ElementCategory::COUNT {
            return Err(Error::InvalidConfig(format!(
                "n_categories must be {}",
                ElementCategory::COUNT
            )));
        }
        if self.n_point_queries < 2 {
            return Err(Error::InvalidConfig("n_point_queries must be at least 2".into()));
        }
        Ok(())
    }

    /// Closed form of the number of scalar parameters:
    ///
    /// ```text
    /// embed   = (K d + d) + [2 (E + V) d] + (in d + d) + (d d + d),
    ///           in = d + 4 L + [2 d]
    /// attn    = 4 (d d + d),  norm = 2 d,  ffn = d f + f + f d + d
    /// encoder = n_enc (attn + ffn + 2 norm)
    /// decoder = n_dec (3 attn + ffn + 4 norm) + (Q + P) d
    /// heads   = (d (K+1) + K+1) + (d d + d + 2 d + 2)
    /// seg     = H W d + attn + norm + (d d + d + d + 1)
    /// ```
    /// Bracketed terms are present only with positional embeddings.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let k = self.n_categories;
        let f = self.ffn_dim;
        let pos = if self.position_embedding { 2 * d } else { 0 };
        let input = d + 4 * self.n_frequencies + pos;
        let tables = if self.position_embedding {
            (self.max_trips + self.max_elements) * d
        } else {
            0
        };
        let embed = k * d + d + tables + input * d + d + d * d + d;
        let attn = 4 * (d * d + d);
        let norm = 2 * d;
        let ffn = d * f + f + f * d + d;
        let encoder = self.n_encoder_layers * (attn + ffn + 2 * norm);
        let decoder = self.n_decoder_layers * (3 * attn + ffn + 4 * norm)
            + (self.n_instance_queries + self.n_point_queries) * d;
        let heads = (d * (k + 1) + k + 1) + (d * d + d + 2 * d + 2);
        let seg = if self.segmentation_branch {
            self.seg_rows * self.seg_cols * d + attn + norm + (d * d + d + d + 1)
        } else {
            0
        };
        embed + encoder + decoder + heads + seg
    }
}

/// One real token: a point of an element of a trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub trip: usize,
    pub element: usize,
    pub point: usize,
    pub category: ElementCategory,
    /// Normalized coordinates.
    pub position: Point2D,
}

/// A scene converted into model inputs and training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub scene_id: String,
    pub frame: NormalizationFrame,
    pub tokens: Vec<Token>,
    pub trip_count: usize,
    /// Ground truth in meters, as given.
    pub gt: Vec<MapElement>,
    /// Ground truth, resampled and normalized.
    pub targets: Vec<MapElement>,
    pub seg_mask: BinaryGrid,
}

impl PreparedScene {
    /// Position of a token in the padded `(trip, element, point)` layout.
    pub fn padded_index(token: &Token, config: &ModelConfig) -> usize {
        (token.trip * config.max_elements + token.element) * config.n_point_queries + token.point
    }

    /// Keeps only the listed trips (by position), renumbered in the given
    /// order.
    pub fn with_trips(&self, keep: &[usize]) -> PreparedScene {
        let mut tokens = Vec::new();
        for (new, &old) in keep.iter().enumerate() {
            tokens.extend(self.tokens.iter().filter(|t| t.trip == old).map(|t| Token { trip: new, ..*t }));
        }
        PreparedScene {
            tokens,
            trip_count: keep.len(),
            ..self.clone()
        }
    }
}

/// Resamples and normalizes every trip element into tokens and builds the
/// matching targets and the rasterized foreground mask.
pub fn prepare_scene(scene: &Scene, config: &ModelConfig, seg_line_width: f64) -> Result<PreparedScene> {
    scene.bounds.validate()?;
    let n_points = config.n_point_queries;
    if scene.trips.len() > config.max_trips {
        return Err(Error::CapacityExceeded(format!(
            "scene {}: {} trips exceed max_trips {}",
            scene.scene_id,
            scene.trips.len(),
            config.max_trips
        )));
    }
    let mut tokens = Vec::new();
    for (t, trip) in scene.trips.iter().enumerate() {
        if trip.elements.len() > config.max_elements {
            return Err(Error::CapacityExceeded(format!(
                "scene {} trip {}: {} elements exceed max_elements {}",
                scene.scene_id,
                trip.trip_id,
                trip.elements.len(),
                config.max_elements
            )));
        }
        for (e, element) in trip.elements.iter().enumerate() {
            let resampled = resample_uniform(element, n_points)?.element;
            let normalized = normalize_element(&resampled, &scene.bounds);
            for (j, p) in normalized.points.iter().enumerate() {
                tokens.push(Token {
                    trip: t,
                    element: e,
                    point: j,
                    category: element.category,
                    position: *p,
                });
            }
        }
    }
    Ok(PreparedScene {
        scene_id: scene.scene_id.clone(),
        frame: scene.bounds,
        tokens,
        trip_count: scene.trips.len(),
        gt: scene.gt_elements.clone(),
        targets: prepare_targets(&scene.gt_elements, &scene.bounds, n_points)?,
        seg_mask: rasterize(
            &scene.gt_elements,
            &scene.bounds,
            config.seg_rows,
            config.seg_cols,
            seg_line_width,
        ),
    })
}

/// Padded token features, `B` items of `T x d_model` each.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub features: Vec<Matrix>,
    /// `B` rows of `T` flags; true marks a real token.
    pub mask: Vec<Vec<bool>>,
}

impl TokenBatch {
    fn valid_rows(&self, item: usize) -> Vec<usize> {
        self.mask[item]
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPrediction {
    /// `N_inst x (K + 1)`, background last.
    pub class_logits: Matrix,
    /// `(N_inst * N_p) x 2`, normalized.
    pub points: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutput {
    pub class_logits: Matrix,
    pub points: Matrix,
    /// `H x W`.
    pub seg_logits: Option<Matrix>,
    /// One prediction per decoder layer; the last equals the final output.
    pub aux: Vec<LayerPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub items: Vec<ItemOutput>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub class_logits: Var,
    pub points: Var,
}

/// Output nodes of one item on a graph.
#[derive(Debug, Clone)]
pub struct OutputVars {
    /// One per decoder layer, final layer last.
    pub layers: Vec<LayerVars>,
    /// `(H * W) x 1`.
    pub seg_logits: Option<Var>,
}

impl OutputVars {
    pub fn final_layer(&self) -> LayerVars {
        *self.layers.last().expect("at least one decoder layer")
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    intra_attn: Attention,
    norm3: Norm,
    ffn: FeedForward,
    norm4: Norm,
}

#[derive(Debug, Clone, Copy)]
struct SegBranch {
    queries: ParamId,
    attn: Attention,
    norm: Norm,
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    category: Linear,
    trip_table: Option<ParamId>,
    element_table: Option<ParamId>,
    fuse1: Linear,
    fuse2: Linear,
    encoder: Vec<EncoderLayer>,
    instance_queries: ParamId,
    point_queries: ParamId,
    decoder: Vec<DecoderLayer>,
    cls: Linear,
    reg_hidden: Linear,
    reg_out: Linear,
    seg: Option<SegBranch>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.store.add_weight(format!("{name}.w"), fan_in, fan_out, &mut self.rng),
            b: self.store.add_bias(format!("{name}.b"), fan_out),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.store.add_constant(format!("{name}.gamma"), d, 1.0),
            beta: self.store.add_bias(format!("{name}.beta"), d),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, f),
            down: self.linear(&format!("{name}.down"), f, d),
        }
    }

    fn table(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add_table(name, rows, cols, TABLE_STD, &mut self.rng)
    }
}

fn build_layout(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Layout {
    let d = config.d_model;
    let k = config.n_categories;
    let mut b = Builder {
        store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let category = b.linear("embed.category", k, d);
    let (trip_table, element_table) = if config.position_embedding {
        (
            Some(b.table("embed.trip", config.max_trips, d)),
            Some(b.table("embed.element", config.max_elements, d)),
        )
    } else {
        (None, None)
    };
    let input = d + 4 * config.n_frequencies + if config.position_embedding { 2 * d } else { 0 };
    let fuse1 = b.linear("embed.fuse1", input, d);
    let fuse2 = b.linear("embed.fuse2", d, d);
    let encoder = (0..config.n_encoder_layers)
        .map(|i| EncoderLayer {
            attn: b.attention(&format!("enc{i}.attn"), d),
            norm1: b.norm(&format!("enc{i}.norm1"), d),
            ffn: b.ffn(&format!("enc{i}.ffn"), d, config.ffn_dim),
            norm2: b.norm(&format!("enc{i}.norm2"), d),
        })
        .collect();
    let instance_queries = b.table("dec.instance_queries", config.n_instance_queries, d);
    let point_queries = b.table("dec.point_queries", config.n_point_queries, d);
    let decoder = (0..config.n_decoder_layers)
        .map(|i| DecoderLayer {
            self_attn: b.attention(&format!("dec{i}.self_attn"), d),
            norm1: b.norm(&format!("dec{i}.norm1"), d),
            cross_attn: b.attention(&format!("dec{i}.cross_attn"), d),
            norm2: b.norm(&format!("dec{i}.norm2"), d),
            intra_attn: b.attention(&format!("dec{i}.intra_attn"), d),
            norm3: b.norm(&format!("dec{i}.norm3"), d),
            ffn: b.ffn(&format!("dec{i}.ffn"), d, config.ffn_dim),
            norm4: b.norm(&format!("dec{i}.norm4"), d),
        })
        .collect();
    let cls = b.linear("head.cls", d, k + 1);
    let reg_hidden = b.linear("head.reg_hidden", d, d);
    let reg_out = b.linear("head.reg_out", d, 2);
    let seg = config.segmentation_branch.then(|| SegBranch {
        queries: b.table("seg.queries", config.seg_rows * config.seg_cols, d),
        attn: b.attention("seg.attn", d),
        norm: b.norm("seg.norm", d),
        hidden: b.linear("seg.hidden", d, d),
        out: b.linear("seg.out", d, 1),
    });
    Layout {
        category,
        trip_table,
        element_table,
        fuse1,
        fuse2,
        encoder,
        instance_queries,
        point_queries,
        decoder,
        cls,
        reg_hidden,
        reg_out,
        seg,
    }
}

/// Sinusoidal encoding `sin/cos(2^l pi x)`, `sin/cos(2^l pi y)` for each
/// octave `l`.
pub fn coordinate_encoding(p: Point2D, n_frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * n_frequencies);
    for coord in [p.x, p.y] {
        for l in 0..n_frequencies {
            let arg = f64::from(1u32 << l.min(31)) * PI * coord;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

pub struct FusionModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl FusionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model around stored parameter values. Names and shapes
    /// must match a freshly built model exactly.
    pub fn from_params(config: ModelConfig, values: Vec<(String, Matrix)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if values.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let slot = model.params.value_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn ffn(&self, g: &mut Graph, x: Var, f: FeedForward) -> Var {
        let h = self.linear(g, x, f.up);
        let h = g.gelu(h);
        self.linear(g, h, f.down)
    }

    /// Multi-head scaled dot-product attention of `queries` over `keys`.
    /// `allowed` is an optional row-major `Nq x Nk` mask.
    fn attention(&self, g: &mut Graph, queries: Var, keys: Var, a: Attention, allowed: Option<&[bool]>) -> Var {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let q = self.linear(g, queries, a.q);
        let k = self.linear(g, keys, a.k);
        let v = self.linear(g, keys, a.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores, allowed);
            outs.push(g.matmul(weights, vh));
        }
        let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.linear(g, merged, a.o)
    }

    /// Compact token features (`n_tokens x d_model`), real tokens only.
    fn embed_graph(&self, g: &mut Graph, tokens: &[Token]) -> Result<Var> {
        let c = &self.config;
        for t in tokens {
            if t.trip >= c.max_trips || t.element >= c.max_elements || t.point >= c.n_point_queries {
                return Err(Error::CapacityExceeded(format!(
                    "token (trip {}, element {}, point {}) outside model capacity",
                    t.trip, t.element, t.point
                )));
            }
        }
        let n = tokens.len();
        let one_hot = Matrix::from_fn(n, c.n_categories, |r, k| {
            if tokens[r].category.code() == k { 1.0 } else { 0.0 }
        });
        let one_hot = g.constant(one_hot);
        let cat = self.linear(g, one_hot, self.layout.category);
        let cat = g.gelu(cat);
        let coords = Matrix::from_vec(
            n,
            4 * c.n_frequencies,
            tokens
                .iter()
                .flat_map(|t| coordinate_encoding(t.position, c.n_frequencies))
                .collect(),
        );
        let coords = g.constant(coords);
        let mut parts = vec![cat, coords];
        if let (Some(trip), Some(element)) = (self.layout.trip_table, self.layout.element_table) {
            let trip = g.param(trip);
            let element = g.param(element);
            let trips: Rc<[usize]> = tokens.iter().map(|t| t.trip).collect();
            let elements: Rc<[usize]> = tokens.iter().map(|t| t.element).collect();
            parts.push(g.gather_rows(trip, trips));
            parts.push(g.gather_rows(element, elements));
        }
        let x = g.concat_cols(&parts);
        let h = self.linear(g, x, self.layout.fuse1);
        let h = g.gelu(h);
        Ok(self.linear(g, h, self.layout.fuse2))
    }

    fn encode_graph(&self, g: &mut Graph, mut x: Var) -> Var {
        for layer in &self.layout.encoder {
            let a = self.attention(g, x, x, layer.attn, None);
            let r = g.add(x, a);
            let h = self.norm(g, r, layer.norm1);
            let f = self.ffn(g, h, layer.ffn);
            let r = g.add(h, f);
            x = self.norm(g, r, layer.norm2);
        }
        x
    }

    fn heads(&self, g: &mut Graph, h: Var) -> LayerVars {
        let pooled = g.group_mean(h, self.config.n_point_queries);
        let class_logits = self.linear(g, pooled, self.layout.cls);
        let r = self.linear(g, h, self.layout.reg_hidden);
        let r = g.gelu(r);
        let r = self.linear(g, r, self.layout.reg_out);
        let s = g.sigmoid(r);
        let s = g.scale(s, 1.0 - 2.0 * SQUASH_EPS);
        let eps = g.constant(Matrix::from_vec(1, 2, vec![SQUASH_EPS; 2]));
        LayerVars {
            class_logits,
            points: g.add_row(s, eps),
        }
    }

    /// Decoder and segmentation branch over compact memory rows (possibly
    /// none, in which case cross-attention contributes nothing).
    fn decode_graph(&self, g: &mut Graph, memory: Option<Var>) -> OutputVars {
        let c = &self.config;
        let (n_inst, n_pts) = (c.n_instance_queries, c.n_point_queries);
        let nq = n_inst * n_pts;
        let inst_rows: Rc<[usize]> = (0..nq).map(|r| r / n_pts).collect();
        let pt_rows: Rc<[usize]> = (0..nq).map(|r| r % n_pts).collect();
        let inst = g.param(self.layout.instance_queries);
        let pts = g.param(self.layout.point_queries);
        let inst = g.gather_rows(inst, inst_rows);
        let pts = g.gather_rows(pts, pt_rows);
        let mut h = g.add(inst, pts);

        let block: Vec<bool> = (0..nq * nq).map(|i| (i / nq) / n_pts == (i % nq) / n_pts).collect();
        let mut layers = Vec::with_capacity(c.n_decoder_layers);
        for layer in &self.layout.decoder {
            let a = self.attention(g, h, h, layer.self_attn, None);
            let r = g.add(h, a);
            h = self.norm(g, r, layer.norm1);

            let r = match memory {
                Some(m) => {
                    let a = self.attention(g, h, m, layer.cross_attn, None);
                    g.add(h, a)
                }
                None => h,
            };
            h = self.norm(g, r, layer.norm2);

            let a = self.attention(g, h, h, layer.intra_attn, Some(&block));
            let r = g.add(h, a);
            h = self.norm(g, r, layer.norm3);

            let f = self.ffn(g, h, layer.ffn);
            let r = g.add(h, f);
            h = self.norm(g, r, layer.norm4);
            layers.push(self.heads(g, h));
        }

        let seg_logits = self.layout.seg.map(|seg| {
            let q = g.param(seg.queries);
            let r = match memory {
                Some(m) => {
                    let a = self.attention(g, q, m, seg.attn, None);
                    g.add(q, a)
                }
                None => q,
            };
            let h = self.norm(g, r, seg.norm);
            let h = self.linear(g, h, seg.hidden);
            let h = g.gelu(h);
            self.linear(g, h, seg.out)
        });
        OutputVars { layers, seg_logits }
    }

    /// Records the full forward pass of one scene on `g`.
    pub fn forward_graph(&self, g: &mut Graph, tokens: &[Token]) -> Result<OutputVars> {
        let memory = if tokens.is_empty() {
            None
        } else {
            let x = self.embed_graph(g, tokens)?;
            Some(self.encode_graph(g, x))
        };
        Ok(self.decode_graph(g, memory))
    }

    fn collect(&self, g: &Graph, vars: &OutputVars) -> ItemOutput {
        let aux: Vec<LayerPrediction> = vars
            .layers
            .iter()
            .map(|l| LayerPrediction {
                class_logits: g.value(l.class_logits).clone(),
                points: g.value(l.points).clone(),
            })
            .collect();
        let last = aux.last().expect("at least one decoder layer").clone();
        ItemOutput {
            class_logits: last.class_logits,
            points: last.points,
            seg_logits: vars.seg_logits.map(|s| {
                Matrix::from_vec(self.config.seg_rows, self.config.seg_cols, g.value(s).data.clone())
            }),
            aux,
        }
    }

    pub fn forward_item(&self, tokens: &[Token]) -> Result<ItemOutput> {
        let mut g = Graph::new(&self.params);
        let vars = self.forward_graph(&mut g, tokens)?;
        Ok(self.collect(&g, &vars))
    }

    pub fn forward(&self, batch: &[&PreparedScene]) -> Result<ModelOutput> {
        let items = batch
            .iter()
            .map(|s| self.forward_item(&s.tokens))
            .collect::<Result<_>>()?;
        Ok(ModelOutput { items })
    }

    /// Padded token features for a batch.
    pub fn embed_tokens(&self, batch: &[&PreparedScene]) -> Result<TokenBatch> {
        let capacity = self.config.token_capacity();
        let mut features = Vec::with_capacity(batch.len());
        let mut mask = Vec::with_capacity(batch.len());
        for scene in batch {
            let mut padded = Matrix::zeros(capacity, self.config.d_model);
            let mut valid = vec![false; capacity];
            if !scene.tokens.is_empty() {
                let mut g = Graph::new(&self.params);
                let x = self.embed_graph(&mut g, &scene.tokens)?;
                let value = g.value(x);
                for (row, token) in scene.tokens.iter().enumerate() {
                    let idx = PreparedScene::padded_index(token, &self.config);
                    padded.row_mut(idx).copy_from_slice(value.row(row));
                    valid[idx] = true;
                }
            }
            features.push(padded);
            mask.push(valid);
        }
        Ok(TokenBatch { features, mask })
    }

    fn check_batch(&self, tokens: &TokenBatch) -> Result<()> {
        let d = self.config.d_model;
        if tokens.features.len() != tokens.mask.len() {
            return Err(Error::Shape("token batch: features and mask lengths differ".into()));
        }
        for (f, m) in tokens.features.iter().zip(&tokens.mask) {
            if f.cols != d || f.rows != m.len() {
                return Err(Error::Shape(format!(
                    "token features {}x{} with {} mask entries",
                    f.rows,
                    f.cols,
                    m.len()
                )));
            }
        }
        Ok(())
    }

    /// Encoder memory in the padded layout; masked rows stay zero.
    pub fn encode(&self, tokens: &TokenBatch) -> Result<Vec<Matrix>> {
        self.check_batch(tokens)?;
        let mut out = Vec::with_capacity(tokens.features.len());
        for (item, features) in tokens.features.iter().enumerate() {
            let rows = tokens.valid_rows(item);
            let mut memory = Matrix::zeros(features.rows, features.cols);
            if !rows.is_empty() {
                let mut g = Graph::new(&self.params);
                let x = g.constant(features.clone());
                let x = g.gather_rows(x, rows.clone().into());
                let m = self.encode_graph(&mut g, x);
                for (i, &r) in rows.iter().enumerate() {
                    memory.row_mut(r).copy_from_slice(g.value(m).row(i));
                }
            }
            out.push(memory);
        }
        Ok(out)
    }

    pub fn decode(&self, memory: &[Matrix], mask: &[Vec<bool>]) -> Result<ModelOutput> {
        if memory.len() != mask.len() {
            return Err(Error::Shape("memory and mask batch sizes differ".into()));
        }
        let mut items = Vec::with_capacity(memory.len());
        for (m, valid) in memory.iter().zip(mask) {
            if m.rows != valid.len() || m.cols != self.config.d_model {
                return Err(Error::Shape(format!("memory {}x{}", m.rows, m.cols)));
            }
            let rows: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
            let mut g = Graph::new(&self.params);
            let compact = if rows.is_empty() {
                None
            } else {
                let all = g.constant(m.clone());
                Some(g.gather_rows(all, rows.into()))
            };
            let vars = self.decode_graph(&mut g, compact);
            items.push(self.collect(&g, &vars));
        }
        Ok(ModelOutput { items })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredElement {
    pub element: MapElement,
    pub confidence: f64,
}

/// Turns one item's predictions into elements in world coordinates.
/// Keeps instances whose best foreground probability reaches
/// `score_threshold`; a threshold of 1 or more keeps nothing.
pub fn decode_to_elements(
    output: &ItemOutput,
    frame: &NormalizationFrame,
    score_threshold: f64,
    sort: bool,
) -> Result<Vec<ScoredElement>> {
    let n_inst = output.class_logits.rows;
    if n_inst == 0 || !output.points.rows.is_multiple_of(n_inst) {
        return Err(Error::Shape("prediction rows do not divide into instances".into()));
    }
    if score_threshold >= 1.0 {
        return Ok(Vec::new());
    }
    let n_points = output.points.rows / n_inst;
    let mut out = Vec::new();
    for i in 0..n_inst {
        let logits = output.class_logits.row(i);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let (best, prob) = exp[..ElementCategory::COUNT]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &e)| {
                if e / total > acc.1 { (k, e / total) } else { acc }
            });
        if prob < score_threshold {
            continue;
        }
        let category = ElementCategory::from_code(best).expect("foreground code");
        let points = (0..n_points)
            .map(|j| {
                let r = i * n_points + j;
                denormalize(Point2D::new(output.points.get(r, 0), output.points.get(r, 1)), frame)
            })
            .collect();
        out.push(ScoredElement {
            element: MapElement::new(category, points, category.is_closed())?,
            confidence: prob,
        });
    }
    if sort {
        out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PerceivedTrip;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            n_instance_queries: 3,
            n_point_queries: 3,
            max_trips: 3,
            max_elements: 3,
            seg_rows: 2,
            seg_cols: 3,
            ffn_dim: 12,
            n_frequencies: 2,
            ..ModelConfig::default()
        }
    }

    fn scene(trips: usize, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut line = || {
            let y = rng.gen_range(-20.0..20.0);
            MapElement::open(
                ElementCategory::LaneDivider,
                vec![Point2D::new(-25.0, y), Point2D::new(0.0, y + 1.0), Point2D::new(25.0, y)],
            )
            .unwrap()
        };
        let gt = vec![line(), line()];
        let trips = (0..trips)
            .map(|t| PerceivedTrip {
                trip_id: t as u32,
                elements: vec![line(), line()],
            })
            .collect();
        Scene {
            scene_id: format!("s{seed}"),
            bounds: NormalizationFrame::centered(60.0).unwrap(),
            gt_elements: gt,
            trips,
        }
    }

    #[test]
    fn parameter_count_formula() {
        for config in [
            tiny(),
            ModelConfig::default(),
            ModelConfig { position_embedding: false, segmentation_branch: false, ..tiny() },
            ModelConfig { n_encoder_layers: 0, ..tiny() },
        ] {
            let model = FusionModel::new(config.clone(), 1).unwrap();
            assert_eq!(model.params().scalar_count(), config.parameter_count());
        }
    }

    #[test]
    fn output_shapes() {
        for config in [tiny(), ModelConfig { segmentation_branch: false, ..tiny() }] {
            let model = FusionModel::new(config.clone(), 2).unwrap();
            let prepared = prepare_scene(&scene(2, 5), &config, 0.5).unwrap();
            let out = model.forward(&[&prepared]).unwrap();
            let item = &out.items[0];
            assert_eq!(item.class_logits.shape(), (3, 4));
            assert_eq!(item.points.shape(), (9, 2));
            assert_eq!(item.aux.len(), config.n_decoder_layers);
            assert_eq!(item.seg_logits.as_ref().map(|s| s.shape()), config.segmentation_branch.then_some((2, 3)));
            assert!(item.points.data.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn empty_trip_set_is_fully_masked() {
        let config = tiny();
        let model = FusionModel::new(config.clone(), 2).unwrap();
        let prepared = prepare_scene(&scene(0, 1), &config, 0.5).unwrap();
        let batch = model.embed_tokens(&[&prepared]).unwrap();
        assert!(batch.mask[0].iter().all(|m| !m));
        assert_eq!(batch.features[0].rows, 27);
        assert!(model.forward(&[&prepared]).unwrap().items[0].class_logits.is_finite());
    }

    #[test]
    fn capacity_errors() {
        let config = tiny();
        assert!(matches!(
            prepare_scene(&scene(4, 1), &config, 0.5),
            Err(Error::CapacityExceeded(_))
        ));
        assert_eq!(ModelConfig { max_trips: 10, max_elements: 30, n_point_queries: 20, ..tiny() }.token_capacity(), 6000);
    }

    #[test]
    fn trip_embedding_distinguishes_identical_points() {
        let config = tiny();
        let model = FusionModel::new(config.clone(), 3).unwrap();
        let mut s = scene(2, 9);
        s.trips[1].elements = s.trips[0].elements.clone();
        let prepared = prepare_scene(&s, &config, 0.5).unwrap();
        let batch = model.embed_tokens(&[&prepared]).unwrap();
        let stride = config.max_elements * config.n_point_queries;
        assert_ne!(batch.features[0].row(0), batch.features[0].row(stride));
    }

    #[test]
    fn padded_pipeline_matches_direct_forward() {
        let config = tiny();
        let model = FusionModel::new(config.clone(), 4).unwrap();
        let a = prepare_scene(&scene(2, 11), &config, 0.5).unwrap();
        let b = prepare_scene(&scene(3, 12), &config, 0.5).unwrap();
        let tokens = model.embed_tokens(&[&a, &b]).unwrap();
        let memory = model.encode(&tokens).unwrap();
        let padded = model.decode(&memory, &tokens.mask).unwrap();
        let direct = model.forward(&[&a, &b]).unwrap();
        let single = model.forward(&[&b]).unwrap();
        for (x, y) in padded.items.iter().zip(&direct.items) {
            for (u, v) in x.points.data.iter().zip(&y.points.data) {
                assert!((u - v).abs() < 1e-9);
            }
        }
        assert_eq!(direct.items[1], single.items[0]);
        assert_eq!(model.forward(&[&a]).unwrap(), model.forward(&[&a]).unwrap());
    }

    #[test]
    fn decode_thresholds() {
        let config = tiny();
        let model = FusionModel::new(config.clone(), 4).unwrap();
        let prepared = prepare_scene(&scene(2, 3), &config, 0.5).unwrap();
        let item = &model.forward(&[&prepared]).unwrap().items[0];
        let frame = prepared.frame;
        assert!(decode_to_elements(item, &frame, 1.0, false).unwrap().is_empty());
        let all = decode_to_elements(item, &frame, 0.0, true).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        for e in &all {
            assert_eq!(e.element.closed, e.element.category == ElementCategory::Crosswalk);
            assert!(e.element.points.iter().all(|p| frame.contains(p)));
        }
    }

    fn loss_of(model: &FusionModel, prepared: &PreparedScene) -> (f64, crate::nn::Gradients) {
        let weights = crate::loss::LossWeights::default();
        let mut g = Graph::new(model.params());
        let vars = model.forward_graph(&mut g, &prepared.tokens).unwrap();
        let (root, breakdown) =
            crate::loss::total_loss_graph(&mut g, &vars, &prepared.targets, Some(&prepared.seg_mask), &weights)
                .unwrap();
        (breakdown.total, g.backward(root))
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let config = tiny();
        let mut model = FusionModel::new(config.clone(), 21).unwrap();
        let prepared = prepare_scene(&scene(2, 4), &config, 3.0).unwrap();
        let (_, analytic) = loss_of(&model, &prepared);
        let h = 1e-6;
        let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = model.params().value(id).len();
            let mut numeric = vec![0.0; n];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = model.params().value(id).data[i];
                model.params_mut().value_mut(id).data[i] = orig + h;
                let up = loss_of(&model, &prepared).0;
                model.params_mut().value_mut(id).data[i] = orig - h;
                let down = loss_of(&model, &prepared).0;
                model.params_mut().value_mut(id).data[i] = orig;
                *slot = (up - down) / (2.0 * h);
            }
            let a = &analytic.get(id).data;
            let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
            let name = &model.params().get(id).name;
            // Key biases have an exactly zero gradient (softmax ignores a
            // per-row shift), so tiny norms are compared absolutely.
            assert!(diff <= 1e-4 * scale.max(1e-4), "{name}: diff {diff} scale {scale}");
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { max_trips: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig::full_scale().validate().is_ok());
    }
}
