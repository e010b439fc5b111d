//! A small query-based mask transformer.
//!
//! Strided 3×3 conv encoder → lateral pixel decoder (coarsest level first) →
//! `L` decoder layers with masked cross-attention, self-attention and an FFN
//! → class and mask heads. Virtual queries ride along each layer but bypass
//! both attention blocks and only pass through the FFN.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamStore, Var, Window};
use crate::config::{AttentionOrder, ModelConfig};
use crate::data::{ClassId, Image};
use crate::error::{Error, Result};
use crate::qpa::{self, PrototypeSet, SelectionIndex};
use crate::tensor::Tensor;

/// Parameter holding the prototype vectors.
pub const PROTOTYPES: &str = "qpa.prototypes";

/// Plain-value multi-scale features, coarsest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatureMap {
    /// One `[H_l·W_l × D]` tensor per level.
    pub levels: Vec<Tensor>,
    pub sizes: Vec<(usize, usize)>,
}

impl MultiScaleFeatureMap {
    pub fn dim(&self) -> usize {
        self.levels.first().map_or(0, Tensor::cols)
    }

    /// `|Ω| = Σ H_l·W_l`
    pub fn omega_len(&self) -> usize {
        self.sizes.iter().map(|(h, w)| h * w).sum()
    }

    /// All feature points stacked in flat Ω order.
    pub fn omega(&self) -> Tensor {
        let refs: Vec<&Tensor> = self.levels.iter().collect();
        Tensor::concat_rows(&refs)
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(Tensor::is_finite)
    }
}

/// Graph handles of the multi-scale features.
#[derive(Clone, Debug)]
pub struct FeatureNodes {
    pub levels: Vec<Var>,
    pub sizes: Vec<(usize, usize)>,
    /// Levels stacked in Ω order.
    pub omega: Var,
    /// Per-pixel embeddings of the finest level for the mask head.
    pub mask_features: Var,
}

impl FeatureNodes {
    pub fn values(&self, g: &Graph) -> MultiScaleFeatureMap {
        MultiScaleFeatureMap {
            levels: self.levels.iter().map(|&v| g.value(v).clone()).collect(),
            sizes: self.sizes.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryOrigin {
    Selected,
    Learned,
    Virtual,
}

/// Query block flowing through the decoder.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub features: Var,
    /// Positional encoding; `None` for virtual queries, which never attend.
    pub positional: Option<Var>,
    pub origin: QueryOrigin,
}

/// What to run in a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardSpec<'a> {
    /// Classes whose logits are live, in logit order; "no object" follows.
    pub visible: &'a [ClassId],
    /// Initialise queries from prototype-selected feature points.
    pub qpa: bool,
    pub stop_gradient: bool,
    /// `[j × D]` stored query vectors to replay.
    pub virtual_queries: Option<&'a Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: FeatureNodes,
    pub selection: Option<SelectionIndex>,
    pub initial_queries: Var,
    /// Real queries after the last decoder layer.
    pub final_queries: Var,
    /// `[N × (|visible| + 1)]`
    pub class_logits: Var,
    /// `[N × H·W]` at image resolution.
    pub mask_logits: Var,
    /// `[j × (|visible| + 1)]`
    pub virtual_logits: Option<Var>,
    /// Predictions of intermediate layers, used for deep supervision.
    pub aux: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub image_size: usize,
    pub in_channels: usize,
    /// Size of the class catalog; the class head has one more output.
    pub num_classes: usize,
    pub params: ParamStore,
    pub proto_classes: Vec<ClassId>,
    pub proto_stage: Vec<usize>,
}

fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = (1.0 / rows as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Sinusoidal encoding of a feature-map location `(l, h, w)`.
pub fn location_encoding(level: usize, levels: usize, h: usize, w: usize, size: (usize, usize), dim: usize) -> Vec<f64> {
    let coords = [
        (level as f64 + 0.5) / levels as f64,
        (h as f64 + 0.5) / size.0 as f64,
        (w as f64 + 0.5) / size.1 as f64,
    ];
    (0..dim)
        .map(|i| {
            let c = coords[i % 3];
            let band = i / 3;
            let freq = std::f64::consts::PI * (1u64 << (band / 2).min(20)) as f64;
            if band % 2 == 0 {
                (freq * c).sin()
            } else {
                (freq * c).cos()
            }
        })
        .collect()
}

impl SegModel {
    pub fn new(cfg: &ModelConfig, image_size: usize, in_channels: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_dim;
        let mut p = ParamStore::new();
        let levels = cfg.feature_levels;
        let mut cin = in_channels;
        for s in 0..levels {
            p.insert(format!("enc.{s}.w"), init_weight(&mut rng, 9 * cin, d));
            p.insert(format!("enc.{s}.b"), Tensor::zeros(1, d));
            cin = d;
        }
        for l in 0..levels {
            p.insert(format!("pix.{l}.w"), init_weight(&mut rng, d, d));
            p.insert(format!("pix.{l}.b"), Tensor::zeros(1, d));
        }
        p.insert("pix.mask.w", init_weight(&mut rng, d, d));
        p.insert("pix.mask.b", Tensor::zeros(1, d));
        for layer in 0..cfg.decoder_layers {
            for block in ["ca", "sa"] {
                for proj in ["q", "k", "v", "o"] {
                    p.insert(format!("dec.{layer}.{block}.{proj}.w"), init_weight(&mut rng, d, d));
                    p.insert(format!("dec.{layer}.{block}.{proj}.b"), Tensor::zeros(1, d));
                }
            }
            p.insert(format!("dec.{layer}.ffn.1.w"), init_weight(&mut rng, d, cfg.ffn_dim));
            p.insert(format!("dec.{layer}.ffn.1.b"), Tensor::zeros(1, cfg.ffn_dim));
            p.insert(format!("dec.{layer}.ffn.2.w"), init_weight(&mut rng, cfg.ffn_dim, d));
            p.insert(format!("dec.{layer}.ffn.2.b"), Tensor::zeros(1, d));
            for norm in ["ca_norm", "sa_norm", "ffn_norm"] {
                p.insert(format!("dec.{layer}.{norm}.g"), Tensor::full(1, d, 1.0));
                p.insert(format!("dec.{layer}.{norm}.b"), Tensor::zeros(1, d));
            }
        }
        p.insert("head.norm.g", Tensor::full(1, d, 1.0));
        p.insert("head.norm.b", Tensor::zeros(1, d));
        p.insert("head.class.w", init_weight(&mut rng, d, num_classes + 1));
        p.insert("head.class.b", Tensor::zeros(1, num_classes + 1));
        p.insert("head.mask.1.w", init_weight(&mut rng, d, d));
        p.insert("head.mask.1.b", Tensor::zeros(1, d));
        p.insert("head.mask.2.w", init_weight(&mut rng, d, d));
        p.insert("head.mask.2.b", Tensor::zeros(1, d));
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let n = cfg.num_queries;
        p.insert("query.feat", Tensor::from_vec(n, d, (0..n * d).map(|_| normal.sample(&mut rng)).collect()));
        p.insert("query.pos", Tensor::from_vec(n, d, (0..n * d).map(|_| normal.sample(&mut rng)).collect()));
        p.insert(PROTOTYPES, Tensor::zeros(0, d));
        Self {
            cfg: cfg.clone(),
            image_size,
            in_channels,
            num_classes,
            params: p,
            proto_classes: Vec::new(),
            proto_stage: Vec::new(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    /// `(H_l, W_l)` for each level, coarsest first.
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        let levels = self.cfg.feature_levels;
        (0..levels)
            .map(|l| {
                let s = self.image_size >> (levels - l);
                (s, s)
            })
            .collect()
    }

    pub fn prototype_set(&self) -> PrototypeSet {
        PrototypeSet {
            vectors: self.params.get(PROTOTYPES).expect("prototype parameter").clone(),
            class_ids: self.proto_classes.clone(),
            stage_of: self.proto_stage.clone(),
        }
    }

    pub fn set_prototypes(&mut self, set: PrototypeSet) {
        self.params.insert(PROTOTYPES, set.vectors);
        self.proto_classes = set.class_ids;
        self.proto_stage = set.stage_of;
    }

    /// Encoder plus pixel decoder.
    pub fn encode(&self, g: &mut Graph, image: &Image) -> Result<FeatureNodes> {
        if image.height != self.image_size || image.width != self.image_size || image.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "image {}x{}x{} does not match model {}x{}x{}",
                image.height,
                image.width,
                image.channels(),
                self.image_size,
                self.image_size,
                self.in_channels
            )));
        }
        let levels = self.cfg.feature_levels;
        let p = &self.params;
        let mut x = g.constant(image.pixels.clone());
        let mut size = self.image_size;
        let mut stages = Vec::with_capacity(levels);
        for s in 0..levels {
            let patches = g.im2col(x, size, size, Window { k: 3, stride: 2, pad: 1 });
            size /= 2;
            let w = g.param(p, &format!("enc.{s}.w"));
            let b = g.param(p, &format!("enc.{s}.b"));
            let y = g.linear(patches, w, b);
            x = g.relu(y);
            stages.push(x);
        }
        // stages[s] has stride 2^(s+1); level l reads stage L-1-l
        let sizes = self.level_sizes();
        let mut out: Vec<Var> = Vec::with_capacity(levels);
        for l in 0..levels {
            let w = g.param(p, &format!("pix.{l}.w"));
            let b = g.param(p, &format!("pix.{l}.b"));
            let lateral = g.linear(stages[levels - 1 - l], w, b);
            let level = match out.last() {
                Some(&prev) => {
                    let (ph, pw) = sizes[l - 1];
                    let up = g.upsample_rows(prev, ph, pw);
                    g.add(lateral, up)
                }
                None => lateral,
            };
            out.push(level);
        }
        for &v in &out {
            if !g.value(v).is_finite() {
                return Err(Error::NonFinite(format!("pixel decoder output of image {}", image.id)));
            }
        }
        let wm = g.param(p, "pix.mask.w");
        let bm = g.param(p, "pix.mask.b");
        let mask_features = g.linear(*out.last().expect("at least one level"), wm, bm);
        let omega = g.concat_rows(&out);
        Ok(FeatureNodes { levels: out, sizes, omega, mask_features })
    }

    /// Positional encodings of every location of `level`.
    pub fn level_encoding(&self, level: usize) -> Tensor {
        let sizes = self.level_sizes();
        let (h, w) = sizes[level];
        let d = self.hidden_dim();
        let mut t = Tensor::zeros(h * w, d);
        for r in 0..h {
            for c in 0..w {
                t.row_mut(r * w + c)
                    .copy_from_slice(&location_encoding(level, sizes.len(), r, c, (h, w), d));
            }
        }
        t
    }

    fn attention(
        &self,
        g: &mut Graph,
        prefix: &str,
        query_in: Var,
        key_in: Var,
        value_in: Var,
        mask: Option<&[bool]>,
    ) -> Var {
        let p = &self.params;
        let proj = |g: &mut Graph, name: &str, x: Var| {
            let w = g.param(p, &format!("{prefix}.{name}.w"));
            let b = g.param(p, &format!("{prefix}.{name}.b"));
            g.linear(x, w, b)
        };
        let q = proj(g, "q", query_in);
        let k = proj(g, "k", key_in);
        let v = proj(g, "v", value_in);
        let logits = g.matmul_t(q, k);
        let scaled = g.scale(logits, 1.0 / (self.hidden_dim() as f64).sqrt());
        let attn = g.softmax_rows(scaled, mask);
        let mixed = g.matmul(attn, v);
        proj(g, "o", mixed)
    }

    fn norm(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let gam = g.param(&self.params, &format!("{prefix}.g"));
        let bet = g.param(&self.params, &format!("{prefix}.b"));
        g.layer_norm(x, gam, bet)
    }

    /// `LN(x + W₂·relu(W₁x + b₁) + b₂)` of one decoder layer, row-wise.
    pub fn ffn(&self, g: &mut Graph, layer: usize, x: Var) -> Var {
        let p = &self.params;
        let w1 = g.param(p, &format!("dec.{layer}.ffn.1.w"));
        let b1 = g.param(p, &format!("dec.{layer}.ffn.1.b"));
        let w2 = g.param(p, &format!("dec.{layer}.ffn.2.w"));
        let b2 = g.param(p, &format!("dec.{layer}.ffn.2.b"));
        let h = g.linear(x, w1, b1);
        let h = g.relu(h);
        let y = g.linear(h, w2, b2);
        let r = g.add(x, y);
        self.norm(g, &format!("dec.{layer}.ffn_norm"), r)
    }

    /// One decoder layer. Real queries attend (masked cross-attention over
    /// `level`, self-attention) then pass the FFN; virtual queries are
    /// concatenated after the attention blocks and only pass the FFN.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_layer(
        &self,
        g: &mut Graph,
        layer: usize,
        queries: &QuerySet,
        features: &FeatureNodes,
        level: usize,
        attn_mask: Option<&[bool]>,
        virtual_queries: Option<&QuerySet>,
    ) -> Result<(Var, Option<Var>)> {
        let d = self.hidden_dim();
        let qv = g.value(queries.features);
        if qv.cols() != d || g.value(features.levels[level]).cols() != d {
            return Err(Error::Shape(format!("query dim {} vs feature dim {d}", qv.cols())));
        }
        let n = qv.rows();
        if let Some(v) = virtual_queries {
            if v.origin != QueryOrigin::Virtual {
                return Err(Error::InvalidArgument("virtual branch requires virtual-flagged queries".into()));
            }
            if g.value(v.features).cols() != d {
                return Err(Error::Shape("virtual query dim mismatch".into()));
            }
        }
        let feat = features.levels[level];
        let pos_key = g.constant(self.level_encoding(level));
        let key_in = g.add(feat, pos_key);
        let qpos = queries.positional;
        let with_pos = |g: &mut Graph, x: Var| match qpos {
            Some(p) => g.add(x, p),
            None => x,
        };
        let cross = |g: &mut Graph, x: Var| {
            let qin = with_pos(g, x);
            let a = self.attention(g, &format!("dec.{layer}.ca"), qin, key_in, feat, attn_mask);
            let r = g.add(x, a);
            self.norm(g, &format!("dec.{layer}.ca_norm"), r)
        };
        let selfa = |g: &mut Graph, x: Var| {
            let qin = with_pos(g, x);
            let a = self.attention(g, &format!("dec.{layer}.sa"), qin, qin, x, None);
            let r = g.add(x, a);
            self.norm(g, &format!("dec.{layer}.sa_norm"), r)
        };
        let attended = match self.cfg.attention_order {
            AttentionOrder::CrossThenSelf => {
                let x = cross(g, queries.features);
                selfa(g, x)
            }
            AttentionOrder::SelfThenCross => {
                let x = selfa(g, queries.features);
                cross(g, x)
            }
        };
        match virtual_queries {
            Some(v) if g.value(v.features).rows() > 0 => {
                let j = g.value(v.features).rows();
                let joined = g.concat_rows(&[attended, v.features]);
                let out = self.ffn(g, layer, joined);
                let real = g.slice_rows(out, 0, n);
                let virt = g.slice_rows(out, n, j);
                Ok((real, Some(virt)))
            }
            _ => Ok((self.ffn(g, layer, attended), None)),
        }
    }

    /// Class logits over `visible` (+ no-object) for the given queries.
    pub fn class_head(&self, g: &mut Graph, queries: Var, visible: &[ClassId]) -> Var {
        let qn = self.norm(g, "head.norm", queries);
        let w = g.param(&self.params, "head.class.w");
        let b = g.param(&self.params, "head.class.b");
        let logits = g.linear(qn, w, b);
        let mut cols: Vec<usize> = visible.iter().map(|&c| c as usize).collect();
        cols.push(self.num_classes);
        g.gather_cols(logits, &cols)
    }

    /// Per-query mask embeddings.
    pub fn mask_embedding(&self, g: &mut Graph, queries: Var) -> Var {
        let p = &self.params;
        let qn = self.norm(g, "head.norm", queries);
        let w1 = g.param(p, "head.mask.1.w");
        let b1 = g.param(p, "head.mask.1.b");
        let w2 = g.param(p, "head.mask.2.w");
        let b2 = g.param(p, "head.mask.2.b");
        let h = g.linear(qn, w1, b1);
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }

    /// Class logits and mask logits at the finest feature resolution.
    pub fn predict_heads(&self, g: &mut Graph, queries: Var, features: &FeatureNodes, visible: &[ClassId]) -> (Var, Var) {
        let class_logits = self.class_head(g, queries, visible);
        let emb = self.mask_embedding(g, queries);
        (class_logits, mask_logits(g, emb, features.mask_features))
    }

    /// Attention mask for `level` from fine-resolution mask logits: a pixel
    /// is attendable where the block-averaged mask probability is ≥ 0.5.
    /// Rows with no attendable pixel fall back to full attention.
    pub fn attention_mask(&self, fine_logits: &Tensor, level: usize) -> Vec<bool> {
        let sizes = self.level_sizes();
        let (fh, fw) = *sizes.last().expect("levels");
        let (h, w) = sizes[level];
        let fy = fh / h;
        let fx = fw / w;
        let n = fine_logits.rows();
        let mut mask = vec![false; n * h * w];
        for q in 0..n {
            let row = fine_logits.row(q);
            let out = &mut mask[q * h * w..(q + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            s += row[(y * fy + dy) * fw + x * fx + dx];
                        }
                    }
                    out[y * w + x] = s >= 0.0;
                }
            }
            if !out.iter().any(|&m| m) {
                out.iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    /// Queries before the first decoder layer: prototype-selected feature
    /// points when `qpa` is on, learned embeddings otherwise.
    pub fn initial_queries(&self, g: &mut Graph, features: &FeatureNodes, spec: &ForwardSpec) -> Result<(QuerySet, Option<SelectionIndex>)> {
        let n = self.cfg.num_queries;
        if spec.qpa && !self.proto_classes.is_empty() {
            let values = features.values(g);
            let sel = qpa::select(&values, &self.prototype_set(), n)?;
            let q = qpa::initialize_queries(g, features.omega, &sel, spec.stop_gradient)?;
            let d = self.hidden_dim();
            let mut pos = Tensor::zeros(n, d);
            for (k, loc) in sel.triples.iter().enumerate() {
                let size = features.sizes[loc.level];
                pos.row_mut(k).copy_from_slice(&location_encoding(loc.level, features.sizes.len(), loc.h, loc.w, size, d));
            }
            let pos = g.constant(pos);
            Ok((QuerySet { features: q, positional: Some(pos), origin: QueryOrigin::Selected }, Some(sel)))
        } else {
            let q = g.param(&self.params, "query.feat");
            let pos = g.param(&self.params, "query.pos");
            Ok((QuerySet { features: q, positional: Some(pos), origin: QueryOrigin::Learned }, None))
        }
    }

    pub fn forward(&self, g: &mut Graph, image: &Image, spec: &ForwardSpec) -> Result<ForwardOutput> {
        let features = self.encode(g, image)?;
        let (mut queries, selection) = self.initial_queries(g, &features, spec)?;
        let initial_queries = queries.features;
        let mut virt = match spec.virtual_queries {
            Some(t) if t.rows() > 0 => {
                if t.cols() != self.hidden_dim() {
                    return Err(Error::Shape("virtual query dim mismatch".into()));
                }
                Some(QuerySet { features: g.constant(t.clone()), positional: None, origin: QueryOrigin::Virtual })
            }
            _ => None,
        };
        let mut aux = Vec::new();
        let (mut cls, mut masks) = self.predict_heads(g, queries.features, &features, spec.visible);
        let levels = self.cfg.feature_levels;
        for layer in 0..self.cfg.decoder_layers {
            let level = layer % levels;
            let attn_mask = self.attention_mask(g.value(masks), level);
            let (out, vout) = self.decoder_layer(g, layer, &queries, &features, level, Some(&attn_mask), virt.as_ref())?;
            aux.push((cls, masks));
            queries = QuerySet { features: out, ..queries };
            if let (Some(v), Some(vo)) = (virt.as_mut(), vout) {
                v.features = vo;
            }
            let (c, m) = self.predict_heads(g, queries.features, &features, spec.visible);
            cls = c;
            masks = m;
        }
        let (fh, fw) = *features.sizes.last().expect("levels");
        let mask_logits = g.upsample_cols(masks, fh, fw);
        let virtual_logits = virt.map(|v| self.class_head(g, v.features, spec.visible));
        if !g.value(cls).is_finite() || !g.value(mask_logits).is_finite() {
            return Err(Error::NonFinite(format!("predictions for image {}", image.id)));
        }
        Ok(ForwardOutput {
            features,
            selection,
            initial_queries,
            final_queries: queries.features,
            class_logits: cls,
            mask_logits,
            virtual_logits,
            aux,
        })
    }

    /// Forward pass without gradient bookkeeping, returning plain values.
    pub fn predict(&self, image: &Image, spec: &ForwardSpec) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, spec)?;
        Ok(Prediction {
            class_logits: g.value(out.class_logits).clone(),
            mask_logits: g.value(out.mask_logits).clone(),
            final_queries: g.value(out.final_queries).clone(),
            features: out.features.values(&g),
            selection: out.selection,
        })
    }
}

/// `emb · pixelᵀ`: one mask logit per (query, pixel).
pub fn mask_logits(g: &mut Graph, query_embedding: Var, pixel_embedding: Var) -> Var {
    g.matmul_t(query_embedding, pixel_embedding)
}

/// Plain-value prediction for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
    pub final_queries: Tensor,
    pub features: MultiScaleFeatureMap,
    pub selection: Option<SelectionIndex>,
}
