use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shapes of the network, fixed for the lifetime of a set of parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub slots: usize,
    pub num_factors: usize,
    pub item_cardinalities: Vec<usize>,
    pub user_cardinalities: Vec<usize>,
    pub context_cardinalities: Vec<usize>,
    pub num_behaviors: usize,
    pub embedding_dim: usize,
    /// Hidden sizes shared by every MLP. The last entry is the item
    /// representation width.
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn item_width(&self) -> usize {
        self.item_cardinalities.len() * self.embedding_dim
    }

    pub fn user_width(&self) -> usize {
        self.user_cardinalities.len() * self.embedding_dim
    }

    pub fn context_width(&self) -> usize {
        self.context_cardinalities.len() * self.embedding_dim
    }

    /// Width of the attention projections.
    pub fn attention_width(&self) -> usize {
        self.item_width()
    }

    pub fn rep_width(&self) -> usize {
        *self.hidden.last().expect("hidden sizes are non-empty")
    }

    pub fn list_width(&self) -> usize {
        self.slots * self.rep_width()
    }

    pub fn item_mlp_input(&self) -> usize {
        self.attention_width() + self.item_width() + self.user_width() + self.context_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden sizes must be non-empty and positive".into(),
            ));
        }
        if self.embedding_dim == 0 || self.slots == 0 || self.num_factors == 0 {
            return Err(Error::Config(
                "embedding_dim, slots and num_factors must be >= 1".into(),
            ));
        }
        if self.item_cardinalities.is_empty() {
            return Err(Error::Config("items need at least one sparse field".into()));
        }
        Ok(())
    }
}

/// Embedding table for one feature family. Each field owns a contiguous block
/// of rows starting at its offset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table: Array2<f64>,
    pub offsets: Vec<usize>,
    pub cardinalities: Vec<usize>,
}

impl EmbeddingTable {
    fn new(cardinalities: &[usize], dim: usize, rng: &mut impl Rng) -> Self {
        let mut offsets = Vec::with_capacity(cardinalities.len());
        let mut rows = 0;
        for &c in cardinalities {
            offsets.push(rows);
            rows += c;
        }
        let table = Array2::from_shape_fn((rows, dim), |_| {
            0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        Self {
            table,
            offsets,
            cardinalities: cardinalities.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    /// Row index of `id` in field `field`.
    pub fn row(&self, field: usize, id: u32) -> Result<usize> {
        let card = self.cardinalities[field];
        if id as usize >= card {
            return Err(Error::IdOutOfRange {
                id: id as usize,
                rows: card,
            });
        }
        Ok(self.offsets[field] + id as usize)
    }

    /// Looks up one row per field and flattens them into `out`.
    pub fn lookup_into(&self, ids: &[u32], out: &mut [f64]) -> Result<()> {
        if ids.len() != self.cardinalities.len() {
            return Err(Error::Config(format!(
                "expected {} feature ids, got {}",
                self.cardinalities.len(),
                ids.len()
            )));
        }
        let d = self.dim();
        for (f, &id) in ids.iter().enumerate() {
            let row = self.row(f, id)?;
            out[f * d..(f + 1) * d]
                .copy_from_slice(self.table.row(row).as_slice().expect("standard layout"));
        }
        Ok(())
    }

    /// Adds `grad` (flattened per field) into the rows selected by `ids`.
    pub(crate) fn scatter_add(&mut self, ids: &[u32], grad: &[f64]) {
        let d = self.dim();
        for (f, &id) in ids.iter().enumerate() {
            let row = self.offsets[f] + id as usize;
            let mut dst = self.table.row_mut(row);
            for (x, g) in dst.iter_mut().zip(&grad[f * d..(f + 1) * d]) {
                *x += g;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub w: Array2<f64>,
    /// `1 x out`
    pub b: Array2<f64>,
}

impl Linear {
    fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / input as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((input, output), |_| rng.random_range(-limit..limit)),
            b: Array2::zeros((1, output)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Whether the last layer is followed by a ReLU.
    pub final_relu: bool,
}

/// Activations kept from a forward pass for the backward pass.
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn relu_in_place(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

impl Mlp {
    pub fn new(input: usize, sizes: &[usize], final_relu: bool, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut prev = input;
        for &s in sizes {
            layers.push(Linear::new(prev, s, rng));
            prev = s;
        }
        Self { layers, final_relu }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.ncols())
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_relu
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_from(0, x.clone())
    }

    /// Runs layers `start..` on `x`, where `x` is the pre-activation output of
    /// layer `start - 1` (or the raw input when `start == 0`).
    pub(crate) fn forward_from(&self, start: usize, mut x: Array2<f64>) -> Array2<f64> {
        if start > 0 && self.activated(start - 1) {
            relu_in_place(&mut x);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            x = x.dot(&layer.w) + &layer.b;
            if self.activated(i) {
                relu_in_place(&mut x);
            }
        }
        x
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w) + &layer.b;
            inputs.push(a);
            a = z.clone();
            if self.activated(i) {
                relu_in_place(&mut a);
            }
            pre.push(z);
        }
        (a, MlpCache { inputs, pre })
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &MlpCache, dout: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            if self.activated(i) {
                ndarray::Zip::from(&mut d)
                    .and(&cache.pre[i])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let g = &mut grad.layers[i];
            g.w += &cache.inputs[i].t().dot(&d);
            g.b += &d.sum_axis(Axis(0)).insert_axis(Axis(0));
            d = d.dot(&self.layers[i].w.t());
        }
        d
    }
}

/// All trainable tensors of the agent and its auxiliary heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub item_embedding: EmbeddingTable,
    pub user_embedding: EmbeddingTable,
    pub context_embedding: EmbeddingTable,
    pub att_query: Array2<f64>,
    pub att_key: Array2<f64>,
    pub att_value: Array2<f64>,
    /// MLP1: per-item representation.
    pub item_mlp: Mlp,
    /// MLP2: Q head.
    pub q_head: Mlp,
    /// MLP3: reconstruction decoder, `K * M` logits.
    pub rat_head: Mlp,
    /// MLP4: per-slot click logits.
    pub ctr_head: Mlp,
    /// MLP5: pull-down logit.
    pub pull_head: Mlp,
}

impl ModelParams {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embedding_dim;
        let item_embedding = EmbeddingTable::new(&config.item_cardinalities, d, rng);
        let user_embedding = EmbeddingTable::new(&config.user_cardinalities, d, rng);
        let context_embedding = EmbeddingTable::new(&config.context_cardinalities, d, rng);
        let (iw, aw) = (config.item_width(), config.attention_width());
        let limit = (3.0 / iw as f64).sqrt();
        let mut proj = || Array2::from_shape_fn((iw, aw), |_| rng.random_range(-limit..limit));
        let att_query = proj();
        let att_key = proj();
        let att_value = proj();
        let item_mlp = Mlp::new(config.item_mlp_input(), &config.hidden, false, rng);
        let lw = config.list_width();
        let head_sizes = |out: usize| {
            let mut sizes = config.hidden.clone();
            sizes.push(out);
            sizes
        };
        let q_head = Mlp::new(lw, &head_sizes(1), false, rng);
        let rat_head = Mlp::new(
            lw,
            &head_sizes(config.slots * config.num_factors),
            false,
            rng,
        );
        let ctr_head = Mlp::new(lw, &head_sizes(config.slots), false, rng);
        let pull_head = Mlp::new(lw, &head_sizes(1), false, rng);
        Ok(Self {
            config,
            item_embedding,
            user_embedding,
            context_embedding,
            att_query,
            att_key,
            att_value,
            item_mlp,
            q_head,
            rat_head,
            ctr_head,
            pull_head,
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Tensor names in canonical order; matches [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "emb.item".to_string(),
            "emb.user".to_string(),
            "emb.context".to_string(),
            "att.query".to_string(),
            "att.key".to_string(),
            "att.value".to_string(),
        ];
        for (prefix, mlp) in self.mlps() {
            for i in 0..mlp.layers.len() {
                names.push(format!("{prefix}.{i}.w"));
                names.push(format!("{prefix}.{i}.b"));
            }
        }
        names
    }

    fn mlps(&self) -> [(&'static str, &Mlp); 5] {
        [
            ("item_mlp", &self.item_mlp),
            ("q_head", &self.q_head),
            ("rat_head", &self.rat_head),
            ("ctr_head", &self.ctr_head),
            ("pull_head", &self.pull_head),
        ]
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![
            &self.item_embedding.table,
            &self.user_embedding.table,
            &self.context_embedding.table,
            &self.att_query,
            &self.att_key,
            &self.att_value,
        ];
        for (_, mlp) in self.mlps() {
            for l in &mlp.layers {
                out.push(&l.w);
                out.push(&l.b);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![
            &mut self.item_embedding.table,
            &mut self.user_embedding.table,
            &mut self.context_embedding.table,
            &mut self.att_query,
            &mut self.att_key,
            &mut self.att_value,
        ];
        for mlp in [
            &mut self.item_mlp,
            &mut self.q_head,
            &mut self.rat_head,
            &mut self.ctr_head,
            &mut self.pull_head,
        ] {
            for l in &mut mlp.layers {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Flat copy of every parameter in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for t in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *it.next().expect("flat vector too short");
            }
        }
    }
}
