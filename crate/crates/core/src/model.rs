//! The scoring network
//!
//! ```text
//! yhat(s, o) = sigmoid(W · relu(H · [e_s ; e_o] + b1) + b2)
//! ```
//!
//! where `[e_s ; e_o]` concatenates the subject and object embedding rows
//! (subject first). Gradients are derived by hand; there is no autodiff.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `|E| x d` entity embeddings.
    pub entity: Array2<f64>,
    /// `k x 2d` first affine weight.
    pub hidden_weight: Array2<f64>,
    /// `k`
    pub hidden_bias: Array1<f64>,
    /// `|R| x k` second affine weight.
    pub output_weight: Array2<f64>,
    /// `|R|`
    pub output_bias: Array1<f64>,
}

impl ModelParams {
    /// Fan-scaled uniform weights, uniform `±sqrt(6/d)` embeddings, zero biases.
    pub fn init(
        num_entities: usize,
        num_relations: usize,
        d: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_entities == 0 || num_relations == 0 || d == 0 || k == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive (|E|={num_entities}, |R|={num_relations}, d={d}, k={k})"
            )));
        }
        let mut rng = seed::rng(seed, Stream::Init);
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        };
        let entity = uniform(num_entities, d, (6.0 / d as f64).sqrt());
        let hidden_weight = uniform(k, 2 * d, (6.0 / (2 * d + k) as f64).sqrt());
        let output_weight = uniform(num_relations, k, (6.0 / (k + num_relations) as f64).sqrt());
        Ok(ModelParams {
            entity,
            hidden_weight,
            hidden_bias: Array1::zeros(k),
            output_weight,
            output_bias: Array1::zeros(num_relations),
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity.nrows()
    }

    pub fn num_relations(&self) -> usize {
        self.output_weight.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.entity.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_weight.nrows()
    }

    /// Checks that all five tensors agree on `d`, `k` and `|R|`.
    pub fn check_shapes(&self) -> Result<()> {
        let d = self.embedding_dim();
        let k = self.hidden_width();
        let r = self.num_relations();
        let ok = self.hidden_weight.ncols() == 2 * d
            && self.hidden_bias.len() == k
            && self.output_weight.ncols() == k
            && self.output_bias.len() == r;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "inconsistent parameter shapes: E {:?}, H {:?}, b1 {}, W {:?}, b2 {}",
                self.entity.dim(),
                self.hidden_weight.dim(),
                self.hidden_bias.len(),
                self.output_weight.dim(),
                self.output_bias.len()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entity.iter().all(|v| v.is_finite())
            && self.hidden_weight.iter().all(|v| v.is_finite())
            && self.hidden_bias.iter().all(|v| v.is_finite())
            && self.output_weight.iter().all(|v| v.is_finite())
            && self.output_bias.iter().all(|v| v.is_finite())
    }

    fn check_entity(&self, index: usize) -> Result<()> {
        if index < self.num_entities() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                what: "entity",
                index,
                size: self.num_entities(),
            })
        }
    }
}

/// `[E[s] ; E[o]]`, subject first.
pub fn concat_pair(entity: &Array2<f64>, s: usize, o: usize) -> Result<Array1<f64>> {
    let n = entity.nrows();
    for index in [s, o] {
        if index >= n {
            return Err(Error::IndexOutOfRange {
                what: "entity",
                index,
                size: n,
            });
        }
    }
    let d = entity.ncols();
    let mut x = Array1::zeros(2 * d);
    x.slice_mut(s![..d]).assign(&entity.row(s));
    x.slice_mut(s![d..]).assign(&entity.row(o));
    Ok(x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

pub enum Mode<'a> {
    /// Inverted dropout on the hidden activation.
    Train {
        dropout_rate: f64,
        rng: &'a mut dyn RngCore,
    },
    Eval,
}

/// Intermediates of one forward pass, kept for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub s: usize,
    pub o: usize,
    pub x: Array1<f64>,
    pub z1: Array1<f64>,
    /// Post-ReLU, post-dropout hidden activation.
    pub a1: Array1<f64>,
    /// Retention mask in {0, 1}; all ones in eval mode.
    pub mask: Array1<f64>,
    /// Inverted-dropout scale applied to retained units: `1 / (1 - rate)`.
    pub scale: f64,
    pub yhat: Array1<f64>,
}

fn check_dropout(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
    }
}

/// Draws a `{0,1}` retention mask. Rate zero consumes no randomness.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut dyn RngCore) -> Array1<f64> {
    if rate == 0.0 {
        return Array1::ones(len);
    }
    Array1::from_shape_simple_fn(len, || if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
}

pub fn forward(params: &ModelParams, s: usize, o: usize, mode: Mode<'_>) -> Result<ForwardCache> {
    let k = params.hidden_width();
    let (mask, scale) = match mode {
        Mode::Eval => (Array1::ones(k), 1.0),
        Mode::Train { dropout_rate, rng } => {
            check_dropout(dropout_rate)?;
            (dropout_mask(k, dropout_rate, rng), 1.0 / (1.0 - dropout_rate))
        }
    };
    forward_masked(params, s, o, mask, scale)
}

/// Forward pass with an explicit dropout mask.
pub fn forward_masked(
    params: &ModelParams,
    s: usize,
    o: usize,
    mask: Array1<f64>,
    scale: f64,
) -> Result<ForwardCache> {
    if mask.len() != params.hidden_width() {
        return Err(Error::Shape(format!(
            "dropout mask has length {}, hidden width is {}",
            mask.len(),
            params.hidden_width()
        )));
    }
    let x = concat_pair(&params.entity, s, o)?;
    let z1 = params.hidden_weight.dot(&x) + &params.hidden_bias;
    if !z1.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("hidden layer pre-activation".into()));
    }
    let a1 = Zip::from(&z1)
        .and(&mask)
        .map_collect(|&z, &m| relu(z) * m * scale);
    let z2 = params.output_weight.dot(&a1) + &params.output_bias;
    if !z2.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("output layer pre-activation".into()));
    }
    let yhat = z2.mapv(sigmoid);
    Ok(ForwardCache {
        s,
        o,
        x,
        z1,
        a1,
        mask,
        scale,
        yhat,
    })
}

/// Relation probabilities for `(s, o)` in eval mode.
pub fn predict_scores(params: &ModelParams, s: usize, o: usize) -> Result<Array1<f64>> {
    Ok(forward(params, s, o, Mode::Eval)?.yhat)
}

/// Summed binary cross-entropy over the relation vector.
pub fn bce_loss(yhat: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if yhat.len() != y.len() {
        return Err(Error::Shape(format!(
            "prediction length {} vs target length {}",
            yhat.len(),
            y.len()
        )));
    }
    Ok(yhat
        .iter()
        .zip(y.iter())
        .map(|(&p, &t)| bce_term(p, t))
        .sum())
}

#[inline]
fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Gradients with the same shapes as [`ModelParams`], except that only
/// embedding rows touched by the batch are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entity_rows: BTreeMap<usize, Array1<f64>>,
    pub hidden_weight: Array2<f64>,
    pub hidden_bias: Array1<f64>,
    pub output_weight: Array2<f64>,
    pub output_bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            entity_rows: BTreeMap::new(),
            hidden_weight: Array2::zeros(params.hidden_weight.raw_dim()),
            hidden_bias: Array1::zeros(params.hidden_bias.raw_dim()),
            output_weight: Array2::zeros(params.output_weight.raw_dim()),
            output_bias: Array1::zeros(params.output_bias.raw_dim()),
        }
    }

    fn add_entity_row(&mut self, row: usize, grad: ArrayView1<'_, f64>) {
        match self.entity_rows.get_mut(&row) {
            Some(acc) => *acc += &grad,
            None => {
                self.entity_rows.insert(row, grad.to_owned());
            }
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (&row, g) in &other.entity_rows {
            self.add_entity_row(row, g.view());
        }
        self.hidden_weight += &other.hidden_weight;
        self.hidden_bias += &other.hidden_bias;
        self.output_weight += &other.output_weight;
        self.output_bias += &other.output_bias;
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entity_rows.values_mut() {
            *g *= factor;
        }
        self.hidden_weight *= factor;
        self.hidden_bias *= factor;
        self.output_weight *= factor;
        self.output_bias *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.entity_rows
            .values()
            .all(|g| g.iter().all(|v| v.is_finite()))
            && self.hidden_weight.iter().all(|v| v.is_finite())
            && self.hidden_bias.iter().all(|v| v.is_finite())
            && self.output_weight.iter().all(|v| v.is_finite())
            && self.output_bias.iter().all(|v| v.is_finite())
    }
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

/// Loss and exact gradients of the summed BCE for one example.
///
/// The output error signal is `yhat - y`; the probability clamp inside the loss
/// is treated as identity, which matches the loss everywhere except in the
/// saturated band `yhat < 1e-7` or `yhat > 1 - 1e-7`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    y: ArrayView1<'_, f64>,
) -> Result<(f64, Gradients)> {
    let d = params.embedding_dim();
    let k = params.hidden_width();
    let r = params.num_relations();
    if cache.x.len() != 2 * d
        || cache.z1.len() != k
        || cache.a1.len() != k
        || cache.mask.len() != k
        || cache.yhat.len() != r
        || y.len() != r
    {
        return Err(Error::Shape(
            "forward cache or target does not match the current parameters".into(),
        ));
    }
    params.check_entity(cache.s)?;
    params.check_entity(cache.o)?;

    let loss = bce_loss(cache.yhat.view(), y)?;
    let delta_out = &cache.yhat - &y;

    let mut grads = Gradients::zeros_like(params);
    grads.output_weight = outer(delta_out.view(), cache.a1.view());
    grads.output_bias = delta_out.clone();

    let delta_act = params.output_weight.t().dot(&delta_out);
    let delta_hidden = Zip::from(&delta_act)
        .and(&cache.z1)
        .and(&cache.mask)
        .map_collect(|&g, &z, &m| if z > 0.0 { g * m * cache.scale } else { 0.0 });
    grads.hidden_weight = outer(delta_hidden.view(), cache.x.view());
    grads.hidden_bias = delta_hidden.clone();

    let delta_x = params.hidden_weight.t().dot(&delta_hidden);
    grads.add_entity_row(cache.s, delta_x.slice(s![..d]));
    grads.add_entity_row(cache.o, delta_x.slice(s![d..]));
    Ok((loss, grads))
}

/// `coefficient * (|H|^2 + |W|^2 + sum of |E[i]|^2 over the given rows)` and
/// its gradient. Biases are not penalized; repeated rows count once.
pub fn l2_penalty(params: &ModelParams, coefficient: f64, rows: &[usize]) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(params);
    if coefficient == 0.0 {
        return (0.0, grads);
    }
    let sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
    let mut total = sq(&params.hidden_weight) + sq(&params.output_weight);
    grads.hidden_weight = &params.hidden_weight * (2.0 * coefficient);
    grads.output_weight = &params.output_weight * (2.0 * coefficient);
    for &row in rows {
        if grads.entity_rows.contains_key(&row) {
            continue;
        }
        let e = params.entity.row(row);
        total += e.dot(&e);
        grads.entity_rows.insert(row, &e * (2.0 * coefficient));
    }
    (coefficient * total, grads)
}

/// Forward intermediates for a batch of pairs, one row per pair.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub x: Array2<f64>,
    pub z1: Array2<f64>,
    pub a1: Array2<f64>,
    pub mask: Option<Array2<f64>>,
    pub scale: f64,
    pub yhat: Array2<f64>,
}

/// Batched forward pass. `mask`, when given, has one row per pair.
pub fn forward_batch(
    params: &ModelParams,
    pairs: &[(usize, usize)],
    mask: Option<Array2<f64>>,
    scale: f64,
) -> Result<BatchCache> {
    let d = params.embedding_dim();
    let mut x = Array2::zeros((pairs.len(), 2 * d));
    for (mut row, &(s, o)) in x.outer_iter_mut().zip(pairs) {
        params.check_entity(s)?;
        params.check_entity(o)?;
        row.slice_mut(s![..d]).assign(&params.entity.row(s));
        row.slice_mut(s![d..]).assign(&params.entity.row(o));
    }
    if let Some(m) = &mask {
        if m.dim() != (pairs.len(), params.hidden_width()) {
            return Err(Error::Shape(format!("dropout mask shape {:?}", m.dim())));
        }
    }
    let z1 = x.dot(&params.hidden_weight.t()) + &params.hidden_bias;
    if !z1.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("hidden layer pre-activation".into()));
    }
    let a1 = match &mask {
        Some(m) => Zip::from(&z1)
            .and(m)
            .map_collect(|&z, &keep| relu(z) * keep * scale),
        None => z1.mapv(|z| relu(z) * scale),
    };
    let z2 = a1.dot(&params.output_weight.t()) + &params.output_bias;
    if !z2.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("output layer pre-activation".into()));
    }
    let yhat = z2.mapv(sigmoid);
    Ok(BatchCache {
        x,
        z1,
        a1,
        mask,
        scale,
        yhat,
    })
}

/// Eval-mode probabilities for many pairs, `pairs.len() x |R|`.
pub fn predict_batch(params: &ModelParams, pairs: &[(usize, usize)]) -> Result<Array2<f64>> {
    Ok(forward_batch(params, pairs, None, 1.0)?.yhat)
}

/// Summed per-example loss and gradients of `weight * sum(loss_b)` for a batch.
pub fn backward_batch(
    params: &ModelParams,
    pairs: &[(usize, usize)],
    cache: &BatchCache,
    targets: ArrayView2<'_, f64>,
    weight: f64,
) -> Result<(f64, Gradients)> {
    let d = params.embedding_dim();
    if targets.dim() != cache.yhat.dim() || cache.yhat.nrows() != pairs.len() {
        return Err(Error::Shape(format!(
            "targets {:?} vs predictions {:?} for {} pairs",
            targets.dim(),
            cache.yhat.dim(),
            pairs.len()
        )));
    }
    let loss: f64 = Zip::from(&cache.yhat)
        .and(&targets)
        .fold(0.0, |acc, &p, &t| acc + bce_term(p, t));

    let delta_out = (&cache.yhat - &targets) * weight;
    let mut grads = Gradients::zeros_like(params);
    grads.output_weight = delta_out.t().dot(&cache.a1);
    grads.output_bias = delta_out.sum_axis(Axis(0));

    let delta_act = delta_out.dot(&params.output_weight);
    let scale = cache.scale;
    let delta_hidden = match &cache.mask {
        Some(m) => Zip::from(&delta_act)
            .and(&cache.z1)
            .and(m)
            .map_collect(|&g, &z, &keep| if z > 0.0 { g * keep * scale } else { 0.0 }),
        None => Zip::from(&delta_act)
            .and(&cache.z1)
            .map_collect(|&g, &z| if z > 0.0 { g * scale } else { 0.0 }),
    };
    grads.hidden_weight = delta_hidden.t().dot(&cache.x);
    grads.hidden_bias = delta_hidden.sum_axis(Axis(0));

    let delta_x = delta_hidden.dot(&params.hidden_weight);
    for (row, &(s, o)) in delta_x.outer_iter().zip(pairs) {
        grads.add_entity_row(s, row.slice(s![..d]));
        grads.add_entity_row(o, row.slice(s![d..]));
    }
    Ok((loss, grads))
}
