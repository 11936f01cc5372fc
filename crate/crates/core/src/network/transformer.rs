//! Transformer-encoder temporal head.
//!
//! features + learned positional table -> encoder blocks (multi-head
//! self-attention, residual, layer norm, position-wise feed-forward,
//! residual, layer norm) -> global max pooling over time -> dropout ->
//! dense -> two-way logits.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    affine, dropout_mask, layer_norm, layer_norm_backward, softmax_rows, softmax_rows_backward,
    LayerNormCache,
};
use super::params::{glorot_uniform, normal, ones, zeros, ParamSet};
use super::{Mode, NetworkError};
use crate::clip::SEQUENCE_LEN;

pub const POS_EMBEDDING_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerHeadConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub num_layers: usize,
    pub attn_dropout: f64,
    pub head_dropout: f64,
    pub max_seq_len: usize,
}

impl TransformerHeadConfig {
    /// Default head for backbone features of width `embed_dim`: 16 heads,
    /// feed-forward width 8, one encoder block, dropout 0.5 before the
    /// classifier.
    pub fn new(embed_dim: usize) -> Result<Self, NetworkError> {
        let cfg = Self {
            embed_dim,
            num_heads: 16,
            ff_dim: 8,
            num_layers: 1,
            attn_dropout: 0.0,
            head_dropout: 0.5,
            max_seq_len: SEQUENCE_LEN,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return bad("embed_dim, num_heads and ff_dim must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.max_seq_len == 0 {
            return bad("num_layers and max_seq_len must be positive".into());
        }
        for rate in [self.attn_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("dropout rate {rate} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

fn layer_name(layer: usize, name: &str) -> String {
    format!("encoder.{layer}.{name}")
}

pub fn init_params(cfg: &TransformerHeadConfig, rng: &mut impl Rng) -> ParamSet {
    let d = cfg.embed_dim;
    let mut p = ParamSet::new();
    p.insert(
        "pos_embedding",
        normal(rng, &[cfg.max_seq_len, d], POS_EMBEDDING_STD),
    );
    for l in 0..cfg.num_layers {
        for proj in ["query", "key", "value", "output"] {
            p.insert(
                layer_name(l, &format!("attention.{proj}.kernel")),
                glorot_uniform(rng, d, d),
            );
            p.insert(
                layer_name(l, &format!("attention.{proj}.bias")),
                zeros(&[d]),
            );
        }
        p.insert(layer_name(l, "norm1.gamma"), ones(&[d]));
        p.insert(layer_name(l, "norm1.beta"), zeros(&[d]));
        p.insert(
            layer_name(l, "ffn.inner.kernel"),
            glorot_uniform(rng, d, cfg.ff_dim),
        );
        p.insert(layer_name(l, "ffn.inner.bias"), zeros(&[cfg.ff_dim]));
        p.insert(
            layer_name(l, "ffn.outer.kernel"),
            glorot_uniform(rng, cfg.ff_dim, d),
        );
        p.insert(layer_name(l, "ffn.outer.bias"), zeros(&[d]));
        p.insert(layer_name(l, "norm2.gamma"), ones(&[d]));
        p.insert(layer_name(l, "norm2.beta"), zeros(&[d]));
    }
    p.insert("classifier.kernel", glorot_uniform(rng, d, 2));
    p.insert("classifier.bias", zeros(&[2]));
    p
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per head: softmax output and optional dropout mask.
    attn: Vec<(Array2<f64>, Option<Array2<f64>>)>,
    concat: Array2<f64>,
    y1: Array2<f64>,
    ln1: LayerNormCache,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    ln2: LayerNormCache,
}

pub struct TransformerCache {
    layers: Vec<LayerCache>,
    seq_len: usize,
    argmax: Vec<usize>,
    mask: Array1<f64>,
    dropped: Array1<f64>,
}

pub fn forward(
    cfg: &TransformerHeadConfig,
    params: &ParamSet,
    x: ArrayView2<f64>,
    mode: Mode,
) -> Result<([f64; 2], TransformerCache), NetworkError> {
    let (t, d) = x.dim();
    if t > cfg.max_seq_len {
        return Err(NetworkError::SequenceTooLong {
            len: t,
            max: cfg.max_seq_len,
        });
    }
    if t == 0 || d != cfg.embed_dim {
        return Err(NetworkError::Shape(format!(
            "expected (1..={}, {}) features, got ({t}, {d})",
            cfg.max_seq_len, cfg.embed_dim
        )));
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut h = &x + &params.mat("pos_embedding").slice(s![..t, ..]);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let n = |name: &str| layer_name(l, name);
        let input = h;
        let proj = |which: &str| {
            affine(
                input.view(),
                params.mat(&n(&format!("attention.{which}.kernel"))),
                params.vector(&n(&format!("attention.{which}.bias"))),
            )
        };
        let (q, k, v) = (proj("query"), proj("key"), proj("value"));
        let mut concat = Array2::zeros((t, d));
        let mut attn = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let a = softmax_rows(&scores);
            let mask = match mode.sub_seed((l * cfg.num_heads + head) as u64 + 1) {
                Some(seed) if cfg.attn_dropout > 0.0 => {
                    Some(dropout_mask((t, t), cfg.attn_dropout, seed))
                }
                _ => None,
            };
            let used = match &mask {
                Some(m) => &a * m,
                None => a.clone(),
            };
            concat.slice_mut(cols).assign(&used.dot(&v.slice(cols)));
            attn.push((a, mask));
        }
        let att_out = affine(
            concat.view(),
            params.mat(&n("attention.output.kernel")),
            params.vector(&n("attention.output.bias")),
        );
        let r1 = &input + &att_out;
        let (y1, ln1) = layer_norm(
            &r1,
            params.vector(&n("norm1.gamma")),
            params.vector(&n("norm1.beta")),
        );
        let pre = affine(
            y1.view(),
            params.mat(&n("ffn.inner.kernel")),
            params.vector(&n("ffn.inner.bias")),
        );
        let hidden = pre.mapv(|v| v.max(0.0));
        let ff = affine(
            hidden.view(),
            params.mat(&n("ffn.outer.kernel")),
            params.vector(&n("ffn.outer.bias")),
        );
        let r2 = &y1 + &ff;
        let (out, ln2) = layer_norm(
            &r2,
            params.vector(&n("norm2.gamma")),
            params.vector(&n("norm2.beta")),
        );
        layers.push(LayerCache {
            input,
            q,
            k,
            v,
            attn,
            concat,
            y1,
            ln1,
            pre,
            hidden,
            ln2,
        });
        h = out;
    }

    let mut argmax = vec![0usize; d];
    let mut pooled = Array1::zeros(d);
    for j in 0..d {
        let mut best = 0;
        for row in 1..t {
            if h[[row, j]] > h[[best, j]] {
                best = row;
            }
        }
        argmax[j] = best;
        pooled[j] = h[[best, j]];
    }
    let mask = match mode.sub_seed(0) {
        Some(seed) if cfg.head_dropout > 0.0 => dropout_mask((1, d), cfg.head_dropout, seed)
            .row(0)
            .to_owned(),
        _ => Array1::ones(d),
    };
    let dropped = &pooled * &mask;
    let logits = dropped.dot(&params.mat("classifier.kernel")) + params.vector("classifier.bias");
    Ok((
        [logits[0], logits[1]],
        TransformerCache {
            layers,
            seq_len: t,
            argmax,
            mask,
            dropped,
        },
    ))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view()
        .insert_axis(Axis(1))
        .dot(&b.view().insert_axis(Axis(0)))
}

/// Accumulates parameter gradients for one sample into `grads` and returns
/// the gradient with respect to the input features.
pub fn backward(
    cfg: &TransformerHeadConfig,
    params: &ParamSet,
    cache: &TransformerCache,
    dlogits: [f64; 2],
    grads: &mut ParamSet,
) -> Array2<f64> {
    let d = cfg.embed_dim;
    let t = cache.seq_len;
    let dh_size = cfg.head_dim();
    let scale = 1.0 / (dh_size as f64).sqrt();

    let dlog = Array1::from(dlogits.to_vec());
    {
        let mut gk = grads.mat_mut("classifier.kernel");
        gk += &outer(&cache.dropped, &dlog);
    }
    {
        let mut gb = grads.vector_mut("classifier.bias");
        gb += &dlog;
    }
    let ddropped = params.mat("classifier.kernel").dot(&dlog);
    let dpooled = ddropped * &cache.mask;
    let mut dh = Array2::<f64>::zeros((t, d));
    for (j, &row) in cache.argmax.iter().enumerate() {
        dh[[row, j]] = dpooled[j];
    }

    for l in (0..cfg.num_layers).rev() {
        let n = |name: &str| layer_name(l, name);
        let c = &cache.layers[l];

        let (dr2, dgamma, dbeta) =
            layer_norm_backward(&dh, &c.ln2, params.vector(&n("norm2.gamma")));
        grads.accumulate(&n("norm2.gamma"), &dgamma);
        grads.accumulate(&n("norm2.beta"), &dbeta);
        let mut dy1 = dr2.clone();
        let dff = dr2;
        accumulate_dense(grads, &n("ffn.outer"), &c.hidden, &dff);
        let dhidden = dff.dot(&params.mat(&n("ffn.outer.kernel")).t());
        let dpre = &dhidden * &c.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        accumulate_dense(grads, &n("ffn.inner"), &c.y1, &dpre);
        dy1 += &dpre.dot(&params.mat(&n("ffn.inner.kernel")).t());

        let (dr1, dgamma, dbeta) =
            layer_norm_backward(&dy1, &c.ln1, params.vector(&n("norm1.gamma")));
        grads.accumulate(&n("norm1.gamma"), &dgamma);
        grads.accumulate(&n("norm1.beta"), &dbeta);
        let mut dinput = dr1.clone();
        let datt = dr1;
        accumulate_dense(grads, &n("attention.output"), &c.concat, &datt);
        let dconcat = datt.dot(&params.mat(&n("attention.output.kernel")).t());

        let mut dq = Array2::<f64>::zeros((t, d));
        let mut dk = Array2::<f64>::zeros((t, d));
        let mut dv = Array2::<f64>::zeros((t, d));
        for (head, (a, mask)) in c.attn.iter().enumerate() {
            let cols = s![.., head * dh_size..(head + 1) * dh_size];
            let d_o = dconcat.slice(cols);
            let used = match mask {
                Some(m) => a * m,
                None => a.clone(),
            };
            let mut da = d_o.dot(&c.v.slice(cols).t());
            if let Some(m) = mask {
                da *= m;
            }
            dv.slice_mut(cols).assign(&used.t().dot(&d_o));
            let ds = softmax_rows_backward(a, &da) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        for (which, g) in [("query", &dq), ("key", &dk), ("value", &dv)] {
            let name = n(&format!("attention.{which}"));
            accumulate_dense(grads, &name, &c.input, g);
            dinput += &g.dot(&params.mat(&format!("{name}.kernel")).t());
        }
        dh = dinput;
    }
    {
        let mut gp = grads.mat_mut("pos_embedding");
        let mut rows = gp.slice_mut(s![..t, ..]);
        rows += &dh;
    }
    dh
}

/// Gradient of `y = x W + b` given `dy`.
pub(crate) fn accumulate_dense(
    grads: &mut ParamSet,
    prefix: &str,
    x: &Array2<f64>,
    dy: &Array2<f64>,
) {
    {
        let mut gw = grads.mat_mut(&format!("{prefix}.kernel"));
        gw += &x.t().dot(dy);
    }
    let mut gb = grads.vector_mut(&format!("{prefix}.bias"));
    gb += &dy.sum_axis(Axis(0));
}
