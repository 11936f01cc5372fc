//! Recurrent baseline heads (LSTM, GRU and their bidirectional variants).
//!
//! features -> recurrent layer (per-step outputs) -> dropout -> per-step
//! dense + ReLU -> global average pooling over time -> dropout -> dense ->
//! two-way logits.
//!
//! LSTM gates are packed `[input, forget, cell, output]`. GRU gates are packed
//! `[update, reset, candidate]` with the reset gate applied after the
//! recurrent matmul and separate input/recurrent biases.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{dropout_mask, sigmoid};
use super::params::{glorot_uniform, zeros, ParamSet};
use super::transformer::accumulate_dense;
use super::{Mode, NetworkError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentCell {
    Lstm,
    Gru,
    BiLstm,
    BiGru,
}

impl RecurrentCell {
    pub const ALL: [RecurrentCell; 4] = [Self::Lstm, Self::Gru, Self::BiLstm, Self::BiGru];

    pub fn is_bidirectional(self) -> bool {
        matches!(self, Self::BiLstm | Self::BiGru)
    }

    pub fn is_gru(self) -> bool {
        matches!(self, Self::Gru | Self::BiGru)
    }

    fn gates(self) -> usize {
        if self.is_gru() {
            3
        } else {
            4
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lstm => "lstm",
            Self::Gru => "gru",
            Self::BiLstm => "bilstm",
            Self::BiGru => "bigru",
        }
    }
}

impl fmt::Display for RecurrentCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecurrentCell {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| NetworkError::Config(format!("unknown recurrent cell {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentHeadConfig {
    pub cell: RecurrentCell,
    pub input_dim: usize,
    pub units: usize,
    pub inner_dropout: f64,
    pub dense_units: usize,
    pub head_dropout: f64,
}

impl RecurrentHeadConfig {
    /// 64 units, dropout 0.4 after the recurrent layer, 64-unit dense layer,
    /// dropout 0.5 before the classifier.
    pub fn new(cell: RecurrentCell, input_dim: usize) -> Result<Self, NetworkError> {
        let cfg = Self {
            cell,
            input_dim,
            units: 64,
            inner_dropout: 0.4,
            dense_units: 64,
            head_dropout: 0.5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.units == 0 || self.dense_units == 0 {
            return Err(NetworkError::Config(
                "input_dim, units and dense_units must be positive".into(),
            ));
        }
        for rate in [self.inner_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(NetworkError::Config(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Width of the per-step recurrent output.
    pub fn output_width(&self) -> usize {
        if self.cell.is_bidirectional() {
            2 * self.units
        } else {
            self.units
        }
    }

    fn directions(&self) -> &'static [&'static str] {
        if self.cell.is_bidirectional() {
            &["forward", "backward"]
        } else {
            &["forward"]
        }
    }
}

pub fn init_params(cfg: &RecurrentHeadConfig, rng: &mut impl Rng) -> ParamSet {
    let g = cfg.cell.gates() * cfg.units;
    let mut p = ParamSet::new();
    for dir in cfg.directions() {
        p.insert(
            format!("rnn.{dir}.kernel"),
            glorot_uniform(rng, cfg.input_dim, g),
        );
        p.insert(
            format!("rnn.{dir}.recurrent_kernel"),
            glorot_uniform(rng, cfg.units, g),
        );
        p.insert(format!("rnn.{dir}.bias"), zeros(&[g]));
        if cfg.cell.is_gru() {
            p.insert(format!("rnn.{dir}.recurrent_bias"), zeros(&[g]));
        }
    }
    p.insert(
        "dense.kernel",
        glorot_uniform(rng, cfg.output_width(), cfg.dense_units),
    );
    p.insert("dense.bias", zeros(&[cfg.dense_units]));
    p.insert("classifier.kernel", glorot_uniform(rng, cfg.dense_units, 2));
    p.insert("classifier.bias", zeros(&[2]));
    p
}

enum StepCache {
    Lstm {
        h_prev: Array1<f64>,
        c_prev: Array1<f64>,
        gates: Array1<f64>,
        tanh_c: Array1<f64>,
    },
    Gru {
        h_prev: Array1<f64>,
        gates: Array1<f64>,
        recurrent_candidate: Array1<f64>,
    },
}

/// Runs one direction over `x` (rows in processing order).
fn run_direction(
    cell: RecurrentCell,
    units: usize,
    params: &ParamSet,
    prefix: &str,
    x: ArrayView2<f64>,
) -> (Array2<f64>, Vec<StepCache>) {
    let w = params.mat(&format!("{prefix}.kernel"));
    let u = params.mat(&format!("{prefix}.recurrent_kernel"));
    let b = params.vector(&format!("{prefix}.bias"));
    let t = x.nrows();
    let mut out = Array2::zeros((t, units));
    let mut steps = Vec::with_capacity(t);
    let mut h = Array1::<f64>::zeros(units);
    let mut c = Array1::<f64>::zeros(units);
    for step in 0..t {
        let xw = x.row(step).dot(&w) + b;
        if cell.is_gru() {
            let rb = params.vector(&format!("{prefix}.recurrent_bias"));
            let hu = h.dot(&u) + rb;
            let mut gates = Array1::zeros(3 * units);
            for j in 0..units {
                let z = sigmoid(xw[j] + hu[j]);
                let r = sigmoid(xw[units + j] + hu[units + j]);
                let n = (xw[2 * units + j] + r * hu[2 * units + j]).tanh();
                gates[j] = z;
                gates[units + j] = r;
                gates[2 * units + j] = n;
            }
            let h_prev = h.clone();
            for j in 0..units {
                let z = gates[j];
                h[j] = z * h_prev[j] + (1.0 - z) * gates[2 * units + j];
            }
            steps.push(StepCache::Gru {
                h_prev,
                gates,
                recurrent_candidate: hu.slice(s![2 * units..]).to_owned(),
            });
        } else {
            let zsum = xw + h.dot(&u);
            let mut gates = Array1::zeros(4 * units);
            for j in 0..units {
                gates[j] = sigmoid(zsum[j]);
                gates[units + j] = sigmoid(zsum[units + j]);
                gates[2 * units + j] = zsum[2 * units + j].tanh();
                gates[3 * units + j] = sigmoid(zsum[3 * units + j]);
            }
            let h_prev = h.clone();
            let c_prev = c.clone();
            for j in 0..units {
                c[j] = gates[units + j] * c_prev[j] + gates[j] * gates[2 * units + j];
            }
            let tanh_c = c.mapv(f64::tanh);
            for j in 0..units {
                h[j] = gates[3 * units + j] * tanh_c[j];
            }
            steps.push(StepCache::Lstm {
                h_prev,
                c_prev,
                gates,
                tanh_c,
            });
        }
        out.row_mut(step).assign(&h);
    }
    (out, steps)
}

/// Backpropagation through time for one direction. `dout` rows are in
/// processing order; returns the gradient for `x` in the same order.
#[allow(clippy::too_many_arguments)]
fn backward_direction(
    cell: RecurrentCell,
    units: usize,
    params: &ParamSet,
    prefix: &str,
    x: ArrayView2<f64>,
    steps: &[StepCache],
    dout: ArrayView2<f64>,
    grads: &mut ParamSet,
) -> Array2<f64> {
    let w = params.mat(&format!("{prefix}.kernel"));
    let u = params.mat(&format!("{prefix}.recurrent_kernel"));
    let t = x.nrows();
    let g = cell.gates() * units;
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dw = Array2::<f64>::zeros(w.raw_dim());
    let mut du = Array2::<f64>::zeros(u.raw_dim());
    let mut db = Array1::<f64>::zeros(g);
    let mut drb = Array1::<f64>::zeros(g);
    let mut dh_next = Array1::<f64>::zeros(units);
    let mut dc_next = Array1::<f64>::zeros(units);
    for step in (0..t).rev() {
        let dh = &dout.row(step) + &dh_next;
        let x_t = x.row(step);
        match &steps[step] {
            StepCache::Lstm {
                h_prev,
                c_prev,
                gates,
                tanh_c,
            } => {
                let mut dz = Array1::zeros(g);
                let mut dc_prev = Array1::zeros(units);
                for j in 0..units {
                    let (i, f, cc, o) = (
                        gates[j],
                        gates[units + j],
                        gates[2 * units + j],
                        gates[3 * units + j],
                    );
                    let dc = dc_next[j] + dh[j] * o * (1.0 - tanh_c[j] * tanh_c[j]);
                    dz[j] = dc * cc * i * (1.0 - i);
                    dz[units + j] = dc * c_prev[j] * f * (1.0 - f);
                    dz[2 * units + j] = dc * i * (1.0 - cc * cc);
                    dz[3 * units + j] = dh[j] * tanh_c[j] * o * (1.0 - o);
                    dc_prev[j] = dc * f;
                }
                add_outer(&mut dw, x_t, dz.view());
                add_outer(&mut du, h_prev.view(), dz.view());
                db += &dz;
                dx.row_mut(step).assign(&w.dot(&dz));
                dh_next = u.dot(&dz);
                dc_next = dc_prev;
            }
            StepCache::Gru {
                h_prev,
                gates,
                recurrent_candidate,
            } => {
                let mut dxz = Array1::zeros(g);
                let mut dhz = Array1::zeros(g);
                let mut dh_prev = Array1::zeros(units);
                for j in 0..units {
                    let (z, r, n) = (gates[j], gates[units + j], gates[2 * units + j]);
                    let dz = dh[j] * (h_prev[j] - n);
                    let dn = dh[j] * (1.0 - z);
                    dh_prev[j] = dh[j] * z;
                    let dan = dn * (1.0 - n * n);
                    let daz = dz * z * (1.0 - z);
                    let dar = dan * recurrent_candidate[j] * r * (1.0 - r);
                    dxz[j] = daz;
                    dxz[units + j] = dar;
                    dxz[2 * units + j] = dan;
                    dhz[j] = daz;
                    dhz[units + j] = dar;
                    dhz[2 * units + j] = dan * r;
                }
                add_outer(&mut dw, x_t, dxz.view());
                add_outer(&mut du, h_prev.view(), dhz.view());
                db += &dxz;
                drb += &dhz;
                dx.row_mut(step).assign(&w.dot(&dxz));
                dh_next = dh_prev + u.dot(&dhz);
            }
        }
    }
    grads.accumulate(&format!("{prefix}.kernel"), &dw);
    grads.accumulate(&format!("{prefix}.recurrent_kernel"), &du);
    grads.accumulate(&format!("{prefix}.bias"), &db);
    if cell.is_gru() {
        grads.accumulate(&format!("{prefix}.recurrent_bias"), &drb);
    }
    dx
}

fn add_outer(target: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    *target += &a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)));
}

fn reversed(x: ArrayView2<f64>) -> ArrayView2<f64> {
    x.slice_move(s![..;-1, ..])
}

pub struct RecurrentCache {
    input: Array2<f64>,
    directions: Vec<Vec<StepCache>>,
    inner_mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    pre: Array2<f64>,
    head_mask: Option<Array1<f64>>,
    head_input: Array1<f64>,
}

pub fn forward(
    cfg: &RecurrentHeadConfig,
    params: &ParamSet,
    x: ArrayView2<f64>,
    mode: Mode,
) -> Result<([f64; 2], RecurrentCache), NetworkError> {
    let (t, d) = x.dim();
    if t == 0 || d != cfg.input_dim {
        return Err(NetworkError::Shape(format!(
            "expected (T >= 1, {}) features, got ({t}, {d})",
            cfg.input_dim
        )));
    }
    let (per_step, directions) = recurrent_outputs(cfg, params, x);
    let inner_mask = match mode.sub_seed(1) {
        Some(seed) if cfg.inner_dropout > 0.0 => {
            Some(dropout_mask(per_step.dim(), cfg.inner_dropout, seed))
        }
        _ => None,
    };
    let dropped = match &inner_mask {
        Some(m) => &per_step * m,
        None => per_step,
    };
    let pre = dropped.dot(&params.mat("dense.kernel")) + params.vector("dense.bias");
    let pooled = pre
        .mapv(|v| v.max(0.0))
        .mean_axis(Axis(0))
        .expect("non-empty sequence");
    let head_mask = match mode.sub_seed(0) {
        Some(seed) if cfg.head_dropout > 0.0 => Some(
            dropout_mask((1, cfg.dense_units), cfg.head_dropout, seed)
                .row(0)
                .to_owned(),
        ),
        _ => None,
    };
    let head_input = match &head_mask {
        Some(m) => &pooled * m,
        None => pooled,
    };
    let logits =
        head_input.dot(&params.mat("classifier.kernel")) + params.vector("classifier.bias");
    Ok((
        [logits[0], logits[1]],
        RecurrentCache {
            input: x.to_owned(),
            directions,
            inner_mask,
            dropped,
            pre,
            head_mask,
            head_input,
        },
    ))
}

/// Per-step outputs of the recurrent layer, `T x output_width`, with the
/// backward direction realigned to time order.
fn recurrent_outputs(
    cfg: &RecurrentHeadConfig,
    params: &ParamSet,
    x: ArrayView2<f64>,
) -> (Array2<f64>, Vec<Vec<StepCache>>) {
    let (fwd, fwd_steps) = run_direction(cfg.cell, cfg.units, params, "rnn.forward", x);
    if !cfg.cell.is_bidirectional() {
        return (fwd, vec![fwd_steps]);
    }
    let (bwd, bwd_steps) = run_direction(cfg.cell, cfg.units, params, "rnn.backward", reversed(x));
    let mut out = Array2::zeros((x.nrows(), 2 * cfg.units));
    out.slice_mut(s![.., ..cfg.units]).assign(&fwd);
    out.slice_mut(s![.., cfg.units..])
        .assign(&reversed(bwd.view()));
    (out, vec![fwd_steps, bwd_steps])
}

/// Per-step recurrent outputs in eval mode.
pub fn sequence_outputs(
    cfg: &RecurrentHeadConfig,
    params: &ParamSet,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>, NetworkError> {
    if x.ncols() != cfg.input_dim {
        return Err(NetworkError::Shape(format!(
            "expected {} feature columns, got {}",
            cfg.input_dim,
            x.ncols()
        )));
    }
    Ok(recurrent_outputs(cfg, params, x).0)
}

pub fn backward(
    cfg: &RecurrentHeadConfig,
    params: &ParamSet,
    cache: &RecurrentCache,
    dlogits: [f64; 2],
    grads: &mut ParamSet,
) -> Array2<f64> {
    let t = cache.input.nrows();
    let dlog = Array1::from(dlogits.to_vec());
    grads.accumulate(
        "classifier.kernel",
        &cache
            .head_input
            .view()
            .insert_axis(Axis(1))
            .dot(&dlog.view().insert_axis(Axis(0))),
    );
    grads.accumulate("classifier.bias", &dlog);
    let mut dpooled = params.mat("classifier.kernel").dot(&dlog);
    if let Some(m) = &cache.head_mask {
        dpooled *= m;
    }
    let mut dpre = Array2::zeros(cache.pre.raw_dim());
    for (mut row, pre_row) in dpre.rows_mut().into_iter().zip(cache.pre.rows()) {
        for ((g, &p), &dp) in row.iter_mut().zip(pre_row).zip(&dpooled) {
            *g = if p > 0.0 { dp / t as f64 } else { 0.0 };
        }
    }
    accumulate_dense(grads, "dense", &cache.dropped, &dpre);
    let mut dseq = dpre.dot(&params.mat("dense.kernel").t());
    if let Some(m) = &cache.inner_mask {
        dseq *= m;
    }
    let x = cache.input.view();
    let mut dx = backward_direction(
        cfg.cell,
        cfg.units,
        params,
        "rnn.forward",
        x,
        &cache.directions[0],
        dseq.slice(s![.., ..cfg.units]),
        grads,
    );
    if cfg.cell.is_bidirectional() {
        let dbwd = dseq.slice(s![.., cfg.units..]);
        let dx_rev = backward_direction(
            cfg.cell,
            cfg.units,
            params,
            "rnn.backward",
            reversed(x),
            &cache.directions[1],
            reversed(dbwd),
            grads,
        );
        dx += &reversed(dx_rev.view());
    }
    dx
}
