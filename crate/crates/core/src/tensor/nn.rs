//! Layers built on the tape, plus tensor-level reference forwards.

use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Fully connected layer, `y = x·Wᵀ + b` with `W` stored `[out×in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.insert_glorot(format!("{name}.weight"), fan_out, fan_in, rng);
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Looks up an already-registered layer by name.
    pub fn find(store: &ParamStore, name: &str) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        let shape = store.value(weight).shape();
        Some(Self {
            weight,
            bias,
            fan_in: shape[1],
            fan_out: shape[0],
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.matmul_bt(w).add_row(b)
    }
}

/// Learned per-feature gain and offset after row standardization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::filled(&[width], 1.0)),
            offset: store.insert(format!("{name}.offset"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.layer_norm_rows()
            .mul_row(tape.param(store, self.gain))
            .add_row(tape.param(store, self.offset))
    }
}

/// Multi-head self-attention with a residual connection and layer norm:
/// `y = LN(x + Wo·concat_h softmax(Q_h K_hᵀ/√d_h) V_h)`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
    pub width: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            heads,
            width,
        }
    }

    /// `x` is `[len×width]`; `mask` is row-major `[len×len]`, `true` = attend.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, mask: Option<&[bool]>) -> Var<'t> {
        let q = self.query.forward(tape, store, x);
        let k = self.key.forward(tape, store, x);
        let v = self.value.forward(tape, store, x);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var<'t>> = (0..self.heads)
            .map(|h| {
                let (s, e) = (h * dh, (h + 1) * dh);
                let scores = q.slice_cols(s, e).matmul_bt(k.slice_cols(s, e)).scale(scale);
                scores.softmax_rows(mask).matmul(v.slice_cols(s, e))
            })
            .collect();
        let attended = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let mixed = self.output.forward(tape, store, attended);
        self.norm.forward(tape, store, x + mixed)
    }
}

/// `output[b] = weights · input[b] + bias` on plain tensors.
pub fn linear_forward(weights: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor, TensorError> {
    if weights.shape().len() != 2 || input.cols() != weights.cols() {
        return Err(TensorError::Shape {
            op: "linear_forward",
            lhs: weights.shape().to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    if bias.len() != weights.rows() {
        return Err(TensorError::Shape {
            op: "linear_forward bias",
            lhs: weights.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let out = tape
        .constant(input.clone())
        .matmul_bt(tape.constant(weights.clone()))
        .add_row(tape.constant(bias.clone()));
    Ok(out.value())
}

/// Scaled dot-product attention, `softmax(QKᵀ/√d)V`, per batch entry.
///
/// Inputs are `[batch×len×d]`; `mask` is `[len×len]`, `true` = attend.
pub fn attention_forward(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: Option<&[bool]>,
) -> Result<Tensor, TensorError> {
    let dims = |t: &Tensor| -> Result<(usize, usize, usize), TensorError> {
        match *t.shape() {
            [b, l, d] => Ok((b, l, d)),
            _ => Err(TensorError::Invalid(format!(
                "attention expects [batch×len×d], got {:?}",
                t.shape()
            ))),
        }
    };
    let (batch, len, d) = dims(queries)?;
    for other in [keys, values] {
        if dims(other)? != (batch, len, d) {
            return Err(TensorError::Shape {
                op: "attention_forward",
                lhs: queries.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    if d == 0 {
        return Err(TensorError::Invalid("attention width must be positive".into()));
    }
    if let Some(m) = mask {
        if m.len() != len * len {
            return Err(TensorError::Shape {
                op: "attention_forward mask",
                lhs: vec![len, len],
                rhs: vec![m.len()],
            });
        }
        validate_mask(m, len)?;
    }
    let tape = Tape::new();
    let mut out = Vec::with_capacity(batch * len * d);
    let block = len * d;
    for b in 0..batch {
        let slice = |t: &Tensor| Tensor::from_raw(vec![len, d], t.data()[b * block..(b + 1) * block].to_vec());
        let q = tape.constant(slice(queries));
        let k = tape.constant(slice(keys));
        let v = tape.constant(slice(values));
        let y = q
            .matmul_bt(k)
            .scale(1.0 / (d as f64).sqrt())
            .softmax_rows(mask)
            .matmul(v);
        out.extend(y.value().into_data());
    }
    Ok(Tensor::from_raw(vec![batch, len, d], out))
}

/// Errors on the first query row with no unmasked key.
pub fn validate_mask(mask: &[bool], len: usize) -> Result<(), TensorError> {
    for row in 0..len {
        if !mask[row * len..(row + 1) * len].iter().any(|&m| m) {
            return Err(TensorError::FullyMasked { row });
        }
    }
    Ok(())
}
