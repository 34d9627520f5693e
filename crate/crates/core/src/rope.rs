//! Rotary positional encoding and the attention operations built on it.
//!
//! Positions are injected by rotating query/key vectors:
//! `rope(x) = x * cos + rotate_every_two(x) * sin`, so attention scores
//! depend only on relative positions. 1-D (temporal) positions use the
//! classic geometric frequency schedule `theta_i = 10000^(-2(i-1)/d)`;
//! 2-D (spatial) coordinates in [-1, 1] split the channels evenly between
//! axes and use frequencies linearly spaced in [1, max_freq/2] scaled by pi.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Linear, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RopeTables {
    pub sin: Tensor,
    pub cos: Tensor,
}

impl RopeTables {
    /// Number of token positions covered (second-to-last axis).
    pub fn token_len(&self) -> usize {
        let s = &self.sin.shape;
        s[s.len() - 2]
    }

    pub fn dim(&self) -> usize {
        *self.sin.shape.last().unwrap()
    }

    /// Repeat the whole block of rows `times` times: [N, d] -> [times*N, d].
    /// Used to reuse one spatial table for every hour of the day, and to
    /// spread a single-coordinate row over all hour tokens.
    pub fn tile_rows(&self, times: usize) -> Result<RopeTables> {
        if self.sin.shape.len() != 2 {
            return Err(Error::Invalid("tile_rows: expected shared [N, d] tables".into()));
        }
        let (n, d) = (self.token_len(), self.dim());
        let tile = |t: &Tensor| -> Result<Tensor> {
            let mut data = Vec::with_capacity(times * n * d);
            for _ in 0..times {
                data.extend_from_slice(&t.data);
            }
            Tensor::from_vec(vec![times * n, d], data)
        };
        Ok(RopeTables {
            sin: tile(&self.sin)?,
            cos: tile(&self.cos)?,
        })
    }

    /// Keep only the given position rows (token masking). Shared tables only.
    pub fn subset(&self, idx: &[usize]) -> Result<RopeTables> {
        if self.sin.shape.len() != 2 {
            return Err(Error::Invalid("subset: expected shared [N, d] tables".into()));
        }
        let d = self.dim();
        let pick = |t: &Tensor| -> Result<Tensor> {
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
            }
            Tensor::from_vec(vec![idx.len(), d], data)
        };
        Ok(RopeTables {
            sin: pick(&self.sin)?,
            cos: pick(&self.cos)?,
        })
    }
}

/// Build sin/cos tables of shape [N, dim] from positions of shape [N]
/// (or [N, 1]) for temporal encoding, or [N, 2] for axis-split spatial
/// encoding. Entries come in duplicated pairs per frequency.
pub fn build_rope_tables(positions: &Tensor, dim: usize, max_freq: f64) -> Result<RopeTables> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Invalid(format!("rope: dim {dim} must be even")));
    }
    let (n, p_dims) = match positions.shape.as_slice() {
        [n] => (*n, 1),
        [n, 1] => (*n, 1),
        [n, 2] => (*n, 2),
        other => {
            return Err(Error::Invalid(format!(
                "rope: positions must be [N], [N,1] or [N,2], got {other:?}"
            )))
        }
    };
    if dim % (2 * p_dims) != 0 {
        return Err(Error::Invalid(format!(
            "rope: dim {dim} not divisible by {} for {p_dims}-axis positions",
            2 * p_dims
        )));
    }
    let per_axis = dim / p_dims;
    let n_freq = per_axis / 2;
    let freqs: Vec<f64> = if p_dims == 1 {
        (1..=n_freq)
            .map(|i| 10000.0_f64.powf(-2.0 * (i as f64 - 1.0) / per_axis as f64))
            .collect()
    } else {
        // continuous-coordinate variant: linspace(1, max_freq/2, n_freq) * pi
        (0..n_freq)
            .map(|i| {
                let t = if n_freq == 1 {
                    0.0
                } else {
                    i as f64 / (n_freq - 1) as f64
                };
                (1.0 + t * (max_freq / 2.0 - 1.0)) * std::f64::consts::PI
            })
            .collect()
    };
    let mut sin = vec![0.0; n * dim];
    let mut cos = vec![0.0; n * dim];
    for row in 0..n {
        for axis in 0..p_dims {
            let pos = positions.data[row * p_dims + axis];
            for (fi, &freq) in freqs.iter().enumerate() {
                let angle = pos * freq;
                let base = row * dim + axis * per_axis + 2 * fi;
                let (s, c) = angle.sin_cos();
                sin[base] = s;
                sin[base + 1] = s;
                cos[base] = c;
                cos[base + 1] = c;
            }
        }
    }
    Ok(RopeTables {
        sin: Tensor::from_vec(vec![n, dim], sin)?,
        cos: Tensor::from_vec(vec![n, dim], cos)?,
    })
}

/// Rotate token vectors by their positional tables:
/// `x * cos + rotate_every_two(x) * sin`. Norm-preserving per row.
/// `x` has shape [..., N, d]; tables are [N, d] (shared) or match a suffix
/// of x's shape (per-group tables).
pub fn apply_rope(tape: &mut Tape, x: Var, tables: &RopeTables) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let st = &tables.sin.shape;
    if sx.len() < st.len() || !sx.ends_with(st) {
        return Err(Error::shape("apply_rope", &sx, st));
    }
    let cos = tape.constant(tables.cos.clone());
    let sin = tape.constant(tables.sin.clone());
    let xc = tape.mul(x, cos)?;
    let xr = tape.rotate_every_two(x)?;
    let xs = tape.mul(xr, sin)?;
    tape.add(xc, xs)
}

/// Multi-head attention weights: Q/K/V projections, head split, and output
/// projection. `d = heads * dim_head` internally; the output projection maps
/// back to the query-side hidden size.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
    pub dim_head: usize,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        heads: usize,
        dim_head: usize,
    ) -> Self {
        let inner = heads * dim_head;
        AttentionParams {
            to_q: Linear::init(store, rng, &format!("{name}.to_q"), q_dim, inner),
            to_k: Linear::init(store, rng, &format!("{name}.to_k"), kv_dim, inner),
            to_v: Linear::init(store, rng, &format!("{name}.to_v"), kv_dim, inner),
            to_out: Linear::init(store, rng, &format!("{name}.to_out"), inner, q_dim),
            heads,
            dim_head,
        }
    }
}

/// Self-attention with rotary positions: project, rotate q and k by the
/// tables, softmax over scaled dot products, optional attention dropout,
/// value-weighted sum, output projection.
pub fn rope_self_attention(
    f: &mut Fwd,
    x: Var,
    params: &AttentionParams,
    tables: &RopeTables,
    attn_dropout: f64,
) -> Result<Var> {
    let s = f.tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("self_attention: expected [B, N, d], got {s:?}")));
    }
    let n = s[1];
    if tables.token_len() != n {
        return Err(Error::Invalid(format!(
            "self_attention: tables built for {} positions, input has {n}",
            tables.token_len()
        )));
    }
    let q = params.to_q.apply(f, x)?;
    let k = params.to_k.apply(f, x)?;
    let v = params.to_v.apply(f, x)?;
    let training = f.training;
    let out = f.tape.multi_head_attention(
        q,
        k,
        v,
        &tables.sin,
        &tables.cos,
        &tables.sin,
        &tables.cos,
        params.heads,
        params.dim_head,
        attn_dropout,
        training,
        f.rng,
    )?;
    params.to_out.apply(f, out)
}

/// Cross-attention: `q_tokens` attend over `kv_tokens`. Output keeps the
/// query token count and hidden size; each pre-projection output row is a
/// convex combination of projected value rows.
pub fn cross_attention(
    f: &mut Fwd,
    q_tokens: Var,
    kv_tokens: Var,
    params: &AttentionParams,
    tables_q: &RopeTables,
    tables_kv: &RopeTables,
    attn_dropout: f64,
) -> Result<Var> {
    let sq = f.tape.shape(q_tokens).to_vec();
    let skv = f.tape.shape(kv_tokens).to_vec();
    if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] {
        return Err(Error::shape("cross_attention", &sq, &skv));
    }
    let (nq, nkv) = (sq[1], skv[1]);
    if tables_q.token_len() != nq || tables_kv.token_len() != nkv {
        return Err(Error::Invalid(format!(
            "cross_attention: tables cover {}/{} positions, tokens are {nq}/{nkv}",
            tables_q.token_len(),
            tables_kv.token_len()
        )));
    }
    let q = params.to_q.apply(f, q_tokens)?;
    let k = params.to_k.apply(f, kv_tokens)?;
    let v = params.to_v.apply(f, kv_tokens)?;
    let training = f.training;
    let out = f.tape.multi_head_attention(
        q,
        k,
        v,
        &tables_q.sin,
        &tables_q.cos,
        &tables_kv.sin,
        &tables_kv.cos,
        params.heads,
        params.dim_head,
        attn_dropout,
        training,
        f.rng,
    )?;
    params.to_out.apply(f, out)
}

/// Integer positions 0..n as a [n] tensor (temporal token grid).
pub fn positions_1d(n: usize) -> Tensor {
    Tensor::from_vec(vec![n], (0..n).map(|i| i as f64).collect()).expect("finite")
}

/// Per-group tables: one [N, d] table per group member, tiled `heads` times
/// each, stacked to [groups*heads, N, d]. Used when kv positions differ per
/// batch element (e.g. per-plant coordinates).
pub fn tile_tables_per_group(tables: &[RopeTables], heads: usize) -> Result<RopeTables> {
    if tables.is_empty() {
        return Err(Error::Invalid("tile_tables_per_group: no tables".into()));
    }
    let n = tables[0].token_len();
    let d = tables[0].dim();
    let groups = tables.len();
    let mut sin = Vec::with_capacity(groups * heads * n * d);
    let mut cos = Vec::with_capacity(groups * heads * n * d);
    for t in tables {
        if t.token_len() != n || t.dim() != d {
            return Err(Error::shape("tile_tables_per_group", &t.sin.shape, &tables[0].sin.shape));
        }
        for _ in 0..heads {
            sin.extend_from_slice(&t.sin.data);
            cos.extend_from_slice(&t.cos.data);
        }
    }
    Ok(RopeTables {
        sin: Tensor::from_vec(vec![groups * heads, n, d], sin)?,
        cos: Tensor::from_vec(vec![groups * heads, n, d], cos)?,
    })
}
