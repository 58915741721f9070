use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Creates variables in a fixed order from a seeded stream.
pub(crate) struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    pub vars: Vec<(String, Var)>,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), dtype, device: Device::Cpu, vars: Vec::new() }
    }

    fn push(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.push((name.to_string(), var.clone()));
        Ok(var)
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.push(name, v, shape)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.push(name, vec![value; n], shape)
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Linear {
            w: self.uniform(&format!("{name}.weight"), &[outputs, inputs], bound)?,
            b: self.uniform(&format!("{name}.bias"), &[outputs], bound)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            shift: self.constant(&format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn mlp(&mut self, name: &str, inputs: usize, hidden: usize, outputs: usize) -> Result<Mlp> {
        Ok(Mlp {
            first: self.linear(&format!("{name}.0"), inputs, hidden)?,
            second: self.linear(&format!("{name}.1"), hidden, outputs)?,
        })
    }
}

pub(crate) struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inputs = *dims.last().expect("rank >= 1");
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((lead, inputs))?
            .matmul(&self.w.as_tensor().t()?)?
            .broadcast_add(self.b.as_tensor())?;
        let mut out = dims;
        *out.last_mut().expect("rank >= 1") = self.w.dims()[0];
        Ok(y.reshape(out)?)
    }
}

pub(crate) struct LayerNorm {
    gain: Var,
    shift: Var,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let centered = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.gain.as_tensor())?.broadcast_add(self.shift.as_tensor())?)
    }
}

pub(crate) struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x)?.silu()?)
    }
}

/// Inverted dropout with masks drawn from a seeded stream.
pub(crate) struct Dropout {
    rng: ChaCha8Rng,
    p: f64,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), p }
    }
}

pub(crate) fn dropout(dr: &mut Option<Dropout>, x: Tensor) -> Result<Tensor> {
    let Some(d) = dr.as_mut() else { return Ok(x) };
    if d.p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - d.p);
    let mask: Vec<f64> = (0..x.elem_count()).map(|_| if d.rng.random::<f64>() < d.p { 0.0 } else { keep }).collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Softmax over the last axis. `mask` holds 1 for valid keys and 0 for
/// padding; rows without any valid key come out as zeros.
pub(crate) fn masked_softmax(logits: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let logits = match mask {
        Some(m) => logits.broadcast_add(&m.affine(1e9, -1e9)?)?,
        None => logits.clone(),
    };
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    let e = match mask {
        Some(m) => e.broadcast_mul(m)?,
        None => e,
    };
    let total = e.sum_keepdim(D::Minus1)?.affine(1.0, 1e-30)?;
    Ok(e.broadcast_div(&total)?)
}

/// Attention terms that depend only on relative poses.
pub(crate) struct RelTerms {
    /// `[B, H, Q, K]` logit offsets.
    bias: Tensor,
    /// `[B, H * Q, K, dh]` value offsets.
    values: Tensor,
}

pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    bias: Linear,
    relv: Linear,
    heads: usize,
}

pub(crate) struct KeyValues {
    k: Tensor,
    v: Tensor,
}

impl Attention {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: b.linear(&format!("{name}.q"), dim, dim)?,
            k: b.linear(&format!("{name}.k"), dim, dim)?,
            v: b.linear(&format!("{name}.v"), dim, dim)?,
            o: b.linear(&format!("{name}.o"), dim, dim)?,
            bias: b.linear(&format!("{name}.rel_bias"), dim, heads)?,
            relv: b.linear(&format!("{name}.rel_value"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `rel` is the `[B, Q, K, D]` relative-pose embedding.
    pub fn rel_terms(&self, rel: &Tensor) -> Result<RelTerms> {
        let (b, q, k, d) = rel.dims4()?;
        let h = self.heads;
        let bias = self.bias.forward(rel)?.permute((0, 3, 1, 2))?.contiguous()?;
        let values = self
            .relv
            .forward(rel)?
            .reshape((b, q, k, h, d / h))?
            .permute((0, 3, 1, 2, 4))?
            .contiguous()?
            .reshape((b, h * q, k, d / h))?;
        Ok(RelTerms { bias, values })
    }

    pub fn key_values(&self, x: &Tensor) -> Result<KeyValues> {
        Ok(KeyValues { k: self.split_heads(&self.k.forward(x)?)?, v: self.split_heads(&self.v.forward(x)?)? })
    }

    /// Batch dimensions of `kv`, `rel` and `mask` may be 1 and broadcast
    /// against the queries.
    pub fn forward(&self, x: &Tensor, kv: &KeyValues, rel: &RelTerms, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, q_len, d) = x.dims3()?;
        let h = self.heads;
        let dh = d / h;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let logits = q
            .broadcast_matmul(&kv.k.transpose(2, 3)?)?
            .affine(1.0 / (dh as f64).sqrt(), 0.0)?
            .broadcast_add(&rel.bias)?;
        let a = masked_softmax(&logits, mask)?;
        let k_len = a.dim(3)?;
        let out = a.broadcast_matmul(&kv.v)?;
        let rel_out = a.reshape((b, h * q_len, 1, k_len))?.broadcast_matmul(&rel.values)?.reshape((b, h, q_len, dh))?;
        let merged = (out + rel_out)?.transpose(1, 2)?.contiguous()?.reshape((b, q_len, d))?;
        self.o.forward(&merged)
    }
}

pub(crate) struct FeedForward {
    norm: LayerNorm,
    mlp: Mlp,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { norm: b.layer_norm(&format!("{name}.norm"), dim)?, mlp: b.mlp(&format!("{name}.mlp"), dim, 4 * dim, dim)? })
    }

    pub fn forward(&self, x: &Tensor, dr: &mut Option<Dropout>) -> Result<Tensor> {
        let y = dropout(dr, self.mlp.forward(&self.norm.forward(x)?)?)?;
        Ok((x + y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn softmax_matches_reference() {
        let x = t(vec![1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0], &[2, 3]);
        let s = masked_softmax(&x, None).unwrap().to_vec2::<f64>().unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((s[0][2] - 3f64.exp() / z).abs() < 1e-15);
        assert!(s[1].iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let x = t(vec![5.0, 1.0, 1.0, 2.0, 2.0, 2.0], &[2, 3]);
        let m = t(vec![0.0, 1.0, 1.0], &[1, 3]);
        let s = masked_softmax(&x, Some(&m)).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(s[0][0], 0.0);
        assert!((s[0][1] - 0.5).abs() < 1e-15);
        let none = t(vec![0.0, 0.0, 0.0], &[1, 3]);
        let s = masked_softmax(&x, Some(&none)).unwrap().to_vec2::<f64>().unwrap();
        assert!(s.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut b = ParamBuilder::new(0, DType::F64);
        let ln = b.layer_norm("ln", 4).unwrap();
        let y = ln.forward(&t(vec![1.0, 2.0, 3.0, 4.0], &[1, 4])).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / 1.25001).abs() < 1e-9);
    }

    #[test]
    fn linear_handles_leading_dims() {
        let mut b = ParamBuilder::new(1, DType::F64);
        let l = b.linear("l", 3, 2).unwrap();
        let x = t((0..12).map(f64::from).collect(), &[2, 2, 3]);
        let y = l.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 2, 2]);
        let flat = l.forward(&x.reshape((4, 3)).unwrap()).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), flat.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn builder_is_deterministic() {
        let vals = |seed| {
            let mut b = ParamBuilder::new(seed, DType::F32);
            b.linear("l", 5, 4).unwrap();
            b.vars.iter().flat_map(|(_, v)| v.flatten_all().unwrap().to_vec1::<f32>().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(vals(3), vals(3));
        assert_ne!(vals(3), vals(4));
    }

    #[test]
    fn dropout_is_identity_without_state() {
        let x = t(vec![1.0; 8], &[8]);
        let y = dropout(&mut None, x.clone()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![1.0; 8]);
        let mut d = Some(Dropout::new(0.5, 1));
        let y = dropout(&mut d, x).unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}
