//! Layer helpers on top of the tape, plus the standalone LoRA forward rule.

use ndarray::Array2;

use crate::model::state::{Group, ModelState};
use crate::model::tape::{Tape, Var};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// LoRA-adapted linear map on a column vector: `h = W0 x + (α/r) · B (A x)`.
/// With `B` all-zero this is exactly `W0 x`, bit for bit, because the update
/// term evaluates to a zero vector and IEEE addition of +0 is identity on
/// finite values.
pub fn lora_forward(
    x: &Array2<f64>,
    w0: &Array2<f64>,
    a: &Array2<f64>,
    b: &Array2<f64>,
    alpha: f64,
    r: usize,
    layer: &str,
) -> Result<Array2<f64>> {
    let mismatch = |expected: String, got: String| Error::DimMismatch {
        layer: layer.to_string(),
        expected,
        got,
    };
    if x.ncols() != 1 {
        return Err(mismatch("column vector".into(), format!("{:?}", x.dim())));
    }
    if w0.ncols() != x.nrows() {
        return Err(mismatch(
            format!("W0 with {} columns", x.nrows()),
            format!("{:?}", w0.dim()),
        ));
    }
    if a.nrows() != r || a.ncols() != x.nrows() {
        return Err(mismatch(format!("A {r}x{}", x.nrows()), format!("{:?}", a.dim())));
    }
    if b.nrows() != w0.nrows() || b.ncols() != r {
        return Err(mismatch(
            format!("B {}x{r}", w0.nrows()),
            format!("{:?}", b.dim()),
        ));
    }
    let base = w0.dot(x);
    if b.iter().all(|&v| v == 0.0) {
        return Ok(base);
    }
    let update = b.dot(&a.dot(x)) * (alpha / r as f64);
    Ok(base + update)
}

/// Which parameter groups receive gradients in the current pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMask(u8);

impl TrainMask {
    pub fn none() -> Self {
        TrainMask(0)
    }

    pub fn of(groups: &[Group]) -> Self {
        let mut bits = 0u8;
        for g in groups {
            bits |= 1 << Group::ALL.iter().position(|x| x == g).unwrap();
        }
        TrainMask(bits)
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & (1 << Group::ALL.iter().position(|x| *x == g).unwrap()) != 0
    }
}

/// Puts every parameter of the registry on the tape once per forward pass so
/// layer helpers can refer to them by name.
pub struct TapeModel<'a> {
    pub state: &'a ModelState,
    pub tape: Tape,
    vars: Vec<Var>,
}

impl<'a> TapeModel<'a> {
    pub fn new(state: &'a ModelState, mask: TrainMask) -> Self {
        let mut tape = Tape::new();
        let vars = state
            .params
            .iter()
            .enumerate()
            .map(|(id, p)| tape.param(id, p.value.clone(), mask.contains(p.group)))
            .collect();
        TapeModel { state, tape, vars }
    }

    pub fn p(&self, name: &str) -> Var {
        self.vars[self.state.id(name)]
    }

    /// x . W + b with row-major activations.
    pub fn linear(&mut self, x: Var, w: &str, b: &str) -> Var {
        let w = self.p(w);
        let b = self.p(b);
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.gain"));
        let b = self.p(&format!("{prefix}.bias"));
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn mlp(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = self.tape.tanh(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Single-head attention. qx provides queries; kvx provides keys/values
    /// (self-attention when they coincide). Projections live under `prefix`
    /// as wq/wk/wv/wo. When `lora` is set, Wq and Wv route through the LoRA
    /// update of the named adapter block.
    pub fn attention(&mut self, qx: Var, kvx: Var, prefix: &str, lora: Option<&str>) -> Var {
        let d = self.state.config.width as f64;
        let wq = self.p(&format!("{prefix}.wq"));
        let wk = self.p(&format!("{prefix}.wk"));
        let wv = self.p(&format!("{prefix}.wv"));
        let wo = self.p(&format!("{prefix}.wo"));
        let mut q = self.tape.matmul(qx, wq);
        let k = self.tape.matmul(kvx, wk);
        let mut v = self.tape.matmul(kvx, wv);
        if let Some(adapter) = lora {
            q = self.lora_update(qx, q, &format!("{adapter}.wq"));
            v = self.lora_update(kvx, v, &format!("{adapter}.wv"));
        }
        let scores = self.tape.matmul_nt(q, k);
        let scaled = self.tape.mul_const(scores, 1.0 / d.sqrt());
        let att = self.tape.softmax_rows(scaled);
        let mixed = self.tape.matmul(att, v);
        self.tape.matmul(mixed, wo)
    }

    /// base + (α/r) · (x A) B, the row-major form of `lora_forward`.
    fn lora_update(&mut self, x: Var, base: Var, adapter: &str) -> Var {
        let cfg = &self.state.config;
        let a = self.p(&format!("{adapter}.a"));
        let b = self.p(&format!("{adapter}.b"));
        let xa = self.tape.matmul(x, a);
        let xab = self.tape.matmul(xa, b);
        let scaled = self
            .tape
            .mul_const(xab, cfg.lora_alpha / cfg.lora_rank as f64);
        self.tape.add(base, scaled)
    }

    /// Pre-norm transformer block with optional LoRA routing and optional
    /// cross-attention context.
    pub fn base_block(&mut self, x: Var, blk: usize, adapter_on: bool) -> Var {
        let prefix = format!("base.block{blk}");
        let lora = if adapter_on {
            Some(format!("adapter.block{blk}"))
        } else {
            None
        };
        let n = self.layer_norm(x, &format!("{prefix}.ln1"));
        let att = self.attention(n, n, &format!("{prefix}.attn"), lora.as_deref());
        let x = self.tape.add(x, att);
        let n = self.layer_norm(x, &format!("{prefix}.ln2"));
        let m = self.mlp(n, &format!("{prefix}.mlp"));
        self.tape.add(x, m)
    }

    /// DiT block: self-attention over action tokens, cross-attention into
    /// the fused context, MLP; all pre-norm residual.
    pub fn dit_block(&mut self, x: Var, ctx: Var, blk: usize) -> Var {
        let prefix = format!("dit.block{blk}");
        let n = self.layer_norm(x, &format!("{prefix}.ln1"));
        let att = self.attention(n, n, &format!("{prefix}.self_attn"), None);
        let x = self.tape.add(x, att);
        let n = self.layer_norm(x, &format!("{prefix}.ln2"));
        let att = self.attention(n, ctx, &format!("{prefix}.cross_attn"), None);
        let x = self.tape.add(x, att);
        let n = self.layer_norm(x, &format!("{prefix}.ln3"));
        let m = self.mlp(n, &format!("{prefix}.mlp"));
        self.tape.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lora_zero_b_is_bitwise_base() {
        let x = array![[0.1], [-0.7], [0.3]];
        let w0 = array![[0.5, -0.2, 0.9], [1.1, 0.0, -0.4], [0.3, 0.8, 0.2]];
        let a = array![[0.4, -0.6, 0.1], [0.9, 0.2, -0.3]];
        let b = Array2::zeros((3, 2));
        let h = lora_forward(&x, &w0, &a, &b, 8.0, 2, "wq").unwrap();
        let base = w0.dot(&x);
        for (u, v) in h.iter().zip(base.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn lora_worked_example() {
        // W0 = I2, A = [[1, 1]], B = [[1], [1]], alpha = 2, r = 1, x = (1, 0)
        let x = array![[1.0], [0.0]];
        let w0 = array![[1.0, 0.0], [0.0, 1.0]];
        let a = array![[1.0, 1.0]];
        let b = array![[1.0], [1.0]];
        let h = lora_forward(&x, &w0, &a, &b, 2.0, 1, "wq").unwrap();
        assert_eq!(h, array![[3.0], [2.0]]);
    }

    #[test]
    fn lora_alpha_linearity() {
        let x = array![[0.7], [-0.2]];
        let w0 = array![[0.3, 0.1], [-0.5, 0.8]];
        let a = array![[1.2, -0.4]];
        let b = array![[0.6], [-0.9]];
        let base = w0.dot(&x);
        let h1 = lora_forward(&x, &w0, &a, &b, 1.5, 1, "wq").unwrap();
        let h2 = lora_forward(&x, &w0, &a, &b, 3.0, 1, "wq").unwrap();
        let d1 = &h1 - &base;
        let d2 = &h2 - &base;
        for (u, v) in d1.iter().zip(d2.iter()) {
            assert_eq!((*u * 2.0).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn lora_shape_mismatch_names_layer() {
        let x = array![[1.0], [0.0]];
        let w0 = array![[1.0, 0.0], [0.0, 1.0]];
        let a = array![[1.0, 1.0, 1.0]]; // wrong inner dim
        let b = array![[1.0], [1.0]];
        match lora_forward(&x, &w0, &a, &b, 2.0, 1, "block0.wv") {
            Err(Error::DimMismatch { layer, .. }) => assert_eq!(layer, "block0.wv"),
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn train_mask_membership() {
        let m = TrainMask::of(&[Group::Adapter, Group::CameraHead]);
        assert!(m.contains(Group::Adapter));
        assert!(m.contains(Group::CameraHead));
        assert!(!m.contains(Group::Base));
        assert!(!TrainMask::none().contains(Group::Adapter));
    }
}
