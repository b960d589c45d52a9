use rand::Rng;

use super::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        trainable: bool,
    ) -> Self {
        Self {
            gamma: store.add(
                format!("{prefix}.gamma"),
                Matrix::filled(1, width, T::one()),
                trainable,
            ),
            beta: store.add(format!("{prefix}.beta"), Matrix::zeros(1, width), trainable),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention with a concat output projection.
/// Each head computes `softmax(Q_h K_hᵀ / √d_h) V_h`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Projected attention output, before any normalisation.
    pub out: Var,
    /// One `q_len × kv_len` weight matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        q_in: usize,
        kv_in: usize,
        width: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && width % heads == 0,
            "width must divide into heads"
        );
        Self {
            wq: store.add_linear(format!("{prefix}.wq"), q_in, width, trainable, rng),
            wk: store.add_linear(format!("{prefix}.wk"), kv_in, width, trainable, rng),
            wv: store.add_linear(format!("{prefix}.wv"), kv_in, width, trainable, rng),
            wo: store.add_linear(format!("{prefix}.wo"), width, width, trainable, rng),
            heads,
            width,
        }
    }

    pub fn project_kv<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        kv_in: Var,
    ) -> (Var, Var) {
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        (tape.matmul(kv_in, wk), tape.matmul(kv_in, wv))
    }

    /// Attends from `q_in` to pre-projected keys and values.
    pub fn attend<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q_in: Var,
        k: Var,
        v: Var,
    ) -> AttentionOutput {
        let wq = tape.param(store, self.wq);
        let q = tape.matmul(q_in, wq);
        let dh = self.width / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh),
                    tape.slice_cols(k, h * dh, dh),
                    tape.slice_cols(v, h * dh, dh),
                )
            };
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let a = tape.softmax_rows(scores);
            weights.push(a);
            head_outs.push(tape.matmul(a, vh));
        }
        let cat = if self.heads == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)
        };
        let wo = tape.param(store, self.wo);
        AttentionOutput {
            out: tape.matmul(cat, wo),
            weights,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q_in: Var,
        kv_in: Var,
    ) -> AttentionOutput {
        let (k, v) = self.project_kv(tape, store, kv_in);
        self.attend(tape, store, q_in, k, v)
    }
}
