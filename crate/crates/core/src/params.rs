//! Named, serializable parameter groups.
//!
//! Every group is generic over its leaf type: `Tensor` for stored values,
//! [`Var`](crate::numerics::Var) once bound to a tape. Leaves are visited in
//! declaration order, which fixes the flattened order used by the optimizer
//! and by model archives.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{CcaError, Result};
use crate::numerics::{Tape, Tensor, Var};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$lmeta:meta])* $leaf:ident ),* $(,)?
            $( ; $( $(#[$gmeta:meta])* $group:ident : $gty:ident ),* $(,)? )?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = Tensor> {
            $( $(#[$lmeta])* pub $leaf: T, )*
            $( $( $(#[$gmeta])* pub $group: $gty<T>, )* )?
        }

        impl<T> $name<T> {
            pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $( $leaf: f(&join(prefix, stringify!($leaf)), &self.$leaf), )*
                    $( $( $group: self.$group.map_named(&join(prefix, stringify!($group)), f), )* )?
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $( f(&join(prefix, stringify!($leaf)), &self.$leaf); )*
                $( $( self.$group.visit(&join(prefix, stringify!($group)), f); )* )?
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
                $( f(&join(prefix, stringify!($leaf)), &mut self.$leaf); )*
                $( $( self.$group.visit_mut(&join(prefix, stringify!($group)), f); )* )?
            }
        }
    };
}

param_group! {
    /// One direction of one gated recurrent layer. Gate blocks along the
    /// last axis are ordered reset, update, candidate.
    pub struct GruCellParams {
        /// `[d_in × 3h]`
        w_x,
        /// `[h × 3h]`
        w_h,
        b_x,
        b_h,
    }
}

param_group! {
    /// Two stacked bidirectional layers.
    pub struct BiGruParams {
        ;
        l0_fwd: GruCellParams,
        l0_bwd: GruCellParams,
        l1_fwd: GruCellParams,
        l1_bwd: GruCellParams,
    }
}

param_group! {
    /// Two-layer graph convolution over the concept graph.
    pub struct GcnParams {
        /// `[embed_dim × d_c]`
        w1,
        /// `[d_c × d_c]`
        w2,
    }
}

param_group! {
    /// Multi-head self-attention over proposals and concepts, followed by the
    /// normalized feed-forward residue. Head `i` owns columns
    /// `i*d_h..(i+1)*d_h` of the query/key/value projections.
    pub struct VisualFusionParams {
        w_q,
        w_k,
        w_v,
        /// `[n_heads·d_h × d_v]`
        w_mul,
        /// `[d_v × d_ff]`
        w_ff1,
        b_ff1,
        /// `[d_ff × d_v]`
        w_ff2,
        b_ff2,
        ln_gain,
        ln_bias,
    }
}

param_group! {
    pub struct TextAttentionParams {
        /// `[d_q × d_a]`
        w_q,
        /// `[d_c × d_a]`
        w_k,
        /// `[d_c × d_q]`
        w_v,
    }
}

param_group! {
    /// `d_v → d_v (ReLU) → d_q`
    pub struct MlpParams {
        w1,
        b1,
        w2,
        b2,
    }
}

param_group! {
    pub struct CommonSpaceParams {
        /// Pre-logistic mixing weight; γ = sigmoid(g).
        g
        ;
        phi1: MlpParams,
        phi2: MlpParams,
    }
}

param_group! {
    pub struct ModelParams {
        ;
        gru: BiGruParams,
        gcn: GcnParams,
        fusion: VisualFusionParams,
        text: TextAttentionParams,
        space: CommonSpaceParams,
    }
}

impl ModelParams<Tensor> {
    /// Zero-valued parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let z = |r: usize, c: usize| Tensor::zeros(&[r, c]);
        let v = |n: usize| Tensor::zeros(&[n]);
        let h = cfg.d_q / 2;
        let cell = |d_in: usize| GruCellParams {
            w_x: z(d_in, 3 * h),
            w_h: z(h, 3 * h),
            b_x: v(3 * h),
            b_h: v(3 * h),
        };
        let inner = cfg.n_heads * cfg.head_dim();
        let mlp = || MlpParams {
            w1: z(cfg.d_v, cfg.d_v),
            b1: v(cfg.d_v),
            w2: z(cfg.d_v, cfg.d_q),
            b2: v(cfg.d_q),
        };
        ModelParams {
            gru: BiGruParams {
                l0_fwd: cell(cfg.embed_dim),
                l0_bwd: cell(cfg.embed_dim),
                l1_fwd: cell(cfg.d_q),
                l1_bwd: cell(cfg.d_q),
            },
            gcn: GcnParams {
                w1: z(cfg.embed_dim, cfg.d_c),
                w2: z(cfg.d_c, cfg.d_c),
            },
            fusion: VisualFusionParams {
                w_q: z(cfg.d_v, inner),
                w_k: z(cfg.d_v, inner),
                w_v: z(cfg.d_v, inner),
                w_mul: z(inner, cfg.d_v),
                w_ff1: z(cfg.d_v, cfg.d_ff),
                b_ff1: v(cfg.d_ff),
                w_ff2: z(cfg.d_ff, cfg.d_v),
                b_ff2: v(cfg.d_v),
                ln_gain: v(cfg.d_v),
                ln_bias: v(cfg.d_v),
            },
            text: TextAttentionParams {
                w_q: z(cfg.d_q, cfg.d_q),
                w_k: z(cfg.d_c, cfg.d_q),
                w_v: z(cfg.d_c, cfg.d_q),
            },
            space: CommonSpaceParams {
                g: v(1),
                phi1: mlp(),
                phi2: mlp(),
            },
        }
    }

    /// Seeded initialization: Glorot-uniform matrices, zero biases, unit
    /// layer-norm gain, γ = 0.5. The attention key projection starts equal to
    /// the query projection, scaled by `cfg.qk_init_gain`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::zeros(cfg);
        params.visit_mut("", &mut |name, t| {
            if name.ends_with("ln_gain") {
                t.data_mut().fill(1.0);
            } else if t.rank() == 2 {
                let (fan_in, fan_out) = t.shape2();
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for x in t.data_mut() {
                    *x = rng.random_range(-limit..limit);
                }
            }
        });
        let f = &mut params.fusion;
        f.w_q = f.w_q.scale(cfg.qk_init_gain);
        f.w_k = f.w_q.clone();
        params
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name.to_string()));
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Rebuilds parameters for `cfg` from named tensors, checking that every
    /// name is present exactly once with the expected shape.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = ModelParams::zeros(cfg);
        let expected = template.names();
        if named.len() != expected.len() {
            return Err(CcaError::Data(format!(
                "model has {} tensors, configuration expects {}",
                named.len(),
                expected.len()
            )));
        }
        let mut lookup: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut failure = None;
        let params = template.map_named("", &mut |name, shape| match lookup.remove(name) {
            Some(t) if t.dims() == shape.dims() => t,
            Some(t) => {
                failure
                    .get_or_insert_with(|| CcaError::Data(format!("tensor {name} has dims {:?}, expected {:?}", t.dims(), shape.dims())));
                shape.clone()
            }
            None => {
                failure.get_or_insert_with(|| CcaError::Data(format!("tensor {name} missing")));
                shape.clone()
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map_named("", &mut |_, t| tape.param(t.clone()))
    }

    /// Registers every tensor as a constant (no gradient).
    pub fn bind_constant(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map_named("", &mut |_, t| tape.constant(t.clone()))
    }
}

impl<T> ModelParams<T> {
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.push(t));
        out
    }
}
