//! Model configuration, parameter containers, and the forward/backward
//! passes of the recommender.
//!
//! The network embeds three aligned token streams, runs them through a
//! shared causal self-attention encoder whose feed-forward block carries a
//! per-stream low-rank adapter, projects the encoded states with gated
//! projectors (the cross-domain stream additionally through per-target
//! low-rank adapters), and fuses domain-specific and cross-derived states
//! into per-domain recommendation representations.

pub mod backward;
pub mod forward;
pub mod layers;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentMode;
use layers::{
    gaussian_matrix, AttnParams, FfnParams, LnParams, LoraParams, ProjectorParams,
};

/// Which stream is being encoded; selects the per-stream adapter (and the
/// per-stream encoder when separate encoders are configured).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqTag {
    X,
    A,
    B,
}

impl SeqTag {
    pub fn index(self) -> usize {
        match self {
            SeqTag::X => 0,
            SeqTag::A => 1,
            SeqTag::B => 2,
        }
    }
}

/// Adapter wiring inside the encoder's feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderAdapterKind {
    /// One low-rank adapter per stream beside the shared FFN.
    Lora,
    /// Shared encoder without per-stream adapters (variant V1).
    None,
    /// Three independent encoders, one per stream (variant V_e3).
    SeparateEncoders,
    /// One full gated projector per stream in the adapter slot (variant V_dp3).
    Projectors,
}

/// Adapter wiring on the invariant (cross-to-domain) path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantAdapterKind {
    /// One low-rank adapter per target domain.
    Lora,
    /// No per-target adaptation (variant V3).
    None,
    /// Full per-target projectors beside the shared invariant projector (V_ip3).
    ProjPerDomain,
    /// Full per-target projectors, shared invariant projector removed (V_ip2).
    ProjPerDomainOnly,
}

/// Hyperparameters and wiring flags of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Maximum sequence length L; position index L is reserved for PAD.
    pub max_len: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// FFN inner width; defaults to 4d.
    pub ffn_dim: Option<usize>,
    /// Projector inner width; defaults to (8/3)d rounded to a multiple of 8.
    pub proj_dim: Option<usize>,
    /// Rank of the encoder adapters; 0 disables them.
    pub r_d: usize,
    /// Rank of the invariant-path adapters; 0 disables them.
    pub r_i: usize,
    pub p_drop: f64,
    pub swish_beta: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Negative samples per supervised position during training.
    pub n_negatives: usize,
    pub alignment: AlignmentMode,
    pub encoder_adapter: EncoderAdapterKind,
    pub invariant_adapter: InvariantAdapterKind,
    /// Gated projectors on the domain-specific and invariant paths.
    pub use_projectors: bool,
    /// Suppress the projector-internal dropout, keeping only the branch
    /// dropout at call sites.
    pub single_proj_dropout: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            max_len: 50,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: None,
            proj_dim: None,
            r_d: 8,
            r_i: 8,
            p_drop: 0.3,
            swish_beta: 1.0,
            temperature: 0.75,
            n_negatives: 128,
            alignment: AlignmentMode::Task,
            encoder_adapter: EncoderAdapterKind::Lora,
            invariant_adapter: InvariantAdapterKind::Lora,
            use_projectors: true,
            single_proj_dropout: false,
        }
    }
}

/// Projector inner width: (8/3)d rounded to the nearest multiple of 8.
pub fn default_proj_dim(d: usize) -> usize {
    let raw = 8.0 * d as f64 / 3.0;
    (((raw / 8.0).round() as usize) * 8).max(8)
}

impl ModelConfig {
    pub fn ffn_inner(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.d)
    }

    pub fn proj_inner(&self) -> usize {
        self.proj_dim.unwrap_or_else(|| default_proj_dim(self.d))
    }

    pub fn n_encoder_stacks(&self) -> usize {
        if self.encoder_adapter == EncoderAdapterKind::SeparateEncoders {
            3
        } else {
            1
        }
    }

    /// All configuration problems, empty when valid.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.d == 0 {
            problems.push("d must be positive".into());
        }
        if self.n_heads == 0 || self.d % self.n_heads.max(1) != 0 {
            problems.push(format!(
                "d={} must be divisible by n_heads={}",
                self.d, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            problems.push("n_layers must be >= 1".into());
        }
        if self.max_len < 2 {
            problems.push("max_len must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            problems.push(format!("p_drop={} must be in [0, 1)", self.p_drop));
        }
        if self.temperature <= 0.0 {
            problems.push("temperature must be > 0".into());
        }
        if self.n_negatives == 0 {
            problems.push("n_negatives must be >= 1".into());
        }
        if self.encoder_adapter == EncoderAdapterKind::Lora && self.r_d == 0 {
            problems.push("encoder_adapter=lora requires r_d >= 1 (use r_d=0 only with encoder_adapter=none)".into());
        }
        if self.invariant_adapter == InvariantAdapterKind::Lora && self.r_i == 0 {
            problems.push("invariant_adapter=lora requires r_i >= 1 (use r_i=0 only with invariant_adapter=none)".into());
        }
        if self.r_d >= self.d && self.encoder_adapter == EncoderAdapterKind::Lora {
            problems.push(format!("r_d={} must be < d={}", self.r_d, self.d));
        }
        if self.r_i >= self.d && self.invariant_adapter == InvariantAdapterKind::Lora {
            problems.push(format!("r_i={} must be < d={}", self.r_i, self.d));
        }
        problems
    }
}

/// Per-stream adapters inside one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub enum EncAdapterParams {
    Lora([LoraParams; 3]),
    Proj(Box<[ProjectorParams; 3]>),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attn: AttnParams,
    pub ffn: FfnParams,
    pub ln_attn: LnParams,
    pub ln_ffn: LnParams,
    pub adapter: EncAdapterParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayerParams>,
}

/// Per-target adapters on the invariant path.
#[derive(Debug, Clone, PartialEq)]
pub enum InvAdapterParams {
    Lora { a: LoraParams, b: LoraParams },
    Proj { a: ProjectorParams, b: ProjectorParams },
    None,
}

/// All trainable tensors. Gradients reuse this container: the backward pass
/// returns a `ModelParams` holding d(loss)/d(tensor) in each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Item embeddings, (N_i + 1) x d; row 0 is PAD.
    pub item_emb: Array2<f64>,
    /// Position embeddings, (L + 1) x d; row L is the PAD position.
    pub pos_emb: Array2<f64>,
    /// One shared stack, or three when separate encoders are configured.
    pub encoders: Vec<EncoderStack>,
    pub proj_a: Option<ProjectorParams>,
    pub proj_b: Option<ProjectorParams>,
    pub proj_i: Option<ProjectorParams>,
    pub inv_adapter: InvAdapterParams,
    pub ln_out_a: LnParams,
    pub ln_out_b: LnParams,
    pub ln_out_ia: LnParams,
    pub ln_out_ib: LnParams,
    pub n_items_a: u32,
    pub n_items_b: u32,
}

impl ModelParams {
    /// Random initialization. Dense weights and embeddings draw from a
    /// zero-mean Gaussian (std 0.02); adapter up-projections start at zero
    /// so every adapter begins as an exact no-op; LayerNorm starts as
    /// identity.
    pub fn init(cfg: &ModelConfig, n_items_a: u32, n_items_b: u32, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        let j = cfg.ffn_inner();
        let g = cfg.proj_inner();
        let n_items = (n_items_a + n_items_b) as usize;

        let item_emb = gaussian_matrix(n_items + 1, d, 0.02, rng);
        let pos_emb = gaussian_matrix(cfg.max_len + 1, d, 0.02, rng);

        let mut encoders = Vec::new();
        for _ in 0..cfg.n_encoder_stacks() {
            let mut stack_layers = Vec::new();
            for _ in 0..cfg.n_layers {
                let adapter = match cfg.encoder_adapter {
                    EncoderAdapterKind::Lora => EncAdapterParams::Lora([
                        LoraParams::init(cfg.r_d, d, rng),
                        LoraParams::init(cfg.r_d, d, rng),
                        LoraParams::init(cfg.r_d, d, rng),
                    ]),
                    EncoderAdapterKind::Projectors => EncAdapterParams::Proj(Box::new([
                        ProjectorParams::init(d, g, rng),
                        ProjectorParams::init(d, g, rng),
                        ProjectorParams::init(d, g, rng),
                    ])),
                    EncoderAdapterKind::None | EncoderAdapterKind::SeparateEncoders => {
                        EncAdapterParams::None
                    }
                };
                stack_layers.push(EncoderLayerParams {
                    attn: AttnParams::init(d, rng),
                    ffn: FfnParams::init(d, j, rng),
                    ln_attn: LnParams::new(d),
                    ln_ffn: LnParams::new(d),
                    adapter,
                });
            }
            encoders.push(EncoderStack {
                layers: stack_layers,
            });
        }

        let proj_a = cfg.use_projectors.then(|| ProjectorParams::init(d, g, rng));
        let proj_b = cfg.use_projectors.then(|| ProjectorParams::init(d, g, rng));
        let proj_i = (cfg.use_projectors
            && cfg.invariant_adapter != InvariantAdapterKind::ProjPerDomainOnly)
            .then(|| ProjectorParams::init(d, g, rng));

        let inv_adapter = match cfg.invariant_adapter {
            InvariantAdapterKind::Lora => InvAdapterParams::Lora {
                a: LoraParams::init(cfg.r_i, d, rng),
                b: LoraParams::init(cfg.r_i, d, rng),
            },
            InvariantAdapterKind::ProjPerDomain | InvariantAdapterKind::ProjPerDomainOnly => {
                InvAdapterParams::Proj {
                    a: ProjectorParams::init(d, g, rng),
                    b: ProjectorParams::init(d, g, rng),
                }
            }
            InvariantAdapterKind::None => InvAdapterParams::None,
        };

        ModelParams {
            item_emb,
            pos_emb,
            encoders,
            proj_a,
            proj_b,
            proj_i,
            inv_adapter,
            ln_out_a: LnParams::new(d),
            ln_out_b: LnParams::new(d),
            ln_out_ia: LnParams::new(d),
            ln_out_ib: LnParams::new(d),
            n_items_a,
            n_items_b,
        }
    }

    pub fn n_items_total(&self) -> u32 {
        self.n_items_a + self.n_items_b
    }

    /// Gradient container of the same structure, all zeros.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        z.for_each_tensor_mut(&mut |_, slice| slice.fill(0.0));
        z
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, slice| n += slice.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_tensor(&mut |_, slice| out.extend_from_slice(slice));
        out
    }

    /// Overwrite every tensor from a flat buffer laid out in visitor order.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_tensor_mut(&mut |_, slice| {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        });
        assert_eq!(offset, flat.len(), "flat buffer length mismatch");
    }

    /// Tensor names and shapes in visitor order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        visit_tensors(self, &mut |name, shape, _| {
            shapes.push((name.to_string(), shape.to_vec()))
        });
        shapes
    }

    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &[f64])) {
        visit_tensors(self, &mut |name, _, data| f(name, data));
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_tensors_mut(self, f);
    }
}

// Twin read-only / mutable traversals; a test holds them to the same order.

fn visit_tensors(p: &ModelParams, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    let mut emit2 = |name: String, a: &Array2<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])| {
        f(
            &name,
            &[a.nrows(), a.ncols()],
            a.as_slice().expect("standard layout"),
        );
    };
    let mut emit1 =
        |name: String, a: &ndarray::Array1<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])| {
            f(&name, &[a.len()], a.as_slice().expect("standard layout"));
        };

    emit2("item_emb".into(), &p.item_emb, f);
    emit2("pos_emb".into(), &p.pos_emb, f);
    for (e, stack) in p.encoders.iter().enumerate() {
        for (l, layer) in stack.layers.iter().enumerate() {
            let pre = format!("enc{e}.layer{l}");
            emit2(format!("{pre}.w_q"), &layer.attn.w_q, f);
            emit2(format!("{pre}.w_k"), &layer.attn.w_k, f);
            emit2(format!("{pre}.w_v"), &layer.attn.w_v, f);
            emit2(format!("{pre}.w_o"), &layer.attn.w_o, f);
            emit2(format!("{pre}.ffn.w1"), &layer.ffn.w1, f);
            emit1(format!("{pre}.ffn.b1"), &layer.ffn.b1, f);
            emit2(format!("{pre}.ffn.w2"), &layer.ffn.w2, f);
            emit1(format!("{pre}.ffn.b2"), &layer.ffn.b2, f);
            emit1(format!("{pre}.ln_attn.gamma"), &layer.ln_attn.gamma, f);
            emit1(format!("{pre}.ln_attn.beta"), &layer.ln_attn.beta, f);
            emit1(format!("{pre}.ln_ffn.gamma"), &layer.ln_ffn.gamma, f);
            emit1(format!("{pre}.ln_ffn.beta"), &layer.ln_ffn.beta, f);
            match &layer.adapter {
                EncAdapterParams::Lora(units) => {
                    for (tag, u) in ["x", "a", "b"].iter().zip(units.iter()) {
                        emit2(format!("{pre}.adapter_{tag}.down"), &u.down, f);
                        emit2(format!("{pre}.adapter_{tag}.up"), &u.up, f);
                    }
                }
                EncAdapterParams::Proj(projs) => {
                    for (tag, pr) in ["x", "a", "b"].iter().zip(projs.iter()) {
                        emit2(format!("{pre}.adapter_{tag}.w1"), &pr.w1, f);
                        emit2(format!("{pre}.adapter_{tag}.w2"), &pr.w2, f);
                        emit2(format!("{pre}.adapter_{tag}.w3"), &pr.w3, f);
                    }
                }
                EncAdapterParams::None => {}
            }
        }
    }
    for (name, proj) in [("proj_a", &p.proj_a), ("proj_b", &p.proj_b), ("proj_i", &p.proj_i)] {
        if let Some(pr) = proj {
            emit2(format!("{name}.w1"), &pr.w1, f);
            emit2(format!("{name}.w2"), &pr.w2, f);
            emit2(format!("{name}.w3"), &pr.w3, f);
        }
    }
    match &p.inv_adapter {
        InvAdapterParams::Lora { a, b } => {
            for (tag, u) in [("a", a), ("b", b)] {
                emit2(format!("inv_adapter_{tag}.down"), &u.down, f);
                emit2(format!("inv_adapter_{tag}.up"), &u.up, f);
            }
        }
        InvAdapterParams::Proj { a, b } => {
            for (tag, pr) in [("a", a), ("b", b)] {
                emit2(format!("inv_adapter_{tag}.w1"), &pr.w1, f);
                emit2(format!("inv_adapter_{tag}.w2"), &pr.w2, f);
                emit2(format!("inv_adapter_{tag}.w3"), &pr.w3, f);
            }
        }
        InvAdapterParams::None => {}
    }
    for (name, ln) in [
        ("ln_out_a", &p.ln_out_a),
        ("ln_out_b", &p.ln_out_b),
        ("ln_out_ia", &p.ln_out_ia),
        ("ln_out_ib", &p.ln_out_ib),
    ] {
        emit1(format!("{name}.gamma"), &ln.gamma, f);
        emit1(format!("{name}.beta"), &ln.beta, f);
    }
}

fn visit_tensors_mut(p: &mut ModelParams, f: &mut dyn FnMut(&str, &mut [f64])) {
    let mut emit2 = |name: String, a: &mut Array2<f64>, f: &mut dyn FnMut(&str, &mut [f64])| {
        f(&name, a.as_slice_mut().expect("standard layout"));
    };
    let mut emit1 =
        |name: String, a: &mut ndarray::Array1<f64>, f: &mut dyn FnMut(&str, &mut [f64])| {
            f(&name, a.as_slice_mut().expect("standard layout"));
        };

    emit2("item_emb".into(), &mut p.item_emb, f);
    emit2("pos_emb".into(), &mut p.pos_emb, f);
    for (e, stack) in p.encoders.iter_mut().enumerate() {
        for (l, layer) in stack.layers.iter_mut().enumerate() {
            let pre = format!("enc{e}.layer{l}");
            emit2(format!("{pre}.w_q"), &mut layer.attn.w_q, f);
            emit2(format!("{pre}.w_k"), &mut layer.attn.w_k, f);
            emit2(format!("{pre}.w_v"), &mut layer.attn.w_v, f);
            emit2(format!("{pre}.w_o"), &mut layer.attn.w_o, f);
            emit2(format!("{pre}.ffn.w1"), &mut layer.ffn.w1, f);
            emit1(format!("{pre}.ffn.b1"), &mut layer.ffn.b1, f);
            emit2(format!("{pre}.ffn.w2"), &mut layer.ffn.w2, f);
            emit1(format!("{pre}.ffn.b2"), &mut layer.ffn.b2, f);
            emit1(format!("{pre}.ln_attn.gamma"), &mut layer.ln_attn.gamma, f);
            emit1(format!("{pre}.ln_attn.beta"), &mut layer.ln_attn.beta, f);
            emit1(format!("{pre}.ln_ffn.gamma"), &mut layer.ln_ffn.gamma, f);
            emit1(format!("{pre}.ln_ffn.beta"), &mut layer.ln_ffn.beta, f);
            match &mut layer.adapter {
                EncAdapterParams::Lora(units) => {
                    for (tag, u) in ["x", "a", "b"].iter().zip(units.iter_mut()) {
                        emit2(format!("{pre}.adapter_{tag}.down"), &mut u.down, f);
                        emit2(format!("{pre}.adapter_{tag}.up"), &mut u.up, f);
                    }
                }
                EncAdapterParams::Proj(projs) => {
                    for (tag, pr) in ["x", "a", "b"].iter().zip(projs.iter_mut()) {
                        emit2(format!("{pre}.adapter_{tag}.w1"), &mut pr.w1, f);
                        emit2(format!("{pre}.adapter_{tag}.w2"), &mut pr.w2, f);
                        emit2(format!("{pre}.adapter_{tag}.w3"), &mut pr.w3, f);
                    }
                }
                EncAdapterParams::None => {}
            }
        }
    }
    for (name, proj) in [
        ("proj_a", &mut p.proj_a),
        ("proj_b", &mut p.proj_b),
        ("proj_i", &mut p.proj_i),
    ] {
        if let Some(pr) = proj {
            emit2(format!("{name}.w1"), &mut pr.w1, f);
            emit2(format!("{name}.w2"), &mut pr.w2, f);
            emit2(format!("{name}.w3"), &mut pr.w3, f);
        }
    }
    match &mut p.inv_adapter {
        InvAdapterParams::Lora { a, b } => {
            for (tag, u) in [("a", a), ("b", b)] {
                emit2(format!("inv_adapter_{tag}.down"), &mut u.down, f);
                emit2(format!("inv_adapter_{tag}.up"), &mut u.up, f);
            }
        }
        InvAdapterParams::Proj { a, b } => {
            for (tag, pr) in [("a", a), ("b", b)] {
                emit2(format!("inv_adapter_{tag}.w1"), &mut pr.w1, f);
                emit2(format!("inv_adapter_{tag}.w2"), &mut pr.w2, f);
                emit2(format!("inv_adapter_{tag}.w3"), &mut pr.w3, f);
            }
        }
        InvAdapterParams::None => {}
    }
    for (name, ln) in [
        ("ln_out_a", &mut p.ln_out_a),
        ("ln_out_b", &mut p.ln_out_b),
        ("ln_out_ia", &mut p.ln_out_ia),
        ("ln_out_ib", &mut p.ln_out_ib),
    ] {
        emit1(format!("{name}.gamma"), &mut ln.gamma, f);
        emit1(format!("{name}.beta"), &mut ln.beta, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn proj_dim_rounding() {
        assert_eq!(default_proj_dim(256), 680);
        assert_eq!(default_proj_dim(8), 24);
        assert_eq!(default_proj_dim(32), 88);
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            max_len: 6,
            n_heads: 2,
            r_d: 2,
            r_i: 2,
            p_drop: 0.0,
            n_negatives: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn visitor_orders_agree_and_flat_roundtrips() {
        let cfg = tiny_cfg();
        let mut rng = stream(11, "init", 0, 0);
        let mut params = ModelParams::init(&cfg, 5, 7, &mut rng);

        let mut names_ro = Vec::new();
        params.for_each_tensor(&mut |name, _| names_ro.push(name.to_string()));
        let mut names_rw = Vec::new();
        params.for_each_tensor_mut(&mut |name, _| names_rw.push(name.to_string()));
        assert_eq!(names_ro, names_rw);
        assert_eq!(names_ro.len(), params.tensor_shapes().len());

        let flat = params.to_flat();
        assert_eq!(flat.len(), params.param_count());
        let mut other = params.zeros_like();
        other.assign_from_flat(&flat);
        assert_eq!(other, params);
    }

    #[test]
    fn adapters_start_as_exact_noops() {
        let cfg = tiny_cfg();
        let mut rng = stream(12, "init", 0, 0);
        let params = ModelParams::init(&cfg, 5, 7, &mut rng);
        match &params.encoders[0].layers[0].adapter {
            EncAdapterParams::Lora(units) => {
                for u in units {
                    assert!(u.up.iter().all(|&v| v == 0.0));
                    assert!(u.down.iter().any(|&v| v != 0.0));
                }
            }
            other => panic!("expected low-rank adapters, got {other:?}"),
        }
        match &params.inv_adapter {
            InvAdapterParams::Lora { a, b } => {
                assert!(a.up.iter().all(|&v| v == 0.0));
                assert!(b.up.iter().all(|&v| v == 0.0));
            }
            other => panic!("expected low-rank adapters, got {other:?}"),
        }
    }

    #[test]
    fn variant_wirings_change_structure() {
        let mut rng = stream(13, "init", 0, 0);
        let base = tiny_cfg();
        let plain = ModelParams::init(&base, 5, 7, &mut rng);

        let mut no_proj = base.clone();
        no_proj.use_projectors = false;
        let v2 = ModelParams::init(&no_proj, 5, 7, &mut rng);
        assert!(v2.proj_a.is_none() && v2.proj_i.is_none());
        assert!(matches!(v2.inv_adapter, InvAdapterParams::Lora { .. }));

        let mut sep = base.clone();
        sep.encoder_adapter = EncoderAdapterKind::SeparateEncoders;
        let ve3 = ModelParams::init(&sep, 5, 7, &mut rng);
        assert_eq!(ve3.encoders.len(), 3);
        assert!(matches!(
            ve3.encoders[0].layers[0].adapter,
            EncAdapterParams::None
        ));

        let mut ip2 = base.clone();
        ip2.invariant_adapter = InvariantAdapterKind::ProjPerDomainOnly;
        let vip2 = ModelParams::init(&ip2, 5, 7, &mut rng);
        assert!(vip2.proj_i.is_none());
        assert!(vip2.proj_a.is_some());
        assert!(matches!(vip2.inv_adapter, InvAdapterParams::Proj { .. }));

        assert!(plain.proj_i.is_some());
    }

    #[test]
    fn config_validation_catches_problems() {
        let good = tiny_cfg();
        assert!(good.validate().is_empty());

        let mut bad = tiny_cfg();
        bad.n_heads = 3; // 8 % 3 != 0
        bad.r_d = 8; // not < d
        bad.p_drop = 1.0;
        let problems = bad.validate();
        assert!(problems.len() >= 3, "{problems:?}");
    }

    #[test]
    fn config_serde_roundtrip_is_lossless() {
        let cfg = tiny_cfg();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
