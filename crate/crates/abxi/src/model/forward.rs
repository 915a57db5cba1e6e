//! Forward pass over one sequence bundle, with caches for the backward pass.

use ndarray::Array2;

use crate::alignment::{SequenceBundle, Token};
use crate::corpus::Domain;
use crate::error::{Error, Result};

use super::layers::{
    ffn_forward, ln_forward, lora_forward, mha_forward, proj_forward, DropMask, FfnCache,
    LnCache, LoraCache, MhaCache, ProjCache, RunCtx,
};
use super::{EncAdapterParams, InvAdapterParams, ModelConfig, ModelParams, SeqTag};

/// Tally of multiply-accumulates actually spent in attention.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlopCount {
    pub attention_macs: u64,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    pub items: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: DropMask,
}

/// Sequence embedding: item row plus position row, then dropout in training.
/// PAD slots embed like any other token; masking happens downstream.
pub fn embed(
    params: &ModelParams,
    cfg: &ModelConfig,
    seq: &[Token],
    positions: &[usize],
    ctx: &mut RunCtx,
) -> Result<(Array2<f64>, EmbedCache)> {
    if seq.len() != positions.len() {
        return Err(Error::Shape(format!(
            "sequence length {} != positions length {}",
            seq.len(),
            positions.len()
        )));
    }
    let d = cfg.d;
    let mut out = Array2::zeros((seq.len(), d));
    let mut items = Vec::with_capacity(seq.len());
    let mut poss = Vec::with_capacity(seq.len());
    for (t, (tok, &pos)) in seq.iter().zip(positions).enumerate() {
        let item = tok.item as usize;
        if item >= params.item_emb.nrows() {
            return Err(Error::Shape(format!(
                "item index {item} out of range (vocab size {})",
                params.item_emb.nrows()
            )));
        }
        if pos >= params.pos_emb.nrows() {
            return Err(Error::Shape(format!(
                "position index {pos} out of range (max {})",
                params.pos_emb.nrows() - 1
            )));
        }
        let row = &params.item_emb.row(item) + &params.pos_emb.row(pos);
        out.row_mut(t).assign(&row);
        items.push(item);
        poss.push(pos);
    }
    let (out, mask) = ctx.dropout(&out);
    Ok((
        out,
        EmbedCache {
            items,
            positions: poss,
            mask,
        },
    ))
}

#[derive(Debug, Clone)]
pub enum AdapterCache {
    Lora(LoraCache),
    Proj(ProjCache),
    None,
}

#[derive(Debug, Clone)]
pub struct EncLayerCache {
    pub mha: MhaCache,
    pub drop_attn: DropMask,
    pub ln_attn: LnCache,
    pub ffn: FfnCache,
    pub drop_ffn: DropMask,
    pub adapter: AdapterCache,
    pub drop_adapter: DropMask,
    pub ln_ffn: LnCache,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub tag: SeqTag,
    pub layers: Vec<EncLayerCache>,
}

/// Shared-encoder pass for one stream. Attention is causal with PAD keys
/// masked; the feed-forward block carries the stream's adapter when one is
/// configured.
pub fn encode(
    params: &ModelParams,
    cfg: &ModelConfig,
    e_seq: &Array2<f64>,
    key_valid: &[bool],
    tag: SeqTag,
    ctx: &mut RunCtx,
    flops: &mut FlopCount,
) -> Result<(Array2<f64>, EncodeCache)> {
    if e_seq.nrows() != key_valid.len() {
        return Err(Error::Shape(format!(
            "embedding rows {} != mask length {}",
            e_seq.nrows(),
            key_valid.len()
        )));
    }
    let stack_idx = if params.encoders.len() == 3 {
        tag.index()
    } else {
        0
    };
    let stack = &params.encoders[stack_idx];
    let beta = cfg.swish_beta;
    let inner_drop = !cfg.single_proj_dropout;

    let mut x = e_seq.clone();
    let mut layers = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let (attn_y, mha) = mha_forward(
            &layer.attn,
            &x,
            key_valid,
            cfg.n_heads,
            &mut flops.attention_macs,
        );
        let (attn_d, drop_attn) = ctx.dropout(&attn_y);
        let (h, ln_attn) = ln_forward(&layer.ln_attn, &(&x + &attn_d));

        let (ffn_y, ffn) = ffn_forward(&layer.ffn, &h, beta);
        let (ffn_d, drop_ffn) = ctx.dropout(&ffn_y);

        let mut sum = &h + &ffn_d;
        let (adapter, drop_adapter) = match &layer.adapter {
            EncAdapterParams::Lora(units) => {
                let (y, cache) = lora_forward(&units[tag.index()], &h)?;
                let (yd, mask) = ctx.dropout(&y);
                sum += &yd;
                (AdapterCache::Lora(cache), mask)
            }
            EncAdapterParams::Proj(projs) => {
                let (y, cache) = proj_forward(&projs[tag.index()], &h, beta, ctx, inner_drop);
                let (yd, mask) = ctx.dropout(&y);
                sum += &yd;
                (AdapterCache::Proj(cache), mask)
            }
            EncAdapterParams::None => (AdapterCache::None, DropMask(None)),
        };

        let (x_next, ln_ffn) = ln_forward(&layer.ln_ffn, &sum);
        layers.push(EncLayerCache {
            mha,
            drop_attn,
            ln_attn,
            ffn,
            drop_ffn,
            adapter,
            drop_adapter,
            ln_ffn,
        });
        x = x_next;
    }
    Ok((x, EncodeCache { tag, layers }))
}

#[derive(Debug, Clone)]
pub struct SpecCache {
    pub proj: Option<(ProjCache, DropMask)>,
    pub ln: LnCache,
}

/// Domain-specific projection with skip connection:
/// out = LN(h_enc + Drop(Proj_d(h_enc))). Without projectors this is LN(h_enc).
pub fn project_specific(
    params: &ModelParams,
    cfg: &ModelConfig,
    h_enc: &Array2<f64>,
    domain: Domain,
    ctx: &mut RunCtx,
) -> (Array2<f64>, SpecCache) {
    let (proj_params, ln_params) = match domain {
        Domain::A => (&params.proj_a, &params.ln_out_a),
        Domain::B => (&params.proj_b, &params.ln_out_b),
    };
    let mut sum = h_enc.clone();
    let proj = proj_params.as_ref().map(|pr| {
        let (y, cache) = proj_forward(pr, h_enc, cfg.swish_beta, ctx, !cfg.single_proj_dropout);
        let (yd, mask) = ctx.dropout(&y);
        sum += &yd;
        (cache, mask)
    });
    let (out, ln) = ln_forward(ln_params, &sum);
    (out, SpecCache { proj, ln })
}

#[derive(Debug, Clone)]
pub struct InvCache {
    /// Shared invariant projector output cache; its value feeds both targets
    /// through independent branch dropouts.
    pub shared: Option<ProjCache>,
    pub drop_shared_a: DropMask,
    pub drop_shared_b: DropMask,
    pub adapter_a: AdapterCache,
    pub drop_adapter_a: DropMask,
    pub adapter_b: AdapterCache,
    pub drop_adapter_b: DropMask,
    pub ln_a: LnCache,
    pub ln_b: LnCache,
}

/// Both invariant-path outputs:
/// out_d = LN(h_x + Drop(Proj_i(h_x)) + Drop(adapter_d(h_x))).
pub fn invariant_paths(
    params: &ModelParams,
    cfg: &ModelConfig,
    h_x_enc: &Array2<f64>,
    ctx: &mut RunCtx,
) -> Result<((Array2<f64>, Array2<f64>), InvCache)> {
    let beta = cfg.swish_beta;
    let inner_drop = !cfg.single_proj_dropout;
    let shared = params
        .proj_i
        .as_ref()
        .map(|pr| proj_forward(pr, h_x_enc, beta, ctx, inner_drop));

    let mut run_target = |domain: Domain,
                          ctx: &mut RunCtx|
     -> Result<(Array2<f64>, DropMask, AdapterCache, DropMask, LnCache)> {
        let mut sum = h_x_enc.clone();
        let drop_shared = match &shared {
            Some((y, _)) => {
                let (yd, mask) = ctx.dropout(y);
                sum += &yd;
                mask
            }
            None => DropMask(None),
        };
        let (adapter, drop_adapter) = match &params.inv_adapter {
            InvAdapterParams::Lora { a, b } => {
                let unit = if domain == Domain::A { a } else { b };
                let (y, cache) = lora_forward(unit, h_x_enc)?;
                let (yd, mask) = ctx.dropout(&y);
                sum += &yd;
                (AdapterCache::Lora(cache), mask)
            }
            InvAdapterParams::Proj { a, b } => {
                let pr = if domain == Domain::A { a } else { b };
                let (y, cache) = proj_forward(pr, h_x_enc, beta, ctx, inner_drop);
                let (yd, mask) = ctx.dropout(&y);
                sum += &yd;
                (AdapterCache::Proj(cache), mask)
            }
            InvAdapterParams::None => (AdapterCache::None, DropMask(None)),
        };
        let ln_params = if domain == Domain::A {
            &params.ln_out_ia
        } else {
            &params.ln_out_ib
        };
        let (out, ln) = ln_forward(ln_params, &sum);
        Ok((out, drop_shared, adapter, drop_adapter, ln))
    };

    let (out_a, drop_shared_a, adapter_a, drop_adapter_a, ln_a) = run_target(Domain::A, ctx)?;
    let (out_b, drop_shared_b, adapter_b, drop_adapter_b, ln_b) = run_target(Domain::B, ctx)?;
    Ok((
        (out_a, out_b),
        InvCache {
            shared: shared.map(|(_, c)| c),
            drop_shared_a,
            drop_shared_b,
            adapter_a,
            drop_adapter_a,
            adapter_b,
            drop_adapter_b,
            ln_a,
            ln_b,
        },
    ))
}

/// Invariant projection for a single target domain (convenience wrapper).
pub fn project_invariant(
    params: &ModelParams,
    cfg: &ModelConfig,
    h_x_enc: &Array2<f64>,
    target: Domain,
    ctx: &mut RunCtx,
) -> Result<Array2<f64>> {
    let ((a, b), _) = invariant_paths(params, cfg, h_x_enc, ctx)?;
    Ok(match target {
        Domain::A => a,
        Domain::B => b,
    })
}

/// Element-wise sum of the domain-specific and invariant representations.
pub fn fuse(h_spec: &Array2<f64>, h_inv: &Array2<f64>) -> Result<Array2<f64>> {
    if h_spec.dim() != h_inv.dim() {
        return Err(Error::Shape(format!(
            "fuse shape mismatch: {:?} vs {:?}",
            h_spec.dim(),
            h_inv.dim()
        )));
    }
    Ok(h_spec + h_inv)
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub embed_x: EmbedCache,
    pub embed_a: EmbedCache,
    pub embed_b: EmbedCache,
    pub enc_x: EncodeCache,
    pub enc_a: EncodeCache,
    pub enc_b: EncodeCache,
    pub h_enc_x: Array2<f64>,
    pub h_enc_a: Array2<f64>,
    pub h_enc_b: Array2<f64>,
    pub spec_a: SpecCache,
    pub spec_b: SpecCache,
    pub inv: InvCache,
    pub flops: FlopCount,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub rec_a: Array2<f64>,
    pub rec_b: Array2<f64>,
    pub cache: ForwardCache,
}

fn key_valid(seq: &[Token]) -> Vec<bool> {
    seq.iter().map(|t| !t.is_pad()).collect()
}

/// Full forward pass: embed the three streams, encode each with its
/// adapter, project, and fuse into per-domain recommendation states of
/// shape T' x d.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    bundle: &SequenceBundle,
    ctx: &mut RunCtx,
) -> Result<Forward> {
    let mut flops = FlopCount::default();

    let (e_x, embed_x) = embed(params, cfg, &bundle.seq_x, &bundle.pos_x, ctx)?;
    let (e_a, embed_a) = embed(params, cfg, &bundle.seq_a, &bundle.pos_a, ctx)?;
    let (e_b, embed_b) = embed(params, cfg, &bundle.seq_b, &bundle.pos_b, ctx)?;

    let (h_enc_x, enc_x) = encode(
        params,
        cfg,
        &e_x,
        &key_valid(&bundle.seq_x),
        SeqTag::X,
        ctx,
        &mut flops,
    )?;
    let (h_enc_a, enc_a) = encode(
        params,
        cfg,
        &e_a,
        &key_valid(&bundle.seq_a),
        SeqTag::A,
        ctx,
        &mut flops,
    )?;
    let (h_enc_b, enc_b) = encode(
        params,
        cfg,
        &e_b,
        &key_valid(&bundle.seq_b),
        SeqTag::B,
        ctx,
        &mut flops,
    )?;

    let (h_p_a, spec_a) = project_specific(params, cfg, &h_enc_a, Domain::A, ctx);
    let (h_p_b, spec_b) = project_specific(params, cfg, &h_enc_b, Domain::B, ctx);
    let ((h_i2a, h_i2b), inv) = invariant_paths(params, cfg, &h_enc_x, ctx)?;

    let rec_a = fuse(&h_p_a, &h_i2a)?;
    let rec_b = fuse(&h_p_b, &h_i2b)?;

    Ok(Forward {
        rec_a,
        rec_b,
        cache: ForwardCache {
            embed_x,
            embed_a,
            embed_b,
            enc_x,
            enc_a,
            enc_b,
            h_enc_x,
            h_enc_a,
            h_enc_b,
            spec_a,
            spec_b,
            inv,
            flops,
        },
    })
}
