//! Hand-written backward pass mirroring `forward`. Gradients accumulate
//! into a `ModelParams` of the same structure as the parameters.

use ndarray::Array2;

use crate::corpus::Domain;
use crate::error::Result;

use super::forward::{AdapterCache, EmbedCache, EncodeCache, ForwardCache, SpecCache};
use super::layers::{ffn_backward, ln_backward, lora_backward, mha_backward, proj_backward};
use super::{EncAdapterParams, InvAdapterParams, ModelConfig, ModelParams};

/// Propagate loss gradients on the fused outputs back to every parameter.
/// `d_rec_a` / `d_rec_b` are d(loss)/d(rec) of shape T' x d.
pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    d_rec_a: &Array2<f64>,
    d_rec_b: &Array2<f64>,
    grads: &mut ModelParams,
) -> Result<()> {
    // Fusion is a plain sum: both branches receive the output gradient.
    let d_h_enc_a = spec_backward(params, cfg, &cache.spec_a, Domain::A, d_rec_a, grads);
    let d_h_enc_b = spec_backward(params, cfg, &cache.spec_b, Domain::B, d_rec_b, grads);
    let d_h_enc_x = invariant_backward(params, cfg, cache, d_rec_a, d_rec_b, grads);

    let d_e_x = encode_backward(params, cfg, &cache.enc_x, &d_h_enc_x, grads);
    let d_e_a = encode_backward(params, cfg, &cache.enc_a, &d_h_enc_a, grads);
    let d_e_b = encode_backward(params, cfg, &cache.enc_b, &d_h_enc_b, grads);

    embed_backward(&cache.embed_x, &d_e_x, grads);
    embed_backward(&cache.embed_a, &d_e_a, grads);
    embed_backward(&cache.embed_b, &d_e_b, grads);
    Ok(())
}

fn spec_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &SpecCache,
    domain: Domain,
    d_out: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let (ln_params, proj_params) = match domain {
        Domain::A => (&params.ln_out_a, &params.proj_a),
        Domain::B => (&params.ln_out_b, &params.proj_b),
    };
    let ln_grads = match domain {
        Domain::A => &mut grads.ln_out_a,
        Domain::B => &mut grads.ln_out_b,
    };
    let dsum = ln_backward(ln_params, &cache.ln, d_out, ln_grads);
    let mut d_h_enc = dsum.clone();
    if let (Some(pr), Some((proj_cache, outer_mask))) = (proj_params, &cache.proj) {
        let proj_grads = match domain {
            Domain::A => grads.proj_a.as_mut().expect("grads mirror params"),
            Domain::B => grads.proj_b.as_mut().expect("grads mirror params"),
        };
        let d_proj_y = outer_mask.apply(&dsum);
        d_h_enc += &proj_backward(pr, cfg.swish_beta, proj_cache, &d_proj_y, proj_grads);
    }
    d_h_enc
}

fn invariant_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    d_rec_a: &Array2<f64>,
    d_rec_b: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let inv = &cache.inv;
    let dsum_a = ln_backward(&params.ln_out_ia, &inv.ln_a, d_rec_a, &mut grads.ln_out_ia);
    let dsum_b = ln_backward(&params.ln_out_ib, &inv.ln_b, d_rec_b, &mut grads.ln_out_ib);

    // Skip connections.
    let mut d_h_x = &dsum_a + &dsum_b;

    // Shared invariant projector: one forward value feeds both targets
    // through independent branch dropouts, so its output gradient is the
    // masked sum of both.
    if let (Some(pr), Some(shared_cache)) = (&params.proj_i, &inv.shared) {
        let d_shared = inv.drop_shared_a.apply(&dsum_a) + inv.drop_shared_b.apply(&dsum_b);
        let proj_grads = grads.proj_i.as_mut().expect("grads mirror params");
        d_h_x += &proj_backward(pr, cfg.swish_beta, shared_cache, &d_shared, proj_grads);
    }

    // Per-target adapters.
    match (&params.inv_adapter, &mut grads.inv_adapter) {
        (InvAdapterParams::Lora { a, b }, InvAdapterParams::Lora { a: ga, b: gb }) => {
            if let AdapterCache::Lora(c) = &inv.adapter_a {
                let dy = inv.drop_adapter_a.apply(&dsum_a);
                d_h_x += &lora_backward(a, c, &dy, ga);
            }
            if let AdapterCache::Lora(c) = &inv.adapter_b {
                let dy = inv.drop_adapter_b.apply(&dsum_b);
                d_h_x += &lora_backward(b, c, &dy, gb);
            }
        }
        (InvAdapterParams::Proj { a, b }, InvAdapterParams::Proj { a: ga, b: gb }) => {
            if let AdapterCache::Proj(c) = &inv.adapter_a {
                let dy = inv.drop_adapter_a.apply(&dsum_a);
                d_h_x += &proj_backward(a, cfg.swish_beta, c, &dy, ga);
            }
            if let AdapterCache::Proj(c) = &inv.adapter_b {
                let dy = inv.drop_adapter_b.apply(&dsum_b);
                d_h_x += &proj_backward(b, cfg.swish_beta, c, &dy, gb);
            }
        }
        (InvAdapterParams::None, _) => {}
        _ => unreachable!("gradient container does not mirror the parameters"),
    }
    d_h_x
}

fn encode_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &EncodeCache,
    d_out: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let stack_idx = if params.encoders.len() == 3 {
        cache.tag.index()
    } else {
        0
    };
    let stack = &params.encoders[stack_idx];
    let grad_stack = &mut grads.encoders[stack_idx];
    let beta = cfg.swish_beta;

    let mut dy = d_out.clone();
    for (l, layer_cache) in cache.layers.iter().enumerate().rev() {
        let layer = &stack.layers[l];
        let grad_layer = &mut grad_stack.layers[l];

        let dsum2 = ln_backward(&layer.ln_ffn, &layer_cache.ln_ffn, &dy, &mut grad_layer.ln_ffn);
        let mut d_h = dsum2.clone();

        let d_ffn_y = layer_cache.drop_ffn.apply(&dsum2);
        d_h += &ffn_backward(&layer.ffn, beta, &layer_cache.ffn, &d_ffn_y, &mut grad_layer.ffn);

        match (&layer.adapter, &mut grad_layer.adapter, &layer_cache.adapter) {
            (
                EncAdapterParams::Lora(units),
                EncAdapterParams::Lora(gunits),
                AdapterCache::Lora(c),
            ) => {
                let idx = cache.tag.index();
                let d_ad = layer_cache.drop_adapter.apply(&dsum2);
                d_h += &lora_backward(&units[idx], c, &d_ad, &mut gunits[idx]);
            }
            (
                EncAdapterParams::Proj(projs),
                EncAdapterParams::Proj(gprojs),
                AdapterCache::Proj(c),
            ) => {
                let idx = cache.tag.index();
                let d_ad = layer_cache.drop_adapter.apply(&dsum2);
                d_h += &proj_backward(&projs[idx], beta, c, &d_ad, &mut gprojs[idx]);
            }
            (EncAdapterParams::None, EncAdapterParams::None, AdapterCache::None) => {}
            _ => unreachable!("adapter cache does not mirror the parameters"),
        }

        let dsum1 = ln_backward(
            &layer.ln_attn,
            &layer_cache.ln_attn,
            &d_h,
            &mut grad_layer.ln_attn,
        );
        let d_attn_y = layer_cache.drop_attn.apply(&dsum1);
        let d_x_attn = mha_backward(
            &layer.attn,
            &layer_cache.mha,
            &d_attn_y,
            cfg.n_heads,
            &mut grad_layer.attn,
        );
        dy = dsum1 + d_x_attn;
    }
    dy
}

fn embed_backward(cache: &EmbedCache, d_e: &Array2<f64>, grads: &mut ModelParams) {
    let d0 = cache.mask.apply(d_e);
    for (t, (&item, &pos)) in cache.items.iter().zip(&cache.positions).enumerate() {
        let row = d0.row(t);
        grads.item_emb.row_mut(item).scaled_add(1.0, &row);
        grads.pos_emb.row_mut(pos).scaled_add(1.0, &row);
    }
}
