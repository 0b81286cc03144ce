//! Single-invariant corruptions of a valid bundle, each paired with the
//! finding code `validate_bundle` must raise for it.

use matex_core::bundle::codes;
use matex_core::{IntermediatesBundle, Tensor};

pub type Corruption = fn(&mut IntermediatesBundle);

pub fn catalogue() -> Vec<(&'static str, Corruption, &'static str)> {
    vec![
        ("empty shape", |b| b.attn_cls.shape = vec![b.n_layers, 0], codes::EMPTY_SHAPE),
        ("short data", |b| { b.patch_embed.data.pop(); }, codes::DATA_LENGTH),
        ("nan attention", |b| b.attn_cls.data[0] = f32::NAN, codes::NON_FINITE),
        ("inf gradient", |b| b.grad_patch_embed.data[3] = f32::INFINITY, codes::NON_FINITE),
        ("nan score", |b| b.score = f64::NAN, codes::NON_FINITE),
        ("zero heads", |b| b.n_heads = 0, codes::INVALID_METADATA),
        ("zero image width", |b| b.image.width_px = 0, codes::INVALID_METADATA),
        ("layer count", |b| b.n_layers += 1, codes::LAYER_COUNT_MISMATCH),
        ("grid too wide", |b| b.grid.w_patches += 1, codes::PATCH_COUNT_MISMATCH),
        ("negative attention", |b| {
            b.attn_cls.data[1] = -b.attn_cls.data[1];
        }, codes::NEGATIVE_ATTENTION),
        ("row sum", |b| {
            let n = b.n_patches();
            b.attn_cls.data[..n].iter_mut().for_each(|v| *v *= 2.0);
        }, codes::ROW_SUM_OUT_OF_RANGE),
        ("embed channels", |b| {
            let n = b.n_patches();
            b.patch_embed = Tensor::new(vec![n, b.channel_dim + 1], vec![0.5; n * (b.channel_dim + 1)]).unwrap();
        }, codes::SHAPE_MISMATCH),
        ("value norm shape", |b| {
            b.value_norms = Some(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        }, codes::SHAPE_MISMATCH),
        ("partial text", |b| b.grad_token_embed = None, codes::TEXT_TENSORS_PARTIAL),
        ("token count", |b| {
            b.tokens.as_mut().unwrap().push("extra".into());
        }, codes::TOKEN_COUNT_MISMATCH),
    ]
}
