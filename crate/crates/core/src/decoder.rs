//! Toy promptable mask decoder: strided patch encoder, Fourier prompt
//! encoder, two decoder layers (token self-attention, token-to-image
//! cross-attention, MLP, image-to-token cross-attention) and a bilinear
//! upsampling mask head. The token-to-image block is where the sampling
//! strategies plug in.

use std::path::Path;

use serde::Serialize;

use crate::attention::{KvCtx, KvStrategy};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::pgm;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamGroup, Var};

pub const IMG: usize = 64;
pub const STRIDE: usize = 4;
pub const FEAT: usize = IMG / STRIDE; // 16
pub const N_POS: usize = FEAT * FEAT; // 256
pub const CH: usize = 32;
pub const MLP_HIDDEN: usize = 4 * CH;
pub const LAYERS: usize = 2;
pub const LN_EPS: f64 = 1e-5;
const PE_FREQS: usize = 8;

/// 8-frequency sinusoidal features of normalized (x, y) in [0, 1]; CH dims.
pub fn fourier_pe(xn: f64, yn: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(CH);
    for k in 0..PE_FREQS {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push((f * xn).sin());
        out.push((f * xn).cos());
    }
    for k in 0..PE_FREQS {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push((f * yn).sin());
        out.push((f * yn).cos());
    }
    out
}

fn image_pe_table() -> Vec<f64> {
    let mut t = Vec::with_capacity(N_POS * CH);
    for i in 0..FEAT {
        for j in 0..FEAT {
            let xn = (j as f64 + 0.5) / FEAT as f64;
            let yn = (i as f64 + 0.5) / FEAT as f64;
            t.extend(fourier_pe(xn, yn));
        }
    }
    t
}

/// Identity sampling grid for an h×w map, align-corners normalized coords,
/// (u, v) pairs row-major.
pub fn identity_grid(h: usize, w: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            g.push(if w > 1 { 2.0 * j as f64 / (w as f64 - 1.0) - 1.0 } else { 0.0 });
            g.push(if h > 1 { 2.0 * i as f64 / (h as f64 - 1.0) - 1.0 } else { 0.0 });
        }
    }
    g
}

/// Grid that upsamples a FEAT×FEAT map to IMG×IMG (align-corners bilinear).
fn upsample_grid() -> Vec<f64> {
    let mut g = Vec::with_capacity(IMG * IMG * 2);
    for i in 0..IMG {
        for j in 0..IMG {
            g.push(2.0 * j as f64 / (IMG as f64 - 1.0) - 1.0);
            g.push(2.0 * i as f64 / (IMG as f64 - 1.0) - 1.0);
        }
    }
    g
}

/// Initialize the stage-1 (base) parameter group.
pub fn init_base(rng: &mut Rng) -> ParamGroup {
    let mut g = ParamGroup::new("base");
    // encoder
    g.randn("enc.patch.w", &[STRIDE * STRIDE, CH], rng);
    g.zeros("enc.patch.b", &[CH]);
    g.ones("enc.ln1.g", &[CH]);
    g.zeros("enc.ln1.b", &[CH]);
    g.randn("enc.dw.w", &[5, 5, CH], rng);
    g.zeros("enc.dw.b", &[CH]);
    g.ones("enc.ln2.g", &[CH]);
    g.zeros("enc.ln2.b", &[CH]);
    g.randn("enc.proj.w", &[CH, CH], rng);
    g.zeros("enc.proj.b", &[CH]);
    // prompt encoder
    g.randn("prompt.mask_token", &[1, CH], rng);
    g.randn("prompt.box_tl", &[1, CH], rng);
    g.randn("prompt.box_br", &[1, CH], rng);
    g.randn("prompt.point", &[1, CH], rng);
    g.randn("prompt.maskproj.w", &[1, CH], rng);
    g.zeros("prompt.maskproj.b", &[CH]);
    // decoder layers
    for l in 0..LAYERS {
        for blk in ["self", "t2i", "i2t"] {
            for proj in ["q", "k", "v", "o"] {
                g.randn(&format!("dec.l{l}.{blk}.{proj}.w"), &[CH, CH], rng);
                g.zeros(&format!("dec.l{l}.{blk}.{proj}.b"), &[CH]);
            }
        }
        for ln in ["ln1", "ln2", "ln3", "ln4"] {
            g.ones(&format!("dec.l{l}.{ln}.g"), &[CH]);
            g.zeros(&format!("dec.l{l}.{ln}.b"), &[CH]);
        }
        g.randn(&format!("dec.l{l}.mlp.w1"), &[CH, MLP_HIDDEN], rng);
        g.zeros(&format!("dec.l{l}.mlp.b1"), &[MLP_HIDDEN]);
        g.randn(&format!("dec.l{l}.mlp.w2"), &[MLP_HIDDEN, CH], rng);
        g.zeros(&format!("dec.l{l}.mlp.b2"), &[CH]);
    }
    // mask head
    g.randn("head.feat.w", &[CH, CH], rng);
    g.zeros("head.feat.b", &[CH]);
    g.randn("head.tok.w1", &[CH, CH], rng);
    g.zeros("head.tok.b1", &[CH]);
    g.randn("head.tok.w2", &[CH, CH], rng);
    g.zeros("head.tok.b2", &[CH]);
    g
}

fn patchify(image: &[u8]) -> Vec<f64> {
    debug_assert_eq!(image.len(), IMG * IMG);
    let mut out = Vec::with_capacity(N_POS * STRIDE * STRIDE);
    for pi in 0..FEAT {
        for pj in 0..FEAT {
            for di in 0..STRIDE {
                for dj in 0..STRIDE {
                    let y = pi * STRIDE + di;
                    let x = pj * STRIDE + dj;
                    out.push(image[y * IMG + x] as f64 / 255.0);
                }
            }
        }
    }
    out
}

/// Frozen-encoder forward: IMG×IMG grayscale -> FEAT×FEAT×CH features with
/// positional encoding added.
pub fn encode_image(g: &mut Graph, base: &ParamGroup, image: &[u8]) -> Result<Var> {
    if image.len() != IMG * IMG {
        return Err(Error::Config(format!(
            "encode_image expects a {IMG}x{IMG} raster, got {} pixels",
            image.len()
        )));
    }
    let patches = g.constant(&[N_POS, STRIDE * STRIDE], patchify(image));
    let w = base.bind(g, "enc.patch.w");
    let b = base.bind(g, "enc.patch.b");
    let x = g.matmul(patches, w)?;
    let x = g.add_bias(x, b)?;
    let g1 = base.bind(g, "enc.ln1.g");
    let b1 = base.bind(g, "enc.ln1.b");
    let x = g.layer_norm(x, g1, b1, LN_EPS)?;
    let x = g.reshape(x, &[FEAT, FEAT, CH])?;
    let dw = base.bind(g, "enc.dw.w");
    let dwb = base.bind(g, "enc.dw.b");
    let h = g.depthwise_conv5x5(x, dw, dwb)?;
    let g2 = base.bind(g, "enc.ln2.g");
    let b2 = base.bind(g, "enc.ln2.b");
    let h = g.layer_norm(h, g2, b2, LN_EPS)?;
    let h = g.gelu(h);
    let pw = base.bind(g, "enc.proj.w");
    let pb = base.bind(g, "enc.proj.b");
    let h = g.conv_1x1(h, pw, pb)?;
    // positional encodings are re-added to queries/keys inside the decoder,
    // so the feature stream itself stays position-free
    g.add(x, h)
}

/// Tokenize a prompt: output-mask token first, then prompt-derived tokens.
/// Coarse masks are embedded densely via [`add_mask_prompt`], never here.
pub fn encode_prompts(
    g: &mut Graph,
    base: &ParamGroup,
    prompt: &crate::prompts::PromptSpec,
    img_w: usize,
    img_h: usize,
) -> Result<Var> {
    use crate::prompts::PromptPayload::*;
    let mask_tok = base.bind(g, "prompt.mask_token");
    let mut parts = vec![mask_tok];
    match &prompt.payload {
        GtBox(b) | NoisyBox(b) => {
            let tl = g.constant(&[1, CH], fourier_pe(b.x0 / img_w as f64, b.y0 / img_h as f64));
            let tl_emb = base.bind(g, "prompt.box_tl");
            parts.push(g.add(tl, tl_emb)?);
            let br = g.constant(&[1, CH], fourier_pe(b.x1 / img_w as f64, b.y1 / img_h as f64));
            let br_emb = base.bind(g, "prompt.box_br");
            parts.push(g.add(br, br_emb)?);
        }
        Points(ps) => {
            if ps.points.is_empty() {
                return Err(Error::Config("point prompt with no points".into()));
            }
            for p in &ps.points {
                let pe = g.constant(&[1, CH], fourier_pe(p.x / img_w as f64, p.y / img_h as f64));
                let pt_emb = base.bind(g, "prompt.point");
                parts.push(g.add(pe, pt_emb)?);
            }
        }
        CoarseMask { .. } => {
            return Err(Error::Config(
                "coarse masks are dense prompts; embed them with add_mask_prompt".into(),
            ));
        }
    }
    g.concat_rows(&parts)
}

/// Downsample the coarse mask to feature resolution, project through a
/// learned 1x1 map, add to the embedding.
pub fn add_mask_prompt(
    g: &mut Graph,
    base: &ParamGroup,
    emb: Var,
    coarse: &BinaryMask,
) -> Result<Var> {
    if coarse.width != IMG || coarse.height != IMG {
        return Err(Error::Shape {
            op: "add_mask_prompt",
            lhs: vec![IMG, IMG],
            rhs: vec![coarse.height, coarse.width],
        });
    }
    // 4x4 average pool down to FEAT x FEAT
    let mut pooled = Vec::with_capacity(N_POS);
    for pi in 0..FEAT {
        for pj in 0..FEAT {
            let mut acc = 0.0;
            for di in 0..STRIDE {
                for dj in 0..STRIDE {
                    if coarse.get(pj * STRIDE + dj, pi * STRIDE + di) {
                        acc += 1.0;
                    }
                }
            }
            pooled.push(acc / (STRIDE * STRIDE) as f64);
        }
    }
    let m = g.constant(&[FEAT, FEAT, 1], pooled);
    let w = base.bind(g, "prompt.maskproj.w");
    let b = base.bind(g, "prompt.maskproj.b");
    let dense = g.conv_1x1(m, w, b)?;
    g.add(emb, dense)
}

/// Single-head scaled-dot attention with separate query/key/value inputs,
/// so positional encodings can be re-added to queries and keys at every
/// layer while the value stream stays position-free.
/// Returns (output rows, attention).
fn attn_block(
    g: &mut Graph,
    base: &ParamGroup,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
) -> Result<(Var, Var)> {
    let qw = base.bind(g, &format!("{prefix}.q.w"));
    let qb = base.bind(g, &format!("{prefix}.q.b"));
    let kw = base.bind(g, &format!("{prefix}.k.w"));
    let kb = base.bind(g, &format!("{prefix}.k.b"));
    let vw = base.bind(g, &format!("{prefix}.v.w"));
    let vb = base.bind(g, &format!("{prefix}.v.b"));
    let ow = base.bind(g, &format!("{prefix}.o.w"));
    let ob = base.bind(g, &format!("{prefix}.o.b"));
    let q = g.matmul(q_in, qw)?;
    let q = g.add_bias(q, qb)?;
    let k = g.matmul(k_in, kw)?;
    let k = g.add_bias(k, kb)?;
    let v = g.matmul(v_in, vw)?;
    let v = g.add_bias(v, vb)?;
    let logits = g.matmul_tb(q, k)?;
    let logits = g.scale(logits, 1.0 / (CH as f64).sqrt());
    let attn = g.softmax_rows(logits)?;
    let out = g.matmul(attn, v)?;
    let out = g.matmul(out, ow)?;
    let out = g.add_bias(out, ob)?;
    Ok((out, attn))
}

fn layer_norm_named(g: &mut Graph, base: &ParamGroup, name: &str, x: Var) -> Result<Var> {
    let gamma = base.bind(g, &format!("{name}.g"));
    let beta = base.bind(g, &format!("{name}.b"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Per-layer token-to-image attention weights plus the key/value sampling
/// locations the strategy used.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub layer: usize,
    /// T x N_POS row-stochastic weights
    pub weights: Vec<f64>,
    pub tokens: usize,
    /// N_POS (u, v) normalized sampling locations
    pub sample_locs: Vec<f64>,
    /// routing weights when the routed strategy ran
    pub alpha: Option<(f64, f64)>,
}

pub struct DecoderOutput {
    /// FEAT x FEAT logits
    pub low_logits: Var,
    /// IMG x IMG logits (bilinear upsample of the low map)
    pub full_logits: Var,
    pub records: Vec<AttentionRecord>,
}

/// Full two-layer decoder forward. `strategy` chooses how the K/V features
/// of the token-to-image block are produced on both layers.
pub fn run_decoder(
    g: &mut Graph,
    base: &ParamGroup,
    emb: Var,
    tokens: Var,
    strategy: &dyn KvStrategy,
    adapter: Option<&ParamGroup>,
    s_p: f64,
) -> Result<DecoderOutput> {
    if strategy.needs_adapter() && adapter.is_none() {
        return Err(Error::Config(format!(
            "attention strategy '{}' requires adapter weights",
            strategy.name()
        )));
    }
    let t_count = g.shape(tokens)[0];
    let mut x = emb; // FEAT x FEAT x CH
    let mut t = tokens; // T x CH
    // original prompt embeddings and the image grid encoding, re-added to
    // queries and keys at every layer
    let tok_pe = tokens;
    let img_pe = g.constant(&[N_POS, CH], image_pe_table());
    let mut records = Vec::with_capacity(LAYERS);

    for l in 0..LAYERS {
        // token self-attention
        let t_q = g.add(t, tok_pe)?;
        let (sa, _) = attn_block(g, base, &format!("dec.l{l}.self"), t_q, t_q, t)?;
        let t1 = g.add(t, sa)?;
        t = layer_norm_named(g, base, &format!("dec.l{l}.ln1"), t1)?;

        // token-to-image cross-attention through the sampling strategy
        let t_o = g.slice_rows(t, 0, 1)?;
        let kv_out = strategy.kv(KvCtx { g, layer: l, features: x, t_o, adapter, s_p })?;
        let kv_flat = g.reshape(kv_out.features, &[N_POS, CH])?;
        let t_q = g.add(t, tok_pe)?;
        let k_in = g.add(kv_flat, img_pe)?;
        let (ca, attn) = attn_block(g, base, &format!("dec.l{l}.t2i"), t_q, k_in, kv_flat)?;
        records.push(AttentionRecord {
            layer: l,
            weights: g.data(attn).to_vec(),
            tokens: t_count,
            sample_locs: kv_out.sample_locs,
            alpha: kv_out.alpha,
        });
        let t2 = g.add(t, ca)?;
        t = layer_norm_named(g, base, &format!("dec.l{l}.ln2"), t2)?;

        // token MLP
        let w1 = base.bind(g, &format!("dec.l{l}.mlp.w1"));
        let b1 = base.bind(g, &format!("dec.l{l}.mlp.b1"));
        let w2 = base.bind(g, &format!("dec.l{l}.mlp.w2"));
        let b2 = base.bind(g, &format!("dec.l{l}.mlp.b2"));
        let h = g.matmul(t, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add_bias(h, b2)?;
        let t3 = g.add(t, h)?;
        t = layer_norm_named(g, base, &format!("dec.l{l}.ln3"), t3)?;

        // image-to-token cross-attention on the residual image stream
        let x_flat = g.reshape(x, &[N_POS, CH])?;
        let x_q = g.add(x_flat, img_pe)?;
        let t_k = g.add(t, tok_pe)?;
        let (ia, _) = attn_block(g, base, &format!("dec.l{l}.i2t"), x_q, t_k, t)?;
        let x1 = g.add(x_flat, ia)?;
        let x1 = layer_norm_named(g, base, &format!("dec.l{l}.ln4"), x1)?;
        x = g.reshape(x1, &[FEAT, FEAT, CH])?;
    }

    // mask head: per-pixel embedding dotted with the output-mask token
    let fw = base.bind(g, "head.feat.w");
    let fb = base.bind(g, "head.feat.b");
    let h = g.conv_1x1(x, fw, fb)?;
    let h = g.gelu(h);
    let h_flat = g.reshape(h, &[N_POS, CH])?;
    let t0 = g.slice_rows(t, 0, 1)?;
    let w1 = base.bind(g, "head.tok.w1");
    let b1 = base.bind(g, "head.tok.b1");
    let w2 = base.bind(g, "head.tok.w2");
    let b2 = base.bind(g, "head.tok.b2");
    let m = g.matmul(t0, w1)?;
    let m = g.add_bias(m, b1)?;
    let m = g.gelu(m);
    let m = g.matmul(m, w2)?;
    let m = g.add_bias(m, b2)?;
    let low = g.matmul_tb(h_flat, m)?; // N_POS x 1
    let low_hw1 = g.reshape(low, &[FEAT, FEAT, 1])?;
    let up_grid = g.constant(&[IMG, IMG, 2], upsample_grid());
    let full = g.grid_sample_bilinear(low_hw1, up_grid)?;
    let full = g.reshape(full, &[IMG, IMG])?;
    let low = g.reshape(low, &[FEAT, FEAT])?;
    Ok(DecoderOutput { low_logits: low, full_logits: full, records })
}

/// Write per-token attention heatmaps as PGM (linear scale to 0-255) plus a
/// JSON sidecar with the sampling locations.
pub fn dump_attention(record: &AttentionRecord, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for tok in 0..record.tokens {
        let row = &record.weights[tok * N_POS..(tok + 1) * N_POS];
        let max = row.iter().cloned().fold(0.0f64, f64::max);
        let pixels: Vec<u8> = row
            .iter()
            .map(|w| if max > 0.0 { (w / max * 255.0).round() as u8 } else { 0 })
            .collect();
        let path = dir.join(format!("{stem}.layer{}.token{:02}.pgm", record.layer, tok));
        pgm::write_gray(&path, FEAT, FEAT, &pixels)?;
    }
    #[derive(Serialize)]
    struct Sidecar<'a> {
        layer: usize,
        tokens: usize,
        sample_locs: &'a [f64],
        alpha: Option<(f64, f64)>,
    }
    let sidecar = Sidecar {
        layer: record.layer,
        tokens: record.tokens,
        sample_locs: &record.sample_locs,
        alpha: record.alpha,
    };
    let path = dir.join(format!("{stem}.layer{}.json", record.layer));
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("serializes"))
        .map_err(|e| Error::io(path.display().to_string(), e))
}
