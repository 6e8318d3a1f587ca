//! Deformable Sampling Plugin: a small convolutional offset network predicts
//! per-position sampling offsets and feature amplitudes; features are
//! amplitude-modulated, resampled at the shifted locations, and fed as
//! keys/values into the unchanged frozen cross-attention.
//!
//! Zero-initialized offset head and amplitude channel make the plugin an
//! exact no-op at init: offsets are 0 and amplitudes are 2*sigmoid(0) = 1.

use crate::decoder::{identity_grid, CH, FEAT, LN_EPS};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamGroup, Var};

/// Default offset clamp in normalized coordinates (about two feature cells).
pub const DEFAULT_S_P: f64 = 0.25;

/// Install the per-layer offset-network weights into an adapter group.
/// conv_in maps CH -> CH trunk channels + 1 amplitude channel; the amplitude
/// column and the offset head start at zero.
pub fn init_dsp_params(group: &mut ParamGroup, layer: usize, rng: &mut Rng) {
    let p = format!("dsp.l{layer}");
    // trunk columns random, amplitude column (last) zero
    let mut w_in = vec![0.0; CH * (CH + 1)];
    let std = (1.0 / CH as f64).sqrt();
    for r in 0..CH {
        for c in 0..CH {
            w_in[r * (CH + 1) + c] = std * rng.gaussian();
        }
    }
    group.insert(&format!("{p}.conv_in.w"), &[CH, CH + 1], w_in);
    group.zeros(&format!("{p}.conv_in.b"), &[CH + 1]);
    group.ones(&format!("{p}.ln.g"), &[CH]);
    group.zeros(&format!("{p}.ln.b"), &[CH]);
    group.randn(&format!("{p}.dw.w"), &[5, 5, CH], rng);
    group.zeros(&format!("{p}.dw.b"), &[CH]);
    group.zeros(&format!("{p}.conv_out.w"), &[CH, 2]);
    group.zeros(&format!("{p}.conv_out.b"), &[2]);
}

/// Offset field (FEAT x FEAT x 2, |delta| < s_p) and amplitude field
/// (FEAT x FEAT x 1, values in (0, 2)).
pub fn predict_offsets_amplitudes(
    g: &mut Graph,
    adapter: &ParamGroup,
    layer: usize,
    x: Var,
    s_p: f64,
) -> Result<(Var, Var)> {
    let p = format!("dsp.l{layer}");
    let w_in = adapter.bind(g, &format!("{p}.conv_in.w"));
    let b_in = adapter.bind(g, &format!("{p}.conv_in.b"));
    let y = g.conv_1x1(x, w_in, b_in)?;
    let y = g.reshape(y, &[FEAT * FEAT, CH + 1])?;

    let trunk = g.slice_cols(y, 0, CH)?;
    let trunk = g.reshape(trunk, &[FEAT, FEAT, CH])?;
    let ln_g = adapter.bind(g, &format!("{p}.ln.g"));
    let ln_b = adapter.bind(g, &format!("{p}.ln.b"));
    let trunk = g.layer_norm(trunk, ln_g, ln_b, LN_EPS)?;
    let trunk = g.gelu(trunk);
    let dw = adapter.bind(g, &format!("{p}.dw.w"));
    let dwb = adapter.bind(g, &format!("{p}.dw.b"));
    let trunk = g.depthwise_conv5x5(trunk, dw, dwb)?;
    let w_out = adapter.bind(g, &format!("{p}.conv_out.w"));
    let b_out = adapter.bind(g, &format!("{p}.conv_out.b"));
    let raw = g.conv_1x1(trunk, w_out, b_out)?;
    let delta = g.scaled_tanh(raw, s_p)?;

    let ampch = g.slice_cols(y, CH, CH + 1)?;
    let ampch = g.sigmoid(ampch);
    let amp = g.scale(ampch, 2.0);
    let amp = g.reshape(amp, &[FEAT, FEAT, 1])?;
    Ok((delta, amp))
}

/// Amplitude-modulate then resample: grid_sample(amp .* x, p + delta) with
/// p the identity grid. Returns the features and the sampling locations.
pub fn resample_modulated(
    g: &mut Graph,
    x: Var,
    delta: Var,
    amp: Var,
) -> Result<(Var, Vec<f64>)> {
    let xstar = g.mul_channels(x, amp)?;
    let grid = g.constant(&[FEAT, FEAT, 2], identity_grid(FEAT, FEAT));
    let loc = g.add(grid, delta)?;
    let out = g.grid_sample_bilinear(xstar, loc)?;
    Ok((out, g.data(loc).to_vec()))
}

pub fn init_adapter(rng: &mut Rng) -> ParamGroup {
    let mut group = ParamGroup::new("adapter");
    for l in 0..crate::decoder::LAYERS {
        init_dsp_params(&mut group, l, rng);
        crate::drp::init_drp_params(&mut group, l, rng);
    }
    group
}
