//! Key/value sampling strategies for the token-to-image cross-attention,
//! registered by name and selected at runtime.
//!
//! Every strategy feeds the same frozen Q/K/V projections; what varies is
//! how the key/value feature map is produced:
//!   - `plain`:   the image features untouched (baseline CAttn)
//!   - `dsp`:     amplitude-modulated features resampled at learned offsets
//!   - `dsp-drp`: a routed blend alpha1 * deformable + alpha2 * plain

use crate::decoder::{identity_grid, FEAT};
use crate::drp;
use crate::dsp;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamGroup, Var};

pub struct KvCtx<'a> {
    pub g: &'a mut Graph,
    pub layer: usize,
    /// current image stream, FEAT x FEAT x CH
    pub features: Var,
    /// output-mask token after self-attention, 1 x CH
    pub t_o: Var,
    pub adapter: Option<&'a ParamGroup>,
    pub s_p: f64,
}

pub struct KvOut {
    pub features: Var,
    /// sampling locations actually used for keys/values, N x 2 normalized
    pub sample_locs: Vec<f64>,
    pub alpha: Option<(f64, f64)>,
}

pub trait KvStrategy: Sync {
    fn name(&self) -> &'static str;
    fn needs_adapter(&self) -> bool;
    fn kv(&self, ctx: KvCtx) -> Result<KvOut>;
}

/// Baseline: keys/values from the unmodified feature map.
pub struct PlainAttention;

impl KvStrategy for PlainAttention {
    fn name(&self) -> &'static str {
        "plain"
    }

    fn needs_adapter(&self) -> bool {
        false
    }

    fn kv(&self, ctx: KvCtx) -> Result<KvOut> {
        Ok(KvOut {
            features: ctx.features,
            sample_locs: identity_grid(FEAT, FEAT),
            alpha: None,
        })
    }
}

/// Pure deformable path: DCAttn keys/values.
pub struct DeformableAttention;

impl KvStrategy for DeformableAttention {
    fn name(&self) -> &'static str {
        "dsp"
    }

    fn needs_adapter(&self) -> bool {
        true
    }

    fn kv(&self, ctx: KvCtx) -> Result<KvOut> {
        let adapter = ctx.adapter.expect("checked by run_decoder");
        let (delta, amp) =
            dsp::predict_offsets_amplitudes(ctx.g, adapter, ctx.layer, ctx.features, ctx.s_p)?;
        let (feats, locs) = dsp::resample_modulated(ctx.g, ctx.features, delta, amp)?;
        Ok(KvOut { features: feats, sample_locs: locs, alpha: None })
    }
}

/// Deployed path: router blends deformable and plain features before K/V.
/// `forced` pins alpha to a constant, bypassing the router (test hook and
/// endpoint reductions).
pub struct RoutedAttention {
    pub forced: Option<(f64, f64)>,
}

impl RoutedAttention {
    pub fn learned() -> Self {
        RoutedAttention { forced: None }
    }

    pub fn forced(a1: f64, a2: f64) -> Self {
        RoutedAttention { forced: Some((a1, a2)) }
    }
}

impl KvStrategy for RoutedAttention {
    fn name(&self) -> &'static str {
        "dsp-drp"
    }

    fn needs_adapter(&self) -> bool {
        true
    }

    fn kv(&self, ctx: KvCtx) -> Result<KvOut> {
        let KvCtx { g, layer, features, t_o, adapter, s_p } = ctx;
        let adapter = adapter.expect("checked by run_decoder");
        let (delta, amp) = dsp::predict_offsets_amplitudes(g, adapter, layer, features, s_p)?;
        let (deformed, locs) = dsp::resample_modulated(g, features, delta, amp)?;
        let (a1, a2, alpha) = match self.forced {
            Some((a1, a2)) => {
                let v1 = g.scalar(a1);
                let v2 = g.scalar(a2);
                (v1, v2, (a1, a2))
            }
            None => {
                let alpha = drp::route(g, adapter, layer, t_o)?;
                let col = g.reshape(alpha, &[2, 1])?;
                let v1 = g.slice_rows(col, 0, 1)?;
                let v2 = g.slice_rows(col, 1, 2)?;
                (v1, v2, (g.data(alpha)[0], g.data(alpha)[1]))
            }
        };
        let lhs = g.scale_by(deformed, a1)?;
        let rhs = g.scale_by(features, a2)?;
        let blended = g.add(lhs, rhs)?;
        Ok(KvOut { features: blended, sample_locs: locs, alpha: Some(alpha) })
    }
}

/// Strategies selectable by name from config / CLI.
pub const STRATEGY_NAMES: &[&str] = &["plain", "dsp", "dsp-drp"];

pub fn lookup(name: &str) -> Result<Box<dyn KvStrategy>> {
    match name {
        "plain" => Ok(Box::new(PlainAttention)),
        "dsp" => Ok(Box::new(DeformableAttention)),
        "dsp-drp" => Ok(Box::new(RoutedAttention::learned())),
        other => Err(Error::Config(format!(
            "unknown attention strategy '{other}' (known: {})",
            STRATEGY_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_all_names() {
        for name in STRATEGY_NAMES {
            let s = lookup(name).unwrap();
            assert_eq!(&s.name(), name);
        }
        assert!(lookup("nope").is_err());
    }
}
