//! Dynamic Routing Plugin: a small MLP on the output-mask token predicts
//! softmax routing weights, scaled by a learnable positive scalar, that
//! blend deformable and regular image features before the frozen
//! cross-attention.

use crate::decoder::{CH, LN_EPS};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamGroup, Var};

/// Router weights for one decoder layer. The output MLP starts at zero so
/// routing opens at an even (0.5, 0.5) split; the scale is stored as
/// exp(log_s) to stay positive under unconstrained optimization.
pub fn init_drp_params(group: &mut ParamGroup, layer: usize, rng: &mut Rng) {
    let p = format!("drp.l{layer}");
    group.randn(&format!("{p}.hidden.w"), &[CH, CH], rng);
    group.zeros(&format!("{p}.hidden.b"), &[CH]);
    group.ones(&format!("{p}.ln.g"), &[CH]);
    group.zeros(&format!("{p}.ln.b"), &[CH]);
    group.zeros(&format!("{p}.out.w"), &[CH, 2]);
    group.zeros(&format!("{p}.out.b"), &[2]);
    group.zeros(&format!("{p}.log_s"), &[1]);
}

/// alpha = softmax(MLP(t_o)) * s, shape 1x2. alpha1 + alpha2 == s.
pub fn route(g: &mut Graph, adapter: &ParamGroup, layer: usize, t_o: Var) -> Result<Var> {
    let p = format!("drp.l{layer}");
    let w = adapter.bind(g, &format!("{p}.hidden.w"));
    let b = adapter.bind(g, &format!("{p}.hidden.b"));
    let h = g.matmul(t_o, w)?;
    let h = g.add_bias(h, b)?;
    let ln_g = adapter.bind(g, &format!("{p}.ln.g"));
    let ln_b = adapter.bind(g, &format!("{p}.ln.b"));
    let h = g.layer_norm(h, ln_g, ln_b, LN_EPS)?;
    let h = g.gelu(h);
    let w2 = adapter.bind(g, &format!("{p}.out.w"));
    let b2 = adapter.bind(g, &format!("{p}.out.b"));
    let logits = g.matmul(h, w2)?;
    let logits = g.add_bias(logits, b2)?;
    let alpha = g.softmax_rows(logits)?;
    let log_s = adapter.bind(g, &format!("{p}.log_s"));
    let s = g.exp(log_s);
    g.scale_by(alpha, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::init_adapter;

    fn random_token(g: &mut Graph, seed: u64) -> Var {
        let mut rng = Rng::new(seed);
        let data = (0..CH).map(|_| rng.gaussian()).collect();
        g.constant(&[1, CH], data)
    }

    #[test]
    fn zero_init_routes_evenly() {
        let mut rng = Rng::new(1);
        let adapter = init_adapter(&mut rng);
        let mut g = Graph::new();
        let t_o = random_token(&mut g, 2);
        let alpha = route(&mut g, &adapter, 0, t_o).unwrap();
        assert_eq!(g.data(alpha), &[0.5, 0.5]);
    }

    #[test]
    fn alphas_sum_to_s_for_random_states() {
        let mut rng = Rng::new(3);
        for trial in 0..100 {
            let mut adapter = init_adapter(&mut rng);
            for name in ["drp.l0.out.w", "drp.l0.out.b", "drp.l0.log_s"] {
                for v in &mut adapter.get_mut(name).data {
                    *v = rng.gaussian();
                }
            }
            let mut g = Graph::new();
            let t_o = random_token(&mut g, 100 + trial);
            let alpha = route(&mut g, &adapter, 0, t_o).unwrap();
            let s = adapter.get("drp.l0.log_s").data[0].exp();
            let sum = g.data(alpha)[0] + g.data(alpha)[1];
            assert!((sum - s).abs() < 1e-12, "sum {sum} s {s}");
            assert!(g.data(alpha).iter().all(|a| *a >= 0.0));
        }
    }

    #[test]
    fn alpha_is_pure_function_of_token() {
        let mut rng = Rng::new(5);
        let adapter = init_adapter(&mut rng);
        let mut g = Graph::new();
        let t1 = random_token(&mut g, 7);
        let t2 = random_token(&mut g, 7);
        let a1 = route(&mut g, &adapter, 1, t1).unwrap();
        let a2 = route(&mut g, &adapter, 1, t2).unwrap();
        assert_eq!(g.data(a1), g.data(a2));
    }
}
