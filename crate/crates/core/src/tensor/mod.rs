pub mod graph;
pub mod params;

pub use graph::{Graph, Var};
pub use params::{Adam, Param, ParamGroup};

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = g.constant(&[2, 2], vec![3.0, -1.0, 2.5, 7.0]);
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(y), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = g.constant(&[2, 1], vec![0.0, 1.0]);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]);
        let b = g.constant(&[2, 2], vec![0.0; 4]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 2], vec![0.0, 0.0]);
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);
        let big = g.constant(&[1, 2], vec![1000.0, 1000.0]);
        let yb = g.softmax_rows(big).unwrap();
        assert_eq!(g.data(yb), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 2], vec![0.0, 3.0f64.ln()]);
        let y = g.softmax_rows(x).unwrap();
        assert!(close(g.data(y)[0], 0.25, 1e-12));
        assert!(close(g.data(y)[1], 0.75, 1e-12));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 4], vec![5.0; 4]);
        let gamma = g.constant(&[4], vec![1.0; 4]);
        let beta = g.constant(&[4], vec![0.0; 4]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.data(y) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 2], vec![1.0, 3.0]);
        let gamma = g.constant(&[2], vec![1.0; 2]);
        let beta = g.constant(&[2], vec![0.0; 2]);
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!(close(g.data(y)[0], -1.0, 1e-6));
        assert!(close(g.data(y)[1], 1.0, 1e-6));
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![0.0, 10.0, 1.0]);
        let y = g.gelu(x);
        assert_eq!(g.data(y)[0], 0.0);
        assert!(close(g.data(y)[1], 10.0, 1e-6));
        assert!(close(g.data(y)[2], 0.841345, 1e-6));
    }

    #[test]
    fn scaled_tanh_values_and_bound() {
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![0.0, 1e6, 1.0]);
        let y = g.scaled_tanh(x, 4.0).unwrap();
        assert_eq!(g.data(y)[0], 0.0);
        assert!(g.data(y)[1].abs() < 4.0);
        let x2 = g.constant(&[1], vec![1.0]);
        let y2 = g.scaled_tanh(x2, 2.0).unwrap();
        assert!(close(g.data(y2)[0], 2.0 * 1.0f64.tanh(), 1e-12));
        assert!(close(g.data(y2)[0], 1.52318, 1e-5));
        let bad = g.constant(&[1], vec![0.0]);
        assert!(g.scaled_tanh(bad, 0.0).is_err());
    }

    #[test]
    fn conv1x1_identity_weight() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = g.constant(&[2], vec![0.0, 0.0]);
        let y = g.conv_1x1(x, w, b).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn conv1x1_degenerate_spatial_is_matvec() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 1, 2], vec![1.0, 2.0]);
        let w = g.constant(&[2, 1], vec![3.0, 4.0]);
        let b = g.constant(&[1], vec![0.5]);
        let y = g.conv_1x1(x, w, b).unwrap();
        assert_eq!(g.data(y), &[11.5]);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(&[3, 3, 1], (0..9).map(|i| i as f64).collect());
        let mut k = vec![0.0; 25];
        k[12] = 1.0; // center tap
        let w = g.constant(&[5, 5, 1], k);
        let b = g.constant(&[1], vec![0.0]);
        let y = g.depthwise_conv5x5(x, w, b).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn depthwise_ones_kernel_interior() {
        let mut g = Graph::new();
        let x = g.constant(&[9, 9, 1], vec![1.0; 81]);
        let w = g.constant(&[5, 5, 1], vec![1.0; 25]);
        let b = g.constant(&[1], vec![0.0]);
        let y = g.depthwise_conv5x5(x, w, b).unwrap();
        // interior position (4,4) sees the full 5x5 window
        assert_eq!(g.data(y)[(4 * 9 + 4)], 25.0);
    }

    #[test]
    fn grid_sample_identity_grid_exact() {
        let (h, w) = (4, 5);
        let mut g = Graph::new();
        let x = g.constant(&[h, w, 1], (0..h * w).map(|i| i as f64 * 0.37 - 1.0).collect());
        let mut loc = Vec::new();
        for i in 0..h {
            for j in 0..w {
                loc.push(2.0 * j as f64 / (w as f64 - 1.0) - 1.0);
                loc.push(2.0 * i as f64 / (h as f64 - 1.0) - 1.0);
            }
        }
        let l = g.constant(&[h, w, 2], loc);
        let y = g.grid_sample_bilinear(x, l).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_sample_midpoint() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 2, 1], vec![0.0, 1.0]);
        // midpoint between the two pixels: u = 0
        let l = g.constant(&[1, 1, 2], vec![0.0, -1.0]);
        let y = g.grid_sample_bilinear(x, l).unwrap();
        assert!(close(g.data(y)[0], 0.5, 1e-15));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0; 4]);
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![3.0], true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![2.0], true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[8.0]); // 2 * dy/dx
    }

    #[test]
    fn bce_zero_logits_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(&[4], vec![0.0; 4]);
        let y = g.bce_with_logits_mean(x, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(close(g.data(y)[0], 2.0f64.ln(), 1e-12));
    }
}
