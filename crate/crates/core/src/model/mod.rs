//! Conv + transformer encoder with CTC and language-ID heads, reverse-mode
//! gradients, Adagrad, SpecAugment and checkpoint I/O.

mod checkpoint;
mod config;
mod encoder;
mod graph;
mod optim;
mod params;
mod specaugment;

pub use checkpoint::{
    checkpoint_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{EncoderConfig, JointLossConfig};
pub use encoder::{backward, ctc_head, joint_loss, lid_head, ForwardOutput, LossParts, Model, TrainExample};
pub use graph::{Graph, Var};
pub use optim::{AdagradConfig, LrSchedule, TrainState};
pub use params::{init_params, param_names, ModelParams};
pub use specaugment::{specaugment, SpecAugmentConfig};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SymbolTable;
    use crate::tensor::Tensor;

    fn tiny(layers: usize) -> Model {
        let mut cfg = EncoderConfig::new(3);
        cfg.n_layers = layers;
        cfg.n_heads = 2;
        cfg.d_model = 4;
        cfg.d_ff = 6;
        cfg.relpos_clip = 2;
        cfg.dropout = 0.0;
        let mut m = Model::new(cfg, SymbolTable::build(["ab"]), vec!["x".into(), "y".into(), "z".into()], 7).unwrap();
        // Give biases and gains non-trivial values so every path carries gradient.
        let mut k = 0.0;
        for t in m.params.tensors_mut() {
            for v in &mut t.data {
                k += 1.0;
                *v += 0.05 * (k * 0.61_f64).sin();
            }
        }
        m
    }

    fn feats(t: usize, d: usize, phase: f64) -> Tensor {
        Tensor::from_vec(t, d, (0..t * d).map(|i| (i as f64 * 0.7 + phase).sin()).collect())
    }

    fn batch() -> Vec<TrainExample> {
        vec![
            TrainExample {
                features: feats(11, 3, 0.0),
                target: vec![2, 3],
                language: Some(1),
            },
            TrainExample {
                features: feats(7, 3, 1.3),
                target: vec![3],
                language: None,
            },
        ]
    }

    fn mean_loss(m: &Model, b: &[TrainExample], gamma: f64) -> f64 {
        backward(m, b, gamma, None).unwrap().0.total
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = tiny(2);
        let b = batch();
        let (_, grads) = backward(&m, &b, 1.0, None).unwrap();
        let eps = 1e-5;
        for (ti, name) in m.params.names().to_vec().iter().enumerate() {
            let n = m.params.tensors()[ti].len();
            let mut worst: f64 = 0.0;
            for j in 0..n {
                let orig = m.params.tensors()[ti].data[j];
                m.params.tensors_mut()[ti].data[j] = orig + eps;
                let up = mean_loss(&m, &b, 1.0);
                m.params.tensors_mut()[ti].data[j] = orig - eps;
                let down = mean_loss(&m, &b, 1.0);
                m.params.tensors_mut()[ti].data[j] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads.tensors()[ti].data[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                worst = worst.max(rel);
            }
            assert!(worst <= 1e-3, "{name}: relative error {worst}");
        }
    }

    #[test]
    fn zero_gamma_gives_zero_lid_gradient() {
        let m = tiny(1);
        let (_, g) = backward(&m, &batch(), 0.0, None).unwrap();
        assert!(g.get("lid.w").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(g.get("ctc.w").unwrap().data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_is_affine_in_gamma() {
        let m = tiny(1);
        let b = &batch()[..1];
        let l0 = backward(&m, b, 0.0, None).unwrap().0;
        let l3 = backward(&m, b, 3.0, None).unwrap().0;
        let l10 = backward(&m, b, 10.0, None).unwrap().0;
        assert!((l10.total - l0.total - 10.0 * l0.lid).abs() < 1e-10);
        assert!((l3.total - l0.total - 3.0 * l0.lid).abs() < 1e-10);
        assert_eq!(l0.total, l0.ctc);
        let out = m.forward(&b[0].features).unwrap();
        let direct = joint_loss(&out.ctc_logits, &out.lid_logits, &b[0].target, 1, 10.0).unwrap();
        assert!((direct.total - l10.total).abs() < 1e-10);
    }

    #[test]
    fn lid_gradient_scales_with_gamma() {
        let m = tiny(1);
        let b = &batch()[..1];
        let g1 = backward(&m, b, 1.0, None).unwrap().1;
        let g2 = backward(&m, b, 2.0, None).unwrap().1;
        for (a, c) in g1.get("lid.w").unwrap().data.iter().zip(&g2.get("lid.w").unwrap().data) {
            assert!((2.0 * a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_lid_logits_give_ln3() {
        let logits = Tensor::from_vec(2, 3, vec![0.0; 6]);
        let l = joint_loss(&logits, &Tensor::zeros(1, 3), &[1], 2, 1.0).unwrap();
        assert!((l.lid - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let mut m = tiny(2);
        for (name, t) in m.params.names().to_vec().iter().zip(m.params.tensors_mut()) {
            if name != "final_ln.b" {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let b = m.params.get("final_ln.b").unwrap().data.clone();
        let h = m.encoder_forward(&feats(9, 3, 0.2)).unwrap();
        assert_eq!(h.rows, 3);
        for r in 0..h.rows {
            assert_eq!(h.row(r), b.as_slice());
        }
    }

    #[test]
    fn output_length_law() {
        let m = tiny(1);
        for t in 1..=200 {
            let h = m.encoder_forward(&feats(t, 3, 0.0)).unwrap();
            assert_eq!(h.rows, (t + 6 - 7) / 3 + 1);
            assert_eq!(h.rows, m.config.output_len(t));
        }
    }

    #[test]
    fn lid_head_is_permutation_invariant() {
        let m = tiny(1);
        let h = feats(6, 4, 0.4);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|r| h.row(r).to_vec()).collect();
        rows.reverse();
        rows.swap(1, 4);
        let p = Tensor::from_rows(&rows);
        let (a, b) = (lid_head(&m.params, &h), lid_head(&m.params, &p));
        assert!(a.max_abs_diff(&b) < 1e-12);
        let same = Tensor::from_rows(&[h.row(0).to_vec(), h.row(0).to_vec()]);
        let single = Tensor::from_rows(&[h.row(0).to_vec()]);
        assert!(lid_head(&m.params, &same).max_abs_diff(&lid_head(&m.params, &single)) < 1e-12);
    }

    #[test]
    fn heads_agree_with_graph_forward() {
        let m = tiny(2);
        let out = m.forward(&feats(10, 3, 0.9)).unwrap();
        assert!(ctc_head(&m.params, &out.hidden).max_abs_diff(&out.ctc_logits) < 1e-12);
        assert!(lid_head(&m.params, &out.hidden).max_abs_diff(&out.lid_logits) < 1e-12);
    }

    #[test]
    fn eval_forward_and_training_are_deterministic() {
        let m = tiny(2);
        let x = feats(10, 3, 0.1);
        assert_eq!(m.forward(&x).unwrap().ctc_logits, m.forward(&x).unwrap().ctc_logits);
        let run = || {
            let mut s = TrainState::new(m.clone(), LrSchedule::constant(0.03), 3);
            for step in 0..3 {
                let (_, g) = backward(&s.model, &batch(), 1.0, Some(step)).unwrap();
                s.optimizer_step(&g).unwrap();
            }
            s.model.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_wrong_dim() {
        let m = tiny(1);
        assert!(m.forward(&feats(5, 4, 0.0)).is_err());
    }
}
