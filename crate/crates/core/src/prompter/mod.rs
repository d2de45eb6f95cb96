//! Region prompter: the 21-entry face-part registry, caption label
//! extraction, the dual-branch prompter network and its losses.

mod fpn;
mod loss;
mod registry;

pub use fpn::{predict_indices, predict_regions, Fpn, FpnConfig, FpnOutput};
pub use loss::{bce_loss, bce_loss_logits, dice_loss, fpn_loss, DICE_SMOOTH};
pub use registry::{extract_region_labels, Registry, DEFAULT_REGIONS, NUM_REGIONS};

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, Tape, Var, DEFAULT_STEP};
    use crate::nn::Binding;
    use crate::Tensor;

    fn toy(fused: usize) -> FpnConfig {
        FpnConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            fused_layers: fused,
            conv_channels: 3,
            ..FpnConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        FpnConfig::default().validate().unwrap();
        let bad = FpnConfig {
            image_size: 50,
            ..FpnConfig::default()
        };
        assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
        let bad = FpnConfig {
            fused_layers: 3,
            ..FpnConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_image_and_zero_head_gives_bias_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fpn = Fpn::new(toy(2), &mut rng).unwrap();
        let w = fpn.head_weight();
        fpn.store.get_mut(w).data_mut().fill(0.0);
        let b = fpn.head_bias().unwrap();
        fpn.store.get_mut(b).data_mut().fill(0.3);
        let (logits, tokens) = fpn.infer(&Tensor::zeros([3, 16, 16])).unwrap();
        assert_eq!(logits, vec![0.3; 21]);
        assert_eq!(tokens.shape(), &[4, 8]);
    }

    #[test]
    fn zeroed_conv_branch_matches_attention_only_trunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fused = Fpn::new(toy(1), &mut rng).unwrap();
        let mut plain = Fpn::new(toy(0), &mut rng).unwrap();
        for (name, t) in fused.store.iter() {
            if let Some(id) = plain.store.find(name) {
                *plain.store.get_mut(id) = t.clone();
            }
        }
        for name in ["conv0.kernel", "conv0.bias"] {
            let id = fused.store.find(name).unwrap();
            fused.store.get_mut(id).data_mut().fill(0.0);
        }
        let image = Tensor::randn([3, 16, 16], 1.0, &mut rng);
        let (la, ta) = fused.infer(&image).unwrap();
        let (lb, tb) = plain.infer(&image).unwrap();
        for (a, b) in la.iter().zip(&lb).chain(ta.data().iter().zip(tb.data())) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_forward_and_loss_pass_grad_check() {
        let cfg = FpnConfig {
            image_size: 4,
            patch_size: 4,
            embed_dim: 4,
            heads: 2,
            mlp_ratio: 1,
            conv_channels: 2,
            ..toy(2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fpn = Fpn::new(cfg, &mut rng).unwrap();
        let mut inputs: Vec<Tensor> = fpn
            .store
            .tensors()
            .iter()
            .map(|t| Tensor::randn(t.shape().to_vec(), 0.5, &mut rng))
            .collect();
        inputs.push(Tensor::randn([3, 4, 4], 1.0, &mut rng));
        let n = fpn.store.len();
        let mut gt = vec![0.0; 21];
        gt[2] = 1.0;
        gt[7] = 1.0;
        let report = grad_check(
            |_t: &Tape, v: &[Var]| {
                let p = Binding::from_vars(v[..n].to_vec());
                let out = fpn.forward(&p, v[n])?;
                fpn.loss(&out, &gt)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn predict_regions_threshold_and_fallback() {
        let reg = Registry::default();
        let mut logits = vec![-10.0; 21];
        logits[4] = -9.0;
        assert_eq!(predict_regions(&logits, &reg, 0.5), ["ear"]);

        let mut probs = vec![0.1; 21];
        probs[reg.index_of("eye").unwrap()] = 0.9;
        probs[reg.index_of("lip").unwrap()] = 0.7;
        let logits: Vec<f64> = probs.iter().map(|p: &f64| (p / (1.0 - p)).ln()).collect();
        assert_eq!(predict_regions(&logits, &reg, 0.5), ["eye", "lip"]);
    }
}
