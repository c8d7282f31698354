//! Degradation behavior of sparse verification as the mass threshold moves:
//! per-round verdict drift against dense verification shrinks as p rises,
//! and measured KV reduction shrinks with it.

use specattn_core::decode::{generate, verification_drift, SpecConfig};
use specattn_core::harness::kv_reduction;
use specattn_core::layer_map::LayerMapping;
use specattn_core::model::{Model, ModelConfig};
use specattn_core::select::SelectionConfig;
use specattn_core::testutil::synthetic_corpus;

fn models() -> (Model, Model) {
    let draft = Model::new(ModelConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 32,
        d_head: 16,
        vocab: 256,
        max_seq: 512,
        seed: 61,
    })
    .unwrap();
    let verifier = Model::new(ModelConfig {
        n_layers: 8,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        vocab: 256,
        max_seq: 512,
        seed: 61,
    })
    .unwrap();
    (draft, verifier)
}

fn spec_cfg(p: f64, iterations: usize) -> SpecConfig {
    SpecConfig {
        gamma: 4,
        max_tokens: 96,
        selection: SelectionConfig {
            p,
            iterations,
            dense_prefix_layers: 2,
            ..SelectionConfig::default()
        },
        ..SpecConfig::default()
    }
}

#[test]
fn per_round_drift_shrinks_as_p_rises() {
    let (draft, verifier) = models();
    let mapping = LayerMapping::new(vec![0, 0, 1, 1, 2, 2, 3, 3], 0.0).unwrap();
    let prompt: Vec<u32> = synthetic_corpus(256, 14).iter().map(|&b| b as u32).collect();

    let p_values = [0.8, 0.9, 0.95, 0.99];
    let drift: Vec<f64> = p_values
        .iter()
        .map(|&p| {
            verification_drift(&draft, &verifier, &mapping, &prompt, &spec_cfg(p, 10), 40).unwrap()
        })
        .collect();
    for (p, d) in p_values.iter().zip(&drift) {
        println!("p={p:.2}: mean per-round verdict drift {d:.3}");
    }
    assert!(
        drift[3] <= drift[0],
        "drift at p=0.99 ({}) must not exceed drift at p=0.8 ({})",
        drift[3],
        drift[0]
    );
}

#[test]
fn kv_reduction_shrinks_as_p_rises() {
    let (draft, verifier) = models();
    let mapping = LayerMapping::new(vec![0, 0, 1, 1, 2, 2, 3, 3], 0.0).unwrap();
    let prompt: Vec<u32> = synthetic_corpus(256, 14).iter().map(|&b| b as u32).collect();

    // Oracle-equivalent iteration count, so selections are exactly the
    // tie-closed nucleus and retained sets grow monotonically with p.
    let reduction: Vec<f64> = [0.8, 0.9, 0.95, 0.99]
        .iter()
        .map(|&p| {
            let out = generate(&draft, &verifier, &mapping, &prompt, &spec_cfg(p, 60)).unwrap();
            kv_reduction(&out.rounds, 8, 2).unwrap()
        })
        .collect();
    println!("kv reduction by p: {reduction:?}");
    assert!(reduction[0] >= reduction[3]);
    assert!(reduction.windows(2).all(|w| w[0] >= w[1] - 1e-9));
}
