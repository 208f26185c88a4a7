//! Finite-difference gradient checks, one property per layer over random
//! seeds (shapes, inputs and parameters all drawn from the seed).

mod common;

use common::*;
use proptest::prelude::*;
use stoic_core::model::Ablation;

fn cfg() -> ProptestConfig {
    ProptestConfig {
        cases: 20,
        ..ProptestConfig::default()
    }
}

macro_rules! layer_property {
    ($name:ident, $suite:path) => {
        proptest! {
            #![proptest_config(cfg())]
            #[test]
            fn $name(seed in any::<u64>()) {
                let r = $suite(seed);
                prop_assert!(r.passes(LAYER_TOL), "{:?}", r);
            }
        }
    };
}

layer_property!(mlp_gradients, mlp);
layer_property!(gru_cell_gradients, gru_cell);
layer_property!(bigru_gradients, bigru);
layer_property!(gcn_gradients, gcn);
layer_property!(decoder_gradients, decoder);
layer_property!(aggregation_gradients, aggregation);
layer_property!(global_pool_gradients, global_pool);
layer_property!(loss_gradients, losses);
layer_property!(gumbel_gradients, gumbel);
layer_property!(pte_gradients, pte);
layer_property!(rcn_gradients, rcn);
layer_property!(ggm_gradients, ggm);
layer_property!(rgne_gradients, rgne);

#[test]
fn tiny_model_gradients_every_ablation() {
    for ablation in Ablation::ALL {
        for seed in 0..3 {
            let r = end_to_end(seed, ablation);
            assert!(r.passes(MODEL_TOL), "{ablation} seed {seed}: {r:?}");
        }
    }
}
