use finnlite_core::exec::execute;
use finnlite_core::qat::{train, Network, TrainConfig};
use finnlite_core::streamline::streamline_all;
use finnlite_core::{synth, zoo, QTensor};

fn trained(model: &str) -> (finnlite_core::DataflowGraph, Network, Vec<QTensor>) {
    let g = zoo::build_model(model, 7).unwrap();
    let set = synth::synthetic_set(24, 7);
    let cfg = TrainConfig { epochs: 1, lr: 0.5, batch_size: 8, seed: 7, ..TrainConfig::default() };
    let out = train(&g, &set, None, &cfg).unwrap();
    (out.graph, out.network, set.inputs)
}

fn check(model: &str) {
    let (g, mut net, inputs) = trained(model);
    let refs: Vec<&QTensor> = inputs.iter().take(6).collect();
    let logits = net.logits(&refs);
    let streamlined = streamline_all(&g).unwrap().graph;
    for (x, &want) in refs.iter().zip(&logits) {
        let before = execute(&g, (*x).clone()).unwrap().output.to_f64();
        let after = execute(&streamlined, (*x).clone()).unwrap().output.to_f64();
        assert_eq!(before, vec![want], "{model}");
        assert_eq!(after, vec![want], "{model}");
    }
}

#[test]
fn exported_cnv_w1a1_matches_training_forward() {
    check("cnv_w1a1");
}

#[test]
fn exported_cnv_w2a2_matches_training_forward() {
    check("cnv_w2a2");
}

#[test]
fn exported_mobilenet_matches_training_forward() {
    check("mobilenet_w4a4");
}
