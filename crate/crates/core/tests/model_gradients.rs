use polyfusion::autodiff::grad_check;
use polyfusion::fusion::{FusionPath, FusionSpec};
use polyfusion::models::{ExtractorSpec, Inputs, Modality, ModelGraph, Topology};
use polyfusion::nn::Mode;
use polyfusion::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(kind: &str) -> Topology {
    let (e, n) = (ExtractorSpec::tiny_eeg(), ExtractorSpec::tiny_nirs());
    match kind {
        "eeg" => Topology::single(e, n, Modality::Eeg),
        "oxy" => Topology::single(e, n, Modality::Oxy),
        "lf" => Topology::fused(e, n, FusionSpec::linear([0; 3], 8)),
        "tf" => Topology::fused(e, n, FusionSpec::tensor([0; 3], 8, 4, FusionPath::Factorized)),
        "pf" => Topology::fused(e, n, FusionSpec::polynomial([0; 3], 8, 3, 4, true, FusionPath::Factorized)),
        _ => unreachable!(),
    }
}

fn inputs(t: &Topology, n: usize, seed: u64) -> Inputs {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Inputs {
        eeg: Tensor::uniform(&[n, t.eeg.input_channels, t.eeg.input_len], 1.0, &mut r),
        oxy: Tensor::uniform(&[n, t.nirs.input_channels, t.nirs.input_len], 1.0, &mut r),
        deoxy: Tensor::uniform(&[n, t.nirs.input_channels, t.nirs.input_len], 1.0, &mut r),
    }
}

fn check(kind: &str, mode: Mode) -> f64 {
    let t = tiny(kind);
    let model = ModelGraph::new(t.clone(), 11).unwrap();
    let x = inputs(&t, 3, 4);
    let labels = [0, 1, 1];
    let mut params: Vec<Tensor> = model.params().iter().map(|n| n.value.clone()).collect();
    let start = std::time::Instant::now();
    let report = grad_check(
        |tape, vars| {
            let (logits, _) = model.forward(tape, vars, &x, mode)?;
            tape.softmax_crossentropy(logits, &labels)
        },
        &mut params,
        1e-6,
        Some(24),
    )
    .unwrap();
    eprintln!("{kind} {mode:?}: {report:?} in {:?}", start.elapsed());
    report.max_error
}

#[test]
fn tiny_models_pass_gradient_check() {
    for kind in ["eeg", "oxy", "lf", "tf", "pf"] {
        for mode in [Mode::Train, Mode::Eval] {
            let e = check(kind, mode);
            assert!(e < 1e-4, "{kind} {mode:?}: {e}");
        }
    }
}
