use polyfusion::fusion::{self, blocks, param_count, FusionParams, FusionPath, FusionSpec};
use polyfusion::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..=6, 1usize..=6, 1usize..=6]
}

/// Entry of the reconstructed weight from the factors, one term at a time.
fn entry(p: &FusionParams, idx: &[usize], o: usize) -> f64 {
    let spec = p.spec();
    let f = p.factors();
    let w = p.mixing().unwrap();
    let rank = spec.rank;
    let out = spec.output_dim;
    (0..rank)
        .map(|r| {
            let prod: f64 = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let fk = if f.len() == 1 { &f[0] } else { &f[k] };
                    fk.data()[(i * rank + r) * out + o]
                })
                .product();
            w.data()[r] * prod
        })
        .sum()
}

fn dyadic(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-48i32..=48) as f64 / 16.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polynomial_paths_agree(d in dims(), p in 1usize..=3, r in 1usize..=8, o in 1usize..=3, sym: bool, seed: u64) {
        let spec = FusionSpec::polynomial(d, o, p, r, sym, FusionPath::Factorized);
        prop_assume!(spec.full_entries() <= 50_000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = FusionParams::init(&spec, &mut rng).unwrap();
        let full = fusion::to_full(&params).unwrap();
        let z = d.map(|n| Tensor::uniform(&[n], 1.0, &mut rng));
        let zs = [&z[0], &z[1], &z[2]];
        let a = fusion::fuse(zs, &params).unwrap();
        let b = fusion::fuse(zs, &full).unwrap();
        prop_assert!(a.max_rel_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn tensor_reconstruction_matches_entries(d in dims(), r in 1usize..=6, o in 1usize..=3, seed: u64) {
        let spec = FusionSpec::tensor(d, o, r, FusionPath::Factorized);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = FusionParams::init(&spec, &mut rng).unwrap();
        let w = fusion::reconstruct_full(&params).unwrap();
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] {
                    for c in 0..o {
                        let want = entry(&params, &[i, j, k], c);
                        let got = w.get(&[i, j, k, c]);
                        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn polynomial_is_homogeneous(d in dims(), p in 1usize..=3, r in 1usize..=4, c in -3.0f64..3.0, seed: u64) {
        let spec = FusionSpec::polynomial(d, 2, p, r, false, FusionPath::Factorized);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = FusionParams::init(&spec, &mut rng).unwrap();
        let z = d.map(|n| Tensor::uniform(&[n], 1.0, &mut rng));
        let zc = z.clone().map(|t| t.scale(c));
        let y = fusion::fuse([&z[0], &z[1], &z[2]], &params).unwrap();
        let yc = fusion::fuse([&zc[0], &zc[1], &zc[2]], &params).unwrap();
        prop_assert!(yc.max_rel_diff(&y.scale(c.powi(p as i32))).unwrap() < 1e-10);
    }

    #[test]
    fn linear_blocks_exact_on_dyadic_data(d in dims(), o in 1usize..=4, seed: u64) {
        let n: usize = d.iter().sum();
        let w = Tensor::new(vec![n, o], dyadic(n * o, seed)).unwrap();
        let params = FusionParams::new(FusionSpec::linear(d, o), vec![w]).unwrap();
        let zd = dyadic(n, seed ^ 1);
        let z = [
            Tensor::vector(zd[..d[0]].to_vec()),
            Tensor::vector(zd[d[0]..d[0] + d[1]].to_vec()),
            Tensor::vector(zd[d[0] + d[1]..].to_vec()),
        ];
        let zs = [&z[0], &z[1], &z[2]];
        prop_assert_eq!(fusion::fuse_linear(zs, &params).unwrap(), blocks::linear_block_sum(zs, &params).unwrap());
    }

    #[test]
    fn count_matches_allocation(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = polyfusion::verify::random_spec(&mut rng);
        let params = FusionParams::init(&spec, &mut rng).unwrap();
        let allocated: usize = params.tensors().iter().map(Tensor::len).sum();
        prop_assert_eq!(allocated as u128, param_count(&spec));
    }
}
