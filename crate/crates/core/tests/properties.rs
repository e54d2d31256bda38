mod support;

use meprop::meprop::{keep_count, SliceLayout};
use meprop::tensor::{col2im, im2col, topk_indices, topk_mask};
use meprop::{MePropPolicy, Padding, Tensor};
use proptest::prelude::*;

/// Sort-based reference: order by magnitude descending, index ascending.
fn brute_topk(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Values drawn from a small integer set so ties are common.
fn tied_values(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-4i32..=4).prop_map(|v| v as f64 * 0.5), len)
}

fn padding() -> impl Strategy<Value = Padding> {
    prop_oneof![Just(Padding::Same), Just(Padding::Valid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn topk_matches_sorting(v in tied_values(1..40), k_frac in 0.0f64..=1.0) {
        let k = ((v.len() as f64) * k_frac) as usize;
        let mut got = topk_indices(&v, k).unwrap();
        got.sort_unstable();
        prop_assert_eq!(got, brute_topk(&v, k));
    }

    #[test]
    fn topk_mask_has_k_ones(v in prop::collection::vec(-10.0f64..10.0, 1..40), k_frac in 0.0f64..=1.0) {
        let k = ((v.len() as f64) * k_frac) as usize;
        let t = Tensor::<f64>::from_f64(&[v.len()], &v).unwrap();
        let mask = topk_mask(&t, k).unwrap();
        let ones: Vec<usize> = (0..v.len()).filter(|&i| mask.data()[i] == 1.0).collect();
        prop_assert_eq!(mask.nnz(), k);
        prop_assert_eq!(ones, brute_topk(&v, k));
    }

    #[test]
    fn keep_count_bounds(ratio in 1e-6f64..=1.0, n in 1usize..500) {
        let k = keep_count(ratio, n);
        prop_assert!(k >= 1 && k <= n);
        prop_assert!(k as f64 >= ratio * n as f64 - 1e-6);
        prop_assert!((k as f64) < ratio * n as f64 + 1.0);
    }

    /// `<im2col(x), c> == <x, col2im(c)>`: the scatter-add is the transpose
    /// of the gather.
    #[test]
    fn col2im_is_adjoint_of_im2col(
        m in 1usize..=2, h in 1usize..=8, w in 1usize..=8, c in 1usize..=3,
        k in 1usize..=4, stride in 1usize..=3, pad in padding(), seed in any::<u64>(),
    ) {
        prop_assume!(pad == Padding::Same || (k <= h && k <= w));
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let x = support::uniform(&mut rng, &[m, h, w, c], -1.0, 1.0);
        let cols = im2col(&x, k, k, stride, pad).unwrap();
        let r = support::uniform(&mut rng, cols.shape(), -1.0, 1.0);
        let back = col2im(&r, [m, h, w, c], k, k, stride, pad).unwrap();
        let lhs = cols.dot(&r).unwrap();
        let rhs = x.dot(&back).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    /// The policy's selection equals a brute-force sort of each run_grad
    /// slice, and every (sample, map) slice of the sparsified gradient has
    /// at most k_c nonzeros.
    #[test]
    fn selection_matches_sorted_accumulator(
        m in 1usize..=3, h in 1usize..=5, w in 1usize..=5, c in 1usize..=4,
        ratio in 0.01f64..=1.0, decay in prop_oneof![Just(0.0), Just(0.6), 0.0f64..0.99],
        steps in 1usize..=3, seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut policy = MePropPolicy::<f64>::new(ratio, decay, &[h, w, c]).unwrap();
        let mut dy = Tensor::zeros(&[m, h, w, c]);
        for _ in 0..steps {
            let vals: Vec<f64> = (0..m * h * w * c)
                .map(|_| rand::Rng::gen_range(&mut rng, -2i32..=2) as f64)
                .collect();
            dy = Tensor::from_f64(&[m, h, w, c], &vals).unwrap();
            policy.update_accumulator(&dy).unwrap();
        }
        let layout = SliceLayout::of(&[h, w, c]);
        let k = keep_count(ratio, h * w);
        let rg = policy.run_grad().data().to_vec();
        let selection = policy.selection().unwrap();
        let sparse = policy.sparsify(&dy).unwrap();
        for map in 0..c {
            let slice: Vec<f64> = (0..h * w).map(|p| rg[layout.offset(map, p)]).collect();
            let expected: Vec<usize> = brute_topk(&slice, k).into_iter().map(|p| layout.offset(map, p)).collect();
            prop_assert_eq!(&selection[map], &expected);
            for s in 0..m {
                let nnz = (0..h * w)
                    .filter(|&p| sparse.data()[s * h * w * c + layout.offset(map, p)] != 0.0)
                    .count();
                prop_assert!(nnz <= k);
                for p in 0..h * w {
                    let o = s * h * w * c + layout.offset(map, p);
                    let kept = expected.contains(&layout.offset(map, p));
                    prop_assert_eq!(sparse.data()[o], if kept { dy.data()[o] } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn accumulator_matches_recurrence(
        n in 1usize..=12, m in 1usize..=4, decay in 0.0f64..0.99, steps in 1usize..=6, seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut policy = MePropPolicy::<f64>::new(0.5, decay, &[n]).unwrap();
        let mut expected = vec![0.0f64; n];
        for _ in 0..steps {
            let dy = support::uniform(&mut rng, &[m, n], -3.0, 3.0);
            for (j, e) in expected.iter_mut().enumerate() {
                let mean = (0..m).map(|i| dy.data()[i * n + j].abs()).sum::<f64>() / m as f64;
                *e = decay * *e + (1.0 - decay) * mean;
            }
            policy.update_accumulator(&dy).unwrap();
        }
        prop_assert!(support::max_abs_diff(policy.run_grad().data(), &expected) < 1e-12);
    }
}
