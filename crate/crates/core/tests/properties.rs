use proptest::prelude::*;
use vlnfaith::agents::Architecture;
use vlnfaith::attribution::Ranking;
use vlnfaith::faitheval::{perturb_instruction, select_top_k, ErasureOp, PerturbMode};
use vlnfaith::navworld::vocab::{self, BOS, EOS};
use vlnfaith::tensor::{Tape, Tensor};

fn instruction() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(5usize..30, 1..15).prop_map(|mut body| {
        body.insert(0, BOS);
        body.push(EOS);
        body
    })
}

fn scored() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    instruction().prop_flat_map(|ids| {
        let n = ids.len();
        (Just(ids), prop::collection::vec(-5.0f64..5.0, n))
    })
}

fn erasable(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| !vocab::is_special(i)).collect()
}

proptest! {
    #[test]
    fn top_k_ignores_positive_affine_maps((ids, scores) in scored(), k in 0usize..6, a in 0.01f64..100.0, b in -3.0f64..3.0) {
        let mask = erasable(&ids);
        let base = select_top_k(&scores, k, &mask, Ranking::Signed);
        let mapped: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        prop_assert_eq!(&base, &select_top_k(&mapped, k, &mask, Ranking::Signed));
        let scaled: Vec<f64> = scores.iter().map(|s| a * s).collect();
        prop_assert_eq!(
            select_top_k(&scores, k, &mask, Ranking::Absolute),
            select_top_k(&scaled, k, &mask, Ranking::Absolute)
        );
    }

    #[test]
    fn top_k_is_sorted_erasable_and_sized((ids, scores) in scored(), k in 0usize..20) {
        let mask = erasable(&ids);
        let sel = select_top_k(&scores, k, &mask, Ranking::Signed);
        prop_assert_eq!(sel.len(), k.min(mask.iter().filter(|&&m| m).count()));
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sel.iter().all(|&i| mask[i]));
        let worst_kept = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..ids.len()).filter(|i| mask[*i] && !sel.contains(i)) {
            prop_assert!(scores[i] <= worst_kept);
        }
    }

    #[test]
    fn erase_and_preserve_partition_the_content((ids, scores) in scored(), k in 0usize..8) {
        let sel = select_top_k(&scores, k, &erasable(&ids), Ranking::Signed);
        for arch in Architecture::ALL {
            let erased = perturb_instruction(&ids, &sel, PerturbMode::Erase, ErasureOp::SliceOut, arch);
            let kept = perturb_instruction(&ids, &sel, PerturbMode::Preserve, ErasureOp::SliceOut, arch);
            prop_assert_eq!(erased.len() + kept.len(), ids.len() + 2);
            prop_assert_eq!(kept.len(), sel.len() + 2);
            prop_assert_eq!(erased[0], BOS);
            prop_assert_eq!(*kept.last().unwrap(), EOS);

            let replaced = perturb_instruction(&ids, &sel, PerturbMode::Erase, ErasureOp::TokenReplace, arch);
            let rest = perturb_instruction(&ids, &sel, PerturbMode::Preserve, ErasureOp::TokenReplace, arch);
            prop_assert_eq!(replaced.len(), ids.len());
            for i in 0..ids.len() {
                let r = arch.replacement_token();
                if vocab::is_special(ids[i]) {
                    prop_assert!(replaced[i] == ids[i] && rest[i] == ids[i]);
                } else {
                    // exactly one of the two keeps each content token
                    prop_assert!((replaced[i] == r) != (rest[i] == r));
                    prop_assert!(replaced[i] == ids[i] || rest[i] == ids[i]);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_is_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..12), seed in any::<u64>()) {
        let n = logits.len();
        let mut mask: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        mask[0] = true;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(logits));
        let p = tape.masked_softmax(x, mask.clone()).unwrap();
        let p = tape.value(p).data().to_vec();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pi, m) in p.iter().zip(&mask) {
            prop_assert!(*pi >= 0.0);
            if !m { prop_assert_eq!(*pi, 0.0); }
        }
    }
}

