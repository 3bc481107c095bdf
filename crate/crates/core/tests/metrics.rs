//! MRR, ROUGE and loss properties against brute-force oracles.

use codesearch_peft::metrics::{
    mrr_all_pairs, mrr_chunked, mrr_from_scores, rank_of_match, rouge, rouge_all, CutoffRule, MrrProtocol, RougeVariant,
};
use codesearch_peft::objective::{brute_force_loss, nt_xent, similarity_matrix};
use codesearch_peft::Tensor;
use proptest::prelude::*;

/// Unit rows from raw coordinates; coarse grid values make ties likely.
fn unit_rows(raw: &[Vec<i8>]) -> Tensor {
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            let v: Vec<f64> = r.iter().map(|&x| f64::from(x) + 0.5).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn embeddings(n: std::ops::Range<usize>) -> impl Strategy<Value = (Tensor, Tensor)> {
    n.prop_flat_map(|n| {
        let rows = prop::collection::vec(prop::collection::vec(-3i8..3, 4), n);
        (rows.clone(), rows).prop_map(|(a, b)| (unit_rows(&a), unit_rows(&b)))
    })
}

/// Position of the match after a stable sort by descending score with the
/// match moved ahead of every equal score.
fn sorted_rank(i: usize, row: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap()
            .then_with(|| (b == i).cmp(&(a == i)))
    });
    1 + order.iter().position(|&j| j == i).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rank_matches_sort_oracle(row in prop::collection::vec(-4i8..4, 1..30), pick in 0usize..30) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let i = pick % row.len();
        prop_assert_eq!(rank_of_match(i, &row), sorted_rank(i, &row));
    }

    #[test]
    fn all_pairs_ranks_query_text_against_code((hc, ht) in embeddings(1..20)) {
        let r = mrr_all_pairs(&hc, &ht, 1000, CutoffRule::Zero).unwrap();
        let n = hc.rows();
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| ht.row(i).iter().zip(hc.row(j)).map(|(a, b)| a * b).sum())
                .collect();
            prop_assert_eq!(r.ranks[i], sorted_rank(i, &row));
        }
        prop_assert!((r.recompute() - r.mrr).abs() < 1e-15);
        prop_assert!(r.mrr > 0.0 && r.mrr <= 1.0);
    }

    #[test]
    fn all_pairs_is_permutation_invariant((hc, ht) in embeddings(2..16), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = hc.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let take = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = mrr_all_pairs(&hc, &ht, 1000, CutoffRule::Zero).unwrap();
        let b = mrr_all_pairs(&take(&hc), &take(&ht), 1000, CutoffRule::Zero).unwrap();
        let permuted: Vec<usize> = perm.iter().map(|&i| a.ranks[i]).collect();
        prop_assert_eq!(permuted, b.ranks);
        prop_assert!((a.mrr - b.mrr).abs() < 1e-12);
    }

    #[test]
    fn single_chunk_equals_all_pairs((hc, ht) in embeddings(1..20), extra in 0usize..5) {
        let n = hc.rows();
        let all = mrr_all_pairs(&hc, &ht, n + extra, CutoffRule::Zero).unwrap();
        let chunked = mrr_chunked(&hc, &ht, n).unwrap();
        prop_assert_eq!(all.mrr, chunked.mrr);
        prop_assert_eq!(all.ranks, chunked.ranks);
    }

    #[test]
    fn chunked_drops_the_remainder((hc, ht) in embeddings(1..24), chunk in 1usize..8) {
        let n = hc.rows();
        prop_assume!(chunk <= n);
        let r = mrr_chunked(&hc, &ht, chunk).unwrap();
        prop_assert_eq!(r.protocol, MrrProtocol::Chunked);
        prop_assert_eq!(r.n_evaluated, n - n % chunk);
        prop_assert_eq!(r.ranks.len(), n - n % chunk);
        prop_assert!(r.ranks.iter().all(|&k| k <= chunk));
        prop_assert!((r.recompute() - r.mrr).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_brute_force((hc, ht) in embeddings(2..17), tau in 0.05f64..1.0) {
        let fast = nt_xent(&similarity_matrix(&hc, &ht, tau).unwrap()).unwrap();
        let slow = brute_force_loss(&hc, &ht, tau).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1.0), "{} vs {}", fast, slow);
    }

    #[test]
    fn rouge_precision_recall_swap(
        cand in prop::collection::vec(0u8..6, 0..12),
        refr in prop::collection::vec(0u8..6, 0..12),
    ) {
        let c: Vec<String> = cand.iter().map(|t| format!("t{t}")).collect();
        let r: Vec<String> = refr.iter().map(|t| format!("t{t}")).collect();
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            let (a, b) = (rouge(&c, &r, v), rouge(&r, &c, v));
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert_eq!(a.f1, b.f1);
            for x in [a.precision, a.recall, a.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
        // ROUGE-L never exceeds ROUGE-1: a common subsequence is a clipped unigram match.
        let all = rouge_all(&c, &r);
        prop_assert!(all.rouge_l.recall <= all.rouge1.recall + 1e-15);
    }
}

#[test]
fn chunking_changes_the_answer() {
    // Pair 1's code is closer to query 2 than query 2's own code is: a
    // distractor across the chunk boundary that all-pairs ranking sees and
    // chunked ranking (chunk 2: {0,1}, {2,3}) does not.
    let s = |rows: Vec<Vec<f64>>| Tensor::from_rows(&rows).unwrap();
    let hc = s(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![-1.0, 0.0]]);
    let ht = s(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
    let all = mrr_all_pairs(&hc, &ht, 1000, CutoffRule::Zero).unwrap();
    let chunked = mrr_chunked(&hc, &ht, 2).unwrap();
    assert_eq!(all.ranks, vec![1, 1, 2, 1]);
    assert_eq!(chunked.ranks, vec![1, 1, 1, 1]);
    assert_eq!(chunked.mrr, 1.0);
    assert_eq!(all.mrr, 0.875);
}

#[test]
fn cutoff_rules() {
    // Query 0 ranks third.
    let scores = Tensor::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let zero = mrr_from_scores(&scores, 2, CutoffRule::Zero).unwrap();
    let exclude = mrr_from_scores(&scores, 2, CutoffRule::Exclude).unwrap();
    let none = mrr_from_scores(&scores, 3, CutoffRule::Zero).unwrap();
    assert_eq!(zero.ranks, vec![3, 1, 1]);
    assert!((zero.mrr - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(exclude.mrr, 1.0);
    assert!((none.mrr - (1.0 / 3.0 + 2.0) / 3.0).abs() < 1e-15);
}

#[test]
fn empty_and_ragged_inputs_are_errors() {
    let empty = Tensor::zeros(&[0, 4]);
    assert!(mrr_all_pairs(&empty, &empty, 10, CutoffRule::Zero).is_err());
    let a = Tensor::zeros(&[3, 4]);
    let b = Tensor::zeros(&[2, 4]);
    assert!(mrr_all_pairs(&a, &b, 10, CutoffRule::Zero).is_err());
    assert!(mrr_chunked(&a, &a, 4).is_err());
    assert!(mrr_chunked(&a, &a, 0).is_err());
}
