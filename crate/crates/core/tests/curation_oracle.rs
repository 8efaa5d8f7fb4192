use std::collections::BTreeSet;

use acpo_core::curation::{curate_pairs, LengthDirection, PairStrategy, StrategyKind};
use acpo_core::{ResponseSample, ScoredResponse};
use proptest::prelude::*;

fn build(scores: &[i64], lengths: &[usize]) -> (Vec<ResponseSample>, Vec<ScoredResponse>) {
    let responses = lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| ResponseSample::new("q", i, "a".repeat(l), 1.0, 0))
        .collect();
    let scored = scores
        .iter()
        .enumerate()
        .map(|(i, &score)| ScoredResponse { question_id: "q".into(), sample_index: i, score, verdicts: vec![] })
        .collect();
    (responses, scored)
}

/// Repeatedly removes the element preferred by `better` from `pool`.
fn take_best(pool: &mut Vec<usize>, n: usize, better: impl Fn(usize, usize) -> bool) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for _ in 0..n {
        let mut best = 0;
        for j in 1..pool.len() {
            if better(pool[j], pool[best]) {
                best = j;
            }
        }
        out.insert(pool.remove(best));
    }
    out
}

fn oracle(scores: &[i64], lengths: &[usize], k: usize, fill: Option<(usize, LengthDirection)>) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut pool: Vec<usize> = (0..scores.len()).collect();
    let higher = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let lower = |a: usize, b: usize| scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
    let top = take_best(&mut pool, k, higher);
    let replaced = fill.map_or(0, |(r, _)| r);
    let mut bottom = take_best(&mut pool, k - replaced, lower);
    if let Some((r, dir)) = fill {
        let longer = |a: usize, b: usize| match dir {
            LengthDirection::Longest => lengths[a] > lengths[b] || (lengths[a] == lengths[b] && a < b),
            LengthDirection::Shortest => lengths[a] < lengths[b] || (lengths[a] == lengths[b] && a < b),
        };
        bottom.extend(take_best(&mut pool, r, longer));
    }
    (top, bottom)
}

fn question() -> impl Strategy<Value = (Vec<i64>, Vec<usize>)> {
    (2usize..32).prop_flat_map(|m| (prop::collection::vec(-5i64..6, m), prop::collection::vec(1usize..300, m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn score_based_strategies_match_the_oracle((scores, lengths) in question(), k in 2usize..6, replaced in 1usize..3, longest in any::<bool>()) {
        let (responses, scored) = build(&scores, &lengths);
        let tied = scores.iter().all(|&s| s == scores[0]);
        let direction = if longest { LengthDirection::Longest } else { LengthDirection::Shortest };
        let cases = [
            (PairStrategy::new(StrategyKind::Top1Bottom1), 1, None),
            (PairStrategy::new(StrategyKind::TopkBottomk { k }), k, None),
            (
                PairStrategy::new(StrategyKind::LengthBalanced { k, replaced: replaced.min(k - 1), direction }),
                k,
                Some((replaced.min(k - 1), direction)),
            ),
        ];
        for (strategy, k, fill) in cases {
            if scores.len() < strategy.min_responses() {
                prop_assert!(curate_pairs("p", &scored, &responses, &strategy).is_err());
                continue;
            }
            let pairs = curate_pairs("p", &scored, &responses, &strategy).unwrap();
            if tied {
                prop_assert!(pairs.is_empty());
                continue;
            }
            let (top, bottom) = oracle(&scores, &lengths, k, fill);
            let chosen: BTreeSet<usize> = pairs.iter().map(|p| p.chosen_index).collect();
            let rejected: BTreeSet<usize> = pairs.iter().map(|p| p.rejected_index).collect();
            prop_assert_eq!(&chosen, &top);
            prop_assert_eq!(&rejected, &bottom);
            prop_assert_eq!(pairs.len(), top.len() * bottom.len());
            for p in &pairs {
                prop_assert_eq!(p.chosen_score, scores[p.chosen_index]);
                prop_assert_eq!(p.rejected_score, scores[p.rejected_index]);
                prop_assert_eq!(&p.chosen, &responses[p.chosen_index].text);
            }
        }
    }

    #[test]
    fn length_strategies_prefer_the_extreme((scores, lengths) in question(), seed in any::<u64>()) {
        let (responses, scored) = build(&scores, &lengths);
        for (kind, longest) in [(StrategyKind::LongestPreferred, true), (StrategyKind::ShortestPreferred, false)] {
            let strategy = PairStrategy::new(kind).with_seed(seed);
            let pairs = curate_pairs("p", &scored, &responses, &strategy).unwrap();
            prop_assert_eq!(pairs.len(), 1);
            let p = &pairs[0];
            let extreme = if longest { lengths.iter().max() } else { lengths.iter().min() }.copied().unwrap();
            let first = lengths.iter().position(|&l| l == extreme).unwrap();
            prop_assert_eq!(p.chosen_index, first);
            prop_assert_ne!(p.rejected_index, p.chosen_index);
            let again = curate_pairs("p", &scored, &responses, &strategy).unwrap();
            prop_assert_eq!(&again, &pairs);
        }
    }
}
