use std::collections::BTreeSet;

use dreamlab::numcore::Rng;
use dreamlab::preference::{
    annotator_verdicts, detect_conflicts, extract_pairs, rank_items, read_pairs_jsonl, simulate_ratings, write_pairs_jsonl,
    AnnotatorSpec, RankingSet,
};
use dreamlab::scene::MultiViewImage;
use dreamlab::suite::{Suite, SuiteConfig};
use proptest::prelude::*;

fn suite() -> Suite {
    Suite::build(&SuiteConfig::default(), &mut Rng::new(17)).unwrap()
}

fn items(suite: &Suite, prompt: u32, n: usize, rng: &mut Rng) -> Vec<MultiViewImage> {
    (0..n).map(|_| suite.sample_item(prompt, rng).unwrap()).collect()
}

fn ranking_from_groups(sizes: &[usize]) -> RankingSet {
    let mut next = 0u32;
    let tie_groups: Vec<Vec<u32>> = sizes
        .iter()
        .map(|&s| {
            let g: Vec<u32> = (next..next + s as u32).collect();
            next += s as u32;
            g
        })
        .collect();
    RankingSet {
        prompt_id: 0,
        order: tie_groups.iter().flatten().copied().collect(),
        tie_groups,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pair_count_excludes_within_group_pairs(sizes in prop::collection::vec(1usize..4, 1..6)) {
        let ranking = ranking_from_groups(&sizes);
        let n: usize = sizes.iter().sum();
        let tied: usize = sizes.iter().map(|s| s * (s - 1) / 2).sum();
        let rig = suite().rig;
        let pairs = extract_pairs(&ranking, &rig, &[]);
        prop_assert_eq!(pairs.len(), n * (n - 1) / 2 - tied);
        let position = |id: u32| ranking.order.iter().position(|&x| x == id).unwrap();
        for p in &pairs {
            prop_assert!(position(p.winner) < position(p.loser));
            prop_assert!(!p.flagged);
        }
    }

    #[test]
    fn ranking_is_a_partition_of_the_rated_items(seed in 0u64..500, n in 4usize..10, count in 1usize..6) {
        let suite = suite();
        let mut rng = Rng::new(seed);
        let xs = items(&suite, 1, n, &mut rng);
        let spec = AnnotatorSpec { count, noise: 0.7 };
        let records = simulate_ratings(&suite.utility, 1, &xs, &spec, &mut rng).unwrap();
        prop_assert_eq!(records.len(), n * count);
        let ranking = rank_items(&records).unwrap();
        let flat: Vec<u32> = ranking.tie_groups.iter().flatten().copied().collect();
        prop_assert_eq!(&flat, &ranking.order);
        let ids: BTreeSet<u32> = ranking.order.iter().copied().collect();
        prop_assert_eq!(ids, (0..n as u32).collect::<BTreeSet<_>>());
    }

    #[test]
    fn flagged_pairs_are_real_item_pairs(seed in 0u64..500) {
        let suite = suite();
        let mut rng = Rng::new(seed);
        let xs = items(&suite, 0, 6, &mut rng);
        let spec = AnnotatorSpec { count: 4, noise: 1.5 };
        let records = simulate_ratings(&suite.utility, 0, &xs, &spec, &mut rng).unwrap();
        for (a, b) in detect_conflicts(&annotator_verdicts(&records)) {
            prop_assert!(a < b && b < 6);
        }
    }
}

#[test]
fn noiseless_annotators_agree() {
    let suite = suite();
    let mut rng = Rng::new(2);
    for _ in 0..20 {
        let xs = items(&suite, 2, 8, &mut rng);
        let spec = AnnotatorSpec { count: 5, noise: 0.0 };
        let records = simulate_ratings(&suite.utility, 2, &xs, &spec, &mut rng).unwrap();
        assert!(detect_conflicts(&annotator_verdicts(&records)).is_empty());
    }
}

#[test]
fn rating_nothing_is_an_error() {
    let suite = suite();
    let spec = AnnotatorSpec { count: 3, noise: 0.5 };
    assert!(simulate_ratings(&suite.utility, 0, &[], &spec, &mut Rng::new(0)).is_err());
}

#[test]
fn pairs_survive_a_jsonl_round_trip() {
    let rig = suite().rig;
    let pairs = extract_pairs(&ranking_from_groups(&[1, 2, 1, 3]), &rig, &[(0, 1)]);
    assert_eq!(pairs.iter().filter(|p| p.flagged).count(), 1);
    let mut buf = Vec::new();
    write_pairs_jsonl(&pairs, &mut buf).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), pairs.len());
    let back = read_pairs_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, pairs);
    assert!(read_pairs_jsonl("{not json}\n".as_bytes()).is_err());
}
