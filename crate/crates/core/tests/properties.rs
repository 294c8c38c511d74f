use std::collections::BTreeMap;

use proptest::prelude::*;

use mbt_core::backtranslation::check_pair;
use mbt_core::corpus::SourceRef;
use mbt_core::evaluation::corpus_bleu;
use mbt_core::{
    bpe_decode, bpe_encode, bpe_train, filter_synthetic, generate_cipher_task, sample_mixture, CipherTaskConfig,
    Corpus, DecodeStrategy, Direction, LanguageId, MixtureSpec, Origin, SentencePair, SyntheticFilterConfig, TokenId,
};

fn lang(c: &str) -> LanguageId {
    LanguageId::new(c).unwrap()
}

fn words(n: usize) -> String {
    vec!["w"; n].join(" ")
}

proptest! {
    #[test]
    fn filter_accepts_exactly_short_balanced_pairs(a in 1usize..600, b in 1usize..600) {
        let cfg = SyntheticFilterConfig::default();
        let (mx, mn) = (a.max(b), a.min(b));
        let expected = mx < 250 && (mx as f64) < 1.8 * mn as f64;
        prop_assert_eq!(check_pair(a, b, &cfg).is_none(), expected);
    }

    #[test]
    fn filter_partitions_its_input(lens in proptest::collection::vec((1usize..300, 1usize..300), 0..40)) {
        let origin = Origin::Synthetic { strategy: DecodeStrategy::TopK { k: 10 }, round: 1 };
        let pairs: Vec<SentencePair> = lens
            .iter()
            .map(|&(s, t)| SentencePair::new(lang("aa"), lang("bb"), words(s), words(t), origin).unwrap())
            .collect();
        let out = filter_synthetic(&pairs, &SyntheticFilterConfig::default());
        prop_assert_eq!(out.accepted.len() + out.rejected.len(), pairs.len());
        prop_assert_eq!(out.rejected_length + out.rejected_ratio, out.rejected.len());
        let again = filter_synthetic(&out.accepted, &SyntheticFilterConfig::default());
        prop_assert_eq!(again.accepted, out.accepted);
    }

    #[test]
    fn bleu_is_permutation_and_duplication_invariant(
        corpus in proptest::collection::vec(
            (proptest::collection::vec(0u32..6, 1..10), proptest::collection::vec(0u32..6, 1..10)),
            1..8,
        ),
        rot in 0usize..8,
    ) {
        let hyps: Vec<Vec<TokenId>> = corpus.iter().map(|(h, _)| h.clone()).collect();
        let refs: Vec<Vec<TokenId>> = corpus.iter().map(|(_, r)| r.clone()).collect();
        let base = corpus_bleu(&hyps, &refs).unwrap();
        let k = rot % hyps.len();
        let mut h2 = hyps.clone();
        let mut r2 = refs.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        let rotated = corpus_bleu(&h2, &r2).unwrap();
        prop_assert!((base.score - rotated.score).abs() < 1e-9);
        let hd: Vec<_> = hyps.iter().chain(&hyps).cloned().collect();
        let rd: Vec<_> = refs.iter().chain(&refs).cloned().collect();
        let doubled = corpus_bleu(&hd, &rd).unwrap();
        prop_assert!((base.score - doubled.score).abs() < 1e-9);
        prop_assert!(base.score <= 100.0 && base.brevity_penalty <= 1.0);
        prop_assert_eq!(corpus_bleu(&refs, &refs).unwrap().score, 100.0);
    }

    #[test]
    fn mixture_respects_synthetic_cap(parallel in 5usize..200, synthetic in 0usize..400, ratio in 1.0f64..8.0, seed in 0u64..1000) {
        let dir = Direction::new(lang("aa"), lang("bb")).unwrap();
        let mk = |n: usize, origin: Origin| {
            let pairs = (0..n)
                .map(|i| SentencePair::new(lang("aa"), lang("bb"), format!("s{i}"), format!("t{i}"), origin).unwrap())
                .collect();
            Corpus::from_pairs(dir.clone(), pairs).unwrap()
        };
        let syn = Origin::Synthetic { strategy: DecodeStrategy::Beam { size: 5 }, round: 1 };
        let cap = ((parallel as f64 / ratio).floor() as usize).min(synthetic);
        let mut corpora = BTreeMap::new();
        corpora.insert("p".to_string(), mk(parallel, Origin::Parallel));
        corpora.insert("s".to_string(), mk(synthetic, syn));
        let mut spec = MixtureSpec::new(5.0, parallel + cap, seed);
        spec.add(dir.clone(), SourceRef::whole("p"));
        if cap > 0 {
            spec.add(dir.clone(), SourceRef::capped("s", cap));
        }
        let mixed = sample_mixture(&spec, &corpora).unwrap();
        let n_syn = mixed.iter().filter(|p| p.origin != Origin::Parallel).count();
        prop_assert_eq!(mixed.len(), parallel + cap);
        prop_assert!(n_syn as f64 <= parallel as f64 / ratio + 1.0);
        // Every synthetic pair keeps its provenance through mixing.
        prop_assert!(mixed.iter().filter(|p| p.origin != Origin::Parallel).all(|p| p.origin == syn));
    }
}

#[test]
fn bpe_roundtrips_cipher_sentences() {
    let mut cfg = CipherTaskConfig::minimal(lang("xa"), lang("xb"));
    cfg.parallel_sizes.insert((lang("xa"), lang("xb")), 300);
    cfg.dev_size = 40;
    cfg.devtest_size = 1;
    let task = generate_cipher_task(&cfg).unwrap();
    let lines: Vec<String> = task.parallel[0].pairs().iter().flat_map(|p| [p.src.clone(), p.tgt.clone()]).collect();
    for size in [60, 200, 400] {
        let vocab = bpe_train([lines.iter()], size, task.languages()).unwrap();
        assert!(vocab.len() <= size);
        for s in task.dev.sentences.iter().flatten() {
            let ids = bpe_encode(&vocab, s);
            assert!(!ids.contains(&vocab.unk()), "{s}");
            assert_eq!(&bpe_decode(&vocab, &ids).unwrap(), s);
        }
    }
}
