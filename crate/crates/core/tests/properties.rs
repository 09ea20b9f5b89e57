//! Metric oracles and property tests.

use phredgan::checkpoint::{decode_blob, encode_blob};
use phredgan::metrics::{bleu, distinct_n, human_eval_aggregate, nasl, perplexity_from_nll, rouge2_f1};
use phredgan::tensor::{Graph, SeededEngine, Tensor};
use proptest::prelude::*;

type Toks = Vec<String>;

fn random_case(rng: &mut SeededEngine) -> (Vec<Toks>, Vec<Toks>) {
    let alphabet = ["a", "b", "c", "d"];
    let pairs = 1 + rng.below(4);
    let sentence = |rng: &mut SeededEngine| -> Toks { (0..1 + rng.below(6)).map(|_| alphabet[rng.below(4)].to_string()).collect() };
    (0..pairs).map(|_| (sentence(rng), sentence(rng))).unzip()
}

/// All contiguous n-grams, as a plain list.
fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

/// Clipped matches by striking reference n-grams off one at a time.
fn struck_matches(h: &[String], r: &[String], n: usize) -> usize {
    let mut pool = grams(r, n);
    let mut m = 0;
    for g in grams(h, n) {
        if let Some(i) = pool.iter().position(|x| *x == g) {
            pool.swap_remove(i);
            m += 1;
        }
    }
    m
}

fn oracle_bleu(h: &[Toks], r: &[Toks], n: usize) -> f64 {
    let hl: usize = h.iter().map(Vec::len).sum();
    let rl: usize = r.iter().map(Vec::len).sum();
    if hl == 0 {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for k in 1..=n {
        let m: usize = h.iter().zip(r).map(|(a, b)| struck_matches(a, b, k)).sum();
        let t: usize = h.iter().map(|a| grams(a, k).len()).sum();
        let m = if m == 0 { 1e-9 } else { m as f64 };
        prod *= m / t.max(1) as f64;
    }
    let bp = if hl > rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
    bp * prod.powf(1.0 / n as f64)
}

fn oracle_rouge2(h: &[Toks], r: &[Toks]) -> f64 {
    let m: usize = h.iter().zip(r).map(|(a, b)| struck_matches(a, b, 2)).sum();
    let ht: usize = h.iter().map(|a| grams(a, 2).len()).sum();
    let rt: usize = r.iter().map(|a| grams(a, 2).len()).sum();
    if m == 0 {
        return 0.0;
    }
    let (p, rc) = (m as f64 / ht as f64, m as f64 / rt as f64);
    2.0 * p * rc / (p + rc)
}

fn oracle_distinct(h: &[Toks], n: usize) -> f64 {
    let all: Vec<Vec<String>> = h.iter().flat_map(|a| grams(a, n)).collect();
    if all.is_empty() {
        return 0.0;
    }
    let mut unique: Vec<&Vec<String>> = Vec::new();
    for g in &all {
        if !unique.contains(&g) {
            unique.push(g);
        }
    }
    unique.len() as f64 / all.len() as f64
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = SeededEngine::new(2024);
    for case in 0..20 {
        let (h, r) = random_case(&mut rng);
        for n in [1, 2, 4] {
            let (got, want) = (bleu(&h, &r, n).unwrap(), oracle_bleu(&h, &r, n));
            assert!(close(got, want), "case {case} bleu-{n}: {got} vs {want}");
        }
        assert!(close(rouge2_f1(&h, &r).unwrap(), oracle_rouge2(&h, &r)), "case {case} rouge");
        for n in [1, 2] {
            assert!(close(distinct_n(&h, n).unwrap(), oracle_distinct(&h, n)), "case {case} distinct-{n}");
        }
        let want: f64 = h.iter().zip(&r).map(|(a, b)| a.len() as f64 / b.len() as f64).sum::<f64>() / h.len() as f64;
        assert!(close(nasl(&h, &r).unwrap(), want), "case {case} nasl");
        // Perplexity is the inverse geometric mean of token probabilities.
        let probs: Vec<f64> = (0..1 + rng.below(10)).map(|_| 0.05 + 0.95 * rng.unit_f64()).collect();
        let nll: f64 = probs.iter().map(|p| -p.ln()).sum();
        let want = probs.iter().product::<f64>().powf(-1.0 / probs.len() as f64);
        let got = perplexity_from_nll(nll, probs.len()).unwrap();
        assert!((got - want).abs() <= 1e-9 * want.max(1.0), "case {case} perplexity: {got} vs {want}");
    }
}

fn words(s: &str) -> Toks {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn worked_examples() {
    let b2 = bleu(&[words("a b c")], &[words("a b d")], 2).unwrap();
    assert!((b2 - (2.0 / 3.0 * 0.5f64).sqrt()).abs() < 1e-12);
    assert!((b2 - 0.5774).abs() < 5e-5);
}

#[test]
fn human_eval_hand_computed() {
    // 2 samples, 2 judges, 3 models.
    let ranks = vec![vec![vec![0, 1, 2], vec![1, 0, 2]], vec![vec![0, 2, 1], vec![0, 1, 2]]];
    let s = human_eval_aggregate(&ranks).unwrap();
    // Model 0 scores: [0, .5], [0, 0]; model 1: [.5, 0], [1, .5]; model 2: [1, 1], [.5, 1].
    let expect = [(0.125, (0.0625f64 / 4.0).sqrt()), (0.5, ((0.0625 + 0.0625) / 4.0f64).sqrt()), (0.875, (0.0625f64 / 4.0).sqrt())];
    for (got, (mean, se)) in s.iter().zip(expect) {
        assert!((got.mean - mean).abs() < 1e-12 && (got.std_error - se).abs() < 1e-12, "{got:?}");
    }
}

fn sentence() -> impl Strategy<Value = Toks> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 0..8)
}

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e6f32..1e6, n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30f32..30.0, 12)) {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::matrix(3, 4, data).unwrap());
        let s = g.softmax(x).unwrap();
        let v = g.value(s);
        for r in 0..3 {
            let row = v.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn distinct_is_a_fraction(h in prop::collection::vec(sentence(), 1..5), n in 1usize..4) {
        let d = distinct_n(&h, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn bleu_of_identity_is_one(h in prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["x", "y", "z"]).prop_map(String::from), 4..9), 1..4)) {
        prop_assert!((bleu(&h, &h, 4).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((rouge2_f1(&h, &h).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_metrics_ignore_pair_order(pairs in prop::collection::vec((sentence(), sentence().prop_filter("nonempty", |s| !s.is_empty())), 1..6), seed in any::<u64>()) {
        let (h, r): (Vec<Toks>, Vec<Toks>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        SeededEngine::new(seed).shuffle(&mut shuffled);
        let (hs, rs): (Vec<Toks>, Vec<Toks>) = shuffled.into_iter().unzip();
        prop_assert_eq!(bleu(&h, &r, 4).unwrap(), bleu(&hs, &rs, 4).unwrap());
        prop_assert_eq!(rouge2_f1(&h, &r).unwrap(), rouge2_f1(&hs, &rs).unwrap());
        prop_assert!((nasl(&h, &r).unwrap() - nasl(&hs, &rs).unwrap()).abs() < 1e-12);
        let b = bleu(&h, &r, 2).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn blob_round_trip(t in tensor()) {
        let decoded = decode_blob(&encode_blob(&t)).unwrap();
        prop_assert_eq!(decoded.shape(), t.shape());
        prop_assert_eq!(decoded.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn blob_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_blob(&bytes);
    }
}

#[test]
fn ngram_counts_agree_with_listing() {
    let s = words("a b a b a");
    let counts = phredgan::metrics::ngram_counts(&s, 2);
    assert_eq!(counts.values().sum::<usize>(), grams(&s, 2).len());
    assert_eq!(counts[&vec!["a", "b"]], 2);
    assert_eq!(counts[&vec!["b", "a"]], 2);
}
