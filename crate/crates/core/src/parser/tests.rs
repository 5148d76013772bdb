use rand::Rng;

use super::*;
use crate::conllu::{validate_heads, Sentence, Token};
use crate::nn::{EncoderConfig, EncoderSpec, Mode};
use crate::rng::SeedKey;
use crate::vocab::LabelSet;
use crate::{Graph, ParameterStore};

fn random_scores(n: usize, rng: &mut impl Rng) -> ArcScores<f64> {
    let m: Vec<f64> = (0..(n + 1) * (n + 1)).map(|_| rng.gen_range(-5.0..5.0)).collect();
    ArcScores::from_matrix(n, &m)
}

/// Best total over every head vector that forms a single-rooted tree.
fn brute_force_best(scores: &ArcScores<f64>) -> f64 {
    let n = scores.n();
    let mut heads = vec![0usize; n];
    let mut best = f64::NEG_INFINITY;
    loop {
        if validate_heads(&heads).is_ok() {
            best = best.max(scores.tree_score(&heads));
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            heads[k] += 1;
            if heads[k] <= n {
                break;
            }
            heads[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn single_token_attaches_to_root() {
    let s = ArcScores::from_fn(1, |_, _| 3.0);
    assert_eq!(decode_mst(&s, true), vec![0]);
}

#[test]
fn two_token_worked_example() {
    // root→1 = 10, root→2 = 1, 1→2 = 8, 2→1 = 0
    let s = ArcScores::from_fn(2, |h, d| match (h, d) {
        (0, 1) => 10.0,
        (0, 2) => 1.0,
        (1, 2) => 8.0,
        (2, 1) => 0.0,
        _ => unreachable!(),
    });
    let heads = decode_mst(&s, true);
    assert_eq!(heads, vec![0, 1]);
    assert_eq!(s.tree_score(&heads), 18.0);
}

#[test]
fn greedy_examples() {
    let s = ArcScores::from_fn(3, |h, _| if h == 0 { 1.0 } else { 0.0 });
    assert_eq!(decode_greedy(&s), vec![0, 0, 0]);
    let s = ArcScores::from_fn(2, |h, d| if (h, d) == (2, 1) || (h, d) == (1, 2) { 5.0 } else { 0.0 });
    let heads = decode_greedy(&s);
    assert_eq!(heads, vec![2, 1]);
    assert!(validate_heads(&heads).is_err());
    let s = ArcScores::from_fn(3, |_, _| 0.0);
    assert_eq!(decode_greedy(&s), vec![0, 0, 0]);
    let s = ArcScores::from_fn(3, |h, _| if h >= 2 { 1.0 } else { 0.0 });
    assert_eq!(decode_greedy(&s), vec![2, 3, 2]);
}

#[test]
fn mst_matches_exhaustive_search() {
    let mut rng = SeedKey::new(2024).stream();
    for trial in 0..1000 {
        let n = 2 + trial % 5;
        let s = random_scores(n, &mut rng);
        let heads = decode_mst(&s, true);
        assert!(validate_heads(&heads).is_ok(), "trial {trial}: {heads:?}");
        assert_eq!(s.tree_score(&heads), brute_force_best(&s), "trial {trial}");
    }
}

#[test]
fn unconstrained_mst_is_a_valid_arborescence_at_least_as_good() {
    let mut rng = SeedKey::new(7).stream();
    for _ in 0..200 {
        let n = rng.gen_range(1..8);
        let s = random_scores(n, &mut rng);
        let free = decode_mst(&s, false);
        let rooted = decode_mst(&s, true);
        assert!(s.tree_score(&free) >= s.tree_score(&rooted));
        // no cycles and everything reachable, though several root children are allowed
        let mut seen = vec![false; n + 1];
        for start in 1..=n {
            let mut v = start;
            let mut steps = 0;
            while v != 0 {
                v = free[v - 1];
                steps += 1;
                assert!(steps <= n, "cycle in {free:?}");
            }
            seen[start] = true;
        }
    }
}

#[test]
fn mst_dominates_valid_greedy() {
    let mut rng = SeedKey::new(8).stream();
    let mut valid_greedy = 0;
    for _ in 0..2000 {
        let n = rng.gen_range(1..6);
        let s = random_scores(n, &mut rng);
        let greedy = decode_greedy(&s);
        if validate_heads(&greedy).is_ok() {
            valid_greedy += 1;
            let mst = decode_mst(&s, true);
            assert!(s.tree_score(&mst) >= s.tree_score(&greedy));
            // a valid greedy tree takes every column maximum, so it is optimal
            assert_eq!(s.tree_score(&mst), s.tree_score(&greedy));
        }
    }
    assert!(valid_greedy > 50);
}

#[test]
fn mst_is_shift_invariant() {
    let mut rng = SeedKey::new(9).stream();
    for _ in 0..300 {
        let n = rng.gen_range(1..8);
        let s = random_scores(n, &mut rng);
        let c = rng.gen_range(-100.0..100.0);
        assert_eq!(decode_mst(&s, true), decode_mst(&s.shifted(c), true));
    }
}

fn sentence_r() -> Sentence {
    Sentence::new(vec![
        Token::new(1, "rāmaḥ", "NOUN", 3, "nsubj").with_feat("Case", "Nom").with_feat("Number", "Sg"),
        Token::new(2, "phalam", "NOUN", 3, "obj").with_feat("Case", "Acc").with_feat("Number", "Sg"),
        Token::new(3, "khādati", "VERB", 0, "root").with_feat("Number", "Sg").with_feat("Person", "3"),
    ])
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        word_dim: 3,
        char_dim: 2,
        char_filters: 2,
        char_kernel: 2,
        lstm_hidden: 2,
        lstm_layers: 1,
        dropout: 0.2,
    }
}

fn tiny_parser(store: &mut ParameterStore, relations: &[&str], n_encoders: usize) -> Parser {
    let s = sentence_r();
    let forms: Vec<&str> = s.tokens.iter().map(|t| t.form.as_str()).collect();
    let encoders = (0..n_encoders)
        .map(|k| EncoderSpec::from_forms(&format!("enc{k}"), tiny_config(), forms.iter().copied()))
        .collect();
    let mut spec = ParserSpec::new(encoders, LabelSet::build(relations.iter().copied()));
    spec.arc_mlp = 3;
    spec.label_mlp = 2;
    Parser::new(store, &spec, SeedKey::new(1)).unwrap()
}

fn randomize(store: &mut ParameterStore, seed: u64) {
    let mut rng = SeedKey::new(seed).stream();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

#[test]
fn arc_score_layout_and_zero_weight_ties() {
    let mut store = ParameterStore::new();
    let p = tiny_parser(&mut store, &["nsubj", "obj", "root"], 1);
    let input = p.prepare(&sentence_r()).unwrap();
    let mut g = Graph::new(&store);
    let h = p.encode(&mut g, &input, &Mode::eval()).unwrap();
    let s = p.score_arcs(&mut g, h, &Mode::eval()).unwrap();
    assert_eq!(g.value(s).shape(), &[4, 4]);
    let scores = arc_scores_of(g.value(s));
    let masked = (1..=3).filter(|&d| scores.get(d, d) == f64::NEG_INFINITY).count();
    assert_eq!(masked, 3);
    for d in 1..=3 {
        for h in (0..=3).filter(|&h| h != d) {
            assert_eq!(scores.get(h, d), 0.0);
        }
    }
    assert_eq!(decode_greedy(&scores), vec![0, 0, 0]);
}

#[test]
fn head_distributions_sum_to_one() {
    let mut store = ParameterStore::new();
    let p = tiny_parser(&mut store, &["nsubj", "obj", "root"], 1);
    randomize(&mut store, 3);
    let input = p.prepare(&sentence_r()).unwrap();
    let mut g = Graph::new(&store);
    let h = p.encode(&mut g, &input, &Mode::eval()).unwrap();
    let s = p.score_arcs(&mut g, h, &Mode::eval()).unwrap();
    let scores = arc_scores_of(g.value(s));
    for d in 1..=3 {
        let col: Vec<f64> = (0..=3).map(|h| scores.get(h, d)).collect();
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = col.iter().map(|v| (v - mx).exp()).sum();
        let total: f64 = col.iter().map(|v| (v - mx).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn label_scoring_contracts() {
    let mut store = ParameterStore::new();
    let p = tiny_parser(&mut store, &["dep"], 1);
    let input = p.prepare(&sentence_r()).unwrap();
    let tree = p.predict_input(&store, &input).unwrap();
    assert_eq!(tree.labels, vec!["dep"; 3]);
    let mut g = Graph::new(&store);
    let h = p.encode(&mut g, &input, &Mode::eval()).unwrap();
    let l = p.score_labels(&mut g, h, &[3, 3, 0], &Mode::eval()).unwrap();
    assert_eq!(g.value(l).shape(), &[3, 1]);
    assert!(matches!(
        p.score_labels(&mut g, h, &[3, 4, 0], &Mode::eval()),
        Err(crate::Error::Contract(_))
    ));

    let mut store = ParameterStore::new();
    let p = tiny_parser(&mut store, &["nsubj", "obj", "root"], 1);
    let mut g = Graph::new(&store);
    let h = p.encode(&mut g, &input, &Mode::eval()).unwrap();
    let l = p.score_labels(&mut g, h, &[3, 3, 0], &Mode::eval()).unwrap();
    let probs = g.softmax(l, crate::autodiff::Axis::Cols);
    assert!(g.value(probs).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn fresh_parser_loss_is_uniform() {
    // two tokens, three relations: every head and label equally likely
    let s = Sentence::new(vec![Token::new(1, "a", "X", 0, "root"), Token::new(2, "b", "X", 1, "dep")]);
    let forms = ["a", "b"];
    let spec = ParserSpec::new(
        vec![EncoderSpec::from_forms("enc", tiny_config(), forms)],
        LabelSet::build(["root", "dep", "other"]),
    );
    let mut store = ParameterStore::new();
    let p = Parser::new(&mut store, &spec, SeedKey::new(1)).unwrap();
    let input = p.prepare(&s).unwrap();
    let mut g = Graph::new(&store);
    let l = p.loss(&mut g, &input, &Mode::eval()).unwrap();
    assert!((g.value(l).item() - (2f64.ln() + 3f64.ln())).abs() < 1e-12);
}

#[test]
fn arc_loss_vanishes_for_confident_scores() {
    let mut g = Graph::<'_>::detached();
    let mut m = vec![0.0; 16];
    for (d, h) in [(1, 3), (2, 3), (3, 0)] {
        m[h * 4 + d] = 200.0;
    }
    let s = g.constant(crate::Tensor::matrix(4, 4, m).unwrap());
    let l = arc_loss(&mut g, s, &[3, 3, 0]).unwrap();
    assert!(g.value(l).item() < 1e-12);
}

#[test]
fn label_loss_uses_the_given_heads() {
    let mut store = ParameterStore::new();
    let p = tiny_parser(&mut store, &["nsubj", "obj", "root"], 1);
    randomize(&mut store, 5);
    let mut input = p.prepare(&sentence_r()).unwrap();
    let total = |input: &ParserInput| {
        let mut g = Graph::new(&store);
        let l = p.loss(&mut g, input, &Mode::eval()).unwrap();
        g.value(l).item()
    };
    let manual = |input: &ParserInput| {
        let mut g = Graph::new(&store);
        let h = p.encode(&mut g, input, &Mode::eval()).unwrap();
        let s = p.score_arcs(&mut g, h, &Mode::eval()).unwrap();
        let a = arc_loss(&mut g, s, &input.heads).unwrap();
        let l = p.score_labels(&mut g, h, &input.heads, &Mode::eval()).unwrap();
        let rels: Vec<usize> = input.rels.iter().map(|r| r.unwrap()).collect();
        let c = g.cross_entropy(l, &rels).unwrap();
        g.value(a).item() + g.value(c).item()
    };
    assert!((total(&input) - manual(&input)).abs() < 1e-12);
    input.heads = vec![2, 0, 2];
    assert!((total(&input) - manual(&input)).abs() < 1e-12);
}

#[test]
fn parser_loss_gradients_match_finite_differences() {
    let mut store = ParameterStore::new();
    let s = sentence_r();
    let forms: Vec<&str> = s.tokens.iter().map(|t| t.form.as_str()).collect();
    let mut spec = ParserSpec::new(
        vec![
            EncoderSpec::from_forms("enc0", tiny_config(), forms.iter().copied()),
            EncoderSpec::from_forms("enc1", EncoderConfig { lstm_hidden: 3, ..tiny_config() }, forms.iter().copied()),
        ],
        LabelSet::build(["nsubj", "obj", "root"]),
    );
    spec.arc_mlp = 3;
    spec.label_mlp = 2;
    spec.aux_task = Some(AuxTaskSpec {
        scheme: crate::tagschemes::TagScheme::CT,
        vocab: crate::vocab::Vocab::build(["Nom", "Acc", "VERB"], 1),
        weight: 0.7,
    });
    let p = Parser::new(&mut store, &spec, SeedKey::new(1)).unwrap();
    randomize(&mut store, 11);
    let input = p.prepare(&s).unwrap();
    let r = crate::autodiff::grad_check(&mut store, |g| p.loss(g, &input, &Mode::eval()), 1e-5, 300, 5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn predictions_are_valid_and_deterministic() {
    let mut store = ParameterStore::new();
    let p = tiny_parser(&mut store, &["nsubj", "obj", "root"], 2);
    for seed in 0..20 {
        randomize(&mut store, seed);
        let a = p.predict(&store, &sentence_r()).unwrap();
        assert!(validate_heads(&a.heads).is_ok());
        assert_eq!(a, p.predict(&store, &sentence_r()).unwrap());
    }
    assert!(p.predict(&store, &Sentence::new(vec![])).unwrap().heads.is_empty());
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut store = ParameterStore::new();
    let p = tiny_parser(&mut store, &["nsubj", "obj", "root"], 2);
    randomize(&mut store, 4);
    p.save(&store, &path).unwrap();
    let (q, qs) = Parser::load(&path).unwrap();
    assert_eq!(q.spec, p.spec);
    assert_eq!(q.predict(&qs, &sentence_r()).unwrap(), p.predict(&store, &sentence_r()).unwrap());
    for id in store.ids() {
        assert_eq!(store.value(id).data(), qs.value(id).data());
    }
}
