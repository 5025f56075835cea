use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use radgen::encoders::normalize;
use radgen::metrics::{
    bleu, cider, cider_length_penalty, cider_orders, clinical_efficacy, clinical_efficacy_macro, evaluate_corpus,
    extract_labels, label_index, meteor, rouge_l, Tokens,
};

fn toks(s: &str) -> Tokens {
    normalize(s)
}

#[test]
fn bleu_cat_example() {
    let c = vec![toks("the cat sat")];
    let r = vec![vec![toks("the cat sat on the mat")]];
    let b2 = bleu(&c, &r, 2).unwrap();
    assert!((b2 - (-1.0f64).exp()).abs() < 1e-9);
    assert!((b2 - 0.367879).abs() < 1e-6);
}

#[test]
fn bleu_identity_and_disjoint() {
    let c = vec![toks("a b c d e"), toks("f g h i")];
    let r: Vec<_> = c.iter().map(|x| vec![x.clone()]).collect();
    for n in 1..=4 {
        assert!((bleu(&c, &r, n).unwrap() - 1.0).abs() < 1e-12);
    }
    let d = vec![vec![toks("v w x y z")], vec![toks("p q r s")]];
    assert_eq!(bleu(&c, &d, 1).unwrap(), 0.0);
    assert!(bleu(&[], &[], 1).is_err());
}

#[test]
fn bleu_clips_repeated_ngrams() {
    // "the the the" vs "the cat": p1 = 1/3, BP = 1
    let b1 = bleu(&[toks("the the the")], &[vec![toks("the cat")]], 1).unwrap();
    assert!((b1 - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn rouge_example() {
    let r = rouge_l(&[toks("a b c d")], &[toks("a c b d")]).unwrap();
    assert!((r - 0.75).abs() < 1e-9);
    assert!((rouge_l(&[toks("a b")], &[toks("a b")]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rouge_l(&[toks("a b")], &[toks("c d")]).unwrap(), 0.0);
}

#[test]
fn meteor_examples() {
    let m = meteor(&[toks("a b c")], &[toks("a b c")]).unwrap();
    assert!((m - 0.981481).abs() < 1e-6);
    assert!((m - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
    assert!((meteor(&[toks("b a")], &[toks("a b")]).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(meteor(&[toks("x y")], &[toks("a b")]).unwrap(), 0.0);
}

#[test]
fn cider_examples() {
    let c = vec![toks("a b"), toks("c d")];
    let r = vec![toks("a b"), toks("c d")];
    // both candidates match their references: each contributes 10 * (1 + 1 + 0 + 0) / 4
    assert!((cider(&c, &r).unwrap() - 5.0).abs() < 1e-9);
    let c1 = vec![toks("a b"), toks("x")];
    // sample 2 contributes 0, sample 1 contributes 5 -> corpus mean 2.5
    assert!((cider(&c1, &r).unwrap() - 2.5).abs() < 1e-9);
    assert!(cider(&c[..1], &r[..1]).is_err());
    // every n-gram in every reference: all idf zero
    let same = vec![toks("a b"), toks("a b")];
    assert_eq!(cider(&same, &same).unwrap(), 0.0);
}

#[test]
fn cider_length_penalty_sigma_six() {
    assert!((cider_length_penalty(12.0) - (-2.0f64).exp()).abs() < 1e-15);
    // "a b" repeated seven times has the reference's unigram tf profile, 12 extra tokens
    let long: Tokens = std::iter::repeat(["a", "b"]).take(7).flatten().map(String::from).collect();
    let c = vec![long, toks("c d")];
    let r = vec![toks("a b"), toks("c d")];
    let s = cider_orders(&c, &r, 1).unwrap();
    assert!((s - 10.0 * (1.0 + (-2.0f64).exp()) / 2.0).abs() < 1e-12);
}

#[test]
fn ce_examples() {
    let gt = ["pneumothorax . effusion .", "cardiomegaly ."];
    let p = clinical_efficacy(&gt, &gt).unwrap();
    assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    let none = ["normal .", "normal ."];
    let z = clinical_efficacy(&none, &gt).unwrap();
    assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
    let allzero = clinical_efficacy(&none, &none).unwrap();
    assert_eq!((allzero.precision, allzero.recall, allzero.f1), (0.0, 0.0, 0.0));
    let m = clinical_efficacy_macro(&["effusion .", "cardiomegaly ."], &gt).unwrap();
    assert!((m.recall - 0.75).abs() < 1e-12);
}

#[test]
fn extractor_examples() {
    let v = extract_labels("no pleural effusion . small pneumothorax .");
    assert!(!v.get(label_index("pleural_effusion").unwrap()));
    assert!(v.get(label_index("pneumothorax").unwrap()));
    assert_eq!(extract_labels("No acute findings").count(), 0);
}

fn corpus() -> (Vec<String>, Vec<String>) {
    let gt = vec![
        "the heart is enlarged . no pneumothorax .",
        "small left pleural effusion . lungs otherwise clear .",
        "there is a right lower lobe consolidation concerning for pneumonia .",
        "no acute cardiopulmonary process .",
        "a nasogastric tube is in place . mild pulmonary edema .",
        "No pleural effusion. Small pneumothorax.",
    ];
    let pred = vec![
        "the heart is enlarged .",
        "small pleural effusion . lungs clear .",
        "right lower lobe consolidation .",
        "no acute process .",
        "a tube is in place . pulmonary edema is mild .",
        "small pneumothorax . no effusion .",
    ];
    (
        pred.into_iter().map(String::from).collect(),
        gt.into_iter().map(String::from).collect(),
    )
}

#[test]
fn identical_corpus_scores() {
    let (_, gt) = corpus();
    let r = evaluate_corpus(&gt, &gt).unwrap();
    for v in [r.b1, r.b2, r.b3, r.b4, r.rouge_l, r.ce_p, r.ce_r, r.ce_f1] {
        assert!((v - 1.0).abs() < 1e-12);
    }
    assert_eq!(r.n, 6);
}

#[test]
fn record_key_order() {
    let (p, g) = corpus();
    let rec = evaluate_corpus(&p, &g).unwrap().to_record();
    let keys = ["b1", "b2", "b3", "b4", "rouge_l", "meteor", "cider", "ce_p", "ce_r", "ce_f1", "n"];
    let pos: Vec<usize> = keys.iter().map(|k| rec.find(&format!("\"{k}\"")).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{rec}");
}

#[test]
fn metrics_are_permutation_invariant() {
    let (p, g) = corpus();
    let base = evaluate_corpus(&p, &g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut idx: Vec<usize> = (0..p.len()).collect();
    for _ in 0..10 {
        idx.shuffle(&mut rng);
        let pp: Vec<_> = idx.iter().map(|&i| p[i].clone()).collect();
        let gg: Vec<_> = idx.iter().map(|&i| g[i].clone()).collect();
        let r = evaluate_corpus(&pp, &gg).unwrap();
        for (a, b) in [
            (r.b1, base.b1),
            (r.b2, base.b2),
            (r.b3, base.b3),
            (r.b4, base.b4),
            (r.rouge_l, base.rouge_l),
            (r.meteor, base.meteor),
            (r.cider, base.cider),
            (r.ce_f1, base.ce_f1),
        ] {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn metrics_are_case_invariant_and_pure() {
    let (p, g) = corpus();
    let upper: Vec<String> = p.iter().map(|s| s.to_uppercase()).collect();
    let a = evaluate_corpus(&p, &g).unwrap();
    let b = evaluate_corpus(&upper, &g).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, evaluate_corpus(&p, &g).unwrap());
}

#[test]
fn removing_a_sample_recomputes_exactly() {
    let (p, g) = corpus();
    let full = evaluate_corpus(&p, &g).unwrap();
    let less = evaluate_corpus(&p[1..], &g[1..]).unwrap();
    assert_eq!(full.n, less.n + 1);
    // rouge_l and meteor are sample means: the removed sample's leverage is exact
    let c0 = normalize(&p[0]);
    let r0 = normalize(&g[0]);
    let r_only = rouge_l(&[c0.clone()], &[r0.clone()]).unwrap();
    assert!((full.rouge_l * 6.0 - (less.rouge_l * 5.0 + r_only)).abs() < 1e-12);
    let m_only = meteor(&[c0], &[r0]).unwrap();
    assert!((full.meteor * 6.0 - (less.meteor * 5.0 + m_only)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn meteor_self_score_formula(words in proptest::collection::vec("[a-e]", 1..12)) {
        let t: Tokens = words;
        let m = meteor(&[t.clone()], &[t.clone()]).unwrap();
        let expected = 1.0 - 0.5 * (1.0 / t.len() as f64).powi(3);
        prop_assert!((m - expected).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_range(a in proptest::collection::vec("[a-d]", 1..10), b in proptest::collection::vec("[a-d]", 1..10)) {
        let c = vec![a.clone(), b.clone()];
        let r = vec![b, a];
        let mr: Vec<Vec<Tokens>> = r.iter().map(|x| vec![x.clone()]).collect();
        for n in 1..=4 {
            let s = bleu(&c, &mr, n).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }
        let rl = rouge_l(&c, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&rl));
        let ci = cider(&c, &r).unwrap();
        prop_assert!((0.0..=10.0 + 1e-9).contains(&ci));
    }
}

#[test]
fn repeated_evaluation_is_bitwise_identical() {
    let (p, g) = corpus();
    let first = evaluate_corpus(&p, &g).unwrap();
    for _ in 0..20 {
        let again = evaluate_corpus(&p, &g).unwrap();
        assert_eq!(again.cider.to_bits(), first.cider.to_bits());
        assert_eq!(again, first);
    }
}
