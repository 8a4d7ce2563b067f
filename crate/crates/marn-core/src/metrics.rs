//! Corpus captioning metrics: BLEU-4, ROUGE-L, and CIDEr over
//! (candidate, references) pairs of tokenized sentences.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

pub type Sentence = Vec<String>;

/// One evaluated video: the generated caption and its reference set.
pub type Pair = (Sentence, Vec<Sentence>);

const MAX_NGRAM: usize = 4;

fn ngram_counts(sentence: &[String], n: usize) -> BTreeMap<&[String], u64> {
    let mut counts: BTreeMap<&[String], u64> = BTreeMap::new();
    for gram in sentence.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn validate(pairs: &[Pair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(CoreError::Contract("metric over an empty corpus".into()));
    }
    if pairs.iter().any(|(_, refs)| refs.is_empty()) {
        return Err(CoreError::Contract(
            "every candidate needs at least one reference".into(),
        ));
    }
    Ok(())
}

/// Corpus BLEU with up-to-4-gram precision, uniform weights, and the
/// brevity penalty. Counts are clipped against the per-reference maximum;
/// no smoothing (a missing n-gram order zeroes the score).
pub fn bleu4(pairs: &[Pair]) -> Result<f64> {
    validate(pairs)?;
    let mut clipped = [0u64; MAX_NGRAM];
    let mut totals = [0u64; MAX_NGRAM];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in pairs {
        cand_len += cand.len();
        // Closest reference length; ties prefer the shorter.
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&rl| {
                let diff = rl.abs_diff(cand.len());
                (diff, rl)
            })
            .unwrap();
        for (n, (clip_n, total_n)) in clipped.iter_mut().zip(&mut totals).enumerate() {
            let n = n + 1;
            let cand_counts = ngram_counts(cand, n);
            *total_n += cand.len().saturating_sub(n - 1) as u64;
            for (gram, &count) in &cand_counts {
                let best_ref = refs
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                *clip_n += count.min(best_ref);
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_NGRAM {
        if totals[n] == 0 || clipped[n] == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(clipped[n] as f64 / totals[n] as f64);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / cand_len as f64)
    };
    Ok(bp * libm::exp(log_sum / MAX_NGRAM as f64))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with beta = 1.2; per candidate the maximum over its
/// references, averaged over the corpus.
pub fn rouge_l(pairs: &[Pair]) -> Result<f64> {
    validate(pairs)?;
    const BETA: f64 = 1.2;
    let mut total = 0.0;
    for (cand, refs) in pairs {
        let mut best = 0.0f64;
        for r in refs {
            if cand.is_empty() || r.is_empty() {
                continue;
            }
            let lcs = lcs_len(cand, r) as f64;
            let prec = lcs / cand.len() as f64;
            let rec = lcs / r.len() as f64;
            if prec + rec > 0.0 {
                let f = ((1.0 + BETA * BETA) * prec * rec) / (rec + BETA * BETA * prec);
                best = best.max(f);
            }
        }
        total += best;
    }
    Ok(total / pairs.len() as f64)
}

/// TF-IDF n-gram vector of a sentence for one order, keyed by n-gram.
/// Raw counts are used as TF; cosine similarity is scale-invariant so this
/// matches the normalized-frequency definition.
fn tfidf_vec<'a>(
    sentence: &'a [String],
    n: usize,
    idf: &BTreeMap<&[String], f64>,
    log_corpus: f64,
) -> BTreeMap<&'a [String], f64> {
    ngram_counts(sentence, n)
        .into_iter()
        .map(|(gram, count)| {
            let w = idf.get(gram).copied().unwrap_or(log_corpus);
            (gram, count as f64 * w)
        })
        .collect()
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, x)| b.get(g).map(|y| x * y))
        .sum();
    let na: f64 = libm::sqrt(a.values().map(|x| x * x).sum());
    let nb: f64 = libm::sqrt(b.values().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: TF-IDF weighted n-gram cosine consensus, n = 1..4 averaged and
/// scaled by 10. IDF is computed over the evaluated corpus's reference
/// sets; n-grams outside them weigh ln(|I|).
pub fn cider(pairs: &[Pair]) -> Result<f64> {
    validate(pairs)?;
    if pairs.len() < 2 {
        return Err(CoreError::Contract(
            "CIDEr needs a corpus of >= 2 videos to define IDF".into(),
        ));
    }
    let corpus = pairs.len() as f64;
    let log_corpus = libm::log(corpus);
    let mut total = 0.0;
    for n in 1..=MAX_NGRAM {
        // Document frequency: number of videos whose reference set
        // contains the n-gram.
        let mut df: BTreeMap<&[String], f64> = BTreeMap::new();
        for (_, refs) in pairs {
            let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
            for r in refs {
                for gram in r.windows(n) {
                    seen.entry(gram).or_insert(());
                }
            }
            for (gram, ()) in seen {
                *df.entry(gram).or_insert(0.0) += 1.0;
            }
        }
        let idf: BTreeMap<&[String], f64> = df
            .into_iter()
            .map(|(gram, d)| (gram, log_corpus - libm::log(d.max(1.0))))
            .collect();
        let mut order_total = 0.0;
        for (cand, refs) in pairs {
            let cand_vec = tfidf_vec(cand, n, &idf, log_corpus);
            let mut sim = 0.0;
            for r in refs {
                let ref_vec = tfidf_vec(r, n, &idf, log_corpus);
                sim += cosine(&cand_vec, &ref_vec);
            }
            order_total += sim / refs.len() as f64;
        }
        total += order_total / corpus;
    }
    Ok(10.0 * total / MAX_NGRAM as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn s(text: &str) -> Sentence {
        text.split_whitespace().map(|w| w.to_string()).collect()
    }

    fn echo_corpus(texts: &[&str]) -> Vec<Pair> {
        texts.iter().map(|t| (s(t), vec![s(t)])).collect()
    }

    #[test]
    fn bleu_is_one_when_candidates_equal_references() {
        let pairs = echo_corpus(&[
            "a man is pouring oil into a pan",
            "a cat chases a red ball across the yard",
            "two dogs run through tall grass together",
        ]);
        assert!((bleu4(&pairs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_zero_on_disjoint_vocabulary() {
        let pairs = vec![(s("x y z w q"), vec![s("a b c d e")])];
        assert_eq!(bleu4(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn empty_candidate_counts_as_zero_matches() {
        let pairs = vec![
            (s(""), vec![s("a b c d")]),
            (s("a b c d"), vec![s("a b c d")]),
        ];
        let score = bleu4(&pairs).unwrap();
        assert!(score > 0.0 && score < 1.0);
    }

    #[test]
    fn rouge_is_one_on_identical_sentences() {
        let pairs = echo_corpus(&["the quick brown fox", "jumps over the lazy dog"]);
        assert!((rouge_l(&pairs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_is_zero_without_common_tokens() {
        let pairs = vec![(s("x y z"), vec![s("a b c")])];
        assert_eq!(rouge_l(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn lcs_matches_quadratic_oracle() {
        // Independent recursive LCS definition.
        fn lcs_rec(a: &[String], b: &[String]) -> usize {
            if a.is_empty() || b.is_empty() {
                0
            } else if a[a.len() - 1] == b[b.len() - 1] {
                1 + lcs_rec(&a[..a.len() - 1], &b[..b.len() - 1])
            } else {
                lcs_rec(&a[..a.len() - 1], b).max(lcs_rec(a, &b[..b.len() - 1]))
            }
        }
        let a = s("a b c d b a");
        let b = s("b a c b d a b");
        assert_eq!(lcs_len(&a, &b), lcs_rec(&a, &b));
    }

    #[test]
    fn cider_needs_two_videos_for_idf() {
        let pairs = vec![(s("a b"), vec![s("a b")])];
        match cider(&pairs) {
            Err(CoreError::Contract(msg)) => assert!(msg.contains("IDF")),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn cider_is_zero_without_shared_ngrams() {
        let pairs = vec![
            (s("x y z"), vec![s("a b c")]),
            (s("p q r"), vec![s("d e f")]),
        ];
        assert_eq!(cider(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn perfect_candidate_dominates_perturbed_one() {
        let texts = [
            "a man rides a horse along the beach",
            "a woman slices an onion in the kitchen",
            "children play football in the park",
            "a chef pours sauce over fresh pasta",
            "a dog catches a frisbee mid air",
        ];
        let perfect = echo_corpus(&texts);
        let perfect_score = cider(&perfect).unwrap();
        let mut perturbed = perfect.clone();
        perturbed[0].0 = s("a man rides a bike along the beach");
        let perturbed_score = cider(&perturbed).unwrap();
        assert!(perfect_score > perturbed_score);
    }

    #[test]
    fn metrics_are_invariant_to_corpus_order() {
        let pairs = vec![
            (s("a man is cooking rice"), vec![s("a man cooks rice"), s("someone cooks")]),
            (s("a dog runs fast"), vec![s("the dog runs very fast")]),
            (s("children sing a song"), vec![s("kids sing songs")]),
            (s("a man is cooking rice"), vec![s("a person fries rice")]),
        ];
        let mut reversed = pairs.clone();
        reversed.reverse();
        assert!((bleu4(&pairs).unwrap() - bleu4(&reversed).unwrap()).abs() < 1e-12);
        assert!((rouge_l(&pairs).unwrap() - rouge_l(&reversed).unwrap()).abs() < 1e-12);
        assert!((cider(&pairs).unwrap() - cider(&reversed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_bounds() {
        let pairs = vec![
            (s("a b c d e"), vec![s("a b x d e")]),
            (s("f g h"), vec![s("f g h i j")]),
        ];
        let b = bleu4(&pairs).unwrap();
        let r = rouge_l(&pairs).unwrap();
        let c = cider(&pairs).unwrap();
        assert!((0.0..=1.0).contains(&b));
        assert!((0.0..=1.0).contains(&r));
        assert!(c >= 0.0);
    }
}
