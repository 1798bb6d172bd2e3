//! ROUGE-N, ROUGE-L and Weighted ROUGE on a few pairs, word and character level.

use loracal::metrics::{evaluate_set_with, rouge_l, rouge_n, score, weighted_rouge, Metric, Tokenization};

fn main() -> loracal::Result<()> {
    let pairs = [
        ("the cat sat on the mat", "the cat sat on the mat"),
        ("the cat sat", "a cat sat on a mat"),
        ("completely different words", "the cat sat on the mat"),
    ];
    for (cand, refr) in pairs {
        println!("{cand:?} vs {refr:?}");
        println!(
            "  R1 f1 {:.3}  R2 f1 {:.3}  RL f1 {:.3}  W-R {:.3}  W-R chars {:.3}",
            rouge_n(cand, refr, 1).f1,
            rouge_n(cand, refr, 2).f1,
            rouge_l(cand, refr).f1,
            weighted_rouge(cand, refr),
            score(Metric::WeightedRouge, cand, refr, Tokenization::Chars),
        );
    }
    for m in [Metric::ExactMatch, Metric::RougeL, Metric::WeightedRouge] {
        println!("{:16} {:6.2}", m.name(), evaluate_set_with(&pairs, m, Tokenization::Words)?);
    }
    Ok(())
}
