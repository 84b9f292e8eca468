//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use synthqa_core::embedding::Vector;

/// Three Gaussian blobs with unit spread, centers `separation` apart on
/// separate axes.
pub fn planted_vectors(seed: u64, n: usize, dim: usize, separation: f64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    (0..n)
        .map(|i| {
            let values = (0..dim).map(|d| if d == i % 3 { separation } else { 0.0 } + noise.sample(&mut rng)).collect();
            Vector::new(values).expect("finite values")
        })
        .collect()
}

/// Markdown with page markers, headings and `paragraphs` paragraphs of
/// random words.
pub fn synthetic_markdown(seed: u64, paragraphs: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("<<<page 1>>>\n# Document\n\n");
    for p in 0..paragraphs {
        if p % 8 == 7 {
            out.push_str(&format!("<<<page {}>>>\n## Part {p}\n\n", p / 8 + 2));
        }
        let sentences = rng.random_range(2..12);
        for s in 0..sentences {
            if s > 0 {
                out.push(' ');
            }
            let words: Vec<String> = (0..rng.random_range(4..20)).map(|_| format!("w{}", rng.random_range(0..2000))).collect();
            out.push_str(&words.join(" "));
            out.push('.');
        }
        out.push_str("\n\n");
    }
    out
}

/// `n` short questions over a vocabulary of `vocab` words.
pub fn synthetic_questions(seed: u64, n: usize, vocab: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words: Vec<String> = (0..rng.random_range(6..16)).map(|_| format!("t{}", rng.random_range(0..vocab))).collect();
            format!("{}?", words.join(" "))
        })
        .collect()
}
