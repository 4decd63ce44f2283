//! Seeded template corpus for demos and end-to-end tests.
//!
//! Every pair instantiates one of a few query/response templates with a
//! noun (and sometimes a color). Responses of the same template overlap
//! enough that retrieved prototypes fall inside the default Jaccard band.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::StopList;

pub const NOUNS: [&str; 10] =
    ["apple", "banana", "cherry", "grape", "lemon", "mango", "melon", "peach", "pear", "plum"];
pub const COLORS: [&str; 4] = ["red", "green", "yellow", "purple"];
const FILLERS: [&str; 8] = ["really", "very", "friend", "now", "honestly", "too", "always", "maybe"];

/// (query, response) templates; `{x}` is a noun, `{c}` a color.
const TEMPLATES: [(&str, &str); 4] = [
    ("do you like {x}", "yes {x} is my favorite"),
    ("where can i buy {x}", "you can buy {x} there"),
    ("what color is {x}", "i think {x} is {c}"),
    ("have you eaten {x} today", "no not {x} today"),
];

/// Stop words for proxy-skeleton labelling of the template corpus.
pub fn stoplist() -> StopList {
    StopList::new(["is", "my", "i", "you", "can", "do", "the"])
}

fn fill(template: &str, x: &str, c: &str) -> String {
    template.replace("{x}", x).replace("{c}", c)
}

/// `n` pairs drawn with a seeded generator. With `fillers`, responses get up
/// to two extra words appended for lexical variety.
pub fn pairs(n: usize, seed: u64, fillers: bool) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (q, r) = TEMPLATES.choose(&mut rng).expect("non-empty");
            let x = NOUNS.choose(&mut rng).expect("non-empty");
            let c = COLORS.choose(&mut rng).expect("non-empty");
            let mut resp = fill(r, x, c);
            if fillers {
                for _ in 0..rng.gen_range(0..=2) {
                    resp.push(' ');
                    resp.push_str(FILLERS.choose(&mut rng).expect("non-empty"));
                }
            }
            (fill(q, x, c), resp)
        })
        .collect()
}

/// The corpus as JSON lines in the format read by `dataset::load_pairs`.
pub fn to_jsonl(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (q, r) in pairs {
        s.push_str(&serde_json::json!({ "query": q, "response": r }).to_string());
        s.push('\n');
    }
    s
}
