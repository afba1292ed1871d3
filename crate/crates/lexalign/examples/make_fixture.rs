//! Writes the bundled 50-token synthetic session used by the pipeline tests.
//!
//! Three models share a small word-level vocabulary. `big` holds 50 tokens,
//! `mid` 44 and `small` 40; each has a few tokens of its own. Embeddings of
//! shared tokens are noisy rotations of one base table, so alignment is
//! learnable. `big` and `mid` are n-gram clients; `small` replays a script.
//!
//! Usage: `cargo run -p lexalign --example make_fixture -- <out-dir>`

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lexalign::embed_store::{save_word2vec, EmbeddingSet};
use lexalign::ensemble::STOP_TOKEN;

const DIM: usize = 8;
const SEED: u64 = 50;

const SHARED: [&str; 37] = [
    "the", "a", "cat", "dog", "bird", "fish", "sees", "likes", "eats", "finds", "red", "blue",
    "small", "big", "old", "new", "tree", "house", "river", "hill", "and", "near", "under", "over",
    "runs", "sleeps", "sings", "swims", "happy", "quiet", "green", "stone", "road", "sun", "moon",
    "rain", "snow",
];

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

fn sentence(rng: &mut ChaCha8Rng, words: &[&str]) -> String {
    let len = rng.random_range(3..=6);
    (0..len).map(|_| *words.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

struct Model {
    name: &'static str,
    tokens: Vec<String>,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic50"));
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    let with_stop = |shared: usize, own: &[&str]| -> Vec<String> {
        std::iter::once(STOP_TOKEN)
            .chain(SHARED[..shared].iter().copied())
            .chain(own.iter().copied())
            .map(str::to_owned)
            .collect()
    };
    let models = [
        Model {
            name: "big",
            tokens: with_stop(37, &["cloud", "wind", "leaf", "rock", "lake", "path", "star", "bright", "dark", "fast", "slow", "warm"]),
        },
        Model {
            name: "mid",
            tokens: with_stop(36, &["ocean", "field", "gold", "silver", "wave", "shell", "cold"]),
        },
        Model {
            name: "small",
            tokens: with_stop(33, &["lamp", "door", "wall", "roof", "glass", "paper"]),
        },
    ];

    // one base vector per distinct token across all models
    let mut base = std::collections::BTreeMap::new();
    for m in &models {
        for t in &m.tokens {
            base.entry(t.clone())
                .or_insert_with(|| (0..DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>());
        }
    }

    let mut config = String::new();
    writeln!(config, "pivot = \"auto\"\n")?;
    for (mi, m) in models.iter().enumerate() {
        let rot = if mi == 0 { DMatrix::identity(DIM, DIM) } else { random_orthogonal(&mut rng, DIM) };
        let rows: Vec<(String, Vec<f64>)> = m
            .tokens
            .iter()
            .map(|t| {
                let v = nalgebra::RowDVector::from_vec(base[t].clone()) * &rot;
                let noisy = v.iter().map(|x| x + 0.02 * rng.sample::<f64, _>(StandardNormal)).collect();
                (t.clone(), noisy)
            })
            .collect();
        let set = EmbeddingSet::from_rows(rows)?;
        save_word2vec(&set, &out.join(format!("{}.vec", m.name)))?;

        let words: Vec<&str> = m.tokens[1..].iter().map(String::as_str).collect();
        writeln!(config, "[[models]]\nname = \"{}\"\nembeddings = \"{}.vec\"", m.name, m.name)?;
        if m.name == "small" {
            let mut script = String::new();
            for step in 0..8 {
                let mut picks: Vec<&str> = words.choose_multiple(&mut rng, 5).copied().collect();
                if step == 7 {
                    picks[0] = STOP_TOKEN;
                }
                let dist: Vec<String> = picks
                    .iter()
                    .enumerate()
                    .map(|(r, t)| format!("[\"{t}\", {:.3}]", 0.5 / (r + 1) as f64))
                    .collect();
                writeln!(script, "{{\"step\": {step}, \"dist\": [{}]}}", dist.join(", "))?;
            }
            std::fs::write(out.join("small.jsonl"), script)?;
            writeln!(config, "client = {{ kind = \"replay\", script = \"small.jsonl\" }}\n")?;
        } else {
            let corpus: Vec<String> = (0..60).map(|_| sentence(&mut rng, &words)).collect();
            std::fs::write(out.join(format!("{}.txt", m.name)), corpus.join("\n") + "\n")?;
            let order = if m.name == "big" { 2 } else { 3 };
            writeln!(
                config,
                "client = {{ kind = \"ngram\", corpus = \"{}.txt\", order = {order} }}\n",
                m.name
            )?;
        }
    }
    std::fs::write(out.join("prompts.txt"), "the cat\na dog sees\nthe old river\n")?;
    config.push_str(
        "[ensemble]\nn = 3\nmax_len = 8\nlog_top = 10\n\n\
         [decode]\nprompt_file = \"prompts.txt\"\n\n\
         [stats]\nn_values = [3, 5, 10]\n\n\
         [paths]\nwork_dir = \"out\"\n",
    );
    std::fs::write(out.join("session.toml"), config)?;
    println!("wrote fixture to {}", out.display());
    Ok(())
}
