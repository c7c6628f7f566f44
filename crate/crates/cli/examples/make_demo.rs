//! Regenerates the files under demo/. Run from the repository root:
//! `cargo run -p multicsr-cli --example make_demo`

use multicsr_core::backend::FixtureTableBuilder;
use multicsr_core::corpus::{write_jsonl, write_sts, Sentence, StsExample};
use multicsr_core::prompts::{render_scoring_prompt, PromptCatalog};
use std::path::Path;

const PREMISES: [&str; 8] = [
    "A woman reads a book in the park.",
    "The train leaves the station at noon.",
    "Two dogs chase a ball across the yard.",
    "The chef tastes the soup before serving.",
    "Children build a sandcastle near the waves.",
    "An old clock ticks in the quiet hallway.",
    "The gardener waters the roses every morning.",
    "A violinist practices scales by the open window.",
];

const ENTAILMENTS: [&str; 4] = [
    "Someone is spending time outdoors with a book.",
    "A departure is scheduled for the middle of the day.",
    "Animals are playing with a toy outside.",
    "A cook checks the flavor of a dish.",
];

const CONTRADICTIONS: [&str; 4] = [
    "Nobody is reading anything today.",
    "The station has been closed for years.",
    "The yard is completely empty.",
    "The kitchen has no food in it.",
];

fn main() {
    let demo = Path::new("demo");
    std::fs::create_dir_all(demo).unwrap();

    let premises: Vec<Sentence> = PREMISES
        .iter()
        .enumerate()
        .map(|(i, text)| Sentence::new(format!("p{}", i + 1), *text))
        .collect();
    write_jsonl(&premises, &demo.join("premises.jsonl")).unwrap();

    let catalog = PromptCatalog::builtin();
    let mut builder = FixtureTableBuilder::new();
    for (i, id) in ["ent-1", "ent-2", "ent-3", "ent-4"].iter().enumerate() {
        builder.canned(id, ENTAILMENTS[i]);
    }
    for (i, id) in ["con-1", "con-2", "con-3", "con-4"].iter().enumerate() {
        builder.canned(id, CONTRADICTIONS[i]);
    }
    // scores cycle through keep and each drop rule
    let scores = [
        ("4.5", "0.0"),
        ("5.0", "0.5"),
        ("3.0", "1.0"),
        ("2.0", "0.0"),
        ("4.0", "4.0"),
        ("3.5", "3.0"),
    ];
    for (i, premise) in PREMISES.iter().enumerate() {
        let (a, b) = scores[i % scores.len()];
        for hyp in ENTAILMENTS {
            builder.canned(
                &render_scoring_prompt(&catalog.scoring().template, premise, hyp),
                a,
            );
        }
        for hyp in CONTRADICTIONS {
            builder.canned(
                &render_scoring_prompt(&catalog.scoring().template, premise, hyp),
                b,
            );
        }
    }
    builder.write(&demo.join("fixture_lm.jsonl")).unwrap();

    let pairs = [
        (0usize, 0usize, 4.8),
        (1, 1, 4.5),
        (2, 2, 4.2),
        (3, 3, 4.6),
        (0, 1, 0.5),
        (1, 2, 0.2),
        (2, 3, 0.8),
        (3, 4, 0.4),
        (4, 5, 0.3),
        (5, 6, 0.6),
        (6, 7, 0.2),
        (7, 0, 0.5),
    ];
    let sts: Vec<StsExample> = pairs
        .iter()
        .map(|&(i, j, gold)| StsExample {
            sent1: PREMISES[i].to_string(),
            sent2: if gold > 2.0 {
                ENTAILMENTS[i % 4].to_string()
            } else {
                PREMISES[j].to_string()
            },
            gold,
        })
        .collect();
    write_sts(&sts, &demo.join("dev.tsv")).unwrap();
    write_sts(&sts, &demo.join("test.tsv")).unwrap();

    let config = serde_json::json!({
        "backend": {"kind": "fixture", "fixture_path": "demo/fixture_lm.jsonl"},
        "generation": {"omega": 0.3, "max_tokens": 64, "seed": 7, "mode": "direct"},
        "policy": {"alpha": 3.0, "beta": 3.0, "gamma": 1.0},
        "train": {
            "tau": 0.05, "sigma": 0.9, "batch_size": 8, "lr": 0.02, "epochs": 4,
            "seed": 7, "mask_enabled": true, "buckets": 1024, "dim": 16
        },
        "paths": {
            "premises": "demo/premises.jsonl",
            "work_dir": "demo/out",
            "dev_sts": "demo/dev.tsv",
            "test_sts": "demo/test.tsv"
        },
        "reference": {"kind": "hash", "seed": 99, "buckets": 1024, "dim": 16},
        "workers": 2,
        "max_retries": 1
    });
    std::fs::write(
        demo.join("config.json"),
        serde_json::to_string_pretty(&config).unwrap() + "\n",
    )
    .unwrap();
    println!("demo files written to {}", demo.display());
}
