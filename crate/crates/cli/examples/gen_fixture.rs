//! Writes the synthetic fixture corpus used by the integration tests.
//!
//! `cargo run -p ci-retrieval-cli --example gen_fixture -- fixtures`
//!
//! Output is a pure function of the seed below.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEED: u64 = 20_240_601;

struct Category {
    name: &'static str,
    products: [&'static str; 4],
    modifiers: &'static [&'static str],
    brands: [&'static str; 3],
    hooks: [&'static str; 3],
}

const CATEGORIES: &[Category] = &[
    Category {
        name: "flowers",
        products: ["flowers", "roses", "tulips", "orchids"],
        modifiers: &["mother's day", "valentine's day", "birthday", "wedding", "sympathy"],
        brands: ["Bloomwell", "Petal Post", "Stem & Co"],
        hooks: ["fresh", "hand tied", "same day"],
    },
    Category {
        name: "shoes",
        products: ["running shoes", "sneakers", "boots", "sandals"],
        modifiers: &["mens", "womens", "kids", "trail"],
        brands: ["Stride", "Kinetic", "Footloose"],
        hooks: ["lightweight", "cushioned", "durable"],
    },
    Category {
        name: "laptops",
        products: ["laptops", "gaming laptops", "notebooks", "chromebooks"],
        modifiers: &["student", "business", "refurbished", "lightweight"],
        brands: ["Byteforge", "Nimbus", "Corelane"],
        hooks: ["fast", "powerful", "portable"],
    },
    Category {
        name: "hotels",
        products: ["hotels", "resorts", "motels", "hostels"],
        modifiers: &["beach", "airport", "downtown", "family"],
        brands: ["Stayrise", "Harbor Inn", "Roamwell"],
        hooks: ["cozy", "affordable", "luxury"],
    },
    Category {
        name: "insurance",
        products: ["car insurance", "home insurance", "pet insurance", "travel insurance"],
        modifiers: &["compare", "affordable", "instant"],
        brands: ["Shieldly", "Covera", "Safeharbor"],
        hooks: ["trusted", "low cost", "flexible"],
    },
    Category {
        name: "food",
        products: ["pizza", "pasta", "burgers", "sushi"],
        modifiers: &["vegan", "late night", "family", "spicy"],
        brands: ["Crustworks", "Noodle Nook", "Grillhouse"],
        hooks: ["hot", "fresh", "quick"],
    },
    Category {
        name: "phones",
        products: ["smartphones", "phone cases", "chargers", "earbuds"],
        modifiers: &["wireless", "android", "unlocked", "budget"],
        brands: ["Voltix", "Casecraft", "Signalo"],
        hooks: ["premium", "slim", "reliable"],
    },
    Category {
        name: "furniture",
        products: ["sofas", "desks", "mattresses", "bookshelves"],
        modifiers: &["modern", "office", "kids", "outdoor"],
        brands: ["Oakhaus", "Restful", "Loftline"],
        hooks: ["handmade", "sturdy", "comfortable"],
    },
];

const TEMPLATES: &[&str] = &[
    "buy {p}",
    "buy {p} online",
    "{p} delivery",
    "cheap {p}",
    "best {p}",
    "{p} sale",
    "{p} near me",
];

const QUERY_TEMPLATES: &[&str] = &[
    "{p}",
    "order {p}",
    "{p} shop",
    "where to get {p}",
    "{m} {p}",
    "{p} for {m}",
    "{p} deals today",
];

fn fill(t: &str, p: &str, m: &str) -> String {
    t.replace("{p}", p).replace("{m}", m)
}

fn product_cis(cat: &Category, p: &str) -> Vec<String> {
    let mut v: Vec<String> = TEMPLATES.iter().map(|t| fill(t, p, "")).collect();
    for m in cat.modifiers {
        let ci = format!("{m} {p}");
        if ci.split(' ').count() <= 4 {
            v.push(ci);
        }
    }
    v
}

fn variant(rng: &mut ChaCha8Rng, ci: &str) -> String {
    match rng.gen_range(0..4) {
        0 => ci.to_uppercase(),
        1 => ci.split(' ').map(capitalize).collect::<Vec<_>>().join(" "),
        2 => format!("  {}", ci.replace(' ', "  ")),
        _ => ci.to_owned(),
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Writer(fs::File);

impl Writer {
    fn create(path: PathBuf) -> Self {
        Writer(fs::File::create(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
    }

    fn line(&mut self, v: serde_json::Value) {
        writeln!(self.0, "{v}").expect("write fixture");
    }
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    fs::create_dir_all(&out).expect("create fixture dir");
    generate(&out);
}

fn generate(out: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    let mut corpus = Writer::create(out.join("ci_corpus.jsonl"));
    for cat in CATEGORIES {
        for p in cat.products {
            for ci in product_cis(cat, p) {
                for _ in 0..rng.gen_range(1..=3) {
                    let text = variant(&mut rng, &ci);
                    corpus.line(json!({ "text": text }));
                }
            }
        }
    }

    let mut ads = Writer::create(out.join("ads.jsonl"));
    let mut ad_pairs = Writer::create(out.join("ad_pairs.jsonl"));
    let mut product_ads: Vec<(String, Vec<String>)> = Vec::new();
    for cat in CATEGORIES {
        for (pi, p) in cat.products.iter().enumerate() {
            let mut ids = Vec::new();
            for (bi, brand) in cat.brands.iter().enumerate() {
                let ad_id = format!("ad-{}-{}{}", cat.name, pi, bi);
                let hook = cat.hooks[(pi + bi) % cat.hooks.len()];
                let title = format!("{brand} {hook} {p}");
                let m = cat.modifiers[(pi + bi) % cat.modifiers.len()];
                let materials = format!("{p} for {m} and every day");
                ads.line(json!({
                    "ad_id": ad_id,
                    "title": title,
                    "landing_page": format!("https://{}.example/{}", brand.to_lowercase().replace([' ', '&'], ""), p.replace(' ', "-")),
                    "materials": materials,
                }));
                let context = format!("{title} {materials}");
                let mut cis = product_cis(cat, p);
                cis.shuffle(&mut rng);
                for ci in cis.iter().take(6 + rng.gen_range(0..4)) {
                    ad_pairs.line(json!({ "context": context, "ci": ci }));
                }
                ids.push(ad_id);
            }
            product_ads.push((p.to_string(), ids));
        }
    }

    let mut pairs = Writer::create(out.join("pairs.jsonl"));
    let mut eval = Writer::create(out.join("eval.jsonl"));
    let mut queries = Vec::new();
    let mut pi = 0;
    for cat in CATEGORIES {
        for p in cat.products {
            let cis = product_cis(cat, p);
            let gt = &product_ads[pi].1;
            pi += 1;
            for t in QUERY_TEMPLATES {
                let m = cat.modifiers.choose(&mut rng).expect("modifiers");
                let q = fill(t, p, m);
                for ci in cis.choose_multiple(&mut rng, 3) {
                    pairs.line(json!({ "context": q, "ci": ci }));
                }
                queries.push(q.clone());
                if rng.gen_bool(0.4) {
                    eval.line(json!({ "query": q, "relevant_ad_ids": gt }));
                }
            }
        }
    }

    let mut head = Writer::create(out.join("head_queries.jsonl"));
    queries.shuffle(&mut rng);
    for (rank, q) in queries.iter().enumerate() {
        let freq = (1000.0 / (rank as f64 + 1.0)).round() as u64;
        head.line(json!({ "query": q, "freq": freq }));
    }
}
