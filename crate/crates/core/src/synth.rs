//! Synthetic encyclopedia-style corpus with one natural query per record.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, PassageRecord, QueryRecord};
use crate::error::{Error, Result};
use crate::util::derived_rng;

const ONSETS: &[&str] = &[
    "b", "br", "c", "d", "dr", "f", "g", "gr", "h", "k", "l", "m", "n", "p", "qu", "r", "s", "sh", "t", "th", "v", "w", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "io", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s", "th", "m", "nd"];

const KINDS: &[&str] = &[
    "river", "village", "festival", "mountain", "library", "trading company", "harbor", "garden", "bridge",
    "monastery", "observatory", "market town", "railway", "lake", "castle", "museum", "island", "forest",
];

const QUALITIES: &[&str] = &[
    "copper", "woolen", "glass", "salt", "winter", "stone", "olive", "brass", "river", "paper", "amber", "marble",
    "silk", "apple", "cedar", "iron", "velvet", "coral", "granite", "linen", "honey", "pewter", "saffron", "willow",
    "ember", "frost", "harbor", "ivory", "juniper", "lantern",
];

const CRAFTS: &[&str] = &[
    "bells", "weaving", "markets", "towers", "groves", "clocks", "ferries", "lanterns", "races", "orchards",
    "presses", "springs", "quarries", "mills", "kilns", "gardens", "choirs", "boats", "looms", "fountains",
    "mosaics", "tapestries", "forges", "vineyards", "carvings", "bridges", "festivals", "manuscripts",
];

fn feature(rng: &mut ChaCha8Rng) -> String {
    format!("{} {}", QUALITIES.choose(rng).expect("nonempty"), CRAFTS.choose(rng).expect("nonempty"))
}

fn name(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS.choose(rng).expect("nonempty"));
        s.push_str(VOWELS.choose(rng).expect("nonempty"));
    }
    s.push_str(CODAS.choose(rng).expect("nonempty"));
    let mut c = s.chars();
    let first = c.next().expect("nonempty").to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

pub fn slug(title: &str) -> String {
    title.to_lowercase().split_whitespace().collect::<Vec<_>>().join("-")
}

/// `n` records with distinct titles and URLs, and one query per record
/// whose only positive is that record.
pub fn synth_corpus(n: usize, seed: u64) -> Result<(Corpus, Vec<QueryRecord>)> {
    if n == 0 {
        return Err(Error::Invalid("synth needs at least one record".into()));
    }
    let mut rng = derived_rng(seed, "synth");
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n);
    for i in 0..n {
        let mut title = name(&mut rng);
        while !seen.insert(title.clone()) {
            title = format!("{} {}", name(&mut rng), name(&mut rng));
        }
        let kind = *KINDS.choose(&mut rng).expect("nonempty");
        let region = name(&mut rng);
        let (a, b) = (feature(&mut rng), feature(&mut rng));
        let year = rng.gen_range(1150..1990);
        let founder = name(&mut rng);
        let neighbour = name(&mut rng);
        let passage = match rng.gen_range(0..4) {
            0 => format!(
                "{title} is a {kind} in the {region} region. {founder} founded it in {year}, and {title} became known for {a} and {b}."
            ),
            1 => format!(
                "The {kind} of {title} lies near {region}. Since {year} it has been famous for {a}, while {founder} made its {b} popular."
            ),
            2 => format!(
                "{title} is a small {kind} close to {region}. Records kept by {founder} from {year} describe its {a} and its {b}."
            ),
            _ => format!(
                "Built beside {neighbour} in {year}, {title} is a {kind} where {founder} once studied {a} and {b}."
            ),
        };
        let query = match rng.gen_range(0..3) {
            0 => format!("which {kind} near {region} is known for {a}"),
            1 => format!("what is {title} famous for"),
            _ => format!("who founded the {kind} of {title}"),
        };
        let id = format!("p{i:05}");
        let url = format!("https://example.org/doc/{}", slug(&title));
        records.push(PassageRecord {
            id: id.clone(),
            title,
            passage,
            urls: vec![url.clone()],
            assigned_url: url,
        });
        queries.push(QueryRecord { query_id: format!("q{i:05}"), text: query, positive_passage_ids: vec![id] });
    }
    Ok((Corpus::from_records(records)?, queries))
}
