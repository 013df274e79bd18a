//! Seeded toy catalog and grounded dialogues.
//!
//! Value inventories are pairwise disjoint across attributes and no response
//! template contains an inventory word, so a response mentions exactly the
//! values it was instantiated with.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{Catalog, CatalogObject, Turn};
use crate::seed::{rng_for, TAG_SYNTH};

const COLORS: &[&str] = &[
    "red", "blue", "green", "black", "white", "yellow", "pink", "grey", "orange", "purple",
    "brown", "beige",
];
const SIZES: &[&str] = &["xxs", "xs", "s", "m", "l", "xl", "xxl"];
const PRICES: &[&str] = &[
    "19", "25", "29", "35", "39", "45", "49", "59", "65", "79", "89", "99",
];
const BRANDS: &[&str] = &[
    "nordwear", "lumo", "kestrel", "velvetta", "oakline", "brio", "sable", "marlow",
];
const TYPES: &[&str] = &[
    "dress", "jacket", "shirt", "skirt", "sweater", "coat", "blouse", "jeans",
];

pub const ATTR_COLOR: &str = "color";
pub const ATTR_SIZES: &str = "available sizes";
pub const ATTR_PRICE: &str = "price";
pub const ATTR_BRAND: &str = "brand";
pub const ATTR_TYPE: &str = "type";

/// Request kinds: the queried attribute, user phrasings and the response
/// template (`{}` is replaced by the value list).
pub const REQUEST_KINDS: &[(&str, &[&str], &str)] = &[
    (
        ATTR_COLOR,
        &[
            "what colors does this come in?",
            "which colors are available?",
            "can i get this in another color?",
        ],
        "it comes in {}.",
    ),
    (
        ATTR_SIZES,
        &[
            "what sizes are available?",
            "which sizes do you have for this?",
        ],
        "we have it in sizes {}.",
    ),
    (
        ATTR_PRICE,
        &["how much is this?", "what is the price?"],
        "it costs {} dollars.",
    ),
    (
        ATTR_BRAND,
        &["who makes this?", "what brand is this?"],
        "this one is made by {}.",
    ),
    (
        ATTR_TYPE,
        &["what kind of item is this?", "what am i looking at?"],
        "this is a {}.",
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub catalog: Catalog,
    pub turns: Vec<Turn>,
}

/// `a`, `a and b`, `a, b and c`.
pub fn join_values(values: &[String]) -> String {
    match values {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Fills a response template for an object, or `None` when the object lacks
/// the attribute.
pub fn render_response(object: &CatalogObject, attribute: &str) -> Option<String> {
    let (_, _, template) = REQUEST_KINDS.iter().find(|(a, _, _)| *a == attribute)?;
    let values = object.attributes.get(attribute)?;
    Some(template.replace("{}", &join_values(values)))
}

fn pick_sorted<R: Rng>(rng: &mut R, pool: &[&str], lo: usize, hi: usize) -> Vec<String> {
    let n = rng.random_range(lo..=hi);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(n).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i].to_string()).collect()
}

fn random_object<R: Rng>(rng: &mut R, id: String) -> CatalogObject {
    let mut o = CatalogObject::new(id);
    o.attributes
        .insert(ATTR_SIZES.into(), pick_sorted(rng, SIZES, 1, 4));
    o.attributes.insert(
        ATTR_BRAND.into(),
        vec![BRANDS.choose(rng).unwrap().to_string()],
    );
    o.attributes
        .insert(ATTR_COLOR.into(), pick_sorted(rng, COLORS, 1, 3));
    o.attributes.insert(
        ATTR_PRICE.into(),
        vec![PRICES.choose(rng).unwrap().to_string()],
    );
    o.attributes.insert(
        ATTR_TYPE.into(),
        vec![TYPES.choose(rng).unwrap().to_string()],
    );
    o
}

/// Random objects plus dialogues of one to four turns, each turn asking
/// about one attribute of a uniformly chosen object.
pub fn generate_synthetic_corpus(num_objects: usize, num_turns: usize, seed: u64) -> SynthCorpus {
    let mut rng = rng_for(seed, TAG_SYNTH, 0);
    let mut catalog = Catalog::default();
    for i in 0..num_objects {
        let object = random_object(&mut rng, format!("obj-{i:04}"));
        catalog
            .insert(object, "synthetic")
            .expect("generated objects are valid");
    }
    let mut turns = Vec::with_capacity(num_turns);
    let mut dialogue = 0;
    while turns.len() < num_turns && num_objects > 0 {
        let length = rng.random_range(1..=4).min(num_turns - turns.len());
        for turn_index in 0..length {
            let object = &catalog.objects[rng.random_range(0..num_objects)];
            let (attribute, phrasings, _) = REQUEST_KINDS[rng.random_range(0..REQUEST_KINDS.len())];
            turns.push(Turn {
                dialogue_id: format!("dlg-{dialogue:04}"),
                turn_index,
                user_utterance: phrasings.choose(&mut rng).unwrap().to_string(),
                referred_object_id: object.object_id.clone(),
                true_response: render_response(object, attribute).expect("attribute present"),
            });
        }
        dialogue += 1;
    }
    SynthCorpus { catalog, turns }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = generate_synthetic_corpus(20, 64, 5);
        assert_eq!(a, generate_synthetic_corpus(20, 64, 5));
        assert_ne!(a, generate_synthetic_corpus(20, 64, 6));
        assert_eq!(a.catalog.len(), 20);
        assert_eq!(a.turns.len(), 64);
        assert!(generate_synthetic_corpus(5, 0, 1).turns.is_empty());
    }

    #[test]
    fn turns_refer_to_catalog_objects() {
        let c = generate_synthetic_corpus(6, 30, 2);
        for t in &c.turns {
            assert!(c.catalog.get(&t.referred_object_id).is_some());
        }
    }

    #[test]
    fn inventories_are_disjoint() {
        let all: Vec<&str> = [COLORS, SIZES, PRICES, BRANDS, TYPES].concat();
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn join_values_reads_naturally() {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(join_values(&v(&["red"])), "red");
        assert_eq!(join_values(&v(&["red", "blue"])), "red and blue");
        assert_eq!(join_values(&v(&["a", "b", "c"])), "a, b and c");
    }
}
