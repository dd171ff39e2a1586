//! Templated synthetic corpora with cross-sentence dependencies.
//!
//! Each document fixes a random entity profile (name, city, job, friend,
//! item, place); later sentences reference the profile in slots placed late
//! in the sentence, so those tokens are predictable only from earlier
//! sentences, never from weights (pairings are re-randomized per document)
//! or from the current sentence alone.

use rand::Rng as _;
use rand::SeedableRng as _;

use crate::autodiff::Rng;
use crate::seeds;

pub const NAMES: [&str; 40] = [
    "Clara", "Miguel", "Sofia", "Henry", "Amara", "Louis", "Petra", "Oscar", "Nadia", "Felix",
    "Iris", "Bruno", "Lena", "Pavel", "Rosa", "Viktor", "Maya", "Jonas", "Alba", "Tomas",
    "Greta", "Marco", "Selin", "Anders", "Yuki", "Dario", "Noor", "Stefan", "Paula", "Ivan",
    "Mira", "Elias", "Tessa", "Ruben", "Dalia", "Casper", "Nina", "Matteo", "Vera", "Hugo",
];

pub const CITIES: [&str; 16] = [
    "Corville", "Bramwick", "Ostaren", "Valdez", "Merport", "Kinloch", "Sandmere", "Travena",
    "Ludlow", "Farholt", "Quensbury", "Ashford", "Pelagia", "Norwood", "Ellsmere", "Dunlow",
];

pub const JOBS: [&str; 12] = [
    "baker", "carpenter", "teacher", "sailor", "painter", "farmer", "weaver", "clerk",
    "gardener", "printer", "mason", "fisher",
];

pub const ITEMS: [&str; 12] = [
    "lantern", "ledger", "basket", "compass", "kettle", "violin", "atlas", "spade", "banner",
    "telescope", "loom", "satchel",
];

pub const PLACES: [&str; 10] = [
    "harbor", "market", "library", "mill", "orchard", "square", "bridge", "workshop",
    "granary", "station",
];

const OPENERS: [&str; 8] = [
    "in the quiet hours of the morning",
    "after a long day of steady work",
    "during the busy harvest season last year",
    "once the market had finally closed for the evening",
    "by the time the old bells rang at noon",
    "while the rain kept falling on the rooftops",
    "before the first carts arrived from the valley",
    "when the lamps were lit along the narrow streets",
];

struct Profile<'a> {
    name: &'a str,
    friend: &'a str,
    city: &'a str,
    job: &'a str,
    item: &'a str,
    place: &'a str,
}

fn fill(template: &str, p: &Profile) -> String {
    template
        .replace("{name}", p.name)
        .replace("{friend}", p.friend)
        .replace("{city}", p.city)
        .replace("{job}", p.job)
        .replace("{item}", p.item)
        .replace("{place}", p.place)
}

/// Follow-up sentence cores; the profile slots sit late in the sentence so
/// the model must recall them from memory.
const CORES: [&str; 10] = [
    "everyone in the region knows that the home town of {name} is {city}",
    "people keep saying that the {item} on the shelf belongs to {name} the {job}",
    "{friend} walked a very long way just to visit {name} at the {place}",
    "the children waved as {name} carried the old {item} back to {city}",
    "neighbors agreed that no {job} worked harder in all of {city} than {name}",
    "a letter for {name} was left at the {place} by a courier from {city}",
    "it was {friend} who first met {name} beside the crowded {place} of {city}",
    "the guild records show the finest {job} of {city} has always been {name}",
    "each week {name} brings a heavy {item} from the {place} to {friend}",
    "travelers from {city} often ask the {job} at the {place} about {name}",
];

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_docs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_docs: 600,
            min_sentences: 8,
            max_sentences: 12,
            seed: 0,
        }
    }
}

/// Generate a heading-structured corpus. Deterministic per spec.
pub fn generate_corpus(spec: &SynthSpec) -> String {
    let mut rng = Rng::seed_from_u64(seeds::derive(spec.seed, seeds::SYNTH));
    let mut out = String::new();
    for doc in 0..spec.n_docs {
        let name_ix = rng.gen_range(0..NAMES.len());
        let mut friend_ix = rng.gen_range(0..NAMES.len() - 1);
        if friend_ix >= name_ix {
            friend_ix += 1;
        }
        let p = Profile {
            name: NAMES[name_ix],
            friend: NAMES[friend_ix],
            city: CITIES[rng.gen_range(0..CITIES.len())],
            job: JOBS[rng.gen_range(0..JOBS.len())],
            item: ITEMS[rng.gen_range(0..ITEMS.len())],
            place: PLACES[rng.gen_range(0..PLACES.len())],
        };
        out.push_str(&format!("= Chronicle {} =\n", doc + 1));
        out.push_str(&fill(
            "{name} lives in {city} and earns a living as a careful {job} .\n",
            &p,
        ));
        out.push_str(&fill(
            "almost every single morning {name} meets {friend} near the busy {place} to trade stories .\n",
            &p,
        ));
        let n_extra = rng.gen_range(spec.min_sentences..=spec.max_sentences).saturating_sub(2);
        for _ in 0..n_extra {
            let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
            let core = CORES[rng.gen_range(0..CORES.len())];
            out.push_str(&format!("{} , {} .\n", opener, fill(core, &p)));
        }
    }
    out
}

/// Rough lexical token count for sizing corpora (whitespace words).
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
