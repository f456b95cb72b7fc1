//! Planted-evidence datasets: every instance gets its own background files
//! with exactly one sentence that states the answer, tagged with a marker
//! string unique to the instance.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::{EvalInstance, DIFFICULTIES};
use crate::generation::McqOption;

/// Answer vocabulary. No entry is a substring of another and none shares a
/// word with the filler text.
pub const OBJECT_KINDS: [&str; 8] = [
    "white dwarf",
    "red giant",
    "neutron star",
    "black hole",
    "brown dwarf",
    "quasar",
    "magnetar",
    "globular cluster",
];

const ADJECTIVES: [&str; 12] = [
    "faint", "distant", "bright", "cold", "dense", "dusty", "young", "ancient", "compact", "diffuse", "massive", "hot",
];
const NOUNS: [&str; 14] = [
    "nebula", "filament", "halo", "disk", "jet", "shell", "wind", "plasma", "cloud", "spectrum", "survey", "telescope",
    "detector", "bulge",
];
const VERBS: [&str; 10] = [
    "surrounds", "heats", "obscures", "feeds", "crosses", "outshines", "shapes", "traces", "drives", "absorbs",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub instances: usize,
    pub seed: u64,
    /// Background files per instance.
    pub docs_per_instance: usize,
    /// Paragraphs per background file.
    pub paragraphs: usize,
    /// Sentences per paragraph.
    pub sentences: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            instances: 10,
            seed: 7,
            docs_per_instance: 4,
            paragraphs: 12,
            sentences: 8,
        }
    }
}

/// Where the answer was planted for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedFact {
    pub instance_id: String,
    pub marker: String,
    pub sentence: String,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSet {
    pub dataset_path: PathBuf,
    pub instances: Vec<EvalInstance>,
    pub planted: Vec<PlantedFact>,
}

pub fn marker(seed: u64, i: usize) -> String {
    format!("ZX{seed:x}Q{i:04}")
}

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty word list");
    let (a, n1, v, b, n2) = (
        pick(rng, &ADJECTIVES),
        pick(rng, &NOUNS),
        pick(rng, &VERBS),
        pick(rng, &ADJECTIVES),
        pick(rng, &NOUNS),
    );
    // No function words, so filler shares no tokens with the questions.
    let mut s = format!("{a} {n1} {v} {b} {n2}.");
    s[..1].make_ascii_uppercase();
    s
}

/// Writes `dataset.jsonl` plus per-instance background files under `dir`.
/// Background paths in the dataset are relative to `dir`.
pub fn write_planted_set(dir: &Path, spec: &SyntheticSpec) -> io::Result<SyntheticSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let docs_dir = dir.join("docs");
    fs::create_dir_all(&docs_dir)?;
    let mut instances = Vec::with_capacity(spec.instances);
    let mut planted = Vec::with_capacity(spec.instances);
    let mut lines = String::new();
    for i in 0..spec.instances {
        let id = format!("syn-{i:04}");
        let m = marker(spec.seed, i);
        let mut kinds = OBJECT_KINDS.to_vec();
        kinds.shuffle(&mut rng);
        let labels = ['A', 'B', 'C', 'D'];
        let options: Vec<McqOption> = labels.iter().zip(&kinds).map(|(&l, &k)| McqOption::new(l, k)).collect();
        let gold = rng.random_range(0..labels.len());
        let sentence = format!("The catalogue entry {m} is a {}.", kinds[gold]);

        let docs = spec.docs_per_instance.max(1);
        let target_doc = rng.random_range(0..docs);
        let paragraphs = spec.paragraphs.max(1);
        let target_par = rng.random_range(0..paragraphs);
        let mut rel_paths = Vec::with_capacity(docs);
        for d in 0..docs {
            let mut pars = Vec::with_capacity(paragraphs);
            for p in 0..paragraphs {
                let mut sents: Vec<String> = (0..spec.sentences).map(|_| filler_sentence(&mut rng)).collect();
                if d == target_doc && p == target_par {
                    let at = rng.random_range(0..=sents.len());
                    sents.insert(at, sentence.clone());
                }
                pars.push(sents.join(" "));
            }
            let rel = PathBuf::from("docs").join(format!("{id}-{d}.txt"));
            fs::write(dir.join(&rel), pars.join("\n\n") + "\n")?;
            if d == target_doc {
                planted.push(PlantedFact {
                    instance_id: id.clone(),
                    marker: m.clone(),
                    sentence: sentence.clone(),
                    file: dir.join(&rel),
                });
            }
            rel_paths.push(rel);
        }
        let inst = EvalInstance {
            id,
            question: format!("What kind of object is the catalogue entry {m}?"),
            options: Some(options),
            gold: labels[gold].to_string(),
            difficulty: Some(DIFFICULTIES[i % DIFFICULTIES.len()].to_string()),
            background_docs: rel_paths,
        };
        lines.push_str(&serde_json::to_string(&inst).map_err(io::Error::other)?);
        lines.push('\n');
        instances.push(inst);
    }
    let dataset_path = dir.join("dataset.jsonl");
    fs::write(&dataset_path, lines)?;
    for inst in &mut instances {
        for p in &mut inst.background_docs {
            *p = dir.join(&*p);
        }
    }
    Ok(SyntheticSet {
        dataset_path,
        instances,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::load_dataset;

    #[test]
    fn writes_loadable_dataset_with_one_plant_each() {
        let dir = tempfile::tempdir().unwrap();
        let set = write_planted_set(dir.path(), &SyntheticSpec::default()).unwrap();
        let (loaded, issues) = load_dataset(&set.dataset_path, true).unwrap();
        assert!(issues.is_empty());
        assert_eq!(loaded, set.instances);
        for (inst, fact) in set.instances.iter().zip(&set.planted) {
            let hits: usize = inst
                .background_docs
                .iter()
                .map(|p| fs::read_to_string(p).unwrap().matches(&fact.marker).count())
                .sum();
            assert_eq!(hits, 1);
            let label = inst.gold_label().unwrap();
            let text = &inst.options.as_ref().unwrap().iter().find(|o| o.label == label).unwrap().text;
            assert!(fact.sentence.contains(text.as_str()));
        }
    }

    #[test]
    fn filler_never_mentions_an_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = filler_sentence(&mut rng).to_lowercase();
            assert!(OBJECT_KINDS.iter().all(|k| !s.contains(k)), "{s}");
        }
    }
}
