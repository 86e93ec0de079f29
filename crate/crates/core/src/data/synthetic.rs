use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::squad::{Corpus, SquadAnswer, SquadArticle, SquadFile, SquadParagraph, SquadQa};
use crate::error::{Error, Result};
use crate::model::Domain;

/// Knobs of the fact-lookup toy corpus. Each document lists facts of the
/// form "the ATTR of ENTITY is VALUE." over a few entities and attributes;
/// each question names one attribute and one entity and is answered by a
/// single value word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub documents: usize,
    /// Entities per document; every one gets every attribute.
    pub entities_per_document: usize,
    pub attributes_per_document: usize,
    pub questions_per_document: usize,
    /// Sizes of the pools words are drawn from.
    pub entity_pool: usize,
    pub attribute_pool: usize,
    pub value_pool: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            documents: 500,
            entities_per_document: 2,
            attributes_per_document: 2,
            questions_per_document: 4,
            entity_pool: 40,
            attribute_pool: 12,
            value_pool: 60,
            seed: 0,
        }
    }
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// `n` distinct pseudo-words of `syllables` consonant-vowel pairs.
fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, syllables: usize, taken: &mut std::collections::BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).expect("non-empty"), VOWELS.choose(rng).expect("non-empty")))
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let facts = self.entities_per_document * self.attributes_per_document;
        if self.entities_per_document == 0 || self.attributes_per_document == 0 {
            return Err(Error::Config("documents need at least one entity and one attribute".into()));
        }
        if self.questions_per_document == 0 || self.questions_per_document > facts {
            return Err(Error::Config(format!("questions_per_document must lie in 1..={facts}")));
        }
        if self.entity_pool < self.entities_per_document
            || self.attribute_pool < self.attributes_per_document
            || self.value_pool < facts
        {
            return Err(Error::Config("word pools are smaller than one document needs".into()));
        }
        Ok(())
    }

    pub fn generate_squad(&self) -> Result<SquadFile> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut taken = std::collections::BTreeSet::new();
        let entities = pseudo_words(&mut rng, self.entity_pool, 2, &mut taken);
        let attributes = pseudo_words(&mut rng, self.attribute_pool, 3, &mut taken);
        let values = pseudo_words(&mut rng, self.value_pool, 2, &mut taken);

        let mut paragraphs = Vec::with_capacity(self.documents);
        for d in 0..self.documents {
            let ents: Vec<&String> = entities.choose_multiple(&mut rng, self.entities_per_document).collect();
            let attrs: Vec<&String> = attributes.choose_multiple(&mut rng, self.attributes_per_document).collect();
            let facts = ents.len() * attrs.len();
            let vals: Vec<&String> = values.choose_multiple(&mut rng, facts).collect();
            let mut order: Vec<(usize, usize)> =
                (0..ents.len()).flat_map(|e| (0..attrs.len()).map(move |a| (e, a))).collect();
            order.shuffle(&mut rng);

            let mut context = String::new();
            let mut starts = Vec::with_capacity(facts);
            for (k, &(e, a)) in order.iter().enumerate() {
                if k > 0 {
                    context.push(' ');
                }
                let possessive = rng.gen_bool(0.5);
                let prefix = if possessive {
                    format!("{} 's {} is ", ents[e], attrs[a])
                } else {
                    format!("the {} of {} is ", attrs[a], ents[e])
                };
                context.push_str(&prefix);
                starts.push(context.chars().count());
                context.push_str(vals[k]);
                context.push('.');
            }
            let asked: Vec<usize> = (0..facts).collect::<Vec<_>>().choose_multiple(&mut rng, self.questions_per_document).copied().collect();
            let qas = asked
                .into_iter()
                .enumerate()
                .map(|(j, k)| {
                    let (e, a) = order[k];
                    SquadQa {
                        id: format!("syn-{}-{d}-{j}", self.seed),
                        question: format!("what is the {} of {} ?", attrs[a], ents[e]),
                        answers: vec![SquadAnswer { text: vals[k].clone(), answer_start: starts[k] }],
                    }
                })
                .collect();
            paragraphs.push(SquadParagraph { context, qas });
        }
        Ok(SquadFile {
            version: Some("1.1".into()),
            data: vec![SquadArticle { title: format!("synthetic-{}", self.seed), paragraphs }],
        })
    }

    pub fn generate(&self) -> Result<Corpus> {
        Ok(Corpus::from_squad(&self.generate_squad()?, Domain::Source))
    }
}
