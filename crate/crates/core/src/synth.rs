//! Seeded synthetic corpus: topical word streams with class-indicative
//! tokens injected into a random subset of segments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Label, Split};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train_docs: usize,
    pub validation_docs: usize,
    pub test_docs: usize,
    pub words_per_doc: usize,
    /// Probability that a segment carries class tokens.
    pub signal: f64,
    /// Share of words replaced by class tokens inside a signal segment.
    pub signal_density: f64,
    pub segment_len: usize,
    /// Background vocabulary shared by both classes and all topics.
    pub vocab_size: usize,
    pub topic_groups: usize,
    pub topic_words: usize,
    /// Share of words drawn from the document's topic group.
    pub topic_rate: f64,
    pub class_words: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_docs: 400,
            validation_docs: 100,
            test_docs: 100,
            words_per_doc: 1500,
            signal: 0.7,
            signal_density: 0.08,
            segment_len: 100,
            vocab_size: 2000,
            topic_groups: 2,
            topic_words: 40,
            topic_rate: 0.3,
            class_words: 8,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal > 0.0 && self.signal < 1.0) {
            return Err(invalid(format!("signal rate must lie in (0, 1), got {}", self.signal)));
        }
        if !(0.0..=1.0).contains(&self.signal_density) || !(0.0..=1.0).contains(&self.topic_rate) {
            return Err(invalid("signal_density and topic_rate must lie in [0, 1]"));
        }
        if self.train_docs < 2 || self.validation_docs < 2 || self.test_docs < 2 {
            return Err(invalid("every split needs at least 2 documents so both classes appear"));
        }
        if self.words_per_doc == 0 || self.segment_len == 0 || self.vocab_size == 0 {
            return Err(invalid("words_per_doc, segment_len and vocab_size must be positive"));
        }
        if self.topic_groups == 0 || self.topic_words == 0 || self.class_words == 0 {
            return Err(invalid("topic_groups, topic_words and class_words must be positive"));
        }
        Ok(())
    }
}

fn class_token(label: Label, i: usize) -> String {
    match label {
        Label::Accepted => format!("allow{i}"),
        Label::Rejected => format!("dismiss{i}"),
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut docs = Vec::new();
    let splits = [
        (Split::Train, spec.train_docs),
        (Split::Validation, spec.validation_docs),
        (Split::Test, spec.test_docs),
    ];
    for (split, count) in splits {
        // balanced labels, shuffled
        let mut labels: Vec<Label> = (0..count)
            .map(|i| if i % 2 == 0 { Label::Accepted } else { Label::Rejected })
            .collect();
        labels.shuffle(&mut rng);
        for label in labels {
            let topic = rng.random_range(0..spec.topic_groups);
            let mut words = Vec::with_capacity(spec.words_per_doc);
            let mut signal_segment = false;
            for w in 0..spec.words_per_doc {
                if w % spec.segment_len == 0 {
                    signal_segment = rng.random::<f64>() < spec.signal;
                }
                let word = if signal_segment && rng.random::<f64>() < spec.signal_density {
                    class_token(label, rng.random_range(0..spec.class_words))
                } else if rng.random::<f64>() < spec.topic_rate {
                    format!("topic{topic}x{}", rng.random_range(0..spec.topic_words))
                } else {
                    format!("w{}", rng.random_range(0..spec.vocab_size))
                };
                words.push(word);
            }
            docs.push(Document {
                id: format!("doc{:05}", docs.len()),
                text: words.join(" "),
                label,
                split,
            });
        }
    }
    Ok(docs)
}
