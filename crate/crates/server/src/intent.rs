//! Keyword intent parser standing in for the speech pipeline.

use statebridge_core::protocol::{ObjectKind, TaskIntent};

const VOCABULARY: [(&str, ObjectKind); 10] = [
    ("water", ObjectKind::Water),
    ("drink", ObjectKind::Water),
    ("bottle", ObjectKind::Water),
    ("chips", ObjectKind::Chips),
    ("snack", ObjectKind::Chips),
    ("snacks", ObjectKind::Chips),
    ("fruit", ObjectKind::Fruit),
    ("apple", ObjectKind::Fruit),
    ("banana", ObjectKind::Fruit),
    ("orange", ObjectKind::Fruit),
];

/// Words that map to `object`, for callers that compose utterances.
pub fn synonyms(object: ObjectKind) -> impl Iterator<Item = &'static str> {
    VOCABULARY.iter().filter(move |(_, o)| *o == object).map(|(w, _)| *w)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no known object in utterance `{0}`")]
pub struct NoIntent(pub String);

/// Case-insensitive whole-word match; the first vocabulary word in
/// utterance order decides the object.
pub fn parse_intent(utterance: &str) -> Result<TaskIntent, NoIntent> {
    utterance
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .find_map(|word| {
            let word = word.to_lowercase();
            VOCABULARY.iter().find(|(w, _)| *w == word).map(|(_, object)| *object)
        })
        .map(|object| TaskIntent::new(object, utterance))
        .ok_or_else(|| NoIntent(utterance.to_string()))
}
