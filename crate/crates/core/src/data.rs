//! Dataset loading, the character vocabulary, fixed-length encoding and
//! seeded splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_to_string, write_file, Error, Result};
use crate::seed::{self, Stream};

pub const SEQUENCE_LENGTH: usize = 100;
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const TRAIN_FRACTION: f64 = 0.9;
pub const VALIDATION_SAMPLE_SIZE: usize = 150;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    World,
    Sports,
    Business,
    #[serde(rename = "Sci/Tech")]
    SciTech,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::World, Label::Sports, Label::Business, Label::SciTech];
    pub const COUNT: usize = 4;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Label> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::World => "World",
            Label::Sports => "Sports",
            Label::Business => "Business",
            Label::SciTech => "Sci/Tech",
        }
    }

    pub fn parse(name: &str) -> Option<Label> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|l| l.name().to_string()).collect()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A labelled text. Serializes as `{"text": ..., "label": ...}`, the same
/// shape the loader accepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSample {
    pub text: String,
    pub label: Label,
}

impl RawSample {
    pub fn new(text: impl Into<String>, label: Label) -> Self {
        Self {
            text: text.into(),
            label,
        }
    }

    pub fn label_id(&self) -> usize {
        self.label.id()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSample {
    pub ids: Vec<usize>,
    pub label: Label,
}

#[derive(Deserialize)]
struct JsonRecord {
    text: String,
    label: String,
}

pub fn load_dataset(path: &Path) -> Result<Vec<RawSample>> {
    parse_dataset(&read_to_string(path)?)
}

/// Parses a JSON array of `{text, label}` objects. Texts are lowercased and
/// records whose text is empty after trimming are dropped.
pub fn parse_dataset(json: &str) -> Result<Vec<RawSample>> {
    let records: Vec<JsonRecord> = serde_json::from_str(json).map_err(|e| Error::json(json, &e))?;
    let mut samples = Vec::with_capacity(records.len());
    for (index, rec) in records.into_iter().enumerate() {
        let label = Label::parse(&rec.label).ok_or_else(|| Error::UnknownLabel {
            index,
            label: rec.label.clone(),
        })?;
        if rec.text.trim().is_empty() {
            continue;
        }
        samples.push(RawSample::new(rec.text.to_lowercase(), label));
    }
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[RawSample]) -> Result<()> {
    let json = serde_json::to_string_pretty(samples).expect("samples serialize");
    write_file(path, json)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    char_to_id: BTreeMap<char, usize>,
    id_to_char: Vec<char>,
}

impl Vocab {
    pub fn build(samples: &[RawSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut chars: Vec<char> = samples.iter().flat_map(|s| s.text.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        Ok(Self::from_chars(chars))
    }

    fn from_chars(id_to_char: Vec<char>) -> Self {
        let char_to_id = id_to_char
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + 2))
            .collect();
        Self {
            char_to_id,
            id_to_char,
        }
    }

    /// Total number of ids including PAD and UNK.
    pub fn len(&self) -> usize {
        self.id_to_char.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_char.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        PAD_ID
    }

    pub fn unk_id(&self) -> usize {
        UNK_ID
    }

    pub fn id_of(&self, c: char) -> usize {
        self.char_to_id.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(2).and_then(|i| self.id_to_char.get(i).copied())
    }

    pub fn char_to_id(&self) -> &BTreeMap<char, usize> {
        &self.char_to_id
    }

    /// Encodes to exactly [`SEQUENCE_LENGTH`] ids: prefix truncation, right padding.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text
            .chars()
            .take(SEQUENCE_LENGTH)
            .map(|c| self.id_of(c))
            .collect();
        ids.resize(SEQUENCE_LENGTH, PAD_ID);
        ids
    }

    /// Inverse of [`encode`](Self::encode). PAD ids are dropped, UNK becomes U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| self.char_of(id).unwrap_or(char::REPLACEMENT_CHARACTER))
            .collect()
    }

    pub fn tokenize(&self, sample: &RawSample) -> TokenizedSample {
        TokenizedSample {
            ids: self.encode(&sample.text),
            label: sample.label,
        }
    }

    pub fn tokenize_all(&self, samples: &[RawSample]) -> Vec<TokenizedSample> {
        samples.iter().map(|s| self.tokenize(s)).collect()
    }

    /// Hex SHA-256 of the id assignment; ties checkpoints and databases to a vocabulary.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (&c, &id) in &self.char_to_id {
            let mut buf = [0u8; 4];
            hasher.update(c.encode_utf8(&mut buf).as_bytes());
            hasher.update((id as u64).to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_config(&self) -> VocabConfig {
        VocabConfig {
            char_to_id: self.char_to_id.clone(),
            pad_id: PAD_ID,
            unk_id: UNK_ID,
            sequence_length: SEQUENCE_LENGTH,
            label_names: Label::names(),
        }
    }

    pub fn from_config(config: &VocabConfig) -> Result<Self> {
        if config.pad_id != PAD_ID || config.unk_id != UNK_ID {
            return Err(Error::InvalidVocab(format!(
                "expected pad_id {PAD_ID} and unk_id {UNK_ID}, found {} and {}",
                config.pad_id, config.unk_id
            )));
        }
        if config.sequence_length != SEQUENCE_LENGTH {
            return Err(Error::InvalidVocab(format!(
                "sequence_length {} is not {SEQUENCE_LENGTH}",
                config.sequence_length
            )));
        }
        let n = config.char_to_id.len();
        let mut id_to_char = vec![None; n];
        for (&c, &id) in &config.char_to_id {
            let slot = id
                .checked_sub(2)
                .and_then(|i| id_to_char.get_mut(i))
                .ok_or_else(|| Error::InvalidVocab(format!("id {id} for {c:?} out of range")))?;
            if slot.replace(c).is_some() {
                return Err(Error::InvalidVocab(format!("id {id} assigned twice")));
            }
        }
        let id_to_char = id_to_char.into_iter().map(|c| c.expect("dense ids")).collect();
        Ok(Self::from_chars(id_to_char))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_config()).expect("config serializes");
        write_file(path, json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let config: VocabConfig = serde_json::from_str(&text).map_err(|e| Error::json(&text, &e))?;
        Self::from_config(&config)
    }
}

/// On-disk form of the vocabulary (`model_config.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub char_to_id: BTreeMap<char, usize>,
    pub pad_id: usize,
    pub unk_id: usize,
    pub sequence_length: usize,
    pub label_names: Vec<String>,
}

/// Seeded shuffle, then `⌊n·fraction⌋` training samples and the remainder.
pub fn split_dataset<T: Clone>(
    samples: &[T],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidFraction(train_fraction));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(seed, Stream::Split));
    let n_train = (samples.len() as f64 * train_fraction).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Uniform sample without replacement, returned in original order.
pub fn sample_subset<T: Clone>(population: &[T], size: usize, seed: u64) -> Result<Vec<T>> {
    if size > population.len() {
        return Err(Error::SampleTooLarge {
            requested: size,
            population: population.len(),
        });
    }
    let mut rng = seed::rng(seed, Stream::ValidationSample);
    let mut idx = rand::seq::index::sample(&mut rng, population.len(), size).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| population[i].clone()).collect())
}
