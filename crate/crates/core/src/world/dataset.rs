use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WorldSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Mcq,
    Ctrl,
    Crc,
    Likert,
    /// Two-way token classification over filler text (the non-cultural control task).
    Filler,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Mcq => "mcq",
            Kind::Ctrl => "ctrl",
            Kind::Crc => "crc",
            Kind::Likert => "likert",
            Kind::Filler => "filler",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Neur,
    Test,
}

/// One prompt with its ordered answer choices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub kind: Kind,
    pub culture: Option<String>,
    pub category: Option<String>,
    pub prompt: Vec<usize>,
    pub choices: Vec<usize>,
    /// Index into `choices`.
    pub answer: usize,
    pub split: Split,
    /// For ctrl instances, the id of the mcq they were stripped from.
    pub source: Option<String>,
}

impl Instance {
    pub fn answer_token(&self) -> usize {
        self.choices[self.answer]
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |why: String| Error::Config(format!("instance {}: {why}", self.id));
        if matches!(self.kind, Kind::Mcq | Kind::Ctrl | Kind::Crc) && self.choices.len() != 4 {
            return Err(bad(format!("{} choices, expected 4", self.choices.len())));
        }
        if self.answer >= self.choices.len() {
            return Err(bad(format!("answer index {} out of range", self.answer)));
        }
        if let Some(&t) = self.prompt.iter().chain(&self.choices).find(|&&t| t >= vocab_size) {
            return Err(Error::Vocabulary {
                token: t,
                vocab: vocab_size,
            });
        }
        if self.prompt.is_empty() {
            return Err(bad("empty prompt".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub name: String,
    pub world_seed: u64,
    pub generator: String,
    pub params: String,
}

/// An ordered dataset plus the header describing how it was produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub instances: Vec<Instance>,
}

impl DatasetFile {
    pub fn new(header: DatasetHeader, instances: Vec<Instance>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for inst in &instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::Config(format!("duplicate instance id '{}'", inst.id)));
            }
        }
        Ok(Self { header, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Checks every token against the world vocabulary.
    pub fn validate(&self, world: &WorldSpec) -> Result<()> {
        self.instances
            .iter()
            .try_for_each(|i| i.validate(world.vocab.len()))
    }

    /// Sub-dataset restricted to one culture.
    pub fn for_culture(&self, culture: &str) -> DatasetFile {
        DatasetFile {
            header: DatasetHeader {
                name: format!("{}@{culture}", self.header.name),
                ..self.header.clone()
            },
            instances: self
                .instances
                .iter()
                .filter(|i| i.culture.as_deref() == Some(culture))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: DatasetHeader,
}

/// One JSON object per line: the header first, then one instance per line.
pub fn write_jsonl(dataset: &DatasetFile, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header = serde_json::to_string(&HeaderLine {
        header: dataset.header.clone(),
    })
    .expect("header serializes");
    writeln!(w, "{header}").map_err(io)?;
    for inst in &dataset.instances {
        let line = serde_json::to_string(inst).expect("instance serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<DatasetFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header line".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let mut instances = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        instances.push(inst);
    }
    DatasetFile::new(header.header, instances)
}

/// Partitions by category: the world's leading `neur_categories` go to the
/// identification side, the rest to the held-out side.
pub fn split_by_category(
    world: &WorldSpec,
    instances: &[Instance],
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    let mut neur = Vec::new();
    let mut test = Vec::new();
    for inst in instances {
        let cat = inst
            .category
            .as_deref()
            .ok_or_else(|| Error::Label(format!("instance {} has no category", inst.id)))?;
        let k = world.category_index(cat)?;
        if world.is_neur_category(k) {
            neur.push(inst.clone());
        } else {
            test.push(inst.clone());
        }
    }
    Ok((neur, test))
}
