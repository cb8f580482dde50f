//! Dataset manifests: header-bearing CSV with `id,path,label,split,provenance`.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "mask")]
    Mask,
    #[serde(rename = "non-mask")]
    NonMask,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Mask, Label::NonMask];

    pub fn other(self) -> Self {
        match self {
            Self::Mask => Self::NonMask,
            Self::NonMask => Self::Mask,
        }
    }

    /// Class index used by classifiers: mask = 0, non-mask = 1.
    pub fn index(self) -> usize {
        match self {
            Self::Mask => 0,
            Self::NonMask => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Self::Mask
        } else {
            Self::NonMask
        }
    }

    /// SVM target: mask = +1, non-mask = -1.
    pub fn sign(self) -> f64 {
        match self {
            Self::Mask => 1.0,
            Self::NonMask => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mask => "mask",
            Self::NonMask => "non-mask",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Translated,
    Perturbed,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Translated => "translated",
            Self::Perturbed => "perturbed",
        }
    }
}

macro_rules! display_as_str {
    ($($t:ty),+) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    )+};
}
display_as_str!(Label, Split, Provenance);

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Self::Mask),
            "non-mask" => Ok(Self::NonMask),
            _ => Err(Error::Format(format!("unknown label {s:?}"))),
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let m = Self { records };
        m.check_ids()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate manifest id {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// `[mask, non-mask]` counts within a split.
    pub fn class_counts(&self, split: Split) -> [usize; 2] {
        let mut c = [0; 2];
        for r in self.split(split) {
            c[r.label.index()] += 1;
        }
        c
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        if self.records.iter().any(|o| o.id == r.id) {
            return Err(Error::Format(format!("duplicate manifest id {:?}", r.id)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = reader.headers()?.clone();
        let expected = ["id", "path", "label", "split", "provenance"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Format(format!("manifest header must be {}", expected.join(","))));
        }
        let records = reader.deserialize().collect::<std::result::Result<Vec<Record>, _>>()?;
        Self::new(records)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a manifest file; relative paths resolve against its directory,
    /// and every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut m = Self::read(file)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &mut m.records {
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
            if !r.path.exists() {
                return Err(Error::Format(format!("manifest entry {:?} points to missing {}", r.id, r.path.display())));
            }
        }
        Ok(m)
    }
}
