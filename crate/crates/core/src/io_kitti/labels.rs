//! SemanticKITTI panoptic labels and the semantic → super-class table.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static SemanticKITTI classes. Position in this table is the one-hot column
/// used by the semantic loss.
pub const SEMANTIC_CLASSES: &[(u16, &str)] = &[
    (0, "unlabeled"),
    (1, "outlier"),
    (10, "car"),
    (11, "bicycle"),
    (13, "bus"),
    (15, "motorcycle"),
    (16, "on-rails"),
    (18, "truck"),
    (20, "other-vehicle"),
    (30, "person"),
    (31, "bicyclist"),
    (32, "motorcyclist"),
    (40, "road"),
    (44, "parking"),
    (48, "sidewalk"),
    (49, "other-ground"),
    (50, "building"),
    (51, "fence"),
    (52, "other-structure"),
    (60, "lane-marking"),
    (70, "vegetation"),
    (71, "trunk"),
    (72, "terrain"),
    (80, "pole"),
    (81, "traffic-sign"),
    (99, "other-object"),
];

pub const SEMANTIC_CLASS_COUNT: usize = SEMANTIC_CLASSES.len();

const DEFAULT_TABLE: &str = include_str!("../../data/superclasses.txt");

/// Maps SemanticKITTI moving-object ids onto their static class.
pub fn merge_moving(semantic: u16) -> u16 {
    match semantic {
        252 => 10,
        253 => 31,
        254 => 30,
        255 => 32,
        256 => 16,
        257 => 13,
        258 => 18,
        259 => 20,
        other => other,
    }
}

/// One-hot column of a semantic id; unknown ids fall into `unlabeled`.
pub fn semantic_class_index(semantic: u16) -> usize {
    let merged = merge_moving(semantic);
    SEMANTIC_CLASSES.iter().position(|&(id, _)| id == merged).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuperClass {
    Flat,
    Human,
    Vehicle,
    Construction,
    Object,
    Nature,
    Void,
}

impl SuperClass {
    pub const ALL: [SuperClass; 7] = [
        SuperClass::Flat,
        SuperClass::Human,
        SuperClass::Vehicle,
        SuperClass::Construction,
        SuperClass::Object,
        SuperClass::Nature,
        SuperClass::Void,
    ];

    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SuperClass::Flat => "flat",
            SuperClass::Human => "human",
            SuperClass::Vehicle => "vehicle",
            SuperClass::Construction => "construction",
            SuperClass::Object => "object",
            SuperClass::Nature => "nature",
            SuperClass::Void => "void",
        }
    }
}

impl fmt::Display for SuperClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuperClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SuperClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown super-class `{s}`"))
    }
}

/// Editable `semantic_id = group` table. Lookups are total: ids that are
/// not listed are retried after moving-class merging and otherwise map to
/// [`SuperClass::Void`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperClassTable {
    map: BTreeMap<u16, SuperClass>,
}

impl Default for SuperClassTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled super-class table parses")
    }
}

impl SuperClassTable {
    /// Parses one `id = group` entry per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let malformed = |reason: String| Error::MalformedSuperClassTable { line: line_no, reason };
            let (id, group) = line
                .split_once('=')
                .ok_or_else(|| malformed("expected `semantic_id = group`".into()))?;
            let id: u16 = id
                .trim()
                .parse()
                .map_err(|e| malformed(format!("bad semantic id: {e}")))?;
            let group: SuperClass = group.trim().parse().map_err(malformed)?;
            if map.insert(id, group).is_some() {
                return Err(malformed(format!("duplicate semantic id {id}")));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.map.iter().map(|(id, g)| format!("{id} = {g}\n")).collect()
    }

    pub fn lookup(&self, semantic: u16) -> SuperClass {
        self.map
            .get(&semantic)
            .or_else(|| self.map.get(&merge_moving(semantic)))
            .copied()
            .unwrap_or(SuperClass::Void)
    }
}

/// Per-point panoptic annotation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PanopticLabels {
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
    pub super_class: Vec<SuperClass>,
}

impl PanopticLabels {
    pub fn from_parts(semantic: Vec<u16>, instance: Vec<u16>, table: &SuperClassTable) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::InvalidArgument(format!(
                "{} semantic ids but {} instance ids",
                semantic.len(),
                instance.len()
            )));
        }
        let super_class = semantic.iter().map(|&s| table.lookup(s)).collect();
        Ok(Self {
            semantic,
            instance,
            super_class,
        })
    }

    /// Splits each word into its lower 16 bits (semantic id) and upper
    /// 16 bits (instance id).
    pub fn from_words(words: &[u32], table: &SuperClassTable) -> Self {
        let semantic: Vec<u16> = words.iter().map(|&w| (w & 0xFFFF) as u16).collect();
        let instance = words.iter().map(|&w| (w >> 16) as u16).collect();
        let super_class = semantic.iter().map(|&s| table.lookup(s)).collect();
        Self {
            semantic,
            instance,
            super_class,
        }
    }

    pub fn to_words(&self) -> Vec<u32> {
        self.semantic
            .iter()
            .zip(&self.instance)
            .map(|(&s, &i)| (u32::from(i) << 16) | u32::from(s))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> PanopticLabels {
        PanopticLabels {
            semantic: indices.iter().map(|&i| self.semantic[i]).collect(),
            instance: indices.iter().map(|&i| self.instance[i]).collect(),
            super_class: indices.iter().map(|&i| self.super_class[i]).collect(),
        }
    }

    /// One-hot column per point for the semantic loss.
    pub fn class_indices(&self) -> Vec<usize> {
        self.semantic.iter().map(|&s| semantic_class_index(s)).collect()
    }

    pub fn super_class_indices(&self) -> Vec<usize> {
        self.super_class.iter().map(|c| c.index()).collect()
    }
}

pub fn decode_labels(bytes: &[u8], expected_count: Option<usize>, table: &SuperClassTable) -> Result<PanopticLabels> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::MalformedLabels(format!(
            "length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    let found = bytes.len() / 4;
    if let Some(expected) = expected_count {
        if expected != found {
            return Err(Error::LabelLengthMismatch { expected, found });
        }
    }
    let words: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(PanopticLabels::from_words(&words, table))
}

pub fn encode_labels(labels: &PanopticLabels) -> Vec<u8> {
    labels.to_words().iter().flat_map(|w| w.to_le_bytes()).collect()
}

/// Reads a `.label` file that must hold exactly `expected_count` entries.
pub fn read_labels(path: &Path, expected_count: usize) -> Result<PanopticLabels> {
    read_labels_with_table(path, expected_count, &SuperClassTable::default())
}

pub fn read_labels_with_table(path: &Path, expected_count: usize, table: &SuperClassTable) -> Result<PanopticLabels> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, Some(expected_count), table)
}

pub fn write_labels(path: &Path, labels: &PanopticLabels) -> Result<()> {
    std::fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}
