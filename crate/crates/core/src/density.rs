//! Density categories, acquisition modalities and the fixed class prompts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// BI-RADS breast density category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Density {
    A,
    B,
    C,
    D,
}

impl Density {
    pub const ALL: [Density; 4] = [Density::A, Density::B, Density::C, Density::D];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Density> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> &'static str {
        match self {
            Density::A => "A",
            Density::B => "B",
            Density::C => "C",
            Density::D => "D",
        }
    }
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for Density {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Density::A),
            "B" => Ok(Density::B),
            "C" => Ok(Density::C),
            "D" => Ok(Density::D),
            other => Err(Error::Data(format!("unknown density category {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "s2D")]
    S2d,
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "DBT")]
    Dbt,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::S2d, Modality::Dm, Modality::Dbt];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::S2d => "s2D",
            Modality::Dm => "DM",
            Modality::Dbt => "DBT",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown modality {s:?}")))
    }
}

/// Report text reduced to the description of its density category.
pub fn simplify_report(density: Density) -> &'static str {
    match density {
        Density::A => "fatty or almost entirely fatty breasts",
        Density::B => "scattered areas of fibroglandular density",
        Density::C => "heterogeneously dense breasts",
        Density::D => "extremely dense breasts",
    }
}

/// [`simplify_report`] for a category given by its letter.
pub fn simplify_report_str(category: &str) -> Result<&'static str> {
    category.parse().map(simplify_report)
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// One prompt per density class, in class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPromptSet {
    prompts: [String; Density::COUNT],
}

impl Default for ClassPromptSet {
    fn default() -> Self {
        Self {
            prompts: Density::ALL.map(|d| simplify_report(d).to_string()),
        }
    }
}

impl ClassPromptSet {
    pub fn new(prompts: [String; Density::COUNT]) -> Result<Self> {
        for (d, p) in Density::ALL.iter().zip(&prompts) {
            if tokenize(p).is_empty() {
                return Err(Error::Config(format!("prompt for class {d} has no tokens")));
            }
        }
        Ok(Self { prompts })
    }

    pub fn prompt(&self, density: Density) -> &str {
        &self.prompts[density.index()]
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn tokenized(&self) -> Vec<Vec<String>> {
        self.prompts.iter().map(|p| tokenize(p)).collect()
    }

    /// Sorted, deduplicated tokens of every prompt.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self.tokenized().into_iter().flatten().collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn len(&self) -> usize {
        Density::COUNT
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
