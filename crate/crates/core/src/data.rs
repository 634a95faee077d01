//! Labeled examples and the JSON-lines dataset format.
//!
//! One object per line:
//! `{"id": "a0", "x": [0.1, -2.0], "y": 1, "split": "adaptation"}`.
//! Files with duplicate ids (within or across splits) or ragged feature
//! dimensions are rejected.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Adaptation,
    Backbone,
    Validation,
    /// Held-out evaluation rows; never read by selection or training.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub x: Vec<f64>,
    /// Class index for classification heads, real target for the linear head.
    pub y: f64,
    pub split: Split,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, x: Vec<f64>, y: f64, split: Split) -> Self {
        LabeledExample {
            id: id.into(),
            x,
            y,
            split,
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        LabeledExample { split, ..self.clone() }
    }
}

/// A validated collection: unique ids, equal finite feature dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>) -> Result<Self> {
        validate(&examples)?;
        Ok(Dataset { examples })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<LabeledExample> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.x.len())
    }

    pub fn split(&self, split: Split) -> Vec<LabeledExample> {
        self.examples.iter().filter(|e| e.split == split).cloned().collect()
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut examples = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| Error::input(format!("line {}: {e}", lineno + 1)))?;
            examples.push(ex);
        }
        Self::new(examples)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn validate(examples: &[LabeledExample]) -> Result<()> {
    let mut seen = HashSet::with_capacity(examples.len());
    let dim = examples.first().map(|e| e.x.len());
    for ex in examples {
        if !seen.insert(ex.id.as_str()) {
            return Err(Error::input(format!("duplicate id `{}`", ex.id)));
        }
        if Some(ex.x.len()) != dim {
            return Err(Error::input(format!(
                "example `{}` has dimension {}, expected {}",
                ex.id,
                ex.x.len(),
                dim.unwrap_or(0)
            )));
        }
        if ex.x.iter().any(|v| !v.is_finite()) || !ex.y.is_finite() {
            return Err(Error::input(format!("example `{}` is not finite", ex.id)));
        }
    }
    Ok(())
}

/// Rejects any id shared between the two sets.
pub fn check_disjoint(a: &[LabeledExample], b: &[LabeledExample]) -> Result<()> {
    let ids: HashSet<&str> = a.iter().map(|e| e.id.as_str()).collect();
    match b.iter().find(|e| ids.contains(e.id.as_str())) {
        Some(e) => Err(Error::input(format!("duplicate id `{}`", e.id))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_jsonl() {
        let src = r#"{"id":"a","x":[1.0,2.0],"y":1,"split":"adaptation"}
{"id":"b","x":[0.5,-1.0],"y":0.25,"split":"backbone"}

{"id":"c","x":[0.0,0.0],"y":0,"split":"validation"}
"#;
        let ds = Dataset::from_reader(src.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), Some(2));
        assert_eq!(ds.split(Split::Backbone)[0].y, 0.25);
        let mut out = Vec::new();
        ds.write_jsonl(&mut out).unwrap();
        let back = Dataset::from_reader(out.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_duplicates_across_splits() {
        let src = r#"{"id":"a","x":[1.0],"y":1,"split":"adaptation"}
{"id":"a","x":[1.0],"y":1,"split":"backbone"}"#;
        let err = Dataset::from_reader(src.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("`a`"));
    }

    #[test]
    fn rejects_ragged() {
        let src = r#"{"id":"a","x":[1.0],"y":1,"split":"adaptation"}
{"id":"b","x":[1.0,2.0],"y":1,"split":"backbone"}"#;
        assert!(matches!(Dataset::from_reader(src.as_bytes()), Err(Error::Input(_))));
    }

    #[test]
    fn rejects_bad_split() {
        let src = r#"{"id":"a","x":[1.0],"y":1,"split":"training"}"#;
        assert!(Dataset::from_reader(src.as_bytes()).is_err());
    }
}
