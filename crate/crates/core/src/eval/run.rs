use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::{RetrievalCorpus, SyntheticOracle};
use crate::error::{Error, Result};
use crate::trainstrat::EntailmentGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    /// Queries are images, items are captions.
    #[default]
    TextRetrieval,
    /// Queries are captions, items are images.
    ImageRetrieval,
}

/// Ranked item lists per query, best first. Producers break score ties by
/// ascending item id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedRun {
    pub direction: Direction,
    pub rankings: BTreeMap<String, Vec<String>>,
}

/// A predicate over (image, caption) pairs.
pub trait Relation {
    fn holds(&self, image: &str, caption: &str) -> bool;
}

/// Gold edges of a corpus.
pub struct GoldRelation<'a>(pub &'a RetrievalCorpus);

impl Relation for GoldRelation<'_> {
    fn holds(&self, image: &str, caption: &str) -> bool {
        self.0.is_gold(image, caption)
    }
}

impl Relation for SyntheticOracle {
    fn holds(&self, image: &str, caption: &str) -> bool {
        self.entailed(image, caption)
    }
}

impl Relation for EntailmentGraph {
    fn holds(&self, image: &str, caption: &str) -> bool {
        self.contains(image, caption)
    }
}

/// An explicit edge list, e.g. human labels or classifier verdicts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeSet(pub HashSet<(String, String)>);

impl Relation for EdgeSet {
    fn holds(&self, image: &str, caption: &str) -> bool {
        self.0.contains(&(image.to_string(), caption.to_string()))
    }
}

#[derive(Deserialize)]
struct EdgeLine {
    image: String,
    caption: String,
    #[serde(default = "one")]
    p_entail: f64,
}

fn one() -> f64 {
    1.0
}

impl EdgeSet {
    /// Reads weak-edge records (`{"image", "caption", "p_entail"}`, other
    /// fields ignored), keeping edges with `p_entail >= min_p`. Records
    /// without `p_entail` count as certain.
    pub fn load(path: impl AsRef<Path>, min_p: f64) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut set = HashSet::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EdgeLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            if rec.p_entail >= min_p {
                set.insert((rec.image, rec.caption));
            }
        }
        Ok(Self(set))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RunLine {
    Text {
        query_image_id: String,
        ranked_caption_ids: Vec<String>,
    },
    Image {
        query_caption_id: String,
        ranked_image_ids: Vec<String>,
    },
}

impl RankedRun {
    pub fn text_retrieval(rankings: BTreeMap<String, Vec<String>>) -> Self {
        Self {
            direction: Direction::TextRetrieval,
            rankings,
        }
    }

    /// Evaluates `rel` for a (query, item) pair in this run's direction.
    pub fn holds(&self, rel: &dyn Relation, query: &str, item: &str) -> bool {
        match self.direction {
            Direction::TextRetrieval => rel.holds(query, item),
            Direction::ImageRetrieval => rel.holds(item, query),
        }
    }

    /// No duplicate items per list and every id known to `corpus`.
    pub fn validate(&self, corpus: &RetrievalCorpus) -> Result<()> {
        let (queries, items): (&dyn Fn(&str) -> bool, &dyn Fn(&str) -> bool) = match self.direction {
            Direction::TextRetrieval => (&|q| corpus.images.contains_key(q), &|i| corpus.captions.contains_key(i)),
            Direction::ImageRetrieval => (&|q| corpus.captions.contains_key(q), &|i| corpus.images.contains_key(i)),
        };
        for (q, list) in &self.rankings {
            if !queries(q) {
                return Err(Error::Validation(format!("run query `{q}` is not in the corpus")));
            }
            let mut seen = BTreeSet::new();
            for item in list {
                if !items(item) {
                    return Err(Error::Validation(format!("run item `{item}` is not in the corpus")));
                }
                if !seen.insert(item) {
                    return Err(Error::Validation(format!("duplicate item `{item}` for query `{q}`")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut run = RankedRun::default();
        let mut direction = None;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let rec: RunLine = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
            let (d, q, list) = match rec {
                RunLine::Text {
                    query_image_id,
                    ranked_caption_ids,
                } => (Direction::TextRetrieval, query_image_id, ranked_caption_ids),
                RunLine::Image {
                    query_caption_id,
                    ranked_image_ids,
                } => (Direction::ImageRetrieval, query_caption_id, ranked_image_ids),
            };
            if *direction.get_or_insert(d) != d {
                return Err(perr("run mixes retrieval directions".into()));
            }
            if run.rankings.insert(q.clone(), list).is_some() {
                return Err(perr(format!("duplicate query `{q}`")));
            }
        }
        run.direction = direction.unwrap_or_default();
        Ok(run)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for (q, list) in &self.rankings {
            let rec = match self.direction {
                Direction::TextRetrieval => RunLine::Text {
                    query_image_id: q.clone(),
                    ranked_caption_ids: list.clone(),
                },
                Direction::ImageRetrieval => RunLine::Image {
                    query_caption_id: q.clone(),
                    ranked_image_ids: list.clone(),
                },
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| Error::io(path, e.into()))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
