//! Image stories: groups of near-identical detected images, found by DBSCAN
//! over Hamming distance, and per-category moderation rates.
//!
//! With the default `min_cluster_size` of 1 every image is a core point, so
//! stories are the connected components of the graph linking images at
//! most `eps` bits apart. Chains join: a–b and b–c within `eps` put a and c
//! in one story however far apart they are.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary_index::{BinaryIndex, IndexError};
use crate::hashing::{hamming_words, HashKind, PerceptualHash};

#[derive(Debug, Error)]
pub enum StoriesError {
    #[error("image {id:?} has a {actual} hash; expected {expected}")]
    KindMismatch {
        id: String,
        expected: HashKind,
        actual: HashKind,
    },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("invalid cluster parameters: {0}")]
    InvalidParams(String),
    #[error("no moderation flag for image {0:?}")]
    MissingFlag(String),
    #[error("unknown policy category {0:?}")]
    UnknownCategory(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Platform policy a story violates. The first three are civic-process
/// categories and take precedence over manipulated media.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyCategory {
    Participation,
    Intimidation,
    Outcomes,
    SyntheticMedia,
}

impl PolicyCategory {
    pub const ALL: [PolicyCategory; 4] = [
        PolicyCategory::Participation,
        PolicyCategory::Intimidation,
        PolicyCategory::Outcomes,
        PolicyCategory::SyntheticMedia,
    ];

    pub fn title(self) -> &'static str {
        match self {
            PolicyCategory::Participation => "Participation in Civic Processes",
            PolicyCategory::Intimidation => "Intimidation from Civic Processes",
            PolicyCategory::Outcomes => "Outcomes of Civic Processes",
            PolicyCategory::SyntheticMedia => "Synthetic and Manipulated Media",
        }
    }

    /// Short tags for the rules each category covers.
    pub fn rule_tags(self) -> &'static [&'static str] {
        match self {
            PolicyCategory::Participation => &["voting-procedure", "voter-eligibility", "mail-in-voting"],
            PolicyCategory::Intimidation => &["vote-counting", "ballot-equipment", "polling-disruption", "poll-closing"],
            PolicyCategory::Outcomes => &[
                "election-rigging",
                "ballot-tampering",
                "vote-tallying",
                "premature-victory",
                "result-interference",
            ],
            PolicyCategory::SyntheticMedia => &["altered-media", "out-of-context-media"],
        }
    }

    /// The category a story gets when an annotator finds several apply: the
    /// first civic-process one, else manipulated media.
    pub fn resolve(applicable: &[PolicyCategory]) -> Option<PolicyCategory> {
        applicable.iter().copied().min()
    }
}

impl fmt::Display for PolicyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyCategory::Participation => "PARTICIPATION",
            PolicyCategory::Intimidation => "INTIMIDATION",
            PolicyCategory::Outcomes => "OUTCOMES",
            PolicyCategory::SyntheticMedia => "SYNTHETIC_MEDIA",
        })
    }
}

impl FromStr for PolicyCategory {
    type Err = StoriesError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyCategory::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| StoriesError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    /// Hamming radius of a neighbourhood.
    pub eps: u32,
    /// DBSCAN minPts, counting the point itself.
    pub min_cluster_size: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            eps: 90,
            min_cluster_size: 1,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self, kind: HashKind) -> Result<(), StoriesError> {
        if self.eps > kind.bit_width() {
            return Err(StoriesError::InvalidParams(format!(
                "eps {} exceeds the {}-bit width of {kind}",
                self.eps,
                kind.bit_width()
            )));
        }
        if self.min_cluster_size == 0 {
            return Err(StoriesError::InvalidParams("min_cluster_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageStory {
    pub story_id: String,
    /// Sorted member ids.
    pub members: Vec<String>,
    /// Member with the smallest summed distance to the others, lowest id on ties.
    pub representative: String,
    #[serde(default)]
    pub category: Option<PolicyCategory>,
    #[serde(default)]
    pub moderated_count: usize,
}

/// Groups `hashes` into stories. Every id lands in exactly one story;
/// points DBSCAN would call noise become singletons. A border point joins
/// the story of its nearest core neighbour, lowest id on ties. Story ids
/// follow the sorted representative ids.
pub fn cluster(hashes: &[(String, PerceptualHash)], params: &ClusterParams) -> Result<Vec<ImageStory>, StoriesError> {
    let Some((_, first)) = hashes.first() else {
        return Ok(Vec::new());
    };
    let kind = first.kind();
    params.validate(kind)?;
    let mut index = BinaryIndex::flat(kind);
    let mut position = HashMap::with_capacity(hashes.len());
    for (i, (id, h)) in hashes.iter().enumerate() {
        if h.kind() != kind {
            return Err(StoriesError::KindMismatch {
                id: id.clone(),
                expected: kind,
                actual: h.kind(),
            });
        }
        if position.insert(id.as_str(), i).is_some() {
            return Err(StoriesError::DuplicateId(id.clone()));
        }
        index.insert(id, h)?;
    }

    let neighbours = neighbourhoods(&index, hashes, params.eps, &position)?;
    let core: Vec<bool> = neighbours.iter().map(|n| n.len() >= params.min_cluster_size).collect();

    // Core points linked within eps form components.
    let mut uf = UnionFind::new(hashes.len());
    for (i, ns) in neighbours.iter().enumerate() {
        if core[i] {
            for &(j, _) in ns {
                if core[j] {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut root_of: Vec<usize> = (0..hashes.len()).map(|i| uf.find(i)).collect();
    for i in 0..hashes.len() {
        if core[i] {
            continue;
        }
        let nearest_core = neighbours[i]
            .iter()
            .filter(|&&(j, _)| core[j])
            .min_by(|a, b| a.1.cmp(&b.1).then_with(|| hashes[a.0].0.cmp(&hashes[b.0].0)));
        if let Some(&(j, _)) = nearest_core {
            root_of[i] = uf.find(j);
        }
    }

    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, root) in root_of.into_iter().enumerate() {
        groups.entry(root).or_default().push(i);
    }
    let mut stories: Vec<ImageStory> = groups
        .into_values()
        .map(|members| {
            let representative = medoid(hashes, &members);
            let mut ids: Vec<String> = members.iter().map(|&i| hashes[i].0.clone()).collect();
            ids.sort();
            ImageStory {
                story_id: String::new(),
                members: ids,
                representative,
                category: None,
                moderated_count: 0,
            }
        })
        .collect();
    stories.sort_by(|a, b| a.representative.cmp(&b.representative));
    let width = stories.len().to_string().len().max(4);
    for (n, s) in stories.iter_mut().enumerate() {
        s.story_id = format!("story-{:0width$}", n + 1);
    }
    Ok(stories)
}

/// Each point's neighbours within eps (itself included) with distances,
/// queried in parallel.
fn neighbourhoods(
    index: &BinaryIndex,
    hashes: &[(String, PerceptualHash)],
    eps: u32,
    position: &HashMap<&str, usize>,
) -> Result<Vec<Vec<(usize, u32)>>, StoriesError> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(hashes.len()).max(1);
    let chunk = hashes.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Vec<(usize, u32)>>, IndexError>> = std::thread::scope(|s| {
        let handles: Vec<_> = hashes
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(_, h)| {
                            Ok(index
                                .search_range(h, eps)?
                                .into_iter()
                                .map(|hit| (position[hit.image_id.as_str()], hit.distance))
                                .collect())
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("neighbourhood worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(hashes.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

fn medoid(hashes: &[(String, PerceptualHash)], members: &[usize]) -> String {
    members
        .iter()
        .map(|&i| {
            let cost: u64 = members
                .iter()
                .map(|&j| u64::from(hamming_words(hashes[i].1.active_words(), hashes[j].1.active_words())))
                .sum();
            (cost, &hashes[i].0)
        })
        .min()
        .map(|(_, id)| id.clone())
        .expect("stories are non-empty")
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Sets each story's `moderated_count` from per-image flags.
pub fn apply_flags(stories: &mut [ImageStory], flags: &HashMap<String, bool>) -> Result<(), StoriesError> {
    for s in stories.iter_mut() {
        s.moderated_count = moderated_members(s, flags)?;
    }
    Ok(())
}

fn moderated_members(story: &ImageStory, flags: &HashMap<String, bool>) -> Result<usize, StoriesError> {
    story.members.iter().try_fold(0, |n, id| match flags.get(id) {
        Some(&f) => Ok(n + usize::from(f)),
        None => Err(StoriesError::MissingFlag(id.clone())),
    })
}

/// One category's line of the moderation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: PolicyCategory,
    pub stories: usize,
    pub images: usize,
    pub moderated_images: usize,
}

impl CategoryRow {
    /// Moderated share of member images in percent; 0 with no images.
    pub fn moderation_percent(&self) -> f64 {
        if self.images == 0 {
            0.0
        } else {
            100.0 * self.moderated_images as f64 / self.images as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModerationReport {
    /// One row per category, in category order.
    pub rows: Vec<CategoryRow>,
    pub uncategorized_stories: usize,
}

impl ModerationReport {
    pub fn row(&self, category: PolicyCategory) -> &CategoryRow {
        self.rows
            .iter()
            .find(|r| r.category == category)
            .expect("every category has a row")
    }

    /// `Category,# Image stories,Moderation %` with percentages to two
    /// decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), StoriesError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["Category", "# Image stories", "Moderation %"])?;
        for r in &self.rows {
            w.write_record([
                r.category.title().to_string(),
                r.stories.to_string(),
                format!("{:.2}%", r.moderation_percent()),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("csv is utf-8")
    }
}

/// Per-category story counts and the share of member images flagged as
/// moderated.
pub fn moderation_report(stories: &[ImageStory], flags: &HashMap<String, bool>) -> Result<ModerationReport, StoriesError> {
    let mut rows: BTreeMap<PolicyCategory, CategoryRow> = PolicyCategory::ALL
        .into_iter()
        .map(|category| {
            (
                category,
                CategoryRow {
                    category,
                    stories: 0,
                    images: 0,
                    moderated_images: 0,
                },
            )
        })
        .collect();
    let mut uncategorized = 0;
    for s in stories {
        let moderated = moderated_members(s, flags)?;
        match s.category {
            Some(c) => {
                let row = rows.get_mut(&c).expect("all categories present");
                row.stories += 1;
                row.images += s.members.len();
                row.moderated_images += moderated;
            }
            None => uncategorized += 1,
        }
    }
    Ok(ModerationReport {
        rows: rows.into_values().collect(),
        uncategorized_stories: uncategorized,
    })
}
