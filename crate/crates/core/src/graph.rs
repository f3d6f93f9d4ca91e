//! Item catalog, item-attribute graph and user-item interaction graph.
//!
//! Catalogs are JSONL, one item per line:
//!
//! ```text
//! {"id": "i001", "title": "Film 001", "attributes": [{"relation": "genre", "value": "g3"}]}
//! ```
//!
//! Interactions are CSV rows `user_id,item_id[,timestamp]` with an optional
//! header. Both structures are immutable once built.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_string())
    }
}

/// Casefold and trim; applied to every relation and value at ingest.
pub fn normalize_attribute_text(s: &str) -> String {
    s.trim().to_lowercase()
}

/// One edge of the item-attribute graph.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attribute {
    pub relation: String,
    pub value: String,
}

impl Attribute {
    pub fn new(relation: &str, value: &str) -> Self {
        Attribute {
            relation: normalize_attribute_text(relation),
            value: normalize_attribute_text(value),
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.relation, self.value)
    }
}

/// The set of relation names a catalog may use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationVocab(BTreeSet<String>);

impl RelationVocab {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        RelationVocab(
            names
                .into_iter()
                .map(|s| normalize_attribute_text(s.as_ref()))
                .collect(),
        )
    }

    pub fn contains(&self, relation: &str) -> bool {
        self.0.contains(relation)
    }
}

impl Default for RelationVocab {
    fn default() -> Self {
        RelationVocab::new(["genre", "actor", "director", "year"])
    }
}

/// Item → attributes and attribute → items, kept as exact transposes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributeGraph {
    forward: Vec<BTreeSet<Attribute>>,
    inverse: BTreeMap<Attribute, BTreeSet<usize>>,
}

impl AttributeGraph {
    fn from_forward(forward: Vec<BTreeSet<Attribute>>) -> Self {
        let mut inverse: BTreeMap<Attribute, BTreeSet<usize>> = BTreeMap::new();
        for (item, attrs) in forward.iter().enumerate() {
            for attr in attrs {
                inverse.entry(attr.clone()).or_default().insert(item);
            }
        }
        AttributeGraph { forward, inverse }
    }

    pub fn attributes(&self, item: usize) -> &BTreeSet<Attribute> {
        &self.forward[item]
    }

    /// Items carrying `attr`, by catalog index.
    pub fn items_with(&self, attr: &Attribute) -> Option<&BTreeSet<usize>> {
        self.inverse.get(attr)
    }

    pub fn inverse(&self) -> &BTreeMap<Attribute, BTreeSet<usize>> {
        &self.inverse
    }

    pub fn item_count(&self) -> usize {
        self.forward.len()
    }

    pub fn edge_count(&self) -> usize {
        self.forward.iter().map(BTreeSet::len).sum()
    }

    /// Values the item carries for `relation`.
    pub fn values_of<'a>(
        &'a self,
        item: usize,
        relation: &'a str,
    ) -> impl Iterator<Item = &'a str> + 'a {
        self.forward[item]
            .iter()
            .filter(move |a| a.relation == relation)
            .map(|a| a.value.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CatalogItem {
    pub id: ItemId,
    pub title: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogRecord {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub attributes: Vec<Attribute>,
}

/// The item catalog together with its attribute graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    items: Vec<CatalogItem>,
    index: HashMap<ItemId, usize>,
    graph: AttributeGraph,
}

impl Catalog {
    pub fn from_records(records: Vec<CatalogRecord>, vocab: &RelationVocab) -> Result<Self> {
        let mut items = Vec::with_capacity(records.len());
        let mut index = HashMap::with_capacity(records.len());
        let mut forward = Vec::with_capacity(records.len());
        for rec in records {
            let id = ItemId(rec.id.trim().to_string());
            if id.0.is_empty() {
                return Err(Error::Ingest("empty item id".into()));
            }
            let title = rec.title.trim().to_string();
            if title.is_empty() {
                return Err(Error::Ingest(format!("item `{id}` has an empty title")));
            }
            if index.insert(id.clone(), items.len()).is_some() {
                return Err(Error::Ingest(format!("duplicate item id `{id}`")));
            }
            let mut attrs = BTreeSet::new();
            for a in rec.attributes {
                let a = Attribute::new(&a.relation, &a.value);
                if !vocab.contains(&a.relation) {
                    return Err(Error::Ingest(format!(
                        "item `{id}` uses undeclared relation `{}`",
                        a.relation
                    )));
                }
                if a.value.is_empty() {
                    return Err(Error::Ingest(format!(
                        "item `{id}` has an empty attribute value"
                    )));
                }
                attrs.insert(a);
            }
            forward.push(attrs);
            items.push(CatalogItem { id, title });
        }
        Ok(Catalog {
            items,
            index,
            graph: AttributeGraph::from_forward(forward),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn item(&self, idx: usize) -> &CatalogItem {
        &self.items[idx]
    }

    pub fn graph(&self) -> &AttributeGraph {
        &self.graph
    }

    pub fn index_of(&self, id: &ItemId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownItem(id.0.clone()))
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.index
            .get(&ItemId(id.to_string()))
            .copied()
            .ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    /// Exact forward edge set of an item (R_p in the alignment score).
    pub fn attribute_relations(&self, id: &ItemId) -> Result<&BTreeSet<Attribute>> {
        Ok(self.graph.attributes(self.index_of(id)?))
    }

    pub fn to_records(&self) -> Vec<CatalogRecord> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, item)| CatalogRecord {
                id: item.id.0.clone(),
                title: item.title.clone(),
                attributes: self.graph.attributes(i).iter().cloned().collect(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for rec in self.to_records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_catalog(path: &Path, vocab: &RelationVocab) -> Result<Catalog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CatalogRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Catalog::from_records(records, vocab)
}

/// Bipartite user-item graph over a fixed catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionGraph {
    users: Vec<String>,
    user_index: HashMap<String, usize>,
    user_items: Vec<BTreeSet<usize>>,
    item_users: Vec<BTreeSet<usize>>,
}

impl InteractionGraph {
    pub fn new(item_count: usize) -> Self {
        InteractionGraph {
            users: Vec::new(),
            user_index: HashMap::new(),
            user_items: Vec::new(),
            item_users: vec![BTreeSet::new(); item_count],
        }
    }

    /// Adds a (user, item) edge; returns false if it was already present.
    pub fn add(&mut self, user: &str, item: usize) -> bool {
        let u = match self.user_index.get(user) {
            Some(&u) => u,
            None => {
                let u = self.users.len();
                self.users.push(user.to_string());
                self.user_index.insert(user.to_string(), u);
                self.user_items.push(BTreeSet::new());
                u
            }
        };
        let fresh = self.user_items[u].insert(item);
        if fresh {
            self.item_users[item].insert(u);
        }
        fresh
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_users.len()
    }

    pub fn edge_count(&self) -> usize {
        self.user_items.iter().map(BTreeSet::len).sum()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items_of(&self, user: usize) -> &BTreeSet<usize> {
        &self.user_items[user]
    }

    pub fn users_of(&self, item: usize) -> &BTreeSet<usize> {
        &self.item_users[item]
    }

    /// All edges as (user index, item index), users in first-seen order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    pub fn write_csv(&self, catalog: &Catalog, path: &Path, header: bool) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        if header {
            w.write_record(["user_id", "item_id"])?;
        }
        for (u, i) in self.edges() {
            w.write_record([self.users[u].as_str(), catalog.item(i).id.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_interactions(
    path: &Path,
    catalog: &Catalog,
    has_header: bool,
) -> Result<InteractionGraph> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Ingest(format!("{other:?}")),
        })?;
    let mut graph = InteractionGraph::new(catalog.len());
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if row.len() < 2 || row.len() > 3 {
            return Err(parse_err(format!(
                "expected 2 or 3 fields, found {}",
                row.len()
            )));
        }
        let (user, item) = (&row[0], &row[1]);
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let idx = catalog.lookup(item).map_err(|_| {
            Error::Ingest(format!(
                "line {line}: interaction references unknown item `{item}`"
            ))
        })?;
        graph.add(user, idx);
    }
    Ok(graph)
}
