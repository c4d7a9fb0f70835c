//! In-memory knowledge graph with interned labels, forward/backward
//! adjacency, an entity type schema, and shortest-path enumeration.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::BufRead;

use crate::error::{Error, Result};

/// Label of the virtual termination relation. Never loadable from data.
pub const END_RELATION: &str = "END";
/// Suffix attached to relation labels traversed against edge direction.
pub const INVERSE_SUFFIX: &str = "~inv";
/// Separator used in textual path serializations.
pub const ARROW: &str = " → ";
/// Default bound on the number of enumerated shortest paths.
pub const DEFAULT_PATH_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypeId(pub u32);

impl EntityId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// One traversal step: a relation, optionally followed from tail to head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hop {
    pub relation: RelationId,
    pub inverse: bool,
}

impl Hop {
    pub fn forward(relation: RelationId) -> Self {
        Hop { relation, inverse: false }
    }

    pub fn inverse(relation: RelationId) -> Self {
        Hop { relation, inverse: true }
    }
}

/// A relation path grounded in entities: `topic -hop1-> x1 -hop2-> ... -> terminal`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Path {
    pub topic: EntityId,
    pub hops: Vec<Hop>,
    /// Entities strictly between topic and terminal; `hops.len() - 1` long.
    pub intermediates: Vec<EntityId>,
    pub terminal: EntityId,
}

impl Path {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// Entity sequence including both endpoints.
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        std::iter::once(self.topic).chain(self.intermediates.iter().copied()).chain(std::iter::once(self.terminal))
    }
}

#[derive(Debug, Default, Clone)]
struct Interner {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = u32::try_from(self.labels.len()).expect("more than u32::MAX labels");
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    fn get(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    fn label(&self, id: u32) -> &str {
        &self.labels[id as usize]
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Options for [`KnowledgeGraph::enumerate_shortest_paths`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathQuery {
    pub cap: usize,
    pub allow_inverse: bool,
}

impl Default for PathQuery {
    fn default() -> Self {
        PathQuery { cap: DEFAULT_PATH_CAP, allow_inverse: false }
    }
}

#[derive(Debug, Default, Clone)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    types: Interner,
    triples: BTreeSet<Triple>,
    // Both adjacency lists are kept sorted by (relation, neighbour).
    out_adj: Vec<Vec<(RelationId, EntityId)>>,
    in_adj: Vec<Vec<(RelationId, EntityId)>>,
    entity_types: BTreeMap<EntityId, BTreeSet<TypeId>>,
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split('\t').collect()
}

fn check_label(line: usize, what: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(Error::Parse { line, message: format!("empty {what}") });
    }
    Ok(())
}

fn check_relation_label(line: usize, value: &str) -> Result<()> {
    check_label(line, "relation", value)?;
    if value == END_RELATION {
        return Err(Error::Parse { line, message: format!("relation label `{END_RELATION}` is reserved") });
    }
    if value.ends_with(INVERSE_SUFFIX) {
        return Err(Error::Parse {
            line,
            message: format!("relation label `{value}` uses the reserved `{INVERSE_SUFFIX}` suffix"),
        });
    }
    Ok(())
}

/// Yields `(line_number, content)` for non-blank lines, stripping `\r`.
fn data_lines<R: BufRead>(source: R) -> impl Iterator<Item = Result<(usize, String)>> {
    source.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(Error::from(e))),
        Ok(mut l) => {
            if l.ends_with('\r') {
                l.pop();
            }
            if l.trim().is_empty() {
                None
            } else {
                Some(Ok((i + 1, l)))
            }
        }
    })
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
    pub fn load_triples<R: BufRead>(source: R) -> Result<Self> {
        let mut g = KnowledgeGraph::new();
        for item in data_lines(source) {
            let (line, text) = item?;
            let fields = split_fields(&text);
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            check_label(line, "head", fields[0])?;
            check_relation_label(line, fields[1])?;
            check_label(line, "tail", fields[2])?;
            g.insert(fields[0], fields[1], fields[2]);
        }
        if g.triples.is_empty() {
            return Err(Error::EmptyGraph);
        }
        Ok(g)
    }

    /// Merges `entity<TAB>type` lines into the type schema, creating
    /// entities that were not seen in the triples.
    pub fn load_type_schema<R: BufRead>(&mut self, source: R) -> Result<()> {
        let mut parsed = Vec::new();
        for item in data_lines(source) {
            let (line, text) = item?;
            let fields = split_fields(&text);
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 2 tab-separated fields, found {}", fields.len()),
                });
            }
            check_label(line, "entity", fields[0])?;
            check_label(line, "type", fields[1])?;
            parsed.push((fields[0].to_owned(), fields[1].to_owned()));
        }
        // Validate the whole stream before touching the graph.
        for (entity, ty) in parsed {
            self.add_entity_type(&entity, &ty);
        }
        Ok(())
    }

    /// Builds a graph from label triples; used by generators and tests.
    pub fn from_triples<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut g = KnowledgeGraph::new();
        for (h, r, t) in triples {
            g.insert(h, r, t);
        }
        g
    }

    /// Adds a triple; returns `false` if it was already present.
    pub fn insert(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let head = self.intern_entity(head);
        let tail = self.intern_entity(tail);
        let relation = RelationId(self.relations.intern(relation));
        let triple = Triple { head, relation, tail };
        if !self.triples.insert(triple) {
            return false;
        }
        let out = &mut self.out_adj[head.index()];
        let pos = out.partition_point(|&e| e < (relation, tail));
        out.insert(pos, (relation, tail));
        let inc = &mut self.in_adj[tail.index()];
        let pos = inc.partition_point(|&e| e < (relation, head));
        inc.insert(pos, (relation, head));
        true
    }

    pub fn add_entity_type(&mut self, entity: &str, ty: &str) {
        let e = self.intern_entity(entity);
        let t = TypeId(self.types.intern(ty));
        self.entity_types.entry(e).or_default().insert(t);
    }

    fn intern_entity(&mut self, label: &str) -> EntityId {
        let id = EntityId(self.entities.intern(label));
        if self.out_adj.len() <= id.index() {
            self.out_adj.resize_with(id.index() + 1, Vec::new);
            self.in_adj.resize_with(id.index() + 1, Vec::new);
        }
        id
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.triples.contains(triple)
    }

    pub fn entity_id(&self, label: &str) -> Result<EntityId> {
        self.entities.get(label).map(EntityId).ok_or_else(|| Error::Lookup { kind: "entity", name: label.to_owned() })
    }

    pub fn relation_id(&self, label: &str) -> Result<RelationId> {
        self.relations
            .get(label)
            .map(RelationId)
            .ok_or_else(|| Error::Lookup { kind: "relation", name: label.to_owned() })
    }

    pub fn type_id(&self, label: &str) -> Option<TypeId> {
        self.types.get(label).map(TypeId)
    }

    pub fn has_entity(&self, id: EntityId) -> bool {
        id.index() < self.entities.len()
    }

    fn check_entity(&self, id: EntityId) -> Result<()> {
        if self.has_entity(id) {
            Ok(())
        } else {
            Err(Error::Lookup { kind: "entity", name: format!("#{}", id.0) })
        }
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        self.entities.label(id.0)
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        self.relations.label(id.0)
    }

    pub fn type_label(&self, id: TypeId) -> &str {
        self.types.label(id.0)
    }

    pub fn hop_label(&self, hop: Hop) -> Cow<'_, str> {
        let label = self.relation_label(hop.relation);
        if hop.inverse {
            Cow::Owned(format!("{label}{INVERSE_SUFFIX}"))
        } else {
            Cow::Borrowed(label)
        }
    }

    /// All interned types, ordered by id.
    pub fn all_types(&self) -> impl Iterator<Item = (TypeId, &str)> {
        (0..self.types.len() as u32).map(move |i| (TypeId(i), self.types.label(i)))
    }

    /// Type set of `entity`; empty when the schema does not cover it.
    pub fn types_of(&self, entity: EntityId) -> impl Iterator<Item = TypeId> + '_ {
        self.entity_types.get(&entity).into_iter().flatten().copied()
    }

    pub fn has_types(&self, entity: EntityId) -> bool {
        self.entity_types.get(&entity).is_some_and(|s| !s.is_empty())
    }

    pub fn out_edges(&self, entity: EntityId) -> &[(RelationId, EntityId)] {
        self.out_adj.get(entity.index()).map_or(&[], Vec::as_slice)
    }

    pub fn in_edges(&self, entity: EntityId) -> &[(RelationId, EntityId)] {
        self.in_adj.get(entity.index()).map_or(&[], Vec::as_slice)
    }

    /// Traversable steps out of `entity`, sorted by `(hop, neighbour)`.
    pub fn neighbors(&self, entity: EntityId, allow_inverse: bool) -> Vec<(Hop, EntityId)> {
        let mut steps: Vec<(Hop, EntityId)> =
            self.out_edges(entity).iter().map(|&(r, t)| (Hop::forward(r), t)).collect();
        if allow_inverse {
            steps.extend(self.in_edges(entity).iter().map(|&(r, h)| (Hop::inverse(r), h)));
            steps.sort_unstable();
        }
        steps
    }

    /// Entities reachable from `entity` by exactly one `hop`.
    pub fn step(&self, entity: EntityId, hop: Hop) -> impl Iterator<Item = EntityId> + '_ {
        let edges = if hop.inverse { self.in_edges(entity) } else { self.out_edges(entity) };
        let start = edges.partition_point(|&(r, _)| r < hop.relation);
        edges[start..].iter().take_while(move |&&(r, _)| r == hop.relation).map(|&(_, e)| e)
    }

    /// Whether `from -hop-> to` is an edge of the graph.
    pub fn has_step(&self, from: EntityId, hop: Hop, to: EntityId) -> bool {
        let triple = if hop.inverse {
            Triple { head: to, relation: hop.relation, tail: from }
        } else {
            Triple { head: from, relation: hop.relation, tail: to }
        };
        self.triples.contains(&triple)
    }

    /// Replays every step of `path`; true when each is an edge.
    pub fn is_valid_path(&self, path: &Path) -> bool {
        if path.hops.is_empty() || path.intermediates.len() + 1 != path.hops.len() {
            return false;
        }
        let entities: Vec<EntityId> = path.entities().collect();
        path.hops.iter().zip(entities.windows(2)).all(|(&hop, pair)| self.has_step(pair[0], hop, pair[1]))
    }

    /// Hop-count distance from every entity to `target` (`usize::MAX` if unreachable).
    fn distances_to(&self, target: EntityId, allow_inverse: bool) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.entity_count()];
        let mut queue = VecDeque::new();
        dist[target.index()] = 0;
        queue.push_back(target);
        while let Some(v) = queue.pop_front() {
            let d = dist[v.index()] + 1;
            // Predecessors of v under the traversal relation.
            let forward_preds = self.in_edges(v).iter().map(|&(_, u)| u);
            let inverse_preds = self.out_edges(v).iter().filter(|_| allow_inverse).map(|&(_, u)| u);
            for u in forward_preds.chain(inverse_preds) {
                if dist[u.index()] == usize::MAX {
                    dist[u.index()] = d;
                    queue.push_back(u);
                }
            }
        }
        dist
    }

    /// Enumerates every minimum-length path from `from` to `to`.
    ///
    /// Paths come out ordered by their hop sequence, then by the entity
    /// sequence, and the list is cut at `query.cap`. A zero-hop request
    /// (`from == to`) and unreachable pairs return an empty list.
    pub fn enumerate_shortest_paths(&self, from: EntityId, to: EntityId, query: PathQuery) -> Result<Vec<Path>> {
        self.check_entity(from)?;
        self.check_entity(to)?;
        if from == to || query.cap == 0 {
            return Ok(Vec::new());
        }
        let dist = self.distances_to(to, query.allow_inverse);
        let depth = dist[from.index()];
        if depth == usize::MAX {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        let mut truncated = false;
        let frontier = vec![vec![from]];
        self.expand_shortest(&dist, query, frontier, &mut Vec::with_capacity(depth), depth, &mut out, &mut truncated);
        if truncated {
            log::warn!(
                "shortest paths {} -> {} truncated at cap {}",
                self.entity_label(from),
                self.entity_label(to),
                query.cap
            );
        }
        Ok(out)
    }

    // Every partial walk in `frontier` shares the hop prefix `hops`; the
    // walks are kept sorted so emission order is lexicographic.
    #[allow(clippy::too_many_arguments)]
    fn expand_shortest(
        &self,
        dist: &[usize],
        query: PathQuery,
        frontier: Vec<Vec<EntityId>>,
        hops: &mut Vec<Hop>,
        remaining: usize,
        out: &mut Vec<Path>,
        truncated: &mut bool,
    ) {
        let mut by_hop: BTreeMap<Hop, Vec<Vec<EntityId>>> = BTreeMap::new();
        for walk in &frontier {
            let current = *walk.last().expect("walks are never empty");
            for (hop, next) in self.neighbors(current, query.allow_inverse) {
                if dist[next.index()] != remaining - 1 {
                    continue;
                }
                let mut extended = walk.clone();
                extended.push(next);
                by_hop.entry(hop).or_default().push(extended);
            }
        }
        for (hop, mut walks) in by_hop {
            if *truncated {
                return;
            }
            walks.sort_unstable();
            hops.push(hop);
            if remaining == 1 {
                for walk in walks {
                    if out.len() == query.cap {
                        *truncated = true;
                        break;
                    }
                    out.push(Path {
                        topic: walk[0],
                        hops: hops.clone(),
                        intermediates: walk[1..walk.len() - 1].to_vec(),
                        terminal: walk[walk.len() - 1],
                    });
                }
            } else {
                self.expand_shortest(dist, query, walks, hops, remaining - 1, out, truncated);
            }
            hops.pop();
        }
    }

    /// Canonical text: `topic → r1 → … → rn → terminal`.
    pub fn serialize_path(&self, path: &Path) -> String {
        let mut text = self.serialize_prefix(path.topic, &path.hops);
        text.push_str(ARROW);
        text.push_str(self.entity_label(path.terminal));
        text
    }

    /// Text of a partial path: `topic → r1 → … → rk` (just `topic` when k = 0).
    pub fn serialize_prefix(&self, topic: EntityId, hops: &[Hop]) -> String {
        let mut text = self.entity_label(topic).to_owned();
        for &hop in hops {
            text.push_str(ARROW);
            text.push_str(&self.hop_label(hop));
        }
        text
    }

    /// Serialization prefixed with a question context, as embedded by the retriever.
    pub fn serialize_with_question(&self, question: &str, path: &Path) -> String {
        format!("{question} [SEP] {}", self.serialize_path(path))
    }

    /// Instantiates a relation path from `topic` into concrete entity paths,
    /// in lexicographic entity order, stopping after `limit` paths.
    pub fn ground_relation_path(&self, topic: EntityId, hops: &[Hop], limit: usize) -> Vec<Path> {
        let mut out = Vec::new();
        if hops.is_empty() || limit == 0 {
            return out;
        }
        let mut walk = vec![topic];
        self.ground_rec(hops, &mut walk, limit, &mut out);
        out
    }

    fn ground_rec(&self, hops: &[Hop], walk: &mut Vec<EntityId>, limit: usize, out: &mut Vec<Path>) {
        let depth = walk.len() - 1;
        if depth == hops.len() {
            out.push(Path {
                topic: walk[0],
                hops: hops.to_vec(),
                intermediates: walk[1..walk.len() - 1].to_vec(),
                terminal: walk[walk.len() - 1],
            });
            return;
        }
        let current = walk[depth];
        let mut nexts: Vec<EntityId> = self.step(current, hops[depth]).collect();
        nexts.sort_unstable();
        for next in nexts {
            if out.len() >= limit {
                return;
            }
            walk.push(next);
            self.ground_rec(hops, walk, limit, out);
            walk.pop();
        }
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}
