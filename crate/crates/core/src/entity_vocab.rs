//! Cross-lingually merged entity vocabulary and mention statistics.
//!
//! Pages in different language editions that are joined by inter-language
//! links share one canonical key and therefore one entity id. Pages missing
//! from the link table stay single-language entities keyed `lang:title`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::corpus::AnnotatedDocument;
use crate::par;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const HEAD: usize = 2;
pub const TAIL: usize = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_KEYS: [&str; NUM_SPECIAL] = ["[PAD]", "[MASK]", "[HEAD]", "[TAIL]"];

/// Defaults used for the full-size vocabulary.
pub const DEFAULT_MIN_LANGUAGES: usize = 3;
pub const DEFAULT_TOP_K: usize = 1_200_000;
/// Mentions whose link probability falls below this are ignored.
pub const DEFAULT_MIN_LINK_PROB: f64 = 0.01;

const VOCAB_HEADER: &str = "#entity-vocab\tv1";

#[derive(Debug, Error)]
pub enum EntityVocabError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("({lang}, {title}) already linked to {existing}, cannot relink to {key}")]
    ConflictingLink {
        lang: String,
        title: String,
        existing: String,
        key: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, EntityVocabError>;

/// `(language, title) -> canonical key`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterLanguageLinks {
    to_key: HashMap<(String, String), String>,
    by_key: BTreeMap<String, BTreeMap<String, String>>,
}

impl InterLanguageLinks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lang: &str, title: &str, key: &str) -> Result<()> {
        let k = (lang.to_string(), title.to_string());
        if let Some(existing) = self.to_key.get(&k) {
            if existing != key {
                return Err(EntityVocabError::ConflictingLink {
                    lang: lang.into(),
                    title: title.into(),
                    existing: existing.clone(),
                    key: key.into(),
                });
            }
            return Ok(());
        }
        self.to_key.insert(k, key.to_string());
        self.by_key
            .entry(key.to_string())
            .or_default()
            .insert(lang.to_string(), title.to_string());
        Ok(())
    }

    pub fn canonical(&self, lang: &str, title: &str) -> Option<&str> {
        self.to_key
            .get(&(lang.to_string(), title.to_string()))
            .map(String::as_str)
    }

    /// The page for `key` in edition `lang`.
    pub fn title_in(&self, key: &str, lang: &str) -> Option<&str> {
        self.by_key.get(key)?.get(lang).map(String::as_str)
    }

    pub fn titles(&self, key: &str) -> Option<&BTreeMap<String, String>> {
        self.by_key.get(key)
    }

    pub fn len(&self) -> usize {
        self.to_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_key.is_empty()
    }

    /// Tab-separated `language, title, canonical_key` lines. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut links = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(EntityVocabError::Format {
                    line: i + 1,
                    reason: format!("expected 3 columns, found {}", cols.len()),
                });
            }
            links.insert(cols[0], cols[1], cols[2])?;
        }
        Ok(links)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (key, titles) in &self.by_key {
            for (lang, title) in titles {
                writeln!(w, "{lang}\t{title}\t{key}")?;
            }
        }
        Ok(())
    }
}

/// Canonical key of a hyperlink target.
pub fn canonical_key(links: &InterLanguageLinks, lang: &str, title: &str) -> String {
    links
        .canonical(lang, title)
        .map(str::to_string)
        .unwrap_or_else(|| format!("{lang}:{title}"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityEntry {
    pub key: String,
    pub link_count: u64,
    pub languages: BTreeSet<String>,
    /// Title per language edition.
    pub titles: BTreeMap<String, String>,
}

/// Hyperlink counts per canonical key; shards merge associatively.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityCounts {
    entries: HashMap<String, (u64, BTreeSet<String>, BTreeMap<String, String>)>,
}

impl EntityCounts {
    pub fn from_document(doc: &AnnotatedDocument, links: &InterLanguageLinks) -> Self {
        let mut c = EntityCounts::default();
        for a in &doc.annotations {
            let key = canonical_key(links, &doc.lang, &a.title);
            let e = c.entries.entry(key).or_default();
            e.0 += 1;
            e.1.insert(doc.lang.clone());
            e.2.entry(doc.lang.clone()).or_insert_with(|| a.title.clone());
        }
        c
    }

    pub fn merge(mut self, other: EntityCounts) -> Self {
        for (k, (n, langs, titles)) in other.entries {
            let e = self.entries.entry(k).or_default();
            e.0 += n;
            e.1.extend(langs);
            for (l, t) in titles {
                // keep the lexicographically smallest title so merge order is irrelevant
                e.2.entry(l)
                    .and_modify(|cur| {
                        if t < *cur {
                            *cur = t.clone();
                        }
                    })
                    .or_insert(t);
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityVocab {
    entries: Vec<EntityEntry>,
    key_index: HashMap<String, usize>,
    title_index: HashMap<(String, String), usize>,
}

impl Default for EntityVocab {
    fn default() -> Self {
        Self::from_entries(Vec::new())
    }
}

impl EntityVocab {
    /// Specials followed by `entries` in order.
    pub fn from_entries(entries: Vec<EntityEntry>) -> Self {
        let mut all: Vec<EntityEntry> = SPECIAL_KEYS
            .iter()
            .map(|k| EntityEntry {
                key: k.to_string(),
                link_count: 0,
                languages: BTreeSet::new(),
                titles: BTreeMap::new(),
            })
            .collect();
        all.extend(entries);
        let mut v = EntityVocab {
            entries: all,
            key_index: HashMap::new(),
            title_index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.key_index.clear();
        self.title_index.clear();
        for (i, e) in self.entries.iter().enumerate() {
            self.key_index.insert(e.key.clone(), i);
            for (l, t) in &e.titles {
                self.title_index.entry((l.clone(), t.clone())).or_insert(i);
            }
        }
    }

    /// Count hyperlinks per canonical entity, drop entities linked from fewer
    /// than `min_languages` editions, keep the `top_k` most linked (ties by
    /// canonical key) and prepend the specials.
    pub fn build(
        docs: &[AnnotatedDocument],
        links: &InterLanguageLinks,
        min_languages: usize,
        top_k: usize,
    ) -> Result<Self> {
        if min_languages == 0 || top_k == 0 {
            return Err(EntityVocabError::Argument(
                "min_languages and top_k must be >= 1".into(),
            ));
        }
        let counts = par::map(docs, |d| EntityCounts::from_document(d, links))
            .into_iter()
            .fold(EntityCounts::default(), EntityCounts::merge);
        let mut kept: Vec<EntityEntry> = counts
            .entries
            .into_iter()
            .filter(|(_, (_, langs, _))| langs.len() >= min_languages)
            .map(|(key, (link_count, languages, mut titles))| {
                if let Some(all) = links.titles(&key) {
                    for (l, t) in all {
                        titles.insert(l.clone(), t.clone());
                    }
                }
                EntityEntry {
                    key,
                    link_count,
                    languages,
                    titles,
                }
            })
            .collect();
        kept.sort_by(|a, b| b.link_count.cmp(&a.link_count).then_with(|| a.key.cmp(&b.key)));
        kept.truncate(top_k);
        Ok(Self::from_entries(kept))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() == NUM_SPECIAL
    }

    pub fn entry(&self, id: usize) -> Option<&EntityEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[EntityEntry] {
        &self.entries
    }

    pub fn id_of_key(&self, key: &str) -> Option<usize> {
        self.key_index.get(key).copied()
    }

    /// Entity id of page `title` in edition `lang`.
    pub fn resolve(&self, lang: &str, title: &str) -> Option<usize> {
        self.title_index
            .get(&(lang.to_string(), title.to_string()))
            .copied()
            .filter(|&i| i >= NUM_SPECIAL)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{VOCAB_HEADER}")?;
        for (id, e) in self.entries.iter().enumerate() {
            let titles: Vec<String> = e
                .titles
                .iter()
                .map(|(l, t)| format!("{}:{}", escape(l), escape(t)))
                .collect();
            let langs: Vec<&str> = e.languages.iter().map(String::as_str).collect();
            writeln!(
                w,
                "{id}\t{}\t{}\t{}\t{}\t{}",
                escape(&e.key),
                e.languages.len(),
                e.link_count,
                titles.join(";"),
                langs.join(",")
            )?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h == VOCAB_HEADER => {}
            _ => {
                return Err(EntityVocabError::Format {
                    line: 1,
                    reason: "missing entity-vocab header".into(),
                })
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            let bad = |reason: &str| EntityVocabError::Format {
                line: lineno,
                reason: reason.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 5 {
                return Err(bad("expected at least 5 columns"));
            }
            let id: usize = cols[0].parse().map_err(|_| bad("bad id"))?;
            if id != entries.len() {
                return Err(bad("ids must be dense and ordered"));
            }
            let lang_count: usize = cols[2].parse().map_err(|_| bad("bad language count"))?;
            let link_count: u64 = cols[3].parse().map_err(|_| bad("bad hyperlink count"))?;
            let mut titles = BTreeMap::new();
            for pair in split_unescaped(cols[4], ';') {
                if pair.is_empty() {
                    continue;
                }
                let (l, t) = pair.split_once(':').ok_or_else(|| bad("title pair without ':'"))?;
                titles.insert(unescape(l), unescape(&t));
            }
            let languages: BTreeSet<String> = cols
                .get(5)
                .map(|s| s.split(',').filter(|x| !x.is_empty()).map(String::from).collect())
                .unwrap_or_default();
            if languages.len() != lang_count && cols.len() > 5 {
                return Err(bad("language count disagrees with language list"));
            }
            entries.push(EntityEntry {
                key: unescape(cols[1]),
                link_count,
                languages,
                titles,
            });
        }
        if entries.len() < NUM_SPECIAL
            || entries[..NUM_SPECIAL]
                .iter()
                .zip(SPECIAL_KEYS)
                .any(|(e, k)| e.key != k)
        {
            return Err(EntityVocabError::Format {
                line: 2,
                reason: "special entries missing".into(),
            });
        }
        let mut v = EntityVocab {
            entries,
            key_index: HashMap::new(),
            title_index: HashMap::new(),
        };
        v.reindex();
        Ok(v)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ';' => out.push_str("\\s"),
            ':' => out.push_str("\\c"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('s') => out.push(';'),
                Some('c') => out.push(':'),
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn split_unescaped(s: &str, sep: char) -> Vec<String> {
    // escaped separators never appear raw, so a plain split is exact
    s.split(sep).map(String::from).collect()
}

/// Per-(language, surface) hyperlink and total occurrence counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MentionStats {
    counts: HashMap<(String, String), (u64, u64)>,
}

impl MentionStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record counts directly; `links` must not exceed `total`.
    pub fn set(&mut self, lang: &str, surface: &str, links: u64, total: u64) -> Result<()> {
        if links > total {
            return Err(EntityVocabError::Argument(format!(
                "{surface:?}: hyperlink count {links} exceeds total {total}"
            )));
        }
        self.counts
            .insert((lang.to_string(), surface.to_string()), (links, total));
        Ok(())
    }

    pub fn get(&self, lang: &str, surface: &str) -> Option<(u64, u64)> {
        self.counts
            .get(&(lang.to_string(), surface.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Count anchor surfaces and all their token-boundary occurrences.
    ///
    /// An anchor is also an occurrence of its own surface, so the hyperlink
    /// count never exceeds the total.
    pub fn from_corpus(docs: &[AnnotatedDocument]) -> Self {
        let mut surfaces: HashMap<&str, HashSet<Vec<&str>>> = HashMap::new();
        for d in docs {
            for a in &d.annotations {
                surfaces
                    .entry(d.lang.as_str())
                    .or_default()
                    .insert(d.tokens[a.start..a.end].iter().map(String::as_str).collect());
            }
        }
        let max_len: HashMap<&str, usize> = surfaces
            .iter()
            .map(|(l, s)| (*l, s.iter().map(Vec::len).max().unwrap_or(0)))
            .collect();
        let shards = par::map(docs, |d| {
            let mut local = MentionStats::new();
            let Some(known) = surfaces.get(d.lang.as_str()) else {
                return local;
            };
            for a in &d.annotations {
                let e = local
                    .counts
                    .entry((d.lang.clone(), d.surface(a)))
                    .or_default();
                e.0 += 1;
            }
            let toks: Vec<&str> = d.tokens.iter().map(String::as_str).collect();
            let limit = max_len[d.lang.as_str()];
            for i in 0..toks.len() {
                for len in 1..=limit.min(toks.len() - i) {
                    if known.contains(&toks[i..i + len]) {
                        let e = local
                            .counts
                            .entry((d.lang.clone(), toks[i..i + len].join(" ")))
                            .or_default();
                        e.1 += 1;
                    }
                }
            }
            local
        });
        shards.into_iter().fold(MentionStats::new(), MentionStats::merge)
    }

    pub fn merge(mut self, other: MentionStats) -> Self {
        for (k, (l, t)) in other.counts {
            let e = self.counts.entry(k).or_default();
            e.0 += l;
            e.1 += t;
        }
        self
    }

    /// Fraction of the surface's occurrences that are hyperlinks; `None` if
    /// the surface was never observed.
    pub fn link_probability(&self, lang: &str, surface: &str) -> Option<f64> {
        let (links, total) = self.get(lang, surface)?;
        if total == 0 {
            return None;
        }
        Some(links as f64 / total as f64)
    }

    /// `language, surface, hyperlink count, total count` lines, sorted.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut rows: Vec<_> = self.counts.iter().collect();
        rows.sort();
        for ((l, s), (a, b)) in rows {
            writeln!(w, "{l}\t{s}\t{a}\t{b}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut out = MentionStats::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| EntityVocabError::Format {
                line: i + 1,
                reason: reason.into(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let a = cols[2].parse().map_err(|_| bad("bad hyperlink count"))?;
            let b = cols[3].parse().map_err(|_| bad("bad total count"))?;
            out.set(cols[0], cols[1], a, b)?;
        }
        Ok(out)
    }
}
