//! Text tokenization and TREC-format file handling: JSON-lines corpus, TSV
//! queries, 6-column run files, and qrels.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, BOTTOM_RESERVED};

/// One first-stage candidate for a query.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc_id: String,
    pub first_stage_rank: usize,
    pub first_stage_score: f32,
}

/// One output line of a run file. The run tag is stamped at write time, one
/// tag per file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f32,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Hash tokenizer: lowercase, split on non-alphanumeric runs, map each word
/// into the id range that sits between the reserved separator/trigger ids and
/// the reserved identifier block.
pub fn tokenize(text: &str, cfg: &ModelConfig) -> Vec<u32> {
    let lower = text.to_lowercase();
    let range = cfg.word_id_range() as u64;
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (BOTTOM_RESERVED as u64 + fnv1a(w.as_bytes()) % range) as u32)
        .collect()
}

#[derive(Deserialize)]
struct CorpusRecord {
    id: String,
    text: String,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// JSON-lines corpus: one `{"id": …, "text": …}` record per line.
pub fn load_corpus(path: &Path) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, line_no, format!("bad corpus record: {e}")))?;
        if map.insert(record.id.clone(), record.text).is_some() {
            log::warn!("{}:{line_no}: duplicate corpus id {}, keeping the last", path.display(), record.id);
        }
    }
    Ok(map)
}

/// Tab-separated queries: `id<TAB>text`.
pub fn load_queries(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_no, "expected id<TAB>text"))?;
        if id.is_empty() {
            return Err(Error::parse(path, line_no, "empty query id"));
        }
        if let Some(slot) = out.iter_mut().find(|(qid, _)| qid == id) {
            log::warn!("{}:{line_no}: duplicate query id {id}, keeping the last", path.display());
            slot.1 = text.to_string();
        } else {
            out.push((id.to_string(), text.to_string()));
        }
    }
    Ok(out)
}

/// TREC run file: `qid Q0 docid rank score tag`, whitespace-separated.
/// Queries come back in first-appearance order with candidates sorted by
/// rank; a duplicated rank within a query is an error.
pub fn load_run(path: &Path) -> Result<Vec<(String, Vec<Candidate>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_query: HashMap<String, Vec<(usize, Candidate)>> = HashMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 6 columns, got {}", cols.len()),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad rank {:?}", cols[3])))?;
        let score: f32 = cols[4]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad score {:?}", cols[4])))?;
        let qid = cols[0].to_string();
        let entry = (
            line_no,
            Candidate {
                doc_id: cols[2].to_string(),
                first_stage_rank: rank,
                first_stage_score: score,
            },
        );
        match by_query.get_mut(&qid) {
            Some(list) => {
                if let Some((prev_line, _)) = list
                    .iter()
                    .find(|(_, c)| c.first_stage_rank == rank)
                {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("rank {rank} for query {qid} already used on line {prev_line}"),
                    ));
                }
                list.push(entry);
            }
            None => {
                order.push(qid.clone());
                by_query.insert(qid, vec![entry]);
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|qid| {
            let mut list: Vec<Candidate> = by_query
                .remove(&qid)
                .expect("query recorded in order")
                .into_iter()
                .map(|(_, c)| c)
                .collect();
            list.sort_by_key(|c| c.first_stage_rank);
            (qid, list)
        })
        .collect())
}

/// Qrels: `qid 0 docid grade`. Later duplicates of a (query, doc) pair win,
/// with a warning.
pub fn load_qrels(path: &Path) -> Result<HashMap<String, HashMap<String, i64>>> {
    let mut map: HashMap<String, HashMap<String, i64>> = HashMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 4 columns, got {}", cols.len()),
            ));
        }
        let grade: i64 = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad grade {:?}", cols[3])))?;
        let prev = map
            .entry(cols[0].to_string())
            .or_default()
            .insert(cols[2].to_string(), grade);
        if prev.is_some() {
            log::warn!(
                "{}:{line_no}: duplicate judgment for ({}, {}), keeping the last",
                path.display(),
                cols[0],
                cols[2]
            );
        }
    }
    Ok(map)
}

/// Check the run-file invariants: entries grouped by query, ranks contiguous
/// from 1, scores non-increasing with rank.
fn check_run_invariants(entries: &[RunEntry]) -> Result<()> {
    let mut seen: Vec<&str> = Vec::new();
    let mut i = 0;
    while i < entries.len() {
        let qid = entries[i].query_id.as_str();
        if seen.contains(&qid) {
            return Err(Error::InvalidArgument(format!(
                "entries for query {qid} are not contiguous"
            )));
        }
        seen.push(qid);
        let mut prev_score = f32::INFINITY;
        let mut expected_rank = 1;
        while i < entries.len() && entries[i].query_id == qid {
            let e = &entries[i];
            if e.rank != expected_rank {
                return Err(Error::InvalidArgument(format!(
                    "query {qid}: rank {} where {expected_rank} expected",
                    e.rank
                )));
            }
            if e.score > prev_score {
                return Err(Error::InvalidArgument(format!(
                    "query {qid}: score rises at rank {}",
                    e.rank
                )));
            }
            prev_score = e.score;
            expected_rank += 1;
            i += 1;
        }
    }
    Ok(())
}

/// Write a TREC run. The entries must already satisfy the run invariants;
/// violations are refused before anything is written.
pub fn write_run(entries: &[RunEntry], path: &Path, tag: &str) -> Result<()> {
    check_run_invariants(entries)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        writeln!(
            w,
            "{} Q0 {} {} {:.6} {}",
            e.query_id, e.doc_id, e.rank, e.score, tag
        )
        .map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
