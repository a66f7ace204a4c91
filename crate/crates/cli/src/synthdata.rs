//! Word-level synthetic retrieval data in TREC formats. Relevance is planted
//! as query-word occurrences inside the positive document, so the hash
//! tokenizer reproduces the same overlap structure the training task uses at
//! the token level.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ltc_core::error::{Error, Result};
use ltc_core::tensor::{RngSeed, WeightRng};
use ltc_core::trec::{write_run, RunEntry};

const NUM_WORDS: usize = 240;
const QUERY_CUT: usize = 60;
const QUERY_LEN: usize = 4;

/// Paths of the four generated files.
pub struct SynthFiles {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub run: PathBuf,
    pub qrels: PathBuf,
}

fn word(idx: usize) -> String {
    format!("w{idx:03}")
}

fn sample_doc(rng: &mut WeightRng, doc_len: usize) -> Vec<usize> {
    (0..doc_len)
        .map(|_| QUERY_CUT + rng.next_below((NUM_WORDS - QUERY_CUT) as u64) as usize)
        .collect()
}

/// Generate a corpus, query set, first-stage run, and qrels under `dir`.
/// Each query gets one relevant document (query words planted at random
/// positions) and `negatives` distractor-only documents, listed in the run in
/// a shuffled first-stage order.
pub fn generate(
    dir: &Path,
    seed: u64,
    num_queries: usize,
    doc_len: usize,
    negatives: usize,
) -> Result<SynthFiles> {
    if doc_len < 4 {
        return Err(Error::InvalidArgument(format!(
            "doc length must be at least 4, got {doc_len}"
        )));
    }
    if num_queries == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "need at least one query and one negative per query".into(),
        ));
    }
    let mut rng = WeightRng::new(RngSeed(seed));
    let files = SynthFiles {
        corpus: dir.join("corpus.jsonl"),
        queries: dir.join("queries.tsv"),
        run: dir.join("run.txt"),
        qrels: dir.join("qrels.txt"),
    };
    let mut corpus = BufWriter::new(File::create(&files.corpus).map_err(|e| Error::io(&files.corpus, e))?);
    let mut queries = BufWriter::new(File::create(&files.queries).map_err(|e| Error::io(&files.queries, e))?);
    let mut qrels = BufWriter::new(File::create(&files.qrels).map_err(|e| Error::io(&files.qrels, e))?);
    let mut run_entries: Vec<RunEntry> = Vec::new();

    let planted = (doc_len / 8).max(1);
    for qi in 0..num_queries {
        let qid = format!("q{qi}");
        let query_words: Vec<usize> = (0..QUERY_LEN)
            .map(|_| rng.next_below(QUERY_CUT as u64) as usize)
            .collect();
        let query_text: Vec<String> = query_words.iter().map(|&w| word(w)).collect();
        writeln!(queries, "{qid}\t{}", query_text.join(" ")).map_err(|e| Error::io(&files.queries, e))?;

        // One positive with planted query words, then distractor-only negatives.
        let mut docs: Vec<(String, Vec<usize>, i64)> = Vec::with_capacity(negatives + 1);
        let mut positive = sample_doc(&mut rng, doc_len);
        let mut positions: Vec<usize> = Vec::new();
        while positions.len() < planted {
            let p = rng.next_below(doc_len as u64) as usize;
            if !positions.contains(&p) {
                positions.push(p);
            }
        }
        for &p in &positions {
            positive[p] = query_words[rng.next_below(QUERY_LEN as u64) as usize];
        }
        docs.push((format!("d{qi}p"), positive, 2));
        for j in 0..negatives {
            docs.push((format!("d{qi}n{j}"), sample_doc(&mut rng, doc_len), 0));
        }

        for (doc_id, words, grade) in &docs {
            let text: Vec<String> = words.iter().map(|&w| word(w)).collect();
            let record = serde_json::json!({ "id": doc_id, "text": text.join(" ") });
            writeln!(corpus, "{record}").map_err(|e| Error::io(&files.corpus, e))?;
            writeln!(qrels, "{qid} 0 {doc_id} {grade}").map_err(|e| Error::io(&files.qrels, e))?;
        }

        // First-stage order: a seeded shuffle with descending synthetic scores.
        let mut order: Vec<usize> = (0..docs.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.next_below((i + 1) as u64) as usize;
            order.swap(i, j);
        }
        for (rank0, &di) in order.iter().enumerate() {
            run_entries.push(RunEntry {
                query_id: qid.clone(),
                doc_id: docs[di].0.clone(),
                rank: rank0 + 1,
                score: (docs.len() - rank0) as f32,
            });
        }
    }

    corpus.flush().map_err(|e| Error::io(&files.corpus, e))?;
    queries.flush().map_err(|e| Error::io(&files.queries, e))?;
    qrels.flush().map_err(|e| Error::io(&files.qrels, e))?;
    write_run(&run_entries, &files.run, "first-stage")?;
    Ok(files)
}
