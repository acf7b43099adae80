//! Interaction-log ingestion, min-count filtering, leave-one-out splitting,
//! and fixed-length left-padded batch assembly.

use std::collections::HashMap;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One user's chronologically ordered item indices.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<usize>,
}

/// Dense item vocabulary: index -> original id string.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub ids: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// PAD is the appended index `|I|`, never a real item.
    pub fn pad_index(&self) -> usize {
        self.ids.len()
    }

    /// Order-sensitive FNV-1a over the id strings; pins checkpoint/data
    /// vocabulary compatibility.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for id in &self.ids {
            for b in id.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Map from item index to its precomputed dense content vector.
#[derive(Debug, Clone)]
pub struct ContentTable {
    pub dim_raw: usize,
    /// `(|I|+1) x dim_raw`, row-major; last row is the all-zero PAD row.
    pub rows: Vec<f32>,
}

impl ContentTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.dim_raw
    }

    pub fn row(&self, idx: usize) -> &[f32] {
        &self.rows[idx * self.dim_raw..(idx + 1) * self.dim_raw]
    }
}

/// Fixed-length left-padded batch.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub batch: usize,
    pub max_len: usize,
    /// `batch x max_len` item indices, PAD on the left.
    pub id_seq: Vec<usize>,
    /// `batch x max_len`: `target[l] = id_seq[l+1]`, last real column holds
    /// the held-out next item; PAD elsewhere.
    pub target: Vec<usize>,
    /// `batch x max_len`, true at real positions.
    pub mask: Vec<bool>,
    pub user_ids: Vec<String>,
}

impl SequenceBatch {
    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * self.max_len..(b + 1) * self.max_len]
    }

    pub fn id_row(&self, b: usize) -> &[usize] {
        &self.id_seq[b * self.max_len..(b + 1) * self.max_len]
    }
}

/// One evaluation example: context plus the single held-out target.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalExample {
    pub user_id: String,
    pub input: Vec<usize>,
    pub target: usize,
}

/// Leave-one-out split. `train` holds each user's items minus the test
/// item; training batches shift targets inside that slice.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<InteractionSequence>,
    pub validation: Vec<EvalExample>,
    pub test: Vec<EvalExample>,
    /// Users with fewer than 3 interactions: kept train-only, counted here.
    pub too_short: usize,
}

/// Parses `(user_id, item_id, timestamp)` rows and densely re-indexes items
/// in order of first appearance. `delimiter` is detected from the extension
/// when `None` (`.tsv` -> tab, otherwise comma).
pub fn load_interactions(
    path: &Path,
    delimiter: Option<u8>,
    has_header: bool,
) -> Result<(Vec<InteractionSequence>, Vocab)> {
    let delim = delimiter.unwrap_or(match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => b'\t',
        _ => b',',
    });
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .delimiter(delim)
        .flexible(true)
        .from_reader(BufReader::new(file));

    // (user, item, timestamp, original row order)
    let mut rows: Vec<(String, String, f64, usize)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row_no = i + 1 + usize::from(has_header);
        let rec = rec.map_err(|e| Error::MalformedRow {
            row: row_no,
            msg: e.to_string(),
        })?;
        if rec.len() < 3 {
            return Err(Error::MalformedRow {
                row: row_no,
                msg: format!("expected user_id,item_id,timestamp; got {} fields", rec.len()),
            });
        }
        let ts: f64 = rec[2].trim().parse().map_err(|_| Error::MalformedRow {
            row: row_no,
            msg: format!("timestamp '{}' is not numeric", &rec[2]),
        })?;
        rows.push((rec[0].to_string(), rec[1].to_string(), ts, i));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no interaction rows", path.display())));
    }

    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut per_user: HashMap<String, Vec<(f64, usize, usize)>> = HashMap::new();
    let mut user_order: Vec<String> = Vec::new();
    for (user, item, ts, order) in rows {
        let idx = *item_index.entry(item.clone()).or_insert_with(|| {
            ids.push(item);
            ids.len() - 1
        });
        per_user
            .entry(user.clone())
            .or_insert_with(|| {
                user_order.push(user);
                Vec::new()
            })
            .push((ts, order, idx));
    }

    let mut seqs = Vec::with_capacity(user_order.len());
    for user in user_order {
        let mut evs = per_user.remove(&user).unwrap();
        // Stable ascending by timestamp; file order breaks ties.
        evs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        seqs.push(InteractionSequence {
            user_id: user,
            items: evs.into_iter().map(|(_, _, idx)| idx).collect(),
        });
    }
    Ok((seqs, Vocab { ids }))
}

/// Iteratively removes users with fewer than `min_user` interactions and
/// items with fewer than `min_item` occurrences, until a fixed point, then
/// re-densifies the vocabulary.
pub fn filter_min_count(
    seqs: &[InteractionSequence],
    vocab: &Vocab,
    min_user: usize,
    min_item: usize,
) -> Result<(Vec<InteractionSequence>, Vocab)> {
    assert!(min_user >= 1 && min_item >= 1, "min counts must be >= 1");
    let mut seqs: Vec<InteractionSequence> = seqs.to_vec();
    loop {
        let mut item_count = vec![0usize; vocab.len()];
        for s in &seqs {
            for &it in &s.items {
                item_count[it] += 1;
            }
        }
        let bad_item: Vec<bool> = item_count.iter().map(|&c| c > 0 && c < min_item).collect();
        let mut changed = bad_item.iter().any(|&b| b);
        for s in &mut seqs {
            s.items.retain(|&it| !bad_item[it]);
        }
        let before = seqs.len();
        seqs.retain(|s| s.items.len() >= min_user);
        changed |= seqs.len() != before;
        if !changed {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(Error::Data("min-count filtering removed every user".into()));
    }
    // Re-densify indices, preserving their relative order.
    let mut used = vec![false; vocab.len()];
    for s in &seqs {
        for &it in &s.items {
            used[it] = true;
        }
    }
    let mut remap = vec![usize::MAX; vocab.len()];
    let mut ids = Vec::new();
    for (old, &u) in used.iter().enumerate() {
        if u {
            remap[old] = ids.len();
            ids.push(vocab.ids[old].clone());
        }
    }
    for s in &mut seqs {
        for it in &mut s.items {
            *it = remap[*it];
        }
    }
    Ok((seqs, Vocab { ids }))
}

/// Leave-one-out: last item to test, second-to-last to validation, the rest
/// to train. Sequences shorter than 3 stay train-only and are counted.
pub fn leave_one_out_split(seqs: &[InteractionSequence]) -> DatasetSplit {
    let mut train = Vec::with_capacity(seqs.len());
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut too_short = 0usize;
    for s in seqs {
        let n = s.items.len();
        if n < 3 {
            too_short += 1;
            train.push(s.clone());
            continue;
        }
        train.push(InteractionSequence {
            user_id: s.user_id.clone(),
            items: s.items[..n - 1].to_vec(),
        });
        validation.push(EvalExample {
            user_id: s.user_id.clone(),
            input: s.items[..n - 2].to_vec(),
            target: s.items[n - 2],
        });
        test.push(EvalExample {
            user_id: s.user_id.clone(),
            input: s.items[..n - 1].to_vec(),
            target: s.items[n - 1],
        });
    }
    DatasetSplit {
        train,
        validation,
        test,
        too_short,
    }
}

/// Assembles `(user, context, held-out next item)` triples into a
/// left-padded batch. Contexts longer than `max_len` keep their most
/// recent `max_len` items.
pub fn build_batch(examples: &[(&str, &[usize], usize)], max_len: usize, pad: usize) -> SequenceBatch {
    assert!(max_len >= 2, "max_len must be at least 2");
    let b = examples.len();
    let mut id_seq = vec![pad; b * max_len];
    let mut target = vec![pad; b * max_len];
    let mut mask = vec![false; b * max_len];
    let mut user_ids = Vec::with_capacity(b);
    for (row, (user, input, heldout)) in examples.iter().enumerate() {
        user_ids.push(user.to_string());
        let kept: &[usize] = if input.len() > max_len {
            &input[input.len() - max_len..]
        } else {
            input
        };
        let offset = max_len - kept.len();
        for (j, &it) in kept.iter().enumerate() {
            let col = offset + j;
            id_seq[row * max_len + col] = it;
            mask[row * max_len + col] = true;
            target[row * max_len + col] = if j + 1 < kept.len() { kept[j + 1] } else { *heldout };
        }
    }
    SequenceBatch {
        batch: b,
        max_len,
        id_seq,
        target,
        mask,
        user_ids,
    }
}

/// Batch rows for training sequences: input is the sequence minus its last
/// item, which becomes the held-out target. Length-1 sequences cannot form
/// a training pair and are skipped.
pub fn train_examples(seqs: &[InteractionSequence]) -> Vec<(&str, &[usize], usize)> {
    seqs.iter()
        .filter(|s| s.items.len() >= 2)
        .map(|s| {
            let n = s.items.len();
            (s.user_id.as_str(), &s.items[..n - 1], s.items[n - 1])
        })
        .collect()
}

pub fn eval_examples(examples: &[EvalExample]) -> Vec<(&str, &[usize], usize)> {
    examples
        .iter()
        .map(|e| (e.user_id.as_str(), e.input.as_slice(), e.target))
        .collect()
}

const CVEC_MAGIC: &[u8; 4] = b"CVEC";

/// Loads content vectors from TSV (`item_id \t f1 f2 ... fk`) or the binary
/// CVEC container (detected by magic). Every vocabulary item must be
/// covered; a zero PAD row is appended.
pub fn load_content_table(path: &Path, vocab: &Vocab) -> Result<ContentTable> {
    let bytes = std::fs::read(path)?;
    let by_id: HashMap<String, Vec<f32>> = if bytes.starts_with(CVEC_MAGIC) {
        parse_cvec(&bytes)?
    } else {
        parse_content_tsv(&bytes)?
    };
    let dim_raw = match by_id.values().next() {
        Some(v) => v.len(),
        None => return Err(Error::Data("content file holds no vectors".into())),
    };
    if dim_raw == 0 {
        return Err(Error::Data("content vectors have zero width".into()));
    }
    for (id, v) in &by_id {
        if v.len() != dim_raw {
            return Err(Error::Data(format!(
                "content width inconsistent: item '{}' has {} values, expected {}",
                id,
                v.len(),
                dim_raw
            )));
        }
    }
    let missing: Vec<&String> = vocab
        .ids
        .iter()
        .filter(|id| !by_id.contains_key(*id))
        .take(11)
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).map(|s| s.as_str()).collect();
        let suffix = if missing.len() > 10 { ", ..." } else { "" };
        return Err(Error::Data(format!(
            "content vectors missing for items: {}{}",
            shown.join(", "),
            suffix
        )));
    }
    let mut rows = Vec::with_capacity((vocab.len() + 1) * dim_raw);
    for id in &vocab.ids {
        rows.extend_from_slice(&by_id[id]);
    }
    rows.extend(std::iter::repeat(0.0f32).take(dim_raw)); // PAD row
    Ok(ContentTable { dim_raw, rows })
}

fn parse_content_tsv(bytes: &[u8]) -> Result<HashMap<String, Vec<f32>>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Data("content TSV is not valid UTF-8".into()))?;
    let mut by_id = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row_no = i + 1;
        let (id, rest) = line.split_once('\t').ok_or(Error::MalformedRow {
            row: row_no,
            msg: "expected 'item_id<TAB>values'".into(),
        })?;
        let vals: std::result::Result<Vec<f32>, _> =
            rest.split_whitespace().map(|v| v.parse::<f32>()).collect();
        let vals = vals.map_err(|e| Error::MalformedRow {
            row: row_no,
            msg: format!("bad float: {e}"),
        })?;
        if vals.is_empty() {
            return Err(Error::MalformedRow {
                row: row_no,
                msg: "no vector values".into(),
            });
        }
        by_id.insert(id.to_string(), vals);
    }
    Ok(by_id)
}

fn parse_cvec(bytes: &[u8]) -> Result<HashMap<String, Vec<f32>>> {
    let mut cur = &bytes[4..];
    fn read_u32(cur: &mut &[u8]) -> Result<u32> {
        if cur.len() < 4 {
            return Err(Error::Data("CVEC truncated".into()));
        }
        let (head, tail) = cur.split_at(4);
        *cur = tail;
        Ok(u32::from_le_bytes(head.try_into().unwrap()))
    }
    let count = read_u32(&mut cur)? as usize;
    let dim = read_u32(&mut cur)? as usize;
    let mut by_id = HashMap::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut cur)? as usize;
        if cur.len() < id_len {
            return Err(Error::Data("CVEC truncated in id".into()));
        }
        let (id_bytes, tail) = cur.split_at(id_len);
        cur = tail;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| Error::Data("CVEC id is not UTF-8".into()))?
            .to_string();
        if cur.len() < dim * 4 {
            return Err(Error::Data("CVEC truncated in vector".into()));
        }
        let mut vals = Vec::with_capacity(dim);
        for j in 0..dim {
            vals.push(f32::from_le_bytes(cur[j * 4..j * 4 + 4].try_into().unwrap()));
        }
        cur = &cur[dim * 4..];
        by_id.insert(id, vals);
    }
    Ok(by_id)
}

/// Writes the binary CVEC container.
pub fn write_cvec(path: &Path, entries: &[(String, Vec<f32>)]) -> Result<()> {
    let dim = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(CVEC_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, vals) in entries {
        assert_eq!(vals.len(), dim, "CVEC vectors must share one width");
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Uniformly keeps `fraction` of the train sequences (validation and test
/// untouched). Selection is seeded and order-preserving.
pub fn subsample_train(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(split.clone());
    }
    let n = split.train.len();
    let keep = ((n as f64) * fraction).round().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    Ok(DatasetSplit {
        train: chosen.iter().map(|&i| split.train[i].clone()).collect(),
        validation: split.validation.clone(),
        test: split.test.clone(),
        too_short: split.too_short,
    })
}

/// Reads a whole file to a string.
pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    std::fs::File::open(path)?.read_to_string(&mut s)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn seq(user: &str, items: &[usize]) -> InteractionSequence {
        InteractionSequence {
            user_id: user.to_string(),
            items: items.to_vec(),
        }
    }

    #[test]
    fn rows_sort_by_timestamp() {
        let f = write_tmp("u1,a,5\nu1,b,1\nu1,c,3\n", ".csv");
        let (seqs, vocab) = load_interactions(f.path(), None, false).unwrap();
        assert_eq!(seqs.len(), 1);
        // b (t=1), c (t=3), a (t=5)
        assert_eq!(
            seqs[0].items.iter().map(|&i| vocab.ids[i].as_str()).collect::<Vec<_>>(),
            vec!["b", "c", "a"]
        );
    }

    #[test]
    fn timestamp_ties_break_by_file_order() {
        let f = write_tmp("u1,a,1\nu1,b,1\nu1,c,1\n", ".csv");
        let (seqs, vocab) = load_interactions(f.path(), None, false).unwrap();
        assert_eq!(
            seqs[0].items.iter().map(|&i| vocab.ids[i].as_str()).collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
    }

    #[test]
    fn vocabulary_counts_distinct_items_across_users() {
        let f = write_tmp("u1,a,1\nu1,b,2\nu2,c,1\nu2,d,2\n", ".csv");
        let (seqs, vocab) = load_interactions(f.path(), None, false).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(vocab.len(), 4);
    }

    #[test]
    fn missing_timestamp_names_the_row() {
        let f = write_tmp("u1,i9\n", ".csv");
        match load_interactions(f.path(), None, false) {
            Err(Error::MalformedRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("", ".csv");
        assert!(load_interactions(f.path(), None, false).is_err());
    }

    #[test]
    fn header_flag_skips_first_row() {
        let f = write_tmp("user_id,item_id,timestamp\nu1,a,1\nu1,b,2\nu1,c,3\n", ".csv");
        let (seqs, _) = load_interactions(f.path(), None, true).unwrap();
        assert_eq!(seqs[0].items.len(), 3);
    }

    #[test]
    fn filter_removes_sparse_user() {
        let seqs = vec![
            seq("u1", &[0, 1, 2, 3]),
            seq("u2", &[0, 1, 2, 3, 0, 1, 2, 3, 0, 1]),
        ];
        let vocab = Vocab {
            ids: (0..4).map(|i| format!("i{i}")).collect(),
        };
        let (filtered, _) = filter_min_count(&seqs, &vocab, 5, 1).unwrap();
        assert_eq!(filtered.len(), 1);
        assert_eq!(filtered[0].user_id, "u2");
    }

    #[test]
    fn filter_with_threshold_one_is_identity() {
        let seqs = vec![seq("u1", &[0, 1]), seq("u2", &[2])];
        let vocab = Vocab {
            ids: (0..3).map(|i| format!("i{i}")).collect(),
        };
        let (filtered, v2) = filter_min_count(&seqs, &vocab, 1, 1).unwrap();
        assert_eq!(filtered, seqs);
        assert_eq!(v2.len(), 3);
    }

    #[test]
    fn filter_cascades_to_fixed_point() {
        // Items 0..8 are kept alive by five dense users. Item 8 appears once
        // in each of u1, u2 (count 2 < 5) -> removed -> u1, u2 drop to 4
        // interactions -> removed; the dense users keep 0..8 at count 5,
        // which is stable.
        let mut seqs = vec![seq("u1", &[0, 1, 2, 3, 8]), seq("u2", &[4, 5, 6, 7, 8])];
        for k in 0..5 {
            seqs.push(seq(&format!("dense{k}"), &[0, 1, 2, 3, 4, 5, 6, 7]));
        }
        let vocab = Vocab {
            ids: (0..9).map(|i| format!("i{i}")).collect(),
        };
        let (filtered, v2) = filter_min_count(&seqs, &vocab, 5, 5).unwrap();
        assert_eq!(filtered.len(), 5, "only the dense users survive");
        assert_eq!(v2.len(), 8, "item 8 is gone, 0..8 survive");
        assert!(filtered.iter().all(|s| s.user_id.starts_with("dense")));
    }

    #[test]
    fn filter_everything_gone_is_an_error() {
        let seqs = vec![seq("u1", &[0])];
        let vocab = Vocab { ids: vec!["i0".into()] };
        assert!(filter_min_count(&seqs, &vocab, 5, 5).is_err());
    }

    #[test]
    fn split_four_items() {
        let split = leave_one_out_split(&[seq("u", &[10, 11, 12, 13])]);
        assert_eq!(split.test[0].target, 13);
        assert_eq!(split.test[0].input, vec![10, 11, 12]);
        assert_eq!(split.validation[0].target, 12);
        assert_eq!(split.validation[0].input, vec![10, 11]);
        assert_eq!(split.train[0].items, vec![10, 11, 12]);
        // Train batching then sees input [10, 11] with held-out 12.
        let ex = train_examples(&split.train);
        assert_eq!(ex[0].1, &[10, 11]);
        assert_eq!(ex[0].2, 12);
        assert_eq!(split.too_short, 0);
    }

    #[test]
    fn split_three_items_is_minimal() {
        let split = leave_one_out_split(&[seq("u", &[1, 2, 3])]);
        // Train covers [1] only, targeting 2.
        let ex = train_examples(&split.train);
        assert_eq!(ex[0].1, &[1]);
        assert_eq!(ex[0].2, 2);
        assert_eq!(split.validation[0].input, vec![1]);
        assert_eq!(split.validation[0].target, 2);
        assert_eq!(split.test[0].input, vec![1, 2]);
        assert_eq!(split.test[0].target, 3);
    }

    #[test]
    fn split_two_items_is_train_only() {
        let split = leave_one_out_split(&[seq("u", &[1, 2])]);
        assert_eq!(split.too_short, 1);
        assert!(split.validation.is_empty());
        assert!(split.test.is_empty());
        assert_eq!(split.train[0].items, vec![1, 2]);
    }

    #[test]
    fn no_test_target_leakage() {
        let split = leave_one_out_split(&[seq("u", &[1, 2, 3, 4])]);
        let ex = train_examples(&split.train);
        // Final training target is the validation item, never the test item.
        assert_eq!(ex[0].2, 3);
        assert_ne!(ex[0].2, split.test[0].target);
    }

    #[test]
    fn batch_left_pads_and_masks() {
        let b = build_batch(&[("u", &[1, 2, 3][..], 4)], 5, 99);
        assert_eq!(b.id_seq, vec![99, 99, 1, 2, 3]);
        assert_eq!(b.mask, vec![false, false, true, true, true]);
        assert_eq!(b.target[2..], [2, 3, 4]);
    }

    #[test]
    fn batch_keeps_most_recent_on_truncation() {
        let items: Vec<usize> = (0..12).collect();
        let b = build_batch(&[("u", &items[..], 50)], 10, 99);
        assert_eq!(b.id_row(0), &[2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
        assert!(b.mask_row(0).iter().all(|&m| m));
        assert_eq!(b.target[9], 50);
    }

    #[test]
    fn batch_targets_shift_by_one() {
        let b = build_batch(&[("u", &[7, 8, 9][..], 10)], 4, 99);
        // [PAD,7,8,9] -> targets [_,8,9,10]
        for l in 0..3 {
            if b.mask[l] && b.mask[l + 1] {
                assert_eq!(b.target[l], b.id_seq[l + 1]);
            }
        }
        assert_eq!(b.target[3], 10);
    }

    #[test]
    fn content_table_shape_and_pad() {
        let vocab = Vocab {
            ids: vec!["a".into(), "b".into(), "c".into()],
        };
        let f = write_tmp("a\t1 2 3 4\nb\t5 6 7 8\nc\t9 10 11 12\n", ".tsv");
        let table = load_content_table(f.path(), &vocab).unwrap();
        assert_eq!(table.dim_raw, 4);
        assert_eq!(table.n_rows(), 4); // 3 items + PAD
        assert_eq!(table.row(3), &[0.0; 4]); // PAD row is zero
        assert_eq!(table.row(1), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn content_table_missing_item_is_named() {
        let vocab = Vocab {
            ids: vec!["a".into(), "b".into()],
        };
        let f = write_tmp("a\t1 2\n", ".tsv");
        match load_content_table(f.path(), &vocab) {
            Err(Error::Data(msg)) => assert!(msg.contains('b'), "message: {msg}"),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn content_table_rejects_ragged_widths() {
        let vocab = Vocab {
            ids: vec!["a".into(), "b".into()],
        };
        let f = write_tmp("a\t1 2\nb\t1 2 3\n", ".tsv");
        assert!(load_content_table(f.path(), &vocab).is_err());
    }

    #[test]
    fn cvec_round_trip() {
        let vocab = Vocab {
            ids: vec!["x1".into(), "x2".into()],
        };
        let entries = vec![
            ("x1".to_string(), vec![1.5f32, -2.0, 0.25]),
            ("x2".to_string(), vec![0.0f32, 3.5, -1.0]),
        ];
        let f = tempfile::Builder::new().suffix(".cvec").tempfile().unwrap();
        write_cvec(f.path(), &entries).unwrap();
        let table = load_content_table(f.path(), &vocab).unwrap();
        assert_eq!(table.dim_raw, 3);
        assert_eq!(table.row(0), &[1.5, -2.0, 0.25]);
        assert_eq!(table.row(1), &[0.0, 3.5, -1.0]);
        assert_eq!(table.row(2), &[0.0; 3]);
    }

    #[test]
    fn subsample_identity_counts_and_determinism() {
        let seqs: Vec<InteractionSequence> = (0..100)
            .map(|i| seq(&format!("u{i}"), &[0, 1, 2, 3]))
            .collect();
        let split = leave_one_out_split(&seqs);
        let full = subsample_train(&split, 1.0, 7).unwrap();
        assert_eq!(full.train.len(), 100);
        let half = subsample_train(&split, 0.5, 7).unwrap();
        assert_eq!(half.train.len(), 50);
        assert_eq!(half.validation.len(), split.validation.len());
        assert_eq!(half.test.len(), split.test.len());
        let again = subsample_train(&split, 0.5, 7).unwrap();
        assert_eq!(
            half.train.iter().map(|s| &s.user_id).collect::<Vec<_>>(),
            again.train.iter().map(|s| &s.user_id).collect::<Vec<_>>()
        );
        assert!(subsample_train(&split, 0.0, 7).is_err());
    }

    #[test]
    fn load_filter_split_is_deterministic() {
        let mut content = String::new();
        for u in 0..20 {
            for i in 0..6 {
                content.push_str(&format!("u{u},i{},{}\n", (u + i * 3) % 15, i));
            }
        }
        let f = write_tmp(&content, ".csv");
        let (s1, v1) = load_interactions(f.path(), None, false).unwrap();
        let (s2, v2) = load_interactions(f.path(), None, false).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(v1, v2);
        let (f1, fv1) = filter_min_count(&s1, &v1, 5, 5).unwrap();
        let (f2, fv2) = filter_min_count(&s2, &v2, 5, 5).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(fv1.fingerprint(), fv2.fingerprint());
        let sp1 = leave_one_out_split(&f1);
        let sp2 = leave_one_out_split(&f2);
        assert_eq!(sp1.test, sp2.test);
        assert_eq!(sp1.validation, sp2.validation);
    }
}
