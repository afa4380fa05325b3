//! Synthetic probe tasks. Every generator is a pure function of its knobs
//! and seed.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::text::filler_sentences;
use super::{tokenize_bytes, BOS, EOS};
use crate::autodiff::Graph;
use crate::error::{FocalError, Result};
use crate::model::Model;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    KvRecall,
    NeedleUuid,
    IclClassify,
    Copy,
}

impl std::str::FromStr for TaskKind {
    type Err = FocalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv_recall" => Ok(TaskKind::KvRecall),
            "needle_uuid" => Ok(TaskKind::NeedleUuid),
            "icl_classify" => Ok(TaskKind::IclClassify),
            "copy" => Ok(TaskKind::Copy),
            other => Err(FocalError::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub context_length: usize,
    pub seed: u64,
    /// Difficulty knobs as generated, e.g. `{"n_pairs": 8}`.
    pub knobs: serde_json::Value,
    /// Starts with `BOS`.
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    /// Prompt positions holding the information the answer depends on.
    pub relevant: Vec<usize>,
}

impl TaskInstance {
    /// Prompt, answer and a closing `EOS`: the form used inside training
    /// mixtures.
    pub fn training_document(&self) -> Vec<usize> {
        let mut d = self.prompt.clone();
        d.extend_from_slice(&self.answer);
        d.push(EOS);
        d
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "prompt": super::detokenize_lossy(&self.prompt),
            "answer": super::detokenize_lossy(&self.answer),
            "metadata": {
                "kind": self.kind,
                "seed": self.seed,
                "context_length": self.context_length,
                "knobs": self.knobs,
                "relevant_positions": self.relevant,
            }
        })
    }
}

pub fn write_jsonl(instances: &[TaskInstance], path: &Path) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| FocalError::io(path, e))?);
    for inst in instances {
        serde_json::to_writer(&mut f, &inst.to_json())?;
        f.write_all(b"\n").map_err(|e| FocalError::io(path, e))?;
    }
    f.flush().map_err(|e| FocalError::io(path, e))
}

fn hex8<R: Rng>(rng: &mut R) -> String {
    format!("{:08x}", rng.gen::<u32>())
}

fn uuid<R: Rng>(rng: &mut R) -> String {
    let b: u128 = rng.gen();
    let h = format!("{b:032x}");
    format!(
        "{}-{}-{}-{}-{}",
        &h[..8],
        &h[8..12],
        &h[12..16],
        &h[16..20],
        &h[20..]
    )
}

fn count_occurrences(hay: &[u8], needle: &[u8]) -> usize {
    hay.windows(needle.len()).filter(|w| *w == needle).count()
}

/// Builds a prompt from byte segments, returning token ids (with leading
/// `BOS`) and the token span of the segment at `mark`.
fn assemble(segments: &[&[u8]], marks: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut prompt = vec![BOS];
    let mut relevant = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        if marks.contains(&i) {
            relevant.extend(prompt.len()..prompt.len() + s.len());
        }
        prompt.extend(tokenize_bytes(s));
    }
    (prompt, relevant)
}

fn check_fits(kind: &str, prompt: usize, answer: usize, context_length: usize) -> Result<()> {
    // the last answer token is predicted, never fed back
    if prompt + answer.saturating_sub(1) > context_length {
        return Err(FocalError::Config(format!(
            "{kind}: prompt of {prompt} tokens plus {answer}-token answer exceeds context {context_length}"
        )));
    }
    Ok(())
}

/// Distinct random 8-hex keys and values.
fn kv_pairs<R: Rng>(rng: &mut R, n_pairs: usize) -> Vec<(String, String)> {
    let mut used = std::collections::HashSet::new();
    let mut fresh = |rng: &mut R| loop {
        let s = hex8(rng);
        if used.insert(s.clone()) {
            return s;
        }
    };
    (0..n_pairs).map(|_| (fresh(rng), fresh(rng))).collect()
}

/// Training form of the recall task: the JSON object followed by
/// `n_queries` distinct `"key": "value"` lines in random order, wrapped in
/// `BOS … EOS`. Every queried value is retrievable from the object.
pub fn kv_document(n_pairs: usize, n_queries: usize, seed: u64) -> Result<Vec<usize>> {
    if n_pairs == 0 || n_queries == 0 || n_queries > n_pairs {
        return Err(FocalError::Config(format!(
            "kv document needs 1 <= n_queries <= n_pairs, got {n_queries} of {n_pairs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = kv_pairs(&mut rng, n_pairs);
    let body: Vec<String> = pairs
        .iter()
        .map(|(k, v)| format!("\"{k}\": \"{v}\""))
        .collect();
    let mut text = format!("{{{}}}\n", body.join(", "));
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng);
    for &q in &order[..n_queries] {
        text.push_str(&body[q]);
        text.push('\n');
    }
    Ok(super::document(text.as_bytes()))
}

/// JSON object of `n_pairs` random 8-hex keys and values followed by a query
/// line in the same `"key": "` form; the answer is the queried value.
pub fn gen_kv_recall(n_pairs: usize, context_length: usize, seed: u64) -> Result<TaskInstance> {
    if n_pairs == 0 {
        return Err(FocalError::Config(
            "kv_recall needs at least one pair".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = kv_pairs(&mut rng, n_pairs);
    let q = rng.gen_range(0..n_pairs);

    let mut segments: Vec<Vec<u8>> = vec![b"{".to_vec()];
    let mut mark = 0;
    for (i, (k, v)) in pairs.iter().enumerate() {
        let sep = if i == 0 { "" } else { ", " };
        segments.push(format!("{sep}\"{k}\": \"").into_bytes());
        if i == q {
            mark = segments.len();
        }
        segments.push(v.clone().into_bytes());
        segments.push(b"\"".to_vec());
    }
    segments.push(format!("}}\n\"{}\": \"", pairs[q].0).into_bytes());
    let refs: Vec<&[u8]> = segments.iter().map(|s| s.as_slice()).collect();
    let (prompt, relevant) = assemble(&refs, &[mark]);
    let answer = tokenize_bytes(pairs[q].1.as_bytes());
    check_fits("kv_recall", prompt.len(), answer.len(), context_length)?;
    debug_assert_eq!(
        count_occurrences(&super::detokenize(&prompt), pairs[q].1.as_bytes()),
        1
    );
    Ok(TaskInstance {
        kind: TaskKind::KvRecall,
        context_length,
        seed,
        knobs: json!({ "n_pairs": n_pairs }),
        prompt,
        answer,
        relevant,
    })
}

const KEY_WORDS: &[&str] = &[
    "amber", "cobalt", "crimson", "ivory", "jade", "onyx", "russet", "scarlet", "teal", "umber",
    "violet", "azure", "coral", "ochre", "slate", "sable",
];
const KEY_NOUNS: &[&str] = &[
    "falcon", "otter", "heron", "badger", "lynx", "marten", "osprey", "raven", "stoat", "wren",
    "bison", "ferret", "gecko", "ibis", "jackal", "newt",
];

/// Filler prose of roughly `haystack_len` tokens with one target needle and
/// `n_distractors` decoys at random sentence boundaries. The query names the
/// target key; the answer is its UUID.
pub fn gen_needle_uuid(
    haystack_len: usize,
    n_distractors: usize,
    seed: u64,
) -> Result<TaskInstance> {
    if n_distractors + 1 > KEY_WORDS.len() * KEY_NOUNS.len() {
        return Err(FocalError::Config(format!(
            "at most {} distractors",
            KEY_WORDS.len() * KEY_NOUNS.len() - 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<String> = KEY_WORDS
        .iter()
        .flat_map(|a| KEY_NOUNS.iter().map(move |b| format!("{a}-{b}")))
        .collect();
    keys.shuffle(&mut rng);
    keys.truncate(n_distractors + 1);
    let mut uuids = Vec::with_capacity(keys.len());
    while uuids.len() < keys.len() {
        let u = uuid(&mut rng);
        if !uuids.contains(&u) {
            uuids.push(u);
        }
    }
    let needles: Vec<String> = keys
        .iter()
        .zip(&uuids)
        .map(|(k, u)| format!(" One of the special magic uuids for {k} is: {u}."))
        .collect();
    let query = format!("\nWhat is the special magic uuid for {}? Answer: ", keys[0]);
    let answer = tokenize_bytes(uuids[0].as_bytes());

    let fixed = 1 + needles.iter().map(|n| n.len()).sum::<usize>() + query.len();
    check_fits("needle_uuid", fixed, answer.len(), haystack_len)?;
    let budget = haystack_len - fixed - (answer.len() - 1);
    let filler = filler_sentences(&mut rng, budget.saturating_sub(1));

    // needles go after uniformly drawn sentence indices
    let mut slots: Vec<usize> = (0..needles.len())
        .map(|_| rng.gen_range(0..=filler.len()))
        .collect();
    let mut order: Vec<usize> = (0..needles.len()).collect();
    order.shuffle(&mut rng);
    let mut placed: Vec<(usize, usize)> = order
        .iter()
        .map(|&n| (slots.pop().expect("one slot per needle"), n))
        .collect();
    placed.sort();

    let mut segments: Vec<&[u8]> = Vec::new();
    let mut mark = usize::MAX;
    let mut p = placed.iter().peekable();
    for i in 0..=filler.len() {
        while let Some(&&(slot, n)) = p.peek() {
            if slot != i {
                break;
            }
            if n == 0 {
                // the UUID itself is the relevant span
                let needle = needles[0].as_bytes();
                let cut = needle.len() - uuids[0].len() - 1;
                segments.push(&needle[..cut]);
                mark = segments.len();
                segments.push(&needle[cut..needle.len() - 1]);
                segments.push(b".");
            } else {
                segments.push(needles[n].as_bytes());
            }
            p.next();
        }
        if i < filler.len() {
            if !segments.is_empty() {
                segments.push(b" ");
            }
            segments.push(filler[i].as_bytes());
        }
    }
    segments.push(query.as_bytes());
    let (prompt, relevant) = assemble(&segments, &[mark]);
    check_fits("needle_uuid", prompt.len(), answer.len(), haystack_len)?;
    Ok(TaskInstance {
        kind: TaskKind::NeedleUuid,
        context_length: haystack_len,
        seed,
        knobs: json!({ "n_distractors": n_distractors }),
        prompt,
        answer,
        relevant,
    })
}

fn nonce_word<R: Rng>(rng: &mut R) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    (0..rng.gen_range(2..=3))
        .map(|_| {
            format!(
                "{}{}",
                ONSETS.choose(rng).expect("non-empty"),
                VOWELS.choose(rng).expect("non-empty")
            )
        })
        .collect()
}

fn lower3<R: Rng>(rng: &mut R) -> String {
    (0..3).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// `n_labels` nonce labels, each tied to a three-letter signature that opens
/// every input of that class. Shots are assigned round-robin and reduced
/// until the prompt fits `context_length`.
pub fn gen_icl_classify(
    n_labels: usize,
    n_shots: usize,
    context_length: usize,
    seed: u64,
) -> Result<TaskInstance> {
    if n_labels < 2 {
        return Err(FocalError::Config(
            "icl_classify needs at least two labels".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<String> = Vec::with_capacity(n_labels);
    let mut sigs: Vec<String> = Vec::with_capacity(n_labels);
    while labels.len() < n_labels {
        let (l, s) = (nonce_word(&mut rng), lower3(&mut rng));
        if !labels.contains(&l) && !sigs.contains(&s) {
            labels.push(l);
            sigs.push(s);
        }
    }
    let mut class_order: Vec<usize> = (0..n_labels).collect();
    class_order.shuffle(&mut rng);
    let all_shots: Vec<(usize, String)> = (0..n_shots)
        .map(|i| {
            let c = class_order[i % n_labels];
            (c, format!("{}{}", sigs[c], lower3(&mut rng)))
        })
        .collect();
    let query_noise = lower3(&mut rng);
    let query_pick: f64 = rng.gen();
    let shuffle_seed: u64 = rng.gen();

    let line = |input: &str, label: &str| format!("input: {input} label: {label}\n");
    let line_lens: Vec<usize> = all_shots
        .iter()
        .map(|(c, input)| line(input, &labels[*c]).len())
        .collect();
    let mut shots = n_shots;
    loop {
        if shots == 0 {
            return Err(FocalError::Config(format!(
                "icl_classify: not even one demonstration fits context {context_length}"
            )));
        }
        let mut demos: Vec<(usize, String)> = all_shots[..shots].to_vec();
        demos.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let present = shots.min(n_labels);
        let qc = class_order[((query_pick * present as f64) as usize).min(present - 1)];
        let query = format!("input: {}{} label: ", sigs[qc], query_noise);
        let answer = tokenize_bytes(labels[qc].as_bytes());

        let mut segments: Vec<Vec<u8>> = Vec::new();
        let mut marks = Vec::new();
        for (c, input) in &demos {
            segments.push(format!("input: {input} label: ").into_bytes());
            if *c == qc {
                marks.push(segments.len());
            }
            segments.push(labels[*c].clone().into_bytes());
            segments.push(b"\n".to_vec());
        }
        segments.push(query.into_bytes());
        let total: usize = 1 + segments.iter().map(|s| s.len()).sum::<usize>();
        if total + answer.len() - 1 > context_length {
            // keep the longest prefix of demonstrations that fits next to
            // this query; the loop re-checks since the query may change
            let demo_bytes: usize = line_lens[..shots].iter().sum();
            let budget = (context_length + 1).saturating_sub(answer.len() + total - demo_bytes);
            let mut fit = 0;
            let mut used = 0;
            while fit < shots && used + line_lens[fit] <= budget {
                used += line_lens[fit];
                fit += 1;
            }
            shots = fit.min(shots - 1);
            continue;
        }
        let refs: Vec<&[u8]> = segments.iter().map(|s| s.as_slice()).collect();
        let (prompt, relevant) = assemble(&refs, &marks);
        return Ok(TaskInstance {
            kind: TaskKind::IclClassify,
            context_length,
            seed,
            knobs: json!({ "n_labels": n_labels, "n_shots": shots, "requested_shots": n_shots }),
            prompt,
            answer,
            relevant,
        });
    }
}

/// A random lowercase string to be repeated after a newline.
pub fn gen_copy(length: usize, context_length: usize, seed: u64) -> Result<TaskInstance> {
    if length == 0 {
        return Err(FocalError::Config("copy length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: String = (0..length)
        .map(|_| rng.gen_range(b'a'..=b'z') as char)
        .collect();
    let (prompt, relevant) = assemble(&[s.as_bytes(), b"\n"], &[0]);
    let answer = tokenize_bytes(s.as_bytes());
    check_fits("copy", prompt.len(), answer.len(), context_length)?;
    Ok(TaskInstance {
        kind: TaskKind::Copy,
        context_length,
        seed,
        knobs: json!({ "length": length }),
        prompt,
        answer,
        relevant,
    })
}

/// Generates with the kind's main knob; `difficulty` is the pair, distractor,
/// label or length count respectively.
pub fn generate(
    kind: TaskKind,
    difficulty: usize,
    context_length: usize,
    seed: u64,
) -> Result<TaskInstance> {
    match kind {
        TaskKind::KvRecall => gen_kv_recall(difficulty, context_length, seed),
        TaskKind::NeedleUuid => gen_needle_uuid(context_length, difficulty, seed),
        TaskKind::IclClassify => gen_icl_classify(difficulty, context_length, context_length, seed),
        TaskKind::Copy => gen_copy(difficulty, context_length, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub seed: u64,
    pub expected: String,
    pub predicted: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub accuracy: f64,
    pub records: Vec<InstanceRecord>,
}

/// Greedy continuation of `prompt` for `n` tokens.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    prompt: &[usize],
    n: usize,
) -> Result<Vec<usize>> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &tokens)?.logits;
        let shape = g.shape(logits).to_vec();
        let last = &g.value(logits)[(shape[0] - 1) * shape[1]..];
        let next = last
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// Exact match of the greedily decoded answer span.
pub fn score_task<T: Scalar>(model: &Model<T>, instances: &[TaskInstance]) -> Result<TaskScore> {
    if instances.is_empty() {
        return Err(FocalError::Data("no task instances to score".into()));
    }
    let mut records = Vec::with_capacity(instances.len());
    for inst in instances {
        check_fits(
            "score_task",
            inst.prompt.len(),
            inst.answer.len(),
            model.config.max_context,
        )?;
        let predicted = greedy_decode(model, &inst.prompt, inst.answer.len())?;
        records.push(InstanceRecord {
            seed: inst.seed,
            expected: super::detokenize_lossy(&inst.answer),
            predicted: super::detokenize_lossy(&predicted),
            correct: predicted == inst.answer,
        });
    }
    let accuracy = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
    Ok(TaskScore { accuracy, records })
}
