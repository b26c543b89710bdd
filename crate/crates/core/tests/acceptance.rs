//! Acceptance suite: one PASS/FAIL line per criterion, each timed against
//! its runtime budget. Runs without the libtest harness so the report is
//! always printed.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::net::TcpListener;
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use charprobe::align::{align_slices, apply_edits, merge_edits};
use charprobe::bridge::{
    decode_query, decode_response, encode_response, serve_tcp, BridgeClient, ClientOptions, Endpoint, OraclePredictor,
    ProbeQuery, ProbeResponse, ProtocolError, UniformPredictor,
};
use charprobe::dataset::{
    build_instances, compute_stats, parse_pairs, BuildOptions, DatasetStats, ProbingInstance, RejectKind, Task,
};
use charprobe::eval::{macro_average, present, run_probe, Metric, MetricTable, ProbeOptions};
use charprobe::mask::{
    corrupt, generate_corpus, line_rng, mask_line, select_clm, MaskingConfig, Segmentation, Strategy,
};
use charprobe::segment::{segment_chars, Lexicon};
use charprobe::text::{LengthBucket, Sentence, Vocab, MASK};
use common::oracle::{all_strings, min_script_cost};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// A pool of CJK characters starting at U+4E00.
fn cjk(n: usize) -> Vec<char> {
    (0x4E00u32..).filter_map(char::from_u32).take(n).collect()
}

// ---------------------------------------------------------------------------

fn macro_average_golden() -> Outcome {
    // (bucket values p@1, p@10 for Length = 1, 2, >= 3) -> published averages
    #[rustfmt::skip]
    let rows: [(&str, [f64; 6], &str, &str); 8] = [
        ("insertion BERT-base",       [76.0, 97.0, 37.2, 76.0, 14.4, 50.1], "42.5", "74.4"),
        ("insertion Ours-clm",        [77.2, 97.3, 36.7, 74.4, 13.3, 49.3], "42.4", "73.7"),
        ("insertion Ours-wwm",        [56.6, 80.1, 42.9, 79.1, 19.3, 54.0], "39.6", "71.1"),
        ("insertion Ours-clm-wwm",    [71.3, 95.1, 42.6, 80.9, 20.6, 53.0], "44.8", "76.3"),
        ("replacement BERT-base",     [66.0, 95.1, 21.0, 58.2, 10.1, 46.1], "32.4", "66.5"),
        ("replacement Ours-clm",      [67.4, 96.6, 20.4, 58.3,  7.4, 36.9], "31.7", "63.9"),
        ("replacement Ours-wwm",      [34.8, 68.2, 25.7, 65.3,  7.4, 35.2], "22.6", "56.2"),
        ("replacement Ours-clm-wwm",  [59.2, 93.7, 26.5, 66.4, 12.4, 41.6], "32.7", "67.2"),
    ];
    let mut checked = 0;
    for (name, v, p1, p10) in rows {
        for (metric, offset, expected) in [("p@1", 0, p1), ("p@10", 1, p10)] {
            let got = present(Some(macro_average(&[v[offset], v[offset + 2], v[offset + 4]])));
            ensure(got == expected, || {
                format!("{name} {metric}: got {got}, published {expected}")
            })?;
            checked += 1;
        }
    }
    ensure(checked == 16, || format!("checked {checked} averages"))?;

    // the same numbers through MetricTable: a cell of 1000 positions holds
    // any one-decimal percentage exactly
    let mut table = MetricTable::default();
    let v = rows[0].1;
    for (i, bucket) in LengthBucket::ALL.into_iter().enumerate() {
        let counts = charprobe::eval::CellCounts {
            total: 1000,
            hits_at_1: (v[2 * i] * 10.0).round() as u64,
            hits_at_10: (v[2 * i + 1] * 10.0).round() as u64,
        };
        table.set_cell(Task::Insertion, bucket, counts);
    }
    ensure(present(table.average(Task::Insertion, Metric::P1)) == "42.5", || {
        "table p@1 average".into()
    })?;
    ensure(present(table.average(Task::Insertion, Metric::P10)) == "74.4", || {
        "table p@10 average".into()
    })
}

// ---------------------------------------------------------------------------

fn random_instances(n: usize, seed: u64) -> Vec<ProbingInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet = cjk(300);
    (0..n)
        .map(|i| {
            let pair = format!("s{}", rng.gen_range(0..n / 3));
            let task = if rng.gen_bool(0.5) {
                Task::Replacement
            } else {
                Task::Insertion
            };
            // skewed towards short spans, like real data
            let k = match rng.gen_range(0..10) {
                0..=5 => 1,
                6..=8 => 2,
                _ => rng.gen_range(3..=7),
            };
            let len = rng.gen_range(k..k + 30);
            let chars: Vec<char> = (0..len).map(|_| *alphabet[..150].choose(&mut rng).unwrap()).collect();
            let position = match task {
                Task::Replacement => rng.gen_range(0..=len - k),
                Task::Insertion => rng.gen_range(0..=len),
            };
            // disjoint from the sentence alphabet, so replacements never restate the source
            let gold = (0..k).map(|_| *alphabet[150..].choose(&mut rng).unwrap()).collect();
            ProbingInstance::new(
                format!("{pair}#{i}"),
                Sentence::new(pair, chars).unwrap(),
                task,
                position,
                gold,
            )
            .unwrap()
        })
        .collect()
}

fn stats_identities() -> Outcome {
    // published dataset table: columns are replacement, insertion, total
    let buckets: [[u32; 3]; 3] = [[5522, 4555, 10077], [2004, 1337, 3341], [305, 383, 688]];
    let spans: [u32; 3] = [7831, 6275, 14106];
    let sentences: [u32; 3] = [5727, 4721, 10448];
    let chars: [u32; 3] = [10542, 8533, 19075];
    for col in 0..3 {
        let sum: u32 = buckets.iter().map(|row| row[col]).sum();
        ensure(sum == spans[col], || {
            format!("column {col}: buckets sum to {sum}, spans {}", spans[col])
        })?;
        // every span has at least its bucket's minimum length
        let floor: u32 = buckets.iter().zip(1..).map(|(row, min)| row[col] * min).sum();
        ensure(floor <= chars[col], || {
            format!("column {col}: {floor} chars needed, {} published", chars[col])
        })?;
    }
    for row in buckets.iter().chain([&spans, &sentences, &chars]) {
        ensure(row[0] + row[1] == row[2], || format!("row {row:?} does not add up"))?;
    }

    for seed in 0..3 {
        let instances = random_instances(10_000, seed);
        let stats = compute_stats(&instances);
        for task in Task::ALL {
            let of_task: Vec<&ProbingInstance> = instances.iter().filter(|i| i.task == task).collect();
            let mut buckets = [0usize; 3];
            for inst in &of_task {
                buckets[inst.k.min(3) - 1] += 1;
            }
            for (b, bucket) in LengthBucket::ALL.into_iter().enumerate() {
                ensure(stats.bucket_count(task, bucket) == buckets[b], || {
                    format!("{task} {bucket} bucket count")
                })?;
            }
            let spans: usize = LengthBucket::ALL.iter().map(|&b| stats.bucket_count(task, b)).sum();
            ensure(spans == stats.span_count(task) && spans == of_task.len(), || {
                format!("{task} span total")
            })?;
            let chars: usize = of_task.iter().map(|i| i.gold.len()).sum();
            ensure(stats.char_count(task) == chars, || format!("{task} char count"))?;
            let min_chars = buckets[0] + 2 * buckets[1] + 3 * buckets[2];
            ensure(stats.char_count(task) >= min_chars, || {
                format!("{task} char lower bound")
            })?;
            let sentences: HashSet<&str> = of_task.iter().map(|i| i.sentence.id()).collect();
            ensure(stats.sentence_count(task) == sentences.len(), || {
                format!("{task} sentence count")
            })?;
        }
        ensure(stats.total_spans() == instances.len(), || "total spans".into())?;
        ensure(
            stats.total_chars() == instances.iter().map(|i| i.k).sum::<usize>(),
            || "total chars".into(),
        )?;
        ensure(
            stats.total_sentences() == Task::ALL.iter().map(|&t| stats.sentence_count(t)).sum::<usize>(),
            || "total sentences".into(),
        )?;

        // order and chunking do not matter
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut shuffled = instances.clone();
        shuffled.shuffle(&mut rng);
        ensure(compute_stats(&shuffled) == stats, || "stats depend on order".into())?;
        let mut merged = DatasetStats::default();
        for chunk in shuffled.chunks(777) {
            merged.merge(&compute_stats(chunk));
        }
        ensure(merged == stats, || "chunked merge differs".into())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn aligner_oracle() -> Outcome {
    let strings = all_strings(&['a', 'b', 'c', 'd'], 5);
    let mut pairs = 0usize;
    for src in &strings {
        for tgt in &strings {
            let ops = align_slices(src, tgt).map_err(|e| e.to_string())?;
            let cost: u32 = ops.iter().map(|o| o.cost()).sum();
            let best = min_script_cost(src, tgt);
            ensure(cost == best, || {
                format!("{src:?} -> {tgt:?}: DP cost {cost}, exhaustive {best}")
            })?;
            let spans = merge_edits(src, tgt, &ops).map_err(|e| e.to_string())?;
            let replayed = apply_edits(src, &spans).map_err(|e| e.to_string())?;
            ensure(&replayed == tgt, || {
                format!("{src:?} -> {tgt:?}: replay gave {replayed:?}")
            })?;
            pairs += 1;
        }
    }
    println!("    {pairs} pairs, all lengths 1..=5 over a 4-letter alphabet");
    Ok(())
}

// ---------------------------------------------------------------------------

fn masker_statistics() -> Outcome {
    let alphabet = cjk(5000);
    let vocab = Vocab::from_chars(alphabet.iter().copied());
    let cfg = MaskingConfig {
        strategy: Strategy::Clm,
        seed: 7,
        ..MaskingConfig::default()
    };

    // exact CLM count
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10_000u64 {
        let chars: Vec<char> = (0..512).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
        let sentence = Sentence::new(i.to_string(), chars).unwrap();
        let picked = select_clm(&sentence, &cfg, &mut line_rng(cfg.seed, i));
        let distinct: BTreeSet<usize> = picked.iter().copied().collect();
        ensure(picked.len() == 76 && distinct.len() == 76, || {
            format!("sequence {i}: {} positions", picked.len())
        })?;
        ensure(picked.iter().all(|&p| p < 512), || "position out of range".into())?;
    }

    // WWM atomicity against boundaries known by construction
    let wwm = MaskingConfig {
        strategy: Strategy::Wwm,
        ..cfg
    };
    for i in 0..10_000u64 {
        let words: Vec<String> = (0..rng.gen_range(1..60))
            .map(|_| {
                (0..rng.gen_range(1..=4))
                    .map(|_| *alphabet.choose(&mut rng).unwrap())
                    .collect()
            })
            .collect();
        let line = words.join(" ");
        let mut owner = Vec::new();
        for (w, word) in words.iter().enumerate() {
            owner.extend(std::iter::repeat_n(w, word.chars().count()));
        }
        let out = mask_line(&line, i, &wwm, &vocab, Segmentation::Presegmented).map_err(|e| e.to_string())?;
        ensure(out.len() == 1, || "short line was split".into())?;
        let labelled: BTreeSet<usize> = out[0].labels.keys().map(|slot| slot - 1).collect();
        let touched: BTreeSet<usize> = labelled.iter().map(|&p| owner[p]).collect();
        for w in touched {
            let whole = owner
                .iter()
                .enumerate()
                .filter(|(_, &o)| o == w)
                .all(|(p, _)| labelled.contains(&p));
            ensure(whole, || format!("line {i}: word {w} partially masked"))?;
        }
        let target = wwm.target(owner.len());
        ensure(labelled.len() >= target && labelled.len() < target + 4, || {
            format!("line {i}: {} masked, target {target}", labelled.len())
        })?;
    }
    // and against lexicon segmentation
    let lexicon: Lexicon = ["中国", "人民", "银行", "中国人", "研究生命", "生命", "起源"]
        .into_iter()
        .collect();
    let pieces: Vec<&str> = vec!["中国", "人民", "银行", "研究", "生命", "起源", "的", "了"];
    for i in 0..2_000u64 {
        let line: String = (0..rng.gen_range(1..40))
            .map(|_| *pieces.choose(&mut rng).unwrap())
            .collect();
        let chars: Vec<char> = line.chars().collect();
        let spans = segment_chars(&chars, &lexicon);
        let out = mask_line(&line, i, &wwm, &vocab, Segmentation::Lexicon(&lexicon)).map_err(|e| e.to_string())?;
        let labelled: BTreeSet<usize> = out[0].labels.keys().map(|slot| slot - 1).collect();
        for &(start, len) in spans.spans() {
            let hit = (start..start + len).filter(|p| labelled.contains(p)).count();
            ensure(hit == 0 || hit == len, || {
                format!("lexicon line {i}: word at {start} split")
            })?;
        }
    }

    // 80/10/10 over 100k selections
    let (mut masked, mut random, mut kept, mut total) = (0usize, 0usize, 0usize, 0usize);
    let mut ordinal = 0u64;
    while total < 100_000 {
        let chars: Vec<char> = (0..200).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
        let sentence = Sentence::new("c", chars.clone()).unwrap();
        let mut line = line_rng(99, ordinal);
        ordinal += 1;
        let picked = select_clm(&sentence, &cfg, &mut line);
        let inst = corrupt(&chars, &picked, Strategy::Clm, &cfg, &vocab, &mut line).map_err(|e| e.to_string())?;
        for (&slot, &original) in &inst.labels {
            total += 1;
            let token = &inst.tokens[slot];
            if token == MASK {
                masked += 1;
            } else if token.chars().eq(std::iter::once(original)) {
                kept += 1;
            } else {
                random += 1;
            }
        }
    }
    let frac = |n: usize| n as f64 / total as f64;
    println!(
        "    corruption over {total} selections: mask {:.4}, random {:.4}, keep {:.4}",
        frac(masked),
        frac(random),
        frac(kept)
    );
    ensure((frac(masked) - 0.8).abs() <= 0.01, || {
        format!("mask fraction {}", frac(masked))
    })?;
    ensure((frac(random) - 0.1).abs() <= 0.01, || {
        format!("random fraction {}", frac(random))
    })?;
    ensure((frac(kept) - 0.1).abs() <= 0.01, || {
        format!("keep fraction {}", frac(kept))
    })?;

    // worker count does not change the bytes
    let mut corpus = String::new();
    for i in 0..20_000 {
        let len = if i % 997 == 0 { 1200 } else { rng.gen_range(0..80) };
        let line: String = (0..len).map(|_| *pieces.choose(&mut rng).unwrap()).collect::<String>();
        corpus.push_str(&line);
        corpus.push('\n');
    }
    let mixed = MaskingConfig {
        strategy: Strategy::Mixed,
        ..cfg
    };
    let run = |workers: usize| -> Result<(Vec<u8>, charprobe::mask::CorpusSummary), String> {
        let mut out = Vec::new();
        let summary = generate_corpus(
            corpus.as_bytes(),
            &mut out,
            &mixed,
            &vocab,
            Segmentation::Lexicon(&lexicon),
            workers,
        )
        .map_err(|e| e.to_string())?;
        Ok((out, summary))
    };
    let (one, summary) = run(1)?;
    let (eight, _) = run(8)?;
    ensure(one == eight, || "1-worker and 8-worker corpora differ".into())?;
    ensure(!one.is_empty(), || "empty corpus".into())?;
    let share = summary.clm as f64 / (summary.clm + summary.wwm) as f64;
    println!(
        "    mixed strategy: {} clm / {} wwm pieces (share {share:.3})",
        summary.clm, summary.wwm
    );
    ensure((share - 0.5).abs() <= 0.02, || format!("mixed clm share {share}"))?;

    // an empty lexicon turns WWM into per-character selection
    let empty = Lexicon::new();
    let clm_cfg = MaskingConfig {
        strategy: Strategy::Clm,
        ..cfg
    };
    for i in 0..500u64 {
        let line: String = (0..rng.gen_range(1..100))
            .map(|_| *alphabet.choose(&mut rng).unwrap())
            .collect();
        let a = mask_line(&line, i, &wwm, &vocab, Segmentation::Lexicon(&empty)).map_err(|e| e.to_string())?;
        let b = mask_line(&line, i, &clm_cfg, &vocab, Segmentation::Lexicon(&empty)).map_err(|e| e.to_string())?;
        ensure(a[0].labels.len() == b[0].labels.len(), || {
            format!("line {i}: empty-lexicon WWM count differs from CLM")
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

/// Corrected sentences with 1-3 planted insertion, replacement, redundant
/// or ordering errors, as TSV.
fn synthetic_pairs(n: usize, alphabet: &[char], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tsv = String::new();
    for p in 0..n {
        let corrected: Vec<char> = (0..rng.gen_range(12..40))
            .map(|_| *alphabet.choose(&mut rng).unwrap())
            .collect();
        let mut erroneous = Vec::new();
        let mut i = 0;
        let mut edits = rng.gen_range(1..=3);
        while i < corrected.len() {
            if edits > 0 && i > 0 && rng.gen_bool(0.12) {
                edits -= 1;
                let span = match rng.gen_range(0..10) {
                    0..=4 => 1,
                    5..=7 => 2,
                    _ => rng.gen_range(3..=4),
                }
                .min(corrected.len() - i);
                match rng.gen_range(0..10) {
                    // missing characters: an insertion instance
                    0..=3 => {}
                    // wrong characters: a replacement instance
                    4..=7 => erroneous.extend((0..span).map(|_| *alphabet.choose(&mut rng).unwrap())),
                    // an extra character: redundant, dropped
                    8 => {
                        erroneous.push(*alphabet.choose(&mut rng).unwrap());
                        erroneous.extend(&corrected[i..i + span]);
                    }
                    _ => erroneous.extend(corrected[i..i + span].iter().rev()),
                }
                i += span;
                // keep edits apart
                let gap = (i + 2).min(corrected.len());
                erroneous.extend(&corrected[i..gap]);
                i = gap;
            } else {
                erroneous.push(corrected[i]);
                i += 1;
            }
        }
        if erroneous.is_empty() {
            erroneous.push(corrected[0]);
        }
        let e: String = erroneous.into_iter().collect();
        let c: String = corrected.into_iter().collect();
        tsv.push_str(&format!("pair{p}\t{e}\t{c}\n"));
    }
    tsv
}

fn spawn_server(predictor: Arc<dyn charprobe::bridge::Predictor>) -> std::io::Result<Endpoint> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::spawn(move || serve_tcp(listener, predictor));
    Ok(Endpoint::Tcp(addr.to_string()))
}

fn end_to_end() -> Outcome {
    let alphabet = cjk(5000);
    let tsv = synthetic_pairs(1000, &alphabet, 2024);
    let parsed = parse_pairs(tsv.as_bytes()).map_err(|e| e.to_string())?;
    ensure(parsed.errors.is_empty() && parsed.pairs.len() == 1000, || {
        format!("{} bad records", parsed.errors.len())
    })?;
    let built = build_instances(&parsed.pairs, BuildOptions::default()).map_err(|e| e.to_string())?;
    let rejected: usize = [RejectKind::Redundant, RejectKind::Ordering, RejectKind::Degenerate]
        .iter()
        .map(|&k| built.rejects.total(k))
        .sum();
    ensure(built.instances.len() + rejected == built.spans_found, || {
        format!(
            "{} emitted + {rejected} dropped != {} spans",
            built.instances.len(),
            built.spans_found
        )
    })?;
    for task in Task::ALL {
        for bucket in LengthBucket::ALL {
            ensure(built.stats.bucket_count(task, bucket) > 0, || {
                format!("no {task} {bucket} instances")
            })?;
        }
    }
    println!(
        "    {} instances from {} spans ({} redundant, {} ordering, {} degenerate dropped)",
        built.instances.len(),
        built.spans_found,
        built.rejects.total(RejectKind::Redundant),
        built.rejects.total(RejectKind::Ordering),
        built.rejects.total(RejectKind::Degenerate)
    );

    let opts = ProbeOptions::default();
    let client_opts = ClientOptions::default();

    let oracle = spawn_server(Arc::new(OraclePredictor::new(&built.instances))).map_err(|e| e.to_string())?;
    let mut client = BridgeClient::connect(&oracle, client_opts).map_err(|e| e.to_string())?;
    let run = run_probe(&built.instances, &mut client, None, &opts).map_err(|e| e.to_string())?;
    ensure(run.errors.is_empty() && run.skipped.is_empty(), || {
        format!("{} errors, {} skipped", run.errors.len(), run.skipped.len())
    })?;
    let positions: usize = built.instances.iter().map(|i| i.k).sum();
    ensure(run.records.len() == positions, || {
        "one record per gold character".into()
    })?;
    for task in Task::ALL {
        for bucket in LengthBucket::ALL {
            for metric in Metric::ALL {
                let v = run.table.value(task, bucket, metric);
                ensure(v == Some(100.0), || {
                    format!("oracle {task} {bucket} {}: {v:?}", metric.as_str())
                })?;
            }
        }
    }

    let uniform = spawn_server(Arc::new(UniformPredictor::new(alphabet.clone(), 11))).map_err(|e| e.to_string())?;
    let mut client = BridgeClient::connect(&uniform, client_opts).map_err(|e| e.to_string())?;
    let run = run_probe(&built.instances, &mut client, None, &opts).map_err(|e| e.to_string())?;
    ensure(run.errors.is_empty(), || format!("{} errors", run.errors.len()))?;
    let p = 10.0 / alphabet.len() as f64;
    for task in Task::ALL {
        for bucket in LengthBucket::ALL {
            let cell = run.table.cell(task, bucket);
            let n = cell.total as f64;
            let observed = cell.hits_at_10 as f64 / n;
            let bound = 3.0 * (p * (1.0 - p) / n).sqrt();
            ensure((observed - p).abs() <= bound, || {
                format!("uniform {task} {bucket} p@10 = {observed:.5} outside {p} ± {bound:.5} (n = {n})")
            })?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn random_query(rng: &mut ChaCha8Rng, n: usize, alphabet: &[char]) -> ProbeQuery {
    let len = rng.gen_range(1..30);
    let mut tokens: Vec<String> = vec!["[CLS]".into()];
    tokens.extend((0..len).map(|_| alphabet.choose(rng).unwrap().to_string()));
    tokens.push("[SEP]".into());
    let masks = rng.gen_range(1..=len.min(4));
    let mut masked_positions = rand::seq::index::sample(rng, len, masks).into_vec();
    masked_positions.iter_mut().for_each(|p| *p += 1);
    masked_positions.sort_unstable();
    for &p in &masked_positions {
        tokens[p] = MASK.into();
    }
    // ids with characters that need escaping
    let id = match n % 3 {
        0 => format!("q{n}"),
        1 => format!("句子-{n}"),
        _ => format!("q\"{n}\\x"),
    };
    ProbeQuery {
        id,
        tokens,
        masked_positions,
        k: rng.gen_range(1..=20),
    }
}

fn random_response(rng: &mut ChaCha8Rng, query: &ProbeQuery, alphabet: &[char]) -> ProbeResponse {
    let predictions = query
        .masked_positions
        .iter()
        .map(|_| {
            let mut score = 1.0f64;
            alphabet
                .choose_multiple(rng, query.k)
                .map(|&c| {
                    // ties allowed
                    if rng.gen_bool(0.7) {
                        score *= rng.gen_range(0.1..1.0);
                    }
                    (c, score)
                })
                .collect()
        })
        .collect();
    ProbeResponse {
        id: query.id.clone(),
        predictions,
    }
}

/// Reads `depth` queries (or whatever is left), answers them in shuffled
/// order, repeats.
fn mock_server(listener: TcpListener, total: usize, depth: usize, seed: u64, sent: mpsc::Sender<ProbeResponse>) {
    let alphabet = cjk(200);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stream, _) = listener.accept().unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = BufWriter::new(stream);
    let mut remaining = total;
    while remaining > 0 {
        let batch = depth.min(remaining);
        let mut queries = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap() == 0 {
                return;
            }
            queries.push(decode_query(line.trim_end()).unwrap());
        }
        remaining -= batch;
        queries.shuffle(&mut rng);
        for q in &queries {
            let resp = random_response(&mut rng, q, &alphabet);
            writeln!(writer, "{}", encode_response(&resp)).unwrap();
            sent.send(resp).unwrap();
        }
        writer.flush().unwrap();
    }
}

fn fuzz_session(total: usize, depth: usize, seed: u64) -> Outcome {
    let alphabet = cjk(200);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries: Vec<ProbeQuery> = (0..total).map(|n| random_query(&mut rng, n, &alphabet)).collect();
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let (tx, rx) = mpsc::channel();
    let server = thread::spawn(move || mock_server(listener, total, depth, seed, tx));
    let opts = ClientOptions {
        max_in_flight: depth,
        timeout: Duration::from_secs(20),
    };
    let mut client = BridgeClient::connect(&Endpoint::Tcp(addr.to_string()), opts).map_err(|e| e.to_string())?;
    let outcomes = client.run(&queries);
    server.join().map_err(|_| "mock server panicked".to_string())?;
    let expected: HashMap<String, ProbeResponse> = rx.into_iter().map(|r| (r.id.clone(), r)).collect();
    ensure(outcomes.len() == total, || {
        format!("{} outcomes for {total} queries", outcomes.len())
    })?;
    let ids: HashSet<&str> = outcomes.iter().map(|o| o.id.as_str()).collect();
    ensure(ids.len() == total, || "repeated outcome id".into())?;
    for (q, o) in queries.iter().zip(&outcomes) {
        ensure(q.id == o.id, || "outcomes out of query order".into())?;
        let resp = o.result.as_ref().map_err(|e| format!("{}: {e}", q.id))?;
        ensure(Some(resp) == expected.get(&q.id), || {
            format!("{}: response altered: {resp:?} vs {:?}", q.id, expected.get(&q.id))
        })?;
    }
    ensure(client.orphans().is_empty(), || "unexpected orphans".into())
}

fn mutations() -> Vec<(&'static str, String)> {
    let ok = r#"{"id":"m","predictions":[[["甲",0.5],["乙",0.3],["丙",0.1]],[["丁",0.9],["戊",0.9],["己",0.2]]]}"#;
    let with = |preds: &str| format!(r#"{{"id":"m","predictions":{preds}}}"#);
    let good_list = r#"[["丁",0.9],["戊",0.9],["己",0.2]]"#;
    vec![
        ("truncated", ok[..ok.len() / 2].to_string()),
        ("wrong id", ok.replace(r#""id":"m""#, r#""id":"n""#)),
        ("missing id", ok.replace(r#""id":"m","#, "")),
        ("numeric id", ok.replace(r#""id":"m""#, r#""id":7"#)),
        ("not json", "hello".to_string()),
        ("empty object", "{}".to_string()),
        ("missing predictions", r#"{"id":"m"}"#.to_string()),
        ("predictions not a list", with(r#"{"a":1}"#)),
        ("too few lists", with(&format!("[{good_list}]"))),
        (
            "too many lists",
            with(&format!("[{good_list},{good_list},{good_list}]")),
        ),
        (
            "fewer than k",
            with(&format!(r#"[[["甲",0.5],["乙",0.3]],{good_list}]"#)),
        ),
        (
            "more than k",
            with(&format!(
                r#"[[["甲",0.5],["乙",0.3],["丙",0.1],["丁",0.0]],{good_list}]"#
            )),
        ),
        (
            "duplicate candidate",
            with(&format!(r#"[[["甲",0.5],["甲",0.3],["丙",0.1]],{good_list}]"#)),
        ),
        (
            "increasing scores",
            with(&format!(r#"[[["甲",0.1],["乙",0.3],["丙",0.5]],{good_list}]"#)),
        ),
        (
            "multi-character candidate",
            with(&format!(r#"[[["甲乙",0.5],["乙",0.3],["丙",0.1]],{good_list}]"#)),
        ),
        (
            "special-token candidate",
            with(&format!(r#"[[["[MASK]",0.5],["乙",0.3],["丙",0.1]],{good_list}]"#)),
        ),
        (
            "empty candidate",
            with(&format!(r#"[[["",0.5],["乙",0.3],["丙",0.1]],{good_list}]"#)),
        ),
        (
            "non-numeric score",
            with(&format!(r#"[[["甲","high"],["乙",0.3],["丙",0.1]],{good_list}]"#)),
        ),
        (
            "candidate not a pair",
            with(&format!(r#"[[["甲"],["乙",0.3],["丙",0.1]],{good_list}]"#)),
        ),
        ("list not an array", with(&format!(r#"["甲乙丙",{good_list}]"#))),
        (
            "backend error line",
            r#"{"id":"m","error":"model crashed"}"#.to_string(),
        ),
    ]
}

fn protocol_fuzz() -> Outcome {
    let mut exchanges = 0;
    for (total, depth, seed) in [(1100, 1024, 1), (300, 37, 2), (300, 3, 3), (100, 1, 4)] {
        fuzz_session(total, depth, seed).map_err(|e| format!("session depth {depth}: {e}"))?;
        exchanges += total;
    }
    println!("    {exchanges} valid exchanges, pipelining depth up to 1024");

    let query = ProbeQuery {
        id: "m".into(),
        tokens: ["[CLS]", "人", MASK, "是", MASK, "[SEP]"]
            .iter()
            .map(|t| t.to_string())
            .collect(),
        masked_positions: vec![2, 4],
        k: 3,
    };
    let ok = r#"{"id":"m","predictions":[[["甲",0.5],["乙",0.3],["丙",0.1]],[["丁",0.9],["戊",0.9],["己",0.2]]]}"#;
    decode_response(&query, ok).map_err(|e| format!("baseline response rejected: {e}"))?;
    let list = mutations();
    for (name, line) in &list {
        ensure(decode_response(&query, line).is_err(), || {
            format!("decoder accepted mutation {name:?}")
        })?;
        // through the client: the mutated line followed by end of stream
        let reader = Cursor::new(format!("{line}\n").into_bytes());
        let mut client = BridgeClient::from_streams(reader, std::io::sink(), ClientOptions::default());
        let outcomes = client.run(std::slice::from_ref(&query));
        ensure(outcomes.len() == 1, || format!("{name}: {} outcomes", outcomes.len()))?;
        match &outcomes[0].result {
            Ok(_) => return Err(format!("client accepted mutation {name:?}")),
            // the unattributable line must have been recorded, not dropped
            Err(ProtocolError::Disconnected(_)) => ensure(client.orphans().len() == 1, || {
                format!("{name}: line neither attributed nor recorded")
            })?,
            Err(_) => {}
        }
    }
    // a second answer to an id is an orphan, not a second outcome
    let other = ProbeQuery {
        id: "m2".into(),
        ..query.clone()
    };
    let ok2 = ok.replace(r#""id":"m""#, r#""id":"m2""#);
    let replies = Cursor::new(format!("{ok}\n{ok}\n{ok2}\n").into_bytes());
    let mut client = BridgeClient::from_streams(replies, std::io::sink(), ClientOptions::default());
    let outcomes = client.run(&[query.clone(), other]);
    ensure(outcomes.len() == 2 && outcomes.iter().all(|o| o.result.is_ok()), || {
        "duplicate answer disturbed outcomes".into()
    })?;
    ensure(
        matches!(client.orphans(), [ProtocolError::UnknownId(id)] if id == "m"),
        || format!("duplicate answer not recorded: {:?}", client.orphans()),
    )?;
    println!("    {} malformed-response mutations rejected", list.len());
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 6] = [
        (
            "macro-average golden test",
            Duration::from_secs(1),
            macro_average_golden,
        ),
        (
            "dataset statistics identities",
            Duration::from_secs(5),
            stats_identities,
        ),
        ("aligner oracle equivalence", Duration::from_secs(60), aligner_oracle),
        ("masker statistics", Duration::from_secs(120), masker_statistics),
        ("end-to-end oracle round trip", Duration::from_secs(120), end_to_end),
        ("protocol fuzz", Duration::from_secs(30), protocol_fuzz),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut results = BTreeMap::new();
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let verdict = match (&outcome, elapsed <= budget) {
            (Ok(()), true) => "PASS".to_string(),
            (Ok(()), false) => format!("FAIL (over budget of {budget:?})"),
            (Err(e), _) => format!("FAIL ({e})"),
        };
        println!("{verdict:<4} {name} [{:.2?} / {budget:?}]", elapsed);
        results.insert(name, verdict == "PASS");
    }
    let failed = results.values().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
