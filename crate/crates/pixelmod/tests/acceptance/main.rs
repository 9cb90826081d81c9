//! Release acceptance: one line per criterion, non-zero exit if any fails.

mod oracles;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Cursor;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use image::codecs::jpeg::JpegEncoder;
use pixelmod::binary_index::{BinaryIndex, IndexConfig, IndexError, IvfParams, SearchHit};
use pixelmod::calibration::{evaluate, grid_search, synthetic_gt, GridSpec, SyntheticGtSpec};
use pixelmod::corpus_store::{CorpusStore, StoreOptions};
use pixelmod::hashing::{decode_image, hamming, hash_image, pdqhash256, phash64, HashKind, PerceptualHash};
use pixelmod::ocr::{LabelCache, OcrError, OcrProvider, OcrRequest, ProviderCapabilities, ProviderOutput, SidecarProvider};
use pixelmod::pipeline::{Decision, Pipeline, PipelineConfig};
use pixelmod::stories::{cluster, moderation_report, ClusterParams, ImageStory, PolicyCategory};
use pixelmod::synth::{planted_corpus, PlantedSpec, Role};
use pixelmod::text_similarity::{similarity, TextMetric};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<(String, [u64; 4])> {
    (0..n).map(|i| (format!("r{i:06}"), rng.random())).collect()
}

fn flip(rng: &mut ChaCha8Rng, mut w: [u64; 4], bits: u32) -> [u64; 4] {
    let mut picked = BTreeSet::new();
    while picked.len() < bits as usize {
        picked.insert(rng.random_range(0..256u32));
    }
    for b in picked {
        w[b as usize / 64] ^= 1 << (b % 64);
    }
    w
}

fn pdq(w: [u64; 4]) -> PerceptualHash {
    PerceptualHash::pdq(w, 100)
}

fn as_pairs(hits: &[SearchHit]) -> Vec<(u32, String)> {
    hits.iter().map(|h| (h.distance, h.image_id.clone())).collect()
}

/// 50 uniform queries plus 50 within 0..=100 flips of a stored record, so
/// every radius sees both empty and populated results.
fn mixed_queries(rng: &mut ChaCha8Rng, records: &[(String, [u64; 4])]) -> Vec<[u64; 4]> {
    let mut out: Vec<[u64; 4]> = (0..50).map(|_| rng.random()).collect();
    for _ in 0..50 {
        let base = records[rng.random_range(0..records.len())].1;
        let bits = rng.random_range(0..=100);
        out.push(flip(rng, base, bits));
    }
    out
}

fn flat_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1A7);
    let records = random_records(&mut rng, 10_000);
    let queries = mixed_queries(&mut rng, &records);
    let start = Instant::now();
    let mut idx = BinaryIndex::flat(HashKind::Pdq256);
    for (id, w) in &records {
        idx.insert(id, &pdq(*w)).map_err(|e| e.to_string())?;
    }
    let mut results = Vec::new();
    for q in &queries {
        for r in [32, 64, 90] {
            results.push(idx.search_range(&pdq(*q), r).map_err(|e| e.to_string())?);
        }
    }
    let elapsed = start.elapsed();
    let mut mismatches = 0;
    let mut hits = 0;
    for (i, got) in results.iter().enumerate() {
        let want = oracles::brute_force_range(&records, &queries[i / 3], [32, 64, 90][i % 3]);
        hits += want.len();
        mismatches += usize::from(as_pairs(got) != want);
    }
    ensure(mismatches == 0, || format!("{mismatches} of 300 searches differ from brute force"))?;
    ensure(elapsed.as_secs_f64() < 10.0, || format!("took {elapsed:?}"))?;
    Ok(format!("300 searches, {hits} hits, 0 mismatches, {:.2}s", elapsed.as_secs_f64()))
}

fn ivf_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1F);
    let records = random_records(&mut rng, 10_000);
    let queries = mixed_queries(&mut rng, &records);
    let mut idx = BinaryIndex::new(HashKind::Pdq256, IndexConfig::ivf(16, 16)).map_err(|e| e.to_string())?;
    for (id, w) in &records {
        idx.insert(id, &pdq(*w)).map_err(|e| e.to_string())?;
    }
    idx.build_ivf(IvfParams { nlist: 16, max_iters: 20, seed: 3 }).map_err(|e| e.to_string())?;
    idx.set_nprobe(16).map_err(|e| e.to_string())?;
    for q in &queries {
        for r in [32, 64, 90] {
            let got = idx.search_range(&pdq(*q), r).map_err(|e| e.to_string())?;
            ensure(as_pairs(&got) == oracles::brute_force_range(&records, q, r), || {
                format!("nprobe = nlist differs from flat at radius {r}")
            })?;
        }
    }

    // two blobs: anchors at least 100 bits apart, members within 8 flips
    let mut rng = ChaCha8Rng::seed_from_u64(0xB10B);
    let a: [u64; 4] = rng.random();
    let b = loop {
        let b: [u64; 4] = rng.random();
        if oracles::popcount_distance(&a, &b) >= 100 {
            break b;
        }
    };
    let mut blobs = Vec::new();
    for (name, anchor) in [("a", a), ("b", b)] {
        for i in 0..1000 {
            let bits = rng.random_range(0..=8);
            blobs.push((format!("{name}-{i:04}"), flip(&mut rng, anchor, bits)));
        }
    }
    let mut ivf = BinaryIndex::new(HashKind::Pdq256, IndexConfig::ivf(16, 4)).map_err(|e| e.to_string())?;
    for (id, w) in &blobs {
        ivf.insert(id, &pdq(*w)).map_err(|e| e.to_string())?;
    }
    ivf.build_ivf(IvfParams { nlist: 16, max_iters: 20, seed: 5 }).map_err(|e| e.to_string())?;
    ensure(ivf.config() == IndexConfig::ivf(16, 4), || format!("config {:?}", ivf.config()))?;
    let (mut found, mut total) = (0usize, 0usize);
    for (_, q) in blobs.iter().step_by(10) {
        let want = oracles::brute_force_range(&blobs, q, 90);
        let got: BTreeSet<(u32, String)> = as_pairs(&ivf.search_range(&pdq(*q), 90).map_err(|e| e.to_string())?)
            .into_iter()
            .collect();
        total += want.len();
        found += want.iter().filter(|h| got.contains(h)).count();
    }
    let recall = found as f64 / total as f64;
    ensure(recall >= 0.95, || format!("IVF(16,4) recall {recall:.4} < 0.95"))?;
    Ok(format!("nprobe=nlist exact on 300 searches; IVF(16,4) recall {recall:.4}"))
}

#[derive(serde::Deserialize)]
struct PinnedHash {
    phash64: String,
    pdq256: String,
}

fn hash_pinning() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hashing");
    let text = std::fs::read_to_string(dir.join("expected.json")).map_err(|e| e.to_string())?;
    let expected: BTreeMap<String, PinnedHash> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(!expected.is_empty(), || "no fixtures".into())?;
    let mut worst = 0;
    for (name, want) in &expected {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| e.to_string())?;
        let plane = decode_image(&bytes).map_err(|e| e.to_string())?;
        for _ in 0..2 {
            ensure(phash64(&plane).to_hex() == want.phash64, || format!("{name}: pHash differs from pinned"))?;
            ensure(pdqhash256(&plane).to_hex() == want.pdq256, || format!("{name}: PDQ differs from pinned"))?;
        }
        let img = image::load_from_memory(&bytes).map_err(|e| e.to_string())?.to_rgb8();
        let mut jpeg = Cursor::new(Vec::new());
        JpegEncoder::new_with_quality(&mut jpeg, 75).encode_image(&img).map_err(|e| e.to_string())?;
        let a = hash_image(&bytes, HashKind::Pdq256).map_err(|e| e.to_string())?;
        let b = hash_image(jpeg.get_ref(), HashKind::Pdq256).map_err(|e| e.to_string())?;
        let d = hamming(&a, &b).map_err(|e| e.to_string())?;
        ensure(d <= 31, || format!("{name}: JPEG-75 PDQ distance {d} > 31"))?;
        worst = worst.max(d);
    }
    Ok(format!("{} fixtures pinned bit-for-bit; worst JPEG-75 distance {worst}", expected.len()))
}

fn text_oracles() -> Outcome {
    let j2 = TextMetric::jaccard(2).expect("n = 2 is valid");
    ensure(similarity(j2, "night", "nacht") == 1.0 / 7.0, || "night/nacht".into())?;
    ensure(similarity(TextMetric::NormLevenshtein, "kitten", "sitting") == 4.0 / 7.0, || "kitten/sitting".into())?;
    ensure(similarity(TextMetric::MetricLcs, "example", "samples") == 2.0 / 7.0, || "example/samples".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x7E47);
    let alphabet: Vec<char> = "abcde fghé".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.random_range(1..=24);
        (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (word(&mut rng), word(&mut rng));
        let longest = a.chars().count().max(b.chars().count()) as f64;
        let (x, y) = if a <= b { (&a, &b) } else { (&b, &a) };
        let n = rng.random_range(1..=5u8);
        let checks = [
            (TextMetric::NormLevenshtein, 1.0 - oracles::levenshtein(&a, &b) as f64 / longest),
            (TextMetric::MetricLcs, 1.0 - oracles::lcs(&a, &b) as f64 / longest),
            (TextMetric::JaroWinkler, strsim::jaro_winkler(x, y)),
            (TextMetric::JaccardNgram { n }, oracles::jaccard(&a, &b, n as usize)),
        ];
        for (metric, want) in checks {
            let err = (similarity(metric, &a, &b) - want).abs();
            ensure(err <= 1e-9, || format!("{metric} on {a:?} / {b:?}: off by {err:e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("worked examples exact; 1000 pairs x 4 metrics, max error {worst:e}"))
}

/// Counts calls passed through to the wrapped provider.
struct Counting<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: OcrProvider> OcrProvider for Counting<P> {
    fn name(&self) -> &str {
        "counting"
    }
    fn capabilities(&self) -> ProviderCapabilities {
        self.inner.capabilities()
    }
    fn recognize(&self, r: &OcrRequest<'_>) -> Result<ProviderOutput, OcrError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.recognize(r)
    }
}

struct Planted {
    _dir: tempfile::TempDir,
    store: CorpusStore,
    /// Store id to generator role.
    roles: HashMap<String, Role>,
    seed_ids: Vec<String>,
}

fn load_planted() -> Result<Planted, String> {
    let corpus = planted_corpus(2020, PlantedSpec::default());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (manifest, seeds) = corpus.write_to_dir(&dir.path().join("files")).map_err(|e| e.to_string())?;
    let mut store = CorpusStore::open_with(&dir.path().join("store"), StoreOptions { fsync: false })
        .map_err(|e| e.to_string())?;
    store.ingest_manifest(&manifest).map_err(|e| e.to_string())?;
    store.ingest_manifest(&seeds).map_err(|e| e.to_string())?;
    let id_of = |post: &str| store.image_for_post(post).map(str::to_string).ok_or_else(|| format!("{post} not stored"));
    let roles = corpus
        .images
        .iter()
        .map(|i| Ok((id_of(&i.id)?, i.role)))
        .collect::<Result<HashMap<_, _>, String>>()?;
    let seed_ids = corpus.seeds.iter().map(|s| id_of(&s.id)).collect::<Result<Vec<_>, _>>()?;
    store.create_seed_set("planted", &seed_ids).map_err(|e| e.to_string())?;
    Ok(Planted { _dir: dir, store, roles, seed_ids })
}

fn planted_end_to_end() -> Outcome {
    let start = Instant::now();
    let p = load_planted()?;
    let config = PipelineConfig::default();
    let cache = LabelCache::default();
    let pipeline = Pipeline {
        index: p.store.index(config.hash_kind),
        source: &p.store,
        provider: &SidecarProvider,
        cache: &cache,
    };
    let seeds = p.store.seeds("planted", config.hash_kind).map_err(|e| e.to_string())?;
    let out = pipeline.batch_query(&seeds, &config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let of_role = |role: Role| -> BTreeSet<&str> {
        p.roles.iter().filter(|(_, r)| **r == role).map(|(id, _)| id.as_str()).collect()
    };
    let variants = of_role(Role::Variant);
    let twins = of_role(Role::Twin);
    let accepted: BTreeSet<&str> = out.accepted().map(|c| c.image_id.as_str()).collect();
    let tp = accepted.intersection(&variants).count();
    let precision = if accepted.is_empty() { 0.0 } else { tp as f64 / accepted.len() as f64 };
    let recall = tp as f64 / variants.len() as f64;
    let twin_decisions: BTreeSet<Decision> = out
        .candidates
        .iter()
        .filter(|c| twins.contains(c.image_id.as_str()))
        .map(|c| c.decision)
        .collect();
    let twins_seen = out.candidates.iter().filter(|c| twins.contains(c.image_id.as_str())).count();

    ensure((variants.len(), twins.len()) == (40, 10), || format!("generator roles {} / {}", variants.len(), twins.len()))?;
    ensure(precision == 1.0 && recall == 1.0, || format!("precision {precision}, recall {recall}"))?;
    ensure(twins_seen == 10 && twin_decisions == BTreeSet::from([Decision::RejectedText]), || {
        format!("{twins_seen} twins matched with decisions {twin_decisions:?}")
    })?;
    ensure(elapsed.as_secs_f64() < 60.0, || format!("took {elapsed:?}"))?;
    Ok(format!("P = 1.0, R = 1.0, 10/10 twins REJECTED_TEXT, {:.2}s", elapsed.as_secs_f64()))
}

fn grid_selection() -> Outcome {
    let synth = synthetic_gt(&SyntheticGtSpec::default());
    let spec = GridSpec::default();
    let rows = grid_search(&spec, &synth.gt, &synth.corpus).map_err(|e| e.to_string())?;
    let best = &rows.first().ok_or("empty grid")?.config;
    let want = PipelineConfig::default();
    ensure(
        (best.hash_kind, best.theta_visual, best.text_metric, best.theta_textual)
            == (HashKind::Pdq256, 90, TextMetric::JaccardNgram { n: 4 }, 0.05),
        || format!("ranked first: {best:?}"),
    )?;
    ensure(*best == want, || format!("first row {best:?} is not the default {want:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6E1D);
    let mut picked = BTreeSet::new();
    while picked.len() < 10 {
        picked.insert(rng.random_range(0..rows.len()));
    }
    for &i in &picked {
        let direct = evaluate(&rows[i].config, &synth.gt, &synth.corpus).map_err(|e| e.to_string())?;
        ensure(direct == rows[i].scores, || format!("cell {i} cached {:?} vs uncached {direct:?}", rows[i].scores))?;
    }
    Ok(format!("{} cells, default ranked first (F1 {:.3}); 10 cells equal uncached", rows.len(), rows[0].scores.f1))
}

fn dbscan_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xDB5C);
    // 40 centres with members up to 70 flips out, plus uniform noise, so
    // components range from singletons to bridged chains
    let centres: Vec<[u64; 4]> = (0..40).map(|_| rng.random()).collect();
    let mut points = Vec::new();
    for i in 0..1000 {
        let w = if i % 5 == 4 {
            rng.random()
        } else {
            let c = centres[rng.random_range(0..centres.len())];
            let bits = rng.random_range(0..=70);
            flip(&mut rng, c, bits)
        };
        points.push((format!("p{i:04}"), w));
    }
    let hashes: Vec<(String, PerceptualHash)> = points.iter().map(|(id, w)| (id.clone(), pdq(*w))).collect();
    let params = ClusterParams { eps: 90, min_cluster_size: 1 };
    let partition = |stories: &[ImageStory]| -> BTreeSet<Vec<String>> { stories.iter().map(|s| s.members.clone()).collect() };
    let got = partition(&cluster(&hashes, &params).map_err(|e| e.to_string())?);
    let want = oracles::components(&points, 90);
    ensure(got == want, || format!("{} stories vs {} components", got.len(), want.len()))?;
    let multi = want.iter().filter(|c| c.len() > 1).count();

    // a-b and b-c within eps, a-c beyond it: one story
    let a = [0u64; 4];
    let b = [u64::MAX, 0, 0, 0];
    let c = [u64::MAX, u64::MAX, 0, 0];
    let chain = vec![("a".to_string(), pdq(a)), ("b".to_string(), pdq(b)), ("c".to_string(), pdq(c))];
    let (ab, bc, ac) = (oracles::popcount_distance(&a, &b), oracles::popcount_distance(&b, &c), oracles::popcount_distance(&a, &c));
    ensure(ab <= 90 && bc <= 90 && ac > 90, || format!("chain distances {ab}/{bc}/{ac}"))?;
    let chained = cluster(&chain, &params).map_err(|e| e.to_string())?;
    ensure(chained.len() == 1 && chained[0].members == ["a", "b", "c"], || format!("chain gave {chained:?}"))?;
    Ok(format!("{} components ({multi} with several members) match; chain {ab}/{bc}/{ac} is one story", want.len()))
}

fn ocr_thrift() -> Outcome {
    let p = load_planted()?;
    let config = PipelineConfig::default();
    let cache = LabelCache::default();
    let provider = Counting { inner: SidecarProvider, calls: AtomicUsize::new(0) };
    let pipeline = Pipeline {
        index: p.store.index(config.hash_kind),
        source: &p.store,
        provider: &provider,
        cache: &cache,
    };
    let seeds = p.store.seeds("planted", config.hash_kind).map_err(|e| e.to_string())?;
    let out = pipeline.batch_query(&seeds, &config).map_err(|e| e.to_string())?;
    let hash_of = |id: &str| p.store.get(id).map(|r| r.pdq256.to_hex()).ok_or_else(|| format!("{id} missing"));

    let mut labelled_seeds = BTreeSet::new();
    for (s, outcome) in p.seed_ids.iter().zip(&out.seeds) {
        let report = outcome.report.as_ref().ok_or_else(|| format!("seed {s} failed"))?;
        if !report.seed_label_empty {
            labelled_seeds.insert(hash_of(s)?);
        }
    }
    let matches: BTreeSet<String> = out.candidates.iter().map(|c| hash_of(&c.image_id)).collect::<Result<_, _>>()?;
    let uncached_matches = matches.difference(&labelled_seeds).count();
    let expected = labelled_seeds.len() + uncached_matches;
    let calls = provider.calls.load(Ordering::SeqCst);
    let reported: usize = out.seeds.iter().filter_map(|s| s.report.as_ref()).map(|r| r.ocr_calls_made).sum();
    ensure(calls == expected, || format!("{calls} provider calls, expected {expected}"))?;
    ensure(reported == calls && out.ocr_calls_made == calls, || {
        format!("reports say {reported} / {}, provider saw {calls}", out.ocr_calls_made)
    })?;
    let again = pipeline.batch_query(&seeds, &config).map_err(|e| e.to_string())?;
    ensure(again.ocr_calls_made == 0 && provider.calls.load(Ordering::SeqCst) == calls, || {
        format!("warm rerun made {} calls", again.ocr_calls_made)
    })?;

    // a seed with no visual matches costs nothing
    let lonely = pixelmod::pipeline::Seed::upload("lonely", pixelmod::synth::encode_png(&pixelmod::synth::scene(424242, 160, 120)));
    let q = pipeline.query(&lonely, &config).map_err(|e| e.to_string())?;
    ensure((q.report.visual_match_count, q.report.ocr_calls_made) == (0, 0), || {
        format!("unmatched seed: {} matches, {} OCR calls", q.report.visual_match_count, q.report.ocr_calls_made)
    })?;
    Ok(format!(
        "{calls} calls = {} labelled seeds + {uncached_matches} uncached matches; warm rerun 0",
        labelled_seeds.len()
    ))
}

fn snapshot_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5A9);
    let records = random_records(&mut rng, 100_000);
    let mut idx = BinaryIndex::flat(HashKind::Pdq256);
    for (id, w) in &records {
        idx.insert(id, &pdq(*w)).map_err(|e| e.to_string())?;
    }
    let queries: Vec<PerceptualHash> = (0..20)
        .map(|i| {
            let base = records[rng.random_range(0..records.len())].1;
            pdq(if i % 2 == 0 { flip(&mut rng, base, 40) } else { rng.random() })
        })
        .collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("index.snap");
    idx.save(&path).map_err(|e| e.to_string())?;
    let loaded = BinaryIndex::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded.len() == 100_000, || format!("loaded {} records", loaded.len()))?;
    let mut hits = 0;
    for q in &queries {
        let before = idx.search_range(q, 90).map_err(|e| e.to_string())?;
        let after = loaded.search_range(q, 90).map_err(|e| e.to_string())?;
        ensure(before == after, || "range results changed after reload".into())?;
        hits += before.len();
        let before = idx.search_topk(q, 10).map_err(|e| e.to_string())?;
        let after = loaded.search_topk(q, 10).map_err(|e| e.to_string())?;
        ensure(before == after, || "top-k changed after reload".into())?;
    }
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    for cut in [bytes.len() - 1, bytes.len() / 2, 12] {
        let truncated = dir.path().join(format!("cut-{cut}.snap"));
        std::fs::write(&truncated, &bytes[..cut]).map_err(|e| e.to_string())?;
        match BinaryIndex::load(&truncated) {
            Err(IndexError::ChecksumMismatch) => {}
            other => return Err(format!("truncated to {cut} bytes: {:?}", other.map(|i| i.len()))),
        }
    }
    Ok(format!("{} bytes, 20 queries ({hits} hits) identical, 3 truncations rejected by checksum", bytes.len()))
}

/// Stories for one category holding `images` members in total, `moderated`
/// of them flagged.
fn category_stories(
    category: PolicyCategory,
    stories: usize,
    images: usize,
    moderated: usize,
    flags: &mut HashMap<String, bool>,
) -> Vec<ImageStory> {
    let mut out = Vec::new();
    let mut n = 0;
    for s in 0..stories {
        let size = images / stories + usize::from(s < images % stories);
        let members: Vec<String> = (0..size).map(|i| format!("{category}-{s:03}-{i:04}")).collect();
        for m in &members {
            flags.insert(m.clone(), n < moderated);
            n += 1;
        }
        out.push(ImageStory {
            story_id: format!("{category}-{s:03}"),
            representative: members[0].clone(),
            members,
            category: Some(category),
            moderated_count: 0,
        });
    }
    out
}

fn report_fixture() -> Outcome {
    // story counts and rates are the published figures; the image totals
    // behind each rate are chosen so the rate comes out exactly
    let mut flags = HashMap::new();
    let mut stories = Vec::new();
    for (category, n, images, moderated) in [
        (PolicyCategory::Participation, 57, 2500, 104),
        (PolicyCategory::Intimidation, 78, 2500, 149),
        (PolicyCategory::Outcomes, 81, 10_000, 177),
        (PolicyCategory::SyntheticMedia, 42, 2500, 69),
    ] {
        stories.extend(category_stories(category, n, images, moderated, &mut flags));
    }
    let report = moderation_report(&stories, &flags).map_err(|e| e.to_string())?;
    let csv = report.to_csv_string();
    let want = "Category,# Image stories,Moderation %\n\
                Participation in Civic Processes,57,4.16%\n\
                Intimidation from Civic Processes,78,5.96%\n\
                Outcomes of Civic Processes,81,1.77%\n\
                Synthetic and Manipulated Media,42,2.76%\n";
    ensure(csv == want, || format!("rendered:\n{csv}"))?;
    Ok("57/4.16%, 78/5.96%, 81/1.77%, 42/2.76% rendered exactly".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("flat index exact vs brute force", flat_exactness),
        ("IVF degeneracy and recall", ivf_degeneracy),
        ("hash determinism and pinning", hash_pinning),
        ("text metrics match oracles", text_oracles),
        ("planted corpus end to end", planted_end_to_end),
        ("grid search selection", grid_selection),
        ("DBSCAN equals union-find", dbscan_oracle),
        ("OCR thrift", ocr_thrift),
        ("snapshot round trip", snapshot_round_trip),
        ("moderation report fixture", report_fixture),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<34} {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<34} {why} [{secs:.2}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
