use std::collections::HashMap;
use std::sync::Mutex;

use imcot_core::datagen::{rejection_filter, Provenance, VerifiableItem};
use imcot_core::embedding::image_payload;
use imcot_core::eval::{centerness, normalize, normalized_match, Point};
use imcot_core::http::{JsonTransport, RetryPolicy, TransportError};
use imcot_core::reward::{grounding_sims, roi_grounding_reward, stage1_total};
use imcot_core::rollout::policies::{Grounded, RandomBox};
use imcot_core::rollout::{run_group, run_rollout, scenes, QuestionKind, RewardContext, RolloutConfig};
use imcot_core::transcript::{is_well_formed, parse_transcript, render_transcript, TrajectoryMeta};
use imcot_core::zoom::{apply_zoom, crop_region};
use imcot_core::*;
use proptest::prelude::*;
use serde_json::{json, Value};

fn bbox() -> impl Strategy<Value = BBox> {
    (-50i64..300, -50i64..300, 1i64..200, 1i64..200).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.!?{}\\[\\]\"'<>/ü]{0,24}"
        .prop_filter("no reserved tags", |s| !imcot_core::transcript::contains_reserved_tag(s))
}

fn label() -> impl Strategy<Value = String> {
    "[a-z][a-z ]{0,12}[a-z]"
}

fn segments() -> impl Strategy<Value = Vec<Segment>> {
    let call = (text(), bbox(), label(), prop::bool::weighted(0.8), "[a-z0-9/-]{1,10}");
    (text(), prop::collection::vec(call, 0..=5), prop::option::of((text(), "[A-Za-z0-9 ]{0,5}[A-Za-z0-9]"))).prop_map(
        |(first, calls, answer)| {
            let mut segs = vec![Segment::Think { text: first }];
            for (i, (thought, bbox, label, ok, id)) in calls.into_iter().enumerate() {
                if i > 0 {
                    segs.push(Segment::Think { text: thought });
                }
                segs.push(Segment::ToolCall(ToolCall::zoom(bbox, label)));
                let outcome =
                    if ok { ToolOutcome::Image(ImageId::new(id)) } else { ToolOutcome::Error("out_of_frame".into()) };
                segs.push(Segment::ToolResult { outcome });
            }
            if let Some((thought, a)) = answer {
                if segs.len() > 1 {
                    segs.push(Segment::Think { text: thought });
                }
                segs.push(Segment::Answer { text: a });
            }
            segs
        },
    )
}

fn raster(w: u32, h: u32) -> ImageRecord {
    let pixels = (0..w * h).map(|i| (i.wrapping_mul(2_654_435_761) >> 24) as u8).collect();
    let tags = vec![ContentTag {
        bbox: BBox::new(0, 0, (w / 2).max(1) as i64, (h / 2).max(1) as i64).unwrap(),
        label: "car".into(),
    }];
    ImageRecord::new(ImageId::new("src"), w, h, pixels, tags).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn render_parse_round_trip(segs in segments()) {
        let cfg = ParseConfig::default();
        let traj = Trajectory {
            id: String::new(),
            question: String::new(),
            original_image: ImageId::default(),
            segments: segs.clone(),
            terminated: Termination::Answered,
        };
        let text = render_transcript(&traj);
        let parsed = parse_transcript(&text, TrajectoryMeta::default(), &cfg).unwrap();
        prop_assert_eq!(&parsed.segments, &segs);
        let again = parse_transcript(&render_transcript(&parsed), TrajectoryMeta::default(), &cfg).unwrap();
        prop_assert_eq!(&again, &parsed);
        if is_well_formed(&text, &cfg) {
            let last_is_answer = matches!(parsed.segments.last(), Some(Segment::Answer { .. }));
            prop_assert!(last_is_answer);
            prop_assert_eq!(parsed.segments.iter().filter(|s| matches!(s, Segment::Answer { .. })).count(), 1);
        }
    }

    #[test]
    fn parse_is_total_and_deterministic(s in "\\PC{0,120}", tagged in prop::collection::vec(prop::sample::select(vec![
        "<think>", "</think>", "<tool_call>", "</tool_call>", "<tool_result>", "</tool_result>", "<answer>", "</answer>",
        "{\"name\":\"zoom_in\",\"bbox\":[1,2,30,40],\"label\":\"x\"}", "IMG:a", "ERR:x", "B", " ", "<", "{",
    ]), 0..16)) {
        let cfg = ParseConfig::default();
        for input in [s.clone(), tagged.concat(), format!("{}{s}", tagged.concat())] {
            let a = parse_transcript(&input, TrajectoryMeta::default(), &cfg);
            let b = parse_transcript(&input, TrajectoryMeta::default(), &cfg);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn crops_compose(w in 20u32..80, h in 20u32..80, a in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), b in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)) {
        let img = raster(w, h);
        let sub = |fw: i64, fh: i64, (px, py, pw, ph): (f64, f64, f64, f64)| {
            let x0 = (px * (fw - 1) as f64) as i64;
            let y0 = (py * (fh - 1) as f64) as i64;
            let x1 = x0 + 1 + (pw * (fw - x0 - 1) as f64) as i64;
            let y1 = y0 + 1 + (ph * (fh - y0 - 1) as f64) as i64;
            BBox::new(x0, y0, x1, y1).unwrap()
        };
        let b1 = sub(w as i64, h as i64, a);
        let first = crop_region(&img, b1, ImageId::new("c1"));
        let b2 = sub(b1.width(), b1.height(), b);
        let twice = crop_region(&first, b2, ImageId::new("c2"));
        let once = crop_region(&img, b2.translate(-b1.x_min, -b1.y_min), ImageId::new("c2"));
        prop_assert_eq!(twice.pixels(), once.pixels());
        prop_assert_eq!((twice.width(), twice.height()), (once.width(), once.height()));
    }

    #[test]
    fn zoom_stays_in_frame(w in 16u32..120, h in 16u32..120, b in bbox()) {
        let store = ImageStore::with_min_side(1);
        store.insert(raster(w, h));
        let call = ToolCall::zoom(b, "car");
        if let Ok(crop) = apply_zoom(&call, &ImageId::new("src"), ImageId::new("c"), &store) {
            let frame = BBox::new(0, 0, w as i64, h as i64).unwrap();
            prop_assert!(frame.contains_box(&crop.effective_bbox));
            prop_assert_eq!(crop.image.pixels().len() as i64, crop.effective_bbox.area());
            for tag in crop.image.content_tags() {
                prop_assert!(BBox::new(0, 0, crop.image.width() as i64, crop.image.height() as i64).unwrap().contains_box(&tag.bbox));
            }
        }
    }

    #[test]
    fn identity_crop_preserves_bytes(w in 1u32..60, h in 1u32..60) {
        let img = raster(w, h);
        let same = crop_region(&img, BBox::new(0, 0, w as i64, h as i64).unwrap(), ImageId::new("src"));
        prop_assert_eq!(same, img);
    }

    #[test]
    fn mock_is_deterministic_and_unit_norm(seed in any::<u64>(), label in label()) {
        let a = MockEmbedder::new(seed).embed_text(&label).unwrap();
        let b = MockEmbedder::new(seed).embed_text(&label).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((a.norm() - 1.0).abs() <= 1e-9);
        let img = raster(24, 24);
        let v = MockEmbedder::new(seed).embed_image(&img).unwrap();
        prop_assert_eq!(&v, &MockEmbedder::new(seed).embed_image(&img).unwrap());
        prop_assert!((v.norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn earlier_larger_sims_never_lower_the_reward(mut sims in prop::collection::vec(0.0f64..1.0, 2..6), lambda in 0.0f64..1.0, i in 0usize..5, j in 0usize..5) {
        let (i, j) = (i % sims.len(), j % sims.len());
        let (lo, hi) = (i.min(j), i.max(j));
        let before = roi_grounding_reward(&sims, lambda);
        if sims[hi] > sims[lo] {
            sims.swap(lo, hi);
            prop_assert!(roi_grounding_reward(&sims, lambda) >= before - 1e-12);
        }
    }

    #[test]
    fn constant_sims_closed_form(s in 0.0f64..1.0, e in 0usize..8, lambda in prop_oneof![Just(1.0), 0.0f64..1.0]) {
        let got = roi_grounding_reward(&vec![s; e], lambda);
        let want = if lambda == 1.0 { s * e as f64 } else { s * (1.0 - lambda.powi(e as i32)) / (1.0 - lambda) };
        prop_assert!((got - want).abs() <= 1e-9);
    }

    #[test]
    fn linear_without_format_and_tool_terms(segs in segments(), alpha in 0.0f64..3.0, lambda in 0.0f64..1.0, correct in any::<bool>()) {
        let cfg = ParseConfig::default();
        let text = imcot_core::transcript::render_segments(&segs);
        let t = parse_transcript(&text, TrajectoryMeta::default(), &cfg).unwrap();
        let key = match (t.answer(), correct) {
            (Some(a), true) => AnswerKey::parse(a).unwrap_or(AnswerKey::choice('Z')),
            _ => AnswerKey::choice('Z'),
        };
        let sims: Vec<f64> = (0..t.successful_tool_calls().len()).map(|k| 0.1 * k as f64).collect();
        let w = RewardWeights { alpha, beta: 0.0, gamma: 0.0, lambda, clamp_similarity: true };
        let b = stage1_total(&t, &key, &sims, &w).unwrap();
        prop_assert_eq!(b.r_total, roi_grounding_reward(&sims, lambda) + alpha * b.r_accuracy);
        prop_assert!(b.r_total.is_finite());
    }

    #[test]
    fn centerness_bounded_and_peaks_only_at_center(x0 in -50i64..50, y0 in -50i64..50, w in 1i64..80, h in 1i64..80, px in -100.0f64..200.0, py in -100.0f64..200.0) {
        let b = BBox::new(x0, y0, x0 + w, y0 + h).unwrap();
        let c = centerness(Point { x: px, y: py }, &b);
        prop_assert!((0.0..=1.0).contains(&c));
        let (cx, cy) = ((x0 as f64 + (x0 + w) as f64) / 2.0, (y0 as f64 + (y0 + h) as f64) / 2.0);
        if c == 1.0 {
            prop_assert!((px - cx).abs() < 1e-9 && (py - cy).abs() < 1e-9);
        }
        prop_assert_eq!(centerness(Point { x: cx, y: cy }, &b), 1.0);
    }

    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn normalized_match_is_an_equivalence(words in prop::collection::vec(prop::sample::select(vec!["The", "a", "Car", "car.", "CAR!", "left", "Left?", " ", "an", "x"]), 0..4).prop_map(|w| w.join(" ")), other in "[A-Za-z .!?]{0,12}", third in "[A-Za-z .!?]{0,12}") {
        prop_assert!(normalized_match(&words, &words));
        prop_assert_eq!(normalized_match(&words, &other), normalized_match(&other, &words));
        if normalized_match(&words, &other) && normalized_match(&other, &third) {
            prop_assert!(normalized_match(&words, &third));
        }
    }

    #[test]
    fn rejection_filter_keeps_top_scores_per_source(scores in prop::collection::vec((0usize..4, 0.0f64..1.0), 0..30), threshold in 0.0f64..1.0, top_n in 1usize..4) {
        let scored: Vec<(VerifiableItem, f64)> = scores.iter().enumerate().map(|(i, &(src, s))| (item(i, src), s)).collect();
        let kept = rejection_filter(scored, threshold, top_n);
        let mut per_source: HashMap<String, Vec<f64>> = HashMap::new();
        for k in &kept {
            prop_assert!(k.quality_score >= threshold);
            per_source.entry(k.source_id.clone()).or_default().push(k.quality_score);
        }
        for (src, kept_scores) in &per_source {
            prop_assert!(kept_scores.len() <= top_n);
            prop_assert!(kept_scores.windows(2).all(|w| w[0] >= w[1]));
            let mut all: Vec<f64> = scores.iter().filter(|(s, v)| format!("s{s}") == *src && *v >= threshold).map(|(_, v)| *v).collect();
            all.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(&all[..kept_scores.len()], &kept_scores[..]);
        }
    }
}

fn item(i: usize, src: usize) -> VerifiableItem {
    VerifiableItem {
        id: format!("c{i}"),
        source_id: format!("s{src}"),
        kind: QuestionKind::Tf,
        question: "q".into(),
        options: vec![],
        answer: AnswerKey::Bool(true),
        image: "i".into(),
        quality_score: 0.0,
        provenance: Provenance { generator: "t".into(), sample_index: i },
    }
}

#[test]
fn rollouts_respect_cap_and_group_size() {
    let mock = MockEmbedder::new(3);
    for (cap, size) in [(0, 1), (1, 3), (2, 8), (5, 8), (7, 5)] {
        let (q, img) = scenes::synthetic_scene(11, cap + size);
        let store = ImageStore::new();
        store.insert(img);
        let cfg = RolloutConfig { max_tool_calls: cap, group_size: size, ..Default::default() };
        let spam = imcot_core::rollout::policies::ToolSpammer { yields_at_cap: true };
        let out = run_group(&spam, &q, &store, &cfg, &RewardContext::new(&mock)).unwrap();
        assert_eq!(out.group.size(), size);
        assert_eq!(out.group.advantages.len(), size);
        assert!(out.group.trajectories.iter().all(|t| t.tool_call_count() <= cap));
    }
}

#[test]
fn overlapping_boxes_earn_more_grounding_than_random_boxes() {
    let mock = MockEmbedder::new(7);
    let cfg = RolloutConfig::default();
    let (mut grounded, mut random) = (0.0, 0.0);
    let n = 120;
    for i in 0..n {
        let (q, img) = scenes::synthetic_scene(21, i);
        let store = ImageStore::new();
        store.insert(img);
        let g = run_group(&Grounded, &q, &store, &cfg, &RewardContext::new(&mock)).unwrap();
        let r = run_group(&RandomBox, &q, &store, &cfg, &RewardContext::new(&mock)).unwrap();
        grounded += g.breakdowns.iter().map(|b| b.r_process).sum::<f64>();
        random += r.breakdowns.iter().map(|b| b.r_process).sum::<f64>();
    }
    let (g, r) = (grounded / (8 * n) as f64, random / (8 * n) as f64);
    assert!(g > r, "grounded mean R_p {g} vs random {r}");
}

/// Serves `/embed` from a table recorded off the mock, standing in for a remote service.
struct Recorded {
    dim: usize,
    table: HashMap<String, Value>,
    misses: Mutex<Vec<String>>,
}

impl JsonTransport for Recorded {
    fn get(&self, _path: &str) -> Result<Value, TransportError> {
        Ok(json!({ "dim": self.dim }))
    }

    fn post(&self, _path: &str, body: &Value) -> Result<Value, TransportError> {
        let key = body.to_string();
        match self.table.get(&key) {
            Some(v) => Ok(json!({ "vector": v })),
            None => {
                self.misses.lock().unwrap().push(key);
                Err(TransportError::Rejected { status: 404, body: "unrecorded".into() })
            }
        }
    }
}

#[test]
fn rewards_agree_between_mock_and_recorded_remote() {
    let mock = MockEmbedder::new(5);
    let mut table = HashMap::new();
    let mut cases = Vec::new();
    for i in 0..10 {
        let (q, img) = scenes::synthetic_scene(31, i);
        let store = ImageStore::new();
        store.insert(img);
        let t = run_rollout(&Grounded, &q, &store, &RolloutConfig::default(), &format!("t{i}"), 0, i as u64).unwrap();
        for (n, (call, _)) in t.successful_tool_calls().into_iter().enumerate() {
            let crop = apply_zoom(call, &t.original_image, ImageId::new(format!("x{n}")), &store).unwrap();
            let image_vec = mock.embed_image(&crop.image).unwrap();
            table.insert(
                json!({"kind": "image", "payload": image_payload(&crop.image)}).to_string(),
                json!(image_vec.values()),
            );
            let text_vec = mock.embed_text(&call.label).unwrap();
            table.insert(json!({"kind": "text", "payload": call.label}).to_string(), json!(text_vec.values()));
        }
        cases.push((t, store));
    }
    let remote = RemoteEmbedder::connect(
        Box::new(Recorded { dim: mock.dim(), table, misses: Mutex::default() }),
        RetryPolicy::no_delay(1),
    )
    .unwrap();
    for (t, store) in &cases {
        let a = grounding_sims(t, store, &mock, true).unwrap();
        let b = grounding_sims(t, store, &remote, true).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }
}
