//! Acceptance criteria. Each criterion prints one `PASS`/`FAIL` line on stderr.
//!
//! The ablation criterion trains three seeds end to end and takes about an hour
//! on one CPU core. Its sub-claims are directional and are reported without
//! failing the suite; every other criterion asserts.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ookd::augment::paste_probabilities;
use ookd::evalkit::{default_thresholds, sequence_iou, video_map};
use ookd::losses::{box_loss, classification_loss, kd_loss, scalar};
use ookd::mask::{BoxCxcywh, BoxXyxy, Mask};
use ookd::pipeline::{
    distill, generate_splits, run_ablation, train_baseline, train_teacher, RunConfig, Variant, RUNS_DIR_ENV,
};
use ookd::qfa::{giou, match_queries, CostMatrix, MatchMethod};
use ookd::synthetic_video::{generate_clip, generate_dataset, load_dataset, save_dataset, ClipSpec, InstanceTrack, VideoClip};
use ookd::tracker::{track_frames, track_video, TrackResult, TrackerConfig, VideoPrediction};
use ookd::vis_model::VisModel;

fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("[acceptance] {id}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn runs_root() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var(RUNS_DIR_ENV, dir.path());
        dir
    })
    .path()
}

// ---------------------------------------------------------------- matching

fn brute_force(cost: &CostMatrix, n: usize, m: usize) -> f64 {
    fn go(cost: &CostMatrix, n: usize, m: usize, col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if col == m {
            *best = best.min(acc);
            return;
        }
        for q in 0..n {
            if !used[q] {
                used[q] = true;
                go(cost, n, m, col + 1, used, acc + cost.get(q, col), best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, n, m, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

#[test]
fn c1_hungarian_matches_exhaustive_search() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 8;
    let mut mismatches = 0;
    for i in 0..1000 {
        let m = 1 + i % 5;
        let data: Vec<f64> = (0..n * m)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(0..4) as f64 } else { rng.random_range(-3.0..3.0) })
            .collect();
        let cost = CostMatrix::from_vec(n, m, data).unwrap();
        let a = match_queries(&cost, MatchMethod::Hungarian).unwrap();
        let mut seen = a.sigma.clone();
        seen.sort_unstable();
        seen.dedup();
        let injective = a.sigma.len() == m && seen.len() == m && seen.iter().all(|&q| q < n);
        if !injective || cost.total(&a.sigma) != brute_force(&cost, n, m) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 30.0;
    report("1 matching oracle", pass, &format!("{mismatches} mismatches in 1000 matrices, {secs:.2}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- minor paste

#[test]
fn c2_paste_probability_endpoints() {
    let p = [0.355, 0.003, 0.1, 0.2];
    let ps = paste_probabilities(&p, 0.7).unwrap();
    // k (p_max - p_i) / (p_max - p_min) worked by hand
    let hand = [0.0, 0.7, 0.7 * 0.255 / 0.352, 0.7 * 0.155 / 0.352];
    let exact_ends = ps[0] == 0.0 && ps[1] == 0.7;
    let mid_err = (ps[2] - hand[2]).abs().max((ps[3] - hand[3]).abs());
    let pass = exact_ends && mid_err <= 1e-9;
    report("2 paste probabilities", pass, &format!("ends {:?}, mid error {mid_err:.2e}", (ps[0], ps[1])));
    assert!(pass);
}

// ---------------------------------------------------------------- kd loss

fn t2(v: Vec<f64>, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(v, (r, c), &Device::Cpu).unwrap()
}

fn val(t: &Tensor) -> f64 {
    scalar(t).unwrap()
}

#[test]
fn c3_kd_loss_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut in_range = true;
    for _ in 0..100 {
        let (m, c) = (rng.random_range(1..6), rng.random_range(2..9));
        let s: Vec<f64> = (0..m * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let scale = rng.random_range(0.1..5.0);
        let same = val(&kd_loss(&t2(s.clone(), m, c), &t2(s.iter().map(|v| v * scale).collect(), m, c)).unwrap().value);
        let anti = val(&kd_loss(&t2(s.clone(), m, c), &t2(s.iter().map(|v| -v * scale).collect(), m, c)).unwrap().value);
        // orthogonal rows: split the channels between student and teacher
        let half = c / 2;
        let so: Vec<f64> = s.iter().enumerate().map(|(i, v)| if i % c < half { *v } else { 0.0 }).collect();
        let to: Vec<f64> = s.iter().enumerate().map(|(i, v)| if i % c < half { 0.0 } else { *v + 3.0 }).collect();
        let orth = val(&kd_loss(&t2(so, m, c), &t2(to, m, c)).unwrap().value);
        worst = worst.max(same.abs()).max((orth - 1.0).abs()).max((anti - 2.0).abs());
        let other: Vec<f64> = (0..m * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k = val(&kd_loss(&t2(s, m, c), &t2(other, m, c)).unwrap().value);
        in_range &= (0.0..=2.0).contains(&k);
    }
    let s = Var::from_tensor(&t2(vec![0.3, -0.2, 0.9, 0.1, 0.7, -0.4], 2, 3)).unwrap();
    let t = Var::from_tensor(&t2(vec![0.5, 0.4, -0.3, 0.8, -0.1, 0.2], 2, 3)).unwrap();
    let grads = kd_loss(s.as_tensor(), t.as_tensor()).unwrap().value.backward().unwrap();
    let teacher_zero = grads
        .get(t.as_tensor())
        .map_or(true, |g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    let pass = worst <= 1e-6 && in_range && teacher_zero;
    report(
        "3 kd loss",
        pass,
        &format!("worst suite error {worst:.2e}, in range {in_range}, teacher gradient zero {teacher_zero}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- giou and gradients

/// Largest relative disagreement between central differences and autograd.
fn grad_error(x0: &[f64], shape: (usize, usize), f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&t2(x0.to_vec(), shape.0, shape.1)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut xp = x0.to_vec();
        xp[i] += h;
        let mut xm = x0.to_vec();
        xm[i] -= h;
        let fd = (val(&f(&t2(xp, shape.0, shape.1))) - val(&f(&t2(xm, shape.0, shape.1)))) / (2.0 * h);
        let err = (fd - g[i]).abs();
        if err > 1e-8 {
            worst = worst.max(err / fd.abs().max(g[i].abs()));
        }
    }
    worst
}

#[test]
fn c4_giou_and_gradients() {
    let g = giou(&BoxXyxy::new(0.0, 0.0, 2.0, 2.0), &BoxXyxy::new(1.0, 1.0, 3.0, 3.0)).unwrap();
    let giou_err = (g - (-5.0 / 63.0)).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let teacher = t2((0..15).map(|_| rng.random_range(-1.0..1.0)).collect(), 3, 5);
    let x: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kd = grad_error(&x, (3, 5), |s| kd_loss(s, &teacher).unwrap().value);

    // overlapping boxes away from the kinks of min/max and |.|
    let boxes = vec![0.42, 0.51, 0.30, 0.22, 0.63, 0.37, 0.18, 0.41, 0.25, 0.70, 0.33, 0.29, 0.81, 0.2, 0.12, 0.15];
    let gt = [
        BoxCxcywh::new(0.47, 0.55, 0.26, 0.31),
        BoxCxcywh::new(0.29, 0.66, 0.38, 0.24),
        BoxCxcywh::new(0.57, 0.43, 0.22, 0.36),
    ];
    let bx = grad_error(&boxes, (4, 4), |b| box_loss(b, &[0, 2, 1], &gt).unwrap());

    let logits: Vec<f64> = (0..28).map(|_| rng.random_range(-2.0..2.0)).collect();
    let cls = grad_error(&logits, (4, 7), |l| {
        classification_loss(l, &[Some(1), None, Some(0), None], &[3, 5], 0.1).unwrap()
    });

    let pass = giou_err <= 1e-9 && kd <= 1e-3 && bx <= 1e-3 && cls <= 1e-3;
    report(
        "4 giou and gradients",
        pass,
        &format!("giou error {giou_err:.2e}, relative gradient error kd {kd:.1e} box {bx:.1e} cls {cls:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- metrics

fn block(y: usize, x: usize, size: usize) -> Mask {
    let mut m = Mask::empty(40, 40);
    for yy in y..y + size {
        for xx in x..x + size {
            m.set(yy, xx, true);
        }
    }
    m
}

fn keep_first(m: &Mask, keep: usize) -> Mask {
    let mut out = m.clone();
    let mut left = keep;
    for v in out.as_mut_slice().iter_mut().filter(|v| **v) {
        if left == 0 {
            *v = false;
        } else {
            left -= 1;
        }
    }
    out
}

fn one_frame_clip(gts: &[Mask]) -> VideoClip {
    let mut clip = generate_clip(&ClipSpec::default(), 1).unwrap();
    clip.clip_id = "hand".into();
    clip.frames.truncate(1);
    clip.frames[0] = ookd::synthetic_video::Frame::new(40, 40);
    clip.instances = gts
        .iter()
        .enumerate()
        .map(|(i, m)| InstanceTrack::from_masks(i as u32 + 1, 0, vec![m.clone()]))
        .collect();
    clip
}

fn prediction(clip: &VideoClip, tracks: Vec<(f64, Mask)>) -> VideoPrediction {
    VideoPrediction {
        clip_id: clip.clip_id.clone(),
        height: 40,
        width: 40,
        num_frames: 1,
        tracks: tracks
            .into_iter()
            .enumerate()
            .map(|(i, (score, m))| TrackResult { instance_id: i as u32 + 1, class_id: 0, score, masks: vec![m] })
            .collect(),
    }
}

#[test]
fn c5_metric_oracle() {
    // two 100-pixel GT tracks; predictions at IoU 0.9, 0.3 (duplicate of GT 1) and 0.6
    let g1 = block(0, 0, 10);
    let g2 = block(20, 20, 10);
    let clip = one_frame_clip(&[g1.clone(), g2.clone()]);
    let p1 = keep_first(&g1, 90);
    let p3 = keep_first(&g1, 30);
    let p2 = keep_first(&g2, 60);
    let ious = (sequence_iou(&[p1.clone()], &[g1.clone()]), sequence_iou(&[p3.clone()], &[g1]), sequence_iou(&[p2.clone()], &[g2]));
    let pred = prediction(&clip, vec![(0.9, p1), (0.8, p3), (0.7, p2)]);
    let r = video_map(&[pred], std::slice::from_ref(&clip), &[0.5]).unwrap();
    // ranked TP, FP, TP: 101-point interpolation gives precision 1 for r <= 0.5 and 2/3 above
    let hand = (0..=100).map(|r| if r <= 50 { 1.0 } else { 2.0 / 3.0 }).sum::<f64>() / 101.0;
    let hand_ok = r.map == hand && ious == (0.9, 0.3, 0.6);

    let gt = generate_dataset(&ClipSpec::default(), 5, 77).unwrap();
    let identity: Vec<VideoPrediction> = gt
        .iter()
        .map(|c| VideoPrediction {
            clip_id: c.clip_id.clone(),
            height: c.height(),
            width: c.width(),
            num_frames: c.num_frames(),
            tracks: c
                .instances
                .iter()
                .map(|i| TrackResult { instance_id: i.instance_id, class_id: i.class_id, score: 1.0, masks: i.masks.clone() })
                .collect(),
        })
        .collect();
    let id = video_map(&identity, &gt, &default_thresholds()).unwrap();

    // monotone AP over thresholds on randomly degraded predictions
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut monotone = true;
    for _ in 0..20 {
        let noisy: Vec<VideoPrediction> = identity
            .iter()
            .map(|p| {
                let mut p = p.clone();
                for tr in &mut p.tracks {
                    tr.score = rng.random_range(0.0..1.0);
                    for m in &mut tr.masks {
                        for v in m.as_mut_slice() {
                            if rng.random_bool(0.1) {
                                *v = !*v;
                            }
                        }
                    }
                }
                p
            })
            .collect();
        let r = video_map(&noisy, &gt, &default_thresholds()).unwrap();
        monotone &= r.ap_monotone && r.ap_per_threshold.windows(2).all(|w| w[1] <= w[0]);
    }
    let pass = hand_ok && id.map == 1.0 && monotone;
    report(
        "5 metric oracle",
        pass,
        &format!("hand mAP {:?} vs {hand:?}, ious {ious:?}, identity mAP {}, monotone {monotone}", r.map, id.map),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- desk-scale experiment

#[test]
fn c6_desk_scale_experiment() {
    let dir = runs_root().join("acceptance_ablation");
    std::fs::create_dir_all(&dir).unwrap();
    let config = RunConfig::default();
    let splits = generate_splits(&config.data).unwrap();
    let start = Instant::now();
    let report6 = run_ablation(&config, &splits, &dir).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let _ = std::io::stderr().write_all(report6.to_markdown().as_bytes());
    let row = |v| report6.variant(v).unwrap();
    let (base, no_qfa, qfa, paste, both) =
        (row(Variant::Baseline), row(Variant::KdNoQfa), row(Variant::KdQfa), row(Variant::MinorPaste), row(Variant::Both));

    let gain = qfa.similarity - base.similarity;
    report("6a same-instance similarity", gain >= 0.05, &format!("kd_qfa - baseline = {gain:+.4}"));

    let pts = |v: f64| 100.0 * v;
    let ordered = qfa.map_long > base.map_long && base.map_long > no_qfa.map_long;
    let margin = pts(qfa.map_long - base.map_long);
    report(
        "6b qfa ordering on long split",
        ordered && margin >= 1.0,
        &format!(
            "kd_qfa {:.2}, baseline {:.2}, kd_no_qfa {:.2} mAP; margin {margin:+.2}",
            pts(qfa.map_long),
            pts(base.map_long),
            pts(no_qfa.map_long)
        ),
    );

    let combined = both.map_long >= qfa.map_long && both.map_long >= paste.map_long;
    let minor_gain = pts(paste.minor_ap - base.minor_ap);
    report(
        "6c combination and minor classes",
        combined && minor_gain >= 2.0,
        &format!(
            "both {:.2} vs kd_qfa {:.2} / minor_paste {:.2} mAP; minor AP gain {minor_gain:+.2}",
            pts(both.map_long),
            pts(qfa.map_long),
            pts(paste.map_long)
        ),
    );
    report("6 runtime", minutes <= 240.0, &format!("{minutes:.1} min"));
    assert!(report6.rows.iter().all(|r| r.ap_monotone), "AP not monotone in an ablation evaluation");
}

// ---------------------------------------------------------------- determinism

fn tiny_config(name: &str) -> RunConfig {
    let mut c = RunConfig::default();
    c.run_name = Some(name.into());
    c.data.train_clips = 6;
    c.data.val_clips = 3;
    c.optimizer.steps = 6;
    c.teacher.steps = 4;
    c
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn tiny_stages(tag: &str) -> (String, Vec<u8>, Vec<u8>, String, Vec<u8>) {
    let base = train_baseline(&tiny_config(&format!("{tag}_base"))).unwrap();
    let mut t = tiny_config(&format!("{tag}_teacher"));
    t.teacher.frame_model = Some(base.checkpoint.clone());
    let teacher = train_teacher(&t).unwrap();
    let mut d = tiny_config(&format!("{tag}_distill"));
    d.init.checkpoint = Some(base.checkpoint.clone());
    d.distill.teacher_frame = Some(base.checkpoint.clone());
    d.distill.teacher_aggregator = Some(teacher.checkpoint.clone());
    let student = distill(&d).unwrap();
    (
        serde_json::to_string(&base.metrics).unwrap(),
        bytes(&base.checkpoint),
        bytes(&teacher.checkpoint),
        serde_json::to_string(&student.metrics).unwrap(),
        bytes(&student.checkpoint),
    )
}

#[test]
fn c7_determinism_and_persistence() {
    runs_root();
    let first = tiny_stages("first");
    let second = tiny_stages("second");
    let reruns = first == second;

    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&ClipSpec::default(), 4, 9).unwrap();
    save_dataset(&data, &dir.path().join("a")).unwrap();
    let loaded = load_dataset(&dir.path().join("a")).unwrap();
    save_dataset(&loaded, &dir.path().join("b")).unwrap();
    let same_files = tree_bytes(&dir.path().join("a")) == tree_bytes(&dir.path().join("b"));
    let dataset_ok = loaded == data && same_files;

    let model = VisModel::new(RunConfig::default().model, 4).unwrap();
    let p1 = dir.path().join("m1.safetensors");
    let p2 = dir.path().join("m2.safetensors");
    model.save(&p1).unwrap();
    VisModel::load(&p1).unwrap().save(&p2).unwrap();
    let checkpoint_ok = bytes(&p1) == bytes(&p2);

    let pass = reruns && dataset_ok && checkpoint_ok;
    report(
        "7 determinism and persistence",
        pass,
        &format!("stage reruns identical {reruns}, dataset round trip {dataset_ok}, checkpoint round trip {checkpoint_ok}"),
    );
    assert!(pass);
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), bytes(&p)));
            }
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------- causality

#[test]
fn c8_tracker_causality() {
    // a briefly trained model so that detections clear the confidence threshold
    runs_root();
    let mut c = tiny_config("causality_model");
    c.data.train_clips = 20;
    c.optimizer.steps = 150;
    let model = VisModel::load(&train_baseline(&c).unwrap().checkpoint).unwrap();
    let config = TrackerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    let mut tracked = 0;
    for i in 0..50 {
        let clip = generate_clip(&ClipSpec::default(), 50_000 + i).unwrap();
        let full = track_video(&clip, &model, &config).unwrap();
        tracked += full.tracks.len();
        let t = rng.random_range(1..clip.num_frames());
        let part = track_frames(&clip.clip_id, &clip.frames[..t], &model, &config).unwrap();
        for tr in &part.tracks {
            match full.tracks.iter().find(|f| f.instance_id == tr.instance_id) {
                Some(f) if f.masks[..t] == tr.masks[..] => {}
                _ => violations += 1,
            }
        }
        // every full track seen before t must exist in the truncated output too
        for f in &full.tracks {
            if f.masks[..t].iter().any(|m| !m.is_empty()) && !part.tracks.iter().any(|p| p.instance_id == f.instance_id) {
                violations += 1;
            }
        }
    }
    let pass = violations == 0 && tracked > 0;
    report("8 tracker causality", pass, &format!("{violations} violations over 50 clips, {tracked} tracks"));
    assert!(pass);
}
