//! Short training runs on 20 clips: loss curves, head non-degeneracy and
//! teacher discriminativeness on smoke-trained checkpoints.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use candle_core::IndexOp;

use ookd::losses::{match_to_targets, matched_ids, FrameTargets};
use ookd::offline_teacher::{build_offline_knowledge, Aggregator};
use ookd::pipeline::{distill, generate_splits, read_log, train_baseline, train_teacher, RunConfig, RUNS_DIR_ENV};
use ookd::synthetic_video::{generate_clip, ClipSpec};
use ookd::vis_model::VisModel;

const SEEDS: [u64; 3] = [0, 1, 2];
const WINDOW: usize = 20;

struct Smoke {
    students: Vec<PathBuf>,
    teachers: Vec<PathBuf>,
    student_ratios: Vec<f64>,
    teacher_ratios: Vec<f64>,
}

fn config(name: String, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.run_name = Some(name);
    c.seed = seed;
    c.data.train_clips = 20;
    c.data.val_clips = 2;
    c.optimizer.steps = 200;
    c.teacher.steps = 200;
    c
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Mean of the last `WINDOW` losses over the first loss.
fn ratio(losses: &[f64]) -> f64 {
    mean(&losses[losses.len() - WINDOW..]) / losses[0]
}

fn teacher_losses(dir: &Path) -> Vec<f64> {
    std::fs::read_to_string(dir.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"]["total"].as_f64().unwrap())
        .collect()
}

fn smoke() -> &'static Smoke {
    static SMOKE: OnceLock<(tempfile::TempDir, Smoke)> = OnceLock::new();
    &SMOKE
        .get_or_init(|| {
            let root = tempfile::tempdir().unwrap();
            std::env::set_var(RUNS_DIR_ENV, root.path());
            let mut s = Smoke { students: vec![], teachers: vec![], student_ratios: vec![], teacher_ratios: vec![] };
            for seed in SEEDS {
                let base = train_baseline(&config(format!("student{seed}"), seed)).unwrap();
                let log = read_log(&root.path().join(format!("student{seed}/log.jsonl"))).unwrap();
                s.student_ratios.push(ratio(&log.iter().map(|r| r.loss.total).collect::<Vec<_>>()));
                let mut t = config(format!("teacher{seed}"), seed);
                t.teacher.frame_model = Some(base.checkpoint.clone());
                let teacher = train_teacher(&t).unwrap();
                s.teacher_ratios.push(ratio(&teacher_losses(&root.path().join(format!("teacher{seed}")))));
                s.students.push(base.checkpoint);
                s.teachers.push(teacher.checkpoint);
            }
            (root, s)
        })
        .1
}

#[test]
fn student_loss_halves_in_200_steps() {
    let s = smoke();
    let r = median(s.student_ratios.clone());
    assert!(r <= 0.5, "median final/initial {r:.3} ({:?})", s.student_ratios);
}

#[test]
fn teacher_loss_drops_in_200_steps() {
    let s = smoke();
    let r = median(s.teacher_ratios.clone());
    assert!(r < 0.8, "median final/initial {r:.3} ({:?})", s.teacher_ratios);
}

fn binary(logits: &[f32]) -> Vec<bool> {
    logits.iter().map(|&v| v > 0.0).collect()
}

#[test]
fn queries_decode_different_masks() {
    let model = VisModel::load(&smoke().students[0]).unwrap();
    let clips = generate_splits(&config("unused".into(), 0).data).unwrap().val;
    let (mut total, mut pairs) = (0.0, 0usize);
    for clip in &clips {
        for f in clip.frames.iter().step_by(4) {
            let set = model.infer(&[f]).unwrap().remove(0);
            let masks: Vec<Vec<bool>> = set.mask_logits.iter().map(|m| binary(m)).collect();
            for a in 0..masks.len() {
                for b in a + 1..masks.len() {
                    let inter = masks[a].iter().zip(&masks[b]).filter(|(x, y)| **x && **y).count();
                    let union = masks[a].iter().zip(&masks[b]).filter(|(x, y)| **x || **y).count();
                    if union > 0 {
                        total += inter as f64 / union as f64;
                        pairs += 1;
                    }
                }
            }
        }
    }
    assert!(pairs > 0);
    let m = total / pairs as f64;
    assert!(m < 0.9, "mean pairwise mask IoU {m:.3}");
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn offline_queries_separate_instances() {
    let s = smoke();
    let frame = VisModel::load(&s.students[0]).unwrap();
    let agg = Aggregator::load(&s.teachers[0]).unwrap();
    let qfa = RunConfig::default().qfa;
    let spec = ClipSpec { instances_per_clip: [2, 2], ..ClipSpec::default() };
    let (mut between, mut within) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let clip = generate_clip(&spec, 70_000 + seed).unwrap();
        let k = build_offline_knowledge(&clip, &frame, &agg).unwrap();
        let ids: Vec<u32> = clip.instances.iter().map(|i| i.instance_id).collect();
        let a = k.match_instances(&clip, &ids, &qfa).unwrap();
        between.push(cos(&k.embeddings[a.sigma[0]], &k.embeddings[a.sigma[1]]));
        for (t, f) in clip.frames.iter().enumerate() {
            let out = frame.forward_frames(&[f]).unwrap();
            let targets = FrameTargets::from_clip(&clip, t);
            let m = match_to_targets(&out.class_logits.i(0).unwrap(), &out.boxes.i(0).unwrap(), &targets, &qfa).unwrap();
            let emb = out.embeddings.i(0).unwrap().to_vec2::<f32>().unwrap();
            for (q, id) in matched_ids(&m, &targets) {
                let g = ids.iter().position(|x| *x == id).unwrap();
                within.push(cos(&emb[q], &k.embeddings[a.sigma[g]]));
            }
        }
    }
    let (b, w) = (mean(&between), mean(&within));
    assert!(b < w, "between-instance {b:.3} vs same-instance {w:.3}");
}

#[test]
fn kd_term_decreases_while_distilling() {
    let s = smoke();
    let mut c = config("distill0".into(), 0);
    c.init.checkpoint = Some(s.students[0].clone());
    c.distill.teacher_frame = Some(s.students[0].clone());
    c.distill.teacher_aggregator = Some(s.teachers[0].clone());
    let out = distill(&c).unwrap();
    let dir = out.checkpoint.parent().unwrap();
    let kd: Vec<f64> = read_log(&dir.join("log.jsonl"))
        .unwrap()
        .iter()
        .filter(|r| !r.loss.kd_skipped)
        .map(|r| r.loss.kd)
        .collect();
    let (first, last) = (mean(&kd[..WINDOW]), mean(&kd[kd.len() - WINDOW..]));
    assert!(last < first, "kd {first:.4} -> {last:.4}");
}
