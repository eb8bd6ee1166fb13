use pke2_core::autodiff::Tape;
use pke2_core::matcher::*;
use pke2_core::synthdata::{generate_dataset, RenderParams, SceneConfig};
use pke2_core::training::*;
use std::time::Instant;

fn conf_margin(ds: &[pke2_core::synthdata::TupleSample], w: &MatcherWeights, mcfg: &MatcherConfig) -> (f64, f64) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for tuple in ds {
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape, false);
        let frames: Vec<FrameNodes> = tuple.frames.iter().map(|f| FrameNodes::from_keypoints(&mut tape, &f.keypoints, (640.0,480.0), false).unwrap()).collect();
        let tm = match_tuple(&mut tape, &frames, &bound, mcfg, MatchMode::Joint).unwrap();
        for pair in &tm.pairs {
            let Some(wn) = pair.weights_node else { continue };
            let wv = tape.value(wn).data().to_vec();
            for (k, &(i, j, _)) in pair.matches.iter().enumerate() {
                let is_outlier = tuple.outlier_flags[pair.a][i] || tuple.outlier_flags[pair.b][j];
                if is_outlier { so += wv[k]; no += 1; } else { si += wv[k]; ni += 1; }
            }
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

fn main() {
    let scene_cfg = SceneConfig::toy();
    let mut render = RenderParams::toy();
    render.outlier_frac = 0.2;
    let ds = generate_dataset(&scene_cfg, &render, 100, 7).unwrap();
    let mcfg = MatcherConfig::toy();

    let mut cfg = TrainConfig {
        mode: MatchMode::Joint,
        stage: Stage::One,
        iterations: 2500,
        schedule: LossSchedule::toy(),
        adam: AdamHyper { lr: 1e-3, ..Default::default() },
        grad_clip: 10.0,
        seed: 7,
        val_tuples: 20,
        val_every: 400,
    };
    let t1 = Instant::now();
    let s1 = train_toy(&ds, &mcfg, None, &cfg).unwrap();
    println!("stage1 {} iters in {:?}: val_ml {:.3} val_pl {:.4} val_auc {:.1}",
        cfg.iterations, t1.elapsed(), s1.val_match_loss, s1.val_pose_loss, s1.val_auc10);
    for r in s1.records.iter().filter(|r| r.val_match_loss.is_some()) {
        println!("  iter {:4} val_ml {:.3}", r.iteration, r.val_match_loss.unwrap());
    }
    let (mi, mo) = conf_margin(&ds.tuples[80..], &s1.weights, &mcfg);
    println!("stage1 conf: inlier {mi:.3} outlier {mo:.3} margin {:.3}", mi - mo);

    cfg.stage = Stage::Two;
    cfg.adam.lr = 5e-4;
    cfg.schedule.lambda_pose_max = 20.0;
    cfg.iterations = 2000;
    cfg.val_every = 400;
    let t2 = Instant::now();
    let s2 = train_toy(&ds, &mcfg, Some(s1.weights.clone()), &cfg).unwrap();
    println!("stage2 {} iters in {:?}: val_ml {:.3} val_pl {:.4} val_auc {:.1}",
        cfg.iterations, t2.elapsed(), s2.val_match_loss, s2.val_pose_loss, s2.val_auc10);
    for r in s2.records.iter().filter(|r| r.val_pose_loss.is_some()) {
        println!("  iter {:4} val_ml {:.2} val_pl {:.4} val_auc {:.1}", r.iteration, r.val_match_loss.unwrap(), r.val_pose_loss.unwrap(), r.val_auc.unwrap());
    }
    let (mi2, mo2) = conf_margin(&ds.tuples[80..], &s2.weights, &mcfg);
    println!("stage2 conf: inlier {mi2:.3} outlier {mo2:.3} margin {:.3}", mi2 - mo2);
    println!("stage1 val_pl {:.4}  drop {:.1}%", s1.val_pose_loss, 100.0*(s1.val_pose_loss - s2.val_pose_loss)/s1.val_pose_loss);
}
