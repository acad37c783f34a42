use std::f64::consts::PI;

use egoloc_core::motion::*;
use egoloc_core::world::*;
use rustfft::{num_complex::Complex, FftPlanner};

fn quiet_actions() -> Vec<ActionClass> {
    default_actions()
        .into_iter()
        .map(|mut a| {
            a.signature.clear();
            a.burst_prob = 0.0;
            a
        })
        .collect()
}

fn quiet_config() -> MotionConfig {
    MotionConfig { noise: NoiseConfig::zero(), ..MotionConfig::default() }
}

fn two_anchor_scene() -> Scene {
    let types = default_anchor_types();
    let id = |n: &str| types.iter().find(|t| t.name == n).unwrap().id;
    Scene {
        extent_m: 4.0,
        anchors: vec![
            Anchor { type_id: id("sink"), center: [1.1, 2.1] },
            Anchor { type_id: id("stove"), center: [3.1, 2.1] },
        ],
        anchor_types: types,
        seed: 1,
    }
}

fn stationary_script(action: usize, secs: f64) -> ActionScript {
    ActionScript {
        episodes: vec![Episode { action, start_s: 0.0, duration_s: secs, target_anchor: Some(0), waypoint: None, speed_mps: None }],
        start_anchor: 0,
    }
}

fn default_run(seed: u64) -> (Scene, ActionScript, Trajectory) {
    let (scene, _) = generate_scene(&WorldConfig::default(), seed).unwrap();
    let cfg = MotionConfig::default();
    let script = plan_script(&scene, &default_actions(), &cfg, 60.0, seed).unwrap();
    let traj = simulate_trajectory(&scene, &script, &cfg).unwrap();
    (scene, script, traj)
}

fn spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[..x.len() / 2].iter().map(|c| c.norm_sqr()).collect()
}

#[test]
fn script_covers_horizon_without_gaps() {
    for seed in 0..5 {
        let (scene, script, _) = default_run(seed);
        let eps = &script.episodes;
        assert_eq!(eps[0].start_s, 0.0);
        for w in eps.windows(2) {
            assert!((w[0].end_s() - w[1].start_s).abs() < 1e-9);
        }
        assert!((script.total_s() - 60.0).abs() < 1e-9);
        let actions = default_actions();
        for (i, e) in eps.iter().enumerate() {
            let a = &actions[e.action];
            if a.stationary {
                let anchor = &scene.anchors[e.target_anchor.unwrap()];
                assert_eq!(a.anchor_affinity.as_deref(), Some(scene.anchor_type(anchor).name.as_str()));
                if i + 1 < eps.len() {
                    assert!((2.0..=8.0).contains(&e.duration_s));
                }
            }
        }
    }
}

#[test]
fn single_sink_scene_washes_at_the_sink() {
    let types = default_anchor_types();
    let sink = types.iter().find(|t| t.name == "sink").unwrap().id;
    let scene = Scene {
        extent_m: 4.0,
        anchors: vec![Anchor { type_id: sink, center: [2.0, 2.0] }],
        anchor_types: types,
        seed: 0,
    };
    let actions: Vec<ActionClass> = default_actions().into_iter().filter(|a| a.name == "walk" || a.name == "wash").collect();
    let actions: Vec<ActionClass> = actions.into_iter().enumerate().map(|(i, mut a)| {
        a.id = i;
        a
    }).collect();
    let script = plan_script(&scene, &actions, &MotionConfig::default(), 60.0, 4).unwrap();
    for e in &script.episodes {
        if actions[e.action].name == "wash" {
            assert_eq!(e.target_anchor, Some(0));
        }
    }
    let traj = simulate_trajectory(&scene, &script, &MotionConfig::default()).unwrap();
    assert_eq!(traj.len(), 3000);
}

#[test]
fn planning_rejects_scene_without_matching_anchor() {
    let (scene, _) = generate_scene(&WorldConfig::default(), 1).unwrap();
    let actions: Vec<ActionClass> = default_actions().into_iter().take(1).collect();
    assert!(plan_script(&scene, &actions, &MotionConfig::default(), 60.0, 1).is_err());
    assert!(plan_script(&scene, &default_actions(), &MotionConfig::default(), 5.0, 1).is_err());
}

#[test]
fn planning_and_synthesis_are_deterministic() {
    let (scene, s1, t1) = default_run(9);
    let (_, s2, t2) = default_run(9);
    assert_eq!(s1, s2);
    assert_eq!(t1, t2);
    let p = Participant::sample(3, &MotionConfig::default());
    let i1 = synthesize_imu(&t1, &s1, &default_actions(), &p, &MotionConfig::default(), 5).unwrap();
    let i2 = synthesize_imu(&t2, &s2, &default_actions(), &p, &MotionConfig::default(), 5).unwrap();
    assert_eq!(i1, i2);
    let (_, s3, _) = default_run(10);
    assert_ne!(s1, s3);
    let _ = scene;
}

#[test]
fn trajectory_respects_speed_bounds_and_continuity() {
    for seed in 0..5 {
        let (scene, _, traj) = default_run(seed);
        for k in 0..traj.len() {
            let v = traj.vel[k];
            assert!((v[0] * v[0] + v[1] * v[1]).sqrt() <= 1.6);
            let p = traj.pos[k];
            assert!(p.iter().all(|c| (0.0..=scene.extent_m).contains(c)));
        }
        for w in traj.heading.windows(2) {
            // unwrapped heading changes by at most one turn-rate step
            assert!((w[1] - w[0]).abs() < 0.2, "heading jump {}", w[1] - w[0]);
        }
        for w in traj.pos.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            assert!(d <= 1.6 / 50.0 + 1e-9);
        }
    }
}

#[test]
fn stationary_script_holds_position() {
    let scene = two_anchor_scene();
    let traj = simulate_trajectory(&scene, &stationary_script(4, 20.0), &MotionConfig::default()).unwrap();
    let c = scene.anchors[0].center;
    for p in &traj.pos {
        assert!(((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() <= 0.03);
    }
}

#[test]
fn straight_walk_arrives_on_schedule() {
    let scene = two_anchor_scene();
    let cfg = MotionConfig { jitter_m: 0.0, ..quiet_config() };
    let script = ActionScript {
        episodes: vec![
            Episode { action: 4, start_s: 0.0, duration_s: 2.0, target_anchor: Some(0), waypoint: None, speed_mps: None },
            Episode { action: 0, start_s: 2.0, duration_s: 6.0, target_anchor: Some(1), waypoint: None, speed_mps: Some(0.8) },
        ],
        start_anchor: 0,
    };
    let traj = simulate_trajectory(&scene, &script, &cfg).unwrap();
    let dest = scene.anchors[1].center;
    let k = traj.pos.iter().position(|p| (p[0] - dest[0]).abs() < 1e-9 && (p[1] - dest[1]).abs() < 1e-9).unwrap();
    let arrival = traj.time(k) - 2.0;
    let expected = 2.0 / 0.8 + 0.8 / 0.5;
    assert!((arrival - expected).abs() <= 0.2, "arrival {arrival} vs {expected}");
}

#[test]
fn resting_device_reads_gravity_only() {
    let scene = two_anchor_scene();
    let cfg = MotionConfig { jitter_m: 0.0, ..quiet_config() };
    let script = stationary_script(4, 10.0);
    let traj = simulate_trajectory(&scene, &script, &cfg).unwrap();
    let imu = synthesize_imu(&traj, &script, &quiet_actions(), &Participant::neutral(), &cfg, 1).unwrap();
    assert_eq!(imu.samples.len(), 500);
    for s in &imu.samples {
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] as f64 - 9.81).abs() < 1e-6);
        assert!(s[3..].iter().all(|&w| w == 0.0));
    }
}

#[test]
fn circular_walk_has_centripetal_lateral_accel() {
    let (r, v, rate) = (1.0, 0.5, 50usize);
    let w = v / r;
    let n = 20 * rate;
    let t = |k: usize| k as f64 / rate as f64;
    let traj = Trajectory {
        rate_hz: rate,
        pos: (0..n).map(|k| [2.0 + r * (w * t(k)).cos(), 2.0 + r * (w * t(k)).sin()]).collect(),
        vel: (0..n).map(|k| [-v * (w * t(k)).sin(), v * (w * t(k)).cos()]).collect(),
        acc: (0..n).map(|k| [-w * v * (w * t(k)).cos(), -w * v * (w * t(k)).sin()]).collect(),
        heading: (0..n).map(|k| w * t(k) + PI / 2.0).collect(),
        yaw_rate: vec![w; n],
    };
    let script = ActionScript {
        episodes: vec![Episode { action: 0, start_s: 0.0, duration_s: 20.0, target_anchor: None, waypoint: None, speed_mps: Some(v) }],
        start_anchor: 0,
    };
    let imu = synthesize_imu(&traj, &script, &quiet_actions(), &Participant::neutral(), &quiet_config(), 1).unwrap();
    for s in &imu.samples {
        let lateral = ((s[0] as f64).powi(2) + (s[1] as f64).powi(2)).sqrt();
        assert!((lateral - v * v / r).abs() < 1e-6);
        assert!((s[1] as f64 - 0.25).abs() < 1e-6, "points to the circle center on the left");
        assert!((s[5] as f64 - w).abs() < 1e-6);
    }
}

#[test]
fn wash_signature_peaks_at_two_hertz() {
    let scene = two_anchor_scene();
    let cfg = MotionConfig { jitter_m: 0.0, ..quiet_config() };
    let script = stationary_script(4, 10.0);
    let traj = simulate_trajectory(&scene, &script, &cfg).unwrap();
    let imu = synthesize_imu(&traj, &script, &default_actions(), &Participant::neutral(), &cfg, 2).unwrap();
    let ax: Vec<f64> = imu.samples.iter().map(|s| s[0] as f64).collect();
    let spec = spectrum(&ax);
    let peak = (1..spec.len()).max_by(|&a, &b| spec[a].total_cmp(&spec[b])).unwrap();
    let freq = peak as f64 * 50.0 / ax.len() as f64;
    assert!((freq - 2.0).abs() < 1e-9, "peak at {freq} Hz");
}

#[test]
fn accel_noise_has_configured_spread() {
    let (scene, script, traj) = default_run(3);
    let _ = scene;
    let mut noisy = quiet_config();
    noisy.noise.accel_sigma = 0.1;
    let acts = default_actions();
    let p = Participant::neutral();
    let clean = synthesize_imu(&traj, &script, &acts, &p, &quiet_config(), 6).unwrap();
    let dirty = synthesize_imu(&traj, &script, &acts, &p, &noisy, 6).unwrap();
    for axis in 0..3 {
        let r: Vec<f64> = clean.samples.iter().zip(&dirty.samples).map(|(c, d)| d[axis] as f64 - c[axis] as f64).collect();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        let sd = (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
        assert!((sd - 0.1).abs() <= 0.01, "axis {axis} std {sd}");
    }
}

#[test]
fn double_integration_reconstructs_path() {
    for seed in 0..3 {
        let (scene, _) = generate_scene(&WorldConfig::default(), seed).unwrap();
        let cfg = quiet_config();
        let script = plan_script(&scene, &quiet_actions(), &cfg, 60.0, seed).unwrap();
        let traj = simulate_trajectory(&scene, &script, &cfg).unwrap();
        let imu = synthesize_imu(&traj, &script, &quiet_actions(), &Participant::neutral(), &cfg, seed).unwrap();
        let dt = 1.0 / traj.rate_hz as f64;
        let world = |k: usize| {
            let (c, s) = (traj.heading[k].cos(), traj.heading[k].sin());
            let (bx, by) = (imu.samples[k][0] as f64, imu.samples[k][1] as f64);
            [c * bx - s * by, s * bx + c * by]
        };
        let mut v = traj.vel[0];
        let mut p = traj.pos[0];
        let mut worst: f64 = 0.0;
        for k in 1..traj.len() {
            let (a0, a1) = (world(k - 1), world(k));
            let v_new = [v[0] + 0.5 * dt * (a0[0] + a1[0]), v[1] + 0.5 * dt * (a0[1] + a1[1])];
            p = [p[0] + 0.5 * dt * (v[0] + v_new[0]), p[1] + 0.5 * dt * (v[1] + v_new[1])];
            v = v_new;
            let e = ((p[0] - traj.pos[k][0]).powi(2) + (p[1] - traj.pos[k][1]).powi(2)).sqrt();
            worst = worst.max(e);
        }
        assert!(worst <= 0.05, "seed {seed}: drift {worst} m");
    }
}

#[test]
fn action_spectra_are_pairwise_distinct() {
    let scene = two_anchor_scene();
    let cfg = MotionConfig { jitter_m: 0.0, ..quiet_config() };
    let acts: Vec<ActionClass> = default_actions().into_iter().map(|mut a| {
        a.burst_prob = 0.0;
        a
    }).collect();
    let energy: Vec<Vec<f64>> = acts
        .iter()
        .map(|a| {
            let script = stationary_script(a.id, 10.0);
            let traj = simulate_trajectory(&scene, &script, &cfg).unwrap();
            let imu = synthesize_imu(&traj, &script, &acts, &Participant::neutral(), &cfg, 1).unwrap();
            (0..6)
                .flat_map(|axis| {
                    let x: Vec<f64> = imu.samples.iter().map(|s| s[axis] as f64).collect();
                    let mean = x.iter().sum::<f64>() / x.len() as f64;
                    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
                    spectrum(&centered)
                })
                .collect()
        })
        .collect();
    let mut min_gap = f64::INFINITY;
    for i in 0..energy.len() {
        for j in i + 1..energy.len() {
            let d = energy[i].iter().zip(&energy[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            min_gap = min_gap.min(d);
        }
    }
    assert!(min_gap > 0.0);
}

#[test]
fn windows_tile_the_stream() {
    let (_, script, traj) = default_run(2);
    let imu = synthesize_imu(&traj, &script, &default_actions(), &Participant::neutral(), &MotionConfig::default(), 2).unwrap();
    let wins = window_imu(&imu).unwrap();
    assert_eq!(wins.len(), 60);
    assert!(wins.iter().all(|w| w.rows.len() == 50));
    let flat: Vec<[f32; 6]> = wins.iter().flat_map(|w| w.rows.iter().copied()).collect();
    assert_eq!(flat, imu.samples[..flat.len()]);
    assert_eq!(wins[3].to_tensor().shape(), &[50, 6]);
}

#[test]
fn labels_follow_mean_position_and_midpoint_action() {
    let (scene, script, traj) = default_run(5);
    let grid = partition(&scene, 20);
    let labels = ground_truth_labels(&traj, &script, &grid);
    assert_eq!(labels.len(), 60);
    for l in &labels {
        let span = &traj.pos[l.t * 50..(l.t + 1) * 50];
        let mx = span.iter().map(|p| p[0]).sum::<f64>() / 50.0;
        let my = span.iter().map(|p| p[1]).sum::<f64>() / 50.0;
        assert_eq!(l.segment, nearest_segment([mx, my], &grid));
        assert_eq!(l.action, script.action_at(l.t as f64 + 0.5));
    }
    let mut csv = Vec::new();
    write_labels_csv(&labels, &mut csv).unwrap();
    assert_eq!(read_labels_csv(std::str::from_utf8(&csv).unwrap()).unwrap(), labels);
}

#[test]
fn wash_second_is_labelled_at_the_sink_cell() {
    let scene = two_anchor_scene();
    let cfg = MotionConfig { jitter_m: 0.0, ..MotionConfig::default() };
    let script = stationary_script(4, 12.0);
    let traj = simulate_trajectory(&scene, &script, &cfg).unwrap();
    let grid = partition(&scene, 20);
    let labels = ground_truth_labels(&traj, &script, &grid);
    assert_eq!(labels.len(), 12);
    let sink_cell = nearest_segment(scene.anchors[0].center, &grid);
    assert!(labels.iter().all(|l| l.segment == sink_cell && l.action == 4));
}

#[test]
fn file_formats_round_trip() {
    let (_, script, traj) = default_run(6);
    let imu = synthesize_imu(&traj, &script, &default_actions(), &Participant::neutral(), &MotionConfig::default(), 6).unwrap();
    let mut bytes = Vec::new();
    imu.write_to(&mut bytes).unwrap();
    assert_eq!(bytes.len(), 12 + imu.samples.len() * 24);
    assert_eq!(ImuStream::read_from(&bytes[..]).unwrap(), imu);
    let mut text = Vec::new();
    script.write_jsonl(&mut text).unwrap();
    let text = String::from_utf8(text).unwrap();
    assert_eq!(text.lines().count(), script.episodes.len() + 1);
    assert_eq!(ActionScript::read_jsonl(&text).unwrap(), script);
}

#[test]
fn participants_scale_signatures_reproducibly() {
    let cfg = MotionConfig::default();
    let a = Participant::sample(1, &cfg);
    assert_eq!(a, Participant::sample(1, &cfg));
    assert_ne!(a, Participant::sample(2, &cfg));
    assert!((a.freq_scale - 1.0).abs() <= cfg.participant_freq_spread);
}
