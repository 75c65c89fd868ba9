use super::*;
use proptest::prelude::*;

fn cfg(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        ..SimConfig::default()
    }
}

fn scene(seed: u64, emb: Embodiment) -> SceneState {
    SceneState::sample(&cfg(seed), emb, &mut stream_rng(seed, STREAM_SCENES)).unwrap()
}

#[test]
fn default_config_round_trips_through_toml() {
    let c = cfg(7);
    let back = SimConfig::from_toml_str(&c.to_toml_string()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn config_rejects_bad_values() {
    for text in [
        "world_width_m = -1.0",
        "fps_ego = 0.0",
        "n_containers = 0",
        "ego_px = 0",
        "w_max_m = 0.03",
        "unknown_field = 1",
        "task_id = \"stack\"",
    ] {
        assert!(
            matches!(SimConfig::from_toml_str(text), Err(Error::InvalidConfig(_))),
            "{text}"
        );
    }
}

#[test]
fn cup_place_has_one_target() {
    for seed in 0..20 {
        let s = scene(seed, Embodiment::Human);
        assert_eq!(s.containers.iter().filter(|c| c.is_target).count(), 1);
        assert_eq!(s.containers.len(), 3);
        assert!(!s.held());
    }
}

#[test]
fn slot_insert_scenes_sample_and_finish() {
    let c = SimConfig {
        task_id: Task::SlotInsert,
        n_containers: 4,
        ..SimConfig::default()
    };
    let mut rng = stream_rng(3, STREAM_SCENES);
    for _ in 0..10 {
        let s = SceneState::sample(&c, Embodiment::Human, &mut rng).unwrap();
        assert_eq!(s.containers.iter().filter(|c| c.is_target).count(), 1);
        assert!(s
            .containers
            .iter()
            .filter(|c| c.is_target)
            .all(|c| !c.filled));
        assert!(success(expert_rollout(&s).unwrap().last().unwrap()));
    }
}

#[test]
fn target_starts_outside_ego_crop() {
    let c = cfg(0);
    let half_diag = c.ego_crop_m * std::f64::consts::SQRT_2 / 2.0;
    let mut rng = stream_rng(0, STREAM_SCENES);
    for _ in 0..100 {
        let s = SceneState::sample(&c, Embodiment::Human, &mut rng).unwrap();
        let t = s.target();
        let d = (t.pose.x - s.gripper.x).hypot(t.pose.y - s.gripper.y);
        assert!(d > half_diag + t.radius);
        // No target-colored pixel in the first ego frame.
        let (ego, _) = render(&s, Camera::Ego, &c);
        assert!(ego.pixels().chunks_exact(3).all(|p| p != PALETTE.target));
    }
}

#[test]
fn tiny_world_is_infeasible() {
    let c = SimConfig {
        world_width_m: 0.2,
        world_height_m: 0.2,
        ..SimConfig::default()
    };
    assert!(matches!(
        SceneState::sample(&c, Embodiment::Human, &mut stream_rng(0, 1)),
        Err(Error::PlacementInfeasible(_))
    ));
}

#[test]
fn sampling_ignores_embodiment() {
    let h = scene(5, Embodiment::Human);
    let r = scene(5, Embodiment::Robot);
    assert_eq!(h.with_embodiment(Embodiment::Robot, &cfg(5)), r);
}

#[test]
fn expert_succeeds_on_100_seeds() {
    let mut rng = stream_rng(42, STREAM_SCENES);
    for _ in 0..100 {
        let s = SceneState::sample(&cfg(42), Embodiment::Human, &mut rng).unwrap();
        let states = expert_rollout(&s).unwrap();
        assert!(success(states.last().unwrap()));
        assert!(states.len() <= MAX_EPISODE_STEPS);
        for w in states.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let step = (b.gripper.x - a.gripper.x).hypot(b.gripper.y - a.gripper.y);
            assert!(step <= MAX_STEP_M + 1e-12);
            assert!((b.gripper_width - a.gripper_width).abs() <= MAX_WIDTH_STEP_M + 1e-12);
            assert!((0.0..=a.w_max).contains(&b.gripper_width));
            assert!(b.objects.iter().filter(|o| o.held).count() <= 1);
        }
    }
}

#[test]
fn expert_widths_stay_in_range() {
    let states = expert_rollout(&scene(9, Embodiment::Human)).unwrap();
    for s in &states {
        let a = expert_step(s);
        assert!((0.0..=s.w_max).contains(&a.gripper_width));
    }
}

#[test]
fn expert_opens_at_target_when_holding() {
    let states = expert_rollout(&scene(1, Embodiment::Human)).unwrap();
    let s = states
        .iter()
        .find(|s| {
            let t = s.target();
            let o = s.task_object();
            s.held() && (o.pose.x - t.pose.x).hypot(o.pose.y - t.pose.y) < 1e-9
        })
        .expect("expert reaches the target while holding");
    assert_eq!(expert_step(s).gripper_width, s.w_max);
}

#[test]
fn expert_holds_after_success() {
    let states = expert_rollout(&scene(2, Embodiment::Human)).unwrap();
    let a = expert_step(states.last().unwrap());
    assert!(a.pose.translation_norm() < 1e-12 && a.pose.theta.abs() < 1e-12);
}

#[test]
fn held_object_tracks_gripper_in_third_view() {
    let c = cfg(4);
    let states = expert_rollout(&scene(4, Embodiment::Human)).unwrap();
    let held: Vec<_> = states.iter().filter(|s| s.held()).collect();
    assert!(!held.is_empty());
    for s in held {
        let o = s.task_object();
        let local = s.gripper.inverse_transform_point([o.pose.x, o.pose.y]);
        assert!(local[0].abs() < 1e-9 && local[1].abs() <= GRASP_TOLERANCE_M);
        // Centroid of object-colored pixels vs projected gripper center.
        let (f, _) = render(s, Camera::Third, &c);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..f.height() {
            for x in 0..f.width() {
                if f.get(x, y) == PALETTE.object {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0);
        let o_px = Camera::Third.world_to_pixel_clamped([o.pose.x, o.pose.y], s, &c);
        assert!((sx / n - (o_px.0 as f64 + 0.5)).abs() <= 1.0);
        assert!((sy / n - (o_px.1 as f64 + 0.5)).abs() <= 1.0);
    }
}

#[test]
fn ego_mask_is_always_empty() {
    for seed in 0..5 {
        for emb in [Embodiment::Human, Embodiment::Robot, Embodiment::None] {
            let (_, m) = render(&scene(seed, emb), Camera::Ego, &cfg(seed));
            assert!(m.is_empty());
        }
    }
}

#[test]
fn ego_view_is_embodiment_invariant() {
    for s in expert_rollout(&scene(6, Embodiment::Human))
        .unwrap()
        .iter()
        .step_by(5)
    {
        let c = cfg(6);
        let h = render(s, Camera::Ego, &c).0;
        let r = render(&s.with_embodiment(Embodiment::Robot, &c), Camera::Ego, &c).0;
        assert_eq!(h, r);
    }
}

#[test]
fn embodiment_changes_only_masked_pixels() {
    let c = cfg(8);
    for s in expert_rollout(&scene(8, Embodiment::Human))
        .unwrap()
        .iter()
        .step_by(4)
    {
        for emb in [Embodiment::Human, Embodiment::Robot] {
            let s = s.with_embodiment(emb, &c);
            let (with, mask) = render(&s, Camera::Third, &c);
            let (without, none_mask) =
                render(&s.with_embodiment(Embodiment::None, &c), Camera::Third, &c);
            assert!(none_mask.is_empty());
            assert!(!mask.is_empty());
            for (i, (a, b)) in with
                .pixels()
                .chunks_exact(3)
                .zip(without.pixels().chunks_exact(3))
                .enumerate()
            {
                if a != b {
                    assert!(mask.bits()[i]);
                }
            }
        }
    }
}

#[test]
fn start_marker_is_distinct_from_scenes() {
    let m = render_start_marker(96, 96);
    let (ego, _) = render(&scene(0, Embodiment::Human), Camera::Ego, &cfg(0));
    assert_ne!(m, ego);
}

#[test]
fn session_generation_is_deterministic() {
    let c = SimConfig {
        n_containers: 3,
        seed: 11,
        ..SimConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_session(&c, Embodiment::Human, 2, a.path()).unwrap();
    generate_session(&c, Embodiment::Human, 2, b.path()).unwrap();
    let files = |d: &Path| {
        let mut v: Vec<_> = walk(d)
            .into_iter()
            .map(|p| p.strip_prefix(d).unwrap().to_path_buf())
            .collect();
        v.sort();
        v
    };
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    for rel in fa {
        assert_eq!(
            fs::read(a.path().join(&rel)).unwrap(),
            fs::read(b.path().join(&rel)).unwrap(),
            "{rel:?}"
        );
    }
}

fn walk(d: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn no_embodiment_gives_empty_masks() {
    let sim = simulate_session(&cfg(3), Embodiment::None, 2).unwrap();
    assert!(sim.masks.iter().all(|(_, m)| m.is_empty()));
    assert_eq!(sim.session.manifest.embodiment, Embodiment::None);
}

#[test]
fn frame_counts_follow_rates() {
    let c = SimConfig {
        fps_ego: 60.0,
        fps_third: 30.0,
        ..cfg(2)
    };
    let sim = simulate_session(&c, Embodiment::Human, 3).unwrap();
    let s = &sim.session;
    let n_pre = (c.preroll_frames + c.marker_frames) as usize;
    assert_eq!(
        s.ego.len(),
        n_pre + sim.events.episode_lengths.iter().sum::<usize>()
    );
    for (span, &len) in s.episodes.iter().zip(&sim.events.episode_lengths) {
        let ego_in = s
            .ego
            .iter()
            .filter(|f| span.contains(f.timestamp_ns))
            .count();
        assert_eq!(ego_in, len);
        // Nominal duration spans len - 1 ego intervals; third frames at half the rate.
        let duration_s = (len - 1) as f64 / 60.0;
        let third_in = s
            .third
            .iter()
            .filter(|f| span.contains(f.timestamp_ns))
            .count() as f64;
        assert!(
            (third_in - duration_s * 30.0).abs() <= 2.0,
            "{third_in} vs {}",
            duration_s * 30.0
        );
    }
    // Ego frames inside an episode are one 60 fps interval apart on average.
    let span = &s.episodes[0];
    let ts: Vec<u64> = s
        .ego
        .iter()
        .map(|f| f.timestamp_ns)
        .filter(|&t| span.contains(t))
        .collect();
    let mean_dt = (ts[ts.len() - 1] - ts[0]) as f64 / (ts.len() - 1) as f64;
    assert!((mean_dt - 1e9 / 60.0).abs() < 1e6, "{mean_dt}");
}

#[test]
fn timestamps_strictly_increase_and_third_covers_episodes() {
    let sim = simulate_session(&cfg(1), Embodiment::Human, 3).unwrap();
    let s = &sim.session;
    for w in s.ego.windows(2) {
        assert!(w[0].timestamp_ns < w[1].timestamp_ns);
    }
    for w in s.third.windows(2) {
        assert!(w[0].timestamp_ns < w[1].timestamp_ns);
    }
    let last = s.episodes.last().unwrap().end_ns;
    assert!(s.third.last().unwrap().timestamp_ns + s.manifest.third_interval_ns() >= last);
    assert_eq!(s.poses.len(), s.ego.len());
    assert_eq!(sim.masks.len(), s.third.len());
}

#[test]
fn marker_frames_follow_preroll() {
    let c = cfg(0);
    let sim = simulate_session(&c, Embodiment::Human, 1).unwrap();
    let m = render_start_marker(c.ego_px, c.ego_px);
    let ego = &sim.session.ego;
    for (k, f) in ego
        .iter()
        .enumerate()
        .take((c.preroll_frames + c.marker_frames) as usize)
    {
        let is_marker = f.pixels() == m.pixels();
        assert_eq!(is_marker, k >= c.preroll_frames as usize, "frame {k}");
    }
    assert_eq!(
        sim.events.session_start_ns,
        ego[c.preroll_frames as usize].timestamp_ns
    );
}

#[test]
fn pose_noise_is_bounded_and_seeded() {
    let sim = simulate_session(&cfg(5), Embodiment::Human, 1).unwrap();
    let worst = sim
        .session
        .poses
        .iter()
        .zip(&sim.commands)
        .map(|(p, c)| (p.pose.x - c.pose.x).abs().max((p.pose.y - c.pose.y).abs()))
        .fold(0.0, f64::max);
    assert!(worst > 0.0 && worst < 0.01);
    let quiet = SimConfig {
        pose_noise_xy_m: 0.0,
        pose_noise_theta_rad: 0.0,
        ..cfg(5)
    };
    let sim = simulate_session(&quiet, Embodiment::Human, 1).unwrap();
    for (p, c) in sim.session.poses.iter().zip(&sim.commands) {
        assert_eq!(p.pose, c.pose);
    }
}

#[test]
fn default_prompts_hit_the_mask() {
    let sim = simulate_session(&cfg(0), Embodiment::Human, 1).unwrap();
    let p = &sim.prompts;
    let (_, mask) = sim
        .masks
        .iter()
        .find(|(t, _)| *t == p.source_frame_ts)
        .expect("prompt frame exists");
    assert!(!p.positive_points.is_empty());
    for &(x, y) in &p.positive_points {
        assert!(mask.get(x, y));
    }
}

#[test]
fn generated_session_reads_back() {
    let d = tempfile::tempdir().unwrap();
    let ev = generate_session(&cfg(0), Embodiment::Robot, 1, d.path()).unwrap();
    let s = session::read_session(d.path()).unwrap();
    assert_eq!(s.manifest.embodiment, Embodiment::Robot);
    assert_eq!(read_events(d.path()).unwrap(), ev);
    assert_eq!(
        read_commands(&d.path().join(COMMANDS_FILE)).unwrap().len(),
        s.ego.len()
    );
    let m = session::read_masks(&d.path().join(MASKS_DIR)).unwrap();
    assert_eq!(m.len(), s.third.len());
}

#[test]
fn zero_episodes_rejected() {
    assert!(matches!(
        simulate_session(&cfg(0), Embodiment::Human, 0),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn pixel_round_trip_lands_in_same_pixel() {
    let c = cfg(0);
    let s = scene(0, Embodiment::Human);
    for cam in [Camera::Third, Camera::Ego] {
        let (w, h) = match cam {
            Camera::Third => (c.third_width_px, c.third_height_px),
            Camera::Ego => (c.ego_px, c.ego_px),
        };
        for v in (0..h).step_by(7) {
            for u in (0..w).step_by(7) {
                let p = cam.pixel_to_world(u, v, &s, &c);
                assert_eq!(cam.world_to_pixel_clamped(p, &s, &c), (u, v));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn apply_respects_rate_limits(
        seed in 0u64..1000,
        dx in -0.5..0.5f64, dy in -0.5..0.5f64, dth in -3.0..3.0f64, w in -0.1..0.2f64,
    ) {
        let mut s = scene(seed % 17, Embodiment::Human);
        let before = s.clone();
        s.apply(Command { pose: Pose2::new(before.gripper.x + dx, before.gripper.y + dy, before.gripper.theta + dth), width: w });
        let step = (s.gripper.x - before.gripper.x).hypot(s.gripper.y - before.gripper.y);
        prop_assert!(step <= MAX_STEP_M + 1e-12);
        prop_assert!(crate::types::normalize_angle(s.gripper.theta - before.gripper.theta).abs() <= MAX_STEP_RAD + 1e-12);
        prop_assert!((s.gripper_width - before.gripper_width).abs() <= MAX_WIDTH_STEP_M + 1e-12);
        prop_assert!(s.gripper_width >= 0.0 && s.gripper_width <= s.w_max);
        prop_assert!(s.objects.iter().filter(|o| o.held).count() <= 1);
    }
}
