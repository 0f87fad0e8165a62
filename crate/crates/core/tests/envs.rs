mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotlab::envs::bodies::{three_body_step, total_energy, Body, BodyConfig, BodyState, Gravity};
use slotlab::envs::dataset::{decode_buffer, decode_header, encode_buffer};
use slotlab::envs::grid::GridAction;
use slotlab::envs::iso::{render_blocks_iso_with_owner, IsoCamera, FACE_SHADES, ISO_SIDE};
use slotlab::envs::{
    encode_action, generate_buffer, grid_reset, grid_step, render_grid, AttributeCatalog, Direction, EnvKind,
    EnvSpec, ObjectAttr, Role, SimState,
};
use slotlab::oodgen::{make_split, SplitKind};

/// Upper 0.1% points of the chi-square distribution.
const CHI2_999_DF19: f64 = 43.82;
const CHI2_999_DF24: f64 = 51.18;

fn chi_square(counts: &[usize], expected: f64) -> f64 {
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

fn attrs(k: usize) -> Vec<ObjectAttr> {
    (0..k).map(|i| ObjectAttr::new(i, i)).collect()
}

#[test]
fn grid_step_matches_exhaustive_table_on_3x3() {
    let (cases, bad) = common::grid_table_check();
    assert_eq!(cases, 9 * 8 * 2 * 4);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn reset_occupancy_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 20_000;
    let mut counts = vec![0usize; 25];
    let mut first = vec![0usize; 25];
    for _ in 0..draws {
        let s = grid_reset(&mut rng, 5, &attrs(5)).unwrap();
        assert!(s.is_valid());
        for &(r, c) in &s.positions {
            counts[r * 5 + c] += 1;
        }
        first[s.positions[0].0 * 5 + s.positions[0].1] += 1;
    }
    let occupancy = chi_square(&counts, draws as f64 * 5.0 / 25.0);
    let object0 = chi_square(&first, draws as f64 / 25.0);
    assert!(occupancy < CHI2_999_DF24, "occupancy chi2 {occupancy}");
    assert!(object0 < CHI2_999_DF24, "object-0 chi2 {object0}");
}

#[test]
fn generated_actions_are_uniform_over_objects_and_directions() {
    let env = EnvSpec::new(EnvKind::Shapes);
    let split = make_split(SplitKind::Iid, 0, 5, &AttributeCatalog::default(), 0).unwrap();
    let buf = generate_buffer(&env, &split, Role::Train, 2000, 10, 12).unwrap();
    let mut counts = vec![0usize; 20];
    for ep in &buf.episodes {
        for a in ep.actions.iter().map(|a| a.unwrap()) {
            counts[a.object * 4 + a.direction.index()] += 1;
        }
    }
    let stat = chi_square(&counts, 20_000.0 / 20.0);
    assert!(stat < CHI2_999_DF19, "action chi2 {stat}");
}

#[test]
fn episodes_replay_through_the_simulator() {
    let cat = AttributeCatalog::default();
    for kind in [EnvKind::Shapes, EnvKind::Blocks] {
        let env = EnvSpec::new(kind);
        let split = make_split(SplitKind::Iid, 0, 5, &cat, 0).unwrap();
        let buf = generate_buffer(&env, &split, Role::Train, 20, 10, 3).unwrap();
        for ep in &buf.episodes {
            assert_eq!(ep.observations.len(), 11);
            for t in 0..10 {
                let (SimState::Grid(s), SimState::Grid(n)) = (&ep.states[t], &ep.states[t + 1]) else {
                    panic!("grid states expected");
                };
                assert_eq!(&grid_step(s, ep.actions[t].unwrap()).unwrap(), n);
            }
            let SimState::Grid(s0) = &ep.states[0] else { unreachable!() };
            if kind == EnvKind::Shapes {
                assert_eq!(ep.observations[0], render_grid(s0, &cat).unwrap());
            }
        }
    }
}

#[test]
fn action_encoding_is_one_hot_per_object() {
    let v = encode_action(Some(GridAction::new(3, Direction::Left)), 5).unwrap();
    assert_eq!(v.len(), 20);
    assert_eq!(v.iter().sum::<f32>(), 1.0);
    assert_eq!(v[3 * 4 + 2], 1.0);
    assert!(encode_action(None, 3).unwrap().iter().all(|&x| x == 0.0));
    assert!(encode_action(Some(GridAction::new(5, Direction::Up)), 5).is_err());
}

fn inside(quad: &[(f64, f64); 4], x: f64, y: f64) -> bool {
    // Split the convex quad into two triangles and use barycentric signs.
    let tri = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        let d = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
        let (d1, d2, d3) = (d(a, b), d(b, c), d(c, a));
        !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
    };
    tri(quad[0], quad[1], quad[2]) || tri(quad[0], quad[2], quad[3])
}

#[test]
fn iso_render_matches_per_pixel_depth_oracle() {
    let cat = AttributeCatalog::default();
    let cam = IsoCamera::for_grid(5);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..40 {
        let k = rng.gen_range(1..=6);
        let state = grid_reset(&mut rng, 5, &attrs(k)).unwrap();
        let (img, owner) = render_blocks_iso_with_owner(&state, &cat).unwrap();
        for y in 0..ISO_SIDE {
            for x in 0..ISO_SIDE {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // Nearest cube (largest r + c) covering the pixel center.
                let mut best: Option<(usize, usize, usize)> = None;
                for (obj, &(r, c)) in state.positions.iter().enumerate() {
                    for (f, quad) in cam.faces(r, c).iter().enumerate() {
                        if inside(quad, px, py) && best.is_none_or(|(_, _, depth)| r + c > depth) {
                            best = Some((obj, f, r + c));
                        }
                    }
                }
                assert_eq!(owner[y * ISO_SIDE + x], best.map(|b| b.0), "pixel ({x},{y})");
                let want = match best {
                    None => [0u8; 3],
                    Some((obj, f, _)) => cat.colors[state.attributes[obj].color]
                        .rgb
                        .map(|v| (v * FACE_SHADES[f] * 255.0).round() as u8),
                };
                assert_eq!(img.pixel(y, x), &want, "pixel ({x},{y})");
            }
        }
    }
}

#[test]
fn body_discs_are_centered_on_projected_positions() {
    let env = EnvSpec::new(EnvKind::ThreeBody);
    let split = make_split(SplitKind::Iid, 0, 3, &AttributeCatalog::default(), 0).unwrap();
    let buf = generate_buffer(&env, &split, Role::Train, 10, 5, 14).unwrap();
    let colors: Vec<[u8; 3]> = split.train.iter().map(|a| split.catalog.colors[a.color].to_u8()).collect();
    let cfg = env.bodies;
    let mut checked = 0;
    for ep in &buf.episodes {
        for (obs, state) in ep.observations.iter().zip(&ep.states) {
            let SimState::Bodies { current, .. } = state else { panic!() };
            let centers: Vec<(f64, f64)> = current.bodies.iter().map(|b| cfg.to_pixel(b.pos)).collect();
            for (i, &(cx, cy)) in centers.iter().enumerate() {
                let clear = centers
                    .iter()
                    .enumerate()
                    .all(|(j, &(ox, oy))| j == i || (ox - cx).hypot(oy - cy) > 2.0 * cfg.disc_radius + 1.0);
                if !clear {
                    continue;
                }
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for y in 0..50 {
                    for x in 0..50 {
                        if obs.pixel(y, x)[3..] == colors[i] {
                            sx += x as f64 + 0.5;
                            sy += y as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                }
                assert!(n > 0.0);
                assert!((sx / n - cx).abs() < 0.5 && (sy / n - cy).abs() < 0.5, "body {i}");
                checked += 1;
            }
        }
    }
    assert!(checked > 50);
}

#[test]
fn body_observations_carry_the_previous_frame() {
    let env = EnvSpec::new(EnvKind::ThreeBody);
    let split = make_split(SplitKind::Iid, 0, 3, &AttributeCatalog::default(), 0).unwrap();
    let buf = generate_buffer(&env, &split, Role::Train, 3, 4, 15).unwrap();
    for ep in &buf.episodes {
        assert!(ep.actions.iter().all(Option::is_none));
        for t in 1..ep.observations.len() {
            for y in 0..50 {
                for x in 0..50 {
                    assert_eq!(ep.observations[t].pixel(y, x)[..3], ep.observations[t - 1].pixel(y, x)[3..]);
                }
            }
        }
    }
}

#[test]
fn two_body_circular_orbit_closes() {
    let (separation, closure) = common::circular_orbit_errors();
    assert!(separation < 0.02, "separation error {separation}");
    assert!(closure < 0.02, "closure error {closure}");
}

#[test]
fn leapfrog_conserves_momentum_to_round_off() {
    let drift = common::momentum_drift(20, 16);
    assert!(drift < 1e-12, "momentum drift {drift}");
}

fn min_separation(s: &BodyState) -> f64 {
    let b = &s.bodies;
    let mut best = f64::INFINITY;
    for i in 0..b.len() {
        for j in i + 1..b.len() {
            best = best.min((b[i].pos[0] - b[j].pos[0]).hypot(b[i].pos[1] - b[j].pos[1]));
        }
    }
    best
}

/// Worst relative energy error over 1000 steps of dt = 0.005, and the
/// closest approach seen.
fn energy_drift(start: &BodyState, gravity: &Gravity) -> (f64, f64) {
    let mut s = start.clone();
    let e0 = total_energy(&s, gravity);
    let (mut worst, mut closest) = (0.0f64, min_separation(&s));
    for _ in 0..1000 {
        s = three_body_step(&s, 0.005, gravity).unwrap();
        worst = worst.max(((total_energy(&s, gravity) - e0) / e0).abs());
        closest = closest.min(min_separation(&s));
    }
    (worst, closest)
}

#[test]
fn leapfrog_energy_drift_is_small_on_bounded_orbits() {
    let gravity = Gravity::default();
    // Equal masses on a rotating equilateral triangle of circumradius R:
    // each feels g·m·√3·L / (L² + ε²)^{3/2} toward the center (L = √3·R).
    let (m, r) = (1.0, 1.0);
    let side = 3f64.sqrt() * r;
    let pull = gravity.g * m * 3f64.sqrt() * side / (side * side + gravity.softening.powi(2)).powf(1.5);
    let v = (pull * r).sqrt();
    let triangle = BodyState {
        bodies: (0..3)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 3.0;
                Body { pos: [r * a.cos(), r * a.sin()], vel: [-v * a.sin(), v * a.cos()], mass: m }
            })
            .collect(),
    };
    let (drift, _) = energy_drift(&triangle, &gravity);
    assert!(drift < 1e-3, "triangle drift {drift}");

    let cfg = BodyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    while checked < 5 {
        let start = cfg.sample_trajectory(&mut rng, 3, 1).unwrap()[0].clone();
        let (drift, closest) = energy_drift(&start, &cfg.gravity);
        if closest < 0.3 {
            continue;
        }
        assert!(drift < 1e-3, "relative drift {drift}");
        checked += 1;
    }
}

#[test]
fn leapfrog_rejects_bad_input() {
    let s = common::random_bodies(&mut ChaCha8Rng::seed_from_u64(0));
    assert!(three_body_step(&s, 0.0, &Gravity::default()).is_err());
    let mut bad = s.clone();
    bad.bodies[0].pos[0] = f64::NAN;
    assert_eq!(three_body_step(&bad, 0.01, &Gravity::default()).unwrap_err().category(), "simulation");
}

#[test]
fn trajectories_stay_in_frame() {
    let cfg = BodyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..20 {
        let traj = cfg.sample_trajectory(&mut rng, 3, 10).unwrap();
        assert_eq!(traj.len(), 12);
        for s in &traj {
            for b in &s.bodies {
                let (x, y) = cfg.to_pixel(b.pos);
                assert!((0.0..50.0).contains(&x) && (0.0..50.0).contains(&y));
            }
        }
    }
}

#[test]
fn datasets_round_trip_for_every_environment() {
    for kind in EnvKind::ALL {
        let env = EnvSpec::new(kind);
        let split = make_split(SplitKind::ExtrapolationColor, 1, env.num_objects, &AttributeCatalog::default(), 5)
            .unwrap();
        for role in [Role::Train, Role::Test] {
            let buf = generate_buffer(&env, &split, role, 4, 3, 19).unwrap();
            let bytes = encode_buffer(&buf, "note = 1\n").unwrap();
            let (back, header) = decode_buffer(&bytes).unwrap();
            assert_eq!(back, buf);
            assert_eq!(header, decode_header(&bytes).unwrap());
            assert_eq!(header.provenance, "note = 1\n");
            assert_eq!((header.episodes, header.steps), (4, 3));

            let mut bad = bytes.clone();
            bad[0] = b'X';
            assert_eq!(decode_buffer(&bad).unwrap_err().category(), "format");
            assert!(decode_buffer(&bytes[..bytes.len() - 1]).is_err());
            let mut longer = bytes.clone();
            longer.push(0);
            assert!(decode_buffer(&longer).is_err());
        }
    }
}

#[test]
fn generation_does_not_depend_on_thread_count() {
    let env = EnvSpec::new(EnvKind::ThreeBody);
    let split = make_split(SplitKind::Iid, 0, 3, &AttributeCatalog::default(), 0).unwrap();
    let make = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| encode_buffer(&generate_buffer(&env, &split, Role::Test, 12, 4, 20).unwrap(), "").unwrap())
    };
    assert_eq!(make(1), make(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn steps_keep_states_valid(seed in any::<u64>(), k in 1usize..10, moves in prop::collection::vec((0usize..10, 0usize..4), 1..30)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = grid_reset(&mut rng, 4, &attrs(k)).unwrap();
        for (o, d) in moves {
            let next = grid_step(&s, GridAction::new(o % k, Direction::from_index(d).unwrap())).unwrap();
            prop_assert!(next.is_valid());
            let moved: usize = s.positions.iter().zip(&next.positions).filter(|(a, b)| a != b).count();
            prop_assert!(moved <= 1);
            s = next;
        }
    }
}
