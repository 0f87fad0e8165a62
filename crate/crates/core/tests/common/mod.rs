//! Oracles and checks shared by the integration tests and the acceptance
//! runner.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotlab::envs::bodies::{three_body_step, total_momentum, Body, BodyState, Gravity};
use slotlab::envs::catalog::CELL;
use slotlab::envs::grid::GridAction;
use slotlab::envs::{grid_step, AttributeCatalog, Direction, EnvKind, ExperienceBuffer, GridState, NamedColor};
use slotlab::envs::{ObjectAttr, Shape};
use slotlab::eval::LatentModel;
use slotlab::models::{AeConfig, AeModel, CswmConfig, CswmModel};
use slotlab::oodgen::{make_split, validate_split, SplitKind, SplitSpec};
use slotlab_tensor::{grad_check, Bound, GradCheckReport, ParamStore, Tensor};

pub const MODEL_TOL: f64 = 1e-4;

// ---- grid world ----

/// Next positions from a hand-written rule table: the moved object goes one
/// cell in its direction unless that leaves the board or hits the other
/// object.
pub fn two_object_oracle(pos: [(i32, i32); 2], object: usize, dir: usize) -> [(i32, i32); 2] {
    const OFFSETS: [(i32, i32); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    let (dr, dc) = OFFSETS[dir];
    let target = (pos[object].0 + dr, pos[object].1 + dc);
    let on_board = (0..3).contains(&target.0) && (0..3).contains(&target.1);
    let mut out = pos;
    if on_board && target != pos[1 - object] {
        out[object] = target;
    }
    out
}

/// Runs every (placement, object, direction) of two objects on a 3×3 grid
/// through the simulator; returns the case count and the disagreements.
pub fn grid_table_check() -> (usize, Vec<String>) {
    let cells: Vec<(i32, i32)> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
    let attrs = vec![ObjectAttr::new(0, 0), ObjectAttr::new(1, 1)];
    let (mut cases, mut bad) = (0, Vec::new());
    for &a in &cells {
        for &b in &cells {
            if a == b {
                continue;
            }
            for object in 0..2 {
                for dir in 0..4 {
                    let state = GridState {
                        size: 3,
                        positions: vec![(a.0 as usize, a.1 as usize), (b.0 as usize, b.1 as usize)],
                        attributes: attrs.clone(),
                    };
                    let action = GridAction::new(object, Direction::from_index(dir).unwrap());
                    let next = grid_step(&state, action).unwrap();
                    let got: Vec<(i32, i32)> = next.positions.iter().map(|&(r, c)| (r as i32, c as i32)).collect();
                    let want = two_object_oracle([a, b], object, dir);
                    if got != want.to_vec() || next.attributes != state.attributes {
                        bad.push(format!("{a:?} {b:?} object {object} dir {dir}: {got:?} vs {want:?}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    (cases, bad)
}

// ---- gravity ----

/// Integrates an equal-mass circular orbit for one period. Returns the
/// largest separation error along the way and the closure error, both
/// relative to the separation.
pub fn circular_orbit_errors() -> (f64, f64) {
    // Equal masses m at separation d orbit their midpoint. With softened
    // gravity the pair attraction is g·m·d / (d² + ε²)^{3/2} per unit mass,
    // so v² = a·R with R = d/2 and the period is 2πR / v.
    let gravity = Gravity::default();
    let (m, d) = (1.0, 1.0);
    let r = d / 2.0;
    let a = gravity.g * m * d / (d * d + gravity.softening.powi(2)).powf(1.5);
    let v = (a * r).sqrt();
    let period = std::f64::consts::TAU * r / v;
    let steps = 5000;
    let dt = period / steps as f64;
    let start = BodyState {
        bodies: vec![
            Body { pos: [r, 0.0], vel: [0.0, v], mass: m },
            Body { pos: [-r, 0.0], vel: [0.0, -v], mass: m },
        ],
    };
    let mut s = start.clone();
    let mut worst_sep = 0.0f64;
    for _ in 0..steps {
        s = three_body_step(&s, dt, &gravity).unwrap();
        let sep = (s.bodies[0].pos[0] - s.bodies[1].pos[0]).hypot(s.bodies[0].pos[1] - s.bodies[1].pos[1]);
        worst_sep = worst_sep.max((sep - d).abs() / d);
    }
    let closure = s
        .bodies
        .iter()
        .zip(&start.bodies)
        .map(|(b, b0)| (b.pos[0] - b0.pos[0]).hypot(b.pos[1] - b0.pos[1]) / d)
        .fold(0.0, f64::max);
    (worst_sep, closure)
}

pub fn random_bodies(rng: &mut ChaCha8Rng) -> BodyState {
    BodyState {
        bodies: (0..3)
            .map(|_| Body {
                pos: [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)],
                vel: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                mass: rng.gen_range(0.5..1.5),
            })
            .collect(),
    }
}

/// Largest momentum component change over 1000 leapfrog steps of random
/// three-body states.
pub fn momentum_drift(draws: usize, seed: u64) -> f64 {
    let gravity = Gravity::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let mut s = random_bodies(&mut rng);
        let p0 = total_momentum(&s);
        for _ in 0..1000 {
            s = three_body_step(&s, 0.005, &gravity).unwrap();
        }
        let p = total_momentum(&s);
        worst = worst.max((p[0] - p0[0]).abs()).max((p[1] - p0[1]).abs());
    }
    worst
}

// ---- splits ----

pub fn catalog(shapes: usize, colors: usize) -> AttributeCatalog {
    AttributeCatalog {
        shapes: Shape::ALL[..shapes].to_vec(),
        colors: (0..colors)
            .map(|i| NamedColor::new(&format!("c{i}"), [i as f32 / 8.0, 1.0 - i as f32 / 8.0, 0.5]))
            .collect(),
    }
}

/// Whether a split of this kind can exist, derived from the definitions:
/// k objects must change, diagonal training needs K distinct shapes and
/// colors, held-out values need a spare attribute, and the new-dimension
/// kinds need K values of the varied attribute plus k fresh values of the
/// other.
pub fn feasible(kind: SplitKind, k: usize, n: usize, shapes: usize, colors: usize) -> bool {
    use SplitKind::*;
    let k = if kind == Iid { 0 } else { k };
    if k > n || (kind != Iid && k == 0) {
        return false;
    }
    match kind {
        Iid => shapes >= n && colors >= n,
        NewConjunction => shapes >= n && colors >= n && n >= 2,
        ExtrapolationColor => shapes >= n && colors > n,
        ExtrapolationShape => shapes > n && colors >= n,
        NewDimensionShapeTrain => shapes >= n && colors > k,
        NewDimensionColorTrain => colors >= n && shapes > k,
    }
}

/// One generated split checked against the feasibility oracle and the
/// validator; `Err` describes the disagreement.
pub fn check_split_draw(kind: SplitKind, k: usize, n: usize, shapes: usize, colors: usize, seed: u64) -> Result<(), String> {
    let cat = catalog(shapes, colors);
    let ctx = format!("{kind} k={k} n={n} shapes={shapes} colors={colors} seed={seed}");
    match make_split(kind, k, n, &cat, seed) {
        Ok(spec) => {
            if !feasible(kind, k, n, shapes, colors) {
                return Err(format!("{ctx}: generated an infeasible split"));
            }
            let report = validate_split(&spec);
            if !report.passed() {
                return Err(format!("{ctx}: {:?}", report.violations));
            }
            let want_k = if kind == SplitKind::Iid { 0 } else { k };
            if spec.num_changed != want_k || spec.changed_objects().len() != want_k {
                return Err(format!("{ctx}: changed count {}", spec.num_changed));
            }
            if make_split(kind, k, n, &cat, seed).ok().as_ref() != Some(&spec) {
                return Err(format!("{ctx}: not reproducible"));
            }
            if SplitSpec::from_toml(&spec.to_toml()).ok().as_ref() != Some(&spec) {
                return Err(format!("{ctx}: TOML round trip changed the split"));
            }
            Ok(())
        }
        Err(e) if feasible(kind, k, n, shapes, colors) => Err(format!("{ctx}: feasible but refused: {e}")),
        Err(e) if e.category() != "infeasible-split" => Err(format!("{ctx}: wrong error category {}", e.category())),
        Err(_) => Ok(()),
    }
}

pub fn default_spec(kind: SplitKind, k: usize) -> SplitSpec {
    let s = make_split(kind, k, 5, &AttributeCatalog::default(), 9).unwrap();
    assert!(validate_split(&s).passed());
    s
}

/// Hand-broken splits, each with a clause the validator must name.
pub fn crafted_violations() -> Vec<(SplitSpec, &'static str)> {
    use SplitKind::*;
    let mut out = Vec::new();
    let mut edit = |kind: SplitKind, k: usize, clause: &'static str, f: &dyn Fn(&mut SplitSpec)| {
        let mut s = default_spec(kind, k);
        f(&mut s);
        out.push((s, clause));
    };
    edit(Iid, 0, "assignment length", &|s| {
        s.test.pop();
    });
    edit(Iid, 0, "unknown attribute id", &|s| {
        s.train[0].shape = 40;
        s.test[0].shape = 40;
    });
    edit(Iid, 0, "duplicate pair in train", &|s| {
        s.train[1] = s.train[0];
        s.test[1] = s.test[0];
    });
    edit(ExtrapolationColor, 2, "k exceeds object count", &|s| s.num_changed = 6);
    edit(ExtrapolationColor, 2, "changed count mismatch", &|s| s.num_changed = 3);
    edit(Iid, 0, "iid requires k = 0", &|s| s.num_changed = 1);
    edit(Iid, 0, "iid test differs from train", &|s| {
        s.test[2].color = 5;
        s.num_changed = 1;
    });
    edit(NewConjunction, 1, "color unseen in training", &|s| {
        let i = s.changed_objects()[0];
        s.test[i].color = 5;
    });
    edit(NewConjunction, 1, "shape unseen in training", &|s| {
        let i = s.changed_objects()[0];
        s.test[i].shape = 5;
    });
    // Swap two objects' training pairs into the test: every pair was seen.
    edit(NewConjunction, 1, "conjunction seen in training", &|s| {
        let i = s.changed_objects()[0];
        let j = (i + 1) % 5;
        s.test[i] = s.train[j];
        s.test[j] = s.train[i];
        s.num_changed = 2;
    });
    edit(ExtrapolationColor, 1, "color seen in training", &|s| {
        let i = s.changed_objects()[0];
        s.test[i] = ObjectAttr::new(i, (i + 1) % 5);
    });
    edit(ExtrapolationShape, 1, "shape seen in training", &|s| {
        let i = s.changed_objects()[0];
        s.test[i] = ObjectAttr::new((i + 1) % 5, i);
    });
    edit(NewDimensionShapeTrain, 1, "train varies color", &|s| s.train[3].color = 2);
    edit(NewDimensionColorTrain, 1, "train varies shape", &|s| s.train[3].shape = 2);
    edit(NewDimensionShapeTrain, 1, "train does not vary shape", &|s| {
        s.train = vec![ObjectAttr::new(0, 0); 5];
        s.test = s.train.clone();
        s.num_changed = 0;
    });
    for clause in ["changed object kept the train color", "test does not vary both dimensions"] {
        edit(NewDimensionShapeTrain, 1, clause, &|s| {
            let i = s.changed_objects()[0];
            s.test[i] = ObjectAttr::new(5, 0);
        });
    }
    out
}

/// `Err` when the validator accepts a crafted split or misses its clause.
pub fn check_violation(spec: &SplitSpec, clause: &str) -> Result<(), String> {
    let r = validate_split(spec);
    if r.passed() {
        return Err(format!("'{clause}' split passed validation"));
    }
    if !r.mentions(clause) {
        return Err(format!("'{clause}' not in {:?}", r.violations));
    }
    Ok(())
}

// ---- ranking ----

/// Rank by sorting every candidate: ascending squared distance, with the
/// truth ahead of rows at the same distance.
pub fn full_sort_rank(pred: &[f32], truth: usize, rows: &[Vec<f32>]) -> usize {
    let mut d: Vec<(f64, bool)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(pred).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum(), i != truth))
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d.iter().position(|&(_, other)| !other).unwrap() + 1
}

/// `count` random candidate rows of width `dim`, with rows `500..520`
/// duplicating rows `0..20` so ties are exercised.
pub fn candidate_rows(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let mut rows: Vec<Vec<f32>> = (0..count).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    for i in 0..20.min(count.saturating_sub(500)) {
        rows[500 + i] = rows[i].clone();
    }
    rows
}

/// Reads object positions straight off a flat render (slot k = object k's
/// cell) and applies the grid rule in latent space.
pub struct OracleEncoder {
    objects: Vec<(Shape, [f32; 3])>,
    size: usize,
}

impl OracleEncoder {
    pub fn new(buffer: &ExperienceBuffer) -> Self {
        let cat = &buffer.split.catalog;
        let objects = buffer
            .assignment()
            .iter()
            .map(|a| (cat.shapes[a.shape], cat.colors[a.color].to_u8().map(|v| v as f32 / 255.0)))
            .collect();
        Self { objects, size: buffer.env.grid_size }
    }

    /// Cell whose pixels are exactly the object's stencil in its color.
    fn locate(&self, img: &[f32], (shape, rgb): (Shape, [f32; 3])) -> (usize, usize) {
        let side = self.size * CELL;
        let plane = side * side;
        let lit = |p: usize| (0..3).all(|ch| (img[ch * plane + p] - rgb[ch]).abs() < 1e-3);
        (0..self.size * self.size)
            .map(|cell| (cell / self.size, cell % self.size))
            .find(|&(r, c)| {
                (0..CELL).all(|y| (0..CELL).all(|x| lit((r * CELL + y) * side + c * CELL + x) == shape.covers(y, x)))
            })
            .expect("object visible")
    }
}

impl LatentModel for OracleEncoder {
    fn num_slots(&self) -> usize {
        self.objects.len()
    }

    fn slot_dim(&self) -> usize {
        2
    }

    fn encode_batch(&self, obs: &[f32], n: usize) -> slotlab::Result<Vec<f32>> {
        let plane = (self.size * CELL).pow(2);
        let mut out = Vec::with_capacity(n * self.latent_len());
        for img in obs.chunks(3 * plane).take(n) {
            for &obj in &self.objects {
                let (r, c) = self.locate(img, obj);
                out.extend([r as f32, c as f32]);
            }
        }
        Ok(out)
    }

    fn step_batch(&self, z: &[f32], actions: &[f32], n: usize) -> slotlab::Result<Vec<f32>> {
        let k = self.num_slots();
        let mut out = z.to_vec();
        for s in 0..n {
            let Some(hot) = (0..k * 4).position(|i| actions[s * k * 4 + i] == 1.0) else {
                continue;
            };
            let (obj, dir) = (hot / 4, hot % 4);
            let (dr, dc) = [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)][dir];
            let cur = &z[s * k * 2..(s + 1) * k * 2];
            let (r, c) = (cur[obj * 2] + dr, cur[obj * 2 + 1] + dc);
            let limit = self.size as f32;
            let blocked = (0..k).any(|o| cur[o * 2] == r && cur[o * 2 + 1] == c);
            if r >= 0.0 && c >= 0.0 && r < limit && c < limit && !blocked {
                out[s * k * 2 + obj * 2] = r;
                out[s * k * 2 + obj * 2 + 1] = c;
            }
        }
        Ok(out)
    }
}

// ---- models ----

pub fn tiny_cswm(env: EnvKind, obs: [usize; 3], k: usize) -> CswmConfig {
    CswmConfig {
        encoder_hidden: 6,
        edge_hidden: 6,
        node_hidden: 6,
        extractor_channels: 3,
        ..CswmConfig::for_env(env, obs, k)
    }
}

pub fn tiny_ae(obs: [usize; 3], k: usize) -> AeConfig {
    AeConfig {
        conv_channels: 3,
        hidden: 6,
        transition_hidden: 6,
        ..AeConfig::for_env(EnvKind::Shapes, obs, k)
    }
}

pub fn randomize(params: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

pub fn param_inputs(params: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    params.iter().map(|(_, t)| Tensor::new(t.shape(), t.data().to_vec()).unwrap()).collect()
}

pub fn one_hot_actions(rows: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut a = vec![0.0; rows * 4];
    for r in 0..rows {
        if rng.gen_bool(0.5) {
            a[r * 4 + rng.gen_range(0..4)] = 1.0;
        }
    }
    a
}

/// Full contrastive loss of a small slot model (single-layer extractor)
/// against every parameter.
pub fn cswm_loss_grad_check() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = CswmModel::<f64>::new(tiny_cswm(EnvKind::Shapes, [3, 20, 20], 2), 3).unwrap();
    randomize(&mut model.params, 0.3, &mut rng);
    let b = 3;
    let frames = Tensor::from_fn(&[2 * b, 3, 20, 20], |_| rng.gen_range(0.0..1.0));
    let actions = Tensor::new(&[b * 2, 4], one_hot_actions(b * 2, &mut rng)).unwrap();
    let negatives = [2, 0, 1];
    let report = grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(model.batch_loss(tape, &p, &frames, &actions, &negatives).unwrap())
        },
        &param_inputs(&model.params),
        MODEL_TOL,
    )
    .unwrap();
    assert_eq!(report.coordinates, model.params.num_values());
    report
}

/// Two-layer extractor plus encoder on two-frame observations.
pub fn extractor_encoder_grad_check() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = CswmModel::<f64>::new(tiny_cswm(EnvKind::ThreeBody, [6, 10, 10], 2), 4).unwrap();
    randomize(&mut model.params, 0.3, &mut rng);
    let obs = Tensor::from_fn(&[2, 6, 10, 10], |_| rng.gen_range(0.0..1.0));
    grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let x = tape.constant(obs.clone())?;
            let z = model.encode_var(tape, &p, x).unwrap();
            let sq = tape.square(z)?;
            tape.sum(sq)
        },
        &param_inputs(&model.params),
        MODEL_TOL,
    )
    .unwrap()
}

/// Reconstruction plus latent-transition loss of the autoencoder baseline.
pub fn autoencoder_grad_check() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = AeModel::<f64>::new(tiny_ae([3, 10, 20], 2), 5).unwrap();
    randomize(&mut model.params, 0.3, &mut rng);
    let b = 2;
    let frames = Tensor::from_fn(&[2 * b, 3, 10, 20], |_| rng.gen_range(0.0..1.0));
    let actions = Tensor::new(&[b, 2 * 4], one_hot_actions(b * 2, &mut rng)).unwrap();
    grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(model.batch_loss(tape, &p, &frames, &actions).unwrap())
        },
        &param_inputs(&model.params),
        MODEL_TOL,
    )
    .unwrap()
}

pub fn permute_rows(data: &[f64], n: usize, k: usize, width: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for s in 0..n {
        for (dst, &src) in perm.iter().enumerate() {
            let (d, o) = ((s * k + dst) * width, (s * k + src) * width);
            out[d..d + width].copy_from_slice(&data[o..o + width]);
        }
    }
    out
}

/// Largest deviation between `T(Pz, Pa)` and `P·T(z, a)` over random
/// weights, latents, actions and slot permutations.
pub fn equivariance_deviation(draws: u64) -> f64 {
    let (n, k, d) = (3, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = tiny_cswm(EnvKind::Shapes, [3, 50, 50], k);
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let mut model = CswmModel::<f64>::new(cfg.clone(), draw).unwrap();
        randomize(&mut model.params, 1.0, &mut rng);
        let z: Vec<f64> = (0..n * k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = one_hot_actions(n * k, &mut rng);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let t = |z: Vec<f64>, a: Vec<f64>| {
            model
                .transition(&Tensor::new(&[n * k, d], z).unwrap(), &Tensor::new(&[n * k, 4], a).unwrap())
                .unwrap()
                .into_data()
        };
        let base = t(z.clone(), a.clone());
        assert!(base.iter().any(|&v| v != 0.0));
        let moved = t(permute_rows(&z, n, k, d, &perm), permute_rows(&a, n, k, 4, &perm));
        let expected = permute_rows(&base, n, k, d, &perm);
        for (x, y) in moved.iter().zip(&expected) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}
