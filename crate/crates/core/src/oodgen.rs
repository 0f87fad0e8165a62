//! Train/test attribute assignments for the generalization regimes.
//!
//! A split fixes one (shape, color) pair per object for training and one for
//! testing. Exactly `num_changed` objects differ between the two; every other
//! object keeps its training pair so that the out-of-distribution content is
//! confined to the changed objects.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::catalog::{AttributeCatalog, ObjectAttr};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Iid,
    NewConjunction,
    ExtrapolationColor,
    ExtrapolationShape,
    NewDimensionShapeTrain,
    NewDimensionColorTrain,
}

impl SplitKind {
    pub const ALL: [SplitKind; 6] = [
        SplitKind::Iid,
        SplitKind::NewConjunction,
        SplitKind::ExtrapolationColor,
        SplitKind::ExtrapolationShape,
        SplitKind::NewDimensionShapeTrain,
        SplitKind::NewDimensionColorTrain,
    ];

    /// Every kind except IID.
    pub const OOD: [SplitKind; 5] = [
        SplitKind::NewConjunction,
        SplitKind::ExtrapolationColor,
        SplitKind::ExtrapolationShape,
        SplitKind::NewDimensionShapeTrain,
        SplitKind::NewDimensionColorTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Iid => "iid",
            SplitKind::NewConjunction => "new_conjunction",
            SplitKind::ExtrapolationColor => "extrapolation_color",
            SplitKind::ExtrapolationShape => "extrapolation_shape",
            SplitKind::NewDimensionShapeTrain => "new_dimension_shape_train",
            SplitKind::NewDimensionColorTrain => "new_dimension_color_train",
        }
    }

    /// Kinds that share a training assignment can be evaluated with one
    /// checkpoint.
    pub fn train_family(self) -> TrainFamily {
        match self {
            SplitKind::NewDimensionShapeTrain => TrainFamily::ShapeOnly,
            SplitKind::NewDimensionColorTrain => TrainFamily::ColorOnly,
            _ => TrainFamily::Diagonal,
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown split kind '{s}'")))
    }
}

/// The training assignment a split kind starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainFamily {
    /// Object i gets shape i and color i.
    Diagonal,
    /// Object i gets shape i; every object has color 0.
    ShapeOnly,
    /// Object i gets color i; every object has shape 0.
    ColorOnly,
}

impl TrainFamily {
    pub fn assignment(self, num_objects: usize) -> Vec<ObjectAttr> {
        (0..num_objects)
            .map(|i| match self {
                TrainFamily::Diagonal => ObjectAttr::new(i, i),
                TrainFamily::ShapeOnly => ObjectAttr::new(i, 0),
                TrainFamily::ColorOnly => ObjectAttr::new(0, i),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub num_objects: usize,
    pub num_changed: usize,
    #[serde(with = "crate::provenance::seed_format")]
    pub seed: u64,
    pub catalog: AttributeCatalog,
    pub train: Vec<ObjectAttr>,
    pub test: Vec<ObjectAttr>,
}

impl SplitSpec {
    /// Indices of objects whose test pair differs from the training pair.
    pub fn changed_objects(&self) -> Vec<usize> {
        self.train
            .iter()
            .zip(&self.test)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("split serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Format(format!("split descriptor: {e}")))
    }
}

fn infeasible(msg: impl Into<String>) -> LabError {
    LabError::InfeasibleSplit(msg.into())
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(infeasible(msg()))
    }
}

/// Builds a split of the given kind with `k` changed objects.
///
/// IID ignores `k` and forces it to zero. Every other kind needs `k ≥ 1`.
pub fn make_split(
    kind: SplitKind,
    k: usize,
    num_objects: usize,
    catalog: &AttributeCatalog,
    seed: u64,
) -> Result<SplitSpec> {
    catalog.validate()?;
    let (n_shapes, n_colors) = (catalog.shapes.len(), catalog.colors.len());
    let k = if kind == SplitKind::Iid { 0 } else { k };
    require(k <= num_objects, || {
        format!("k = {k} exceeds the number of objects ({num_objects})")
    })?;
    require(kind == SplitKind::Iid || k >= 1, || {
        format!("{kind} needs at least one changed object")
    })?;
    let family = kind.train_family();
    match family {
        TrainFamily::Diagonal => {
            require(n_shapes >= num_objects && n_colors >= num_objects, || {
                format!(
                    "{num_objects} objects need {num_objects} shapes and colors, catalog has {n_shapes} shapes and {n_colors} colors"
                )
            })?;
        }
        TrainFamily::ShapeOnly => {
            require(n_shapes >= num_objects, || {
                format!("{num_objects} objects need {num_objects} shapes, catalog has {n_shapes}")
            })?;
            require(n_colors > k, || {
                format!("{k} changed objects need {} colors, catalog has {n_colors}", k + 1)
            })?;
        }
        TrainFamily::ColorOnly => {
            require(n_colors >= num_objects, || {
                format!("{num_objects} objects need {num_objects} colors, catalog has {n_colors}")
            })?;
            require(n_shapes > k, || {
                format!("{k} changed objects need {} shapes, catalog has {n_shapes}", k + 1)
            })?;
        }
    }
    match kind {
        SplitKind::NewConjunction => require(num_objects >= 2, || {
            "a new conjunction needs at least 2 objects in training".into()
        })?,
        SplitKind::ExtrapolationColor => require(n_colors > num_objects, || {
            format!("no held-out color: training uses all {n_colors} colors")
        })?,
        SplitKind::ExtrapolationShape => require(n_shapes > num_objects, || {
            format!("no held-out shape: training uses all {n_shapes} shapes")
        })?,
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = family.assignment(num_objects);
    let mut changed: Vec<usize> = rand::seq::index::sample(&mut rng, num_objects, k).into_vec();
    changed.sort_unstable();
    let mut test = train.clone();
    match kind {
        SplitKind::Iid => {}
        SplitKind::NewConjunction => {
            for &i in &changed {
                let others: Vec<usize> = (0..num_objects).filter(|&c| c != i).collect();
                test[i].color = *others.choose(&mut rng).expect("at least 2 objects");
            }
        }
        SplitKind::ExtrapolationColor => {
            for &i in &changed {
                test[i].color = rng.gen_range(num_objects..n_colors);
            }
        }
        SplitKind::ExtrapolationShape => {
            for &i in &changed {
                test[i].shape = rng.gen_range(num_objects..n_shapes);
            }
        }
        SplitKind::NewDimensionShapeTrain => {
            let mut pool: Vec<usize> = (1..n_colors).collect();
            pool.shuffle(&mut rng);
            for (&i, c) in changed.iter().zip(pool) {
                test[i].color = c;
            }
        }
        SplitKind::NewDimensionColorTrain => {
            let mut pool: Vec<usize> = (1..n_shapes).collect();
            pool.shuffle(&mut rng);
            for (&i, s) in changed.iter().zip(pool) {
                test[i].shape = s;
            }
        }
    }
    Ok(SplitSpec {
        kind,
        num_objects,
        num_changed: k,
        seed,
        catalog: catalog.clone(),
        train,
        test,
    })
}

/// Outcome of [`validate_split`]: one message per violated clause.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitReport {
    pub violations: Vec<String>,
}

impl SplitReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, clause: &str) -> bool {
        self.violations.iter().any(|v| v.contains(clause))
    }
}

/// Re-derives every invariant of the split's kind from the raw assignments.
pub fn validate_split(spec: &SplitSpec) -> SplitReport {
    let mut v = Vec::new();
    let n = spec.num_objects;
    if spec.train.len() != n || spec.test.len() != n {
        v.push(format!(
            "assignment length: expected {n}, train has {}, test has {}",
            spec.train.len(),
            spec.test.len()
        ));
        return SplitReport { violations: v };
    }
    for (role, assignment) in [("train", &spec.train), ("test", &spec.test)] {
        for a in assignment.iter() {
            if a.shape >= spec.catalog.shapes.len() || a.color >= spec.catalog.colors.len() {
                v.push(format!("unknown attribute id in {role}: {a:?}"));
            }
        }
        let unique: HashSet<_> = assignment.iter().collect();
        if unique.len() != assignment.len() {
            v.push(format!("duplicate pair in {role}"));
        }
    }
    if spec.num_changed > n {
        v.push(format!("k exceeds object count: {} > {n}", spec.num_changed));
    }
    let changed: Vec<usize> = (0..n).filter(|&i| spec.train[i] != spec.test[i]).collect();
    if changed.len() != spec.num_changed {
        v.push(format!(
            "changed count mismatch: {} objects differ, k = {}",
            changed.len(),
            spec.num_changed
        ));
    }

    let train_pairs: HashSet<ObjectAttr> = spec.train.iter().copied().collect();
    let train_shapes: HashSet<usize> = spec.train.iter().map(|a| a.shape).collect();
    let train_colors: HashSet<usize> = spec.train.iter().map(|a| a.color).collect();
    let distinct = |xs: &[ObjectAttr], f: fn(&ObjectAttr) -> usize| {
        xs.iter().map(f).collect::<HashSet<_>>().len()
    };

    match spec.kind {
        SplitKind::Iid => {
            if spec.num_changed != 0 {
                v.push("iid requires k = 0".into());
            }
            if spec.train != spec.test {
                v.push("iid test differs from train".into());
            }
        }
        SplitKind::NewConjunction => {
            for &i in &changed {
                let t = spec.test[i];
                if train_pairs.contains(&t) {
                    v.push(format!("conjunction seen in training: object {i} {t:?}"));
                }
                if !train_shapes.contains(&t.shape) {
                    v.push(format!("shape unseen in training: object {i}"));
                }
                if !train_colors.contains(&t.color) {
                    v.push(format!("color unseen in training: object {i}"));
                }
            }
        }
        SplitKind::ExtrapolationColor => {
            for &i in &changed {
                if train_colors.contains(&spec.test[i].color) {
                    v.push(format!("color seen in training: object {i}"));
                }
            }
        }
        SplitKind::ExtrapolationShape => {
            for &i in &changed {
                if train_shapes.contains(&spec.test[i].shape) {
                    v.push(format!("shape seen in training: object {i}"));
                }
            }
        }
        SplitKind::NewDimensionShapeTrain | SplitKind::NewDimensionColorTrain => {
            let shape_train = spec.kind == SplitKind::NewDimensionShapeTrain;
            let (varied, fixed): (fn(&ObjectAttr) -> usize, fn(&ObjectAttr) -> usize) = if shape_train {
                (|a| a.shape, |a| a.color)
            } else {
                (|a| a.color, |a| a.shape)
            };
            let (varied_name, fixed_name) = if shape_train {
                ("shape", "color")
            } else {
                ("color", "shape")
            };
            if distinct(&spec.train, fixed) != 1 {
                v.push(format!("train varies {fixed_name}"));
            }
            if n >= 2 && distinct(&spec.train, varied) < 2 {
                v.push(format!("train does not vary {varied_name}"));
            }
            if n >= 2 && (distinct(&spec.test, |a| a.shape) < 2 || distinct(&spec.test, |a| a.color) < 2) {
                v.push("test does not vary both dimensions".into());
            }
            for &i in &changed {
                if fixed(&spec.test[i]) == fixed(&spec.train[i]) {
                    v.push(format!("changed object kept the train {fixed_name}: object {i}"));
                }
            }
        }
    }
    SplitReport { violations: v }
}
