//! Observation masks, keyframe signals and the masked input of the denoiser.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{BlockKind, FeatureLayout, NormalizationStats, SkeletonSpec, ROOT_BLOCK};
use crate::scalar::Scalar;

/// Keyframe signal `c` and binary mask `m` over an `N x F` clip.
///
/// `c` is zero wherever `m` is zero so that the masked sum is a plain select.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSpec<T> {
    signal: Array2<T>,
    mask: Array2<bool>,
    empty: bool,
}

impl<T: Scalar> ObservationSpec<T> {
    /// `c = ∅`: nothing observed.
    pub fn empty(frames: usize, width: usize) -> Self {
        Self {
            signal: Array2::zeros((frames, width)),
            mask: Array2::from_elem((frames, width), false),
            empty: true,
        }
    }

    /// Observes `values` wherever `mask` is set.
    pub fn from_values(values: ArrayView2<'_, T>, mask: Array2<bool>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::Shape(format!(
                "values {:?} and mask {:?} disagree",
                values.dim(),
                mask.dim()
            )));
        }
        let mut signal = Array2::zeros(values.dim());
        ndarray::Zip::from(&mut signal)
            .and(&values)
            .and(&mask)
            .for_each(|s, &v, &m| {
                if m {
                    *s = v;
                }
            });
        Ok(Self {
            signal,
            mask,
            empty: false,
        })
    }

    pub fn signal(&self) -> &Array2<T> {
        &self.signal
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn mask_values(&self) -> Array2<T> {
        self.mask.mapv(|m| if m { T::one() } else { T::zero() })
    }

    pub fn is_empty(&self) -> bool {
        self.empty || !self.mask.iter().any(|&m| m)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    /// Drops the condition (`c ← ∅`), keeping the shape.
    pub fn cleared(&self) -> Self {
        let (n, f) = self.dim();
        Self::empty(n, f)
    }

    /// Frames with at least one observed column.
    pub fn observed_frames(&self) -> Vec<usize> {
        self.mask
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&m| m))
            .map(|(i, _)| i)
            .collect()
    }

    /// Frames whose root planar position is observed.
    pub fn root_keyframes(&self) -> Vec<usize> {
        (0..self.mask.nrows())
            .filter(|&i| self.mask[[i, 1]] && self.mask[[i, 2]])
            .collect()
    }

    /// Maps the observed values into normalized feature space.
    pub fn normalized(&self, stats: &NormalizationStats<T>) -> Result<Self> {
        let z = stats.normalize_rows(self.signal.view())?;
        let mut out = Self::from_values(z.view(), self.mask.clone())?;
        out.empty = self.empty;
        Ok(out)
    }

    pub fn denormalized(&self, stats: &NormalizationStats<T>) -> Result<Self> {
        let x = stats.denormalize_rows(self.signal.view())?;
        let mut out = Self::from_values(x.view(), self.mask.clone())?;
        out.empty = self.empty;
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ObservationSpec<U> {
        ObservationSpec {
            signal: self.signal.mapv(|v| U::lit(v.as_f64())),
            mask: self.mask.clone(),
            empty: self.empty,
        }
    }
}

/// How many keyframes a random scheme reveals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyframeCount {
    /// Uniform over `1..=valid_length`.
    Uniform,
    /// Uniform over `lo..=hi`, clipped to the valid length.
    Range(usize, usize),
    Fixed(usize),
}

/// Joint selection of a keyframe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointSelection {
    All,
    Joints(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaskScheme {
    /// Full keyframes at randomly chosen frames.
    RandomFrames { count: KeyframeCount },
    /// Random frames and one random joint subset shared by those frames.
    RandomFramesAndJoints { count: KeyframeCount },
    /// Full keyframes at frames `0, spacing, 2·spacing, …`.
    EveryT { spacing: usize },
    /// The given joints on every valid frame.
    JointSubset { joints: Vec<usize> },
    /// Root block on every valid frame.
    RootTrajectory,
    /// Head and both wrists on every valid frame.
    VrJoints,
    Explicit { frames: Vec<(usize, JointSelection)> },
}

impl MaskScheme {
    /// Parses the CLI spelling: `randomK=5`, `random`, `everyT=20`, `root`,
    /// `vr`, `joint:<name>[,<name>…]`.
    pub fn parse(spec: &str, skel: &SkeletonSpec) -> Result<Self> {
        let spec = spec.trim();
        if let Some(k) = spec.strip_prefix("randomK=") {
            let k = k.parse().map_err(|_| Error::Invalid(format!("bad keyframe count in `{spec}`")))?;
            return Ok(MaskScheme::RandomFrames { count: KeyframeCount::Fixed(k) });
        }
        if let Some(t) = spec.strip_prefix("everyT=") {
            let spacing = t.parse().map_err(|_| Error::Invalid(format!("bad spacing in `{spec}`")))?;
            return Ok(MaskScheme::EveryT { spacing });
        }
        if let Some(names) = spec.strip_prefix("joint:") {
            let joints = names
                .split(',')
                .map(|n| skel.joint_id(n))
                .collect::<Result<Vec<_>>>()?;
            return Ok(MaskScheme::JointSubset { joints });
        }
        match spec {
            "random" => Ok(MaskScheme::RandomFrames { count: KeyframeCount::Uniform }),
            "random-joints" => Ok(MaskScheme::RandomFramesAndJoints { count: KeyframeCount::Uniform }),
            "root" => Ok(MaskScheme::RootTrajectory),
            "vr" => Ok(MaskScheme::VrJoints),
            other => Err(Error::Invalid(format!("unknown keyframing scheme `{other}`"))),
        }
    }
}

fn draw_count<R: Rng + ?Sized>(count: KeyframeCount, valid: usize, rng: &mut R) -> Result<usize> {
    match count {
        KeyframeCount::Uniform => Ok(rng.random_range(1..=valid)),
        KeyframeCount::Range(lo, hi) => {
            let hi = hi.min(valid);
            let lo = lo.max(1);
            if lo > hi {
                return Err(Error::InfeasibleScheme(format!(
                    "keyframe range {lo}..={hi} is empty for valid length {valid}"
                )));
            }
            Ok(rng.random_range(lo..=hi))
        }
        KeyframeCount::Fixed(k) if k == 0 || k > valid => Err(Error::InfeasibleScheme(format!(
            "{k} keyframes requested from {valid} valid frames"
        ))),
        KeyframeCount::Fixed(k) => Ok(k),
    }
}

/// Builds an `n_rows x F` mask for a clip with `valid_length` valid frames.
/// Deterministic for a given RNG state.
pub fn generate_mask<R: Rng + ?Sized>(
    scheme: &MaskScheme,
    skel: &SkeletonSpec,
    layout: &FeatureLayout,
    valid_length: usize,
    n_rows: usize,
    rng: &mut R,
) -> Result<Array2<bool>> {
    if valid_length == 0 {
        return Err(Error::InfeasibleScheme("clip has no valid frames".into()));
    }
    if valid_length > n_rows {
        return Err(Error::Shape(format!("valid length {valid_length} exceeds {n_rows} rows")));
    }
    let all: Vec<usize> = (0..skel.joint_count()).collect();
    let mut picks: Vec<(usize, Vec<usize>)> = Vec::new();
    match scheme {
        MaskScheme::RandomFrames { count } => {
            let k = draw_count(*count, valid_length, rng)?;
            for f in index::sample(rng, valid_length, k) {
                picks.push((f, all.clone()));
            }
        }
        MaskScheme::RandomFramesAndJoints { count } => {
            let k = draw_count(*count, valid_length, rng)?;
            let frames: Vec<usize> = index::sample(rng, valid_length, k).into_vec();
            let j = rng.random_range(1..=skel.joint_count());
            let joints = index::sample(rng, skel.joint_count(), j).into_vec();
            for f in frames {
                picks.push((f, joints.clone()));
            }
        }
        MaskScheme::EveryT { spacing } => {
            if *spacing == 0 {
                return Err(Error::InfeasibleScheme("spacing must be at least 1".into()));
            }
            for f in (0..valid_length).step_by(*spacing) {
                picks.push((f, all.clone()));
            }
        }
        MaskScheme::JointSubset { joints } => {
            for f in 0..valid_length {
                picks.push((f, joints.clone()));
            }
        }
        MaskScheme::RootTrajectory => {
            for f in 0..valid_length {
                picks.push((f, vec![skel.root]));
            }
        }
        MaskScheme::VrJoints => {
            let vr = skel.vr_joints()?.to_vec();
            for f in 0..valid_length {
                picks.push((f, vr.clone()));
            }
        }
        MaskScheme::Explicit { frames } => {
            for (f, sel) in frames {
                if *f >= valid_length {
                    return Err(Error::InfeasibleScheme(format!(
                        "keyframe {f} is beyond valid length {valid_length}"
                    )));
                }
                let joints = match sel {
                    JointSelection::All => all.clone(),
                    JointSelection::Joints(j) => j.clone(),
                };
                picks.push((*f, joints));
            }
        }
    }
    let mut mask = Array2::from_elem((n_rows, layout.width()), false);
    for (frame, joints) in picks {
        for c in joints_to_columns(&joints, layout)? {
            mask[[frame, c]] = true;
        }
    }
    Ok(mask)
}

/// [`generate_mask`] with a private ChaCha stream seeded by `seed`.
pub fn generate_mask_seeded(
    scheme: &MaskScheme,
    skel: &SkeletonSpec,
    layout: &FeatureLayout,
    valid_length: usize,
    n_rows: usize,
    seed: u64,
) -> Result<Array2<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_mask(scheme, skel, layout, valid_length, n_rows, &mut rng)
}

/// Feature columns observed when the given joints are observed.
///
/// The root block is always included since every other joint is expressed
/// relative to the root. The root's own velocity comes with any non-root
/// joint, and contact columns come with the foot or ankle of their side.
pub fn joints_to_columns(joints: &[usize], layout: &FeatureLayout) -> Result<Vec<usize>> {
    let j_count = layout.joint_count();
    if let Some(bad) = joints.iter().find(|&&j| j >= j_count) {
        return Err(Error::UnknownJoint(format!("joint id {bad} (skeleton has {j_count})")));
    }
    let root = layout.root();
    let mut on = vec![false; layout.width()];
    on[..ROOT_BLOCK].iter_mut().for_each(|v| *v = true);
    let mut any_local = false;
    for &j in joints {
        if j == root {
            continue;
        }
        any_local = true;
        for r in [
            layout.local_position_columns(j),
            layout.local_rotation_columns(j),
            layout.velocity_columns(j),
        ]
        .into_iter()
        .flatten()
        {
            r.for_each(|c| on[c] = true);
        }
        for c in layout.contact_side_columns(j) {
            on[c] = true;
        }
    }
    if any_local {
        if let Some(r) = layout.velocity_columns(root) {
            r.for_each(|c| on[c] = true);
        }
    }
    Ok(on.iter().enumerate().filter(|(_, &v)| v).map(|(c, _)| c).collect())
}

/// `m ⊙ c + (1 − m) ⊙ x`, computed as an elementwise select.
pub fn masked_sum<T: Scalar>(obs: &ObservationSpec<T>, x: &Array2<T>) -> Result<Array2<T>> {
    if obs.dim() != x.dim() {
        return Err(Error::Shape(format!("observation {:?} vs sample {:?}", obs.dim(), x.dim())));
    }
    if obs.is_empty() {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    ndarray::Zip::from(&mut out)
        .and(&obs.signal)
        .and(&obs.mask)
        .for_each(|o, &c, &m| {
            if m {
                *o = c;
            }
        });
    Ok(out)
}

/// Stacks the masked sample and the mask along the feature axis: `[N, 2F]`.
pub fn concat_mask<T: Scalar>(x: &Array2<T>, mask: &Array2<bool>) -> Result<Array2<T>> {
    if x.dim() != mask.dim() {
        return Err(Error::Shape(format!("sample {:?} vs mask {:?}", x.dim(), mask.dim())));
    }
    let m = mask.mapv(|b| if b { T::one() } else { T::zero() });
    Ok(concatenate(Axis(1), &[x.view(), m.view()]).expect("row counts agree"))
}

/// Splits a denoiser input back into sample and mask halves.
pub fn split_mask<T: Scalar>(input: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
    if input.ncols() % 2 != 0 {
        return Err(Error::Shape(format!("input width {} is odd", input.ncols())));
    }
    let f = input.ncols() / 2;
    Ok((input.slice(s![.., ..f]).to_owned(), input.slice(s![.., f..]).to_owned()))
}

// ---------------------------------------------------------------------------
// Keyframe JSON

/// Keyframe file accepted by the CLI and the generation service.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyframeFile {
    #[serde(default)]
    pub frames: Vec<KeyframeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeEntry {
    pub index: usize,
    #[serde(default = "JointsJson::all")]
    pub joints: JointsJson,
    /// Values in world units keyed by joint name, block name
    /// (`root_angle`, `root_xz`, `root_height`, `root_velocity`,
    /// `contacts_left`, `contacts_right`) or `features` for a full row.
    #[serde(default)]
    pub values: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JointsJson {
    Keyword(String),
    Names(Vec<String>),
}

impl JointsJson {
    pub fn all() -> Self {
        JointsJson::Keyword("all".into())
    }
}

/// A validation failure pointing at a request field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Columns a `values` key writes to, in value order.
pub fn value_key_columns(key: &str, skel: &SkeletonSpec, layout: &FeatureLayout) -> Option<Vec<usize>> {
    let block = |k: BlockKind| layout.block(k).map(|r| r.collect::<Vec<_>>());
    match key {
        "features" => Some((0..layout.width()).collect()),
        "root_angle" => block(BlockKind::RootAngle),
        "root_xz" => block(BlockKind::RootXz),
        "root_height" => block(BlockKind::RootHeight),
        "root_velocity" => layout.velocity_columns(skel.root).map(|r| r.collect()),
        "contacts_left" => layout.block(BlockKind::FootContacts).map(|r| vec![r.start, r.start + 1]),
        "contacts_right" => layout.block(BlockKind::FootContacts).map(|r| vec![r.start + 2, r.start + 3]),
        name => {
            let j = skel.joint_id(name).ok()?;
            if j == skel.root {
                return Some((0..ROOT_BLOCK).collect());
            }
            let mut cols = Vec::new();
            for r in [
                layout.local_position_columns(j),
                layout.local_rotation_columns(j),
                layout.velocity_columns(j),
            ]
            .into_iter()
            .flatten()
            {
                cols.extend(r);
            }
            Some(cols)
        }
    }
}

impl KeyframeFile {
    /// Validates against the layout and builds an observation in world
    /// units. Every observed column must receive a value.
    pub fn to_observation<T: Scalar>(
        &self,
        skel: &SkeletonSpec,
        layout: &FeatureLayout,
        length: usize,
        n_rows: usize,
    ) -> std::result::Result<ObservationSpec<T>, Vec<FieldError>> {
        let mut errors = Vec::new();
        let mut mask = Array2::from_elem((n_rows, layout.width()), false);
        let mut values = Array2::<T>::zeros((n_rows, layout.width()));
        let mut seen = vec![false; n_rows];
        for (i, kf) in self.frames.iter().enumerate() {
            let at = |field: &str| format!("keyframes[{i}].{field}");
            if kf.index >= length || kf.index >= n_rows {
                errors.push(FieldError::new(at("index"), format!("frame {} is outside 0..{}", kf.index, length)));
                continue;
            }
            if std::mem::replace(&mut seen[kf.index], true) {
                errors.push(FieldError::new(at("index"), format!("frame {} appears twice", kf.index)));
                continue;
            }
            let joints: Vec<usize> = match &kf.joints {
                JointsJson::Keyword(k) if k == "all" => (0..skel.joint_count()).collect(),
                JointsJson::Keyword(k) => {
                    errors.push(FieldError::new(at("joints"), format!("expected \"all\" or a list, got \"{k}\"")));
                    continue;
                }
                JointsJson::Names(names) => {
                    let mut ids = Vec::new();
                    for (k, n) in names.iter().enumerate() {
                        match skel.joint_id(n) {
                            Ok(id) => ids.push(id),
                            Err(_) => errors.push(FieldError::new(format!("keyframes[{i}].joints[{k}]"), format!("unknown joint `{n}`"))),
                        }
                    }
                    ids
                }
            };
            let cols = match joints_to_columns(&joints, layout) {
                Ok(c) => c,
                Err(e) => {
                    errors.push(FieldError::new(at("joints"), e.to_string()));
                    continue;
                }
            };
            let mut provided = vec![false; layout.width()];
            for (key, vals) in &kf.values {
                let path = format!("keyframes[{i}].values.{key}");
                let Some(targets) = value_key_columns(key, skel, layout) else {
                    errors.push(FieldError::new(path, "unknown joint or block name"));
                    continue;
                };
                if targets.len() != vals.len() {
                    errors.push(FieldError::new(path, format!("expected {} numbers, got {}", targets.len(), vals.len())));
                    continue;
                }
                if vals.iter().any(|v| !v.is_finite()) {
                    errors.push(FieldError::new(path, "values must be finite"));
                    continue;
                }
                for (&c, &v) in targets.iter().zip(vals) {
                    values[[kf.index, c]] = T::lit(v);
                    provided[c] = true;
                }
            }
            let missing: Vec<usize> = cols.iter().copied().filter(|&c| !provided[c]).collect();
            if !missing.is_empty() {
                errors.push(FieldError::new(
                    at("values"),
                    format!("{} observed columns have no value (first: {})", missing.len(), missing[0]),
                ));
                continue;
            }
            for c in cols {
                mask[[kf.index, c]] = true;
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        if self.frames.is_empty() {
            return Ok(ObservationSpec::empty(n_rows, layout.width()));
        }
        ObservationSpec::from_values(values.view(), mask).map_err(|e| vec![FieldError::new("keyframes", e.to_string())])
    }

    /// Keyframes copied from a reference clip (world units) at the frames
    /// and columns selected by `mask`, as full feature rows.
    pub fn from_reference<T: Scalar>(reference: ArrayView2<'_, T>, frames: &[(usize, JointsJson)]) -> Self {
        KeyframeFile {
            frames: frames
                .iter()
                .map(|(idx, joints)| KeyframeEntry {
                    index: *idx,
                    joints: joints.clone(),
                    values: BTreeMap::from([(
                        "features".to_string(),
                        reference.row(*idx).iter().map(|v| v.as_f64()).collect(),
                    )]),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn canon() -> (SkeletonSpec, FeatureLayout) {
        let s = SkeletonSpec::humanml3d();
        let l = FeatureLayout::canonical(&s);
        (s, l)
    }

    #[test]
    fn root_only_observes_first_four_columns() {
        let (_, l) = canon();
        assert_eq!(joints_to_columns(&[0], &l).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn all_joints_cover_all_columns() {
        let (s, l) = canon();
        let all: Vec<usize> = (0..s.joint_count()).collect();
        assert_eq!(joints_to_columns(&all, &l).unwrap(), (0..263).collect::<Vec<_>>());
    }

    #[test]
    fn left_foot_matches_index_arithmetic() {
        let (s, l) = canon();
        let foot = s.joint_id("left_foot").unwrap();
        assert_eq!(foot, 10);
        // blocks: root 0..4, positions 4..67, rotations 67..193, velocities 193..259, contacts 259..263
        let mut expected: Vec<usize> = (0..4).collect();
        expected.extend(4 + 3 * 9..4 + 3 * 10); // slot 9 = joint 10 without root
        expected.extend(67 + 6 * 9..67 + 6 * 10);
        expected.extend(193..196); // root velocity
        expected.extend(193 + 3 * 10..193 + 3 * 11);
        expected.extend([259, 260]);
        expected.sort();
        assert_eq!(joints_to_columns(&[foot], &l).unwrap(), expected);
        assert!(joints_to_columns(&[22], &l).is_err());
    }

    #[test]
    fn full_random_pick_observes_every_frame() {
        let (s, l) = canon();
        let m = generate_mask_seeded(&MaskScheme::RandomFrames { count: KeyframeCount::Fixed(30) }, &s, &l, 30, 40, 3).unwrap();
        for i in 0..30 {
            assert!(m.row(i).iter().all(|&v| v));
        }
        assert!(m.slice(s![30.., ..]).iter().all(|&v| !v));
    }

    #[test]
    fn every_twenty_on_196() {
        let (s, l) = canon();
        let m = generate_mask_seeded(&MaskScheme::EveryT { spacing: 20 }, &s, &l, 196, 196, 0).unwrap();
        let obs = ObservationSpec::<f32>::from_values(Array2::zeros((196, 263)).view(), m).unwrap();
        assert_eq!(obs.observed_frames(), (0..10).map(|k| 20 * k).collect::<Vec<_>>());
    }

    #[test]
    fn infeasible_schemes_error() {
        let (s, l) = canon();
        let too_many = MaskScheme::RandomFrames { count: KeyframeCount::Fixed(11) };
        assert!(generate_mask_seeded(&too_many, &s, &l, 10, 10, 0).is_err());
        assert!(generate_mask_seeded(&MaskScheme::EveryT { spacing: 0 }, &s, &l, 10, 10, 0).is_err());
        let beyond = MaskScheme::Explicit { frames: vec![(12, JointSelection::All)] };
        assert!(generate_mask_seeded(&beyond, &s, &l, 10, 20, 0).is_err());
    }

    #[test]
    fn marginal_frame_probability_matches_two_stage_law() {
        // P(frame observed) = E[k]/n with k ~ U{1..n}: (n + 1) / (2n).
        let (s, l) = canon();
        let n = 50;
        let trials = 10_000;
        let p = (n as f64 + 1.0) / (2.0 * n as f64);
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let mut hits = vec![0usize; n];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let scheme = MaskScheme::RandomFrames { count: KeyframeCount::Uniform };
        for _ in 0..trials {
            let m = generate_mask(&scheme, &s, &l, n, n, &mut rng).unwrap();
            for (i, h) in hits.iter_mut().enumerate() {
                *h += m[[i, 0]] as usize;
            }
        }
        for h in hits {
            let freq = h as f64 / trials as f64;
            assert!((freq - p).abs() < 3.0 * sigma, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn generated_masks_respect_root_rule_and_padding() {
        let (s, l) = canon();
        let schemes = [
            MaskScheme::RandomFrames { count: KeyframeCount::Uniform },
            MaskScheme::RandomFramesAndJoints { count: KeyframeCount::Range(2, 8) },
            MaskScheme::VrJoints,
            MaskScheme::RootTrajectory,
            MaskScheme::JointSubset { joints: vec![20] },
        ];
        for (k, scheme) in schemes.iter().enumerate() {
            for seed in 0..20 {
                let m = generate_mask_seeded(scheme, &s, &l, 33, 40, seed).unwrap();
                let again = generate_mask_seeded(scheme, &s, &l, 33, 40, seed).unwrap();
                assert_eq!(m, again, "scheme {k} not deterministic");
                for (i, row) in m.axis_iter(Axis(0)).enumerate() {
                    if i >= 33 {
                        assert!(row.iter().all(|&v| !v));
                    }
                    if row.iter().any(|&v| v) {
                        assert!(row.slice(s![..4]).iter().all(|&v| v));
                    }
                }
            }
        }
    }

    #[test]
    fn masked_sum_cases() {
        let x = Array::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let c = Array::from_shape_fn((4, 3), |(i, j)| -((i + j) as f64) - 0.5);
        let full = ObservationSpec::from_values(c.view(), Array2::from_elem((4, 3), true)).unwrap();
        assert_eq!(masked_sum(&full, &x).unwrap(), c);
        assert_eq!(masked_sum(&ObservationSpec::empty(4, 3), &x).unwrap(), x);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = Array::from_shape_fn((4, 3), |_| rng.random_bool(0.5));
        let obs = ObservationSpec::from_values(c.view(), mask.clone()).unwrap();
        let out = masked_sum(&obs, &x).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let want = if mask[[i, j]] { c[[i, j]] } else { x[[i, j]] };
                assert_eq!(out[[i, j]], want);
            }
        }
        assert_eq!(masked_sum(&obs, &out).unwrap(), out);
        assert!(masked_sum(&obs, &Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn concat_and_split() {
        let z = concat_mask(&Array2::<f32>::zeros((5, 4)), &Array2::from_elem((5, 4), false)).unwrap();
        assert_eq!(z, Array2::<f32>::zeros((5, 8)));
        let x = Array::from_shape_fn((5, 4), |(i, j)| (i + j) as f32);
        let m = Array::from_shape_fn((5, 4), |(i, j)| (i + j) % 2 == 0);
        let joined = concat_mask(&x, &m).unwrap();
        let (a, b) = split_mask(&joined).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, m.mapv(|v| v as u8 as f32));
        assert!(concat_mask(&x, &Array2::from_elem((4, 4), false)).is_err());
    }

    #[test]
    fn keyframe_json_validates() {
        let (s, l) = canon();
        let json = r#"{"frames":[
            {"index": 0, "joints": ["root"], "values": {"root": [0.0, 1.0, 2.0, 0.9]}},
            {"index": 70, "joints": "all", "values": {}}
        ]}"#;
        let kf: KeyframeFile = serde_json::from_str(json).unwrap();
        let errs = kf.to_observation::<f32>(&s, &l, 60, 64).unwrap_err();
        assert_eq!(errs[0].path, "keyframes[1].index");

        let ok: KeyframeFile = serde_json::from_str(
            r#"{"frames":[{"index": 3, "joints": ["root"], "values": {"root_xz": [1.0, 2.0], "root_angle": [0.5], "root_height": [0.9]}}]}"#,
        )
        .unwrap();
        let obs = ok.to_observation::<f64>(&s, &l, 60, 64).unwrap();
        assert_eq!(obs.root_keyframes(), vec![3]);
        assert_eq!(obs.signal()[[3, 1]], 1.0);
        assert_eq!(obs.signal()[[3, 0]], 0.5);

        let missing: KeyframeFile = serde_json::from_str(
            r#"{"frames":[{"index": 3, "joints": ["root", "left wrist"], "values": {"root": [0, 0, 0, 1]}}]}"#,
        )
        .unwrap();
        let errs = missing.to_observation::<f64>(&s, &l, 60, 64).unwrap_err();
        assert_eq!(errs[0].path, "keyframes[0].values");

        let empty = KeyframeFile::default().to_observation::<f64>(&s, &l, 60, 64).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn scheme_parsing() {
        let s = SkeletonSpec::humanml3d();
        assert_eq!(MaskScheme::parse("randomK=5", &s).unwrap(), MaskScheme::RandomFrames { count: KeyframeCount::Fixed(5) });
        assert_eq!(MaskScheme::parse("everyT=20", &s).unwrap(), MaskScheme::EveryT { spacing: 20 });
        assert_eq!(MaskScheme::parse("joint:right_wrist", &s).unwrap(), MaskScheme::JointSubset { joints: vec![21] });
        assert!(MaskScheme::parse("bogus", &s).is_err());
    }
}
