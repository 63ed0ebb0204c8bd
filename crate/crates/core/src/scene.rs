//! Static description of the world: bodies, tags, cameras, pose priors, and
//! the solver thresholds that travel with a dataset.
//!
//! A `Scene` is loaded once from a TOML document, validated eagerly, and
//! never mutated afterwards. All pose estimation state lives elsewhere; in
//! particular, tags discovered at runtime on the default body are recorded in
//! the graph, not here.
//!
//! File conventions: rotations are unit quaternions in `[x, y, z, w]` order
//! (scalar last); noise entries are standard deviations, rotation (radians)
//! separate from translation (meters).

use crate::camera::Intrinsics;
use crate::se3::{Pose, Rotation, Twist};
use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Diagonal noise model for a pose quantity: six standard deviations in
/// twist order (rotation radians first, then translation meters).
#[derive(Debug, Clone, Copy)]
pub struct Noise6 {
    pub sigmas: Vector6<f64>,
}

impl Noise6 {
    pub fn new(sigmas: Vector6<f64>) -> Self {
        Noise6 { sigmas }
    }

    /// Same σ for all rotation components and all translation components.
    pub fn isotropic(rot: f64, trans: f64) -> Self {
        Noise6 {
            sigmas: Vector6::new(rot, rot, rot, trans, trans, trans),
        }
    }

    /// Component-wise division by σ.
    pub fn whiten(&self, r: &Twist) -> Twist {
        r.component_div(&self.sigmas)
    }
}

/// A pose measurement with its uncertainty, as given in configuration.
#[derive(Debug, Clone, Copy)]
pub struct PosePrior {
    pub pose: Pose,
    pub noise: Noise6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyKind {
    Static,
    Dynamic,
}

/// A rigid object carrying tags and/or cameras.
#[derive(Debug, Clone)]
pub struct Body {
    pub name: String,
    pub kind: BodyKind,
    /// World-frame pose prior. Only static bodies may carry one in
    /// configuration; dynamic poses are constrained at runtime instead.
    pub prior: Option<PosePrior>,
    /// Unknown tags get attached to this body on first sight.
    pub default_tag_body: bool,
}

/// A fiducial marker attached to a body. The tag's pose variable is the
/// transform from tag frame to body frame and is always static.
#[derive(Debug, Clone)]
pub struct TagSpec {
    pub id: u32,
    pub size: f64,
    pub body: String,
    /// Tag-in-body pose prior.
    pub prior: Option<PosePrior>,
}

/// A camera rigidly attached to a body (its "rig").
#[derive(Debug, Clone)]
pub struct CameraSpec {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub rig: String,
    /// Camera-in-rig pose prior; optional, extrinsics are discoverable.
    pub extrinsic_prior: Option<PosePrior>,
}

/// Which reading of the planar ambiguity ratio rule to apply.
///
/// `Decisive` admits an observation only when the alternate planar solution
/// fits clearly worse than the best one (ratio below `1 − threshold`);
/// `Literal` rejects when the ratio exceeds the threshold itself. Both share
/// the view-angle scoping: past `max_ambiguous_view_angle_deg` the solutions
/// always separate and every observation is admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmbiguityRule {
    #[default]
    Decisive,
    Literal,
}

/// Tunables consumed by the initializer and solver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// A tag observation is ambiguous when the reprojection error ratio of
    /// its two planar pose solutions exceeds this.
    pub ambiguity_ratio_threshold: f64,
    /// Above this viewing angle (degrees off the tag normal) the two planar
    /// solutions separate cleanly and the ambiguity gate is bypassed.
    pub max_ambiguous_view_angle_deg: f64,
    pub ambiguity_rule: AmbiguityRule,
    /// Subgraph acceptance threshold on the mean squared whitened residual
    /// per degree of freedom.
    pub subgraph_error_threshold: f64,
    /// Corner detection noise σ in pixels.
    pub pixel_noise: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            ambiguity_ratio_threshold: 0.3,
            max_ambiguous_view_angle_deg: 60.0,
            ambiguity_rule: AmbiguityRule::default(),
            subgraph_error_threshold: 4.0,
            pixel_noise: 1.0,
        }
    }
}

/// Fully validated scene model.
#[derive(Debug, Clone)]
pub struct Scene {
    pub bodies: Vec<Body>,
    pub tags: Vec<TagSpec>,
    pub cameras: Vec<CameraSpec>,
    /// Side length assumed for tags discovered on the default body.
    pub default_tag_size: Option<f64>,
    pub settings: SolverSettings,
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read scene file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene config is not valid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scene at {path}: {problem}")]
    Validation { path: String, problem: String },
}

fn invalid(path: impl Into<String>, problem: impl Into<String>) -> SceneError {
    SceneError::Validation {
        path: path.into(),
        problem: problem.into(),
    }
}

impl Scene {
    pub fn load(path: &std::path::Path) -> Result<Scene, SceneError> {
        Scene::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml_str(doc: &str) -> Result<Scene, SceneError> {
        let raw: RawScene = toml::from_str(doc)?;
        raw.validate()
    }

    /// Serializes back to the config format. Loading the result reproduces
    /// the scene exactly (float values roundtrip bit-identically).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&RawScene::from_scene(self))
            .expect("scene serialization cannot fail")
    }

    pub fn body(&self, name: &str) -> Option<&Body> {
        self.bodies.iter().find(|b| b.name == name)
    }

    pub fn camera(&self, name: &str) -> Option<&CameraSpec> {
        self.cameras.iter().find(|c| c.name == name)
    }

    pub fn tag(&self, id: u32) -> Option<&TagSpec> {
        self.tags.iter().find(|t| t.id == id)
    }

    pub fn default_body(&self) -> Option<&Body> {
        self.bodies.iter().find(|b| b.default_tag_body)
    }

    /// Looks up the spec for a detected tag id. Unknown ids attach to the
    /// default body (prior-less, at the configured default size) when one is
    /// declared; otherwise the detection is to be ignored.
    pub fn resolve_tag(&self, tag_id: u32) -> Option<TagSpec> {
        if let Some(t) = self.tag(tag_id) {
            return Some(t.clone());
        }
        let default = self.default_body()?;
        let size = self
            .default_tag_size
            .expect("validated: default body requires defaults.tag_size");
        Some(TagSpec {
            id: tag_id,
            size,
            body: default.name.clone(),
            prior: None,
        })
    }

    /// Structural sanity warnings that are not hard errors.
    pub fn validate_solvability(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let anchored = self
            .bodies
            .iter()
            .any(|b| b.kind == BodyKind::Static && b.prior.is_some());
        if !anchored {
            warnings.push(
                "gauge not fixed: no static body carries a world-pose prior, so the world \
                 frame is undetermined up to a rigid motion"
                    .to_string(),
            );
        }
        warnings
    }
}

// --- raw config layer --------------------------------------------------------

pub(crate) const SCENE_FORMAT: &str = "fidslam-scene";
pub(crate) const SCENE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    #[serde(skip_serializing_if = "Option::is_none")]
    format: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    defaults: Option<RawDefaults>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solver: Option<SolverSettings>,
    #[serde(default)]
    bodies: Vec<RawBody>,
    #[serde(default)]
    tags: Vec<RawTag>,
    #[serde(default)]
    cameras: Vec<RawCamera>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDefaults {
    #[serde(skip_serializing_if = "Option::is_none")]
    tag_size: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBody {
    name: String,
    kind: BodyKind,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    default_tag_body: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    prior: Option<RawPrior>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTag {
    id: u32,
    size: f64,
    body: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    prior: Option<RawPrior>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCamera {
    name: String,
    rig: String,
    intrinsics: Intrinsics,
    #[serde(skip_serializing_if = "Option::is_none")]
    extrinsic_prior: Option<RawPrior>,
}

/// Pose-with-noise as written in config files: quaternion scalar-last,
/// sigmas given either as one scalar or per-axis triples.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    position: [f64; 3],
    rotation: [f64; 4],
    sigma_rotation: ScalarOrTriple,
    sigma_translation: ScalarOrTriple,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScalarOrTriple {
    Scalar(f64),
    Triple([f64; 3]),
}

impl ScalarOrTriple {
    fn triple(&self) -> [f64; 3] {
        match *self {
            ScalarOrTriple::Scalar(s) => [s, s, s],
            ScalarOrTriple::Triple(t) => t,
        }
    }
}

impl RawPrior {
    fn validate(&self, path: &str) -> Result<PosePrior, SceneError> {
        let [x, y, z, w] = self.rotation;
        let rotation = Rotation::from_quaternion_xyzw(x, y, z, w)
            .ok_or_else(|| invalid(path, "rotation quaternion has (near-)zero norm"))?;
        let sr = self.sigma_rotation.triple();
        let st = self.sigma_translation.triple();
        for s in sr.iter().chain(st.iter()) {
            if !(*s > 0.0) {
                return Err(invalid(path, "noise sigmas must be strictly positive"));
            }
        }
        Ok(PosePrior {
            pose: Pose::new(rotation, Vector3::from(self.position)),
            noise: Noise6::new(Vector6::new(sr[0], sr[1], sr[2], st[0], st[1], st[2])),
        })
    }

    fn from_prior(p: &PosePrior) -> RawPrior {
        let s = &p.noise.sigmas;
        RawPrior {
            position: [p.pose.translation.x, p.pose.translation.y, p.pose.translation.z],
            rotation: p.pose.rotation.quaternion_xyzw(),
            sigma_rotation: ScalarOrTriple::Triple([s[0], s[1], s[2]]),
            sigma_translation: ScalarOrTriple::Triple([s[3], s[4], s[5]]),
        }
    }
}

impl RawScene {
    fn validate(self) -> Result<Scene, SceneError> {
        if let Some(f) = &self.format {
            if f != SCENE_FORMAT {
                return Err(invalid("format", format!("expected \"{SCENE_FORMAT}\", got \"{f}\"")));
            }
        }
        if let Some(v) = self.version {
            if v != SCENE_VERSION {
                return Err(invalid("version", format!("unsupported version {v}")));
            }
        }

        let default_tag_size = self.defaults.as_ref().and_then(|d| d.tag_size);
        if let Some(s) = default_tag_size {
            if !(s > 0.0) {
                return Err(invalid("defaults.tag_size", "tag size must be positive"));
            }
        }

        let mut bodies = Vec::new();
        for (i, rb) in self.bodies.iter().enumerate() {
            let path = format!("bodies[{i}] ({})", rb.name);
            if bodies.iter().any(|b: &Body| b.name == rb.name) {
                return Err(invalid(path, format!("duplicate body name {:?}", rb.name)));
            }
            let prior = rb
                .prior
                .as_ref()
                .map(|p| p.validate(&format!("{path}.prior")))
                .transpose()?;
            if rb.kind == BodyKind::Dynamic && prior.is_some() {
                return Err(invalid(
                    path,
                    "dynamic bodies cannot carry a configured world-pose prior; \
                     time-dependent poses are constrained at runtime",
                ));
            }
            bodies.push(Body {
                name: rb.name.clone(),
                kind: rb.kind,
                prior,
                default_tag_body: rb.default_tag_body,
            });
        }

        let n_default = bodies.iter().filter(|b| b.default_tag_body).count();
        if n_default > 1 {
            return Err(invalid("bodies", "more than one default tag body"));
        }
        if n_default == 1 && default_tag_size.is_none() {
            return Err(invalid(
                "defaults.tag_size",
                "a default tag body is declared, so defaults.tag_size is required",
            ));
        }

        let mut tags = Vec::new();
        for (i, rt) in self.tags.iter().enumerate() {
            let path = format!("tags[{i}] (id {})", rt.id);
            if tags.iter().any(|t: &TagSpec| t.id == rt.id) {
                return Err(invalid(path, format!("duplicate tag id {}", rt.id)));
            }
            if !(rt.size > 0.0) {
                return Err(invalid(path, "tag size must be positive"));
            }
            if !bodies.iter().any(|b| b.name == rt.body) {
                return Err(invalid(path, format!("unknown body {:?}", rt.body)));
            }
            let prior = rt
                .prior
                .as_ref()
                .map(|p| p.validate(&format!("{path}.prior")))
                .transpose()?;
            tags.push(TagSpec {
                id: rt.id,
                size: rt.size,
                body: rt.body.clone(),
                prior,
            });
        }

        let mut cameras = Vec::new();
        for (i, rc) in self.cameras.iter().enumerate() {
            let path = format!("cameras[{i}] ({})", rc.name);
            if cameras.iter().any(|c: &CameraSpec| c.name == rc.name) {
                return Err(invalid(path, format!("duplicate camera name {:?}", rc.name)));
            }
            if !bodies.iter().any(|b| b.name == rc.rig) {
                return Err(invalid(path, format!("unknown rig body {:?}", rc.rig)));
            }
            let k = &rc.intrinsics;
            if !(k.fx > 0.0 && k.fy > 0.0) {
                return Err(invalid(format!("{path}.intrinsics"), "focal lengths must be positive"));
            }
            if k.width == 0 || k.height == 0 {
                return Err(invalid(format!("{path}.intrinsics"), "sensor size must be positive"));
            }
            if !(k.cx >= 0.0 && k.cx < k.width as f64 && k.cy >= 0.0 && k.cy < k.height as f64) {
                return Err(invalid(
                    format!("{path}.intrinsics"),
                    "principal point must lie inside the sensor",
                ));
            }
            let extrinsic_prior = rc
                .extrinsic_prior
                .as_ref()
                .map(|p| p.validate(&format!("{path}.extrinsic_prior")))
                .transpose()?;
            cameras.push(CameraSpec {
                name: rc.name.clone(),
                rig: rc.rig.clone(),
                intrinsics: *k,
                extrinsic_prior,
            });
        }

        let settings = self.solver.unwrap_or_default();
        let st = &settings;
        if !(st.ambiguity_ratio_threshold > 0.0 && st.ambiguity_ratio_threshold < 1.0) {
            return Err(invalid("solver.ambiguity_ratio_threshold", "must be in (0, 1)"));
        }
        if !(st.max_ambiguous_view_angle_deg > 0.0 && st.max_ambiguous_view_angle_deg <= 90.0) {
            return Err(invalid("solver.max_ambiguous_view_angle_deg", "must be in (0, 90]"));
        }
        if !(st.subgraph_error_threshold > 0.0) {
            return Err(invalid("solver.subgraph_error_threshold", "must be positive"));
        }
        if !(st.pixel_noise > 0.0) {
            return Err(invalid("solver.pixel_noise", "must be positive"));
        }

        Ok(Scene {
            bodies,
            tags,
            cameras,
            default_tag_size,
            settings,
        })
    }

    fn from_scene(scene: &Scene) -> RawScene {
        RawScene {
            format: Some(SCENE_FORMAT.to_string()),
            version: Some(SCENE_VERSION),
            defaults: scene.default_tag_size.map(|s| RawDefaults { tag_size: Some(s) }),
            solver: Some(scene.settings),
            bodies: scene
                .bodies
                .iter()
                .map(|b| RawBody {
                    name: b.name.clone(),
                    kind: b.kind,
                    default_tag_body: b.default_tag_body,
                    prior: b.prior.as_ref().map(RawPrior::from_prior),
                })
                .collect(),
            tags: scene
                .tags
                .iter()
                .map(|t| RawTag {
                    id: t.id,
                    size: t.size,
                    body: t.body.clone(),
                    prior: t.prior.as_ref().map(RawPrior::from_prior),
                })
                .collect(),
            cameras: scene
                .cameras
                .iter()
                .map(|c| RawCamera {
                    name: c.name.clone(),
                    rig: c.rig.clone(),
                    intrinsics: c.intrinsics,
                    extrinsic_prior: c.extrinsic_prior.as_ref().map(RawPrior::from_prior),
                })
                .collect(),
        }
    }
}
