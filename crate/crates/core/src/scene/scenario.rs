use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::arena::{ArenaSpec, Bounds, Distractor, LaserSpec, PanelPlacement, Pose2, RobotSpec};
use super::panel_face::{PanelSceneSpec, PanelSide, ValveSpec, WrenchSpec, HEAD_RADIUS_RATIO, WRENCH_COUNT};
use crate::error::{Error, Result};
use crate::geometry::{wrap_deg, Vec3};
use crate::seed;

/// Jaw sizes the generator draws the non-usable wrenches from.
pub const JAW_CATALOGUE_MM: [f64; 10] = [18.0, 19.0, 20.0, 21.0, 22.0, 24.0, 26.0, 27.0, 30.0, 32.0];

/// One arena plus the panel contents, robot and patrol route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub start: Pose2,
    pub patrol: Vec<Pose2>,
    pub laser: LaserSpec,
    pub robot: RobotSpec,
    pub arena: ArenaSpec,
    pub scene: PanelSceneSpec,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.arena.validate()?;
        self.laser.validate()?;
        self.scene.validate()?;
        if self.patrol.is_empty() {
            return Err(Error::Config("patrol route needs at least one waypoint".into()));
        }
        if !self.arena.bounds.contains(self.start.x_m, self.start.y_m) {
            return Err(Error::Config("robot start lies outside the arena".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("scenario encoding: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Scenario> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Scenario::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Knobs for [`generate_scenario`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub distractors: usize,
    pub arena_width_m: f64,
    pub arena_height_m: f64,
    pub panel_width_m: f64,
    pub panel_thickness_m: f64,
    pub target_jaw_mm: f64,
    /// Face carrying the wrenches; `None` draws it at random.
    pub wrench_side: Option<PanelSide>,
    /// Robot start distance from the panel, meters.
    pub start_range_m: (f64, f64),
    /// Distractor distance from the robot start, meters.
    pub distractor_range_m: (f64, f64),
    /// Max tilt of the hanging wrenches away from vertical, degrees.
    pub wrench_tilt_deg: f64,
    pub slot_spacing_mm: f64,
    /// Smallest angle between the panel's long axis and the line of sight
    /// from the start, degrees. Near zero the scan sees only the panel's
    /// end, which no 2D scan can tell from a post.
    pub panel_min_view_deg: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            distractors: 4,
            arena_width_m: 50.0,
            arena_height_m: 60.0,
            panel_width_m: 1.2,
            panel_thickness_m: 0.1,
            target_jaw_mm: 24.0,
            wrench_side: Some(PanelSide::Front),
            start_range_m: (4.0, 8.0),
            distractor_range_m: (4.0, 9.0),
            wrench_tilt_deg: 10.0,
            slot_spacing_mm: 90.0,
            panel_min_view_deg: 25.0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.panel_width_m > self.panel_thickness_m && self.panel_thickness_m > 0.0) {
            return Err(Error::Config("panel needs width > thickness > 0".into()));
        }
        if !(self.arena_width_m > 20.0 && self.arena_height_m > 20.0) {
            return Err(Error::Config("arena must be at least 20 m on each side".into()));
        }
        if !(self.start_range_m.0 > 1.0 && self.start_range_m.1 >= self.start_range_m.0) {
            return Err(Error::Config("invalid start range".into()));
        }
        if !(self.distractor_range_m.0 > 1.0 && self.distractor_range_m.1 >= self.distractor_range_m.0) {
            return Err(Error::Config("invalid distractor range".into()));
        }
        if self.distractors > 12 {
            return Err(Error::Config("at most 12 distractors".into()));
        }
        if !JAW_CATALOGUE_MM.contains(&self.target_jaw_mm) {
            return Err(Error::Config(format!("target jaw {} mm is not in the catalogue", self.target_jaw_mm)));
        }
        if !(0.0..=80.0).contains(&self.panel_min_view_deg) {
            return Err(Error::Config("panel view angle must lie in [0, 80] degrees".into()));
        }
        if !(0.0..=30.0).contains(&self.wrench_tilt_deg) || !(self.slot_spacing_mm > 0.0) {
            return Err(Error::Config("invalid wrench layout".into()));
        }
        Ok(())
    }
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

/// Jaw sizes at least this far from the target are never mistaken for it.
pub const JAW_SEPARATION_MM: f64 = 3.0;

/// Random arena with the panel, distractors and a robot start, plus a
/// random panel face layout.
pub fn generate_scenario(params: &GenParams, seed: u64) -> Result<Scenario> {
    params.validate()?;
    let mut rng = seed::rng_for(seed, "scenario");
    let (hw, hh) = (params.arena_width_m / 2.0, params.arena_height_m / 2.0);
    let bounds = Bounds { min_x_m: -hw, min_y_m: -hh, max_x_m: hw, max_y_m: hh };

    let start = Pose2::new(
        round_to(rng.random_range(-3.0..3.0), 1e-3),
        round_to(rng.random_range(-3.0..3.0), 1e-3),
        round_to(rng.random_range(-180.0..180.0), 0.1),
    );

    // One bearing sector per object around the start keeps objects from
    // hiding each other.
    let n_obj = params.distractors + 1;
    let sector = 360.0 / n_obj as f64;
    let offset: f64 = rng.random_range(0.0..360.0);
    let place = |k: usize, range: (f64, f64), rng: &mut seed::Rng| {
        let b = (offset + k as f64 * sector + rng.random_range(-0.2..0.2) * sector).to_radians();
        let r = rng.random_range(range.0..=range.1);
        (round_to(start.x_m + r * b.cos(), 1e-3), round_to(start.y_m + r * b.sin(), 1e-3))
    };
    let (px, py) = place(0, params.start_range_m, &mut rng);
    let sight = (py - start.y_m).atan2(px - start.x_m).to_degrees();
    let heading = loop {
        let h = round_to(rng.random_range(0.0..180.0), 0.1);
        let view = wrap_deg(h - sight).abs();
        if view.min(180.0 - view) >= params.panel_min_view_deg {
            break h;
        }
    };
    let panel = PanelPlacement {
        x_m: px,
        y_m: py,
        heading_deg: heading,
        width_m: params.panel_width_m,
        thickness_m: params.panel_thickness_m,
    };
    let mut distractors = Vec::with_capacity(params.distractors);
    for k in 1..n_obj {
        let (x, y) = place(k, params.distractor_range_m, &mut rng);
        let heading = round_to(rng.random_range(0.0..180.0), 0.1);
        let (length, thickness) = match rng.random_range(0..3) {
            0 => (rng.random_range(2.5..4.5), rng.random_range(0.1..0.3)),
            1 => {
                let l: f64 = rng.random_range(0.4..0.7);
                (l, l * rng.random_range(0.8..1.0))
            }
            _ => (rng.random_range(0.2..0.5), 0.0),
        };
        distractors.push(Distractor {
            x_m: x,
            y_m: y,
            heading_deg: heading,
            length_m: round_to(length, 1e-3),
            thickness_m: round_to(thickness, 1e-3),
        });
    }
    let arena = ArenaSpec { bounds, walls: bounds.walls(), panel, distractors };

    let patrol = vec![
        start,
        Pose2::new(
            round_to(start.x_m + rng.random_range(-2.0..2.0), 1e-3),
            round_to(start.y_m + rng.random_range(-2.0..2.0), 1e-3),
            round_to(rng.random_range(-180.0..180.0), 0.1),
        ),
    ];

    let scene = generate_panel_scene(params, &mut rng);
    let scenario = Scenario { start, patrol, laser: LaserSpec::default(), robot: RobotSpec::default(), arena, scene };
    scenario.validate()?;
    Ok(scenario)
}

fn generate_panel_scene(params: &GenParams, rng: &mut seed::Rng) -> PanelSceneSpec {
    let target = params.target_jaw_mm;
    let mut others: Vec<f64> = JAW_CATALOGUE_MM
        .iter()
        .copied()
        .filter(|j| (j - target).abs() >= JAW_SEPARATION_MM)
        .collect();
    others.shuffle(rng);
    let mut jaws = vec![target, target];
    jaws.extend(others.into_iter().take(WRENCH_COUNT - 2));
    jaws.shuffle(rng);
    let usable: Vec<usize> = (0..WRENCH_COUNT).filter(|&i| jaws[i] == target).collect();
    let (target_index, backup_index) = if rng.random_bool(0.5) { (usable[0], usable[1]) } else { (usable[1], usable[0]) };

    let row_x = -150.0;
    let wrenches = jaws
        .iter()
        .enumerate()
        .map(|(k, &jaw)| WrenchSpec {
            jaw_mm: jaw,
            handle_length_mm: (4.0 * HEAD_RADIUS_RATIO * jaw).round(),
            x_mm: row_x + (k as f64 - 2.5) * params.slot_spacing_mm,
            y_mm: 0.0,
            orientation_deg: round_to(-90.0 + rng.random_range(-params.wrench_tilt_deg..=params.wrench_tilt_deg), 0.01),
        })
        .collect();
    let wrench_side = params
        .wrench_side
        .unwrap_or_else(|| if rng.random_bool(0.5) { PanelSide::Front } else { PanelSide::Back });
    PanelSceneSpec {
        wrench_side,
        wrench_standoff_mm: 40.0,
        target_jaw_mm: target,
        target_index,
        backup_index,
        wrenches,
        valve: ValveSpec {
            stem_edge_mm: 32.0,
            flange_diameter_mm: 90.0,
            stem_height_mm: 40.0,
            x_mm: 350.0,
            y_mm: 0.0,
            stem_angle_deg: round_to(rng.random_range(0.0..90.0), 0.01) % 90.0,
        },
    }
}

/// ASCII xyz rows, one point per line.
pub fn xyz_string(points: &[Vec3]) -> String {
    let mut s = String::with_capacity(points.len() * 30);
    for p in points {
        let _ = writeln!(s, "{:.6} {:.6} {:.6}", p.x, p.y, p.z);
    }
    s
}

pub fn parse_xyz(text: &str) -> Result<Vec<Vec3>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("xyz line {}: {e}", i + 1)))?;
            if v.len() != 3 {
                return Err(Error::Parse(format!("xyz line {} has {} fields", i + 1, v.len())));
            }
            Ok(Vec3::new(v[0], v[1], v[2]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_round_trips() {
        let s = generate_scenario(&GenParams::default(), 11).unwrap();
        let text = s.to_toml().unwrap();
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
        assert_eq!(s.scene.wrenches.len(), 6);
        assert_eq!(s.scene.usable_indices().len(), 2);
    }

    #[test]
    fn seeds_change_wrench_order() {
        let jaws = |seed| {
            generate_scenario(&GenParams::default(), seed)
                .unwrap()
                .scene
                .wrenches
                .iter()
                .map(|w| w.jaw_mm)
                .collect::<Vec<_>>()
        };
        assert!((1..6).any(|s| jaws(s) != jaws(0)));
    }

    #[test]
    fn other_jaws_are_separated_from_target() {
        for seed in 0..20 {
            let s = generate_scenario(&GenParams::default(), seed).unwrap();
            for (i, w) in s.scene.wrenches.iter().enumerate() {
                if !s.scene.usable_indices().contains(&i) {
                    assert!((w.jaw_mm - 24.0).abs() >= JAW_SEPARATION_MM);
                }
            }
        }
    }

    #[test]
    fn xyz_round_trip() {
        let pts = vec![Vec3::new(0.5, -1.25, 3.0), Vec3::new(1e-6, 0.0, -2.0)];
        assert_eq!(parse_xyz(&xyz_string(&pts)).unwrap(), pts);
        assert!(parse_xyz("1 2\n").is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = GenParams { panel_thickness_m: 2.0, ..GenParams::default() };
        assert!(matches!(generate_scenario(&p, 1), Err(Error::Config(_))));
    }
}
