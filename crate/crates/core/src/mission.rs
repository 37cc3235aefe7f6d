//! Mission state machine, patrol and valve-rotation waypoints, and the
//! simulated closed loop tying every perception stage together.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cascade::{detect, Cascade, DetectParams};
use crate::error::{Error, Result};
use crate::geometry::{angular_distance, PinholeCamera, Vec3};
use crate::image::BBox;
use crate::panel::{facing_side, find_panel, simulate_docking, DockingEstimate, DockingParams, PanelFinderParams};
use crate::scene::{
    handle_centroid_truth, head_bbox_truth, merged_base_scan, render_panel_image, synthesize_handle_cloud, valve_roi,
    CloudSpec, Intrinsics, PanelSceneSpec, PanelSide, Pose2, RenderOptions, Scenario,
};
use crate::seed;
use crate::valve::{
    estimate_valve_stereo, expected_edge_px, valve_rig, ValveEstimate, ValveParams, VALVE_BASELINE_M,
    VALVE_CAMERA_DEPTH_M,
};
use crate::wrench::{
    accumulate_median, observe_wrench, select_target, wrench_camera, AccumulatedEstimate, WrenchParams, MEDIAN_WINDOW,
    WRENCH_CAMERA_DEPTH_M,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MissionState {
    NavigatePatrol,
    ApproachPanel,
    Dock,
    InspectPanel,
    ChangeSide,
    RecognizeWrench,
    GraspWrench,
    AlignValve,
    OperateValve,
    WrenchLostRecovery,
    EmergencyStop,
    Done,
}

impl MissionState {
    pub const ALL: [MissionState; 12] = [
        MissionState::NavigatePatrol,
        MissionState::ApproachPanel,
        MissionState::Dock,
        MissionState::InspectPanel,
        MissionState::ChangeSide,
        MissionState::RecognizeWrench,
        MissionState::GraspWrench,
        MissionState::AlignValve,
        MissionState::OperateValve,
        MissionState::WrenchLostRecovery,
        MissionState::EmergencyStop,
        MissionState::Done,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, MissionState::Done | MissionState::EmergencyStop)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MissionEvent {
    PanelFound,
    PanelNotFound,
    Docked,
    WrenchesVisible,
    WrenchesNotVisible,
    TargetRecognized,
    GraspOk,
    GraspWeak,
    WrenchLost,
    ValveAligned,
    RotationComplete,
    Emergency,
    Tick,
}

impl MissionEvent {
    pub const ALL: [MissionEvent; 13] = [
        MissionEvent::PanelFound,
        MissionEvent::PanelNotFound,
        MissionEvent::Docked,
        MissionEvent::WrenchesVisible,
        MissionEvent::WrenchesNotVisible,
        MissionEvent::TargetRecognized,
        MissionEvent::GraspOk,
        MissionEvent::GraspWeak,
        MissionEvent::WrenchLost,
        MissionEvent::ValveAligned,
        MissionEvent::RotationComplete,
        MissionEvent::Emergency,
        MissionEvent::Tick,
    ];
}

impl fmt::Display for MissionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for MissionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Explicit edges of the machine. Pairs missing from the map self-loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionTable {
    pub edges: BTreeMap<(MissionState, MissionEvent), MissionState>,
}

impl TransitionTable {
    pub fn standard() -> Self {
        use MissionEvent as E;
        use MissionState as S;
        let mut edges = BTreeMap::new();
        let list = [
            (S::NavigatePatrol, E::PanelFound, S::ApproachPanel),
            (S::NavigatePatrol, E::PanelNotFound, S::NavigatePatrol),
            (S::NavigatePatrol, E::Tick, S::NavigatePatrol),
            (S::ApproachPanel, E::Tick, S::Dock),
            (S::ApproachPanel, E::PanelNotFound, S::NavigatePatrol),
            (S::Dock, E::Docked, S::InspectPanel),
            (S::Dock, E::PanelNotFound, S::NavigatePatrol),
            (S::InspectPanel, E::WrenchesVisible, S::RecognizeWrench),
            (S::InspectPanel, E::WrenchesNotVisible, S::ChangeSide),
            (S::ChangeSide, E::Docked, S::InspectPanel),
            (S::ChangeSide, E::PanelNotFound, S::NavigatePatrol),
            (S::RecognizeWrench, E::TargetRecognized, S::GraspWrench),
            (S::RecognizeWrench, E::WrenchesNotVisible, S::ChangeSide),
            (S::GraspWrench, E::GraspOk, S::AlignValve),
            (S::GraspWrench, E::GraspWeak, S::Done),
            (S::GraspWrench, E::WrenchLost, S::WrenchLostRecovery),
            (S::AlignValve, E::ValveAligned, S::OperateValve),
            (S::AlignValve, E::WrenchLost, S::WrenchLostRecovery),
            (S::OperateValve, E::RotationComplete, S::Done),
            (S::OperateValve, E::WrenchLost, S::WrenchLostRecovery),
            (S::OperateValve, E::Tick, S::OperateValve),
            (S::WrenchLostRecovery, E::Tick, S::RecognizeWrench),
            (S::WrenchLostRecovery, E::WrenchLost, S::Done),
        ];
        for (s, e, t) in list {
            edges.insert((s, e), t);
        }
        for s in MissionState::ALL {
            edges.insert((s, E::Emergency), S::EmergencyStop);
        }
        TransitionTable { edges }
    }

    pub fn get(&self, state: MissionState, event: MissionEvent) -> Option<MissionState> {
        self.edges.get(&(state, event)).copied()
    }
}

impl Default for TransitionTable {
    fn default() -> Self {
        TransitionTable::standard()
    }
}

/// Table lookup; an undefined pair keeps the state and logs a warning.
pub fn step(state: MissionState, event: MissionEvent, table: &TransitionTable) -> MissionState {
    match table.get(state, event) {
        Some(next) => next,
        None => {
            log::warn!("event {event} ignored in state {state}");
            state
        }
    }
}

/// Cyclic successor of `current` in the patrol route.
pub fn patrol_next(waypoints: &[Pose2], current: usize) -> Result<(usize, Pose2)> {
    if waypoints.is_empty() {
        return Err(Error::Config("patrol route needs at least one waypoint".into()));
    }
    let next = (current + 1) % waypoints.len();
    Ok((next, waypoints[next]))
}

/// End-effector pose on the rotation circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationWaypoint {
    /// Polar angle about the valve center in the face plane, degrees,
    /// accumulated (not wrapped) from the start angle.
    pub angle_deg: f64,
    pub position: Vec3,
    /// Unit direction of travel.
    pub tangent: Vec3,
}

/// `n` poses on the circle of radius `r` about `center` (face plane,
/// `Z` toward the viewer), starting at `start_angle_deg` and stepping
/// `360/n` degrees; the step after the last pose closes the full turn.
/// Clockwise as seen from the viewer.
pub fn valve_rotation_waypoints(
    center: Vec3,
    r: f64,
    n: usize,
    clockwise: bool,
    start_angle_deg: f64,
) -> Result<Vec<RotationWaypoint>> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Config(format!("rotation radius must be positive, got {r}")));
    }
    if n < 4 {
        return Err(Error::Config(format!("rotation needs at least 4 waypoints, got {n}")));
    }
    let sign = if clockwise { -1.0 } else { 1.0 };
    let step = sign * 360.0 / n as f64;
    Ok((0..n)
        .map(|k| {
            let a = start_angle_deg + step * k as f64;
            let (s, c) = a.to_radians().sin_cos();
            RotationWaypoint {
                angle_deg: a,
                position: center + Vec3::new(r * c, r * s, 0.0),
                tangent: Vec3::new(-s * sign, c * sign, 0.0),
            }
        })
        .collect())
}

/// How the wrench heads are located in the inspection image.
#[derive(Clone, Copy, Debug)]
pub enum HeadLocator<'a> {
    /// Projected head boxes of the scene.
    Truth,
    Cascade(&'a Cascade, DetectParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionConfig {
    pub finder: PanelFinderParams,
    pub docking: DockingParams,
    /// Patrol waypoint visits before giving up on the panel.
    pub max_patrol_visits: usize,
    /// Distance of the side-change start pose from the panel, meters.
    pub change_side_range_m: f64,
    pub render: RenderOptions,
    pub cloud: CloudSpec,
    pub wrench: WrenchParams,
    pub frames: usize,
    pub width_tolerance_mm: f64,
    /// Largest camera placement error taken over from docking, meters.
    pub camera_offset_limit_m: f64,
    pub valve: ValveParams,
    pub valve_roi_margin: f64,
    pub slip_probability: f64,
    /// Sigma of the execution error added to the perceived grasp error.
    pub grasp_noise_mm: f64,
    pub correct_grasp_mm: f64,
    pub weak_grasp_mm: f64,
    pub rotation_waypoints: usize,
    pub clockwise: bool,
}

impl Default for MissionConfig {
    fn default() -> Self {
        MissionConfig {
            finder: PanelFinderParams::default(),
            docking: DockingParams::default(),
            max_patrol_visits: 6,
            change_side_range_m: 2.0,
            render: RenderOptions::default(),
            cloud: CloudSpec::default(),
            wrench: WrenchParams::default(),
            frames: MEDIAN_WINDOW,
            width_tolerance_mm: 1.5,
            camera_offset_limit_m: 0.03,
            valve: ValveParams::default(),
            valve_roi_margin: 0.2,
            slip_probability: 0.1,
            grasp_noise_mm: 2.0,
            correct_grasp_mm: 5.0,
            weak_grasp_mm: 15.0,
            rotation_waypoints: 36,
            clockwise: true,
        }
    }
}

impl MissionConfig {
    /// Fault-free variant: noiseless renders and clouds, exact actuation,
    /// no slip and no execution error.
    pub fn benign() -> Self {
        MissionConfig {
            docking: DockingParams { position_noise_m: 0.0, heading_noise_deg: 0.0, ..DockingParams::default() },
            render: RenderOptions::noiseless(),
            cloud: CloudSpec { noise_sigma_m: 0.0, ..CloudSpec::default() },
            slip_probability: 0.0,
            grasp_noise_mm: 0.0,
            ..MissionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_patrol_visits >= 1
            && self.frames >= 1
            && (0.0..=1.0).contains(&self.slip_probability)
            && self.grasp_noise_mm >= 0.0
            && self.correct_grasp_mm > 0.0
            && self.weak_grasp_mm >= self.correct_grasp_mm
            && self.width_tolerance_mm > 0.0
            && self.camera_offset_limit_m >= 0.0
            && self.change_side_range_m > 0.5
            && self.rotation_waypoints >= 4;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid mission configuration".into()))
        }
    }
}

/// Final grasp outcome of a mission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GraspCategory {
    /// The right wrench, held well enough to turn the valve.
    CorrectGrasp,
    /// The right wrench, held too poorly to turn the valve.
    Grasp,
    /// The wrench slipped and no usable wrench was left.
    Loss,
    /// A wrench with the wrong jaw was picked.
    WrongWrench,
    /// The mission stopped before any grasp.
    NotReached,
}

impl GraspCategory {
    pub fn scores(self) -> bool {
        matches!(self, GraspCategory::CorrectGrasp | GraspCategory::Grasp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: usize,
    pub state: MissionState,
    pub event: MissionEvent,
    pub next: MissionState,
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionReport {
    pub seed: u64,
    pub trace: Vec<TraceRow>,
    pub final_state: MissionState,
    pub correct_recognition: bool,
    pub category: GraspCategory,
    pub grasp_attempts: usize,
    pub docking: Vec<DockingEstimate>,
    /// Perceived grasp-point error of the last attempt, millimeters.
    pub grasp_error_mm: Option<f64>,
    pub valve: Option<ValveEstimate>,
    pub valve_angle_error_deg: Option<f64>,
}

impl MissionReport {
    pub fn visited(&self, state: MissionState) -> bool {
        self.trace.iter().any(|r| r.state == state || r.next == state)
    }

    pub fn count_entries(&self, state: MissionState) -> usize {
        self.trace.iter().filter(|r| r.next == state && r.state != state).count()
    }

    /// Checks that every row is what `step` gives and that rows chain.
    pub fn replay(&self, table: &TransitionTable) -> Result<()> {
        let mut state = MissionState::NavigatePatrol;
        for row in &self.trace {
            if row.state != state {
                return Err(Error::ContractViolation(format!("tick {}: trace breaks at {}", row.tick, row.state)));
            }
            let next = step(row.state, row.event, table);
            if next != row.next {
                return Err(Error::ContractViolation(format!("tick {}: {} on {} gives {next}", row.tick, row.state, row.event)));
            }
            state = next;
        }
        if state != self.final_state {
            return Err(Error::ContractViolation("final state differs from trace".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mission seed {}", self.seed);
        let _ = writeln!(s, "{:>4}  {:<20} {:<20} {:<20} payload", "tick", "state", "event", "next");
        for r in &self.trace {
            let _ = writeln!(
                s,
                "{:>4}  {:<20} {:<20} {:<20} {}",
                r.tick,
                r.state.to_string(),
                r.event.to_string(),
                r.next.to_string(),
                r.payload
            );
        }
        let _ = writeln!(s, "final state          {}", self.final_state);
        let _ = writeln!(s, "correct recognition  {}", self.correct_recognition);
        let _ = writeln!(s, "grasp category       {:?}", self.category);
        let _ = writeln!(s, "grasp attempts       {}", self.grasp_attempts);
        if let Some(e) = self.grasp_error_mm {
            let _ = writeln!(s, "grasp error mm       {e:.3}");
        }
        if let Some(v) = &self.valve {
            let _ = writeln!(s, "valve angle deg      {:.3}", v.stem_angle_deg);
        }
        if let Some(e) = self.valve_angle_error_deg {
            let _ = writeln!(s, "valve angle error    {e:.3}");
        }
        s
    }
}

/// Category counts over many missions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MissionSummary {
    pub missions: usize,
    pub correct_recognition: usize,
    pub correct_grasp: usize,
    pub grasp: usize,
    pub loss: usize,
    pub wrong_wrench: usize,
    pub not_reached: usize,
    pub done: usize,
    pub emergency_stop: usize,
}

impl MissionSummary {
    pub fn of(reports: &[MissionReport]) -> Self {
        let mut m = MissionSummary { missions: reports.len(), ..Default::default() };
        for r in reports {
            m.correct_recognition += usize::from(r.correct_recognition);
            match r.category {
                GraspCategory::CorrectGrasp => m.correct_grasp += 1,
                GraspCategory::Grasp => m.grasp += 1,
                GraspCategory::Loss => m.loss += 1,
                GraspCategory::WrongWrench => m.wrong_wrench += 1,
                GraspCategory::NotReached => m.not_reached += 1,
            }
            match r.final_state {
                MissionState::Done => m.done += 1,
                MissionState::EmergencyStop => m.emergency_stop += 1,
                _ => {}
            }
        }
        m
    }

    pub fn scoring(&self) -> usize {
        self.correct_grasp + self.grasp
    }

    fn pct(&self, n: usize) -> f64 {
        if self.missions == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.missions as f64
        }
    }

    /// Category table in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "missions {}", self.missions);
        let _ = writeln!(
            s,
            "{:>20} {:>14} {:>8} {:>8} {:>8}",
            "Correct Recognition", "Correct Grasp", "Grasp", "Loss", "Scoring"
        );
        let _ = writeln!(
            s,
            "{:>19.1}% {:>13.1}% {:>7.1}% {:>7.1}% {:>7.1}%",
            self.pct(self.correct_recognition),
            self.pct(self.correct_grasp),
            self.pct(self.grasp),
            self.pct(self.loss),
            self.pct(self.scoring())
        );
        let _ = writeln!(
            s,
            "wrong wrench {}  not reached {}  done {}  emergency stop {}",
            self.wrong_wrench, self.not_reached, self.done, self.emergency_stop
        );
        s
    }
}

struct Machine {
    table: TransitionTable,
    state: MissionState,
    trace: Vec<TraceRow>,
}

impl Machine {
    fn fire(&mut self, event: MissionEvent, payload: impl Into<String>) {
        let next = step(self.state, event, &self.table);
        self.trace.push(TraceRow { tick: self.trace.len(), state: self.state, event, next, payload: payload.into() });
        self.state = next;
    }
}

/// One located wrench head with its median estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WrenchTrack {
    pub bbox: BBox,
    /// Scene wrench under the box, by best overlap.
    pub wrench: Option<usize>,
    pub estimate: AccumulatedEstimate,
    pub handle_bbox: BBox,
}

fn match_wrench(sc: &Scenario, cam: &PinholeCamera, b: &BBox) -> Option<usize> {
    (0..sc.scene.wrenches.len())
        .filter_map(|i| head_bbox_truth(&sc.scene, i, cam).map(|t| (i, t.iou(b))))
        .filter(|&(_, iou)| iou >= 0.3)
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
}

/// Renders `cfg.frames` inspection frames from `cam` and accumulates a
/// median estimate for every head box. The robot is static, so the boxes
/// hold for the whole window. Heads without a full window are dropped.
pub fn track_wrenches(
    sc: &Scenario,
    cam: &PinholeCamera,
    heads: &[BBox],
    cfg: &MissionConfig,
    seed: u64,
) -> Result<Vec<WrenchTrack>> {
    let intr = Intrinsics::default();
    let frames: Vec<_> = (0..cfg.frames)
        .map(|f| {
            render_panel_image(
                &sc.scene,
                sc.scene.wrench_side,
                cam,
                (intr.width, intr.height),
                &cfg.render,
                seed::derive_indexed(seed, "wrench-frame", f as u64),
            )
        })
        .collect::<Result<_>>()?;
    let mut heads = heads.to_vec();
    heads.sort_by_key(|b| (b.x, b.y));
    let mut tracks = Vec::new();
    for (k, b) in heads.iter().enumerate() {
        let wrench = match_wrench(sc, cam, b);
        let mut obs = Vec::new();
        for (f, img) in frames.iter().enumerate() {
            let fs = seed::derive_indexed(seed::derive_indexed(seed, "head", k as u64), "frame", f as u64);
            let handle = match crate::wrench::extend_handle_bbox(b, &img.bounds()) {
                Ok(h) => h,
                Err(_) => break,
            };
            let cloud = match wrench {
                Some(i) => synthesize_handle_cloud(&sc.scene, i, cam, &handle.bbox, &cfg.cloud, seed::derive(fs, "cloud"))?,
                None => Vec::new(),
            };
            if let Ok(o) = observe_wrench(img, &cloud, b, cam, &cfg.wrench, seed::derive(fs, "observe")) {
                obs.push(o);
            }
        }
        if let Ok(estimate) = accumulate_median(&obs, cfg.frames) {
            let handle_bbox = obs[0].handle_bbox.bbox;
            tracks.push(WrenchTrack { bbox: *b, wrench, estimate, handle_bbox });
        }
    }
    Ok(tracks)
}

/// Stereo pair of the valve from the docked pose (camera displaced by
/// `offset`), then the stem estimate.
pub fn observe_valve(scene: &PanelSceneSpec, offset: Vec3, cfg: &MissionConfig, seed: u64) -> Result<ValveEstimate> {
    let intr = Intrinsics::default();
    let rig = valve_rig(scene, &intr, VALVE_CAMERA_DEPTH_M, VALVE_BASELINE_M, offset)?;
    let size = (intr.width, intr.height);
    let left = render_panel_image(scene, scene.wrench_side, &rig.left, size, &cfg.render, seed::derive(seed, "valve-left"))?;
    let right = render_panel_image(scene, scene.wrench_side, &rig.right, size, &cfg.render, seed::derive(seed, "valve-right"))?;
    match (valve_roi(scene, &rig.left, cfg.valve_roi_margin), valve_roi(scene, &rig.right, cfg.valve_roi_margin)) {
        (Some(rl), Some(rr)) => estimate_valve_stereo(
            &left,
            &right,
            &rl,
            &rr,
            &rig,
            expected_edge_px(scene, intr.fx, VALVE_CAMERA_DEPTH_M),
            &cfg.valve,
            seed::derive(seed, "valve"),
        ),
        _ => Err(Error::ValveNotFound),
    }
}

/// Closed-loop mission on a scenario.
pub fn run_mission(sc: &Scenario, cfg: &MissionConfig, locator: HeadLocator<'_>, seed: u64) -> Result<MissionReport> {
    sc.validate()?;
    cfg.validate()?;
    use MissionEvent as E;
    let mut m = Machine { table: TransitionTable::standard(), state: MissionState::NavigatePatrol, trace: Vec::new() };
    let mut report = MissionReport {
        seed,
        trace: Vec::new(),
        final_state: MissionState::NavigatePatrol,
        correct_recognition: false,
        category: GraspCategory::NotReached,
        grasp_attempts: 0,
        docking: Vec::new(),
        grasp_error_mm: None,
        valve: None,
        valve_angle_error_deg: None,
    };
    let finish = |m: Machine, mut report: MissionReport| {
        report.final_state = m.state;
        report.trace = m.trace;
        Ok(report)
    };

    let dims = (sc.arena.panel.width_m, sc.arena.panel.thickness_m);
    let mut wp = 0;
    let mut found = None;
    for visit in 0..cfg.max_patrol_visits {
        let pose = sc.patrol[wp];
        let pts = merged_base_scan(&sc.arena, pose, &sc.robot, &sc.laser, seed::derive_indexed(seed, "patrol-scan", visit as u64))?;
        let search = find_panel(&pts, dims, &cfg.finder, seed::derive_indexed(seed, "patrol-find", visit as u64))?;
        if let Some((cand, _)) = search.best(cfg.finder.min_similarity) {
            m.fire(E::PanelFound, format!("waypoint {wp} similarity {:.3}", cand.similarity));
            found = Some(pose);
            break;
        }
        m.fire(E::PanelNotFound, format!("waypoint {wp}"));
        wp = patrol_next(&sc.patrol, wp)?.0;
    }
    let Some(from) = found else {
        m.fire(E::Emergency, "panel not found");
        return finish(m, report);
    };
    m.fire(E::Tick, "approach");

    let dock = |start: Pose2, label: &str| {
        simulate_docking(&sc.arena, start, &sc.robot, &sc.laser, &cfg.finder, &cfg.docking, seed::derive(seed, label))
    };
    let mut run = match dock(from, "dock") {
        Ok(r) => r,
        Err(e) => {
            m.fire(E::Emergency, format!("docking failed: {}", e.label()));
            return finish(m, report);
        }
    };
    report.docking.push(run.report);
    m.fire(E::Docked, format!("d {:.3} o {:.3} alpha {:.2}", run.report.d, run.report.o, run.report.alpha));

    let intr = Intrinsics::default();
    let panel = &sc.arena.panel;
    let mut changed_side = false;
    let (cam, heads_box) = loop {
        let side = facing_side(panel, run.final_pose.x_m, run.final_pose.y_m);
        let lim = cfg.camera_offset_limit_m;
        let offset = Vec3::new(
            run.report.o.clamp(-lim, lim),
            0.0,
            (run.report.d - cfg.docking.distance_m).clamp(-lim, lim),
        );
        let mut visible = Vec::new();
        let mut cam = None;
        if side == sc.scene.wrench_side {
            let c = wrench_camera(&sc.scene, &intr, WRENCH_CAMERA_DEPTH_M, offset)?;
            visible = match locator {
                HeadLocator::Truth => (0..sc.scene.wrenches.len()).filter_map(|i| head_bbox_truth(&sc.scene, i, &c)).collect(),
                HeadLocator::Cascade(cascade, params) => {
                    let img = render_panel_image(
                        &sc.scene,
                        side,
                        &c,
                        (intr.width, intr.height),
                        &cfg.render,
                        seed::derive_indexed(seed, "wrench-frame", 0),
                    )?;
                    detect(&img, cascade, &params)?.into_iter().map(|d| d.bbox).collect()
                }
            };
            cam = Some(c);
        }
        if let (Some(c), false) = (cam, visible.is_empty()) {
            m.fire(E::WrenchesVisible, format!("{} heads on {:?} side", visible.len(), side));
            break (c, visible);
        }
        if changed_side {
            m.fire(E::Emergency, "no wrenches on either side");
            return finish(m, report);
        }
        m.fire(E::WrenchesNotVisible, format!("{side:?} side"));
        changed_side = true;
        let other = side.other();
        let n = panel.front_normal();
        let k = match other {
            PanelSide::Front => 1.0,
            PanelSide::Back => -1.0,
        };
        let r = cfg.change_side_range_m;
        let (x, y) = (panel.x_m + k * n.x * r, panel.y_m + k * n.y * r);
        let heading = (-k * n.y).atan2(-k * n.x).to_degrees();
        run = match dock(Pose2::new(x, y, heading), "dock-other-side") {
            Ok(r) => r,
            Err(e) => {
                m.fire(E::Emergency, format!("docking failed: {}", e.label()));
                return finish(m, report);
            }
        };
        report.docking.push(run.report);
        m.fire(E::Docked, format!("d {:.3} o {:.3} alpha {:.2}", run.report.d, run.report.o, run.report.alpha));
    };

    let tracks = track_wrenches(sc, &cam, &heads_box, cfg, seed)?;
    let widths: Vec<(usize, f64)> = tracks.iter().enumerate().map(|(k, t)| (k, t.estimate.jaw_width_mm)).collect();
    let (first, backup) = match select_target(&widths, sc.scene.target_jaw_mm, cfg.width_tolerance_mm) {
        Ok(p) => p,
        Err(e) => {
            m.fire(E::Emergency, format!("recognition failed: {}", e.label()));
            return finish(m, report);
        }
    };
    let usable = sc.scene.usable_indices();
    let is_usable = |t: &WrenchTrack| t.wrench.is_some_and(|i| usable.contains(&i));
    report.correct_recognition = is_usable(&tracks[first]);

    let mut rng = seed::rng_for(seed, "grasp");
    let noise = Normal::new(0.0, cfg.grasp_noise_mm).map_err(|e| Error::Config(e.to_string()))?;
    let mut candidates = vec![first];
    candidates.extend(backup);
    let mut held = None;
    for (attempt, &ti) in candidates.iter().enumerate() {
        let t = &tracks[ti];
        if attempt > 0 {
            m.fire(E::Tick, "retry with backup wrench");
        }
        m.fire(
            E::TargetRecognized,
            format!("head {} at ({}, {}) jaw {:.2} mm", ti, t.bbox.x, t.bbox.y, t.estimate.jaw_width_mm),
        );
        report.grasp_attempts += 1;
        if !is_usable(t) {
            report.category = GraspCategory::WrongWrench;
            m.fire(E::GraspWeak, "wrong wrench");
            return finish(m, report);
        }
        let i = t.wrench.expect("usable wrench is matched");
        let truth = handle_centroid_truth(&sc.scene, i, &cam, &t.handle_bbox)
            .ok_or_else(|| Error::ContractViolation("handle outside the view".into()))?;
        let perceived = cam.camera_to_world(t.estimate.grasp_point).distance(truth) * 1000.0;
        let err = perceived + noise.sample(&mut rng).abs();
        report.grasp_error_mm = Some(err);
        let slipped = rng.random_bool(cfg.slip_probability);
        if slipped || err > cfg.weak_grasp_mm {
            report.category = GraspCategory::Loss;
            m.fire(E::WrenchLost, format!("grasp error {err:.2} mm, slipped {slipped}"));
            continue;
        }
        if err > cfg.correct_grasp_mm {
            report.category = GraspCategory::Grasp;
            m.fire(E::GraspWeak, format!("grasp error {err:.2} mm"));
            return finish(m, report);
        }
        report.category = GraspCategory::CorrectGrasp;
        m.fire(E::GraspOk, format!("grasp error {err:.2} mm"));
        held = Some(ti);
        break;
    }
    let Some(ti) = held else {
        m.fire(E::WrenchLost, "no usable wrench left");
        return finish(m, report);
    };

    let lim = cfg.camera_offset_limit_m;
    let offset = Vec3::new(run.report.o.clamp(-lim, lim), 0.0, (run.report.d - cfg.docking.distance_m).clamp(-lim, lim));
    let estimate = observe_valve(&sc.scene, offset, cfg, seed);
    let valve = match estimate {
        Ok(v) => v,
        Err(e) => {
            m.fire(E::Emergency, format!("valve estimate failed: {}", e.label()));
            return finish(m, report);
        }
    };
    report.valve = Some(valve);
    report.valve_angle_error_deg = Some(angular_distance(valve.stem_angle_deg, sc.scene.valve.stem_angle_deg, 90.0));
    m.fire(E::ValveAligned, format!("stem angle {:.2} deg", valve.stem_angle_deg));

    let est = &tracks[ti].estimate;
    let lever = est.grasp_point.distance(est.grip_center_3d);
    let path = valve_rotation_waypoints(valve.center_3d, lever, cfg.rotation_waypoints, cfg.clockwise, valve.stem_angle_deg)?;
    m.fire(E::RotationComplete, format!("{} waypoints radius {:.3} m", path.len(), lever));
    finish(m, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scenario, GenParams};
    use std::collections::{BTreeSet, VecDeque};

    #[test]
    fn documented_edges() {
        let t = TransitionTable::standard();
        use MissionEvent as E;
        use MissionState as S;
        assert_eq!(step(S::RecognizeWrench, E::TargetRecognized, &t), S::GraspWrench);
        assert_eq!(step(S::OperateValve, E::WrenchLost, &t), S::WrenchLostRecovery);
        for s in S::ALL {
            assert_eq!(step(s, E::Emergency, &t), S::EmergencyStop);
        }
        assert_eq!(step(S::Dock, E::ValveAligned, &t), S::Dock);
        for e in E::ALL {
            assert_eq!(step(S::EmergencyStop, e, &t), S::EmergencyStop);
        }
    }

    #[test]
    fn every_state_reachable() {
        let t = TransitionTable::standard();
        let mut seen = BTreeSet::from([MissionState::NavigatePatrol]);
        let mut queue = VecDeque::from([MissionState::NavigatePatrol]);
        while let Some(s) = queue.pop_front() {
            for e in MissionEvent::ALL {
                let n = step(s, e, &t);
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        assert_eq!(seen.len(), MissionState::ALL.len());
    }

    #[test]
    fn patrol_cycles() {
        let wps = [Pose2::new(0.0, 0.0, 0.0), Pose2::new(1.0, 0.0, 0.0)];
        assert_eq!(patrol_next(&wps, 1).unwrap().0, 0);
        assert_eq!(patrol_next(&wps[..1], 0).unwrap().0, 0);
        assert!(patrol_next(&[], 0).is_err());
        let three = [wps[0], wps[1], Pose2::new(2.0, 0.0, 0.0)];
        let mut counts = [0; 3];
        let mut i = 0;
        for _ in 0..3 * 7 {
            i = patrol_next(&three, i).unwrap().0;
            counts[i] += 1;
        }
        assert_eq!(counts, [7, 7, 7]);
    }

    #[test]
    fn rotation_waypoints() {
        let c = Vec3::new(0.2, -0.1, 0.05);
        let w = valve_rotation_waypoints(c, 0.1, 4, true, 0.0).unwrap();
        let angles: Vec<f64> = w.iter().map(|p| p.angle_deg).collect();
        assert_eq!(angles, vec![0.0, -90.0, -180.0, -270.0]);
        for p in &w {
            assert!((p.position.distance(c) - 0.1).abs() < 1e-12);
            assert!(p.tangent.dot(p.position - c).abs() < 1e-12);
        }
        // clockwise seen from +Z: first tangent at angle 0 points to −Y
        assert!(w[0].tangent.y < -0.99);
        let w36 = valve_rotation_waypoints(c, 0.1, 36, true, 17.0).unwrap();
        let steps: Vec<f64> = w36.windows(2).map(|p| p[0].angle_deg - p[1].angle_deg).collect();
        assert!(steps.iter().all(|s| (s - 10.0).abs() < 1e-12));
        let sweep = steps.iter().sum::<f64>() + 10.0;
        assert!((sweep - 360.0).abs() < 1e-9);
        assert!(valve_rotation_waypoints(c, 0.0, 36, true, 0.0).is_err());
        assert!(valve_rotation_waypoints(c, 0.1, 3, true, 0.0).is_err());
    }

    #[test]
    fn benign_mission_scores() {
        let sc = generate_scenario(&GenParams::default(), 3).unwrap();
        let r = run_mission(&sc, &MissionConfig::benign(), HeadLocator::Truth, 1).unwrap();
        assert_eq!(r.final_state, MissionState::Done, "{}", r.to_text());
        assert_eq!(r.category, GraspCategory::CorrectGrasp);
        assert!(r.correct_recognition);
        r.replay(&TransitionTable::standard()).unwrap();
        assert_eq!(r.trace[0].state, MissionState::NavigatePatrol);
        let again = run_mission(&sc, &MissionConfig::benign(), HeadLocator::Truth, 1).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn far_side_wrenches_change_side_once() {
        let mut sc = generate_scenario(&GenParams::default(), 4).unwrap();
        sc.scene.wrench_side = facing_side(&sc.arena.panel, sc.start.x_m, sc.start.y_m).other();
        let r = run_mission(&sc, &MissionConfig::benign(), HeadLocator::Truth, 2).unwrap();
        assert_eq!(r.count_entries(MissionState::ChangeSide), 1, "{}", r.to_text());
        assert_eq!(r.final_state, MissionState::Done);
    }

    #[test]
    fn forced_slip_uses_backup() {
        let sc = generate_scenario(&GenParams::default(), 5).unwrap();
        let cfg = MissionConfig { slip_probability: 1.0, ..MissionConfig::benign() };
        let r = run_mission(&sc, &cfg, HeadLocator::Truth, 3).unwrap();
        assert!(r.visited(MissionState::WrenchLostRecovery));
        assert_eq!(r.grasp_attempts, 2, "{}", r.to_text());
        assert_eq!(r.category, GraspCategory::Loss);
        assert_eq!(r.final_state, MissionState::Done);
        r.replay(&TransitionTable::standard()).unwrap();
    }
}
